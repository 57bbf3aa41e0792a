//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mouthing_core::eval::RowKey;
use mouthing_core::{BaselineSpec, DatasetTag, RunKind, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub perturb: PerturbSection,
    pub output: OutputSection,
}

/// Raw inputs for `prepare` and the prepared-data root everything else
/// reads from. Prepared manifests live at `{root}/{tag}.tsv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    pub frames: usize,
    pub crop_size: usize,
    /// Clips drawn per class before splitting. Unset means the size of
    /// the smallest class.
    pub per_class: Option<usize>,
    /// train : val : test
    pub ratios: [usize; 3],
    pub train_per_class: Option<usize>,
    pub split_seed: u64,
    /// Keyed by dataset tag.
    pub raw: BTreeMap<String, RawSource>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("prepared"),
            frames: mouthing_core::datapipe::TARGET_FRAMES,
            crop_size: mouthing_core::datapipe::CROP_SIZE,
            per_class: None,
            ratios: [8, 1, 1],
            train_per_class: None,
            split_seed: 0,
            raw: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSource {
    pub manifest: PathBuf,
    pub cropboxes: PathBuf,
}

/// Which run this is. Overrides `train.kind` and `train.tasks` when set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: Option<RunKind>,
    pub datasets: Option<Vec<DatasetTag>>,
    /// Fine-tuning source task; its baseline checkpoint under the output
    /// directory is used unless `train.source_checkpoint` is given.
    pub source: Option<DatasetTag>,
    pub name: Option<String>,
}

/// Trunk overrides on top of the full-size architecture. Input size
/// defaults to the prepared clip size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub frames: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub conv_channels: Option<[usize; 3]>,
    pub gru_hidden: Option<usize>,
    pub gru_layers: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSection {
    /// Defaults to `train.noise_sigma`.
    pub sigma: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("runs") }
    }
}

fn absolutize(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Read a config and resolve its relative paths against the file's
    /// directory. Experiment overrides are folded into `train`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        cfg.resolve_paths(base);
        cfg.apply_experiment();
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.data.root);
        absolutize(base, &mut self.output.dir);
        for raw in self.data.raw.values_mut() {
            absolutize(base, &mut raw.manifest);
            absolutize(base, &mut raw.cropboxes);
        }
        if let Some(p) = self.train.source_checkpoint.as_mut() {
            absolutize(base, p);
        }
    }

    pub fn apply_experiment(&mut self) {
        if let Some(kind) = self.experiment.kind {
            self.train.kind = kind;
        }
        if let Some(ds) = &self.experiment.datasets {
            self.train.tasks = ds.clone();
        }
        if self.train.kind == RunKind::Finetune && self.train.source_checkpoint.is_none() {
            if let Some(src) = self.experiment.source {
                let dir = self.output.dir.join(RowKey::Baseline(src).run_name());
                self.train.source_checkpoint = Some(dir.join(crate::BEST_CHECKPOINT));
            }
        }
    }

    /// Point the run tree somewhere else. A derived fine-tuning source
    /// follows it.
    pub fn set_output_dir(&mut self, dir: PathBuf) {
        let derived = self.experiment.source.map(|s| self.output.dir.join(RowKey::Baseline(s).run_name()).join(crate::BEST_CHECKPOINT));
        self.output.dir = dir;
        if derived.is_some() && self.train.source_checkpoint == derived {
            self.train.source_checkpoint = None;
            self.apply_experiment();
        }
    }

    pub fn raw_sources(&self) -> Result<Vec<(DatasetTag, &RawSource)>> {
        self.data
            .raw
            .iter()
            .map(|(k, v)| Ok((k.parse::<DatasetTag>().map_err(anyhow::Error::msg)?, v)))
            .collect()
    }

    pub fn prepared_manifest(&self, tag: DatasetTag) -> PathBuf {
        self.data.root.join(format!("{tag}.tsv"))
    }

    pub fn noise_sigma(&self) -> f64 {
        self.perturb.sigma.unwrap_or(self.train.noise_sigma)
    }

    pub fn spec(&self, num_classes: usize) -> BaselineSpec {
        let full = BaselineSpec::full(num_classes);
        let m = &self.model;
        BaselineSpec {
            frames: m.frames.unwrap_or(self.data.frames),
            height: m.height.unwrap_or(self.data.crop_size),
            width: m.width.unwrap_or(self.data.crop_size),
            conv_channels: m.conv_channels.unwrap_or(full.conv_channels),
            gru_hidden: m.gru_hidden.unwrap_or(full.gru_hidden),
            gru_layers: m.gru_layers.unwrap_or(full.gru_layers),
            ..full
        }
    }

    pub fn clip_dims(&self) -> [usize; 3] {
        let s = self.spec(1);
        [s.frames, s.height, s.width]
    }

    /// Table row this run fills, if any.
    pub fn row(&self) -> Option<RowKey> {
        let t = &self.train;
        match t.kind {
            RunKind::Baseline => t.tasks.first().map(|&x| RowKey::Baseline(x)),
            RunKind::Finetune if t.tasks == [DatasetTag::M] => self.experiment.source.map(RowKey::Finetune),
            RunKind::Finetune => None,
            RunKind::Dann => Some(RowKey::Dann),
            RunKind::Mtl if t.target() == DatasetTag::M && t.tasks.len() > 1 => {
                let aux: Vec<DatasetTag> = t.tasks.iter().copied().filter(|&x| x != DatasetTag::M).collect();
                Some(RowKey::mtl(&aux))
            }
            RunKind::Mtl => None,
        }
    }

    pub fn run_name(&self) -> String {
        if let Some(name) = &self.experiment.name {
            return name.clone();
        }
        self.row().map(|r| r.run_name()).unwrap_or_else(|| {
            let kind = format!("{:?}", self.train.kind).to_lowercase();
            let tags: Vec<&str> = self.train.tasks.iter().map(|t| t.as_str()).collect();
            format!("{kind}-{}", tags.join("+"))
        })
    }

    /// Every problem with the config, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.train.violations();
        let d = &self.data;
        if d.frames == 0 {
            v.push("data.frames must be at least 1".into());
        }
        if d.crop_size == 0 {
            v.push("data.crop_size must be at least 1".into());
        }
        if d.ratios.iter().sum::<usize>() == 0 {
            v.push("data.ratios must not all be zero".into());
        }
        if d.per_class == Some(0) {
            v.push("data.per_class must be at least 1".into());
        }
        for key in d.raw.keys() {
            match key.parse::<DatasetTag>() {
                Ok(DatasetTag::Mbar) => v.push("data.raw.Mbar: the perturbed set is derived, not prepared".into()),
                Ok(_) => {}
                Err(e) => v.push(format!("data.raw: {e}")),
            }
        }
        if let Err(e) = self.spec(2).feature_width() {
            v.push(format!("model: {e}"));
        }
        if matches!(self.perturb.sigma, Some(s) if s.is_nan() || s < 0.0) {
            v.push("perturb.sigma must be non-negative".into());
        }
        if self.train.kind == RunKind::Finetune && self.experiment.source == Some(DatasetTag::Mbar) {
            v.push("experiment.source cannot be Mbar".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  {}", v.join("\n  "))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
