//! Single training runs and the full grid.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use mouthing_core::datapipe::write_atomic;
use mouthing_core::eval::{grid_rows, RowKey};
use mouthing_core::tensor::stable_hash;
use mouthing_core::trainer::{history_text, save_checkpoint, train};
use mouthing_core::{DatasetTag, EpochRecord, Manifest, RunKind, TaskData};

use crate::config::ExperimentConfig;
use crate::{BEST_CHECKPOINT, HISTORY_FILE, LAST_CHECKPOINT, RESOLVED_CONFIG};

/// The resolved config is written last, so its presence marks a finished run.
pub fn is_complete(run_dir: &Path) -> bool {
    [BEST_CHECKPOINT, LAST_CHECKPOINT, HISTORY_FILE, RESOLVED_CONFIG].iter().all(|f| run_dir.join(f).is_file())
}

pub fn load_task(cfg: &ExperimentConfig, tag: DatasetTag) -> Result<TaskData> {
    let path = cfg.prepared_manifest(tag);
    let manifest = Manifest::read(&path).with_context(|| format!("{tag} is not prepared"))?;
    Ok(TaskData::load(&manifest, &cfg.data.root, tag, cfg.clip_dims())?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Trained { dir: PathBuf, best_epoch: u32, epochs: usize },
    Skipped { dir: PathBuf },
}

/// Train one configured run into `{output.dir}/{run name}`.
pub fn run_training(cfg: &ExperimentConfig, resume: bool, log: &mut dyn FnMut(&str)) -> Result<RunStatus> {
    cfg.validate()?;
    let name = cfg.run_name();
    let dir = cfg.output.dir.join(&name);
    if is_complete(&dir) {
        anyhow::ensure!(resume, "run {name} already exists in {}; pass --resume to keep it", dir.display());
        return Ok(RunStatus::Skipped { dir });
    }
    let data = cfg.train.tasks.iter().map(|&t| load_task(cfg, t)).collect::<Result<Vec<_>>>()?;
    let target = data.iter().find(|t| t.tag == cfg.train.target()).map_or(0, |t| t.classes);
    let spec = cfg.spec(target);
    let mut observe = |r: &EpochRecord| {
        let accs: Vec<String> = r.val_accuracy.iter().map(|(k, v)| format!("{k}={v:.2}")).collect();
        let losses: Vec<String> = r.train_loss.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        log(&format!("{name} epoch {} loss {} val {}", r.epoch, losses.join(" "), accs.join(" ")));
    };
    let out = train(&cfg.train, &spec, &data, &mut observe).with_context(|| format!("training {name}"))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    save_checkpoint(&dir.join(BEST_CHECKPOINT), &out.best)?;
    save_checkpoint(&dir.join(LAST_CHECKPOINT), &out.last)?;
    write_atomic(&dir.join(HISTORY_FILE), history_text(&out.history).as_bytes())?;
    write_atomic(&dir.join(RESOLVED_CONFIG), cfg.to_toml()?.as_bytes())?;
    Ok(RunStatus::Trained {
        dir,
        best_epoch: out.best.epoch,
        epochs: out.history.len(),
    })
}

pub fn run_seed(base: u64, name: &str) -> u64 {
    base.wrapping_add(stable_hash(name.as_bytes()))
}

/// Config for one grid row, derived from the template.
pub fn grid_config(template: &ExperimentConfig, row: &RowKey) -> ExperimentConfig {
    let mut cfg = template.clone();
    cfg.train.source_checkpoint = None;
    cfg.experiment.name = None;
    cfg.experiment.source = None;
    let (kind, tasks) = match row {
        RowKey::Baseline(t) => (RunKind::Baseline, vec![*t]),
        RowKey::Finetune(src) => {
            cfg.experiment.source = Some(*src);
            (RunKind::Finetune, vec![DatasetTag::M])
        }
        RowKey::Dann => (RunKind::Dann, vec![DatasetTag::M, DatasetTag::GLipsM]),
        RowKey::Mtl(aux) => (RunKind::Mtl, std::iter::once(DatasetTag::M).chain(aux.iter().copied()).collect()),
    };
    cfg.experiment.kind = Some(kind);
    cfg.experiment.datasets = Some(tasks);
    cfg.train.target_task = None;
    cfg.train.seed = run_seed(template.train.seed, &row.run_name());
    cfg.apply_experiment();
    cfg
}

/// Run every grid row in order. Returns one status per row.
pub fn run_grid(template: &ExperimentConfig, resume: bool, log: &mut dyn FnMut(&str)) -> Result<Vec<(RowKey, RunStatus)>> {
    let rows = grid_rows();
    let configs: Vec<ExperimentConfig> = rows.iter().map(|r| grid_config(template, r)).collect();
    // reject a bad template before any training starts
    for c in &configs {
        let mut v = c.violations();
        // fine-tune sources appear once their baselines finish
        v.retain(|s| !s.contains("source_checkpoint"));
        anyhow::ensure!(v.is_empty(), "invalid configuration for {}:\n  {}", c.run_name(), v.join("\n  "));
    }
    let mut out = Vec::new();
    for (row, cfg) in rows.into_iter().zip(configs) {
        let status = run_training(&cfg, resume, log)?;
        match &status {
            RunStatus::Skipped { .. } => log(&format!("{}: complete, skipped", row.run_name())),
            RunStatus::Trained { best_epoch, epochs, .. } => log(&format!("{}: best epoch {best_epoch} of {epochs}", row.run_name())),
        }
        out.push((row, status));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_the_table_rows() {
        let names: Vec<String> = grid_rows().iter().map(|r| grid_config(&ExperimentConfig::default(), r).run_name()).collect();
        let expected = [
            "baseline-M",
            "baseline-GLipsM",
            "baseline-GLipsR",
            "baseline-LRW",
            "finetune-GLipsM",
            "finetune-GLipsR",
            "finetune-LRW",
            "dann",
            "mtl-GLipsM",
            "mtl-GLipsR",
            "mtl-LRW",
            "mtl-GLipsM+GLipsR",
            "mtl-GLipsM+LRW",
            "mtl-GLipsR+LRW",
            "mtl-GLipsM+GLipsR+LRW",
        ];
        assert_eq!(names, expected);
        let mtl = names.iter().filter(|n| n.starts_with("mtl-")).count();
        assert_eq!(mtl, (1 << 3) - 1);
    }

    #[test]
    fn grid_configs_validate_and_seeds_differ() {
        let template = ExperimentConfig::default();
        let mut seeds = Vec::new();
        for row in grid_rows() {
            let cfg = grid_config(&template, &row);
            assert_eq!(cfg.row().as_ref(), Some(&row));
            assert!(cfg.violations().is_empty(), "{}: {:?}", row.run_name(), cfg.violations());
            seeds.push(cfg.train.seed);
        }
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 15);
    }

    #[test]
    fn finetune_reads_its_baseline() {
        let cfg = grid_config(&ExperimentConfig::default(), &RowKey::Finetune(DatasetTag::GLipsR));
        assert_eq!(cfg.train.source_checkpoint, Some(PathBuf::from("runs/baseline-GLipsR").join(BEST_CHECKPOINT)));
    }

    #[test]
    fn run_seed_is_stable() {
        assert_eq!(run_seed(0, "dann"), stable_hash(b"dann"));
        assert_eq!(run_seed(5, "dann"), stable_hash(b"dann").wrapping_add(5));
    }
}
