//! Scoring finished runs and writing the results table.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use mouthing_core::augment::build_perturbed_testset;
use mouthing_core::datapipe::{read_clip, resolve, write_atomic, write_clip};
use mouthing_core::eval::{evaluate_grid, grid_rows, render_table, EvalError, RowKey};
use mouthing_core::trainer::{load_checkpoint, load_samples};
use mouthing_core::{Clip, DatasetTag, Manifest, ManifestEntry, ModelAssembly, ResultsMatrix, Sample, Split};

use crate::config::ExperimentConfig;
use crate::{BEST_CHECKPOINT, RESULTS_FILE, TABLE_FILE};

const MBAR_STAMP: &str = "Mbar.stamp";

fn stamp_text(sigma: f64, seed: u64) -> String {
    format!("sigma {sigma:?}\nseed {seed}\n")
}

fn test_clips(cfg: &ExperimentConfig, tag: DatasetTag) -> Result<Vec<Clip>> {
    let manifest = Manifest::read(&cfg.prepared_manifest(tag)).with_context(|| format!("{tag} is not prepared"))?;
    manifest
        .select(tag, Split::Test)
        .into_iter()
        .map(|e| {
            Ok(Clip {
                frames: read_clip(&resolve(&cfg.data.root, &e.path))?,
                label: e.label.clone(),
                dataset: tag,
                clip_id: e.clip_id.clone(),
            })
        })
        .collect()
}

/// Build the perturbed copy of the `M` test split.
pub fn build_mbar(cfg: &ExperimentConfig) -> Result<Vec<Clip>> {
    Ok(build_perturbed_testset(&test_clips(cfg, DatasetTag::M)?, cfg.noise_sigma(), cfg.perturb.seed)?)
}

/// The perturbed set from the cache under the data root, rebuilding it
/// when the cache is missing or was made with other settings.
pub fn cached_mbar(cfg: &ExperimentConfig) -> Result<Vec<Clip>> {
    let root = &cfg.data.root;
    let stamp = stamp_text(cfg.noise_sigma(), cfg.perturb.seed);
    let manifest_path = cfg.prepared_manifest(DatasetTag::Mbar);
    if std::fs::read_to_string(root.join(MBAR_STAMP)).is_ok_and(|s| s == stamp) {
        if let Ok(m) = Manifest::read(&manifest_path) {
            return m
                .entries
                .iter()
                .map(|e| {
                    Ok(Clip {
                        frames: read_clip(&resolve(root, &e.path))?,
                        label: e.label.clone(),
                        dataset: DatasetTag::Mbar,
                        clip_id: e.clip_id.clone(),
                    })
                })
                .collect();
        }
    }
    let clips = build_mbar(cfg)?;
    let mut entries = Vec::new();
    for c in &clips {
        let rel = format!("clips/Mbar/{}.mclp", c.clip_id);
        write_clip(&root.join(&rel), &c.frames)?;
        entries.push(ManifestEntry {
            path: rel,
            clip_id: c.clip_id.clone(),
            dataset: DatasetTag::Mbar,
            label: c.label.clone(),
            split: Some(Split::Test),
        });
    }
    Manifest::new(entries)?.write(&manifest_path)?;
    write_atomic(&root.join(MBAR_STAMP), stamp.as_bytes())?;
    Ok(clips)
}

fn test_samples(cfg: &ExperimentConfig, tag: DatasetTag, dims: [usize; 3]) -> Result<Vec<Sample>> {
    if tag != DatasetTag::Mbar {
        let manifest = Manifest::read(&cfg.prepared_manifest(tag)).with_context(|| format!("{tag} is not prepared"))?;
        return Ok(load_samples(&manifest, &cfg.data.root, tag, Split::Test, dims)?);
    }
    // labels index through the source set so classes line up with the M head
    let index = Manifest::read(&cfg.prepared_manifest(DatasetTag::M))?.label_index(DatasetTag::M);
    cached_mbar(cfg)?
        .into_iter()
        .map(|c| {
            let label = *index.get(&c.label).with_context(|| format!("perturbed clip {} has unknown label {:?}", c.clip_id, c.label))?;
            Ok(Sample { frames: c.frames, label })
        })
        .collect()
}

/// Run directories to score: the given ones, or every grid row under the
/// output directory.
pub fn resolve_runs(cfg: &ExperimentConfig, dirs: &[PathBuf]) -> Result<Vec<(RowKey, PathBuf)>> {
    if dirs.is_empty() {
        return Ok(grid_rows().into_iter().map(|r| (r.clone(), cfg.output.dir.join(r.run_name()))).collect());
    }
    dirs.iter()
        .map(|d| {
            let name = d.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let row = RowKey::from_run_name(name).with_context(|| format!("{} is not a table run (expected e.g. baseline-M, dann, mtl-GLipsR)", d.display()))?;
            Ok((row, d.clone()))
        })
        .collect()
}

pub struct Report {
    pub matrix: ResultsMatrix,
    pub table: String,
}

pub fn evaluate(cfg: &ExperimentConfig, dirs: &[PathBuf]) -> Result<Report> {
    let runs = resolve_runs(cfg, dirs)?;
    let mut models: Vec<(RowKey, ModelAssembly<f32>)> = Vec::new();
    for (row, dir) in runs {
        let path = dir.join(BEST_CHECKPOINT);
        if !path.is_file() {
            return Err(EvalError::MissingCheckpoint { run: row.run_name(), path }.into());
        }
        let model = load_checkpoint(&path)?.build_model().with_context(|| format!("rebuilding {}", row.run_name()))?;
        models.push((row, model));
    }
    let mut testsets = BTreeMap::new();
    for (row, model) in &models {
        let s = &model.spec;
        let dims = [s.frames, s.height, s.width];
        for col in row.test_sets() {
            if let Entry::Vacant(slot) = testsets.entry(col) {
                slot.insert(test_samples(cfg, col, dims)?);
            }
        }
    }
    let refs: Vec<(RowKey, &ModelAssembly<f32>)> = models.iter().map(|(r, m)| (r.clone(), m)).collect();
    let matrix = evaluate_grid(&refs, &testsets, cfg.train.batch_size)?;
    let table = render_table(&matrix);
    Ok(Report { matrix, table })
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_atomic(&dir.join(RESULTS_FILE), report.matrix.to_results_text().as_bytes())?;
    write_atomic(&dir.join(TABLE_FILE), report.table.as_bytes())?;
    Ok(())
}
