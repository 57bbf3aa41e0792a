//! Raw clips to training-ready clips: balance, split and trim the raw
//! manifest, then crop and standardize the selected clips.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;

use mouthing_core::datapipe::{balance_and_split, crop_window, read_clip, read_cropboxes, resolve, standardize_frames, trim_train, write_clip};
use mouthing_core::{DataError, DatasetTag, Manifest, ManifestEntry};

use crate::config::{ExperimentConfig, RawSource};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrepareStatus {
    Prepared { clips: usize },
    AlreadyPrepared,
}

/// A prepared manifest counts as complete when every clip it lists exists.
fn is_complete(manifest_path: &Path, root: &Path) -> bool {
    Manifest::read(manifest_path).is_ok_and(|m| m.entries.iter().all(|e| resolve(root, &e.path).is_file()))
}

fn smallest_class_size(manifest: &Manifest) -> usize {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *sizes.entry(e.label.as_str()).or_insert(0) += 1;
    }
    sizes.values().copied().min().unwrap_or(0)
}

pub fn prepare_dataset(cfg: &ExperimentConfig, tag: DatasetTag, raw: &RawSource) -> Result<PrepareStatus> {
    let d = &cfg.data;
    let out_manifest = cfg.prepared_manifest(tag);
    if is_complete(&out_manifest, &d.root) {
        return Ok(PrepareStatus::AlreadyPrepared);
    }
    let manifest = Manifest::read(&raw.manifest)?;
    if let Some(e) = manifest.entries.iter().find(|e| e.dataset != tag) {
        anyhow::bail!("{}: clip {} belongs to {}, expected {tag}", raw.manifest.display(), e.clip_id, e.dataset);
    }
    let boxes = read_cropboxes(&raw.cropboxes)?;
    if let Some(e) = manifest.entries.iter().find(|e| !boxes.contains_key(&e.clip_id)) {
        return Err(DataError::MissingCropBox(e.clip_id.clone()).into());
    }

    let per_class = d.per_class.unwrap_or_else(|| smallest_class_size(&manifest));
    let mut selected = balance_and_split(&manifest, per_class, d.ratios, d.split_seed)?;
    if let Some(n) = d.train_per_class {
        selected = trim_train(&selected, n, d.split_seed)?;
    }

    let raw_base = raw.manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = selected
        .entries
        .par_iter()
        .map(|e| -> Result<ManifestEntry> {
            let rel = format!("clips/{tag}/{}.mclp", e.clip_id);
            let dest = d.root.join(&rel);
            // clips finished by an interrupted earlier run are kept
            if !dest.is_file() {
                let src = resolve(raw_base, &e.path);
                let frames = read_clip(&src)?;
                let cropped = crop_window(&frames, &boxes[&e.clip_id], d.crop_size).with_context(|| format!("clip {}", e.clip_id))?;
                write_clip(&dest, &standardize_frames(&cropped, d.frames)?)?;
            }
            Ok(ManifestEntry { path: rel, ..e.clone() })
        })
        .collect::<Result<_>>()?;
    let clips = entries.len();
    Manifest::new(entries)?.write(&out_manifest)?;
    Ok(PrepareStatus::Prepared { clips })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<BTreeMap<DatasetTag, PrepareStatus>> {
    let sources = cfg.raw_sources()?;
    anyhow::ensure!(!sources.is_empty(), "no [data.raw.<dataset>] sections to prepare");
    let mut out = BTreeMap::new();
    for (tag, raw) in sources {
        let status = prepare_dataset(cfg, tag, raw).with_context(|| format!("preparing {tag}"))?;
        out.insert(tag, status);
    }
    Ok(out)
}
