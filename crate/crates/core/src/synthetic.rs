//! Seeded toy video corpora: each class is a bright square drifting in its
//! own direction over a noisy background.

use std::f64::consts::TAU;
use std::path::Path;

use crate::datapipe::{write_clip, DataError, DatasetTag, Frames, Manifest, ManifestEntry, Split};
use crate::tensor::Rng;
use crate::trainer::{Sample, TaskData};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternStyle {
    pub background: f64,
    pub foreground: f64,
    /// Pixel noise standard deviation.
    pub noise: f64,
}

impl Default for PatternStyle {
    fn default() -> Self {
        PatternStyle {
            background: 40.0,
            foreground: 210.0,
            noise: 8.0,
        }
    }
}

/// One clip of class `class` out of `classes`.
pub fn moving_pattern(class: usize, classes: usize, dims: [usize; 3], style: PatternStyle, rng: &mut Rng) -> Frames {
    let [t, h, w] = dims;
    let side = (h.min(w) / 4).max(2) as f64;
    let angle = TAU * class as f64 / classes as f64;
    let speed = h.min(w) as f64 / (2.0 * t.max(1) as f64);
    let jitter = h.min(w) as f64 / 8.0;
    let cy = h as f64 / 2.0 + rng.uniform(-jitter, jitter) - angle.sin() * speed * t as f64 / 2.0;
    let cx = w as f64 / 2.0 + rng.uniform(-jitter, jitter) - angle.cos() * speed * t as f64 / 2.0;
    let mut pixels = Vec::with_capacity(t * h * w);
    for f in 0..t {
        let y0 = cy + angle.sin() * speed * f as f64 - side / 2.0;
        let x0 = cx + angle.cos() * speed * f as f64 - side / 2.0;
        for r in 0..h {
            for c in 0..w {
                let inside = (r as f64) >= y0 && (r as f64) < y0 + side && (c as f64) >= x0 && (c as f64) < x0 + side;
                let base = if inside { style.foreground } else { style.background };
                pixels.push((base + style.noise * rng.normal()).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Frames::new(t, h, w, pixels).expect("dims match")
}

/// `per_class` samples of every class, class-major.
pub fn pattern_samples(classes: usize, per_class: usize, dims: [usize; 3], style: PatternStyle, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::with_capacity(classes * per_class);
    for label in 0..classes {
        for _ in 0..per_class {
            out.push(Sample {
                frames: moving_pattern(label, classes, dims, style, rng),
                label,
            });
        }
    }
    out
}

pub fn pattern_task(tag: DatasetTag, classes: usize, train_per_class: usize, val_per_class: usize, dims: [usize; 3], seed: u64) -> TaskData {
    let root = Rng::new(seed);
    let style = PatternStyle::default();
    TaskData {
        tag,
        classes,
        train: pattern_samples(classes, train_per_class, dims, style, &mut root.substream("train")),
        val: pattern_samples(classes, val_per_class, dims, style, &mut root.substream("val")),
    }
}

/// Class label strings used by the on-disk corpora.
pub fn label_name(class: usize) -> String {
    format!("word{class:02}")
}

/// Raw corpus on disk: clips of varying length and frame size `frame_hw`,
/// an unsplit manifest, and a crop-box sidecar centring each pattern's
/// track. Returns the manifest.
pub fn write_raw_corpus(
    dir: &Path,
    tag: DatasetTag,
    classes: usize,
    per_class: usize,
    lengths: std::ops::RangeInclusive<usize>,
    frame_hw: [usize; 2],
    seed: u64,
) -> Result<Manifest, DataError> {
    let mut rng = Rng::new(seed).substream(&format!("raw/{tag}"));
    let mut entries = Vec::new();
    let mut boxes = String::new();
    for class in 0..classes {
        for i in 0..per_class {
            let t = lengths.start() + rng.below(lengths.end() - lengths.start() + 1);
            let frames = moving_pattern(class, classes, [t, frame_hw[0], frame_hw[1]], PatternStyle::default(), &mut rng);
            let clip_id = format!("{tag}-{}-{i:03}", label_name(class));
            // relative to the manifest, which sits in `raw/`
            let rel = format!("{tag}/{clip_id}.mclp");
            write_clip(&dir.join("raw").join(&rel), &frames)?;
            boxes.push_str(&format!("{clip_id} {} {}\n", frame_hw[1] / 2, frame_hw[0] / 2));
            entries.push(ManifestEntry {
                path: rel,
                clip_id,
                dataset: tag,
                label: label_name(class),
                split: None,
            });
        }
    }
    crate::datapipe::write_atomic(&dir.join(format!("raw/{tag}.boxes")), boxes.as_bytes())?;
    let manifest = Manifest::new(entries)?;
    manifest.write(&dir.join(format!("raw/{tag}.tsv")))?;
    Ok(manifest)
}

/// Prepared corpus on disk: clips already at `dims`, with a split manifest
/// holding `counts` (train, val, test) clips per class.
pub fn write_prepared_corpus(dir: &Path, tag: DatasetTag, classes: usize, counts: [usize; 3], dims: [usize; 3], seed: u64) -> Result<Manifest, DataError> {
    let mut rng = Rng::new(seed).substream(&format!("prepared/{tag}"));
    let mut entries = Vec::new();
    for class in 0..classes {
        for (split, n) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts) {
            for i in 0..n {
                let frames = moving_pattern(class, classes, dims, PatternStyle::default(), &mut rng);
                let clip_id = format!("{tag}-{}-{}-{i:03}", label_name(class), split.as_str());
                let rel = format!("clips/{tag}/{clip_id}.mclp");
                write_clip(&dir.join(&rel), &frames)?;
                entries.push(ManifestEntry {
                    path: rel,
                    clip_id,
                    dataset: tag,
                    label: label_name(class),
                    split: Some(split),
                });
            }
        }
    }
    let manifest = Manifest::new(entries)?;
    manifest.write(&dir.join(format!("{tag}.tsv")))?;
    Ok(manifest)
}
