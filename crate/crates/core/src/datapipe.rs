//! Clip storage, preprocessing and dataset bookkeeping.
//!
//! Clips are stored in the `MCLP` v1 container (little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `MCLP`                            |
//! | 1     | version, `1`                            |
//! | 4     | `T` (u32)                               |
//! | 4     | `H` (u32)                               |
//! | 4     | `W` (u32)                               |
//! | T·H·W | 8-bit pixels, frame-major then row-major |

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Rng, Tensor, TensorError};

pub const CLIP_MAGIC: &[u8; 4] = b"MCLP";
pub const CLIP_VERSION: u8 = 1;
pub const CLIP_HEADER_LEN: usize = 17;
pub const TARGET_FRAMES: usize = 30;
pub const CROP_SIZE: usize = 96;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic {0:?}, expected \"MCLP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("truncated clip: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("clip has no frames")]
    EmptyClip,
    #[error("frame {height}x{width} is smaller than the {size}x{size} crop")]
    FrameTooSmall { height: usize, width: usize, size: usize },
    #[error("expected a {expected:?} volume, got {got:?}")]
    Dimensions { expected: [usize; 3], got: [usize; 3] },
    #[error("{dataset}/{label}: {available} clips available, {required} required")]
    InsufficientClass {
        dataset: DatasetTag,
        label: String,
        available: usize,
        required: usize,
    },
    #[error("duplicate clip id {0:?}")]
    DuplicateClipId(String),
    #[error("no crop box for clip {0:?}")]
    MissingCropBox(String),
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    M,
    GLipsM,
    GLipsR,
    LRW,
    /// Perturbed copy of the `M` test split.
    Mbar,
}

impl DatasetTag {
    pub const TRAINABLE: [DatasetTag; 4] = [DatasetTag::M, DatasetTag::GLipsM, DatasetTag::GLipsR, DatasetTag::LRW];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::M => "M",
            DatasetTag::GLipsM => "GLipsM",
            DatasetTag::GLipsR => "GLipsR",
            DatasetTag::LRW => "LRW",
            DatasetTag::Mbar => "Mbar",
        }
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" => Ok(DatasetTag::M),
            "GLipsM" => Ok(DatasetTag::GLipsM),
            "GLipsR" => Ok(DatasetTag::GLipsR),
            "LRW" => Ok(DatasetTag::LRW),
            "Mbar" => Ok(DatasetTag::Mbar),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Grayscale `(T, H, W)` pixel volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frames {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
}

impl Frames {
    pub fn new(t: usize, h: usize, w: usize, pixels: Vec<u8>) -> Result<Self> {
        if t == 0 {
            return Err(DataError::EmptyClip);
        }
        if pixels.len() != t * h * w {
            return Err(DataError::Truncated {
                expected: t * h * w,
                got: pixels.len(),
            });
        }
        Ok(Frames { t, h, w, pixels })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }

    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.frame_len()..(i + 1) * self.frame_len()]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.pixels[i * n..(i + 1) * n]
    }
}

/// One labelled video sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub frames: Frames,
    pub label: String,
    pub dataset: DatasetTag,
    pub clip_id: String,
}

pub fn encode_clip(frames: &Frames) -> Vec<u8> {
    let mut out = Vec::with_capacity(CLIP_HEADER_LEN + frames.pixels.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.push(CLIP_VERSION);
    for d in frames.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&frames.pixels);
    out
}

pub fn decode_clip(bytes: &[u8]) -> Result<Frames> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: CLIP_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if &magic != CLIP_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    if bytes.len() < CLIP_HEADER_LEN {
        return Err(DataError::Truncated {
            expected: CLIP_HEADER_LEN,
            got: bytes.len(),
        });
    }
    if bytes[4] != CLIP_VERSION {
        return Err(DataError::Version(bytes[4]));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("four bytes")) as usize;
    let (t, h, w) = (dim(0), dim(1), dim(2));
    let expected = CLIP_HEADER_LEN + t * h * w;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    Frames::new(t, h, w, bytes[CLIP_HEADER_LEN..expected].to_vec())
}

pub fn read_clip(path: &Path) -> Result<Frames> {
    decode_clip(&fs::read(path).map_err(io_err(path))?)
}

/// Write through a temporary file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_clip(path: &Path, frames: &Frames) -> Result<()> {
    write_atomic(path, &encode_clip(frames))
}

/// Pad by repeating the last frame, or keep the leading `target` frames.
pub fn standardize_frames(frames: &Frames, target: usize) -> Result<Frames> {
    if frames.t == 0 {
        return Err(DataError::EmptyClip);
    }
    let n = frames.frame_len();
    let mut pixels = Vec::with_capacity(target * n);
    pixels.extend_from_slice(&frames.pixels[..frames.t.min(target) * n]);
    let last = frames.frame(frames.t - 1);
    for _ in frames.t..target {
        pixels.extend_from_slice(last);
    }
    Frames::new(target, frames.h, frames.w, pixels)
}

/// Mouth-region centre for one clip, in source pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CropBox {
    pub clip_id: String,
    /// Column of the centre.
    pub x: f64,
    /// Row of the centre.
    pub y: f64,
}

/// Top-left corner of a `size` window centred at `(x, y)`, clamped so the
/// window lies inside an `h x w` frame.
pub fn crop_origin(h: usize, w: usize, x: f64, y: f64, size: usize) -> (usize, usize) {
    let clamp = |centre: f64, extent: usize| {
        let start = centre.round() as i64 - (size / 2) as i64;
        start.clamp(0, (extent - size) as i64) as usize
    };
    (clamp(y, h), clamp(x, w))
}

/// Fixed `CROP_SIZE` window around the box centre, the same for every frame.
pub fn crop_mouth(frames: &Frames, bbox: &CropBox) -> Result<Frames> {
    crop_window(frames, bbox, CROP_SIZE)
}

pub fn crop_window(frames: &Frames, bbox: &CropBox, size: usize) -> Result<Frames> {
    if frames.h < size || frames.w < size {
        return Err(DataError::FrameTooSmall {
            height: frames.h,
            width: frames.w,
            size,
        });
    }
    let (row0, col0) = crop_origin(frames.h, frames.w, bbox.x, bbox.y, size);
    let mut pixels = Vec::with_capacity(frames.t * size * size);
    for f in 0..frames.t {
        let frame = frames.frame(f);
        for r in row0..row0 + size {
            pixels.extend_from_slice(&frame[r * frames.w + col0..r * frames.w + col0 + size]);
        }
    }
    Frames::new(frames.t, size, size, pixels)
}

pub fn parse_cropboxes(text: &str, origin: &str) -> Result<BTreeMap<String, CropBox>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| DataError::Parse {
            path: origin.to_string(),
            line: i + 1,
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, x, y] = fields[..] else {
            return Err(bad(format!("expected \"clip_id x y\", got {} fields", fields.len())));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let bbox = CropBox {
            clip_id: id.to_string(),
            x: num(x)?,
            y: num(y)?,
        };
        if out.insert(id.to_string(), bbox).is_some() {
            return Err(DataError::DuplicateClipId(id.to_string()));
        }
    }
    Ok(out)
}

pub fn read_cropboxes(path: &Path) -> Result<BTreeMap<String, CropBox>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_cropboxes(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub clip_id: String,
    pub dataset: DatasetTag,
    pub label: String,
    /// `None` for clips not yet assigned (written as `-`).
    pub split: Option<Split>,
}

/// Inventory of clips. Serialized as tab-separated lines with the fields
/// `path clip_id dataset label split`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(DataError::DuplicateClipId(e.clip_id.clone()));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| DataError::Parse {
                path: origin.to_string(),
                line: i + 1,
                detail,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [path, clip_id, dataset, label, split] = fields[..] else {
                return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
            };
            entries.push(ManifestEntry {
                path: path.to_string(),
                clip_id: clip_id.to_string(),
                dataset: dataset.parse().map_err(bad)?,
                label: label.to_string(),
                split: match split {
                    "-" => None,
                    s => Some(s.parse().map_err(bad)?),
                },
            });
        }
        Manifest::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.path,
                e.clip_id,
                e.dataset,
                e.label,
                e.split.map_or("-", Split::as_str)
            ));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Manifest::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Lexicographically sorted labels of `dataset` mapped to 0-based indices.
    pub fn label_index(&self, dataset: DatasetTag) -> BTreeMap<String, usize> {
        let labels: std::collections::BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| e.dataset == dataset)
            .map(|e| e.label.as_str())
            .collect();
        labels.into_iter().enumerate().map(|(i, l)| (l.to_string(), i)).collect()
    }

    pub fn select(&self, dataset: DatasetTag, split: Split) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.dataset == dataset && e.split == Some(split))
            .collect()
    }

    pub fn datasets(&self) -> Vec<DatasetTag> {
        let set: std::collections::BTreeSet<DatasetTag> = self.entries.iter().map(|e| e.dataset).collect();
        set.into_iter().collect()
    }

    /// Count per `(dataset, label, split)`.
    pub fn counts(&self) -> BTreeMap<(DatasetTag, String, Option<Split>), usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((e.dataset, e.label.clone(), e.split)).or_insert(0) += 1;
        }
        out
    }

    fn groups(&self) -> BTreeMap<(DatasetTag, String), Vec<&ManifestEntry>> {
        let mut out: BTreeMap<(DatasetTag, String), Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            out.entry((e.dataset, e.label.clone())).or_default().push(e);
        }
        for members in out.values_mut() {
            members.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        }
        out
    }
}

/// Resolve a manifest path relative to the manifest's own directory.
pub fn resolve(base: &Path, entry_path: &str) -> PathBuf {
    let p = Path::new(entry_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Draw `per_class` clips per `(dataset, label)` without replacement and
/// split them by `ratios` (train : val : test). Val and test sizes are
/// rounded down; train takes the remainder.
pub fn balance_and_split(manifest: &Manifest, per_class: usize, ratios: [usize; 3], seed: u64) -> Result<Manifest> {
    let total: usize = ratios.iter().sum();
    let n_val = per_class * ratios[1] / total;
    let n_test = per_class * ratios[2] / total;
    let n_train = per_class - n_val - n_test;
    let root = Rng::new(seed);
    let mut entries = Vec::new();
    for ((dataset, label), mut members) in manifest.groups() {
        if members.len() < per_class {
            return Err(DataError::InsufficientClass {
                dataset,
                label,
                available: members.len(),
                required: per_class,
            });
        }
        root.substream(&format!("split/{dataset}/{label}")).shuffle(&mut members);
        for (i, e) in members.into_iter().take(per_class).enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                split: Some(split),
                ..e.clone()
            });
        }
    }
    Manifest::new(entries)
}

/// Randomly drop training clips until each class has `per_class_train`.
/// Validation and test entries pass through untouched.
pub fn trim_train(manifest: &Manifest, per_class_train: usize, seed: u64) -> Result<Manifest> {
    let root = Rng::new(seed);
    let mut drop: HashSet<String> = HashSet::new();
    for ((dataset, label), members) in manifest.groups() {
        let mut train: Vec<&ManifestEntry> = members.into_iter().filter(|e| e.split == Some(Split::Train)).collect();
        if train.len() < per_class_train {
            return Err(DataError::InsufficientClass {
                dataset,
                label,
                available: train.len(),
                required: per_class_train,
            });
        }
        root.substream(&format!("trim/{dataset}/{label}")).shuffle(&mut train);
        drop.extend(train[per_class_train..].iter().map(|e| e.clip_id.clone()));
    }
    Manifest::new(manifest.entries.iter().filter(|e| !drop.contains(&e.clip_id)).cloned().collect())
}

/// Scale pixels into `[0, 1]` and add the channel axis: `(1, T, H, W)`.
pub fn to_model_input(frames: &Frames) -> Result<Tensor<f32>> {
    clip_tensor(frames, [TARGET_FRAMES, CROP_SIZE, CROP_SIZE])
}

pub fn clip_tensor(frames: &Frames, expected: [usize; 3]) -> Result<Tensor<f32>> {
    if frames.dims() != expected {
        return Err(DataError::Dimensions {
            expected,
            got: frames.dims(),
        });
    }
    let data = frames.pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    Ok(Tensor::from_vec(data, &[1, frames.t, frames.h, frames.w])?)
}

/// Stack clips into a `(B, 1, T, H, W)` batch.
pub fn batch_tensor(clips: &[&Frames], expected: [usize; 3]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(clips.len() * expected.iter().product::<usize>());
    for c in clips {
        if c.dims() != expected {
            return Err(DataError::Dimensions {
                expected,
                got: c.dims(),
            });
        }
        data.extend(c.pixels.iter().map(|&p| f32::from(p) / 255.0));
    }
    Ok(Tensor::from_vec(data, &[clips.len(), 1, expected[0], expected[1], expected[2]])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};

    fn ramp(t: usize, h: usize, w: usize) -> Frames {
        Frames::new(t, h, w, (0..t * h * w).map(|i| (i % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn tiny_clip_layout() {
        let f = Frames::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let bytes = encode_clip(&f);
        assert_eq!(bytes.len(), 21);
        assert_eq!(&bytes[..5], b"MCLP\x01");
        assert_eq!(&bytes[5..17], &[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[17..], &[0, 1, 2, 3]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bytes = encode_clip(&ramp(2, 3, 3));
        assert!(matches!(
            decode_clip(&bytes[..bytes.len() - 1]),
            Err(DataError::Truncated { expected: 35, got: 34 })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_clip(&bad), Err(DataError::BadMagic(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode_clip(&v2), Err(DataError::Version(2))));
        assert!(matches!(decode_clip(&bytes[..10]), Err(DataError::Truncated { .. })));
    }

    proptest! {
        #[test]
        fn clip_round_trip(t in 1usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let f = Frames::new(t, h, w, (0..t * h * w).map(|_| rng.below(256) as u8).collect()).unwrap();
            prop_assert_eq!(decode_clip(&encode_clip(&f)).unwrap(), f);
        }

        #[test]
        fn standardized_clips_have_target_length(t in 1usize..50) {
            let f = ramp(t, 2, 3);
            let s = standardize_frames(&f, 30).unwrap();
            prop_assert_eq!(s.t, 30);
            for i in 0..30 {
                let src = if i < t { i } else { t - 1 };
                prop_assert_eq!(s.frame(i), f.frame(src));
            }
        }
    }

    #[test]
    fn standardize_cases() {
        let short = ramp(28, 4, 4);
        let s = standardize_frames(&short, 30).unwrap();
        assert_eq!(s.frame(28), short.frame(27));
        assert_eq!(s.frame(29), short.frame(27));
        let exact = ramp(30, 4, 4);
        assert_eq!(standardize_frames(&exact, 30).unwrap(), exact);
        let long = ramp(45, 4, 4);
        let s = standardize_frames(&long, 30).unwrap();
        assert_eq!(s.pixels, long.pixels[..30 * 16].to_vec());
        assert!(matches!(
            standardize_frames(&Frames { t: 0, h: 1, w: 1, pixels: vec![] }, 30),
            Err(DataError::EmptyClip)
        ));
    }

    #[test]
    fn crop_window_positions() {
        assert_eq!(crop_origin(360, 640, 320.0, 180.0, 96), (132, 272));
        assert_eq!(crop_origin(360, 640, 0.0, 0.0, 96), (0, 0));
        assert_eq!(crop_origin(360, 640, 639.0, 359.0, 96), (264, 544));
        let f = ramp(2, 120, 130);
        let c = crop_mouth(&f, &CropBox { clip_id: "a".into(), x: 65.0, y: 60.0 }).unwrap();
        assert_eq!(c.dims(), [2, 96, 96]);
        let (r0, c0) = crop_origin(120, 130, 65.0, 60.0, 96);
        assert_eq!(c.frame(1)[0], f.frame(1)[r0 * 130 + c0]);
        assert_eq!(c.frame(1)[96 * 96 - 1], f.frame(1)[(r0 + 95) * 130 + c0 + 95]);
        assert!(matches!(
            crop_mouth(&ramp(1, 95, 200), &CropBox { clip_id: "a".into(), x: 0.0, y: 0.0 }),
            Err(DataError::FrameTooSmall { .. })
        ));
    }

    fn synthetic_manifest(classes: usize, per: usize) -> Manifest {
        let mut entries = Vec::new();
        for c in 0..classes {
            for i in 0..per {
                entries.push(ManifestEntry {
                    path: format!("clips/c{c}_{i}.mclp"),
                    clip_id: format!("c{c}_{i}"),
                    dataset: DatasetTag::M,
                    label: format!("word{c:02}"),
                    split: None,
                });
            }
        }
        Manifest::new(entries).unwrap()
    }

    #[test]
    fn balance_split_trim_counts() {
        let m = synthetic_manifest(15, 600);
        let split = balance_and_split(&m, 500, [8, 1, 1], 7).unwrap();
        let counts = split.counts();
        for c in 0..15 {
            let label = format!("word{c:02}");
            assert_eq!(counts[&(DatasetTag::M, label.clone(), Some(Split::Train))], 400);
            assert_eq!(counts[&(DatasetTag::M, label.clone(), Some(Split::Val))], 50);
            assert_eq!(counts[&(DatasetTag::M, label, Some(Split::Test))], 50);
        }
        assert_eq!(split, balance_and_split(&m, 500, [8, 1, 1], 7).unwrap());
        assert_ne!(split, balance_and_split(&m, 500, [8, 1, 1], 8).unwrap());
        let trimmed = trim_train(&split, 397, 7).unwrap();
        let counts = trimmed.counts();
        for c in 0..15 {
            let label = format!("word{c:02}");
            assert_eq!(counts[&(DatasetTag::M, label.clone(), Some(Split::Train))], 397);
            assert_eq!(counts[&(DatasetTag::M, label.clone(), Some(Split::Val))], 50);
            assert_eq!(counts[&(DatasetTag::M, label, Some(Split::Test))], 50);
        }
        assert_eq!(trim_train(&trimmed, 397, 1).unwrap(), trimmed);
    }

    #[test]
    fn insufficient_class_is_named() {
        let mut m = synthetic_manifest(2, 20);
        m.entries.retain(|e| e.clip_id != "c1_0");
        match balance_and_split(&m, 20, [8, 1, 1], 0) {
            Err(DataError::InsufficientClass { label, available, required, .. }) => {
                assert_eq!((label.as_str(), available, required), ("word01", 19, 20));
            }
            other => panic!("unexpected {other:?}"),
        }
        let split = balance_and_split(&synthetic_manifest(1, 10), 10, [8, 1, 1], 0).unwrap();
        assert!(matches!(trim_train(&split, 9, 0), Err(DataError::InsufficientClass { available: 8, .. })));
    }

    #[test]
    fn toy_ratio_arithmetic() {
        let split = balance_and_split(&synthetic_manifest(3, 20), 20, [8, 1, 1], 3).unwrap();
        for c in 0..3 {
            let label = format!("word{c:02}");
            let counts = split.counts();
            assert_eq!(counts[&(DatasetTag::M, label.clone(), Some(Split::Train))], 16);
            assert_eq!(counts[&(DatasetTag::M, label.clone(), Some(Split::Val))], 2);
            assert_eq!(counts[&(DatasetTag::M, label, Some(Split::Test))], 2);
        }
    }

    #[test]
    fn manifest_text_round_trip_and_labels() {
        let m = balance_and_split(&synthetic_manifest(3, 10), 10, [8, 1, 1], 1).unwrap();
        let back = Manifest::parse(&m.to_text(), "mem").unwrap();
        assert_eq!(back, m);
        let idx = m.label_index(DatasetTag::M);
        assert_eq!(idx["word00"], 0);
        assert_eq!(idx["word02"], 2);
        assert!(Manifest::parse("a\tb\tM\tx\n", "mem").is_err());
        assert!(Manifest::parse("a\tb\tXX\tx\ttrain\n", "mem").is_err());
        let dup = "a\tb\tM\tx\ttrain\nc\tb\tM\tx\ttrain\n";
        assert!(matches!(Manifest::parse(dup, "mem"), Err(DataError::DuplicateClipId(_))));
    }

    #[test]
    fn cropbox_sidecar() {
        let boxes = parse_cropboxes("# id x y\nclip1 320 180\nclip2 10.5 7\n", "boxes").unwrap();
        assert_eq!(boxes["clip1"].x, 320.0);
        assert_eq!(boxes["clip2"].y, 7.0);
        assert!(parse_cropboxes("clip1 320\n", "boxes").is_err());
    }

    #[test]
    fn model_input_scaling() {
        let mut f = Frames::new(30, 96, 96, vec![0; 30 * 96 * 96]).unwrap();
        f.pixels[0] = 255;
        let t = to_model_input(&f).unwrap();
        assert_eq!(t.shape(), &[1, 30, 96, 96]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!(matches!(to_model_input(&ramp(29, 96, 96)), Err(DataError::Dimensions { .. })));
    }
}
