//! Clip-level augmentation and the held-out perturbations.
//!
//! Every transform acts on whole clips: one set of parameters is drawn per
//! clip and applied to each frame alike.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{Clip, DatasetTag, Frames};
use crate::tensor::Rng;

pub const MAX_MAGNITUDE: u32 = 30;
pub const DEFAULT_NUM_OPS: usize = 2;
pub const DEFAULT_MAGNITUDE: u32 = 9;
pub const DEFAULT_NOISE_SIGMA: f64 = 10.0;

const MAX_ROTATE_DEG: f64 = 30.0;
const MAX_SHEAR: f64 = 0.3;
const MAX_TRANSLATE_PX: f64 = 10.0;
const MAX_ENHANCE: f64 = 0.9;
const MAX_POSTERIZE_DROP: f64 = 4.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugError {
    #[error("{0} is reserved for the perturbed test set and cannot be used for training augmentation")]
    ReservedOp(AugOp),
    #[error("magnitude {0} outside 0..={MAX_MAGNITUDE}")]
    Magnitude(u32),
    #[error("augmentation op set is empty")]
    EmptyOpSet,
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Identity,
    Rotate,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Brightness,
    Contrast,
    Sharpness,
    Posterize,
    Solarize,
    Equalize,
    GaussianNoise,
}

impl AugOp {
    pub const TRAINING: [AugOp; 11] = [
        AugOp::Identity,
        AugOp::Rotate,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Brightness,
        AugOp::Contrast,
        AugOp::Sharpness,
        AugOp::Posterize,
        AugOp::Solarize,
    ];

    pub fn is_reserved(self) -> bool {
        matches!(self, AugOp::Equalize | AugOp::GaussianNoise)
    }

    fn signed(self) -> bool {
        matches!(
            self,
            AugOp::Rotate
                | AugOp::ShearX
                | AugOp::ShearY
                | AugOp::TranslateX
                | AugOp::TranslateY
                | AugOp::Brightness
                | AugOp::Contrast
                | AugOp::Sharpness
        )
    }

    /// Unsigned strength at `level` in `[0, 1]`.
    fn strength(self, level: f64) -> f64 {
        match self {
            AugOp::Rotate => MAX_ROTATE_DEG * level,
            AugOp::ShearX | AugOp::ShearY => MAX_SHEAR * level,
            AugOp::TranslateX | AugOp::TranslateY => MAX_TRANSLATE_PX * level,
            AugOp::Brightness | AugOp::Contrast | AugOp::Sharpness => MAX_ENHANCE * level,
            AugOp::Posterize => MAX_POSTERIZE_DROP * level,
            AugOp::Solarize => 256.0 * level,
            _ => 0.0,
        }
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugPolicy {
    num_ops: usize,
    magnitude: u32,
    ops: Vec<AugOp>,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy::new(DEFAULT_NUM_OPS, DEFAULT_MAGNITUDE, AugOp::TRAINING.to_vec()).expect("defaults are valid")
    }
}

impl AugPolicy {
    pub fn new(num_ops: usize, magnitude: u32, ops: Vec<AugOp>) -> Result<Self, AugError> {
        if let Some(&op) = ops.iter().find(|op| op.is_reserved()) {
            return Err(AugError::ReservedOp(op));
        }
        if magnitude > MAX_MAGNITUDE {
            return Err(AugError::Magnitude(magnitude));
        }
        if ops.is_empty() {
            return Err(AugError::EmptyOpSet);
        }
        Ok(AugPolicy { num_ops, magnitude, ops })
    }

    pub fn num_ops(&self) -> usize {
        self.num_ops
    }

    pub fn magnitude(&self) -> u32 {
        self.magnitude
    }

    pub fn ops(&self) -> &[AugOp] {
        &self.ops
    }
}

/// One drawn operation. `value` carries the sign where the op has one:
/// degrees, shear factor, pixels, enhancement offset, bits dropped, or
/// solarize strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedOp {
    pub op: AugOp,
    pub value: f64,
}

/// Draw `num_ops` operations uniformly with replacement.
pub fn sample_ops(policy: &AugPolicy, rng: &mut Rng) -> Vec<AppliedOp> {
    let level = f64::from(policy.magnitude) / f64::from(MAX_MAGNITUDE);
    (0..policy.num_ops)
        .map(|_| {
            let op = policy.ops[rng.below(policy.ops.len())];
            let mut value = op.strength(level);
            if op.signed() && rng.coin() {
                value = -value;
            }
            AppliedOp { op, value }
        })
        .collect()
}

pub fn randaugment_clip(frames: &Frames, policy: &AugPolicy, rng: &mut Rng) -> Frames {
    apply_ops(frames, &sample_ops(policy, rng))
}

pub fn apply_ops(frames: &Frames, ops: &[AppliedOp]) -> Frames {
    let mut out = frames.clone();
    for op in ops {
        out = apply_op(&out, *op);
    }
    out
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(frames: &Frames, f: impl Fn(u8) -> u8) -> Frames {
    Frames {
        pixels: frames.pixels.iter().map(|&p| f(p)).collect(),
        ..frames.clone()
    }
}

pub fn apply_op(frames: &Frames, applied: AppliedOp) -> Frames {
    let v = applied.value;
    match applied.op {
        AugOp::Identity => frames.clone(),
        AugOp::Rotate => {
            let (s, c) = v.to_radians().sin_cos();
            // inverse rotation, output -> source
            affine(frames, [c, s, -s, c], [0.0, 0.0])
        }
        AugOp::ShearX => affine(frames, [1.0, v, 0.0, 1.0], [0.0, 0.0]),
        AugOp::ShearY => affine(frames, [1.0, 0.0, v, 1.0], [0.0, 0.0]),
        AugOp::TranslateX => affine(frames, [1.0, 0.0, 0.0, 1.0], [-v, 0.0]),
        AugOp::TranslateY => affine(frames, [1.0, 0.0, 0.0, 1.0], [0.0, -v]),
        AugOp::Brightness => map_pixels(frames, |p| to_u8(f64::from(p) * (1.0 + v))),
        AugOp::Contrast => {
            let mean = frames.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / frames.pixels.len() as f64;
            map_pixels(frames, |p| to_u8(mean + (1.0 + v) * (f64::from(p) - mean)))
        }
        AugOp::Sharpness => sharpen(frames, 1.0 + v),
        AugOp::Posterize => {
            let drop = v.round().clamp(0.0, 8.0) as u32;
            let mask = if drop >= 8 { 0 } else { 0xffu8 << drop };
            map_pixels(frames, |p| p & mask)
        }
        AugOp::Solarize => {
            let threshold = 256.0 - v;
            map_pixels(frames, |p| if f64::from(p) >= threshold { 255 - p } else { p })
        }
        AugOp::Equalize => hist_equalize(frames),
        AugOp::GaussianNoise => frames.clone(),
    }
}

/// Resample each frame through `src = A (dst - centre) + centre + shift`
/// with `A = [a, b; c, d]` acting on `(x, y)`. Bilinear, zero outside.
fn affine(frames: &Frames, a: [f64; 4], shift: [f64; 2]) -> Frames {
    let (h, w) = (frames.h, frames.w);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = frames.clone();
    for f in 0..frames.t {
        let src = frames.frame(f);
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                0.0
            } else {
                f64::from(src[r as usize * w + c as usize])
            }
        };
        let dst = out.frame_mut(f);
        for r in 0..h {
            for c in 0..w {
                let (dx, dy) = (c as f64 - cx, r as f64 - cy);
                let sx = a[0] * dx + a[1] * dy + cx + shift[0];
                let sy = a[2] * dx + a[3] * dy + cy + shift[1];
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                dst[r * w + c] = to_u8(v);
            }
        }
    }
    out
}

/// Blend with a 3x3 smoothed copy; `factor` 1 is neutral. Border pixels
/// keep their value in the smoothed copy.
fn sharpen(frames: &Frames, factor: f64) -> Frames {
    let (h, w) = (frames.h, frames.w);
    let mut out = frames.clone();
    for f in 0..frames.t {
        let src = frames.frame(f);
        let dst = out.frame_mut(f);
        for r in 1..h.saturating_sub(1) {
            for c in 1..w.saturating_sub(1) {
                let mut acc = 4.0 * f64::from(src[r * w + c]);
                for rr in r - 1..=r + 1 {
                    for cc in c - 1..=c + 1 {
                        acc += f64::from(src[rr * w + cc]);
                    }
                }
                let smooth = acc / 13.0;
                let orig = f64::from(src[r * w + c]);
                dst[r * w + c] = to_u8(smooth + factor * (orig - smooth));
            }
        }
    }
    out
}

/// Independent `N(0, sigma^2)` per pixel, rounded and clamped.
pub fn gaussian_noise(frames: &Frames, sigma: f64, rng: &mut Rng) -> Result<Frames, AugError> {
    if sigma < 0.0 || sigma.is_nan() {
        return Err(AugError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(frames.clone());
    }
    Ok(Frames {
        pixels: frames
            .pixels
            .iter()
            .map(|&p| to_u8(f64::from(p) + sigma * rng.normal()))
            .collect(),
        ..frames.clone()
    })
}

/// Per-frame histogram equalization through the cumulative histogram.
pub fn hist_equalize(frames: &Frames) -> Frames {
    let mut out = frames.clone();
    let n = frames.frame_len();
    for f in 0..frames.t {
        let mut cdf = [0usize; 256];
        for &p in frames.frame(f) {
            cdf[p as usize] += 1;
        }
        for i in 1..256 {
            cdf[i] += cdf[i - 1];
        }
        let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
        if n == cdf_min {
            continue;
        }
        let lut: Vec<u8> = cdf
            .iter()
            .map(|&c| to_u8(255.0 * c.saturating_sub(cdf_min) as f64 / (n - cdf_min) as f64))
            .collect();
        for p in out.frame_mut(f) {
            *p = lut[*p as usize];
        }
    }
    out
}

/// Noise then equalization on every clip, each with its own substream keyed
/// by clip id. The result carries the `Mbar` tag and the source labels.
pub fn build_perturbed_testset(clips: &[Clip], sigma: f64, seed: u64) -> Result<Vec<Clip>, AugError> {
    let root = Rng::new(seed);
    clips
        .par_iter()
        .map(|clip| {
            let mut rng = root.substream(&format!("perturb/{}", clip.clip_id));
            let noisy = gaussian_noise(&clip.frames, sigma, &mut rng)?;
            Ok(Clip {
                frames: hist_equalize(&noisy),
                label: clip.label.clone(),
                dataset: DatasetTag::Mbar,
                clip_id: clip.clip_id.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};

    fn random_frames(seed: u64, t: usize, h: usize, w: usize) -> Frames {
        let mut rng = Rng::new(seed);
        Frames::new(t, h, w, (0..t * h * w).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn reserved_ops_are_rejected() {
        for op in [AugOp::Equalize, AugOp::GaussianNoise] {
            let mut ops = AugOp::TRAINING.to_vec();
            ops.push(op);
            assert_eq!(AugPolicy::new(2, 9, ops), Err(AugError::ReservedOp(op)));
        }
        assert!(AugPolicy::default().ops().iter().all(|op| !op.is_reserved()));
        assert_eq!(AugPolicy::new(2, 31, AugOp::TRAINING.to_vec()), Err(AugError::Magnitude(31)));
        assert_eq!(AugOp::ShearX.to_string(), "shear_x");
    }

    #[test]
    fn zero_magnitude_is_neutral() {
        let f = random_frames(1, 3, 12, 12);
        let policy = AugPolicy::new(2, 0, vec![AugOp::Brightness, AugOp::Contrast]).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            assert_eq!(randaugment_clip(&f, &policy, &mut rng), f);
        }
        let all = AugPolicy::new(3, 0, AugOp::TRAINING.to_vec()).unwrap();
        for _ in 0..20 {
            assert_eq!(randaugment_clip(&f, &all, &mut rng), f);
        }
    }

    #[test]
    fn same_stream_same_output() {
        let f = random_frames(2, 4, 16, 16);
        let policy = AugPolicy::default();
        let a = randaugment_clip(&f, &policy, &mut Rng::new(9).substream("aug"));
        let b = randaugment_clip(&f, &policy, &mut Rng::new(9).substream("aug"));
        assert_eq!(a, b);
        assert_eq!(a.dims(), f.dims());
    }

    #[test]
    fn translation_moves_every_frame_equally() {
        let f = random_frames(3, 5, 10, 12);
        let ops = [
            AppliedOp { op: AugOp::TranslateX, value: 3.0 },
            AppliedOp { op: AugOp::TranslateY, value: -2.0 },
        ];
        let out = apply_ops(&f, &ops);
        for t in 0..f.t {
            for r in 0..10isize {
                for c in 0..12isize {
                    let (sr, sc) = (r + 2, c - 3);
                    let expected = if (0..10).contains(&sr) && (0..12).contains(&sc) {
                        f.frame(t)[(sr * 12 + sc) as usize]
                    } else {
                        0
                    };
                    assert_eq!(out.frame(t)[(r * 12 + c) as usize], expected);
                }
            }
        }
    }

    #[test]
    fn sampled_parameters_are_shared_by_all_frames() {
        let f = random_frames(4, 6, 14, 14);
        let policy = AugPolicy::new(3, 17, AugOp::TRAINING.to_vec()).unwrap();
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let ops = sample_ops(&policy, &mut rng);
            let whole = apply_ops(&f, &ops);
            // contrast uses the clip mean, so per-frame replay is only exact without it
            if ops.iter().any(|o| o.op == AugOp::Contrast) {
                continue;
            }
            for t in 0..f.t {
                let single = Frames::new(1, 14, 14, f.frame(t).to_vec()).unwrap();
                assert_eq!(apply_ops(&single, &ops).pixels, whole.frame(t));
            }
        }
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let f = random_frames(5, 2, 6, 6);
        let turn = AppliedOp { op: AugOp::Rotate, value: 90.0 };
        let once = apply_op(&f, turn);
        let mut a = once.pixels.clone();
        let mut b = f.pixels.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_eq!(apply_ops(&f, &[turn; 4]), f);
    }

    #[test]
    fn posterize_and_solarize() {
        let f = Frames::new(1, 1, 4, vec![0, 100, 200, 255]).unwrap();
        assert_eq!(apply_op(&f, AppliedOp { op: AugOp::Posterize, value: 4.0 }).pixels, vec![0, 96, 192, 240]);
        assert_eq!(apply_op(&f, AppliedOp { op: AugOp::Solarize, value: 128.0 }).pixels, vec![0, 100, 55, 0]);
        assert_eq!(apply_op(&f, AppliedOp { op: AugOp::Solarize, value: 0.0 }), f);
    }

    #[test]
    fn noise_contract() {
        let f = random_frames(6, 2, 8, 8);
        assert_eq!(gaussian_noise(&f, 0.0, &mut Rng::new(1)).unwrap(), f);
        assert!(matches!(gaussian_noise(&f, -1.0, &mut Rng::new(1)), Err(AugError::NegativeSigma(_))));
        let white = Frames::new(1, 50, 50, vec![255; 2500]).unwrap();
        let noisy = gaussian_noise(&white, 40.0, &mut Rng::new(2)).unwrap();
        assert!(noisy.pixels.iter().any(|&p| p < 255));
    }

    #[test]
    fn noise_standard_deviation() {
        let gray = Frames::new(30, 96, 96, vec![128; 30 * 96 * 96]).unwrap();
        let noisy = gaussian_noise(&gray, 10.0, &mut Rng::new(3)).unwrap();
        let n = noisy.pixels.len() as f64;
        let diffs: Vec<f64> = noisy.pixels.iter().map(|&p| f64::from(p) - 128.0).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd - 10.0).abs() < 0.5, "{sd}");
    }

    #[test]
    fn equalization_fixed_points() {
        let constant = Frames::new(2, 4, 4, vec![77; 32]).unwrap();
        assert_eq!(hist_equalize(&constant), constant);
        let uniform = Frames::new(1, 16, 32, (0..512).map(|i| (i % 256) as u8).collect()).unwrap();
        assert_eq!(hist_equalize(&uniform), uniform);
        let two = Frames::new(1, 1, 4, vec![10, 10, 20, 20]).unwrap();
        assert_eq!(hist_equalize(&two).pixels, vec![0, 0, 255, 255]);
    }

    proptest! {
        #[test]
        fn equalization_preserves_order(seed in any::<u64>()) {
            let f = random_frames(seed, 1, 9, 11);
            let out = hist_equalize(&f);
            for i in 0..f.pixels.len() {
                for j in 0..f.pixels.len() {
                    if f.pixels[i] <= f.pixels[j] {
                        prop_assert!(out.pixels[i] <= out.pixels[j]);
                    }
                }
            }
        }

        #[test]
        fn augmentation_keeps_dims(seed in any::<u64>(), magnitude in 0u32..=30) {
            let f = random_frames(seed, 2, 9, 7);
            let policy = AugPolicy::new(2, magnitude, AugOp::TRAINING.to_vec()).unwrap();
            prop_assert!(randaugment_clip(&f, &policy, &mut Rng::new(seed)).dims() == f.dims());
        }
    }

    #[test]
    fn perturbed_set_is_deterministic_and_label_preserving() {
        let clips: Vec<Clip> = (0..750)
            .map(|i| Clip {
                frames: random_frames(i, 1, 4, 4),
                label: format!("w{}", i % 15),
                dataset: DatasetTag::M,
                clip_id: format!("clip{i}"),
            })
            .collect();
        let a = build_perturbed_testset(&clips, 10.0, 42).unwrap();
        let b = build_perturbed_testset(&clips, 10.0, 42).unwrap();
        assert_eq!(a.len(), 750);
        assert_eq!(a, b);
        for (src, out) in clips.iter().zip(&a) {
            assert_eq!((&src.label, &src.clip_id, out.dataset), (&out.label, &out.clip_id, DatasetTag::Mbar));
        }
        assert_ne!(a, build_perturbed_testset(&clips, 10.0, 43).unwrap());
    }
}
