//! Conv3D + Bi-GRU classifier assemblies: the single-head baseline, the
//! domain-adversarial variant and the hard-parameter-sharing multi-task
//! variant. All three share one trunk definition.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::nn::{self, BatchNormState, Conv3dParams, GruParams, Linear};
use crate::tensor::{Element, Rng, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape underflow at {stage}: {detail}")]
    ShapeUnderflow { stage: String, detail: String },
    #[error("expected a {expected:?} model, found {found:?}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("no head named {0:?}")]
    UnknownHead(String),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Architecture hyperparameters of the shared trunk and the class head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub in_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernel: [usize; 3],
    pub conv_padding: [usize; 3],
    pub conv_strides: [[usize; 3]; 3],
    pub pool_kernel: [usize; 3],
    pub pool_stride: [usize; 3],
    pub pool_padding: [usize; 3],
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub num_classes: usize,
}

impl BaselineSpec {
    /// The full-size architecture: 1x30x96x96 input, 16/16/32 filters,
    /// 256-wide two-layer Bi-GRU.
    pub fn full(num_classes: usize) -> Self {
        BaselineSpec {
            in_channels: 1,
            frames: 30,
            height: 96,
            width: 96,
            conv_channels: [16, 16, 32],
            conv_kernel: [3, 5, 5],
            conv_padding: [1, 2, 2],
            conv_strides: [[1, 2, 2], [1, 1, 1], [1, 1, 1]],
            pool_kernel: [3, 5, 5],
            pool_stride: [1, 2, 2],
            pool_padding: [1, 2, 2],
            gru_hidden: 256,
            gru_layers: 2,
            num_classes,
        }
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.in_channels, self.frames, self.height, self.width]
    }

    /// Shapes after every trunk stage for a batch of `batch` clips.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<(String, Vec<usize>)>> {
        if self.gru_layers == 0 || self.gru_hidden == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(ModelError::ShapeUnderflow {
                stage: "spec".into(),
                detail: "layer counts and widths must be positive".into(),
            });
        }
        let mut trace = vec![("input".to_string(), self.input_shape(batch))];
        let mut dims = [self.frames, self.height, self.width];
        let mut channels = self.in_channels;
        for block in 0..3 {
            for (stage, kernel, stride, pad) in [
                ("conv", self.conv_kernel, self.conv_strides[block], self.conv_padding),
                ("pool", self.pool_kernel, self.pool_stride, self.pool_padding),
            ] {
                let name = format!("{stage}{}", block + 1);
                for axis in 0..3 {
                    dims[axis] = nn::output_dim(dims[axis], kernel[axis], stride[axis], pad[axis])
                        .filter(|&d| d > 0)
                        .ok_or_else(|| ModelError::ShapeUnderflow {
                            stage: name.clone(),
                            detail: format!("axis {axis} of size {} cannot host kernel {kernel:?}", dims[axis]),
                        })?;
                }
                if stage == "conv" {
                    channels = self.conv_channels[block];
                }
                trace.push((name, vec![batch, channels, dims[0], dims[1], dims[2]]));
            }
        }
        trace.push(("sequence".into(), vec![batch, dims[0], channels * dims[1] * dims[2]]));
        trace.push(("summary".into(), vec![batch, 2 * self.gru_hidden]));
        trace.push(("logits".into(), vec![batch, self.num_classes]));
        Ok(trace)
    }

    /// Per-timestep width of the flattened conv features fed to the GRU.
    pub fn feature_width(&self) -> Result<usize> {
        let trace = self.shape_trace(1)?;
        Ok(trace.iter().find(|(n, _)| n == "sequence").map(|(_, s)| s[2]).unwrap_or(0))
    }

    pub fn summary_width(&self) -> usize {
        2 * self.gru_hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Dann,
    Mtl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const CLASS_HEAD: &str = "class";
pub const DOMAIN_HEAD: &str = "domain";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
    /// Attached to the trunk through gradient reversal.
    pub reversed: bool,
}

/// Everything needed to rebuild an assembly's structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub spec: BaselineSpec,
    pub heads: Vec<HeadSpec>,
}

pub struct Head<T: Element> {
    pub linear: Linear<T>,
    pub reversed: bool,
}

pub struct TrunkOutput<T: Element> {
    /// `(B, T, feature_width)` input to the recurrent stage.
    pub sequence: Tensor<T>,
    /// `(B, 2H)` final forward state of the last layer followed by its final
    /// backward state.
    pub summary: Tensor<T>,
}

pub struct ModelAssembly<T: Element = f32> {
    pub kind: ModelKind,
    pub spec: BaselineSpec,
    pub input_norm: BatchNormState<T>,
    pub convs: Vec<Conv3dParams<T>>,
    pub norms: Vec<BatchNormState<T>>,
    pub gru: GruParams<T>,
    pub heads: IndexMap<String, Head<T>>,
}

fn init_head<T: Element>(spec: &BaselineSpec, width: usize, reversed: bool, rng: &mut Rng) -> Result<Head<T>> {
    Ok(Head {
        linear: Linear::init(spec.summary_width(), width, rng)?,
        reversed,
    })
}

impl<T: Element> ModelAssembly<T> {
    fn trunk(kind: ModelKind, spec: &BaselineSpec, rng: &mut Rng) -> Result<Self> {
        let feature = spec.feature_width()?;
        let mut convs = Vec::with_capacity(3);
        let mut norms = Vec::with_capacity(3);
        let mut c_in = spec.in_channels;
        for block in 0..3 {
            let c_out = spec.conv_channels[block];
            convs.push(Conv3dParams::init(c_in, c_out, spec.conv_kernel, spec.conv_strides[block], spec.conv_padding, rng)?);
            norms.push(BatchNormState::new(c_out));
            c_in = c_out;
        }
        let gru = GruParams::init(feature, spec.gru_hidden, spec.gru_layers, rng)?;
        Ok(ModelAssembly {
            kind,
            spec: spec.clone(),
            input_norm: BatchNormState::new(spec.in_channels),
            convs,
            norms,
            gru,
            heads: IndexMap::new(),
        })
    }

    /// Single-head classifier with `spec.num_classes` outputs.
    pub fn build_baseline(spec: &BaselineSpec, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::trunk(ModelKind::Baseline, spec, rng)?;
        m.heads.insert(CLASS_HEAD.into(), init_head(spec, spec.num_classes, false, rng)?);
        Ok(m)
    }

    /// Class head plus a two-way domain head behind gradient reversal.
    pub fn build_dann(spec: &BaselineSpec, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::trunk(ModelKind::Dann, spec, rng)?;
        m.heads.insert(CLASS_HEAD.into(), init_head(spec, spec.num_classes, false, rng)?);
        m.heads.insert(DOMAIN_HEAD.into(), init_head(spec, 2, true, rng)?);
        Ok(m)
    }

    /// One head per task over a shared trunk.
    pub fn build_mtl(spec: &BaselineSpec, tasks: &[(String, usize)], rng: &mut Rng) -> Result<Self> {
        let mut m = Self::trunk(ModelKind::Mtl, spec, rng)?;
        for (name, classes) in tasks {
            m.heads.insert(name.clone(), init_head(spec, *classes, false, rng)?);
        }
        Ok(m)
    }

    pub fn from_descriptor(desc: &ModelDescriptor, rng: &mut Rng) -> Result<Self> {
        let mut m = Self::trunk(desc.kind, &desc.spec, rng)?;
        for h in &desc.heads {
            m.heads.insert(h.name.clone(), init_head(&desc.spec, h.width, h.reversed, rng)?);
        }
        Ok(m)
    }

    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            kind: self.kind,
            spec: self.spec.clone(),
            heads: self
                .heads
                .iter()
                .map(|(name, h)| HeadSpec {
                    name: name.clone(),
                    width: h.linear.out_features(),
                    reversed: h.reversed,
                })
                .collect(),
        }
    }

    /// Trainable tensors of the shared trunk, in a fixed order.
    pub fn trunk_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let bn = |out: &mut Vec<(String, Tensor<T>)>, name: &str, s: &BatchNormState<T>| {
            out.push((format!("{name}.gamma"), s.gamma.clone()));
            out.push((format!("{name}.beta"), s.beta.clone()));
        };
        bn(&mut out, "bn0", &self.input_norm);
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("conv{}.weight", i + 1), conv.weight.clone()));
            out.push((format!("conv{}.bias", i + 1), conv.bias.clone()));
            bn(&mut out, &format!("bn{}", i + 1), norm);
        }
        for (l, layer) in self.gru.layers.iter().enumerate() {
            for (dir, d) in ["fwd", "bwd"].iter().zip(layer) {
                for (field, t) in d.tensors() {
                    out.push((format!("gru.l{l}.{dir}.{field}"), t.clone()));
                }
            }
        }
        out
    }

    pub fn head_parameters(&self, head: &str) -> Option<[(String, Tensor<T>); 2]> {
        self.heads.get(head).map(|h| {
            [
                (format!("head.{head}.weight"), h.linear.weight.clone()),
                (format!("head.{head}.bias"), h.linear.bias.clone()),
            ]
        })
    }

    /// All trainable tensors: trunk first, then heads in registration order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.trunk_parameters();
        for name in self.heads.keys() {
            out.extend(self.head_parameters(name).expect("registered head"));
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        let norms = std::iter::once(&self.input_norm).chain(&self.norms);
        for (i, s) in norms.enumerate() {
            out.push((format!("bn{i}.running_mean"), s.running_mean.clone()));
            out.push((format!("bn{i}.running_var"), s.running_var.clone()));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    pub fn forward_trunk(&self, batch: &Tensor<T>, mode: Mode) -> Result<TrunkOutput<T>> {
        let b = batch.shape().first().copied().unwrap_or(0);
        let expected = self.spec.input_shape(b);
        if b == 0 || batch.shape() != expected.as_slice() {
            return Err(ModelError::InputShape {
                expected,
                got: batch.shape().to_vec(),
            });
        }
        let training = mode == Mode::Train;
        let mut x = nn::batchnorm(batch, &self.input_norm, training)?;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = nn::conv3d(&x, conv)?;
            x = nn::maxpool3d(&x, self.spec.pool_kernel, self.spec.pool_stride, self.spec.pool_padding)?;
            x = nn::batchnorm(&x, norm, training)?;
        }
        let [_, c, t, h, w] = <[usize; 5]>::try_from(x.shape()).expect("conv output is 5-d");
        let sequence = x.permute(&[0, 2, 1, 3, 4])?.reshape(&[b, t, c * h * w])?;
        let gru = nn::gru_bidirectional(&sequence, &self.gru)?;
        let [fwd, bwd] = gru.finals.last().expect("at least one layer");
        let summary = Tensor::concat(&[fwd.clone(), bwd.clone()], 1)?;
        Ok(TrunkOutput { sequence, summary })
    }

    /// Apply a head to a trunk summary; reversed heads see the summary
    /// through gradient reversal with factor `lambda`.
    pub fn forward_head(&self, summary: &Tensor<T>, head: &str, lambda: f64) -> Result<Tensor<T>> {
        let h = self.heads.get(head).ok_or_else(|| ModelError::UnknownHead(head.to_string()))?;
        let input = if h.reversed {
            nn::gradient_reversal(summary, lambda)
        } else {
            summary.clone()
        };
        Ok(nn::linear(&input, &h.linear)?)
    }

    fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind != expected {
            return Err(ModelError::KindMismatch {
                expected,
                found: self.kind,
            });
        }
        Ok(())
    }

    pub fn forward_baseline(&self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.expect_kind(ModelKind::Baseline)?;
        let trunk = self.forward_trunk(batch, mode)?;
        self.forward_head(&trunk.summary, CLASS_HEAD, 1.0)
    }

    /// `(class_logits, domain_logits)`.
    pub fn forward_dann(&self, batch: &Tensor<T>, lambda: f64, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        self.expect_kind(ModelKind::Dann)?;
        let trunk = self.forward_trunk(batch, mode)?;
        Ok((
            self.forward_head(&trunk.summary, CLASS_HEAD, lambda)?,
            self.forward_head(&trunk.summary, DOMAIN_HEAD, lambda)?,
        ))
    }

    pub fn forward_mtl(&self, batch: &Tensor<T>, task: &str, mode: Mode) -> Result<Tensor<T>> {
        self.expect_kind(ModelKind::Mtl)?;
        if !self.heads.contains_key(task) {
            return Err(ModelError::UnknownHead(task.to_string()));
        }
        let trunk = self.forward_trunk(batch, mode)?;
        self.forward_head(&trunk.summary, task, 1.0)
    }

    /// Fresh class head with `classes` outputs; every other tensor is kept
    /// as is and stays trainable.
    pub fn reinit_head(&mut self, classes: usize, rng: &mut Rng) -> Result<()> {
        self.expect_kind(ModelKind::Baseline)?;
        let head = init_head(&self.spec, classes, false, rng)?;
        self.heads.insert(CLASS_HEAD.into(), head);
        self.spec.num_classes = classes;
        Ok(())
    }
}

/// Order-sensitive FNV checksum over parameter bits, for integrity checks.
pub fn checksum<T: Element>(params: &[(String, Tensor<T>)]) -> u64 {
    let mut bytes = Vec::new();
    for (name, t) in params {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data().iter() {
            bytes.extend_from_slice(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
        }
    }
    crate::tensor::stable_hash(&bytes)
}
