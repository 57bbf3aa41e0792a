//! Optimization loop: batch composition per model kind, summed head losses,
//! Adam updates, early stopping and best-checkpoint tracking.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, NamedArray, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{randaugment_clip, AugError, AugOp, AugPolicy};
use crate::datapipe::{batch_tensor, read_clip, resolve, DataError, DatasetTag, Frames, Manifest, Split};
use crate::eval::{top1_accuracy, EvalError, RowKey};
use crate::models::{BaselineSpec, Mode, ModelAssembly, ModelError, ModelKind, CLASS_HEAD, DOMAIN_HEAD};
use crate::nn::softmax_cross_entropy;
use crate::tensor::{Element, Rng, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("parameter {0:?} has no gradient")]
    MissingGradient(String),
    #[error("parameter {name:?} has {param} elements but its gradient has {grad}")]
    GradientShape { name: String, param: usize, grad: usize },
    #[error("optimizer state tracks {got} parameters, model has {expected}")]
    OptimizerState { expected: usize, got: usize },
    #[error("non-finite loss {value} at epoch {epoch}, step {step}, head {head:?}")]
    NonFinite { epoch: usize, step: usize, head: String, value: f64 },
    #[error("no data supplied for task {0}")]
    MissingTask(DatasetTag),
    #[error("task {0} has an empty {1} split")]
    EmptySplit(DatasetTag, &'static str),
    #[error("domain tasks disagree on class count: {0} vs {1}")]
    ClassCount(usize, usize),
    #[error("source checkpoint architecture {source_spec:?} differs from the configured {configured:?}")]
    IncompatibleSource { source_spec: Box<BaselineSpec>, configured: Box<BaselineSpec> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Aug(#[from] AugError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunKind {
    Baseline,
    Finetune,
    Dann,
    Mtl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: RunKind,
    /// Training tasks. The first is the target unless `target_task` says
    /// otherwise.
    pub tasks: Vec<DatasetTag>,
    pub target_task: Option<DatasetTag>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub early_stop_gate: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: bool,
    pub aug_num_ops: usize,
    pub aug_magnitude: u32,
    pub noise_sigma: f64,
    pub source_checkpoint: Option<PathBuf>,
    /// Gradient-reversal factor for the domain head.
    pub dann_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            kind: RunKind::Baseline,
            tasks: vec![DatasetTag::M],
            target_task: None,
            batch_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            max_epochs: 1500,
            early_stop_gate: 1000,
            patience: 100,
            seed: 0,
            augment: true,
            aug_num_ops: crate::augment::DEFAULT_NUM_OPS,
            aug_magnitude: crate::augment::DEFAULT_MAGNITUDE,
            noise_sigma: crate::augment::DEFAULT_NOISE_SIGMA,
            source_checkpoint: None,
            dann_lambda: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn target(&self) -> DatasetTag {
        self.target_task
            .or_else(|| self.tasks.first().copied())
            .unwrap_or(DatasetTag::M)
    }

    /// Tasks with the target moved to the front.
    pub fn ordered_tasks(&self) -> Vec<DatasetTag> {
        let target = self.target();
        std::iter::once(target)
            .chain(self.tasks.iter().copied().filter(|&t| t != target))
            .collect()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn aug_policy(&self) -> Result<Option<AugPolicy>, AugError> {
        if !self.augment {
            return Ok(None);
        }
        AugPolicy::new(self.aug_num_ops, self.aug_magnitude, AugOp::TRAINING.to_vec()).map(Some)
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.patience < 1 {
            v.push("patience must be at least 1".to_string());
        }
        if self.max_epochs < 1 {
            v.push("max_epochs must be at least 1".to_string());
        }
        if self.early_stop_gate > self.max_epochs {
            v.push(format!(
                "early_stop_gate ({}) exceeds max_epochs ({})",
                self.early_stop_gate, self.max_epochs
            ));
        }
        if self.batch_size < 1 {
            v.push("batch_size must be at least 1".to_string());
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            v.push(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            v.push(format!("eps must be positive, got {}", self.eps));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            v.push(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.tasks.is_empty() {
            v.push("tasks must not be empty".to_string());
        }
        let mut seen = Vec::new();
        for &t in &self.tasks {
            if t == DatasetTag::Mbar {
                v.push("Mbar is a test-only set and cannot be trained on".to_string());
            }
            if seen.contains(&t) {
                v.push(format!("task {t} listed twice"));
            }
            seen.push(t);
        }
        if let Some(t) = self.target_task {
            if !self.tasks.contains(&t) {
                v.push(format!("target_task {t} is not among the tasks"));
            }
        }
        match self.kind {
            RunKind::Baseline | RunKind::Finetune if self.tasks.len() > 1 => {
                v.push(format!("{:?} runs take exactly one task, got {}", self.kind, self.tasks.len()));
            }
            RunKind::Dann if self.tasks != [DatasetTag::M, DatasetTag::GLipsM] => {
                v.push(format!("dann runs are defined for tasks [M, GLipsM] only, got {:?}", self.tasks));
            }
            RunKind::Dann if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) => {
                v.push(format!("dann needs an even batch_size to split between domains, got {}", self.batch_size));
            }
            _ => {}
        }
        match (self.kind, &self.source_checkpoint) {
            (RunKind::Finetune, None) => v.push("finetune runs require source_checkpoint".to_string()),
            (RunKind::Baseline | RunKind::Dann | RunKind::Mtl, Some(_)) => {
                v.push("source_checkpoint is only meaningful for finetune runs".to_string())
            }
            _ => {}
        }
        if self.augment {
            if let Err(e) = AugPolicy::new(self.aug_num_ops, self.aug_magnitude, AugOp::TRAINING.to_vec()) {
                v.push(e.to_string());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub frames: Frames,
    pub label: usize,
}

/// In-memory train and validation splits of one dataset.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub tag: DatasetTag,
    pub classes: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TaskData {
    pub fn load(manifest: &Manifest, base: &Path, tag: DatasetTag, dims: [usize; 3]) -> Result<Self, DataError> {
        Ok(TaskData {
            tag,
            classes: manifest.label_index(tag).len(),
            train: load_samples(manifest, base, tag, Split::Train, dims)?,
            val: load_samples(manifest, base, tag, Split::Val, dims)?,
        })
    }
}

/// Decode the clips of one split with labels from the manifest's index.
pub fn load_samples(manifest: &Manifest, base: &Path, tag: DatasetTag, split: Split, dims: [usize; 3]) -> Result<Vec<Sample>, DataError> {
    let index = manifest.label_index(tag);
    manifest
        .select(tag, split)
        .par_iter()
        .map(|e| {
            let frames = read_clip(&resolve(base, &e.path))?;
            if frames.dims() != dims {
                return Err(DataError::Dimensions {
                    expected: dims,
                    got: frames.dims(),
                });
            }
            Ok(Sample {
                frames,
                label: index[&e.label],
            })
        })
        .collect()
}

/// Seeded visiting order over one task's training set.
#[derive(Debug, Clone)]
struct Stream {
    tag: DatasetTag,
    len: usize,
    order: Vec<usize>,
    pos: usize,
    cycle: u64,
}

impl Stream {
    fn new(tag: DatasetTag, len: usize) -> Self {
        Stream {
            tag,
            len,
            order: Vec::new(),
            pos: 0,
            cycle: 0,
        }
    }

    fn reshuffle(&mut self, root: &Rng, key: &str) {
        self.order = (0..self.len).collect();
        root.substream(&format!("order/{}/{key}", self.tag)).shuffle(&mut self.order);
        self.pos = 0;
    }

    /// Up to `n` indices; empty once the pass is exhausted.
    fn take(&mut self, n: usize) -> Vec<usize> {
        let end = (self.pos + n).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }

    /// Exactly `n` indices, starting a fresh shuffled pass when needed.
    fn take_cycling(&mut self, root: &Rng, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.cycle += 1;
                self.reshuffle(root, &format!("cycle{}", self.cycle));
            }
            out.extend(self.take(n - out.len()));
        }
        out
    }
}

/// Sample indices drawn for one optimization step, as `(task, indices)`
/// pairs. Task 0 is the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    pub parts: Vec<(usize, Vec<usize>)>,
}

/// Produces step plans. The target task's pass defines the epoch; other
/// tasks cycle through reshuffled passes as long as needed.
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: RunKind,
    batch_size: usize,
    root: Rng,
    target: Stream,
    aux: Vec<Stream>,
}

impl Sampler {
    /// `sizes` lists `(task, training-set size)` with the target first.
    pub fn new(kind: RunKind, batch_size: usize, root: &Rng, sizes: &[(DatasetTag, usize)]) -> Self {
        let (first, rest) = sizes.split_first().expect("at least one task");
        Sampler {
            kind,
            batch_size,
            root: root.clone(),
            target: Stream::new(first.0, first.1),
            aux: rest.iter().map(|&(tag, len)| Stream::new(tag, len)).collect(),
        }
    }

    pub fn begin_epoch(&mut self, epoch: usize) {
        self.target.reshuffle(&self.root, &format!("epoch{epoch}"));
    }

    pub fn next_plan(&mut self) -> Option<StepPlan> {
        match self.kind {
            RunKind::Baseline | RunKind::Finetune => {
                let idx = self.target.take(self.batch_size);
                (!idx.is_empty()).then(|| StepPlan { parts: vec![(0, idx)] })
            }
            RunKind::Dann => {
                // equal share per domain, including a short final step
                let own = self.target.take(self.batch_size / 2);
                if own.is_empty() {
                    return None;
                }
                let other = self.aux[0].take_cycling(&self.root, own.len());
                Some(StepPlan {
                    parts: vec![(0, own), (1, other)],
                })
            }
            RunKind::Mtl => {
                let own = self.target.take(self.batch_size);
                if own.is_empty() {
                    return None;
                }
                let mut parts = vec![(0, own)];
                for (i, s) in self.aux.iter_mut().enumerate() {
                    parts.push((i + 1, s.take_cycling(&self.root, self.batch_size)));
                }
                Some(StepPlan { parts })
            }
        }
    }
}

/// Inputs for one head: `(B, 1, T, H, W)` clips with class labels, plus
/// domain labels for the domain-adversarial batch.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub head: String,
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl Batch<f32> {
    pub fn cast<U: Element>(&self) -> Batch<U> {
        Batch {
            head: self.head.clone(),
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            domains: self.domains.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bundle<T: Element> {
    pub batches: Vec<Batch<T>>,
}

/// Materialize a plan. Training inputs pass through `aug` when given, one
/// clip at a time in plan order.
pub fn compose_batch(
    kind: RunKind,
    plan: &StepPlan,
    tasks: &[TaskData],
    dims: [usize; 3],
    mut aug: Option<(&AugPolicy, &mut Rng)>,
) -> Result<Bundle<f32>> {
    let mut gather = |task: usize, idx: &[usize]| -> Result<(Tensor<f32>, Vec<usize>)> {
        let samples: Vec<&Sample> = idx.iter().map(|&i| &tasks[task].train[i]).collect();
        let frames: Vec<Frames> = samples
            .iter()
            .map(|s| match aug.as_mut() {
                Some((policy, rng)) => randaugment_clip(&s.frames, policy, rng),
                None => s.frames.clone(),
            })
            .collect();
        let refs: Vec<&Frames> = frames.iter().collect();
        Ok((batch_tensor(&refs, dims)?, samples.iter().map(|s| s.label).collect()))
    };
    let batches = match kind {
        RunKind::Baseline | RunKind::Finetune => {
            let (task, idx) = &plan.parts[0];
            let (inputs, labels) = gather(*task, idx)?;
            vec![Batch {
                head: CLASS_HEAD.to_string(),
                inputs,
                labels,
                domains: Vec::new(),
            }]
        }
        RunKind::Dann => {
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            let mut domains = Vec::new();
            for (task, idx) in &plan.parts {
                let (x, y) = gather(*task, idx)?;
                inputs.push(x);
                labels.extend(y);
                domains.extend(std::iter::repeat_n(*task, idx.len()));
            }
            vec![Batch {
                head: CLASS_HEAD.to_string(),
                inputs: Tensor::concat(&inputs, 0)?,
                labels,
                domains,
            }]
        }
        RunKind::Mtl => plan
            .parts
            .iter()
            .map(|(task, idx)| {
                let (inputs, labels) = gather(*task, idx)?;
                Ok(Batch {
                    head: tasks[*task].tag.as_str().to_string(),
                    inputs,
                    labels,
                    domains: Vec::new(),
                })
            })
            .collect::<Result<_>>()?,
    };
    Ok(Bundle { batches })
}

pub struct StepLoss<T: Element> {
    pub total: Tensor<T>,
    /// Per-head scalar losses, each still attached to the graph.
    pub heads: Vec<(String, Tensor<T>)>,
}

/// Unweighted sum of the cross-entropy of every head in the bundle.
pub fn step_loss<T: Element>(model: &ModelAssembly<T>, bundle: &Bundle<T>, lambda: f64) -> Result<StepLoss<T>> {
    let mut heads = Vec::new();
    for batch in &bundle.batches {
        let trunk = model.forward_trunk(&batch.inputs, Mode::Train)?;
        let logits = model.forward_head(&trunk.summary, &batch.head, lambda)?;
        heads.push((batch.head.clone(), softmax_cross_entropy(&logits, &batch.labels)?));
        if model.kind == ModelKind::Dann {
            let domain = model.forward_head(&trunk.summary, DOMAIN_HEAD, lambda)?;
            heads.push((DOMAIN_HEAD.to_string(), softmax_cross_entropy(&domain, &batch.domains)?));
        }
    }
    let mut total = heads[0].1.clone();
    for (_, l) in &heads[1..] {
        total = total.add(l)?;
    }
    Ok(StepLoss { total, heads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-head training loss over the epoch's steps.
    pub train_loss: BTreeMap<String, f64>,
    /// Validation accuracy in percent per task, plus `domain` for the
    /// domain head.
    pub val_accuracy: BTreeMap<String, f64>,
    /// Seconds; kept out of history files so they stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn history_text(history: &[EpochRecord]) -> String {
    history.iter().map(|r| r.to_line() + "\n").collect()
}

/// Earliest epoch holding the best accuracy for `key`.
pub fn best_epoch(history: &[EpochRecord], key: &str) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for r in history {
        if let Some(&acc) = r.val_accuracy.get(key) {
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((r.epoch, acc));
            }
        }
    }
    best
}

/// Stop at the epoch cap, or once past the gate with no target-task
/// improvement for more than `patience` epochs. The best epoch may predate
/// the gate.
pub fn should_stop(history: &[EpochRecord], cfg: &TrainConfig) -> bool {
    let Some(last) = history.last() else {
        return false;
    };
    if last.epoch >= cfg.max_epochs {
        return true;
    }
    let best = best_epoch(history, cfg.target().as_str()).map_or(0, |(e, _)| e);
    last.epoch > cfg.early_stop_gate && last.epoch - best > cfg.patience
}

/// Baseline checkpoint reloaded with a fresh class head of `classes`
/// outputs. Nothing is frozen.
pub fn finetune_init(source: &Checkpoint, classes: usize, rng: &mut Rng) -> Result<ModelAssembly<f32>> {
    if source.descriptor.kind != ModelKind::Baseline {
        return Err(ModelError::KindMismatch {
            expected: ModelKind::Baseline,
            found: source.descriptor.kind,
        }
        .into());
    }
    let mut model = source.build_model()?;
    model.reinit_head(classes, rng)?;
    Ok(model)
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Restored to the best epoch's weights.
    pub model: ModelAssembly<f32>,
}

fn build_model(cfg: &TrainConfig, spec: &BaselineSpec, tasks: &[TaskData], rng: &mut Rng) -> Result<ModelAssembly<f32>> {
    let spec = BaselineSpec {
        num_classes: tasks[0].classes,
        ..spec.clone()
    };
    Ok(match cfg.kind {
        RunKind::Baseline => ModelAssembly::build_baseline(&spec, rng)?,
        RunKind::Finetune => {
            let path = cfg.source_checkpoint.as_ref().expect("validated");
            let source = load_checkpoint(path)?;
            let stored = BaselineSpec {
                num_classes: spec.num_classes,
                ..source.descriptor.spec.clone()
            };
            if stored != spec {
                return Err(TrainError::IncompatibleSource {
                    source_spec: Box::new(source.descriptor.spec),
                    configured: Box::new(spec),
                });
            }
            finetune_init(&source, spec.num_classes, rng)?
        }
        RunKind::Dann => {
            if tasks[0].classes != tasks[1].classes {
                return Err(TrainError::ClassCount(tasks[0].classes, tasks[1].classes));
            }
            ModelAssembly::build_dann(&spec, rng)?
        }
        RunKind::Mtl => {
            let heads: Vec<(String, usize)> = tasks.iter().map(|t| (t.tag.as_str().to_string(), t.classes)).collect();
            ModelAssembly::build_mtl(&spec, &heads, rng)?
        }
    })
}

fn validate_epoch(model: &ModelAssembly<f32>, tasks: &[TaskData], batch_size: usize) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for t in tasks {
        let head = RowKey::head_for(model.kind, t.tag);
        out.insert(t.tag.as_str().to_string(), top1_accuracy(model, &head, &t.val, batch_size)?.percent());
    }
    if model.kind == ModelKind::Dann {
        let domain_val: Vec<Sample> = tasks
            .iter()
            .enumerate()
            .flat_map(|(d, t)| {
                t.val.iter().map(move |s| Sample {
                    frames: s.frames.clone(),
                    label: d,
                })
            })
            .collect();
        out.insert(
            DOMAIN_HEAD.to_string(),
            top1_accuracy(model, DOMAIN_HEAD, &domain_val, batch_size)?.percent(),
        );
    }
    Ok(out)
}

/// Run the configured experiment. `observer` sees every epoch record as it
/// is produced.
pub fn train(cfg: &TrainConfig, spec: &BaselineSpec, data: &[TaskData], observer: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut tasks = Vec::new();
    for tag in cfg.ordered_tasks() {
        let t = data.iter().find(|t| t.tag == tag).ok_or(TrainError::MissingTask(tag))?;
        if t.train.is_empty() {
            return Err(TrainError::EmptySplit(tag, "train"));
        }
        if t.val.is_empty() {
            return Err(TrainError::EmptySplit(tag, "val"));
        }
        tasks.push(t.clone());
    }
    let root = Rng::new(cfg.seed);
    let model = build_model(cfg, spec, &tasks, &mut root.substream("init"))?;
    let dims = [spec.frames, spec.height, spec.width];
    let policy = cfg.aug_policy()?;
    let adam_cfg = cfg.adam();
    let mut adam = AdamState::new();
    let sizes: Vec<(DatasetTag, usize)> = tasks.iter().map(|t| (t.tag, t.train.len())).collect();
    let mut sampler = Sampler::new(cfg.kind, cfg.batch_size, &root, &sizes);
    let target_key = cfg.target().as_str();

    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        sampler.begin_epoch(epoch);
        let mut aug_rng = root.substream(&format!("augment/{epoch}"));
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        while let Some(plan) = sampler.next_plan() {
            steps += 1;
            let aug = policy.as_ref().map(|p| (p, &mut aug_rng));
            let bundle = compose_batch(cfg.kind, &plan, &tasks, dims, aug)?;
            let loss = step_loss(&model, &bundle, cfg.dann_lambda)?;
            for (head, l) in &loss.heads {
                let value = f64::from(l.item());
                if !value.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step: steps,
                        head: head.clone(),
                        value,
                    });
                }
                *sums.entry(head.clone()).or_insert(0.0) += value;
            }
            model.zero_grad();
            loss.total.backward()?;
            adam_step(&model.named_parameters(), &mut adam, &adam_cfg)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect(),
            val_accuracy: validate_epoch(&model, &tasks, cfg.batch_size)?,
            wall_time: started.elapsed().as_secs_f64(),
        };
        let acc = record.val_accuracy[target_key];
        if best.as_ref().is_none_or(|b| acc > b.best_val) {
            best = Some(Checkpoint::capture(&model, epoch as u32, acc, root.state(), &adam));
        }
        observer(&record);
        history.push(record);
        if should_stop(&history, cfg) {
            break;
        }
    }
    let best = best.expect("at least one epoch ran");
    let last_epoch = history.last().map_or(0, |r| r.epoch) as u32;
    let last = Checkpoint::capture(&model, last_epoch, best.best_val, root.state(), &adam);
    best.load_into(&model)?;
    Ok(TrainOutcome {
        best,
        last,
        history,
        model,
    })
}
