//! Top-1 accuracy and the results matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use crate::datapipe::{batch_tensor, DataError, DatasetTag, Frames};
use crate::models::{Mode, ModelAssembly, ModelError, ModelKind, CLASS_HEAD};
use crate::trainer::{CheckpointError, Sample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no test set loaded for {0}")]
    MissingTestSet(DatasetTag),
    #[error("run {run}: no checkpoint at {}", path.display())]
    MissingCheckpoint { run: String, path: PathBuf },
    #[error("unknown model row {0:?}")]
    UnknownRow(String),
    #[error("line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Count of correct predictions. Percentages are rounded half-up to two
/// decimals in integer arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    /// Percentage in hundredths, e.g. `4400` for 44.00%.
    pub fn hundredths(&self) -> u32 {
        let (c, n) = (self.correct as u64, self.total as u64);
        ((c * 20_000 + n) / (2 * n)) as u32
    }

    pub fn percent(&self) -> f64 {
        f64::from(self.hundredths()) / 100.0
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_hundredths(f, self.hundredths())
    }
}

fn write_hundredths(f: &mut impl fmt::Write, h: u32) -> fmt::Result {
    write!(f, "{}.{:02}", h / 100, h % 100)
}

fn hundredths_text(h: u32) -> String {
    let mut s = String::new();
    write_hundredths(&mut s, h).expect("string write");
    s
}

/// Index of the largest value in each row; ties go to the lowest index.
pub fn argmax_rows(values: &[f32], classes: usize) -> Vec<usize> {
    values
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    Ok(Accuracy {
        correct: predictions.iter().zip(labels).filter(|(p, l)| p == l).count(),
        total: labels.len(),
    })
}

/// Eval-mode predictions of one head over `clips`, `batch_size` at a time.
pub fn predict(model: &ModelAssembly<f32>, head: &str, clips: &[&Frames], batch_size: usize) -> Result<Vec<usize>> {
    let spec = &model.spec;
    let dims = [spec.frames, spec.height, spec.width];
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let inputs = batch_tensor(chunk, dims)?;
        let trunk = model.forward_trunk(&inputs, Mode::Eval)?;
        let logits = model.forward_head(&trunk.summary, head, 1.0)?;
        out.extend(argmax_rows(&logits.data(), logits.shape()[1]));
    }
    Ok(out)
}

pub fn top1_accuracy(model: &ModelAssembly<f32>, head: &str, samples: &[Sample], batch_size: usize) -> Result<Accuracy> {
    if samples.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let clips: Vec<&Frames> = samples.iter().map(|s| &s.frames).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy(&predict(model, head, &clips, batch_size)?, &labels)
}

/// Test-set columns in display order.
pub const COLUMNS: [DatasetTag; 5] = [
    DatasetTag::M,
    DatasetTag::Mbar,
    DatasetTag::GLipsM,
    DatasetTag::GLipsR,
    DatasetTag::LRW,
];

/// One trained model of the experiment grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RowKey {
    /// Single-task model trained on the given dataset.
    Baseline(DatasetTag),
    /// Model trained on the given dataset, then fine-tuned on `M`.
    Finetune(DatasetTag),
    /// Domain-adversarial model over `M` and `GLipsM`.
    Dann,
    /// Multi-task model over `M` and the given auxiliary datasets.
    Mtl(Vec<DatasetTag>),
}

impl RowKey {
    pub fn mtl(aux: &[DatasetTag]) -> RowKey {
        let mut tasks = aux.to_vec();
        tasks.sort();
        tasks.dedup();
        RowKey::Mtl(tasks)
    }

    fn group(&self) -> usize {
        match self {
            RowKey::Baseline(_) => 0,
            RowKey::Finetune(_) => 1,
            RowKey::Dann => 2,
            RowKey::Mtl(aux) => 2 + aux.len(),
        }
    }

    fn sort_key(&self) -> (usize, Vec<DatasetTag>) {
        let tags = match self {
            RowKey::Baseline(t) | RowKey::Finetune(t) => vec![*t],
            RowKey::Dann => vec![],
            RowKey::Mtl(aux) => aux.clone(),
        };
        (self.group(), tags)
    }

    /// Display label, e.g. `MTL: M & GLipsR`.
    pub fn label(&self) -> String {
        match self {
            RowKey::Baseline(t) => format!("Baseline: {t}"),
            RowKey::Finetune(t) => format!("Baseline: {t} -> M"),
            RowKey::Dann => "DANN: M & GLipsM".to_string(),
            RowKey::Mtl(aux) => {
                let mut s = "MTL: M".to_string();
                for t in aux {
                    s.push_str(&format!(" & {t}"));
                }
                s
            }
        }
    }

    /// Directory-safe run name, e.g. `mtl-GLipsR+LRW`.
    pub fn run_name(&self) -> String {
        match self {
            RowKey::Baseline(t) => format!("baseline-{t}"),
            RowKey::Finetune(t) => format!("finetune-{t}"),
            RowKey::Dann => "dann".to_string(),
            RowKey::Mtl(aux) => format!("mtl-{}", aux.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")),
        }
    }

    pub fn from_run_name(name: &str) -> Option<RowKey> {
        if name == "dann" {
            return Some(RowKey::Dann);
        }
        let (kind, rest) = name.split_once('-')?;
        match kind {
            "baseline" => rest.parse().ok().map(RowKey::Baseline),
            "finetune" => rest.parse().ok().map(RowKey::Finetune),
            "mtl" => {
                let tags = rest.split('+').map(str::parse).collect::<std::result::Result<Vec<DatasetTag>, _>>().ok()?;
                Some(RowKey::mtl(&tags))
            }
            _ => None,
        }
    }

    pub fn from_label(label: &str) -> Option<RowKey> {
        grid_rows().into_iter().find(|r| r.label() == label)
    }

    /// Columns this model is scored on.
    pub fn test_sets(&self) -> Vec<DatasetTag> {
        match self {
            RowKey::Baseline(DatasetTag::M) | RowKey::Finetune(_) => vec![DatasetTag::M, DatasetTag::Mbar],
            RowKey::Baseline(t) => vec![*t],
            RowKey::Dann => vec![DatasetTag::M, DatasetTag::Mbar, DatasetTag::GLipsM],
            RowKey::Mtl(aux) => {
                let mut cols = vec![DatasetTag::M, DatasetTag::Mbar];
                cols.extend(aux.iter().copied());
                cols
            }
        }
    }

    /// Head scoring test set `column` for a model of `kind`. The perturbed
    /// set is scored through the `M` head.
    pub fn head_for(kind: ModelKind, column: DatasetTag) -> String {
        match kind {
            ModelKind::Baseline | ModelKind::Dann => CLASS_HEAD.to_string(),
            ModelKind::Mtl if column == DatasetTag::Mbar => DatasetTag::M.as_str().to_string(),
            ModelKind::Mtl => column.as_str().to_string(),
        }
    }
}

impl PartialOrd for RowKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for RowKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

/// Every run of the grid: four baselines, three fine-tunes, one domain-adversarial
/// model and the seven multi-task subsets. Fine-tunes are listed after the
/// baselines they start from.
pub fn grid_rows() -> Vec<RowKey> {
    let aux = [DatasetTag::GLipsM, DatasetTag::GLipsR, DatasetTag::LRW];
    let mut rows: Vec<RowKey> = DatasetTag::TRAINABLE.iter().map(|&t| RowKey::Baseline(t)).collect();
    rows.extend(aux.iter().map(|&t| RowKey::Finetune(t)));
    rows.push(RowKey::Dann);
    for mask in 1u32..8 {
        let subset: Vec<DatasetTag> = (0..3).filter(|i| mask & (1 << i) != 0).map(|i| aux[i]).collect();
        rows.push(RowKey::mtl(&subset));
    }
    rows.sort();
    rows
}

/// Cell values are stored in hundredths of a percent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResultsMatrix {
    rows: BTreeMap<RowKey, BTreeMap<DatasetTag, u32>>,
}

impl ResultsMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, row: RowKey) {
        self.rows.entry(row).or_default();
    }

    pub fn set(&mut self, row: RowKey, column: DatasetTag, hundredths: u32) {
        assert!(hundredths <= 10_000, "accuracy above 100%");
        self.rows.entry(row).or_default().insert(column, hundredths);
    }

    /// Convenience for published two-decimal figures.
    pub fn set_percent(&mut self, row: RowKey, column: DatasetTag, percent: f64) {
        self.set(row, column, (percent * 100.0).round() as u32);
    }

    pub fn get(&self, row: &RowKey, column: DatasetTag) -> Option<u32> {
        self.rows.get(row)?.get(&column).copied()
    }

    pub fn rows(&self) -> impl Iterator<Item = &RowKey> {
        self.rows.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `model \t testset \t accuracy` per present cell.
    pub fn to_results_text(&self) -> String {
        let mut out = String::new();
        for (row, cells) in &self.rows {
            for col in COLUMNS {
                if let Some(&h) = cells.get(&col) {
                    out.push_str(&format!("{}\t{}\t{}\n", row.label(), col, hundredths_text(h)));
                }
            }
        }
        out
    }

    pub fn parse_results(text: &str) -> Result<Self> {
        let mut m = ResultsMatrix::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| EvalError::Parse { line: i + 1, detail };
            let fields: Vec<&str> = line.split('\t').collect();
            let [label, col, acc] = fields[..] else {
                return Err(bad(format!("expected 3 fields, got {}", fields.len())));
            };
            let row = RowKey::from_label(label).ok_or_else(|| EvalError::UnknownRow(label.to_string()))?;
            let col: DatasetTag = col.parse().map_err(bad)?;
            let (whole, frac) = acc.split_once('.').ok_or_else(|| bad(format!("bad accuracy {acc:?}")))?;
            let h = whole
                .parse::<u32>()
                .ok()
                .zip(frac.parse::<u32>().ok().filter(|_| frac.len() == 2))
                .map(|(w, f)| w * 100 + f)
                .filter(|&h| h <= 10_000)
                .ok_or_else(|| bad(format!("bad accuracy {acc:?}")))?;
            m.set(row, col, h);
        }
        Ok(m)
    }
}

const CELL_WIDTH: usize = 6;
const GAP: &str = "  ";

/// Fixed-width text table with a rule under the header and between row
/// groups.
pub fn render_table(m: &ResultsMatrix) -> String {
    let label_width = m.rows.keys().map(|r| r.label().len()).chain(["Model".len()]).max().unwrap_or(0);
    let total = label_width + COLUMNS.len() * (GAP.len() + CELL_WIDTH);
    let rule = format!("{}\n", "-".repeat(total));
    let line = |label: &str, cells: Vec<String>| {
        let mut s = format!("{label:<label_width$}");
        for c in cells {
            s.push_str(GAP);
            s.push_str(&format!("{c:>CELL_WIDTH$}"));
        }
        s.push('\n');
        s
    };
    let mut out = line("Model", COLUMNS.iter().map(|c| c.to_string()).collect());
    out.push_str(&rule);
    let mut last_group = None;
    for (row, cells) in &m.rows {
        if last_group.is_some_and(|g| g != row.group()) {
            out.push_str(&rule);
        }
        last_group = Some(row.group());
        let values = COLUMNS
            .iter()
            .map(|c| cells.get(c).map_or_else(|| "-".to_string(), |&h| hundredths_text(h)))
            .collect();
        out.push_str(&line(&row.label(), values));
    }
    out
}

/// Score every model on its columns. Columns whose head the model lacks are
/// skipped.
pub fn evaluate_grid(
    runs: &[(RowKey, &ModelAssembly<f32>)],
    testsets: &BTreeMap<DatasetTag, Vec<Sample>>,
    batch_size: usize,
) -> Result<ResultsMatrix> {
    let mut matrix = ResultsMatrix::new();
    for (row, model) in runs {
        matrix.add_row(row.clone());
        for col in row.test_sets() {
            let head = RowKey::head_for(model.kind, col);
            if !model.heads.contains_key(&head) {
                continue;
            }
            let samples = testsets.get(&col).ok_or(EvalError::MissingTestSet(col))?;
            let acc = top1_accuracy(model, &head, samples, batch_size)?;
            matrix.set(row.clone(), col, acc.hundredths());
        }
    }
    Ok(matrix)
}
