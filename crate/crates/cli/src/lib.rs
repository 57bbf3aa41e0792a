//! Config-driven driver for data preparation, training runs, the experiment
//! grid and evaluation.

pub mod config;
pub mod prepare;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;

pub const BEST_CHECKPOINT: &str = "best.mckp";
pub const LAST_CHECKPOINT: &str = "last.mckp";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.tsv";
pub const TABLE_FILE: &str = "table.txt";
