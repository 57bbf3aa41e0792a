use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mouthing_cli::report::{build_mbar, cached_mbar};
use mouthing_cli::ExperimentConfig;
use mouthing_core::synthetic::{write_prepared_corpus, write_raw_corpus};
use mouthing_core::trainer::load_checkpoint;
use mouthing_core::{DatasetTag, Manifest, Split};

fn mouthing(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mouthing")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const TINY: &str = r#"
[data]
root = "prepared"
frames = 4
crop_size = 16

[model]
conv_channels = [2, 2, 3]
gru_hidden = 4

[train]
batch_size = 8
lr = 0.001
max_epochs = 2
early_stop_gate = 2
patience = 1
augment = false

[output]
dir = "runs"
"#;

fn prepared_workspace(tags: &[DatasetTag]) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for (i, &tag) in tags.iter().enumerate() {
        write_prepared_corpus(&dir.path().join("prepared"), tag, 3, [4, 2, 2], [4, 16, 16], 10 + i as u64).unwrap();
    }
    dir
}

#[test]
fn prepare_splits_toy_corpus_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    write_raw_corpus(dir.path(), DatasetTag::M, 3, 20, 20..=40, [40, 48], 1).unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\nframes = 30\ncrop_size = 32\n[data.raw.M]\nmanifest = \"raw/M.tsv\"\ncropboxes = \"raw/M.boxes\"\n",
    );
    let out = mouthing(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("M: prepared 60 clips"), "{}", stderr(&out));

    let manifest_path = dir.path().join("prepared/M.tsv");
    let manifest = Manifest::read(&manifest_path).unwrap();
    let counts = manifest.counts();
    for label in ["word00", "word01", "word02"] {
        for (split, n) in [(Split::Train, 16), (Split::Val, 2), (Split::Test, 2)] {
            assert_eq!(counts.get(&(DatasetTag::M, label.to_string(), Some(split))), Some(&n), "{label} {split:?}");
        }
    }
    for e in &manifest.entries {
        let clip = mouthing_core::datapipe::read_clip(&dir.path().join("prepared").join(&e.path)).unwrap();
        assert_eq!(clip.dims(), [30, 32, 32]);
    }

    let before = std::fs::metadata(&manifest_path).unwrap().modified().unwrap();
    let again = mouthing(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stderr(&again).contains("M: already prepared"));
    assert_eq!(std::fs::metadata(&manifest_path).unwrap().modified().unwrap(), before);
}

#[test]
fn prepare_names_clip_without_cropbox() {
    let dir = tempfile::tempdir().unwrap();
    write_raw_corpus(dir.path(), DatasetTag::GLipsR, 2, 4, 5..=8, [24, 24], 2).unwrap();
    let boxes = dir.path().join("raw/GLipsR.boxes");
    let text = std::fs::read_to_string(&boxes).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("GLipsR-word01-002")).collect();
    std::fs::write(&boxes, kept.join("\n")).unwrap();
    let cfg = write_config(
        dir.path(),
        "[data]\nframes = 8\ncrop_size = 16\n[data.raw.GLipsR]\nmanifest = \"raw/GLipsR.tsv\"\ncropboxes = \"raw/GLipsR.boxes\"\n",
    );
    let out = mouthing(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("GLipsR-word01-002"), "{}", stderr(&out));
}

#[test]
fn invalid_configs_list_violations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[experiment]\nkind = \"finetune\"\ndatasets = [\"M\"]\n[train]\nlr = 0.0\n");
    let out = mouthing(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("source_checkpoint") && err.contains("lr must be positive"), "{err}");

    let cfg = write_config(dir.path(), "[experiment]\nkind = \"dann\"\ndatasets = [\"M\", \"GLipsR\"]\n");
    let out = mouthing(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("dann runs are defined for tasks [M, GLipsM]"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), "[train]\nlearning_rate = 0.1\n");
    let out = mouthing(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn mtl_train_writes_run_directory() {
    let dir = prepared_workspace(&[DatasetTag::M, DatasetTag::GLipsR]);
    let cfg = write_config(dir.path(), &format!("{TINY}\n[experiment]\nkind = \"mtl\"\ndatasets = [\"M\", \"GLipsR\"]\n"));
    let out = mouthing(&["train", "--config", cfg.to_str().unwrap(), "--seed", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("runs/mtl-GLipsR");
    for f in ["best.mckp", "last.mckp", "history.jsonl", "config.toml"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let best = load_checkpoint(&run.join("best.mckp")).unwrap();
    let heads: Vec<&str> = best.descriptor.heads.iter().map(|h| h.name.as_str()).collect();
    assert_eq!(heads, ["M", "GLipsR"]);
    let history = std::fs::read_to_string(run.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let resolved = ExperimentConfig::parse(&std::fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
    assert_eq!(resolved.train.seed, 3);
    assert_eq!(resolved.train.tasks, [DatasetTag::M, DatasetTag::GLipsR]);

    let rerun = mouthing(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!rerun.status.success(), "finished runs are not overwritten");
    let resumed = mouthing(&["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(resumed.status.success());
    assert!(stderr(&resumed).contains("skipped"));

    let single = mouthing(&["eval", "--config", cfg.to_str().unwrap(), run.to_str().unwrap()]);
    assert!(single.status.success(), "{}", stderr(&single));
    let table = String::from_utf8(single.stdout).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with("Model") && !l.starts_with('-')).collect();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("MTL: M & GLipsR"));
}

#[test]
fn eval_names_missing_checkpoint() {
    let dir = prepared_workspace(&[DatasetTag::M]);
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("runs/baseline-M");
    let out = mouthing(&["eval", "--config", cfg.to_str().unwrap(), run.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("baseline-M"), "{}", stderr(&out));
}

#[test]
fn perturbed_cache_matches_regeneration() {
    let dir = prepared_workspace(&[DatasetTag::M]);
    let cfg = ExperimentConfig::load(&write_config(dir.path(), TINY)).unwrap();
    let first = cached_mbar(&cfg).unwrap();
    assert!(dir.path().join("prepared/Mbar.tsv").is_file());
    let cached = cached_mbar(&cfg).unwrap();
    let fresh = build_mbar(&cfg).unwrap();
    assert_eq!(first, fresh);
    assert_eq!(cached, fresh);
    assert_eq!(fresh.len(), 6);
}

#[test]
fn grid_runs_every_row_and_resumes() {
    let dir = prepared_workspace(&DatasetTag::TRAINABLE);
    let cfg = write_config(dir.path(), &TINY.replace("max_epochs = 2\nearly_stop_gate = 2", "max_epochs = 1\nearly_stop_gate = 1"));
    let cfg_arg = cfg.to_str().unwrap();
    let out = mouthing(&["grid", "--config", cfg_arg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    let rows = table.lines().filter(|l| !l.starts_with("Model") && !l.starts_with('-')).count();
    assert_eq!(rows, 15);
    assert_eq!(std::fs::read_to_string(dir.path().join("runs/table.txt")).unwrap(), table);

    // drop the last ten runs and resume: only those retrain
    let names: Vec<String> = mouthing_core::eval::grid_rows().iter().map(|r| r.run_name()).collect();
    let history_of = |n: &str| std::fs::read(dir.path().join("runs").join(n).join("history.jsonl")).unwrap();
    let kept: Vec<Vec<u8>> = names[..5].iter().map(|n| history_of(n)).collect();
    for n in &names[5..] {
        std::fs::remove_dir_all(dir.path().join("runs").join(n)).unwrap();
    }
    let resumed = mouthing(&["grid", "--config", cfg_arg, "--resume"]);
    assert!(resumed.status.success(), "{}", stderr(&resumed));
    let log = stderr(&resumed);
    assert_eq!(log.matches("complete, skipped").count(), 5, "{log}");
    assert_eq!(log.matches(": best epoch").count(), 10, "{log}");
    for (n, h) in names[..5].iter().zip(&kept) {
        assert_eq!(&history_of(n), h);
    }
    assert_eq!(String::from_utf8(resumed.stdout).unwrap(), table, "deterministic retraining");
}
