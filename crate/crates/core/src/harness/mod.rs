//! Experiment orchestration: per-task baselines, the federated run,
//! evaluation on the shared test set and report files.

mod config;
mod report;

pub use config::{
    load_config, parse_config, ConfigError, DataNode, DataSection, ExperimentConfig, FedSection, TrainSection,
    DESK_CONFIG, TEST_ID_BASE,
};
pub use report::{
    baseline_model_name, box_stats, boxplot_svg, display_label, emit_report, parse_csv, quantile, summarize,
    to_csv, BoxStats, GroupSummary, MetricsRecord, Summary, CSV_HEADER, METRICS_FILE, SEGVIZ_MODEL, SUMMARY_FILE,
};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::fed::{
    decode_message, encode_message, evaluate_samples, run_federation, trainer_rng, CodecError, FedError,
    LocalTrainer, Message, RoundLog,
};
use crate::nn::{Model, ModelConfig, ModelError, ParamSnapshot, Scope};
use crate::synthdata::{
    class_for_task, export_dataset, generate_node_dataset, generate_test_set, import_dataset, DataError,
    DatasetBundle, Sample, MANIFEST_FILE,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("snapshot file: {0}")]
    Snapshot(#[from] CodecError),
    #[error("report: {0}")]
    Report(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 configuration, 4 transport, 3 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::UnknownTask(_) => 2,
            HarnessError::Fed(FedError::InvalidConfig(_)) => 2,
            HarnessError::Fed(e) if e.is_transport() => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Node datasets and test set for `config`, loaded from the cache directory
/// when one is configured and populated, generated (and cached) otherwise.
pub fn prepare_data(config: &ExperimentConfig) -> Result<DatasetBundle> {
    if let Some(dir) = &config.data.cache_dir {
        if dir.join(MANIFEST_FILE).exists() {
            return Ok(import_dataset(dir)?);
        }
    }
    let bundle = generate_data(config)?;
    if let Some(dir) = &config.data.cache_dir {
        export_dataset(&bundle, dir)?;
    }
    Ok(bundle)
}

pub fn generate_data(config: &ExperimentConfig) -> Result<DatasetBundle> {
    let phantom = &config.data.phantom;
    let nodes = config
        .data
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let class = class_for_task(&n.task).ok_or_else(|| HarnessError::UnknownTask(n.task.clone()))?;
            Ok(generate_node_dataset(
                phantom,
                &n.task,
                class,
                config.node_ids(i),
                config.data.train_fraction,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetBundle {
        nodes,
        test: generate_test_set(phantom, config.test_ids())?,
    })
}

/// Output of one trained arm.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub records: Vec<MetricsRecord>,
    pub snapshot: ParamSnapshot,
    pub log: Vec<RoundLog>,
}

/// Per-sample dice of `task` for a model restored from `snapshot`.
pub fn evaluate_model(
    snapshot: &ParamSnapshot,
    model_config: &ModelConfig,
    test: &[Sample],
    task: &str,
    threshold: f64,
) -> Result<Vec<f64>> {
    let class = class_for_task(task).ok_or_else(|| HarnessError::UnknownTask(task.to_string()))?;
    let tasks: Vec<&str> = snapshot.tasks().into_iter().collect();
    if !tasks.contains(&task) {
        return Err(HarnessError::UnknownTask(task.to_string()));
    }
    let mut model = Model::<f32>::build(&model_config.with_tasks(&tasks), 0)?;
    model.apply_snapshot(snapshot, &Scope::All)?;
    Ok(evaluate_samples(&mut model, test, task, class, threshold)?)
}

fn records(config: &ExperimentConfig, model: &str, task: &str, test: &[Sample], dice: &[f64]) -> Vec<MetricsRecord> {
    test.iter()
        .zip(dice)
        .map(|(s, &d)| MetricsRecord {
            experiment: config.experiment.clone(),
            model: model.to_string(),
            task: task.to_string(),
            sample_id: s.sample_id,
            dice: d,
        })
        .collect()
}

/// Centralized single-head training on one node's data for
/// `baseline_epochs`, then evaluation on the test set.
pub fn run_baseline(config: &ExperimentConfig, data: &DatasetBundle, task: &str) -> Result<ArmResult> {
    let node = config
        .data
        .nodes
        .iter()
        .position(|n| n.task == task)
        .ok_or_else(|| HarnessError::UnknownTask(task.to_string()))?;
    let ds = data
        .nodes
        .iter()
        .find(|d| d.task == task)
        .ok_or_else(|| HarnessError::UnknownTask(task.to_string()))?;
    let model = Model::<f32>::build(&config.model.with_tasks(&[task]), config.seed)?;
    let epochs = config.train.baseline_epochs;
    let mut trainer = LocalTrainer::new(
        model,
        task,
        ds.class_id,
        config.train.trainer.clone(),
        epochs,
        trainer_rng(config.seed, node as u16),
    )?;
    for _ in 0..epochs {
        trainer.train_epoch(&ds.train)?;
    }
    let snapshot = trainer.model().extract_snapshot();
    let dice = evaluate_model(&snapshot, &config.model, &data.test, task, config.train.trainer.threshold)?;
    Ok(ArmResult {
        records: records(config, &baseline_model_name(task), task, &data.test, &dice),
        snapshot,
        log: Vec::new(),
    })
}

/// Federated run followed by evaluation of the global model on every task.
pub fn run_segviz(config: &ExperimentConfig, data: &DatasetBundle) -> Result<ArmResult> {
    let fed = config.federation();
    let outcome = run_federation(&fed, &config.model, &config.train.trainer, &data.nodes)?;
    let mut recs = Vec::new();
    for task in fed.tasks() {
        let dice = evaluate_model(
            &outcome.global,
            &config.model,
            &data.test,
            &task,
            config.train.trainer.threshold,
        )?;
        recs.extend(records(config, SEGVIZ_MODEL, &task, &data.test, &dice));
    }
    Ok(ArmResult {
        records: recs,
        snapshot: outcome.global,
        log: outcome.log,
    })
}

/// Both baselines and the federated run on the same data.
#[derive(Clone, Debug)]
pub struct StudyResult {
    pub baselines: Vec<ArmResult>,
    pub segviz: ArmResult,
}

impl StudyResult {
    pub fn records(&self) -> Vec<MetricsRecord> {
        let mut r = self.segviz.records.clone();
        for b in &self.baselines {
            r.extend(b.records.iter().cloned());
        }
        r
    }
}

pub fn run_study(config: &ExperimentConfig, data: &DatasetBundle) -> Result<StudyResult> {
    let baselines = config
        .data
        .nodes
        .iter()
        .map(|n| run_baseline(config, data, &n.task))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        baselines,
        segviz: run_segviz(config, data)?,
    })
}

/// Snapshot file: one GlobalParams frame, so it carries the wire CRC.
pub fn save_snapshot(snapshot: &ParamSnapshot, path: &Path) -> Result<()> {
    let frame = encode_message(&Message::GlobalParams {
        round: 0,
        snapshot: snapshot.clone(),
    })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, frame)?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<ParamSnapshot> {
    match decode_message(&fs::read(path)?)? {
        Message::GlobalParams { snapshot, .. } => Ok(snapshot),
        other => Err(HarnessError::Report(format!(
            "{} holds a {} frame, not a snapshot",
            path.display(),
            other.kind()
        ))),
    }
}

pub const ROUND_LOG_HEADER: &str = "round,node_id,task,epoch_losses,val_dice";

/// Per-round client log; epoch losses are `;`-separated.
pub fn round_log_csv(log: &[RoundLog]) -> String {
    let mut out = String::from(ROUND_LOG_HEADER);
    out.push('\n');
    for r in log {
        let losses: Vec<String> = r.epoch_losses.iter().map(|l| l.to_string()).collect();
        writeln!(out, "{},{},{},{},{}", r.round, r.node_id, r.task, losses.join(";"), r.val_dice)
            .expect("string write");
    }
    out
}

/// Writes metrics, snapshot and, for federated arms, the round log into `dir`.
pub fn save_arm(arm: &ArmResult, name: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), to_csv(&arm.records))?;
    save_snapshot(&arm.snapshot, &dir.join(format!("{name}.snapshot")))?;
    if !arm.log.is_empty() {
        fs::write(dir.join("rounds.csv"), round_log_csv(&arm.log))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::{RoundLog, TransportKind};

    fn tiny() -> ExperimentConfig {
        parse_config(
            DESK_CONFIG,
            &[
                "data.size=16,16",
                "data.nodes=liver:4,spleen:3",
                "data.test_size=3",
                "train.patch_size=8,8",
                "model.channels=2,4,4",
                "model.res_units=1",
                "train.baseline_epochs=2",
                "fed.rounds=2",
                "fed.local_epochs=1",
            ],
        )
        .unwrap()
    }

    #[test]
    fn baseline_with_zero_epochs_still_reports() {
        let mut c = tiny();
        c.train.baseline_epochs = 0;
        let data = generate_data(&c).unwrap();
        let arm = run_baseline(&c, &data, "spleen").unwrap();
        assert_eq!(arm.records.len(), 3);
        assert!(arm.records.iter().all(|r| (0.0..=1.0).contains(&r.dice) && r.model == "baseline_spleen"));
        assert_eq!(arm.snapshot.tasks().into_iter().collect::<Vec<_>>(), ["spleen"]);
    }

    #[test]
    fn segviz_rows_cover_both_tasks_and_rounds() {
        let c = tiny();
        let data = generate_data(&c).unwrap();
        let arm = run_segviz(&c, &data).unwrap();
        assert_eq!(arm.records.len(), 6);
        assert_eq!(arm.log.len(), 4);
        for node in 0..2 {
            assert_eq!(arm.log.iter().filter(|r: &&RoundLog| r.node_id == node).count(), 2);
        }
        let mut tcp = c.clone();
        tcp.fed.transport = TransportKind::Tcp;
        let over_tcp = run_segviz(&tcp, &data).unwrap();
        assert!(over_tcp.snapshot.bit_eq(&arm.snapshot));
        assert_eq!(over_tcp.records, arm.records);
    }

    #[test]
    fn snapshot_file_round_trip_and_cache() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let data = generate_data(&c).unwrap();
        let arm = run_baseline(&c, &data, "liver").unwrap();
        save_arm(&arm, "baseline_liver", dir.path()).unwrap();
        let back = load_snapshot(&dir.path().join("baseline_liver.snapshot")).unwrap();
        assert!(back.bit_eq(&arm.snapshot));

        let mut cached = c.clone();
        cached.data.cache_dir = Some(dir.path().join("data"));
        assert_eq!(prepare_data(&cached).unwrap(), data);
        assert!(dir.path().join("data").join(MANIFEST_FILE).exists());
        assert_eq!(prepare_data(&cached).unwrap(), data);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config(ConfigError::UnknownKey("x".into())).exit_code(), 2);
        let t = FedError::Transport {
            node: "node 1".into(),
            detail: "closed".into(),
        };
        assert_eq!(HarnessError::Fed(t).exit_code(), 4);
        assert_eq!(HarnessError::Report("x".into()).exit_code(), 3);
    }
}
