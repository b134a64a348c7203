//! Snapshot generators, aggregation properties and the single-client
//! oracle, shared by the federation tests and the acceptance suite.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use segviz::fed::{
    run_federation, server_aggregate, server_broadcast, trainer_rng, AggregationPolicy, ClientUpdate,
    LocalTrainer, NodeSpec, Weighting,
};
use segviz::harness::{generate_data, parse_config, ExperimentConfig, DESK_CONFIG};
use segviz::nn::{BlockTag, Model, ParamSnapshot, SnapshotEntry};
use segviz::synthdata::LIVER;
use segviz::tensor::Tensor;

pub const TASKS: [&str; 4] = ["liver", "spleen", "kidney", "lung"];
const REP: [(&str, &[usize]); 3] = [
    ("enc.0.conv.weight", &[2, 3]),
    ("enc.0.bn.running_var", &[2]),
    ("mid.bias", &[4]),
];
pub const VALUES_PER_CLIENT: usize = 6 + 2 + 4 + 3;

pub fn entry(name: &str, shape: &[usize], data: Vec<f32>) -> SnapshotEntry {
    SnapshotEntry {
        name: name.into(),
        tag: BlockTag::for_name(name),
        tensor: Tensor::new(shape, data).unwrap(),
    }
}

/// Three representation tensors plus one head tensor for `task`.
pub fn client_snapshot(task: &str, values: &[f32]) -> ParamSnapshot {
    let mut it = values.iter().copied();
    let mut entries: Vec<SnapshotEntry> = REP
        .iter()
        .map(|(n, s)| entry(n, s, it.by_ref().take(s.iter().product()).collect()))
        .collect();
    entries.push(entry(&format!("head.{task}.w"), &[3], it.take(3).collect()));
    ParamSnapshot::new(entries).unwrap()
}

/// 1 to 4 clients as (sample count, parameter values).
pub fn clients() -> impl Strategy<Value = Vec<(u64, Vec<f32>)>> {
    prop::collection::vec(
        (1u64..1000, prop::collection::vec(-1.0f32..1.0, VALUES_PER_CLIENT)),
        1..=4,
    )
}

pub fn updates(clients: &[(u64, Vec<f32>)]) -> (Vec<ClientUpdate>, Vec<NodeSpec>) {
    let mut ups = Vec::new();
    let mut nodes = Vec::new();
    for (i, (count, values)) in clients.iter().enumerate() {
        let node_id = 10 * i as u16 + 3;
        nodes.push(NodeSpec {
            node_id,
            task: TASKS[i].into(),
            sample_count: *count,
        });
        ups.push(ClientUpdate {
            round: 1,
            node_id,
            task: TASKS[i].into(),
            sample_count: *count,
            snapshot: client_snapshot(TASKS[i], values),
        });
    }
    (ups, nodes)
}

pub fn policy(weighting: Weighting) -> AggregationPolicy {
    AggregationPolicy {
        weighting,
        aggregate_running_stats: true,
    }
}

/// Representation entries equal the weighted mean within 1e-6 and lie in
/// the convex hull of the client values.
pub fn weighted_mean_holds(cs: &[(u64, Vec<f32>)], uniform: bool) -> Result<(), TestCaseError> {
    let (ups, nodes) = updates(cs);
    let weighting = if uniform { Weighting::Uniform } else { Weighting::SampleCount };
    let global = server_aggregate(&ups, &nodes, 1, &policy(weighting)).unwrap();
    let total: u64 = cs.iter().map(|c| c.0).sum();
    for (name, _) in REP {
        let got = global.get(name).unwrap();
        prop_assert_eq!(&got.tag, &BlockTag::Representation);
        for (j, &g) in got.tensor.data().iter().enumerate() {
            let vals: Vec<f64> = ups
                .iter()
                .map(|u| f64::from(u.snapshot.get(name).unwrap().tensor.data()[j]))
                .collect();
            let want: f64 = vals
                .iter()
                .zip(cs)
                .map(|(v, c)| v * if uniform { 1.0 / cs.len() as f64 } else { c.0 as f64 / total as f64 })
                .sum();
            prop_assert!((f64::from(g) - want).abs() <= 1e-6, "{name}[{j}]: {g} vs {want}");
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= f64::from(g) && f64::from(g) <= hi);
        }
    }
    Ok(())
}

/// Every head in the global snapshot is bit-identical to its owner's and
/// the broadcast to a node carries only that node's head.
pub fn heads_copied(cs: &[(u64, Vec<f32>)]) -> Result<(), TestCaseError> {
    let (ups, nodes) = updates(cs);
    let global = server_aggregate(&ups, &nodes, 1, &AggregationPolicy::default()).unwrap();
    prop_assert_eq!(global.tasks().len(), cs.len());
    for (u, node) in ups.iter().zip(&nodes) {
        prop_assert!(global.task(&u.task).bit_eq(&u.snapshot.task(&u.task)));
        let back = server_broadcast(&global, node).unwrap();
        prop_assert_eq!(back.tasks().into_iter().collect::<Vec<_>>(), vec![u.task.as_str()]);
    }
    Ok(())
}

pub fn tiny(nodes: &str, extra: &[&str]) -> ExperimentConfig {
    let mut o = vec![
        "data.size=16,16".to_string(),
        format!("data.nodes={nodes}"),
        "data.test_size=2".into(),
        "train.patch_size=8,8".into(),
        "model.channels=2,4,4".into(),
        "model.res_units=1".into(),
        "fed.rounds=3".into(),
        "fed.local_epochs=2".into(),
    ];
    o.extend(extra.iter().map(|s| s.to_string()));
    parse_config(DESK_CONFIG, &o).unwrap()
}

/// A one-node uniform federation against a centralized trainer running
/// the same epochs. Returns whether the final snapshots and the per-epoch
/// losses are bit-identical.
pub fn single_client_equivalence() -> (bool, bool) {
    let cfg = tiny("liver:6", &["fed.weighting=uniform", "fed.transport=inproc"]);
    let data = generate_data(&cfg).unwrap();
    let fed = cfg.federation();
    let outcome = run_federation(&fed, &cfg.model, &cfg.train.trainer, &data.nodes).unwrap();

    let epochs = fed.total_local_epochs();
    let model = Model::<f32>::build(&cfg.model.with_tasks(&["liver"]), cfg.seed).unwrap();
    let mut central = LocalTrainer::new(
        model,
        "liver",
        LIVER,
        cfg.train.trainer.clone(),
        epochs,
        trainer_rng(cfg.seed, fed.nodes[0].node_id),
    )
    .unwrap();
    let losses: Vec<f64> = (0..epochs)
        .map(|_| central.train_epoch(&data.nodes[0].train).unwrap())
        .collect();
    let fed_losses: Vec<f64> = outcome.log.iter().flat_map(|r| r.epoch_losses.clone()).collect();
    (
        outcome.global.bit_eq(&central.model().extract_snapshot()),
        fed_losses == losses,
    )
}
