//! Network structure, parameter partition and an end-to-end gradient check.

#[path = "common/gradcheck.rs"]
mod gradcheck;

use std::collections::BTreeSet;

use segviz::nn::{BlockTag, Model, ModelConfig};
use segviz::tensor::{BatchNormMode, Init, Tape, Tensor};

fn small(dims: usize, depth: usize) -> ModelConfig {
    ModelConfig {
        spatial_dims: dims,
        depth,
        channels: (0..depth).map(|l| 2 << l).collect(),
        num_res_units: 1,
        ..ModelConfig::default()
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::create(shape, Init::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap()
}

#[test]
fn output_keeps_spatial_shape() {
    for dims in 2..=3 {
        for depth in 2..=4 {
            let cfg = small(dims, depth);
            let mut m = Model::<f32>::build(&cfg, 1).unwrap();
            let side = cfg.size_factor() * 2;
            let mut shape = vec![2, 1];
            shape.extend(std::iter::repeat(side).take(dims));
            let y = m.forward(&input(&shape, 3), "liver", BatchNormMode::Train).unwrap();
            let mut want = shape.clone();
            want[1] = 1;
            assert_eq!(y.shape(), &want[..], "dims {dims} depth {depth}");
            assert!(y.is_finite());
        }
    }
}

#[test]
fn five_level_volumetric_network() {
    let cfg = ModelConfig::volumetric();
    let mut m = Model::<f32>::build(&cfg, 0).unwrap();
    let y = m.forward(&input(&[2, 1, 16, 16, 16], 1), "spleen", BatchNormMode::Train).unwrap();
    assert_eq!(y.shape(), &[2, 1, 16, 16, 16]);
    let downs = m
        .param_names()
        .filter(|n| n.starts_with("enc.") && n.ends_with(".in.conv.weight"))
        .count();
    assert_eq!(downs, 5);
    let res_units = m
        .param_names()
        .filter(|n| n.starts_with("enc.4.res.") && n.ends_with("conv1.weight"))
        .count();
    assert_eq!(res_units, 2);
}

#[test]
fn head_holds_the_last_two_layers() {
    let cfg = ModelConfig::default();
    let m = Model::<f32>::build(&cfg, 0).unwrap();
    let c = cfg.channels[0];
    for task in ["liver", "spleen"] {
        let names: Vec<&str> = m
            .param_names()
            .filter(|n| BlockTag::for_name(n) == BlockTag::Task(task.into()))
            .collect();
        let prefix = format!("head.{task}.");
        let mut want = vec![
            "classifier.bias",
            "classifier.weight",
            "conv.bn.beta",
            "conv.bn.gamma",
            "conv.bn.running_mean",
            "conv.bn.running_var",
            "conv.conv.weight",
        ];
        want.sort();
        let got: Vec<&str> = names.iter().map(|n| n.strip_prefix(&prefix).unwrap()).collect();
        assert_eq!(got, want);
        let numel: usize = names.iter().map(|n| m.param(n).unwrap().numel()).sum();
        assert_eq!(numel, c * c * 9 + 4 * c + c + 1);
        assert_eq!(m.param(&format!("{prefix}classifier.weight")).unwrap().shape(), &[1, c, 1, 1]);
    }
}

#[test]
fn partition_is_exact() {
    let m = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
    let p = m.partition_names();
    let all: BTreeSet<&str> = m.param_names().collect();
    let mut seen = BTreeSet::new();
    for n in p.representation.iter().chain(p.tasks.values().flatten()) {
        assert!(seen.insert(n.as_str()), "{n} in two blocks");
    }
    assert_eq!(seen, all);
    assert!(p.representation.iter().all(|n| !n.starts_with("head.")));
    for (task, names) in &p.tasks {
        assert!(names.iter().all(|n| m.tag(n) == Some(&BlockTag::Task(task.clone()))));
    }
    let snap = m.extract_snapshot();
    assert_eq!(snap.representation().len(), p.representation.len());
    assert_eq!(snap.numel(), m.numel());
}

#[test]
fn heads_are_isolated() {
    let mut m = Model::<f32>::build(&ModelConfig::default(), 4).unwrap();
    let x = input(&[1, 1, 32, 32], 5);
    let before = m.forward(&x, "liver", BatchNormMode::Eval).unwrap();
    for name in m.param_names().filter(|n| n.starts_with("head.spleen.")).map(String::from).collect::<Vec<_>>() {
        m.param_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v += 1.0);
    }
    assert_eq!(m.forward(&x, "liver", BatchNormMode::Eval).unwrap(), before);

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let pass = m.forward_on_tape(&mut tape, xv, "liver", BatchNormMode::Train).unwrap();
    assert!(pass.bound_names().all(|n| !n.starts_with("head.spleen.")));
    let loss = tape.sum(pass.logits).unwrap();
    let grads = tape.backward(loss).unwrap();
    m.accumulate_grads(&pass, &grads).unwrap();
    let spleen_grads = m
        .param_names()
        .filter(|n| n.starts_with("head.spleen."))
        .filter(|n| m.param(n).unwrap().grad().is_some())
        .count();
    assert_eq!(spleen_grads, 0);
}

#[test]
fn initialization_is_seeded_per_name() {
    let cfg = ModelConfig::default();
    let a = Model::<f32>::build(&cfg, 11).unwrap().extract_snapshot();
    assert!(a.bit_eq(&Model::<f32>::build(&cfg, 11).unwrap().extract_snapshot()));
    assert!(!a.bit_eq(&Model::<f32>::build(&cfg, 12).unwrap().extract_snapshot()));
    let liver_only = Model::<f32>::build(&cfg.with_tasks(&["liver"]), 11).unwrap().extract_snapshot();
    assert!(liver_only.representation().bit_eq(&a.representation()));
    assert!(liver_only.task("liver").bit_eq(&a.task("liver")));
}

#[test]
fn network_loss_gradient_matches_finite_differences() {
    let (err, entries) = gradcheck::network_check();
    assert!(entries > 100);
    assert!(err < gradcheck::TOL, "relative error {err:e} over {entries} entries");
}
