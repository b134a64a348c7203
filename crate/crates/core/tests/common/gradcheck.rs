//! Finite-difference cases shared by the gradient tests and the acceptance
//! suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segviz::nn::{Model, ModelConfig};
use segviz::optim::{soft_dice_loss, DICE_EPS};
use segviz::tensor::{finite_difference_gradient, max_relative_error, BatchNormMode, Init, Tape, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const INSTANCES: u64 = 20;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::create(
        shape,
        Init::Uniform {
            lo: -1.0,
            hi: 1.0,
            seed: rng.gen(),
        },
    )
    .unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

/// Compares the tape gradient of `Σ w ⊙ op(inputs)` with central differences
/// for every input, returning the worst relative error.
pub fn check<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, op: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x).unwrap()).collect();
        let out = op(&mut tape, &vars);
        let value = tape.value(out).unwrap().clone();
        let total = match weights {
            Some(w) => value.data().iter().zip(w.data()).map(|(a, b)| a * b).sum(),
            None => 0.0,
        };
        (total, value)
    };
    let (_, probe) = eval(inputs, None);
    let weights = random(probe.shape(), rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_grad()).unwrap())
        .collect();
    let out = op(&mut tape, &vars);
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().expect("input reaches loss");
        let numeric = finite_difference_gradient(
            |xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                eval(&xs, Some(&weights)).0
            },
            &inputs[i],
            H,
        );
        worst = worst.max(max_relative_error(analytic.data(), numeric.data()));
    }
    worst
}

pub type Case = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

/// Worst error of `case` over the seeded instances, or the first failing
/// instance.
pub fn run_instances(name: &str, case: &Case) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ seed);
        let err = case(&mut rng);
        if !(err < TOL) {
            return Err(format!("{name}: instance {seed} rel err {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn conv_case(rng: &mut ChaCha8Rng) -> f64 {
    let rank = rng.gen_range(2..=3);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let mut xs = vec![2, cin];
    let mut ws = vec![cout, cin];
    for _ in 0..rank {
        xs.push(rng.gen_range(k.max(2)..=5));
        ws.push(k);
    }
    let inputs = [random(&xs, rng), random(&ws, rng), random(&[cout], rng)];
    check(&inputs, rng, |t, v| t.conv_nd(v[0], v[1], Some(v[2]), &[stride], &[pad]).unwrap())
}

fn conv_transpose_case(rng: &mut ChaCha8Rng) -> f64 {
    let rank = rng.gen_range(2..=3);
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=3);
    let k = rng.gen_range(2..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let mut xs = vec![2, cin];
    let mut ws = vec![cin, cout];
    for _ in 0..rank {
        xs.push(rng.gen_range(2..=4));
        ws.push(k);
    }
    let inputs = [random(&xs, rng), random(&ws, rng), random(&[cout], rng)];
    check(&inputs, rng, |t, v| {
        t.conv_transpose_nd(v[0], v[1], Some(v[2]), &[stride], &[pad]).unwrap()
    })
}

fn batch_norm_case(mode: BatchNormMode) -> Case {
    Box::new(move |rng| {
        let c = rng.gen_range(1..=3);
        let shape = [rng.gen_range(1..=3), c, rng.gen_range(2..=4), 3];
        let rm0 = random(&[c], rng);
        let rv0 = Tensor::<f64>::full(&[c], 0.7).unwrap();
        let inputs = [random(&shape, rng), random(&[c], rng), random(&[c], rng)];
        check(&inputs, rng, move |t, v| {
            let (mut m, mut s) = (rm0.clone(), rv0.clone());
            t.batch_norm_nd(v[0], v[1], v[2], &mut m, &mut s, mode, 1e-5, 0.1).unwrap()
        })
    })
}

fn soft_dice_case(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.gen_range(4..=24);
    let target = Tensor::new(&[n], (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect()).unwrap();
    let inputs = [random(&[n], rng)];
    check(&inputs, rng, move |t, v| soft_dice_loss(t, v[0], &target, DICE_EPS).unwrap())
}

/// Every differentiable tape operation with its random-instance generator.
pub fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv_nd", Box::new(conv_case) as Case),
        ("conv_transpose_nd", Box::new(conv_transpose_case)),
        ("batch_norm_nd train", batch_norm_case(BatchNormMode::Train)),
        ("batch_norm_nd eval", batch_norm_case(BatchNormMode::Eval)),
        (
            "relu",
            Box::new(|rng: &mut ChaCha8Rng| {
                let inputs = [away_from_zero(&[2, 3, 4], rng)];
                check(&inputs, rng, |t, v| t.relu(v[0]).unwrap())
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng: &mut ChaCha8Rng| {
                let inputs = [random(&[2, 3, 4], rng)];
                check(&inputs, rng, |t, v| t.sigmoid(v[0]).unwrap())
            }),
        ),
        (
            "softmax",
            Box::new(|rng: &mut ChaCha8Rng| {
                let axis = rng.gen_range(0..3);
                let inputs = [random(&[2, 3, 4], rng)];
                check(&inputs, rng, |t, v| t.softmax(v[0], axis).unwrap())
            }),
        ),
        (
            "concat_channels",
            Box::new(|rng: &mut ChaCha8Rng| {
                let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
                let inputs = [random(&[2, ca, 3, 3], rng), random(&[2, cb, 3, 3], rng)];
                check(&inputs, rng, |t, v| t.concat_channels(v[0], v[1]).unwrap())
            }),
        ),
        (
            "slice_channels",
            Box::new(|rng: &mut ChaCha8Rng| {
                let inputs = [random(&[2, 4, 3, 2], rng)];
                let start = rng.gen_range(0..3);
                check(&inputs, rng, |t, v| t.slice_channels(v[0], start, 4 - start).unwrap())
            }),
        ),
        (
            "add",
            Box::new(|rng: &mut ChaCha8Rng| {
                let inputs = [random(&[2, 3], rng), random(&[2, 3], rng)];
                check(&inputs, rng, |t, v| t.add(v[0], v[1]).unwrap())
            }),
        ),
        (
            "mul",
            Box::new(|rng: &mut ChaCha8Rng| {
                let inputs = [random(&[2, 3], rng), random(&[2, 3], rng)];
                check(&inputs, rng, |t, v| t.mul(v[0], v[1]).unwrap())
            }),
        ),
        (
            "scale+sum",
            Box::new(|rng: &mut ChaCha8Rng| {
                let c: f64 = rng.gen_range(-2.0..2.0);
                let inputs = [random(&[3, 2], rng)];
                check(&inputs, rng, move |t, v| {
                    let s = t.scale(v[0], c).unwrap();
                    t.sum(s).unwrap()
                })
            }),
        ),
        ("soft_dice_loss", Box::new(soft_dice_case)),
    ]
}

/// Soft-dice gradient of a depth-3 2-D network on an 8×8 batch against
/// central differences, over three sampled entries of every parameter.
/// Returns the worst relative error and the number of entries checked.
pub fn network_check() -> (f64, usize) {
    let cfg = ModelConfig {
        channels: vec![2, 4, 4],
        num_res_units: 1,
        tasks: vec!["liver".into()],
        ..ModelConfig::default()
    };
    let mut model = Model::<f64>::build(&cfg, 21).unwrap();
    let x: Tensor<f64> = Tensor::create(&[2, 1, 8, 8], Init::Uniform { lo: 0.0, hi: 1.0, seed: 22 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let target =
        Tensor::new(&[2, 1, 8, 8], (0..128).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect()).unwrap();

    let loss_of = |m: &mut Model<f64>| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let pass = m.forward_on_tape(&mut tape, xv, "liver", BatchNormMode::Train).unwrap();
        let loss = soft_dice_loss(&mut tape, pass.logits, &target, DICE_EPS).unwrap();
        tape.value(loss).unwrap().data()[0]
    };

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let pass = model.forward_on_tape(&mut tape, xv, "liver", BatchNormMode::Train).unwrap();
    let loss = soft_dice_loss(&mut tape, pass.logits, &target, DICE_EPS).unwrap();
    let grads = tape.backward(loss).unwrap();
    model.accumulate_grads(&pass, &grads).unwrap();

    let names: Vec<String> = pass.bound_names().map(String::from).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for name in &names {
        let n = model.param(name).unwrap().numel();
        for _ in 0..3.min(n) {
            let i = rng.gen_range(0..n);
            analytic.push(model.param(name).unwrap().grad().unwrap()[i]);
            let orig = model.param(name).unwrap().data()[i];
            model.param_mut(name).unwrap().data_mut()[i] = orig + H;
            let up = loss_of(&mut model);
            model.param_mut(name).unwrap().data_mut()[i] = orig - H;
            let down = loss_of(&mut model);
            model.param_mut(name).unwrap().data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * H));
        }
    }
    (max_relative_error(&analytic, &numeric), analytic.len())
}
