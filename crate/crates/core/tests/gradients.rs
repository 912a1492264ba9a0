//! Analytic gradients against central finite differences, coordinate by coordinate.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use clvqa::loss::{bce_dense, bce_soft_loss, TargetRow};
use clvqa::model::{Activation, HeadInit, Mlp};
use clvqa::strategies::lwf_loss;

const H: f64 = 1e-5;

/// Relative error per coordinate; pairs where both sides are below `floor` are skipped.
fn worst_relative(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

fn numeric_gradient(model: &Mlp, loss: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let theta = model.flatten().0;
    let mut probe = model.clone();
    (0..theta.len())
        .map(|i| {
            let mut t = theta.clone();
            t[i] += H;
            probe.assign(&t).unwrap();
            let up = loss(&probe);
            t[i] -= 2.0 * H;
            probe.assign(&t).unwrap();
            let down = loss(&probe);
            (up - down) / (2.0 * H)
        })
        .collect()
}

type Case = (Mlp, Array2<f64>, Vec<TargetRow>);

fn random_case(seed: u64, activation: Activation) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..6);
    let depth = rng.random_range(0..3);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..6)).collect();
    let classes = rng.random_range(1..6);
    let mut model = Mlp::new(input, &widths, activation, &mut rng);
    model.expand_head(classes, HeadInit::Gaussian { std: 0.8, seed });
    assert!(model.param_count() <= 200);
    let batch = rng.random_range(1..5);
    let x = Array2::from_shape_fn((batch, input), |_| rng.sample(StandardNormal));
    let targets = (0..batch)
        .map(|_| {
            let mut row = Vec::new();
            for c in 0..classes {
                if rng.random_bool(0.5) {
                    row.push((c, rng.random_range(0.0..=1.0)));
                }
            }
            row
        })
        .collect();
    (model, x, targets)
}

#[test]
fn bce_gradient_matches_finite_differences() {
    for (seed, act) in (0..100).map(|s| (s, if s % 2 == 0 { Activation::Tanh } else { Activation::Linear })) {
        let (model, x, targets) = random_case(seed, act);
        let loss = |m: &Mlp| bce_soft_loss(m.logits(x.view()).unwrap().view(), &targets).unwrap().0;
        let (logits, trace) = model.forward(x.view()).unwrap();
        let (_, dl) = bce_soft_loss(logits.view(), &targets).unwrap();
        let analytic = model.backward(&trace, &dl).unwrap();
        let numeric = numeric_gradient(&model, loss);
        let err = worst_relative(&analytic, &numeric, 1e-9);
        assert!(err < 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn relu_gradient_matches_away_from_kinks() {
    for seed in 0..50 {
        let (model, x, targets) = random_case(1000 + seed, Activation::Relu);
        let (logits, trace) = model.forward(x.view()).unwrap();
        // Skip draws with a pre-activation within the step of zero.
        let near_kink = model.hidden_layers().iter().enumerate().any(|(l, layer)| {
            let input = if l == 0 { x.clone() } else { trace.hidden[l - 1].clone() };
            let pre = input.dot(&layer.weight.t()) + &layer.bias;
            pre.iter().any(|v| v.abs() < 1e-3)
        });
        if near_kink {
            continue;
        }
        let (_, dl) = bce_soft_loss(logits.view(), &targets).unwrap();
        let analytic = model.backward(&trace, &dl).unwrap();
        let numeric = numeric_gradient(&model, |m| {
            bce_soft_loss(m.logits(x.view()).unwrap().view(), &targets).unwrap().0
        });
        let err = worst_relative(&analytic, &numeric, 1e-9);
        assert!(err < 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn lwf_gradient_matches_finite_differences() {
    for seed in 0..50 {
        let (model, x, _) = random_case(2000 + seed, Activation::Tanh);
        let classes = model.num_classes();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let old = rng.random_range(0..=classes);
        let teacher = Array2::from_shape_fn((x.nrows(), old), |_| rng.sample::<f64, _>(StandardNormal));
        let (lambda, t) = (rng.random_range(0.1..3.0), rng.random_range(0.5..4.0));
        let loss = |m: &Mlp| lwf_loss(m.logits(x.view()).unwrap().view(), teacher.view(), lambda, t).unwrap().0;
        let (logits, trace) = model.forward(x.view()).unwrap();
        let (_, dl) = lwf_loss(logits.view(), teacher.view(), lambda, t).unwrap();
        let analytic = model.backward(&trace, &dl).unwrap();
        let err = worst_relative(&analytic, &numeric_gradient(&model, loss), 1e-9);
        assert!(err < 1e-6, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn dense_bce_logit_gradient_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (b, c) = (rng.random_range(1..5), rng.random_range(1..5));
        let z = Array2::from_shape_fn((b, c), |_| 3.0 * rng.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_fn((b, c), |_| rng.random_range(0.0..=1.0));
        let (_, g) = bce_dense(z.view(), y.view()).unwrap();
        for i in 0..b {
            for j in 0..c {
                let mut zp = z.clone();
                zp[[i, j]] += H;
                let up = bce_dense(zp.view(), y.view()).unwrap().0;
                zp[[i, j]] -= 2.0 * H;
                let down = bce_dense(zp.view(), y.view()).unwrap().0;
                let fd = (up - down) / (2.0 * H);
                assert!((fd - g[[i, j]]).abs() <= 1e-6 * g[[i, j]].abs().max(1e-3));
            }
        }
    }
}
