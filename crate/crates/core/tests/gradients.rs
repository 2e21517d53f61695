//! Analytic gradients against central finite differences.

use afr_core::head::{value_and_gradient, Objective};
use afr_core::mlp::{balance_inputs, balance_loss, balance_loss_and_gradient, OutputTransform};
use afr_core::weights::group_aggregated_weights;
use afr_core::{LinearHead, Matrix, Mlp, Rng, WeightVector};

const STEP: f64 = 1e-6;

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + STEP;
            let up = f(&xp);
            xp[i] = x[i] - STEP;
            let down = f(&xp);
            xp[i] = x[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * rng.normal()).collect(),
    )
    .unwrap()
}

struct Instance {
    head: LinearHead,
    x: Matrix,
    y: Vec<usize>,
    groups: Vec<usize>,
    mu: WeightVector,
}

/// Random head displaced from its anchor, so the penalty gradient is nonzero.
fn instance(seed: u64) -> Instance {
    let mut rng = Rng::new(seed);
    let n = 2 + rng.below(7);
    let d = 1 + rng.below(5);
    let c = 2 + rng.below(2);
    let anchor = LinearHead::from_anchor(
        random_matrix(&mut rng, c, d, 1.0),
        (0..c).map(|_| rng.normal()).collect(),
    )
    .unwrap();
    let moved: Vec<f64> = anchor
        .params()
        .iter()
        .map(|p| p + 0.5 * rng.normal())
        .collect();
    let head = anchor.with_params(&moved).unwrap();
    let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let groups: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let mu =
        WeightVector::from_unnormalized((0..n).map(|_| 0.1 + rng.uniform()).collect()).unwrap();
    Instance {
        x: random_matrix(&mut rng, n, d, 1.0),
        head,
        y,
        groups,
        mu,
    }
}

fn check_head(objective: &Objective<'_>, inst: &Instance, lambda: f64) -> f64 {
    let (_, analytic) =
        value_and_gradient(objective, &inst.head, &inst.x, &inst.y, lambda).unwrap();
    let numeric = central_difference(
        |p| {
            let h = inst.head.with_params(p).unwrap();
            value_and_gradient(objective, &h, &inst.x, &inst.y, lambda)
                .unwrap()
                .0
        },
        &inst.head.params(),
    );
    relative_error(&analytic, &numeric)
}

#[test]
fn head_erm_gradient() {
    for seed in 0..50 {
        let inst = instance(seed);
        let err = check_head(&Objective::Erm, &inst, 0.0);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn head_afr_gradient_with_anchor_penalty() {
    for seed in 0..50 {
        let inst = instance(100 + seed);
        for lambda in [0.0, 0.3, 2.0] {
            let err = check_head(&Objective::Afr { mu: &inst.mu }, &inst, lambda);
            assert!(err < 1e-5, "seed {seed} λ {lambda}: {err}");
        }
    }
}

#[test]
fn head_gdro_gradient() {
    for seed in 0..50 {
        let inst = instance(200 + seed);
        // every group must be nonempty
        let objective = Objective::Gdro {
            groups: &inst.groups,
            num_groups: inst.groups.len().min(3),
        };
        let err = check_head(&objective, &inst, 0.1);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}

fn random_net(rng: &mut Rng, output: OutputTransform) -> (Mlp, Matrix) {
    let n = 2 + rng.below(7);
    let d = 1 + rng.below(5);
    let c = 1 + rng.below(3);
    let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 2 + rng.below(4)).collect();
    let mut sizes = vec![d];
    sizes.extend(&hidden);
    sizes.push(c.max(if output == OutputTransform::Logits {
        2
    } else {
        1
    }));
    let mut net = Mlp::new(&sizes, output, rng).unwrap();
    // nonzero biases keep ReLU kinks away from the evaluation point
    let params: Vec<f64> = net
        .params()
        .iter()
        .map(|p| p + 0.1 * rng.normal())
        .collect();
    net.set_params(&params).unwrap();
    (net, random_matrix(rng, n, d, 1.0))
}

fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.set_params(p).unwrap();
    n
}

#[test]
fn mlp_cross_entropy_gradient() {
    let mut rng = Rng::new(7);
    for case in 0..50 {
        let (net, x) = random_net(&mut rng, OutputTransform::Logits);
        let y: Vec<usize> = (0..x.rows()).map(|_| rng.below(net.output_dim())).collect();
        let (_, analytic) = net.cross_entropy_and_gradient(&x, &y).unwrap();
        let numeric = central_difference(
            |p| {
                with_params(&net, p)
                    .cross_entropy_and_gradient(&x, &y)
                    .unwrap()
                    .0
            },
            &net.params(),
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "case {case}: {err}");
    }
}

#[test]
fn mlp_backward_through_both_output_transforms() {
    let mut rng = Rng::new(8);
    for case in 0..50 {
        let output = if case % 2 == 0 {
            OutputTransform::Logits
        } else {
            OutputTransform::Softplus
        };
        let (net, x) = random_net(&mut rng, output);
        // L = Σ r ⊙ output, so ∂L/∂output = r
        let r = random_matrix(&mut rng, x.rows(), net.output_dim(), 1.0);
        let cache = net.forward_cached(&x).unwrap();
        let analytic = net.backward(&cache, &r);
        let numeric = central_difference(
            |p| {
                let out = with_params(&net, p).forward(&x).unwrap();
                out.as_slice()
                    .iter()
                    .zip(r.as_slice())
                    .map(|(o, w)| o * w)
                    .sum()
            },
            &net.params(),
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "case {case} ({output:?}): {err}");
    }
}

#[test]
fn balance_loss_gradient() {
    let mut rng = Rng::new(9);
    for case in 0..30 {
        let n = 4 + rng.below(5);
        let c = 2 + rng.below(2);
        let probs = afr_core::numerics::softmax_rows(&random_matrix(&mut rng, n, c, 1.0)).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let groups: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let inputs = balance_inputs(&probs, &y).unwrap();
        let mut net = Mlp::new(
            &[inputs.cols(), 4, 3, 1],
            OutputTransform::Softplus,
            &mut rng,
        )
        .unwrap();
        let params: Vec<f64> = net
            .params()
            .iter()
            .map(|p| p + 0.1 * rng.normal())
            .collect();
        net.set_params(&params).unwrap();
        let (_, analytic, _) = balance_loss_and_gradient(&net, &inputs, &groups, 3).unwrap();
        let numeric = central_difference(
            |p| {
                let out = with_params(&net, p).forward(&inputs).unwrap();
                let mu = WeightVector::from_unnormalized(out.as_slice().to_vec()).unwrap();
                balance_loss(&group_aggregated_weights(&mu, &groups, 3))
            },
            &net.params(),
        );
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "case {case}: {err}");
    }
}
