//! Last-layer training loop: anchor limit, an independent gradient-descent
//! reimplementation, scheme equivalence and checkpoint behaviour.

use afr_core::head::{train, Objective, Validation};
use afr_core::weights::compute_weights;
use afr_core::{LinearHead, Matrix, ObjectiveKind, Rng, TrainConfig, WeightScheme, WeightVector};

struct Problem {
    x: Matrix,
    y: Vec<usize>,
    groups: Vec<usize>,
    head: LinearHead,
}

fn problem(seed: u64, n: usize, d: usize, c: usize) -> Problem {
    let mut rng = Rng::new(seed);
    let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
    let x: Vec<f64> = y
        .iter()
        .flat_map(|&k| (0..d).map(move |j| if j == k % d { 1.0 } else { 0.0 }))
        .map(|m| m + rng.normal())
        .collect();
    let w: Vec<f64> = (0..c * d).map(|_| 0.3 * rng.normal()).collect();
    let b: Vec<f64> = (0..c).map(|_| 0.3 * rng.normal()).collect();
    Problem {
        x: Matrix::new(n, d, x).unwrap(),
        groups: (0..n).map(|i| (i % 2) + 2 * (y[i] % 2)).collect(),
        y,
        head: LinearHead::from_anchor(Matrix::new(c, d, w).unwrap(), b).unwrap(),
    }
}

fn config(lr: f64, epochs: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        max_epochs: epochs,
        lambda,
        grad_clip_norm: 1.0,
        early_stopping: false,
        objective: ObjectiveKind::Afr,
    }
}

#[test]
fn huge_lambda_pins_head_to_anchor() {
    let p = problem(1, 40, 5, 3);
    let mu = WeightVector::uniform(40);
    let report = train(
        &p.head,
        &p.x,
        &p.y,
        &Objective::Afr { mu: &mu },
        &config(1e-4, 300, 1e6),
        None,
    )
    .unwrap();
    let dist = report.head.distance_to_anchor();
    assert!(dist < 1e-3, "‖φ − φ̂‖ = {dist}");
}

/// Plain full-batch gradient descent on mean cross-entropy with gradient
/// clipping, written without the library's loss or gradient code. Returns
/// the loss before each step and after the last.
fn reference_descent(p: &Problem, lr: f64, epochs: usize) -> Vec<f64> {
    let (n, d) = (p.x.rows(), p.x.cols());
    let c = p.head.num_classes();
    let mut w: Vec<Vec<f64>> = (0..c).map(|k| p.head.weights().row(k).to_vec()).collect();
    let mut b = p.head.bias().to_vec();
    let mut losses = Vec::new();
    for epoch in 0..=epochs {
        let mut gw = vec![vec![0.0; d]; c];
        let mut gb = vec![0.0; c];
        let mut loss = 0.0;
        for i in 0..n {
            let xi = p.x.row(i);
            let z: Vec<f64> = (0..c)
                .map(|k| b[k] + (0..d).map(|j| w[k][j] * xi[j]).sum::<f64>())
                .collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = z.iter().map(|v| (v - m).exp()).sum();
            loss += m + se.ln() - z[p.y[i]];
            for k in 0..c {
                let r = (z[k] - m).exp() / se - if k == p.y[i] { 1.0 } else { 0.0 };
                gb[k] += r / n as f64;
                for j in 0..d {
                    gw[k][j] += r * xi[j] / n as f64;
                }
            }
        }
        losses.push(loss / n as f64);
        if epoch == epochs {
            break;
        }
        let norm = (gw.iter().flatten().map(|g| g * g).sum::<f64>()
            + gb.iter().map(|g| g * g).sum::<f64>())
        .sqrt();
        let scale = if norm > 1.0 { 1.0 / norm } else { 1.0 };
        for k in 0..c {
            b[k] -= lr * scale * gb[k];
            for j in 0..d {
                w[k][j] -= lr * scale * gw[k][j];
            }
        }
    }
    losses
}

#[test]
fn unregularized_uniform_training_matches_plain_descent() {
    for seed in 0..5 {
        let p = problem(10 + seed, 60, 4, 3);
        let mu = WeightVector::uniform(60);
        // a large step exercises the clipped regime early on
        let lr = 0.5;
        let report = train(
            &p.head,
            &p.x,
            &p.y,
            &Objective::Afr { mu: &mu },
            &config(lr, 200, 0.0),
            None,
        )
        .unwrap();
        let reference = reference_descent(&p, lr, 200);
        assert_eq!(report.epochs.len(), reference.len());
        for (rec, want) in report.epochs.iter().zip(&reference) {
            assert!(
                (rec.loss - want).abs() < 1e-10,
                "seed {seed} epoch {}: {} vs {}",
                rec.epoch,
                rec.loss,
                want
            );
        }
    }
}

#[test]
fn gamma_zero_and_class_balanced_give_identical_heads() {
    let p = problem(3, 80, 5, 2);
    let mut rng = Rng::new(4);
    let p_hat: Vec<f64> = (0..80).map(|_| rng.uniform()).collect();
    let afr = compute_weights(&WeightScheme::afr(0.0), &p_hat, &p.y, None, None).unwrap();
    let cb = compute_weights(&WeightScheme::class_balanced(), &p_hat, &p.y, None, None).unwrap();
    assert_eq!(afr, cb);
    let val = Validation::new(&p.x, &p.y, &p.groups, 4).unwrap();
    let cfg = TrainConfig {
        early_stopping: true,
        ..config(0.1, 100, 0.05)
    };
    let a = train(
        &p.head,
        &p.x,
        &p.y,
        &Objective::Afr { mu: &afr },
        &cfg,
        Some(&val),
    )
    .unwrap();
    let b = train(
        &p.head,
        &p.x,
        &p.y,
        &Objective::Afr { mu: &cb },
        &cfg,
        Some(&val),
    )
    .unwrap();
    assert_eq!(a.selected_epoch, b.selected_epoch);
    let bits = |h: &LinearHead| h.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.head), bits(&b.head));
    assert_eq!(
        a.epochs
            .iter()
            .map(|e| e.loss.to_bits())
            .collect::<Vec<_>>(),
        b.epochs
            .iter()
            .map(|e| e.loss.to_bits())
            .collect::<Vec<_>>()
    );
}

#[test]
fn selected_epoch_has_max_validation_wga() {
    let p = problem(5, 60, 4, 2);
    let mu = WeightVector::uniform(60);
    let val = Validation::new(&p.x, &p.y, &p.groups, 4).unwrap();
    let cfg = TrainConfig {
        early_stopping: true,
        ..config(0.2, 150, 0.0)
    };
    let report = train(
        &p.head,
        &p.x,
        &p.y,
        &Objective::Afr { mu: &mu },
        &cfg,
        Some(&val),
    )
    .unwrap();
    let best = report
        .epochs
        .iter()
        .filter_map(|e| e.val_wga)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(report.selected().val_wga, Some(best));
    let first = report
        .epochs
        .iter()
        .position(|e| e.val_wga == Some(best))
        .unwrap();
    assert_eq!(report.selected_epoch, first);
}

#[test]
fn clipped_step_is_bounded() {
    let p = problem(6, 30, 5, 3);
    let mu = WeightVector::uniform(30);
    let cfg = config(0.7, 1, 50.0);
    let moved = p
        .head
        .with_params(&p.head.params().iter().map(|v| v + 1.0).collect::<Vec<_>>())
        .unwrap();
    let report = train(&moved, &p.x, &p.y, &Objective::Afr { mu: &mu }, &cfg, None).unwrap();
    let step: f64 = report
        .head
        .params()
        .iter()
        .zip(moved.params())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(step <= 0.7 * (1.0 + 1e-12), "{step}");
}

#[test]
fn training_is_deterministic() {
    let p = problem(7, 50, 3, 3);
    let mu = WeightVector::uniform(50);
    let run = || {
        train(
            &p.head,
            &p.x,
            &p.y,
            &Objective::Afr { mu: &mu },
            &config(0.3, 80, 0.1),
            None,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.head, b.head);
    assert_eq!(a.epochs, b.epochs);
}
