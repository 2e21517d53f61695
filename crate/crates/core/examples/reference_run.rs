//! Runs the reference synthetic experiment end to end and prints the
//! numbers the acceptance suite checks.
//!
//! cargo run --release -p afr-core --example reference_run

use afr_core::mlp::cache_embeddings;
use afr_core::presets::{
    reference_dataset, reference_stage1, reference_sweep, LABEL_EFFICIENCY_FRACTIONS,
};
use afr_core::sweep::{label_efficiency_curve, run_sweep, Stage2Data};
use afr_core::{Result, SchemeKind};
use std::time::Instant;

fn main() -> Result<()> {
    let start = Instant::now();
    let ds = reference_dataset()?;
    let stage1 = reference_stage1(&ds)?;
    let emb = cache_embeddings(&stage1.extractor, &ds)?;
    let erm = Stage2Data::new(&emb, &stage1.head)?.evaluate_test(&stage1.head)?;
    println!(
        "stage 1: train acc {:.4}, test wga {:.3}, test mean {:.3}",
        stage1.train_accuracy, erm.worst_group_accuracy, erm.mean_accuracy
    );

    let spec = reference_sweep();
    let afr = run_sweep(&emb, &stage1.head, &spec, 1)?;
    for t in &afr.trials {
        if let (Some(val), Some(test)) = (t.val_wga, &t.test) {
            println!(
                "  gamma {:4} lambda {:5}  val wga {:.3}  test wga {:.3}",
                t.gamma, t.lambda, val, test.worst_group_accuracy
            );
        }
    }
    let best = afr.best_trial().expect("sweep selects a trial");
    let afr_wga = best
        .test
        .as_ref()
        .map_or(f64::NAN, |d| d.worst_group_accuracy);
    println!(
        "afr: gamma {} lambda {} test wga {:.3}",
        best.gamma, best.lambda, afr_wga
    );

    let oracle_spec = afr_core::SweepSpec {
        scheme: SchemeKind::OracleGroupBalanced,
        gammas: vec![0.0],
        ..spec.clone()
    };
    let oracle = run_sweep(&emb, &stage1.head, &oracle_spec, 1)?;
    let oracle_wga = oracle
        .best_trial()
        .and_then(|t| t.test.as_ref())
        .map_or(f64::NAN, |d| d.worst_group_accuracy);
    println!("oracle group balance: test wga {oracle_wga:.3}");
    println!("[{:.1}s]", start.elapsed().as_secs_f64());

    let curve = label_efficiency_curve(
        &emb,
        &stage1.head,
        &spec,
        &LABEL_EFFICIENCY_FRACTIONS,
        &[0, 1, 2],
        1,
    )?;
    for p in &curve {
        println!(
            "fraction {:4}: mean test wga {:.3} std {:.3} {:?}",
            p.fraction, p.mean_test_wga, p.std_test_wga, p.runs
        );
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
