//! End-to-end hopper run: generate, train, evaluate.
//!
//! `cargo run --release -p gpsphs --example hopper -- [seed] [stiffness] [cubic]`

use std::time::Instant;

use gpsphs::bench::{evaluate, generate_dataset, DatasetConfig, EvaluateConfig};
use gpsphs::{train, StructureDef, TrainConfig};

fn main() -> gpsphs::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut data_cfg = DatasetConfig::default();
    data_cfg.seed = args.first().copied().unwrap_or(0.0) as u64;
    if let Some(k) = args.get(1) {
        data_cfg.hopper.stiffness = *k;
    }
    if let Some(k) = args.get(2) {
        data_cfg.hopper.stiffness_cubic = *k;
    }
    let generated = generate_dataset(&data_cfg)?;
    println!(
        "rows {} realized SNR {:?}",
        generated.dataset.len(),
        generated.realized_snr_db
    );

    let start = Instant::now();
    let model = train(
        &generated.dataset,
        &StructureDef::hopper(data_cfg.hopper.damping),
        &TrainConfig::default(),
        data_cfg.seed,
    )?;
    println!("train {:.1} s", start.elapsed().as_secs_f64());
    for g in &model.diagnostics.gradient {
        println!(
            "dim {} n {} params {:?} nlml {:.3}",
            g.dim, g.n_points, g.params, g.nlml
        );
    }
    println!("accuracy {:.4}", model.diagnostics.classifier_accuracy);

    let eval_cfg = EvaluateConfig {
        hopper: data_cfg.hopper,
        ..EvaluateConfig::default()
    };
    let (metrics, rollouts, secs) = evaluate(&model, &eval_cfg)?;
    println!(
        "mse {:.4} per-sample {:?} violations {} failed {:?} ({secs:.1} s)",
        metrics.trajectory_mse,
        metrics.per_sample_mse,
        metrics.passivity_violations,
        metrics.failed_samples
    );
    for r in &rollouts {
        let last = r.len() - 1;
        println!(
            "final {:?} min x2 {:.3}",
            r.state(last),
            r.states.column(1).min()
        );
    }
    Ok(())
}
