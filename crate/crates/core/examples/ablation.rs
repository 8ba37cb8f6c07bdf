//! Runs the synthetic pipeline and prints the query ablation.
//!
//! `cargo run --release --example ablation -- [skew] [seed]`

use lgs_core::metrics::mean;
use lgs_core::pipeline::{ablate, run_synthetic, PipelineConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = PipelineConfig::default();
    cfg.scene.resolution = (128, 128);
    cfg.scene.scale_skew = args.next().is_some_and(|a| a == "skew");
    cfg.scene.seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let run = run_synthetic(&cfg).expect("pipeline");
    let report = ablate(&run).expect("ablation");

    println!("two-step   {:.3}", mean(&report.two_step));
    println!("canonical  {:.3}", mean(&report.canonical));
    let (t, m) = report.best_one_step();
    println!("one-step   {m:.3} (best threshold {t:.2})");
    println!(
        "loc        {:.3} with DBSCAN, {:.3} without",
        report.loc_with_dbscan, report.loc_without_dbscan
    );
    println!("universal  {:?}", report.universal_thresholds(0.05));
}
