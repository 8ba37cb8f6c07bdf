use std::collections::BTreeMap;
use std::sync::OnceLock;

use lgs_core::codec::cosine;
use lgs_core::pipeline::{run_synthetic, PipelineConfig, SyntheticRun};

fn run() -> &'static SyntheticRun {
    static RUN: OnceLock<SyntheticRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = PipelineConfig::default();
        cfg.scene.resolution = (128, 128);
        run_synthetic(&cfg).unwrap()
    })
}

/// Instance label to the latent of the masklet covering that instance.
fn instance_latents(run: &SyntheticRun) -> BTreeMap<i32, Vec<f64>> {
    let mut out = BTreeMap::new();
    for m in &run.masklets.masklets {
        let (t, mask) = m.per_frame.iter().next().unwrap();
        let raster = run.instances.iter().find(|r| r.frame == *t).unwrap();
        let mut votes: BTreeMap<u16, usize> = BTreeMap::new();
        for (r, c) in mask.pixels() {
            *votes.entry(raster.ids[r * raster.width + c]).or_default() += 1;
        }
        let (&id, _) = votes.iter().max_by_key(|(_, &n)| n).unwrap();
        if id > 0 {
            out.insert(id as i32 - 1, run.bank.latent(m.id).unwrap().to_vec());
        }
    }
    out
}

#[test]
fn language_loss_drops_below_a_tenth() {
    let losses = &run().train_losses;
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn smoothed_language_loss_is_near_monotone() {
    let losses = &run().train_losses;
    let smooth: Vec<f64> = losses
        .chunks(50)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let slack = 0.05 * smooth[0];
    let mut best = f64::INFINITY;
    for (i, &l) in smooth.iter().enumerate() {
        assert!(l <= best + slack, "window {i}: {l} after best {best}");
        best = best.min(l);
    }
}

// L1 has flat and compensating optima: a Gaussian whose pixels are already
// matched by others may keep a small or opposing embedding. So the check is
// on the bulk, not on every Gaussian.
#[test]
fn most_gaussians_align_with_their_instance_latent() {
    let run = run();
    let labels = run.bundle.instance_labels.as_ref().unwrap();
    let latents = instance_latents(run);
    assert_eq!(latents.len(), run.config.scene.n_objects);
    let mut cos: Vec<f64> = (0..run.bundle.len())
        .map(|i| cosine(run.bundle.embedding(i), &latents[&labels[i]]))
        .collect();
    cos.sort_by(f64::total_cmp);
    let aligned = cos.iter().filter(|&&c| c >= 0.99).count() as f64 / cos.len() as f64;
    assert!(aligned >= 0.9, "only {aligned} within cosine 0.99");
    assert!(cos[cos.len() / 2] >= 0.999, "median cosine {}", cos[cos.len() / 2]);
}
