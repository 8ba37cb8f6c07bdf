//! Fitting per-Gaussian language embeddings to ground-truth feature rasters
//! under an L1 objective.
//!
//! With geometry frozen the rendered feature at a pixel is linear in the
//! embeddings, `sum_i w_i(p) l_i`, so the compositing weights of every
//! training view are computed once and reused for all steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::features::FeatureRaster;
use crate::raster::{compute_contributions, PixelContributions};
use crate::scene::{CameraPose, FrameSequence, GaussianBundle};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Frames per step.
    pub batch: usize,
    /// Restrict the loss to covered ground-truth pixels.
    pub loss_mask: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            lr: 0.0025,
            batch: 1,
            loss_mask: true,
            seed: 0,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error between the rendered embeddings and `gt` over the
/// supervised pixels and all channels, with its (sub)gradient with respect to
/// the embedding table.
pub fn language_loss_cached(
    contribs: &PixelContributions,
    embeddings: &[f64],
    gt: &FeatureRaster,
    loss_mask: bool,
) -> Result<(f64, Vec<f64>)> {
    let d = gt.dim;
    if (contribs.height, contribs.width) != (gt.height, gt.width) {
        return Err(Error::ResolutionMismatch {
            a: (contribs.height, contribs.width),
            b: (gt.height, gt.width),
        });
    }
    if d == 0 || !embeddings.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: embeddings.len(),
            context: "embedding table vs ground-truth width",
        });
    }
    let supervised = if loss_mask {
        gt.num_covered()
    } else {
        contribs.num_pixels()
    };
    if supervised == 0 {
        return Err(Error::NoSupervision);
    }
    let scale = 1.0 / (supervised * d) as f64;
    let n = embeddings.len();

    let (loss, grad) = (0..contribs.num_pixels())
        .into_par_iter()
        .with_min_len(256)
        .fold(
            || (0.0, vec![0.0; n]),
            |(mut loss, mut grad), p| {
                if loss_mask && !gt.coverage[p] {
                    return (loss, grad);
                }
                let entries = contribs.pixel(p);
                let target = &gt.data[p * d..(p + 1) * d];
                let mut rendered = [0.0f64; 16];
                let mut heap;
                let rendered: &mut [f64] = if d <= 16 {
                    &mut rendered[..d]
                } else {
                    heap = vec![0.0; d];
                    &mut heap
                };
                for &(i, w) in entries {
                    let l = &embeddings[i as usize * d..(i as usize + 1) * d];
                    for (r, x) in rendered.iter_mut().zip(l) {
                        *r += w * x;
                    }
                }
                // rendered now holds the residual signs
                for (r, t) in rendered.iter_mut().zip(target) {
                    let res = *r - t;
                    loss += res.abs();
                    *r = sign(res);
                }
                for &(i, w) in entries {
                    let g = &mut grad[i as usize * d..(i as usize + 1) * d];
                    for (gv, s) in g.iter_mut().zip(rendered.iter()) {
                        *gv += w * s;
                    }
                }
                (loss, grad)
            },
        )
        .reduce(
            || (0.0, vec![0.0; n]),
            |(la, mut ga), (lb, gb)| {
                for (a, b) in ga.iter_mut().zip(gb) {
                    *a += b;
                }
                (la + lb, ga)
            },
        );
    Ok((loss * scale, grad.into_iter().map(|g| g * scale).collect()))
}

/// Loss and gradient for one view, computing the compositing weights.
pub fn language_loss(bundle: &GaussianBundle, camera: &CameraPose, gt: &FeatureRaster) -> Result<(f64, Vec<f64>)> {
    if gt.dim != bundle.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: bundle.latent_dim(),
            actual: gt.dim,
            context: "ground-truth width",
        });
    }
    let contribs = compute_contributions(bundle, camera);
    language_loss_cached(&contribs, &bundle.embeddings, gt, true)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: GaussianBundle,
    /// Loss of every step (mean over the step's frames).
    pub losses: Vec<f64>,
}

/// Optimises the embeddings of `bundle` against one ground-truth raster per
/// frame. Geometry, colors and opacities are left untouched.
pub fn train_embeddings(
    bundle: &GaussianBundle,
    frames: &FrameSequence,
    gts: &[FeatureRaster],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if gts.len() != frames.len() {
        return Err(Error::DimensionMismatch {
            expected: frames.len(),
            actual: gts.len(),
            context: "ground-truth rasters per frame",
        });
    }
    if cfg.steps > 0 && !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be positive".into()));
    }
    let mut out = bundle.clone();
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            bundle: out,
            losses: Vec::new(),
        });
    }
    for (f, gt) in frames.iter().zip(gts) {
        if gt.frame != f.index {
            return Err(Error::InvalidArgument(format!(
                "ground truth for frame {} paired with frame {}",
                gt.frame, f.index
            )));
        }
        if gt.dim != bundle.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: bundle.latent_dim(),
                actual: gt.dim,
                context: "ground-truth width",
            });
        }
    }

    let contribs: Vec<PixelContributions> = frames
        .frames
        .par_iter()
        .map(|f| compute_contributions(bundle, &f.camera))
        .collect();

    let batch = cfg.batch.clamp(1, frames.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Adam::new(out.embeddings.len(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut grad = vec![0.0; out.embeddings.len()];
        let mut loss = 0.0;
        let mut used = 0;
        while used < batch {
            if order.is_empty() {
                order = (0..frames.len()).collect();
                order.shuffle(&mut rng);
            }
            let k = order.pop().expect("refilled");
            match language_loss_cached(&contribs[k], &out.embeddings, &gts[k], cfg.loss_mask) {
                Ok((l, g)) => {
                    loss += l;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                // a view without supervised pixels contributes nothing
                Err(Error::NoSupervision) => {}
                Err(e) => return Err(e),
            }
            used += 1;
        }
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "language step",
                step,
                loss,
            });
        }
        for g in grad.iter_mut() {
            *g /= batch as f64;
        }
        opt.step(&mut out.embeddings, &grad);
        losses.push(loss);
    }
    Ok(TrainOutcome { bundle: out, losses })
}
