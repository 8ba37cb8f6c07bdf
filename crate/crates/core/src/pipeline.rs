//! End-to-end runs on synthetic scenes, and the query/evaluation layer
//! shared by in-memory runs and the file-based CLI.

use log::info;
use rayon::prelude::*;

use crate::codec::{train_codec, CodecParams, CodecTrainConfig};
use crate::error::{Error, Result};
use crate::features::{
    assemble_groundtruth, average_masklet_embeddings, FeatureRaster, ImageEmbedder, RegionFeatureBank,
};
use crate::masklet::{box_from_mask, extract_masklets, MaskletSet, RegionIdRaster, DEFAULT_KAPPA};
use crate::metrics::{loc_acc, mean, miou_3d, EvalRecord};
use crate::query::{
    canonical_query, one_step_query, postprocess, render_query_mask, step1_retrieve, step2_select, QueryConfig,
    CANONICAL_PHRASES,
};
use crate::scene::{FrameSequence, GaussianBundle};
use crate::synthetic::{
    generate_scene, instance_rasters, SegmenterMode, SyntheticConfig, SyntheticEmbedder, SyntheticSegmenter,
    SyntheticTracker, BLOB_RADIUS,
};
use crate::train::{train_embeddings, TrainConfig};

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub scene: SyntheticConfig,
    pub segmenter: SegmenterMode,
    pub kappa: f64,
    pub codec: CodecTrainConfig,
    pub train: TrainConfig,
    pub query: QueryConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: SyntheticConfig::default(),
            segmenter: SegmenterMode::Perfect,
            kappa: DEFAULT_KAPPA,
            codec: CodecTrainConfig::default(),
            train: TrainConfig::default(),
            query: QueryConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QueryMethod {
    TwoStep {
        threshold: f64,
    },
    OneStep {
        threshold: f64,
    },
    /// Relevancy against the canonical phrases, thresholded.
    Canonical {
        threshold: f64,
    },
}

/// What a text query needs: the bank, the codec and a text embedder.
#[derive(Clone, Copy)]
pub struct QueryEngine<'a> {
    pub bank: &'a RegionFeatureBank,
    pub codec: &'a CodecParams,
    pub embedder: &'a dyn ImageEmbedder,
    pub config: &'a QueryConfig,
}

impl QueryEngine<'_> {
    /// Gaussians of `bundle` selected for `text`, with or without the
    /// outlier filter.
    pub fn select(&self, bundle: &GaussianBundle, method: QueryMethod, text: &str, dbscan: bool) -> Result<Vec<usize>> {
        let q = self.embedder.embed_text(text)?;
        let raw = match method {
            QueryMethod::TwoStep { threshold } => {
                let (_, entry) = step1_retrieve(&q, self.bank)?;
                step2_select(&entry.phi_bar, self.codec, bundle, threshold)?
            }
            QueryMethod::OneStep { threshold } => one_step_query(&q, self.codec, bundle, threshold)?,
            QueryMethod::Canonical { threshold } => {
                let canon = CANONICAL_PHRASES
                    .iter()
                    .map(|p| self.embedder.embed_text(p))
                    .collect::<Result<Vec<_>>>()?;
                canonical_query(&q, self.codec, bundle, &canon, threshold)?
            }
        };
        let cfg = QueryConfig {
            dbscan,
            ..self.config.clone()
        };
        postprocess(raw, bundle, &cfg)
    }

    /// Latent of the bank entry that step one retrieves for `text`.
    pub fn matched_latent(&self, text: &str) -> Result<Vec<f64>> {
        let q = self.embedder.embed_text(text)?;
        let (_, entry) = step1_retrieve(&q, self.bank)?;
        self.codec.encode(&entry.phi_bar)
    }
}

/// Ground truth for evaluation: query `k` targets instance label `k` in the
/// bundle and id `k + 1` in the instance rasters.
#[derive(Clone, Copy)]
pub struct EvalScene<'a> {
    pub classes: &'a [String],
    pub frames: &'a FrameSequence,
    pub instances: &'a [RegionIdRaster],
}

fn labels(bundle: &GaussianBundle) -> Result<&[i32]> {
    bundle
        .instance_labels
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("bundle has no instance labels".into()))
}

impl EvalScene<'_> {
    fn check(&self) -> Result<()> {
        if self.frames.len() != self.instances.len() {
            return Err(Error::InvalidArgument(format!(
                "{} frames but {} instance rasters",
                self.frames.len(),
                self.instances.len()
            )));
        }
        if self.classes.len() >= u16::MAX as usize {
            return Err(Error::InvalidArgument("too many classes for u16 instance ids".into()));
        }
        Ok(())
    }

    /// 3D IoU of every class query.
    pub fn class_mious(
        &self,
        engine: &QueryEngine,
        bundle: &GaussianBundle,
        method: QueryMethod,
        dbscan: bool,
    ) -> Result<Vec<f64>> {
        let labels = labels(bundle)?;
        self.classes
            .par_iter()
            .enumerate()
            .map(|(k, c)| Ok(miou_3d(&engine.select(bundle, method, c, dbscan)?, labels, k as i32)))
            .collect()
    }

    /// Per-(class, frame) 2D records over frames where the target is visible.
    pub fn records(
        &self,
        engine: &QueryEngine,
        bundle: &GaussianBundle,
        method: QueryMethod,
        dbscan: bool,
    ) -> Result<Vec<EvalRecord>> {
        self.check()?;
        let per_class: Vec<Vec<EvalRecord>> = self
            .classes
            .par_iter()
            .enumerate()
            .map(|(k, c)| {
                let selected = engine.select(bundle, method, c, dbscan)?;
                let mut out = Vec::new();
                for (f, inst) in self.frames.iter().zip(self.instances) {
                    let gt = inst.mask_of(k as u16 + 1);
                    if gt.is_empty() {
                        continue;
                    }
                    let pred = render_query_mask(&selected, bundle, &f.camera, engine.config.alpha_cutoff);
                    out.push(EvalRecord::new(c, f.index, &pred, &gt)?);
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(per_class.into_iter().flatten().collect())
    }

    /// Fraction of (class, frame) pairs with a visible target whose query
    /// mask localises inside the target's box.
    pub fn loc_accuracy(
        &self,
        engine: &QueryEngine,
        bundle: &GaussianBundle,
        method: QueryMethod,
        dbscan: bool,
    ) -> Result<f64> {
        self.check()?;
        let hits: Vec<(usize, usize)> = self
            .classes
            .par_iter()
            .enumerate()
            .map(|(k, c)| -> Result<(usize, usize)> {
                let selected = engine.select(bundle, method, c, dbscan)?;
                let (mut hit, mut total) = (0, 0);
                for (f, inst) in self.frames.iter().zip(self.instances) {
                    let Ok(gt_box) = box_from_mask(&inst.mask_of(k as u16 + 1)) else {
                        continue;
                    };
                    let pred = render_query_mask(&selected, bundle, &f.camera, engine.config.alpha_cutoff);
                    hit += loc_acc(&pred, &gt_box) as usize;
                    total += 1;
                }
                Ok((hit, total))
            })
            .collect::<Result<_>>()?;
        let (hit, total) = hits.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }

    /// Copy of `bundle` plus, for every class, `per_class` floater Gaussians
    /// carrying the latent its query retrieves. Floaters sit on the far side
    /// of the scene, above the ground plane, labelled -1.
    pub fn with_floaters(
        &self,
        engine: &QueryEngine,
        bundle: &GaussianBundle,
        per_class: usize,
    ) -> Result<GaussianBundle> {
        let labels = labels(bundle)?;
        let mut out = bundle.clone();
        let extent = bundle
            .positions
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt())
            .fold(0.0, f64::max);
        for (k, class) in self.classes.iter().enumerate() {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k as i32).collect();
            if members.is_empty() {
                continue;
            }
            let mut c = [0.0; 2];
            for &i in &members {
                c[0] += bundle.positions[i][0] / members.len() as f64;
                c[1] += bundle.positions[i][1] / members.len() as f64;
            }
            let norm = (c[0] * c[0] + c[1] * c[1]).sqrt();
            let dir = if norm > 1e-9 {
                [-c[0] / norm, -c[1] / norm]
            } else {
                [1.0, 0.0]
            };
            let anchor = [dir[0] * extent, dir[1] * extent, 2.0 * BLOB_RADIUS];
            let latent = engine.matched_latent(class)?;
            for j in 0..per_class {
                let a = std::f64::consts::TAU * j as f64 / per_class as f64;
                let p = [anchor[0] + 0.1 * a.cos(), anchor[1] + 0.1 * a.sin(), anchor[2]];
                out.push(p, [0.01, 0.0, 0.0, 0.01, 0.0, 0.01], [1.0; 3], 0.9, &latent, Some(-1))?;
            }
        }
        Ok(out)
    }

    pub fn ablate(&self, engine: &QueryEngine, bundle: &GaussianBundle) -> Result<AblationReport> {
        let default = QueryMethod::TwoStep {
            threshold: engine.config.threshold,
        };
        let two_step = self.class_mious(engine, bundle, default, true)?;
        let one_step = threshold_grid()
            .into_iter()
            .map(|t| {
                Ok((
                    t,
                    self.class_mious(engine, bundle, QueryMethod::OneStep { threshold: t }, true)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let canonical = self.class_mious(
            engine,
            bundle,
            QueryMethod::Canonical {
                threshold: CANONICAL_THRESHOLD,
            },
            true,
        )?;
        let floaters = self.with_floaters(engine, bundle, FLOATERS_PER_CLASS)?;
        Ok(AblationReport {
            two_step,
            one_step,
            canonical,
            loc_with_dbscan: self.loc_accuracy(engine, &floaters, default, true)?,
            loc_without_dbscan: self.loc_accuracy(engine, &floaters, default, false)?,
        })
    }
}

/// Everything produced by one synthetic run.
pub struct SyntheticRun {
    pub config: PipelineConfig,
    /// Bundle with trained embeddings and instance labels.
    pub bundle: GaussianBundle,
    pub frames: FrameSequence,
    /// Dominant-instance rasters (instance `k` has id `k + 1`).
    pub instances: Vec<RegionIdRaster>,
    pub masklets: MaskletSet,
    pub bank: RegionFeatureBank,
    pub codec: CodecParams,
    pub embedder: SyntheticEmbedder,
    pub codec_losses: Vec<f64>,
    pub train_losses: Vec<f64>,
}

/// Ground-truth rasters for every frame from a bank with encoded latents.
pub fn groundtruth_rasters(
    masklets: &MaskletSet,
    bank: &RegionFeatureBank,
    frames: &FrameSequence,
) -> Result<Vec<FeatureRaster>> {
    frames
        .frames
        .par_iter()
        .map(|f| assemble_groundtruth(masklets, bank, f.index))
        .collect()
}

pub fn run_synthetic(cfg: &PipelineConfig) -> Result<SyntheticRun> {
    let (scene, frames) = generate_scene(&cfg.scene)?;
    let instances = instance_rasters(&scene, &frames)?;
    let segmenter = SyntheticSegmenter::new(&instances, cfg.segmenter, cfg.scene.seed);
    let tracker = SyntheticTracker::new(&instances);
    let masklets = extract_masklets(&frames, &segmenter, &tracker, cfg.kappa)?;
    info!("{} masklets from {} frames", masklets.len(), frames.len());

    let embedder = SyntheticEmbedder::new(&cfg.scene)?;
    let mut bank = average_masklet_embeddings(&masklets, &frames, &embedder, cfg.scene.latent_dim)?;
    let training = train_codec(&bank.phi_bars(), &cfg.codec)?;
    if training.params.latent_dim() != cfg.scene.latent_dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.scene.latent_dim,
            actual: training.params.latent_dim(),
            context: "codec latent width",
        });
    }
    bank.encode_with(&training.params)?;
    let gts = groundtruth_rasters(&masklets, &bank, &frames)?;
    let outcome = train_embeddings(&scene, &frames, &gts, &cfg.train)?;
    info!(
        "language loss {:.4} -> {:.4}",
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(SyntheticRun {
        config: cfg.clone(),
        bundle: outcome.bundle,
        frames,
        instances,
        masklets,
        bank,
        codec: training.params,
        embedder,
        codec_losses: training.epoch_losses,
        train_losses: outcome.losses,
    })
}

impl SyntheticRun {
    pub fn n_classes(&self) -> usize {
        self.config.scene.n_objects
    }

    pub fn class_name(&self, k: usize) -> &str {
        &self.embedder.class_names()[k]
    }

    pub fn engine(&self) -> QueryEngine<'_> {
        QueryEngine {
            bank: &self.bank,
            codec: &self.codec,
            embedder: &self.embedder,
            config: &self.config.query,
        }
    }

    pub fn eval_scene(&self) -> EvalScene<'_> {
        EvalScene {
            classes: self.embedder.class_names(),
            frames: &self.frames,
            instances: &self.instances,
        }
    }

    /// Gaussians selected for class `k` in `bundle`.
    pub fn select(&self, bundle: &GaussianBundle, method: QueryMethod, k: usize, dbscan: bool) -> Result<Vec<usize>> {
        self.engine().select(bundle, method, self.class_name(k), dbscan)
    }

    pub fn class_mious(&self, bundle: &GaussianBundle, method: QueryMethod, dbscan: bool) -> Result<Vec<f64>> {
        self.eval_scene().class_mious(&self.engine(), bundle, method, dbscan)
    }

    pub fn loc_accuracy(&self, bundle: &GaussianBundle, method: QueryMethod, dbscan: bool) -> Result<f64> {
        self.eval_scene().loc_accuracy(&self.engine(), bundle, method, dbscan)
    }

    pub fn with_floaters(&self, per_class: usize) -> Result<GaussianBundle> {
        self.eval_scene().with_floaters(&self.engine(), &self.bundle, per_class)
    }
}

/// One-step thresholds on a 0.05 grid strictly inside (-1, 1).
pub fn threshold_grid() -> Vec<f64> {
    (-19..=19).map(|i| i as f64 * 0.05).collect()
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub two_step: Vec<f64>,
    /// `(threshold, per-class IoU)` for every grid threshold.
    pub one_step: Vec<(f64, Vec<f64>)>,
    pub canonical: Vec<f64>,
    pub loc_with_dbscan: f64,
    pub loc_without_dbscan: f64,
}

impl AblationReport {
    /// Grid threshold with the best mean IoU, and that mean.
    pub fn best_one_step(&self) -> (f64, f64) {
        self.one_step
            .iter()
            .map(|(t, v)| (*t, mean(v)))
            .fold(
                (f64::NAN, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            )
    }

    /// Thresholds whose IoU is within `tol` of every query's own optimum.
    pub fn universal_thresholds(&self, tol: f64) -> Vec<f64> {
        let n = self.two_step.len();
        let optimum: Vec<f64> = (0..n)
            .map(|k| {
                self.one_step
                    .iter()
                    .map(|(_, v)| v[k])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        self.one_step
            .iter()
            .filter(|(_, v)| v.iter().zip(&optimum).all(|(x, o)| *x >= o - tol))
            .map(|(t, _)| *t)
            .collect()
    }

    /// Two-step rows first, then canonical, then the one-step sweep, then
    /// the two localisation accuracies.
    pub fn write_csv(&self, classes: &[String], out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "method,threshold,query,iou")?;
        for (c, v) in classes.iter().zip(&self.two_step) {
            writeln!(out, "two_step,,{c},{v:.6}")?;
        }
        for (c, v) in classes.iter().zip(&self.canonical) {
            writeln!(out, "canonical,{CANONICAL_THRESHOLD:.2},{c},{v:.6}")?;
        }
        for (t, row) in &self.one_step {
            for (c, v) in classes.iter().zip(row) {
                writeln!(out, "one_step,{t:.2},{c},{v:.6}")?;
            }
        }
        writeln!(out, "loc_with_dbscan,,,{:.6}", self.loc_with_dbscan)?;
        writeln!(out, "loc_without_dbscan,,,{:.6}", self.loc_without_dbscan)
    }
}

pub const CANONICAL_THRESHOLD: f64 = 0.5;
pub const FLOATERS_PER_CLASS: usize = 10;

pub fn ablate(run: &SyntheticRun) -> Result<AblationReport> {
    run.eval_scene().ablate(&run.engine(), &run.bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> AblationReport {
        AblationReport {
            two_step: vec![0.9, 0.8],
            one_step: vec![(0.1, vec![0.9, 0.0]), (0.2, vec![0.5, 0.6]), (0.3, vec![0.0, 0.8])],
            canonical: vec![0.1, 0.2],
            loc_with_dbscan: 1.0,
            loc_without_dbscan: 0.25,
        }
    }

    #[test]
    fn best_and_universal_thresholds() {
        let r = report();
        let (t, m) = r.best_one_step();
        assert_eq!(t, 0.2);
        assert!((m - 0.55).abs() < 1e-15);
        assert!(r.universal_thresholds(0.05).is_empty());
        // 0.2 is within 0.4 of both optima (0.9, 0.8)
        assert_eq!(r.universal_thresholds(0.4), vec![0.2]);
    }

    #[test]
    fn grid_is_symmetric_and_open() {
        let g = threshold_grid();
        assert_eq!(g.len(), 39);
        assert!(g.iter().all(|t| t.abs() < 1.0));
        assert!(g.contains(&0.0));
    }

    #[test]
    fn ablation_csv_layout() {
        let mut buf = Vec::new();
        report().write_csv(&["a".into(), "b".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method,threshold,query,iou");
        assert_eq!(lines[1], "two_step,,a,0.900000");
        assert_eq!(lines[5], "one_step,0.10,a,0.900000");
        assert_eq!(lines.len(), 1 + 2 + 2 + 6 + 2);
    }
}
