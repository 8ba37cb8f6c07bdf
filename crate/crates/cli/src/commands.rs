//! One function per subcommand. Every stage reads its inputs from the scene
//! directory and registers its outputs in `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::info;

use lgs_core::codec::train_codec;
use lgs_core::features::{
    assemble_groundtruth, assemble_groundtruth_baseline, average_masklet_embeddings, bank_from_records, ImageEmbedder,
    RegionFeatureBank,
};
use lgs_core::io::{
    decode_feature_raster, decode_region_embeddings, encode_feature_raster, encode_pgm, encode_ppm, frame_file,
    load_bank, load_codec, load_gaussians, load_region_id_dir, read_file, save_bank, save_codec, save_gaussians,
    save_region_id_dir, write_all, write_file, FrameCamera, SceneManifest, SyntheticEmbedderSpec,
};
use lgs_core::masklet::{extract_masklets, RegionIdSegmenter, RegionIdTracker, Segmenter};
use lgs_core::metrics::{mean, write_eval_csv};
use lgs_core::pipeline::{EvalScene, QueryEngine, QueryMethod};
use lgs_core::query::{render_query_mask, two_step_query};
use lgs_core::synthetic::{generate_scene, instance_rasters, SyntheticConfig, SyntheticEmbedder, SyntheticSegmenter};
use lgs_core::train::train_embeddings;
use lgs_core::{FeatureRaster, FrameSequence, GaussianBundle, MaskletSet, QueryConfig, RegionIdRaster};

use crate::args::*;

const GAUSSIANS: &str = "gaussians.bin";
const TRAINED: &str = "gaussians_trained.bin";
const BANK: &str = "bank.bin";
const CODEC: &str = "codec.cdc";
const FRAMES: &str = "frames";
const INSTANCES: &str = "gt";
const PROPOSALS: &str = "proposals";
const MASKS: &str = "masks";
const FEATURES: &str = "features";

struct Scene {
    dir: PathBuf,
    manifest: SceneManifest,
}

impl Scene {
    fn open(dir: &Path) -> Result<Self> {
        let manifest = SceneManifest::load(dir).with_context(|| format!("no scene at {}", dir.display()))?;
        Ok(Scene {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of a required input; the error names the stage that makes it.
    fn input(&self, name: &str, made_by: &str) -> Result<PathBuf> {
        let path = self.file(name);
        ensure!(path.exists(), "missing {} (run `lgs {made_by}` first)", path.display());
        Ok(path)
    }

    fn register(&mut self, key: &str, rel: &str) -> Result<()> {
        self.manifest.files.insert(key.into(), rel.into());
        Ok(self.manifest.save(&self.dir)?)
    }

    fn frames(&self) -> Result<FrameSequence> {
        Ok(self.manifest.frame_sequence(&self.dir)?)
    }

    fn rasters(&self, sub: &str, made_by: &str) -> Result<Vec<RegionIdRaster>> {
        self.input(sub, made_by)?;
        Ok(load_region_id_dir(&self.dir, sub, &self.manifest)?)
    }

    fn masklets(&self) -> Result<MaskletSet> {
        Ok(MaskletSet::from_region_ids(&self.rasters(MASKS, "extract-masklets")?)?)
    }

    fn embedder(&self) -> Result<SyntheticEmbedder> {
        let Some(spec) = &self.manifest.synthetic else {
            bail!("the manifest has no synthetic embedder; this stage needs text and image embeddings");
        };
        Ok(SyntheticEmbedder::new(&SyntheticConfig {
            n_objects: spec.n_objects,
            noise_level: spec.noise_level,
            scale_skew: spec.scale_skew,
            seed: spec.seed,
            feature_dim: self.manifest.feature_dim,
            latent_dim: self.manifest.latent_dim,
            ..SyntheticConfig::default()
        })?)
    }

    fn bank(&self) -> Result<RegionFeatureBank> {
        let bank = load_bank(&self.input(BANK, "build-bank")?)?;
        self.manifest.verify_bank(&bank)?;
        Ok(bank)
    }

    fn trained(&self) -> Result<GaussianBundle> {
        let path = self.file(TRAINED);
        ensure!(
            path.exists(),
            "no trained bundle at {} (run `lgs train-lang` first)",
            path.display()
        );
        let bundle = load_gaussians(&path)?;
        self.manifest.verify_bundle(&bundle)?;
        Ok(bundle)
    }
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = (usize, f64)>) -> Result<()> {
    Ok(write_all(path, |out| {
        use std::io::Write;
        writeln!(out, "{header}")?;
        for (i, v) in rows {
            writeln!(out, "{i},{v}")?;
        }
        Ok(())
    })?)
}

fn query_config(q: &QueryArgs) -> QueryConfig {
    QueryConfig {
        threshold: q.threshold,
        dbscan: !q.no_dbscan,
        eps: q.eps,
        min_pts: q.min_pts,
        alpha_cutoff: q.alpha_cutoff,
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n_objects: a.objects,
        gaussians_per_object: a.gaussians_per_object,
        n_frames: a.frames,
        resolution: (a.resolution, a.resolution),
        noise_level: a.noise,
        scale_skew: a.skew,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let (bundle, frames) = generate_scene(&cfg)?;
    let instances = instance_rasters(&bundle, &frames)?;
    let segmenter = SyntheticSegmenter::new(&instances, a.segmenter, a.seed);
    let proposals = frames
        .iter()
        .map(|f| {
            let mut raster = RegionIdRaster {
                frame: f.index,
                height: cfg.resolution.0,
                width: cfg.resolution.1,
                ids: vec![0; cfg.resolution.0 * cfg.resolution.1],
            };
            for (i, region) in segmenter.segment(f)?.iter().enumerate() {
                for (r, c) in region.mask.pixels() {
                    raster.ids[r * raster.width + c] = i as u16 + 1;
                }
            }
            Ok(raster)
        })
        .collect::<lgs_core::Result<Vec<_>>>()?;

    for f in frames.iter() {
        let rgb = f.rgb.as_ref().expect("synthetic frames are rendered");
        write_file(&a.scene.join(frame_file(FRAMES, f.index, "ppm")), &encode_ppm(rgb))?;
    }
    save_region_id_dir(&a.scene, INSTANCES, &instances)?;
    save_region_id_dir(&a.scene, PROPOSALS, &proposals)?;
    save_gaussians(&a.scene.join(GAUSSIANS), &bundle)?;

    let manifest = SceneManifest {
        resolution: [cfg.resolution.0, cfg.resolution.1],
        n_frames: cfg.n_frames,
        feature_dim: cfg.feature_dim,
        latent_dim: cfg.latent_dim,
        files: [
            ("gaussians", GAUSSIANS),
            ("frames", FRAMES),
            ("instances", INSTANCES),
            ("proposals", PROPOSALS),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
        frames: frames.iter().map(FrameCamera::from_frame).collect(),
        classes: cfg.class_names(),
        synthetic: Some(SyntheticEmbedderSpec {
            n_objects: cfg.n_objects,
            noise_level: cfg.noise_level,
            scale_skew: cfg.scale_skew,
            seed: cfg.seed,
        }),
    };
    manifest.save(&a.scene)?;
    info!(
        "wrote {} Gaussians and {} frames to {}",
        bundle.len(),
        frames.len(),
        a.scene.display()
    );
    Ok(())
}

pub fn extract_masklets_cmd(a: &ExtractArgs) -> Result<()> {
    let mut scene = Scene::open(&a.scene)?;
    let frames = scene.frames()?;
    let segmenter = RegionIdSegmenter::new(scene.rasters(&a.proposals, "synth")?);
    let tracker = RegionIdTracker::new(scene.rasters(&a.tracks, "synth")?);
    let masklets = extract_masklets(&frames, &segmenter, &tracker, a.kappa)?;
    let rasters = frames
        .iter()
        .map(|f| masklets.region_ids(f.index))
        .collect::<lgs_core::Result<Vec<_>>>()?;
    save_region_id_dir(&scene.dir, MASKS, &rasters)?;
    if let Some(dir) = &a.pgm {
        for r in &rasters {
            for (id, mask) in r.masks() {
                write_file(&dir.join(format!("t_{:04}_m{id:05}.pgm", r.frame)), &encode_pgm(&mask))?;
            }
        }
    }
    scene.register("masks", MASKS)?;
    info!("{} masklets over {} frames", masklets.len(), frames.len());
    Ok(())
}

pub fn build_bank(a: &BankArgs) -> Result<()> {
    let mut scene = Scene::open(&a.scene)?;
    let masklets = scene.masklets()?;
    let (dim, lat) = (scene.manifest.feature_dim, scene.manifest.latent_dim);
    let bank = match &a.embeddings {
        Some(path) => {
            let (records, d) = decode_region_embeddings(&read_file(path)?)?;
            ensure!(d == dim, "embedding file has D = {d}, manifest says {dim}");
            bank_from_records(&masklets, &records, dim, lat)?
        }
        None => average_masklet_embeddings(&masklets, &scene.frames()?, &scene.embedder()?, lat)?,
    };
    save_bank(&scene.file(BANK), &bank)?;
    scene.register("bank", BANK)?;
    info!("bank with {} entries", bank.len());
    Ok(())
}

pub fn train_codec_cmd(a: &CodecArgs) -> Result<()> {
    let mut scene = Scene::open(&a.scene)?;
    let mut bank = scene.bank()?;
    let cfg = lgs_core::CodecTrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    info!("{cfg:?}");
    let training = train_codec(&bank.phi_bars(), &cfg)?;
    ensure!(
        training.params.latent_dim() == scene.manifest.latent_dim,
        "codec latent width {} disagrees with manifest {}",
        training.params.latent_dim(),
        scene.manifest.latent_dim
    );
    bank.encode_with(&training.params)?;
    save_codec(&scene.file(CODEC), &training.params)?;
    save_bank(&scene.file(BANK), &bank)?;
    write_csv(
        &scene.file("codec_loss.csv"),
        "epoch,loss",
        training.epoch_losses.iter().copied().enumerate(),
    )?;
    scene.register("codec", CODEC)?;
    info!(
        "codec loss {:.4} -> {:.4}",
        training.epoch_losses.first().copied().unwrap_or(f64::NAN),
        training.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn build_gt(a: &GtArgs) -> Result<()> {
    let mut scene = Scene::open(&a.scene)?;
    let frames = scene.frames()?;
    let rasters: Vec<FeatureRaster> = if a.baseline {
        let codec = load_codec(&scene.input(CODEC, "train-codec")?)?;
        let embedder = scene.embedder()?;
        let proposals = scene.rasters(PROPOSALS, "synth")?;
        frames
            .iter()
            .zip(&proposals)
            .map(|(f, p)| {
                let image = f.rgb.as_ref().context("baseline ground truth needs RGB frames")?;
                let regions = p
                    .masks()
                    .into_iter()
                    .map(|(_, m)| lgs_core::RegionMask::new(f.index, m))
                    .collect::<lgs_core::Result<Vec<_>>>()?;
                Ok(assemble_groundtruth_baseline(
                    &regions, image, &embedder, &codec, f.index,
                )?)
            })
            .collect::<Result<_>>()?
    } else {
        let masklets = scene.masklets()?;
        let bank = scene.bank()?;
        frames
            .iter()
            .map(|f| assemble_groundtruth(&masklets, &bank, f.index))
            .collect::<lgs_core::Result<_>>()?
    };
    for r in &rasters {
        write_file(
            &scene.file(&frame_file(FEATURES, r.frame, "frs")),
            &encode_feature_raster(r)?,
        )?;
    }
    scene.register("features", FEATURES)?;
    info!(
        "{} ground-truth rasters ({})",
        rasters.len(),
        if a.baseline { "per-frame baseline" } else { "masklet" }
    );
    Ok(())
}

pub fn train_lang(a: &TrainArgs) -> Result<()> {
    let mut scene = Scene::open(&a.scene)?;
    let bundle = load_gaussians(&scene.input(GAUSSIANS, "synth")?)?;
    scene.manifest.verify_bundle(&bundle)?;
    let frames = scene.frames()?;
    scene.input(FEATURES, "build-gt")?;
    let gts = frames
        .iter()
        .map(|f| {
            let path = scene.file(&frame_file(FEATURES, f.index, "frs"));
            let r = decode_feature_raster(&read_file(&path)?)?;
            ensure!(r.frame == f.index, "{} holds frame {}", path.display(), r.frame);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = lgs_core::TrainConfig {
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    info!("{cfg:?}");
    let outcome = train_embeddings(&bundle, &frames, &gts, &cfg)?;
    save_gaussians(&scene.file(TRAINED), &outcome.bundle)?;
    write_csv(
        &scene.file("lang_loss.csv"),
        "step,loss",
        outcome.losses.iter().copied().enumerate(),
    )?;
    scene.register("trained", TRAINED)?;
    info!(
        "language loss {:.4} -> {:.4}",
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn parse_vector(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .with_context(|| format!("bad number {s:?} in {}", path.display()))
        })
        .collect()
}

pub fn query(a: &QueryCmdArgs) -> Result<()> {
    let scene = Scene::open(&a.scene)?;
    let bundle = scene.trained()?;
    let bank = scene.bank()?;
    let codec = load_codec(&scene.input(CODEC, "train-codec")?)?;
    let q = match (&a.text, &a.vector) {
        (Some(text), None) => scene.embedder()?.embed_text(text)?,
        (None, Some(path)) => parse_vector(path)?,
        _ => bail!("give exactly one of --text and --vector"),
    };
    ensure!(
        q.len() == scene.manifest.feature_dim,
        "query has D = {}, manifest says {}",
        q.len(),
        scene.manifest.feature_dim
    );
    let cfg = query_config(&a.query);
    info!("{cfg:?}");
    let result = two_step_query(&q, &bank, &codec, &bundle, &cfg)?;
    info!(
        "region {:?}: {} above threshold, {} kept",
        result.matched_region, result.stage_sizes.0, result.stage_sizes.1
    );
    let listing: String = result.selected.iter().map(|i| format!("{i}\n")).collect();
    match &a.out {
        Some(path) => write_file(path, listing.as_bytes())?,
        None => print!("{listing}"),
    }
    if let Some(dir) = &a.mask_dir {
        for f in scene.frames()?.iter() {
            let mask = render_query_mask(&result.selected, &bundle, &f.camera, cfg.alpha_cutoff);
            write_file(&dir.join(format!("t_{:04}.pgm", f.index)), &encode_pgm(&mask))?;
        }
    }
    Ok(())
}

struct EvalInputs {
    scene: Scene,
    bundle: GaussianBundle,
    frames: FrameSequence,
    instances: Vec<RegionIdRaster>,
    bank: RegionFeatureBank,
    codec: lgs_core::CodecParams,
    embedder: SyntheticEmbedder,
}

impl EvalInputs {
    fn load(dir: &Path) -> Result<Self> {
        let scene = Scene::open(dir)?;
        ensure!(
            !scene.manifest.classes.is_empty(),
            "the manifest lists no query classes"
        );
        Ok(EvalInputs {
            bundle: scene.trained()?,
            frames: scene.frames()?,
            instances: scene.rasters(INSTANCES, "synth")?,
            bank: scene.bank()?,
            codec: load_codec(&scene.input(CODEC, "train-codec")?)?,
            embedder: scene.embedder()?,
            scene,
        })
    }

    fn engine<'a>(&'a self, cfg: &'a QueryConfig) -> QueryEngine<'a> {
        QueryEngine {
            bank: &self.bank,
            codec: &self.codec,
            embedder: &self.embedder,
            config: cfg,
        }
    }

    fn eval_scene(&self) -> EvalScene<'_> {
        EvalScene {
            classes: &self.scene.manifest.classes,
            frames: &self.frames,
            instances: &self.instances,
        }
    }
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let inputs = EvalInputs::load(&a.scene)?;
    let cfg = query_config(&a.query);
    info!("{cfg:?}");
    let engine = inputs.engine(&cfg);
    let scene = inputs.eval_scene();
    let method = QueryMethod::TwoStep {
        threshold: cfg.threshold,
    };
    let records = scene.records(&engine, &inputs.bundle, method, cfg.dbscan)?;
    let mious = scene.class_mious(&engine, &inputs.bundle, method, cfg.dbscan)?;
    write_all(&inputs.scene.file("eval.csv"), |out| write_eval_csv(&records, out))?;
    write_all(&inputs.scene.file("eval_3d.csv"), |out| {
        use std::io::Write;
        writeln!(out, "query,miou_3d")?;
        for (c, m) in scene.classes.iter().zip(&mious) {
            writeln!(out, "{c},{m:.6}")?;
        }
        Ok(())
    })?;
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    info!(
        "2D mIoU {:.3}, 3D mIoU {:.3} over {} queries",
        mean(&ious),
        mean(&mious),
        mious.len()
    );
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let inputs = EvalInputs::load(&a.scene)?;
    let cfg = query_config(&a.query);
    info!("{cfg:?}");
    let report = inputs.eval_scene().ablate(&inputs.engine(&cfg), &inputs.bundle)?;
    write_all(&inputs.scene.file("ablation.csv"), |out| {
        report.write_csv(&inputs.scene.manifest.classes, out)
    })?;
    let (t, best) = report.best_one_step();
    info!(
        "two-step {:.3}, best one-step {:.3} at {t:.2}, canonical {:.3}, loc {:.3} / {:.3} with / without DBSCAN",
        mean(&report.two_step),
        best,
        mean(&report.canonical),
        report.loc_with_dbscan,
        report.loc_without_dbscan
    );
    Ok(())
}
