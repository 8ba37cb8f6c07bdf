//! Region embeddings, masklet-averaged embeddings and ground-truth feature
//! rasters.

use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::codec::CodecParams;
use crate::error::{Error, Result};
use crate::masklet::{Mask, MaskletSet, RegionMask};
use crate::scene::{FrameSequence, RgbImage};

/// Maps images and text into a shared embedding space of width
/// [`ImageEmbedder::dim`]. Outputs are unit length.
pub trait ImageEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// `H x W x D` raster with a coverage flag per pixel. Uncovered pixels hold
/// zeros and never contribute to losses.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRaster {
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub coverage: Vec<bool>,
}

impl FeatureRaster {
    pub fn zeros(frame: usize, height: usize, width: usize, dim: usize) -> Self {
        FeatureRaster {
            frame,
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
            coverage: vec![false; height * width],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.dim;
        &self.data[o..o + self.dim]
    }

    pub fn covered(&self, row: usize, col: usize) -> bool {
        self.coverage[row * self.width + col]
    }

    pub fn num_covered(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    fn place(&mut self, p: usize, value: &[f64]) {
        self.data[p * self.dim..(p + 1) * self.dim].copy_from_slice(value);
        self.coverage[p] = true;
    }
}

pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

/// Zeroes every pixel of `image` outside `mask`.
pub fn mask_image(image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    if (image.height, image.width) != mask.shape() {
        return Err(Error::ResolutionMismatch {
            a: (image.height, image.width),
            b: mask.shape(),
        });
    }
    let mut out = image.clone();
    for (p, &keep) in mask.bits().iter().enumerate() {
        if !keep {
            out.data[p * 3..p * 3 + 3].fill(0.0);
        }
    }
    Ok(out)
}

/// Embedding of the image with everything outside `mask` blacked out.
pub fn region_embedding(image: &RgbImage, mask: &Mask, embedder: &dyn ImageEmbedder) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let v = embedder.embed_image(&mask_image(image, mask)?)?;
    if v.len() != embedder.dim() {
        return Err(Error::DimensionMismatch {
            expected: embedder.dim(),
            actual: v.len(),
            context: "image embedding",
        });
    }
    normalize(&v).ok_or_else(|| Error::Embedder("zero-norm image embedding".into()))
}

/// Pixel-count weights `n_t / sum(n)`.
pub fn view_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Pixel-count weighted mean of per-view embeddings, renormalised to unit
/// length.
pub fn weighted_average(per_frame: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
    let (first, _) = per_frame.first().ok_or(Error::EmptyInput("per-frame embeddings"))?;
    let dim = first.len();
    if per_frame.iter().any(|(_, n)| *n == 0) {
        return Err(Error::InvalidArgument("pixel counts must be >= 1".into()));
    }
    let counts: Vec<usize> = per_frame.iter().map(|(_, n)| *n).collect();
    let weights = view_weights(&counts);
    let mut acc = vec![0.0; dim];
    for ((v, _), w) in per_frame.iter().zip(weights) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
                context: "per-frame embedding",
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    // exact antipodal cancellation leaves only rounding noise
    if !(norm > 1e-12) {
        return Err(Error::DegenerateAverage);
    }
    Ok(acc.into_iter().map(|x| x / norm).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub phi_bar: Vec<f64>,
    pub latent: Vec<f64>,
    pub total_pixels: u64,
}

/// Per-masklet averaged embedding and its latent code. Also the index used by
/// the first query step.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatureBank {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub entries: BTreeMap<u32, BankEntry>,
}

impl RegionFeatureBank {
    pub fn new(feature_dim: usize, latent_dim: usize) -> Self {
        RegionFeatureBank {
            feature_dim,
            latent_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn latent(&self, id: u32) -> Option<&[f64]> {
        self.entries.get(&id).map(|e| e.latent.as_slice())
    }

    pub fn phi_bars(&self) -> Vec<Vec<f64>> {
        self.entries.values().map(|e| e.phi_bar.clone()).collect()
    }

    /// Recomputes every latent as `codec.encode(phi_bar)`.
    pub fn encode_with(&mut self, codec: &CodecParams) -> Result<()> {
        for entry in self.entries.values_mut() {
            entry.latent = codec.encode(&entry.phi_bar)?;
        }
        self.latent_dim = codec.latent_dim();
        Ok(())
    }
}

/// Averaged embeddings for every masklet; latents are left at zero with width
/// `latent_dim` until [`RegionFeatureBank::encode_with`] is called.
pub fn average_masklet_embeddings(
    masklets: &MaskletSet,
    frames: &FrameSequence,
    embedder: &dyn ImageEmbedder,
    latent_dim: usize,
) -> Result<RegionFeatureBank> {
    let entries: Vec<(u32, BankEntry)> = masklets
        .masklets
        .par_iter()
        .map(|m| {
            if m.per_frame.is_empty() {
                return Err(Error::InvisibleMasklet(m.id));
            }
            let mut views = Vec::with_capacity(m.per_frame.len());
            for (&t, mask) in &m.per_frame {
                let frame = frames
                    .get(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("masklet {} refers to missing frame {t}", m.id)))?;
                let rgb = frame
                    .rgb
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("frame {t} has no RGB raster")))?;
                views.push((region_embedding(rgb, mask, embedder)?, mask.count()));
            }
            let total = views.iter().map(|(_, n)| *n as u64).sum();
            Ok((
                m.id,
                BankEntry {
                    phi_bar: weighted_average(&views)?,
                    latent: vec![0.0; latent_dim],
                    total_pixels: total,
                },
            ))
        })
        .collect::<Result<_>>()?;
    Ok(RegionFeatureBank {
        feature_dim: embedder.dim(),
        latent_dim,
        entries: entries.into_iter().collect(),
    })
}

/// Averaged embedding plus latent code for every masklet.
pub fn build_feature_bank(
    masklets: &MaskletSet,
    frames: &FrameSequence,
    embedder: &dyn ImageEmbedder,
    codec: &CodecParams,
) -> Result<RegionFeatureBank> {
    if codec.feature_dim() != embedder.dim() {
        return Err(Error::DimensionMismatch {
            expected: embedder.dim(),
            actual: codec.feature_dim(),
            context: "codec input width",
        });
    }
    let mut bank = average_masklet_embeddings(masklets, frames, embedder, codec.latent_dim())?;
    bank.encode_with(codec)?;
    Ok(bank)
}

/// One precomputed region embedding, as produced by an external extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionEmbeddingRecord {
    pub frame: usize,
    pub region_id: u16,
    pub pixel_count: u64,
    pub embedding: Vec<f64>,
}

/// Bank from precomputed per-(frame, region) embeddings. Region ids must
/// equal masklet ids; weights use the masklets' own pixel counts.
pub fn bank_from_records(
    masklets: &MaskletSet,
    records: &[RegionEmbeddingRecord],
    feature_dim: usize,
    latent_dim: usize,
) -> Result<RegionFeatureBank> {
    let lookup: BTreeMap<(usize, u32), &RegionEmbeddingRecord> =
        records.iter().map(|r| ((r.frame, r.region_id as u32), r)).collect();
    let mut bank = RegionFeatureBank::new(feature_dim, latent_dim);
    for m in &masklets.masklets {
        let mut views = Vec::new();
        for (&t, mask) in &m.per_frame {
            let rec = lookup
                .get(&(t, m.id))
                .ok_or_else(|| Error::InvalidArgument(format!("no embedding for masklet {} at frame {t}", m.id)))?;
            if rec.embedding.len() != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    actual: rec.embedding.len(),
                    context: "region embedding record",
                });
            }
            views.push((rec.embedding.clone(), mask.count()));
        }
        if views.is_empty() {
            return Err(Error::InvisibleMasklet(m.id));
        }
        let total = views.iter().map(|(_, n)| *n as u64).sum();
        bank.entries.insert(
            m.id,
            BankEntry {
                phi_bar: weighted_average(&views)?,
                latent: vec![0.0; latent_dim],
                total_pixels: total,
            },
        );
    }
    Ok(bank)
}

/// Latent-width ground truth for frame `t`: every masklet pixel carries the
/// masklet's latent code.
pub fn assemble_groundtruth(masklets: &MaskletSet, bank: &RegionFeatureBank, t: usize) -> Result<FeatureRaster> {
    let (h, w) = (masklets.height, masklets.width);
    let mut raster = FeatureRaster::zeros(t, h, w, bank.latent_dim);
    let mut owner = vec![0u32; h * w];
    for m in &masklets.masklets {
        let Some(mask) = m.at(t) else { continue };
        let latent = bank.latent(m.id).ok_or(Error::MissingBankEntry(m.id))?;
        for (r, c) in mask.pixels() {
            let p = r * w + c;
            if owner[p] != 0 {
                return Err(Error::OverlappingMasklets {
                    first: owner[p],
                    second: m.id,
                    frame: t,
                    row: r,
                    col: c,
                });
            }
            owner[p] = m.id;
            raster.place(p, latent);
        }
    }
    Ok(raster)
}

/// Per-frame baseline ground truth: each proposal's own embedding, encoded
/// and placed into its region without any cross-frame averaging.
pub fn assemble_groundtruth_baseline(
    proposals: &[RegionMask],
    image: &RgbImage,
    embedder: &dyn ImageEmbedder,
    codec: &CodecParams,
    t: usize,
) -> Result<FeatureRaster> {
    let (h, w) = (image.height, image.width);
    let mut raster = FeatureRaster::zeros(t, h, w, codec.latent_dim());
    let latents: Vec<Vec<f64>> = proposals
        .par_iter()
        .map(|p| codec.encode(&region_embedding(image, &p.mask, embedder)?))
        .collect::<Result<_>>()?;
    for (k, (p, latent)) in proposals.iter().zip(&latents).enumerate() {
        for (r, c) in p.mask.pixels() {
            let px = r * w + c;
            if raster.coverage[px] {
                return Err(Error::OverlappingMasklets {
                    first: 0,
                    second: k as u32,
                    frame: t,
                    row: r,
                    col: c,
                });
            }
            raster.place(px, latent);
        }
    }
    Ok(raster)
}
