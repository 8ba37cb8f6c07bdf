//! Point-level open-vocabulary queries over a trained bundle.
//!
//! The two-step query first retrieves the bank region whose averaged image
//! embedding best matches the text query, then thresholds the cosine between
//! each Gaussian's embedding and that region's latent code. The one-step and
//! canonical-phrase baselines compare against the encoded text directly.

use rayon::prelude::*;

use crate::cluster::{largest_cluster, median_nearest_neighbor};
use crate::codec::{cosine, CodecParams};
use crate::error::{Error, Result};
use crate::features::{BankEntry, RegionFeatureBank};
use crate::masklet::Mask;
use crate::raster::compute_contributions;
use crate::scene::{CameraPose, GaussianBundle};

pub const DEFAULT_MIN_PTS: usize = 8;
pub const DEFAULT_ALPHA_CUTOFF: f64 = 0.5;
/// A uniform 3D cloud has on average `r^3 ln 2` neighbours within `r`
/// median nearest-neighbour distances, so `r = 2` leaves typical points
/// short of [`DEFAULT_MIN_PTS`]; `r = 3` gives about 19.
pub const EPS_MULTIPLIER: f64 = 3.0;
pub const CANONICAL_PHRASES: [&str; 4] = ["object", "things", "stuff", "texture"];

/// Step-two thresholds used for the three benchmark families.
pub mod thresholds {
    pub const LERF: f64 = 0.995;
    pub const OVS_3D: f64 = 0.999;
    pub const REPLICA: f64 = 0.95;
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryConfig {
    pub threshold: f64,
    pub dbscan: bool,
    /// `None` picks [`EPS_MULTIPLIER`] times the median nearest-neighbour distance of the
    /// selected Gaussians.
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub alpha_cutoff: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        QueryConfig {
            threshold: thresholds::REPLICA,
            dbscan: true,
            eps: None,
            min_pts: DEFAULT_MIN_PTS,
            alpha_cutoff: DEFAULT_ALPHA_CUTOFF,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    /// Ascending Gaussian indices.
    pub selected: Vec<usize>,
    /// Cosine similarity of each selected Gaussian.
    pub scores: Vec<f64>,
    pub matched_region: Option<u32>,
    /// Selection size after thresholding and after outlier removal.
    pub stage_sizes: (usize, usize),
}

impl QueryResult {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Bank entry with the highest cosine to `q`; ties go to the smallest id.
pub fn step1_retrieve<'a>(q: &[f64], bank: &'a RegionFeatureBank) -> Result<(u32, &'a BankEntry)> {
    if bank.is_empty() {
        return Err(Error::EmptyInput("feature bank"));
    }
    if q.len() != bank.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: bank.feature_dim,
            actual: q.len(),
            context: "query vector",
        });
    }
    let mut best: Option<(u32, &BankEntry, f64)> = None;
    // entries iterate in ascending id order, so strict > keeps the smallest id
    for (&id, entry) in &bank.entries {
        let c = cosine(&entry.phi_bar, q);
        if best.is_none_or(|(_, _, bc)| c > bc) {
            best = Some((id, entry, c));
        }
    }
    let (id, entry, _) = best.expect("nonempty bank");
    Ok((id, entry))
}

/// Cosine between every Gaussian embedding and `latent`; zero-norm
/// embeddings score `None`.
pub fn embedding_cosines(latent: &[f64], bundle: &GaussianBundle) -> Vec<Option<f64>> {
    (0..bundle.len())
        .into_par_iter()
        .map(|i| {
            let l = bundle.embedding(i);
            if l.iter().all(|&x| x == 0.0) {
                None
            } else {
                Some(cosine(l, latent))
            }
        })
        .collect()
}

fn threshold_latent(latent: &[f64], bundle: &GaussianBundle, threshold: f64) -> Result<(Vec<usize>, Vec<f64>)> {
    if latent.len() != bundle.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: bundle.latent_dim(),
            actual: latent.len(),
            context: "query latent",
        });
    }
    let mut sel = Vec::new();
    let mut scores = Vec::new();
    for (i, c) in embedding_cosines(latent, bundle).into_iter().enumerate() {
        if let Some(c) = c {
            if c >= threshold {
                sel.push(i);
                scores.push(c);
            }
        }
    }
    Ok((sel, scores))
}

/// Gaussians whose embedding has cosine `>= threshold` with the latent code
/// of the retrieved region embedding.
pub fn step2_select(
    phi_bar: &[f64],
    codec: &CodecParams,
    bundle: &GaussianBundle,
    threshold: f64,
) -> Result<Vec<usize>> {
    Ok(step2_scored(phi_bar, codec, bundle, threshold)?.0)
}

fn step2_scored(
    phi_bar: &[f64],
    codec: &CodecParams,
    bundle: &GaussianBundle,
    threshold: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "step-two threshold must lie in (-1, 1), got {threshold}"
        )));
    }
    threshold_latent(&codec.encode(phi_bar)?, bundle, threshold)
}

/// Baseline: threshold the cosine with the encoded text query itself.
pub fn one_step_query(q: &[f64], codec: &CodecParams, bundle: &GaussianBundle, threshold: f64) -> Result<Vec<usize>> {
    if bundle.is_empty() {
        return Ok(Vec::new());
    }
    Ok(threshold_latent(&codec.encode(q)?, bundle, threshold)?.0)
}

/// Per-Gaussian relevancy against canonical phrases, in latent space:
/// `min_c exp(l.q) / (exp(l.q) + exp(q.c))`.
pub fn canonical_relevancy(
    q: &[f64],
    codec: &CodecParams,
    bundle: &GaussianBundle,
    canon: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if canon.is_empty() {
        return Err(Error::EmptyInput("canonical phrase embeddings"));
    }
    let zq = codec.encode(q)?;
    let canon_dots: Vec<f64> = canon
        .iter()
        .map(|c| Ok(dot(&zq, &codec.encode(c)?)))
        .collect::<Result<_>>()?;
    Ok(relevancy_scores(&zq, bundle, &canon_dots))
}

fn relevancy_scores(zq: &[f64], bundle: &GaussianBundle, canon_dots: &[f64]) -> Vec<f64> {
    (0..bundle.len())
        .into_par_iter()
        .map(|i| {
            let lq = dot(bundle.embedding(i), zq);
            canon_dots
                .iter()
                // exp(a) / (exp(a) + exp(b)) = 1 / (1 + exp(b - a))
                .map(|&qc| 1.0 / (1.0 + (qc - lq).exp()))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Gaussians whose canonical relevancy is at least `threshold`.
pub fn canonical_query(
    q: &[f64],
    codec: &CodecParams,
    bundle: &GaussianBundle,
    canon: &[Vec<f64>],
    threshold: f64,
) -> Result<Vec<usize>> {
    Ok(canonical_relevancy(q, codec, bundle, canon)?
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s >= threshold)
        .map(|(i, _)| i)
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Default clustering radius: [`EPS_MULTIPLIER`] times the median
/// nearest-neighbour distance of the selected positions.
pub fn default_eps(indices: &[usize], bundle: &GaussianBundle) -> Option<f64> {
    let pts: Vec<[f64; 3]> = indices.iter().map(|&i| bundle.positions[i]).collect();
    median_nearest_neighbor(&pts)
        .map(|m| EPS_MULTIPLIER * m)
        .filter(|&e| e > 0.0)
}

/// Keeps the largest DBSCAN cluster of the selected Gaussians' positions.
pub fn dbscan_filter(indices: &[usize], bundle: &GaussianBundle, eps: f64, min_pts: usize) -> Result<Vec<usize>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(Error::InvalidArgument("dbscan needs eps > 0 and min_pts >= 1".into()));
    }
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let pts: Vec<[f64; 3]> = indices.iter().map(|&i| bundle.positions[i]).collect();
    Ok(largest_cluster(&pts, eps, min_pts)
        .into_iter()
        .map(|k| indices[k])
        .collect())
}

/// Applies the configured outlier filter to a selection.
pub fn postprocess(indices: Vec<usize>, bundle: &GaussianBundle, cfg: &QueryConfig) -> Result<Vec<usize>> {
    if !cfg.dbscan || indices.is_empty() {
        return Ok(indices);
    }
    // a lone point has no neighbour scale; it can only survive when min_pts is 1
    let eps = cfg
        .eps
        .or_else(|| default_eps(&indices, bundle))
        .unwrap_or(f64::MIN_POSITIVE);
    dbscan_filter(&indices, bundle, eps, cfg.min_pts)
}

/// Full two-step query with optional outlier removal.
pub fn two_step_query(
    q: &[f64],
    bank: &RegionFeatureBank,
    codec: &CodecParams,
    bundle: &GaussianBundle,
    cfg: &QueryConfig,
) -> Result<QueryResult> {
    let (region, entry) = step1_retrieve(q, bank)?;
    let (selected, scores) = step2_scored(&entry.phi_bar, codec, bundle, cfg.threshold)?;
    let after_threshold = selected.len();
    let kept = postprocess(selected.clone(), bundle, cfg)?;
    let scores = filter_scores(&selected, &scores, &kept);
    Ok(QueryResult {
        stage_sizes: (after_threshold, kept.len()),
        selected: kept,
        scores,
        matched_region: Some(region),
    })
}

fn filter_scores(selected: &[usize], scores: &[f64], kept: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(kept.len());
    let mut j = 0;
    for (&i, &s) in selected.iter().zip(scores) {
        if j < kept.len() && kept[j] == i {
            out.push(s);
            j += 1;
        }
    }
    out
}

/// Renders only the selected Gaussians and marks pixels whose accumulated
/// opacity reaches `alpha_cutoff`.
pub fn render_query_mask(selected: &[usize], bundle: &GaussianBundle, camera: &CameraPose, alpha_cutoff: f64) -> Mask {
    let (h, w) = camera.resolution;
    if selected.is_empty() {
        return Mask::new(h, w);
    }
    let sub = bundle.subset(selected);
    let alpha = compute_contributions(&sub, camera).accumulated_alpha();
    Mask::from_bits(h, w, alpha.into_iter().map(|a| a >= alpha_cutoff).collect()).expect("raster shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::BankEntry;

    fn bank(vectors: &[Vec<f64>]) -> RegionFeatureBank {
        let mut b = RegionFeatureBank::new(vectors[0].len(), 2);
        for (k, v) in vectors.iter().enumerate() {
            b.entries.insert(
                k as u32 + 1,
                BankEntry {
                    phi_bar: v.clone(),
                    latent: vec![0.0; 2],
                    total_pixels: 1,
                },
            );
        }
        b
    }

    #[test]
    fn step1_picks_most_similar() {
        let b = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(step1_retrieve(&[1.0, 0.0], &b).unwrap().0, 1);
        assert_eq!(step1_retrieve(&[0.1, 0.9], &b).unwrap().0, 2);
    }

    #[test]
    fn step1_ties_go_to_smallest_id() {
        let b = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(step1_retrieve(&[h, h], &b).unwrap().0, 1);
    }

    #[test]
    fn step1_empty_bank() {
        let b = RegionFeatureBank::new(2, 2);
        assert!(step1_retrieve(&[1.0, 0.0], &b).is_err());
    }

    fn identity_codec() -> CodecParams {
        use crate::codec::Layer;
        use ndarray::{Array1, Array2};
        let eye = Layer {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        CodecParams::from_layers(vec![eye.clone()], vec![eye]).unwrap()
    }

    fn points(embs: &[[f64; 2]]) -> GaussianBundle {
        let mut b = GaussianBundle::empty(2);
        for (k, e) in embs.iter().enumerate() {
            b.push(
                [k as f64, 0.0, 0.0],
                [0.01, 0.0, 0.0, 0.01, 0.0, 0.01],
                [0.5; 3],
                0.9,
                e,
                None,
            )
            .unwrap();
        }
        b
    }

    #[test]
    fn step2_thresholds() {
        let b = points(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.0, 0.0], [-1.0, 0.0]]);
        let codec = identity_codec();
        let all = step2_select(&[1.0, 0.0], &codec, &b, -1.0 + 1e-9).unwrap();
        // the antipodal point sits exactly at cosine -1, below any valid threshold
        assert_eq!(all, vec![0, 1, 2]);
        assert_eq!(step2_select(&[1.0, 0.0], &codec, &b, 0.95).unwrap(), vec![0, 1]);
        assert_eq!(step2_select(&[1.0, 0.0], &codec, &b, 0.9999999).unwrap(), vec![0]);
        assert!(step2_select(&[1.0, 0.0], &codec, &b, 1.0).is_err());
    }

    #[test]
    fn one_step_matches_step2_definition() {
        let b = points(&[[1.0, 0.2], [0.3, 1.0], [0.7, 0.7]]);
        let codec = identity_codec();
        let q = [0.8, 0.6];
        assert_eq!(
            one_step_query(&q, &codec, &b, 0.9).unwrap(),
            step2_select(&q, &codec, &b, 0.9).unwrap()
        );
        assert!(one_step_query(&q, &codec, &GaussianBundle::empty(2), 0.5)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn canonical_limits() {
        let codec = identity_codec();
        let q = [1.0, 0.0];
        // l.q = 30 >> q.c = 0
        let b = points(&[[30.0, 0.0]]);
        let s = canonical_relevancy(&q, &codec, &b, &[vec![0.0, 1.0]]).unwrap();
        assert!(s[0] > 1.0 - 1e-12);
        // l.q == q.c; phrase latents land on the unit circle
        let b = points(&[[0.6, 0.3]]);
        let s = canonical_relevancy(&q, &codec, &b, &[vec![0.6, 0.8]]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        // minimum over phrases
        let s = canonical_relevancy(&q, &codec, &b, &[vec![1.2, 1.6], vec![-3.0, 0.0]]).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!(canonical_relevancy(&q, &codec, &b, &[]).is_err());
    }

    #[test]
    fn dbscan_degenerate_cases() {
        let b = points(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        assert!(dbscan_filter(&[], &b, 1.0, 2).unwrap().is_empty());
        assert_eq!(dbscan_filter(&[0, 1, 2], &b, 5.0, 1).unwrap(), vec![0, 1, 2]);
        assert!(dbscan_filter(&[0, 1, 2], &b, 5.0, 4).unwrap().is_empty());
        assert!(dbscan_filter(&[0, 1], &b, 0.0, 4).is_err());
    }

    #[test]
    fn empty_selection_renders_empty_mask() {
        let cam = CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 5.0],
            focal: (20.0, 20.0),
            principal: (8.0, 8.0),
            resolution: (16, 16),
        };
        let b = points(&[[1.0, 0.0]]);
        assert!(render_query_mask(&[], &b, &cam, 0.5).is_empty());
        let m = render_query_mask(&[0], &b, &cam, 0.5);
        assert!(m.get(8, 8));
        assert_eq!(m.count(), 1);
    }
}
