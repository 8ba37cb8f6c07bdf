//! Space-time region extraction.
//!
//! Per-frame region proposals from a [`Segmenter`] are deduplicated against
//! the masklets already tracked and the survivors are handed (as boxes) to a
//! [`Tracker`], which propagates them over the whole sequence. The resulting
//! [`MaskletSet`] keeps masks pairwise disjoint within every frame.

use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scene::{Frame, FrameSequence};

pub const DEFAULT_KAPPA: f64 = 0.8;

/// Row-major boolean raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::DimensionMismatch {
                expected: height * width,
                actual: bits.len(),
                context: "mask bits",
            });
        }
        Ok(Mask { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|p| f(p / width, p % width)).collect();
        Mask { height, width, bits }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[(usize, usize)]) -> Self {
        let mut m = Mask::new(height, width);
        for &(r, c) in pixels {
            m.set(r, c, true);
        }
        m
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `(row, col)` of every set pixel, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(p, _)| (p / w, p % w))
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ResolutionMismatch {
                a: self.shape(),
                b: other.shape(),
            });
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.check_shape(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    pub fn subtract(&mut self, other: &Mask) -> Result<()> {
        self.check_shape(other)?;
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
        Ok(())
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }
}

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_shape(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// A single-frame region proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub frame: usize,
    pub mask: Mask,
    pub pixel_count: usize,
}

impl RegionMask {
    pub fn new(frame: usize, mask: Mask) -> Result<Self> {
        let pixel_count = mask.count();
        if pixel_count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(RegionMask {
            frame,
            mask,
            pixel_count,
        })
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl PixelBox {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.row_min as f64
            && row <= self.row_max as f64
            && col >= self.col_min as f64
            && col <= self.col_max as f64
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.row_min + self.row_max) as f64 / 2.0,
            (self.col_min + self.col_max) as f64 / 2.0,
        )
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }
}

/// Tightest box around the set pixels of `mask`.
pub fn box_from_mask(mask: &Mask) -> Result<PixelBox> {
    let mut pixels = mask.pixels();
    let (r0, c0) = pixels.next().ok_or(Error::EmptyMask)?;
    let mut b = PixelBox {
        row_min: r0,
        col_min: c0,
        row_max: r0,
        col_max: c0,
    };
    for (r, c) in pixels {
        b.row_min = b.row_min.min(r);
        b.row_max = b.row_max.max(r);
        b.col_min = b.col_min.min(c);
        b.col_max = b.col_max.max(c);
    }
    Ok(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masklet {
    pub id: u32,
    /// Frame index to mask; absent frames mean the region is not visible.
    pub per_frame: BTreeMap<usize, Mask>,
    pub origin_frame: usize,
}

impl Masklet {
    pub fn at(&self, frame: usize) -> Option<&Mask> {
        self.per_frame.get(&frame)
    }

    pub fn total_pixels(&self) -> usize {
        self.per_frame.values().map(Mask::count).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskletSet {
    pub height: usize,
    pub width: usize,
    pub masklets: Vec<Masklet>,
}

impl MaskletSet {
    pub fn new(height: usize, width: usize) -> Self {
        MaskletSet {
            height,
            width,
            masklets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.masklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masklets.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Masklet> {
        self.masklets.iter().find(|m| m.id == id)
    }

    /// Checks the per-frame disjointness invariant.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for m in &self.masklets {
            for (&t, mask) in &m.per_frame {
                let slot = owner.entry(t).or_insert_with(|| vec![0; self.height * self.width]);
                for (r, c) in mask.pixels() {
                    let p = r * self.width + c;
                    if slot[p] != 0 {
                        return Err(Error::OverlappingMasklets {
                            first: slot[p],
                            second: m.id,
                            frame: t,
                            row: r,
                            col: c,
                        });
                    }
                    slot[p] = m.id;
                }
            }
        }
        Ok(())
    }

    /// Adds a tracked region, removing pixels already owned by earlier
    /// masklets. Returns the new id, or `None` when nothing is left.
    pub fn insert_exclusive(
        &mut self,
        mut per_frame: BTreeMap<usize, Mask>,
        origin_frame: usize,
    ) -> Result<Option<u32>> {
        for (t, mask) in per_frame.iter_mut() {
            if mask.shape() != (self.height, self.width) {
                return Err(Error::ResolutionMismatch {
                    a: (self.height, self.width),
                    b: mask.shape(),
                });
            }
            for m in &self.masklets {
                if let Some(other) = m.at(*t) {
                    mask.subtract(other)?;
                }
            }
        }
        per_frame.retain(|_, m| !m.is_empty());
        if per_frame.is_empty() {
            return Ok(None);
        }
        let id = self.masklets.iter().map(|m| m.id).max().unwrap_or(0) + 1;
        self.masklets.push(Masklet {
            id,
            per_frame,
            origin_frame,
        });
        Ok(Some(id))
    }

    /// Region-id raster for frame `t` (0 = unassigned, otherwise masklet id).
    pub fn region_ids(&self, t: usize) -> Result<RegionIdRaster> {
        let mut ids = vec![0u16; self.height * self.width];
        for m in &self.masklets {
            let id = u16::try_from(m.id)
                .map_err(|_| Error::InvalidArgument(format!("masklet id {} exceeds u16 range", m.id)))?;
            if let Some(mask) = m.at(t) {
                for (r, c) in mask.pixels() {
                    ids[r * self.width + c] = id;
                }
            }
        }
        Ok(RegionIdRaster {
            frame: t,
            height: self.height,
            width: self.width,
            ids,
        })
    }

    /// Builds a masklet set from per-frame region-id rasters, treating equal
    /// nonzero ids across frames as one masklet.
    pub fn from_region_ids(rasters: &[RegionIdRaster]) -> Result<Self> {
        let first = rasters.first().ok_or(Error::EmptyInput("region-id rasters"))?;
        let (h, w) = (first.height, first.width);
        let mut by_id: BTreeMap<u16, BTreeMap<usize, Mask>> = BTreeMap::new();
        for r in rasters {
            if (r.height, r.width) != (h, w) {
                return Err(Error::ResolutionMismatch {
                    a: (h, w),
                    b: (r.height, r.width),
                });
            }
            for (id, mask) in r.masks() {
                by_id.entry(id).or_default().insert(r.frame, mask);
            }
        }
        let masklets = by_id
            .into_iter()
            .map(|(id, per_frame)| Masklet {
                id: id as u32,
                origin_frame: *per_frame.keys().next().expect("nonempty"),
                per_frame,
            })
            .collect();
        Ok(MaskletSet {
            height: h,
            width: w,
            masklets,
        })
    }
}

/// Per-frame integer region labelling (0 = unassigned).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionIdRaster {
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u16>,
}

impl RegionIdRaster {
    /// One mask per distinct nonzero id, in ascending id order.
    pub fn masks(&self) -> Vec<(u16, Mask)> {
        let mut out: BTreeMap<u16, Mask> = BTreeMap::new();
        for (p, &id) in self.ids.iter().enumerate() {
            if id != 0 {
                let m = out.entry(id).or_insert_with(|| Mask::new(self.height, self.width));
                m.bits[p] = true;
            }
        }
        out.into_iter().collect()
    }

    pub fn mask_of(&self, id: u16) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.ids.iter().map(|&v| v == id).collect(),
        }
    }

    /// Most frequent nonzero id inside `b` (ties: smallest id).
    pub fn dominant_in_box(&self, b: &PixelBox) -> Option<u16> {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for r in b.row_min..=b.row_max.min(self.height.saturating_sub(1)) {
            for c in b.col_min..=b.col_max.min(self.width.saturating_sub(1)) {
                let id = self.ids[r * self.width + c];
                if id != 0 {
                    *counts.entry(id).or_default() += 1;
                }
            }
        }
        let mut best: Option<(u16, usize)> = None;
        for (id, n) in counts {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((id, n));
            }
        }
        best.map(|(id, _)| id)
    }
}

/// Proposes regions for a single frame. Masks within a frame are disjoint.
pub trait Segmenter {
    fn segment(&self, frame: &Frame) -> Result<Vec<RegionMask>>;
}

/// Propagates boxes given at `seed_frame` over the whole sequence, returning
/// one frame-to-mask map per tracked region.
pub trait Tracker {
    fn track(
        &self,
        frames: &FrameSequence,
        boxes: &[PixelBox],
        seed_frame: usize,
    ) -> Result<Vec<BTreeMap<usize, Mask>>>;
}

fn comparison_mask(m: &Masklet, t: usize, previous: Option<usize>) -> Option<&Mask> {
    m.at(t).or_else(|| previous.and_then(|p| m.at(p)))
}

/// Merges per-frame proposals into a deduplicated, per-frame disjoint set of
/// masklets.
///
/// A proposal at frame `t` is dropped when its IoU with some tracked masklet
/// exceeds `kappa`; the masklet is compared at `t`, or at the previous frame
/// when it has no mask at `t`. Remaining proposals are tracked from `t`.
pub fn extract_masklets(
    frames: &FrameSequence,
    segmenter: &dyn Segmenter,
    tracker: &dyn Tracker,
    kappa: f64,
) -> Result<MaskletSet> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frame sequence"));
    }
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidArgument(format!("kappa must lie in (0, 1), got {kappa}")));
    }
    let (h, w) = frames.resolution().expect("nonempty");
    let mut set = MaskletSet::new(h, w);
    let mut previous: Option<usize> = None;

    for frame in frames.iter() {
        let t = frame.index;
        let proposals = segmenter.segment(frame).map_err(|e| match e {
            e @ Error::Segmenter { .. } => e,
            e => Error::Segmenter {
                frame: t,
                message: e.to_string(),
            },
        })?;

        let tracked: Vec<Option<&Mask>> = set.masklets.iter().map(|m| comparison_mask(m, t, previous)).collect();
        let keep: Vec<bool> = proposals
            .par_iter()
            .map(|p| -> Result<bool> {
                for m in tracked.iter().flatten() {
                    if iou(m, &p.mask)? > kappa {
                        return Ok(false);
                    }
                }
                Ok(true)
            })
            .collect::<Result<_>>()?;

        let boxes = proposals
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| box_from_mask(&p.mask))
            .collect::<Result<Vec<_>>>()?;
        if !boxes.is_empty() {
            let tracks = tracker.track(frames, &boxes, t).map_err(|e| match e {
                e @ Error::Tracker { .. } => e,
                e => Error::Tracker {
                    frame: t,
                    message: e.to_string(),
                },
            })?;
            for track in tracks {
                set.insert_exclusive(track, t)?;
            }
        }
        previous = Some(t);
    }
    Ok(set)
}

/// Segmenter backed by per-frame region-id rasters: every nonzero id in the
/// frame's raster is one proposal.
pub struct RegionIdSegmenter {
    rasters: BTreeMap<usize, RegionIdRaster>,
}

impl RegionIdSegmenter {
    pub fn new(rasters: Vec<RegionIdRaster>) -> Self {
        RegionIdSegmenter {
            rasters: rasters.into_iter().map(|r| (r.frame, r)).collect(),
        }
    }
}

impl Segmenter for RegionIdSegmenter {
    fn segment(&self, frame: &Frame) -> Result<Vec<RegionMask>> {
        let raster = self.rasters.get(&frame.index).ok_or(Error::Segmenter {
            frame: frame.index,
            message: "no region-id raster for frame".into(),
        })?;
        raster
            .masks()
            .into_iter()
            .map(|(_, m)| RegionMask::new(frame.index, m))
            .collect()
    }
}

/// Tracker backed by region-id rasters: a box follows the dominant id inside
/// it at the seed frame.
pub struct RegionIdTracker {
    rasters: BTreeMap<usize, RegionIdRaster>,
}

impl RegionIdTracker {
    pub fn new(rasters: Vec<RegionIdRaster>) -> Self {
        RegionIdTracker {
            rasters: rasters.into_iter().map(|r| (r.frame, r)).collect(),
        }
    }
}

impl Tracker for RegionIdTracker {
    fn track(
        &self,
        _frames: &FrameSequence,
        boxes: &[PixelBox],
        seed_frame: usize,
    ) -> Result<Vec<BTreeMap<usize, Mask>>> {
        let seed = self.rasters.get(&seed_frame).ok_or(Error::Tracker {
            frame: seed_frame,
            message: "no region-id raster for seed frame".into(),
        })?;
        boxes
            .iter()
            .map(|b| {
                let id = seed.dominant_in_box(b).ok_or(Error::Tracker {
                    frame: seed_frame,
                    message: format!("box {b:?} covers no region"),
                })?;
                Ok(self
                    .rasters
                    .iter()
                    .map(|(&t, r)| (t, r.mask_of(id)))
                    .filter(|(_, m)| !m.is_empty())
                    .collect())
            })
            .collect()
    }
}
