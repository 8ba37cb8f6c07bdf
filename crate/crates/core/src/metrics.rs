//! Segmentation and localisation metrics for 2D masks and 3D point sets.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::masklet::{box_from_mask, Mask, PixelBox};

pub const MACC_CUTOFF: f64 = 0.25;

/// Mask IoU; two empty masks score 1.
pub fn iou_2d(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ResolutionMismatch {
            a: pred.shape(),
            b: gt.shape(),
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of queries whose IoU is strictly above `cutoff`.
pub fn macc(ious: &[f64], cutoff: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v > cutoff).count() as f64 / ious.len() as f64
}

/// Whether the center of the prediction's bounding box falls inside
/// `gt_box` (inclusive). An empty prediction never localises.
pub fn loc_acc(pred: &Mask, gt_box: &PixelBox) -> bool {
    match box_from_mask(pred) {
        Ok(b) => {
            let (r, c) = b.center();
            gt_box.contains(r, c)
        }
        Err(_) => false,
    }
}

/// IoU between a selected Gaussian set and the Gaussians carrying
/// `target_label`.
pub fn miou_3d(selected: &[usize], labels: &[i32], target_label: i32) -> f64 {
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let target: BTreeSet<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == target_label)
        .map(|(i, _)| i)
        .collect();
    set_iou(&sel, &target)
}

pub fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// One row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub query: String,
    pub frame: usize,
    pub iou: f64,
    pub macc_hit: bool,
    pub loc_hit: bool,
}

impl EvalRecord {
    pub fn new(query: &str, frame: usize, pred: &Mask, gt: &Mask) -> Result<Self> {
        let iou = iou_2d(pred, gt)?;
        let loc_hit = match box_from_mask(gt) {
            Ok(b) => loc_acc(pred, &b),
            Err(_) => false,
        };
        Ok(EvalRecord {
            query: query.to_string(),
            frame,
            iou,
            macc_hit: iou > MACC_CUTOFF,
            loc_hit,
        })
    }
}

pub fn write_eval_csv(records: &[EvalRecord], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "query,frame,iou,macc_hit,loc_hit")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{},{}",
            r.query, r.frame, r.iou, r.macc_hit as u8, r.loc_hit as u8
        )?;
    }
    Ok(())
}
