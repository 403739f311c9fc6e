//! Proposal-to-ground-truth matching for the second stage: rotated IoU, the
//! classification + IoU cost, optimal assignment and the BCE / L1 loss.

mod hungarian;
mod iou;
mod loss;

pub use hungarian::{hungarian_assign, Assignment};
pub use iou::{
    bev_intersection_area, clip_convex, iou, polygon_area, rotated_iou_3d, rotated_iou_bev, IouMode,
};
pub use loss::{regression_targets, second_stage_loss, LossReport, StagePrediction, BCE_EPS};

use crate::error::{Error, Result};
use crate::scene::{Box3D, ObjectClass};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub lambda_cls: f64,
    pub lambda_iou: f64,
    pub iou_mode: IouMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_iou: 1.0,
            iou_mode: IouMode::Bev,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cls >= 0.0 && self.lambda_iou >= 0.0) {
            return Err(Error::Config(
                "matching weights must be non-negative".into(),
            ));
        }
        if self.lambda_cls == 0.0 && self.lambda_iou == 0.0 {
            return Err(Error::Config(
                "lambda_cls and lambda_iou cannot both be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Dense row-major cost matrix; rows are proposals, columns ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        crate::error::check_dim("CostMatrix::new", "len", rows * cols, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("CostMatrix::new", "entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// `lambda_cls * (1 - p[gt class]) + lambda_iou * (1 - IoU)` for every proposal/gt pair.
pub fn build_cost_matrix(
    proposals: &[Box3D],
    class_scores: &[[f64; ObjectClass::COUNT]],
    gts: &[Box3D],
    cfg: &MatchConfig,
) -> Result<CostMatrix> {
    crate::error::check_dim(
        "build_cost_matrix",
        "class_scores",
        proposals.len(),
        class_scores.len(),
    )?;
    if class_scores
        .iter()
        .flatten()
        .any(|p| !(0.0..=1.0).contains(p))
    {
        return Err(Error::invalid(
            "build_cost_matrix",
            "class scores must lie in [0, 1]",
        ));
    }
    let mut data = Vec::with_capacity(proposals.len() * gts.len());
    for (p, scores) in proposals.iter().zip(class_scores) {
        for g in gts {
            let cls = 1.0 - scores[g.class.index()];
            let overlap = 1.0 - iou(cfg.iou_mode, p, g);
            data.push(cfg.lambda_cls * cls + cfg.lambda_iou * overlap);
        }
    }
    CostMatrix::new(proposals.len(), gts.len(), data)
}
