use super::Assignment;
use crate::error::{Error, Result};
use crate::roi::encode_deltas;
use crate::scene::{Box3D, ObjectClass};

/// Lower bound applied inside both logarithms of the binary cross entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Second-stage output for one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePrediction {
    pub class_scores: [f64; ObjectClass::COUNT],
    pub deltas: [f64; 8],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub matched: usize,
    pub unmatched: usize,
}

/// Delta targets that refine each matched proposal onto its ground truth, in
/// the order of `assignment.pairs`.
pub fn regression_targets(
    proposals: &[Box3D],
    gts: &[Box3D],
    assignment: &Assignment,
) -> Result<Vec<[f64; 8]>> {
    check_pairs(proposals.len(), gts.len(), assignment)?;
    Ok(assignment
        .pairs
        .iter()
        .map(|&(p, g)| encode_deltas(&proposals[p], &gts[g]))
        .collect())
}

fn check_pairs(n_pred: usize, n_gt: usize, assignment: &Assignment) -> Result<()> {
    for &(p, g) in &assignment.pairs {
        if p >= n_pred || g >= n_gt {
            return Err(Error::invalid(
                "second_stage_loss",
                format!("pair ({p}, {g}) out of range for {n_pred} predictions and {n_gt} ground truths"),
            ));
        }
    }
    Ok(())
}

fn bce(p: f64, target: f64) -> f64 {
    let mut loss = 0.0;
    if target > 0.0 {
        loss -= target * p.max(BCE_EPS).ln();
    }
    if target < 1.0 {
        loss -= (1.0 - target) * (1.0 - p).max(BCE_EPS).ln();
    }
    loss
}

/// Mean BCE over every proposal and class, plus mean L1 over the eight deltas of
/// matched pairs. Unmatched proposals only contribute background BCE terms.
pub fn second_stage_loss(
    predictions: &[StagePrediction],
    gts: &[Box3D],
    assignment: &Assignment,
    reg_targets: &[[f64; 8]],
) -> Result<LossReport> {
    check_pairs(predictions.len(), gts.len(), assignment)?;
    crate::error::check_dim(
        "second_stage_loss",
        "reg_targets",
        assignment.pairs.len(),
        reg_targets.len(),
    )?;

    let mut cls_sum = 0.0;
    for (i, pred) in predictions.iter().enumerate() {
        let positive = assignment.col_of_row(i).map(|g| gts[g].class.index());
        for (k, &p) in pred.class_scores.iter().enumerate() {
            let target = if positive == Some(k) { 1.0 } else { 0.0 };
            cls_sum += bce(p, target);
        }
    }
    let cls_terms = predictions.len() * ObjectClass::COUNT;
    let cls_loss = if cls_terms == 0 {
        0.0
    } else {
        cls_sum / cls_terms as f64
    };

    let mut reg_sum = 0.0;
    for (&(p, _), target) in assignment.pairs.iter().zip(reg_targets) {
        reg_sum += predictions[p]
            .deltas
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    let matched = assignment.pairs.len();
    let reg_loss = if matched == 0 {
        0.0
    } else {
        reg_sum / (matched * 8) as f64
    };

    Ok(LossReport {
        cls_loss,
        reg_loss,
        matched,
        unmatched: predictions.len() - matched,
    })
}
