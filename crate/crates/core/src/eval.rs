//! Average precision and heading-weighted average precision.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::matching::{iou, IouMode};
use crate::scene::{wrap_angle, Box3D, ObjectClass};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// IoU needed for a true positive, indexed by class.
    pub iou_thresholds: [f64; ObjectClass::COUNT],
    pub iou_mode: IouMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: [0.7, 0.5, 0.5],
            iou_mode: IouMode::ThreeD,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config(
                "eval IoU thresholds must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    pub det: usize,
    pub class: ObjectClass,
    pub score: f64,
    pub gt: Option<usize>,
    pub iou: f64,
    /// Absolute heading error in `[0, pi]`; 0 for false positives.
    pub dyaw: f64,
}

/// Absolute wrapped heading difference in `[0, pi]`.
pub fn heading_error(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Greedy one-to-one matching in descending score order (ties by input
/// order): each detection takes the highest-IoU unmatched same-class ground
/// truth whose IoU reaches the class threshold.
pub fn match_detections(dets: &[Box3D], gts: &[Box3D], cfg: &EvalConfig) -> Vec<MatchRecord> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score).then(i.cmp(&j)));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let threshold = cfg.iou_thresholds[d.class.index()];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.class != d.class {
                    continue;
                }
                let v = iou(cfg.iou_mode, d, g);
                if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            MatchRecord {
                det: i,
                class: d.class,
                score: d.score,
                gt: best.map(|(j, _)| j),
                iou: best.map_or(0.0, |(_, v)| v),
                dyaw: best.map_or(0.0, |(j, _)| heading_error(d.yaw, gts[j].yaw)),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub ap: f64,
    pub aph: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// `None` for classes without ground truth, which are left out of the means.
    pub per_class: [Option<ClassMetrics>; ObjectClass::COUNT],
    pub map: f64,
    pub maph: f64,
}

impl EvalResult {
    pub fn excluded(&self) -> Vec<ObjectClass> {
        ObjectClass::ALL
            .into_iter()
            .filter(|c| self.per_class[c.index()].is_none())
            .collect()
    }

    /// `class,ap,aph` rows in percent, then a `mAP,mAPH` footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,aph\n");
        for c in ObjectClass::ALL {
            match self.per_class[c.index()] {
                Some(m) => {
                    let _ = writeln!(s, "{},{:.1},{:.1}", c.name(), 100.0 * m.ap, 100.0 * m.aph);
                }
                None => {
                    let _ = writeln!(s, "{},n/a,n/a", c.name());
                }
            }
        }
        let _ = writeln!(
            s,
            "mAP,mAPH\n{:.1},{:.1}",
            100.0 * self.map,
            100.0 * self.maph
        );
        s
    }
}

/// Area under the all-point interpolated curve: each recall step is weighted
/// by the best precision at that recall or beyond.
fn interpolated_area(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        area += (r - prev) * p;
        prev = *r;
    }
    area
}

/// AP and APH per class over match records pooled from all scenes.
///
/// APH uses the same recall axis as AP but credits each true positive with
/// `1 - dyaw / pi` in the precision numerator.
pub fn compute_ap_aph(records: &[MatchRecord], num_gt: [usize; ObjectClass::COUNT]) -> EvalResult {
    let mut per_class = [None; ObjectClass::COUNT];
    for c in ObjectClass::ALL {
        let n_gt = num_gt[c.index()];
        if n_gt == 0 {
            continue;
        }
        let mut recs: Vec<&MatchRecord> = records.iter().filter(|r| r.class == c).collect();
        // Stable sort keeps the caller's order among equal scores.
        recs.sort_by(|a, b| b.score.total_cmp(&a.score));
        let (mut tp, mut htp) = (0.0, 0.0);
        let mut recall = Vec::with_capacity(recs.len());
        let mut precision = Vec::with_capacity(recs.len());
        let mut hprecision = Vec::with_capacity(recs.len());
        for (i, r) in recs.iter().enumerate() {
            if r.gt.is_some() {
                tp += 1.0;
                htp += 1.0 - r.dyaw / std::f64::consts::PI;
            }
            let seen = (i + 1) as f64;
            recall.push(tp / n_gt as f64);
            precision.push(tp / seen);
            hprecision.push(htp / seen);
        }
        per_class[c.index()] = Some(ClassMetrics {
            ap: interpolated_area(&recall, &precision),
            aph: interpolated_area(&recall, &hprecision),
            num_gt: n_gt,
            num_det: recs.len(),
        });
    }
    let present: Vec<ClassMetrics> = per_class.iter().flatten().copied().collect();
    let mean = |f: fn(&ClassMetrics) -> f64| {
        if present.is_empty() {
            0.0
        } else {
            present.iter().map(f).sum::<f64>() / present.len() as f64
        }
    };
    EvalResult {
        per_class,
        map: mean(|m| m.ap),
        maph: mean(|m| m.aph),
    }
}

/// Matches and scores a set of scenes given as `(detections, ground truth)`.
pub fn evaluate_scenes(scenes: &[(Vec<Box3D>, Vec<Box3D>)], cfg: &EvalConfig) -> EvalResult {
    let mut records = Vec::new();
    let mut num_gt = [0usize; ObjectClass::COUNT];
    for (dets, gts) in scenes {
        records.extend(match_detections(dets, gts, cfg));
        for g in gts {
            num_gt[g.class.index()] += 1;
        }
    }
    compute_ap_aph(&records, num_gt)
}
