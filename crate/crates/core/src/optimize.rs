//! Inference passes over a weight store: batch-norm folding, half-precision
//! conversion, and detection-level equivalence reports.

use std::fmt::Write as _;

use crate::error::{check_dim, Error, Result};
use crate::matching::rotated_iou_bev;
use crate::scene::{wrap_angle, Box3D};
use crate::tensor::{quantize_fp16, BatchNormParams, Precision, Tensor, WeightStore};

/// Folds `batch_norm(conv(x, W, b))` into a single convolution `(W', b')`.
///
/// The per-channel scale is computed in `f64` and the results rounded once.
pub fn fold_batchnorm(
    weight: &Tensor,
    bias: &Tensor,
    bn: &BatchNormParams,
    eps: f32,
) -> Result<(Tensor, Tensor)> {
    const OP: &str = "fold_batchnorm";
    if !(eps > 0.0) {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    let c_out = *weight
        .shape()
        .first()
        .ok_or_else(|| Error::invalid(OP, "weight has rank 0"))?;
    check_dim(OP, "bias", c_out, bias.len())?;
    check_dim(OP, "bn channels", c_out, bn.channels())?;
    let per = weight.len() / c_out.max(1);
    let mut w = weight.data().to_vec();
    let mut b = vec![0.0f32; c_out];
    for c in 0..c_out {
        let g = bn.gamma.data()[c] as f64;
        let var = bn.var.data()[c] as f64;
        let s = g / (var + eps as f64).sqrt();
        for v in &mut w[c * per..(c + 1) * per] {
            *v = (*v as f64 * s) as f32;
        }
        b[c] = (s * (bias.data()[c] as f64 - bn.mean.data()[c] as f64) + bn.beta.data()[c] as f64)
            as f32;
    }
    Ok((
        Tensor::new(weight.shape().to_vec(), w)?,
        Tensor::new(vec![c_out], b)?,
    ))
}

/// Folds every `<p>.bn.*` group into its `<p>.conv.*` pair.
///
/// Adjacency comes only from the names; a batch norm without a matching
/// convolution is an error. Returns the new store and the folded prefixes.
pub fn fold_store_batchnorm(store: &WeightStore, eps: f32) -> Result<(WeightStore, Vec<String>)> {
    let prefixes: Vec<String> = store
        .names()
        .filter_map(|n| n.strip_suffix(".bn.gamma"))
        .map(str::to_string)
        .collect();
    let mut out = store.clone();
    for p in &prefixes {
        let bn = store
            .batch_norm(&format!("{p}.bn"))?
            .expect("gamma present by construction");
        let w = store.require(&format!("{p}.conv.weight"))?;
        let b = store.require(&format!("{p}.conv.bias"))?;
        let (w2, b2) = fold_batchnorm(w, b, &bn, eps)?;
        out.insert(format!("{p}.conv.weight"), w2);
        out.insert(format!("{p}.conv.bias"), b2);
        for k in ["gamma", "beta", "mean", "var"] {
            out.remove(&format!("{p}.bn.{k}"));
        }
    }
    Ok((out, prefixes))
}

fn is_bn_statistic(name: &str) -> bool {
    name.contains(".bn.")
}

/// Returns a copy of the store at `target` precision.
///
/// Under FP16E every tensor except batch-norm parameters is rounded to
/// binary16; any value that overflows is reported by tensor name.
pub fn convert_pipeline_precision(store: &WeightStore, target: Precision) -> Result<WeightStore> {
    let mut out = WeightStore::new();
    let mut overflow = Vec::new();
    for (name, t) in store.iter() {
        let converted = match target {
            Precision::Fp16E if !is_bn_statistic(name) => {
                let q = quantize_fp16(t);
                if q.data()
                    .iter()
                    .zip(t.data())
                    .any(|(q, v)| q.is_infinite() && v.is_finite())
                {
                    overflow.push(name.to_string());
                }
                q
            }
            _ => t.to_fp32(),
        };
        out.insert(name, converted);
    }
    if !overflow.is_empty() {
        return Err(Error::Fp16Overflow(overflow));
    }
    Ok(out)
}

/// Worst-case disagreement between two pipelines' final detections.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// `(quantity, max absolute diff, max relative diff)` for score, center,
    /// size, yaw and unpaired detections.
    pub quantities: Vec<(String, f64, f64)>,
    /// Over the paired quantities only.
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    /// Quantity holding the largest relative diff.
    pub worst: String,
    pub detections_a: usize,
    pub detections_b: usize,
    /// Detections of either side left without a partner.
    pub unmatched: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    /// `tensor,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tensor,metric,value\n");
        for (q, a, r) in &self.quantities {
            let _ = writeln!(s, "{q},max_abs,{a:e}");
            let _ = writeln!(s, "{q},max_rel,{r:e}");
        }
        let _ = writeln!(s, "detections,count_a,{}", self.detections_a);
        let _ = writeln!(s, "detections,count_b,{}", self.detections_b);
        let _ = writeln!(s, "detections,unmatched,{}", self.unmatched);
        let _ = writeln!(s, "overall,max_abs,{:e}", self.max_abs_diff);
        let _ = writeln!(s, "overall,max_rel,{:e}", self.max_rel_diff);
        let _ = writeln!(s, "overall,worst,{}", self.worst);
        let _ = writeln!(s, "overall,tolerance,{:e}", self.tolerance);
        let _ = writeln!(s, "overall,pass,{}", u8::from(self.pass));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>14} {:>14}\n", "quantity", "max abs", "max rel");
        for (q, a, r) in &self.quantities {
            let _ = writeln!(s, "{q:<10} {a:>14.6e} {r:>14.6e}");
        }
        let _ = writeln!(
            s,
            "detections {} vs {}, unmatched {}; worst: {}; tolerance {:e}: {}",
            self.detections_a,
            self.detections_b,
            self.unmatched,
            self.worst,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        );
        s
    }
}

/// Relative difference with a unit floor on the magnitude, so coordinates
/// near zero do not inflate it.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Greedily pairs detections by descending score of `a`, each taking the
/// highest-IoU unused same-class detection of `b` with positive overlap.
pub fn align_detections(a: &[Box3D], b: &[Box3D]) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| a[j].score.total_cmp(&a[i].score).then(i.cmp(&j)));
    let mut used = vec![false; b.len()];
    order
        .into_iter()
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (j, d) in b.iter().enumerate() {
                if used[j] || d.class != a[i].class {
                    continue;
                }
                let iou = rotated_iou_bev(&a[i], d);
                if iou > 0.0 && best.is_none_or(|(_, v)| iou > v) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            (i, best.map(|(j, _)| j))
        })
        .collect()
}

/// Compares per-scene detection lists of two pipelines.
///
/// Geometry and score diffs cover paired detections only. Unpaired ones form a
/// `detections` quantity: their count, relative to all detections of both runs.
pub fn equivalence_check(
    a: &[Vec<Box3D>],
    b: &[Vec<Box3D>],
    tolerance: f64,
) -> Result<EquivalenceReport> {
    check_dim("equivalence_check", "scenes", a.len(), b.len())?;
    const NAMES: [&str; 5] = ["score", "center", "size", "yaw", "detections"];
    let mut abs = [0.0f64; 5];
    let mut relv = [0.0f64; 5];
    let mut unmatched = 0;
    let mut bump = |k: usize, a_: f64, r: f64| {
        abs[k] = abs[k].max(a_);
        relv[k] = relv[k].max(r);
    };
    for (da, db) in a.iter().zip(b) {
        let pairs = align_detections(da, db);
        let matched = pairs.iter().filter(|p| p.1.is_some()).count();
        unmatched += (da.len() - matched) + (db.len() - matched);
        for (i, j) in pairs {
            let Some(j) = j else { continue };
            let (x, y) = (&da[i], &db[j]);
            bump(0, (x.score - y.score).abs(), rel(x.score, y.score));
            for (p, q) in [(x.cx, y.cx), (x.cy, y.cy), (x.cz, y.cz)] {
                bump(1, (p - q).abs(), rel(p, q));
            }
            for (p, q) in [(x.l, y.l), (x.w, y.w), (x.h, y.h)] {
                bump(2, (p - q).abs(), (p - q).abs() / p.max(q));
            }
            let dyaw = wrap_angle(x.yaw - y.yaw).abs();
            bump(3, dyaw, dyaw / std::f64::consts::PI);
        }
    }
    let total: usize = a.iter().chain(b).map(Vec::len).sum();
    abs[4] = unmatched as f64;
    relv[4] = unmatched as f64 / total.max(1) as f64;
    let (worst_k, _) = relv
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &r)| {
            if r > best.1 {
                (k, r)
            } else {
                best
            }
        });
    let max_rel_diff = relv.iter().copied().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        quantities: NAMES
            .iter()
            .enumerate()
            .map(|(k, n)| (n.to_string(), abs[k], relv[k]))
            .collect(),
        max_abs_diff: abs[..4].iter().copied().fold(0.0, f64::max),
        max_rel_diff,
        worst: NAMES[worst_k].to_string(),
        detections_a: a.iter().map(Vec::len).sum(),
        detections_b: b.iter().map(Vec::len).sum(),
        unmatched,
        tolerance,
        pass: max_rel_diff <= tolerance,
    })
}
