//! Second stage: face-center ROI pooling, the attention head, box refinement
//! and score fusion.

use crate::backbone::FeatureMap;
use crate::error::{check_dim, Error, Result};
use crate::matching::StagePrediction;
use crate::scene::{wrap_angle, Box3D, ObjectClass};
use crate::tensor::{
    bilinear_sample, mlp_forward, multi_head_self_attention, sigmoid, sine_position_embedding,
    AttentionConfig, AttentionWeights, Linear, Tensor,
};
use crate::voxel::VoxelConfig;

/// Points pooled per proposal: the center and four side-face centers.
pub const ROI_POINTS: usize = 5;
/// Regression outputs: `dx, dy, dz, dlog l, dlog w, dlog h, dsin, dcos`.
pub const NUM_DELTAS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct RoiConfig {
    /// Feature strides pooled per point, ascending.
    pub scales: Vec<usize>,
    /// Output widths of the pooling MLP; the last one is the token width.
    pub mlp_dims: Vec<usize>,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            scales: vec![1],
            mlp_dims: vec![256, 128],
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(
                "roi scales must be a non-empty list of positive strides".into(),
            ));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "roi scales must be strictly ascending".into(),
            ));
        }
        if self.mlp_dims.is_empty() || self.mlp_dims.contains(&0) {
            return Err(Error::Config(
                "roi mlp_dims must be a non-empty list of positive widths".into(),
            ));
        }
        Ok(())
    }

    pub fn model_dim(&self) -> usize {
        *self.mlp_dims.last().unwrap_or(&0)
    }

    /// Length of the concatenated vector fed to the MLP.
    pub fn pooled_len(&self, channels: usize) -> usize {
        ROI_POINTS * self.scales.len() * channels
    }
}

/// BEV center followed by the `+l`, `-l`, `+w`, `-w` face centers.
pub fn face_centers(b: &Box3D) -> [(f64, f64); ROI_POINTS] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let at = |a: f64, d: f64| (b.cx + a * c - d * s, b.cy + a * s + d * c);
    [
        at(0.0, 0.0),
        at(hl, 0.0),
        at(-hl, 0.0),
        at(0.0, hw),
        at(0.0, -hw),
    ]
}

/// Concatenated bilinear samples, `[N, 5 * |scales| * C]`, before the MLP.
pub fn pool_roi_features(
    proposals: &[Box3D],
    maps: &[FeatureMap],
    cfg: &RoiConfig,
    voxel: &VoxelConfig,
) -> Result<Tensor> {
    const OP: &str = "extract_roi_features";
    let mut chosen = Vec::with_capacity(cfg.scales.len());
    for &s in &cfg.scales {
        let map = maps
            .iter()
            .find(|m| m.stride == s)
            .ok_or_else(|| Error::invalid(OP, format!("no feature map at stride {s}")))?;
        chosen.push(map);
    }
    let channels = chosen[0].tensor.dims3(OP)?.0;
    for m in &chosen {
        check_dim(OP, "channels", channels, m.tensor.dims3(OP)?.0)?;
    }
    let precision = chosen[0].tensor.precision();
    let width = cfg.pooled_len(channels);
    let mut data = Vec::with_capacity(proposals.len() * width);
    for b in proposals {
        for (px, py) in face_centers(b) {
            for m in &chosen {
                let fx = (px - voxel.x_range.0) / (voxel.voxel_size[0] * m.stride as f64);
                let fy = (py - voxel.y_range.0) / (voxel.voxel_size[1] * m.stride as f64);
                data.extend_from_slice(bilinear_sample(&m.tensor, fx, fy)?.data());
            }
        }
    }
    Tensor::with_precision(vec![proposals.len(), width], data, precision)
}

/// Pooled face-center features passed through the MLP, `[N, model_dim]`.
pub fn extract_roi_features(
    proposals: &[Box3D],
    maps: &[FeatureMap],
    cfg: &RoiConfig,
    voxel: &VoxelConfig,
    mlp: &[Linear],
) -> Result<Tensor> {
    let pooled = pool_roi_features(proposals, maps, cfg, voxel)?;
    mlp_forward(&pooled, mlp)
}

/// Classification and regression layers shared by both second-stage heads.
#[derive(Debug, Clone, PartialEq)]
pub struct StageHeads {
    /// `[K, model_dim]`, followed by a sigmoid.
    pub cls: Linear,
    /// `[8, model_dim]`.
    pub reg: Linear,
}

fn apply_heads(tokens: &Tensor, heads: &StageHeads) -> Result<Vec<StagePrediction>> {
    const OP: &str = "stage_heads";
    check_dim(OP, "cls outputs", ObjectClass::COUNT, heads.cls.out_dim())?;
    check_dim(OP, "reg outputs", NUM_DELTAS, heads.reg.out_dim())?;
    let logits = heads.cls.forward(tokens)?;
    let deltas = heads.reg.forward(tokens)?;
    let n = tokens.shape()[0];
    Ok((0..n)
        .map(|i| {
            let mut class_scores = [0.0; ObjectClass::COUNT];
            for (s, &l) in class_scores.iter_mut().zip(logits.row(i)) {
                *s = sigmoid(l) as f64;
            }
            let mut d = [0.0; NUM_DELTAS];
            for (o, &v) in d.iter_mut().zip(deltas.row(i)) {
                *o = v as f64;
            }
            StagePrediction {
                class_scores,
                deltas: d,
            }
        })
        .collect())
}

/// Normalized BEV position of a box center over the detection range.
pub fn normalized_center(b: &Box3D, voxel: &VoxelConfig) -> (f64, f64) {
    (
        (b.cx - voxel.x_range.0) / (voxel.x_range.1 - voxel.x_range.0),
        (b.cy - voxel.y_range.0) / (voxel.y_range.1 - voxel.y_range.0),
    )
}

/// Adds each proposal's sine embedding to its ROI token, `[N, model_dim]`.
pub fn embed_tokens(
    roi: &Tensor,
    proposals: &[Box3D],
    att: &AttentionConfig,
    voxel: &VoxelConfig,
) -> Result<Tensor> {
    const OP: &str = "centeratt_forward";
    let (n, d) = roi.dims2(OP)?;
    check_dim(OP, "proposals", n, proposals.len())?;
    check_dim(OP, "pe_dim", d, att.pe_dim)?;
    let precision = roi.precision();
    let mut data = Vec::with_capacity(n * d);
    for (i, b) in proposals.iter().enumerate() {
        let pe = sine_position_embedding(normalized_center(b, voxel), att)?;
        data.extend(
            roi.row(i)
                .iter()
                .zip(pe.data())
                .map(|(r, p)| precision.round(r + precision.round(*p))),
        );
    }
    Tensor::with_precision(vec![n, d], data, precision)
}

/// Attention head: tokens are ROI features plus position embeddings, run through
/// the encoder layers, then classified (K sigmoids) and regressed (8 deltas).
pub fn centeratt_forward(
    roi: &Tensor,
    proposals: &[Box3D],
    att: &AttentionConfig,
    layers: &[AttentionWeights],
    heads: &StageHeads,
    voxel: &VoxelConfig,
) -> Result<Vec<StagePrediction>> {
    if proposals.is_empty() {
        return Err(Error::invalid(
            "centeratt_forward",
            "at least one proposal is required",
        ));
    }
    let mut tokens = embed_tokens(roi, proposals, att, voxel)?;
    for layer in layers {
        tokens = multi_head_self_attention(&tokens, att, layer)?;
    }
    apply_heads(&tokens, heads)
}

/// Face-center MLP head without proposal interaction.
pub fn baseline_forward(roi: &Tensor, heads: &StageHeads) -> Result<Vec<StagePrediction>> {
    roi.dims2("baseline_forward")?;
    apply_heads(roi, heads)
}

fn half_diagonal(b: &Box3D) -> f64 {
    b.l.hypot(b.w) / 2.0
}

/// Applies one set of deltas; class and score are kept.
pub fn refine_box(p: &Box3D, d: &[f64; NUM_DELTAS]) -> Box3D {
    let r = half_diagonal(p);
    let (s, c) = p.yaw.sin_cos();
    Box3D {
        cx: p.cx + d[0] * r,
        cy: p.cy + d[1] * r,
        cz: p.cz + d[2] * r,
        l: p.l * d[3].exp(),
        w: p.w * d[4].exp(),
        h: p.h * d[5].exp(),
        yaw: wrap_angle((s + d[6]).atan2(c + d[7])),
        ..*p
    }
}

pub fn refine_boxes(proposals: &[Box3D], deltas: &[[f64; NUM_DELTAS]]) -> Result<Vec<Box3D>> {
    check_dim("refine_boxes", "deltas", proposals.len(), deltas.len())?;
    Ok(proposals
        .iter()
        .zip(deltas)
        .map(|(p, d)| refine_box(p, d))
        .collect())
}

/// Inverse of [`refine_box`]: the deltas that move `p` onto `g`.
pub fn encode_deltas(p: &Box3D, g: &Box3D) -> [f64; NUM_DELTAS] {
    let r = half_diagonal(p);
    let (ps, pc) = p.yaw.sin_cos();
    let (gs, gc) = g.yaw.sin_cos();
    [
        (g.cx - p.cx) / r,
        (g.cy - p.cy) / r,
        (g.cz - p.cz) / r,
        (g.l / p.l).ln(),
        (g.w / p.w).ln(),
        (g.h / p.h).ln(),
        gs - ps,
        gc - pc,
    ]
}

/// Geometric mean of the two stage scores.
pub fn fuse_scores(stage1: f64, stage2: f64) -> f64 {
    (stage1 * stage2).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: (f64, f64), b: (f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12
    }

    #[test]
    fn axis_aligned_faces() {
        let b = Box3D::new([1.0, 2.0, 0.0], [4.0, 2.0, 1.0], 0.0, ObjectClass::Vehicle);
        let want = [(1.0, 2.0), (3.0, 2.0), (-1.0, 2.0), (1.0, 3.0), (1.0, 1.0)];
        for (got, want) in face_centers(&b).iter().zip(want) {
            assert!(close(*got, want), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn rotated_faces() {
        let b = Box3D::new(
            [1.0, 2.0, 0.0],
            [4.0, 2.0, 1.0],
            FRAC_PI_2,
            ObjectClass::Vehicle,
        );
        let want = [(1.0, 2.0), (1.0, 4.0), (1.0, 0.0), (0.0, 2.0), (2.0, 2.0)];
        for (got, want) in face_centers(&b).iter().zip(want) {
            assert!(close(*got, want), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn fusion() {
        assert_eq!(fuse_scores(1.0, 1.0), 1.0);
        assert_eq!(fuse_scores(0.3, 0.0), 0.0);
        assert!((fuse_scores(0.64, 0.81) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn zero_deltas_are_identity() {
        let p = Box3D::new(
            [3.0, -2.0, 0.5],
            [4.0, 1.8, 1.5],
            -2.7,
            ObjectClass::Cyclist,
        )
        .with_score(0.4);
        let r = refine_box(&p, &[0.0; 8]);
        assert_eq!(
            (r.cx, r.cy, r.cz, r.l, r.w, r.h),
            (p.cx, p.cy, p.cz, p.l, p.w, p.h)
        );
        assert!((r.yaw - p.yaw).abs() < 1e-12);
        assert_eq!((r.class, r.score), (p.class, p.score));
    }

    #[test]
    fn log_size_doubles() {
        let p = Box3D::new([0.0; 3], [4.0, 2.0, 1.0], 0.0, ObjectClass::Vehicle);
        let mut d = [0.0; 8];
        d[3] = std::f64::consts::LN_2;
        assert!((refine_box(&p, &d).l - 8.0).abs() < 1e-12);
    }

    #[test]
    fn encode_inverts_refine() {
        let p = Box3D::new([1.0, 2.0, -0.5], [4.0, 2.0, 1.5], 0.3, ObjectClass::Vehicle);
        let g = Box3D::new(
            [1.4, 1.7, -0.2],
            [4.4, 1.9, 1.6],
            0.45,
            ObjectClass::Vehicle,
        );
        let r = refine_box(&p, &encode_deltas(&p, &g));
        for (a, b) in [
            (r.cx, g.cx),
            (r.cy, g.cy),
            (r.cz, g.cz),
            (r.l, g.l),
            (r.w, g.w),
            (r.h, g.h),
            (r.yaw, g.yaw),
        ] {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
