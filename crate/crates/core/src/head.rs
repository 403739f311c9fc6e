//! First-stage center head: Gaussian heatmap targets, peak decoding and box
//! decoding from the dense regression planes.
//!
//! A head map is `[K + 8, H, W]`: K class heatmaps, then sub-cell offset
//! (dx, dy), z, log size (l, w, h) and (sin yaw, cos yaw). The oracle backbone
//! emits exactly this layout, so learned and oracle runs share one decoder.

use crate::error::{check_dim, Error, Result};
use crate::scene::{wrap_angle, Box3D, ObjectClass};
use crate::tensor::{conv2d, sigmoid, Precision, Tensor, WeightStore};
use crate::voxel::VoxelConfig;

pub const NUM_CLASSES: usize = ObjectClass::COUNT;
pub const OFFSET_CH: usize = NUM_CLASSES;
pub const Z_CH: usize = NUM_CLASSES + 2;
pub const SIZE_CH: usize = NUM_CLASSES + 3;
pub const ROT_CH: usize = NUM_CLASSES + 6;
pub const HEAD_CHANNELS: usize = NUM_CLASSES + 8;
/// Regression channels produced by the learned head.
pub const REG_CHANNELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub max_proposals: usize,
    pub score_threshold: f64,
    pub min_gaussian_radius: usize,
    pub gaussian_overlap: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            num_classes: NUM_CLASSES,
            max_proposals: 128,
            score_threshold: 0.1,
            min_gaussian_radius: 2,
            gaussian_overlap: 0.1,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be {NUM_CLASSES}")));
        }
        if !(self.score_threshold > 0.0 && self.score_threshold < 1.0) {
            return Err(Error::Config(
                "head score_threshold must lie in (0, 1)".into(),
            ));
        }
        if self.max_proposals == 0 {
            return Err(Error::Config("max_proposals must be at least 1".into()));
        }
        if !(self.gaussian_overlap > 0.0 && self.gaussian_overlap < 1.0) {
            return Err(Error::Config("gaussian_overlap must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Smallest radius (in cells) at which a corner-shifted footprint still
/// reaches IoU `overlap`, taking the minimum of the three quadratic cases.
pub fn gaussian_radius(l_cells: f64, w_cells: f64, overlap: f64) -> f64 {
    let (h, w) = (l_cells, w_cells);

    let b1 = h + w;
    let c1 = w * h * (1.0 - overlap) / (1.0 + overlap);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;

    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - overlap) * w * h;
    let r2 = (b2 + (b2 * b2 - 4.0 * a2 * c2).sqrt()) / 2.0;

    let a3 = 4.0 * overlap;
    let b3 = -2.0 * overlap * (h + w);
    let c3 = (overlap - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;

    r1.min(r2).min(r3)
}

/// Integer splat radius: the floored quadratic radius, at least the minimum.
pub fn splat_radius(l_cells: f64, w_cells: f64, cfg: &HeadConfig) -> usize {
    let r = gaussian_radius(l_cells, w_cells, cfg.gaussian_overlap).floor();
    (r.max(0.0) as usize).max(cfg.min_gaussian_radius)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTargets {
    /// `[K, H, W]` in `[0, 1]`.
    pub heatmap: Tensor,
    /// `[2, H, W]` sub-cell offsets.
    pub offset: Tensor,
    /// `[1, H, W]` box center height in meters.
    pub z: Tensor,
    /// `[3, H, W]` log of (l, w, h).
    pub size: Tensor,
    /// `[2, H, W]` (sin yaw, cos yaw).
    pub rot: Tensor,
    /// Row-major `H * W` flags marking cells that carry regression targets.
    pub mask: Vec<bool>,
}

impl HeatmapTargets {
    /// Stacks all planes into the `[K + 8, H, W]` head layout.
    pub fn to_head_map(&self) -> Tensor {
        Tensor::concat_channels(&[&self.heatmap, &self.offset, &self.z, &self.size, &self.rot])
            .expect("target planes share spatial dims")
    }
}

/// Renders Gaussian heatmaps (max-combined per class) and writes regression
/// targets at each box's center cell. Boxes centered outside the grid are skipped.
pub fn encode_targets(
    boxes: &[Box3D],
    cfg: &HeadConfig,
    voxel: &VoxelConfig,
) -> Result<HeatmapTargets> {
    let (nx, ny, _) = voxel.dims()?;
    let mut heatmap = Tensor::zeros(&[NUM_CLASSES, ny, nx]);
    let mut offset = Tensor::zeros(&[2, ny, nx]);
    let mut z = Tensor::zeros(&[1, ny, nx]);
    let mut size = Tensor::zeros(&[3, ny, nx]);
    let mut rot = Tensor::zeros(&[2, ny, nx]);
    let mut mask = vec![false; nx * ny];
    let [vx, vy, _] = voxel.voxel_size;

    for b in boxes {
        let u = (b.cx - voxel.x_range.0) / vx;
        let v = (b.cy - voxel.y_range.0) / vy;
        if !(u >= 0.0 && v >= 0.0 && u < nx as f64 && v < ny as f64) {
            continue;
        }
        let (ix, iy) = (u.floor() as usize, v.floor() as usize);
        let radius = splat_radius(b.l / vx, b.w / vy, cfg);
        let sigma = radius as f64 / 3.0;
        let ch = b.class.index();
        let r = radius as isize;
        for dy in -r..=r {
            let y = iy as isize + dy;
            if y < 0 || y >= ny as isize {
                continue;
            }
            for dx in -r..=r {
                let x = ix as isize + dx;
                if x < 0 || x >= nx as isize {
                    continue;
                }
                let g = gaussian_value((dx * dx + dy * dy) as f64, sigma) as f32;
                let (x, y) = (x as usize, y as usize);
                if g > heatmap.at3(ch, y, x) {
                    heatmap.set3(ch, y, x, g);
                }
            }
        }
        offset.set3(0, iy, ix, (u - ix as f64) as f32);
        offset.set3(1, iy, ix, (v - iy as f64) as f32);
        z.set3(0, iy, ix, b.cz as f32);
        size.set3(0, iy, ix, b.l.ln() as f32);
        size.set3(1, iy, ix, b.w.ln() as f32);
        size.set3(2, iy, ix, b.h.ln() as f32);
        let (s, c) = b.yaw.sin_cos();
        rot.set3(0, iy, ix, s as f32);
        rot.set3(1, iy, ix, c as f32);
        mask[iy * nx + ix] = true;
    }
    Ok(HeatmapTargets {
        heatmap,
        offset,
        z,
        size,
        rot,
        mask,
    })
}

/// `exp(-d^2 / (2 sigma^2))` for a squared distance `d2`.
pub fn gaussian_value(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class: ObjectClass,
    pub row: usize,
    pub col: usize,
    pub score: f32,
}

/// Local maxima of each class channel over 3x3 windows.
///
/// Equal values inside a window go to the smallest row-major index. Peaks
/// below the threshold are dropped; the rest are sorted by descending score,
/// then class, then row-major cell, and truncated to `max_proposals`.
pub fn decode_peaks(heatmap: &Tensor, cfg: &HeadConfig) -> Result<Vec<Peak>> {
    let (k, h, w) = heatmap.dims3("decode_peaks")?;
    if k < NUM_CLASSES {
        return Err(Error::Shape {
            op: "decode_peaks",
            dim: "classes",
            expected: NUM_CLASSES,
            got: k,
        });
    }
    let threshold = cfg.score_threshold;
    let mut peaks = Vec::new();
    for (ci, class) in ObjectClass::ALL.into_iter().enumerate() {
        let plane = heatmap.plane(ci);
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let v = plane[idx];
                if !(v as f64 >= threshold) {
                    continue;
                }
                let mut is_peak = true;
                'window: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let nidx = ny * w + nx;
                        let nv = plane[nidx];
                        if nv > v || (nv == v && nidx < idx) {
                            is_peak = false;
                            break 'window;
                        }
                    }
                }
                if is_peak {
                    peaks.push(Peak {
                        class,
                        row: y,
                        col: x,
                        score: v,
                    });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.class.index().cmp(&b.class.index()))
            .then((a.row, a.col).cmp(&(b.row, b.col)))
    });
    peaks.truncate(cfg.max_proposals);
    Ok(peaks)
}

/// Reads the regression planes of a head map at every peak.
pub fn decode_boxes(peaks: &[Peak], head_map: &Tensor, voxel: &VoxelConfig) -> Result<Vec<Box3D>> {
    let (c, h, w) = head_map.dims3("decode_boxes")?;
    check_dim("decode_boxes", "head channels", HEAD_CHANNELS, c)?;
    let [vx, vy, _] = voxel.voxel_size;
    peaks
        .iter()
        .map(|p| {
            if p.row >= h || p.col >= w {
                return Err(Error::invalid(
                    "decode_boxes",
                    format!("peak ({}, {}) outside the map", p.row, p.col),
                ));
            }
            let at = |ch: usize| head_map.at3(ch, p.row, p.col) as f64;
            let cx = (p.col as f64 + at(OFFSET_CH)) * vx + voxel.x_range.0;
            let cy = (p.row as f64 + at(OFFSET_CH + 1)) * vy + voxel.y_range.0;
            Ok(Box3D {
                cx,
                cy,
                cz: at(Z_CH),
                l: at(SIZE_CH).exp(),
                w: at(SIZE_CH + 1).exp(),
                h: at(SIZE_CH + 2).exp(),
                yaw: wrap_angle(at(ROT_CH).atan2(at(ROT_CH + 1))),
                class: p.class,
                score: p.score as f64,
            })
        })
        .collect()
}

/// Learned head: two 1x1 convolutions (`head.heatmap` with a sigmoid and
/// `head.regression`) over the stride-1 features, stacked into a head map.
pub fn head_forward(features: &Tensor, weights: &WeightStore) -> Result<Tensor> {
    let hm_w = weights.require("head.heatmap.weight")?;
    let hm_b = weights.require("head.heatmap.bias")?;
    let reg_w = weights.require("head.regression.weight")?;
    let reg_b = weights.require("head.regression.bias")?;
    check_dim(
        "head_forward",
        "heatmap outputs",
        NUM_CLASSES,
        hm_w.shape()[0],
    )?;
    check_dim(
        "head_forward",
        "regression outputs",
        REG_CHANNELS,
        reg_w.shape()[0],
    )?;
    let mut heat = conv2d(features, hm_w, hm_b, 1, 0)?;
    let precision: Precision = heat.precision();
    heat.data_mut()
        .iter_mut()
        .for_each(|v| *v = precision.round(sigmoid(*v)));
    let reg = conv2d(features, reg_w, reg_b, 1, 0)?;
    Tensor::concat_channels(&[&heat, &reg])
}
