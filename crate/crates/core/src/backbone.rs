//! Dense BEV backbone with a lateral + top-down neck, and the oracle stand-in
//! that emits ground-truth head maps instead of learned features.
//!
//! Stage `i` runs at stride `2^i`. Stage 0 holds `depth` conv-BN-ReLU blocks;
//! every later stage starts with a stride-2 `down` block followed by `depth`
//! blocks. Each stage output gets a 1x1 lateral `fpn.lateral{stride}` and the
//! neck merges them top-down (`P_i = L_i + up(P_{i+1})`). The stride-1 level is
//! the head's input.

use crate::error::{check_dim, Error, Result};
use crate::head::{encode_targets, HeadConfig};
use crate::scene::Box3D;
use crate::tensor::{batch_norm, conv2d, relu_inplace, upsample, Tensor, Upsample, WeightStore};
use crate::voxel::VoxelConfig;

/// Batch-norm epsilon used by every block.
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tensor: Tensor,
    /// BEV cells per feature cell.
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackboneMode {
    #[default]
    Learned,
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    /// Blocks per stage; the "backbone cut" knob.
    pub depth: usize,
    pub fpn_scales: Vec<usize>,
    pub out_channels: usize,
    pub upsample: Upsample,
    pub mode: BackboneMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            depth: 1,
            fpn_scales: vec![1, 2, 4],
            out_channels: 32,
            upsample: Upsample::Nearest,
            mode: BackboneMode::Learned,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "stage_channels must be a non-empty list of positive widths".into(),
            ));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be positive".into()));
        }
        if self.fpn_scales.first() != Some(&1) {
            return Err(Error::Config("fpn_scales must start with 1".into()));
        }
        if self.fpn_scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "fpn_scales must be strictly ascending".into(),
            ));
        }
        for &s in &self.fpn_scales {
            if !s.is_power_of_two() || s > self.max_stride() {
                return Err(Error::Config(format!(
                    "fpn scale {s} must be a power of two no larger than {}",
                    self.max_stride()
                )));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Stride of the deepest stage; BEV inputs are padded to a multiple of it.
    pub fn max_stride(&self) -> usize {
        1 << (self.num_stages() - 1)
    }

    /// Input channels of every stage block and the stage's output channels.
    pub fn stage_io(&self, in_channels: usize) -> Vec<(usize, usize)> {
        let mut c = in_channels;
        self.stage_channels
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let has_blocks = i > 0 || self.depth > 0;
                let io = (c, if has_blocks { out } else { c });
                c = io.1;
                io
            })
            .collect()
    }

    /// `(name prefix, in, out, stride)` of every conv block in execution order.
    pub fn blocks(&self, in_channels: usize) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        for (i, (cin, cout)) in self.stage_io(in_channels).into_iter().enumerate() {
            let mut c = cin;
            if i > 0 {
                out.push((format!("backbone.stage{i}.down"), c, cout, 2));
                c = cout;
            }
            for j in 0..self.depth {
                out.push((format!("backbone.stage{i}.block{j}"), c, cout, 1));
                c = cout;
            }
        }
        out
    }
}

/// Zero-pads `[C, H, W]` at the bottom/right so both sides divide `multiple`.
pub fn pad_to_multiple(t: &Tensor, multiple: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3("pad_to_multiple")?;
    let (ph, pw) = (
        h.div_ceil(multiple) * multiple,
        w.div_ceil(multiple) * multiple,
    );
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let mut data = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            let src = &t.plane(ch)[y * w..(y + 1) * w];
            data[(ch * ph + y) * pw..(ch * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Tensor::with_precision(vec![c, ph, pw], data, t.precision())
}

/// conv3x3 (+ batch norm when its statistics are stored) + ReLU.
pub fn conv_block(
    x: &Tensor,
    weights: &WeightStore,
    prefix: &str,
    stride: usize,
) -> Result<Tensor> {
    let w = weights.require(&format!("{prefix}.conv.weight"))?;
    let b = weights.require(&format!("{prefix}.conv.bias"))?;
    let pad = w.shape().get(2).copied().unwrap_or(1) / 2;
    let mut y = conv2d(x, w, b, stride, pad)?;
    if let Some(bn) = weights.batch_norm(&format!("{prefix}.bn"))? {
        y = batch_norm(&y, &bn, BN_EPS)?;
    }
    relu_inplace(&mut y);
    Ok(y)
}

/// Output of every stage, stride `2^i`.
pub fn backbone_stages(
    bev: &Tensor,
    cfg: &BackboneConfig,
    weights: &WeightStore,
) -> Result<Vec<Tensor>> {
    let (c_in, h, w) = bev.dims3("backbone_forward")?;
    let m = cfg.max_stride();
    if h % m != 0 || w % m != 0 {
        return Err(Error::invalid(
            "backbone_forward",
            format!("input {h}x{w} is not padded to a multiple of {m}"),
        ));
    }
    let mut x = bev.clone();
    let mut outs = Vec::with_capacity(cfg.num_stages());
    for (i, _) in cfg.stage_io(c_in).into_iter().enumerate() {
        if i > 0 {
            x = conv_block(&x, weights, &format!("backbone.stage{i}.down"), 2)?;
        }
        for j in 0..cfg.depth {
            x = conv_block(&x, weights, &format!("backbone.stage{i}.block{j}"), 1)?;
        }
        outs.push(x.clone());
    }
    Ok(outs)
}

/// Neck outputs `P_i` for every stage, stride `2^i`.
fn neck(stages: &[Tensor], cfg: &BackboneConfig, weights: &WeightStore) -> Result<Vec<Tensor>> {
    let lateral = |i: usize, x: &Tensor| -> Result<Tensor> {
        let name = format!("fpn.lateral{}", 1usize << i);
        let w = weights.require(&format!("{name}.weight"))?;
        let b = weights.require(&format!("{name}.bias"))?;
        check_dim(
            "fpn_forward",
            "lateral out_channels",
            cfg.out_channels,
            w.shape()[0],
        )?;
        conv2d(x, w, b, 1, 0)
    };
    let n = stages.len();
    let mut levels = vec![None; n];
    let mut top = lateral(n - 1, &stages[n - 1])?;
    levels[n - 1] = Some(top.clone());
    for i in (0..n - 1).rev() {
        top = lateral(i, &stages[i])?.add(&upsample(&top, 2, cfg.upsample)?)?;
        levels[i] = Some(top.clone());
    }
    Ok(levels
        .into_iter()
        .map(|l| l.expect("every level filled"))
        .collect())
}

/// Stride-1 feature map for the head.
pub fn backbone_forward(
    bev: &Tensor,
    cfg: &BackboneConfig,
    weights: &WeightStore,
) -> Result<FeatureMap> {
    let stages = backbone_stages(bev, cfg, weights)?;
    let tensor = neck(&stages, cfg, weights)?.swap_remove(0);
    Ok(FeatureMap { tensor, stride: 1 })
}

/// One map per configured FPN stride, ordered by stride.
pub fn fpn_forward(
    bev: &Tensor,
    cfg: &BackboneConfig,
    weights: &WeightStore,
) -> Result<Vec<FeatureMap>> {
    let stages = backbone_stages(bev, cfg, weights)?;
    let levels = neck(&stages, cfg, weights)?;
    Ok(cfg
        .fpn_scales
        .iter()
        .map(|&s| FeatureMap {
            tensor: levels[s.trailing_zeros() as usize].clone(),
            stride: s,
        })
        .collect())
}

/// Mean over non-overlapping `factor x factor` windows.
pub fn avg_pool(t: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3("avg_pool")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(
            "avg_pool",
            format!("{h}x{w} does not divide by {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for y in oy * factor..(oy + 1) * factor {
                    for x in ox * factor..(ox + 1) * factor {
                        acc += t.at3(ch, y, x);
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    Tensor::with_precision(vec![c, oh, ow], out, t.precision())
}

/// Ground-truth feature maps: the stride-1 map is the encoded head map (padded
/// like a learned input), coarser strides are its average pools.
pub fn oracle_forward(
    boxes: &[Box3D],
    cfg: &BackboneConfig,
    head: &HeadConfig,
    voxel: &VoxelConfig,
) -> Result<Vec<FeatureMap>> {
    let base = pad_to_multiple(
        &encode_targets(boxes, head, voxel)?.to_head_map(),
        cfg.max_stride(),
    )?;
    cfg.fpn_scales
        .iter()
        .map(|&s| {
            Ok(FeatureMap {
                tensor: if s == 1 {
                    base.clone()
                } else {
                    avg_pool(&base, s)?
                },
                stride: s,
            })
        })
        .collect()
}
