//! Pipeline configuration and its flat `key = value` text format.
//!
//! Blank lines and everything after `#` are ignored. Lists are comma
//! separated. Unknown or repeated keys are errors, missing keys keep their
//! defaults. [`PipelineConfig::to_text`] writes every key with its value.

use std::collections::BTreeSet;
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneMode};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::head::{HeadConfig, HEAD_CHANNELS};
use crate::matching::{IouMode, MatchConfig};
use crate::roi::RoiConfig;
use crate::scene::SceneConfig;
use crate::tensor::{AttentionConfig, Precision, Upsample};
use crate::voxel::VoxelConfig;

/// Default half extent of the desk-scale BEV window, in meters.
pub const DESK_HALF_EXTENT: f64 = 25.6;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub voxel: VoxelConfig,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Pooling setup of FPN variants; single-scale variants pool stride 1 only.
    pub roi: RoiConfig,
    pub attention: AttentionConfig,
    pub matching: MatchConfig,
    pub eval: EvalConfig,
    pub precision: Precision,
    pub scene: SceneConfig,
    /// Final detections need a score strictly above this.
    pub score_threshold: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let voxel = VoxelConfig::desk(DESK_HALF_EXTENT);
        Self {
            voxel,
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            roi: RoiConfig {
                scales: vec![1, 2, 4],
                ..RoiConfig::default()
            },
            attention: AttentionConfig::default(),
            matching: MatchConfig::default(),
            eval: EvalConfig::default(),
            precision: Precision::Fp32,
            scene: SceneConfig {
                x_range: voxel.x_range,
                y_range: voxel.y_range,
                ..SceneConfig::default()
            },
            score_threshold: 0.1,
            seed: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("`{key}` needs two values"))),
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn iou_mode_name(m: IouMode) -> &'static str {
    match m {
        IouMode::Bev => "bev",
        IouMode::ThreeD => "3d",
    }
}

fn parse_iou_mode(key: &str, v: &str) -> Result<IouMode> {
    match v {
        "bev" => Ok(IouMode::Bev),
        "3d" => Ok(IouMode::ThreeD),
        _ => Err(Error::Config(format!(
            "`{key}` must be `bev` or `3d`, got `{v}`"
        ))),
    }
}

impl PipelineConfig {
    pub fn mode(&self) -> BackboneMode {
        self.backbone.mode
    }

    /// Channels of the maps the second stage pools from.
    pub fn feature_channels(&self) -> usize {
        match self.backbone.mode {
            BackboneMode::Learned => self.backbone.out_channels,
            BackboneMode::Oracle => HEAD_CHANNELS,
        }
    }

    /// Pooling setup for single-scale (`fpn = false`) or FPN variants.
    pub fn roi_for(&self, fpn: bool) -> RoiConfig {
        RoiConfig {
            scales: if fpn {
                self.roi.scales.clone()
            } else {
                vec![1]
            },
            mlp_dims: self.roi.mlp_dims.clone(),
        }
    }

    /// Per-module checks plus the cross-module constraints.
    pub fn validate(&self) -> Result<()> {
        self.voxel.validate()?;
        self.backbone.validate()?;
        self.head.validate()?;
        self.roi.validate()?;
        self.attention.validate()?;
        self.matching.validate()?;
        self.eval.validate()?;
        if let Some(s) = self
            .roi
            .scales
            .iter()
            .find(|s| !self.backbone.fpn_scales.contains(s))
        {
            return Err(Error::Config(format!(
                "roi scale {s} is not among backbone.fpn_scales"
            )));
        }
        if !self.roi.scales.contains(&1) {
            return Err(Error::Config("roi.scales must include stride 1".into()));
        }
        if self.roi.model_dim() != self.attention.model_dim {
            return Err(Error::Config(format!(
                "last roi.mlp_dims entry {} must equal attention.model_dim {}",
                self.roi.model_dim(),
                self.attention.model_dim
            )));
        }
        if self.attention.pe_dim != self.attention.model_dim {
            return Err(Error::Config(
                "attention.pe_dim must equal attention.model_dim".into(),
            ));
        }
        if self.attention.num_layers == 0 {
            return Err(Error::Config(
                "attention.num_layers must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config("score_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    i + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        // The scene window follows the voxel window unless set explicitly.
        if !seen.contains("scene.x_range") {
            cfg.scene.x_range = cfg.voxel.x_range;
        }
        if !seen.contains("scene.y_range") {
            cfg.scene.y_range = cfg.voxel.y_range;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "mode" => {
                self.backbone.mode = match v {
                    "learned" => BackboneMode::Learned,
                    "oracle" => BackboneMode::Oracle,
                    _ => {
                        return Err(Error::Config(format!(
                            "`mode` must be `learned` or `oracle`, got `{v}`"
                        )))
                    }
                }
            }
            "precision" => {
                self.precision = match v {
                    "fp32" => Precision::Fp32,
                    "fp16" => Precision::Fp16E,
                    _ => {
                        return Err(Error::Config(format!(
                            "`precision` must be `fp32` or `fp16`, got `{v}`"
                        )))
                    }
                }
            }
            "score_threshold" => self.score_threshold = parse_num(key, v)?,

            "voxel.x_range" => self.voxel.x_range = parse_pair(key, v)?,
            "voxel.y_range" => self.voxel.y_range = parse_pair(key, v)?,
            "voxel.z_range" => self.voxel.z_range = parse_pair(key, v)?,
            "voxel.size" => {
                self.voxel.voxel_size = parse_list::<f64>(key, v)?
                    .try_into()
                    .map_err(|_| Error::Config("`voxel.size` needs three values".into()))?
            }

            "backbone.stage_channels" => self.backbone.stage_channels = parse_list(key, v)?,
            "backbone.depth" => self.backbone.depth = parse_num(key, v)?,
            "backbone.fpn_scales" => self.backbone.fpn_scales = parse_list(key, v)?,
            "backbone.out_channels" => self.backbone.out_channels = parse_num(key, v)?,
            "backbone.upsample" => {
                self.backbone.upsample = match v {
                    "nearest" => Upsample::Nearest,
                    "bilinear" => Upsample::Bilinear,
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}` must be `nearest` or `bilinear`"
                        )))
                    }
                }
            }

            "head.max_proposals" => self.head.max_proposals = parse_num(key, v)?,
            "head.score_threshold" => self.head.score_threshold = parse_num(key, v)?,
            "head.min_gaussian_radius" => self.head.min_gaussian_radius = parse_num(key, v)?,
            "head.gaussian_overlap" => self.head.gaussian_overlap = parse_num(key, v)?,

            "roi.scales" => self.roi.scales = parse_list(key, v)?,
            "roi.mlp_dims" => self.roi.mlp_dims = parse_list(key, v)?,

            "attention.num_heads" => self.attention.num_heads = parse_num(key, v)?,
            "attention.model_dim" => self.attention.model_dim = parse_num(key, v)?,
            "attention.ffn_dim" => self.attention.ffn_dim = parse_num(key, v)?,
            "attention.pe_dim" => self.attention.pe_dim = parse_num(key, v)?,
            "attention.num_layers" => self.attention.num_layers = parse_num(key, v)?,

            "match.lambda_cls" => self.matching.lambda_cls = parse_num(key, v)?,
            "match.lambda_iou" => self.matching.lambda_iou = parse_num(key, v)?,
            "match.iou_mode" => self.matching.iou_mode = parse_iou_mode(key, v)?,

            "eval.iou_vehicle" => self.eval.iou_thresholds[0] = parse_num(key, v)?,
            "eval.iou_pedestrian" => self.eval.iou_thresholds[1] = parse_num(key, v)?,
            "eval.iou_cyclist" => self.eval.iou_thresholds[2] = parse_num(key, v)?,
            "eval.iou_mode" => self.eval.iou_mode = parse_iou_mode(key, v)?,

            "scene.vehicles" => self.scene.objects_per_class[0] = parse_num(key, v)?,
            "scene.pedestrians" => self.scene.objects_per_class[1] = parse_num(key, v)?,
            "scene.cyclists" => self.scene.objects_per_class[2] = parse_num(key, v)?,
            "scene.points_per_object" => self.scene.points_per_object = parse_num(key, v)?,
            "scene.background_points" => self.scene.background_points = parse_num(key, v)?,
            "scene.x_range" => self.scene.x_range = parse_pair(key, v)?,
            "scene.y_range" => self.scene.y_range = parse_pair(key, v)?,
            "scene.ground_z" => self.scene.ground_z = parse_num(key, v)?,
            "scene.noise" => self.scene.noise = parse_num(key, v)?,
            "scene.max_retries" => self.scene.max_retries = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let c = self;
        let pair = |p: (f64, f64)| format!("{}, {}", p.0, p.1);
        let lines = [
            format!("seed = {}", c.seed),
            format!(
                "mode = {}",
                match c.backbone.mode {
                    BackboneMode::Learned => "learned",
                    BackboneMode::Oracle => "oracle",
                }
            ),
            format!(
                "precision = {}",
                match c.precision {
                    Precision::Fp32 => "fp32",
                    Precision::Fp16E => "fp16",
                }
            ),
            format!("score_threshold = {}", c.score_threshold),
            format!("voxel.x_range = {}", pair(c.voxel.x_range)),
            format!("voxel.y_range = {}", pair(c.voxel.y_range)),
            format!("voxel.z_range = {}", pair(c.voxel.z_range)),
            format!("voxel.size = {}", join(&c.voxel.voxel_size)),
            format!(
                "backbone.stage_channels = {}",
                join(&c.backbone.stage_channels)
            ),
            format!("backbone.depth = {}", c.backbone.depth),
            format!("backbone.fpn_scales = {}", join(&c.backbone.fpn_scales)),
            format!("backbone.out_channels = {}", c.backbone.out_channels),
            format!(
                "backbone.upsample = {}",
                match c.backbone.upsample {
                    Upsample::Nearest => "nearest",
                    Upsample::Bilinear => "bilinear",
                }
            ),
            format!("head.max_proposals = {}", c.head.max_proposals),
            format!("head.score_threshold = {}", c.head.score_threshold),
            format!("head.min_gaussian_radius = {}", c.head.min_gaussian_radius),
            format!("head.gaussian_overlap = {}", c.head.gaussian_overlap),
            format!("roi.scales = {}", join(&c.roi.scales)),
            format!("roi.mlp_dims = {}", join(&c.roi.mlp_dims)),
            format!("attention.num_heads = {}", c.attention.num_heads),
            format!("attention.model_dim = {}", c.attention.model_dim),
            format!("attention.ffn_dim = {}", c.attention.ffn_dim),
            format!("attention.pe_dim = {}", c.attention.pe_dim),
            format!("attention.num_layers = {}", c.attention.num_layers),
            format!("match.lambda_cls = {}", c.matching.lambda_cls),
            format!("match.lambda_iou = {}", c.matching.lambda_iou),
            format!("match.iou_mode = {}", iou_mode_name(c.matching.iou_mode)),
            format!("eval.iou_vehicle = {}", c.eval.iou_thresholds[0]),
            format!("eval.iou_pedestrian = {}", c.eval.iou_thresholds[1]),
            format!("eval.iou_cyclist = {}", c.eval.iou_thresholds[2]),
            format!("eval.iou_mode = {}", iou_mode_name(c.eval.iou_mode)),
            format!("scene.vehicles = {}", c.scene.objects_per_class[0]),
            format!("scene.pedestrians = {}", c.scene.objects_per_class[1]),
            format!("scene.cyclists = {}", c.scene.objects_per_class[2]),
            format!("scene.points_per_object = {}", c.scene.points_per_object),
            format!("scene.background_points = {}", c.scene.background_points),
            format!("scene.x_range = {}", pair(c.scene.x_range)),
            format!("scene.y_range = {}", pair(c.scene.y_range)),
            format!("scene.ground_z = {}", c.scene.ground_z),
            format!("scene.noise = {}", c.scene.noise),
            format!("scene.max_retries = {}", c.scene.max_retries),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Scene generation settings for the `index`-th scene of a dataset.
    pub fn scene_config(&self, seed: u64) -> SceneConfig {
        SceneConfig {
            seed,
            ..self.scene.clone()
        }
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
