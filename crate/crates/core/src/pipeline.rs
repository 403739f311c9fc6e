//! End-to-end detection: points to BEV, first-stage proposals, optional
//! second-stage refinement, split at the five latency stage boundaries.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_forward, fpn_forward, oracle_forward, pad_to_multiple, BackboneMode, FeatureMap,
};
use crate::bench::{Stage, StagedPipeline};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::head::{
    decode_boxes, decode_peaks, head_forward, HEAD_CHANNELS, NUM_CLASSES, REG_CHANNELS,
};
use crate::optimize::{convert_pipeline_precision, fold_store_batchnorm};
use crate::roi::{
    baseline_forward, centeratt_forward, extract_roi_features, fuse_scores, refine_box, StageHeads,
};
use crate::scene::{read_labels, read_point_cloud, Box3D, ManifestEntry, Point};
use crate::tensor::{Activation, AttentionWeights, Linear, Precision, Tensor, WeightStore};
use crate::voxel::{bev_encode, voxelize, BEV_CHANNELS};

/// Second-stage architecture, the cells of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    /// Attention head instead of the per-proposal MLP head.
    pub attention: bool,
    /// Multi-scale ROI pooling.
    pub fpn: bool,
}

impl Variant {
    pub const BASELINE: Variant = Variant {
        attention: false,
        fpn: false,
    };
    pub const CENTERATT: Variant = Variant {
        attention: true,
        fpn: false,
    };
    pub const FPN: Variant = Variant {
        attention: false,
        fpn: true,
    };
    pub const CENTERATT_FPN: Variant = Variant {
        attention: true,
        fpn: true,
    };
    pub const ALL: [Variant; 4] = [
        Self::BASELINE,
        Self::CENTERATT,
        Self::FPN,
        Self::CENTERATT_FPN,
    ];

    pub fn name(self) -> &'static str {
        match (self.attention, self.fpn) {
            (false, false) => "baseline",
            (true, false) => "centeratt",
            (false, true) => "fpn",
            (true, true) => "centeratt+fpn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant `{s}` (baseline, centeratt, fpn, centeratt+fpn)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub variant: Variant,
    pub second_stage: bool,
    pub precision: Precision,
    pub fold_bn: bool,
    /// Final detections need a score strictly above this.
    pub score_threshold: f64,
}

impl RunOptions {
    pub fn from_config(cfg: &PipelineConfig, variant: Variant) -> Self {
        Self {
            variant,
            second_stage: true,
            precision: cfg.precision,
            fold_bn: false,
            score_threshold: cfg.score_threshold,
        }
    }

    /// Short label such as `centeratt+fpn/fp16/fold-bn`.
    pub fn label(&self) -> String {
        let mut s = if self.second_stage {
            self.variant.name().to_string()
        } else {
            "first-stage".to_string()
        };
        if self.precision == Precision::Fp16E {
            s.push_str("/fp16");
        }
        if self.fold_bn {
            s.push_str("/fold-bn");
        }
        s
    }
}

/// Weight-name prefix of the pooling MLP for single- or multi-scale pooling.
fn roi_prefix(fpn: bool) -> &'static str {
    if fpn {
        "roi.fpn"
    } else {
        "roi.single"
    }
}

fn head_prefix(attention: bool) -> &'static str {
    if attention {
        "stage2.att"
    } else {
        "stage2.mlp"
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..=bound) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

fn insert_linear(
    store: &mut WeightStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    inp: usize,
    zero: bool,
) {
    let bound = 1.0 / (inp.max(1) as f64).sqrt();
    let w = if zero {
        Tensor::zeros(&[out, inp])
    } else {
        uniform(rng, &[out, inp], bound)
    };
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

fn insert_conv(
    store: &mut WeightStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
) {
    let bound = 1.0 / ((inp * k * k).max(1) as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        uniform(rng, &[out, inp, k, k], bound),
    );
    store.insert(format!("{name}.bias"), uniform(rng, &[out], bound));
}

/// Deterministic weights for every variant of `cfg`.
///
/// Second-stage regression layers start at zero, so an untrained second stage
/// leaves proposal geometry unchanged.
pub fn init_weights(cfg: &PipelineConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = WeightStore::new();

    for (name, cin, cout, _) in cfg.backbone.blocks(BEV_CHANNELS) {
        insert_conv(&mut s, &mut rng, &format!("{name}.conv"), cout, cin, 3);
        let ch = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let v = (0..cout).map(|_| rng.gen_range(lo..hi) as f32).collect();
            Tensor::new(vec![cout], v).expect("length matches")
        };
        let gamma = ch(&mut rng, 0.5, 1.5);
        let beta = ch(&mut rng, -0.1, 0.1);
        let mean = ch(&mut rng, -0.1, 0.1);
        let var = ch(&mut rng, 0.5, 1.5);
        s.insert(format!("{name}.bn.gamma"), gamma);
        s.insert(format!("{name}.bn.beta"), beta);
        s.insert(format!("{name}.bn.mean"), mean);
        s.insert(format!("{name}.bn.var"), var);
    }
    for (i, (_, cout)) in cfg.backbone.stage_io(BEV_CHANNELS).into_iter().enumerate() {
        insert_conv(
            &mut s,
            &mut rng,
            &format!("fpn.lateral{}", 1usize << i),
            cfg.backbone.out_channels,
            cout,
            1,
        );
    }
    insert_conv(
        &mut s,
        &mut rng,
        "head.heatmap",
        NUM_CLASSES,
        cfg.backbone.out_channels,
        1,
    );
    insert_conv(
        &mut s,
        &mut rng,
        "head.regression",
        REG_CHANNELS,
        cfg.backbone.out_channels,
        1,
    );

    let c = cfg.feature_channels();
    for fpn in [false, true] {
        let roi = cfg.roi_for(fpn);
        let mut inp = roi.pooled_len(c);
        for (i, &out) in roi.mlp_dims.iter().enumerate() {
            insert_linear(
                &mut s,
                &mut rng,
                &format!("{}.mlp{i}", roi_prefix(fpn)),
                out,
                inp,
                false,
            );
            inp = out;
        }
    }

    let d = cfg.attention.model_dim;
    for l in 0..cfg.attention.num_layers {
        let p = format!("stage2.att.layer{l}");
        for proj in ["query", "key", "value", "output"] {
            insert_linear(&mut s, &mut rng, &format!("{p}.{proj}"), d, d, false);
        }
        insert_linear(
            &mut s,
            &mut rng,
            &format!("{p}.ffn_in"),
            cfg.attention.ffn_dim,
            d,
            false,
        );
        insert_linear(
            &mut s,
            &mut rng,
            &format!("{p}.ffn_out"),
            d,
            cfg.attention.ffn_dim,
            false,
        );
        for norm in ["norm1", "norm2"] {
            s.insert(format!("{p}.{norm}.gamma"), Tensor::filled(&[d], 1.0));
            s.insert(format!("{p}.{norm}.beta"), Tensor::zeros(&[d]));
        }
    }
    for attention in [false, true] {
        let p = head_prefix(attention);
        insert_linear(&mut s, &mut rng, &format!("{p}.cls"), NUM_CLASSES, d, false);
        insert_linear(&mut s, &mut rng, &format!("{p}.reg"), REG_CHANNELS, d, true);
    }
    Ok(s)
}

fn attention_layer(store: &WeightStore, l: usize) -> Result<AttentionWeights> {
    let p = format!("stage2.att.layer{l}");
    let lin = |n: &str| store.linear(&format!("{p}.{n}"), Activation::None);
    let get = |n: &str| store.require(&format!("{p}.{n}")).cloned();
    Ok(AttentionWeights {
        query: lin("query")?,
        key: lin("key")?,
        value: lin("value")?,
        output: lin("output")?,
        norm1_gamma: get("norm1.gamma")?,
        norm1_beta: get("norm1.beta")?,
        ffn_in: lin("ffn_in")?,
        ffn_out: lin("ffn_out")?,
        norm2_gamma: get("norm2.gamma")?,
        norm2_beta: get("norm2.beta")?,
    })
}

/// Second-stage layers resolved from the store once.
#[derive(Debug, Clone)]
struct SecondStage {
    mlp: Vec<Linear>,
    layers: Vec<AttentionWeights>,
    heads: StageHeads,
}

/// A configured, weight-resolved detector.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    opts: RunOptions,
    weights: WeightStore,
    second: Option<SecondStage>,
    workers: usize,
}

impl Pipeline {
    /// Folds batch norms and converts precision as requested, then resolves
    /// every tensor the variant needs (missing ones are reported by name).
    pub fn new(
        cfg: &PipelineConfig,
        opts: RunOptions,
        weights: &WeightStore,
        workers: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if workers == 0 {
            return Err(Error::invalid(
                "Pipeline::new",
                "workers must be at least 1",
            ));
        }
        let mut store = if opts.fold_bn {
            fold_store_batchnorm(weights, crate::backbone::BN_EPS)?.0
        } else {
            weights.clone()
        };
        store = convert_pipeline_precision(&store, opts.precision)?;

        if cfg.mode() == BackboneMode::Learned {
            for (name, ..) in cfg.backbone.blocks(BEV_CHANNELS) {
                store.require(&format!("{name}.conv.weight"))?;
            }
            for n in ["head.heatmap.weight", "head.regression.weight"] {
                store.require(n)?;
            }
        }
        let second = if opts.second_stage {
            let v = opts.variant;
            let roi = cfg.roi_for(v.fpn);
            let mlp = (0..roi.mlp_dims.len())
                .map(|i| store.linear(&format!("{}.mlp{i}", roi_prefix(v.fpn)), Activation::Relu))
                .collect::<Result<Vec<_>>>()?;
            let layers = if v.attention {
                (0..cfg.attention.num_layers)
                    .map(|l| attention_layer(&store, l))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            let p = head_prefix(v.attention);
            let heads = StageHeads {
                cls: store.linear(&format!("{p}.cls"), Activation::None)?,
                reg: store.linear(&format!("{p}.reg"), Activation::None)?,
            };
            Some(SecondStage { mlp, layers, heads })
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            opts,
            weights: store,
            second,
            workers,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn options(&self) -> &RunOptions {
        &self.opts
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    /// Voxelization and BEV encoding.
    pub fn preprocess(&self, points: &[Point]) -> Result<Tensor> {
        let grid = voxelize(points, &self.cfg.voxel, self.workers)?;
        Ok(bev_encode(&grid))
    }

    /// Pads the BEV image so every backbone stride divides it.
    pub fn collate(&self, bev: &Tensor) -> Result<Tensor> {
        pad_to_multiple(bev, self.cfg.backbone.max_stride())
    }

    /// Converts the model input to the execution precision.
    pub fn to_device(&self, input: &Tensor) -> Tensor {
        input.to_precision(self.opts.precision)
    }

    /// Feature maps and the stride-1 head map.
    fn features(&self, input: &Tensor, gt: &[Box3D]) -> Result<(Vec<FeatureMap>, Tensor)> {
        let cfg = &self.cfg;
        match cfg.mode() {
            BackboneMode::Oracle => {
                let maps: Vec<FeatureMap> =
                    oracle_forward(gt, &cfg.backbone, &cfg.head, &cfg.voxel)?
                        .into_iter()
                        .map(|m| FeatureMap {
                            tensor: m.tensor.to_precision(self.opts.precision),
                            stride: m.stride,
                        })
                        .collect();
                let head = maps[0].tensor.clone();
                debug_assert_eq!(head.shape()[0], HEAD_CHANNELS);
                Ok((maps, head))
            }
            BackboneMode::Learned => {
                let maps = if self.opts.variant.fpn && self.opts.second_stage {
                    fpn_forward(input, &cfg.backbone, &self.weights)?
                } else {
                    vec![backbone_forward(input, &cfg.backbone, &self.weights)?]
                };
                let head = head_forward(&maps[0].tensor, &self.weights)?;
                Ok((maps, head))
            }
        }
    }

    /// Forward pass on a collated, device-converted input. `gt` is read only
    /// in oracle mode.
    pub fn model(&self, input: &Tensor, gt: &[Box3D]) -> Result<Vec<Box3D>> {
        let (maps, head) = self.features(input, gt)?;
        let peaks = decode_peaks(&head, &self.cfg.head)?;
        let proposals = decode_boxes(&peaks, &head, &self.cfg.voxel)?;

        let mut dets = match &self.second {
            Some(stage) if !proposals.is_empty() => {
                let v = self.opts.variant;
                let roi_cfg = self.cfg.roi_for(v.fpn);
                let roi =
                    extract_roi_features(&proposals, &maps, &roi_cfg, &self.cfg.voxel, &stage.mlp)?;
                let preds = if v.attention {
                    centeratt_forward(
                        &roi,
                        &proposals,
                        &self.cfg.attention,
                        &stage.layers,
                        &stage.heads,
                        &self.cfg.voxel,
                    )?
                } else {
                    baseline_forward(&roi, &stage.heads)?
                };
                proposals
                    .iter()
                    .zip(&preds)
                    .map(|(p, pred)| {
                        let stage2 = pred.class_scores.iter().copied().fold(0.0, f64::max);
                        let mut b = refine_box(p, &pred.deltas);
                        b.score = fuse_scores(p.score, stage2);
                        b
                    })
                    .collect()
            }
            _ => proposals,
        };
        dets.retain(|d| d.score > self.opts.score_threshold);
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(dets)
    }

    /// All stages on one scene already in memory.
    pub fn detect(&self, points: &[Point], gt: &[Box3D]) -> Result<Vec<Box3D>> {
        let bev = self.preprocess(points)?;
        let input = self.to_device(&self.collate(&bev)?);
        self.model(&input, gt)
    }
}

/// Runs a pipeline over manifest scenes one stage at a time, for profiling.
pub struct SceneRunner<'a> {
    pipeline: &'a Pipeline,
    entries: Vec<(PathBuf, PathBuf)>,
    points: Vec<Point>,
    gt: Vec<Box3D>,
    bev: Option<Tensor>,
    input: Option<Tensor>,
    results: Vec<Option<(Vec<Box3D>, Vec<Box3D>)>>,
}

impl<'a> SceneRunner<'a> {
    pub fn new(pipeline: &'a Pipeline, entries: &[ManifestEntry], base: &Path) -> Self {
        Self {
            pipeline,
            entries: entries.iter().map(|e| e.resolve(base)).collect(),
            points: Vec::new(),
            gt: Vec::new(),
            bev: None,
            input: None,
            results: vec![None; entries.len()],
        }
    }

    /// `(detections, ground truth)` from the latest pass over each scene.
    pub fn results(&self) -> Vec<(Vec<Box3D>, Vec<Box3D>)> {
        self.results.iter().flatten().cloned().collect()
    }
}

impl StagedPipeline for SceneRunner<'_> {
    fn num_scenes(&self) -> usize {
        self.entries.len()
    }

    fn run_stage(&mut self, stage: Stage, scene: usize) -> Result<()> {
        let p = self.pipeline;
        match stage {
            Stage::LoadData => {
                let (cloud, labels) = &self.entries[scene];
                self.points = read_point_cloud(cloud)?;
                self.gt = read_labels(labels)?;
            }
            Stage::Preprocess => self.bev = Some(p.preprocess(&self.points)?),
            Stage::Collate => {
                let bev = self
                    .bev
                    .take()
                    .ok_or_else(|| Error::invalid("collate", "no preprocessed scene"))?;
                self.input = Some(p.collate(&bev)?);
            }
            Stage::LoadToGpu => {
                let t = self
                    .input
                    .take()
                    .ok_or_else(|| Error::invalid("load to GPU", "no collated scene"))?;
                self.input = Some(p.to_device(&t));
            }
            Stage::Model => {
                let t = self
                    .input
                    .take()
                    .ok_or_else(|| Error::invalid("model", "no device input"))?;
                let dets = p.model(&t, &self.gt)?;
                self.results[scene] = Some((dets, std::mem::take(&mut self.gt)));
            }
        }
        Ok(())
    }
}
