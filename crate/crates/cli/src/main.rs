use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use centeratt::backbone::BackboneMode;
use centeratt::bench::{profile_pipeline, write_report};
use centeratt::config::PipelineConfig;
use centeratt::eval::{evaluate_scenes, EvalResult};
use centeratt::optimize::{equivalence_check, fold_store_batchnorm};
use centeratt::pipeline::{init_weights, Pipeline, RunOptions, SceneRunner, Variant};
use centeratt::scene::{
    generate_scene, read_labels, read_manifest, read_point_cloud, write_labels, write_manifest,
    write_point_cloud, Box3D, ManifestEntry,
};
use centeratt::tensor::{Precision, WeightStore};
use centeratt::Error;

/// Center-heatmap LiDAR detector with an attention second stage: scene
/// generation, detection, evaluation, latency profiling and inference passes.
#[derive(Debug, Parser)]
#[command(name = "centeratt", version)]
struct Cli {
    /// Worker threads for voxelization [default: available cores].
    #[arg(long, global = true, env = "CENTERATT_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scenes (point clouds, labels) and a manifest.
    Generate(GenerateArgs),
    /// Run a detector variant over every scene of a manifest.
    Detect(DetectArgs),
    /// Profile the five pipeline stages per variant and print the latency table.
    Bench(BenchArgs),
    /// Score detection files against manifest labels (AP / APH per class).
    Eval(EvalArgs),
    /// Fold batch-norm layers into their convolutions and save a new weight file.
    FoldBn(FoldBnArgs),
    /// Compare fp32 and emulated fp16 detections and print an equivalence report.
    ComparePrecision(CompareArgs),
    /// Write deterministic untrained weights for every variant of a config.
    InitWeights(InitArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Pipeline config file [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Pipeline config file [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene manifest written by `generate`.
    #[arg(long)]
    manifest: PathBuf,
    /// Weight file. Required unless --oracle.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Replace the backbone with ground-truth head maps (no weights needed for
    /// the first stage; the second stage falls back to seeded untrained weights).
    #[arg(long)]
    oracle: bool,
    /// Fold batch norms into convolutions before running.
    #[arg(long)]
    fold_bn: bool,
    /// Run in emulated half precision.
    #[arg(long)]
    fp16: bool,
}

#[derive(Debug, Args)]
struct VariantArgs {
    /// Use the attention second stage instead of the face-center MLP.
    #[arg(long, conflicts_with = "variants")]
    centeratt: bool,
    /// Pool ROI features from every FPN stride.
    #[arg(long, conflicts_with = "variants")]
    fpn: bool,
    /// Comma-separated variants (baseline, centeratt, fpn, centeratt+fpn) or `all`.
    #[arg(long)]
    variants: Option<String>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    variant: VariantArgs,
    /// Output directory; one label file per scene (per variant with --variants).
    #[arg(long)]
    out: PathBuf,
    /// Stop after the first stage.
    #[arg(long, conflicts_with = "variants")]
    no_second_stage: bool,
    /// Keep detections scoring strictly above this [default: config value, 0.1].
    #[arg(long)]
    score_threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    variant: VariantArgs,
    /// Timed passes over the manifest.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Untimed passes before the timed ones.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Mark rows over this overall latency (informational only).
    #[arg(long)]
    budget_ms: Option<f64>,
    /// Also write the latency CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Pipeline config file [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `<scene id>.txt` detection files.
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write the metric CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FoldBnArgs {
    /// Input weight file.
    #[arg(long)]
    weights: PathBuf,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// Batch-norm epsilon.
    #[arg(long, default_value_t = centeratt::backbone::BN_EPS)]
    eps: f32,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    variant: VariantArgs,
    /// Largest relative difference that still passes.
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    /// Also write the report CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    /// Pipeline config file [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// Weight seed [default: config seed].
    #[arg(long)]
    seed: Option<u64>,
}

/// Bad flag combinations found after parsing; exits like a clap usage error.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 3,
        Some(Error::Io { .. }) => 4,
        Some(Error::Format { .. }) => 5,
        Some(Error::MissingWeight(_)) => 6,
        Some(Error::MissingScenes(_)) => 7,
        Some(Error::Fp16Overflow(_)) => 8,
        Some(Error::Placement { .. }) => 9,
        Some(Error::Shape { .. } | Error::InvalidArgument { .. }) => 10,
        None => 1,
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn workers(flag: Option<usize>) -> anyhow::Result<usize> {
    match flag {
        Some(0) => Err(usage("--workers must be at least 1")),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn variants(args: &VariantArgs) -> anyhow::Result<Vec<Variant>> {
    match args.variants.as_deref() {
        None => Ok(vec![Variant {
            attention: args.centeratt,
            fpn: args.fpn,
        }]),
        Some("all") => Ok(Variant::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|v| Variant::parse(v.trim()).map_err(|e| usage(e.to_string())))
            .collect(),
    }
}

/// Config, weights and base options shared by detect, bench and compare-precision.
struct Model {
    cfg: PipelineConfig,
    weights: WeightStore,
    base: RunOptions,
    entries: Vec<ManifestEntry>,
    dir: PathBuf,
}

impl Model {
    fn load(args: &ModelArgs) -> anyhow::Result<Self> {
        let mut cfg = load_config(args.config.as_deref())?;
        if args.oracle {
            cfg.backbone.mode = BackboneMode::Oracle;
        }
        if args.fp16 {
            cfg.precision = Precision::Fp16E;
        }
        let weights = match (&args.weights, cfg.mode()) {
            (Some(p), _) => WeightStore::load(p)?,
            (None, BackboneMode::Oracle) => init_weights(&cfg, cfg.seed)?,
            (None, BackboneMode::Learned) => {
                return Err(usage("--weights is required unless --oracle is given"))
            }
        };
        let mut base = RunOptions::from_config(&cfg, Variant::BASELINE);
        base.fold_bn = args.fold_bn;
        let entries = read_manifest(&args.manifest)?;
        Ok(Self {
            cfg,
            weights,
            base,
            entries,
            dir: manifest_dir(&args.manifest),
        })
    }

    fn pipeline(&self, opts: RunOptions, workers: usize) -> anyhow::Result<Pipeline> {
        Ok(Pipeline::new(&self.cfg, opts, &self.weights, workers)?)
    }

    /// Runs every scene and returns `(detections, ground truth)` pairs.
    fn run(&self, p: &Pipeline) -> anyhow::Result<Vec<(Vec<Box3D>, Vec<Box3D>)>> {
        self.entries
            .iter()
            .map(|e| {
                let (cloud, labels) = e.resolve(&self.dir);
                let points = read_point_cloud(&cloud)?;
                let gt = read_labels(&labels)?;
                let dets = p
                    .detect(&points, &gt)
                    .with_context(|| format!("scene {}", e.id))?;
                Ok((dets, gt))
            })
            .collect()
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let scene = generate_scene(&cfg.scene_config(seed))?;
        let id = format!("scene_{i:04}");
        let entry = ManifestEntry {
            cloud: PathBuf::from(format!("{id}.bin")),
            labels: PathBuf::from(format!("{id}.txt")),
            id,
            seed,
        };
        let (cloud, labels) = entry.resolve(&args.out);
        write_point_cloud(&cloud, &scene.points)?;
        write_labels(&labels, &scene.boxes)?;
        entries.push(entry);
    }
    let manifest = args.out.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} scenes to {}", entries.len(), manifest.display());
    Ok(())
}

fn comparison_row(name: &str, scenes: &[(Vec<Box3D>, Vec<Box3D>)], r: &EvalResult) -> String {
    let n: usize = scenes.iter().map(|s| s.0.len()).sum();
    format!(
        "{name},{},{n},{:.1},{:.1}",
        scenes.len(),
        100.0 * r.map,
        100.0 * r.maph
    )
}

fn cmd_detect(args: DetectArgs, workers: usize) -> anyhow::Result<()> {
    let model = Model::load(&args.model)?;
    let list = variants(&args.variant)?;
    let grid = args.variant.variants.is_some();
    let threshold = args.score_threshold.unwrap_or(model.cfg.score_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage("--score-threshold must lie in [0, 1]"));
    }

    let mut rows = vec!["variant,scenes,detections,map,maph".to_string()];
    for v in list {
        let opts = RunOptions {
            variant: v,
            second_stage: !args.no_second_stage,
            score_threshold: threshold,
            ..model.base
        };
        let out = if grid {
            args.out.join(v.name().replace('+', "_"))
        } else {
            args.out.clone()
        };
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let results = model.run(&model.pipeline(opts, workers)?)?;
        for (e, (dets, _)) in model.entries.iter().zip(&results) {
            write_labels(&out.join(format!("{}.txt", e.id)), dets)?;
        }
        let r = evaluate_scenes(&results, &model.cfg.eval);
        rows.push(comparison_row(&opts.label(), &results, &r));
    }
    let table = rows.join("\n") + "\n";
    if grid {
        let path = args.out.join("comparison.csv");
        fs::write(&path, &table).map_err(|e| Error::Io { path, source: e })?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_bench(args: BenchArgs, workers: usize) -> anyhow::Result<()> {
    let model = Model::load(&args.model)?;
    let mut reports = Vec::new();
    for v in variants(&args.variant)? {
        let opts = RunOptions {
            variant: v,
            ..model.base
        };
        let p = model.pipeline(opts, workers)?;
        let mut runner = SceneRunner::new(&p, &model.entries, &model.dir);
        let mut report = profile_pipeline(&opts.label(), &mut runner, args.runs, args.warmup)?;
        report.quality = Some(100.0 * evaluate_scenes(&runner.results(), &model.cfg.eval).maph);
        reports.push(report);
    }
    let (csv, table) = write_report(&reports, args.budget_ms);
    if let Some(path) = args.out {
        fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let entries = read_manifest(&args.manifest)?;
    let dir = manifest_dir(&args.manifest);
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !args.detections.join(format!("{}.txt", e.id)).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingScenes(missing).into());
    }
    let scenes = entries
        .iter()
        .map(|e| {
            let dets = read_labels(&args.detections.join(format!("{}.txt", e.id)))?;
            let gt = read_labels(&e.resolve(&dir).1)?;
            Ok((dets, gt))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let r = evaluate_scenes(&scenes, &cfg.eval);
    let excluded = r.excluded();
    if !excluded.is_empty() {
        let names: Vec<&str> = excluded.iter().map(|c| c.name()).collect();
        eprintln!(
            "no ground truth for {}; left out of the means",
            names.join(", ")
        );
    }
    match args.out {
        Some(path) => fs::write(&path, r.to_csv()).map_err(|e| Error::Io { path, source: e })?,
        None => print!("{}", r.to_csv()),
    }
    Ok(())
}

fn cmd_fold_bn(args: FoldBnArgs) -> anyhow::Result<()> {
    let store = WeightStore::load(&args.weights)?;
    let (folded, layers) = fold_store_batchnorm(&store, args.eps)?;
    folded.save(&args.out)?;
    println!(
        "folded {} batch-norm layers into {}",
        layers.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_compare(args: CompareArgs, workers: usize) -> anyhow::Result<()> {
    if args.model.fp16 {
        return Err(usage(
            "compare-precision always runs both precisions; drop --fp16",
        ));
    }
    let model = Model::load(&args.model)?;
    let mut out = String::new();
    let mut csv = String::new();
    for v in variants(&args.variant)? {
        let mut opts = RunOptions {
            variant: v,
            ..model.base
        };
        opts.precision = Precision::Fp32;
        let a: Vec<Vec<Box3D>> = model
            .run(&model.pipeline(opts, workers)?)?
            .into_iter()
            .map(|r| r.0)
            .collect();
        opts.precision = Precision::Fp16E;
        let b: Vec<Vec<Box3D>> = model
            .run(&model.pipeline(opts, workers)?)?
            .into_iter()
            .map(|r| r.0)
            .collect();
        let report = equivalence_check(&a, &b, args.tolerance)?;
        out.push_str(&format!("== {} ==\n{}", v.name(), report.to_table()));
        csv.push_str(&format!("# {}\n{}", v.name(), report.to_csv()));
    }
    if let Some(path) = args.out {
        fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
    }
    print!("{out}");
    Ok(())
}

fn cmd_init(args: InitArgs) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let store = init_weights(&cfg, args.seed.unwrap_or(cfg.seed))?;
    store.save(&args.out)?;
    println!("wrote {} tensors to {}", store.len(), args.out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let workers = workers(cli.workers)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Detect(a) => cmd_detect(a, workers),
        Command::Bench(a) => cmd_bench(a, workers),
        Command::Eval(a) => cmd_eval(a),
        Command::FoldBn(a) => cmd_fold_bn(a),
        Command::ComparePrecision(a) => cmd_compare(a, workers),
        Command::InitWeights(a) => cmd_init(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
