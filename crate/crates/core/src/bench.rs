//! Five-stage latency profiling and the latency comparison table.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};

/// Stage labels in report column order.
pub const STAGE_NAMES: [&str; 5] = ["load data", "preprocess", "collate", "load to GPU", "model"];
/// CSV header; times in milliseconds.
pub const CSV_HEADER: &str =
    "variant,load_data,preprocess,collate,load_to_gpu,model,overall,quality";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    LoadData,
    Preprocess,
    Collate,
    LoadToGpu,
    Model,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::LoadData,
        Stage::Preprocess,
        Stage::Collate,
        Stage::LoadToGpu,
        Stage::Model,
    ];

    pub fn name(self) -> &'static str {
        STAGE_NAMES[self as usize]
    }
}

/// A pipeline split at the five stage boundaries. Stages run in order for one
/// scene and pass intermediate results through the implementor's own state.
pub trait StagedPipeline {
    fn num_scenes(&self) -> usize;
    fn run_stage(&mut self, stage: Stage, scene: usize) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub variant: String,
    /// Per-run milliseconds for each stage (each the mean over scenes).
    pub samples: [Vec<f64>; 5],
    pub mean: [f64; 5],
    pub p90: [f64; 5],
    /// Sum of the stage means.
    pub overall: f64,
    pub quality: Option<f64>,
}

/// Nearest-rank percentile of a sample set.
pub fn percentile(samples: &[f64], pct: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    s[rank.min(s.len()) - 1]
}

impl LatencyReport {
    pub fn from_samples(
        variant: impl Into<String>,
        samples: [Vec<f64>; 5],
        quality: Option<f64>,
    ) -> Self {
        let mean = std::array::from_fn(|i| {
            let s = &samples[i];
            if s.is_empty() {
                0.0
            } else {
                s.iter().sum::<f64>() / s.len() as f64
            }
        });
        let p90 = std::array::from_fn(|i| percentile(&samples[i], 90.0));
        Self {
            variant: variant.into(),
            overall: sum_stages(&mean),
            samples,
            mean,
            p90,
            quality,
        }
    }

    /// A report carrying only stage means, e.g. published reference numbers.
    pub fn from_means(variant: impl Into<String>, mean: [f64; 5], quality: Option<f64>) -> Self {
        Self::from_samples(variant, mean.map(|m| vec![m]), quality)
    }

    pub fn runs(&self) -> usize {
        self.samples[0].len()
    }
}

fn sum_stages(v: &[f64; 5]) -> f64 {
    v.iter().sum()
}

/// Times every stage of every scene for `warmup + runs` passes and keeps the
/// last `runs`. Each sample is the mean stage time over all scenes of a pass.
pub fn profile_pipeline(
    variant: &str,
    pipeline: &mut dyn StagedPipeline,
    runs: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::invalid(
            "profile_pipeline",
            "runs must be at least 1",
        ));
    }
    let scenes = pipeline.num_scenes();
    if scenes == 0 {
        return Err(Error::invalid("profile_pipeline", "no scenes to profile"));
    }
    let mut samples: [Vec<f64>; 5] = Default::default();
    for pass in 0..warmup + runs {
        let mut totals = [0.0f64; 5];
        for scene in 0..scenes {
            for stage in Stage::ALL {
                let start = Instant::now();
                pipeline.run_stage(stage, scene)?;
                totals[stage as usize] += start.elapsed().as_secs_f64() * 1e3;
            }
        }
        if pass >= warmup {
            for (s, t) in samples.iter_mut().zip(totals) {
                s.push(t / scenes as f64);
            }
        }
    }
    Ok(LatencyReport::from_samples(variant, samples, None))
}

/// Renders reports as `(csv, text table)`. Times print with one decimal;
/// `budget_ms` only annotates the table.
pub fn write_report(reports: &[LatencyReport], budget_ms: Option<f64>) -> (String, String) {
    let mut csv = format!("{CSV_HEADER}\n");
    for r in reports {
        let _ = write!(csv, "{}", csv_field(&r.variant));
        for m in r.mean {
            let _ = write!(csv, ",{m:.1}");
        }
        let _ = write!(csv, ",{:.1},", r.overall);
        if let Some(q) = r.quality {
            let _ = write!(csv, "{q:.1}");
        }
        csv.push('\n');
    }

    let mut header: Vec<String> = vec!["methods".into()];
    header.extend(STAGE_NAMES.iter().map(|s| s.to_string()));
    header.push("overall".into());
    header.push("quality".into());
    if budget_ms.is_some() {
        header.push("budget".into());
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.variant.clone()];
            row.extend(r.mean.iter().map(|m| format!("{m:.1}")));
            row.push(format!("{:.1}", r.overall));
            row.push(r.quality.map_or_else(|| "-".into(), |q| format!("{q:.1}")));
            if let Some(b) = budget_ms {
                row.push(if r.overall <= b {
                    "ok".into()
                } else {
                    "over".into()
                });
            }
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let render = |cells: &[String]| {
        let mut line = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(line, "{c:<w$}");
            } else {
                let _ = write!(line, " | {c:>w$}");
            }
        }
        line.trim_end().to_string()
    };
    let mut table = render(&header);
    table.push('\n');
    table.push_str(&"-".repeat(table.len() - 1));
    table.push('\n');
    for r in &rows {
        table.push_str(&render(r));
        table.push('\n');
    }
    if let Some(b) = budget_ms {
        let _ = writeln!(table, "budget {b:.1} ms (informational)");
    }
    (csv, table)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
