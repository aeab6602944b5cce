//! One-axis ablation sweeps on the synthetic benchmark.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::drawing::synth::generate_set;
use crate::drawing::Drawing;
use crate::error::{Error, Result};
use crate::train::{evaluate, EpochRecord, Trainer};

/// Keeps held-out drawings disjoint from the training stream.
const HOLDOUT_STREAM: u64 = 0x6576_616c;

/// Default epsilon grid; wide enough on both sides of the default to show
/// the drop at each end.
pub const EPSILON_GRID: [f64; 6] = [0.0, 0.1, 0.3, 1.0, 3.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    PoolType,
    FeatDim,
    Pgt,
    Epsilon,
    Encoding,
    MultiScale,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::PoolType,
        Axis::FeatDim,
        Axis::Pgt,
        Axis::Epsilon,
        Axis::Encoding,
        Axis::MultiScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::PoolType => "pool_type",
            Axis::FeatDim => "feat_dim",
            Axis::Pgt => "pgt",
            Axis::Epsilon => "epsilon",
            Axis::Encoding => "encoding",
            Axis::MultiScale => "multi_scale",
        }
    }

    fn header(self) -> &'static str {
        match self {
            Axis::PoolType => "Pool Type",
            Axis::FeatDim => "Feat Dim",
            Axis::Pgt => "PGT",
            Axis::Epsilon => "Scale Factor",
            Axis::Encoding => "PosE. Type",
            Axis::MultiScale => "Multi-scale",
        }
    }

    /// Row labels and the config overrides each row applies to the base.
    pub fn settings(self, base: &RunConfig) -> Vec<(String, Vec<String>)> {
        let one = |label: &str, o: &str| (label.to_string(), vec![o.to_string()]);
        match self {
            Axis::PoolType => {
                let mut rows = vec![one("baseline", "lfe.enabled=false")];
                for m in ["mean", "max", "attn", "concat"] {
                    rows.push((
                        m.to_string(),
                        vec!["lfe.enabled=true".into(), format!("lfe.pool_mode=\"{m}\"")],
                    ));
                }
                rows
            }
            Axis::FeatDim => {
                let h = base.lfe.hidden_dim.max(2);
                [h / 2, h, 2 * h, 4 * h]
                    .iter()
                    .map(|d| (d.to_string(), vec![format!("lfe.hidden_dim={d}")]))
                    .collect()
            }
            Axis::Pgt => vec![one("off", "pgt.enabled=false"), one("on", "pgt.enabled=true")],
            Axis::Epsilon => EPSILON_GRID
                .iter()
                .map(|e| {
                    (
                        e.to_string(),
                        vec!["pgt.enabled=true".into(), format!("pgt.epsilon={e:?}")],
                    )
                })
                .collect(),
            Axis::Encoding => ["sine", "fourier"]
                .iter()
                .map(|k| (k.to_string(), vec![format!("pgt.encoding=\"{k}\"")]))
                .collect(),
            Axis::MultiScale => [false, true]
                .iter()
                .map(|b| (b.to_string(), vec![format!("lfe.multi_scale={b}")]))
                .collect(),
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation axis '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// Training and held-out synthetic drawings for `config`.
pub fn synthetic_benchmark(config: &RunConfig, eval_count: usize) -> Result<(Vec<Drawing>, Vec<Drawing>)> {
    let spec = &config.data.synthetic;
    let train = generate_set(config.seed, config.data.synthetic_count, spec)?;
    let eval = generate_set(config.seed ^ HOLDOUT_STREAM, eval_count, spec)?;
    Ok((train, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub overrides: Vec<String>,
    /// Metrics below are means over the training seeds.
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub pq_thing: f64,
    pub pq_stuff: f64,
    pub query_recall: f64,
    /// Held-out PQ of each training seed.
    pub pq_runs: Vec<f64>,
    pub params: usize,
    pub seconds: f64,
    /// Per-epoch training log of each seed.
    pub runs: Vec<Vec<EpochRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub train_drawings: usize,
    pub eval_drawings: usize,
    pub base: RunConfig,
    pub repeats: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Text table with a setting column followed by PQ, RQ and SQ in percent.
    pub fn to_table(&self) -> String {
        let header = self.axis.header();
        let w = self
            .rows
            .iter()
            .map(|r| r.setting.len())
            .chain([header.len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{header:<w$} | {:>6} {:>6} {:>6}", "PQ", "RQ", "SQ");
        let _ = writeln!(out, "{}-+-{}", "-".repeat(w), "-".repeat(20));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<w$} | {:>6.1} {:>6.1} {:>6.1}",
                r.setting,
                100.0 * r.pq,
                100.0 * r.rq,
                100.0 * r.sq
            );
        }
        out
    }

    pub fn pq_profile(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.pq).collect()
    }
}

/// True when the maximum sits strictly inside the profile and both ends
/// lie strictly below it.
pub fn rises_then_falls(profile: &[f64]) -> bool {
    if profile.len() < 3 {
        return false;
    }
    let (arg, max) = profile
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    arg > 0 && arg + 1 < profile.len() && profile[0] < max && profile[profile.len() - 1] < max
}

/// Trains `repeats` models per setting of `axis` (seeds `base.seed`,
/// `base.seed + 1`, ...) on the same data and averages their held-out metrics.
pub fn run_ablation(
    base: &RunConfig,
    axis: Axis,
    eval_count: usize,
    repeats: usize,
    mut progress: impl FnMut(&str, &EpochRecord),
) -> Result<AblationReport> {
    if repeats == 0 {
        return Err(Error::Config("ablation repeats must be positive".into()));
    }
    let (train, eval) = synthetic_benchmark(base, eval_count)?;
    let vocab = train
        .first()
        .map(|d| d.vocab.clone())
        .ok_or_else(|| Error::Config("data.synthetic_count must be positive for ablations".into()))?;
    let mut rows = Vec::new();
    for (setting, overrides) in axis.settings(base) {
        let cfg = base.with_overrides(&overrides)?;
        let start = Instant::now();
        let mut sums = [0.0; 6];
        let mut pq_runs = Vec::new();
        let mut runs = Vec::new();
        let mut params = 0;
        for r in 0..repeats {
            let mut cfg = cfg.clone();
            cfg.seed = base.seed.wrapping_add(r as u64);
            let mut trainer = Trainer::new(&cfg, &vocab)?;
            runs.push(trainer.fit(&train, None, None, |rec| progress(&setting, rec))?);
            let ev = evaluate(&trainer.model, &eval, cfg.threads)?;
            let t = &ev.report;
            for (acc, v) in sums
                .iter_mut()
                .zip([t.total.pq, t.total.rq, t.total.sq, t.thing.pq, t.stuff.pq, ev.query_recall])
            {
                *acc += v / repeats as f64;
            }
            pq_runs.push(t.total.pq);
            params = trainer.model.store.num_scalars();
        }
        let [pq, rq, sq, pq_thing, pq_stuff, query_recall] = sums;
        rows.push(AblationRow {
            setting,
            overrides,
            pq,
            rq,
            sq,
            pq_thing,
            pq_stuff,
            query_recall,
            pq_runs,
            params,
            seconds: start.elapsed().as_secs_f64(),
            runs,
        });
    }
    Ok(AblationReport {
        axis,
        train_drawings: train.len(),
        eval_drawings: eval.len(),
        base: base.clone(),
        repeats,
        rows,
    })
}
