//! Grids of training configurations run over shared seeds and summarized as
//! mean ± sd tables.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::config::TrainConfig;
use super::run::{run_training, LoadedData, RunOptions};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// One row per cell, metrics as columns.
    #[default]
    Rows,
    /// One column per cell, metrics as rows.
    Columns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub label: String,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub title: String,
    /// Overrides shared by every cell, applied before the cell's own.
    #[serde(default)]
    pub base: Map<String, Value>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub layout: Layout,
    /// Config keys displayed next to each row label.
    #[serde(default)]
    pub show: Vec<String>,
    pub cells: Vec<GridCell>,
}

impl GridSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config(format!("grid `{}` has no cells", self.title)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("grid `{}` has no seeds", self.title)));
        }
        let known = TrainConfig::keys();
        super::config::check_keys(&self.base, &known)?;
        for key in &self.show {
            if !known.contains(key) {
                return Err(Error::UnknownKey {
                    key: key.clone(),
                    suggestion: super::config::suggest_key(key, &known),
                });
            }
        }
        Ok(())
    }

    /// Resolved configuration of every cell (seed taken from the base).
    pub fn cell_configs(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        let shared = base.with_overrides(&self.base)?;
        self.cells.iter().map(|c| shared.with_overrides(&c.overrides)).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    pub iterations: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    /// Concurrent training runs; at least one.
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
    /// Seeds contributing (distance metrics may be undefined on some).
    pub n: usize,
}

impl Stat {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd =
            if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
        Some(Self { mean, sd, n })
    }

    fn render(s: Option<Self>) -> String {
        s.map_or_else(|| "-".into(), |s| format!("{:.2} ± {:.2}", s.mean, s.sd))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    /// Values of the displayed config keys.
    pub shown: Vec<Value>,
    pub dice: Option<Stat>,
    pub jaccard: Option<Stat>,
    pub hd95: Option<Stat>,
    pub asd: Option<Stat>,
    /// Final student report per seed, in seed order.
    pub reports: Vec<MetricsReport>,
    /// Mean over all steps of the logged mask ratio, per seed.
    pub mask_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub layout: Layout,
    pub show: Vec<String>,
    pub seeds: Vec<u64>,
    pub iterations: u64,
    pub cells: Vec<CellResult>,
}

const METRICS: [&str; 4] = ["Dice↑ (%)", "Jaccard↑ (%)", "95HD↓ (px)", "ASD↓ (px)"];

fn show_value(v: &Value) -> String {
    match v {
        Value::Bool(true) => "✓".into(),
        Value::Bool(false) => "✗".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl CellResult {
    fn stats(&self) -> [Option<Stat>; 4] {
        [self.dice, self.jaccard, self.hd95, self.asd]
    }
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "### {}\n\n{} iterations, seeds {:?}; mean ± sd of the student on the test split.\n\n",
            self.title, self.iterations, self.seeds
        );
        match self.layout {
            Layout::Rows => {
                let mut header = vec!["Setting".to_string()];
                header.extend(self.show.iter().cloned());
                header.extend(METRICS.iter().map(|m| m.to_string()));
                let _ = writeln!(s, "| {} |", header.join(" | "));
                let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
                for c in &self.cells {
                    let mut row = vec![c.label.clone()];
                    row.extend(c.shown.iter().map(show_value));
                    row.extend(c.stats().into_iter().map(Stat::render));
                    let _ = writeln!(s, "| {} |", row.join(" | "));
                }
            }
            Layout::Columns => {
                let mut header = vec!["Metric".to_string()];
                header.extend(self.cells.iter().map(|c| c.label.clone()));
                let _ = writeln!(s, "| {} |", header.join(" | "));
                let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
                for (m, name) in METRICS.iter().enumerate() {
                    let mut row = vec![name.to_string()];
                    row.extend(self.cells.iter().map(|c| Stat::render(c.stats()[m])));
                    let _ = writeln!(s, "| {} |", row.join(" | "));
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut header = vec!["label".to_string()];
        header.extend(self.show.iter().cloned());
        for m in ["dice", "jaccard", "hd95", "asd"] {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_sd"));
        }
        header.push("n_seeds".into());
        let mut s = header.join(",") + "\n";
        for c in &self.cells {
            let mut row = vec![c.label.replace(',', ";")];
            row.extend(c.shown.iter().map(|v| v.to_string().replace(',', ";")));
            for st in c.stats() {
                match st {
                    Some(st) => {
                        row.push(format!("{:.6}", st.mean));
                        row.push(format!("{:.6}", st.sd));
                    }
                    None => row.extend(["nan".to_string(), "nan".to_string()]),
                }
            }
            row.push(c.reports.len().to_string());
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

struct JobResult {
    report: MetricsReport,
    mask_ratio: f64,
}

/// Number of concurrent runs from `DPMS_NUM_WORKERS`, defaulting to the
/// available parallelism.
pub fn default_workers() -> usize {
    std::env::var("DPMS_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every (cell, seed) pair with `base` underneath the grid's overrides.
/// Results are merged in cell order regardless of worker scheduling.
pub fn run_ablation(
    grid: &GridSpec,
    base: &TrainConfig,
    data: &LoadedData,
    opts: &AblationOptions,
) -> Result<AblationTable> {
    grid.validate()?;
    let seeds = opts.seeds.clone().unwrap_or_else(|| grid.seeds.clone());
    if seeds.is_empty() {
        return Err(Error::Config("no seeds to run".into()));
    }
    let mut configs = grid.cell_configs(base)?;
    if let Some(it) = opts.iterations {
        for c in &mut configs {
            c.iterations = it;
            c.eval_interval = Some(it);
        }
    }
    let jobs: Vec<(usize, TrainConfig)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            seeds.iter().map(move |&seed| {
                (i, TrainConfig { seed, eval_interval: c.eval_interval.or(Some(c.iterations)), ..c.clone() })
            })
        })
        .collect();
    for (_, c) in &jobs {
        c.validate()?;
    }
    let results: Vec<Mutex<Option<Result<JobResult>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.workers.max(1).min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some((_, cfg)) = jobs.get(j) else { break };
                let res = run_training(cfg, data, &RunOptions::default()).and_then(|out| {
                    let rec =
                        out.final_eval.ok_or_else(|| Error::Config("run ended before its last iteration".into()))?;
                    let mask_ratio = out.logs.iter().map(|l| l.mask_ratio).sum::<f64>() / out.logs.len().max(1) as f64;
                    Ok(JobResult { report: rec.student, mask_ratio })
                });
                *results[j].lock().expect("result slot") = Some(res);
            });
        }
    });
    let mut per_cell: Vec<Vec<JobResult>> = configs.iter().map(|_| Vec::new()).collect();
    for ((cell, _), slot) in jobs.iter().zip(results) {
        let res = slot.into_inner().expect("result slot").expect("every job ran");
        per_cell[*cell].push(res?);
    }
    let cells = grid
        .cells
        .iter()
        .zip(&configs)
        .zip(per_cell)
        .map(|((cell, cfg), runs)| {
            let cfg_json = serde_json::to_value(cfg).unwrap_or(Value::Null);
            let shown = grid.show.iter().map(|k| cfg_json.get(k).cloned().unwrap_or(Value::Null)).collect();
            let collect = |f: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<Stat> {
                Stat::from_values(&runs.iter().filter_map(|r| f(&r.report)).collect::<Vec<_>>())
            };
            CellResult {
                label: cell.label.clone(),
                shown,
                dice: collect(&|r| Some(r.mean.dice)),
                jaccard: collect(&|r| Some(r.mean.jaccard)),
                hd95: collect(&|r| r.mean.hd95),
                asd: collect(&|r| r.mean.asd),
                mask_ratio: runs.iter().map(|r| r.mask_ratio).collect(),
                reports: runs.into_iter().map(|r| r.report).collect(),
            }
        })
        .collect();
    Ok(AblationTable {
        title: grid.title.clone(),
        layout: grid.layout,
        show: grid.show.clone(),
        seeds,
        iterations: configs[0].iterations,
        cells,
    })
}
