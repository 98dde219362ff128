//! Post-hoc analysis of run directories: Bradley–Terry probabilities of the
//! acquired pairs under the implicit reward model, confidence histograms and
//! cross-seed aggregation of win-rates.

mod svg;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use svg::{histogram_svg, winrate_svg};

use crate::dpo::{implicit_reward, read_pairs_jsonl, sigmoid};
use crate::engine::store::{read_metrics_csv, step_dir};
use crate::engine::{MetricRow, RunConfig};
use crate::error::{AplError, Result};
use crate::oracle::read_judgements_jsonl;
use crate::policy::{load_checkpoint, PolicyParams};
use crate::vocab::TokenSequence;

/// σ(d), with the negative half computed as 1 − σ(−d). For σ ≥ 0.5 that
/// subtraction is exact, so `bt_from_margin(d) + bt_from_margin(-d) == 1.0` holds
/// bitwise. The price is that margins below about −37 round to exactly 0.
pub fn bt_from_margin(d: f64) -> f64 {
    if d >= 0.0 {
        sigmoid(d)
    } else {
        1.0 - sigmoid(-d)
    }
}

/// σ(r̂(x,y1) − r̂(x,y2)): probability that y1 beats y2 under the implicit model.
pub fn bt_probability(
    params: &PolicyParams,
    reference: &PolicyParams,
    beta: f64,
    prompt: &TokenSequence,
    y1: &TokenSequence,
    y2: &TokenSequence,
) -> Result<f64> {
    params.same_arch(reference)?;
    let r1 = implicit_reward(params, reference, beta, prompt, y1)?;
    let r2 = implicit_reward(params, reference, beta, prompt, y2)?;
    Ok(bt_from_margin(r1 - r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTRecord {
    pub pair_id: String,
    /// Probability that the oracle-preferred completion wins.
    pub p: f64,
    pub correct: bool,
    pub acquired_step: usize,
    pub strategy: String,
    pub seed: u64,
}

impl BTRecord {
    pub fn new(pair_id: String, p: f64, acquired_step: usize, strategy: String, seed: u64) -> Self {
        Self {
            pair_id,
            p,
            correct: p >= 0.5,
            acquired_step,
            strategy,
            seed,
        }
    }
}

/// Which parameters score an acquired pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// θ_{t−1}, the model that selected the batch.
    #[default]
    AtAcquisition,
    /// The final fine-tuned model.
    Final,
}

pub fn read_run_config(run_dir: &Path) -> Result<RunConfig> {
    Ok(serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json"))?)?)
}

/// BT records for every acquired pair of a run directory.
pub fn run_bt_records(run_dir: &Path, scoring: Scoring) -> Result<Vec<BTRecord>> {
    let cfg = read_run_config(run_dir)?;
    let pairs = read_pairs_jsonl(&run_dir.join("prefs.jsonl"))?;
    let judgements = read_judgements_jsonl(&run_dir.join("judgements.jsonl"))?;
    if pairs.len() != judgements.len() {
        return Err(AplError::invalid(format!(
            "{}: {} pairs but {} judgements",
            run_dir.display(),
            pairs.len(),
            judgements.len()
        )));
    }
    let theta0 = load_checkpoint(&step_dir(run_dir, 0).join("params.aplm"))?;
    let mut cache: HashMap<usize, PolicyParams> = HashMap::new();
    let final_params = match scoring {
        Scoring::Final => Some(load_checkpoint(&run_dir.join("final").join("params.aplm"))?),
        Scoring::AtAcquisition => None,
    };
    let mut out = Vec::with_capacity(pairs.len());
    for (pair, j) in pairs.iter().zip(&judgements) {
        let params = match &final_params {
            Some(p) => p,
            None => {
                let t = pair.acquired_step.saturating_sub(1);
                if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(t) {
                    e.insert(load_checkpoint(&step_dir(run_dir, t).join("params.aplm"))?);
                }
                &cache[&t]
            }
        };
        let p = bt_probability(params, &theta0, cfg.beta, &pair.prompt, &pair.chosen, &pair.rejected)?;
        out.push(BTRecord::new(j.pair_id.clone(), p, pair.acquired_step, cfg.strategy.to_string(), cfg.seed));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Bins at or above 0.5 hold correctly ranked pairs.
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistBin>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn incorrect(&self) -> usize {
        self.bins.iter().filter(|b| !b.correct).map(|b| b.count).sum()
    }
}

/// Equal-width bins over [0, 1], right-open except the last.
pub fn build_histogram(records: &[BTRecord], bins: usize) -> Result<Histogram> {
    if records.is_empty() {
        return Err(AplError::invalid("no records to histogram"));
    }
    if bins == 0 || !bins.is_multiple_of(2) {
        return Err(AplError::invalid("bin count must be a positive even number"));
    }
    let mut out: Vec<HistBin> = (0..bins)
        .map(|i| HistBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: 0,
            correct: 2 * i >= bins,
        })
        .collect();
    for r in records {
        if !(0.0..=1.0).contains(&r.p) {
            return Err(AplError::invalid(format!("p = {} outside [0, 1] for {}", r.p, r.pair_id)));
        }
        let i = ((r.p * bins as f64).floor() as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(Histogram { bins: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub strategy: String,
    pub n: usize,
    /// Mean |p − 0.5|.
    pub extremity: f64,
    pub fraction_incorrect: f64,
    /// Fraction with p < 0.1.
    pub fraction_confidently_incorrect: f64,
}

pub fn confidence_of(strategy: &str, records: &[BTRecord]) -> Result<ConfidenceSummary> {
    if records.is_empty() {
        return Err(AplError::invalid(format!("no records for strategy {strategy}")));
    }
    let n = records.len() as f64;
    Ok(ConfidenceSummary {
        strategy: strategy.to_string(),
        n: records.len(),
        extremity: records.iter().map(|r| (r.p - 0.5).abs()).sum::<f64>() / n,
        fraction_incorrect: records.iter().filter(|r| !r.correct).count() as f64 / n,
        fraction_confidently_incorrect: records.iter().filter(|r| r.p < 0.1).count() as f64 / n,
    })
}

pub fn acquisition_confidence_summary(by_strategy: &BTreeMap<String, Vec<BTRecord>>) -> Result<Vec<ConfidenceSummary>> {
    if by_strategy.len() < 2 {
        return Err(AplError::invalid("confidence summary needs records from at least two strategies"));
    }
    by_strategy.iter().map(|(s, r)| confidence_of(s, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub strategy: String,
    pub waypoint: usize,
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean across seeds; `None` with a single seed.
    pub stderr: Option<f64>,
    /// Some seed of this strategy has no row at this waypoint.
    pub incomplete: bool,
}

impl AggregateCell {
    /// Mean to 2 d.p., standard error to 3 d.p.
    pub fn display(&self) -> String {
        let se = self.stderr.map(|s| format!("{s:.3}")).unwrap_or_else(|| "n/a".into());
        let flag = if self.incomplete { "*" } else { "" };
        format!("{:.2} ± {se}{flag}", self.mean)
    }
}

/// Mean and sample standard error (n − 1) of the values; values are sorted first
/// so the result does not depend on input order.
pub fn mean_stderr(values: &[f64]) -> (f64, Option<f64>) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub cells: Vec<AggregateCell>,
}

impl AggregateTable {
    pub fn cell(&self, strategy: &str, waypoint: usize) -> Option<&AggregateCell> {
        self.cells.iter().find(|c| c.strategy == strategy && c.waypoint == waypoint)
    }

    pub fn strategies(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.strategy) {
                seen.push(c.strategy.clone());
            }
        }
        seen
    }

    pub fn waypoints(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.waypoint).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["strategy", "waypoint", "n", "mean", "stderr", "incomplete"])?;
        for c in &self.cells {
            w.write_record([
                c.strategy.clone(),
                c.waypoint.to_string(),
                c.n.to_string(),
                c.mean.to_string(),
                c.stderr.map(|s| s.to_string()).unwrap_or_else(|| "n/a".into()),
                c.incomplete.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table: one row per dataset size, one column per strategy.
    pub fn to_text(&self) -> String {
        let strategies = self.strategies();
        let mut rows = vec![std::iter::once("Size".to_string()).chain(strategies.iter().cloned()).collect::<Vec<_>>()];
        for w in self.waypoints() {
            let mut row = vec![w.to_string()];
            for s in &strategies {
                row.push(self.cell(s, w).map(|c| c.display()).unwrap_or_else(|| "-".into()));
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        if self.cells.iter().any(|c| c.incomplete) {
            out.push_str("* some seeds have no evaluation at this size\n");
        }
        out
    }
}

/// Mean ± standard error of win-rate per (strategy, waypoint) across seeds.
/// An empty `waypoints` uses every dataset size present.
pub fn aggregate_runs(rows: &[MetricRow], waypoints: &[usize]) -> Result<AggregateTable> {
    if rows.is_empty() {
        return Err(AplError::invalid("no metrics rows to aggregate"));
    }
    let waypoints: Vec<usize> = if waypoints.is_empty() {
        rows.iter().map(|r| r.dataset_size).collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        waypoints.to_vec()
    };
    let mut strategies: Vec<String> = Vec::new();
    let mut seeds: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    for r in rows {
        if !strategies.contains(&r.strategy) {
            strategies.push(r.strategy.clone());
        }
        seeds.entry(&r.strategy).or_default().insert(r.seed);
    }
    strategies.sort_by_key(|s| strategy_rank(s));
    let mut cells = Vec::new();
    for s in &strategies {
        let expected = &seeds[s.as_str()];
        for &w in &waypoints {
            let mut by_seed: BTreeMap<u64, f64> = BTreeMap::new();
            for r in rows.iter().filter(|r| &r.strategy == s && r.dataset_size == w) {
                by_seed.insert(r.seed, r.win_rate);
            }
            if by_seed.is_empty() {
                cells.push(AggregateCell {
                    strategy: s.clone(),
                    waypoint: w,
                    n: 0,
                    mean: f64::NAN,
                    stderr: None,
                    incomplete: true,
                });
                continue;
            }
            let values: Vec<f64> = by_seed.values().copied().collect();
            let (mean, stderr) = mean_stderr(&values);
            if stderr.is_none() {
                log::warn!("{s} at {w}: single seed, standard error not available");
            }
            cells.push(AggregateCell {
                strategy: s.clone(),
                waypoint: w,
                n: values.len(),
                mean,
                stderr,
                incomplete: by_seed.len() < expected.len(),
            });
        }
    }
    Ok(AggregateTable { cells })
}

fn strategy_rank(s: &str) -> (usize, String) {
    let order = ["random", "entropy", "certainty", "hybrid"];
    (order.iter().position(|o| *o == s).unwrap_or(order.len()), s.to_string())
}

pub fn write_histogram_csv(path: &Path, hists: &BTreeMap<String, Histogram>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["strategy", "bin_lo", "bin_hi", "count", "fraction", "correct"])?;
    for (s, h) in hists {
        let total = h.total().max(1) as f64;
        for b in &h.bins {
            w.write_record([
                s.clone(),
                format!("{:.1}", b.lo),
                format!("{:.1}", b.hi),
                b.count.to_string(),
                format!("{:.6}", b.count as f64 / total),
                b.correct.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub runs: usize,
    pub table: AggregateTable,
    pub confidence: Vec<ConfidenceSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub scoring: Scoring,
    /// Only pairs acquired at this step or later enter the histograms.
    pub min_step: usize,
    pub waypoints: Vec<usize>,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            scoring: Scoring::AtAcquisition,
            min_step: 2,
            waypoints: Vec::new(),
        }
    }
}

/// Reads run directories and writes histogram.csv, summary.csv,
/// table2-style.txt, confidence.csv and figures/*.svg into `out`.
pub fn analyze_runs(run_dirs: &[&Path], out: &Path, opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    if run_dirs.is_empty() {
        return Err(AplError::invalid("no run directories given"));
    }
    let mut rows = Vec::new();
    let mut by_strategy: BTreeMap<String, Vec<BTRecord>> = BTreeMap::new();
    for dir in run_dirs {
        rows.extend(read_metrics_csv(&dir.join("metrics.csv"))?);
        let records = run_bt_records(dir, opts.scoring)?;
        let cfg = read_run_config(dir)?;
        by_strategy
            .entry(cfg.strategy.to_string())
            .or_default()
            .extend(records.into_iter().filter(|r| r.acquired_step >= opts.min_step));
    }
    std::fs::create_dir_all(out.join("figures"))?;
    let table = aggregate_runs(&rows, &opts.waypoints)?;
    table.write_csv(&out.join("summary.csv"))?;
    std::fs::write(out.join("table2-style.txt"), table.to_text())?;
    std::fs::write(out.join("figures").join("winrate.svg"), winrate_svg(&table))?;

    let mut hists = BTreeMap::new();
    for (s, recs) in &by_strategy {
        if recs.is_empty() {
            continue;
        }
        let h = build_histogram(recs, 10)?;
        std::fs::write(out.join("figures").join(format!("histogram-{s}.svg")), histogram_svg(s, &h))?;
        hists.insert(s.clone(), h);
    }
    write_histogram_csv(&out.join("histogram.csv"), &hists)?;

    let nonempty: BTreeMap<String, Vec<BTRecord>> =
        by_strategy.into_iter().filter(|(_, r)| !r.is_empty()).collect();
    let confidence = if nonempty.len() >= 2 {
        acquisition_confidence_summary(&nonempty)?
    } else {
        nonempty.iter().map(|(s, r)| confidence_of(s, r)).collect::<Result<_>>()?
    };
    let mut w = csv::Writer::from_path(out.join("confidence.csv"))?;
    for c in &confidence {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(AnalysisReport {
        runs: run_dirs.len(),
        table,
        confidence,
    })
}
