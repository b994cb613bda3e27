//! Metrics over exit records, Monte-Carlo aggregation and report emission.
//!
//! Per-SNR figures are computed from the pooled records of all runs; the
//! Monte-Carlo section keeps per-run scalars with their mean and sample
//! standard deviation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Modulation;
use crate::error::{Error, Result};
use crate::exit_policy::ExitCriterion;
use crate::inference::ExitRecord;

pub const NUM_EXITS: usize = 3;

/// SNR ranges reported next to the per-SNR rows. Each range is half-open
/// `[lo, hi)` except the last one, which also includes `hi`.
pub const SNR_RANGES: [(f64, f64); 3] = [(-20.0, -7.0), (-7.0, 7.0), (7.0, 20.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Snr,
    Modulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub group: String,
    /// Set on per-SNR rows only.
    pub snr_db: Option<f64>,
    pub frames: usize,
    pub accuracy: f64,
    pub exit_fractions: [f64; NUM_EXITS],
    /// Fraction of the group's frames that exit at each exit and are right.
    pub exit_correct: [f64; NUM_EXITS],
    pub exit_incorrect: [f64; NUM_EXITS],
    pub mean_flops: f64,
    /// `1 - mean_flops / baseline`, when a baseline count was supplied.
    pub reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub group_by: GroupBy,
    pub rows: Vec<MetricsRow>,
}

pub const TABLE_COLUMNS: [&str; 16] = [
    "group",
    "snr_db",
    "frames",
    "accuracy",
    "exit0",
    "exit1",
    "exit2",
    "exit0_correct",
    "exit1_correct",
    "exit2_correct",
    "exit0_incorrect",
    "exit1_incorrect",
    "exit2_incorrect",
    "mean_flops",
    "reduction",
    "scope",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsTable {
    pub fn row(&self, group: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    pub fn snr_row(&self, snr_db: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.snr_db == Some(snr_db))
    }

    pub fn overall(&self) -> Option<&MetricsRow> {
        self.row("overall")
    }

    /// Rows keyed by SNR, in ascending SNR order.
    pub fn snr_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(|r| r.snr_db.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = TABLE_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let scope = if r.snr_db.is_some() || self.group_by == GroupBy::Modulation && r.group != "overall"
            {
                "group"
            } else {
                "aggregate"
            };
            let mut cells =
                vec![r.group.clone(), opt(r.snr_db), r.frames.to_string(), r.accuracy.to_string()];
            for arr in [&r.exit_fractions, &r.exit_correct, &r.exit_incorrect] {
                cells.extend(arr.iter().map(f64::to_string));
            }
            cells.push(r.mean_flops.to_string());
            cells.push(opt(r.reduction));
            cells.push(scope.into());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn summarize(
    group: String,
    snr_db: Option<f64>,
    records: &[&ExitRecord],
    baseline_flops: Option<f64>,
) -> MetricsRow {
    let n = records.len() as f64;
    let mut counts = [[0usize; 2]; NUM_EXITS];
    let mut flops = 0u128;
    for r in records {
        counts[r.exit.min(NUM_EXITS - 1)][r.correct() as usize] += 1;
        flops += r.flops as u128;
    }
    let frac = |c: usize| c as f64 / n;
    let correct: usize = counts.iter().map(|c| c[1]).sum();
    let mean_flops = flops as f64 / n;
    MetricsRow {
        group,
        snr_db,
        frames: records.len(),
        accuracy: frac(correct),
        exit_fractions: counts.map(|c| frac(c[0] + c[1])),
        exit_correct: counts.map(|c| frac(c[1])),
        exit_incorrect: counts.map(|c| frac(c[0])),
        mean_flops,
        reduction: baseline_flops.map(|b| 1.0 - mean_flops / b),
    }
}

fn in_range(snr: f64, idx: usize) -> bool {
    let (lo, hi) = SNR_RANGES[idx];
    snr >= lo && (snr < hi || idx == SNR_RANGES.len() - 1 && snr == hi)
}

pub fn range_label(idx: usize) -> String {
    let (lo, hi) = SNR_RANGES[idx];
    let close = if idx == SNR_RANGES.len() - 1 { ']' } else { ')' };
    format!("snr[{lo}:{hi}{close}")
}

fn snr_label(snr: f64) -> String {
    format!("snr={snr}")
}

/// Full metrics table: one row per group, then the SNR ranges (when grouping
/// by SNR) and an overall row. Empty groups are omitted.
pub fn metrics_table(
    records: &[ExitRecord],
    group_by: GroupBy,
    baseline_flops: Option<f64>,
) -> Result<MetricsTable> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to summarise".into()));
    }
    if let Some(b) = baseline_flops {
        if !(b > 0.0) {
            return Err(Error::InvalidArgument(format!("baseline FLOPs {b} must be positive")));
        }
    }
    let mut rows = Vec::new();
    match group_by {
        GroupBy::Snr => {
            let mut snrs: Vec<f64> = records.iter().map(|r| r.snr_db).collect();
            snrs.sort_by(f64::total_cmp);
            snrs.dedup();
            for snr in snrs {
                let g: Vec<&ExitRecord> = records.iter().filter(|r| r.snr_db == snr).collect();
                rows.push(summarize(snr_label(snr), Some(snr), &g, baseline_flops));
            }
            for idx in 0..SNR_RANGES.len() {
                let g: Vec<&ExitRecord> = records.iter().filter(|r| in_range(r.snr_db, idx)).collect();
                if !g.is_empty() {
                    rows.push(summarize(range_label(idx), None, &g, baseline_flops));
                }
            }
        }
        GroupBy::Modulation => {
            let mut labels: Vec<usize> = records.iter().map(|r| r.label).collect();
            labels.sort_unstable();
            labels.dedup();
            for label in labels {
                let name = Modulation::from_class_index(label)
                    .map(|m| m.name().to_owned())
                    .unwrap_or_else(|| format!("class{label}"));
                let g: Vec<&ExitRecord> = records.iter().filter(|r| r.label == label).collect();
                rows.push(summarize(name, None, &g, baseline_flops));
            }
        }
    }
    let all: Vec<&ExitRecord> = records.iter().collect();
    rows.push(summarize("overall".into(), None, &all, baseline_flops));
    Ok(MetricsTable { group_by, rows })
}

pub fn accuracy_by_snr(records: &[ExitRecord]) -> Result<MetricsTable> {
    metrics_table(records, GroupBy::Snr, None)
}

pub fn exit_distribution(records: &[ExitRecord], group_by: GroupBy) -> Result<MetricsTable> {
    metrics_table(records, group_by, None)
}

pub fn flop_reduction_by_snr(records: &[ExitRecord], baseline_flops: f64) -> Result<MetricsTable> {
    metrics_table(records, GroupBy::Snr, Some(baseline_flops))
}

/// Ranks starting at 1, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Correlation between SNR and the indicator "left before the last exit".
pub fn snr_early_exit_correlation(records: &[ExitRecord]) -> Option<f64> {
    let snr: Vec<f64> = records.iter().map(|r| r.snr_db).collect();
    let early: Vec<f64> = records.iter().map(|r| if r.exit + 1 < NUM_EXITS { 1.0 } else { 0.0 }).collect();
    spearman(&snr, &early)
}

/// Everything one train-and-evaluate run produced.
#[derive(Debug, Clone)]
pub struct RunRecords {
    pub seed: u64,
    pub composite: Vec<ExitRecord>,
    pub baseline: Vec<ExitRecord>,
    pub baseline_flops: u64,
    pub criteria: Vec<ExitCriterion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub composite_by_snr: MetricsTable,
    pub composite_by_modulation: MetricsTable,
    /// Absent when no baseline records were supplied.
    pub baseline_by_snr: Option<MetricsTable>,
    pub snr_early_exit_spearman: Option<f64>,
}

impl ReportTables {
    pub fn build(composite: &[ExitRecord], baseline: &[ExitRecord], baseline_flops: f64) -> Result<Self> {
        Ok(Self {
            composite_by_snr: metrics_table(composite, GroupBy::Snr, Some(baseline_flops))?,
            composite_by_modulation: metrics_table(composite, GroupBy::Modulation, Some(baseline_flops))?,
            baseline_by_snr: if baseline.is_empty() {
                None
            } else {
                Some(metrics_table(baseline, GroupBy::Snr, Some(baseline_flops))?)
            },
            snr_early_exit_spearman: snr_early_exit_correlation(composite),
        })
    }

    /// Named scalars used for the Monte-Carlo summary.
    pub fn scalars(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        let tables = std::iter::once(("composite", &self.composite_by_snr))
            .chain(self.baseline_by_snr.as_ref().map(|t| ("baseline", t)));
        for (prefix, table) in tables {
            for r in &table.rows {
                out.insert(format!("{prefix}/{}/accuracy", r.group), r.accuracy);
                out.insert(format!("{prefix}/{}/mean_flops", r.group), r.mean_flops);
                if prefix == "composite" {
                    for e in 0..NUM_EXITS {
                        out.insert(format!("{prefix}/{}/exit{e}", r.group), r.exit_fractions[e]);
                    }
                    if let Some(red) = r.reduction {
                        out.insert(format!("{prefix}/{}/reduction", r.group), red);
                    }
                }
            }
        }
        if let Some(rho) = self.snr_early_exit_spearman {
            out.insert("composite/snr_early_exit_spearman".into(), rho);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub criteria: Vec<ExitCriterion>,
    pub tables: ReportTables,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two runs.
    pub std: Option<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub seeds: Vec<u64>,
    pub baseline_flops: u64,
    pub runs: Vec<RunMetrics>,
    pub monte_carlo: Vec<Aggregate>,
    /// Tables over the records of all runs pooled together.
    pub pooled: ReportTables,
}

/// Mean and sample std of one metric. Values are summed in sorted order so
/// the result does not depend on run order.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let std = (sorted.len() > 1).then(|| {
        let mut dev: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
        dev.sort_by(f64::total_cmp);
        (dev.iter().sum::<f64>() / (n - 1.0)).sqrt()
    });
    (mean, std)
}

/// Combines independent runs. Runs are ordered by seed first, so the
/// report does not depend on the order they finished in.
pub fn monte_carlo_aggregate(config_digest: &str, runs: &[RunRecords]) -> Result<RunReport> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("Monte-Carlo aggregation needs at least one run".into()));
    }
    let baseline_flops = runs[0].baseline_flops;
    if runs.iter().any(|r| r.baseline_flops != baseline_flops) {
        return Err(Error::InvalidArgument("runs disagree on the baseline FLOP count".into()));
    }
    let mut ordered: Vec<&RunRecords> = runs.iter().collect();
    ordered.sort_by_key(|r| r.seed);
    let b = baseline_flops as f64;
    let metrics = ordered
        .iter()
        .map(|r| {
            Ok(RunMetrics {
                seed: r.seed,
                criteria: r.criteria.clone(),
                tables: ReportTables::build(&r.composite, &r.baseline, b)
                    .map_err(|e| Error::InvalidArgument(format!("run with seed {}: {e}", r.seed)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in &metrics {
        for (k, v) in m.tables.scalars() {
            per_metric.entry(k).or_default().push(v);
        }
    }
    let monte_carlo = per_metric
        .into_iter()
        .map(|(metric, values)| {
            let (mean, std) = mean_std(&values);
            Aggregate { metric, mean, std, values }
        })
        .collect();

    let pool = |f: fn(&RunRecords) -> &Vec<ExitRecord>| -> Vec<ExitRecord> {
        ordered.iter().flat_map(|r| f(r).iter().cloned()).collect()
    };
    let pooled_c = pool(|r| &r.composite);
    let pooled_b = pool(|r| &r.baseline);
    Ok(RunReport {
        config_digest: config_digest.to_owned(),
        seeds: ordered.iter().map(|r| r.seed).collect(),
        baseline_flops,
        runs: metrics,
        monte_carlo,
        pooled: ReportTables::build(&pooled_c, &pooled_b, b)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportFormat {
    Csv,
    Json,
    PlotData,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "plot-data" | "plot_data" | "plot" => Ok(Self::PlotData),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

/// Plot-ready series over the SNR grid, from the pooled records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub snr_db: Vec<f64>,
    /// `None` where no baseline record exists at that SNR.
    pub baseline_accuracy: Vec<Option<f64>>,
    pub composite_accuracy: Vec<f64>,
    pub baseline_mean_flops: Vec<Option<f64>>,
    pub composite_mean_flops: Vec<f64>,
    pub reduction: Vec<f64>,
    /// `exit_fractions[e][i]`: share of frames at SNR `i` leaving at exit `e`.
    pub exit_fractions: Vec<Vec<f64>>,
    pub exit_correct: Vec<Vec<f64>>,
    pub exit_incorrect: Vec<Vec<f64>>,
}

impl PlotData {
    pub fn from_tables(t: &ReportTables) -> Self {
        let comp: Vec<&MetricsRow> = t.composite_by_snr.snr_rows().collect();
        let snr_db: Vec<f64> = comp.iter().filter_map(|r| r.snr_db).collect();
        let base = |f: fn(&MetricsRow) -> f64| -> Vec<Option<f64>> {
            snr_db.iter().map(|&s| t.baseline_by_snr.as_ref().and_then(|b| b.snr_row(s)).map(f)).collect()
        };
        let per_exit = |f: fn(&MetricsRow) -> &[f64; NUM_EXITS]| -> Vec<Vec<f64>> {
            (0..NUM_EXITS).map(|e| comp.iter().map(|r| f(r)[e]).collect()).collect()
        };
        Self {
            baseline_accuracy: base(|r| r.accuracy),
            baseline_mean_flops: base(|r| r.mean_flops),
            composite_accuracy: comp.iter().map(|r| r.accuracy).collect(),
            composite_mean_flops: comp.iter().map(|r| r.mean_flops).collect(),
            reduction: comp.iter().map(|r| r.reduction.unwrap_or_default()).collect(),
            exit_fractions: per_exit(|r| &r.exit_fractions),
            exit_correct: per_exit(|r| &r.exit_correct),
            exit_incorrect: per_exit(|r| &r.exit_incorrect),
            snr_db,
        }
    }
}

fn monte_carlo_csv(report: &RunReport) -> String {
    let mut out = String::from("metric,mean,std,runs\n");
    for a in &report.monte_carlo {
        out.push_str(&format!("{},{},{},{}\n", a.metric, a.mean, opt(a.std), a.values.len()));
    }
    out
}

fn write(dir: &Path, name: &str, body: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialise");
    s.push('\n');
    s
}

/// Writes the requested formats into `dir` and returns the files written.
pub fn emit_report(report: &RunReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                let t = &report.pooled;
                write(dir, "composite_by_snr.csv", &t.composite_by_snr.to_csv(), &mut written)?;
                write(dir, "composite_by_modulation.csv", &t.composite_by_modulation.to_csv(), &mut written)?;
                if let Some(b) = &t.baseline_by_snr {
                    write(dir, "baseline_by_snr.csv", &b.to_csv(), &mut written)?;
                }
                write(dir, "monte_carlo.csv", &monte_carlo_csv(report), &mut written)?;
            }
            ReportFormat::Json => write(dir, "report.json", &to_json(report), &mut written)?,
            ReportFormat::PlotData => {
                write(dir, "plot_data.json", &to_json(&PlotData::from_tables(&report.pooled)), &mut written)?
            }
        }
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
