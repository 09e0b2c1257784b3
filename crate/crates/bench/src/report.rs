//! Benchmark reports (pooled and per-run) and the comparison of two reports.

use std::fmt;
use std::io::Write;

use llmscale_core::timing::{MetricsSummary, RequestTiming, Stats};
use serde::{Deserialize, Serialize};

use crate::error::BenchError;
use crate::workload::WorkloadSpec;

/// Statistics over the per-run medians.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AcrossRuns {
    pub ttft_median: Stats,
    pub tpot_median: Stats,
    pub e2el_median: Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: WorkloadSpec,
    /// Statistics over all requests of all runs together.
    pub pooled: MetricsSummary,
    pub per_run: Vec<MetricsSummary>,
    pub across_runs: AcrossRuns,
}

impl BenchReport {
    pub fn new(spec: WorkloadSpec, runs: &[Vec<RequestTiming>]) -> Self {
        let all: Vec<RequestTiming> = runs.iter().flatten().cloned().collect();
        let per_run: Vec<MetricsSummary> = runs.iter().map(|r| MetricsSummary::from_timings(r)).collect();
        let medians = |f: fn(&MetricsSummary) -> &Stats| -> Stats {
            let v: Vec<f64> = per_run.iter().map(f).filter(|s| s.count > 0).map(|s| s.median).collect();
            Stats::of(&v)
        };
        let across_runs = AcrossRuns {
            ttft_median: medians(|s| &s.ttft),
            tpot_median: medians(|s| &s.tpot),
            e2el_median: medians(|s| &s.e2el),
        };
        Self {
            spec,
            pooled: MetricsSummary::from_timings(&all),
            per_run,
            across_runs,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize)]
struct RawLine<'a> {
    run: usize,
    #[serde(flatten)]
    timing: &'a RequestTiming,
}

/// One JSON object per request, tagged with its run number.
pub fn write_raw(out: &mut impl Write, runs: &[Vec<RequestTiming>]) -> Result<(), BenchError> {
    for (run, timings) in runs.iter().enumerate() {
        for timing in timings {
            serde_json::to_writer(&mut *out, &RawLine { run, timing })?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub stat: String,
    /// Seconds.
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
    /// Percent of the baseline; `None` when the baseline is zero and the
    /// candidate is not.
    pub relative: Option<f64>,
}

/// Candidate minus baseline for each metric and statistic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_target: String,
    pub candidate_target: String,
    pub rows: Vec<DeltaRow>,
}

impl Comparison {
    pub fn row(&self, metric: &str, stat: &str) -> Option<&DeltaRow> {
        self.rows.iter().find(|r| r.metric == metric && r.stat == stat)
    }
}

pub fn format_relative(relative: Option<f64>) -> String {
    match relative {
        Some(r) => format!("{r:+.2}%"),
        None => "n/a".to_string(),
    }
}

fn relative(baseline: f64, candidate: f64) -> Option<f64> {
    if baseline == 0.0 {
        (candidate == 0.0).then_some(0.0)
    } else {
        Some((candidate - baseline) / baseline * 100.0)
    }
}

/// Compares `candidate` (e.g. through the gateway) against `baseline`
/// (e.g. direct). The workloads must match except for the target.
pub fn compare(baseline: &BenchReport, candidate: &BenchReport) -> Result<Comparison, BenchError> {
    if let Some(field) = baseline.spec.mismatch(&candidate.spec) {
        return Err(BenchError::SpecMismatch(field.to_string()));
    }
    let mut rows = Vec::new();
    type Pick = fn(&MetricsSummary) -> &Stats;
    let metrics: [(&str, Pick); 3] = [("TTFT", |s| &s.ttft), ("TPOT", |s| &s.tpot), ("E2EL", |s| &s.e2el)];
    for (metric, get) in metrics {
        let (a, b) = (get(&baseline.pooled), get(&candidate.pooled));
        for (stat, x, y) in [
            ("median", a.median, b.median),
            ("stddev", a.stddev, b.stddev),
            ("mean", a.mean, b.mean),
            ("p99", a.p99, b.p99),
        ] {
            rows.push(DeltaRow {
                metric: metric.to_string(),
                stat: stat.to_string(),
                baseline: x,
                candidate: y,
                delta: y - x,
                relative: relative(x, y),
            });
        }
    }
    Ok(Comparison {
        baseline_target: baseline.spec.target_url.clone(),
        candidate_target: candidate.spec.target_url.clone(),
        rows,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "baseline:  {}", self.baseline_target)?;
        writeln!(f, "candidate: {}", self.candidate_target)?;
        writeln!(
            f,
            "{:<6} {:<7} {:>14} {:>14} {:>12} {:>10}",
            "metric", "stat", "baseline ms", "candidate ms", "delta ms", "relative"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:<7} {:>14.3} {:>14.3} {:>+12.3} {:>10}",
                r.metric,
                r.stat,
                r.baseline * 1e3,
                r.candidate * 1e3,
                r.delta * 1e3,
                format_relative(r.relative)
            )?;
        }
        Ok(())
    }
}

/// Human-readable summary table in milliseconds.
pub fn summary_table(summary: &MetricsSummary) -> String {
    let mut out = format!(
        "requests {}  failures {}  tpot excluded {}  duration {:.3} s\n{:<6} {:>12} {:>12} {:>12} {:>12}\n",
        summary.request_count, summary.failure_count, summary.tpot_excluded, summary.total_duration, "metric", "mean ms", "median ms", "stddev ms", "p99 ms"
    );
    for (name, s) in [("TTFT", &summary.ttft), ("TPOT", &summary.tpot), ("E2EL", &summary.e2el)] {
        out.push_str(&format!(
            "{:<6} {:>12.3} {:>12.3} {:>12.3} {:>12.3}\n",
            name,
            s.mean * 1e3,
            s.median * 1e3,
            s.stddev * 1e3,
            s.p99 * 1e3
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Source;

    fn spec(target: &str, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            target_url: target.into(),
            model: "m".into(),
            concurrency: 2,
            total_requests: 2,
            seed,
            source: Source::default(),
            api_key: None,
        }
    }

    fn report(target: &str, seed: u64, ttft: f64) -> BenchReport {
        let timings = vec![
            RequestTiming::success(0, 0.0, ttft, ttft + 1.0, 11),
            RequestTiming::success(1, 0.0, ttft, ttft + 1.0, 11),
        ];
        BenchReport::new(spec(target, seed), &[timings])
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let a = report("http://a", 0, 2.3);
        let c = compare(&a, &a).unwrap();
        assert!(c.rows.iter().all(|r| r.delta == 0.0 && r.relative == Some(0.0)));
    }

    #[test]
    fn relative_delta_is_formatted_to_two_decimals() {
        let c = compare(&report("http://direct", 0, 2.3), &report("http://gw", 0, 3.3)).unwrap();
        let row = c.row("TTFT", "median").unwrap();
        assert!((row.delta - 1.0).abs() < 1e-12);
        assert_eq!(format_relative(row.relative), "+43.48%");
        assert!(c.to_string().contains("+43.48%"));
    }

    #[test]
    fn mismatched_seeds_are_rejected() {
        let err = compare(&report("http://a", 0, 1.0), &report("http://b", 1, 1.0)).unwrap_err();
        assert!(matches!(err, BenchError::SpecMismatch(f) if f == "seed"));
    }

    #[test]
    fn zero_baseline() {
        assert_eq!(format_relative(relative(0.0, 0.0)), "+0.00%");
        assert_eq!(format_relative(relative(0.0, 1.0)), "n/a");
        assert_eq!(format_relative(relative(2.0, 1.0)), "-50.00%");
    }

    #[test]
    fn per_run_and_pooled_aggregates() {
        let runs = vec![
            vec![RequestTiming::success(0, 0.0, 1.0, 2.0, 2)],
            vec![RequestTiming::success(0, 0.0, 3.0, 4.0, 2)],
        ];
        let r = BenchReport::new(spec("http://a", 0), &runs);
        assert_eq!(r.per_run.len(), 2);
        assert_eq!(r.pooled.ttft.count, 2);
        assert_eq!(r.pooled.ttft.median, 2.0);
        assert_eq!(r.across_runs.ttft_median.mean, 2.0);
        assert_eq!(r.across_runs.ttft_median.stddev, 1.0);
    }

    #[test]
    fn raw_lines_carry_run_numbers() {
        let runs = vec![vec![RequestTiming::success(0, 0.0, 1.0, 2.0, 2)], vec![RequestTiming::failure(0, 0.0, 1.0, "x")]];
        let mut buf = Vec::new();
        write_raw(&mut buf, &runs).unwrap();
        let lines: Vec<serde_json::Value> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["run"], 1);
        assert_eq!(lines[1]["success"], false);
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = report("http://a", 0, 1.0);
        let back: BenchReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
