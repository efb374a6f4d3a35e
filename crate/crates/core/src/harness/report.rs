//! CSV (RFC 4180) and JSON output.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::study::{ComparisonReport, Timing};
use crate::generators::GapStats;
use crate::network::{Descriptor, DescriptorDist, Snapshot};
use crate::picard::WindowedSolution;
use crate::topology::Graph;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// CSV table writer with CRLF record terminators.
pub struct Table {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl Table {
    pub fn create(path: impl AsRef<Path>, header: &[&str]) -> Result<Self, ReportError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(io_err(&path))?;
        let inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(BufWriter::new(file));
        let mut t = Table { path, inner };
        t.row(header)?;
        Ok(t)
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), ReportError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let path = self.path.display().to_string();
        self.inner
            .write_record(fields)
            .map_err(|source| ReportError::Csv { path, source })
    }

    pub fn finish(mut self) -> Result<PathBuf, ReportError> {
        self.inner.flush().map_err(io_err(&self.path))?;
        Ok(self.path)
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<PathBuf, ReportError> {
    let path = path.as_ref().to_path_buf();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn ensure_dir(dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Writes `comparison.csv`, `comparison_long.csv`, `summary.json` and
/// `timings.json`. All but the timings are byte-identical for a fixed report.
pub fn emit_report(
    report: &ComparisonReport,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, ReportError> {
    let dir = out_dir.as_ref();
    ensure_dir(dir)?;
    let mut files = Vec::new();
    let mut wide = Table::create(
        dir.join("comparison.csv"),
        &["n", "time", "node", "tv", "ci_low", "ci_high", "seeds"],
    )?;
    let mut long = Table::create(
        dir.join("comparison_long.csv"),
        &["n", "time", "node", "metric", "value"],
    )?;
    for r in &report.rows {
        wide.row([
            r.n.to_string(),
            num(r.time),
            r.node.clone(),
            num(r.tv),
            num(r.ci_low),
            num(r.ci_high),
            r.seeds.to_string(),
        ])?;
        for (metric, value) in [("tv", r.tv), ("ci_low", r.ci_low), ("ci_high", r.ci_high)] {
            long.row([
                r.n.to_string(),
                num(r.time),
                r.node.clone(),
                metric.to_string(),
                num(value),
            ])?;
        }
    }
    files.push(wide.finish()?);
    files.push(long.finish()?);
    files.push(write_json(dir.join("summary.json"), report)?);
    files.push(write_timings(dir, &report.timings)?);
    Ok(files)
}

pub fn write_timings(dir: &Path, timings: &[Timing]) -> Result<PathBuf, ReportError> {
    write_json(dir.join("timings.json"), &timings)
}

pub fn load_summary(path: impl AsRef<Path>) -> Result<ComparisonReport, ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn histogram_header(cap: usize) -> Vec<String> {
    (0..=cap).map(|k| format!("len_{k}")).collect()
}

/// Trajectory rows: one per (run, snapshot, node).
pub fn write_trajectories(
    path: impl AsRef<Path>,
    graph: &Graph,
    cap: usize,
    runs: &[(usize, u64, Vec<Snapshot>)],
) -> Result<PathBuf, ReportError> {
    let mut header: Vec<String> = ["n", "seed", "time", "node"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(histogram_header(cap));
    header.extend(
        [
            "customers_in_system",
            "arrivals",
            "completions",
            "exits",
            "transits",
            "swaps",
        ]
        .map(String::from),
    );
    let mut t = Table::create(path, &header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for (n, seed, snaps) in runs {
        for s in snaps {
            for (v, node) in s.nodes.iter().enumerate() {
                let mut row = vec![
                    n.to_string(),
                    seed.to_string(),
                    num(s.time),
                    graph.name(crate::NodeId(v)).to_string(),
                ];
                row.extend(node.descriptors.length_histogram().into_iter().map(num));
                let c = s.counters;
                row.extend(
                    [
                        s.customers_in_system,
                        c.arrivals,
                        c.completions,
                        c.exits,
                        c.transits,
                        c.swaps,
                    ]
                    .map(|x| x.to_string()),
                );
                t.row(row)?;
            }
        }
    }
    t.finish()
}

fn describe(d: &Descriptor, graph: &Graph, classes: &[String]) -> String {
    match d {
        Descriptor::Overflow => "overflow".into(),
        Descriptor::Queue { len, prefix } => {
            let head: Vec<String> = prefix
                .iter()
                .map(|l| format!("{}>{}", classes[l.class.0], graph.name(l.dest)))
                .collect();
            format!("{len}:{}", head.join(" "))
        }
    }
}

/// Long-format marginals: `time, node, descriptor, prob`.
pub fn write_marginals(
    path: impl AsRef<Path>,
    graph: &Graph,
    classes: &[String],
    marginals: &[(f64, Vec<DescriptorDist>)],
) -> Result<PathBuf, ReportError> {
    let mut t = Table::create(path, &["time", "node", "descriptor", "prob"])?;
    for (time, nodes) in marginals {
        for (v, dist) in nodes.iter().enumerate() {
            for (d, p) in &dist.probs {
                t.row([
                    num(*time),
                    graph.name(crate::NodeId(v)).to_string(),
                    describe(d, graph, classes),
                    num(*p),
                ])?;
            }
        }
    }
    t.finish()
}

/// Fixed-point rates per window and knot, and the iteration history.
pub fn write_picard(
    dir: &Path,
    graph: &Graph,
    classes: &[String],
    sol: &WindowedSolution,
) -> Result<Vec<PathBuf>, ReportError> {
    let mut rates = Table::create(
        dir.join("picard_rates.csv"),
        &[
            "window", "time", "from", "to", "class", "dest", "rate", "se",
        ],
    )?;
    let mut iters = Table::create(
        dir.join("picard_iterations.csv"),
        &["window", "iteration", "distance", "noise_floor"],
    )?;
    let mut offset = 0.0;
    for (j, w) in sol.windows.iter().enumerate() {
        for (key, series) in &w.rates.series {
            let se = w.estimate.se.series.get(key);
            for (i, r) in series.iter().enumerate() {
                let e = se.and_then(|s| s.get(i)).copied().unwrap_or(0.0);
                rates.row([
                    j.to_string(),
                    num(offset + w.rates.knot_time(i)),
                    graph.name(key.from).to_string(),
                    graph.name(key.to).to_string(),
                    classes[key.class.0].clone(),
                    graph.name(key.dest).to_string(),
                    num(*r),
                    num(e),
                ])?;
            }
        }
        for (k, d) in w.distances.iter().enumerate() {
            iters.row([
                j.to_string(),
                (k + 1).to_string(),
                num(*d),
                num(w.noise_floor),
            ])?;
        }
        offset += w.rates.horizon();
    }
    Ok(vec![rates.finish()?, iters.finish()?])
}

pub fn write_gaps(path: impl AsRef<Path>, gaps: &[GapStats]) -> Result<PathBuf, ReportError> {
    let mut t = Table::create(path, &["function", "n", "mean_gap", "max_gap", "samples"])?;
    for g in gaps {
        t.row([
            g.function.clone(),
            g.n.to_string(),
            num(g.mean_gap),
            num(g.max_gap),
            g.samples.to_string(),
        ])?;
    }
    t.finish()
}

/// Next-hop table: exits where the destination is within one hop.
pub fn write_routes(path: impl AsRef<Path>, graph: &Graph) -> Result<PathBuf, ReportError> {
    let mut t = Table::create(path, &["node", "dest", "distance", "next", "prob"])?;
    for v in graph.nodes() {
        for d in graph.nodes() {
            if v == d {
                continue;
            }
            let dist = graph.dist(v, d);
            let (name, dest) = (graph.name(v).to_string(), graph.name(d).to_string());
            match graph.routing_kernel(v, d) {
                Ok(kernel) => {
                    for (w, p) in kernel {
                        t.row([
                            name.clone(),
                            dest.clone(),
                            dist.to_string(),
                            graph.name(w).to_string(),
                            num(p),
                        ])?;
                    }
                }
                Err(_) => t.row([name, dest, dist.to_string(), "exit".to_string(), num(1.0)])?,
            }
        }
    }
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::super::study::{ComparisonRow, LimitMethod, Trend};
    use super::*;
    use crate::network::DescriptorSpace;

    fn report(rows: Vec<ComparisonRow>) -> ComparisonReport {
        ComparisonReport {
            name: "t".into(),
            method: LimitMethod::Ode,
            observation: DescriptorSpace::default(),
            copies: vec![10],
            times: vec![1.0],
            seeds: 10,
            rows,
            trends: vec![Trend {
                time: 1.0,
                strictly_decreasing: true,
                separated: false,
                log_slope: None,
            }],
            timings: vec![Timing {
                label: "x".into(),
                seconds: 0.5,
            }],
        }
    }

    #[test]
    fn empty_report_has_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&report(vec![]), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        assert_eq!(text, "n,time,node,tv,ci_low,ci_high,seeds\r\n");
    }

    #[test]
    fn output_is_deterministic_and_round_trips() {
        let row = ComparisonRow {
            n: 10,
            time: 1.0,
            node: "a,b".into(),
            tv: 0.125,
            ci_low: 0.1,
            ci_high: 0.2,
            seeds: 10,
        };
        let r = report(vec![row]);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(&r, a.path()).unwrap();
        emit_report(&r, b.path()).unwrap();
        for f in ["comparison.csv", "comparison_long.csv", "summary.json"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
        let text = fs::read_to_string(a.path().join("comparison.csv")).unwrap();
        assert!(text.contains("\"a,b\""));
        let back = load_summary(a.path().join("summary.json")).unwrap();
        assert_eq!(
            back,
            ComparisonReport {
                timings: vec![],
                ..r
            }
        );
    }
}
