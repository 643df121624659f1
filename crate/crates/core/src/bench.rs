//! Latency benchmarking across batch budgets and length-bin breakdowns.

use std::time::{Duration, Instant};

use crate::decoding::{batch_decode, DecodeOptions, DecodeResult, Mode};
use crate::error::{Error, Result};
use crate::model::{HeadKind, Model};
use crate::vocab::Token;

pub const BENCH_HEADER: &str = "task,scheme,mode,budget,n,latency_ms,steps,len,flops";

/// Default source-length bin edges; the last bin is open-ended.
pub const DEFAULT_BIN_EDGES: [f64; 6] = [0.0, 10.0, 20.0, 30.0, 40.0, f64::INFINITY];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub task: String,
    /// `l2r`, `abs`, `rel` or `fpe`.
    pub scheme: String,
    pub mode: Mode,
    pub budget: usize,
    pub n: usize,
    pub latency_ms: f64,
    pub steps: f64,
    pub len: f64,
    pub flops: f64,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{:.1}",
            self.task,
            self.scheme,
            self.mode.name(),
            self.budget,
            self.n,
            self.latency_ms,
            self.steps,
            self.len,
            self.flops
        )
    }
}

/// One engine under test.
pub struct BenchEntry<'a> {
    pub model: &'a Model,
    pub opts: DecodeOptions,
}

impl BenchEntry<'_> {
    pub fn scheme_name(&self) -> &'static str {
        match self.model.config.head {
            HeadKind::L2r => "l2r",
            HeadKind::Insertion => self.model.scheme().name(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 1, repeats: 3 }
    }
}

/// Median of a non-empty slice.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Decodes `srcs` with every entry at every budget. Per-instance latency is
/// the median over `repeats` timed runs after `warmup` untimed ones. Also
/// returns the decode results of the last run of each row.
pub fn run_bench(
    task: &str,
    entries: &[BenchEntry<'_>],
    srcs: &[Vec<Token>],
    budgets: &[usize],
    cfg: &BenchConfig,
) -> Result<(Vec<BenchRow>, Vec<Vec<DecodeResult>>)> {
    if srcs.is_empty() {
        return Err(Error::Empty("benchmark inputs"));
    }
    if budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("budgets must be strictly increasing".into()));
    }
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let n = srcs.len();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for e in entries {
        let mut traced = e.opts.clone();
        traced.trace = true;
        let untraced = DecodeOptions {
            trace: false,
            ..e.opts.clone()
        };
        for &budget in budgets {
            for _ in 0..cfg.warmup {
                batch_decode(e.model, srcs, budget, &untraced)?;
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut last = None;
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                let out = batch_decode(e.model, srcs, budget, &untraced)?;
                times.push(t.elapsed().as_secs_f64() * 1e3 / n as f64);
                last = Some(out.results);
            }
            // FLOPs come from a separate traced run so tracing stays out of
            // the timings.
            let flops_run = batch_decode(e.model, srcs, budget, &traced)?;
            let flops: f64 = flops_run
                .results
                .iter()
                .map(|r| r.flops.as_ref().map_or(0, |f| f.total) as f64)
                .sum::<f64>()
                / n as f64;
            let results = last.expect("at least one repeat");
            rows.push(BenchRow {
                task: task.to_string(),
                scheme: e.scheme_name().to_string(),
                mode: e.opts.mode,
                budget,
                n,
                latency_ms: median(&times),
                steps: results.iter().map(|r| r.n_steps as f64).sum::<f64>() / n as f64,
                len: results.iter().map(|r| r.out_len as f64).sum::<f64>() / n as f64,
                flops,
            });
            all.push(results);
        }
    }
    Ok((rows, all))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(BENCH_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Summary table with one row per engine: quality, steps, length, latency
/// at the smallest and largest budget.
pub fn summary_markdown(rows: &[BenchRow], quality: &[(String, f64)]) -> String {
    let mut s = String::from("| scheme | mode | quality | steps | len | latency (min budget) | latency (max budget) |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    let mut keys: Vec<(String, Mode)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.scheme.clone(), r.mode)) {
            keys.push((r.scheme.clone(), r.mode));
        }
    }
    for (scheme, mode) in keys {
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.scheme == scheme && r.mode == mode).collect();
        let first = mine.iter().min_by_key(|r| r.budget).unwrap();
        let last = mine.iter().max_by_key(|r| r.budget).unwrap();
        let q = quality
            .iter()
            .find(|(k, _)| *k == scheme)
            .map_or("-".to_string(), |(_, v)| format!("{v:.3}"));
        s.push_str(&format!(
            "| {scheme} | {} | {q} | {:.2} | {:.2} | {:.3} | {:.3} |\n",
            mode.name(),
            first.steps,
            first.len,
            first.latency_ms,
            last.latency_ms
        ));
    }
    s
}

/// Per-instance latency by budget, one column per engine.
pub fn latency_markdown(rows: &[BenchRow]) -> String {
    let mut engines: Vec<(String, Mode)> = Vec::new();
    let mut budgets: Vec<usize> = Vec::new();
    for r in rows {
        if !engines.contains(&(r.scheme.clone(), r.mode)) {
            engines.push((r.scheme.clone(), r.mode));
        }
        if !budgets.contains(&r.budget) {
            budgets.push(r.budget);
        }
    }
    budgets.sort_unstable();
    let mut s = String::from("| budget |");
    for (sc, m) in &engines {
        s.push_str(&format!(" {sc} {} |", m.name()));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(engines.len()));
    s.push('\n');
    for b in budgets {
        s.push_str(&format!("| {b} |"));
        for (sc, m) in &engines {
            match rows.iter().find(|r| r.budget == b && &r.scheme == sc && r.mode == *m) {
                Some(r) => s.push_str(&format!(" {:.3} |", r.latency_ms)),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// NaN for an empty bin.
    pub mean_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBins {
    pub bins: Vec<Bin>,
    /// Instances below the first edge or at/above the last one.
    pub overflow: Bin,
}

/// Groups per-instance latencies into half-open `[lo, hi)` source-length
/// bins.
pub fn length_bins(src_lens: &[usize], latency: &[Duration], edges: &[f64]) -> Result<LengthBins> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("bin edges must be strictly increasing".into()));
    }
    if src_lens.len() != latency.len() {
        return Err(Error::Config("one latency per source length".into()));
    }
    let mut sums = vec![(0usize, 0.0f64); edges.len()];
    for (&len, t) in src_lens.iter().zip(latency) {
        let x = len as f64;
        let ms = t.as_secs_f64() * 1e3;
        let slot = edges
            .windows(2)
            .position(|w| w[0] <= x && x < w[1])
            .unwrap_or(edges.len() - 1);
        sums[slot].0 += 1;
        sums[slot].1 += ms;
    }
    let mk = |lo: f64, hi: f64, (count, sum): (usize, f64)| Bin {
        lo,
        hi,
        count,
        mean_ms: if count == 0 { f64::NAN } else { sum / count as f64 },
    };
    let bins = edges.windows(2).zip(&sums).map(|(w, &s)| mk(w[0], w[1], s)).collect();
    Ok(LengthBins {
        bins,
        overflow: mk(f64::NAN, f64::NAN, sums[edges.len() - 1]),
    })
}

impl LengthBins {
    pub fn markdown(&self) -> String {
        let mut s = String::from("| source length | n | mean latency (ms) |\n|---|---|---|\n");
        for b in &self.bins {
            let hi = if b.hi.is_finite() { format!("{})", b.hi) } else { "inf)".into() };
            s.push_str(&format!("| [{}, {hi} | {} | {:.3} |\n", b.lo, b.count, b.mean_ms));
        }
        if self.overflow.count > 0 {
            s.push_str(&format!("| overflow | {} | {:.3} |\n", self.overflow.count, self.overflow.mean_ms));
        }
        s
    }
}
