//! Latency samples, throughput series and the CSV files written by runs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::RequestMetrics;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty sample")]
    EmptySample,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Sorted `(latency, rank / n)` pairs.
pub fn emit_ecdf(latencies: &[u64]) -> Result<Vec<(u64, f64)>, MetricsError> {
    if latencies.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    Ok(sorted.into_iter().enumerate().map(|(i, l)| (l, (i + 1) as f64 / n)).collect())
}

pub fn ecdf_csv(points: &[(u64, f64)]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["latency_us", "fraction"])?;
    for (l, f) in points {
        w.serialize((l, f))?;
    }
    Ok(finish(w))
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    let bytes = w.into_inner().expect("writing to memory");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRow {
    pub request: u64,
    pub instance: String,
    pub start_us: u64,
    pub completion_us: Option<u64>,
    pub latency_us: Option<u64>,
    pub flush_waits: u32,
}

impl From<&RequestMetrics> for RequestRow {
    fn from(r: &RequestMetrics) -> Self {
        Self {
            request: r.request,
            instance: r.instance.to_string(),
            start_us: r.start_us,
            completion_us: r.completion_us,
            latency_us: r.latency_us(),
            flush_waits: r.flush_waits,
        }
    }
}

pub fn metrics_csv(requests: &[RequestMetrics]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in requests {
        w.serialize(RequestRow::from(r))?;
    }
    if requests.is_empty() {
        w.write_record(["request", "instance", "start_us", "completion_us", "latency_us", "flush_waits"])?;
    }
    Ok(finish(w))
}

/// Latencies of the completed requests in a `metrics.csv`.
pub fn read_latencies(text: &str) -> Result<Vec<u64>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<RequestRow>() {
        if let Some(l) = row?.latency_us {
            out.push(l);
        }
    }
    Ok(out)
}

/// `second,completions`, one row per simulated or wall-clock second.
pub fn throughput_csv(series: &[u64]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["second", "completions"])?;
    for (s, c) in series.iter().enumerate() {
        w.serialize((s, c))?;
    }
    Ok(finish(w))
}

/// `partition,flushes`.
pub fn flushes_csv(flushes: &[u64]) -> Result<String, MetricsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["partition", "flushes"])?;
    for (p, f) in flushes.iter().enumerate() {
        w.serialize((p, f))?;
    }
    Ok(finish(w))
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], q: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Mean completions per second before a rebalance (skipping the first,
/// warm-up second) and over the ten whole seconds after it.
pub fn scaleout_rates(series: &[u64], rebalance_at_us: u64) -> (Option<f64>, Option<f64>) {
    let mean = |s: &[u64]| (!s.is_empty()).then(|| s.iter().sum::<u64>() as f64 / s.len() as f64);
    let r = (rebalance_at_us / 1_000_000) as usize;
    let pre = series.get(1..r.min(series.len())).and_then(mean);
    let after = r + usize::from(!rebalance_at_us.is_multiple_of(1_000_000));
    let post = series.get(after.min(series.len())..(after + 10).min(series.len())).and_then(mean);
    (pre, post)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub median_us: Option<u64>,
    pub p95_us: Option<u64>,
    /// Completed requests per second over the run.
    pub throughput: f64,
}

impl Summary {
    pub fn new(requests: &[RequestMetrics], elapsed_us: u64) -> Self {
        let mut l: Vec<u64> = requests.iter().filter_map(RequestMetrics::latency_us).collect();
        l.sort_unstable();
        let throughput = if elapsed_us == 0 { 0.0 } else { l.len() as f64 * 1e6 / elapsed_us as f64 };
        Self { count: l.len(), median_us: percentile(&l, 0.5), p95_us: percentile(&l, 0.95), throughput }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = |v: Option<u64>| v.map_or("-".to_string(), |v| format!("{:.3} ms", v as f64 / 1000.0));
        write!(
            f,
            "count {}  median {}  p95 {}  throughput {:.1}/s",
            self.count,
            ms(self.median_us),
            ms(self.p95_us),
            self.throughput
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InstanceId;
    use proptest::prelude::*;

    #[test]
    fn ecdf_examples() {
        assert_eq!(emit_ecdf(&[3, 1, 2]).unwrap(), vec![(1, 1.0 / 3.0), (2, 2.0 / 3.0), (3, 1.0)]);
        assert_eq!(emit_ecdf(&[5]).unwrap(), vec![(5, 1.0)]);
        assert!(matches!(emit_ecdf(&[]), Err(MetricsError::EmptySample)));
        let csv = ecdf_csv(&emit_ecdf(&[2, 1]).unwrap()).unwrap();
        assert_eq!(csv, "latency_us,fraction\n1,0.5\n2,1.0\n");
    }

    proptest! {
        #[test]
        fn ecdf_is_monotone(sample in prop::collection::vec(0u64..10_000, 1..1000)) {
            let e = emit_ecdf(&sample).unwrap();
            prop_assert_eq!(e.len(), sample.len());
            prop_assert_eq!(e.last().unwrap().1, 1.0);
            for w in e.windows(2) {
                prop_assert!(w[0].0 <= w[1].0 && w[0].1 < w[1].1);
            }
        }
    }

    #[test]
    fn metrics_roundtrip() {
        let r = |i: u64, c: Option<u64>| RequestMetrics {
            request: i,
            instance: InstanceId::new("HelloSequence", format!("r{i}")),
            start_us: 10,
            completion_us: c,
            flush_waits: 1,
            result: None,
            completions: c.map_or(0, |_| 1),
        };
        let text = metrics_csv(&[r(0, Some(30)), r(1, None), r(2, Some(15))]).unwrap();
        assert!(text.starts_with("request,instance,start_us,completion_us,latency_us,flush_waits\n0,HelloSequence@r0,"));
        assert_eq!(read_latencies(&text).unwrap(), vec![20, 5]);
        assert!(read_latencies(&metrics_csv(&[]).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn scaleout_windows() {
        let series = [50, 100, 100, 100, 300, 400, 400, 400];
        assert_eq!(scaleout_rates(&series, 4_000_000), (Some(100.0), Some(375.0)));
        assert_eq!(scaleout_rates(&series, 3_500_000), (Some(100.0), Some(375.0)));
        assert_eq!(scaleout_rates(&series, 0), (None, Some(231.25)));
        assert_eq!(scaleout_rates(&[], 0), (None, None));
    }

    #[test]
    fn percentiles() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 0.5), Some(50));
        assert_eq!(percentile(&v, 0.95), Some(95));
        assert_eq!(percentile(&[7], 0.95), Some(7));
        assert_eq!(percentile(&[], 0.5), None);
    }
}
