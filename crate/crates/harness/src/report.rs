use std::path::Path;

use serde::{Deserialize, Serialize};

/// Output of one benchmark run. Every metric comes from instrumented
/// counters or recorded timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
}

impl BenchReport {
    pub fn new(scenario: &str, seed: u64, config: impl Serialize, metrics: impl Serialize) -> Self {
        BenchReport {
            scenario: scenario.to_string(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            metrics: serde_json::to_value(metrics).expect("metrics serialize"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json() + "\n")
    }
}

/// Nearest-rank percentiles of a sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Percentiles {
    pub fn of(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Percentiles::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let rank = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
        Percentiles { count: v.len(), p50: rank(0.50), p95: rank(0.95), p99: rank(0.99), max: v[v.len() - 1] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let p = Percentiles::of(&s);
        assert_eq!((p.p50, p.p95, p.p99, p.max, p.count), (50.0, 95.0, 99.0, 100.0, 100));
        assert_eq!(Percentiles::of(&[7.0]).p99, 7.0);
        assert_eq!(Percentiles::of(&[]).count, 0);
    }

    #[test]
    fn report_round_trips() {
        let r = BenchReport::new("x", 3, serde_json::json!({"n": 1}), Percentiles::of(&[1.0, 2.0]));
        let back: BenchReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
