use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{base_accuracy, both_accuracy, novel_accuracy, EvalConfig, Metric};
use crate::data::{ClassSplit, Dataset, SplitPart};
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, Model};

/// A named per-seed series reported next to the headline metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Series {
    pub fn new(name: &str, per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Self { name: name.to_string(), per_seed, mean, std }
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
    pub extras: Vec<Series>,
    pub config: EvalConfig,
    pub checkpoint_hash: String,
}

impl EvalReport {
    pub fn new(metric: Metric, per_seed: Vec<f64>, extras: Vec<Series>, config: &EvalConfig, checkpoint_hash: &str) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Self { metric, mean, std, per_seed, extras, config: config.clone(), checkpoint_hash: checkpoint_hash.to_string() }
    }

    pub fn series(&self, name: &str) -> Option<&Series> {
        self.extras.iter().find(|s| s.name == name)
    }

    fn echo(&self) -> String {
        let c = &self.config;
        format!(
            "metric={} n_way={} k_shot={} q_per_class={} episodes={} support={} seeds={:?} checkpoint={}",
            self.metric.as_str(),
            c.n_way,
            c.k_shot,
            c.q_per_class,
            c.n_episodes,
            serde_json::to_value(c.support_domain).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            c.seeds,
            self.checkpoint_hash
        )
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.echo());
        let mut names = vec![format!("acc@{}", self.metric.as_str())];
        names.extend(self.extras.iter().map(|s| s.name.clone()));
        let width = names.iter().map(String::len).max().unwrap_or(8).max(8);
        let _ = write!(out, "{:<8}", "seed");
        for n in &names {
            let _ = write!(out, " {n:>width$}");
        }
        out.push('\n');
        let columns: Vec<&[f64]> = std::iter::once(self.per_seed.as_slice()).chain(self.extras.iter().map(|s| s.per_seed.as_slice())).collect();
        for (i, seed) in self.config.seeds.iter().enumerate() {
            let _ = write!(out, "{seed:<8}");
            for col in &columns {
                let _ = write!(out, " {:>width$.6}", col[i]);
            }
            out.push('\n');
        }
        let stats: Vec<(f64, f64)> = std::iter::once((self.mean, self.std)).chain(self.extras.iter().map(|s| (s.mean, s.std))).collect();
        for (label, pick) in [("mean", 0), ("std", 1)] {
            let _ = write!(out, "{label:<8}");
            for s in &stats {
                let v = if pick == 0 { s.0 } else { s.1 };
                let _ = write!(out, " {v:>width$.6}");
            }
            out.push('\n');
        }
        out
    }

    /// Comma-separated rows `metric,series,seed,value`, one per seed and series.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\nmetric,series,seed,value\n", self.echo());
        let m = self.metric.as_str();
        for (seed, v) in self.config.seeds.iter().zip(&self.per_seed) {
            let _ = writeln!(out, "{m},acc,{seed},{v:.6}");
        }
        for s in &self.extras {
            for (seed, v) in self.config.seeds.iter().zip(&s.per_seed) {
                let _ = writeln!(out, "{m},{},{seed},{v:.6}", s.name);
            }
        }
        out
    }
}

/// One model in an ablation matrix.
pub struct MatrixEntry<'a> {
    pub label: String,
    pub model: &'a Model,
    pub table: &'a EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub ablation: String,
    pub shots: usize,
    pub seed: u64,
    pub novel: Option<f64>,
    pub base: Option<f64>,
    pub both: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMatrix {
    pub metrics: Vec<Metric>,
    pub config: EvalConfig,
    pub rows: Vec<MatrixRow>,
}

/// Evaluates every entry at every shot count and seed in `cfg.seeds`.
pub fn run_matrix(
    entries: &[MatrixEntry<'_>],
    metrics: &[Metric],
    shots: &[usize],
    cfg: &EvalConfig,
    dataset: &Dataset,
    split: &ClassSplit,
) -> Result<ReportMatrix> {
    if entries.is_empty() || metrics.is_empty() || shots.is_empty() {
        return Err(Error::Config("matrix needs at least one model, metric and shot count".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    for e in entries {
        for &k in shots {
            let c = EvalConfig { k_shot: k, ..cfg.clone() };
            for &seed in &cfg.seeds {
                let mut row = MatrixRow { ablation: e.label.clone(), shots: k, seed, novel: None, base: None, both: None };
                for m in metrics {
                    match m {
                        Metric::Novel => {
                            row.novel = Some(novel_accuracy(e.model, e.table, dataset, split, SplitPart::Novel, &c, seed)?)
                        }
                        Metric::Base => row.base = Some(base_accuracy(e.model, e.table, dataset, split, &c, seed)?.after),
                        Metric::Both => row.both = Some(both_accuracy(e.model, e.table, dataset, split, &c, seed)?.both),
                    }
                }
                rows.push(row);
            }
        }
    }
    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    Ok(ReportMatrix { metrics, config: cfg.clone(), rows })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

impl ReportMatrix {
    fn values(&self, r: &MatrixRow) -> Vec<String> {
        self.metrics
            .iter()
            .map(|m| match m {
                Metric::Novel => cell(r.novel),
                Metric::Base => cell(r.base),
                Metric::Both => cell(r.both),
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = format!("# n_way={} q_per_class={} episodes={} seeds={:?}\n", c.n_way, c.q_per_class, c.n_episodes, c.seeds);
        let aw = self.rows.iter().map(|r| r.ablation.len()).max().unwrap_or(0).max("ablation".len());
        let _ = write!(out, "{:<aw$} {:>5} {:>6}", "ablation", "shots", "seed");
        for m in &self.metrics {
            let _ = write!(out, " {:>10}", format!("acc@{}", m.as_str()));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<aw$} {:>5} {:>6}", r.ablation, r.shots, r.seed);
            for v in self.values(r) {
                let _ = write!(out, " {v:>10}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ablation,shots,seed");
        for m in &self.metrics {
            let _ = write!(out, ",acc_{}", m.as_str());
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.ablation, r.shots, r.seed);
            for v in self.values(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Mean over seeds of one metric for an ablation label and shot count.
    pub fn mean(&self, ablation: &str, shots: usize, metric: Metric) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.ablation == ablation && r.shots == shots)
            .filter_map(|r| match metric {
                Metric::Novel => r.novel,
                Metric::Base => r.base,
                Metric::Both => r.both,
            })
            .collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn text_and_csv_layout() {
        let cfg = EvalConfig { seeds: vec![3, 4], ..Default::default() };
        let r = EvalReport::new(Metric::Base, vec![0.5, 0.75], vec![Series::new("pre_increment", vec![0.5, 0.8])], &cfg, "abc");
        let text = r.to_text();
        assert!(text.starts_with("# metric=base n_way=5 k_shot=5"));
        assert!(text.contains("checkpoint=abc"));
        assert!(text.lines().any(|l| l.starts_with("mean") && l.contains("0.625000")));
        let csv = r.to_csv();
        assert_eq!(csv.lines().filter(|l| l.starts_with("base,")).count(), 4);
    }
}
