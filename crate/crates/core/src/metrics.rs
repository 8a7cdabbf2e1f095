//! Accuracy matrix, average accuracy and forgetting, run reports and their
//! aggregation over seeds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

/// `100 * correct / N`.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invariant(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invariant("accuracy of an empty split"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// `rows[t][i]`: accuracy (%) on domain `i` after training stage `t`.
///
/// A continual run fills a lower triangle; a joint run has one row covering
/// every domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub domains: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(domains: Vec<String>) -> Self {
        AccuracyMatrix {
            domains,
            rows: Vec::new(),
        }
    }

    pub fn from_rows(domains: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(domains);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.is_empty() || row.len() > self.num_domains() {
            return Err(Error::invariant(format!(
                "accuracy row of length {} for {} domains",
                row.len(),
                self.num_domains()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::invariant(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    /// Whether the final row covers every domain.
    pub fn is_complete(&self) -> bool {
        self.rows.last().is_some_and(|r| r.len() == self.num_domains())
    }

    fn final_row(&self) -> Result<&[f64]> {
        match self.rows.last() {
            Some(r) if r.len() == self.num_domains() => Ok(r),
            Some(r) => Err(Error::invariant(format!(
                "final row has {} of {} entries",
                r.len(),
                self.num_domains()
            ))),
            None => Err(Error::invariant("accuracy matrix has no rows")),
        }
    }

    /// Largest minus final accuracy per domain.
    pub fn forgetting_per_domain(&self) -> Result<Vec<f64>> {
        let last = self.final_row()?;
        Ok((0..self.num_domains())
            .map(|i| {
                let peak = self
                    .rows
                    .iter()
                    .filter_map(|r| r.get(i).copied())
                    .fold(f64::NEG_INFINITY, f64::max);
                (peak - last[i]).max(0.0)
            })
            .collect())
    }

    /// Table layout, 2 decimals; cells above the diagonal stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("after");
        for d in &self.domains {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        let joint = self.rows.len() == 1 && self.num_domains() > 1 && self.is_complete();
        for (t, row) in self.rows.iter().enumerate() {
            if joint {
                out.push_str("After joint");
            } else {
                out.push_str(&format!("After D{}", t + 1));
            }
            for i in 0..self.num_domains() {
                out.push(',');
                if let Some(v) = row.get(i) {
                    out.push_str(&format!("{v:.2}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of the final row.
pub fn average_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    let last = matrix.final_row()?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean gap between peak and final accuracy, over all domains or, with
/// `include_last = false`, over every domain but the last.
pub fn average_forgetting(matrix: &AccuracyMatrix, include_last: bool) -> Result<f64> {
    let gaps = matrix.forgetting_per_domain()?;
    let used = if include_last {
        &gaps[..]
    } else {
        &gaps[..gaps.len() - 1]
    };
    if used.is_empty() {
        return Ok(0.0);
    }
    Ok(used.iter().sum::<f64>() / used.len() as f64)
}

/// Runs `f` and returns its result with the elapsed wall time in seconds.
pub fn measure_timing<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    /// 1-based within the training phase.
    pub epoch: usize,
    /// `None` for the joint phase over all domains.
    pub domain_id: Option<u8>,
    pub mean_loss: f64,
}

pub fn loss_log_csv(entries: &[LossEntry]) -> String {
    let mut out = String::from("epoch,domain_id,mean_loss\n");
    for e in entries {
        let d = e.domain_id.map_or_else(|| "all".to_string(), |d| d.to_string());
        out.push_str(&format!("{},{},{}\n", e.epoch, d, e.mean_loss));
    }
    out
}

/// Machine-dependent measurements, kept apart from the deterministic report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Wall seconds per training phase.
    pub train_seconds: Vec<f64>,
    /// Wall seconds per evaluation pass over the seen test splits.
    pub inference_seconds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seed: u64,
    pub matrix: AccuracyMatrix,
    pub average_accuracy: f64,
    pub average_forgetting: f64,
    pub average_forgetting_excluding_last: f64,
    pub parameter_count: usize,
    pub model_size_bytes: u64,
    pub peak_memory_bytes: u64,
    pub flops: u64,
    pub buffer_memory_bytes: u64,
    pub loss_log: Vec<LossEntry>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
}

impl RunReport {
    /// Fills the scalar metrics from `matrix`.
    pub fn summarize(&mut self) -> Result<()> {
        self.average_accuracy = average_accuracy(&self.matrix)?;
        self.average_forgetting = average_forgetting(&self.matrix, true)?;
        self.average_forgetting_excluding_last = average_forgetting(&self.matrix, false)?;
        Ok(())
    }

    /// Whether the stored scalars match the matrix within `tol`.
    pub fn is_consistent(&self, tol: f64) -> bool {
        let check = |stored: f64, recomputed: Result<f64>| {
            recomputed.is_ok_and(|r| (r - stored).abs() <= tol)
        };
        check(self.average_accuracy, average_accuracy(&self.matrix))
            && check(self.average_forgetting, average_forgetting(&self.matrix, true))
            && check(
                self.average_forgetting_excluding_last,
                average_forgetting(&self.matrix, false),
            )
    }

    /// JSON without the timing section: identical across reruns.
    pub fn deterministic_json(&self) -> String {
        let mut copy = self.clone();
        copy.timing = None;
        serde_json::to_string_pretty(&copy).expect("report serializes") + "\n"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("report.json", e.line() as u64, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n-1) standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    /// Order-independent: values are summed in sorted order.
    pub fn of(values: &[f64]) -> MeanStd {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() < 2 {
            0.0
        } else {
            let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
            sq.sort_by(f64::total_cmp);
            (sq.iter().sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }

    /// `86.58 (± 0.36)`.
    pub fn display(&self) -> String {
        format!("{:.2} (± {:.2})", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Shared configuration with the seed cleared.
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub average_accuracy: MeanStd,
    pub average_forgetting: MeanStd,
    pub average_forgetting_excluding_last: MeanStd,
    /// Per-cell statistics of the final matrix row.
    pub final_row: Vec<MeanStd>,
}

/// Mean and sample standard deviation over at least two runs whose configs
/// differ only in seed.
pub fn aggregate_runs(reports: &[RunReport]) -> Result<Aggregate> {
    if reports.len() < 2 {
        return Err(Error::invariant(format!(
            "aggregation needs at least 2 runs, got {}",
            reports.len()
        )));
    }
    summarize_runs(reports)
}

/// [`aggregate_runs`] that also accepts a single run (with zero spread).
pub fn summarize_runs(reports: &[RunReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or_else(|| Error::invariant("no runs to aggregate"))?;
    let config = first.config.without_seed();
    for r in reports {
        if r.config.without_seed() != config {
            return Err(Error::invariant(format!(
                "run with seed {} has a different configuration from seed {}",
                r.seed, first.seed
            )));
        }
        if r.matrix.domains != first.matrix.domains {
            return Err(Error::invariant("runs cover different domains"));
        }
    }
    let stat = |f: &dyn Fn(&RunReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let width = first.matrix.num_domains();
    let final_row = (0..width)
        .map(|i| {
            let vals: Result<Vec<f64>> = reports
                .iter()
                .map(|r| {
                    r.matrix
                        .final_row()
                        .map(|row| row[i])
                })
                .collect();
            vals.map(|v| MeanStd::of(&v))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    Ok(Aggregate {
        config,
        seeds,
        average_accuracy: stat(&|r| r.average_accuracy),
        average_forgetting: stat(&|r| r.average_forgetting),
        average_forgetting_excluding_last: stat(&|r| r.average_forgetting_excluding_last),
        final_row,
    })
}
