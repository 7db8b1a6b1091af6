//! Per-iteration metrics and their CSV form.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::codec::DENSE_ELEMENT_BYTES;

pub const TRACE_CSV_HEADER: &str =
    "iteration,epoch,loss,eval,bytes_per_node,union_density,wallclock_est";

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    /// Mean over nodes of the batch loss before the update.
    pub loss: f64,
    /// Task metric, recorded on the last iteration of each epoch.
    pub eval: Option<f64>,
    /// Encoded bytes each node sent, in node order.
    pub bytes_per_node: Vec<usize>,
    /// Density of the aggregated gradient's support.
    pub union_density: f64,
    /// Cumulative modeled seconds.
    pub wallclock_est: f64,
}

impl IterationRecord {
    pub fn mean_bytes(&self) -> f64 {
        self.bytes_per_node.iter().sum::<usize>() as f64 / self.bytes_per_node.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<IterationRecord>,
}

impl MetricsTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval)
    }

    /// Bytes sent by all nodes over the whole run.
    pub fn total_bytes(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.bytes_per_node.iter().sum::<usize>())
            .sum()
    }

    /// Mean over iterations of dense bytes over mean encoded bytes per node.
    /// Iterations where nothing was sent are skipped; `None` if all were.
    pub fn mean_compression_ratio(&self, param_count: usize) -> Option<f64> {
        let dense = (param_count * DENSE_ELEMENT_BYTES) as f64;
        let ratios: Vec<f64> = self
            .records
            .iter()
            .map(IterationRecord::mean_bytes)
            .filter(|&b| b > 0.0)
            .map(|b| dense / b)
            .collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let eval = r.eval.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.epoch,
                r.loss,
                eval,
                r.mean_bytes(),
                r.union_density,
                r.wallclock_est
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(iteration: usize, bytes: Vec<usize>, eval: Option<f64>) -> IterationRecord {
        IterationRecord {
            iteration,
            epoch: 0,
            loss: 0.5,
            eval,
            bytes_per_node: bytes,
            union_density: 0.25,
            wallclock_est: 0.1 * (iteration + 1) as f64,
        }
    }

    #[test]
    fn csv_layout() {
        let t = MetricsTrace {
            records: vec![
                record(0, vec![6, 12], None),
                record(1, vec![6, 6], Some(0.75)),
            ],
        };
        assert_eq!(
            t.to_csv(),
            format!("{TRACE_CSV_HEADER}\n0,0,0.5,,9,0.25,0.1\n1,0,0.5,0.75,6,0.25,0.2\n")
        );
        assert_eq!(t.total_bytes(), 30);
        assert_eq!(t.last_eval(), Some(0.75));
    }

    #[test]
    fn compression_ratio_skips_silent_iterations() {
        let t = MetricsTrace {
            records: vec![
                record(0, vec![6], None),
                record(1, vec![0], None),
                record(2, vec![12], None),
            ],
        };
        assert_eq!(t.mean_compression_ratio(3), Some((2.0 + 1.0) / 2.0));
        let silent = MetricsTrace {
            records: vec![record(0, vec![0], None)],
        };
        assert_eq!(silent.mean_compression_ratio(3), None);
    }
}
