//! Analytic speedup model: per-iteration compute time plus an all-reduce
//! cost model, for dense and sparse gradient exchange.
//!
//! Dense gradients use a ring all-reduce. Sparse gradients are aggregated in
//! `ceil(log2 N)` recursive-doubling rounds whose message density, in the
//! worst case of disjoint supports, doubles every round.

use std::fmt;
use std::str::FromStr;

use crate::error::{DgcError, Result};

/// How sparse messages are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseCollective {
    /// `ceil(log2 N)` rounds, round `r` density `min(1, d * 2^r)`.
    RecursiveDoubling,
    /// Ring reduce-scatter then all-gather over `N` chunks. The chunk density
    /// grows linearly with the number of merged contributions.
    Ring,
}

impl SparseCollective {
    pub fn name(self) -> &'static str {
        match self {
            SparseCollective::RecursiveDoubling => "recursive_doubling",
            SparseCollective::Ring => "ring",
        }
    }
}

impl fmt::Display for SparseCollective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SparseCollective {
    type Err = DgcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recursive_doubling" => Ok(SparseCollective::RecursiveDoubling),
            "ring" => Ok(SparseCollective::Ring),
            other => Err(DgcError::InvalidParameter(format!(
                "unknown sparse collective `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfParams {
    /// Seconds of forward/backward compute per iteration on one node.
    pub t_compute: f64,
    /// Dense gradient size in bytes.
    pub model_bytes: f64,
    /// Post-sparsification density in `(0, 1]`.
    pub density: f64,
    /// Link bandwidth in bits per second.
    pub bandwidth: f64,
    /// Fixed cost per communication round, seconds.
    pub latency_per_round: f64,
    /// Encoded bytes per dense byte of a surviving element (6/4 for the
    /// run-length codec).
    pub codec_overhead: f64,
    pub sparse_collective: SparseCollective,
}

impl Default for PerfParams {
    fn default() -> Self {
        Self {
            t_compute: 0.5,
            model_bytes: 97.49e6,
            density: 0.001,
            bandwidth: 1e9,
            latency_per_round: 50e-6,
            codec_overhead: 1.5,
            sparse_collective: SparseCollective::RecursiveDoubling,
        }
    }
}

impl PerfParams {
    /// AlexNet-sized gradient (232.56 MB) on 1 Gbps Ethernet at 99.9%
    /// sparsity. The compute time is a declared default, not a measurement.
    pub fn alexnet_1gbps() -> Self {
        Self {
            t_compute: ALEXNET_T_COMPUTE,
            model_bytes: 232.56e6,
            density: 0.001,
            bandwidth: 1e9,
            ..Self::default()
        }
    }

    /// ResNet-50-sized gradient (97.49 MB).
    pub fn resnet50_1gbps() -> Self {
        Self {
            t_compute: RESNET50_T_COMPUTE,
            model_bytes: 97.49e6,
            ..Self::alexnet_1gbps()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_compute", self.t_compute),
            ("model_bytes", self.model_bytes),
            ("bandwidth", self.bandwidth),
            ("codec_overhead", self.codec_overhead),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DgcError::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.latency_per_round >= 0.0 && self.latency_per_round.is_finite()) {
            return Err(DgcError::InvalidParameter(format!(
                "latency must be non-negative, got {}",
                self.latency_per_round
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(DgcError::InvalidParameter(format!(
                "density {} outside (0, 1]",
                self.density
            )));
        }
        Ok(())
    }
}

/// Declared per-iteration compute time for the AlexNet preset, seconds.
pub const ALEXNET_T_COMPUTE: f64 = 1.0;
/// Declared per-iteration compute time for the ResNet-50 preset, seconds.
pub const RESNET50_T_COMPUTE: f64 = 0.5;

/// `ceil(log2 n)` for `n >= 1`.
pub fn doubling_rounds(n: usize) -> u32 {
    if n <= 1 {
        0
    } else {
        usize::BITS - (n - 1).leading_zeros()
    }
}

fn transfer_seconds(bytes: f64, bandwidth: f64) -> f64 {
    bytes * 8.0 / bandwidth
}

/// Ring all-reduce of the dense gradient.
pub fn dense_comm_time(params: &PerfParams, nodes: usize) -> f64 {
    if nodes <= 1 {
        return 0.0;
    }
    let n = nodes as f64;
    2.0 * (n - 1.0) / n * transfer_seconds(params.model_bytes, params.bandwidth)
        + 2.0 * (n - 1.0) * params.latency_per_round
}

/// Worst-case bytes each node sends per round of sparse aggregation.
pub fn sparse_round_bytes(params: &PerfParams, nodes: usize) -> Vec<f64> {
    if nodes <= 1 {
        return Vec::new();
    }
    match params.sparse_collective {
        SparseCollective::RecursiveDoubling => (1..=doubling_rounds(nodes))
            .map(|r| {
                params.model_bytes
                    * (params.density * 2f64.powi(r as i32)).min(1.0)
                    * params.codec_overhead
            })
            .collect(),
        SparseCollective::Ring => {
            let n = nodes as f64;
            let chunk = params.model_bytes / n * params.codec_overhead;
            // Reduce-scatter step s carries s merged contributions, all-gather
            // steps carry the fully reduced chunk.
            let scatter = (1..nodes).map(|s| chunk * (params.density * s as f64).min(1.0));
            let gather = (1..nodes).map(|_| chunk * (params.density * n).min(1.0));
            scatter.chain(gather).collect()
        }
    }
}

/// Communication time of one sparse aggregation.
pub fn sparse_comm_time(params: &PerfParams, nodes: usize) -> f64 {
    sparse_round_bytes(params, nodes)
        .iter()
        .map(|&b| transfer_seconds(b, params.bandwidth) + params.latency_per_round)
        .fold(0.0, |acc, t| acc + t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exchange {
    Dense,
    Sparse,
}

pub fn comm_time(params: &PerfParams, nodes: usize, exchange: Exchange) -> f64 {
    match exchange {
        Exchange::Dense => dense_comm_time(params, nodes),
        Exchange::Sparse => sparse_comm_time(params, nodes),
    }
}

/// `N * t_compute / (t_compute + comm_time)`.
pub fn speedup(params: &PerfParams, nodes: usize, exchange: Exchange) -> f64 {
    let comm = comm_time(params, nodes, exchange);
    nodes as f64 * params.t_compute / (params.t_compute + comm)
}

/// Smallest density at which sparse aggregation moves at least as many
/// bytes as the dense ring, found by bisection. `None` if sparse stays
/// cheaper up to full density.
pub fn crossover_density(params: &PerfParams, nodes: usize) -> Option<f64> {
    if nodes <= 1 {
        return None;
    }
    let dense_bytes = 2.0 * (nodes as f64 - 1.0) / nodes as f64 * params.model_bytes;
    let sparse_bytes = |d: f64| {
        let p = PerfParams {
            density: d,
            ..params.clone()
        };
        sparse_round_bytes(&p, nodes).iter().sum::<f64>()
    };
    if sparse_bytes(1.0) < dense_bytes {
        return None;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if sparse_bytes(mid) >= dense_bytes {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// One row of the speedup table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedupRow {
    pub nodes: usize,
    pub dense_speedup: f64,
    pub dgc_speedup: f64,
    pub dense_comm_s: f64,
    pub dgc_comm_s: f64,
}

pub const SPEEDUP_CSV_HEADER: &str = "nodes,dense_speedup,dgc_speedup,dense_comm_s,dgc_comm_s";

/// Rows for `N = 1, 2, 4, ...` up to and including `max_nodes`.
pub fn speedup_table(params: &PerfParams, max_nodes: usize) -> Vec<SpeedupRow> {
    std::iter::successors(Some(1usize), |&n| n.checked_mul(2))
        .take_while(|&n| n <= max_nodes.max(1))
        .map(|n| SpeedupRow {
            nodes: n,
            dense_speedup: speedup(params, n, Exchange::Dense),
            dgc_speedup: speedup(params, n, Exchange::Sparse),
            dense_comm_s: dense_comm_time(params, n),
            dgc_comm_s: sparse_comm_time(params, n),
        })
        .collect()
}

pub fn speedup_csv(rows: &[SpeedupRow]) -> String {
    let mut out = String::from(SPEEDUP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.nodes, r.dense_speedup, r.dgc_speedup, r.dense_comm_s, r.dgc_comm_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_latency(p: PerfParams) -> PerfParams {
        PerfParams {
            latency_per_round: 0.0,
            ..p
        }
    }

    #[test]
    fn rounds() {
        assert_eq!(doubling_rounds(1), 0);
        assert_eq!(doubling_rounds(2), 1);
        assert_eq!(doubling_rounds(3), 2);
        assert_eq!(doubling_rounds(4), 2);
        assert_eq!(doubling_rounds(64), 6);
        assert_eq!(doubling_rounds(65), 7);
    }

    #[test]
    fn single_node_has_no_communication() {
        let p = PerfParams::default();
        assert_eq!(dense_comm_time(&p, 1), 0.0);
        assert_eq!(sparse_comm_time(&p, 1), 0.0);
        assert_eq!(speedup(&p, 1, Exchange::Dense), 1.0);
        assert_eq!(speedup(&p, 1, Exchange::Sparse), 1.0);
    }

    #[test]
    fn dense_two_nodes_resnet_sized() {
        let p = zero_latency(PerfParams {
            model_bytes: 97.49e6,
            ..PerfParams::default()
        });
        let t = dense_comm_time(&p, 2);
        assert!((t - 97.49 * 8.0 / 1000.0).abs() < 1e-12);
        assert!((t - 0.78).abs() < 0.01);
    }

    #[test]
    fn sparse_rounds_match_geometric_sum() {
        let p = zero_latency(PerfParams::default());
        let rounds = sparse_round_bytes(&p, 64);
        assert_eq!(rounds.len(), 6);
        let densities: Vec<f64> = rounds.iter().map(|b| b / p.model_bytes / 1.5).collect();
        assert!((densities[0] - 0.002).abs() < 1e-15);
        assert!((densities[1] - 0.004).abs() < 1e-15);
        // sum_{r=1..R} d*2^r = d*(2^(R+1) - 2) while uncapped
        let closed = p.model_bytes * 1.5 * 0.001 * (2f64.powi(7) - 2.0);
        let total: f64 = rounds.iter().sum();
        assert!((total - closed).abs() <= 1e-9 * closed);
    }

    #[test]
    fn round_density_is_capped() {
        let p = PerfParams {
            density: 0.3,
            ..PerfParams::default()
        };
        let rounds = sparse_round_bytes(&p, 16);
        assert_eq!(rounds[0], p.model_bytes * 0.6 * 1.5);
        assert_eq!(rounds[1], p.model_bytes * 1.5);
        assert_eq!(rounds[3], p.model_bytes * 1.5);
    }

    #[test]
    fn perfect_scaling_without_communication() {
        let p = PerfParams {
            bandwidth: f64::MAX,
            latency_per_round: 0.0,
            ..PerfParams::default()
        };
        assert_eq!(speedup(&p, 32, Exchange::Dense), 32.0);
    }

    #[test]
    fn alexnet_preset_beats_forty_at_64_nodes() {
        let p = PerfParams::alexnet_1gbps();
        assert!(speedup(&p, 64, Exchange::Sparse) > 40.0);
        assert!(speedup(&p, 64, Exchange::Dense) < speedup(&p, 64, Exchange::Sparse));
    }

    #[test]
    fn crossover_is_where_bytes_meet() {
        let p = PerfParams::default();
        let d = crossover_density(&p, 8).unwrap();
        let dense_bytes = 2.0 * 7.0 / 8.0 * p.model_bytes;
        let at = PerfParams {
            density: d,
            ..p.clone()
        };
        let sparse: f64 = sparse_round_bytes(&at, 8).iter().sum();
        assert!((sparse - dense_bytes).abs() <= 1e-6 * dense_bytes);
        assert!(crossover_density(&p, 1).is_none());
    }

    #[test]
    fn ring_variant_is_available() {
        let p = PerfParams {
            sparse_collective: SparseCollective::Ring,
            ..PerfParams::default()
        };
        assert_eq!(sparse_round_bytes(&p, 8).len(), 14);
        assert!(sparse_comm_time(&p, 8) < dense_comm_time(&p, 8));
        assert_eq!(
            "ring".parse::<SparseCollective>().unwrap(),
            SparseCollective::Ring
        );
    }

    #[test]
    fn table_and_csv() {
        let rows = speedup_table(&PerfParams::default(), 100);
        let nodes: Vec<usize> = rows.iter().map(|r| r.nodes).collect();
        assert_eq!(nodes, vec![1, 2, 4, 8, 16, 32, 64]);
        let csv = speedup_csv(&rows);
        assert!(
            csv.starts_with("nodes,dense_speedup,dgc_speedup,dense_comm_s,dgc_comm_s\n1,1,1,0,0\n"),
            "{csv}"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn params() -> impl Strategy<Value = PerfParams> {
            (
                0.01f64..5.0,
                1e6f64..1e9,
                1e-4f64..1.0,
                1e8f64..1e11,
                0.0f64..1e-3,
            )
                .prop_map(
                    |(t_compute, model_bytes, density, bandwidth, latency_per_round)| PerfParams {
                        t_compute,
                        model_bytes,
                        density,
                        bandwidth,
                        latency_per_round,
                        ..PerfParams::default()
                    },
                )
        }

        proptest! {
            #[test]
            fn speedup_monotonicity(p in params(), n in 2usize..200, f in 1.01f64..4.0) {
                for ex in [Exchange::Dense, Exchange::Sparse] {
                    let base = speedup(&p, n, ex);
                    let bigger = PerfParams { model_bytes: p.model_bytes * f, ..p.clone() };
                    prop_assert!(speedup(&bigger, n, ex) <= base);
                    let denser = PerfParams { density: (p.density * f).min(1.0), ..p.clone() };
                    prop_assert!(speedup(&denser, n, ex) <= base);
                    let faster = PerfParams { bandwidth: p.bandwidth * f, ..p.clone() };
                    prop_assert!(speedup(&faster, n, ex) >= base);
                    let slower = PerfParams { t_compute: p.t_compute * f, ..p.clone() };
                    prop_assert!(speedup(&slower, n, ex) >= base);
                }
            }
        }
    }
}
