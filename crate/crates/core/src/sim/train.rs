//! The synchronous training loop.

use std::sync::Arc;

use rayon::prelude::*;

use crate::codec::{decode, encode, DENSE_ELEMENT_BYTES};
use crate::engine::{warmup_sparsity, ClipConfig, DgcNodeState, Variant};
use crate::error::{DgcError, Result};
use crate::perfmodel::{dense_comm_time, PerfParams};
use crate::rng::{derive_stream, Purpose};
use crate::vector::{GradientVector, LayerLayout};

use super::allreduce::{allreduce_dense, allreduce_sparse};
use super::config::{Algorithm, TrainConfig};
use super::data::{epoch_permutation, sample_minibatch};
use super::model::{build_model, grad, to_f64, Model};
use super::trace::{IterationRecord, MetricsTrace};

/// Losses above this abort the run.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// How the aggregated gradient turns into a weight update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalRule {
    /// `w <- w - lr*G`; momentum already lives in the nodes.
    Plain,
    /// `u <- m*u + G; w <- w - lr*u`
    Momentum,
    /// `u <- m*u + G; w <- w - lr*(m*u + G)`
    Nesterov,
}

impl GlobalRule {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        match algorithm {
            Algorithm::Dense => GlobalRule::Momentum,
            Algorithm::DenseNesterov => GlobalRule::Nesterov,
            Algorithm::Sparse(v) if v.is_corrected() => GlobalRule::Plain,
            Algorithm::Sparse(Variant::NesterovUncorrected) => GlobalRule::Nesterov,
            Algorithm::Sparse(_) => GlobalRule::Momentum,
        }
    }
}

/// One node's copy of the weights and of the global optimizer state.
#[derive(Debug, Clone, PartialEq)]
struct Replica {
    w: Vec<f32>,
    u: Vec<f32>,
}

impl Replica {
    fn update(&mut self, rule: GlobalRule, m: f32, lr: f32, g: &[f32]) {
        match rule {
            GlobalRule::Plain => {
                for (w, &gi) in self.w.iter_mut().zip(g) {
                    *w -= lr * gi;
                }
            }
            GlobalRule::Momentum => {
                for ((w, u), &gi) in self.w.iter_mut().zip(&mut self.u).zip(g) {
                    *u = m * *u + gi;
                    *w -= lr * *u;
                }
            }
            GlobalRule::Nesterov => {
                for ((w, u), &gi) in self.w.iter_mut().zip(&mut self.u).zip(g) {
                    *u = m * *u + gi;
                    *w -= lr * (m * *u + gi);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub trace: MetricsTrace,
    pub final_weights: Vec<f32>,
    /// Full-dataset training loss at the final weights.
    pub final_loss: f64,
    pub final_eval: f64,
    pub param_count: usize,
    /// Median number of iterations between two sends of the same
    /// coordinate by node 0, measured once the final sparsity is reached.
    pub median_send_interval: Option<f64>,
    pub diverged: Option<Divergence>,
}

pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    let model = build_model(&config.model, config.seed)?;
    train_model(config, model.as_ref(), |_, _| {})
}

struct NodeOutput {
    loss: f64,
    dense: Option<GradientVector>,
    sparse_bytes: Option<usize>,
    sparse: Option<crate::codec::SparseUpdate>,
}

/// Runs `config` on an already built model. `observe` sees the iteration
/// index and the (shared) weights after every update.
pub fn train_model(
    config: &TrainConfig,
    model: &dyn Model,
    mut observe: impl FnMut(usize, &[f32]),
) -> Result<TrainReport> {
    config.validate()?;
    let layout: Arc<LayerLayout> = Arc::clone(model.layout());
    let d = layout.len();
    config.validate_size(d)?;
    let n = config.nodes;
    let rule = GlobalRule::for_algorithm(config.algorithm);
    let w0 = model.init_weights(config.seed);
    let mut replicas = vec![
        Replica {
            w: w0,
            u: vec![0.0; d],
        };
        n
    ];
    let mut states: Vec<Option<DgcNodeState>> = (0..n)
        .map(|_| -> Result<Option<DgcNodeState>> {
            let Some(variant) = config.algorithm.variant() else {
                return Ok(None);
            };
            let clip = config
                .clip_threshold
                .map(|t| ClipConfig::new(t, n))
                .transpose()?;
            Ok(Some(
                DgcNodeState::new(
                    layout.clone(),
                    config.momentum,
                    variant,
                    config.selection.clone(),
                )?
                .with_clip(clip)
                .with_momentum_masking(config.momentum_masking),
            ))
        })
        .collect::<Result<_>>()?;

    let dense_bytes = d * DENSE_ELEMENT_BYTES;
    let timing = config.timing;
    let dense_perf = PerfParams {
        t_compute: timing.t_compute.max(f64::MIN_POSITIVE),
        model_bytes: dense_bytes as f64,
        bandwidth: timing.bandwidth,
        latency_per_round: timing.latency,
        ..PerfParams::default()
    };
    let final_sparsity = config.schedule.final_sparsity();
    let mut last_sent: Vec<Option<usize>> = vec![None; d];
    let mut intervals: Vec<usize> = Vec::new();

    let mut trace = MetricsTrace::default();
    let mut clock = 0.0;
    let mut diverged = None;
    let per_epoch = config.iterations_per_epoch();
    let samples = model.sample_count();
    'outer: for epoch in 0..config.epochs {
        let perm = epoch_permutation(samples, config.seed, epoch);
        let lr = config.lr.at(epoch) as f32;
        let sparsity = warmup_sparsity(epoch, &config.schedule);
        for t_in in 0..per_epoch {
            let iteration = epoch * per_epoch + t_in;
            let outputs: Vec<Result<NodeOutput>> = replicas
                .par_iter()
                .zip(states.par_iter_mut())
                .enumerate()
                .map(|(k, (rep, state))| {
                    let batch = sample_minibatch(&perm, k, t_in, n, config.batch);
                    let w = GradientVector::from_values(rep.w.clone(), layout.clone())?;
                    let (loss, g) = grad(model, &w, &batch, n)?;
                    if !g.is_finite() {
                        return Err(DgcError::NonFinite { index: 0 });
                    }
                    match state {
                        None => Ok(NodeOutput {
                            loss,
                            dense: Some(g),
                            sparse_bytes: None,
                            sparse: None,
                        }),
                        Some(s) => {
                            let mut rng = derive_stream(
                                config.seed,
                                k as u64,
                                iteration as u64,
                                Purpose::ThresholdSample,
                            );
                            let update = s.step(&g, sparsity, &mut rng)?;
                            let wire = encode(&update);
                            let received = decode(&wire)?;
                            Ok(NodeOutput {
                                loss,
                                dense: None,
                                sparse_bytes: Some(wire.byte_len()),
                                sparse: Some(received),
                            })
                        }
                    }
                })
                .collect();
            let outputs = match outputs.into_iter().collect::<Result<Vec<_>>>() {
                Ok(o) => o,
                Err(DgcError::Diverged(_) | DgcError::NonFinite { .. }) => {
                    diverged = Some(Divergence {
                        iteration,
                        loss: f64::NAN,
                    });
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            let loss = outputs.iter().map(|o| o.loss).sum::<f64>() / n as f64;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                diverged = Some(Divergence { iteration, loss });
                break 'outer;
            }

            let (aggregate, bytes, union_density, comm) = if config.algorithm.variant().is_none() {
                let grads: Vec<GradientVector> =
                    outputs.into_iter().filter_map(|o| o.dense).collect();
                (
                    allreduce_dense(&grads)?,
                    vec![dense_bytes; n],
                    1.0,
                    dense_comm_time(&dense_perf, n),
                )
            } else {
                let bytes: Vec<usize> = outputs.iter().filter_map(|o| o.sparse_bytes).collect();
                let updates: Vec<_> = outputs.into_iter().filter_map(|o| o.sparse).collect();
                if sparsity == final_sparsity {
                    for &i in updates[0].indices() {
                        if let Some(prev) = last_sent[i] {
                            intervals.push(iteration - prev);
                        }
                        last_sent[i] = Some(iteration);
                    }
                }
                let (sum, stats) = allreduce_sparse(&updates, &layout)?;
                let comm: f64 = stats
                    .message_bytes
                    .iter()
                    .map(|&b| b as f64 * 8.0 / timing.bandwidth + timing.latency)
                    .sum();
                (sum, bytes, stats.final_density(), comm)
            };

            let g = aggregate.values();
            replicas
                .par_iter_mut()
                .for_each(|r| r.update(rule, config.momentum, lr, g));
            if let Some(k) = replicas[1..].iter().position(|r| r.w != replicas[0].w) {
                return Err(DgcError::InvalidUpdate(format!(
                    "replica {} diverged from replica 0 at iteration {iteration}",
                    k + 1
                )));
            }
            observe(iteration, &replicas[0].w);

            clock += timing.t_compute + comm;
            let eval = (t_in + 1 == per_epoch).then(|| model.metric(&to_f64(&replicas[0].w)));
            trace.records.push(IterationRecord {
                iteration,
                epoch,
                loss,
                eval,
                bytes_per_node: bytes,
                union_density,
                wallclock_est: clock,
            });
        }
    }

    let final_weights = replicas.swap_remove(0).w;
    let wd = to_f64(&final_weights);
    Ok(TrainReport {
        trace,
        final_loss: model.loss(&wd, &model.all_samples()),
        final_eval: model.metric(&wd),
        final_weights,
        param_count: d,
        median_send_interval: median(&mut intervals),
        diverged,
    })
}

fn median(values: &mut [usize]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid] as f64
    } else {
        (values[mid - 1] + values[mid]) as f64 / 2.0
    })
}
