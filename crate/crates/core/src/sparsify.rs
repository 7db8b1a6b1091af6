//! Top-k threshold selection and mask application.
//!
//! A selection keeps every element whose magnitude is strictly above the
//! threshold, then admits elements exactly equal to the threshold in
//! ascending index order until the keep budget `k` is met.

use std::ops::Range;

use bitvec::prelude::*;
use rand::Rng;

use crate::codec::SparseUpdate;
use crate::error::{DgcError, Result};
use crate::rng::RngStream;
use crate::vector::{GradientVector, LayerLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    /// Exact k-th largest via quickselect over the whole scope.
    Exact,
    /// Threshold estimated on a uniform sample, refined when it misses.
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityConfig {
    /// Fraction of elements dropped, in `[0, 1)`.
    pub target_sparsity: f64,
    /// Fraction of each scope sampled when estimating the threshold.
    pub sample_fraction: f64,
    /// Largest tolerated over-selection before the threshold is recomputed.
    pub overflow_factor: f64,
    /// One threshold per layer when set, else one for the whole model.
    pub per_layer: bool,
    pub method: SelectionMethod,
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.999,
            sample_fraction: 0.01,
            overflow_factor: 2.0,
            per_layer: true,
            method: SelectionMethod::Exact,
        }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.target_sparsity)?;
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(DgcError::InvalidParameter(format!(
                "sample_fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        if self.overflow_factor.is_nan() || self.overflow_factor <= 1.0 {
            return Err(DgcError::InvalidParameter(format!(
                "overflow_factor {} must exceed 1",
                self.overflow_factor
            )));
        }
        Ok(())
    }

    pub fn with_sparsity(&self, target_sparsity: f64) -> Self {
        Self {
            target_sparsity,
            ..self.clone()
        }
    }
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(DgcError::InvalidParameter(format!(
            "sparsity {s} outside [0, 1)"
        )))
    }
}

/// Number of elements a scope of `len` keeps: `max(1, round((1 - s) * len))`.
pub fn keep_count(len: usize, sparsity: f64) -> usize {
    let k = ((1.0 - sparsity) * len as f64).round() as usize;
    k.clamp(1, len.max(1))
}

/// Threshold plus keep budget for one selection scope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScopeThreshold {
    pub threshold: f32,
    pub budget: usize,
}

impl ScopeThreshold {
    /// Keeps nothing.
    pub fn suppress() -> Self {
        Self {
            threshold: f32::INFINITY,
            budget: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub mask: BitVec,
    pub threshold: f32,
    pub kept_count: usize,
}

/// k-th largest magnitude with `k = keep_count(len, target_sparsity)`.
///
/// When every element is kept the returned threshold sits just below the
/// minimum magnitude, so the strict comparison alone admits everything.
pub fn exact_threshold(magnitudes: &[f32], target_sparsity: f64) -> Result<f32> {
    if magnitudes.is_empty() {
        return Err(DgcError::EmptyInput);
    }
    check_sparsity(target_sparsity)?;
    let k = keep_count(magnitudes.len(), target_sparsity);
    Ok(kth_largest(magnitudes, k))
}

/// `k`-th largest (1-based) of a non-empty slice, or just below the minimum
/// when `k == len`.
fn kth_largest(magnitudes: &[f32], k: usize) -> f32 {
    debug_assert!(k >= 1 && k <= magnitudes.len());
    if k == magnitudes.len() {
        let min = magnitudes.iter().copied().fold(f32::INFINITY, f32::min);
        return min.next_down();
    }
    let mut scratch = magnitudes.to_vec();
    let (_, kth, _) = scratch.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
    *kth
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledThreshold {
    pub threshold: f32,
    /// Set when the sample estimate was replaced by a precise threshold.
    pub refined: bool,
}

/// Estimates the top-k threshold from a uniform sample of the magnitudes.
///
/// The sample rank is aimed at `sqrt(overflow_factor) * k` so the estimate
/// usually lands inside `[k, overflow_factor * k]`. If more than
/// `overflow_factor * k` elements exceed it, the precise threshold is taken
/// over only those exceeding elements. If fewer than `k` exceed it, the exact
/// threshold over the scope is used. Either way `refined` is set.
pub fn sampled_threshold(
    magnitudes: &[f32],
    config: &SparsityConfig,
    rng: &mut RngStream,
) -> Result<SampledThreshold> {
    if magnitudes.is_empty() {
        return Err(DgcError::EmptyInput);
    }
    config.validate()?;
    let n = magnitudes.len();
    let s = config.target_sparsity;
    let exact = |m: &[f32]| -> Result<SampledThreshold> {
        Ok(SampledThreshold {
            threshold: exact_threshold(m, s)?,
            refined: false,
        })
    };

    let sample_size = config.sample_fraction * n as f64;
    if sample_size < 10.0 {
        return exact(magnitudes);
    }
    let first = magnitudes[0];
    if magnitudes.iter().all(|&m| m == first) {
        return exact(magnitudes);
    }

    let k = keep_count(n, s);
    let sample_size = sample_size.ceil() as usize;
    let sample: Vec<f32> = (0..sample_size)
        .map(|_| magnitudes[rng.random_range(0..n)])
        .collect();
    let sample_rank =
        ((1.0 - s) * config.overflow_factor.sqrt() * sample_size as f64).round() as usize;
    let estimate = kth_largest(&sample, sample_rank.clamp(1, sample_size));

    let exceeding = magnitudes.iter().filter(|&&m| m > estimate).count();
    let limit = (config.overflow_factor * k as f64).floor() as usize;
    if exceeding > limit {
        let selected: Vec<f32> = magnitudes
            .iter()
            .copied()
            .filter(|&m| m > estimate)
            .collect();
        return Ok(SampledThreshold {
            threshold: kth_largest(&selected, k),
            refined: true,
        });
    }
    if exceeding < k {
        return Ok(SampledThreshold {
            threshold: kth_largest(magnitudes, k),
            refined: true,
        });
    }
    Ok(SampledThreshold {
        threshold: estimate,
        refined: false,
    })
}

/// Applies the strict-greater rule plus index-ordered tie admission.
pub fn select(magnitudes: &[f32], scope: ScopeThreshold) -> SelectionResult {
    let mut mask = bitvec![0; magnitudes.len()];
    let mut kept = 0usize;
    for (i, &m) in magnitudes.iter().enumerate() {
        if m > scope.threshold {
            mask.set(i, true);
            kept += 1;
        }
    }
    if kept < scope.budget {
        for (i, &m) in magnitudes.iter().enumerate() {
            if kept >= scope.budget {
                break;
            }
            if m == scope.threshold {
                mask.set(i, true);
                kept += 1;
            }
        }
    }
    SelectionResult {
        mask,
        threshold: scope.threshold,
        kept_count: kept,
    }
}

/// Index ranges of the selection scopes for a layout.
pub fn scope_ranges(layout: &LayerLayout, per_layer: bool) -> Vec<Range<usize>> {
    if per_layer {
        layout.segments().iter().map(|s| s.range()).collect()
    } else {
        std::iter::once(0..layout.len()).collect()
    }
}

/// Computes one threshold per scope on `|values|`.
pub fn compute_thresholds(
    values: &[f32],
    layout: &LayerLayout,
    config: &SparsityConfig,
    rng: &mut RngStream,
) -> Result<Vec<ScopeThreshold>> {
    config.validate()?;
    if values.len() != layout.len() {
        return Err(DgcError::LengthMismatch {
            expected: layout.len(),
            actual: values.len(),
        });
    }
    scope_ranges(layout, config.per_layer)
        .into_iter()
        .map(|r| {
            let mags: Vec<f32> = values[r].iter().map(|v| v.abs()).collect();
            let budget = keep_count(mags.len(), config.target_sparsity);
            let threshold = match config.method {
                SelectionMethod::Exact => exact_threshold(&mags, config.target_sparsity)?,
                SelectionMethod::Sampled => sampled_threshold(&mags, config, rng)?.threshold,
            };
            Ok(ScopeThreshold { threshold, budget })
        })
        .collect()
}

/// Runs [`select`] on each scope of `values`.
pub fn select_scopes(
    values: &[f32],
    layout: &LayerLayout,
    per_layer: bool,
    thresholds: &[ScopeThreshold],
) -> Result<Vec<SelectionResult>> {
    let ranges = scope_ranges(layout, per_layer);
    if ranges.len() != thresholds.len() {
        return Err(DgcError::InvalidParameter(format!(
            "{} thresholds for {} scopes",
            thresholds.len(),
            ranges.len()
        )));
    }
    if values.len() != layout.len() {
        return Err(DgcError::LengthMismatch {
            expected: layout.len(),
            actual: values.len(),
        });
    }
    Ok(ranges
        .into_iter()
        .zip(thresholds)
        .map(|(r, t)| {
            let mags: Vec<f32> = values[r].iter().map(|v| v.abs()).collect();
            select(&mags, *t)
        })
        .collect())
}

/// Global indices set in the per-scope masks, ascending.
pub fn masked_indices(
    layout: &LayerLayout,
    per_layer: bool,
    masks: &[SelectionResult],
) -> Vec<usize> {
    scope_ranges(layout, per_layer)
        .into_iter()
        .zip(masks)
        .flat_map(|(r, sel)| sel.mask.iter_ones().map(move |i| r.start + i))
        .collect()
}

/// Splits `v` into the masked-in sparse update and the masked-out residual.
pub fn apply_mask(
    v: &GradientVector,
    config: &SparsityConfig,
    thresholds: &[ScopeThreshold],
) -> Result<(SparseUpdate, GradientVector)> {
    let masks = select_scopes(v.values(), v.layout(), config.per_layer, thresholds)?;
    let kept = masked_indices(v.layout(), config.per_layer, &masks);
    let mut residual = v.clone();
    let (update, _) = split_out(residual.values_mut(), &kept);
    Ok((update, residual))
}

/// Moves the entries at `kept` out of `values` into a sparse update, leaving
/// zeros behind. Exact zeros are masked but not stored. Returns the update
/// and the count of masked positions.
pub(crate) fn split_out(values: &mut [f32], kept: &[usize]) -> (SparseUpdate, usize) {
    let mut indices = Vec::with_capacity(kept.len());
    let mut out = Vec::with_capacity(kept.len());
    for &i in kept {
        let x = values[i];
        if x != 0.0 {
            indices.push(i);
            out.push(x);
        }
        values[i] = 0.0;
    }
    (
        SparseUpdate::from_parts_unchecked(indices, out, values.len()),
        kept.len(),
    )
}
