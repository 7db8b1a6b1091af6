//! Functional all-reduce with a recursive-doubling traffic model.
//!
//! The aggregate is always the exact sum in node order. The traffic model
//! replays a recursive-doubling exchange over the real index sets: in round
//! `r` node `i` belongs to group `i >> r`, and the message it sends in that
//! round is its group's partial sum from round `r - 1`.

use std::sync::Arc;

use crate::codec::{encoded_len, SparseUpdate};
use crate::error::{DgcError, Result};
use crate::perfmodel::doubling_rounds;
use crate::vector::{GradientVector, LayerLayout};

/// Elementwise sum in node order.
pub fn allreduce_dense(gradients: &[GradientVector]) -> Result<GradientVector> {
    let first = gradients.first().ok_or(DgcError::EmptyInput)?;
    let mut sum = first.clone();
    for g in &gradients[1..] {
        sum.ensure_same_layout(g)?;
        for (s, &x) in sum.values_mut().iter_mut().zip(g.values()) {
            *s += x;
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationStats {
    /// Largest single-node density before aggregation.
    pub initial_density: f64,
    /// Per round, the largest union density over groups.
    pub union_density: Vec<f64>,
    /// Per round, `min(1, d0 * 2^r)`.
    pub worst_case_density: Vec<f64>,
    /// Per round, the largest encoded message any node sends.
    pub message_bytes: Vec<usize>,
}

impl AggregationStats {
    /// Density of the full aggregate's support.
    pub fn final_density(&self) -> f64 {
        self.union_density
            .last()
            .copied()
            .unwrap_or(self.initial_density)
    }
}

/// Exact sum of the updates plus traffic statistics.
pub fn allreduce_sparse(
    updates: &[SparseUpdate],
    layout: &Arc<LayerLayout>,
) -> Result<(GradientVector, AggregationStats)> {
    let len = layout.len();
    if updates.is_empty() {
        return Err(DgcError::EmptyInput);
    }
    if let Some(u) = updates.iter().find(|u| u.len() != len) {
        return Err(DgcError::LengthMismatch {
            expected: len,
            actual: u.len(),
        });
    }
    let mut sum = GradientVector::zeros(Arc::clone(layout));
    for u in updates {
        u.add_into(sum.values_mut())?;
    }

    let nodes = updates.len();
    let density = |count: usize| count as f64 / len as f64;
    let d0 = updates
        .iter()
        .map(SparseUpdate::density)
        .fold(0.0, f64::max);
    let rounds = doubling_rounds(nodes);
    let mut stats = AggregationStats {
        initial_density: d0,
        union_density: Vec::with_capacity(rounds as usize),
        worst_case_density: Vec::with_capacity(rounds as usize),
        message_bytes: Vec::with_capacity(rounds as usize),
    };
    // Partial sums held by each group at the current level, as sparse updates.
    let mut partials: Vec<SparseUpdate> = updates.to_vec();
    let mut scratch = vec![0.0f32; len];
    for r in 1..=rounds {
        stats.message_bytes.push(
            partials
                .iter()
                .map(|p| encoded_len(p.indices()))
                .max()
                .unwrap_or(0),
        );
        let mut next = Vec::with_capacity(partials.len().div_ceil(2));
        let mut widest = 0usize;
        for pair in partials.chunks(2) {
            let mut support: Vec<usize> = pair
                .iter()
                .flat_map(|p| p.indices().iter().copied())
                .collect();
            support.sort_unstable();
            support.dedup();
            widest = widest.max(support.len());
            for p in pair {
                p.add_into(&mut scratch)?;
            }
            let values: Vec<f32> = support.iter().map(|&i| scratch[i]).collect();
            for &i in &support {
                scratch[i] = 0.0;
            }
            // Cancellation can zero an entry; the wire format has no zeros.
            let (idx, vals): (Vec<usize>, Vec<f32>) = support
                .into_iter()
                .zip(values)
                .filter(|&(_, v)| v != 0.0)
                .unzip();
            next.push(SparseUpdate::new(idx, vals, len)?);
        }
        stats.union_density.push(density(widest));
        stats
            .worst_case_density
            .push((d0 * 2f64.powi(r as i32)).min(1.0));
        partials = next;
    }
    Ok((sum, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, Purpose};
    use rand::Rng;

    fn layout(len: usize) -> Arc<LayerLayout> {
        Arc::new(LayerLayout::single("w", len).unwrap())
    }

    fn update(indices: &[usize], len: usize) -> SparseUpdate {
        let values = indices.iter().map(|&i| i as f32 + 1.0).collect();
        SparseUpdate::new(indices.to_vec(), values, len).unwrap()
    }

    #[test]
    fn dense_single_is_identity() {
        let g = GradientVector::from_flat(vec![1.5, -2.0]).unwrap();
        assert_eq!(allreduce_dense(std::slice::from_ref(&g)).unwrap(), g);
    }

    #[test]
    fn dense_opposites_cancel() {
        let a = GradientVector::from_flat(vec![1.5, -2.0, 0.25]).unwrap();
        let b = GradientVector::from_flat(vec![-1.5, 2.0, -0.25]).unwrap();
        let s = allreduce_dense(&[a, b]).unwrap();
        assert!(s.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn dense_matches_sequential_sum_bitwise() {
        let l = layout(257);
        let gs: Vec<GradientVector> = (0..8)
            .map(|k| {
                let mut rng = derive_stream(11, k, 0, Purpose::Other(1));
                let v = (0..257).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                GradientVector::from_values(v, l.clone()).unwrap()
            })
            .collect();
        let s = allreduce_dense(&gs).unwrap();
        for i in 0..257 {
            let mut acc = 0.0f32;
            for g in &gs {
                acc += g.values()[i];
            }
            assert_eq!(s.values()[i].to_bits(), acc.to_bits());
        }
    }

    #[test]
    fn identical_supports_keep_density() {
        let len = 1000;
        let us = vec![update(&[3, 70, 500], len); 8];
        let (_, st) = allreduce_sparse(&us, &layout(len)).unwrap();
        assert_eq!(st.union_density, vec![0.003; 3]);
        assert_eq!(st.worst_case_density, vec![0.006, 0.012, 0.024]);
    }

    #[test]
    fn disjoint_supports_double_each_round() {
        let len = 1000;
        let us: Vec<SparseUpdate> = (0..4).map(|k| update(&[k * 10, k * 10 + 1], len)).collect();
        let (sum, st) = allreduce_sparse(&us, &layout(len)).unwrap();
        assert_eq!(st.union_density, vec![0.004, 0.008]);
        assert_eq!(st.final_density(), 0.008);
        assert_eq!(st.message_bytes, vec![12, 24]);
        assert_eq!(sum.values().iter().filter(|&&x| x != 0.0).count(), 8);
    }

    #[test]
    fn single_node_has_no_rounds() {
        let (_, st) = allreduce_sparse(&[update(&[1, 2], 10)], &layout(10)).unwrap();
        assert!(st.union_density.is_empty());
        assert_eq!(st.final_density(), 0.2);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let r = allreduce_sparse(&[update(&[1], 10), update(&[1], 11)], &layout(10));
        assert!(matches!(r, Err(DgcError::LengthMismatch { .. })));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn updates() -> impl Strategy<Value = (usize, Vec<SparseUpdate>)> {
            (1usize..300, 1usize..9).prop_flat_map(|(len, n)| {
                let one = proptest::collection::btree_map(0..len, -4.0f32..4.0, 0..len.min(40))
                    .prop_map(move |m| {
                        let (i, v): (Vec<usize>, Vec<f32>) =
                            m.into_iter().filter(|&(_, v)| v != 0.0).unzip();
                        SparseUpdate::new(i, v, len).unwrap()
                    });
                (Just(len), proptest::collection::vec(one, n))
            })
        }

        proptest! {
            #[test]
            fn sparse_sum_equals_densified_dense_sum((len, us) in updates()) {
                let l = layout(len);
                let (sum, st) = allreduce_sparse(&us, &l).unwrap();
                let dense: Vec<GradientVector> = us
                    .iter()
                    .map(|u| GradientVector::from_values(u.densify(), l.clone()).unwrap())
                    .collect();
                let oracle = allreduce_dense(&dense).unwrap();
                for (a, b) in sum.values().iter().zip(oracle.values()) {
                    prop_assert_eq!(a, b);
                }
                let mut prev = st.initial_density;
                for (u, w) in st.union_density.iter().zip(&st.worst_case_density) {
                    prop_assert!(*u >= prev);
                    prop_assert!(*u <= *w + 1e-12);
                    prev = *u;
                }
            }
        }
    }
}
