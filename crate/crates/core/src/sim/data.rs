//! Shuffled-stream minibatch sampling.
//!
//! Every epoch draws one permutation of the dataset shared by all nodes.
//! Iteration `t` of the epoch hands node `k` the `b` positions starting at
//! `(t*N + k)*b`, so nodes see disjoint slices of the same stream and a
//! single node with batch `N*b` sees exactly their union.

use rand::seq::SliceRandom;

use crate::rng::{derive_stream, Purpose};

pub fn epoch_permutation(samples: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..samples).collect();
    let mut rng = derive_stream(seed, 0, epoch as u64, Purpose::Shuffle);
    perm.shuffle(&mut rng);
    perm
}

/// Positions wrap modulo the dataset size.
pub fn sample_minibatch(
    perm: &[usize],
    node: usize,
    iteration_in_epoch: usize,
    nodes: usize,
    batch: usize,
) -> Vec<usize> {
    let n = perm.len();
    assert!(n > 0, "dataset is empty");
    let start = (iteration_in_epoch * nodes + node) * batch;
    (start..start + batch).map(|p| perm[p % n]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let p = epoch_permutation(100, 7, 3);
        assert_eq!(p, epoch_permutation(100, 7, 3));
        assert_ne!(p, epoch_permutation(100, 7, 4));
        assert_eq!(
            sample_minibatch(&p, 1, 2, 2, 8),
            sample_minibatch(&p, 1, 2, 2, 8)
        );
    }

    #[test]
    fn nodes_get_disjoint_batches() {
        let p = epoch_permutation(64, 1, 0);
        let a = sample_minibatch(&p, 0, 0, 2, 8);
        let b = sample_minibatch(&p, 1, 0, 2, 8);
        assert!(a.iter().all(|x| !b.contains(x)));
    }

    #[test]
    fn one_epoch_covers_each_sample_once() {
        let (n, nodes, b) = (96, 4, 6);
        let p = epoch_permutation(n, 9, 0);
        let mut count = vec![0; n];
        for t in 0..n / (nodes * b) {
            for k in 0..nodes {
                for i in sample_minibatch(&p, k, t, nodes, b) {
                    count[i] += 1;
                }
            }
        }
        assert!(count.iter().all(|&c| c == 1));
    }

    #[test]
    fn single_big_node_sees_the_union() {
        let p = epoch_permutation(50, 2, 1);
        for t in 0..3 {
            let mut union: Vec<usize> = (0..4)
                .flat_map(|k| sample_minibatch(&p, k, t, 4, 3))
                .collect();
            let mut big = sample_minibatch(&p, 0, t, 1, 12);
            union.sort_unstable();
            big.sort_unstable();
            assert_eq!(union, big);
        }
    }
}
