//! Exact k-nearest-neighbour search with a kd-tree.
//!
//! Ties in distance are broken by the smaller point index, so results equal
//! those of a stable brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate {
    dist: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Permutation of point indices; leaves own contiguous ranges.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Builds over row-major `points` with `dim` columns.
    pub fn new(points: Vec<f64>, dim: usize) -> Self {
        let n = points.len() / dim;
        let mut tree = Self {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build(0, n);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn coord(&self, i: usize, d: usize) -> f64 {
        self.points[i * self.dim + d]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF {
            return id;
        }
        let mut best = (0, -1.0);
        for d in 0..self.dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in &self.order[start..end] {
                let v = self.coord(i, d);
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        if best.1 <= 0.0 {
            return id;
        }
        let dim = best.0;
        let mid = (start + end) / 2;
        let (points, d) = (&self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| points[a * d + dim].total_cmp(&points[b * d + dim]));
        let value = self.coord(self.order[mid], dim);
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    fn dist2(&self, i: usize, q: &[f64]) -> f64 {
        let p = &self.points[i * self.dim..(i + 1) * self.dim];
        p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Indices of the `k` nearest points, ordered by (distance, index).
    pub fn nearest(&self, q: &[f64], k: usize) -> Vec<usize> {
        let k = k.min(self.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, q, k, &mut heap);
        heap.into_sorted_vec().into_iter().map(|c| c.idx).collect()
    }

    fn search(&self, node: usize, q: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate { dist: self.dist2(i, q), idx: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("non-empty") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().expect("non-empty").dist {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// Reference implementation used by tests and as documentation of the
/// ordering contract.
pub fn brute_force_nearest(points: &[f64], dim: usize, q: &[f64], k: usize) -> Vec<usize> {
    let mut c: Vec<Candidate> = points
        .chunks_exact(dim)
        .enumerate()
        .map(|(idx, p)| Candidate {
            dist: p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
            idx,
        })
        .collect();
    c.sort();
    c.truncate(k);
    c.into_iter().map(|c| c.idx).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn empty_tree_returns_nothing() {
        assert!(KdTree::new(Vec::new(), 2).nearest(&[0.0, 0.0], 3).is_empty());
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let pts = vec![1.0; 100];
        let tree = KdTree::new(pts, 1);
        assert_eq!(tree.nearest(&[1.0], 5), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn k_larger_than_set_returns_all() {
        let tree = KdTree::new(vec![0.0, 1.0, 2.0], 1);
        assert_eq!(tree.nearest(&[1.9], 10), vec![2, 1, 0]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in 0u64..500, n in 1usize..400, dim in 1usize..4, k in 1usize..50, grid in any::<bool>()) {
            let mut rng = stream_rng(seed, 0);
            // a coarse lattice produces many exact ties
            let pts: Vec<f64> = (0..n * dim)
                .map(|_| if grid { f64::from(rng.random_range(0..5u8)) } else { rng.random_range(-1.0..1.0) })
                .collect();
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..5.0)).collect();
            let tree = KdTree::new(pts.clone(), dim);
            prop_assert_eq!(tree.nearest(&q, k), brute_force_nearest(&pts, dim, &q, k));
        }
    }
}
