//! Bucketed k-d tree over descriptors with best-bin-first 2-NN search.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::descriptor::{Descriptor, DESCRIPTOR_LEN};

use super::descriptor_distance;

pub const DEFAULT_LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f32, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Descriptor],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Two nearest neighbours as `(distance, index)`, lexicographically ordered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoNearest {
    pub best: Option<(f64, usize)>,
    pub second: Option<(f64, usize)>,
}

impl TwoNearest {
    fn empty() -> Self {
        Self {
            best: None,
            second: None,
        }
    }

    #[inline]
    fn offer(&mut self, dist: f64, idx: usize) {
        let cand = (dist, idx);
        let less = |a: (f64, usize), b: Option<(f64, usize)>| match b {
            None => true,
            Some(b) => a.0 < b.0 || (a.0 == b.0 && a.1 < b.1),
        };
        if less(cand, self.best) {
            self.second = self.best;
            self.best = Some(cand);
        } else if less(cand, self.second) {
            self.second = Some(cand);
        }
    }

    fn second_dist(&self) -> f64 {
        self.second.map_or(f64::INFINITY, |s| s.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    bound: f64,
    node: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on bound, ties by node id
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [Descriptor], leaf_size: usize) -> Self {
        let leaf_size = leaf_size.max(1);
        let mut tree = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len(), leaf_size);
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize, leaf_size: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= leaf_size {
            return id;
        }
        let Some(dim) = self.widest_dimension(start, end) else {
            return id;
        };
        let points = self.points;
        let key = |i: usize| (points[i].values()[dim], i);
        let mid = start + (end - start) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |a, b| {
            let (ka, kb) = (key(*a), key(*b));
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
        });
        let value = points[self.order[mid]].values()[dim];
        let left = self.build_node(start, mid, leaf_size);
        let right = self.build_node(mid, end, leaf_size);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    /// Dimension of largest variance; `None` when all points coincide.
    fn widest_dimension(&self, start: usize, end: usize) -> Option<usize> {
        let n = (end - start) as f64;
        let mut best = None;
        let mut best_var = 0.0;
        for dim in 0..DESCRIPTOR_LEN {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for &i in &self.order[start..end] {
                let v = self.points[i].values()[dim] as f64;
                s += v;
                ss += v * v;
            }
            let var = ss / n - (s / n).powi(2);
            if var > best_var {
                best_var = var;
                best = Some(dim);
            }
        }
        best
    }

    /// Best-bin-first search visiting at most `leaf_budget` leaves
    /// (`None` = exhaustive, exact).
    pub fn two_nearest(&self, query: &Descriptor, leaf_budget: Option<usize>) -> TwoNearest {
        let mut result = TwoNearest::empty();
        if self.nodes.is_empty() {
            return result;
        }
        let budget = leaf_budget.unwrap_or(usize::MAX);
        let mut leaves = 0usize;
        let mut heap = BinaryHeap::new();
        heap.push(Pending {
            bound: 0.0,
            node: 0,
        });
        while let Some(Pending { bound, node }) = heap.pop() {
            if bound > result.second_dist() {
                break;
            }
            if leaves >= budget {
                break;
            }
            let mut current = node;
            loop {
                match self.nodes[current] {
                    Node::Leaf { start, end } => {
                        for &i in &self.order[start..end] {
                            result.offer(descriptor_distance(query, &self.points[i]), i);
                        }
                        leaves += 1;
                        break;
                    }
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        let diff = query.values()[dim] as f64 - value as f64;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        let far_bound = bound.max(diff.abs());
                        if far_bound <= result.second_dist() {
                            heap.push(Pending {
                                bound: far_bound,
                                node: far,
                            });
                        }
                        current = near;
                    }
                }
            }
        }
        result
    }
}
