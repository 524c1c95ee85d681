//! Static k-d tree over fixed-dimension points.
//!
//! Built once by recursive median splits on the widest axis; leaves hold up to
//! `LEAF_SIZE` indices. Duplicate coordinates are fine: splits are by position
//! in the sorted order, never by value alone.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node<const K: usize> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct KdTree<const K: usize> {
    points: Vec<[f64; K]>,
    order: Vec<usize>,
    nodes: Vec<Node<K>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl<const K: usize> KdTree<K> {
    pub fn new(points: Vec<[f64; K]>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64; K] {
        &self.points[index]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; K];
        let mut hi = [f64::NEG_INFINITY; K];
        for &i in &self.order[start..end] {
            for d in 0..K {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        (0..K)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0)
    }

    fn dist_sq(&self, index: usize, q: &[f64; K]) -> f64 {
        self.points[index]
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn nearest(&self, q: &[f64; K]) -> Option<Neighbor> {
        self.nearest_k(q, 1).into_iter().next()
    }

    /// Up to `k` nearest neighbours, closest first.
    pub fn nearest_k(&self, q: &[f64; K], k: usize) -> Vec<Neighbor> {
        self.nearest_k_within(q, k, f64::INFINITY)
    }

    /// Up to `k` nearest neighbours with squared distance `<= max_dist_sq`.
    pub fn nearest_k_within(&self, q: &[f64; K], k: usize, max_dist_sq: f64) -> Vec<Neighbor> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search_k(0, q, k, max_dist_sq, &mut heap);
        heap.into_sorted_vec()
    }

    fn search_k(
        &self,
        node: usize,
        q: &[f64; K],
        k: usize,
        max_dist_sq: f64,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = self.dist_sq(i, q);
                    if d > max_dist_sq {
                        continue;
                    }
                    let n = Neighbor { index: i, dist_sq: d };
                    if heap.len() < k {
                        heap.push(n);
                    } else if heap.peek().is_some_and(|worst| n < *worst) {
                        heap.pop();
                        heap.push(n);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_k(near, q, k, max_dist_sq, heap);
                let bound = if heap.len() < k {
                    max_dist_sq
                } else {
                    heap.peek().map_or(max_dist_sq, |w| w.dist_sq.min(max_dist_sq))
                };
                if diff * diff <= bound {
                    self.search_k(far, q, k, max_dist_sq, heap);
                }
            }
        }
    }

    /// All points with squared distance `<= radius_sq`, in no particular order.
    pub fn within(&self, q: &[f64; K], radius_sq: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.search_within(0, q, radius_sq, &mut out);
        }
        out
    }

    fn search_within(&self, node: usize, q: &[f64; K], radius_sq: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = self.dist_sq(i, q);
                    if d <= radius_sq {
                        out.push(Neighbor { index: i, dist_sq: d });
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_within(near, q, radius_sq, out);
                if diff * diff <= radius_sq {
                    self.search_within(far, q, radius_sq, out);
                }
            }
        }
    }
}
