//! Exact nearest-neighbor queries over 3D point sets.
//!
//! Ties in distance always resolve to the smaller point index, so query results
//! are deterministic and match a brute-force scan exactly.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static k-d tree; borrows nothing, copies the coordinates once.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

#[inline]
fn better(d2: f64, idx: usize, best_d2: f64, best_idx: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && idx < best_idx)
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut tree = KdTree { order: (0..pts.len()).collect(), points: pts, nodes: Vec::new() };
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

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        if hi[axis] - lo[axis] <= 0.0 {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&i, &j| {
            points[i][axis].total_cmp(&points[j][axis]).then(i.cmp(&j))
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split { axis, value, left: 0, right: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    #[inline]
    fn dist2(&self, i: usize, q: &[f64; 3]) -> f64 {
        let p = &self.points[i];
        let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
        dx * dx + dy * dy + dz * dz
    }

    /// Nearest point to `query`, or `None` for an empty tree.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<Neighbor> {
        self.nearest_within(query, f64::INFINITY)
    }

    /// Nearest point at distance `<= radius`.
    pub fn nearest_within(&self, query: &Vector3<f64>, radius: f64) -> Option<Neighbor> {
        if self.points.is_empty() {
            return None;
        }
        let q = [query.x, query.y, query.z];
        let r2 = if radius.is_finite() { radius * radius } else { f64::INFINITY };
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(0, &q, r2, &mut best);
        (best.1 != usize::MAX).then(|| Neighbor { index: best.1, distance: best.0.sqrt() })
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], r2: f64, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = self.dist2(i, q);
                    if d2 <= r2 && better(d2, i, best.0, best.1) {
                        *best = (d2, i);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_rec(near, q, r2, best);
                let bound = best.0.min(r2);
                if diff * diff <= bound {
                    self.nearest_rec(far, q, r2, best);
                }
            }
        }
    }

    /// The `k` nearest points ordered by `(distance, index)`, optionally skipping
    /// one index (the query point itself).
    pub fn knn(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, &q, k, exclude, &mut heap);
        let mut out: Vec<HeapItem> = heap.into_vec();
        out.sort();
        out.into_iter().map(|HeapItem(d2, index)| Neighbor { index, distance: d2.sqrt() }).collect()
    }

    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<HeapItem>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let item = HeapItem(self.dist2(i, q), i);
                    if heap.len() < k {
                        heap.push(item);
                    } else if item < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_rec(near, q, k, exclude, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                    self.knn_rec(far, q, k, exclude, heap);
                }
            }
        }
    }
}
