//! Exact k-nearest-neighbour graphs with self-loops.
//!
//! Each node `i` receives edges from its `k` nearest other nodes under
//! squared Euclidean distance plus the self-loop `(i, i)`. Distances are
//! summed in one fixed order and ties go to the smaller source index, so
//! every search path returns the same graph.

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Below this many points a direct scan beats building a tree.
pub const BRUTE_FORCE_MAX_POINTS: usize = 64;

const LEAF_SIZE: usize = 12;

const PRUNE_MARGIN: f64 = 1e-4;

const SPREAD_SAMPLES: usize = 48;

/// Directed edges `(target, source)` sorted by target, then source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeList {
    k: usize,
    num_nodes: usize,
    targets: Vec<usize>,
    sources: Vec<usize>,
}

impl EdgeList {
    /// Builds a list from arbitrary `(target, source)` pairs, canonicalising
    /// the order. Used for hand-made graphs and shuffled-order tests.
    pub fn from_pairs(num_nodes: usize, k: usize, mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.iter().any(|&(i, j)| i >= num_nodes || j >= num_nodes) {
            return Err(Error::InvalidArgument("edge index out of range".into()));
        }
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        if pairs.len() != before {
            return Err(Error::InvalidArgument("duplicate edge".into()));
        }
        let (targets, sources) = pairs.into_iter().unzip();
        Ok(EdgeList { k, num_nodes, targets, sources })
    }

    /// Same edges, listed in the order given by `perm` (a permutation of
    /// edge positions). Aggregation must not depend on this order.
    pub fn reordered(&self, perm: &[usize]) -> Self {
        EdgeList {
            k: self.k,
            num_nodes: self.num_nodes,
            targets: perm.iter().map(|&e| self.targets[e]).collect(),
            sources: perm.iter().map(|&e| self.sources[e]).collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets.iter().copied().zip(self.sources.iter().copied())
    }

    /// Sources pointing at `target` (canonical lists only).
    pub fn neighbours(&self, target: usize) -> &[usize] {
        let start = self.targets.partition_point(|&t| t < target);
        let end = self.targets.partition_point(|&t| t <= target);
        &self.sources[start..end]
    }
}

const LANES: usize = 8;

#[inline]
fn combine<T: Real>(acc: &[T; LANES]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline(always)]
fn accumulate_block<T: Real>(acc: &mut [T; LANES], a: &[T; LANES], b: &[T; LANES]) {
    for l in 0..LANES {
        let d = a[l] - b[l];
        acc[l] = acc[l] + d * d;
    }
}

#[inline(always)]
fn accumulate_tail<T: Real>(acc: &mut [T; LANES], a: &[T], b: &[T]) {
    for l in 0..a.len() {
        let d = a[l] - b[l];
        acc[l] = acc[l] + d * d;
    }
}

#[inline(always)]
fn blocks<T>(a: &[T]) -> (&[[T; LANES]], &[T]) {
    let (head, tail) = a.split_at(a.len() / LANES * LANES);
    // SAFETY: `head` holds a whole number of LANES-sized arrays.
    let head = unsafe { std::slice::from_raw_parts(head.as_ptr().cast::<[T; LANES]>(), head.len() / LANES) };
    (head, tail)
}

/// Squared Euclidean distance with a fixed summation order: dimension `d`
/// goes to lane `d % 8` in increasing `d`, and the lanes are combined
/// pairwise. Every search path uses this function, so results agree bit for
/// bit.
#[inline]
fn squared_distance<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let ((ha, ta), (hb, tb)) = (blocks(a), blocks(b));
    for (x, y) in ha.iter().zip(hb) {
        accumulate_block(&mut acc, x, y);
    }
    accumulate_tail(&mut acc, ta, tb);
    combine(&acc)
}

/// [`squared_distance`], abandoned with `None` once a partial result
/// exceeds `limit`. Each lane only grows and rounding is monotone, so an
/// abandoned pair could not have scored `<= limit`.
#[inline]
fn squared_distance_within<T: Real>(a: &[T], b: &[T], limit: T) -> Option<T> {
    let mut acc = [T::zero(); LANES];
    let ((ha, ta), (hb, tb)) = (blocks(a), blocks(b));
    for (i, (x, y)) in ha.iter().zip(hb).enumerate() {
        accumulate_block(&mut acc, x, y);
        if i % 2 == 1 && combine(&acc) > limit {
            return None;
        }
    }
    accumulate_tail(&mut acc, ta, tb);
    let d = combine(&acc);
    (d <= limit).then_some(d)
}

/// The `k` best `(distance, index)` pairs seen so far, ascending.
struct Best<T> {
    k: usize,
    items: Vec<(T, usize)>,
}

impl<T: Real> Best<T> {
    fn new(k: usize) -> Self {
        Best { k, items: Vec::with_capacity(k + 1) }
    }

    #[inline]
    fn worst(&self) -> Option<T> {
        if self.items.len() < self.k {
            None
        } else {
            self.items.last().map(|w| w.0)
        }
    }

    /// Scores `row` against `q` and offers it.
    #[inline]
    fn consider(&mut self, q: &[T], row: &[T], idx: usize) {
        match self.worst() {
            None => self.offer(squared_distance(q, row), idx),
            Some(w) => {
                if let Some(d) = squared_distance_within(q, row, w) {
                    self.offer(d, idx);
                }
            }
        }
    }

    #[inline]
    fn offer(&mut self, dist: T, idx: usize) {
        let better = |a: &(T, usize)| dist < a.0 || (dist == a.0 && idx < a.1);
        if self.items.len() == self.k {
            match self.items.last() {
                Some(w) if better(w) => {}
                _ => return,
            }
            self.items.pop();
        }
        let pos = self.items.iter().position(better).unwrap_or(self.items.len());
        self.items.insert(pos, (dist, idx));
    }
}

fn validate<T: Real>(features: &[T], num_nodes: usize, dim: usize, k: usize) -> Result<()> {
    if features.len() != num_nodes * dim {
        return Err(Error::shape(&[features.len()], &[num_nodes, dim], "knn features"));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("knn features need at least one dimension".into()));
    }
    if k < 1 || k + 1 > num_nodes {
        return Err(Error::InvalidArgument(format!(
            "k = {k} is out of range for {num_nodes} points (need 1 <= k <= N - 1)"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("knn features must be finite".into()));
    }
    Ok(())
}

fn assemble(num_nodes: usize, k: usize, mut neighbours: Vec<Vec<usize>>) -> EdgeList {
    let mut targets = Vec::with_capacity(num_nodes * (k + 1));
    let mut sources = Vec::with_capacity(num_nodes * (k + 1));
    for (i, nb) in neighbours.iter_mut().enumerate() {
        nb.push(i);
        nb.sort_unstable();
        for &j in nb.iter() {
            targets.push(i);
            sources.push(j);
        }
    }
    EdgeList { k, num_nodes, targets, sources }
}

/// O(N²) scan over all pairs. Reference implementation.
pub fn knn_graph_brute_force<T: Real>(features: &[T], num_nodes: usize, dim: usize, k: usize) -> Result<EdgeList> {
    validate(features, num_nodes, dim, k)?;
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let neighbours = (0..num_nodes)
        .map(|i| {
            let mut best = Best::new(k);
            for j in (0..num_nodes).filter(|&j| j != i) {
                best.offer(squared_distance(row(i), row(j)), j);
            }
            best.items.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(assemble(num_nodes, k, neighbours))
}

/// kNN graph over `num_nodes` rows of `dim` features, row-major.
///
/// Uses a k-d tree above [`BRUTE_FORCE_MAX_POINTS`] points; both paths
/// return identical graphs.
pub fn knn_graph<T: Real>(features: &[T], num_nodes: usize, dim: usize, k: usize) -> Result<EdgeList> {
    if num_nodes <= BRUTE_FORCE_MAX_POINTS {
        return knn_graph_brute_force(features, num_nodes, dim, k);
    }
    validate(features, num_nodes, dim, k)?;
    let tree = KdTree::build(features, num_nodes, dim);
    let neighbours = tree.query_all(k);
    Ok(assemble(num_nodes, k, neighbours))
}

/// Convenience wrapper for 3-D clouds.
pub fn knn_graph_points(points: &[[f64; 3]], k: usize) -> Result<EdgeList> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    knn_graph(&flat, points.len(), 3, k)
}

enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: T, left: usize, right: usize },
}

struct KdTree<'a, T> {
    features: &'a [T],
    dim: usize,
    order: Vec<usize>,
    /// Rows of `features` in `order`, so leaves scan contiguous memory.
    packed: Vec<T>,
    nodes: Vec<Node<T>>,
}

impl<'a, T: Real> KdTree<'a, T> {
    fn build(features: &'a [T], num_nodes: usize, dim: usize) -> Self {
        let mut tree = KdTree { features, dim, order: (0..num_nodes).collect(), packed: Vec::new(), nodes: Vec::new() };
        tree.build_node(0, num_nodes);
        tree.packed = tree.order.iter().flat_map(|&p| &features[p * dim..(p + 1) * dim]).copied().collect();
        tree
    }

    /// Neighbour lists for every point, indexed by point.
    fn query_all(&self, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.order.len()];
        let mut offsets = vec![0.0f64; self.dim];
        // Tree order keeps consecutive queries close to each other.
        for &i in &self.order {
            let q = &self.features[i * self.dim..(i + 1) * self.dim];
            let mut best = Best::new(k);
            offsets.iter_mut().for_each(|o| *o = 0.0);
            self.search(0, q, i, &mut best, &mut offsets, 0.0);
            out[i] = best.items.into_iter().map(|(_, j)| j).collect();
        }
        out
    }

    fn value(&self, point: usize, d: usize) -> T {
        self.features[point * self.dim + d]
    }

    fn widest_dim(&self, start: usize, end: usize, stride: usize) -> (usize, T) {
        let mut lo = vec![T::infinity(); self.dim];
        let mut hi = vec![T::neg_infinity(); self.dim];
        for &p in self.order[start..end].iter().step_by(stride) {
            let row = &self.features[p * self.dim..(p + 1) * self.dim];
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        let mut best = (0, T::neg_infinity());
        for (d, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if h - l > best.1 {
                best = (d, h - l);
            }
        }
        best
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // Split the widest dimension (estimated on a strided subset) at the median.
        let (mut split_dim, mut widest) = self.widest_dim(start, end, (end - start).div_ceil(SPREAD_SAMPLES));
        if !(widest > T::zero()) {
            (split_dim, widest) = self.widest_dim(start, end, 1);
        }
        if !(widest > T::zero()) {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let (features, dim) = (self.features, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            features[a * dim + split_dim].total_cmp_real(&features[b * dim + split_dim])
        });
        let value = self.value(self.order[mid], split_dim);
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { dim: split_dim, value, left, right };
        id
    }

    /// Depth-first search with the squared distance `reach` from `q` to the
    /// cell of `node` as a lower bound (per-dimension offsets in `offsets`).
    fn search(&self, node: usize, q: &[T], skip: usize, best: &mut Best<T>, offsets: &mut [f64], reach: f64) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                let rows = self.packed[start * self.dim..end * self.dim].chunks_exact(self.dim);
                for (&p, row) in self.order[start..end].iter().zip(rows) {
                    if p != skip {
                        best.consider(q, row, p);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                // Points left of the median satisfy v <= value, right ones v >= value.
                let (near, far) = if diff <= T::zero() { (left, right) } else { (right, left) };
                self.search(near, q, skip, best, offsets, reach);
                let old = offsets[dim];
                let new = diff.as_f64().abs();
                let far_reach = reach - old * old + new * new;
                // The bound is computed in another order and precision than
                // the distances it is compared with; the margin covers the
                // rounding so that ties and near-ties are still visited.
                let prune = match best.worst() {
                    Some(w) => far_reach * (1.0 - PRUNE_MARGIN) > w.as_f64(),
                    None => false,
                };
                if !prune {
                    offsets[dim] = new;
                    self.search(far, q, skip, best, offsets, far_reach);
                    offsets[dim] = old;
                }
            }
        }
    }
}
