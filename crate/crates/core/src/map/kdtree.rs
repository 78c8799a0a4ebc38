//! Exact k-nearest-neighbour search over 3D points.
//!
//! Results are ordered by `(squared distance, insertion index)`, so ties are
//! broken by insertion order and the output is identical to a linear scan.

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf { start: u32, end: u32 },
    Split { dim: u8, value: f64, right: u32 },
}

#[derive(Debug, Clone, Default)]
pub struct KdTree {
    nodes: Vec<Node>,
    /// Points in tree order.
    coords: Vec<[f64; 3]>,
    /// Insertion index of each entry of `coords`.
    ids: Vec<u32>,
}

/// Fixed-capacity sorted neighbour list reused across queries.
#[derive(Debug, Clone)]
pub struct Neighbors {
    k: usize,
    /// Squared search radius; points farther away are never offered.
    limit: f64,
    items: Vec<(f64, u32)>,
}

impl Neighbors {
    pub fn new(k: usize) -> Self {
        Neighbors { k, limit: f64::INFINITY, items: Vec::with_capacity(k + 1) }
    }

    fn reset(&mut self, k: usize, limit: f64) {
        self.k = k;
        self.limit = limit;
        self.items.clear();
    }

    #[inline]
    fn worst(&self) -> f64 {
        if self.items.len() < self.k {
            self.limit
        } else {
            self.items[self.k - 1].0
        }
    }

    #[inline]
    fn offer(&mut self, d2: f64, id: u32) {
        if d2 > self.limit {
            return;
        }
        if self.items.len() == self.k {
            let (wd, wid) = self.items[self.k - 1];
            if d2 > wd || (d2 == wd && id > wid) {
                return;
            }
        } else {
            self.items.push((d2, id));
        }
        // Shift worse entries up by one and drop the new one into place.
        let mut pos = self.items.len() - 1;
        while pos > 0 {
            let (d, i) = self.items[pos - 1];
            if d < d2 || (d == d2 && i < id) {
                break;
            }
            self.items[pos] = self.items[pos - 1];
            pos -= 1;
        }
        self.items[pos] = (d2, id);
    }

    /// `(squared distance, insertion index)`, nearest first.
    pub fn as_slice(&self) -> &[(f64, u32)] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut items: Vec<([f64; 3], u32)> =
            points.iter().enumerate().map(|(i, p)| ([p.x, p.y, p.z], i as u32)).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !items.is_empty() {
            build_node(&mut nodes, &mut items, 0);
        }
        let (coords, ids) = items.into_iter().unzip();
        KdTree { nodes, coords, ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fills `out` with the `k` nearest points to `q` (fewer if the tree is smaller).
    pub fn knn_into(&self, q: &Vec3, k: usize, out: &mut Neighbors) {
        self.knn_within(q, k, f64::INFINITY, out);
    }

    /// Like [`KdTree::knn_into`], restricted to points with squared distance
    /// at most `radius_sq`. Whatever it returns is a prefix of the unrestricted result.
    pub fn knn_within(&self, q: &Vec3, k: usize, radius_sq: f64, out: &mut Neighbors) {
        out.reset(k, radius_sq);
        if self.nodes.is_empty() || k == 0 {
            return;
        }
        self.search(0, &[q.x, q.y, q.z], [0.0; 3], 0.0, out);
    }

    /// `offsets` holds the per-axis distance from `q` to the node's cell and
    /// `bound` their squared sum, a lower bound for every point below the node.
    fn search(&self, node: u32, q: &[f64; 3], mut offsets: [f64; 3], bound: f64, out: &mut Neighbors) {
        match self.nodes[node as usize] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let c = &self.coords[slot];
                    let dx = c[0] - q[0];
                    let dy = c[1] - q[1];
                    let dz = c[2] - q[2];
                    out.offer(dx * dx + dy * dy + dz * dz, self.ids[slot]);
                }
            }
            Node::Split { dim, value, right } => {
                let d = dim as usize;
                let diff = q[d] - value;
                let (near, far) = if diff < 0.0 { (node + 1, right) } else { (right, node + 1) };
                self.search(near, q, offsets, bound, out);
                let far_bound = bound - offsets[d] * offsets[d] + diff * diff;
                // Equal bounds are still visited so ties resolve by insertion index.
                if far_bound <= out.worst() {
                    offsets[d] = diff;
                    self.search(far, q, offsets, far_bound, out);
                }
            }
        }
    }

    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(f64, u32)> {
        let mut out = Neighbors::new(k);
        self.knn_into(q, k, &mut out);
        out.items
    }
}

/// Splits `items` at the median of its widest axis; returns the node index.
fn build_node(nodes: &mut Vec<Node>, items: &mut [([f64; 3], u32)], offset: usize) -> usize {
    let node_index = nodes.len();
    if items.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf { start: offset as u32, end: (offset + items.len()) as u32 });
        return node_index;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (p, _) in items.iter() {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dim = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap_or(0);
    let mid = items.len() / 2;
    items.select_nth_unstable_by(mid, |a, b| a.0[dim].total_cmp(&b.0[dim]));
    let value = items[mid].0[dim];
    nodes.push(Node::Split { dim: dim as u8, value, right: 0 });
    let (left, right) = items.split_at_mut(mid);
    build_node(nodes, left, offset);
    let right_index = build_node(nodes, right, offset + mid);
    if let Node::Split { right, .. } = &mut nodes[node_index] {
        *right = right_index as u32;
    }
    node_index
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scan(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(f64, u32)> {
        let mut all: Vec<(f64, u32)> =
            points.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i as u32)).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Vec3> = (0..3000)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(&points);
        for k in [1, 5, 17] {
            for _ in 0..300 {
                let q = Vec3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2), rng.gen_range(-1.2..1.2));
                assert_eq!(tree.knn(&q, k), scan(&points, &q, k));
            }
        }
    }

    #[test]
    fn ties_break_by_insertion_order() {
        // Many duplicates on a coarse lattice.
        let mut points = Vec::new();
        for i in 0..400 {
            points.push(Vec3::new((i % 5) as f64, ((i / 5) % 4) as f64, 0.0));
        }
        let tree = KdTree::build(&points);
        for q in [Vec3::new(2.0, 1.0, 0.0), Vec3::new(2.5, 1.5, 0.0), Vec3::new(-1.0, 0.0, 0.0)] {
            for k in [1, 7, 30] {
                assert_eq!(tree.knn(&q, k), scan(&points, &q, k));
            }
        }
    }

    #[test]
    fn radius_limited_search_is_a_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vec3> = (0..2000)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let tree = KdTree::build(&points);
        let mut out = Neighbors::new(6);
        for _ in 0..500 {
            let q = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let r2 = rng.gen_range(0.0..0.05);
            tree.knn_within(&q, 6, r2, &mut out);
            let full = scan(&points, &q, 6);
            let expected: Vec<_> = full.into_iter().filter(|&(d, _)| d <= r2).collect();
            assert_eq!(out.as_slice(), &expected[..]);
        }
    }

    #[test]
    fn small_and_empty_trees() {
        let tree = KdTree::build(&[]);
        assert!(tree.knn(&Vec3::zeros(), 3).is_empty());
        let pts = [Vec3::x(), Vec3::y()];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.knn(&Vec3::x(), 5).len(), 2);
        assert_eq!(tree.knn(&Vec3::x(), 1), vec![(0.0, 0)]);
    }
}
