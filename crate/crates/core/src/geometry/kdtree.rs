//! Exact k-nearest-neighbor search on a static kd-tree.
//!
//! Results are ordered by ascending `(distance², index)`, so equal distances
//! resolve to the lower index. The tree never trades exactness for speed: a
//! subtree is skipped only when its splitting plane is strictly farther than
//! the current k-th candidate.

use std::cmp::Ordering;

use super::{dist2, Point3, PointCloud};
use crate::error::{Error, Result};

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Static kd-tree over a copy of the cloud's coordinates.
#[derive(Debug, Clone)]
pub struct KdTree {
    coords: Vec<[f64; 3]>,
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    id: usize,
}

impl Candidate {
    #[inline]
    fn cmp_key(&self, other: &Candidate) -> Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .unwrap_or(Ordering::Equal)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded, sorted candidate list.
struct Best {
    k: usize,
    items: Vec<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.k - 1].d2
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.items.len() == self.k {
            let worst = &self.items[self.k - 1];
            if c.cmp_key(worst) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|x| x.cmp_key(&c) == Ordering::Less);
        self.items.insert(pos, c);
    }
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Point3]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut ids: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !ids.is_empty() {
            build_node(&coords, &mut ids, 0, points.len(), &mut nodes);
        }
        let coords = ids.iter().map(|&i| coords[i]).collect();
        Self { coords, ids, nodes }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k` nearest points to `q` as `(index, distance²)`, ascending.
    /// `exclude` removes one index (the query's own) from consideration.
    pub fn nearest_k(&self, q: &Point3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let mut best = Best::new(k);
        self.search(0, [q.x, q.y, q.z], exclude, &mut best);
        best.items.into_iter().map(|c| (c.id, c.d2)).collect()
    }

    /// Single nearest neighbour as `(index, distance²)`.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let r = self.nearest_k(q, 1, None);
        r[0]
    }

    fn search(&self, node: usize, q: [f64; 3], exclude: Option<usize>, best: &mut Best) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start..end {
                    let id = self.ids[slot];
                    if Some(id) == exclude {
                        continue;
                    }
                    let c = self.coords[slot];
                    let dx = q[0] - c[0];
                    let dy = q[1] - c[1];
                    let dz = q[2] - c[2];
                    best.offer(Candidate {
                        d2: dx * dx + dy * dy + dz * dz,
                        id,
                    });
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude, best);
                if diff * diff <= best.bound() {
                    self.search(far, q, exclude, best);
                }
            }
        }
    }
}

fn build_node(
    coords: &[[f64; 3]],
    ids: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let me = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return me;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &ids[start..end] {
        for a in 0..3 {
            lo[a] = lo[a].min(coords[i][a]);
            hi[a] = hi[a].max(coords[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
        .unwrap();
    if hi[axis] - lo[axis] == 0.0 {
        // all coincident
        nodes.push(Node::Leaf { start, end });
        return me;
    }
    let mid = start + (end - start) / 2;
    ids[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
        coords[a][axis].partial_cmp(&coords[b][axis]).unwrap()
    });
    let value = coords[ids[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build_node(coords, ids, start, mid, nodes);
    let right = build_node(coords, ids, mid, end, nodes);
    nodes[me] = Node::Split { axis, value, left, right };
    me
}

/// Fixed-size neighbor lists, one per point, owner excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    /// Builds an index from explicit lists. Each list must hold exactly `k`
    /// distinct entries other than its owner.
    pub fn from_lists(lists: &[Vec<usize>], positions: &[Point3]) -> Result<Self> {
        let k = lists.first().map(|l| l.len()).unwrap_or(0);
        if k == 0 {
            return Err(Error::invalid("neighbor lists must be non-empty"));
        }
        let mut indices = Vec::with_capacity(lists.len() * k);
        let mut distances = Vec::with_capacity(lists.len() * k);
        for (i, list) in lists.iter().enumerate() {
            if list.len() != k {
                return Err(Error::invalid(format!("list {i} has {} entries, expected {k}", list.len())));
            }
            for (a, &j) in list.iter().enumerate() {
                if j == i || j >= lists.len() || list[..a].contains(&j) {
                    return Err(Error::invalid(format!("list {i} has invalid entry {j}")));
                }
                indices.push(j);
                distances.push(dist2(&positions[i], &positions[j]).sqrt());
            }
        }
        Ok(Self { k, indices, distances })
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Euclidean distances matching [`Self::neighbors`].
    #[inline]
    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Row-major `len × k` neighbor table.
    #[inline]
    pub fn flat(&self) -> &[usize] {
        &self.indices
    }
}

/// Exact k nearest neighbours of every point, self excluded.
pub fn knn_query(cloud: &PointCloud, k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k >= cloud.len() {
        return Err(Error::invalid(format!(
            "k = {k} must be smaller than the point count {}",
            cloud.len()
        )));
    }
    let tree = KdTree::build(cloud);
    let n = cloud.len();
    let mut indices = Vec::with_capacity(n * k);
    let mut distances = Vec::with_capacity(n * k);
    for (i, p) in cloud.points().iter().enumerate() {
        for (j, d2) in tree.nearest_k(p, k, Some(i)) {
            indices.push(j);
            distances.push(d2.sqrt());
        }
    }
    Ok(NeighborIndex { k, indices, distances })
}
