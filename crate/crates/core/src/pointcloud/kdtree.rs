use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{CloudError, PointCloud};
use crate::liegroup::Vec3;

const LEAF_SIZE: usize = 8;

/// A query hit: index into the indexed cloud and Euclidean distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        dim: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Exact k-d tree over a fixed set of points.
///
/// Ties in distance resolve toward the smaller point id, so results are
/// identical to a linear scan ordered by `(distance, id)`.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    ids: Vec<u32>,
    /// Inverse of `ids`: storage slot of each point id.
    slots: Vec<u32>,
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Candidate {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self, CloudError> {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Vec3]) -> Result<Self, CloudError> {
        if points.is_empty() {
            return Err(CloudError::EmptyCloud);
        }
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(points, &mut order, 0, &mut nodes);
        let mut slots = vec![0; order.len()];
        for (slot, &id) in order.iter().enumerate() {
            slots[id as usize] = slot as u32;
        }
        Ok(Self {
            points: order.iter().map(|&i| points[i as usize]).collect(),
            ids: order,
            slots,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, query: &Vec3) -> Neighbor {
        self.nearest_within(query, f64::INFINITY)
            .expect("index is non-empty")
    }

    /// The closest point at distance ≤ `max_dist`, if any. Cheaper than
    /// [`SpatialIndex::nearest`] for queries far from the data.
    pub fn nearest_within(&self, query: &Vec3, max_dist: f64) -> Option<Neighbor> {
        self.nearest_within_hint(query, max_dist, None)
    }

    /// Same result as [`SpatialIndex::nearest_within`]. `hint` is the id of a
    /// point likely close to `query` (e.g. the answer for a neighboring query)
    /// and only tightens the initial search bound.
    pub fn nearest_within_hint(
        &self,
        query: &Vec3,
        max_dist: f64,
        hint: Option<usize>,
    ) -> Option<Neighbor> {
        let mut best = Candidate {
            dist2: max_dist * max_dist,
            id: usize::MAX,
        };
        if let Some(id) = hint {
            let c = Candidate {
                dist2: (self.points[self.slots[id] as usize] - query).norm_squared(),
                id,
            };
            if c.dist2 <= best.dist2 {
                best = c;
            }
        }
        let mut offsets = [0.0; 3];
        self.nearest_rec(0, query, 0.0, &mut offsets, &mut best);
        (best.id != usize::MAX).then(|| Neighbor {
            id: best.id,
            distance: best.dist2.sqrt(),
        })
    }

    /// The closest point within `max_dist` together with a lower bound on the
    /// distance of every other point: the second-nearest distance, or
    /// `max_dist` when no second point lies within range.
    pub fn nearest_two_within(&self, query: &Vec3, max_dist: f64) -> (Option<Neighbor>, f64) {
        let bound = Candidate {
            dist2: max_dist * max_dist,
            id: usize::MAX,
        };
        let mut best = [bound; 2];
        let mut offsets = [0.0; 3];
        self.two_rec(0, query, 0.0, &mut offsets, &mut best);
        let first = (best[0].id != usize::MAX).then(|| Neighbor {
            id: best[0].id,
            distance: best[0].dist2.sqrt(),
        });
        let second = if best[1].id == usize::MAX {
            max_dist
        } else {
            best[1].dist2.sqrt()
        };
        (first, second)
    }

    fn two_rec(
        &self,
        node: usize,
        q: &Vec3,
        cell_dist2: f64,
        offsets: &mut [f64; 3],
        best: &mut [Candidate; 2],
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let dist2 = (self.points[slot] - q).norm_squared();
                    if dist2 > best[1].dist2 {
                        continue;
                    }
                    let c = Candidate {
                        dist2,
                        id: self.ids[slot] as usize,
                    };
                    if c < best[0] {
                        best[1] = best[0];
                        best[0] = c;
                    } else if c < best[1] {
                        best[1] = c;
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let d = dim as usize;
                let diff = q[d] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.two_rec(near as usize, q, cell_dist2, offsets, best);
                let old = offsets[d];
                let far_dist2 = cell_dist2 - old * old + diff * diff;
                if far_dist2 <= best[1].dist2 {
                    offsets[d] = diff;
                    self.two_rec(far as usize, q, far_dist2, offsets, best);
                    offsets[d] = old;
                }
            }
        }
    }

    /// `cell_dist2` is the squared distance from `q` to the node's cell,
    /// built from the per-axis `offsets` to the splitting planes crossed so far.
    fn nearest_rec(
        &self,
        node: usize,
        q: &Vec3,
        cell_dist2: f64,
        offsets: &mut [f64; 3],
        best: &mut Candidate,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let dist2 = (self.points[slot] - q).norm_squared();
                    if dist2 > best.dist2 {
                        continue;
                    }
                    let id = self.ids[slot] as usize;
                    if dist2 < best.dist2 || id < best.id {
                        *best = Candidate { dist2, id };
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let d = dim as usize;
                let diff = q[d] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.nearest_rec(near as usize, q, cell_dist2, offsets, best);
                let old = offsets[d];
                let far_dist2 = cell_dist2 - old * old + diff * diff;
                if far_dist2 <= best.dist2 {
                    offsets[d] = diff;
                    self.nearest_rec(far as usize, q, far_dist2, offsets, best);
                    offsets[d] = old;
                }
            }
        }
    }

    /// The `k` closest points sorted by ascending distance (fewer if the cloud is smaller).
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        if k == 1 {
            return vec![self.nearest(query)];
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, query, k, &mut heap);
        heap.into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.dist2.sqrt(),
            })
            .collect()
    }

    fn knn_rec(&self, node: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let c = Candidate {
                        dist2: (self.points[slot] - q).norm_squared(),
                        id: self.ids[slot] as usize,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.knn_rec(near as usize, q, k, heap);
                let worst = if heap.len() < k {
                    f64::INFINITY
                } else {
                    heap.peek().map_or(f64::INFINITY, |c| c.dist2)
                };
                if diff * diff <= worst {
                    self.knn_rec(far as usize, q, k, heap);
                }
            }
        }
    }

    /// All points within `radius` (inclusive), sorted by id.
    pub fn within_radius(&self, query: &Vec3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if radius.is_infinite() {
            out.extend(self.points.iter().zip(&self.ids).map(|(p, &id)| Neighbor {
                id: id as usize,
                distance: (p - query).norm(),
            }));
        } else if radius >= 0.0 {
            self.radius_rec(0, query, radius * radius, &mut out);
        }
        out.sort_unstable_by_key(|n| n.id);
        out
    }

    fn radius_rec(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for slot in start as usize..end as usize {
                    let d2 = (self.points[slot] - q).norm_squared();
                    if d2 <= r2 {
                        out.push(Neighbor {
                            id: self.ids[slot] as usize,
                            distance: d2.sqrt(),
                        });
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[dim as usize] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.radius_rec(near as usize, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_rec(far as usize, q, r2, out);
                }
            }
        }
    }
}

fn build_node(points: &[Vec3], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let index = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return index;
    }
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for &i in order.iter() {
        let p = &points[i as usize];
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let dim = (hi - lo).imax();
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][dim].total_cmp(&points[b as usize][dim])
    });
    let value = points[order[mid] as usize][dim];

    // placeholder, patched once both children exist
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (left_part, right_part) = order.split_at_mut(mid);
    let left = build_node(points, left_part, offset, nodes);
    let right = build_node(points, right_part, offset + mid, nodes);
    nodes[index as usize] = Node::Split {
        dim: dim as u8,
        value,
        left,
        right,
    };
    index
}
