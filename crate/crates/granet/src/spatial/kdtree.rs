//! Exact k-nearest-neighbor search over 3D points.
//!
//! The tree is immutable after construction and results are identical to a
//! brute-force scan, including the tie rule: candidates are ordered by
//! (squared distance, point index).

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // distances are finite by construction
        self.d2
            .partial_cmp(&other.d2)
            .unwrap()
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf {
        start: usize,
        len: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed coordinate set.
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    nodes: Vec<Node>,
    root: usize,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        assert!(!points.is_empty(), "kd-tree over empty point set");
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        let root = Self::build_rec(points, &mut order, 0, points.len(), &mut nodes);
        KdTree {
            points,
            order,
            nodes,
            root,
        }
    }

    fn build_rec(
        points: &[[f64; 3]],
        order: &mut [usize],
        start: usize,
        len: usize,
        nodes: &mut Vec<Node>,
    ) -> usize {
        if len <= LEAF_SIZE {
            nodes.push(Node::Leaf { start, len });
            return nodes.len() - 1;
        }
        // split the widest axis at its median
        let slab = &mut order[start..start + len];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slab.iter() {
            for d in 0..3 {
                lo[d] = lo[d].min(points[i][d]);
                hi[d] = hi[d].max(points[i][d]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        if hi[axis] - lo[axis] == 0.0 {
            // all points coincide; no useful split
            nodes.push(Node::Leaf { start, len });
            return nodes.len() - 1;
        }
        let mid = len / 2;
        slab.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let value = points[slab[mid]][axis];
        let left = Self::build_rec(points, order, start, mid, nodes);
        let right = Self::build_rec(points, order, start + mid, len - mid, nodes);
        nodes.push(Node::Split {
            axis,
            value,
            left,
            right,
        });
        nodes.len() - 1
    }

    /// The `k` nearest points to `query`, sorted by (distance, index).
    /// Returns fewer than `k` entries when the support set is smaller.
    pub fn knn(&self, query: [f64; 3], k: usize) -> Vec<(usize, f64)> {
        assert!(k >= 1);
        let mut heap: std::collections::BinaryHeap<Candidate> =
            std::collections::BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, &mut heap);
        let mut found: Vec<Candidate> = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|c| (c.idx, c.d2.sqrt())).collect()
    }

    fn search(
        &self,
        node: usize,
        query: [f64; 3],
        k: usize,
        heap: &mut std::collections::BinaryHeap<Candidate>,
    ) {
        match &self.nodes[node] {
            Node::Leaf { start, len } => {
                for &idx in &self.order[*start..*start + *len] {
                    let p = self.points[idx];
                    let d2 = (p[0] - query[0]).powi(2)
                        + (p[1] - query[1]).powi(2)
                        + (p[2] - query[2]).powi(2);
                    let cand = Candidate { d2, idx };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, query, k, heap);
                // the far side may still hold equal-distance candidates with
                // lower indices, so prune only on strict inequality
                let plane_d2 = diff * diff;
                if heap.len() < k || plane_d2 <= heap.peek().unwrap().d2 {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}
