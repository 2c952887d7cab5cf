//! Geometry-only machinery: KNN search, farthest point sampling, octant
//! neighbor selection, block tiling, fixed-size resampling, and
//! interpolation index computation.

mod kdtree;

pub use kdtree::KdTree;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

/// Per-point K-nearest-neighbor table. Rows are sorted by non-decreasing
/// distance with ties broken by ascending point index; when the support set
/// has fewer than K points the nearest entry is duplicated to fill the row.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    distances: Vec<f64>,
    k: usize,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let s = i * self.k;
        (&self.indices[s..s + self.k], &self.distances[s..s + self.k])
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>, k: usize) -> Self {
        let mut indices = Vec::with_capacity(rows.len() * k);
        let mut distances = Vec::with_capacity(rows.len() * k);
        for row in rows {
            debug_assert_eq!(row.len(), k);
            for (i, d) in row {
                indices.push(i);
                distances.push(d);
            }
        }
        NeighborIndex {
            indices,
            distances,
            k,
        }
    }
}

pub fn cloud_coords(cloud: &PointCloud) -> Vec<[f64; 3]> {
    cloud.points.iter().map(|p| p.coords()).collect()
}

/// K nearest support points for every query point (Euclidean metric).
/// When the query set is the support set, each row starts with the point
/// itself at distance 0.
pub fn knn_search(support: &[[f64; 3]], queries: &[[f64; 3]], k: usize) -> Result<NeighborIndex> {
    if support.is_empty() {
        return Err(Error::Contract("knn_search over empty support set".into()));
    }
    if k == 0 {
        return Err(Error::Contract("knn_search requires K >= 1".into()));
    }
    let tree = KdTree::build(support);
    let rows: Vec<Vec<(usize, f64)>> = queries
        .par_iter()
        .map(|&q| {
            let mut row = tree.knn(q, k);
            // duplication rule for undersized supports
            while row.len() < k {
                row.push(row[0]);
            }
            row
        })
        .collect();
    Ok(NeighborIndex::from_rows(rows, k))
}

/// Greedy farthest point sampling. Starts at index 0 and repeatedly appends
/// the point with the largest distance to the chosen set; distance ties go
/// to the lowest index, so the result is deterministic.
pub fn farthest_point_sampling(points: &[[f64; 3]], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::Contract(format!(
            "farthest_point_sampling needs 1 <= M <= {n}, got {m}"
        )));
    }
    let d2 = |a: [f64; 3], b: [f64; 3]| {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    let mut chosen = Vec::with_capacity(m);
    chosen.push(0);
    let mut min_d2: Vec<f64> = points.iter().map(|&p| d2(p, points[0])).collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d2 {
                best_d2 = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = d2(points[i], points[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen)
}

/// Octant id of an offset from the center: 4·[dx≥0] + 2·[dy≥0] + [dz≥0].
pub fn octant_id(offset: [f64; 3]) -> usize {
    let b = |v: f64| usize::from(v >= 0.0);
    4 * b(offset[0]) + 2 * b(offset[1]) + b(offset[2])
}

/// Picks, for each of the eight octants around `center`, the nearest
/// neighbor falling in it. The center itself is skipped as a candidate and
/// fills any empty octant. The result does not depend on the ordering of
/// the neighbor row.
pub fn octant_select(
    center: [f64; 3],
    center_idx: usize,
    row_indices: &[usize],
    row_distances: &[f64],
    support: &[[f64; 3]],
) -> [usize; 8] {
    debug_assert_eq!(row_indices.len(), row_distances.len());
    // (distance, index) of the best candidate per octant
    let mut best: [Option<(f64, usize)>; 8] = [None; 8];
    for (&idx, &dist) in row_indices.iter().zip(row_distances) {
        if idx == center_idx {
            continue;
        }
        let p = support[idx];
        let oct = octant_id([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        let cand = (dist, idx);
        match best[oct] {
            Some(cur) if (cur.0, cur.1) <= (cand.0, cand.1) => {}
            _ => best[oct] = Some(cand),
        }
    }
    std::array::from_fn(|oct| best[oct].map_or(center_idx, |(_, idx)| idx))
}

/// Block tiling plan: overlapping square subblock windows with per-window
/// point membership. Windows are half-open, except that the last window
/// along each axis includes its upper edge so boundary points are covered.
#[derive(Debug, Clone)]
pub struct TilePlan {
    pub block: f64,
    pub sub: f64,
    pub stride: f64,
    pub origins: Vec<[f64; 2]>,
    pub members: Vec<Vec<usize>>,
}

impl TilePlan {
    pub fn subblock_count(&self) -> usize {
        self.origins.len()
    }

    pub fn subblock_center(&self, i: usize) -> [f64; 2] {
        [
            self.origins[i][0] + self.sub / 2.0,
            self.origins[i][1] + self.sub / 2.0,
        ]
    }

    /// Text manifest: a comment header with the tiling parameters, then per
    /// subblock one `origin_x origin_y count` line followed by its point
    /// indices (16 per line).
    pub fn to_manifest(&self) -> String {
        let mut s = format!(
            "# tileplan block={} sub={} stride={}\n",
            self.block, self.sub, self.stride
        );
        for (origin, members) in self.origins.iter().zip(&self.members) {
            s.push_str(&format!("{} {} {}\n", origin[0], origin[1], members.len()));
            for chunk in members.chunks(16) {
                let line: Vec<String> = chunk.iter().map(usize::to_string).collect();
                s.push_str(&line.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn parse_manifest(text: &str) -> crate::error::Result<TilePlan> {
        use crate::error::Error;
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<manifest>".into(),
            line,
            msg,
        };
        let mut block = 100.0;
        let mut sub = 25.0;
        let mut stride = 12.5;
        let mut origins = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut pending: usize = 0;
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                for field in rest.split_whitespace() {
                    if let Some((k, v)) = field.split_once('=') {
                        let v: f64 = v
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad header value '{field}'")))?;
                        match k {
                            "block" => block = v,
                            "sub" => sub = v,
                            "stride" => stride = v,
                            _ => {}
                        }
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if pending == 0 {
                if fields.len() != 3 {
                    return Err(bad(
                        lineno,
                        format!("expected 'origin_x origin_y count', got '{line}'"),
                    ));
                }
                let ox: f64 = fields[0]
                    .parse()
                    .map_err(|_| bad(lineno, "bad origin".into()))?;
                let oy: f64 = fields[1]
                    .parse()
                    .map_err(|_| bad(lineno, "bad origin".into()))?;
                pending = fields[2]
                    .parse()
                    .map_err(|_| bad(lineno, "bad count".into()))?;
                origins.push([ox, oy]);
                members.push(Vec::with_capacity(pending));
            } else {
                for f in fields {
                    if pending == 0 {
                        return Err(bad(lineno, "more indices than declared".into()));
                    }
                    let idx: usize = f
                        .parse()
                        .map_err(|_| bad(lineno, format!("bad index '{f}'")))?;
                    members.last_mut().unwrap().push(idx);
                    pending -= 1;
                }
            }
        }
        if pending != 0 {
            return Err(bad(
                text.lines().count(),
                format!("manifest truncated: {pending} indices missing"),
            ));
        }
        Ok(TilePlan {
            block,
            sub,
            stride,
            origins,
            members,
        })
    }
}

fn axis_origins(min: f64, extent: f64, sub: f64, stride: f64) -> Vec<f64> {
    let count = if extent <= sub {
        1
    } else {
        ((extent - sub) / stride).ceil() as usize + 1
    };
    (0..count).map(|i| min + i as f64 * stride).collect()
}

/// Windows along one axis that contain `v`; `origins` must be the output of
/// `axis_origins` for the same axis.
fn windows_containing(v: f64, origins: &[f64], sub: f64) -> Vec<usize> {
    let last = origins.len() - 1;
    origins
        .iter()
        .enumerate()
        .filter(|&(i, &o)| v >= o && (v < o + sub || (i == last && v <= o + sub)))
        .map(|(i, _)| i)
        .collect()
}

/// Tiles the cloud into `sub`-sized square windows at `stride` spacing
/// (the ALS-scale defaults are 100 m blocks, 25 m windows, 12.5 m
/// stride). Every point lands in at least one window; windows that would
/// contain no points are dropped.
pub fn tile_blocks(cloud: &PointCloud, block: f64, sub: f64, stride: f64) -> Result<TilePlan> {
    if cloud.is_empty() {
        return Err(Error::Contract("tile_blocks on an empty cloud".into()));
    }
    if !(stride > 0.0 && sub > 0.0 && stride <= sub) {
        return Err(Error::Contract(format!(
            "tiling requires 0 < stride <= sub, got stride {stride}, sub {sub}"
        )));
    }
    let (lo, hi) = cloud.bounds();
    let xs = axis_origins(lo[0], hi[0] - lo[0], sub, stride);
    let ys = axis_origins(lo[1], hi[1] - lo[1], sub, stride);
    let ny = ys.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); xs.len() * ny];
    for (pi, p) in cloud.points.iter().enumerate() {
        for &wx in &windows_containing(p.x, &xs, sub) {
            for &wy in &windows_containing(p.y, &ys, sub) {
                members[wx * ny + wy].push(pi);
            }
        }
    }
    let mut origins = Vec::new();
    let mut kept = Vec::new();
    for (wi, m) in members.into_iter().enumerate() {
        if !m.is_empty() {
            origins.push([xs[wi / ny], ys[wi % ny]]);
            kept.push(m);
        }
    }
    Ok(TilePlan {
        block,
        sub,
        stride,
        origins,
        members: kept,
    })
}

/// A fixed-size random sample of one subblock, as indices into the parent
/// cloud. Reproducible from the seed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBlock {
    pub subblock: usize,
    pub seed: u64,
    pub indices: Vec<usize>,
}

/// Samples exactly `n` parent indices from a subblock's member list:
/// without replacement when the subblock is big enough, otherwise every
/// member once plus uniform redraws.
pub fn resample_fixed(
    members: &[usize],
    subblock: usize,
    n: usize,
    seed: u64,
) -> Result<SampledBlock> {
    if members.is_empty() {
        return Err(Error::Contract(
            "resample_fixed on an empty subblock".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize>;
    if members.len() >= n {
        let mut pool = members.to_vec();
        pool.shuffle(&mut rng);
        pool.truncate(n);
        indices = pool;
    } else {
        indices = members.to_vec();
        while indices.len() < n {
            indices.push(members[rng.random_range(0..members.len())]);
        }
        indices.shuffle(&mut rng);
    }
    Ok(SampledBlock {
        subblock,
        seed,
        indices,
    })
}

/// Upsampling assignment: for each fine point, its k nearest coarse points
/// with normalized inverse-distance weights. A coincident coarse point
/// takes the whole weight.
#[derive(Debug, Clone)]
pub struct Interpolation {
    pub index: NeighborIndex,
    /// Row-major fine×k weights, each row summing to 1.
    pub weights: Vec<f64>,
}

pub fn interpolation_index(
    coarse: &[[f64; 3]],
    fine: &[[f64; 3]],
    k: usize,
) -> Result<Interpolation> {
    if coarse.is_empty() {
        return Err(Error::Contract(
            "interpolation over empty coarse set".into(),
        ));
    }
    if k != 1 && k != 3 {
        return Err(Error::Contract(format!(
            "interpolation supports k in {{1, 3}}, got {k}"
        )));
    }
    let index = knn_search(coarse, fine, k)?;
    let mut weights = vec![0.0; fine.len() * k];
    for i in 0..fine.len() {
        let (_, dists) = index.row(i);
        let w = &mut weights[i * k..(i + 1) * k];
        if dists[0] == 0.0 {
            w[0] = 1.0;
        } else {
            let inv: Vec<f64> = dists.iter().map(|d| 1.0 / d).collect();
            let total: f64 = inv.iter().sum();
            for (wj, ij) in w.iter_mut().zip(inv) {
                *wj = ij / total;
            }
        }
    }
    Ok(Interpolation { index, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{ClassMap, Point};

    fn cloud_from_xy(coords: &[(f64, f64)]) -> PointCloud {
        let points = coords
            .iter()
            .map(|&(x, y)| Point::new(x, y, 0.0, 1.0, 1))
            .collect();
        PointCloud::new(points, ClassMap::isprs())
    }

    #[test]
    fn knn_basic_example() {
        let support = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        let ni = knn_search(&support, &[[0.0, 0.0, 0.0]], 2).unwrap();
        let (idx, dist) = ni.row(0);
        assert_eq!(idx, &[0, 1]);
        assert_eq!(dist, &[0.0, 1.0]);
    }

    #[test]
    fn knn_duplicates_when_support_small() {
        let support = [[5.0, 5.0, 5.0]];
        let ni = knn_search(&support, &[[0.0, 0.0, 0.0]], 3).unwrap();
        assert_eq!(ni.row(0).0, &[0, 0, 0]);
    }

    #[test]
    fn knn_self_first_when_query_is_support() {
        let support = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 2.0, 0.0]];
        let ni = knn_search(&support, &support, 2).unwrap();
        for i in 0..support.len() {
            let (idx, dist) = ni.row(i);
            assert_eq!(idx[0], i);
            assert_eq!(dist[0], 0.0);
        }
    }

    #[test]
    fn knn_empty_support_is_contract_error() {
        assert!(knn_search(&[], &[[0.0; 3]], 1).is_err());
    }

    #[test]
    fn fps_collinear_traces() {
        let pts = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [3.0, 0.0, 0.0],
        ];
        assert_eq!(farthest_point_sampling(&pts, 2).unwrap(), vec![0, 3]);
        // points 1 and 2 tie at min-distance 1; the lower index wins
        assert_eq!(farthest_point_sampling(&pts, 3).unwrap(), vec![0, 3, 1]);
        assert_eq!(farthest_point_sampling(&pts, 4).unwrap(), vec![0, 3, 1, 2]);
    }

    #[test]
    fn fps_m_bounds() {
        let pts = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(farthest_point_sampling(&pts, 3).is_err());
        assert!(farthest_point_sampling(&pts, 0).is_err());
    }

    #[test]
    fn octant_all_corners() {
        let center = [0.0, 0.0, 0.0];
        // support[0] is the center itself; corners of the unit cube follow
        let mut support: Vec<[f64; 3]> = vec![center];
        let mut corner_octants = Vec::new();
        for &sx in &[-0.5, 0.5] {
            for &sy in &[-0.5, 0.5] {
                for &sz in &[-0.5, 0.5] {
                    support.push([sx, sy, sz]);
                    corner_octants.push(octant_id([sx, sy, sz]));
                }
            }
        }
        let idxs: Vec<usize> = (0..support.len()).collect();
        let dists: Vec<f64> = support
            .iter()
            .map(|p| (p[0].powi(2) + p[1].powi(2) + p[2].powi(2)).sqrt())
            .collect();
        let slots = octant_select(center, 0, &idxs, &dists, &support);
        for (corner, &oct) in corner_octants.iter().enumerate() {
            assert_eq!(slots[oct], corner + 1);
        }
    }

    #[test]
    fn octant_empty_slots_take_the_center() {
        let center = [0.0, 0.0, 0.0];
        let support: Vec<[f64; 3]> = vec![center, [1.0, 1.0, 1.0]];
        let slots = octant_select(center, 0, &[0, 1], &[0.0, 3f64.sqrt()], &support);
        assert_eq!(slots[7], 1); // (+,+,+)
        for oct in 0..7 {
            assert_eq!(slots[oct], 0);
        }
    }

    #[test]
    fn octant_keeps_nearest_in_octant() {
        let center = [0.0, 0.0, 0.0];
        let support: Vec<[f64; 3]> = vec![center, [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let d: Vec<f64> = support
            .iter()
            .map(|p| (p[0].powi(2) + p[1].powi(2) + p[2].powi(2)).sqrt())
            .collect();
        let slots = octant_select(center, 0, &[0, 2, 1], &[d[0], d[2], d[1]], &support);
        assert_eq!(slots[7], 1);
    }

    #[test]
    fn octant_is_order_invariant() {
        let center = [0.5, 0.5, 0.5];
        let support: Vec<[f64; 3]> = (0..20)
            .map(|i| {
                let t = i as f64;
                [
                    (t * 0.711).sin() * 2.0,
                    (t * 1.37).cos() * 2.0,
                    (t * 0.29).sin() * 2.0,
                ]
            })
            .collect();
        let idxs: Vec<usize> = (0..20).collect();
        let dists: Vec<f64> = support
            .iter()
            .map(|p| {
                ((p[0] - center[0]).powi(2)
                    + (p[1] - center[1]).powi(2)
                    + (p[2] - center[2]).powi(2))
                .sqrt()
            })
            .collect();
        let a = octant_select(center, 3, &idxs, &dists, &support);
        let rev_i: Vec<usize> = idxs.iter().rev().cloned().collect();
        let rev_d: Vec<f64> = dists.iter().rev().cloned().collect();
        let b = octant_select(center, 3, &rev_i, &rev_d, &support);
        assert_eq!(a, b);
    }

    #[test]
    fn tiling_50m_extent_gives_nine_subblocks() {
        let mut coords = Vec::new();
        for i in 0..=10 {
            for j in 0..=10 {
                coords.push((i as f64 * 5.0, j as f64 * 5.0));
            }
        }
        let plan = tile_blocks(&cloud_from_xy(&coords), 100.0, 25.0, 12.5).unwrap();
        assert_eq!(plan.subblock_count(), 9);
        let mut xs: Vec<f64> = plan.origins.iter().map(|o| o[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        assert_eq!(xs, vec![0.0, 12.5, 25.0]);
    }

    #[test]
    fn tiling_small_extent_single_subblock() {
        let coords: Vec<(f64, f64)> = (0..20).map(|i| (i as f64 * 0.5, i as f64 * 0.5)).collect();
        let plan = tile_blocks(&cloud_from_xy(&coords), 100.0, 25.0, 12.5).unwrap();
        assert_eq!(plan.subblock_count(), 1);
    }

    #[test]
    fn boundary_point_in_both_windows() {
        let coords = vec![
            (0.0, 0.0),
            (12.5, 0.0),
            (30.0, 0.0),
            (0.0, 30.0),
            (30.0, 30.0),
        ];
        let plan = tile_blocks(&cloud_from_xy(&coords), 100.0, 25.0, 12.5).unwrap();
        let holding: Vec<usize> = plan
            .members
            .iter()
            .enumerate()
            .filter(|(_, m)| m.contains(&1))
            .map(|(i, _)| i)
            .collect();
        let origins: Vec<f64> = holding.iter().map(|&i| plan.origins[i][0]).collect();
        assert!(
            origins.contains(&0.0) && origins.contains(&12.5),
            "{origins:?}"
        );
    }

    #[test]
    fn tiling_covers_every_point() {
        let coords: Vec<(f64, f64)> = (0..300)
            .map(|i| {
                let t = i as f64;
                ((t * 0.7919).fract() * 60.0, (t * 0.5477).fract() * 60.0)
            })
            .collect();
        let plan = tile_blocks(&cloud_from_xy(&coords), 100.0, 25.0, 12.5).unwrap();
        let mut seen = vec![false; coords.len()];
        for m in &plan.members {
            for &i in m {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn resample_exact_fit_is_a_permutation() {
        let members: Vec<usize> = (100..104).collect();
        let s = resample_fixed(&members, 0, 4, 9).unwrap();
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, members);
    }

    #[test]
    fn resample_small_subblock_covers_everything() {
        let members: Vec<usize> = (0..10).collect();
        let s = resample_fixed(&members, 0, 4096, 1).unwrap();
        assert_eq!(s.indices.len(), 4096);
        for m in &members {
            assert!(s.indices.contains(m));
        }
    }

    #[test]
    fn resample_is_reproducible() {
        let members: Vec<usize> = (0..50).collect();
        let a = resample_fixed(&members, 2, 32, 77).unwrap();
        let b = resample_fixed(&members, 2, 32, 77).unwrap();
        assert_eq!(a, b);
        let c = resample_fixed(&members, 2, 32, 78).unwrap();
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn interpolation_identity_case() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let interp = interpolation_index(&pts, &pts, 1).unwrap();
        for i in 0..3 {
            assert_eq!(interp.index.row(i).0, &[i]);
            assert_eq!(interp.weights[i], 1.0);
        }
    }

    #[test]
    fn interpolation_duplication_and_normalization() {
        // fine point midway between two coarse points, k=3 with 2 coarse
        let coarse = [[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let fine = [[1.0, 0.0, 0.0]];
        let interp = interpolation_index(&coarse, &fine, 3).unwrap();
        let (idx, dist) = interp.index.row(0);
        assert_eq!(idx, &[0, 1, 0]);
        assert_eq!(dist, &[1.0, 1.0, 1.0]);
        let w = &interp.weights[0..3];
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for wi in w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_k_must_be_1_or_3() {
        let pts = [[0.0; 3]];
        assert!(interpolation_index(&pts, &pts, 2).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let coords: Vec<(f64, f64)> = (0..80)
            .map(|i| {
                let t = i as f64;
                ((t * 0.37).fract() * 50.0, (t * 0.61).fract() * 50.0)
            })
            .collect();
        let plan = tile_blocks(&cloud_from_xy(&coords), 100.0, 25.0, 12.5).unwrap();
        let text = plan.to_manifest();
        let parsed = TilePlan::parse_manifest(&text).unwrap();
        assert_eq!(parsed.origins, plan.origins);
        assert_eq!(parsed.members, plan.members);
        assert_eq!(parsed.sub, plan.sub);
        assert_eq!(parsed.stride, plan.stride);
    }

    #[test]
    fn manifest_rejects_truncation() {
        let text = "# tileplan block=100 sub=25 stride=12.5\n0 0 5\n1 2 3\n";
        assert!(TilePlan::parse_manifest(text).is_err());
    }
}
