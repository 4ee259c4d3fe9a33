//! Incremental world-frame point map with voxel deduplication, exact k-NN,
//! and local plane fitting.
//!
//! Insertion keeps at most one point per voxel cell (the first arrival
//! wins) and enforces half a voxel edge of separation across cell
//! boundaries, which bounds density without resampling history. Lookups
//! combine
//! a kd-tree over the points present at the last rebuild with a linear scan
//! over the points inserted since; the tree is rebuilt once the un-indexed
//! tail exceeds `rebuild_threshold`. Results are therefore *exact* at all
//! times, and distance ties are broken by insertion order (lower index
//! first).

use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;

/// Result of fitting a plane to a neighborhood of map points.
#[derive(Clone, Copy, Debug)]
pub struct PlaneFit {
    /// Unit normal; sign fixed so the largest-magnitude component is
    /// positive (keeps outputs deterministic).
    pub normal: Vector3<f64>,
    /// Centroid of the fitted points; the plane passes through it.
    pub centroid: Vector3<f64>,
    /// Root-mean-square out-of-plane distance of the fitted points.
    pub rms: f64,
    /// Root-mean-square in-plane extent along the *second-weakest*
    /// direction. Near zero the neighborhood is a needle: the normal is
    /// then an arbitrary direction perpendicular to the line and must not
    /// be used as a constraint.
    pub lateral_rms: f64,
    /// False when the neighborhood is too small, degenerate (collinear), or
    /// any point lies farther than the tolerance from the plane.
    pub valid: bool,
}

impl PlaneFit {
    /// Signed distance from `p` to the plane.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.centroid))
    }
}

/// Least-squares plane through `points` (smallest eigenvector of the
/// scatter matrix). `tol` is the largest out-of-plane distance any fitted
/// point may have for the fit to count as valid.
pub fn fit_plane(points: &[Vector3<f64>], tol: f64) -> PlaneFit {
    let invalid = PlaneFit {
        normal: Vector3::z(),
        centroid: Vector3::zeros(),
        rms: f64::INFINITY,
        lateral_rms: 0.0,
        valid: false,
    };
    if points.len() < 3 {
        return invalid;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    // Sort eigenpairs ascending.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lam = [
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    ];
    // Collinear (or coincident) neighborhoods leave no unique normal.
    if lam[1] <= 1e-9 * lam[2].max(f64::MIN_POSITIVE) {
        return invalid;
    }
    let mut normal = eig.eigenvectors.column(order[0]).into_owned();
    let mut dominant = 0;
    for i in 1..3 {
        if normal[i].abs() > normal[dominant].abs() {
            dominant = i;
        }
    }
    if normal[dominant] < 0.0 {
        normal = -normal;
    }
    normal /= normal.norm();
    let valid = points
        .iter()
        .all(|p| normal.dot(&(p - centroid)).abs() <= tol);
    PlaneFit {
        normal,
        centroid,
        rms: (lam[0] / n).sqrt(),
        lateral_rms: (lam[1] / n).sqrt(),
        valid,
    }
}

/// Smallest in-plane lateral rms over all leave-one-out subsets of the
/// neighborhood (second-smallest scatter eigenvalue, as in
/// [`PlaneFit::lateral_rms`], but robust to a single point).
///
/// A "line plus one off-line point" neighborhood is exactly coplanar with
/// substantial full-set lateral spread, yet its fitted normal is dictated
/// entirely by the single off-line point — the plane can pivot freely about
/// the line. Removing that point collapses the lateral spread to the line's
/// thickness, which is what this statistic measures; genuine two-dimensional
/// patches keep their spread under any single removal.
pub fn min_loo_lateral_rms(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 4 {
        return 0.0;
    }
    let mut s = Matrix3::zeros();
    let mut m = Vector3::zeros();
    for p in points {
        s += p * p.transpose();
        m += p;
    }
    let n1 = (points.len() - 1) as f64;
    let mut min_rms = f64::INFINITY;
    for p in points {
        let s_i = s - p * p.transpose();
        let m_i = m - p;
        let scatter = s_i - m_i * m_i.transpose() / n1;
        let eig = scatter.symmetric_eigen();
        let mut lam = [
            eig.eigenvalues[0].max(0.0),
            eig.eigenvalues[1].max(0.0),
            eig.eigenvalues[2].max(0.0),
        ];
        lam.sort_by(f64::total_cmp);
        min_rms = min_rms.min((lam[1] / n1).sqrt());
    }
    min_rms
}

#[derive(Clone, Copy)]
struct Node {
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Map of world-frame points. See module docs for semantics.
#[derive(Clone)]
pub struct PointMap {
    points: Vec<Vector3<f64>>,
    occupied: HashMap<(i64, i64, i64), u32>,
    voxel: f64,
    nodes: Vec<Node>,
    root: i32,
    indexed: usize,
    rebuild_threshold: usize,
    rebuilds: usize,
}

impl PointMap {
    /// `voxel`: deduplication cell edge (m). `rebuild_threshold`: number of
    /// un-indexed points tolerated before the kd-tree is rebuilt.
    pub fn new(voxel: f64, rebuild_threshold: usize) -> Self {
        assert!(voxel > 0.0, "voxel size must be positive");
        PointMap {
            points: Vec::new(),
            occupied: HashMap::new(),
            voxel,
            nodes: Vec::new(),
            root: -1,
            indexed: 0,
            rebuild_threshold: rebuild_threshold.max(1),
            rebuilds: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> Vector3<f64> {
        self.points[idx]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Number of kd-tree rebuilds performed so far.
    pub fn rebuild_count(&self) -> usize {
        self.rebuilds
    }

    fn cell(&self, p: &Vector3<f64>) -> (i64, i64, i64) {
        (
            (p.x / self.voxel).floor() as i64,
            (p.y / self.voxel).floor() as i64,
            (p.z / self.voxel).floor() as i64,
        )
    }

    /// Inserts points, keeping only the first point of each voxel cell and
    /// requiring half a voxel edge of clearance from occupants of adjacent
    /// cells. Without the clearance rule, re-observations straddling a cell
    /// boundary pile up near-duplicate points millimeters apart, which
    /// starve plane-fit neighborhoods of independent support. Returns how
    /// many points survived deduplication.
    pub fn insert(&mut self, points: &[Vector3<f64>]) -> usize {
        let min_sep_sq = (0.5 * self.voxel).powi(2);
        let mut added = 0;
        'next: for p in points {
            let c = self.cell(p);
            if self.occupied.contains_key(&c) {
                continue;
            }
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        if (dx, dy, dz) == (0, 0, 0) {
                            continue;
                        }
                        if let Some(&i) = self.occupied.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            if (self.points[i as usize] - p).norm_squared() < min_sep_sq {
                                continue 'next;
                            }
                        }
                    }
                }
            }
            self.occupied.insert(c, self.points.len() as u32);
            self.points.push(*p);
            added += 1;
        }
        if self.points.len() - self.indexed > self.rebuild_threshold {
            self.rebuild();
        }
        added
    }

    fn rebuild(&mut self) {
        let mut idxs: Vec<u32> = (0..self.points.len() as u32).collect();
        self.nodes.clear();
        self.nodes.reserve(idxs.len());
        let root = self.build_node(&mut idxs);
        self.root = root;
        self.indexed = self.points.len();
        self.rebuilds += 1;
    }

    fn build_node(&mut self, idxs: &mut [u32]) -> i32 {
        if idxs.is_empty() {
            return -1;
        }
        // Split on the widest axis for balanced geometry.
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in idxs.iter() {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = idxs.len() / 2;
        idxs.select_nth_unstable_by(mid, |&a, &b| {
            self.points[a as usize][axis]
                .total_cmp(&self.points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let point = idxs[mid];
        let node_slot = self.nodes.len();
        self.nodes.push(Node {
            point,
            axis: axis as u8,
            left: -1,
            right: -1,
        });
        let (left_half, rest) = idxs.split_at_mut(mid);
        let right_half = &mut rest[1..];
        let left = self.build_node(left_half);
        let right = self.build_node(right_half);
        self.nodes[node_slot].left = left;
        self.nodes[node_slot].right = right;
        node_slot as i32
    }

    /// Exact k nearest neighbors of `query`, ordered by ascending distance
    /// with ties broken by insertion index. Returns fewer than `k` indices
    /// only when the map holds fewer points.
    pub fn knn(&self, query: &Vector3<f64>, k: usize) -> Vec<usize> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        // Best candidates as (squared distance, index), kept sorted.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let consider = |idx: usize, best: &mut Vec<(f64, usize)>| {
            let d2 = (self.points[idx] - query).norm_squared();
            let key = (d2, idx);
            if best.len() == k {
                let worst = *best.last().unwrap();
                if (key.0, key.1) >= (worst.0, worst.1) {
                    return;
                }
                best.pop();
            }
            let pos = best.partition_point(|e| (e.0, e.1) < (key.0, key.1));
            best.insert(pos, key);
        };
        if self.root >= 0 {
            self.search(self.root, query, k, &mut best);
        }
        for idx in self.indexed..self.points.len() {
            consider(idx, &mut best);
        }
        best.into_iter().map(|(_, i)| i).collect()
    }

    fn search(&self, node: i32, query: &Vector3<f64>, k: usize, best: &mut Vec<(f64, usize)>) {
        let n = self.nodes[node as usize];
        let idx = n.point as usize;
        let d2 = (self.points[idx] - query).norm_squared();
        let key = (d2, idx);
        if best.len() < k {
            let pos = best.partition_point(|e| (e.0, e.1) < (key.0, key.1));
            best.insert(pos, key);
        } else {
            let worst = *best.last().unwrap();
            if (key.0, key.1) < (worst.0, worst.1) {
                best.pop();
                let pos = best.partition_point(|e| (e.0, e.1) < (key.0, key.1));
                best.insert(pos, key);
            }
        }
        let axis = n.axis as usize;
        let delta = query[axis] - self.points[idx][axis];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near >= 0 {
            self.search(near, query, k, best);
        }
        // Visit the far side unless every point there is strictly worse than
        // the current k-th candidate (equality must still be visited so the
        // insertion-order tie-break can apply).
        let plane_d2 = delta * delta;
        let must_visit = best.len() < k || plane_d2 <= best.last().unwrap().0;
        if far >= 0 && must_visit {
            self.search(far, query, k, best);
        }
    }

    /// Writes the map as `x,y,z` CSV.
    pub fn write_csv(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "x,y,z")?;
        for p in &self.points {
            writeln!(f, "{},{},{}", p.x, p.y, p.z)?;
        }
        Ok(())
    }
}
