//! Meshes, squared-distance matrices, quantile receptive fields and latent-mesh
//! construction.
//!
//! Distance matrices are oriented with rows indexing the *query* mesh and columns the
//! *source* mesh, so a row-wise softmax over one row aggregates source values onto one
//! query point.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{PitError, Result};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MeshKind {
    /// Tensor-product grid; points enumerated in row-major axis order.
    Grid {
        shape: Vec<usize>,
    },
    PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    points: Tensor2,
    kind: MeshKind,
}

impl Mesh {
    pub fn point_cloud(points: Tensor2) -> Result<Self> {
        Self::validate(&points)?;
        Ok(Self {
            points,
            kind: MeshKind::PointCloud,
        })
    }

    /// Tensor-product grid from per-axis coordinates.
    pub fn grid(axes: &[Vec<f64>]) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(Vec::is_empty) {
            return Err(PitError::InvalidArgument(
                "grid needs at least one non-empty axis".into(),
            ));
        }
        let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
        let n: usize = shape.iter().product();
        let dim = axes.len();
        let mut data = Vec::with_capacity(n * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..n {
            for (a, &i) in idx.iter().enumerate() {
                data.push(axes[a][i]);
            }
            for a in (0..dim).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        let points = Tensor2::from_vec(n, dim, data)?;
        Self::validate(&points)?;
        Ok(Self {
            points,
            kind: MeshKind::Grid { shape },
        })
    }

    /// Uniform grid on `[0, 1)^d` with points `j / n` (periodic convention).
    pub fn periodic_unit_grid(shape: &[usize]) -> Result<Self> {
        let axes: Vec<Vec<f64>> = shape
            .iter()
            .map(|&n| (0..n).map(|j| j as f64 / n as f64).collect())
            .collect();
        Self::grid(&axes)
    }

    /// Uniform grid on `[0, 1]^d` including both endpoints.
    pub fn closed_unit_grid(shape: &[usize]) -> Result<Self> {
        let axes: Vec<Vec<f64>> = shape
            .iter()
            .map(|&n| {
                if n == 1 {
                    vec![0.0]
                } else {
                    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
                }
            })
            .collect();
        Self::grid(&axes)
    }

    /// Reattaches a grid shape to points already enumerated in row-major axis order.
    pub fn from_grid_points(points: Tensor2, shape: Vec<usize>) -> Result<Self> {
        Self::validate(&points)?;
        if shape.iter().product::<usize>() != points.rows() || shape.len() != points.cols() {
            return Err(PitError::InvalidArgument(format!(
                "grid shape {shape:?} does not match {} points in {}-D",
                points.rows(),
                points.cols()
            )));
        }
        Ok(Self {
            points,
            kind: MeshKind::Grid { shape },
        })
    }

    fn validate(points: &Tensor2) -> Result<()> {
        if points.rows() == 0 || points.cols() == 0 {
            return Err(PitError::InvalidArgument(
                "a mesh needs at least one point and one dimension".into(),
            ));
        }
        if !points.is_finite() {
            return Err(PitError::InvalidArgument("mesh has non-finite coordinates".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn points(&self) -> &Tensor2 {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn kind(&self) -> &MeshKind {
        &self.kind
    }

    pub fn grid_shape(&self) -> Option<&[usize]> {
        match &self.kind {
            MeshKind::Grid { shape } => Some(shape),
            MeshKind::PointCloud => None,
        }
    }

    /// Hash of the coordinates' bit patterns; used to key cached distance matrices.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.points.shape().hash(&mut h);
        for v in self.points.data() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::point_cloud(self.points.select_rows(idx))
    }
}

#[derive(Clone, Debug)]
pub struct PairwiseDistances {
    matrix: Tensor2,
    query_id: u64,
    source_id: u64,
}

impl PairwiseDistances {
    pub fn matrix(&self) -> &Tensor2 {
        &self.matrix
    }

    pub fn query_len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn source_len(&self) -> usize {
        self.matrix.cols()
    }

    pub fn is_self(&self) -> bool {
        self.query_id == self.source_id
    }

    pub fn ids(&self) -> (u64, u64) {
        (self.query_id, self.source_id)
    }

    /// Index of the closest source point for every query row (lowest index on ties).
    pub fn nearest_source(&self) -> Vec<usize> {
        (0..self.matrix.rows())
            .map(|i| {
                let row = self.matrix.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v < row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `D[i][j] = |query_i - source_j|^2`.
pub fn pairwise_sq_dist(source: &Mesh, query: &Mesh) -> Result<PairwiseDistances> {
    if source.dim() != query.dim() {
        return Err(PitError::InvalidArgument(format!(
            "dimension mismatch: source is {}-D, query is {}-D",
            source.dim(),
            query.dim()
        )));
    }
    let (nq, ns) = (query.len(), source.len());
    let mut m = Tensor2::zeros(nq, ns);
    for i in 0..nq {
        let x = query.point(i);
        let row = m.row_mut(i);
        for (j, r) in row.iter_mut().enumerate() {
            let y = source.point(j);
            *r = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    Ok(PairwiseDistances {
        matrix: m,
        query_id: query.fingerprint(),
        source_id: source.fingerprint(),
    })
}

/// Per-row receptive fields `{k : D_ik <= r_i^2}`.
#[derive(Clone, Debug)]
pub struct ReceptiveField {
    radius_sq: Vec<f64>,
    quantile: f64,
    neighbors: Vec<Vec<usize>>,
    mask: Arc<Vec<bool>>,
}

impl ReceptiveField {
    pub fn radius_sq(&self) -> &[f64] {
        &self.radius_sq
    }

    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbors[row]
    }

    pub fn rows(&self) -> usize {
        self.radius_sq.len()
    }

    /// Dense row-major membership mask, shared with the softmax kernel.
    pub fn mask(&self) -> Arc<Vec<bool>> {
        self.mask.clone()
    }
}

/// Row-compressed attention pattern: for every query row, the source columns it
/// attends to and their squared distances.
#[derive(Clone, Debug)]
pub struct Neighborhoods {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    dist: Vec<f64>,
    source_len: usize,
}

impl Neighborhoods {
    /// Every source column of every row.
    pub fn dense(d: &PairwiseDistances) -> Self {
        let (rows, cols) = d.matrix().shape();
        Self {
            offsets: (0..=rows).map(|i| i * cols).collect(),
            cols: (0..rows).flat_map(|_| 0..cols).collect(),
            dist: d.matrix().data().to_vec(),
            source_len: cols,
        }
    }

    /// Only the columns inside each row's receptive field.
    pub fn local(d: &PairwiseDistances, field: &ReceptiveField) -> Result<Self> {
        if field.rows() != d.query_len() {
            return Err(PitError::InvalidArgument("field does not match distances".into()));
        }
        let mut offsets = Vec::with_capacity(field.rows() + 1);
        offsets.push(0);
        let (mut cols, mut dist) = (Vec::new(), Vec::new());
        for i in 0..field.rows() {
            let row = d.matrix().row(i);
            for &k in field.neighbors(i) {
                cols.push(k);
                dist.push(row[k]);
            }
            offsets.push(cols.len());
        }
        Ok(Self {
            offsets,
            cols,
            dist,
            source_len: d.source_len(),
        })
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    /// Stored entries over all rows.
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Entry range of `row` into [`Neighborhoods::cols`] and [`Neighborhoods::dist`].
    pub fn range(&self, row: usize) -> std::ops::Range<usize> {
        self.offsets[row]..self.offsets[row + 1]
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn dist(&self) -> &[f64] {
        &self.dist
    }
}

/// Linear interpolation between the closest order statistics (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn quantile_radii(d: &PairwiseDistances, q: f64) -> Result<ReceptiveField> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PitError::InvalidArgument(format!(
            "quantile must lie in (0, 1], got {q}"
        )));
    }
    let m = d.matrix();
    let (rows, cols) = m.shape();
    let mut radius_sq = Vec::with_capacity(rows);
    let mut neighbors = Vec::with_capacity(rows);
    let mut mask = vec![false; rows * cols];
    let mut sorted = vec![0.0; cols];
    for i in 0..rows {
        let row = m.row(i);
        sorted.copy_from_slice(row);
        sorted.sort_by(f64::total_cmp);
        let r2 = quantile_sorted(&sorted, q);
        let mut nb: Vec<usize> = (0..cols).filter(|&k| row[k] <= r2).collect();
        if nb.is_empty() {
            // Unreachable for finite rows (the quantile is at least the row minimum);
            // kept so a field can never be empty.
            let nearest = (0..cols).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            nb.push(nearest);
        }
        for &k in &nb {
            mask[i * cols + k] = true;
        }
        radius_sq.push(r2);
        neighbors.push(nb);
    }
    Ok(ReceptiveField {
        radius_sq,
        quantile: q,
        neighbors,
        mask: Arc::new(mask),
    })
}

/// Strided subsampling of a grid: keeps every `factor[a]`-th index along axis `a`,
/// starting at 0.
pub fn pool_grid(mesh: &Mesh, factors: &[usize]) -> Result<Mesh> {
    Ok(pool_grid_indexed(mesh, factors)?.0)
}

/// [`pool_grid`] that also returns the kept row indices of the input mesh.
pub fn pool_grid_indexed(mesh: &Mesh, factors: &[usize]) -> Result<(Mesh, Vec<usize>)> {
    let shape = grid_shape_for_pooling(mesh, factors.len())?;
    if factors.contains(&0) {
        return Err(PitError::InvalidArgument("pooling factor must be positive".into()));
    }
    let picks: Vec<Vec<usize>> = shape
        .iter()
        .zip(factors)
        .map(|(&n, &f)| (0..n).step_by(f).collect())
        .collect();
    select_grid(mesh, &shape, &picks)
}

/// Pools a grid down to an exact target shape by picking evenly spaced indices
/// (`round(j * (n - 1) / (m - 1))`), always keeping both ends of each axis.
pub fn pool_grid_to_shape(mesh: &Mesh, target: &[usize]) -> Result<Mesh> {
    let shape = grid_shape_for_pooling(mesh, target.len())?;
    let mut picks = Vec::with_capacity(shape.len());
    for (&n, &m) in shape.iter().zip(target) {
        if m == 0 || m > n {
            return Err(PitError::InvalidArgument(format!(
                "cannot pool an axis of {n} points to {m}"
            )));
        }
        picks.push(if m == 1 {
            vec![0]
        } else {
            (0..m)
                .map(|j| ((j * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
                .collect()
        });
    }
    Ok(select_grid(mesh, &shape, &picks)?.0)
}

fn grid_shape_for_pooling(mesh: &Mesh, axes: usize) -> Result<Vec<usize>> {
    let shape = mesh
        .grid_shape()
        .ok_or_else(|| PitError::InvalidArgument("grid pooling needs a structured grid".into()))?;
    if shape.len() != axes {
        return Err(PitError::InvalidArgument(format!(
            "grid has {} axes, got {axes} pooling factors",
            shape.len()
        )));
    }
    Ok(shape.to_vec())
}

fn select_grid(mesh: &Mesh, shape: &[usize], picks: &[Vec<usize>]) -> Result<(Mesh, Vec<usize>)> {
    let out_shape: Vec<usize> = picks.iter().map(Vec::len).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut rows = Vec::with_capacity(n);
    for _ in 0..n {
        let mut flat = 0;
        for a in 0..shape.len() {
            flat = flat * shape[a] + picks[a][idx[a]];
        }
        rows.push(flat);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    let pooled = Mesh {
        points: mesh.points().select_rows(&rows),
        kind: MeshKind::Grid { shape: out_shape },
    };
    Ok((pooled, rows))
}

/// Greedy farthest point sampling starting from `start`. Returns the sampled mesh and
/// the chosen indices in selection order; ties go to the lowest index.
pub fn farthest_point_sample(mesh: &Mesh, n_v: usize, start: usize) -> Result<(Mesh, Vec<usize>)> {
    let n = mesh.len();
    if n_v == 0 || n_v > n {
        return Err(PitError::InvalidArgument(format!(
            "cannot sample {n_v} points from a mesh of {n}"
        )));
    }
    if start >= n {
        return Err(PitError::InvalidArgument(format!("start index {start} out of range")));
    }
    let sq = |a: usize, b: usize| -> f64 {
        mesh.point(a)
            .iter()
            .zip(mesh.point(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut chosen = Vec::with_capacity(n_v);
    let mut min_d: Vec<f64> = (0..n).map(|i| sq(i, start)).collect();
    chosen.push(start);
    while chosen.len() < n_v {
        let mut best = 0;
        for i in 1..n {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq(i, best));
        }
    }
    Ok((mesh.subset(&chosen)?, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rows: &[Vec<f64>]) -> Mesh {
        Mesh::point_cloud(Tensor2::from_rows(rows).unwrap()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mesh {
        Mesh::point_cloud(Tensor2::from_fn(n, d, |_, _| rng.random::<f64>())).unwrap()
    }

    #[test]
    fn three_four_five() {
        let m = cloud(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        let d = pairwise_sq_dist(&m, &m).unwrap();
        assert_eq!(d.matrix().get(0, 1), 25.0);
        assert_eq!(d.matrix().get(1, 0), 25.0);
        assert_eq!(d.matrix().get(0, 0), 0.0);
        assert!(d.is_self());
    }

    #[test]
    fn cross_distances_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let src = random_cloud(&mut rng, 3, 2);
        let dst = random_cloud(&mut rng, 4, 2);
        let d = pairwise_sq_dist(&src, &dst).unwrap();
        assert_eq!(d.matrix().shape(), (4, 3));
        for i in 0..4 {
            for j in 0..3 {
                let dx = dst.point(i)[0] - src.point(j)[0];
                let dy = dst.point(i)[1] - src.point(j)[1];
                assert!((d.matrix().get(i, j) - (dx * dx + dy * dy)).abs() < 1e-15);
            }
        }
        assert!(!d.is_self());
    }

    #[test]
    fn dimension_mismatch() {
        let a = cloud(&[vec![0.0]]);
        let b = cloud(&[vec![0.0, 1.0]]);
        assert!(pairwise_sq_dist(&a, &b).is_err());
    }

    #[test]
    fn permuting_queries_permutes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_cloud(&mut rng, 5, 2);
        let dst = random_cloud(&mut rng, 6, 2);
        let perm = [3, 0, 5, 1, 4, 2];
        let d = pairwise_sq_dist(&src, &dst).unwrap();
        let dp = pairwise_sq_dist(&src, &dst.subset(&perm).unwrap()).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(dp.matrix().row(r), d.matrix().row(p));
        }
    }

    #[test]
    fn collinear_quantile_radius() {
        let m = Mesh::grid(&[(0..10).map(f64::from).collect()]).unwrap();
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let rf = quantile_radii(&d, 0.2).unwrap();
        // Order-statistics oracle: {0,1,4,...,81}, rank h = (n-1) q = 1.8, so
        // x(1) + 0.8 (x(2) - x(1)) = 1 + 0.8 * 3.
        let vals: Vec<f64> = (0..10).map(|k| (k * k) as f64).collect();
        let h = 0.2 * 9.0;
        let want = vals[1] + (h - 1.0) * (vals[2] - vals[1]);
        assert!((rf.radius_sq()[0] - want).abs() < 1e-12);
        assert_eq!(rf.neighbors(0), &[0, 1]);
    }

    #[test]
    fn quantile_one_covers_everything_and_tiny_quantile_keeps_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_cloud(&mut rng, 9, 2);
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let full = quantile_radii(&d, 1.0).unwrap();
        for i in 0..9 {
            assert_eq!(full.neighbors(i).len(), 9);
        }
        let tiny = quantile_radii(&d, 1e-9).unwrap();
        for i in 0..9 {
            assert_eq!(tiny.neighbors(i), &[i]);
        }
        assert!(quantile_radii(&d, 0.0).is_err());
        assert!(quantile_radii(&d, 1.5).is_err());
    }

    #[test]
    fn cross_fields_are_never_empty() {
        let src = cloud(&[vec![0.0], vec![1.0]]);
        let dst = cloud(&[vec![0.4], vec![5.0]]);
        let d = pairwise_sq_dist(&src, &dst).unwrap();
        let rf = quantile_radii(&d, 1e-6).unwrap();
        assert_eq!(rf.neighbors(0), &[0]);
        assert_eq!(rf.neighbors(1), &[1]);
    }

    #[test]
    fn pool_to_table_resolution() {
        let g = Mesh::closed_unit_grid(&[211, 211]).unwrap();
        let p = pool_grid_to_shape(&g, &[32, 32]).unwrap();
        assert_eq!(p.len(), 1024);
        assert_eq!(p.grid_shape(), Some(&[32usize, 32][..]));
        assert_eq!(p.point(0), &[0.0, 0.0]);
        assert_eq!(p.point(1023), &[1.0, 1.0]);
        let s = pool_grid(&Mesh::periodic_unit_grid(&[64]).unwrap(), &[2]).unwrap();
        assert_eq!(s.len(), 32);
        assert_eq!(s.point(1), &[2.0 / 64.0]);
        let cloud = cloud(&[vec![0.0]]);
        assert!(pool_grid(&cloud, &[1]).is_err());
    }

    #[test]
    fn fps_small_cases() {
        let m = cloud(&[vec![0.0], vec![0.1], vec![1.0]]);
        let (_, idx) = farthest_point_sample(&m, 2, 0).unwrap();
        assert_eq!(idx, vec![0, 2]);
        let (_, all) = farthest_point_sample(&m, 3, 0).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(farthest_point_sample(&m, 4, 0).is_err());
    }

    #[test]
    fn fps_matches_quadratic_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = random_cloud(&mut rng, 20, 2);
        let (_, idx) = farthest_point_sample(&m, 4, 0).unwrap();
        // Reference: recompute min distance to the chosen set from scratch each round.
        let mut chosen = vec![0usize];
        while chosen.len() < 4 {
            let mut best = (0usize, -1.0f64);
            for i in 0..20 {
                let dmin = chosen
                    .iter()
                    .map(|&c| {
                        let (a, b) = (m.point(i), m.point(c));
                        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                if dmin > best.1 {
                    best = (i, dmin);
                }
            }
            chosen.push(best.0);
        }
        assert_eq!(idx, chosen);
    }

    fn min_pair_dist(m: &Mesh, idx: &[usize]) -> f64 {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                let d: f64 = m.point(i).iter().zip(m.point(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                best = best.min(d);
            }
        }
        best
    }

    #[test]
    fn fps_spreads_at_least_as_well_as_random_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let m = random_cloud(&mut rng, 50, 2);
        let k = 8;
        let (_, idx) = farthest_point_sample(&m, k, 0).unwrap();
        let fps = min_pair_dist(&m, &idx);
        let mut beaten = 0;
        for _ in 0..100 {
            let mut pool: Vec<usize> = (0..50).collect();
            for i in 0..k {
                let j = rng.random_range(i..50);
                pool.swap(i, j);
            }
            if min_pair_dist(&m, &pool[..k]) > fps {
                beaten += 1;
            }
        }
        assert_eq!(beaten, 0);
    }
}
