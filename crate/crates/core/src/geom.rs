//! Non-learnable geometric kernels: furthest point sampling, k-nearest
//! neighbours, inverse-distance interpolation and warping.

use std::rc::Rc;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Added to every distance before inversion in IDW.
pub const IDW_EPS: f64 = 1e-8;
/// Distances below this snap to the coincident reference value.
pub const IDW_SNAP: f64 = 1e-10;

pub const DEFAULT_K_COST: usize = 16;
pub const DEFAULT_K_UPSAMPLE: usize = 3;
pub const DEFAULT_K_LOSS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid(
                "point cloud must contain at least one point",
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "point cloud contains non-finite coordinates",
            ));
        }
        Ok(Self { points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_points()?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.points)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            points: self.points.iter().map(|p| add3(*p, t)).collect(),
        }
    }
}

/// Per-point motion vectors aligned with a first cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFlow {
    vectors: Vec<[f64; 3]>,
}

impl SceneFlow {
    pub fn new(vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("scene flow contains non-finite entries"));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.to_points()?)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_points(&self.vectors)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: indices.iter().map(|&i| self.vectors[i]).collect(),
        }
    }

    pub fn negated(&self) -> Self {
        Self {
            vectors: self.vectors.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
        }
    }
}

/// `rows x k` table of reference indices, each row sorted by ascending
/// distance with ties broken by ascending index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    k: usize,
}

impl NeighborIndex {
    pub fn new(indices: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 || !indices.len().is_multiple_of(k) {
            return Err(Error::invalid(format!(
                "neighbor table of {} entries is not a multiple of k = {k}",
                indices.len()
            )));
        }
        Ok(Self { indices, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[usize] {
        &self.indices
    }

    /// Row index of every flat entry: `[0; k] ++ [1; k] ++ ...`.
    pub fn owners(&self) -> Vec<usize> {
        (0..self.rows())
            .flat_map(|i| std::iter::repeat_n(i, self.k))
            .collect()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }

    /// Drops each row's own index (or its last entry when absent), producing
    /// a `k - 1` table. Used when a cloud is its own reference.
    pub fn without_self(&self) -> Result<Self> {
        if self.k < 2 {
            return Err(Error::invalid("need k >= 2 to exclude self"));
        }
        let mut out = Vec::with_capacity(self.rows() * (self.k - 1));
        for i in 0..self.rows() {
            let row = self.row(i);
            let skip = row.iter().position(|&j| j == i).unwrap_or(self.k - 1);
            out.extend(
                row.iter()
                    .enumerate()
                    .filter(|&(p, _)| p != skip)
                    .map(|(_, &j)| j),
            );
        }
        Self::new(out, self.k - 1)
    }
}

#[inline]
pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy max-min subsampling starting from `start`; ties go to the lowest index.
pub fn furthest_point_sample(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!(
            "furthest_point_sample: need 1 <= m <= {n}, got m = {m}"
        )));
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "furthest_point_sample: start {start} out of range for {n} points"
        )));
    }
    let pts = cloud.points();
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut out = Vec::with_capacity(m);
    let mut last = start;
    for _ in 0..m {
        out.push(last);
        chosen[last] = true;
        let p = pts[last];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, (q, md)) in pts.iter().zip(min_d.iter_mut()).enumerate() {
            if chosen[i] {
                continue;
            }
            let d = sq_dist(*q, p);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        last = best;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KnnBackend {
    #[default]
    BruteForce,
    /// Uniform-grid search producing the same tables as brute force.
    Grid,
}

fn closer(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn knn(queries: &PointCloud, refs: &PointCloud, k: usize) -> Result<NeighborIndex> {
    knn_with(queries, refs, k, KnnBackend::BruteForce)
}

pub fn knn_with(
    queries: &PointCloud,
    refs: &PointCloud,
    k: usize,
    backend: KnnBackend,
) -> Result<NeighborIndex> {
    if k == 0 || k > refs.len() {
        return Err(Error::invalid(format!(
            "knn: need 1 <= k <= {}, got k = {k}",
            refs.len()
        )));
    }
    let indices = match backend {
        KnnBackend::BruteForce => knn_brute(queries.points(), refs.points(), k),
        KnnBackend::Grid => GridIndex::build(refs.points(), k).query_all(queries.points(), k),
    };
    NeighborIndex::new(indices, k)
}

fn knn_brute(queries: &[[f64; 3]], refs: &[[f64; 3]], k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(refs.len());
    for &q in queries {
        cand.clear();
        cand.extend(refs.iter().enumerate().map(|(j, &r)| (sq_dist(q, r), j)));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, closer);
            cand.truncate(k);
        }
        cand.sort_unstable_by(closer);
        out.extend(cand.iter().map(|c| c.1));
    }
    out
}

struct GridIndex<'a> {
    refs: &'a [[f64; 3]],
    origin: [f64; 3],
    cell: f64,
    dims: [i64; 3],
    /// Start offsets into `order` for every cell (CSR layout).
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    fn build(refs: &'a [[f64; 3]], k: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in refs {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a]).max(1e-9)).collect();
        let volume = extent.iter().product::<f64>();
        let per_cell = (k as f64).max(2.0);
        let mut cell = (volume * per_cell / refs.len() as f64).cbrt();
        let max_extent = extent.iter().cloned().fold(0.0, f64::max);
        if !cell.is_finite() || cell <= 0.0 {
            cell = max_extent;
        }
        cell = cell.max(max_extent / 256.0);
        let dims = [0, 1, 2].map(|a| ((extent[a] / cell).floor() as i64 + 1).max(1));
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; ncells + 1];
        let mut grid = Self {
            refs,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let cells: Vec<usize> = refs.iter().map(|&p| grid.flat(grid.cell_of(p))).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; refs.len()];
        for (j, &c) in cells.iter().enumerate() {
            order[fill[c]] = j;
            fill[c] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        [0, 1, 2].map(|a| {
            (((p[a] - self.origin[a]) / self.cell).floor() as i64).clamp(0, self.dims[a] - 1)
        })
    }

    fn raw_cell(&self, p: [f64; 3]) -> [i64; 3] {
        [0, 1, 2].map(|a| ((p[a] - self.origin[a]) / self.cell).floor() as i64)
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        ((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize
    }

    fn query_all(&self, queries: &[[f64; 3]], k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(queries.len() * k);
        let mut cand: Vec<(f64, usize)> = Vec::new();
        for &q in queries {
            cand.clear();
            let center = self.raw_cell(q);
            let mut r: i64 = 0;
            loop {
                self.visit_ring(center, r, |j| cand.push((sq_dist(q, self.refs[j]), j)));
                let covers_all =
                    (0..3).all(|a| center[a] - r <= 0 && center[a] + r >= self.dims[a] - 1);
                if cand.len() >= k {
                    if covers_all {
                        break;
                    }
                    // Points outside the visited cube are at least this far away.
                    let mut bound = f64::INFINITY;
                    for a in 0..3 {
                        let lo = self.origin[a] + (center[a] - r) as f64 * self.cell;
                        let hi = self.origin[a] + (center[a] + r + 1) as f64 * self.cell;
                        bound = bound.min(q[a] - lo).min(hi - q[a]);
                    }
                    let bound = bound.max(0.0);
                    cand.select_nth_unstable_by(k - 1, closer);
                    if cand[k - 1].0 < bound * bound * (1.0 - 1e-12) {
                        break;
                    }
                } else if covers_all {
                    break;
                }
                r += 1;
            }
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, closer);
                cand.truncate(k);
            }
            cand.sort_unstable_by(closer);
            out.extend(cand.iter().map(|c| c.1));
        }
        out
    }

    fn visit_ring(&self, center: [i64; 3], r: i64, mut f: impl FnMut(usize)) {
        let range = |a: usize| (center[a] - r).max(0)..=(center[a] + r).min(self.dims[a] - 1);
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    let cheb = (x - center[0])
                        .abs()
                        .max((y - center[1]).abs())
                        .max((z - center[2]).abs());
                    if cheb != r {
                        continue;
                    }
                    let c = self.flat([x, y, z]);
                    for &j in &self.order[self.starts[c]..self.starts[c + 1]] {
                        f(j);
                    }
                }
            }
        }
    }
}

/// Neighbour table and normalised inverse-distance weights for interpolating
/// from `coarse` onto `fine`.
pub fn idw_weights(
    coarse: &PointCloud,
    fine: &PointCloud,
    k: usize,
) -> Result<(NeighborIndex, Vec<f64>)> {
    let nbrs = knn(fine, coarse, k)?;
    let mut weights = Vec::with_capacity(nbrs.flat().len());
    for i in 0..nbrs.rows() {
        let q = fine.point(i);
        let d: Vec<f64> = nbrs
            .row(i)
            .iter()
            .map(|&j| sq_dist(q, coarse.point(j)).sqrt())
            .collect();
        weights.extend(normalized_weights(&d));
    }
    Ok((nbrs, weights))
}

fn normalized_weights(d: &[f64]) -> Vec<f64> {
    if let Some(s) = d.iter().position(|&v| v < IDW_SNAP) {
        return (0..d.len())
            .map(|j| if j == s { 1.0 } else { 0.0 })
            .collect();
    }
    let w: Vec<f64> = d.iter().map(|&v| (v + IDW_EPS).recip()).collect();
    let mut total = 0.0;
    for &v in &w {
        total += v;
    }
    let inv = total.recip();
    w.iter().map(|&v| v * inv).collect()
}

/// Inverse-distance-weighted interpolation of `coarse_vals` (one row per
/// coarse point) onto `fine_pts`. Differentiable w.r.t. `coarse_vals`.
pub fn interpolate_idw(
    g: &Graph,
    coarse_pts: &PointCloud,
    coarse_vals: Var,
    fine_pts: &PointCloud,
    k: usize,
) -> Result<Var> {
    let rows = g.with_value(coarse_vals, Tensor::rows);
    if rows != coarse_pts.len() {
        return Err(Error::invalid(format!(
            "interpolate_idw: {} values for {} coarse points",
            rows,
            coarse_pts.len()
        )));
    }
    let (nbrs, weights) = idw_weights(coarse_pts, fine_pts, k)?;
    let w = g.leaf(Tensor::matrix(weights.len(), 1, weights)?);
    let gathered = g.gather_rows(coarse_vals, nbrs.flat().to_vec())?;
    let weighted = g.mul_column(gathered, w)?;
    g.scatter_add_rows(weighted, nbrs.owners(), fine_pts.len())
}

/// IDW interpolation where the query positions are themselves graph values;
/// the weights are differentiated through their dependence on `fine_pos`.
/// Neighbourhoods are selected from the current values and held fixed.
pub fn interpolate_idw_at(
    g: &Graph,
    coarse_pts: &PointCloud,
    coarse_vals: Var,
    fine_pos: Var,
    k: usize,
) -> Result<Var> {
    let fine = PointCloud::from_tensor(&g.value(fine_pos))?;
    let nbrs = knn(&fine, coarse_pts, k)?;
    let owners: Rc<[usize]> = nbrs.owners().into();
    let n = fine.len();

    let mut mask = Vec::with_capacity(owners.len());
    let mut onehot = Vec::with_capacity(owners.len());
    for i in 0..n {
        let q = fine.point(i);
        let d: Vec<f64> = nbrs
            .row(i)
            .iter()
            .map(|&j| sq_dist(q, coarse_pts.point(j)).sqrt())
            .collect();
        match d.iter().position(|&v| v < IDW_SNAP) {
            Some(s) => {
                mask.extend(std::iter::repeat_n(0.0, d.len()));
                onehot.extend((0..d.len()).map(|j| if j == s { 1.0 } else { 0.0 }));
            }
            None => {
                mask.extend(std::iter::repeat_n(1.0, d.len()));
                onehot.extend(std::iter::repeat_n(0.0, d.len()));
            }
        }
    }

    let m = owners.len();
    let anchors = g.leaf(coarse_pts.select(nbrs.flat()).to_tensor());
    let rep = g.gather_rows(fine_pos, owners.clone())?;
    let diff = g.sub(rep, anchors)?;
    let dist = g.sqrt(g.sum_last_axis(g.square(diff)?)?)?;
    let w = g.recip(g.add_scalar(dist, IDW_EPS)?)?;
    let total = g.scatter_add_rows(w, owners.clone(), n)?;
    let inv = g.gather_rows(g.recip(total)?, owners.clone())?;
    let wn = g.mul(w, inv)?;
    let wn = g.mul(wn, g.leaf(Tensor::matrix(m, 1, mask)?))?;
    let wn = g.add(wn, g.leaf(Tensor::matrix(m, 1, onehot)?))?;
    let gathered = g.gather_rows(coarse_vals, nbrs.flat().to_vec())?;
    g.scatter_add_rows(g.mul_column(gathered, wn)?, owners, n)
}

/// `positions + flow` on the graph.
pub fn warp(g: &Graph, positions: Var, flow: Var) -> Result<Var> {
    g.add(positions, flow)
}

pub fn warp_points(cloud: &PointCloud, flow: &SceneFlow) -> Result<PointCloud> {
    if cloud.len() != flow.len() {
        return Err(Error::invalid(format!(
            "warp: {} points but {} flow vectors",
            cloud.len(),
            flow.len()
        )));
    }
    PointCloud::new(
        cloud
            .points()
            .iter()
            .zip(flow.vectors())
            .map(|(p, f)| add3(*p, *f))
            .collect(),
    )
}
