//! Greedy k-Center (farthest-first traversal) and covering radii.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// `N × D` points, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    points: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("point dimension must be positive".into()));
        }
        if points.is_empty() {
            return Err(Error::Empty("point cloud"));
        }
        if points.len() % dim != 0 {
            return Err(Error::shape("point cloud", dim, points.len() % dim));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("point cloud has non-finite entries".into()));
        }
        Ok(PointCloud {
            dim,
            points,
            labels: None,
        })
    }

    /// Points on the real line, convenient for small hand-checked instances.
    pub fn from_line(xs: &[f64]) -> Result<Self> {
        Self::new(1, xs.to_vec())
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::shape("point labels", self.len(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for i in 0..self.len() {
            for (ck, pk) in c.iter_mut().zip(self.point(i)) {
                *ck += pk;
            }
        }
        let n = self.len() as f64;
        c.iter_mut().for_each(|x| *x /= n);
        c
    }
}

/// Centers given either as indices into the cloud or as explicit vectors.
#[derive(Debug, Clone, Copy)]
pub enum Centers<'a> {
    Indices(&'a [usize]),
    /// Row-major vectors with the cloud's dimension.
    Points(&'a [f64]),
}

/// Max over cloud points of the distance to the nearest center.
pub fn covering_radius(cloud: &PointCloud, centers: Centers<'_>) -> Result<f64> {
    let dim = cloud.dim();
    let center_rows: Vec<&[f64]> = match centers {
        Centers::Indices(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= cloud.len()) {
                return Err(Error::InvalidArgument(format!("center index {bad} out of range")));
            }
            idx.iter().map(|&i| cloud.point(i)).collect()
        }
        Centers::Points(p) => {
            if p.len() % dim != 0 {
                return Err(Error::shape("center vectors", dim, p.len() % dim));
            }
            p.chunks(dim).collect()
        }
    };
    if center_rows.is_empty() {
        return Err(Error::Empty("centers"));
    }
    let mut radius: f64 = 0.0;
    for i in 0..cloud.len() {
        let x = cloud.point(i);
        let nearest = center_rows
            .iter()
            .map(|c| crate::sq_dist(x, c))
            .fold(f64::INFINITY, f64::min);
        radius = radius.max(nearest);
    }
    Ok(radius.sqrt())
}

/// Result of a farthest-first traversal.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    /// Selected point indices in selection order.
    pub order: Vec<usize>,
    /// `radii[j]`: covering radius of seeds plus the first `j + 1` selections.
    pub radii: Vec<f64>,
}

/// Farthest-first traversal selecting `k` points, seeded with explicit
/// `seeds` vectors (row-major, possibly empty).
///
/// Without seeds the first center is the lowest-index point among those
/// farthest from the cloud centroid. Every later step takes the unselected
/// point farthest from the current centers, ties going to the lowest index.
pub fn farthest_first(cloud: &PointCloud, seeds: &[f64], k: usize) -> Result<Traversal> {
    let n = cloud.len();
    if k > n {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {n} points")));
    }
    if seeds.len() % cloud.dim() != 0 {
        return Err(Error::shape("seed vectors", cloud.dim(), seeds.len() % cloud.dim()));
    }
    // Squared distances; sqrt is monotone so argmax is unaffected.
    let mut nearest = vec![f64::INFINITY; n];
    for s in seeds.chunks(cloud.dim()) {
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(crate::sq_dist(cloud.point(i), s));
        }
    }
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(k);
    let mut radii = Vec::with_capacity(k);
    for step in 0..k {
        let from_centroid = (step == 0 && seeds.is_empty()).then(|| cloud.centroid());
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for i in (0..n).filter(|&i| !selected[i]) {
            let s = match &from_centroid {
                Some(c) => crate::sq_dist(cloud.point(i), c),
                None => nearest[i],
            };
            if s > best_score {
                best_score = s;
                best = Some(i);
            }
        }
        let pick = best.expect("k <= n leaves an unselected point");
        selected[pick] = true;
        order.push(pick);
        let p = cloud.point(pick).to_vec();
        let mut radius: f64 = 0.0;
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(crate::sq_dist(cloud.point(i), &p));
            radius = radius.max(*m);
        }
        radii.push(radius.sqrt());
    }
    Ok(Traversal { order, radii })
}

/// Indices chosen by the greedy k-Center heuristic.
pub fn greedy_k_center(cloud: &PointCloud, seeds: &[f64], k: usize) -> Result<Vec<usize>> {
    Ok(farthest_first(cloud, seeds, k)?.order)
}

/// Largest number of subsets [`exact_k_center`] will enumerate.
pub const EXACT_SUBSET_LIMIT: u128 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exhaustive k-Center: the lexicographically smallest optimal subset and
/// its radius.
pub fn exact_k_center(cloud: &PointCloud, k: usize) -> Result<(Vec<usize>, f64)> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    let count = binomial(n, k);
    if count > EXACT_SUBSET_LIMIT {
        return Err(Error::TooLarge(count));
    }
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sq[i * n + j] = crate::sq_dist(cloud.point(i), cloud.point(j));
        }
    }
    let mut subset: Vec<usize> = (0..k).collect();
    let mut best = (subset.clone(), f64::INFINITY);
    loop {
        let r = (0..n)
            .map(|i| subset.iter().map(|&c| sq[i * n + c]).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        if r < best.1 {
            best = (subset.clone(), r);
        }
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && subset[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        subset[i - 1] += 1;
        for j in i..k {
            subset[j] = subset[j - 1] + 1;
        }
    }
    Ok((best.0, best.1.sqrt()))
}

/// Mean of the prefix covering radii along one full farthest-first traversal.
pub fn average_covering_radius(cloud: &PointCloud) -> f64 {
    let t = farthest_first(cloud, &[], cloud.len()).expect("k = n is always valid");
    t.radii.iter().sum::<f64>() / t.radii.len() as f64
}

/// Candidate embeddings for one class together with their dataset indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPool {
    pub dim: usize,
    pub embeddings: Vec<f64>,
    pub sample_ids: Vec<usize>,
}

impl ClassPool {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Per class, pick `proxies_per_class` pool samples by greedy k-Center
/// seeded with that class's previous proxies.
pub fn select_proxies(
    pools: &BTreeMap<usize, ClassPool>,
    proxies_per_class: usize,
    previous: &BTreeMap<usize, Vec<f64>>,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (&class, pool) in pools {
        if pool.len() < proxies_per_class {
            return Err(Error::ClassTooSmall {
                class,
                available: pool.len(),
                required: proxies_per_class,
            });
        }
        if pool.embeddings.len() != pool.len() * pool.dim {
            return Err(Error::shape("class pool", pool.len() * pool.dim, pool.embeddings.len()));
        }
        let cloud = PointCloud::new(pool.dim, pool.embeddings.clone())?;
        let seeds = previous.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let picked = greedy_k_center(&cloud, seeds, proxies_per_class)?;
        out.insert(class, picked.into_iter().map(|i| pool.sample_ids[i]).collect());
    }
    Ok(out)
}
