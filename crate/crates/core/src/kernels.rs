//! Set-level kernels over embedding sets.
//!
//! | Function | Purpose |
//! |----------|---------|
//! | [`rbf_kernel`] | `exp(-γ‖x − y‖²)` |
//! | [`mmd_squared`] | biased (V-statistic) squared MMD between two sets |
//! | [`score_j`] | prototype score, `MMD²(F, ∅) − MMD²(F, P)` with `J(∅) = 0` |
//! | [`greedy_select`] | greedy maximization of `J` under a cardinality budget |
//! | [`chamfer_distance`] | symmetric squared nearest-neighbour set distance |
//! | [`median_heuristic_gamma`] | bandwidth from pairwise squared distances |
//!
//! `J` is normalized, monotone and submodular for the RBF kernel, so the
//! greedy selection reaches at least `(1 − 1/e)` of the optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Where an embedding came from: batch number and row within the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceId {
    pub batch: usize,
    pub index: usize,
}

/// Ordered collection of fixed-dimension vectors with provenance ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    source_ids: Vec<SourceId>,
}

impl EmbeddingSet {
    pub fn empty(dim: usize) -> Self {
        EmbeddingSet {
            dim,
            data: Vec::new(),
            source_ids: Vec::new(),
        }
    }

    pub fn new(dim: usize, vectors: &[Vec<f64>], source_ids: Vec<SourceId>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("embedding dimension must be positive"));
        }
        if vectors.len() != source_ids.len() {
            return Err(Error::contract(format!(
                "{} vectors but {} source ids",
                vectors.len(),
                source_ids.len()
            )));
        }
        let mut set = EmbeddingSet::empty(dim);
        for (v, id) in vectors.iter().zip(source_ids) {
            set.push(v, id)?;
        }
        Ok(set)
    }

    /// Vectors with ids `(batch, 0..n)`.
    pub fn from_rows(dim: usize, vectors: &[Vec<f64>], batch: usize) -> Result<Self> {
        let ids = (0..vectors.len())
            .map(|index| SourceId { batch, index })
            .collect();
        EmbeddingSet::new(dim, vectors, ids)
    }

    /// Rows of a `[n, dim]` matrix, ids `(batch, row)`.
    pub fn from_tensor(t: &Tensor, batch: usize) -> Result<Self> {
        if t.shape().len() != 2 || t.cols() == 0 {
            return Err(Error::dim(format!(
                "embedding matrix must be [n, dim], got {:?}",
                t.shape()
            )));
        }
        Ok(EmbeddingSet {
            dim: t.cols(),
            data: t.data().to_vec(),
            source_ids: (0..t.rows())
                .map(|index| SourceId { batch, index })
                .collect(),
        })
    }

    pub fn push(&mut self, v: &[f64], id: SourceId) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(format!(
                "vector of length {} in set of dim {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding vector".into()));
        }
        self.data.extend_from_slice(v);
        self.source_ids.push(id);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.source_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn source_ids(&self) -> &[SourceId] {
        &self.source_ids
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.dim], self.data.clone())
    }

    /// Replace the vectors, keeping ids. Shape must be `[len, dim]`.
    pub fn set_vectors(&mut self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.len(), self.dim] {
            return Err(Error::dim(format!(
                "expected [{}, {}], got {:?}",
                self.len(),
                self.dim,
                t.shape()
            )));
        }
        self.data = t.data().to_vec();
        Ok(())
    }

    /// Subset by position, preserving order of `idx`.
    pub fn select(&self, idx: &[usize]) -> EmbeddingSet {
        let mut out = EmbeddingSet::empty(self.dim);
        for &i in idx {
            out.data.extend_from_slice(self.get(i));
            out.source_ids.push(self.source_ids[i]);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// RBF bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    gamma: f64,
}

impl KernelConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::config(format!("RBF gamma must be > 0, got {gamma}")));
        }
        Ok(KernelConfig { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::dim(format!("set dims {} and {}", a.dim, b.dim)));
    }
    Ok(())
}

pub fn rbf_kernel(x: &[f64], y: &[f64], cfg: KernelConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok((-cfg.gamma * sq_dist(x, y)).exp())
}

fn kernel_sum(a: &EmbeddingSet, b: &EmbeddingSet, gamma: f64) -> f64 {
    let mut s = 0.0;
    for x in a.iter() {
        for y in b.iter() {
            s += (-gamma * sq_dist(x, y)).exp();
        }
    }
    s
}

/// Biased squared MMD, diagonal terms included.
pub fn mmd_squared(f: &EmbeddingSet, p: &EmbeddingSet, cfg: KernelConfig) -> Result<f64> {
    check_dims(f, p)?;
    if f.is_empty() || p.is_empty() {
        return Err(Error::contract("squared MMD of an empty set"));
    }
    let (nf, np) = (f.len() as f64, p.len() as f64);
    let ff = kernel_sum(f, f, cfg.gamma) / (nf * nf);
    let fp = kernel_sum(f, p, cfg.gamma) / (nf * np);
    let pp = kernel_sum(p, p, cfg.gamma) / (np * np);
    Ok(ff - 2.0 * fp + pp)
}

/// Prototype score of `p` against the reference set `f`. `None` or an empty
/// set scores exactly zero.
pub fn score_j(f: &EmbeddingSet, p: Option<&EmbeddingSet>, cfg: KernelConfig) -> Result<f64> {
    if f.is_empty() {
        return Err(Error::contract("score of prototypes against an empty set"));
    }
    let p = match p {
        Some(p) if !p.is_empty() => p,
        _ => return Ok(0.0),
    };
    check_dims(f, p)?;
    let (nf, np) = (f.len() as f64, p.len() as f64);
    Ok(2.0 * kernel_sum(f, p, cfg.gamma) / (nf * np) - kernel_sum(p, p, cfg.gamma) / (np * np))
}

/// Result of a greedy selection.
#[derive(Clone, Debug)]
pub struct Selection {
    /// Positions in the reference set, in pick order.
    pub indices: Vec<usize>,
    pub prototypes: EmbeddingSet,
    /// `J` after each pick; `trajectory[k]` is the score of the first `k + 1` picks.
    pub trajectory: Vec<f64>,
}

/// Greedy maximization of [`score_j`] over subsets of `f` of size `n`.
///
/// Each round adds the element with the largest resulting score; ties go to
/// the lowest position in `f`.
pub fn greedy_select(f: &EmbeddingSet, n: usize, cfg: KernelConfig) -> Result<Selection> {
    let m = f.len();
    if n == 0 || n > m {
        return Err(Error::contract(format!(
            "cannot select {n} prototypes from {m} embeddings"
        )));
    }
    // Gram matrix of f; P is always a subset of f.
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        gram[i * m + i] = 1.0;
        for j in (i + 1)..m {
            let k = (-cfg.gamma * sq_dist(f.get(i), f.get(j))).exp();
            gram[i * m + j] = k;
            gram[j * m + i] = k;
        }
    }
    let col_sum: Vec<f64> = (0..m).map(|j| (0..m).map(|i| gram[i * m + j]).sum()).collect();

    let nf = m as f64;
    let mut chosen = vec![false; m];
    // running sums over the current selection
    let mut sum_fp = 0.0;
    let mut sum_pp = 0.0;
    let mut cross = vec![0.0; m]; // cross[c] = Σ_{p∈P} k(p, c)
    let mut indices = Vec::with_capacity(n);
    let mut trajectory = Vec::with_capacity(n);

    for k in 0..n {
        let np = (k + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for c in 0..m {
            if chosen[c] {
                continue;
            }
            let fp = sum_fp + col_sum[c];
            let pp = sum_pp + 2.0 * cross[c] + gram[c * m + c];
            let score = 2.0 * fp / (nf * np) - pp / (np * np);
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((c, score));
            }
        }
        let (c, score) = best.expect("n <= m leaves a candidate");
        chosen[c] = true;
        sum_fp += col_sum[c];
        sum_pp += 2.0 * cross[c] + gram[c * m + c];
        for (j, x) in cross.iter_mut().enumerate() {
            *x += gram[c * m + j];
        }
        indices.push(c);
        trajectory.push(score);
    }

    Ok(Selection {
        prototypes: f.select(&indices),
        indices,
        trajectory,
    })
}

/// Symmetric Chamfer distance between two sets.
pub fn chamfer_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    check_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("chamfer distance of an empty set"));
    }
    let one_way = |x: &EmbeddingSet, y: &EmbeddingSet| -> f64 {
        x.iter()
            .map(|u| y.iter().map(|v| sq_dist(u, v)).fold(f64::INFINITY, f64::min))
            .sum()
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// `γ = 1 / (2 · median pairwise squared distance)`, or `1` when the median
/// is zero.
pub fn median_heuristic_gamma(f: &EmbeddingSet) -> Result<KernelConfig> {
    if f.len() < 2 {
        return Err(Error::contract(
            "median heuristic needs at least two embeddings",
        ));
    }
    let mut d = Vec::with_capacity(f.len() * (f.len() - 1) / 2);
    for i in 0..f.len() {
        for j in (i + 1)..f.len() {
            d.push(sq_dist(f.get(i), f.get(j)));
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    };
    if median > 0.0 {
        KernelConfig::new(1.0 / (2.0 * median))
    } else {
        KernelConfig::new(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set1d(xs: &[f64]) -> EmbeddingSet {
        let v: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        EmbeddingSet::from_rows(1, &v, 0).unwrap()
    }

    fn g(gamma: f64) -> KernelConfig {
        KernelConfig::new(gamma).unwrap()
    }

    #[test]
    fn rbf_values() {
        assert_eq!(rbf_kernel(&[0.3, -1.0], &[0.3, -1.0], g(7.0)).unwrap(), 1.0);
        let v = rbf_kernel(&[0.0], &[1.0], g(1.0)).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!(rbf_kernel(&[0.0], &[1.0, 2.0], g(1.0)).is_err());
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(KernelConfig::new(0.0).is_err());
        assert!(KernelConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn mmd_hand_values() {
        let f = set1d(&[0.0]);
        let p = set1d(&[1.0]);
        let v = mmd_squared(&f, &p, g(1.0)).unwrap();
        assert!((v - (2.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-12);
        let same = set1d(&[0.0, 0.5, 3.0]);
        assert!(mmd_squared(&same, &same, g(0.7)).unwrap().abs() < 1e-12);
        assert!(mmd_squared(&f, &EmbeddingSet::empty(1), g(1.0)).is_err());
    }

    #[test]
    fn score_of_empty_is_zero() {
        let f = set1d(&[0.0, 1.0]);
        assert_eq!(score_j(&f, None, g(1.0)).unwrap(), 0.0);
        assert_eq!(score_j(&f, Some(&EmbeddingSet::empty(1)), g(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn score_single_point_on_itself() {
        let f = set1d(&[0.0]);
        for gamma in [0.1, 1.0, 10.0] {
            assert!((score_j(&f, Some(&f), g(gamma)).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn greedy_full_selection_and_errors() {
        let f = set1d(&[0.0, 2.0, 5.0]);
        let s = greedy_select(&f, 3, g(1.0)).unwrap();
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(greedy_select(&f, 4, g(1.0)).is_err());
    }

    #[test]
    fn greedy_two_clusters() {
        let f = set1d(&[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let s = greedy_select(&f, 2, g(1.0)).unwrap();
        let low = s.indices.iter().filter(|&&i| i < 3).count();
        assert_eq!(low, 1);
        // the cluster centres are the unique exhaustive optimum
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![1, 4]);
    }

    #[test]
    fn greedy_trajectory_matches_direct_score() {
        let f = set1d(&[0.0, 0.4, 1.1, 3.0, 3.2]);
        let s = greedy_select(&f, 4, g(0.8)).unwrap();
        for k in 0..4 {
            let direct = score_j(&f, Some(&f.select(&s.indices[..=k])), g(0.8)).unwrap();
            assert!((direct - s.trajectory[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_preserves_source_ids() {
        let f = EmbeddingSet::new(
            1,
            &[vec![0.0], vec![5.0]],
            vec![SourceId { batch: 3, index: 7 }, SourceId { batch: 4, index: 1 }],
        )
        .unwrap();
        let s = greedy_select(&f, 1, g(1.0)).unwrap();
        assert_eq!(s.prototypes.source_ids()[0], f.source_ids()[s.indices[0]]);
    }

    #[test]
    fn chamfer_values() {
        let a = set1d(&[0.0]);
        let b = set1d(&[1.0]);
        assert_eq!(chamfer_distance(&a, &b).unwrap(), 2.0);
        let c = set1d(&[0.0, 1.5, -2.0]);
        assert_eq!(chamfer_distance(&c, &c).unwrap(), 0.0);
        assert!(chamfer_distance(&a, &EmbeddingSet::empty(1)).is_err());
    }

    #[test]
    fn median_heuristic_cases() {
        let two = EmbeddingSet::from_rows(2, &[vec![0.0, 0.0], vec![1.0, 1.0]], 0).unwrap();
        assert!((median_heuristic_gamma(&two).unwrap().gamma() - 0.25).abs() < 1e-15);
        let same = set1d(&[2.0, 2.0, 2.0]);
        assert_eq!(median_heuristic_gamma(&same).unwrap().gamma(), 1.0);
        assert!(median_heuristic_gamma(&set1d(&[1.0])).is_err());
    }
}
