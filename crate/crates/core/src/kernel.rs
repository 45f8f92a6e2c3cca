//! Kernel-machine evaluators used as independent oracles for the network.
//!
//! Nothing here calls into the MEX or similarity code: every score is an
//! explicit sum of kernel values, so agreement with the network pipeline is a
//! genuine cross-check rather than a tautology.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimNetError};
use crate::similarity::{SimilarityForm, SimilarityParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `exp(ξ·xᵀz)`
    Exponential,
    /// `exp(−ξ·Σ|x_i − z_i|^p)`
    GeneralizedGaussian,
}

/// A positive-definite kernel. Invariants: `xi > 0`; `0 < p ≤ 2` for the
/// generalized Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub xi: f64,
    pub p: f64,
}

impl KernelSpec {
    pub fn exponential(xi: f64) -> Result<Self> {
        let spec = KernelSpec {
            kind: KernelKind::Exponential,
            xi,
            p: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn generalized_gaussian(xi: f64, p: f64) -> Result<Self> {
        let spec = KernelSpec {
            kind: KernelKind::GeneralizedGaussian,
            xi,
            p,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi.is_finite() && self.xi > 0.0) {
            return Err(SimNetError::Validation(format!("kernel ξ must be positive, got {}", self.xi)));
        }
        if self.kind == KernelKind::GeneralizedGaussian && !(self.p > 0.0 && self.p <= 2.0) {
            return Err(SimNetError::Validation(format!(
                "generalized Gaussian order must lie in (0, 2], got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// The kernel induced by a similarity layer under MEX with parameter `xi`.
    ///
    /// Weighted similarity has no kernel counterpart and is refused, as is an
    /// `l_p` order above 2.
    pub fn for_similarity(params: &SimilarityParams, xi: f64) -> Result<Self> {
        if params.is_weighted() {
            return Err(SimNetError::Unsupported(
                "weighted similarity is not expressible as a kernel machine".into(),
            ));
        }
        match params.form {
            SimilarityForm::Linear => Self::exponential(xi),
            SimilarityForm::Lp if params.p > 2.0 => Err(SimNetError::Unsupported(format!(
                "l_p similarity with p = {} > 2 does not induce a kernel",
                params.p
            ))),
            SimilarityForm::Lp => Self::generalized_gaussian(xi, params.p),
        }
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        match self.kind {
            KernelKind::Exponential => {
                (self.xi * x.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).exp()
            }
            KernelKind::GeneralizedGaussian => gg_expression(x, z, self.xi, self.p),
        }
    }
}

/// `exp(−ξ·Σ|x_i − z_i|^p)` for any `p > 0`, kernel or not.
fn gg_expression(x: &[f64], z: &[f64], xi: f64, p: f64) -> f64 {
    let dist: f64 = x.iter().zip(z).map(|(a, b)| (a - b).abs().powf(p)).sum();
    (-xi * dist).exp()
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], z: &[f64]) -> Result<f64> {
    spec.validate()?;
    if x.len() != z.len() {
        return Err(SimNetError::Shape(format!(
            "kernel arguments of length {} and {}",
            x.len(),
            z.len()
        )));
    }
    Ok(spec.eval(x, z))
}

/// Raw kernel expansions `Σ_l α_rl·K(x, z_l)` with `α_rl = exp(ξ·b_rl)`, one
/// per row of `offsets` (`[k][n]`).
pub fn mlp_kernel_sums(
    x: &[f64],
    templates: &Tensor,
    offsets: &[Vec<f64>],
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    spec.validate()?;
    if templates.rank() != 2 || templates.shape()[1] != x.len() {
        return Err(SimNetError::Shape(format!(
            "templates {:?} against input of length {}",
            templates.shape(),
            x.len()
        )));
    }
    let n = templates.shape()[0];
    let k_values: Vec<f64> = (0..n).map(|l| spec.eval(x, templates.row(l))).collect();
    offsets
        .iter()
        .enumerate()
        .map(|(r, b)| {
            if b.len() != n {
                return Err(SimNetError::Shape(format!(
                    "class {r} has {} offsets for {n} templates",
                    b.len()
                )));
            }
            Ok(b.iter().zip(&k_values).map(|(b, k)| (spec.xi * b).exp() * k).sum())
        })
        .collect()
}

/// Output units in kernel form, `h_r = σ(Σ_l α_rl·K(x, z_l))` with
/// `σ(t) = ln(t/n)/ξ`.
pub fn mlp_kernel_form(
    x: &[f64],
    templates: &Tensor,
    offsets: &[Vec<f64>],
    spec: &KernelSpec,
) -> Result<Vec<f64>> {
    let n = templates.shape()[0] as f64;
    let sums = mlp_kernel_sums(x, templates, offsets, spec)?;
    sums.into_iter()
        .map(|t| {
            let h = (t / n).ln() / spec.xi;
            if h.is_finite() {
                Ok(h)
            } else {
                Err(SimNetError::Numeric(format!("kernel expansion {t} is outside the range of σ")))
            }
        })
        .collect()
}

/// Multiclass kernel rule: the class with the largest kernel expansion.
pub fn mlp_kernel_predict(
    x: &[f64],
    templates: &Tensor,
    offsets: &[Vec<f64>],
    spec: &KernelSpec,
) -> Result<usize> {
    Ok(argmax(&mlp_kernel_sums(x, templates, offsets, spec)?))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `K(v, v2)` when both are present, 0 if either is the null character.
pub fn patch_kernel_kv(v: Option<&[f64]>, v2: Option<&[f64]>, base: &KernelSpec) -> f64 {
    match (v, v2) {
        (Some(a), Some(b)) => base.eval(a, b),
        _ => 0.0,
    }
}

/// Slotwise sum of [`patch_kernel_kv`] over two equal-length slot lists.
pub fn patch_kernel_big(
    x: &[Option<Vec<f64>>],
    x2: &[Option<Vec<f64>>],
    base: &KernelSpec,
) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(SimNetError::Shape(format!(
            "slot lists of length {} and {}",
            x.len(),
            x2.len()
        )));
    }
    Ok(x.iter()
        .zip(x2)
        .map(|(a, b)| patch_kernel_kv(a.as_deref(), b.as_deref(), base))
        .sum())
}

/// A support element of the patch SVM: `z_l` in every slot of pool `pool`,
/// null everywhere else.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSupportElement {
    pub slots: Vec<Option<Vec<f64>>>,
    pub template: usize,
    pub pool: usize,
}

impl PatchSupportElement {
    pub fn new(z: &[f64], template: usize, pool: usize, pool_map: &[usize]) -> Self {
        let slots = pool_map
            .iter()
            .map(|&q| (q == pool).then(|| z.to_vec()))
            .collect();
        PatchSupportElement {
            slots,
            template,
            pool,
        }
    }

    /// Locality: slot `i` is non-null iff `q(i) == pool`. Sharing: every
    /// non-null slot holds `z`.
    pub fn check_constraints(&self, z: &[f64], pool_map: &[usize]) -> Result<()> {
        if self.slots.len() != pool_map.len() {
            return Err(SimNetError::Shape(format!(
                "support element has {} slots, pool map has {}",
                self.slots.len(),
                pool_map.len()
            )));
        }
        for (i, (slot, &q)) in self.slots.iter().zip(pool_map).enumerate() {
            match slot {
                None if q == self.pool => {
                    return Err(SimNetError::Validation(format!(
                        "slot {i} lies in pool {q} but is null"
                    )))
                }
                Some(_) if q != self.pool => {
                    return Err(SimNetError::Validation(format!(
                        "slot {i} lies outside pool {} but is not null",
                        self.pool
                    )))
                }
                Some(v) if v.as_slice() != z => {
                    return Err(SimNetError::Validation(format!(
                        "slot {i} does not hold template {}",
                        self.template
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Reduced multiclass SVM over `V^D` with support elements `Z_lp`.
#[derive(Debug, Clone)]
pub struct PatchSvmModel {
    /// Indexed `[l·P + p]`.
    pub support: Vec<PatchSupportElement>,
    /// `α_rlp`, indexed `[r][l][p]`.
    pub coefficients: Vec<Vec<Vec<f64>>>,
    pub kernel: KernelSpec,
    /// Slot index → pool index.
    pub pool_map: Vec<usize>,
    pub num_pools: usize,
    templates: Tensor,
}

impl PatchSvmModel {
    pub fn new(
        templates: Tensor,
        coefficients: Vec<Vec<Vec<f64>>>,
        kernel: KernelSpec,
        pool_map: Vec<usize>,
        num_pools: usize,
    ) -> Result<Self> {
        kernel.validate()?;
        if templates.rank() != 2 {
            return Err(SimNetError::Shape("templates must be [n, d]".into()));
        }
        if pool_map.iter().any(|&q| q >= num_pools) {
            return Err(SimNetError::Index(format!("pool map exceeds {num_pools} pools")));
        }
        let n = templates.shape()[0];
        for (r, per_class) in coefficients.iter().enumerate() {
            let ok = per_class.len() == n
                && per_class.iter().all(|c| c.len() == num_pools && c.iter().all(|a| a.is_finite()));
            if !ok {
                return Err(SimNetError::Validation(format!(
                    "coefficients of class {r} must be a finite [{n}][{num_pools}] table"
                )));
            }
        }
        if coefficients.is_empty() {
            return Err(SimNetError::Validation("patch SVM without classes".into()));
        }
        let mut support = Vec::with_capacity(n * num_pools);
        for l in 0..n {
            for p in 0..num_pools {
                let element = PatchSupportElement::new(templates.row(l), l, p, &pool_map);
                element.check_constraints(templates.row(l), &pool_map)?;
                support.push(element);
            }
        }
        Ok(PatchSvmModel {
            support,
            coefficients,
            kernel,
            pool_map,
            num_pools,
            templates,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.coefficients.len()
    }

    pub fn num_templates(&self) -> usize {
        self.templates.shape()[0]
    }

    pub fn num_slots(&self) -> usize {
        self.pool_map.len()
    }

    fn check_instance(&self, x: &[Vec<f64>]) -> Result<()> {
        if x.len() != self.num_slots() {
            return Err(SimNetError::Shape(format!(
                "instance has {} patches, model expects {}",
                x.len(),
                self.num_slots()
            )));
        }
        Ok(())
    }

    /// `Σ_{l,p} α_rlp·𝒦(X, Z_lp)` for every class, through the block kernel.
    pub fn scores(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_instance(x)?;
        let slots: Vec<Option<Vec<f64>>> = x.iter().cloned().map(Some).collect();
        let big: Vec<f64> = self
            .support
            .iter()
            .map(|z| patch_kernel_big(&slots, &z.slots, &self.kernel))
            .collect::<Result<_>>()?;
        Ok(self
            .coefficients
            .iter()
            .map(|per_class| {
                self.support
                    .iter()
                    .zip(&big)
                    .map(|(z, k)| per_class[z.template][z.pool] * k)
                    .sum()
            })
            .collect())
    }

    /// The same scores written as the double sum over pools, templates and
    /// in-pool patches, `Σ_{p,l} α_rlp Σ_{i: q(i)=p} K(x_i, z_l)`.
    pub fn double_sum_scores(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_instance(x)?;
        let n = self.num_templates();
        Ok(self
            .coefficients
            .iter()
            .map(|per_class| {
                let mut total = 0.0;
                for p in 0..self.num_pools {
                    for (l, alpha) in per_class.iter().enumerate().take(n) {
                        let inner: f64 = x
                            .iter()
                            .zip(&self.pool_map)
                            .filter(|(_, &q)| q == p)
                            .map(|(xi, _)| self.kernel.eval(xi, self.templates.row(l)))
                            .sum();
                        total += alpha[p] * inner;
                    }
                }
                total
            })
            .collect())
    }

    pub fn classify(&self, x: &[Vec<f64>]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }
}

/// Symmetric Gram matrix `G_ij = k(x_i, x_j)`, assembled in parallel.
pub fn gram_matrix<T: Sync>(points: &[T], k: impl Fn(&T, &T) -> f64 + Sync) -> DMatrix<f64> {
    let m = points.len();
    let entries: Vec<f64> = (0..m * m)
        .into_par_iter()
        .map(|e| k(&points[e / m], &points[e % m]))
        .collect();
    let g = DMatrix::from_row_slice(m, m, &entries);
    (&g + g.transpose()) * 0.5
}

/// Largest point set accepted by the dense eigensolve.
pub const GRAM_MAX_POINTS: usize = 64;

/// Spectrum summary of a Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramReport {
    pub points: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub trace: f64,
}

impl GramReport {
    /// `λ_min ≥ −1e−10·trace`
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue >= -1e-10 * self.trace.abs()
    }
}

impl fmt::Display for GramReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "points: {}", self.points)?;
        writeln!(f, "min_eigenvalue: {:.6e}", self.min_eigenvalue)?;
        writeln!(f, "max_eigenvalue: {:.6e}", self.max_eigenvalue)?;
        writeln!(f, "trace: {:.6e}", self.trace)?;
        writeln!(f, "psd: {}", self.is_psd())
    }
}

pub fn gram_report<T: Sync>(points: &[T], k: impl Fn(&T, &T) -> f64 + Sync) -> Result<GramReport> {
    if points.is_empty() || points.len() > GRAM_MAX_POINTS {
        return Err(SimNetError::Argument(format!(
            "Gram analysis takes 1 to {GRAM_MAX_POINTS} points, got {}",
            points.len()
        )));
    }
    let g = gram_matrix(points, k);
    let trace = g.trace();
    if !g.iter().all(|v| v.is_finite()) {
        return Err(SimNetError::Numeric("non-finite Gram entry".into()));
    }
    let eig = SymmetricEigen::try_new(g, f64::EPSILON, 10_000)
        .ok_or_else(|| SimNetError::Numeric("symmetric eigensolve did not converge".into()))?;
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(GramReport {
        points: points.len(),
        min_eigenvalue,
        max_eigenvalue,
        trace,
    })
}

pub fn gram_min_eigenvalue<T: Sync>(points: &[T], k: impl Fn(&T, &T) -> f64 + Sync) -> Result<f64> {
    Ok(gram_report(points, k)?.min_eigenvalue)
}

/// Eigenvalue threshold below which a point set witnesses indefiniteness.
pub const WITNESS_THRESHOLD: f64 = -1e-6;

/// Random search for a 1-D point set on which `exp(−ξ·|x − y|^p)` has a
/// Gram matrix with an eigenvalue below [`WITNESS_THRESHOLD`].
///
/// Sets have 3 to 8 points drawn uniformly from `[−3, 3]`. Any `p > 0` is
/// accepted so the same search serves as a control for `p ≤ 2`.
pub fn find_non_psd_witness(p: f64, xi: f64, trials: usize, seed: u64) -> Result<Option<Vec<f64>>> {
    if !(p > 0.0 && xi > 0.0) {
        return Err(SimNetError::Argument(format!("witness search needs p, ξ > 0, got {p}, {xi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let size = rng.gen_range(3..=8);
        let points: Vec<f64> = (0..size).map(|_| rng.gen_range(-3.0..=3.0)).collect();
        let min = gram_min_eigenvalue(&points, |a, b| gg_expression(&[*a], &[*b], xi, p))?;
        if min < WITNESS_THRESHOLD {
            return Ok(Some(points));
        }
    }
    Ok(None)
}

/// Axis-aligned rectangle of the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// Predicted labels over a regular lattice, row `j` at height `ys[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `labels[j·nx + i]` is the label at `(xs[i], ys[j])`.
    pub labels: Vec<usize>,
}

impl Raster {
    pub fn label_at(&self, i: usize, j: usize) -> usize {
        self.labels[j * self.xs.len() + i]
    }

    pub fn count(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Whether any lattice point on the outer frame carries `label`.
    pub fn touches_boundary(&self, label: usize) -> bool {
        let (nx, ny) = (self.xs.len(), self.ys.len());
        (0..nx).any(|i| self.label_at(i, 0) == label || self.label_at(i, ny - 1) == label)
            || (0..ny).any(|j| self.label_at(0, j) == label || self.label_at(nx - 1, j) == label)
    }

    pub fn write_csv(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "x,y,label")?;
        for (j, y) in self.ys.iter().enumerate() {
            for (i, x) in self.xs.iter().enumerate() {
                writeln!(w, "{x},{y},{}", self.label_at(i, j))?;
            }
        }
        Ok(())
    }
}

fn lattice(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..count)
        .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Labels every lattice point of `bounds` (endpoints included) with the
/// argmax of `classifier`'s class scores.
pub fn decision_region_raster(
    classifier: impl Fn([f64; 2]) -> Vec<f64>,
    bounds: Bounds,
    resolution: (usize, usize),
) -> Result<Raster> {
    let (nx, ny) = resolution;
    if nx == 0 || ny == 0 || !(bounds.x_min < bounds.x_max && bounds.y_min < bounds.y_max) {
        return Err(SimNetError::Argument(format!(
            "invalid raster {nx}×{ny} over {bounds:?}"
        )));
    }
    let xs = lattice(bounds.x_min, bounds.x_max, nx);
    let ys = lattice(bounds.y_min, bounds.y_max, ny);
    let mut labels = Vec::with_capacity(nx * ny);
    for &y in &ys {
        for &x in &xs {
            let scores = classifier([x, y]);
            if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
                return Err(SimNetError::Numeric(format!(
                    "classifier returned {scores:?} at ({x}, {y})"
                )));
            }
            labels.push(argmax(&scores));
        }
    }
    Ok(Raster { xs, ys, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mex::mex;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale)).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let gg = KernelSpec::generalized_gaussian(1.0, 2.0).unwrap();
        assert_eq!(kernel_eval(&gg, &[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        assert!((kernel_eval(&gg, &[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        let ex = KernelSpec::exponential(1.0).unwrap();
        assert_eq!(kernel_eval(&ex, &[1.0, 0.0], &[0.0, 5.0]).unwrap(), 1.0);
        assert!(kernel_eval(&ex, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(KernelSpec::exponential(0.0).is_err());
        assert!(KernelSpec::generalized_gaussian(1.0, 2.5).is_err());
        assert!(KernelSpec::generalized_gaussian(1.0, 0.0).is_err());
        let z = Tensor::zeros(&[2, 3]).unwrap();
        let weighted =
            SimilarityParams::weighted(SimilarityForm::Lp, z.clone(), z.clone(), 2.0).unwrap();
        assert!(matches!(
            KernelSpec::for_similarity(&weighted, 1.0),
            Err(SimNetError::Unsupported(_))
        ));
        let high = SimilarityParams::unweighted(SimilarityForm::Lp, z, 3.0).unwrap();
        assert!(matches!(KernelSpec::for_similarity(&high, 1.0), Err(SimNetError::Unsupported(_))));
    }

    #[test]
    fn single_template_kernel_form_is_the_similarity() {
        let z = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = [1.0, 0.25, -0.5];
        let lin = SimilarityParams::unweighted(SimilarityForm::Linear, z.clone(), 1.0).unwrap();
        let spec = KernelSpec::for_similarity(&lin, 0.7).unwrap();
        let h = mlp_kernel_form(&x, &z, &[vec![0.0]], &spec).unwrap();
        assert!((h[0] - lin.score(&x, 0)).abs() < 1e-12);
    }

    #[test]
    fn kernel_form_matches_mex_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=8);
            let k = rng.gen_range(1..=4);
            let xi = rng.gen_range(0.1..2.0);
            let z = random_tensor(&mut rng, &[n, d], 1.0);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<Vec<f64>> =
                (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let params = match trial % 3 {
                0 => SimilarityParams::unweighted(SimilarityForm::Linear, z.clone(), 1.0),
                1 => SimilarityParams::unweighted(SimilarityForm::Lp, z.clone(), 1.0),
                _ => SimilarityParams::unweighted(SimilarityForm::Lp, z.clone(), 2.0),
            }
            .unwrap();
            let spec = KernelSpec::for_similarity(&params, xi).unwrap();
            let kernel = mlp_kernel_form(&x, &z, &b, &spec).unwrap();
            let sims = params.scores(&x);
            let mex_form: Vec<f64> = b
                .iter()
                .map(|br| {
                    let v: Vec<f64> = sims.iter().zip(br).map(|(s, o)| s + o).collect();
                    mex(&v, xi).unwrap()
                })
                .collect();
            for (a, m) in kernel.iter().zip(&mex_form) {
                assert!((a - m).abs() < 1e-9, "trial {trial}: {a} vs {m}");
            }
            assert_eq!(argmax(&kernel), mlp_kernel_predict(&x, &z, &b, &spec).unwrap());
        }
    }

    #[test]
    fn null_extension() {
        let spec = KernelSpec::generalized_gaussian(0.5, 1.0).unwrap();
        let v = [1.0, 2.0];
        assert_eq!(patch_kernel_kv(None, Some(&v), &spec), 0.0);
        assert_eq!(patch_kernel_kv(Some(&v), None, &spec), 0.0);
        assert_eq!(patch_kernel_kv(None, None, &spec), 0.0);
        let w = [0.0, 1.5];
        assert_eq!(patch_kernel_kv(Some(&v), Some(&w), &spec), spec.eval(&v, &w));
        let single = patch_kernel_big(&[Some(v.to_vec())], &[Some(w.to_vec())], &spec).unwrap();
        assert_eq!(single, spec.eval(&v, &w));
        let nulls = vec![None, None, None];
        let full = vec![Some(v.to_vec()), Some(w.to_vec()), Some(v.to_vec())];
        assert_eq!(patch_kernel_big(&nulls, &full, &spec).unwrap(), 0.0);
        assert!(patch_kernel_big(&nulls, &full[..2], &spec).is_err());
    }

    fn random_slots(rng: &mut ChaCha8Rng, slots: usize, d: usize) -> Vec<Option<Vec<f64>>> {
        (0..slots)
            .map(|_| {
                rng.gen_bool(0.6)
                    .then(|| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect()
    }

    #[test]
    fn null_extended_grams_are_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = KernelSpec::generalized_gaussian(1.0, 2.0).unwrap();
        let singles: Vec<Option<Vec<f64>>> = random_slots(&mut rng, 20, 3);
        let r = gram_report(&singles, |a, b| patch_kernel_kv(a.as_deref(), b.as_deref(), &spec)).unwrap();
        assert!(r.is_psd(), "{r}");
        let blocks: Vec<_> = (0..15).map(|_| random_slots(&mut rng, 4, 3)).collect();
        let r = gram_report(&blocks, |a, b| patch_kernel_big(a, b, &spec).unwrap()).unwrap();
        assert!(r.is_psd(), "{r}");
    }

    #[test]
    fn gram_examples() {
        let spec = KernelSpec::generalized_gaussian(1.0, 2.0).unwrap();
        let far: Vec<Vec<f64>> = (0..10).map(|i| vec![10.0 * i as f64, 0.0]).collect();
        let min = gram_min_eigenvalue(&far, |a, b| spec.eval(a, b)).unwrap();
        assert!((min - 1.0).abs() < 0.1);
        let one = vec![vec![0.3, 0.4]];
        let ex = KernelSpec::exponential(2.0).unwrap();
        let min = gram_min_eigenvalue(&one, |a, b| ex.eval(a, b)).unwrap();
        assert!((min - ex.eval(&one[0], &one[0])).abs() < 1e-12);
        let too_many: Vec<f64> = (0..65).map(|i| i as f64).collect();
        assert!(gram_report(&too_many, |a, b| a * b).is_err());
    }

    #[test]
    fn order_three_is_not_a_kernel_but_one_and_two_are() {
        assert!(find_non_psd_witness(3.0, 1.0, 1000, 1).unwrap().is_some());
        assert!(find_non_psd_witness(2.0, 1.0, 1000, 1).unwrap().is_none());
        assert!(find_non_psd_witness(1.0, 1.0, 1000, 1).unwrap().is_none());
    }

    fn random_svm(rng: &mut ChaCha8Rng, kernel: KernelSpec) -> (PatchSvmModel, Vec<Vec<f64>>) {
        let n = rng.gen_range(1..4);
        let d = rng.gen_range(1..5);
        let slots = rng.gen_range(1..7);
        let pools = rng.gen_range(1..=slots);
        let pool_map: Vec<usize> = (0..slots).map(|i| i % pools).collect();
        let k = rng.gen_range(1..4);
        let coefficients = (0..k)
            .map(|_| (0..n).map(|_| (0..pools).map(|_| rng.gen_range(-1.0..2.0)).collect()).collect())
            .collect();
        let z = random_tensor(rng, &[n, d], 1.0);
        let model = PatchSvmModel::new(z, coefficients, kernel, pool_map, pools).unwrap();
        let x = (0..slots).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        (model, x)
    }

    #[test]
    fn block_kernel_scores_equal_the_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let kernel = if rng.gen_bool(0.5) {
                KernelSpec::exponential(rng.gen_range(0.2..1.5)).unwrap()
            } else {
                KernelSpec::generalized_gaussian(rng.gen_range(0.2..1.5), rng.gen_range(0.5..2.0)).unwrap()
            };
            let (model, x) = random_svm(&mut rng, kernel);
            let a = model.scores(&x).unwrap();
            let b = model.double_sum_scores(&x).unwrap();
            for (a, b) in a.iter().zip(&b) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300));
            }
        }
    }

    #[test]
    fn single_class_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_tensor(&mut rng, &[2, 2], 1.0);
        let model = PatchSvmModel::new(
            z,
            vec![vec![vec![0.5], vec![-0.2]]],
            KernelSpec::exponential(1.0).unwrap(),
            vec![0, 0],
            1,
        )
        .unwrap();
        assert_eq!(model.classify(&[vec![1.0, 2.0], vec![0.0, -1.0]]).unwrap(), 0);
        assert!(model.classify(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn support_constraints_are_enforced() {
        let z = [1.0, 2.0];
        let pool_map = [0, 1, 0];
        let mut e = PatchSupportElement::new(&z, 0, 0, &pool_map);
        assert!(e.check_constraints(&z, &pool_map).is_ok());
        e.slots[1] = Some(z.to_vec());
        assert!(e.check_constraints(&z, &pool_map).is_err());
        let mut e = PatchSupportElement::new(&z, 0, 0, &pool_map);
        e.slots[2] = Some(vec![0.0, 0.0]);
        assert!(e.check_constraints(&z, &pool_map).is_err());
    }

    #[test]
    fn one_slot_one_pool_is_the_mlp_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = KernelSpec::generalized_gaussian(0.8, 1.0).unwrap();
        let z = random_tensor(&mut rng, &[3, 4], 1.0);
        let b: Vec<Vec<f64>> =
            (0..3).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let alpha = b
            .iter()
            .map(|row| row.iter().map(|o| vec![(spec.xi * o).exp()]).collect())
            .collect();
        let model = PatchSvmModel::new(z.clone(), alpha, spec, vec![0], 1).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let svm = model.scores(&[x.clone()]).unwrap();
            let mlp = mlp_kernel_sums(&x, &z, &b, &spec).unwrap();
            for (a, m) in svm.iter().zip(&mlp) {
                assert!((a - m).abs() <= 1e-12 * m.abs());
            }
        }
    }

    #[test]
    fn raster_examples() {
        let bounds = Bounds { x_min: -1.0, x_max: 1.0, y_min: -1.0, y_max: 1.0 };
        let r = decision_region_raster(|_| vec![0.0, 1.0, 0.5], bounds, (5, 4)).unwrap();
        assert!(r.labels.iter().all(|&l| l == 1));
        assert_eq!(r.xs.len(), 5);
        for (y, want) in r.ys.iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]) {
            assert!((y - want).abs() < 1e-15);
        }
        let err = decision_region_raster(|p| vec![p[0].ln()], bounds, (3, 3)).unwrap_err();
        assert!(err.to_string().contains("(-1, -1)"), "{err}");
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("x,y,label\n-1,-1,1\n"));
        assert_eq!(text.lines().count(), 21);
    }

    #[test]
    fn unweighted_l2_splits_along_the_bisector() {
        let a = [-0.5, 0.3];
        let b = [0.7, -0.4];
        let score = |p: [f64; 2]| {
            let d = |z: &[f64; 2]| -((p[0] - z[0]).powi(2) + (p[1] - z[1]).powi(2));
            vec![d(&a), d(&b)]
        };
        // points on the bisector: midpoint + t·perpendicular
        let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let dir = [b[0] - a[0], b[1] - a[1]];
        let norm = (dir[0] * dir[0] + dir[1] * dir[1]).sqrt();
        let unit = [dir[0] / norm, dir[1] / norm];
        for t in [-3.0, -1.0, 0.0, 0.4, 2.5] {
            let on = [mid[0] - t * unit[1], mid[1] + t * unit[0]];
            let before = [on[0] - 1e-6 * unit[0], on[1] - 1e-6 * unit[1]];
            let after = [on[0] + 1e-6 * unit[0], on[1] + 1e-6 * unit[1]];
            assert_eq!(argmax(&score(before)), 0);
            assert_eq!(argmax(&score(after)), 1);
        }
    }

    proptest! {
        #[test]
        fn block_kernel_is_additive(seed in 0u64..10_000, cut in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = KernelSpec::generalized_gaussian(0.7, 1.5).unwrap();
            let x = random_slots(&mut rng, 6, 2);
            let y = random_slots(&mut rng, 6, 2);
            let whole = patch_kernel_big(&x, &y, &spec).unwrap();
            let parts = patch_kernel_big(&x[..cut], &y[..cut], &spec).unwrap()
                + patch_kernel_big(&x[cut..], &y[cut..], &spec).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
        }

        #[test]
        fn common_offset_shift_keeps_the_decision(seed in 0u64..10_000, shift in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = KernelSpec::exponential(rng.gen_range(0.2..2.0)).unwrap();
            let z = random_tensor(&mut rng, &[4, 3], 1.0);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<Vec<f64>> =
                (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let shifted: Vec<Vec<f64>> =
                b.iter().map(|row| row.iter().map(|o| o + shift).collect()).collect();
            prop_assert_eq!(
                mlp_kernel_predict(&x, &z, &b, &spec).unwrap(),
                mlp_kernel_predict(&x, &z, &shifted, &spec).unwrap()
            );
        }

        #[test]
        fn kernel_grams_are_psd(seed in 0u64..10_000, which in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = match which {
                0 => KernelSpec::exponential(0.5).unwrap(),
                1 => KernelSpec::generalized_gaussian(1.0, 1.0).unwrap(),
                _ => KernelSpec::generalized_gaussian(1.0, 2.0).unwrap(),
            };
            let pts: Vec<Vec<f64>> =
                (0..20).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let r = gram_report(&pts, |a, b| spec.eval(a, b)).unwrap();
            prop_assert!(r.is_psd(), "{}", r);
        }
    }
}
