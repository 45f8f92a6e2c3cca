//! Similarity layer: `u_lᵀ φ(x_ij, z_l)` with linear or `l_p` mapping.
//!
//! Weights are stored as log-weights `v` with `u = exp(v)`, which keeps them
//! strictly positive under unconstrained updates. All channels share one
//! mapping and one order `p`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimNetError};
use crate::tensor::{PatchGrid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityForm {
    /// `φ(x, z)_i = x_i·z_i`
    Linear,
    /// `φ(x, z)_i = −|x_i − z_i|^p`
    Lp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityParams {
    pub form: SimilarityForm,
    /// `[n, d]`
    pub templates: Tensor,
    /// `[n, d]`, absent for unweighted similarity (`u ≡ 1`).
    pub log_weights: Option<Tensor>,
    pub p: f64,
}

/// Which optional gradients [`similarity_backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub order: bool,
    pub patches: bool,
}

impl Default for GradRequest {
    fn default() -> Self {
        GradRequest {
            order: true,
            patches: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrad {
    pub d_templates: Tensor,
    pub d_log_weights: Option<Tensor>,
    pub d_p: f64,
    /// `[P_h, P_w, d]` when requested.
    pub d_patches: Option<Tensor>,
}

impl SimilarityParams {
    pub fn unweighted(form: SimilarityForm, templates: Tensor, p: f64) -> Result<Self> {
        let params = SimilarityParams {
            form,
            templates,
            log_weights: None,
            p,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn weighted(
        form: SimilarityForm,
        templates: Tensor,
        log_weights: Tensor,
        p: f64,
    ) -> Result<Self> {
        let params = SimilarityParams {
            form,
            templates,
            log_weights: Some(log_weights),
            p,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.rank() != 2 {
            return Err(SimNetError::Shape(format!(
                "templates must be [n, d], got {:?}",
                self.templates.shape()
            )));
        }
        if let Some(v) = &self.log_weights {
            if v.shape() != self.templates.shape() {
                return Err(SimNetError::Shape(format!(
                    "log-weights {:?} do not match templates {:?}",
                    v.shape(),
                    self.templates.shape()
                )));
            }
            if v.data().iter().any(|x| !x.is_finite()) {
                return Err(SimNetError::Validation("non-finite similarity log-weight".into()));
            }
        }
        if self.templates.data().iter().any(|x| !x.is_finite()) {
            return Err(SimNetError::Validation("non-finite template entry".into()));
        }
        if !(self.p.is_finite() && self.p > 0.0) {
            return Err(SimNetError::Validation(format!(
                "order p must be positive and finite, got {}",
                self.p
            )));
        }
        Ok(())
    }

    pub fn num_templates(&self) -> usize {
        self.templates.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.templates.shape()[1]
    }

    pub fn is_weighted(&self) -> bool {
        self.log_weights.is_some()
    }

    /// Positive weights `u = exp(v)`, or all ones when unweighted.
    pub fn weights(&self) -> Tensor {
        match &self.log_weights {
            Some(v) => v.map(f64::exp),
            None => self.templates.map(|_| 1.0),
        }
    }

    pub fn template(&self, l: usize) -> &[f64] {
        self.templates.row(l)
    }

    /// Similarity of a single vector to template `l`.
    pub fn score(&self, x: &[f64], l: usize) -> f64 {
        let u = self.log_weights.as_ref().map(|v| v.row(l).iter().map(|v| v.exp()).collect::<Vec<_>>());
        score_one(self.form, self.p, x, self.template(l), u.as_deref())
    }

    /// Similarities of a single vector to every template.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let u = self.weights();
        (0..self.num_templates())
            .map(|l| {
                let ul = self.log_weights.as_ref().map(|_| u.row(l));
                score_one(self.form, self.p, x, self.template(l), ul)
            })
            .collect()
    }
}

fn score_one(form: SimilarityForm, p: f64, x: &[f64], z: &[f64], u: Option<&[f64]>) -> f64 {
    match (form, u) {
        (SimilarityForm::Linear, None) => x.iter().zip(z).map(|(a, b)| a * b).sum(),
        (SimilarityForm::Linear, Some(u)) => {
            x.iter().zip(z).zip(u).map(|((a, b), w)| w * a * b).sum()
        }
        (SimilarityForm::Lp, u) => -lp_distance(LpPower::new(p), x, z, u),
    }
}

/// `Σ_k u_k·|x_k − z_k|^p`, written out per order so the common cases
/// vectorize.
fn lp_distance(pow: LpPower, x: &[f64], z: &[f64], u: Option<&[f64]>) -> f64 {
    fn lanes(len: usize, mut term: impl FnMut(usize) -> f64) -> f64 {
        let mut acc = [0.0; 4];
        let full = len / 4 * 4;
        for k in (0..full).step_by(4) {
            acc[0] += term(k);
            acc[1] += term(k + 1);
            acc[2] += term(k + 2);
            acc[3] += term(k + 3);
        }
        for k in full..len {
            acc[k & 3] += term(k);
        }
        acc[0] + acc[1] + acc[2] + acc[3]
    }
    let d = x.len();
    let z = &z[..d];
    match (pow, u) {
        (LpPower::Two, Some(u)) => {
            let u = &u[..d];
            lanes(d, |k| u[k] * (x[k] - z[k]) * (x[k] - z[k]))
        }
        (LpPower::Two, None) => lanes(d, |k| (x[k] - z[k]) * (x[k] - z[k])),
        (LpPower::One, Some(u)) => {
            let u = &u[..d];
            lanes(d, |k| u[k] * (x[k] - z[k]).abs())
        }
        (LpPower::One, None) => lanes(d, |k| (x[k] - z[k]).abs()),
        (pow, Some(u)) => lanes(d, |k| u[k] * pow.apply((x[k] - z[k]).abs())),
        (pow, None) => lanes(d, |k| pow.apply((x[k] - z[k]).abs())),
    }
}

/// `|δ|^p` with fast paths for the common orders.
#[derive(Clone, Copy)]
enum LpPower {
    One,
    Two,
    General(f64),
}

impl LpPower {
    fn new(p: f64) -> Self {
        if p == 1.0 {
            LpPower::One
        } else if p == 2.0 {
            LpPower::Two
        } else {
            LpPower::General(p)
        }
    }

    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            LpPower::One => a,
            LpPower::Two => a * a,
            LpPower::General(p) => a.powf(p),
        }
    }

    /// `p·|δ|^{p−1}·sign(δ)`, zero at `δ = 0`.
    #[inline]
    fn slope(self, delta: f64) -> f64 {
        match self {
            LpPower::One => sign0(delta),
            LpPower::Two => 2.0 * delta,
            LpPower::General(p) => {
                if delta == 0.0 {
                    0.0
                } else {
                    p * delta.abs().powf(p - 1.0) * delta.signum()
                }
            }
        }
    }
}

#[inline]
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_patches(patches: &PatchGrid, params: &SimilarityParams) -> Result<()> {
    params.validate()?;
    if patches.patch_dim() != params.dim() {
        return Err(SimNetError::Shape(format!(
            "patch dimension {} does not match template dimension {}",
            patches.patch_dim(),
            params.dim()
        )));
    }
    Ok(())
}

/// Output `[P_h, P_w, n]`.
pub fn similarity_forward(patches: &PatchGrid, params: &SimilarityParams) -> Result<Tensor> {
    check_patches(patches, params)?;
    let n = params.num_templates();
    let weights = params.log_weights.as_ref().map(|_| params.weights());
    let mut out = Vec::with_capacity(patches.num_patches() * n);
    for x in patches.iter() {
        for l in 0..n {
            let u = weights.as_ref().map(|w| w.row(l));
            out.push(score_one(params.form, params.p, x, params.template(l), u));
        }
    }
    Tensor::new(vec![patches.grid_h(), patches.grid_w(), n], out)
}

pub fn similarity_backward(
    patches: &PatchGrid,
    params: &SimilarityParams,
    upstream: &Tensor,
    request: GradRequest,
) -> Result<SimilarityGrad> {
    check_patches(patches, params)?;
    let n = params.num_templates();
    let d = params.dim();
    let expected = [patches.grid_h(), patches.grid_w(), n];
    if upstream.shape() != expected {
        return Err(SimNetError::Shape(format!(
            "upstream shape {:?} differs from similarity output {expected:?}",
            upstream.shape()
        )));
    }
    let weighted = params.is_weighted();
    let u = params.weights();
    let mut d_z = vec![0.0; n * d];
    let mut d_u = vec![0.0; if weighted { n * d } else { 0 }];
    let mut d_p = 0.0;
    let mut d_x = if request.patches {
        vec![0.0; patches.num_patches() * d]
    } else {
        Vec::new()
    };
    let want_order = request.order && params.form == SimilarityForm::Lp;

    if params.form == SimilarityForm::Lp && params.p == 2.0 && !want_order && !request.patches {
        l2_moment_grads(patches, params, &u, upstream, &mut d_z, weighted.then_some(&mut d_u));
    } else {
        loop_grads(patches, params, &u, upstream, request, &mut d_z, &mut d_u, &mut d_p, &mut d_x);
    }

    let d_log_weights = if weighted {
        // chain through u = exp(v)
        for (du, &uk) in d_u.iter_mut().zip(u.data()) {
            *du *= uk;
        }
        Some(Tensor::new(vec![n, d], d_u)?)
    } else {
        None
    };
    let d_patches = if request.patches {
        Some(Tensor::new(
            vec![patches.grid_h(), patches.grid_w(), d],
            d_x,
        )?)
    } else {
        None
    };
    Ok(SimilarityGrad {
        d_templates: Tensor::new(vec![n, d], d_z)?,
        d_log_weights,
        d_p,
        d_patches,
    })
}


/// Per-(patch, template) accumulation, valid for every form and order.
#[allow(clippy::too_many_arguments)]
fn loop_grads(
    patches: &PatchGrid,
    params: &SimilarityParams,
    u: &Tensor,
    upstream: &Tensor,
    request: GradRequest,
    d_z: &mut [f64],
    d_u: &mut [f64],
    d_p: &mut f64,
    d_x: &mut [f64],
) {
    let n = params.num_templates();
    let d = params.dim();
    let weighted = params.is_weighted();
    let pow = LpPower::new(params.p);
    let want_order = request.order && params.form == SimilarityForm::Lp;
    for (pi, x) in patches.iter().enumerate() {
        let g_row = &upstream.data()[pi * n..(pi + 1) * n];
        for (l, &g) in g_row.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let z = params.template(l);
            let ul = u.row(l);
            let dz = &mut d_z[l * d..(l + 1) * d];
            match params.form {
                SimilarityForm::Linear => {
                    for k in 0..d {
                        dz[k] += g * ul[k] * x[k];
                    }
                    if weighted {
                        let du = &mut d_u[l * d..(l + 1) * d];
                        for k in 0..d {
                            du[k] += g * x[k] * z[k];
                        }
                    }
                    if request.patches {
                        let dx = &mut d_x[pi * d..(pi + 1) * d];
                        for k in 0..d {
                            dx[k] += g * ul[k] * z[k];
                        }
                    }
                }
                SimilarityForm::Lp => {
                    if weighted {
                        let du = &mut d_u[l * d..(l + 1) * d];
                        let terms = dz.iter_mut().zip(du.iter_mut()).zip(x.iter().zip(z).zip(ul));
                        for ((dz, du), ((a, b), w)) in terms {
                            let delta = a - b;
                            *dz += g * w * pow.slope(delta);
                            *du -= g * pow.apply(delta.abs());
                        }
                    } else {
                        for (dz, ((a, b), w)) in dz.iter_mut().zip(x.iter().zip(z).zip(ul)) {
                            *dz += g * w * pow.slope(a - b);
                        }
                    }
                    if want_order {
                        let mut acc = 0.0;
                        for k in 0..d {
                            let a = (x[k] - z[k]).abs();
                            // 0·ln 0 is taken as its limit 0
                            if a > 0.0 {
                                acc += ul[k] * pow.apply(a) * a.ln();
                            }
                        }
                        *d_p -= g * acc;
                    }
                    if request.patches {
                        let dx = &mut d_x[pi * d..(pi + 1) * d];
                        for k in 0..d {
                            dx[k] -= g * ul[k] * pow.slope(x[k] - z[k]);
                        }
                    }
                }
            }
        }
    }
}

/// `l_2` gradients from first and second moments of the patches,
/// `Σ_p g_pl·x_p` and `Σ_p g_pl·x_p²`, which reduce to two matrix products.
fn l2_moment_grads(
    patches: &PatchGrid,
    params: &SimilarityParams,
    u: &Tensor,
    upstream: &Tensor,
    d_z: &mut [f64],
    d_u: Option<&mut Vec<f64>>,
) {
    let n = params.num_templates();
    let d = params.dim();
    let count = patches.num_patches();
    // row-major [P, d] and [P, n] read as column-major [d, P] and [n, P]
    let xt = DMatrix::from_column_slice(d, count, patches.patches.data());
    let gt = DMatrix::from_column_slice(n, count, upstream.data());
    let first = &xt * gt.transpose();
    let mut g_sum = vec![0.0; n];
    for row in upstream.data().chunks_exact(n) {
        g_sum.iter_mut().zip(row).for_each(|(s, g)| *s += g);
    }
    // column l of `first` is Σ_p g_pl·x_p
    for l in 0..n {
        let m1 = first.column(l);
        let (z, w) = (params.template(l), u.row(l));
        for k in 0..d {
            d_z[l * d + k] = 2.0 * w[k] * (m1[k] - z[k] * g_sum[l]);
        }
    }
    if let Some(d_u) = d_u {
        let sq = xt.map(|v| v * v);
        let second = &sq * gt.transpose();
        for l in 0..n {
            let (m1, m2) = (first.column(l), second.column(l));
            let z = params.template(l);
            for k in 0..d {
                d_u[l * d + k] = -(m2[k] - 2.0 * z[k] * m1[k] + z[k] * z[k] * g_sum[l]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numdiff::{central_diff, rel_err};
    use crate::tensor::{extract_patches, PatchGeometry};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_patch(x: &[f64]) -> PatchGrid {
        let geometry = PatchGeometry::new([1, 1, x.len()], 1, 1, 1).unwrap();
        PatchGrid::from_patches(Tensor::new(vec![1, 1, x.len()], x.to_vec()).unwrap(), geometry)
            .unwrap()
    }

    #[test]
    fn moment_route_matches_the_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let input = Tensor::from_fn(&[6, 5, 2], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let grid = extract_patches(&input, 3, 2, 1).unwrap();
        let z = Tensor::from_fn(&[3, 12], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let v = Tensor::from_fn(&[3, 12], |_| rng.gen_range(-0.5..0.5)).unwrap();
        let g = Tensor::from_fn(&[4, 4, 3], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let params = SimilarityParams::weighted(SimilarityForm::Lp, z, v, 2.0).unwrap();
        let u = params.weights();
        let (mut dz_a, mut du_a) = (vec![0.0; 36], vec![0.0; 36]);
        l2_moment_grads(&grid, &params, &u, &g, &mut dz_a, Some(&mut du_a));
        let (mut dz_b, mut du_b, mut dp) = (vec![0.0; 36], vec![0.0; 36], 0.0);
        let request = GradRequest { order: false, patches: false };
        loop_grads(&grid, &params, &u, &g, request, &mut dz_b, &mut du_b, &mut dp, &mut []);
        for (a, b) in dz_a.iter().zip(&dz_b).chain(du_a.iter().zip(&du_b)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn unit_weight_linear_is_convolution() {
        let input = Tensor::from_fn(&[5, 5, 2], |i| (i as f64 * 0.3).sin()).unwrap();
        let grid = extract_patches(&input, 3, 3, 1).unwrap();
        let templates = Tensor::from_fn(&[4, 18], |i| (i as f64 * 0.7).cos()).unwrap();
        let params = SimilarityParams::unweighted(SimilarityForm::Linear, templates.clone(), 1.0).unwrap();
        let out = similarity_forward(&grid, &params).unwrap();
        assert_eq!(out.shape(), &[3, 3, 4]);
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..4 {
                    let dot: f64 = grid.patch_at(i, j).iter().zip(templates.row(l)).map(|(a, b)| a * b).sum();
                    assert!((out.get(&[i, j, l]).unwrap() - dot).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn self_similarity_is_zero() {
        for p in [0.5, 1.0, 1.5, 2.0, 3.0] {
            let z = Tensor::new(vec![1, 3], vec![0.2, -1.0, 4.0]).unwrap();
            let params = SimilarityParams::unweighted(SimilarityForm::Lp, z, p).unwrap();
            let out = similarity_forward(&single_patch(&[0.2, -1.0, 4.0]), &params).unwrap();
            assert_eq!(out.data()[0], 0.0);
        }
    }

    #[test]
    fn hand_evaluated_weighted_l1() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![2f64.ln(), 3f64.ln()]).unwrap();
        let params = SimilarityParams::weighted(SimilarityForm::Lp, z, v, 1.0).unwrap();
        let out = similarity_forward(&single_patch(&[1.0, 2.0]), &params).unwrap();
        assert!((out.data()[0] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_and_invalid_params() {
        let z = Tensor::zeros(&[2, 3]).unwrap();
        let params = SimilarityParams::unweighted(SimilarityForm::Lp, z.clone(), 2.0).unwrap();
        assert!(matches!(
            similarity_forward(&single_patch(&[1.0, 2.0]), &params),
            Err(SimNetError::Shape(_))
        ));
        assert!(SimilarityParams::unweighted(SimilarityForm::Lp, z.clone(), 0.0).is_err());
        let bad = Tensor::new(vec![2, 3], vec![0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0]).unwrap();
        assert!(SimilarityParams::weighted(SimilarityForm::Lp, z, bad, 2.0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let z = Tensor::from_fn(&[2, 3], |i| i as f64).unwrap();
        let v = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1).unwrap();
        let params = SimilarityParams::weighted(SimilarityForm::Lp, z, v, 1.5).unwrap();
        let grid = single_patch(&[0.5, 0.1, -0.3]);
        let g = similarity_backward(&grid, &params, &Tensor::zeros(&[1, 1, 2]).unwrap(), GradRequest { order: true, patches: true }).unwrap();
        assert!(g.d_templates.data().iter().all(|&x| x == 0.0));
        assert!(g.d_log_weights.unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(g.d_p, 0.0);
        assert!(g.d_patches.unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn l2_template_gradient_identity() {
        let z = Tensor::new(vec![1, 3], vec![0.5, -0.5, 1.0]).unwrap();
        let v = Tensor::new(vec![1, 3], vec![0.1, 0.2, -0.3]).unwrap();
        let params = SimilarityParams::weighted(SimilarityForm::Lp, z.clone(), v.clone(), 2.0).unwrap();
        let x = [1.0, 2.0, -1.0];
        let g = similarity_backward(&single_patch(&x), &params, &Tensor::filled(&[1, 1, 1], 0.7).unwrap(), GradRequest::default()).unwrap();
        for k in 0..3 {
            let expected = 2.0 * v.data()[k].exp() * (x[k] - z.data()[k]) * 0.7;
            assert!((g.d_templates.data()[k] - expected).abs() < 1e-14);
        }
    }

    /// Central differences of `Σ upstream ∘ forward` against the analytic
    /// backward pass, with every |x_k − z_k| ≥ 1e-3.
    fn check_gradients(form: SimilarityForm, p: f64, weighted: bool, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (3, rng.gen_range(2..=16));
        let input = Tensor::from_fn(&[3, 2, d], |_| rng.gen_range(-2.0..2.0)).unwrap();
        let geometry = PatchGeometry::new([3, 2, d], 2, 1, 1).unwrap();
        let patches = crate::tensor::extract_with_geometry(input.data(), &geometry).unwrap();
        let dim = geometry.patch_dim();
        let mut templates = Tensor::from_fn(&[n, dim], |_| rng.gen_range(-2.0..2.0)).unwrap();
        // keep away from the kinks of |·|
        for l in 0..n {
            for k in 0..dim {
                loop {
                    let z = templates.row(l)[k];
                    if patches.iter().all(|x| (x[k] - z).abs() >= 1e-3) {
                        break;
                    }
                    templates.row_mut(l)[k] = rng.gen_range(-2.0..2.0);
                }
            }
        }
        let v = Tensor::from_fn(&[n, dim], |_| rng.gen_range(-0.5..0.5)).unwrap();
        let params = if weighted {
            SimilarityParams::weighted(form, templates, v, p).unwrap()
        } else {
            SimilarityParams::unweighted(form, templates, p).unwrap()
        };
        let upstream = Tensor::from_fn(&[2, 2, n], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let objective = |pr: &SimilarityParams, grid: &PatchGrid| {
            let out = similarity_forward(grid, pr).unwrap();
            out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let g = similarity_backward(&patches, &params, &upstream, GradRequest { order: true, patches: true }).unwrap();
        let h = 2e-5;
        let mut worst: f64 = 0.0;
        for i in 0..params.templates.len() {
            let fd = central_diff(
                |t| {
                    let mut pr = params.clone();
                    pr.templates.data_mut()[i] = t;
                    objective(&pr, &patches)
                },
                params.templates.data()[i],
                h,
            );
            worst = worst.max(rel_err(g.d_templates.data()[i], fd));
        }
        if weighted {
            let dv = g.d_log_weights.as_ref().unwrap();
            for i in 0..dv.len() {
                let v0 = params.log_weights.as_ref().unwrap().data()[i];
                let fd = central_diff(
                    |t| {
                        let mut pr = params.clone();
                        pr.log_weights.as_mut().unwrap().data_mut()[i] = t;
                        objective(&pr, &patches)
                    },
                    v0,
                    h,
                );
                worst = worst.max(rel_err(dv.data()[i], fd));
            }
        }
        if form == SimilarityForm::Lp {
            let fd = central_diff(
                |t| {
                    let mut pr = params.clone();
                    pr.p = t;
                    objective(&pr, &patches)
                },
                params.p,
                h,
            );
            worst = worst.max(rel_err(g.d_p, fd));
        }
        let dx = g.d_patches.unwrap();
        for i in 0..patches.patches.len() {
            let fd = central_diff(
                |t| {
                    let mut grid = patches.clone();
                    grid.patches.data_mut()[i] = t;
                    objective(&params, &grid)
                },
                patches.patches.data()[i],
                h,
            );
            worst = worst.max(rel_err(dx.data()[i], fd));
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..6 {
            for p in [1.5, 2.0] {
                for weighted in [false, true] {
                    let err = check_gradients(SimilarityForm::Lp, p, weighted, seed);
                    assert!(err < 1e-6, "p={p} weighted={weighted} seed={seed}: {err}");
                }
            }
            for weighted in [false, true] {
                let err = check_gradients(SimilarityForm::Linear, 1.0, weighted, seed);
                assert!(err < 1e-6, "linear weighted={weighted}: {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn unweighted_l2_expansion(x in prop::collection::vec(-4.0f64..4.0, 1..10), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = x.iter().map(|_| rng.gen_range(-4.0..4.0)).collect();
            let params = SimilarityParams::unweighted(
                SimilarityForm::Lp, Tensor::new(vec![1, x.len()], z.clone()).unwrap(), 2.0).unwrap();
            let lhs = params.score(&x, 0);
            let dot: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
            let xx: f64 = x.iter().map(|a| a * a).sum();
            let zz: f64 = z.iter().map(|a| a * a).sum();
            prop_assert!((lhs - (2.0 * dot - xx - zz)).abs() < 1e-10);
        }

        #[test]
        fn weight_scaling_scales_channel(t in 0.01f64..50.0, p in 0.5f64..3.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5;
            let z = Tensor::from_fn(&[2, d], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let v = Tensor::from_fn(&[2, d], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = SimilarityParams::weighted(SimilarityForm::Lp, z.clone(), v.clone(), p).unwrap();
            let scaled = SimilarityParams::weighted(SimilarityForm::Lp, z, v.map(|w| w + t.ln()), p).unwrap();
            let a = base.scores(&x);
            let b = scaled.scores(&x);
            for l in 0..2 {
                prop_assert!((b[l] - t * a[l]).abs() <= 1e-12 * (1.0 + (t * a[l]).abs()));
            }
        }

        #[test]
        fn weighted_linear_is_absorbed_into_templates(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 6;
            let z = Tensor::from_fn(&[3, d], |_| rng.gen_range(-2.0..2.0)).unwrap();
            let v = Tensor::from_fn(&[3, d], |_| rng.gen_range(-1.0..1.0)).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let weighted = SimilarityParams::weighted(SimilarityForm::Linear, z.clone(), v.clone(), 1.0).unwrap();
            let folded = SimilarityParams::unweighted(
                SimilarityForm::Linear, z.mul(&v.map(f64::exp)).unwrap(), 1.0).unwrap();
            for (a, b) in weighted.scores(&x).iter().zip(folded.scores(&x)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
