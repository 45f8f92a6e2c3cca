//! Generalized Gaussian mixtures: EM fitting, the map onto similarity-layer
//! parameters, location-dependent priors and the offsets they induce.
//!
//! Component `l` has density
//! `Π_i β_l/(2α_{l,i}Γ(1/β_l))·exp(−(|x_i − μ_{l,i}|/α_{l,i})^{β_l})`.
//! With `z = μ`, `u = α^{−β}` and `p = β` the weighted `l_p` similarity of a
//! patch to template `l` is the component's log-joint up to the constant
//! `c_l`; adding `c_l` as a MEX offset makes it exact.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::checkpoint;
use crate::error::{Result, SimNetError};
use crate::similarity::{SimilarityForm, SimilarityParams};
use crate::tensor::Tensor;

/// Lower bound on every scale `α`, keeping `u = α^{−β}` finite.
pub const SCALE_FLOOR: f64 = 1e-4;
/// Priors below this are floored before taking logarithms.
pub const PRIOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GGMixture {
    pub priors: Vec<f64>,
    /// `[n, d]`
    pub means: Tensor,
    /// `[n, d]`, positive.
    pub scales: Tensor,
    pub shapes: Vec<f64>,
}

/// `ln(β/(2αΓ(1/β)))`, the per-coordinate normalizer.
pub fn log_normalizer(alpha: f64, beta: f64) -> f64 {
    (beta / 2.0).ln() - alpha.ln() - ln_gamma(1.0 / beta)
}

#[derive(Clone, Copy)]
enum Power {
    One,
    Two,
    General(f64),
}

impl Power {
    fn new(beta: f64) -> Self {
        if beta == 1.0 {
            Power::One
        } else if beta == 2.0 {
            Power::Two
        } else {
            Power::General(beta)
        }
    }

    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Power::One => a,
            Power::Two => a * a,
            Power::General(b) => a.powf(b),
        }
    }
}

impl GGMixture {
    pub fn new(priors: Vec<f64>, means: Tensor, scales: Tensor, shapes: Vec<f64>) -> Result<Self> {
        let m = GGMixture {
            priors,
            means,
            scales,
            shapes,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.priors.len();
        if n == 0 || self.means.rank() != 2 || self.means.shape()[0] != n {
            return Err(SimNetError::Shape(format!(
                "{n} priors against means {:?}",
                self.means.shape()
            )));
        }
        if self.scales.shape() != self.means.shape() || self.shapes.len() != n {
            return Err(SimNetError::Shape(format!(
                "scales {:?} and {} shapes for means {:?}",
                self.scales.shape(),
                self.shapes.len(),
                self.means.shape()
            )));
        }
        if self.priors.iter().any(|&l| !(l >= 0.0)) {
            return Err(SimNetError::Validation("negative or NaN prior".into()));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimNetError::Validation(format!("priors sum to {total}, not 1")));
        }
        if self.scales.data().iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(SimNetError::Validation("scales must be positive and finite".into()));
        }
        if self.shapes.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return Err(SimNetError::Validation("shapes must be positive and finite".into()));
        }
        if self.means.data().iter().any(|m| !m.is_finite()) {
            return Err(SimNetError::Validation("non-finite mean".into()));
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// `Σ_i ln(β_l/(2α_{l,i}Γ(1/β_l)))`, the log-normalizer of component `l`
    /// without its prior.
    pub fn component_normalizer(&self, l: usize) -> f64 {
        let beta = self.shapes[l];
        self.scales.row(l).iter().map(|&a| log_normalizer(a, beta)).sum()
    }

    /// `c_l = ln λ_l + component_normalizer(l)`
    pub fn log_constant(&self, l: usize) -> f64 {
        self.priors[l].ln() + self.component_normalizer(l)
    }

    /// Log-density of `x` under component `l`, prior excluded.
    pub fn component_log_density(&self, x: &[f64], l: usize) -> f64 {
        let pow = Power::new(self.shapes[l]);
        let energy: f64 = x
            .iter()
            .zip(self.means.row(l))
            .zip(self.scales.row(l))
            .map(|((x, m), a)| pow.apply((x - m).abs() / a))
            .sum();
        self.component_normalizer(l) - energy
    }

    /// Draws one vector and the index of the component it came from, using
    /// `priors` in place of the mixture's own when given.
    pub fn sample(&self, rng: &mut impl Rng, priors: Option<&[f64]>) -> Result<(Vec<f64>, usize)> {
        let weights = priors.unwrap_or(&self.priors);
        let pick = WeightedIndex::new(weights)
            .map_err(|e| SimNetError::Argument(format!("invalid sampling priors: {e}")))?;
        let l = pick.sample(rng);
        let beta = self.shapes[l];
        let x = self
            .means
            .row(l)
            .iter()
            .zip(self.scales.row(l))
            .map(|(&m, &a)| sample_gg(rng, m, a, beta))
            .collect();
        Ok((x, l))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let manifest = MixtureManifest {
            kind: MIXTURE_KIND.into(),
            n: self.num_components(),
            d: self.dim(),
            shapes: self.shapes.clone(),
            priors: self.priors.clone(),
            blobs: vec!["means".into(), "scales".into()],
        };
        checkpoint::write(path.as_ref(), &manifest, &[self.means.data(), self.scales.data()])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (m, mut blobs): (MixtureManifest, _) = checkpoint::read(path)?;
        if m.kind != MIXTURE_KIND {
            return Err(SimNetError::format(path, format!("expected a {MIXTURE_KIND} file, found {}", m.kind)));
        }
        let means = Tensor::new(vec![m.n, m.d], blobs.blob("means", m.n * m.d)?)?;
        let scales = Tensor::new(vec![m.n, m.d], blobs.blob("scales", m.n * m.d)?)?;
        blobs.finish()?;
        GGMixture::new(m.priors, means, scales, m.shapes)
            .map_err(|e| SimNetError::format(path, e.to_string()))
    }
}

const MIXTURE_KIND: &str = "ggm_mixture";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureManifest {
    kind: String,
    n: usize,
    d: usize,
    shapes: Vec<f64>,
    priors: Vec<f64>,
    blobs: Vec<String>,
}

/// One draw from a generalized Gaussian: `|x − μ| = α·G^{1/β}` with
/// `G ~ Gamma(1/β, 1)` and a fair random sign.
pub fn sample_gg(rng: &mut impl Rng, mu: f64, alpha: f64, beta: f64) -> f64 {
    let g = Gamma::new(1.0 / beta, 1.0).expect("shape is positive").sample(rng);
    let magnitude = alpha * g.powf(1.0 / beta);
    if rng.gen::<bool>() {
        mu + magnitude
    } else {
        mu - magnitude
    }
}

/// `ln P(x ∧ component l) = −Σ_i (|x_i − μ_{l,i}|/α_{l,i})^{β_l} + c_l`
pub fn ggm_log_joint(x: &[f64], mixture: &GGMixture, l: usize) -> Result<f64> {
    if l >= mixture.num_components() {
        return Err(SimNetError::Index(format!(
            "component {l} of a {}-component mixture",
            mixture.num_components()
        )));
    }
    if x.len() != mixture.dim() {
        return Err(SimNetError::Shape(format!(
            "vector of length {} for a mixture of dimension {}",
            x.len(),
            mixture.dim()
        )));
    }
    Ok(mixture.priors[l].ln() + mixture.component_log_density(x, l))
}

/// Weighted `l_p` similarity with `z = μ`, `v = −β·ln α` (so `u = α^{−β}`).
///
/// The network uses one global order: `fixed_p` when given, otherwise the
/// prior-weighted mean of the component shapes.
pub fn mixture_to_similarity_params(mixture: &GGMixture, fixed_p: Option<f64>) -> Result<SimilarityParams> {
    mixture.validate()?;
    let d = mixture.dim();
    let mut log_weights = Vec::with_capacity(mixture.num_components() * d);
    for (l, &beta) in mixture.shapes.iter().enumerate() {
        log_weights.extend(mixture.scales.row(l).iter().map(|a| -beta * a.ln()));
    }
    let p = fixed_p.unwrap_or_else(|| {
        mixture.priors.iter().zip(&mixture.shapes).map(|(l, b)| l * b).sum()
    });
    SimilarityParams::weighted(
        SimilarityForm::Lp,
        mixture.means.clone(),
        Tensor::new(mixture.means.shape().to_vec(), log_weights)?,
        p,
    )
}

/// How EM treats the shapes `β_l`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// Every component keeps this shape.
    Fixed(f64),
    /// Golden-section search of the profile likelihood over `[lo, hi]`.
    Search { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GgmConfig {
    pub max_iter: usize,
    /// Stop once the per-sample log-likelihood gain drops below this.
    pub tol: f64,
    pub beta: BetaMode,
    pub seed: u64,
    /// Points used for k-means++ seeding.
    pub subsample: usize,
    /// Lloyd iterations after seeding.
    pub kmeans_iters: usize,
    /// Independent seedings; the fit with the highest final likelihood wins.
    pub restarts: usize,
}

impl Default for GgmConfig {
    fn default() -> Self {
        GgmConfig {
            max_iter: 100,
            tol: 1e-6,
            beta: BetaMode::Search { lo: 0.3, hi: 4.0 },
            seed: 0,
            subsample: 100_000,
            kmeans_iters: 10,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GgmFit {
    pub mixture: GGMixture,
    /// Total log-likelihood of the seed mixture followed by one entry per
    /// EM iteration.
    pub log_likelihood: Vec<f64>,
    /// Components reseeded after collapsing to (almost) no responsibility.
    pub reseeds: usize,
    pub converged: bool,
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Responsibilities `[N, n]` and the total log-likelihood.
fn e_step(data: &Tensor, mixture: &GGMixture) -> (Vec<f64>, f64) {
    let n = mixture.num_components();
    let d = mixture.dim();
    let log_priors: Vec<f64> = mixture.priors.iter().map(|l| l.ln()).collect();
    let norms: Vec<f64> = (0..n).map(|l| mixture.component_normalizer(l)).collect();
    let inv_scales: Vec<f64> = mixture.scales.data().iter().map(|a| 1.0 / a).collect();
    let powers: Vec<Power> = mixture.shapes.iter().map(|&b| Power::new(b)).collect();
    let means = mixture.means.data();
    let mut resp = vec![0.0; data.shape()[0] * n];
    let per_sample: Vec<f64> = resp
        .par_chunks_mut(n)
        .zip(data.data().par_chunks(d))
        .map(|(r, x)| {
            for l in 0..n {
                let mu = &means[l * d..(l + 1) * d];
                let inv = &inv_scales[l * d..(l + 1) * d];
                let energy: f64 = x
                    .iter()
                    .zip(mu)
                    .zip(inv)
                    .map(|((x, m), ia)| powers[l].apply((x - m).abs() * ia))
                    .sum();
                r[l] = log_priors[l] + norms[l] - energy;
            }
            let lse = log_sum_exp(r);
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
            lse
        })
        .collect();
    (resp, compensated_sum(per_sample))
}

/// `Σ_N r_N·|x_{N,i} − μ_i|^β` for every coordinate of one component.
fn weighted_powers(data: &Tensor, resp: &[f64], n: usize, l: usize, mu: &[f64], beta: f64) -> Vec<f64> {
    let d = mu.len();
    let pow = Power::new(beta);
    let mut s = vec![0.0; d];
    for (x, r) in data.data().chunks_exact(d).zip(resp.chunks_exact(n)) {
        let w = r[l];
        if w == 0.0 {
            continue;
        }
        for ((acc, x), m) in s.iter_mut().zip(x).zip(mu) {
            *acc += w * pow.apply((x - m).abs());
        }
    }
    s
}

fn optimal_scale(s: f64, big_r: f64, beta: f64) -> f64 {
    (beta * s / big_r).powf(1.0 / beta).max(SCALE_FLOOR)
}

/// Expected complete-data log-likelihood of one component (prior term
/// excluded) with scales at their optimum for the given shape.
fn profile_q(data: &Tensor, resp: &[f64], n: usize, l: usize, mu: &[f64], beta: f64, big_r: f64) -> f64 {
    let s = weighted_powers(data, resp, n, l, mu, beta);
    let head = (beta / 2.0).ln() - ln_gamma(1.0 / beta);
    s.iter()
        .map(|&s| {
            let a = optimal_scale(s, big_r, beta);
            big_r * (head - a.ln()) - s / a.powf(beta)
        })
        .sum()
}

/// Maximizes a unimodal-ish `f` on `[lo, hi]`; endpoints are candidates too.
fn golden_section_max(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if (b - a) < 1e-4 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mut best = if fc > fd { (c, fc) } else { (d, fd) };
    for edge in [lo, hi] {
        let fe = f(edge);
        if fe > best.1 {
            best = (edge, fe);
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding plus a few Lloyd iterations on a subsample, then
/// moment-matched `β = 2` components.
fn seed_mixture(data: &Tensor, n: usize, config: &GgmConfig, rng: &mut ChaCha8Rng) -> Result<GGMixture> {
    let total = data.shape()[0];
    let d = data.shape()[1];
    let take = config.subsample.clamp(n, total);
    let rows: Vec<usize> = if take == total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(rng, total, take).into_vec()
    };
    let point = |i: usize| data.row(rows[i]);

    let mut centers: Vec<Vec<f64>> = vec![point(rng.gen_range(0..take)).to_vec()];
    let mut nearest: Vec<f64> = (0..take).map(|i| sq_dist(point(i), &centers[0])).collect();
    while centers.len() < n {
        let sum: f64 = nearest.iter().sum();
        let next = if sum > 0.0 {
            let mut target = rng.gen::<f64>() * sum;
            let mut chosen = take - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..take)
        };
        let c = point(next).to_vec();
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(point(i), &c));
        }
        centers.push(c);
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        (0..take)
            .into_par_iter()
            .map(|i| {
                let x = point(i);
                let mut best = (0, f64::INFINITY);
                for (c, z) in centers.iter().enumerate() {
                    let dist = sq_dist(x, z);
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                best.0
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..config.kmeans_iters {
        let mut sums = vec![vec![0.0; d]; n];
        let mut counts = vec![0usize; n];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            sums[c].iter_mut().zip(point(i)).for_each(|(s, x)| *s += x);
        }
        for c in 0..n {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }

    // β = 2: E|x − μ| = α/√π
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut global_dev = vec![0.0; d];
    let global_mean: Vec<f64> = (0..d)
        .map(|i| (0..take).map(|r| point(r)[i]).sum::<f64>() / take as f64)
        .collect();
    for r in 0..take {
        for (i, g) in global_dev.iter_mut().enumerate() {
            *g += (point(r)[i] - global_mean[i]).abs();
        }
    }
    let global_scale: Vec<f64> = global_dev
        .iter()
        .map(|g| (sqrt_pi * g / take as f64).max(SCALE_FLOOR))
        .collect();

    let mut dev = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for (r, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (i, acc) in dev[c].iter_mut().enumerate() {
            *acc += (point(r)[i] - centers[c][i]).abs();
        }
    }
    let mut scales = Vec::with_capacity(n * d);
    for c in 0..n {
        for i in 0..d {
            scales.push(if counts[c] > 0 {
                (sqrt_pi * dev[c][i] / counts[c] as f64).max(SCALE_FLOOR)
            } else {
                global_scale[i]
            });
        }
    }
    let priors: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 + 1.0) / (take + n) as f64)
        .collect();
    let shapes = match config.beta {
        BetaMode::Fixed(b) => vec![b; n],
        BetaMode::Search { .. } => vec![2.0; n],
    };
    GGMixture::new(
        priors,
        Tensor::new(vec![n, d], centers.concat())?,
        Tensor::new(vec![n, d], scales)?,
        shapes,
    )
}

/// Fits an `n`-component mixture to the rows of `data` (`[N, d]`) by EM.
///
/// Each M-step improves the expected complete-data log-likelihood: the new
/// mean of a coordinate (the responsibility-weighted average) is kept only
/// if it lowers `Σ r·|x − μ|^β`; scales take their closed form; a searched
/// shape replaces the old one only if the profile improves. The total
/// log-likelihood therefore never decreases.
pub fn fit_ggm(data: &Tensor, n: usize, config: &GgmConfig) -> Result<GgmFit> {
    if data.rank() != 2 || data.shape()[1] == 0 {
        return Err(SimNetError::Shape(format!("EM data must be [N, d], got {:?}", data.shape())));
    }
    let total = data.shape()[0];
    if n == 0 || total < 10 * n {
        return Err(SimNetError::Argument(format!(
            "fitting {n} components needs at least {} samples, got {total}",
            10 * n.max(1)
        )));
    }
    if data.data().iter().any(|x| !x.is_finite()) {
        return Err(SimNetError::Validation("non-finite EM sample".into()));
    }
    if let BetaMode::Search { lo, hi } = config.beta {
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(SimNetError::Config(format!("invalid shape range [{lo}, {hi}]")));
        }
    }
    if config.restarts == 0 {
        return Err(SimNetError::Config("EM needs at least one restart".into()));
    }
    let mut best: Option<GgmFit> = None;
    for r in 0..config.restarts as u64 {
        let fit = fit_from_seed(data, n, config, config.seed.wrapping_add(r))?;
        let better = best.as_ref().map_or(true, |b| final_ll(&fit) > final_ll(b));
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn final_ll(fit: &GgmFit) -> f64 {
    *fit.log_likelihood.last().expect("history starts with the seeded likelihood")
}

fn fit_from_seed(data: &Tensor, n: usize, config: &GgmConfig, seed: u64) -> Result<GgmFit> {
    let (total, d) = (data.shape()[0], data.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixture = seed_mixture(data, n, config, &mut rng)?;
    let (mut resp, mut ll) = e_step(data, &mixture);
    let mut history = vec![ll];
    let mut reseeds = 0;
    let mut converged = false;

    for _ in 0..config.max_iter {
        let mut means = mixture.means.clone();
        let mut scales = mixture.scales.clone();
        let mut shapes = mixture.shapes.clone();
        let mut priors = vec![0.0; n];
        for l in 0..n {
            let big_r: f64 = resp.iter().skip(l).step_by(n).sum();
            if big_r < 1e-8 * total as f64 {
                let donor = data.row(rng.gen_range(0..total)).to_vec();
                means.row_mut(l).copy_from_slice(&donor);
                let spread: Vec<f64> = (0..d)
                    .map(|i| {
                        let col = (0..n).map(|c| mixture.scales.row(c)[i]).sum::<f64>();
                        col / n as f64
                    })
                    .collect();
                scales.row_mut(l).copy_from_slice(&spread);
                priors[l] = 1.0 / total as f64;
                reseeds += 1;
                continue;
            }
            priors[l] = big_r / total as f64;

            let old_mu = mixture.means.row(l).to_vec();
            let mut new_mu = vec![0.0; d];
            for (x, r) in data.data().chunks_exact(d).zip(resp.chunks_exact(n)) {
                new_mu.iter_mut().zip(x).for_each(|(m, x)| *m += r[l] * x);
            }
            new_mu.iter_mut().for_each(|m| *m /= big_r);
            let beta_old = mixture.shapes[l];
            let s_old = weighted_powers(data, &resp, n, l, &old_mu, beta_old);
            let s_new = weighted_powers(data, &resp, n, l, &new_mu, beta_old);
            let mu: Vec<f64> = (0..d)
                .map(|i| if s_new[i] <= s_old[i] { new_mu[i] } else { old_mu[i] })
                .collect();

            let beta = match config.beta {
                BetaMode::Fixed(b) => b,
                BetaMode::Search { lo, hi } => {
                    let keep = profile_q(data, &resp, n, l, &mu, beta_old, big_r);
                    let (b, q) = golden_section_max(|b| profile_q(data, &resp, n, l, &mu, b, big_r), lo, hi);
                    if q > keep {
                        b
                    } else {
                        beta_old
                    }
                }
            };
            let s = weighted_powers(data, &resp, n, l, &mu, beta);
            means.row_mut(l).copy_from_slice(&mu);
            for (a, s) in scales.row_mut(l).iter_mut().zip(&s) {
                *a = optimal_scale(*s, big_r, beta);
            }
            shapes[l] = beta;
        }
        let sum: f64 = priors.iter().sum();
        priors.iter_mut().for_each(|p| *p /= sum);
        mixture = GGMixture::new(priors, means, scales, shapes)?;

        let (next_resp, next_ll) = e_step(data, &mixture);
        let gain = next_ll - ll;
        resp = next_resp;
        ll = next_ll;
        history.push(ll);
        if gain / (total as f64) < config.tol {
            converged = true;
            break;
        }
    }
    Ok(GgmFit {
        mixture,
        log_likelihood: history,
        reseeds,
        converged,
    })
}

/// Per-location component priors, `[P_h, P_w, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationPriors {
    pub priors: Tensor,
}

impl LocationPriors {
    pub fn lattice(&self) -> (usize, usize) {
        (self.priors.shape()[0], self.priors.shape()[1])
    }

    pub fn at(&self, ph: usize, pw: usize) -> &[f64] {
        let n = self.priors.shape()[2];
        let start = (ph * self.priors.shape()[1] + pw) * n;
        &self.priors.data()[start..start + n]
    }
}

#[derive(Debug, Clone)]
pub struct LocationFit {
    pub priors: LocationPriors,
    /// Log-likelihood history per location, row-major over the lattice.
    pub log_likelihood: Vec<Vec<f64>>,
}

/// Re-estimates the component priors separately at every pool location with
/// means, scales and shapes frozen. `samples[ph·P_w + pw]` holds the
/// patches of that location as concatenated rows of length `d`. Locations
/// without samples get uniform priors.
pub fn fit_location_priors(
    samples: &[Vec<f64>],
    lattice: (usize, usize),
    mixture: &GGMixture,
    max_iter: usize,
    tol: f64,
) -> Result<LocationFit> {
    mixture.validate()?;
    let (ph, pw) = lattice;
    if samples.len() != ph * pw {
        return Err(SimNetError::Shape(format!(
            "{} sample groups for a {ph}×{pw} lattice",
            samples.len()
        )));
    }
    let n = mixture.num_components();
    let d = mixture.dim();
    let mut priors = Vec::with_capacity(ph * pw * n);
    let mut histories = Vec::with_capacity(ph * pw);
    for (loc, group) in samples.iter().enumerate() {
        if group.is_empty() {
            priors.extend(std::iter::repeat(1.0 / n as f64).take(n));
            histories.push(Vec::new());
            continue;
        }
        if group.len() % d != 0 {
            return Err(SimNetError::Shape(format!(
                "location {loc} holds {} values, not a multiple of dimension {d}",
                group.len()
            )));
        }
        let densities: Vec<f64> = group
            .par_chunks(d)
            .flat_map_iter(|x| (0..n).map(move |l| mixture.component_log_density(x, l)))
            .collect();
        let count = group.len() / d;
        let mut lambda = mixture.priors.clone();
        let mut history = Vec::new();
        let mut joint = vec![0.0; n];
        for iter in 0..=max_iter {
            let mut next = vec![0.0; n];
            let mut per_sample = Vec::with_capacity(count);
            for dens in densities.chunks_exact(n) {
                for l in 0..n {
                    joint[l] = lambda[l].ln() + dens[l];
                }
                let lse = log_sum_exp(&joint);
                per_sample.push(lse);
                for l in 0..n {
                    next[l] += (joint[l] - lse).exp();
                }
            }
            let ll = compensated_sum(per_sample);
            let done = history.last().is_some_and(|prev: &f64| (ll - prev) / (count as f64) < tol);
            history.push(ll);
            if done || iter == max_iter {
                break;
            }
            let sum: f64 = next.iter().sum();
            lambda = next.into_iter().map(|r| r / sum).collect();
        }
        priors.extend(lambda);
        histories.push(history);
    }
    Ok(LocationFit {
        priors: LocationPriors {
            priors: Tensor::new(vec![ph, pw, n], priors)?,
        },
        log_likelihood: histories,
    })
}

/// `b[l, ph, pw] = ln max(λ_{l,loc}, 1e−12) + Σ_i ln(β_l/(2α_{l,i}Γ(1/β_l)))`
pub fn location_offsets(mixture: &GGMixture, priors: &LocationPriors) -> Result<Tensor> {
    let n = mixture.num_components();
    let (ph, pw) = priors.lattice();
    if priors.priors.shape()[2] != n {
        return Err(SimNetError::Shape(format!(
            "priors for {} components, mixture has {n}",
            priors.priors.shape()[2]
        )));
    }
    let norms: Vec<f64> = (0..n).map(|l| mixture.component_normalizer(l)).collect();
    let mut out = Vec::with_capacity(n * ph * pw);
    for (l, norm) in norms.iter().enumerate() {
        for a in 0..ph {
            for b in 0..pw {
                out.push(priors.at(a, b)[l].max(PRIOR_FLOOR).ln() + norm);
            }
        }
    }
    Tensor::new(vec![n, ph, pw], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn mixture_1d() -> GGMixture {
        GGMixture::new(
            vec![0.3, 0.7],
            Tensor::new(vec![2, 1], vec![-1.0, 2.0]).unwrap(),
            Tensor::new(vec![2, 1], vec![0.5, 1.5]).unwrap(),
            vec![1.0, 3.0],
        )
        .unwrap()
    }

    #[test]
    fn gamma_spot_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
    }

    #[test]
    fn log_joint_at_the_mean_is_the_constant() {
        let m = mixture_1d();
        for l in 0..2 {
            let x = m.means.row(l).to_vec();
            assert_eq!(ggm_log_joint(&x, &m, l).unwrap(), m.log_constant(l));
        }
        assert!(ggm_log_joint(&[0.0], &m, 2).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let m = mixture_1d();
        // trapezoid rule on [-30, 30]
        let steps = 600_000;
        let h = 60.0 / steps as f64;
        let mut total = 0.0;
        for s in 0..=steps {
            let x = -30.0 + s as f64 * h;
            let w = if s == 0 || s == steps { 0.5 } else { 1.0 };
            total += w * (0..2).map(|l| ggm_log_joint(&[x], &m, l).unwrap().exp()).sum::<f64>();
        }
        assert!((total * h - 1.0).abs() < 1e-3, "{}", total * h);
    }

    #[test]
    fn similarity_reproduces_the_log_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 3;
        let d = 5;
        let shape = 1.7;
        let m = GGMixture::new(
            vec![0.2, 0.5, 0.3],
            Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0)).unwrap(),
            Tensor::from_fn(&[n, d], |_| rng.gen_range(0.2..2.0)).unwrap(),
            vec![shape; n],
        )
        .unwrap();
        let params = mixture_to_similarity_params(&m, Some(shape)).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for l in 0..n {
                let lhs = params.score(&x, l) + m.log_constant(l);
                let rhs = ggm_log_joint(&x, &m, l).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn similarity_mapping_examples() {
        let unit = GGMixture::new(
            vec![1.0],
            Tensor::zeros(&[1, 3]).unwrap(),
            Tensor::filled(&[1, 3], 1.0).unwrap(),
            vec![2.0],
        )
        .unwrap();
        let p = mixture_to_similarity_params(&unit, None).unwrap();
        assert_eq!(p.p, 2.0);
        assert!(p.weights().data().iter().all(|&u| u == 1.0));
        let laplace = GGMixture::new(
            vec![1.0],
            Tensor::zeros(&[1, 2]).unwrap(),
            Tensor::filled(&[1, 2], 2.0).unwrap(),
            vec![1.0],
        )
        .unwrap();
        let p = mixture_to_similarity_params(&laplace, None).unwrap();
        assert!(p.weights().data().iter().all(|&u| (u - 0.5).abs() < 1e-15));
    }

    #[test]
    fn single_gaussian_component_is_the_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Tensor::from_fn(&[500, 3], |k| rng.gen_range(-1.0..1.0) * (1 + k % 3) as f64).unwrap();
        let config = GgmConfig {
            beta: BetaMode::Fixed(2.0),
            ..GgmConfig::default()
        };
        let fit = fit_ggm(&data, 1, &config).unwrap();
        for i in 0..3 {
            let col: Vec<f64> = (0..500).map(|r| data.row(r)[i]).collect();
            let mean = col.iter().sum::<f64>() / 500.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 500.0;
            assert!((fit.mixture.means.row(0)[i] - mean).abs() < 1e-12);
            assert!((fit.mixture.scales.row(0)[i] - (2.0 * var).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_component_maximizes_the_likelihood() {
        // independent route: perturb the fitted (μ, α) and check the
        // likelihood only drops
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = Tensor::from_fn(&[400, 2], |_| rng.gen_range(-1.0..2.0)).unwrap();
        let config = GgmConfig {
            beta: BetaMode::Fixed(2.0),
            ..GgmConfig::default()
        };
        let fit = fit_ggm(&data, 1, &config).unwrap();
        let ll = |m: &GGMixture| -> f64 {
            (0..400).map(|r| ggm_log_joint(data.row(r), m, 0).unwrap()).sum()
        };
        let best = ll(&fit.mixture);
        for k in 0..4 {
            for delta in [-1e-3, 1e-3] {
                let mut m = fit.mixture.clone();
                if k < 2 {
                    m.means.data_mut()[k] += delta;
                } else {
                    m.scales.data_mut()[k - 2] += delta;
                }
                assert!(ll(&m) < best);
            }
        }
    }

    #[test]
    fn degenerate_data_hits_the_scale_floor() {
        let data = Tensor::filled(&[50, 2], 0.25).unwrap();
        let config = GgmConfig {
            beta: BetaMode::Fixed(2.0),
            ..GgmConfig::default()
        };
        let fit = fit_ggm(&data, 2, &config).unwrap();
        assert!(fit.mixture.scales.data().iter().all(|&a| a == SCALE_FLOOR));
        assert!(fit.mixture.means.data().iter().all(|&m| m == 0.25));
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let data = Tensor::zeros(&[19, 2]).unwrap();
        assert!(fit_ggm(&data, 2, &GgmConfig::default()).is_err());
    }

    #[test]
    fn em_is_monotone_with_shape_search() {
        let truth = mixture_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..2000).map(|_| truth.sample(&mut rng, None).unwrap().0[0]).collect();
        let data = Tensor::new(vec![2000, 1], data).unwrap();
        for seed in 0..3 {
            let fit = fit_ggm(&data, 2, &GgmConfig { seed, max_iter: 40, ..GgmConfig::default() }).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn location_priors_recover_planted_structure() {
        let m = GGMixture::new(
            vec![0.5, 0.25, 0.25],
            Tensor::new(vec![3, 2], vec![-4.0, 0.0, 0.0, 4.0, 4.0, 0.0]).unwrap(),
            Tensor::filled(&[3, 2], 0.7).unwrap(),
            vec![2.0; 3],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut draw = |priors: &[f64], count: usize| -> Vec<f64> {
            (0..count).flat_map(|_| m.sample(&mut rng, Some(priors)).unwrap().0).collect()
        };
        let same = draw(&m.priors.clone(), 4000);
        let groups = vec![draw(&[1.0, 0.0, 0.0], 400), same.clone(), same, draw(&[0.2, 0.4, 0.4], 400)];
        let fit = fit_location_priors(&groups, (2, 2), &m, 500, 1e-14).unwrap();
        assert!(fit.priors.at(0, 0)[0] > 0.9);
        let a = fit.priors.at(0, 1).to_vec();
        let b = fit.priors.at(1, 0);
        for l in 0..3 {
            assert!((a[l] - b[l]).abs() < 1e-12);
            assert!((a[l] - m.priors[l]).abs() < 0.03);
        }
        for loc in 0..4 {
            let (i, j) = (loc / 2, loc % 2);
            assert!((fit.priors.at(i, j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for w in fit.log_likelihood[loc].windows(2) {
                assert!(w[1] >= w[0] - 1e-8);
            }
        }
    }

    #[test]
    fn empty_location_gets_uniform_priors() {
        let m = mixture_1d();
        let fit = fit_location_priors(&[vec![], vec![0.5, 1.0]], (1, 2), &m, 10, 1e-9).unwrap();
        assert_eq!(fit.priors.at(0, 0), &[0.5, 0.5]);
        assert!((fit.priors.at(0, 1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(fit_location_priors(&[vec![0.0]], (1, 2), &m, 10, 1e-9).is_err());
    }

    #[test]
    fn offsets_examples() {
        let n = 4;
        let d = 3;
        let m = GGMixture::new(
            vec![0.25; n],
            Tensor::zeros(&[n, d]).unwrap(),
            Tensor::filled(&[n, d], 1.0).unwrap(),
            vec![1.0; n],
        )
        .unwrap();
        let priors = LocationPriors {
            priors: Tensor::filled(&[2, 2, n], 0.25).unwrap(),
        };
        let b = location_offsets(&m, &priors).unwrap();
        let want = -(n as f64).ln() + d as f64 * 0.5f64.ln();
        assert!(b.data().iter().all(|v| (v - want).abs() < 1e-14));

        let mut skew = priors.clone();
        skew.priors.data_mut()[..n].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let b = location_offsets(&m, &skew).unwrap();
        assert_eq!(b.get(&[1, 0, 0]).unwrap(), PRIOR_FLOOR.ln() + d as f64 * 0.5f64.ln());
    }

    #[test]
    fn offsets_complete_the_log_joint_per_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (n, d) = (3, 4);
        let m = GGMixture::new(
            vec![0.3, 0.3, 0.4],
            Tensor::from_fn(&[n, d], |_| rng.gen_range(-1.0..1.0)).unwrap(),
            Tensor::from_fn(&[n, d], |_| rng.gen_range(0.3..1.5)).unwrap(),
            vec![2.0; n],
        )
        .unwrap();
        let local = vec![0.6, 0.1, 0.3];
        let priors = LocationPriors {
            priors: Tensor::new(vec![1, 1, n], local.clone()).unwrap(),
        };
        let b = location_offsets(&m, &priors).unwrap();
        let params = mixture_to_similarity_params(&m, Some(2.0)).unwrap();
        let mut at_location = m.clone();
        at_location.priors = local;
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for l in 0..n {
                let lhs = params.score(&x, l) + b.get(&[l, 0, 0]).unwrap();
                let rhs = ggm_log_joint(&x, &at_location, l).unwrap();
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let count = 100_000;
        let gauss: Vec<f64> = (0..count).map(|_| sample_gg(&mut rng, 1.0, 0.8, 2.0)).collect();
        let mean = gauss.iter().sum::<f64>() / count as f64;
        let var = gauss.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / count as f64;
        assert!((var / (0.8 * 0.8 / 2.0) - 1.0).abs() < 0.05);
        let laplace: Vec<f64> = (0..count).map(|_| sample_gg(&mut rng, -2.0, 1.3, 1.0)).collect();
        let mad = laplace.iter().map(|x| (x + 2.0).abs()).sum::<f64>() / count as f64;
        assert!((mad / 1.3 - 1.0).abs() < 0.05);
        let m = mixture_1d();
        for _ in 0..100 {
            assert_eq!(m.sample(&mut rng, Some(&[1.0, 0.0])).unwrap().1, 0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix.ggm");
        let m = mixture_1d();
        m.save(&path).unwrap();
        assert_eq!(GGMixture::load(&path).unwrap(), m);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(GGMixture::load(&path), Err(SimNetError::Format { .. })));
    }

    #[test]
    fn planted_mixture_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let truth = GGMixture::new(
            vec![0.3, 0.3, 0.4],
            Tensor::from_fn(&[3, 8], |_| rng.gen_range(-3.0..3.0)).unwrap(),
            Tensor::from_fn(&[3, 8], |_| rng.gen_range(0.4..1.0)).unwrap(),
            vec![1.0, 2.0, 2.0],
        )
        .unwrap();
        let rows: Vec<f64> = (0..10_000).flat_map(|_| truth.sample(&mut rng, None).unwrap().0).collect();
        let data = Tensor::new(vec![10_000, 8], rows).unwrap();
        let fit = fit_ggm(&data, 3, &GgmConfig { seed: 5, ..GgmConfig::default() }).unwrap();
        let mut best = f64::INFINITY;
        for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let err = (0..3)
                .flat_map(|l| {
                    let (a, b) = (truth.means.row(l), fit.mixture.means.row(perm[l]));
                    a.iter().zip(b).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
                })
                .fold(0.0, f64::max);
            best = best.min(err);
        }
        assert!(best < 0.1, "mean error {best}, shapes {:?}", fit.mixture.shapes);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    proptest! {
        #[test]
        fn normalizer_matches_direct_gamma(alpha in 0.01f64..10.0, beta in 0.3f64..4.0) {
            let direct = (beta / (2.0 * alpha * statrs::function::gamma::gamma(1.0 / beta))).ln();
            prop_assert!((log_normalizer(alpha, beta) - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
    }
}
