//! Property suites that compare every operator against an independent
//! route: limits and identities of MEX, finite differences, the kernel
//! forms of the networks, Gram spectra, EM behaviour and decision regions.
//!
//! Each suite reports observed errors next to the limits it was run with;
//! the limits come from [`Tolerances`].

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimNetError};
use crate::ggm::{fit_ggm, fit_location_priors, ggm_log_joint, mixture_to_similarity_params, GGMixture, GgmConfig};
use crate::kernel::{
    decision_region_raster, find_non_psd_witness, gram_report, mlp_kernel_form, mlp_kernel_predict, patch_kernel_big,
    patch_kernel_kv, Bounds, KernelSpec, Raster,
};
use crate::mex::{mex, mex_layer_backward, mex_layer_forward, BlockMap, MexLayerParams, MexMode, OffsetTable};
use crate::network::{realize_avgpool, realize_maxpool, realize_relu, MlpNet, NetSpec, ParamGroup, PatchLabelingNet, Trainable};
use crate::numdiff::{central_diff, rel_err};
use crate::similarity::{similarity_backward, similarity_forward, GradRequest, SimilarityForm, SimilarityParams};
use crate::tensor::{extract_patches, PatchGrid, Tensor};

pub const SUITES: [&str; 8] = ["mex", "grad", "kernel-mlp", "kernel-patch", "psd", "ggm", "convnet", "regions"];

/// Limits the suites are judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub mex_identity: f64,
    pub mex_mean_limit: f64,
    pub grad_p2: f64,
    pub grad_p1: f64,
    pub kink_margin: f64,
    pub kernel_score: f64,
    pub patch_relative: f64,
    pub gram_relative: f64,
    pub em_slack: f64,
    pub ggm_recovery: f64,
    pub ggm_identity: f64,
    pub location_prior: f64,
    pub soft_realization: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mex_identity: 1e-12,
            mex_mean_limit: 1e-6,
            grad_p2: 1e-5,
            grad_p1: 1e-4,
            kink_margin: 1e-3,
            kernel_score: 1e-9,
            patch_relative: 1e-9,
            gram_relative: 1e-10,
            em_slack: 1e-8,
            ggm_recovery: 0.1,
            ggm_identity: 1e-12,
            location_prior: 0.9,
            soft_realization: 1e-3,
        }
    }
}

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mex_identity,
            self.mex_mean_limit,
            self.grad_p2,
            self.grad_p1,
            self.kink_margin,
            self.kernel_score,
            self.patch_relative,
            self.gram_relative,
            self.em_slack,
            self.ggm_recovery,
            self.ggm_identity,
            self.location_prior,
            self.soft_realization,
        ];
        if all.iter().all(|t| *t > 0.0 && t.is_finite()) {
            Ok(())
        } else {
            Err(SimNetError::Config("every tolerance must be positive and finite".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub suites: Vec<String>,
    pub seed: u64,
    /// Order probed by the witness search of the `psd` suite.
    pub psd_p: f64,
    pub tolerances: Tolerances,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            suites: SUITES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            psd_p: 3.0,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// observed ≤ limit
    AtMost,
    /// observed < limit
    Below,
    /// observed ≥ limit
    AtLeast,
    /// observed > limit
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub relation: Relation,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, observed: f64, relation: Relation, limit: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => observed <= limit,
            Relation::Below => observed < limit,
            Relation::AtLeast => observed >= limit,
            Relation::Above => observed > limit,
        };
        Check {
            name: name.into(),
            observed,
            relation,
            limit,
            passed,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::AtMost => "<=",
            Relation::Below => "<",
            Relation::AtLeast => ">=",
            Relation::Above => ">",
        };
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: observed {:.3e} {op} {:.3e}", self.name, self.observed, self.limit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {} ({:.2} s)", self.suite, self.seconds)?;
        for c in &self.checks {
            writeln!(f, "  {c}")?;
        }
        Ok(())
    }
}

pub fn run_suite(name: &str, config: &VerifyConfig) -> Result<SuiteReport> {
    config.tolerances.validate()?;
    let start = Instant::now();
    let (seed, tol) = (config.seed, &config.tolerances);
    let checks = match name {
        "mex" => mex_suite(seed, tol)?,
        "grad" => grad_suite(seed, tol)?,
        "kernel-mlp" => kernel_mlp_suite(seed, tol)?,
        "kernel-patch" => kernel_patch_suite(seed, tol)?,
        "psd" => psd_suite(seed, config.psd_p, tol)?,
        "ggm" => ggm_suite(seed, tol)?,
        "convnet" => convnet_suite(seed, tol)?,
        "regions" => regions_suite()?,
        other => {
            return Err(SimNetError::Argument(format!(
                "unknown suite `{other}`, expected one of {}",
                SUITES.join(", ")
            )))
        }
    };
    Ok(SuiteReport {
        suite: name.into(),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).expect("positive extents")
}

/// Limits of MEX, its collapsing and translation identities and its
/// monotonicity in ξ, over 1000 random vectors of up to 16 values.
pub fn mex_suite(seed: u64, tol: &Tolerances) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = [-10.0, -1.0, -0.1, 0.0, 0.1, 1.0, 10.0];
    let (mut to_max, mut to_min, mut to_mean) = (f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64);
    let (mut collapse, mut translate, mut decrease) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let c = uniform(&mut rng, n, -5.0, 5.0);
        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = c.iter().sum::<f64>() / n as f64;
        // excess over the ln(n)/|xi| bound, which is approached when one
        // value dominates and is therefore met only up to rounding
        let bound = (n as f64).ln() / 100.0;
        to_max = to_max.max((mex(&c, 100.0)? - max).abs() - bound);
        to_min = to_min.max((mex(&c, -100.0)? - min).abs() - bound);
        to_mean = to_mean.max((mex(&c, 1e-9)? - mean).abs());

        let xi = rng.gen_range(-5.0..5.0);
        let t = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = c.iter().map(|v| v + t).collect();
        translate = translate.max((mex(&shifted, xi)? - mex(&c, xi)? - t).abs());

        // blocks of equal size: MEX of block MEXes equals the flat MEX
        let (rows, cols) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let m = uniform(&mut rng, rows * cols, -5.0, 5.0);
        let inner: Vec<f64> = m.chunks(cols).map(|r| mex(r, xi)).collect::<Result<_>>()?;
        collapse = collapse.max((mex(&inner, xi)? - mex(&m, xi)?).abs());

        let values: Vec<f64> = grid
            .iter()
            .map(|&x| if x == 0.0 { Ok(MexMode::Mean.eval(&c)) } else { mex(&c, x) })
            .collect::<Result<_>>()?;
        for w in values.windows(2) {
            decrease = decrease.max(w[0] - w[1]);
        }
    }
    Ok(vec![
        Check::new("xi=100 excess over ln(n)/100 from max", to_max, Relation::AtMost, tol.mex_identity),
        Check::new("xi=-100 excess over ln(n)/100 from min", to_min, Relation::AtMost, tol.mex_identity),
        Check::new("xi=1e-9 matches the mean", to_mean, Relation::AtMost, tol.mex_mean_limit),
        Check::new("collapsing identity", collapse, Relation::AtMost, tol.mex_identity),
        Check::new("translation identity", translate, Relation::AtMost, tol.mex_identity),
        Check::new("largest decrease along the xi grid", decrease, Relation::AtMost, tol.mex_identity),
        Check::new("runtime seconds", start.elapsed().as_secs_f64(), Relation::Below, 5.0),
    ])
}

/// Max relative error between `analytic` and five-point differences of
/// `f` around `x`.
fn fd_max_err(x: &mut [f64], analytic: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for c in 0..x.len() {
        let x0 = x[c];
        let mut failure = None;
        let fd = central_diff(
            |v| {
                x[c] = v;
                f(x).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            x0,
            h,
        );
        x[c] = x0;
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(rel_err(analytic[c], fd));
    }
    Ok(worst)
}

/// Random patches whose coordinates all stay `margin` away from every
/// template coordinate.
fn clear_patches(rng: &mut ChaCha8Rng, templates: &Tensor, margin: f64) -> PatchGrid {
    loop {
        let input = random_tensor(rng, &[4, 4, 2], -1.5, 1.5);
        let grid = extract_patches(&input, 2, 2, 1).expect("fits");
        let d = templates.shape()[1];
        let clear = grid.iter().all(|x| {
            (0..templates.shape()[0]).all(|l| (0..d).all(|k| (x[k] - templates.row(l)[k]).abs() > margin))
        });
        if clear {
            return grid;
        }
    }
}

fn similarity_grad_error(rng: &mut ChaCha8Rng, p: f64, weighted: bool, margin: f64, h: f64) -> Result<f64> {
    let (n, d) = (3, 8);
    let z = random_tensor(rng, &[n, d], -1.0, 1.0);
    let v = random_tensor(rng, &[n, d], -0.5, 0.5);
    let grid = clear_patches(rng, &z, margin);
    let upstream = random_tensor(rng, &[3, 3, n], -1.0, 1.0);
    let build = |z: &[f64], v: &[f64], p: f64| -> Result<SimilarityParams> {
        let z = Tensor::new(vec![n, d], z.to_vec())?;
        if weighted {
            SimilarityParams::weighted(SimilarityForm::Lp, z, Tensor::new(vec![n, d], v.to_vec())?, p)
        } else {
            SimilarityParams::unweighted(SimilarityForm::Lp, z, p)
        }
    };
    let objective = |params: &SimilarityParams| -> Result<f64> {
        let s = similarity_forward(&grid, params)?;
        Ok(s.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
    };
    let params = build(z.data(), v.data(), p)?;
    let g = similarity_backward(&grid, &params, &upstream, GradRequest::default())?;
    let mut zs = z.data().to_vec();
    let mut worst = fd_max_err(&mut zs, g.d_templates.data(), h, |z| objective(&build(z, v.data(), p)?))?;
    if let Some(dv) = &g.d_log_weights {
        let mut vs = v.data().to_vec();
        worst = worst.max(fd_max_err(&mut vs, dv.data(), h, |v| objective(&build(z.data(), v, p)?))?);
    }
    let mut ps = [p];
    worst = worst.max(fd_max_err(&mut ps, &[g.d_p], h, |p| objective(&build(z.data(), v.data(), p[0])?))?);
    Ok(worst)
}

fn mex_layer_grad_error(rng: &mut ChaCha8Rng, mode: MexMode) -> Result<f64> {
    let inputs = 10;
    let blocks: Vec<Vec<usize>> = (0..4)
        .map(|_| {
            let len = rng.gen_range(1..=5);
            (0..len).map(|_| rng.gen_range(0..inputs)).collect()
        })
        .collect();
    let map = BlockMap::new(blocks)?;
    let entries = map.num_entries();
    let x = random_tensor(rng, &[inputs], -2.0, 2.0);
    let offsets = uniform(rng, entries, -1.0, 1.0);
    let constants = uniform(rng, 4, -1.0, 1.0);
    let upstream = random_tensor(rng, &[4], -1.0, 1.0);
    let layer = |mode: MexMode, offsets: &[f64], constants: &[f64]| -> Result<MexLayerParams> {
        MexLayerParams::new(mode, map.clone(), vec![4])?
            .with_offsets(OffsetTable::dense(&map, offsets.to_vec())?)?
            .with_constants(constants.to_vec())
    };
    let objective = |input: &Tensor, params: &MexLayerParams| -> Result<f64> {
        let out = mex_layer_forward(input, params)?;
        Ok(out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
    };
    let params = layer(mode, &offsets, &constants)?;
    let g = mex_layer_backward(&x, &params, &upstream)?;
    let h = 1e-3;
    let mut xs = x.data().to_vec();
    let mut worst = fd_max_err(&mut xs, g.d_input.data(), h, |xv| {
        objective(&Tensor::new(vec![inputs], xv.to_vec())?, &params)
    })?;
    let mut os = offsets.clone();
    worst = worst.max(fd_max_err(&mut os, g.d_offsets.as_deref().unwrap_or(&[]), h, |o| {
        objective(&x, &layer(mode, o, &constants)?)
    })?);
    let mut cs = constants.clone();
    worst = worst.max(fd_max_err(&mut cs, g.d_constants.as_deref().unwrap_or(&[]), h, |c| {
        objective(&x, &layer(mode, &offsets, c)?)
    })?);
    if let Some(xi) = mode.xi() {
        let mut xis = [xi];
        worst = worst.max(fd_max_err(&mut xis, &[g.d_xi], h, |xi| {
            objective(&x, &layer(MexMode::Soft(xi[0]), &offsets, &constants)?)
        })?);
    }
    Ok(worst)
}

fn grad_net_spec(p: f64, xi2: MexMode) -> NetSpec {
    NetSpec {
        input: [8, 8, 1],
        patch: [3, 3],
        stride: 1,
        templates: 4,
        classes: 3,
        form: SimilarityForm::Lp,
        weighted: true,
        p,
        xi1: MexMode::Soft(0.7),
        xi2,
        pool_lattice: [2, 2],
        trainable: Trainable {
            templates: true,
            weights: true,
            order: true,
            offsets: true,
            xi1: true,
            xi2: true,
        },
    }
}

fn net_grad_error(rng: &mut ChaCha8Rng, p: f64, xi2: MexMode, margin: f64, h: f64) -> Result<f64> {
    let mut net = PatchLabelingNet::random(&grad_net_spec(p, xi2), rng.gen())?;
    if let Some(v) = net.group_mut(ParamGroup::LogWeights) {
        v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    net.offsets.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    let image = loop {
        let img = uniform(rng, 64, -1.5, 1.5);
        let grid = net.prepare(&img)?;
        let clear = grid.iter().all(|x| {
            (0..4).all(|l| x.iter().zip(net.similarity.template(l)).all(|(a, b)| (a - b).abs() > margin))
        });
        if clear {
            break img;
        }
    };
    let label = rng.gen_range(0..3);
    let (_, grads) = net.loss_and_backward(&image, label)?;
    let mut worst: f64 = 0.0;
    for group in ParamGroup::ALL {
        let Some(mut values) = net.group(group).map(|g| g.to_vec()) else {
            continue;
        };
        let analytic = grads.group(group).expect("every group has a gradient slot").to_vec();
        let mut probe = net.clone();
        worst = worst.max(fd_max_err(&mut values, &analytic, h, |v| {
            probe.group_mut(group).expect("present").copy_from_slice(v);
            Ok(probe.loss(&image, label)?.loss)
        })?);
    }
    Ok(worst)
}

/// Analytic gradients of the similarity layer, the MEX layer and the
/// full network against five-point central differences.
pub fn grad_suite(seed: u64, tol: &Tolerances) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = tol.kink_margin;
    let mut checks = Vec::new();
    for weighted in [false, true] {
        let tag = if weighted { "weighted" } else { "unweighted" };
        let mut e2 = 0.0f64;
        let mut e15 = 0.0f64;
        let mut e1 = 0.0f64;
        for _ in 0..3 {
            e2 = e2.max(similarity_grad_error(&mut rng, 2.0, weighted, 0.0, 1e-3)?);
            e15 = e15.max(similarity_grad_error(&mut rng, 1.5, weighted, margin, 2e-5)?);
            e1 = e1.max(similarity_grad_error(&mut rng, 1.0, weighted, margin, 1e-5)?);
        }
        checks.push(Check::new(format!("similarity p=2 {tag}"), e2, Relation::Below, tol.grad_p2));
        checks.push(Check::new(format!("similarity p=1.5 {tag}"), e15, Relation::Below, tol.grad_p2));
        checks.push(Check::new(format!("similarity p=1 {tag}"), e1, Relation::Below, tol.grad_p1));
    }
    for (name, mode) in [
        ("mex layer xi=0.7", MexMode::Soft(0.7)),
        ("mex layer xi=-1.3", MexMode::Soft(-1.3)),
        ("mex layer xi=1e-9", MexMode::Soft(1e-9)),
        ("mex layer mean limit", MexMode::Mean),
    ] {
        let mut e = 0.0f64;
        for _ in 0..3 {
            e = e.max(mex_layer_grad_error(&mut rng, mode)?);
        }
        checks.push(Check::new(name, e, Relation::Below, tol.grad_p2));
    }
    let mut e2 = 0.0f64;
    for xi2 in [MexMode::Soft(0.5), MexMode::Mean, MexMode::Soft(-0.8)] {
        e2 = e2.max(net_grad_error(&mut rng, 2.0, xi2, 0.0, 1e-3)?);
    }
    checks.push(Check::new("network p=2", e2, Relation::Below, tol.grad_p2));
    let mut e1 = 0.0f64;
    for xi2 in [MexMode::Soft(0.5), MexMode::Mean] {
        e1 = e1.max(net_grad_error(&mut rng, 1.0, xi2, margin, 1e-5)?);
    }
    checks.push(Check::new("network p=1", e1, Relation::Below, tol.grad_p1));
    checks.push(Check::new("runtime seconds", start.elapsed().as_secs_f64(), Relation::Below, 60.0));
    Ok(checks)
}

/// MEX-form MLP scores against their kernel form on 1000 random
/// instances for the exponential and generalized Gaussian kernels.
pub fn kernel_mlp_suite(seed: u64, tol: &Tolerances) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut agree) = (0.0f64, 0usize);
    let trials = 1000;
    for t in 0..trials {
        let (d, n, k) = (rng.gen_range(1..=8), rng.gen_range(1..=6), rng.gen_range(1..=5));
        let xi = rng.gen_range(0.1..2.0);
        let z = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let x = uniform(&mut rng, d, -1.0, 1.0);
        let (similarity, spec) = match t % 3 {
            0 => (SimilarityParams::unweighted(SimilarityForm::Linear, z, 1.0)?, KernelSpec::exponential(xi)?),
            1 => (SimilarityParams::unweighted(SimilarityForm::Lp, z, 1.0)?, KernelSpec::generalized_gaussian(xi, 1.0)?),
            _ => (SimilarityParams::unweighted(SimilarityForm::Lp, z, 2.0)?, KernelSpec::generalized_gaussian(xi, 2.0)?),
        };
        let mlp = MlpNet::new(similarity, b, MexMode::Soft(xi))?;
        let rows = mlp.offset_rows();
        let via_mex = mlp.scores(&x)?;
        let via_kernel = mlp_kernel_form(&x, &mlp.similarity.templates, &rows, &spec)?;
        for (a, b) in via_mex.iter().zip(&via_kernel) {
            worst = worst.max((a - b).abs());
        }
        agree += usize::from(mlp.predict(&x)? == mlp_kernel_predict(&x, &mlp.similarity.templates, &rows, &spec)?);
    }
    Ok(vec![
        Check::new("score difference", worst, Relation::Below, tol.kernel_score),
        Check::new("argmax agreement", agree as f64, Relation::AtLeast, trials as f64),
    ])
}

/// Random collapsible network: unweighted similarity and `ξ₁ = ξ₂`.
pub fn random_collapsible_net(rng: &mut ChaCha8Rng) -> Result<(PatchLabelingNet, f64)> {
    let side = rng.gen_range(4..=8);
    let depth = rng.gen_range(1..=2);
    let patch = rng.gen_range(2..=3);
    let xi = rng.gen_range(0.2..1.5);
    let (form, p) = match rng.gen_range(0..3) {
        0 => (SimilarityForm::Linear, 1.0),
        1 => (SimilarityForm::Lp, 1.0),
        _ => (SimilarityForm::Lp, 2.0),
    };
    let spec = NetSpec {
        input: [side, side, depth],
        patch: [patch, patch],
        stride: 1,
        templates: rng.gen_range(1..=5),
        classes: rng.gen_range(2..=4),
        form,
        weighted: false,
        p,
        xi1: MexMode::Soft(xi),
        xi2: MexMode::Soft(xi),
        pool_lattice: [rng.gen_range(1..=2), rng.gen_range(1..=2)],
        trainable: Trainable::default(),
    };
    let mut net = PatchLabelingNet::random(&spec, rng.gen())?;
    if form == SimilarityForm::Linear {
        net.similarity.templates = net.similarity.templates.scale(0.3);
    }
    net.offsets.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.0));
    Ok((net, xi))
}

/// The two-MEX network, the block-kernel patch SVM and its double-sum
/// form on 100 random networks with 100 inputs each.
pub fn kernel_patch_suite(seed: u64, tol: &Tolerances) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_big, mut worst_double, mut worst_collapse) = (0.0f64, 0.0f64, 0.0f64);
    let (mut agree, mut total) = (0usize, 0usize);
    for _ in 0..100 {
        let (net, xi) = random_collapsible_net(&mut rng)?;
        let svm = net.to_patch_svm()?;
        let scale = (net.geometry.num_patches() * net.num_templates()) as f64;
        let len = net.geometry.input_shape().iter().product();
        for _ in 0..100 {
            let image = uniform(&mut rng, len, -1.5, 1.5);
            let out = net.forward(&image)?;
            let collapsed = net.collapsed_scores(&image)?;
            let instance = net.patch_instance(&image)?;
            let big = svm.scores(&instance)?;
            let double = svm.double_sum_scores(&instance)?;
            for r in 0..out.len() {
                let from_net = scale * (xi * out[r]).exp();
                worst_big = worst_big.max(rel_err_plain(from_net, big[r]));
                worst_double = worst_double.max(rel_err_plain(from_net, double[r]));
                worst_collapse = worst_collapse.max(rel_err_plain(out[r], collapsed[r]));
            }
            let pred = net.predict(&image)?;
            let same = pred == svm.classify(&instance)? && pred == crate::kernel::argmax(&double);
            agree += usize::from(same);
            total += 1;
        }
    }
    Ok(vec![
        Check::new("network vs block-kernel score", worst_big, Relation::Below, tol.patch_relative),
        Check::new("network vs double-sum score", worst_double, Relation::Below, tol.patch_relative),
        Check::new("two layers vs collapsed MEX", worst_collapse, Relation::Below, tol.patch_relative),
        Check::new("identical predictions", agree as f64, Relation::AtLeast, total as f64),
    ])
}

fn rel_err_plain(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_slots(rng: &mut ChaCha8Rng, slots: usize, d: usize) -> Vec<Option<Vec<f64>>> {
    (0..slots)
        .map(|_| rng.gen_bool(0.7).then(|| uniform(rng, d, -1.0, 1.0)))
        .collect()
}

/// Gram spectra of the kernels and their null and block extensions, plus
/// the indefiniteness witness search.
pub fn psd_suite(seed: u64, witness_p: f64, tol: &Tolerances) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lin = KernelSpec::exponential(0.5)?;
    let l1 = KernelSpec::generalized_gaussian(1.0, 1.0)?;
    let l2 = KernelSpec::generalized_gaussian(1.0, 2.0)?;
    let mut worst = [f64::INFINITY; 5];
    for _ in 0..50 {
        let m = rng.gen_range(2..=20);
        let d = 3;
        let points: Vec<Vec<f64>> = (0..m).map(|_| uniform(&mut rng, d, -1.0, 1.0)).collect();
        for (i, spec) in [lin, l1, l2].iter().enumerate() {
            let r = gram_report(&points, |a, b| spec.eval(a, b))?;
            worst[i] = worst[i].min(r.min_eigenvalue / r.trace);
        }
        let nullable: Vec<Option<Vec<f64>>> = random_slots(&mut rng, m, d);
        let r = gram_report(&nullable, |a, b| patch_kernel_kv(a.as_deref(), b.as_deref(), &l2))?;
        if r.trace > 0.0 {
            worst[3] = worst[3].min(r.min_eigenvalue / r.trace);
        }
        let lists: Vec<Vec<Option<Vec<f64>>>> = (0..m).map(|_| random_slots(&mut rng, 4, d)).collect();
        let r = gram_report(&lists, |a, b| patch_kernel_big(a, b, &l1).expect("equal slot counts"))?;
        if r.trace > 0.0 {
            worst[4] = worst[4].min(r.min_eigenvalue / r.trace);
        }
    }
    let limit = -tol.gram_relative;
    let names = ["K_lin", "K_l1", "K_l2", "K_V", "block kernel"];
    let mut checks: Vec<Check> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| Check::new(format!("{n} min eigenvalue / trace"), w, Relation::AtLeast, limit))
        .collect();
    let found = find_non_psd_witness(witness_p, 1.0, 1000, seed)?.is_some();
    let control = find_non_psd_witness(2.0, 1.0, 1000, seed)?.is_some();
    checks.push(Check::new(format!("witness found for p={witness_p}"), f64::from(u8::from(found)), Relation::AtLeast, 1.0));
    checks.push(Check::new("witness found for p=2", f64::from(u8::from(control)), Relation::AtMost, 0.0));
    Ok(checks)
}

fn sample_rows(mixture: &GGMixture, priors: Option<&[f64]>, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut rows = Vec::with_capacity(count * mixture.dim());
    for _ in 0..count {
        rows.extend(mixture.sample(rng, priors)?.0);
    }
    Ok(rows)
}

/// EM monotonicity, planted recovery, the similarity-plus-offset identity
/// and location-prior recovery.
pub fn ggm_suite(seed: u64, tol: &Tolerances) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let two = GGMixture::new(
        vec![0.3, 0.7],
        Tensor::new(vec![2, 2], vec![-1.0, 0.5, 2.0, -0.5])?,
        Tensor::new(vec![2, 2], vec![0.5, 0.8, 1.5, 1.0])?,
        vec![1.0, 3.0],
    )?;
    let data = Tensor::new(vec![2000, 2], sample_rows(&two, None, 2000, &mut rng)?)?;
    let mut drop = f64::NEG_INFINITY;
    for run in 0..20u64 {
        let config = GgmConfig {
            seed: seed.wrapping_add(run),
            max_iter: 40,
            ..GgmConfig::default()
        };
        let fit = fit_ggm(&data, 2 + (run % 2) as usize, &config)?;
        for w in fit.log_likelihood.windows(2) {
            drop = drop.max(w[0] - w[1]);
        }
    }

    let truth = GGMixture::new(
        vec![0.3, 0.3, 0.4],
        random_tensor(&mut rng, &[3, 8], -3.0, 3.0),
        random_tensor(&mut rng, &[3, 8], 0.4, 1.0),
        vec![1.0, 2.0, 2.0],
    )?;
    let planted = Tensor::new(vec![10_000, 8], sample_rows(&truth, None, 10_000, &mut rng)?)?;
    let config = GgmConfig {
        seed,
        restarts: 4,
        ..GgmConfig::default()
    };
    let fit = fit_ggm(&planted, 3, &config)?;
    let mut recovery = f64::INFINITY;
    for perm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
        let err = (0..3)
            .flat_map(|l| {
                let (a, b) = (truth.means.row(l), fit.mixture.means.row(perm[l]));
                a.iter().zip(b).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        recovery = recovery.min(err);
    }

    // one shared order so the similarity layer can carry the whole density
    let shared = GGMixture::new(
        vec![0.2, 0.5, 0.3],
        random_tensor(&mut rng, &[3, 5], -2.0, 2.0),
        random_tensor(&mut rng, &[3, 5], 0.3, 2.0),
        vec![1.5; 3],
    )?;
    let params = mixture_to_similarity_params(&shared, None)?;
    let mut identity = 0.0f64;
    for _ in 0..200 {
        let x = uniform(&mut rng, 5, -4.0, 4.0);
        for l in 0..3 {
            let via_net = params.score(&x, l) + shared.log_constant(l);
            identity = identity.max((via_net - ggm_log_joint(&x, &shared, l)?).abs());
        }
    }

    let located = GGMixture::new(
        vec![0.5, 0.25, 0.25],
        Tensor::new(vec![3, 2], vec![-4.0, 0.0, 0.0, 4.0, 4.0, 0.0])?,
        Tensor::filled(&[3, 2], 0.7)?,
        vec![2.0; 3],
    )?;
    let groups = vec![
        sample_rows(&located, Some(&[1.0, 0.0, 0.0]), 400, &mut rng)?,
        sample_rows(&located, None, 400, &mut rng)?,
        sample_rows(&located, None, 400, &mut rng)?,
        sample_rows(&located, Some(&[0.2, 0.4, 0.4]), 400, &mut rng)?,
    ];
    let location = fit_location_priors(&groups, (2, 2), &located, 500, 1e-14)?;
    let lambda = location.priors.at(0, 0)[0];

    Ok(vec![
        Check::new("largest EM log-likelihood drop", drop, Relation::AtMost, tol.em_slack),
        Check::new("planted mean recovery (max abs error)", recovery, Relation::Below, tol.ggm_recovery),
        Check::new("similarity + offset vs log-joint", identity, Relation::AtMost, tol.ggm_identity),
        Check::new("planted location prior", lambda, Relation::Above, tol.location_prior),
        Check::new("runtime seconds", start.elapsed().as_secs_f64(), Relation::Below, 120.0),
    ])
}

/// ReLU, max pooling and average pooling as MEX layers, exact in the hard
/// modes and close for large (or, for the mean, small) finite ξ.
pub fn convnet_suite(seed: u64, tol: &Tolerances) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hard_mismatch, mut soft) = (0usize, 0.0f64);
    for _ in 0..50 {
        let (h, w, c) = (rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(1..=3));
        let x = random_tensor(&mut rng, &[h, w, c], -3.0, 3.0);
        let window = (rng.gen_range(1..=h.min(3)), rng.gen_range(1..=w.min(3)));
        let stride = rng.gen_range(1..=2);

        let relu = realize_relu(x.shape())?;
        let exact: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        let got = mex_layer_forward(&x, &relu)?;
        hard_mismatch += got.data().iter().zip(&exact).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        let got = mex_layer_forward(&x, &relu.clone().with_mode(MexMode::Soft(1e4)))?;
        soft = soft.max(got.max_abs_diff(&Tensor::new(x.shape().to_vec(), exact)?)?);

        let maxpool = realize_maxpool([h, w, c], window, stride)?;
        let avgpool = realize_avgpool([h, w, c], window, stride)?;
        let (oh, ow) = ((h - window.0) / stride + 1, (w - window.1) / stride + 1);
        let mut want_max = Vec::new();
        let mut want_mean = Vec::new();
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let vals: Vec<f64> = (0..window.0)
                        .flat_map(|a| (0..window.1).map(move |b| (a, b)))
                        .map(|(a, b)| x.get(&[i * stride + a, j * stride + b, ch]).expect("inside"))
                        .collect();
                    want_max.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                    want_mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
        }
        let got = mex_layer_forward(&x, &maxpool)?;
        hard_mismatch += got.data().iter().zip(&want_max).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        let got = mex_layer_forward(&x, &avgpool)?;
        hard_mismatch += got.data().iter().zip(&want_mean).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        let got = mex_layer_forward(&x, &maxpool.with_mode(MexMode::Soft(1e4)))?;
        soft = soft.max(got.data().iter().zip(&want_max).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let got = mex_layer_forward(&x, &avgpool.with_mode(MexMode::Soft(1e-4)))?;
        soft = soft.max(got.data().iter().zip(&want_mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(vec![
        Check::new("hard-mode mismatches (bitwise)", hard_mismatch as f64, Relation::AtMost, 0.0),
        Check::new("finite-xi deviation", soft, Relation::Below, tol.soft_realization),
    ])
}

/// Raster window of the two-template demo.
pub const REGION_BOUNDS: Bounds = Bounds {
    x_min: -4.0,
    x_max: 4.0,
    y_min: -4.0,
    y_max: 4.0,
};

/// Two weighted `l_1` templates at `(−1, 0)` and `(1, 0)`; template 0 has
/// weight `heavy` on both coordinates, template 1 unit weights. Each
/// template is its own class.
pub fn two_template_raster(heavy: f64, resolution: (usize, usize)) -> Result<Raster> {
    if !(heavy > 0.0 && heavy.is_finite()) {
        return Err(SimNetError::Argument(format!("template weight must be positive, got {heavy}")));
    }
    let z = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 1.0, 0.0])?;
    let v = Tensor::new(vec![2, 2], vec![heavy.ln(), heavy.ln(), 0.0, 0.0])?;
    let params = SimilarityParams::weighted(SimilarityForm::Lp, z, v, 1.0)?;
    decision_region_raster(|p| params.scores(&p), REGION_BOUNDS, resolution)
}

/// A heavily weighted template owns a bounded region; with equal weights
/// both cells reach the raster boundary.
pub fn regions_suite() -> Result<Vec<Check>> {
    let heavy = two_template_raster(3.0, (161, 161))?;
    let control = two_template_raster(1.0, (161, 161))?;
    let b = |r: &Raster, l| f64::from(u8::from(r.touches_boundary(l)));
    Ok(vec![
        Check::new("heavy template region touches the boundary", b(&heavy, 0), Relation::AtMost, 0.0),
        Check::new("heavy template region is non-empty", heavy.count(0) as f64, Relation::Above, 0.0),
        Check::new("control cell 0 touches the boundary", b(&control, 0), Relation::AtLeast, 1.0),
        Check::new("control cell 1 touches the boundary", b(&control, 1), Relation::AtLeast, 1.0),
    ])
}
