//! The patch-labeling SimNet: similarity layer, a MEX over templates with
//! region-shared offsets (one output per class and patch), then a MEX
//! pooling over patches. Also the ConvNet special cases expressed as MEX
//! layer configurations, and a one-hidden-layer MLP used by the kernel
//! equivalence checks.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::WhiteningTransform;
use crate::error::{Result, SimNetError};
use crate::ggm::{location_offsets, mixture_to_similarity_params, GGMixture, LocationPriors};
use crate::kernel::{argmax, KernelSpec, PatchSvmModel};
use crate::mex::{mex, mex_layer_backward, mex_layer_forward, BlockMap, MexLayerParams, MexMode, OffsetTable};
use crate::similarity::{similarity_backward, similarity_forward, GradRequest, SimilarityForm, SimilarityParams};
use crate::tensor::{extract_with_geometry, PatchGeometry, PatchGrid, Tensor};

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Trainable {
    pub templates: bool,
    pub weights: bool,
    pub order: bool,
    pub offsets: bool,
    pub xi1: bool,
    pub xi2: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Trainable {
            templates: true,
            weights: true,
            order: false,
            offsets: true,
            xi1: false,
            xi2: false,
        }
    }
}

/// Parameter groups in optimizer order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Templates,
    LogWeights,
    Order,
    Offsets,
    Xi1,
    Xi2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Templates,
        ParamGroup::LogWeights,
        ParamGroup::Order,
        ParamGroup::Offsets,
        ParamGroup::Xi1,
        ParamGroup::Xi2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Templates => "templates",
            ParamGroup::LogWeights => "log_weights",
            ParamGroup::Order => "order",
            ParamGroup::Offsets => "offsets",
            ParamGroup::Xi1 => "xi1",
            ParamGroup::Xi2 => "xi2",
        }
    }
}

/// Architecture and initialization-independent settings of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    /// `[H, W, D]`
    pub input: [usize; 3],
    /// `[h, w]`
    pub patch: [usize; 2],
    pub stride: usize,
    pub templates: usize,
    pub classes: usize,
    pub form: SimilarityForm,
    pub weighted: bool,
    pub p: f64,
    pub xi1: MexMode,
    pub xi2: MexMode,
    /// Offset-sharing regions per axis.
    pub pool_lattice: [usize; 2],
    pub trainable: Trainable,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            input: [32, 32, 3],
            patch: [6, 6],
            stride: 1,
            templates: 50,
            classes: 10,
            form: SimilarityForm::Lp,
            weighted: true,
            p: 2.0,
            xi1: MexMode::Soft(1.0),
            xi2: MexMode::Mean,
            pool_lattice: [2, 2],
            trainable: Trainable::default(),
        }
    }
}

impl NetSpec {
    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::new(self.input, self.patch[0], self.patch[1], self.stride)
    }
}

/// Row `i` of a grid with `cells` rows belongs to region `⌊i·regions/cells⌋`.
/// For two regions the boundary sits at `ceil(cells/2)`.
fn region_of(i: usize, cells: usize, regions: usize) -> usize {
    i * regions / cells
}

/// Slot → pool index for a `P_h × P_w` grid on an `L_h × L_w` lattice.
pub fn pool_map(grid: (usize, usize), lattice: (usize, usize)) -> Vec<usize> {
    let (ph, pw) = grid;
    let (lh, lw) = lattice;
    (0..ph)
        .flat_map(|i| (0..pw).map(move |j| region_of(i, ph, lh) * lw + region_of(j, pw, lw)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Wiring {
    pool_map: Vec<usize>,
    layer1: Arc<BlockMap>,
    layer1_slots: Arc<Vec<usize>>,
    layer2: Arc<BlockMap>,
}

impl Wiring {
    fn build(geometry: &PatchGeometry, n: usize, k: usize, lattice: (usize, usize)) -> Result<Self> {
        let p_count = geometry.num_patches();
        let pools = pool_map((geometry.grid_h(), geometry.grid_w()), lattice);
        let l = lattice.0 * lattice.1;
        let mut blocks1 = Vec::with_capacity(k * p_count);
        let mut slots = Vec::with_capacity(k * p_count * n);
        for r in 0..k {
            for (p, &q) in pools.iter().enumerate() {
                blocks1.push((0..n).map(|t| p * n + t).collect());
                slots.extend((0..n).map(|t| (r * n + t) * l + q));
            }
        }
        let blocks2 = (0..k).map(|r| (r * p_count..(r + 1) * p_count).collect()).collect();
        Ok(Wiring {
            pool_map: pools,
            layer1: Arc::new(BlockMap::new(blocks1)?),
            layer1_slots: Arc::new(slots),
            layer2: Arc::new(BlockMap::new(blocks2)?),
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub patches: PatchGrid,
    /// `[P_h, P_w, n]`
    pub similarity: Tensor,
    /// `[k, P]`
    pub hidden: Tensor,
    /// `[k]`
    pub scores: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// Softmax cross-entropy of `scores` against `label`.
pub fn softmax_loss(scores: &[f64], label: usize) -> Result<LossReport> {
    if label >= scores.len() {
        return Err(SimNetError::Argument(format!("label {label} outside {} classes", scores.len())));
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let lse = top + total.ln();
    Ok(LossReport {
        loss: (lse - scores[label]).max(0.0),
        scores: scores.to_vec(),
        probabilities: exps.iter().map(|e| e / total).collect(),
        predicted: argmax(scores),
    })
}

/// Gradients of the loss, shaped like the corresponding parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub templates: Tensor,
    pub log_weights: Option<Tensor>,
    pub p: f64,
    pub offsets: Tensor,
    pub xi1: f64,
    pub xi2: f64,
}

impl NetGrads {
    pub fn zeros_like(net: &PatchLabelingNet) -> Self {
        let zero = |t: &Tensor| Tensor::zeros(t.shape()).expect("shape of an existing tensor");
        NetGrads {
            templates: zero(&net.similarity.templates),
            log_weights: net.similarity.log_weights.as_ref().map(zero),
            p: 0.0,
            offsets: zero(&net.offsets),
            xi1: 0.0,
            xi2: 0.0,
        }
    }

    /// Elementwise `self += other`, in a fixed coordinate order.
    pub fn accumulate(&mut self, other: &NetGrads) {
        let add = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(self.templates.data_mut(), other.templates.data());
        if let (Some(a), Some(b)) = (self.log_weights.as_mut(), other.log_weights.as_ref()) {
            add(a.data_mut(), b.data());
        }
        add(self.offsets.data_mut(), other.offsets.data());
        self.p += other.p;
        self.xi1 += other.xi1;
        self.xi2 += other.xi2;
    }

    pub fn scale(&mut self, factor: f64) {
        for g in ParamGroup::ALL {
            if let Some(s) = self.group_mut(g) {
                s.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }

    pub fn group(&self, group: ParamGroup) -> Option<&[f64]> {
        match group {
            ParamGroup::Templates => Some(self.templates.data()),
            ParamGroup::LogWeights => self.log_weights.as_ref().map(|t| t.data()),
            ParamGroup::Order => Some(std::slice::from_ref(&self.p)),
            ParamGroup::Offsets => Some(self.offsets.data()),
            ParamGroup::Xi1 => Some(std::slice::from_ref(&self.xi1)),
            ParamGroup::Xi2 => Some(std::slice::from_ref(&self.xi2)),
        }
    }

    pub fn group_mut(&mut self, group: ParamGroup) -> Option<&mut [f64]> {
        match group {
            ParamGroup::Templates => Some(self.templates.data_mut()),
            ParamGroup::LogWeights => self.log_weights.as_mut().map(|t| t.data_mut()),
            ParamGroup::Order => Some(std::slice::from_mut(&mut self.p)),
            ParamGroup::Offsets => Some(self.offsets.data_mut()),
            ParamGroup::Xi1 => Some(std::slice::from_mut(&mut self.xi1)),
            ParamGroup::Xi2 => Some(std::slice::from_mut(&mut self.xi2)),
        }
    }
}

/// `out(r) = MEX_ξ₂ over (i,j) of MEX_ξ₁ over l of (u_lᵀφ(x_ij, z_l) + b[r, l, q(i,j)])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLabelingNet {
    pub geometry: PatchGeometry,
    pub similarity: SimilarityParams,
    /// `[k, n, L_h, L_w]`, shared by every patch of a pool region.
    pub offsets: Tensor,
    pub xi1: MexMode,
    pub xi2: MexMode,
    /// Applied to every patch before the similarity layer.
    pub whitening: Option<WhiteningTransform>,
    pub trainable: Trainable,
    wiring: Wiring,
}

impl PatchLabelingNet {
    pub fn new(
        geometry: PatchGeometry,
        similarity: SimilarityParams,
        offsets: Tensor,
        xi1: MexMode,
        xi2: MexMode,
    ) -> Result<Self> {
        similarity.validate()?;
        if similarity.dim() != geometry.patch_dim() {
            return Err(SimNetError::Shape(format!(
                "templates of dimension {} for {}-dimensional patches",
                similarity.dim(),
                geometry.patch_dim()
            )));
        }
        let n = similarity.num_templates();
        let s = offsets.shape();
        if offsets.rank() != 4 || s[1] != n {
            return Err(SimNetError::Shape(format!("offsets must be [k, {n}, L_h, L_w], got {s:?}")));
        }
        let (k, lattice) = (s[0], (s[2], s[3]));
        if lattice.0 > geometry.grid_h() || lattice.1 > geometry.grid_w() {
            return Err(SimNetError::Shape(format!(
                "pool lattice {lattice:?} is finer than the {}×{} patch grid",
                geometry.grid_h(),
                geometry.grid_w()
            )));
        }
        for mode in [xi1, xi2] {
            if let MexMode::Soft(xi) = mode {
                if !xi.is_finite() {
                    return Err(SimNetError::Validation(format!("non-finite MEX parameter {xi}")));
                }
            }
        }
        let wiring = Wiring::build(&geometry, n, k, lattice)?;
        Ok(PatchLabelingNet {
            geometry,
            similarity,
            offsets,
            xi1,
            xi2,
            whitening: None,
            trainable: Trainable::default(),
            wiring,
        })
    }

    pub fn with_whitening(mut self, whitening: WhiteningTransform) -> Result<Self> {
        if whitening.dim() != self.geometry.patch_dim() {
            return Err(SimNetError::Shape(format!(
                "whitening of dimension {} for {}-dimensional patches",
                whitening.dim(),
                self.geometry.patch_dim()
            )));
        }
        self.whitening = Some(whitening);
        Ok(self)
    }

    pub fn with_trainable(mut self, trainable: Trainable) -> Self {
        self.trainable = trainable;
        self
    }

    /// Templates `N(0, 1)`, log-weights and offsets zero.
    pub fn random(spec: &NetSpec, seed: u64) -> Result<Self> {
        let geometry = spec.geometry()?;
        let (n, d) = (spec.templates, geometry.patch_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::from_fn(&[n, d], |_| StandardNormal.sample(&mut rng))?;
        let similarity = if spec.weighted {
            SimilarityParams::weighted(spec.form, z, Tensor::zeros(&[n, d])?, spec.p)?
        } else {
            SimilarityParams::unweighted(spec.form, z, spec.p)?
        };
        let offsets = Tensor::zeros(&[spec.classes, n, spec.pool_lattice[0], spec.pool_lattice[1]])?;
        Ok(PatchLabelingNet::new(geometry, similarity, offsets, spec.xi1, spec.xi2)?.with_trainable(spec.trainable))
    }

    /// Templates and weights from a mixture; every class starts from the
    /// same offsets `ln λ_{l,q} + c_l` (or `ln λ_l + c_l` without location
    /// priors). The similarity order is `spec.p`.
    pub fn from_mixture(spec: &NetSpec, mixture: &GGMixture, priors: Option<&LocationPriors>) -> Result<Self> {
        let geometry = spec.geometry()?;
        let mut similarity = mixture_to_similarity_params(mixture, Some(spec.p))?;
        if !spec.weighted {
            similarity.log_weights = None;
        }
        let [lh, lw] = spec.pool_lattice;
        let n = mixture.num_components();
        let uniform;
        let priors = match priors {
            Some(p) => p,
            None => {
                let flat: Vec<f64> = (0..lh * lw).flat_map(|_| mixture.priors.iter().copied()).collect();
                uniform = LocationPriors {
                    priors: Tensor::new(vec![lh, lw, n], flat)?,
                };
                &uniform
            }
        };
        if priors.lattice() != (lh, lw) {
            return Err(SimNetError::Shape(format!(
                "location priors on a {:?} lattice, network uses {lh}×{lw}",
                priors.lattice()
            )));
        }
        // [n, L_h, L_w], repeated for every class
        let per_class = location_offsets(mixture, priors)?;
        let mut data = Vec::with_capacity(spec.classes * per_class.len());
        for _ in 0..spec.classes {
            data.extend_from_slice(per_class.data());
        }
        let offsets = Tensor::new(vec![spec.classes, n, lh, lw], data)?;
        Ok(PatchLabelingNet::new(geometry, similarity, offsets, spec.xi1, spec.xi2)?.with_trainable(spec.trainable))
    }

    pub fn num_classes(&self) -> usize {
        self.offsets.shape()[0]
    }

    pub fn num_templates(&self) -> usize {
        self.similarity.num_templates()
    }

    pub fn pool_lattice(&self) -> (usize, usize) {
        (self.offsets.shape()[2], self.offsets.shape()[3])
    }

    /// Slot → pool index, slots in row-major patch order.
    pub fn pool_map(&self) -> &[usize] {
        &self.wiring.pool_map
    }

    fn check_params(&self) -> Result<()> {
        let n = self.num_templates();
        let lattice = self.pool_lattice();
        let expected = [self.num_classes(), n, lattice.0, lattice.1];
        if self.offsets.shape() != expected || self.wiring.layer1_slots.len() != expected[0] * self.geometry.num_patches() * n {
            return Err(SimNetError::Shape(format!(
                "offsets {:?} no longer match the network structure",
                self.offsets.shape()
            )));
        }
        if !(self.similarity.p > 0.0 && self.similarity.p.is_finite()) {
            return Err(SimNetError::Validation(format!("similarity order {} must be positive", self.similarity.p)));
        }
        Ok(())
    }

    /// Extracts (and whitens) the patches of one `[H, W, D]` image.
    pub fn prepare(&self, image: &[f64]) -> Result<PatchGrid> {
        let [h, w, d] = self.geometry.input_shape();
        if image.len() != h * w * d {
            return Err(SimNetError::Shape(format!(
                "image has {} values, network expects {h}×{w}×{d}",
                image.len()
            )));
        }
        let mut grid = extract_with_geometry(image, &self.geometry)?;
        if let Some(t) = &self.whitening {
            t.apply_rows(grid.patches.data_mut());
        }
        Ok(grid)
    }

    /// The per-patch instance the patch SVM sees: prepared patches in
    /// row-major order.
    pub fn patch_instance(&self, image: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.prepare(image)?.iter().map(|x| x.to_vec()).collect())
    }

    fn layer1(&self) -> Result<MexLayerParams> {
        Ok(MexLayerParams {
            mode: self.xi1,
            blocks: self.wiring.layer1.clone(),
            offsets: Some(OffsetTable::shared(self.offsets.data().to_vec(), self.wiring.layer1_slots.clone())?),
            constants: None,
            out_shape: vec![self.num_classes(), self.geometry.num_patches()],
        })
    }

    fn layer2(&self) -> MexLayerParams {
        MexLayerParams {
            mode: self.xi2,
            blocks: self.wiring.layer2.clone(),
            offsets: None,
            constants: None,
            out_shape: vec![self.num_classes()],
        }
    }

    pub fn forward_patches(&self, patches: PatchGrid) -> Result<ForwardTrace> {
        self.check_params()?;
        let sim = similarity_forward(&patches, &self.similarity)?;
        let hidden = mex_layer_forward(&sim, &self.layer1()?)?;
        let scores = mex_layer_forward(&hidden, &self.layer2())?;
        Ok(ForwardTrace {
            patches,
            similarity: sim,
            hidden,
            scores,
        })
    }

    pub fn forward_trace(&self, image: &[f64]) -> Result<ForwardTrace> {
        self.forward_patches(self.prepare(image)?)
    }

    /// Class scores `out(r)`.
    pub fn forward(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(image)?.scores.into_data())
    }

    /// `argmax_r out(r)`, lowest index on ties.
    pub fn predict(&self, image: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }

    pub fn loss(&self, image: &[f64], label: usize) -> Result<LossReport> {
        softmax_loss(&self.forward(image)?, label)
    }

    pub fn loss_and_backward(&self, image: &[f64], label: usize) -> Result<(LossReport, NetGrads)> {
        if label >= self.num_classes() {
            return Err(SimNetError::Argument(format!("label {label} outside {} classes", self.num_classes())));
        }
        let trace = self.forward_trace(image)?;
        let report = softmax_loss(trace.scores.data(), label)?;
        let mut d_out = report.probabilities.clone();
        d_out[label] -= 1.0;
        let d_out = Tensor::new(vec![self.num_classes()], d_out)?;

        let layer2 = self.layer2();
        let g2 = mex_layer_backward(&trace.hidden, &layer2, &d_out)?;
        let layer1 = self.layer1()?;
        let g1 = mex_layer_backward(&trace.similarity, &layer1, &g2.d_input)?;
        let t = self.trainable;
        let request = GradRequest {
            order: t.order,
            patches: false,
        };
        let gs = similarity_backward(&trace.patches, &self.similarity, &g1.d_input, request)?;

        let mut grads = NetGrads::zeros_like(self);
        if t.templates {
            grads.templates = gs.d_templates;
        }
        if t.weights {
            grads.log_weights = gs.d_log_weights.or(grads.log_weights);
        }
        if t.order {
            grads.p = gs.d_p;
        }
        if t.offsets {
            grads.offsets = Tensor::new(self.offsets.shape().to_vec(), g1.d_offsets.expect("layer 1 has offsets"))?;
        }
        if t.xi1 && matches!(self.xi1, MexMode::Soft(_)) {
            grads.xi1 = g1.d_xi;
        }
        if t.xi2 && matches!(self.xi2, MexMode::Soft(_)) {
            grads.xi2 = g2.d_xi;
        }
        Ok((report, grads))
    }

    /// Whether a group is both present and trainable.
    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        let t = self.trainable;
        match group {
            ParamGroup::Templates => t.templates,
            ParamGroup::LogWeights => t.weights && self.similarity.is_weighted(),
            ParamGroup::Order => t.order,
            ParamGroup::Offsets => t.offsets,
            ParamGroup::Xi1 => t.xi1 && matches!(self.xi1, MexMode::Soft(_)),
            ParamGroup::Xi2 => t.xi2 && matches!(self.xi2, MexMode::Soft(_)),
        }
    }

    pub fn group(&self, group: ParamGroup) -> Option<&[f64]> {
        match group {
            ParamGroup::Templates => Some(self.similarity.templates.data()),
            ParamGroup::LogWeights => self.similarity.log_weights.as_ref().map(|t| t.data()),
            ParamGroup::Order => Some(std::slice::from_ref(&self.similarity.p)),
            ParamGroup::Offsets => Some(self.offsets.data()),
            ParamGroup::Xi1 => match &self.xi1 {
                MexMode::Soft(xi) => Some(std::slice::from_ref(xi)),
                _ => None,
            },
            ParamGroup::Xi2 => match &self.xi2 {
                MexMode::Soft(xi) => Some(std::slice::from_ref(xi)),
                _ => None,
            },
        }
    }

    /// Raw parameter storage; the shape of every group is fixed.
    pub fn group_mut(&mut self, group: ParamGroup) -> Option<&mut [f64]> {
        match group {
            ParamGroup::Templates => Some(self.similarity.templates.data_mut()),
            ParamGroup::LogWeights => self.similarity.log_weights.as_mut().map(|t| t.data_mut()),
            ParamGroup::Order => Some(std::slice::from_mut(&mut self.similarity.p)),
            ParamGroup::Offsets => Some(self.offsets.data_mut()),
            ParamGroup::Xi1 => match &mut self.xi1 {
                MexMode::Soft(xi) => Some(std::slice::from_mut(xi)),
                _ => None,
            },
            ParamGroup::Xi2 => match &mut self.xi2 {
                MexMode::Soft(xi) => Some(std::slice::from_mut(xi)),
                _ => None,
            },
        }
    }

    /// Shared `ξ` when both MEX layers use the same finite parameter.
    fn common_xi(&self) -> Result<f64> {
        match (self.xi1, self.xi2) {
            (MexMode::Soft(a), MexMode::Soft(b)) if a == b => Ok(a),
            _ => Err(SimNetError::Unsupported(format!(
                "collapsing needs equal finite MEX parameters, got {:?} and {:?}",
                self.xi1, self.xi2
            ))),
        }
    }

    /// Both MEX layers folded into one: `MEX_ξ` over all `(i,j,l)` of
    /// `u_lᵀφ(x_ij, z_l) + b[r, l, q(i,j)]`. Requires `ξ₁ = ξ₂`.
    pub fn collapsed_scores(&self, image: &[f64]) -> Result<Vec<f64>> {
        let xi = self.common_xi()?;
        let patches = self.prepare(image)?;
        let sim = similarity_forward(&patches, &self.similarity)?;
        let n = self.num_templates();
        let l_count = self.pool_lattice().0 * self.pool_lattice().1;
        (0..self.num_classes())
            .map(|r| {
                let mut values = Vec::with_capacity(sim.len());
                for (p, &q) in self.wiring.pool_map.iter().enumerate() {
                    for l in 0..n {
                        values.push(sim.data()[p * n + l] + self.offsets.data()[(r * n + l) * l_count + q]);
                    }
                }
                mex(&values, xi)
            })
            .collect()
    }

    /// The equivalent reduced patch SVM, `α_rlq = exp(ξ·b[r, l, q])`, whose
    /// score `S_r` relates to the network by `out(r) = ln(S_r/(P·n))/ξ`.
    /// Needs unweighted similarity, `ξ₁ = ξ₂ = ξ > 0` and a kernel-valued
    /// mapping.
    pub fn to_patch_svm(&self) -> Result<PatchSvmModel> {
        let xi = self.common_xi()?;
        let kernel = KernelSpec::for_similarity(&self.similarity, xi)?;
        let n = self.num_templates();
        let (lh, lw) = self.pool_lattice();
        let coefficients = (0..self.num_classes())
            .map(|r| {
                (0..n)
                    .map(|l| {
                        (0..lh * lw)
                            .map(|q| (xi * self.offsets.data()[(r * n + l) * lh * lw + q]).exp())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        PatchSvmModel::new(
            self.similarity.templates.clone(),
            coefficients,
            kernel,
            self.wiring.pool_map.clone(),
            lh * lw,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (lh, lw) = self.pool_lattice();
        let mut blobs: Vec<&[f64]> = vec![self.similarity.templates.data()];
        let mut names = vec!["templates".to_string()];
        if let Some(v) = &self.similarity.log_weights {
            blobs.push(v.data());
            names.push("log_weights".into());
        }
        blobs.push(self.offsets.data());
        names.push("offsets".into());
        if let Some(t) = &self.whitening {
            blobs.push(&t.mean);
            blobs.push(t.matrix.data());
            names.push("whitening_mean".into());
            names.push("whitening_matrix".into());
        }
        let manifest = ModelManifest {
            kind: MODEL_KIND.into(),
            geometry: self.geometry.clone(),
            n: self.num_templates(),
            k: self.num_classes(),
            d: self.geometry.patch_dim(),
            form: self.similarity.form,
            weighted: self.similarity.is_weighted(),
            p: self.similarity.p,
            xi1: self.xi1,
            xi2: self.xi2,
            pool_lattice: [lh, lw],
            trainable: self.trainable,
            whitening_epsilon: self.whitening.as_ref().map(|t| t.epsilon),
            blobs: names,
        };
        checkpoint::write(path.as_ref(), &manifest, &blobs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (m, mut blobs): (ModelManifest, _) = checkpoint::read(path)?;
        if m.kind != MODEL_KIND {
            return Err(SimNetError::format(path, format!("expected a {MODEL_KIND} file, found {}", m.kind)));
        }
        if m.d != m.geometry.patch_dim() {
            return Err(SimNetError::format(path, format!("template dimension {} disagrees with the geometry", m.d)));
        }
        let bad = |e: SimNetError| SimNetError::format(path, e.to_string());
        let [lh, lw] = m.pool_lattice;
        let z = Tensor::new(vec![m.n, m.d], blobs.blob("templates", m.n * m.d)?).map_err(bad)?;
        let similarity = if m.weighted {
            let v = Tensor::new(vec![m.n, m.d], blobs.blob("log_weights", m.n * m.d)?).map_err(bad)?;
            SimilarityParams::weighted(m.form, z, v, m.p)
        } else {
            SimilarityParams::unweighted(m.form, z, m.p)
        }
        .map_err(bad)?;
        let offsets = Tensor::new(vec![m.k, m.n, lh, lw], blobs.blob("offsets", m.k * m.n * lh * lw)?).map_err(bad)?;
        let whitening = match m.whitening_epsilon {
            Some(epsilon) => {
                let mean = blobs.blob("whitening_mean", m.d)?;
                let matrix = Tensor::new(vec![m.d, m.d], blobs.blob("whitening_matrix", m.d * m.d)?).map_err(bad)?;
                Some(WhiteningTransform { mean, matrix, epsilon })
            }
            None => None,
        };
        blobs.finish()?;
        let mut net = PatchLabelingNet::new(m.geometry, similarity, offsets, m.xi1, m.xi2)
            .map_err(bad)?
            .with_trainable(m.trainable);
        if let Some(t) = whitening {
            net = net.with_whitening(t).map_err(bad)?;
        }
        Ok(net)
    }
}

const MODEL_KIND: &str = "simnet_model";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    kind: String,
    geometry: PatchGeometry,
    n: usize,
    k: usize,
    d: usize,
    form: SimilarityForm,
    weighted: bool,
    p: f64,
    xi1: MexMode,
    xi2: MexMode,
    pool_lattice: [usize; 2],
    trainable: Trainable,
    whitening_epsilon: Option<f64>,
    /// Blob order; every blob is `f64` little-endian.
    blobs: Vec<String>,
}

/// One hidden similarity layer and a MEX output layer over a single
/// input vector: `h_r = MEX{ s_l(x) + b_rl }`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub similarity: SimilarityParams,
    /// `[k, n]`
    pub offsets: Tensor,
    pub mode: MexMode,
}

impl MlpNet {
    pub fn new(similarity: SimilarityParams, offsets: Tensor, mode: MexMode) -> Result<Self> {
        similarity.validate()?;
        if offsets.rank() != 2 || offsets.shape()[1] != similarity.num_templates() {
            return Err(SimNetError::Shape(format!(
                "offsets must be [k, {}], got {:?}",
                similarity.num_templates(),
                offsets.shape()
            )));
        }
        Ok(MlpNet {
            similarity,
            offsets,
            mode,
        })
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.similarity.dim() {
            return Err(SimNetError::Shape(format!(
                "input of length {} for {}-dimensional templates",
                x.len(),
                self.similarity.dim()
            )));
        }
        let s = self.similarity.scores(x);
        Ok((0..self.offsets.shape()[0])
            .map(|r| {
                let shifted: Vec<f64> = s.iter().zip(self.offsets.row(r)).map(|(a, b)| a + b).collect();
                self.mode.eval(&shifted)
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }

    /// Offsets as `[k][n]` rows, the layout the kernel helpers take.
    pub fn offset_rows(&self) -> Vec<Vec<f64>> {
        (0..self.offsets.shape()[0]).map(|r| self.offsets.row(r).to_vec()).collect()
    }
}

/// Elementwise `max(x, 0)`: single-entry blocks, constant 0, hard max.
pub fn realize_relu(shape: &[usize]) -> Result<MexLayerParams> {
    let count: usize = shape.iter().product();
    if count == 0 {
        return Err(SimNetError::Shape(format!("empty shape {shape:?}")));
    }
    let blocks = BlockMap::new((0..count).map(|t| vec![t]).collect())?;
    MexLayerParams::new(MexMode::Max, blocks, shape.to_vec())?.with_constants(vec![0.0; count])
}

fn window_blocks(shape: [usize; 3], window: (usize, usize), stride: usize) -> Result<(BlockMap, Vec<usize>)> {
    let [h, w, c] = shape;
    let (wh, ww) = window;
    if wh == 0 || ww == 0 || stride == 0 || h * w * c == 0 {
        return Err(SimNetError::Argument(format!(
            "pooling needs positive extents, window {window:?} and stride {stride}"
        )));
    }
    if wh > h || ww > w {
        return Err(SimNetError::Shape(format!("window {window:?} larger than the {h}×{w} input")));
    }
    let (oh, ow) = ((h - wh) / stride + 1, (w - ww) / stride + 1);
    let mut blocks = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut block = Vec::with_capacity(wh * ww);
                for a in 0..wh {
                    for b in 0..ww {
                        block.push(((i * stride + a) * w + j * stride + b) * c + ch);
                    }
                }
                blocks.push(block);
            }
        }
    }
    Ok((BlockMap::new(blocks)?, vec![oh, ow, c]))
}

/// Window maximum over an `[H, W, C]` input, per channel.
pub fn realize_maxpool(shape: [usize; 3], window: (usize, usize), stride: usize) -> Result<MexLayerParams> {
    let (blocks, out) = window_blocks(shape, window, stride)?;
    MexLayerParams::new(MexMode::Max, blocks, out)
}

/// Window mean over an `[H, W, C]` input, per channel.
pub fn realize_avgpool(shape: [usize; 3], window: (usize, usize), stride: usize) -> Result<MexLayerParams> {
    let (blocks, out) = window_blocks(shape, window, stride)?;
    MexLayerParams::new(MexMode::Mean, blocks, out)
}
