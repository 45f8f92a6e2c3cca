//! The MEX operator, `(1/ξ)·log((1/n)·Σ exp(ξ·c_i))`, in scalar and layer form.
//!
//! MEX interpolates between min (ξ → −∞), mean (ξ → 0) and max (ξ → +∞).
//! Evaluation shifts by the extreme value in the direction of ξ and works with
//! `expm1`/`log1p`, which keeps the result accurate to a few ulps of the
//! input spread even for |ξ| around 1e-6, where the naive formula loses most
//! of its digits. Below `XI_ZERO` the removable singularity is replaced by its
//! limit: the arithmetic mean, with `∂/∂ξ = Var/2`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimNetError};
use crate::tensor::Tensor;

/// |ξ| below this evaluates the ξ → 0 limit.
pub const XI_ZERO: f64 = 1e-8;

/// Below this |ξ| the gradient path sums `expm1` terms; above it the
/// plain exponentials lose nothing that matters after division by ξ.
const EXPM1_BELOW: f64 = 0.25;

/// How a MEX layer (or a scalar MEX) reduces its block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "xi", rename_all = "snake_case")]
pub enum MexMode {
    /// Finite parameter ξ.
    Soft(f64),
    /// Exact maximum, the ξ → +∞ limit.
    Max,
    /// Exact minimum, the ξ → −∞ limit.
    Min,
    /// Exact arithmetic mean, the ξ → 0 limit.
    Mean,
}

impl MexMode {
    pub fn xi(&self) -> Option<f64> {
        match self {
            MexMode::Soft(xi) => Some(*xi),
            _ => None,
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self, MexMode::Max | MexMode::Min)
    }

    /// Reduces a non-empty block. Callers guarantee `values` is non-empty.
    pub fn eval(&self, values: &[f64]) -> f64 {
        match *self {
            MexMode::Soft(xi) => soft_eval(values, xi, None).0,
            MexMode::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            MexMode::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            MexMode::Mean => mean(values),
        }
    }

    /// Value, per-entry partials written into `weights`, and `∂/∂ξ`.
    ///
    /// Hard modes use the arg-extreme subgradient with first-index ties and
    /// report `∂/∂ξ = 0`; the mean mode reports the ξ → 0 derivative `Var/2`.
    pub fn eval_grad(&self, values: &[f64], weights: &mut [f64]) -> (f64, f64) {
        debug_assert_eq!(values.len(), weights.len());
        match *self {
            MexMode::Soft(xi) => soft_eval(values, xi, Some(weights)),
            MexMode::Max | MexMode::Min => {
                let better = |a: f64, b: f64| {
                    if matches!(self, MexMode::Max) {
                        a > b
                    } else {
                        a < b
                    }
                };
                let mut best = 0;
                for (i, &v) in values.iter().enumerate().skip(1) {
                    if better(v, values[best]) {
                        best = i;
                    }
                }
                weights.iter_mut().for_each(|w| *w = 0.0);
                weights[best] = 1.0;
                (values[best], 0.0)
            }
            MexMode::Mean => {
                let n = values.len() as f64;
                weights.iter_mut().for_each(|w| *w = 1.0 / n);
                let m = mean(values);
                (m, half_variance(values, m))
            }
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn half_variance(values: &[f64], mean: f64) -> f64 {
    let n = values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (2.0 * n)
}

fn soft_eval(values: &[f64], xi: f64, weights: Option<&mut [f64]>) -> (f64, f64) {
    let n = values.len() as f64;
    if xi.abs() < XI_ZERO {
        let m = mean(values);
        if let Some(w) = weights {
            w.iter_mut().for_each(|w| *w = 1.0 / n);
        }
        return (m, half_variance(values, m));
    }
    let shift = if xi > 0.0 {
        values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        values.iter().copied().fold(f64::INFINITY, f64::min)
    };
    // every exponent ξ·(c − shift) is ≤ 0
    let Some(weights) = weights else {
        let log_mean = if xi.abs() < EXPM1_BELOW {
            let acc: f64 = values.iter().map(|&c| (xi * (c - shift)).exp_m1()).sum();
            (acc / n).ln_1p()
        } else {
            (values.iter().map(|&c| (xi * (c - shift)).exp()).sum::<f64>() / n).ln()
        };
        return (shift + log_mean / xi, 0.0);
    };
    let (log_mean, total) = if xi.abs() < EXPM1_BELOW {
        let mut acc = 0.0;
        for (w, &c) in weights.iter_mut().zip(values) {
            *w = (xi * (c - shift)).exp_m1();
            acc += *w;
        }
        weights.iter_mut().for_each(|w| *w += 1.0);
        ((acc / n).ln_1p(), n + acc)
    } else {
        let mut total = 0.0;
        for (w, &c) in weights.iter_mut().zip(values) {
            *w = (xi * (c - shift)).exp();
            total += *w;
        }
        ((total / n).ln(), total)
    };
    let value = shift + log_mean / xi;
    let mut centered = 0.0;
    for (w, &c) in weights.iter_mut().zip(values) {
        *w /= total;
        centered += *w * (c - shift);
    }
    let d_xi = (centered - log_mean / xi) / xi;
    (value, d_xi)
}

pub fn mex(values: &[f64], xi: f64) -> Result<f64> {
    check_scalar_args(values, xi)?;
    Ok(soft_eval(values, xi, None).0)
}

/// Partials of [`mex`]: softmax weights `softmax(ξ·c)` and `∂/∂ξ`.
pub fn mex_grad(values: &[f64], xi: f64) -> Result<(Vec<f64>, f64)> {
    check_scalar_args(values, xi)?;
    let mut weights = vec![0.0; values.len()];
    let (_, d_xi) = soft_eval(values, xi, Some(&mut weights));
    Ok((weights, d_xi))
}

fn check_scalar_args(values: &[f64], xi: f64) -> Result<()> {
    if values.is_empty() {
        return Err(SimNetError::Argument("MEX over an empty set".into()));
    }
    if !xi.is_finite() {
        return Err(SimNetError::Argument(format!("MEX parameter must be finite, got {xi}")));
    }
    Ok(())
}

/// Input blocks of a MEX layer in compressed form: block `t` is
/// `inputs[starts[t]..starts[t + 1]]`, indices into the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMap {
    starts: Vec<usize>,
    inputs: Vec<usize>,
}

impl BlockMap {
    pub fn new(blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut starts = Vec::with_capacity(blocks.len() + 1);
        let mut inputs = Vec::new();
        starts.push(0);
        for (t, block) in blocks.into_iter().enumerate() {
            if block.is_empty() {
                return Err(SimNetError::Validation(format!("block of output {t} is empty")));
            }
            inputs.extend(block);
            starts.push(inputs.len());
        }
        if starts.len() == 1 {
            return Err(SimNetError::Validation("MEX layer without outputs".into()));
        }
        Ok(BlockMap { starts, inputs })
    }

    pub fn num_outputs(&self) -> usize {
        self.starts.len() - 1
    }

    /// Total number of (output, slot) pairs.
    pub fn num_entries(&self) -> usize {
        self.inputs.len()
    }

    pub fn block(&self, t: usize) -> &[usize] {
        &self.inputs[self.starts[t]..self.starts[t + 1]]
    }

    /// Position of block `t`'s first slot among all entries.
    pub fn entry_start(&self, t: usize) -> usize {
        self.starts[t]
    }

    pub fn max_block_len(&self) -> usize {
        self.starts.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// Offsets `b_ts`, possibly tied: entry `e` of the block map reads
/// `values[slots[e]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTable {
    pub values: Vec<f64>,
    slots: Arc<Vec<usize>>,
}

impl OffsetTable {
    /// One independent offset per (output, slot) pair.
    pub fn dense(blocks: &BlockMap, values: Vec<f64>) -> Result<Self> {
        Self::shared(values, Arc::new((0..blocks.num_entries()).collect()))
    }

    /// Offsets tied through an explicit slot map.
    pub fn shared(values: Vec<f64>, slots: Arc<Vec<usize>>) -> Result<Self> {
        if let Some(&bad) = slots.iter().find(|&&s| s >= values.len()) {
            return Err(SimNetError::Index(format!(
                "offset slot {bad} out of range for {} offsets",
                values.len()
            )));
        }
        Ok(OffsetTable { values, slots })
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }
}

/// `out(t) = MEX{ {inp(s) + b_ts}_{s ∈ block(t)}, c_t }`
#[derive(Debug, Clone, PartialEq)]
pub struct MexLayerParams {
    pub mode: MexMode,
    pub blocks: Arc<BlockMap>,
    pub offsets: Option<OffsetTable>,
    pub constants: Option<Vec<f64>>,
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MexGrad {
    pub d_input: Tensor,
    pub d_offsets: Option<Vec<f64>>,
    pub d_constants: Option<Vec<f64>>,
    pub d_xi: f64,
}

impl MexLayerParams {
    pub fn new(mode: MexMode, blocks: BlockMap, out_shape: Vec<usize>) -> Result<Self> {
        let params = MexLayerParams {
            mode,
            blocks: Arc::new(blocks),
            offsets: None,
            constants: None,
            out_shape,
        };
        params.check_structure()?;
        Ok(params)
    }

    pub fn with_mode(mut self, mode: MexMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_offsets(mut self, offsets: OffsetTable) -> Result<Self> {
        self.offsets = Some(offsets);
        self.check_structure()?;
        Ok(self)
    }

    pub fn with_constants(mut self, constants: Vec<f64>) -> Result<Self> {
        self.constants = Some(constants);
        self.check_structure()?;
        Ok(self)
    }

    pub fn num_outputs(&self) -> usize {
        self.blocks.num_outputs()
    }

    fn check_structure(&self) -> Result<()> {
        let outputs = self.blocks.num_outputs();
        if self.out_shape.iter().product::<usize>() != outputs || self.out_shape.contains(&0) {
            return Err(SimNetError::Shape(format!(
                "output shape {:?} does not hold {outputs} outputs",
                self.out_shape
            )));
        }
        if let Some(offsets) = &self.offsets {
            if offsets.slots.len() != self.blocks.num_entries() {
                return Err(SimNetError::Shape(format!(
                    "offset table covers {} entries, block map has {}",
                    offsets.slots.len(),
                    self.blocks.num_entries()
                )));
            }
        }
        if let Some(c) = &self.constants {
            if c.len() != outputs {
                return Err(SimNetError::Shape(format!(
                    "{} constants for {outputs} outputs",
                    c.len()
                )));
            }
        }
        if let MexMode::Soft(xi) = self.mode {
            if !xi.is_finite() {
                return Err(SimNetError::Validation(format!("non-finite MEX parameter {xi}")));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        self.check_structure()?;
        let len = input.len();
        for t in 0..self.blocks.num_outputs() {
            if let Some(&s) = self.blocks.block(t).iter().find(|&&s| s >= len) {
                return Err(SimNetError::Index(format!(
                    "block of output {t} reads input coordinate {s}, input has {len} values"
                )));
            }
        }
        Ok(())
    }

    /// Gathers block `t` (offsets applied, constant appended) into `buf`.
    fn gather(&self, input: &[f64], t: usize, buf: &mut Vec<f64>) {
        buf.clear();
        let block = self.blocks.block(t);
        let start = self.blocks.entry_start(t);
        match &self.offsets {
            Some(off) => buf.extend(
                block
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| input[s] + off.values[off.slots[start + k]]),
            ),
            None => buf.extend(block.iter().map(|&s| input[s])),
        }
        if let Some(c) = &self.constants {
            buf.push(c[t]);
        }
    }
}

pub fn mex_layer_forward(input: &Tensor, params: &MexLayerParams) -> Result<Tensor> {
    params.check_input(input)?;
    let mut buf = Vec::with_capacity(params.blocks.max_block_len() + 1);
    let out = (0..params.num_outputs())
        .map(|t| {
            params.gather(input.data(), t, &mut buf);
            params.mode.eval(&buf)
        })
        .collect();
    Tensor::new(params.out_shape.clone(), out)
}

/// Chain rule through every output; overlapping blocks and tied offsets
/// accumulate in output order.
pub fn mex_layer_backward(
    input: &Tensor,
    params: &MexLayerParams,
    upstream: &Tensor,
) -> Result<MexGrad> {
    params.check_input(input)?;
    if upstream.shape() != params.out_shape.as_slice() {
        return Err(SimNetError::Shape(format!(
            "upstream shape {:?} differs from layer output shape {:?}",
            upstream.shape(),
            params.out_shape
        )));
    }
    let mut d_input = vec![0.0; input.len()];
    let mut d_offsets = params.offsets.as_ref().map(|o| vec![0.0; o.values.len()]);
    let mut d_constants = params.constants.as_ref().map(|c| vec![0.0; c.len()]);
    let mut d_xi = 0.0;
    let mut buf = Vec::with_capacity(params.blocks.max_block_len() + 1);
    let mut weights = vec![0.0; params.blocks.max_block_len() + 1];
    for (t, &g) in upstream.data().iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        params.gather(input.data(), t, &mut buf);
        let w = &mut weights[..buf.len()];
        let (_, dxi) = params.mode.eval_grad(&buf, w);
        d_xi += g * dxi;
        let block = params.blocks.block(t);
        let start = params.blocks.entry_start(t);
        for (k, &s) in block.iter().enumerate() {
            d_input[s] += g * w[k];
        }
        if let (Some(d_off), Some(off)) = (d_offsets.as_mut(), params.offsets.as_ref()) {
            for k in 0..block.len() {
                d_off[off.slots[start + k]] += g * w[k];
            }
        }
        if let Some(dc) = d_constants.as_mut() {
            dc[t] += g * w[block.len()];
        }
    }
    Ok(MexGrad {
        d_input: Tensor::new(input.shape().to_vec(), d_input)?,
        d_offsets,
        d_constants,
        d_xi,
    })
}
