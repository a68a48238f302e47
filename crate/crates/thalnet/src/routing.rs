//! The routing center and the four reading mechanisms.
//!
//! All module feature vectors are merged into a center vector Φ by
//! concatenation. Each module then reads its next context from Φ through one
//! of four mechanisms:
//!
//! * `linear`        — c = Φ·W
//! * `weight_norm`   — c = (β / ‖W‖_F) · Φ·W
//! * `fast_softmax`  — per context element j, a softmax over center positions
//!   whose logits are predicted from the module's own current features φ
//! * `fast_gaussian` — per context element j, Gaussian densities over center
//!   positions 1..|Φ| with mean and variance predicted from φ
//!
//! The "fast" readers carry no persistent weights over Φ; their mixture
//! weights are recomputed from φ at every step.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::{glorot, ParamId, ParamSet};

/// Variance floor added after the softplus so densities stay finite.
pub const VARIANCE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReaderVariant {
    Linear,
    WeightNorm,
    FastSoftmax,
    FastGaussian,
}

impl ReaderVariant {
    pub const ALL: [ReaderVariant; 4] = [
        ReaderVariant::Linear,
        ReaderVariant::WeightNorm,
        ReaderVariant::FastSoftmax,
        ReaderVariant::FastGaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReaderVariant::Linear => "linear",
            ReaderVariant::WeightNorm => "weight_norm",
            ReaderVariant::FastSoftmax => "fast_softmax",
            ReaderVariant::FastGaussian => "fast_gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<ReaderVariant> {
        match s {
            "linear" => Ok(ReaderVariant::Linear),
            "weight_norm" => Ok(ReaderVariant::WeightNorm),
            "fast_softmax" => Ok(ReaderVariant::FastSoftmax),
            "fast_gaussian" => Ok(ReaderVariant::FastGaussian),
            other => Err(Error::Config(format!(
                "unknown reader '{other}' (expected linear, weight_norm, fast_softmax, or fast_gaussian)"
            ))),
        }
    }

    /// True when the read weights are a function of the module's current
    /// features rather than persistent parameters over Φ.
    pub fn is_dynamic(self) -> bool {
        matches!(self, ReaderVariant::FastSoftmax | ReaderVariant::FastGaussian)
    }
}

/// Exact scalar count of one module's reader.
pub fn reader_param_count(
    variant: ReaderVariant,
    feature_size: usize,
    center_size: usize,
    context_size: usize,
) -> usize {
    match variant {
        ReaderVariant::Linear => center_size * context_size,
        ReaderVariant::WeightNorm => center_size * context_size + 1,
        ReaderVariant::FastSoftmax => (feature_size + 1) * center_size * context_size,
        ReaderVariant::FastGaussian => (feature_size + 1) * 2 * context_size,
    }
}

// ── Center vector ────────────────────────────────────────────────────────

/// The merged center vector Φ together with the feature-block boundaries of
/// the contributing modules, as (offset, length) pairs along the last axis.
pub struct CenterVector {
    pub node: NodeId,
    pub boundaries: Vec<(usize, usize)>,
}

/// Concatenate all module feature vectors into the center vector.
pub fn merge(tape: &mut Tape, features: &[NodeId]) -> Result<CenterVector> {
    if features.is_empty() {
        return Err(Error::Argument("merge of zero feature vectors".into()));
    }
    let node = tape.concat(features)?;
    let boundaries = tape
        .concat_bounds(node)
        .expect("merge output is a concat node");
    Ok(CenterVector { node, boundaries })
}

// ── Reader parameters ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum ReaderParams {
    /// w: [|Φ| × |c|]
    Linear { w: ParamId },
    /// w: [|Φ| × |c|], beta: [1]
    WeightNorm { w: ParamId, beta: ParamId },
    /// w: [|φ| × |c|·|Φ|], b: [|c|·|Φ|]; column j·|Φ|+k holds the logit of
    /// center position k for context element j
    FastSoftmax { w: ParamId, b: ParamId, center_size: usize },
    /// Mean head (w, b) and variance head (u, d), each [|φ| × |c|] and [|c|]
    FastGaussian { w: ParamId, b: ParamId, u: ParamId, d: ParamId },
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Register one module's reader under `prefix`.
///
/// The fast Gaussian heads start reading from the middle of the center with
/// a spread of a quarter of its width, so every position receives signal
/// from the first step.
pub fn init_reader(
    params: &mut ParamSet,
    prefix: &str,
    variant: ReaderVariant,
    feature_size: usize,
    center_size: usize,
    context_size: usize,
    rng: &mut ChaCha8Rng,
) -> ReaderParams {
    match variant {
        ReaderVariant::Linear => ReaderParams::Linear {
            w: params.register(format!("{prefix}.w"), glorot(rng, center_size, context_size)),
        },
        ReaderVariant::WeightNorm => ReaderParams::WeightNorm {
            w: params.register(format!("{prefix}.w"), glorot(rng, center_size, context_size)),
            beta: params.register(format!("{prefix}.beta"), Tensor::scalar(1.0)),
        },
        ReaderVariant::FastSoftmax => ReaderParams::FastSoftmax {
            w: params.register(
                format!("{prefix}.w"),
                glorot(rng, feature_size, context_size * center_size),
            ),
            b: params.register(
                format!("{prefix}.b"),
                Tensor::zeros(&[context_size * center_size]),
            ),
            center_size,
        },
        ReaderVariant::FastGaussian => {
            let mid = (center_size as f64 + 1.0) / 2.0;
            let spread = inverse_softplus((center_size as f64 / 4.0).powi(2).max(0.5));
            ReaderParams::FastGaussian {
                w: params.register(format!("{prefix}.w"), glorot(rng, feature_size, context_size)),
                b: params.register(
                    format!("{prefix}.b"),
                    Tensor::vector(&vec![mid; context_size]),
                ),
                u: params.register(format!("{prefix}.u"), glorot(rng, feature_size, context_size)),
                d: params.register(
                    format!("{prefix}.d"),
                    Tensor::vector(&vec![spread; context_size]),
                ),
            }
        }
    }
}

// ── Reading ──────────────────────────────────────────────────────────────

/// Read a module's next context from the center. `own_features` is the
/// module's feature vector from the same step, used only by the fast readers.
/// Returns a [batch × |c|] node.
pub fn read(
    tape: &mut Tape,
    bound: &[NodeId],
    reader: &ReaderParams,
    center: NodeId,
    own_features: NodeId,
) -> Result<NodeId> {
    match reader {
        ReaderParams::Linear { w } => tape.matmul(center, bound[*w]),

        ReaderParams::WeightNorm { w, beta } => {
            let wv = tape.value(bound[*w]);
            if wv.data().iter().all(|&v| v == 0.0) {
                return Err(Error::Domain {
                    op: "read_weight_norm",
                    msg: "weight matrix has zero Frobenius norm".into(),
                });
            }
            let prod = tape.matmul(center, bound[*w])?;
            let w2 = tape.mul(bound[*w], bound[*w])?;
            let sq_sum = tape.sum(w2)?;
            let norm = tape.sqrt(sq_sum)?;
            let gain = tape.div(bound[*beta], norm)?;
            tape.scale(prod, gain)
        }

        ReaderParams::FastSoftmax { w, b, center_size } => {
            let batch = tape.value(own_features).shape()[0];
            let context_size = tape.value(bound[*b]).numel() / center_size;
            let lin = tape.matmul(own_features, bound[*w])?;
            let logits = tape.add_bias(lin, bound[*b])?;
            let cube = tape.reshape(logits, &[batch, context_size, *center_size])?;
            let weights = tape.softmax(cube)?;
            tape.mix_rows(weights, center)
        }

        ReaderParams::FastGaussian { w, b, u, d } => {
            let positions = tape.value(center).last_dim();
            let mu_lin = tape.matmul(own_features, bound[*w])?;
            let mu = tape.add_bias(mu_lin, bound[*b])?;
            let var_lin = tape.matmul(own_features, bound[*u])?;
            let var_pre = tape.add_bias(var_lin, bound[*d])?;
            let var_sp = tape.softplus(var_pre)?;
            let var = tape.add_const(var_sp, VARIANCE_EPSILON)?;
            let weights = tape.gaussian_weights(mu, var, positions)?;
            tape.mix_rows(weights, center)
        }
    }
}
