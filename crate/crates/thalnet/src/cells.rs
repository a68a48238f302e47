//! Module cell designs: feed-forward and GRU stages composed into the five
//! supported module layouts. Every module consumes the concatenation of its
//! context read and (for the input module) the current task input, and emits
//! the output of its last stage as its feature vector.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::{glorot, ParamId, ParamSet};

// ── Designs ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Ff,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Design {
    Ff,
    Gru,
    FfGru,
    GruFf,
    FfGruFf,
}

impl Design {
    pub const ALL: [Design; 5] = [
        Design::Ff,
        Design::Gru,
        Design::FfGru,
        Design::GruFf,
        Design::FfGruFf,
    ];

    pub fn stages(self) -> &'static [StageKind] {
        match self {
            Design::Ff => &[StageKind::Ff, StageKind::Ff],
            Design::Gru => &[StageKind::Gru],
            Design::FfGru => &[StageKind::Ff, StageKind::Gru],
            Design::GruFf => &[StageKind::Gru, StageKind::Ff],
            Design::FfGruFf => &[StageKind::Ff, StageKind::Gru, StageKind::Ff],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Design::Ff => "ff",
            Design::Gru => "gru",
            Design::FfGru => "ff_gru",
            Design::GruFf => "gru_ff",
            Design::FfGruFf => "ff_gru_ff",
        }
    }

    pub fn parse(s: &str) -> Result<Design> {
        match s {
            "ff" => Ok(Design::Ff),
            "gru" => Ok(Design::Gru),
            "ff_gru" => Ok(Design::FfGru),
            "gru_ff" => Ok(Design::GruFf),
            "ff_gru_ff" => Ok(Design::FfGruFf),
            other => Err(Error::Config(format!(
                "unknown module design '{other}' (expected ff, gru, ff_gru, gru_ff, or ff_gru_ff)"
            ))),
        }
    }
}

/// Parameters in one feed-forward layer of `inp` inputs and `out` outputs.
pub fn ff_param_count(inp: usize, out: usize) -> usize {
    (inp + 1) * out
}

/// Parameters in one GRU of `inp` inputs and `hidden` units (three gates,
/// each with weights over the concatenated input and state plus a bias).
pub fn gru_param_count(inp: usize, hidden: usize) -> usize {
    3 * ((inp + hidden + 1) * hidden)
}

// ── Module descriptions ──────────────────────────────────────────────────

/// Static description of one module: its design, the output width of each
/// stage, the width of its context read, and the width of the task input it
/// receives (zero for every module except the input module).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleSpec {
    pub design: Design,
    pub layer_sizes: Vec<usize>,
    pub context_size: usize,
    pub input_size: usize,
}

impl ModuleSpec {
    /// Width of the feature vector this module contributes to the center.
    pub fn feature_size(&self) -> usize {
        *self
            .layer_sizes
            .last()
            .expect("validated module spec has at least one stage")
    }

    /// Width of the concatenated per-step input (context plus task input).
    pub fn input_width(&self) -> usize {
        self.context_size + self.input_size
    }

    /// Hidden width of the GRU stage, if the design has one.
    pub fn gru_size(&self) -> Option<usize> {
        self.design
            .stages()
            .iter()
            .position(|&k| k == StageKind::Gru)
            .map(|i| self.layer_sizes[i])
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.design.stages();
        if self.layer_sizes.len() != stages.len() {
            return Err(Error::Config(format!(
                "design {} has {} stages but {} layer sizes were given",
                self.design.name(),
                stages.len(),
                self.layer_sizes.len()
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.context_size == 0 {
            return Err(Error::Config("context size must be positive".into()));
        }
        Ok(())
    }

    /// Exact number of scalars in this module's stages.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut width = self.input_width();
        for (kind, &size) in self.design.stages().iter().zip(&self.layer_sizes) {
            total += match kind {
                StageKind::Ff => ff_param_count(width, size),
                StageKind::Gru => gru_param_count(width, size),
            };
            width = size;
        }
        total
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct FfParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub wz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub br: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub enum StageParams {
    Ff(FfParams),
    Gru(GruParams),
}

#[derive(Debug, Clone)]
pub struct ModuleParams {
    pub stages: Vec<StageParams>,
}

/// Register a feed-forward layer: Glorot weights, zero bias.
pub fn init_ff(
    params: &mut ParamSet,
    prefix: &str,
    inp: usize,
    out: usize,
    rng: &mut ChaCha8Rng,
) -> FfParams {
    FfParams {
        w: params.register(format!("{prefix}.w"), glorot(rng, inp, out)),
        b: params.register(format!("{prefix}.b"), Tensor::zeros(&[out])),
    }
}

/// Register a GRU stage: Glorot gate weights over `[x, h]`, zero biases.
pub fn init_gru(
    params: &mut ParamSet,
    prefix: &str,
    inp: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> GruParams {
    let width = inp + hidden;
    GruParams {
        wz: params.register(format!("{prefix}.wz"), glorot(rng, width, hidden)),
        bz: params.register(format!("{prefix}.bz"), Tensor::zeros(&[hidden])),
        wr: params.register(format!("{prefix}.wr"), glorot(rng, width, hidden)),
        br: params.register(format!("{prefix}.br"), Tensor::zeros(&[hidden])),
        wh: params.register(format!("{prefix}.wh"), glorot(rng, width, hidden)),
        bh: params.register(format!("{prefix}.bh"), Tensor::zeros(&[hidden])),
    }
}

/// Register all stages of a module under `prefix`.
pub fn init_module(
    params: &mut ParamSet,
    prefix: &str,
    spec: &ModuleSpec,
    rng: &mut ChaCha8Rng,
) -> ModuleParams {
    let mut stages = Vec::new();
    let mut width = spec.input_width();
    for (i, (kind, &size)) in spec.design.stages().iter().zip(&spec.layer_sizes).enumerate() {
        let stage_prefix = format!("{prefix}.stage{i}");
        stages.push(match kind {
            StageKind::Ff => StageParams::Ff(init_ff(
                params,
                &format!("{stage_prefix}.ff"),
                width,
                size,
                rng,
            )),
            StageKind::Gru => StageParams::Gru(init_gru(
                params,
                &format!("{stage_prefix}.gru"),
                width,
                size,
                rng,
            )),
        });
        width = size;
    }
    ModuleParams { stages }
}

// ── Forward passes ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// y = act(x · W + b)
pub fn ff_layer(
    tape: &mut Tape,
    bound: &[NodeId],
    p: &FfParams,
    x: NodeId,
    act: Activation,
) -> Result<NodeId> {
    let lin = tape.matmul(x, bound[p.w])?;
    let pre = tape.add_bias(lin, bound[p.b])?;
    match act {
        Activation::Tanh => tape.tanh(pre),
        Activation::Identity => Ok(pre),
    }
}

/// One GRU step:
///   z = σ([x,h]·Wz + bz)
///   r = σ([x,h]·Wr + br)
///   h̃ = tanh([x, r⊙h]·Wh + bh)
///   h' = (1−z)⊙h + z⊙h̃
pub fn gru_step(
    tape: &mut Tape,
    bound: &[NodeId],
    p: &GruParams,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let xh = tape.concat(&[x, h])?;
    let z_lin = tape.matmul(xh, bound[p.wz])?;
    let z_pre = tape.add_bias(z_lin, bound[p.bz])?;
    let z = tape.sigmoid(z_pre)?;
    let r_lin = tape.matmul(xh, bound[p.wr])?;
    let r_pre = tape.add_bias(r_lin, bound[p.br])?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh])?;
    let c_lin = tape.matmul(xrh, bound[p.wh])?;
    let c_pre = tape.add_bias(c_lin, bound[p.bh])?;
    let cand = tape.tanh(c_pre)?;
    let neg_z = tape.mul_const(z, -1.0)?;
    let one_minus_z = tape.add_const(neg_z, 1.0)?;
    let keep = tape.mul(one_minus_z, h)?;
    let take = tape.mul(z, cand)?;
    tape.add(keep, take)
}

/// Run one module for one sub-step. `hidden` is the GRU state entering the
/// step (zeros at a sequence start), `context` the module's current read, and
/// `task_input` the data frame — present only for the input module. Returns
/// the module's feature vector and the GRU state leaving the step.
pub fn module_forward(
    tape: &mut Tape,
    bound: &[NodeId],
    mp: &ModuleParams,
    hidden: Option<NodeId>,
    context: NodeId,
    task_input: Option<NodeId>,
) -> Result<(NodeId, Option<NodeId>)> {
    let mut current = match task_input {
        Some(x) => tape.concat(&[context, x])?,
        None => context,
    };
    let mut new_hidden = None;
    for sp in &mp.stages {
        current = match sp {
            StageParams::Ff(p) => ff_layer(tape, bound, p, current, Activation::Tanh)?,
            StageParams::Gru(p) => {
                let h = hidden.expect("GRU stage requires a hidden state node");
                let h_next = gru_step(tape, bound, p, current, h)?;
                new_hidden = Some(h_next);
                h_next
            }
        };
    }
    Ok((current, new_hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn param_count_formulas_match_hand_arithmetic() {
        // (10 + 20 + 1) · 20 · 3 = 1860
        assert_eq!(gru_param_count(10, 20), 1860);
        // (784 + 1) · 64 = 50240
        assert_eq!(ff_param_count(784, 64), 50240);

        // ff_gru_ff with context 32, input 28, sizes [50, 100, 50]:
        //   ff  (60+1)·50            = 3050
        //   gru 3·(50+100+1)·100     = 45300
        //   ff  (100+1)·50           = 5050
        let spec = ModuleSpec {
            design: Design::FfGruFf,
            layer_sizes: vec![50, 100, 50],
            context_size: 32,
            input_size: 28,
        };
        assert_eq!(spec.param_count(), 3050 + 45300 + 5050);
    }

    #[test]
    fn empty_spec_counts_zero_params() {
        let spec = ModuleSpec {
            design: Design::Ff,
            layer_sizes: vec![],
            context_size: 8,
            input_size: 0,
        };
        assert_eq!(spec.param_count(), 0);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn init_registers_exactly_param_count_scalars() {
        let mut r = rng(3);
        for design in Design::ALL {
            let sizes: Vec<usize> = design.stages().iter().map(|_| 7).collect();
            let spec = ModuleSpec {
                design,
                layer_sizes: sizes,
                context_size: 5,
                input_size: 3,
            };
            spec.validate().unwrap();
            let mut ps = ParamSet::new();
            init_module(&mut ps, &format!("m_{}", design.name()), &spec, &mut r);
            assert_eq!(
                ps.scalar_count(),
                spec.param_count(),
                "design {}",
                design.name()
            );
        }
    }

    /// Independent scalar-loop GRU used as an oracle.
    #[allow(clippy::too_many_arguments)]
    fn gru_oracle(
        x: &Tensor,
        h: &Tensor,
        wz: &Tensor,
        bz: &Tensor,
        wr: &Tensor,
        br: &Tensor,
        wh: &Tensor,
        bh: &Tensor,
    ) -> Vec<f64> {
        let batch = x.shape()[0];
        let nx = x.shape()[1];
        let nh = h.shape()[1];
        let mut out = vec![0.0; batch * nh];
        let gate = |w: &Tensor, bias: &Tensor, j: usize, v: &[f64]| -> f64 {
            let mut s = bias.data()[j];
            for (i, &vi) in v.iter().enumerate() {
                s += vi * w.data()[i * nh + j];
            }
            s
        };
        for b in 0..batch {
            let xb = &x.data()[b * nx..(b + 1) * nx];
            let hb = &h.data()[b * nh..(b + 1) * nh];
            let mut xh = xb.to_vec();
            xh.extend_from_slice(hb);
            let z: Vec<f64> = (0..nh).map(|j| sigmoid(gate(wz, bz, j, &xh))).collect();
            let r: Vec<f64> = (0..nh).map(|j| sigmoid(gate(wr, br, j, &xh))).collect();
            let mut xrh = xb.to_vec();
            for (k, &hk) in hb.iter().enumerate() {
                xrh.push(r[k] * hk);
            }
            for j in 0..nh {
                let cand = gate(wh, bh, j, &xrh).tanh();
                out[b * nh + j] = (1.0 - z[j]) * hb[j] + z[j] * cand;
            }
        }
        out
    }

    #[test]
    fn gru_step_matches_scalar_oracle() {
        let mut r = rng(4);
        let (batch, nx, nh) = (3, 4, 5);
        let mut ps = ParamSet::new();
        let p = init_gru(&mut ps, "g", nx, nh, &mut r);
        let x = rand_tensor(&mut r, &[batch, nx]);
        let h = rand_tensor(&mut r, &[batch, nh]);

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let xi = tape.leaf(x.clone());
        let hi = tape.leaf(h.clone());
        let out = gru_step(&mut tape, &bound, &p, xi, hi).unwrap();

        let want = gru_oracle(
            &x,
            &h,
            ps.value(p.wz),
            ps.value(p.bz),
            ps.value(p.wr),
            ps.value(p.br),
            ps.value(p.wh),
            ps.value(p.bh),
        );
        for (got, want) in tape.value(out).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn ff_layer_matches_scalar_arithmetic() {
        let mut ps = ParamSet::new();
        let w = ps.register(
            "w",
            Tensor::matrix(2, 2, vec![0.5, -0.25, 1.0, 0.75]).unwrap(),
        );
        let b = ps.register("b", Tensor::vector(&[0.1, -0.2]));
        let p = FfParams { w, b };
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = ff_layer(&mut tape, &bound, &p, x, Activation::Tanh).unwrap();
        // pre = [1·0.5 + 2·1.0 + 0.1, 1·(−0.25) + 2·0.75 − 0.2] = [2.6, 1.05]
        let want = [2.6f64.tanh(), 1.05f64.tanh()];
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
        let yi = ff_layer(&mut tape, &bound, &p, x, Activation::Identity).unwrap();
        assert!((tape.value(yi).data()[0] - 2.6).abs() < 1e-12);
    }

    #[test]
    fn gru_step_gradients_match_finite_differences() {
        use crate::numerics::check;
        let mut r = rng(5);
        let (batch, nx, nh) = (2, 3, 3);
        let mut ps = ParamSet::new();
        let p = init_gru(&mut ps, "g", nx, nh, &mut r);
        let x = rand_tensor(&mut r, &[batch, nx]);
        let h = rand_tensor(&mut r, &[batch, nh]);

        let eval = |ps: &ParamSet| -> crate::Result<f64> {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let xi = tape.leaf(x.clone());
            let hi = tape.leaf(h.clone());
            let out = gru_step(&mut tape, &bound, &p, xi, hi)?;
            let loss = tape.sum(out)?;
            Ok(tape.value(loss).item())
        };

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let xi = tape.leaf(x.clone());
        let hi = tape.leaf(h.clone());
        let out = gru_step(&mut tape, &bound, &p, xi, hi).unwrap();
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = bound.iter().map(|&id| grads.wrt(&tape, id)).collect();

        let numeric = check::central_difference(&mut ps, eval, 1e-5).unwrap();
        let (err, ti, ei) = check::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "worst rel err {err} at tensor {ti} element {ei}");
    }

    #[test]
    fn module_forward_shapes_and_state() {
        let mut r = rng(6);
        for design in Design::ALL {
            let sizes: Vec<usize> = design
                .stages()
                .iter()
                .enumerate()
                .map(|(i, _)| 4 + i)
                .collect();
            let spec = ModuleSpec {
                design,
                layer_sizes: sizes.clone(),
                context_size: 3,
                input_size: 2,
            };
            let mut ps = ParamSet::new();
            let mp = init_module(&mut ps, "m", &spec, &mut r);
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let ctx = tape.leaf(rand_tensor(&mut r, &[2, 3]));
            let inp = tape.leaf(rand_tensor(&mut r, &[2, 2]));
            let hidden = spec
                .gru_size()
                .map(|hs| tape.leaf(Tensor::zeros(&[2, hs])));
            let (feat, new_h) =
                module_forward(&mut tape, &bound, &mp, hidden, ctx, Some(inp)).unwrap();
            assert_eq!(tape.value(feat).shape(), &[2, spec.feature_size()]);
            assert_eq!(new_h.is_some(), spec.gru_size().is_some(), "{}", design.name());
        }
    }
}
