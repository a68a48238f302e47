//! Full model assembly: the ThalNet step and unroll, the stacked-GRU
//! baseline, and the shared loss conventions.
//!
//! One step runs every module against the *previous* center vector: each
//! module first reads its context c^i = r^i(Φ_{t−1}, φ^i_{t−1}), then
//! computes features φ^i = f^i(c^i, x^i), and finally the new center
//! Φ_t = merge(φ^1..φ^I) is formed. Because reads only touch the previous
//! step's state, module evaluation order within a step cannot affect values.
//!
//! Each input token is presented for `steps_per_token` consecutive sub-steps;
//! the prediction for a token is the head output at the last of its
//! sub-steps. Classification losses apply to the final token only; language
//! modeling applies cross-entropy at every token against the next byte.

use rand_chacha::ChaCha8Rng;

use crate::cells::{
    ff_layer, ff_param_count, gru_step, init_module, module_forward, Activation, Design,
    FfParams, GruParams, ModuleParams, ModuleSpec,
};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};
use crate::params::ParamSet;
use crate::routing::{
    init_reader, merge, read, reader_param_count, ReaderParams, ReaderVariant,
};

// ── Configuration ────────────────────────────────────────────────────────

/// Ordered module specs: index 0 is the input module, the last is the output
/// module, everything between is a side module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThalNetConfig {
    pub modules: Vec<ModuleSpec>,
    pub reader: ReaderVariant,
    pub steps_per_token: usize,
    pub classes: usize,
}

impl ThalNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::Config("a model needs at least one module".into()));
        }
        for (i, m) in self.modules.iter().enumerate() {
            m.validate()?;
            if i == 0 && m.input_size == 0 {
                return Err(Error::Config(
                    "module 0 is the input module and needs a task input".into(),
                ));
            }
            if i > 0 && m.input_size != 0 {
                return Err(Error::Config(format!(
                    "module {i} has a task input; only module 0 may receive one"
                )));
            }
        }
        if self.steps_per_token == 0 {
            return Err(Error::Config("steps_per_token must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two output classes required".into()));
        }
        Ok(())
    }

    /// |Φ|: total width of the merged center vector.
    pub fn center_size(&self) -> usize {
        self.modules.iter().map(|m| m.feature_size()).sum()
    }

    pub fn output_module(&self) -> usize {
        self.modules.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.modules[0].input_size
    }

    /// Exact scalar count: module stages + readers + output head.
    pub fn total_param_count(&self) -> usize {
        let center = self.center_size();
        let mut total = 0;
        for m in &self.modules {
            total += m.param_count();
            total += reader_param_count(self.reader, m.feature_size(), center, m.context_size);
        }
        total += ff_param_count(
            self.modules[self.output_module()].feature_size(),
            self.classes,
        );
        total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaselineConfig {
    pub layer_sizes: Vec<usize>,
    pub steps_per_token: usize,
    pub classes: usize,
    pub input_size: usize,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() {
            return Err(Error::Config("baseline needs at least one GRU layer".into()));
        }
        if self.layer_sizes.contains(&0) || self.input_size == 0 {
            return Err(Error::Config("layer and input sizes must be positive".into()));
        }
        if self.steps_per_token == 0 {
            return Err(Error::Config("steps_per_token must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two output classes required".into()));
        }
        Ok(())
    }

    pub fn total_param_count(&self) -> usize {
        let mut total = 0;
        let mut width = self.input_size;
        for &h in &self.layer_sizes {
            total += crate::cells::gru_param_count(width, h);
            width = h;
        }
        total + ff_param_count(width, self.classes)
    }
}

// ── Parameters ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ThalNetParams {
    pub modules: Vec<ModuleParams>,
    pub readers: Vec<ReaderParams>,
    pub head: FfParams,
}

/// Register all ThalNet parameters. Module and reader weights use Glorot
/// initialization; the output head starts at zero so an untrained model
/// predicts the uniform distribution exactly.
pub fn init_thalnet(
    params: &mut ParamSet,
    cfg: &ThalNetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ThalNetParams> {
    cfg.validate()?;
    let center = cfg.center_size();
    let mut modules = Vec::new();
    let mut readers = Vec::new();
    for (i, spec) in cfg.modules.iter().enumerate() {
        modules.push(init_module(params, &format!("module{i}"), spec, rng));
        readers.push(init_reader(
            params,
            &format!("reader{i}"),
            cfg.reader,
            spec.feature_size(),
            center,
            spec.context_size,
            rng,
        ));
    }
    let out_features = cfg.modules[cfg.output_module()].feature_size();
    let head = FfParams {
        w: params.register("head.w", Tensor::zeros(&[out_features, cfg.classes])),
        b: params.register("head.b", Tensor::zeros(&[cfg.classes])),
    };
    Ok(ThalNetParams {
        modules,
        readers,
        head,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineParams {
    pub layers: Vec<GruParams>,
    pub head: FfParams,
}

pub fn init_baseline(
    params: &mut ParamSet,
    cfg: &BaselineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BaselineParams> {
    cfg.validate()?;
    let mut layers = Vec::new();
    let mut width = cfg.input_size;
    for (i, &h) in cfg.layer_sizes.iter().enumerate() {
        layers.push(crate::cells::init_gru(
            params,
            &format!("layer{i}.gru"),
            width,
            h,
            rng,
        ));
        width = h;
    }
    let head = FfParams {
        w: params.register("head.w", Tensor::zeros(&[width, cfg.classes])),
        b: params.register("head.b", Tensor::zeros(&[cfg.classes])),
    };
    Ok(BaselineParams { layers, head })
}

// ── State ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModuleState {
    pub hidden: Option<Tensor>,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
pub struct ThalNetState {
    pub modules: Vec<ModuleState>,
    pub center: Tensor,
}

impl ThalNetState {
    /// Zero state: Φ = 0, all features zero, all hiddens zero.
    pub fn fresh(cfg: &ThalNetConfig, batch: usize) -> ThalNetState {
        let modules = cfg
            .modules
            .iter()
            .map(|m| ModuleState {
                hidden: m.gru_size().map(|h| Tensor::zeros(&[batch, h])),
                features: Tensor::zeros(&[batch, m.feature_size()]),
            })
            .collect();
        ThalNetState {
            modules,
            center: Tensor::zeros(&[batch, cfg.center_size()]),
        }
    }

    pub fn batch(&self) -> usize {
        self.center.shape()[0]
    }

    fn check(&self, cfg: &ThalNetConfig) -> Result<()> {
        if self.modules.len() != cfg.modules.len()
            || self.center.shape() != [self.batch(), cfg.center_size()]
        {
            return Err(Error::Config("state does not match model config".into()));
        }
        for (ms, spec) in self.modules.iter().zip(&cfg.modules) {
            let hidden_ok = match (&ms.hidden, spec.gru_size()) {
                (Some(h), Some(hs)) => h.shape() == [self.batch(), hs],
                (None, None) => true,
                _ => false,
            };
            if !hidden_ok || ms.features.shape() != [self.batch(), spec.feature_size()] {
                return Err(Error::Config("state does not match model config".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BaselineState {
    pub hidden: Vec<Tensor>,
}

impl BaselineState {
    pub fn fresh(cfg: &BaselineConfig, batch: usize) -> BaselineState {
        BaselineState {
            hidden: cfg
                .layer_sizes
                .iter()
                .map(|&h| Tensor::zeros(&[batch, h]))
                .collect(),
        }
    }
}

/// Node-level view of a [`ThalNetState`] living on a tape.
#[derive(Debug, Clone)]
pub struct StepState {
    pub hidden: Vec<Option<NodeId>>,
    pub features: Vec<NodeId>,
    pub center: NodeId,
}

impl StepState {
    pub fn from_values(tape: &mut Tape, state: &ThalNetState) -> StepState {
        StepState {
            hidden: state
                .modules
                .iter()
                .map(|m| m.hidden.as_ref().map(|h| tape.leaf(h.clone())))
                .collect(),
            features: state
                .modules
                .iter()
                .map(|m| tape.leaf(m.features.clone()))
                .collect(),
            center: tape.leaf(state.center.clone()),
        }
    }

    pub fn to_values(&self, tape: &Tape) -> ThalNetState {
        ThalNetState {
            modules: self
                .hidden
                .iter()
                .zip(&self.features)
                .map(|(h, &f)| ModuleState {
                    hidden: h.map(|id| tape.value(id).clone()),
                    features: tape.value(f).clone(),
                })
                .collect(),
            center: tape.value(self.center).clone(),
        }
    }
}

// ── ThalNet step and unroll ──────────────────────────────────────────────

/// One sub-step in an explicit module evaluation order. Because every module
/// reads only the previous center and its own previous features, the order
/// cannot change any value; it exists to make that property testable.
pub fn thalnet_step_ordered(
    tape: &mut Tape,
    bound: &[NodeId],
    cfg: &ThalNetConfig,
    tp: &ThalNetParams,
    state: &StepState,
    x: Option<NodeId>,
    order: &[usize],
) -> Result<(StepState, NodeId)> {
    let count = cfg.modules.len();
    let mut features: Vec<Option<NodeId>> = vec![None; count];
    let mut hidden: Vec<Option<NodeId>> = state.hidden.clone();
    for &i in order {
        let context = read(tape, bound, &tp.readers[i], state.center, state.features[i])?;
        let task_input = if i == 0 { x } else { None };
        let (phi, new_h) = module_forward(
            tape,
            bound,
            &tp.modules[i],
            state.hidden[i],
            context,
            task_input,
        )?;
        features[i] = Some(phi);
        if new_h.is_some() {
            hidden[i] = new_h;
        }
    }
    let features: Vec<NodeId> = features
        .into_iter()
        .map(|f| f.expect("order covers every module"))
        .collect();
    let logits = ff_layer(
        tape,
        bound,
        &tp.head,
        features[cfg.output_module()],
        Activation::Identity,
    )?;
    let center = merge(tape, &features)?;
    Ok((
        StepState {
            hidden,
            features,
            center: center.node,
        },
        logits,
    ))
}

/// One sub-step: read contexts from the previous center, run every module,
/// merge the new center, and emit head logits.
pub fn thalnet_step(
    tape: &mut Tape,
    bound: &[NodeId],
    cfg: &ThalNetConfig,
    tp: &ThalNetParams,
    state: &StepState,
    x: Option<NodeId>,
) -> Result<(StepState, NodeId)> {
    let order: Vec<usize> = (0..cfg.modules.len()).collect();
    thalnet_step_ordered(tape, bound, cfg, tp, state, x, &order)
}

// ── Loss conventions ─────────────────────────────────────────────────────

/// What the unrolled network is trained against.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// One class label per batch row, applied at the final token.
    ClassifyLast(Vec<usize>),
    /// One target byte per token per batch row, applied at every token.
    NextByte(Vec<Vec<usize>>),
}

pub struct Unrolled {
    pub loss: NodeId,
    /// Head logits at each labeled position, in token order.
    pub logits: Vec<NodeId>,
    pub final_state: NetworkState,
    /// Total internal sub-steps executed.
    pub steps: usize,
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.mul_const(acc, 1.0 / terms.len() as f64)
}

fn check_loss_spec(loss: &LossSpec, tokens: usize, batch: usize) -> Result<()> {
    match loss {
        LossSpec::ClassifyLast(targets) => {
            if targets.len() != batch {
                return Err(Error::Argument(format!(
                    "expected {batch} class targets, got {}",
                    targets.len()
                )));
            }
        }
        LossSpec::NextByte(targets) => {
            if targets.len() != tokens || targets.iter().any(|t| t.len() != batch) {
                return Err(Error::Argument(
                    "next-byte targets must cover every token for every batch row".into(),
                ));
            }
        }
    }
    Ok(())
}

/// Unroll over a token sequence. Each token is presented for
/// `steps_per_token` sub-steps; predictions are read at the last sub-step of
/// each token.
pub fn thalnet_unroll(
    tape: &mut Tape,
    bound: &[NodeId],
    cfg: &ThalNetConfig,
    tp: &ThalNetParams,
    initial: &ThalNetState,
    inputs: &[Tensor],
    loss_spec: &LossSpec,
) -> Result<Unrolled> {
    if inputs.is_empty() {
        return Err(Error::Argument("unroll over an empty sequence".into()));
    }
    initial.check(cfg)?;
    let batch = initial.batch();
    for t in inputs {
        if t.shape() != [batch, cfg.input_size()] {
            return Err(Error::Argument(format!(
                "input token shape {:?} does not match [batch={batch}, {}]",
                t.shape(),
                cfg.input_size()
            )));
        }
    }
    check_loss_spec(loss_spec, inputs.len(), batch)?;

    let mut state = StepState::from_values(tape, initial);
    let mut steps = 0;
    let mut predictions = Vec::with_capacity(inputs.len());
    for token in inputs {
        let x = tape.leaf(token.clone());
        let mut logits = 0;
        for _ in 0..cfg.steps_per_token {
            let (next, y) = thalnet_step(tape, bound, cfg, tp, &state, Some(x))?;
            state = next;
            logits = y;
            steps += 1;
        }
        predictions.push(logits);
    }

    let (loss, logits) = apply_loss(tape, loss_spec, &predictions)?;
    Ok(Unrolled {
        loss,
        logits,
        final_state: NetworkState::ThalNet(state.to_values(tape)),
        steps,
    })
}

fn apply_loss(
    tape: &mut Tape,
    loss_spec: &LossSpec,
    predictions: &[NodeId],
) -> Result<(NodeId, Vec<NodeId>)> {
    match loss_spec {
        LossSpec::ClassifyLast(targets) => {
            let last = *predictions.last().expect("nonempty sequence");
            let loss = tape.cross_entropy(last, targets)?;
            Ok((loss, vec![last]))
        }
        LossSpec::NextByte(targets) => {
            let mut terms = Vec::with_capacity(predictions.len());
            for (&pred, tgt) in predictions.iter().zip(targets) {
                terms.push(tape.cross_entropy(pred, tgt)?);
            }
            let loss = mean_of(tape, &terms)?;
            Ok((loss, predictions.to_vec()))
        }
    }
}

/// Per-module feature tensors at every sub-step of an unroll, for analysis
/// probes. Outer index: sub-step; inner: module.
pub fn collect_features(
    cfg: &ThalNetConfig,
    tp: &ThalNetParams,
    params: &ParamSet,
    inputs: &[Tensor],
) -> Result<Vec<Vec<Tensor>>> {
    if inputs.is_empty() {
        return Err(Error::Argument("cannot probe an empty sequence".into()));
    }
    let batch = inputs[0].shape()[0];
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fresh = ThalNetState::fresh(cfg, batch);
    let mut state = StepState::from_values(&mut tape, &fresh);
    let mut out = Vec::new();
    for token in inputs {
        let x = tape.leaf(token.clone());
        for _ in 0..cfg.steps_per_token {
            let (next, _) = thalnet_step(&mut tape, &bound, cfg, tp, &state, Some(x))?;
            out.push(
                next.features
                    .iter()
                    .map(|&f| tape.value(f).clone())
                    .collect(),
            );
            state = next;
        }
    }
    Ok(out)
}

// ── Baseline step and unroll ─────────────────────────────────────────────

/// One sub-step of the stacked GRU: layer k feeds layer k+1 within the step.
pub fn baseline_step(
    tape: &mut Tape,
    bound: &[NodeId],
    bp: &BaselineParams,
    hidden: &[NodeId],
    x: NodeId,
) -> Result<(Vec<NodeId>, NodeId)> {
    let mut new_hidden = Vec::with_capacity(bp.layers.len());
    let mut current = x;
    for (p, &h) in bp.layers.iter().zip(hidden) {
        let h_next = gru_step(tape, bound, p, current, h)?;
        new_hidden.push(h_next);
        current = h_next;
    }
    let logits = ff_layer(tape, bound, &bp.head, current, Activation::Identity)?;
    Ok((new_hidden, logits))
}

pub fn baseline_unroll(
    tape: &mut Tape,
    bound: &[NodeId],
    cfg: &BaselineConfig,
    bp: &BaselineParams,
    initial: &BaselineState,
    inputs: &[Tensor],
    loss_spec: &LossSpec,
) -> Result<Unrolled> {
    if inputs.is_empty() {
        return Err(Error::Argument("unroll over an empty sequence".into()));
    }
    let batch = initial
        .hidden
        .first()
        .map(|h| h.shape()[0])
        .ok_or_else(|| Error::Config("baseline state has no layers".into()))?;
    if initial.hidden.len() != cfg.layer_sizes.len()
        || initial
            .hidden
            .iter()
            .zip(&cfg.layer_sizes)
            .any(|(h, &s)| h.shape() != [batch, s])
    {
        return Err(Error::Config("state does not match model config".into()));
    }
    for t in inputs {
        if t.shape() != [batch, cfg.input_size] {
            return Err(Error::Argument(format!(
                "input token shape {:?} does not match [batch={batch}, {}]",
                t.shape(),
                cfg.input_size
            )));
        }
    }
    check_loss_spec(loss_spec, inputs.len(), batch)?;

    let mut hidden: Vec<NodeId> = initial.hidden.iter().map(|h| tape.leaf(h.clone())).collect();
    let mut steps = 0;
    let mut predictions = Vec::with_capacity(inputs.len());
    for token in inputs {
        let x = tape.leaf(token.clone());
        let mut logits = 0;
        for _ in 0..cfg.steps_per_token {
            let (next, y) = baseline_step(tape, bound, bp, &hidden, x)?;
            hidden = next;
            logits = y;
            steps += 1;
        }
        predictions.push(logits);
    }

    let (loss, logits) = apply_loss(tape, loss_spec, &predictions)?;
    let final_state = BaselineState {
        hidden: hidden.iter().map(|&h| tape.value(h).clone()).collect(),
    };
    Ok(Unrolled {
        loss,
        logits,
        final_state: NetworkState::Baseline(final_state),
        steps,
    })
}

// ── Unified network handle ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetworkConfig {
    ThalNet(ThalNetConfig),
    Baseline(BaselineConfig),
}

#[derive(Debug, Clone)]
pub enum NetworkParams {
    ThalNet(ThalNetParams),
    Baseline(BaselineParams),
}

#[derive(Debug, Clone)]
pub enum NetworkState {
    ThalNet(ThalNetState),
    Baseline(BaselineState),
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetworkConfig::ThalNet(c) => c.validate(),
            NetworkConfig::Baseline(c) => c.validate(),
        }
    }

    pub fn total_param_count(&self) -> usize {
        match self {
            NetworkConfig::ThalNet(c) => c.total_param_count(),
            NetworkConfig::Baseline(c) => c.total_param_count(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            NetworkConfig::ThalNet(c) => c.classes,
            NetworkConfig::Baseline(c) => c.classes,
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            NetworkConfig::ThalNet(c) => c.input_size(),
            NetworkConfig::Baseline(c) => c.input_size,
        }
    }

    pub fn steps_per_token(&self) -> usize {
        match self {
            NetworkConfig::ThalNet(c) => c.steps_per_token,
            NetworkConfig::Baseline(c) => c.steps_per_token,
        }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
        Ok(match self {
            NetworkConfig::ThalNet(c) => NetworkParams::ThalNet(init_thalnet(params, c, rng)?),
            NetworkConfig::Baseline(c) => NetworkParams::Baseline(init_baseline(params, c, rng)?),
        })
    }

    pub fn fresh_state(&self, batch: usize) -> NetworkState {
        match self {
            NetworkConfig::ThalNet(c) => NetworkState::ThalNet(ThalNetState::fresh(c, batch)),
            NetworkConfig::Baseline(c) => NetworkState::Baseline(BaselineState::fresh(c, batch)),
        }
    }

    pub fn unroll(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        params: &NetworkParams,
        initial: &NetworkState,
        inputs: &[Tensor],
        loss_spec: &LossSpec,
    ) -> Result<Unrolled> {
        match (self, params, initial) {
            (NetworkConfig::ThalNet(c), NetworkParams::ThalNet(p), NetworkState::ThalNet(s)) => {
                thalnet_unroll(tape, bound, c, p, s, inputs, loss_spec)
            }
            (NetworkConfig::Baseline(c), NetworkParams::Baseline(p), NetworkState::Baseline(s)) => {
                baseline_unroll(tape, bound, c, p, s, inputs, loss_spec)
            }
            _ => Err(Error::Config("state does not match model config".into())),
        }
    }
}

/// Convenience constructor for uniform test configs.
#[allow(clippy::too_many_arguments)]
pub fn small_thalnet(
    design: Design,
    reader: ReaderVariant,
    module_count: usize,
    base_width: usize,
    context_size: usize,
    input_size: usize,
    classes: usize,
    steps_per_token: usize,
) -> ThalNetConfig {
    let sizes = |w: usize| -> Vec<usize> {
        match design {
            Design::Ff => vec![w, w],
            Design::Gru => vec![w],
            Design::FfGru => vec![w, 2 * w],
            Design::GruFf => vec![2 * w, w],
            Design::FfGruFf => vec![w, 2 * w, w],
        }
    };
    let modules = (0..module_count)
        .map(|i| ModuleSpec {
            design,
            layer_sizes: sizes(base_width),
            context_size,
            input_size: if i == 0 { input_size } else { 0 },
        })
        .collect();
    ThalNetConfig {
        modules,
        reader,
        steps_per_token,
        classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn toy_config(reader: ReaderVariant) -> ThalNetConfig {
        small_thalnet(Design::Gru, reader, 3, 4, 3, 2, 3, 2)
    }

    #[test]
    fn config_validation_rejects_bad_layouts() {
        let mut cfg = toy_config(ReaderVariant::Linear);
        cfg.modules.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = toy_config(ReaderVariant::Linear);
        cfg.modules[1].input_size = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = toy_config(ReaderVariant::Linear);
        cfg.modules[0].input_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn total_param_count_matches_registered_scalars() {
        let mut r = rng(1);
        for design in Design::ALL {
            for reader in ReaderVariant::ALL {
                let cfg = small_thalnet(design, reader, 3, 4, 3, 2, 5, 1);
                let mut ps = ParamSet::new();
                init_thalnet(&mut ps, &cfg, &mut r).unwrap();
                assert_eq!(
                    ps.scalar_count(),
                    cfg.total_param_count(),
                    "{} / {}",
                    design.name(),
                    reader.name()
                );
            }
        }
    }

    #[test]
    fn first_substep_output_ignores_task_input() {
        // With fresh state, the output module sees only zero context and
        // zero hidden at sub-step 1, so its logits cannot depend on x yet.
        let mut r = rng(2);
        let cfg = toy_config(ReaderVariant::Linear);
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        // A nonzero head shows dependence if there were any.
        *ps.value_mut(tp.head.w) =
            rand_tensor(&mut r, ps.value(tp.head.w).shape().to_vec().as_slice());

        let run = |x: Tensor, ps: &ParamSet| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let fresh = ThalNetState::fresh(&cfg, 2);
            let state = StepState::from_values(&mut tape, &fresh);
            let xi = tape.leaf(x);
            let (_, y) = thalnet_step(&mut tape, &bound, &cfg, &tp, &state, Some(xi)).unwrap();
            tape.value(y).data().to_vec()
        };
        let y1 = run(rand_tensor(&mut r, &[2, 2]), &ps);
        let y2 = run(rand_tensor(&mut r, &[2, 2]), &ps);
        assert_eq!(y1, y2);
    }

    #[test]
    fn module_evaluation_order_does_not_change_values() {
        let mut r = rng(3);
        for reader in ReaderVariant::ALL {
            let cfg = toy_config(reader);
            let mut ps = ParamSet::new();
            let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
            let x = rand_tensor(&mut r, &[2, 2]);
            // Advance one step first so features and center are nonzero.
            let run = |order: &[usize]| -> (Vec<f64>, Vec<f64>) {
                let mut tape = Tape::new();
                let bound = ps.bind(&mut tape);
                let fresh = ThalNetState::fresh(&cfg, 2);
                let state = StepState::from_values(&mut tape, &fresh);
                let xi = tape.leaf(x.clone());
                let (mid, _) =
                    thalnet_step(&mut tape, &bound, &cfg, &tp, &state, Some(xi)).unwrap();
                let (next, y) =
                    thalnet_step_ordered(&mut tape, &bound, &cfg, &tp, &mid, Some(xi), order)
                        .unwrap();
                (
                    tape.value(y).data().to_vec(),
                    tape.value(next.center).data().to_vec(),
                )
            };
            let (y_fwd, c_fwd) = run(&[0, 1, 2]);
            let (y_rev, c_rev) = run(&[2, 1, 0]);
            let (y_mix, c_mix) = run(&[1, 2, 0]);
            assert!(y_fwd.iter().zip(&y_rev).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(c_fwd.iter().zip(&c_rev).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(y_fwd.iter().zip(&y_mix).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(c_fwd.iter().zip(&c_mix).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn single_gru_module_with_linear_reading_matches_hand_built_network() {
        // With one GRU module and linear reading, the step degenerates to
        // h_t = GRU([W·h_{t−1}, x_t], h_{t−1}): the context is a linear map
        // of the module's own previous features.
        let mut r = rng(4);
        let cfg = ThalNetConfig {
            modules: vec![ModuleSpec {
                design: Design::Gru,
                layer_sizes: vec![5],
                context_size: 3,
                input_size: 2,
            }],
            reader: ReaderVariant::Linear,
            steps_per_token: 1,
            classes: 4,
        };
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        let ReaderParams::Linear { w: reader_w } = tp.readers[0] else {
            unreachable!()
        };
        let crate::cells::StageParams::Gru(gru) = tp.modules[0].stages[0] else {
            unreachable!()
        };

        let tokens: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut r, &[2, 2])).collect();

        // ThalNet path.
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = ThalNetState::fresh(&cfg, 2);
        let mut state = StepState::from_values(&mut tape, &fresh);
        let mut thal_logits = Vec::new();
        for tok in &tokens {
            let xi = tape.leaf(tok.clone());
            let (next, y) = thalnet_step(&mut tape, &bound, &cfg, &tp, &state, Some(xi)).unwrap();
            state = next;
            thal_logits.push(tape.value(y).data().to_vec());
        }

        // Hand-built equivalent on a separate tape.
        let mut tape2 = Tape::new();
        let bound2 = ps.bind(&mut tape2);
        let mut h = tape2.leaf(Tensor::zeros(&[2, 5]));
        let mut hand_logits = Vec::new();
        for tok in &tokens {
            let xi = tape2.leaf(tok.clone());
            let ctx = tape2.matmul(h, bound2[reader_w]).unwrap();
            let inp = tape2.concat(&[ctx, xi]).unwrap();
            h = gru_step(&mut tape2, &bound2, &gru, inp, h).unwrap();
            let y = ff_layer(&mut tape2, &bound2, &tp.head, h, Activation::Identity).unwrap();
            hand_logits.push(tape2.value(y).data().to_vec());
        }

        for (a, b) in thal_logits.iter().zip(&hand_logits) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn unroll_counts_steps_and_emits_one_classification_logit() {
        let mut r = rng(5);
        let cfg = small_thalnet(Design::FfGruFf, ReaderVariant::WeightNorm, 4, 3, 3, 28, 10, 2);
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        let inputs: Vec<Tensor> = (0..28).map(|_| rand_tensor(&mut r, &[2, 28])).collect();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = ThalNetState::fresh(&cfg, 2);
        let out = thalnet_unroll(
            &mut tape,
            &bound,
            &cfg,
            &tp,
            &fresh,
            &inputs,
            &LossSpec::ClassifyLast(vec![3, 7]),
        )
        .unwrap();
        assert_eq!(out.steps, 56);
        assert_eq!(out.logits.len(), 1);
        assert_eq!(tape.value(out.logits[0]).shape(), &[2, 10]);
    }

    #[test]
    fn untrained_loss_is_log_classes_exactly_with_zero_head() {
        let mut r = rng(6);
        let cfg = small_thalnet(Design::Gru, ReaderVariant::Linear, 2, 4, 3, 3, 7, 1);
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        let inputs = vec![rand_tensor(&mut r, &[3, 3])];
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = ThalNetState::fresh(&cfg, 3);
        let out = thalnet_unroll(
            &mut tape,
            &bound,
            &cfg,
            &tp,
            &fresh,
            &inputs,
            &LossSpec::ClassifyLast(vec![0, 3, 6]),
        )
        .unwrap();
        assert!((tape.value(out.loss).item() - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unroll_gradients_match_finite_differences_on_toy_config() {
        let mut r = rng(7);
        let cfg = small_thalnet(Design::FfGru, ReaderVariant::Linear, 2, 2, 3, 2, 3, 2);
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        let inputs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 2])).collect();
        let targets = vec![1, 2];

        let eval = |ps: &ParamSet| -> crate::Result<f64> {
            let mut tape = Tape::new();
            let bound = ps.bind(&mut tape);
            let fresh = ThalNetState::fresh(&cfg, 2);
            let out = thalnet_unroll(
                &mut tape,
                &bound,
                &cfg,
                &tp,
                &fresh,
                &inputs,
                &LossSpec::ClassifyLast(targets.clone()),
            )?;
            Ok(tape.value(out.loss).item())
        };

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = ThalNetState::fresh(&cfg, 2);
        let out = thalnet_unroll(
            &mut tape,
            &bound,
            &cfg,
            &tp,
            &fresh,
            &inputs,
            &LossSpec::ClassifyLast(targets.clone()),
        )
        .unwrap();
        let grads = tape.backward(out.loss).unwrap();
        let analytic: Vec<Tensor> = bound.iter().map(|&id| grads.wrt(&tape, id)).collect();
        let numeric = check::central_difference(&mut ps, eval, 1e-5).unwrap();
        let (err, ti, ei) = check::max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "worst rel err {err} at tensor {ti} element {ei}");
    }

    #[test]
    fn next_byte_loss_averages_per_token_cross_entropies() {
        let mut r = rng(8);
        let cfg = small_thalnet(Design::Gru, ReaderVariant::Linear, 2, 3, 2, 4, 4, 1);
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        // Nonzero head so per-token losses differ.
        let head_shape = ps.value(tp.head.w).shape().to_vec();
        *ps.value_mut(tp.head.w) = rand_tensor(&mut r, &head_shape);
        let inputs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[2, 4])).collect();
        let targets = vec![vec![0, 1], vec![2, 3], vec![1, 0]];

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = ThalNetState::fresh(&cfg, 2);
        let out = thalnet_unroll(
            &mut tape,
            &bound,
            &cfg,
            &tp,
            &fresh,
            &inputs,
            &LossSpec::NextByte(targets.clone()),
        )
        .unwrap();
        assert_eq!(out.logits.len(), 3);

        let mut manual = 0.0;
        for (t, &l) in out.logits.iter().enumerate() {
            let mut t2 = Tape::new();
            let leaf = t2.leaf(tape.value(l).clone());
            let ce = t2.cross_entropy(leaf, &targets[t]).unwrap();
            manual += t2.value(ce).item();
            let _ = t;
        }
        manual /= 3.0;
        assert!((tape.value(out.loss).item() - manual).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_and_mismatched_state_are_rejected() {
        let mut r = rng(9);
        let cfg = toy_config(ReaderVariant::Linear);
        let mut ps = ParamSet::new();
        let tp = init_thalnet(&mut ps, &cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = ThalNetState::fresh(&cfg, 2);
        assert!(matches!(
            thalnet_unroll(
                &mut tape,
                &bound,
                &cfg,
                &tp,
                &fresh,
                &[],
                &LossSpec::ClassifyLast(vec![0, 0])
            ),
            Err(Error::Argument(_))
        ));

        let other = toy_config(ReaderVariant::Linear);
        let mut bad = ThalNetState::fresh(&other, 2);
        bad.center = Tensor::zeros(&[2, 1]);
        let inputs = vec![rand_tensor(&mut r, &[2, 2])];
        assert!(matches!(
            thalnet_unroll(
                &mut tape,
                &bound,
                &cfg,
                &tp,
                &bad,
                &inputs,
                &LossSpec::ClassifyLast(vec![0, 0])
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn baseline_zero_weights_keep_hidden_at_zero() {
        let cfg = BaselineConfig {
            layer_sizes: vec![3, 3, 3, 3],
            steps_per_token: 1,
            classes: 4,
            input_size: 2,
        };
        let mut ps = ParamSet::new();
        let mut r = rng(10);
        let bp = init_baseline(&mut ps, &cfg, &mut r).unwrap();
        for pid in 0..ps.len() {
            let shape = ps.value(pid).shape().to_vec();
            *ps.value_mut(pid) = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = BaselineState::fresh(&cfg, 2);
        let out = baseline_unroll(
            &mut tape,
            &bound,
            &cfg,
            &bp,
            &fresh,
            &(0..3).map(|_| rand_tensor(&mut r, &[2, 2])).collect::<Vec<_>>(),
            &LossSpec::ClassifyLast(vec![0, 1]),
        )
        .unwrap();
        let NetworkState::Baseline(fin) = out.final_state else {
            unreachable!()
        };
        for h in &fin.hidden {
            assert!(h.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_layer_baseline_equals_plain_gru_classifier() {
        let mut r = rng(11);
        let cfg = BaselineConfig {
            layer_sizes: vec![5],
            steps_per_token: 1,
            classes: 3,
            input_size: 4,
        };
        let mut ps = ParamSet::new();
        let bp = init_baseline(&mut ps, &cfg, &mut r).unwrap();
        let tokens: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut r, &[2, 4])).collect();

        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let fresh = BaselineState::fresh(&cfg, 2);
        let out = baseline_unroll(
            &mut tape,
            &bound,
            &cfg,
            &bp,
            &fresh,
            &tokens,
            &LossSpec::ClassifyLast(vec![0, 2]),
        )
        .unwrap();

        let mut tape2 = Tape::new();
        let bound2 = ps.bind(&mut tape2);
        let mut h = tape2.leaf(Tensor::zeros(&[2, 5]));
        for tok in &tokens {
            let xi = tape2.leaf(tok.clone());
            h = gru_step(&mut tape2, &bound2, &bp.layers[0], xi, h).unwrap();
        }
        let y = ff_layer(&mut tape2, &bound2, &bp.head, h, Activation::Identity).unwrap();
        for (a, b) in tape.value(out.logits[0]).data().iter().zip(tape2.value(y).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn large_gru_baseline_param_count_is_about_fourteen_million() {
        let cfg = BaselineConfig {
            layer_sizes: vec![2000],
            steps_per_token: 1,
            classes: 256,
            input_size: 256,
        };
        // 3·((256+2000+1)·2000) = 13,542,000 plus a (2000+1)·256 head.
        assert_eq!(cfg.total_param_count(), 13_542_000 + 512_256);
        assert!((cfg.total_param_count() as f64 - 14e6).abs() / 14e6 < 0.01);
    }

    #[test]
    fn fresh_state_is_all_zero() {
        let cfg = toy_config(ReaderVariant::FastGaussian);
        let st = ThalNetState::fresh(&cfg, 3);
        assert!(st.center.data().iter().all(|&v| v == 0.0));
        for m in &st.modules {
            assert!(m.features.data().iter().all(|&v| v == 0.0));
            if let Some(h) = &m.hidden {
                assert!(h.data().iter().all(|&v| v == 0.0));
            }
        }
    }
}
