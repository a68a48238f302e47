//! Optimizers, gradient clipping, the training/evaluation loops, and the
//! metrics log.
//!
//! An [`Experiment`] bundles a network, a dataset, and the loop
//! hyperparameters. Training is single-threaded over batches: each batch
//! builds a fresh tape, unrolls the network, backpropagates, optionally
//! clips, and applies one optimizer step. Every epoch ends with a full pass
//! over the evaluation split, two appended metrics rows (train then eval),
//! and a checkpoint; the last two epoch checkpoints and the best one are
//! retained. A non-finite loss aborts the run after writing a diagnostic
//! checkpoint.

use std::f64::consts::LN_2;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::Design;
use crate::checkpoint::{self, Checkpoint};
use crate::data::{Dataset, Permutation, SequenceBatch, Split};
use crate::error::{Error, Result};
use crate::model::{
    small_thalnet, BaselineConfig, NetworkConfig, NetworkParams, NetworkState, ThalNetConfig,
};
use crate::numerics::{Tape, Tensor};
use crate::params::ParamSet;
use crate::routing::ReaderVariant;

// ── Optimizers ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s {
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected rmsprop or adam)"
            ))),
        }
    }
}

/// First-order optimizer with per-parameter accumulators. Slots are laid out
/// in parameter registration order and allocated on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// RMSProp mean-square decay.
    pub rho: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Optimizer {
        Optimizer {
            kind,
            lr,
            rho: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn rmsprop(lr: f64) -> Optimizer {
        Optimizer::new(OptimizerKind::RmsProp, lr)
    }

    pub fn adam(lr: f64) -> Optimizer {
        Optimizer::new(OptimizerKind::Adam, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One in-place update. `grads` must be in parameter registration order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.value(i).shape() {
                return Err(Error::Argument(format!(
                    "gradient {} has shape {:?} but parameter '{}' has {:?}",
                    i,
                    g.shape(),
                    params.get(i).name,
                    params.value(i).shape()
                )));
            }
        }
        if self.v.is_empty() {
            self.v = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            if self.kind == OptimizerKind::Adam {
                self.m = self.v.clone();
            }
        } else if self.v.len() != grads.len() {
            return Err(Error::Argument(
                "optimizer slots were built for a different parameter set".into(),
            ));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::RmsProp => {
                for (i, g) in grads.iter().enumerate() {
                    let v = self.v[i].data_mut();
                    let theta = params.value_mut(i).data_mut();
                    for (j, &gj) in g.data().iter().enumerate() {
                        v[j] = self.rho * v[j] + (1.0 - self.rho) * gj * gj;
                        theta[j] -= self.lr * gj / (v[j].sqrt() + self.epsilon);
                    }
                }
            }
            OptimizerKind::Adam => {
                let mc = 1.0 - self.beta1.powf(self.t as f64);
                let vc = 1.0 - self.beta2.powf(self.t as f64);
                for (i, g) in grads.iter().enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let theta = params.value_mut(i).data_mut();
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let m_hat = m[j] / mc;
                        let v_hat = v[j] / vc;
                        theta[j] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; otherwise leave them untouched. Returns the pre-clip norm.
pub fn clip_by_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Argument(format!(
            "max_norm must be positive, got {max_norm}"
        )));
    }
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

// ── Metrics ──────────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str = "epoch,step,split,loss,accuracy,bpc,seconds";

#[derive(Debug, Clone)]
pub struct Metrics {
    pub epoch: usize,
    pub step: u64,
    pub split: Split,
    /// Mean cross-entropy in nats.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub bpc: Option<f64>,
    pub seconds: f64,
}

impl Metrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:.6},{},{},{:.3}",
            self.epoch,
            self.step,
            self.split.name(),
            self.loss,
            opt(self.accuracy),
            opt(self.bpc),
            self.seconds
        )
    }
}

pub fn nats_to_bpc(nats: f64) -> f64 {
    nats / LN_2
}

/// Rows whose argmax logit (lowest index on ties) equals the label.
pub fn correct_count(logits: &Tensor, labels: &[usize]) -> usize {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(b, labels.len(), "one label per batch row");
    let mut correct = 0;
    for (row, &label) in labels.iter().enumerate() {
        let data = &logits.data()[row * c..(row + 1) * c];
        let mut arg = 0;
        for (j, &x) in data.iter().enumerate() {
            if x > data[arg] {
                arg = j;
            }
        }
        if arg == label {
            correct += 1;
        }
    }
    correct
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    correct_count(logits, labels) as f64 / labels.len() as f64
}

// ── Experiments ──────────────────────────────────────────────────────────

/// Everything a training run needs: the network, the data, and the loop
/// hyperparameters. Construct with [`Experiment::new`] and override fields.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub name: String,
    pub network: NetworkConfig,
    pub dataset: Dataset,
    pub out_dir: PathBuf,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Window length in bytes (language modeling only).
    pub seq_len: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Carry the final network state of one batch into the next within an
    /// epoch (language modeling only; forces sequential window order).
    /// Off by default: at small scales the carried state tends to saturate
    /// the recurrence early in training, after which gradients through the
    /// state vanish and the model stalls at the unigram floor.
    pub carry_state: bool,
    /// Replace [0,1] pixel scaling with (x − mean)/std over train statistics.
    pub standardize: bool,
    /// Pixel permutation applied to every image in both splits.
    pub permutation_seed: Option<u64>,
    pub max_train_batches: Option<usize>,
    pub max_eval_batches: Option<usize>,
    /// Stop after the first epoch whose eval accuracy reaches this value.
    pub target_eval_accuracy: Option<f64>,
    /// Stop after the first epoch whose eval BPC drops to this value.
    pub target_eval_bpc: Option<f64>,
    /// Print each metrics row as it is produced.
    pub verbose: bool,
    /// Key/value pairs echoed into every checkpoint.
    pub config_echo: Vec<(String, String)>,
}

impl Experiment {
    pub fn new(
        name: impl Into<String>,
        network: NetworkConfig,
        dataset: Dataset,
        out_dir: impl Into<PathBuf>,
    ) -> Experiment {
        Experiment {
            name: name.into(),
            network,
            dataset,
            out_dir: out_dir.into(),
            optimizer: OptimizerKind::RmsProp,
            learning_rate: 1e-3,
            batch_size: 50,
            epochs: 1,
            seq_len: 50,
            clip_norm: None,
            seed: 0,
            carry_state: false,
            standardize: false,
            permutation_seed: None,
            max_train_batches: None,
            max_eval_batches: None,
            target_eval_accuracy: None,
            target_eval_bpc: None,
            verbose: false,
            config_echo: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        if self.network.input_size() != self.dataset.input_features() {
            return Err(Error::Config(format!(
                "model expects {} input features but the dataset provides {}",
                self.network.input_size(),
                self.dataset.input_features()
            )));
        }
        if self.network.classes() != self.dataset.classes() {
            return Err(Error::Config(format!(
                "model predicts {} classes but the dataset has {}",
                self.network.classes(),
                self.dataset.classes()
            )));
        }
        match &self.dataset {
            Dataset::Classification(c) => {
                if self.carry_state {
                    return Err(Error::Config(
                        "carry_state only applies to language modeling".into(),
                    ));
                }
                if c.count(Split::Train) == 0 || c.count(Split::Eval) == 0 {
                    return Err(Error::Config("both splits need at least one image".into()));
                }
            }
            Dataset::LanguageModel(l) => {
                if self.permutation_seed.is_some() {
                    return Err(Error::Config(
                        "pixel permutations only apply to image tasks".into(),
                    ));
                }
                if self.standardize {
                    return Err(Error::Config(
                        "standardization only applies to image tasks".into(),
                    ));
                }
                if self.seq_len == 0 {
                    return Err(Error::Config("seq_len must be at least 1".into()));
                }
                if l.window_count(Split::Train, self.seq_len) == 0
                    || l.window_count(Split::Eval, self.seq_len) == 0
                {
                    return Err(Error::Config(format!(
                        "both byte streams must cover at least one window of {} bytes plus a target",
                        self.seq_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Fixed pixel permutation, when configured for a classification run.
    pub fn pixel_permutation(&self) -> Option<Permutation> {
        match (&self.dataset, self.permutation_seed) {
            (Dataset::Classification(c), Some(s)) => {
                Some(Permutation::from_seed(s, c.pixels_per_image()))
            }
            _ => None,
        }
    }

    /// Assemble one batch with this experiment's preprocessing settings.
    pub fn make_batch(
        &self,
        perm: Option<&Permutation>,
        split: Split,
        indices: &[usize],
    ) -> Result<SequenceBatch> {
        match &self.dataset {
            Dataset::Classification(c) => c.batch(split, indices, perm, self.standardize),
            Dataset::LanguageModel(l) => l.batch(split, self.seq_len, indices),
        }
    }

    /// Batches for one training epoch. Image indices and free-window orders
    /// are shuffled as a pure function of (seed, epoch); carried-state runs
    /// use the contiguous layout where row r of consecutive batches holds
    /// consecutive windows of the stream.
    fn train_plan(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut rng = epoch_rng(self.seed, epoch);
        let mut plan: Vec<Vec<usize>> = match &self.dataset {
            Dataset::Classification(c) => {
                let mut idx: Vec<usize> = (0..c.count(Split::Train)).collect();
                idx.shuffle(&mut rng);
                idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
            }
            Dataset::LanguageModel(l) => {
                let windows = l.window_count(Split::Train, self.seq_len);
                if self.carry_state {
                    let rows = self.batch_size.min(windows);
                    let chunk = windows / rows;
                    (0..chunk)
                        .map(|k| (0..rows).map(|r| r * chunk + k).collect())
                        .collect()
                } else {
                    let mut idx: Vec<usize> = (0..windows).collect();
                    idx.shuffle(&mut rng);
                    idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
                }
            }
        };
        if let Some(cap) = self.max_train_batches {
            plan.truncate(cap);
        }
        plan
    }

    fn eval_plan(&self) -> Vec<Vec<usize>> {
        let count = match &self.dataset {
            Dataset::Classification(c) => c.count(Split::Eval),
            Dataset::LanguageModel(l) => l.window_count(Split::Eval, self.seq_len),
        };
        let idx: Vec<usize> = (0..count).collect();
        let mut plan: Vec<Vec<usize>> =
            idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        if let Some(cap) = self.max_eval_batches {
            plan.truncate(cap);
        }
        plan
    }

    #[allow(clippy::too_many_arguments)]
    fn metrics(
        &self,
        epoch: usize,
        step: u64,
        split: Split,
        loss: f64,
        correct: usize,
        labeled: usize,
        start: &Instant,
    ) -> Metrics {
        let (accuracy, bpc) = match &self.dataset {
            Dataset::Classification(_) => (Some(correct as f64 / labeled as f64), None),
            Dataset::LanguageModel(_) => (None, Some(nats_to_bpc(loss))),
        };
        if let Some(b) = bpc {
            assert!(
                (b - loss / LN_2).abs() <= 1e-12,
                "bits per character must equal nats / ln 2"
            );
        }
        Metrics {
            epoch,
            step,
            split,
            loss,
            accuracy,
            bpc,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn state_batch(state: &NetworkState) -> usize {
    match state {
        NetworkState::ThalNet(s) => s.batch(),
        NetworkState::Baseline(s) => s.hidden[0].shape()[0],
    }
}

fn copy_values(dst: &mut ParamSet, src: &ParamSet) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Config(format!(
            "parameter set has {} tensors, expected {}",
            src.len(),
            dst.len()
        )));
    }
    for i in 0..dst.len() {
        let name = dst.get(i).name.clone();
        let j = src
            .index_of(&name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))?;
        if src.value(j).shape() != dst.value(i).shape() {
            return Err(Error::Config(format!(
                "parameter '{name}' has shape {:?}, expected {:?}",
                src.value(j).shape(),
                dst.value(i).shape()
            )));
        }
        *dst.value_mut(i) = src.value(j).clone();
    }
    Ok(())
}

/// Rebuild a bound parameter set from a checkpoint: initialize the network
/// layout (names and shapes), then overwrite every value from the snapshot.
pub fn restore(network: &NetworkConfig, ckpt: &Checkpoint) -> Result<(ParamSet, NetworkParams)> {
    let mut pset = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(ckpt.seed);
    let nparams = network.init(&mut pset, &mut rng)?;
    copy_values(&mut pset, &ckpt.params)?;
    Ok((pset, nparams))
}

// ── Training loop ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<Metrics>,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn train_experiment(exp: &Experiment) -> Result<TrainReport> {
    train_from(exp, None)
}

fn diagnostic_abort<T>(exp: &Experiment, pset: &ParamSet, step: u64, e: Error) -> Result<T> {
    if matches!(e, Error::NonFinite { .. }) {
        let snapshot = Checkpoint {
            seed: exp.seed,
            step,
            config: exp.config_echo.clone(),
            params: pset.clone(),
        };
        let _ = checkpoint::save(&exp.out_dir.join("diagnostic.ckpt"), &snapshot);
    }
    Err(e)
}

/// Run a full training experiment, optionally warm-starting from existing
/// parameter values (matched by name and shape).
pub fn train_from(exp: &Experiment, warm_start: Option<&ParamSet>) -> Result<TrainReport> {
    exp.validate()?;
    fs::create_dir_all(&exp.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.seed);
    let mut pset = ParamSet::new();
    let nparams = exp.network.init(&mut pset, &mut rng)?;
    assert_eq!(
        pset.scalar_count(),
        exp.network.total_param_count(),
        "registered scalars must match the configured parameter count"
    );
    if let Some(src) = warm_start {
        copy_values(&mut pset, src)?;
    }
    let perm = exp.pixel_permutation();
    let mut opt = Optimizer::new(exp.optimizer, exp.learning_rate);
    let start = Instant::now();
    let metrics_path = exp.out_dir.join("metrics.csv");
    let best_path = exp.out_dir.join("best.ckpt");
    let mut rows: Vec<Metrics> = Vec::new();
    let mut global_step: u64 = 0;
    let mut best: Option<(usize, f64)> = None;
    let mut stopped_early = false;
    let mut last_checkpoint = PathBuf::new();

    for epoch in 1..=exp.epochs {
        let mut carry: Option<NetworkState> = None;
        let mut loss_sum = 0.0;
        let mut row_count = 0.0;
        let mut correct = 0;
        let mut labeled = 0;
        for indices in &exp.train_plan(epoch) {
            let batch = exp.make_batch(perm.as_ref(), Split::Train, indices)?;
            let b = batch.batch();
            let mut tape = Tape::new();
            let bound = pset.bind(&mut tape);
            let initial = match carry.take() {
                Some(s) if state_batch(&s) == b => s,
                _ => exp.network.fresh_state(b),
            };
            let tokens = batch.token_tensors();
            let out = match exp.network.unroll(
                &mut tape,
                &bound,
                &nparams,
                &initial,
                &tokens,
                &batch.loss_spec(),
            ) {
                Ok(o) => o,
                Err(e) => return diagnostic_abort(exp, &pset, global_step, e),
            };
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                let e = Error::NonFinite {
                    op: "loss",
                    index: 0,
                };
                return diagnostic_abort(exp, &pset, global_step, e);
            }
            let grads = match tape.backward(out.loss) {
                Ok(g) => g,
                Err(e) => return diagnostic_abort(exp, &pset, global_step, e),
            };
            let mut gvec: Vec<Tensor> = bound.iter().map(|&id| grads.wrt(&tape, id)).collect();
            if let Some(max_norm) = exp.clip_norm {
                clip_by_global_norm(&mut gvec, max_norm)?;
            }
            opt.step(&mut pset, &gvec)?;
            global_step += 1;
            loss_sum += loss * b as f64;
            row_count += b as f64;
            if let Some(labels) = batch.class_labels() {
                correct += correct_count(tape.value(out.logits[0]), labels);
                labeled += labels.len();
            }
            if exp.carry_state {
                carry = Some(out.final_state);
            }
        }

        let train_row = exp.metrics(
            epoch,
            global_step,
            Split::Train,
            loss_sum / row_count,
            correct,
            labeled,
            &start,
        );
        if exp.verbose {
            println!("{}", train_row.csv_row());
        }
        rows.push(train_row);

        let eval_row = eval_pass(exp, &pset, &nparams, perm.as_ref(), epoch, global_step, &start)?;
        if exp.verbose {
            println!("{}", eval_row.csv_row());
        }
        rows.push(eval_row.clone());
        write_metrics(&metrics_path, &rows)?;

        let snapshot = Checkpoint {
            seed: exp.seed,
            step: global_step,
            config: exp.config_echo.clone(),
            params: pset.clone(),
        };
        let epoch_path = exp.out_dir.join(format!("epoch-{epoch:04}.ckpt"));
        checkpoint::save(&epoch_path, &snapshot)?;
        if epoch >= 3 {
            let stale = exp.out_dir.join(format!("epoch-{:04}.ckpt", epoch - 2));
            let _ = fs::remove_file(stale);
        }
        // Higher is better: accuracy for classification, −loss for LM.
        let score = eval_row.accuracy.unwrap_or(-eval_row.loss);
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((epoch, score));
            checkpoint::save(&best_path, &snapshot)?;
        }
        last_checkpoint = epoch_path;

        if let (Some(t), Some(a)) = (exp.target_eval_accuracy, eval_row.accuracy) {
            if a >= t {
                stopped_early = true;
            }
        }
        if let (Some(t), Some(b)) = (exp.target_eval_bpc, eval_row.bpc) {
            if b <= t {
                stopped_early = true;
            }
        }
        if stopped_early {
            break;
        }
    }

    Ok(TrainReport {
        metrics: rows,
        stopped_early,
        best_epoch: best.expect("at least one epoch ran").0,
        steps: global_step,
        final_checkpoint: last_checkpoint,
        best_checkpoint: best_path,
        metrics_path,
    })
}

fn write_metrics(path: &Path, rows: &[Metrics]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn eval_pass(
    exp: &Experiment,
    pset: &ParamSet,
    nparams: &NetworkParams,
    perm: Option<&Permutation>,
    epoch: usize,
    step: u64,
    start: &Instant,
) -> Result<Metrics> {
    let mut loss_sum = 0.0;
    let mut row_count = 0.0;
    let mut correct = 0;
    let mut labeled = 0;
    for indices in &exp.eval_plan() {
        let batch = exp.make_batch(perm, Split::Eval, indices)?;
        let b = batch.batch();
        let mut tape = Tape::new();
        let bound = pset.bind(&mut tape);
        let initial = exp.network.fresh_state(b);
        let out = exp.network.unroll(
            &mut tape,
            &bound,
            nparams,
            &initial,
            &batch.token_tensors(),
            &batch.loss_spec(),
        )?;
        loss_sum += tape.value(out.loss).item() * b as f64;
        row_count += b as f64;
        if let Some(labels) = batch.class_labels() {
            correct += correct_count(tape.value(out.logits[0]), labels);
            labeled += labels.len();
        }
    }
    Ok(exp.metrics(
        epoch,
        step,
        Split::Eval,
        loss_sum / row_count,
        correct,
        labeled,
        start,
    ))
}

/// Evaluate a stored checkpoint on one split without touching parameters.
pub fn evaluate(
    exp: &Experiment,
    pset: &ParamSet,
    nparams: &NetworkParams,
) -> Result<Metrics> {
    exp.validate()?;
    let perm = exp.pixel_permutation();
    eval_pass(exp, pset, nparams, perm.as_ref(), 0, 0, &Instant::now())
}

pub fn evaluate_checkpoint(exp: &Experiment, ckpt_path: &Path) -> Result<Metrics> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let (pset, nparams) = restore(&exp.network, &ckpt)?;
    let perm = exp.pixel_permutation();
    eval_pass(
        exp,
        &pset,
        &nparams,
        perm.as_ref(),
        0,
        ckpt.step,
        &Instant::now(),
    )
}

// ── Budget search ────────────────────────────────────────────────────────

/// Largest uniform module scale whose total parameter count fits the budget.
/// The scale knob multiplies the per-design canonical stage widths used by
/// [`small_thalnet`]; all modules stay identical.
#[allow(clippy::too_many_arguments)]
pub fn budget_search(
    design: Design,
    reader: ReaderVariant,
    module_count: usize,
    context_size: usize,
    input_size: usize,
    classes: usize,
    steps_per_token: usize,
    budget: usize,
) -> Result<ThalNetConfig> {
    let make = |w: usize| {
        small_thalnet(
            design,
            reader,
            module_count,
            w,
            context_size,
            input_size,
            classes,
            steps_per_token,
        )
    };
    if make(1).total_param_count() > budget {
        return Err(Error::Config(format!(
            "budget {budget} is below the minimal model ({} parameters)",
            make(1).total_param_count()
        )));
    }
    let mut w = 1;
    while make(w + 1).total_param_count() <= budget {
        w += 1;
    }
    Ok(make(w))
}

/// Largest uniform hidden size for a stacked-GRU baseline within the budget.
pub fn budget_search_baseline(
    layers: usize,
    input_size: usize,
    classes: usize,
    steps_per_token: usize,
    budget: usize,
) -> Result<BaselineConfig> {
    let make = |h: usize| BaselineConfig {
        layer_sizes: vec![h; layers],
        steps_per_token,
        classes,
        input_size,
    };
    if make(1).total_param_count() > budget {
        return Err(Error::Config(format!(
            "budget {budget} is below the minimal model ({} parameters)",
            make(1).total_param_count()
        )));
    }
    let mut h = 1;
    while make(h + 1).total_param_count() <= budget {
        h += 1;
    }
    Ok(make(h))
}
