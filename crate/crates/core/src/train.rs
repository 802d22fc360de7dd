//! Teacher-forced cross-entropy training with RMSprop or AdaDelta.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{FeatureSequence, Model};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::EOS_ID;

/// Builds the summed cross-entropy of `reference` followed by `<eos>` under
/// teacher forcing. Returns the loss node and the number of predicted tokens.
pub fn sequence_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    reference: &[usize],
) -> Result<(Var, usize)> {
    let terms = sequence_loss_terms(g, model, features, reference)?;
    Ok((g.add_all(&terms)?, terms.len()))
}

/// The per-position cross-entropy terms `-log P(y_i | ...)`, `<eos>` last.
pub fn sequence_loss_terms<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    reference: &[usize],
) -> Result<Vec<Var>> {
    if reference.is_empty() {
        return Err(Error::Contract("reference caption is empty".into()));
    }
    let sess = model.encode(g, features)?;
    let mut state = model.initial_state(g, &sess)?;
    let mut terms = Vec::with_capacity(reference.len() + 1);
    for &tok in reference.iter().chain(std::iter::once(&EOS_ID)) {
        let step = model.predict(g, &sess, &state)?;
        terms.push(g.cross_entropy(step.logits, tok)?);
        if tok != EOS_ID {
            state = model.advance(g, &sess, &state, tok, &step)?;
        }
    }
    Ok(terms)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLoss {
    pub sum: f64,
    pub tokens: usize,
}

impl SequenceLoss {
    pub fn mean(&self) -> f64 {
        self.sum / self.tokens as f64
    }
}

pub fn sequence_loss<T: Scalar>(
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    reference: &[usize],
) -> Result<SequenceLoss> {
    let mut g = Graph::new(model.params());
    let (loss, tokens) = sequence_loss_graph(&mut g, model, features, reference)?;
    Ok(SequenceLoss {
        sum: g.value(loss).item().as_f64(),
        tokens,
    })
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_gradients<T: Scalar>(
    model: &Model<T>,
    features: &[FeatureSequence<T>],
    reference: &[usize],
) -> Result<(SequenceLoss, Gradients<T>)> {
    let mut g = Graph::new(model.params());
    let (loss, tokens) = sequence_loss_graph(&mut g, model, features, reference)?;
    let grads = g.backward(loss)?;
    Ok((
        SequenceLoss {
            sum: g.value(loss).item().as_f64(),
            tokens,
        },
        grads,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Rmsprop,
    Adadelta,
}

impl OptimizerKind {
    pub const ALLOWED: &'static str = "rmsprop, adadelta";
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rmsprop" => Ok(Self::Rmsprop),
            "adadelta" => Ok(Self::Adadelta),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (allowed: {})",
                Self::ALLOWED
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rmsprop => "rmsprop",
            Self::Adadelta => "adadelta",
        })
    }
}

fn check_shapes<T: Scalar>(params: &ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
    if grads.len() != params.len() {
        return dim_err("optimizer", &[params.len()], &[grads.len()]);
    }
    for (id, g) in grads.iter() {
        if g.shape() != params.get(id).shape() {
            return dim_err("optimizer", params.get(id).shape(), g.shape());
        }
    }
    Ok(())
}

fn zeros_like<T: Scalar>(params: &ParamStore<T>) -> Vec<Tensor<T>> {
    params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect()
}

/// `ms ← ρ ms + (1−ρ) g²;  θ ← θ − lr g / √(ms + ε)` with `g` including
/// `λ θ`.
#[derive(Clone, Debug)]
pub struct Rmsprop<T> {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub l2: f64,
    ms: Vec<Tensor<T>>,
}

impl<T: Scalar> Rmsprop<T> {
    pub fn new(lr: f64, rho: f64, eps: f64, l2: f64) -> Self {
        Self {
            lr,
            rho,
            eps,
            l2,
            ms: Vec::new(),
        }
    }

    pub fn mean_square(&self) -> &[Tensor<T>] {
        &self.ms
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        check_shapes(params, grads)?;
        if self.ms.is_empty() {
            self.ms = zeros_like(params);
        }
        let (lr, rho, eps, l2) = (T::lit(self.lr), T::lit(self.rho), T::lit(self.eps), T::lit(self.l2));
        let one = T::one();
        for id in params.ids().collect::<Vec<_>>() {
            let grad = grads.get(id).map(Tensor::data);
            let theta = params.get_mut(id).data_mut();
            for (j, (w, ms)) in theta.iter_mut().zip(self.ms[id.0].data_mut()).enumerate() {
                let g = grad.map_or(T::zero(), |d| d[j]) + l2 * *w;
                *ms = rho * *ms + (one - rho) * g * g;
                *w -= lr * g / (*ms + eps).sqrt();
            }
        }
        Ok(())
    }
}

/// `Eg ← ρ Eg + (1−ρ) g²;  Δ = −√(EΔ + ε)/√(Eg + ε) g;  EΔ ← ρ EΔ + (1−ρ) Δ²`.
#[derive(Clone, Debug)]
pub struct Adadelta<T> {
    pub rho: f64,
    pub eps: f64,
    pub l2: f64,
    eg: Vec<Tensor<T>>,
    edx: Vec<Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(rho: f64, eps: f64, l2: f64) -> Self {
        Self {
            rho,
            eps,
            l2,
            eg: Vec::new(),
            edx: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        check_shapes(params, grads)?;
        if self.eg.is_empty() {
            self.eg = zeros_like(params);
            self.edx = zeros_like(params);
        }
        let (rho, eps, l2) = (T::lit(self.rho), T::lit(self.eps), T::lit(self.l2));
        let one = T::one();
        for id in params.ids().collect::<Vec<_>>() {
            let grad = grads.get(id).map(Tensor::data);
            let theta = params.get_mut(id).data_mut();
            let eg = self.eg[id.0].data_mut();
            let edx = self.edx[id.0].data_mut();
            for j in 0..theta.len() {
                let g = grad.map_or(T::zero(), |d| d[j]) + l2 * theta[j];
                eg[j] = rho * eg[j] + (one - rho) * g * g;
                let dx = -((edx[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g;
                edx[j] = rho * edx[j] + (one - rho) * dx * dx;
                theta[j] += dx;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Rmsprop(Rmsprop<T>),
    Adadelta(Adadelta<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::Rmsprop => Self::Rmsprop(Rmsprop::new(
                cfg.learning_rate.unwrap_or(1e-3),
                cfg.rho.unwrap_or(0.9),
                cfg.epsilon.unwrap_or(1e-8),
                cfg.l2,
            )),
            OptimizerKind::Adadelta => Self::Adadelta(Adadelta::new(
                cfg.rho.unwrap_or(0.95),
                cfg.epsilon.unwrap_or(1e-6),
                cfg.l2,
            )),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        match self {
            Self::Rmsprop(o) => o.step(params, grads),
            Self::Adadelta(o) => o.step(params, grads),
        }
    }
}

fn default_batch_size() -> usize {
    16
}

fn default_clip_norm() -> f64 {
    5.0
}

fn default_l2() -> f64 {
    1e-6
}

/// Training hyperparameters. Unset optimizer constants take the defaults of
/// the chosen optimizer (RMSprop: lr 1e-3, ρ 0.9, ε 1e-8; AdaDelta: ρ 0.95,
/// ε 1e-6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: Option<f64>,
    pub rho: Option<f64>,
    pub epsilon: Option<f64>,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: default_batch_size(),
            seed: 0,
            clip_norm: default_clip_norm(),
            optimizer: OptimizerKind::default(),
            learning_rate: None,
            rho: None,
            epsilon: None,
            l2: default_l2(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm >= 0.0 && self.l2 >= 0.0) {
            return Err(Error::Config("clip_norm and l2 must be non-negative".into()));
        }
        if let Some(rho) = self.rho {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::Config(format!("rho must lie in [0, 1), got {rho}")));
            }
        }
        Ok(())
    }
}

/// One training or validation example.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub id: String,
    pub features: Vec<FeatureSequence<T>>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub best: Model<T>,
    pub best_epoch: usize,
    pub last: Model<T>,
    pub log: Vec<EpochLog>,
}

/// Mean per-token loss over `samples`. Per-sample work runs in parallel and is
/// summed in sample order.
pub fn corpus_loss<T: Scalar>(model: &Model<T>, samples: &[Sample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate loss on an empty split".into()));
    }
    let losses = samples
        .par_iter()
        .map(|s| sequence_loss(model, &s.features, &s.tokens))
        .collect::<Result<Vec<_>>>()?;
    let sum: f64 = losses.iter().map(|l| l.sum).sum();
    let tokens: usize = losses.iter().map(|l| l.tokens).sum();
    Ok(sum / tokens as f64)
}

/// Called after every epoch with the log line, the current model and whether
/// it is the best so far by validation loss.
pub trait EpochHook<T> {
    fn epoch_end(&mut self, entry: &EpochLog, model: &Model<T>, is_best: bool) -> Result<()>;
}

impl<T, F: FnMut(&EpochLog, &Model<T>, bool) -> Result<()>> EpochHook<T> for F {
    fn epoch_end(&mut self, entry: &EpochLog, model: &Model<T>, is_best: bool) -> Result<()> {
        self(entry, model, is_best)
    }
}

/// Minibatch training. Each epoch visits the training samples in an order
/// drawn from `cfg.seed`; each minibatch gradient is the token-averaged sum of
/// per-sample gradients. The model with the lowest validation loss is kept.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &[Sample<T>],
    val_set: &[Sample<T>],
    cfg: &TrainConfig,
    hook: &mut dyn EpochHook<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::from_config(cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_tokens = 0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    loss_and_gradients(&model, &s.features, &s.tokens)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Gradients::empty(model.params().len());
            let mut batch_sum = 0.0;
            let mut batch_tokens = 0;
            for (loss, g) in &results {
                batch_sum += loss.sum;
                batch_tokens += loss.tokens;
                grads.accumulate(g);
            }
            if !batch_sum.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: batch_sum,
                });
            }
            grads.scale(T::one() / T::lit(batch_tokens as f64));
            if cfg.clip_norm > 0.0 {
                grads.clip_global_norm(T::lit(cfg.clip_norm));
            }
            opt.step(model.params_mut(), &grads)?;
            epoch_sum += batch_sum;
            epoch_tokens += batch_tokens;
        }
        let val_loss = corpus_loss(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: val_loss,
            });
        }
        let entry = EpochLog {
            epoch,
            train_loss: epoch_sum / epoch_tokens as f64,
            val_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        let is_best = best.as_ref().is_none_or(|(b, _, _)| val_loss < *b);
        if is_best {
            best = Some((val_loss, epoch, model.clone()));
        }
        log::info!(
            "epoch {epoch}: train {:.5} val {:.5}{}",
            entry.train_loss,
            entry.val_loss,
            if is_best { " *" } else { "" }
        );
        hook.epoch_end(&entry, &model, is_best)?;
        log.push(entry);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}
