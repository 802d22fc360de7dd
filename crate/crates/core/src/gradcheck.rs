//! Central finite-difference verification of analytic gradients.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderMode, EncoderSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::graph::{GradFault, Graph, Var};
use crate::model::{FeatureSequence, InitState, ModalityConfig, Model, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::train::sequence_loss_terms;
use crate::vocab::Vocabulary;

#[derive(Clone, Debug)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: Vec<ParamError>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares backpropagated gradients of the scalar built by `loss_fn` with
/// central differences `(f(θ+ε) - f(θ-ε)) / 2ε` for every element of every
/// parameter in `params`.
pub fn check_gradient<F>(params: &ParamStore<f64>, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    check_gradient_with(params, eps, None, None, loss_fn)
}

/// As [`check_gradient`], optionally restricted to `only` and with a
/// deliberately faulty backward rule on the analytic side.
pub fn check_gradient_with<F>(
    params: &ParamStore<f64>,
    eps: f64,
    only: Option<&[ParamId]>,
    fault: Option<GradFault>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    check_gradient_terms(params, eps, only, fault, |g| Ok(vec![loss_fn(g)?]))
}

/// Gradient check of `Σ_j f_j` where `loss_fn` returns the scalar terms
/// `f_j`. The numeric side sums the per-term differences
/// `(f_j(θ+ε) - f_j(θ-ε)) / 2ε`, so its resolution is set by the magnitude of
/// the individual terms rather than of their total.
pub fn check_gradient_terms<F>(
    params: &ParamStore<f64>,
    eps: f64,
    only: Option<&[ParamId]>,
    fault: Option<GradFault>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Vec<Var>>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let terms = loss_fn(&mut g)?;
        if terms.is_empty() {
            return Err(Error::EmptyInput("gradient check needs at least one loss term"));
        }
        terms
            .iter()
            .map(|&t| {
                let v = g.value(t);
                if v.len() != 1 {
                    return Err(Error::Contract(format!("loss term has shape {:?}, expected a scalar", v.shape())));
                }
                Ok(v.data()[0])
            })
            .collect()
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.iter().zip(&again).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Contract(format!(
            "loss function is not deterministic: {base:?} vs {again:?}"
        )));
    }

    let analytic = {
        let mut g = Graph::new(params);
        g.inject_fault(fault);
        let terms = loss_fn(&mut g)?;
        let loss = g.add_all(&terms)?;
        g.backward(loss)?
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => params.ids().collect(),
    };
    let mut work = params.clone();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut elements_checked = 0;
    for id in ids {
        let n = params.get(id).len();
        let mut worst = ParamError {
            name: params.name(id).to_string(),
            max_rel_error: 0.0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = plus
                .iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * eps))
                .sum::<f64>();
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || k == 0 {
                worst.max_rel_error = err;
                worst.index = k;
                worst.analytic = a;
                worst.numeric = numeric;
            }
            elements_checked += 1;
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param
        .iter()
        .map(|p| p.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        elements_checked,
    })
}

/// A tiny two-modality attention-fusion model for [`check_model_gradient`]:
/// an `image` stream through a projection encoder and an `audio` stream
/// through a BLSTM, every width equal to `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckSpec {
    pub dim: usize,
    pub frames: usize,
    pub words: usize,
    pub caption_len: usize,
    pub param_scale: f64,
    pub feature_scale: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ModelCheckSpec {
    fn default() -> Self {
        Self {
            dim: 4,
            frames: 5,
            words: 6,
            caption_len: 2,
            param_scale: 1.2,
            feature_scale: 1.0,
            eps: 1e-5,
            seed: 1,
        }
    }
}

impl ModelCheckSpec {
    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("gradient-check dim must be even and at least 2, got {}", self.dim)));
        }
        let d = self.dim;
        Ok(ModelConfig {
            modalities: vec![
                ModalityConfig {
                    name: "image".into(),
                    input_dim: d + 2,
                    encoder: EncoderSpec { mode: EncoderMode::Projection, units: d },
                },
                ModalityConfig {
                    name: "audio".into(),
                    input_dim: d + 1,
                    encoder: EncoderSpec { mode: EncoderMode::Blstm, units: d / 2 },
                },
            ],
            vocabulary: Vocabulary::from_words((0..self.words).map(|i| format!("w{i}")))?,
            fusion: FusionMode::Attention,
            embed_dim: d,
            decoder_cells: d,
            attention_dim: Some(d),
            modality_attention_dim: Some(d),
            pre_output_dim: Some(d),
            init_state: InitState::Zero,
            feed_content: false,
            init_scale: self.param_scale,
        })
    }
}

/// Gradient check of the teacher-forced caption loss over every parameter of
/// a randomly initialized model built from `spec`. Biases are randomized too
/// so that no gradient is trivially structured.
pub fn check_model_gradient(spec: &ModelCheckSpec, fault: Option<GradFault>) -> Result<GradCheckReport> {
    let config = spec.model_config()?;
    let mut model = Model::<f64>::new(config.clone(), spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let ps = model.params_mut();
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.get_mut(id).data_mut() {
            *v = rng.random_range(-spec.param_scale..spec.param_scale);
        }
    }
    let features: Vec<FeatureSequence<f64>> = config
        .modalities
        .iter()
        .map(|m| {
            let data = (0..spec.frames * m.input_dim)
                .map(|_| rng.random_range(-spec.feature_scale..spec.feature_scale))
                .collect();
            FeatureSequence::new(m.name.clone(), Tensor::matrix(spec.frames, m.input_dim, data)?)
        })
        .collect::<Result<_>>()?;
    let first_word = crate::vocab::RESERVED.len();
    let caption: Vec<usize> = (0..spec.caption_len)
        .map(|_| rng.random_range(first_word..config.vocabulary.len()))
        .collect();
    check_gradient_terms(model.params(), spec.eps, None, fault, |g| {
        sequence_loss_terms(g, &model, &features, &caption)
    })
}
