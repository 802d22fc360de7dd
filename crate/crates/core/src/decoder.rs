//! Word embedding, decoder state update and the output distribution.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lstm::{lstm_step, LstmWeights};
use crate::params::ParamId;
use crate::scalar::Scalar;

/// Decoder recurrent state `s_i` (hidden and memory cell) after consuming
/// `index` input words.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub hidden: Var,
    pub cell: Var,
    pub index: usize,
}

/// Row `token` of the embedding matrix `E: [|V|, e]`.
pub fn embed<T: Scalar>(g: &mut Graph<'_, T>, token: usize, table: ParamId) -> Result<Var> {
    let rows = g.params().get(table).rows();
    if token >= rows {
        return Err(Error::Vocabulary(format!(
            "token id {token} out of range for vocabulary of {rows}"
        )));
    }
    let e = g.param(table);
    g.row(e, token)
}

pub fn decoder_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    state: &DecoderState,
    input: Var,
    weights: &LstmWeights,
) -> Result<DecoderState> {
    let (hidden, cell) = lstm_step(g, weights, input, state.hidden, state.cell)?;
    Ok(DecoderState {
        hidden,
        cell,
        index: state.index + 1,
    })
}

/// Unnormalized scores `W_g g_i + b_g` over the vocabulary.
pub fn output_logits<T: Scalar>(
    g: &mut Graph<'_, T>,
    pre_output: Var,
    w_g: ParamId,
    b_g: ParamId,
) -> Result<Var> {
    let (w, b) = (g.param(w_g), g.param(b_g));
    g.affine(pre_output, w, b)
}

/// `softmax(W_g g_i + b_g)`.
pub fn output_distribution<T: Scalar>(
    g: &mut Graph<'_, T>,
    pre_output: Var,
    w_g: ParamId,
    b_g: ParamId,
) -> Result<Var> {
    let logits = output_logits(g, pre_output, w_g, b_g)?;
    g.softmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::lstm::LstmParams;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn embed_is_row_lookup() {
        let mut ps = ParamStore::<f64>::new();
        let e = ps
            .add("embed.E", Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.25]).unwrap())
            .unwrap();
        let mut g = Graph::new(&ps);
        let a = embed(&mut g, 2, e).unwrap();
        let b = embed(&mut g, 2, e).unwrap();
        assert_eq!(g.value(a).data(), &[0.5, 0.25]);
        assert_eq!(g.value(a), g.value(b));
        assert!(matches!(embed(&mut g, 3, e), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn embedding_gradient_touches_only_looked_up_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let e = ps.add_uniform("embed.E", &[5, 3], 0.5, &mut rng).unwrap();
        let mut g = Graph::new(&ps);
        let a = embed(&mut g, 1, e).unwrap();
        let b = embed(&mut g, 3, e).unwrap();
        let s = g.add(a, b).unwrap();
        let t = g.tanh(s);
        let loss = g.sum(t);
        let grads = g.backward(loss).unwrap();
        let ge = grads.get(e).unwrap();
        for r in [0, 2, 4] {
            assert!(ge.row(r).iter().all(|&v| v == 0.0));
        }
        for r in [1, 3] {
            assert!(ge.row(r).iter().any(|&v| v != 0.0));
        }
    }

    fn lstm_store(scale: f64) -> (ParamStore<f64>, LstmParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamStore::new();
        let p = LstmParams::register(&mut ps, "decoder", 3, 4, scale, &mut rng).unwrap();
        (ps, p)
    }

    #[test]
    fn zero_decoder_step_stays_zero_and_counts() {
        let (ps, p) = lstm_store(0.0);
        let mut g = Graph::new(&ps);
        let w = LstmWeights::bind(&mut g, &p).unwrap();
        let z = g.input(Tensor::zeros(&[4]));
        let s0 = DecoderState { hidden: z, cell: z, index: 0 };
        let y = g.input(Tensor::zeros(&[3]));
        let s1 = decoder_step(&mut g, &s0, y, &w).unwrap();
        assert_eq!(s1.index, 1);
        assert_eq!(g.value(s1.hidden).data(), &[0.0; 4]);
        assert_eq!(g.value(s1.cell).data(), &[0.0; 4]);
    }

    #[test]
    fn decoder_step_is_lstm_step() {
        let (ps, p) = lstm_store(0.6);
        let mut g = Graph::new(&ps);
        let w = LstmWeights::bind(&mut g, &p).unwrap();
        let h = g.input(Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]).unwrap());
        let c = g.input(Tensor::vector(vec![0.5, 0.5, -0.5, 1.0]).unwrap());
        let y = g.input(Tensor::vector(vec![1.0, -1.0, 0.25]).unwrap());
        let s = decoder_step(&mut g, &DecoderState { hidden: h, cell: c, index: 4 }, y, &w).unwrap();
        let (h2, c2) = lstm_step(&mut g, &w, y, h, c).unwrap();
        assert_eq!(g.value(s.hidden), g.value(h2));
        assert_eq!(g.value(s.cell), g.value(c2));
        let bad = g.input(Tensor::zeros(&[2]));
        assert!(decoder_step(&mut g, &s, bad, &w).is_err());
    }

    #[test]
    fn decoder_step_gradient_check() {
        let (mut ps, p) = lstm_store(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for id in ps.ids().collect::<Vec<_>>() {
            for v in ps.get_mut(id).data_mut() {
                *v = rng.random_range(-0.7..0.7);
            }
        }
        let report = check_gradient(&ps, 1e-5, |g| {
            let w = LstmWeights::bind(g, &p)?;
            let h = g.input(Tensor::vector(vec![0.1, -0.2, 0.3, 0.6])?);
            let c = g.input(Tensor::vector(vec![0.5, 0.2, -0.5, 1.0])?);
            let y = g.input(Tensor::vector(vec![1.0, -1.0, 0.25])?);
            let s = decoder_step(g, &DecoderState { hidden: h, cell: c, index: 0 }, y, &w)?;
            let s2 = decoder_step(g, &s, y, &w)?;
            let u = g.input(Tensor::vector(vec![0.3, -1.0, 2.0, 0.7])?);
            let m = g.mul(s2.hidden, u)?;
            let total = g.add(m, s2.cell)?;
            Ok(g.sum(total))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.worst());
    }

    #[test]
    fn output_distribution_examples() {
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("output.W_g", Tensor::zeros(&[5, 3])).unwrap();
        let b = ps.add("output.b_g", Tensor::zeros(&[5])).unwrap();
        {
            let mut g = Graph::new(&ps);
            let x = g.input(Tensor::vector(vec![0.3, -0.1, 0.9]).unwrap());
            let p = output_distribution(&mut g, x, w, b).unwrap();
            assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        }
        ps.get_mut(b).data_mut()[3] = 60.0;
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::vector(vec![0.3, -0.1, 0.9]).unwrap());
        let p = output_distribution(&mut g, x, w, b).unwrap();
        assert!((g.value(p).data()[3] - 1.0).abs() < 1e-12);
        let bad = g.input(Tensor::zeros(&[4]));
        assert!(output_distribution(&mut g, bad, w, b).is_err());
    }
}
