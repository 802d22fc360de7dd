use serde::{Deserialize, Serialize};

use crate::{AudioError, Result};

const VARIANCE_FLOOR: f64 = 1e-8;

/// Componentwise mean and variance fitted on training vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl Normalizer {
    /// Population statistics over every vector of every sequence, accumulated
    /// in order. The variance is floored at 1e-8.
    pub fn fit<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [Vec<f64>]>,
    {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut rows: Vec<&Vec<f64>> = Vec::new();
        for seq in sequences {
            for v in seq {
                if sum.is_empty() {
                    sum = vec![0.0; v.len()];
                }
                if v.len() != sum.len() {
                    return Err(AudioError::Data(format!(
                        "vector of dimension {} among vectors of dimension {}",
                        v.len(),
                        sum.len()
                    )));
                }
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                rows.push(v);
                count += 1;
            }
        }
        if count == 0 {
            return Err(AudioError::Data("no vectors to fit normalization on".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; mean.len()];
        for v in rows {
            for ((q, x), m) in sq.iter_mut().zip(v).zip(&mean) {
                *q += (x - m) * (x - m);
            }
        }
        let variance = sq.iter().map(|q| (q / n).max(VARIANCE_FLOOR)).collect();
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, seq: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        seq.iter()
            .map(|v| {
                if v.len() != self.dim() {
                    return Err(AudioError::Data(format!(
                        "cannot normalize a {}-dimensional vector with {}-dimensional statistics",
                        v.len(),
                        self.dim()
                    )));
                }
                Ok(v.iter()
                    .zip(&self.mean)
                    .zip(&self.variance)
                    .map(|((x, m), var)| (x - m) / var.sqrt())
                    .collect())
            })
            .collect()
    }
}

/// `length` zero vectors standing in for a missing audio track. They are
/// used as-is, never normalized.
pub fn dummy_sequence(length: usize, dim: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; dim]; length]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_vector_gives_floor_variance() {
        let v = vec![vec![1.0, -2.0, 3.5]];
        let n = Normalizer::fit([v.as_slice()]).unwrap();
        assert_eq!(n.mean, v[0]);
        assert_eq!(n.variance, vec![1e-8; 3]);
    }

    #[test]
    fn empty_fit_is_a_data_error() {
        let none: Vec<Vec<f64>> = Vec::new();
        assert!(matches!(Normalizer::fit([none.as_slice()]), Err(AudioError::Data(_))));
    }

    #[test]
    fn validation_uses_training_statistics() {
        let train = vec![vec![0.0], vec![2.0]];
        let val = vec![vec![10.0], vec![12.0]];
        let n = Normalizer::fit([train.as_slice()]).unwrap();
        assert_eq!(n.apply(&val).unwrap(), vec![vec![9.0], vec![11.0]]);
    }

    #[test]
    fn dummy_is_exact_zeros() {
        let d = dummy_sequence(3, 260);
        assert_eq!(d.len(), 3);
        assert!(d.iter().flatten().all(|&x| x == 0.0 && x.is_sign_positive()));
    }
}
