use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σw − 1|` accepted when validating a distribution.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A discrete distribution over input channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidDistribution("empty vector".into()));
        }
        if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {v}, entries must be finite and nonnegative"
            )));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution needs at least one entry");
        Self(vec![1.0 / len as f64; len])
    }

    pub fn one_hot(len: usize, at: usize) -> Self {
        assert!(at < len);
        let mut w = vec![0.0; len];
        w[at] = 1.0;
        Self(w)
    }

    /// Clamps negatives to zero and rescales to unit mass. Used on solver
    /// iterates that may carry round-off below zero.
    pub(crate) fn from_unnormalized(mut w: Vec<f64>) -> Result<Self> {
        for v in &mut w {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidDistribution(format!(
                "cannot normalize a vector with mass {sum}"
            )));
        }
        w.iter_mut().for_each(|v| *v /= sum);
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices with `w_d >= threshold`, ascending.
    pub fn support(&self, threshold: f64) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= threshold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -neg_entropy(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0
    }
}

/// Σ w log w with the convention 0·log 0 = 0.
pub fn neg_entropy(w: &[f64]) -> f64 {
    w.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum()
}

/// Shannon entropy −Σ w log w (natural log) of a validated distribution.
pub fn entropy(w: &ProbabilityVector) -> f64 {
    w.entropy()
}

/// Entropy of raw weights, validating them first.
pub fn entropy_of(w: &[f64]) -> Result<f64> {
    Ok(ProbabilityVector::new(w.to_vec())?.entropy())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_entropies() {
        assert!((entropy_of(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert!((entropy_of(&[0.25; 4]).unwrap() - 1.386294).abs() < 1e-6);
        assert_eq!(entropy_of(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((entropy_of(&[0.5, 0.5, 0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_distributions() {
        assert!(matches!(
            entropy_of(&[0.5, 0.6]),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(matches!(
            entropy_of(&[1.5, -0.5]),
            Err(Error::InvalidDistribution(_))
        ));
        assert!(ProbabilityVector::new(vec![]).is_err());
        assert!(ProbabilityVector::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn support_and_argmax() {
        let w = ProbabilityVector::new(vec![0.2, 1e-7, 0.7999999, 0.0]).unwrap();
        assert_eq!(w.support(1e-6), vec![0, 2]);
        assert_eq!(w.argmax(), 2);
    }

    fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len).prop_filter_map("zero mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(w in (1usize..10).prop_flat_map(simplex), rot in 0usize..10) {
            let mut p = w.clone();
            p.rotate_left(rot % w.len());
            p.reverse();
            let a = entropy_of(&w).unwrap();
            let b = entropy_of(&p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn entropy_is_bounded_by_log_len(w in (1usize..10).prop_flat_map(simplex)) {
            let h = entropy_of(&w).unwrap();
            prop_assert!(h >= -1e-15);
            prop_assert!(h <= (w.len() as f64).ln() + 1e-12);
        }
    }
}
