//! Artifact-fraction labels and binary good/bad classification.

use crate::error::{Error, Result};

/// Fraction of artifact-corrupted samples in a segment.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct QualityLabel(f64);

impl QualityLabel {
    pub fn new(y: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&y) {
            Ok(Self(y))
        } else {
            Err(Error::InvalidParameter(format!("quality label {y} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityClass {
    Good,
    Bad,
}

pub fn artifact_fraction(mask: &[bool]) -> Result<QualityLabel> {
    if mask.is_empty() {
        return Err(Error::EmptyInput("artifact mask"));
    }
    let flagged = mask.iter().filter(|&&m| m).count();
    Ok(QualityLabel(flagged as f64 / mask.len() as f64))
}

/// `Good` iff `y <= good_threshold` (the boundary counts as good).
pub fn classify_binary(y: QualityLabel, good_threshold: f64) -> Result<QualityClass> {
    if !(0.0..=1.0).contains(&good_threshold) {
        return Err(Error::InvalidParameter(format!(
            "good threshold {good_threshold} outside [0, 1]"
        )));
    }
    Ok(if y.0 <= good_threshold {
        QualityClass::Good
    } else {
        QualityClass::Bad
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fractions() {
        let mut mask = vec![false; 1200];
        mask[..300].iter_mut().for_each(|m| *m = true);
        assert_eq!(artifact_fraction(&mask).unwrap().value(), 0.25);
        assert_eq!(artifact_fraction(&[false; 5]).unwrap().value(), 0.0);
        assert_eq!(artifact_fraction(&[true; 5]).unwrap().value(), 1.0);
        assert!(artifact_fraction(&[]).is_err());
    }

    #[test]
    fn binary_boundary() {
        let q = |y| QualityLabel::new(y).unwrap();
        assert_eq!(classify_binary(q(0.0), 0.0).unwrap(), QualityClass::Good);
        assert_eq!(classify_binary(q(0.25), 0.2).unwrap(), QualityClass::Bad);
        assert_eq!(classify_binary(q(0.2), 0.2).unwrap(), QualityClass::Good);
        assert!(classify_binary(q(0.2), 1.5).is_err());
        assert!(QualityLabel::new(-0.1).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut mask in prop::collection::vec(any::<bool>(), 1..200), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let before = artifact_fraction(&mask).unwrap();
            mask.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, artifact_fraction(&mask).unwrap());
        }

        #[test]
        fn classification_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let lo_c = classify_binary(QualityLabel::new(lo).unwrap(), t).unwrap();
            let hi_c = classify_binary(QualityLabel::new(hi).unwrap(), t).unwrap();
            prop_assert!(!(lo_c == QualityClass::Bad && hi_c == QualityClass::Good));
        }
    }
}
