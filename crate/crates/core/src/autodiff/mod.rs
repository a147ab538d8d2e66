//! Dense tensors with reverse-mode differentiation: the handful of layers the
//! encoder needs, cosine similarity, stop-gradient, losses, and a
//! finite-difference checker.

pub mod gradcheck;
mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var, NORM_EPS};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_similarity of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut g = Graph::new();
    let va = g.constant(Tensor::new(vec![a.len()], a.to_vec())?);
    let vb = g.constant(Tensor::new(vec![b.len()], b.to_vec())?);
    let c = g.cosine_similarity(va, vb)?;
    g.value(c).item()
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, FD_STEP};
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_hand_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);

        let x = g.constant(t(&[2, 1, 4], &[1.0, -2.0, 3.0, 0.5, 7.0, 8.0, 9.0, 1.0]));
        let id = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, id, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_output_length_and_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 11]));
        let w = g.constant(Tensor::zeros(&[4, 3, 3]));
        let y = g.conv1d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 6]);
        let bad = g.constant(Tensor::zeros(&[4, 2, 3]));
        assert!(g.conv1d(x, bad, 1, 0).is_err());
        let huge = g.constant(Tensor::zeros(&[4, 3, 20]));
        assert!(g.conv1d(x, huge, 1, 0).is_err());
        assert!(g.conv1d(x, w, 0, 0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        // Off from 1 by at most NORM_EPS / |a|^2.
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0f64).abs() < 1e-7);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 4.0]).unwrap(), 0.0);
        let twice: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert!((cosine_similarity(&a, &twice).unwrap() - 1.0).abs() < 1e-7);
        let err = cosine_similarity(&[0.0f64, 0.0], &[1.0, 1.0]).unwrap_err();
        assert!(err.to_string().contains("degenerate vector"));
    }

    #[test]
    fn stop_gradient_contract() {
        let x = t(&[4], &[0.5, -1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.stop_gradient(v);
        assert_eq!(g.value(s), &x);
        let sum = g.sum(s);
        let grads = g.backward(sum).unwrap();
        assert!(grads.get(v).is_none());

        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.stop_gradient(v);
        let prod = g.mul(v, s).unwrap();
        let sum = g.sum(prod);
        let grads = g.backward(sum).unwrap();
        assert_eq!(grads.get(v).unwrap(), &x);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::<f32>::from_fn(&[7], |i| i as f32));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0; 7]);
    }

    #[test]
    fn backward_requires_scalar_and_is_repeatable() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
        let s = g.sum(sq);
        let first = g.backward(s).unwrap().get(w).unwrap().clone();
        let second = g.backward(s).unwrap().get(w).unwrap().clone();
        assert_eq!(first, second);
        assert_eq!(first.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_ce_matches_closed_form() {
        let mut g = Graph::new();
        let l = g.param(t(&[1, 2], &[0.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((g.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn composite_gradient_matches_fd() {
        let inputs = vec![
            Tensor::from_fn(&[2, 2, 9], |i| ((i * 7 % 11) as f64 - 5.0) / 4.0),
            Tensor::from_fn(&[3, 2, 3], |i| ((i * 5 % 7) as f64 - 3.0) / 5.0),
            Tensor::from_fn(&[3], |i| 1.0 + i as f64 / 10.0),
            Tensor::from_fn(&[3], |i| i as f64 / 10.0 - 0.1),
        ];
        let report = check_gradients(&inputs, FD_STEP, |g, v| {
            let c = g.conv1d(v[0], v[1], 2, 1)?;
            let n = g.channel_norm(c, v[2], v[3])?;
            let r = g.relu(n);
            let p = g.global_avg_pool(r)?;
            let s = g.mul(p, p)?;
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
