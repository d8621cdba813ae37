use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy of `[B, K]` logits against class indices.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[b, k] = logits.shape() else {
        return Err(Error::shape("cross_entropy", format!("expected [B, K] logits, got {:?}", logits.shape())));
    };
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} outside 0..{k}")));
    }
    let z = logits.values();
    let mut probs = vec![0.0; b * k];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &z[i * k..(i + 1) * k];
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let top_idx = row.iter().position(|&v| v == top).unwrap_or(0);
        // log Σ exp(z − top) = ln(1 + Σ_{j≠top} exp(z_j − top)), accurate for tiny tails
        let tail: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != top_idx)
            .map(|(_, &v)| (v - top).exp())
            .sum();
        let lse = top + tail.ln_1p();
        total += tail.ln_1p() + (top - row[y]);
        for j in 0..k {
            probs[i * k + j] = (row[j] - lse).exp();
        }
    }
    let labels = labels.to_vec();
    Tensor::from_op("cross_entropy", vec![1], vec![total / b as f64], vec![logits.clone()], move |args| {
        let scale = args.grad[0] / b as f64;
        let mut g = probs.clone();
        for (i, &y) in labels.iter().enumerate() {
            g[i * k + y] -= 1.0;
        }
        g.iter_mut().for_each(|v| *v *= scale);
        vec![Some(g)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn uniform_logits_give_ln2() {
        let z = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.5, 1.5, -4.0, -4.0]).unwrap();
        let l = cross_entropy(&z, &[0, 1, 1]).unwrap().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logit() {
        let z = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let l = cross_entropy(&z, &[0]).unwrap().item().unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((l - expected).abs() < 1e-22);
        assert!((l - 2.0611536e-9).abs() / l < 1e-7);
        assert!(l > 0.0);
    }

    #[test]
    fn rejects_bad_labels() {
        let z = Tensor::zeros(vec![2, 2]).unwrap();
        assert!(cross_entropy(&z, &[0, 2]).is_err());
        assert!(cross_entropy(&z, &[0]).is_err());
    }

    #[test]
    fn gradient() {
        let z = Tensor::new(vec![3, 2], vec![0.3, -1.2, 2.0, 0.1, -0.5, -0.4]).unwrap();
        let r = finite_diff_check(|p| cross_entropy(p, &[1, 0, 1]), &z, 1e-4, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
