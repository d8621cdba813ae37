use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer weights.
#[derive(Debug, Clone)]
pub struct LinearParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            (&[out, _], &[b]) if out == b => Ok(Self { weight, bias }),
            (w, b) => Err(Error::shape("linear", format!("weight {w:?} with bias {b:?}"))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// `x·Wᵀ + b` for `x: [B, in]`.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    match x.shape() {
        &[_, n] if n == p.in_features() => {}
        s => {
            return Err(Error::shape(
                "linear",
                format!("input {s:?}, layer expects [B, {}]", p.in_features()),
            ))
        }
    }
    x.matmul(&p.weight.transpose()?)?.add(&p.bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    #[test]
    fn identity_weight() {
        let p = LinearParams::new(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(vec![2]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -4.0]).unwrap();
        assert_eq!(linear(&x, &p).unwrap().values(), x.values());
    }

    #[test]
    fn hand_example() {
        let p = LinearParams::new(
            Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            Tensor::new(vec![1], vec![0.5]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &p).unwrap().values(), &[3.5]);
    }

    #[test]
    fn width_mismatch() {
        let p = LinearParams::new(Tensor::zeros(vec![1, 2]).unwrap(), Tensor::zeros(vec![1]).unwrap()).unwrap();
        assert!(linear(&Tensor::zeros(vec![1, 3]).unwrap(), &p).is_err());
        assert!(LinearParams::new(Tensor::zeros(vec![1, 2]).unwrap(), Tensor::zeros(vec![2]).unwrap()).is_err());
    }

    #[test]
    fn gradients() {
        let w = Tensor::new(vec![3, 2], vec![0.2, -0.5, 0.9, 0.1, -0.3, 0.4]).unwrap();
        let b = Tensor::new(vec![3], vec![0.05, -0.1, 0.2]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![0.7, -0.2, 0.3, 0.8]).unwrap();
        let run = |x: &Tensor, w: &Tensor, b: &Tensor| {
            linear(x, &LinearParams::new(w.clone(), b.clone())?)?.sigmoid()?.sum()
        };
        for r in [
            finite_diff_check(|p| run(p, &w, &b), &x, 1e-4, 1e-4).unwrap(),
            finite_diff_check(|p| run(&x, p, &b), &w, 1e-4, 1e-4).unwrap(),
            finite_diff_check(|p| run(&x, &w, p), &b, 1e-4, 1e-4).unwrap(),
        ] {
            assert!(r.passed, "{r:?}");
        }
    }
}
