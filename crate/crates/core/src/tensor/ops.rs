use super::kernels::{gemm_acc, transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// For each flat index of `a_shape`, the flat index of `b` it reads.
/// `b` aligns with the trailing dimensions of `a`; each aligned extent must
/// match or be 1. Returns `None` when `b` has the same shape (no mapping needed).
fn broadcast_map(op: &'static str, a_shape: &[usize], b_shape: &[usize]) -> Result<Option<Vec<usize>>> {
    if a_shape == b_shape {
        return Ok(None);
    }
    let b_numel: usize = b_shape.iter().product();
    let a_numel: usize = a_shape.iter().product();
    if b_numel == 1 {
        return Ok(Some(vec![0; a_numel]));
    }
    if b_shape.len() > a_shape.len() {
        return Err(Error::shape(op, format!("cannot broadcast {b_shape:?} to {a_shape:?}")));
    }
    let offset = a_shape.len() - b_shape.len();
    // strides of b laid over a's axes; 0 on broadcast or missing axes
    let mut strides = vec![0usize; a_shape.len()];
    let mut s = 1;
    for (i, &bd) in b_shape.iter().enumerate().rev() {
        let ad = a_shape[offset + i];
        if bd == ad {
            strides[offset + i] = s;
        } else if bd != 1 {
            return Err(Error::shape(op, format!("cannot broadcast {b_shape:?} to {a_shape:?}")));
        }
        s *= bd;
    }
    let mut map = Vec::with_capacity(a_numel);
    let mut idx = vec![0usize; a_shape.len()];
    let mut cur = 0usize;
    for _ in 0..a_numel {
        map.push(cur);
        for ax in (0..a_shape.len()).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < a_shape[ax] {
                break;
            }
            cur -= strides[ax] * a_shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Some(map))
}

fn reduce_to(map: &Option<Vec<usize>>, g: impl Iterator<Item = f64>, b_len: usize) -> Vec<f64> {
    match map {
        None => g.collect(),
        Some(map) => {
            let mut out = vec![0.0; b_len];
            for (v, &j) in g.zip(map) {
                out[j] += v;
            }
            out
        }
    }
}

impl Tensor {
    /// `self ∘ rhs` elementwise, with `rhs` broadcast over `self`'s shape.
    pub fn binary(&self, op: BinaryOp, rhs: &Tensor) -> Result<Tensor> {
        let name = op.name();
        let map = broadcast_map(name, self.shape(), rhs.shape())?;
        let a = self.values();
        let b = rhs.values();
        let data: Vec<f64> = match &map {
            None => a.iter().zip(b).map(|(&x, &y)| op.apply(x, y)).collect(),
            Some(m) => a.iter().zip(m).map(|(&x, &j)| op.apply(x, b[j])).collect(),
        };
        let b_len = rhs.numel();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move |args| {
                let g = args.grad;
                let a = args.parents[0].values();
                let b = args.parents[1].values();
                let bj = |i: usize| match &map {
                    None => b[i],
                    Some(m) => b[m[i]],
                };
                let need_a = args.parents[0].requires_grad();
                let need_b = args.parents[1].requires_grad();
                let (ga, gb) = match op {
                    BinaryOp::Add => (
                        need_a.then(|| g.to_vec()),
                        need_b.then(|| reduce_to(&map, g.iter().copied(), b_len)),
                    ),
                    BinaryOp::Sub => (
                        need_a.then(|| g.to_vec()),
                        need_b.then(|| reduce_to(&map, g.iter().map(|v| -v), b_len)),
                    ),
                    BinaryOp::Mul => (
                        need_a.then(|| g.iter().enumerate().map(|(i, &v)| v * bj(i)).collect()),
                        need_b.then(|| {
                            reduce_to(&map, g.iter().zip(a).map(|(&v, &x)| v * x), b_len)
                        }),
                    ),
                    BinaryOp::Div => (
                        need_a.then(|| g.iter().enumerate().map(|(i, &v)| v / bj(i)).collect()),
                        need_b.then(|| {
                            reduce_to(
                                &map,
                                g.iter().zip(a).enumerate().map(|(i, (&v, &x))| {
                                    let y = bj(i);
                                    -v * x / (y * y)
                                }),
                                b_len,
                            )
                        }),
                    ),
                };
                vec![ga, gb]
            },
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, rhs)
    }

    /// `self ∘ s` for a constant scalar `s`.
    pub fn binary_scalar(&self, op: BinaryOp, s: f64) -> Result<Tensor> {
        let data = self.values().iter().map(|&x| op.apply(x, s)).collect();
        Tensor::from_op(
            op.name(),
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |args| {
                let g = args.grad;
                let ga = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                    BinaryOp::Mul => g.iter().map(|v| v * s).collect(),
                    BinaryOp::Div => g.iter().map(|v| v / s).collect(),
                };
                vec![Some(ga)]
            },
        )
    }

    pub fn add_scalar(&self, s: f64) -> Result<Tensor> {
        self.binary_scalar(BinaryOp::Add, s)
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Tensor> {
        self.binary_scalar(BinaryOp::Mul, s)
    }

    /// Rank-2 matrix product `(m×k)·(k×n)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (self.shape(), rhs.shape()) else {
            return Err(Error::shape(
                "matmul",
                format!("expected rank-2 operands, got {:?} and {:?}", self.shape(), rhs.shape()),
            ));
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} · {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.values(), rhs.values(), &mut out);
        Tensor::from_op("matmul", vec![m, n], out, vec![self.clone(), rhs.clone()], move |args| {
            let a = args.parents[0].values();
            let b = args.parents[1].values();
            let ga = args.parents[0].requires_grad().then(|| {
                let bt = transpose(k, n, b);
                let mut ga = vec![0.0; m * k];
                gemm_acc(m, n, k, args.grad, &bt, &mut ga);
                ga
            });
            let gb = args.parents[1].requires_grad().then(|| {
                let at = transpose(m, k, a);
                let mut gb = vec![0.0; k * n];
                gemm_acc(k, m, n, &at, args.grad, &mut gb);
                gb
            });
            vec![ga, gb]
        })
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let &[r, c] = self.shape() else {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", self.shape())));
        };
        let data = transpose(r, c, self.values());
        Tensor::from_op("transpose", vec![c, r], data, vec![self.clone()], move |args| {
            vec![Some(transpose(c, r, args.grad))]
        })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} has {} values, target {:?} needs {n}", self.shape(), self.numel(), shape),
            ));
        }
        Tensor::from_op("reshape", shape, self.to_vec(), vec![self.clone()], |args| {
            vec![Some(args.grad.to_vec())]
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.values().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![total], vec![self.clone()], move |args| {
            vec![Some(vec![args.grad[0]; n])]
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        let total: f64 = self.values().iter().sum();
        Tensor::from_op("mean", vec![1], vec![total / n as f64], vec![self.clone()], move |args| {
            vec![Some(vec![args.grad[0] / n as f64; n])]
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.values().iter().map(|&x| x.max(0.0)).collect();
        Tensor::from_op("relu", self.shape().to_vec(), data, vec![self.clone()], |args| {
            let x = args.parents[0].values();
            let g = args
                .grad
                .iter()
                .zip(x)
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.values().iter().map(|&x| sigmoid(x)).collect();
        Tensor::from_op("sigmoid", self.shape().to_vec(), data, vec![self.clone()], |args| {
            let g = args
                .grad
                .iter()
                .zip(args.output)
                .map(|(&g, &s)| g * s * (1.0 - s))
                .collect();
            vec![Some(g)]
        })
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.add(&b).unwrap().values(), &[4.0, 6.0]);
        assert_eq!(a.mul(&a.ones_like()).unwrap().values(), a.values());
        let c = t(&[2], &[2.0, 3.0]);
        assert_eq!(c.mul_scalar(0.5).unwrap().values(), &[1.0, 1.5]);
    }

    #[test]
    fn broadcast_singleton_axes() {
        let x = t(&[1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let per_channel = t(&[1, 2, 1, 1], &[10.0, 100.0]);
        let y = x.mul(&per_channel).unwrap();
        assert_eq!(y.values(), &[10.0, 20.0, 30.0, 40.0, 500.0, 600.0, 700.0, 800.0]);
        let per_pixel = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = x.mul(&per_pixel).unwrap();
        assert_eq!(y.values(), &[1.0, 0.0, 0.0, 4.0, 5.0, 0.0, 0.0, 8.0]);
        let bias = t(&[2], &[1.0, -1.0]);
        let m = t(&[2, 2], &[0.0; 4]);
        assert_eq!(m.add(&bias).unwrap().values(), &[1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn broadcast_mismatch_errors() {
        let x = t(&[2, 3], &[0.0; 6]);
        let y = t(&[2], &[0.0; 2]);
        assert!(x.add(&y).is_err());
        let z = t(&[2, 2, 3], &[0.0; 12]);
        assert!(x.add(&z).is_err());
    }

    #[test]
    fn division_overflow_is_an_error() {
        let x = t(&[1], &[1.0]);
        let z = t(&[1], &[0.0]);
        assert!(matches!(x.div(&z), Err(Error::NonFinite { op: "div" })));
        let big = t(&[1], &[1e308]);
        assert!(big.mul_scalar(10.0).is_err());
    }

    #[test]
    fn matmul_examples() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let v = t(&[3, 1], &[0.3, -2.0, 7.5]);
        assert_eq!(eye.matmul(&v).unwrap().values(), v.values());
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(a.matmul(&ones).unwrap().values(), &[3.0, 7.0]);
        assert!(a.matmul(&v).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let b = t(&[3, 2], &[0.5, -0.1, 0.2, 0.9, -0.4, 0.3]);
        let a = t(&[2, 3], &[0.1, 0.2, -0.3, 0.7, -0.6, 0.05]);
        let report =
            finite_diff_check(|x| x.matmul(&b)?.sum(), &a, 1e-4, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
        let report =
            finite_diff_check(|x| a.matmul(x)?.sigmoid()?.sum(), &b, 1e-4, 1e-5).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn activation_examples() {
        let x = t(&[2], &[-1.0, 2.0]);
        assert_eq!(x.relu().unwrap().values(), &[0.0, 2.0]);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn broadcast_gradients() {
        let s = t(&[1, 2, 1, 1], &[0.3, -0.8]);
        let x = t(&[2, 2, 2, 1], &[0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
            let r = finite_diff_check(|p| x.binary(op, p)?.sigmoid()?.sum(), &s, 1e-4, 1e-6).unwrap();
            assert!(r.passed, "{op:?} rhs {r:?}");
            let r = finite_diff_check(|p| p.binary(op, &s)?.sigmoid()?.sum(), &x, 1e-4, 1e-6).unwrap();
            assert!(r.passed, "{op:?} lhs {r:?}");
        }
    }

    #[test]
    fn reshape_transpose_mean_gradients() {
        let x = t(&[2, 3], &[0.1, 0.2, -0.3, 0.7, -0.6, 0.05]);
        let r = finite_diff_check(
            |p| p.transpose()?.reshape(vec![3, 2])?.sigmoid()?.mul_scalar(3.0)?.mean(),
            &x,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
