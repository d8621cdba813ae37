use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [B,C,H,W], got {:?}", x.shape()))),
    }
}

/// Per-channel spatial mean: `[B,C,H,W] -> [B,C,1,1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = dims4("global_avg_pool", x)?;
    let hw = h * w;
    let scale = 1.0 / hw as f64;
    let data = x
        .values()
        .chunks_exact(hw)
        .map(|plane| plane.iter().sum::<f64>() * scale)
        .collect();
    Tensor::from_op("global_avg_pool", vec![b, c, 1, 1], data, vec![x.clone()], move |args| {
        let g = args.grad.iter().flat_map(|&g| std::iter::repeat_n(g * scale, hw)).collect();
        vec![Some(g)]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPoolMode {
    Avg,
    Max,
}

/// Cross-channel pooling at every pixel: `[B,C,H,W] -> [B,1,H,W]`.
///
/// In max mode the gradient goes to the lowest-index maximal channel.
pub fn channel_pool(x: &Tensor, mode: ChannelPoolMode) -> Result<Tensor> {
    let [b, c, h, w] = dims4("channel_pool", x)?;
    let hw = h * w;
    let v = x.values();
    match mode {
        ChannelPoolMode::Avg => {
            let mut out = vec![0.0; b * hw];
            for bi in 0..b {
                let o = &mut out[bi * hw..(bi + 1) * hw];
                for ci in 0..c {
                    let plane = &v[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    o.iter_mut().zip(plane).for_each(|(a, &p)| *a += p);
                }
                o.iter_mut().for_each(|a| *a /= c as f64);
            }
            Tensor::from_op("channel_avg_pool", vec![b, 1, h, w], out, vec![x.clone()], move |args| {
                let mut g = vec![0.0; b * c * hw];
                for bi in 0..b {
                    let src = &args.grad[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let dst = &mut g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s / c as f64);
                    }
                }
                vec![Some(g)]
            })
        }
        ChannelPoolMode::Max => {
            let mut out = vec![0.0; b * hw];
            let mut arg = vec![0usize; b * hw];
            for bi in 0..b {
                for px in 0..hw {
                    let mut best = v[bi * c * hw + px];
                    let mut best_c = 0;
                    for ci in 1..c {
                        let val = v[(bi * c + ci) * hw + px];
                        if val > best {
                            best = val;
                            best_c = ci;
                        }
                    }
                    out[bi * hw + px] = best;
                    arg[bi * hw + px] = best_c;
                }
            }
            Tensor::from_op("channel_max_pool", vec![b, 1, h, w], out, vec![x.clone()], move |args| {
                let mut g = vec![0.0; b * c * hw];
                for bi in 0..b {
                    for px in 0..hw {
                        g[(bi * c + arg[bi * hw + px]) * hw + px] = args.grad[bi * hw + px];
                    }
                }
                vec![Some(g)]
            })
        }
    }
}
