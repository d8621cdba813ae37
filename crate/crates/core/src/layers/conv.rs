use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm_acc, transpose};
use crate::tensor::Tensor;

/// Shape hyperparameters of a 2-D convolution, without the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Number of independent channel groups (cardinality).
    pub groups: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Square kernel, square stride and padding, one group, no bias.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (padding, padding),
            groups: 1,
            bias: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || groups == 0 {
            return Err(Error::Config(format!("conv: zero channels or groups in {self:?}")));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!("conv: zero kernel or stride in {self:?}")));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::Config(format!(
                "conv: {groups} groups do not divide {in_channels} in / {out_channels} out channels"
            )));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn fan_in(&self) -> usize {
        (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1
    }

    /// `out·(in/groups)·kh·kw`, plus `out` when biased.
    pub fn param_count(&self) -> usize {
        self.out_channels * self.fan_in() + if self.bias { self.out_channels } else { 0 }
    }

    /// `floor((n + 2p − k)/s) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize| {
            (n + 2 * p).checked_sub(k).map(|span| span / s + 1)
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::shape(
                "conv2d",
                format!("input {h}×{w} too small for kernel {:?} with padding {:?}", self.kernel, self.padding),
            )),
        }
    }
}

/// Convolution weights together with their shape hyperparameters.
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub spec: Conv2dSpec,
    /// `[out_channels, in_channels/groups, kh, kw]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Option<Tensor>,
}

impl Conv2dParams {
    pub fn new(spec: Conv2dSpec, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        spec.validate()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::shape(
                "conv2d",
                format!("weight {:?}, expected {:?}", weight.shape(), spec.weight_shape()),
            ));
        }
        match (&bias, spec.bias) {
            (Some(b), true) if b.shape() == [spec.out_channels] => {}
            (None, false) => {}
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias does not match spec (bias = {})", spec.bias),
                ))
            }
        }
        Ok(Self { spec, weight, bias })
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

struct Geometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Geometry {
    fn group_channels(&self) -> usize {
        self.channels / self.spec.groups
    }

    fn cols(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.group_channels() * self.spec.kernel.0 * self.spec.kernel.1
    }

    /// Visits `(row, col, input_index)` for every in-bounds tap of group `g`.
    fn for_each_tap(&self, g: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (kh, kw) = self.spec.kernel;
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.padding;
        let p = self.cols();
        let cg = self.group_channels();
        for ci in 0..cg {
            let c = g * cg + ci;
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (ci * kh + ky) * kw + kx;
                    for b in 0..self.batch {
                        let plane = (b * self.channels + c) * self.h * self.w;
                        for oy in 0..self.oh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let col_base = (b * self.oh + oy) * self.ow;
                            let in_row = plane + iy as usize * self.w;
                            for ox in 0..self.ow {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(row, col_base + ox, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(p > 0);
    }

    fn im2col(&self, g: usize, x: &[f64]) -> Vec<f64> {
        let p = self.cols();
        let mut col = vec![0.0; self.rows() * p];
        self.for_each_tap(g, |row, c, i| col[row * p + c] = x[i]);
        col
    }
}

/// Grouped 2-D convolution with zero padding.
///
/// Input channels are split into `groups` contiguous slices; group `g`'s
/// output channels see only group `g`'s inputs, and the group outputs are
/// concatenated along channels. Each output element accumulates its taps in
/// (input channel, ky, kx) order starting from zero, then adds the bias, so
/// `groups = 1` reproduces a direct convolution exactly.
pub fn grouped_conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let spec = p.spec;
    let &[batch, channels, h, w] = x.shape() else {
        return Err(Error::shape("conv2d", format!("expected [B,C,H,W], got {:?}", x.shape())));
    };
    if channels != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {channels} channels, layer expects {}", spec.in_channels),
        ));
    }
    let (oh, ow) = spec.output_size(h, w)?;
    let geo = Geometry {
        batch,
        channels,
        h,
        w,
        oh,
        ow,
        spec,
    };
    let groups = spec.groups;
    let out_c = spec.out_channels;
    let og = out_c / groups;
    let kk = geo.rows();
    let pcols = geo.cols();
    let ohw = oh * ow;

    let weight = p.weight.values();
    let bias = p.bias.as_ref().map(|b| b.values());
    let mut out = vec![0.0; batch * out_c * ohw];
    let mut cols = Vec::with_capacity(groups);
    for g in 0..groups {
        let col = geo.im2col(g, x.values());
        let wg = &weight[g * og * kk..(g + 1) * og * kk];
        let mut tmp = vec![0.0; og * pcols];
        gemm_acc(og, kk, pcols, wg, &col, &mut tmp);
        for o in 0..og {
            let oc = g * og + o;
            let bv = bias.map(|b| b[oc]);
            for b in 0..batch {
                let src = &tmp[o * pcols + b * ohw..o * pcols + (b + 1) * ohw];
                let dst = &mut out[(b * out_c + oc) * ohw..(b * out_c + oc + 1) * ohw];
                match bv {
                    Some(bv) => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bv),
                    None => dst.copy_from_slice(src),
                }
            }
        }
        cols.push(col);
    }

    let mut parents = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        parents.push(b.clone());
    }
    Tensor::from_op("conv2d", vec![batch, out_c, oh, ow], out, parents, move |args| {
        let grad = args.grad;
        // [B, O, OH, OW] -> [O, B·OH·OW]
        let mut gperm = vec![0.0; out_c * pcols];
        for b in 0..batch {
            for oc in 0..out_c {
                let src = &grad[(b * out_c + oc) * ohw..(b * out_c + oc + 1) * ohw];
                gperm[oc * pcols + b * ohw..oc * pcols + (b + 1) * ohw].copy_from_slice(src);
            }
        }
        let need_x = args.parents[0].requires_grad();
        let need_w = args.parents[1].requires_grad();
        let weight = args.parents[1].values();
        let mut gx = need_x.then(|| vec![0.0; batch * channels * h * w]);
        let mut gw = need_w.then(|| vec![0.0; weight.len()]);
        for (g, col) in cols.iter().enumerate() {
            let dtmp = &gperm[g * og * pcols..(g + 1) * og * pcols];
            if let Some(gw) = gw.as_mut() {
                let col_t = transpose(kk, pcols, col);
                gemm_acc(og, pcols, kk, dtmp, &col_t, &mut gw[g * og * kk..(g + 1) * og * kk]);
            }
            if let Some(gx) = gx.as_mut() {
                let wg_t = transpose(og, kk, &weight[g * og * kk..(g + 1) * og * kk]);
                let mut dcol = vec![0.0; kk * pcols];
                gemm_acc(kk, og, pcols, &wg_t, dtmp, &mut dcol);
                geo.for_each_tap(g, |row, c, i| gx[i] += dcol[row * pcols + c]);
            }
        }
        let mut grads = vec![gx, gw];
        if args.parents.len() == 3 {
            let gb = args.parents[2].requires_grad().then(|| {
                (0..out_c)
                    .map(|oc| gperm[oc * pcols..(oc + 1) * pcols].iter().sum())
                    .collect()
            });
            grads.push(gb);
        }
        grads
    })
}
