//! Dual attention: squeeze-excitation channel attention followed by a
//! spatial attention map.
//!
//! Channel attention squeezes each channel to its spatial mean `z`, excites
//! through two bias-free fully connected layers `s = σ(W2·relu(W1·z))`, and
//! scales channel `c` by `s_c`. There is no max-pooled branch. Spatial
//! attention convolves the channel-mean and channel-max maps separately,
//! adds the two single-channel responses, and multiplies every channel by
//! `M = σ(conv_avg(avg) + conv_max(max))`.

use crate::error::{Error, Result};
use crate::layers::{channel_pool, global_avg_pool, grouped_conv2d, ChannelPoolMode, Conv2dParams, Conv2dSpec};
use crate::tensor::Tensor;

/// Excitation weights of the channel attention block.
#[derive(Debug, Clone)]
pub struct ChannelAttentionParams {
    pub channels: usize,
    pub reduction: usize,
    /// `[c/r, c]`
    pub w1: Tensor,
    /// `[c, c/r]`
    pub w2: Tensor,
}

/// Rejects `(c, r)` pairs where `r` does not divide `c` exactly.
pub fn check_reduction(channels: usize, reduction: usize) -> Result<usize> {
    if channels == 0 || reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::Config(format!(
            "reduction ratio {reduction} must divide channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

impl ChannelAttentionParams {
    pub fn new(channels: usize, reduction: usize, w1: Tensor, w2: Tensor) -> Result<Self> {
        let hidden = check_reduction(channels, reduction)?;
        if w1.shape() != [hidden, channels] || w2.shape() != [channels, hidden] {
            return Err(Error::shape(
                "channel_attention",
                format!(
                    "w1 {:?} / w2 {:?}, expected [{hidden}, {channels}] / [{channels}, {hidden}]",
                    w1.shape(),
                    w2.shape()
                ),
            ));
        }
        Ok(Self {
            channels,
            reduction,
            w1,
            w2,
        })
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }

    /// `2·c²/r`.
    pub fn param_count(&self) -> usize {
        channel_attention_param_count(self.channels, self.reduction)
    }
}

/// Parameter count of the two excitation matrices, `2·c²/r`.
pub fn channel_attention_param_count(channels: usize, reduction: usize) -> usize {
    2 * channels * (channels / reduction)
}

/// The two 1→1 convolutions of the spatial attention map.
#[derive(Debug, Clone)]
pub struct SpatialAttentionParams {
    pub conv_avg: Conv2dParams,
    pub conv_max: Conv2dParams,
}

impl SpatialAttentionParams {
    /// Spec of either branch: 1→1 channel, odd `k×k` kernel, stride 1, padding `(k−1)/2`, biased.
    pub fn branch_spec(kernel: usize) -> Result<Conv2dSpec> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("spatial attention kernel must be odd, got {kernel}")));
        }
        Ok(Conv2dSpec::square(1, 1, kernel, 1, (kernel - 1) / 2).with_bias(true))
    }

    pub fn new(conv_avg: Conv2dParams, conv_max: Conv2dParams) -> Result<Self> {
        for p in [&conv_avg, &conv_max] {
            let s = p.spec;
            let (kh, kw) = s.kernel;
            let ok = s.in_channels == 1
                && s.out_channels == 1
                && s.groups == 1
                && s.stride == (1, 1)
                && kh % 2 == 1
                && kw % 2 == 1
                && s.padding == ((kh - 1) / 2, (kw - 1) / 2);
            if !ok {
                return Err(Error::Config(format!(
                    "spatial attention conv must be 1→1, stride 1, odd kernel with same padding: {s:?}"
                )));
            }
        }
        Ok(Self { conv_avg, conv_max })
    }

    pub fn param_count(&self) -> usize {
        self.conv_avg.param_count() + self.conv_max.param_count()
    }
}

/// Multipliers applied by a dual attention block, kept for inspection.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    /// `s`, shape `[B, C]`.
    pub channel_scale: Tensor,
    /// `M`, shape `[B, 1, H, W]`.
    pub spatial_map: Tensor,
}

/// Excitation vector `s = σ(W2·relu(W1·z))` per sample, shape `[B, C]`.
pub fn channel_excitation(x: &Tensor, p: &ChannelAttentionParams) -> Result<Tensor> {
    let &[b, c, _, _] = x.shape() else {
        return Err(Error::shape("channel_attention", format!("expected [B,C,H,W], got {:?}", x.shape())));
    };
    if c != p.channels {
        return Err(Error::shape(
            "channel_attention",
            format!("input has {c} channels, block expects {}", p.channels),
        ));
    }
    let z = global_avg_pool(x)?.reshape(vec![b, c])?;
    let hidden = z.matmul(&p.w1.transpose()?)?.relu()?;
    hidden.matmul(&p.w2.transpose()?)?.sigmoid()
}

/// Scale stage: channel `c` of sample `b` multiplied by `s[b, c]`.
pub fn scale_channels(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let &[b, c, _, _] = x.shape() else {
        return Err(Error::shape("scale_channels", format!("expected [B,C,H,W], got {:?}", x.shape())));
    };
    if s.shape() != [b, c] {
        return Err(Error::shape("scale_channels", format!("scale {:?} for input {:?}", s.shape(), x.shape())));
    }
    x.mul(&s.reshape(vec![b, c, 1, 1])?)
}

pub fn channel_attention_traced(x: &Tensor, p: &ChannelAttentionParams) -> Result<(Tensor, Tensor)> {
    let s = channel_excitation(x, p)?;
    Ok((scale_channels(x, &s)?, s))
}

pub fn channel_attention(x: &Tensor, p: &ChannelAttentionParams) -> Result<Tensor> {
    channel_attention_traced(x, p).map(|(y, _)| y)
}

/// Spatial map `M`, shape `[B, 1, H, W]`.
pub fn spatial_map(f: &Tensor, p: &SpatialAttentionParams) -> Result<Tensor> {
    let avg = channel_pool(f, ChannelPoolMode::Avg)?;
    let max = channel_pool(f, ChannelPoolMode::Max)?;
    grouped_conv2d(&avg, &p.conv_avg)?
        .add(&grouped_conv2d(&max, &p.conv_max)?)?
        .sigmoid()
}

pub fn spatial_attention_traced(f: &Tensor, p: &SpatialAttentionParams) -> Result<(Tensor, Tensor)> {
    let m = spatial_map(f, p)?;
    Ok((f.mul(&m)?, m))
}

pub fn spatial_attention(f: &Tensor, p: &SpatialAttentionParams) -> Result<Tensor> {
    spatial_attention_traced(f, p).map(|(y, _)| y)
}

/// Channel attention, then spatial attention on its output.
pub fn dual_attention_block(
    x: &Tensor,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
) -> Result<Tensor> {
    dual_attention_traced(x, cp, sp).map(|(y, _)| y)
}

pub fn dual_attention_traced(
    x: &Tensor,
    cp: &ChannelAttentionParams,
    sp: &SpatialAttentionParams,
) -> Result<(Tensor, AttentionTrace)> {
    let (f, channel_scale) = channel_attention_traced(x, cp)?;
    let (y, spatial_map) = spatial_attention_traced(&f, sp)?;
    Ok((
        y,
        AttentionTrace {
            channel_scale,
            spatial_map,
        },
    ))
}
