//! Convolutional encoders, the reference context encoder, the shared decoder
//! and the 1×1 refinement layer.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub stride: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stride: 2,
            channels: vec![32, 64, 96],
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    /// Total down-sampling factor `stride^layers`.
    pub fn factor(&self) -> usize {
        self.stride.pow(self.layers() as u32)
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("encoder has layers")
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return shape_err(format!("input {h}x{w} is not divisible by the encoder factor {f}"));
        }
        Ok(())
    }
}

/// Decoder widths for the two hidden stages; the last stage always emits 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub channels: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { channels: vec![64, 32] }
    }
}

pub fn init_encoder(init: &mut Init, prefix: &str, c_in: usize, cfg: &EncoderConfig) -> Result<()> {
    let mut c = c_in;
    for (i, &o) in cfg.channels.iter().enumerate() {
        init.conv(&format!("{prefix}.{i}"), c, o, cfg.kernel)?;
        c = o;
    }
    Ok(())
}

pub fn conv(g: &mut Graph, p: &ParamStore, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    let ws = g.shape(w);
    if g.shape(x).len() != 3 || g.shape(x)[0] != ws[1] {
        return shape_err(format!("`{name}` expects {} input channels, got {:?}", ws[1], g.shape(x)));
    }
    Ok(g.conv2d(x, w, b, stride, pad))
}

/// `x W (+ b)` with row-vector convention.
pub fn linear(g: &mut Graph, p: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let (xs, ws) = (g.shape(x), g.shape(w));
    if xs.len() != 2 || xs[1] != ws[0] {
        return shape_err(format!("`{name}` expects rows of width {}, got {xs:?}", ws[0]));
    }
    let y = g.matmul(x, w);
    let bias = format!("{name}.b");
    if p.contains(&bias) {
        let b = g.param(p, &bias)?;
        return Ok(g.add(y, b));
    }
    Ok(y)
}

/// Strided conv stack; leaky activations between layers, none after the last.
pub fn encode(g: &mut Graph, p: &ParamStore, prefix: &str, x: Var, cfg: &EncoderConfig) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return shape_err(format!("encoder input must be C×H×W, got {s:?}"));
    }
    cfg.check_input(s[1], s[2])?;
    let mut h = x;
    for i in 0..cfg.layers() {
        h = conv(g, p, &format!("{prefix}.{i}"), h, cfg.stride, cfg.kernel / 2)?;
        if i + 1 < cfg.layers() {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(h)
}

pub fn init_decoder(init: &mut Init, prefix: &str, c_in: usize, cfg: &DecoderConfig) -> Result<()> {
    let mut c = c_in;
    for (i, &o) in cfg.channels.iter().chain(&[3]).enumerate() {
        init.conv(&format!("{prefix}.{i}"), c, o, 3)?;
        c = o;
    }
    Ok(())
}

/// Nearest ×2 + 3×3 conv per stage, `tanh` at the end. Output is `3×out_h×out_w`.
pub fn decode(g: &mut Graph, p: &ParamStore, prefix: &str, feat: Var, cfg: &DecoderConfig, out_h: usize, out_w: usize) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    let stages = cfg.channels.len() + 1;
    let f = 1 << stages;
    if s.len() != 3 || s[1] * f != out_h || s[2] * f != out_w {
        return shape_err(format!("decoder cannot map features {s:?} to a {out_h}x{out_w} image"));
    }
    let mut h = feat;
    let (mut hh, mut ww) = (s[1], s[2]);
    for i in 0..stages {
        hh *= 2;
        ww *= 2;
        h = g.upsample_nearest(h, hh, ww);
        h = conv(g, p, &format!("{prefix}.{i}"), h, 1, 1)?;
        if i + 1 < stages {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    Ok(g.tanh(h))
}

/// 3→3 1×1 convolution starting at the identity.
pub fn init_refine_1x1(init: &mut Init, name: &str) -> Result<()> {
    let w = Tensor::from_fn(&[3, 3, 1, 1], |i| f64::from(i / 3 == i % 3));
    init.tensor(&format!("{name}.w"), w)?;
    init.tensor(&format!("{name}.b"), Tensor::zeros(&[3]))
}

/// 1×1 refinement, clipped to the image range.
pub fn refine_1x1(g: &mut Graph, p: &ParamStore, name: &str, img: Var) -> Result<Var> {
    let y = conv(g, p, name, img, 1, 0)?;
    Ok(g.clamp(y, -1.0, 1.0))
}

/// Two 3×3 convs from reference features (plus 2 coordinate planes) to `dim` channels.
pub fn init_context_encoder(init: &mut Init, prefix: &str, c_in: usize, dim: usize) -> Result<()> {
    init.conv(&format!("{prefix}.0"), c_in + 2, dim, 3)?;
    init.conv(&format!("{prefix}.1"), dim, dim, 3)
}

/// Normalised `x, y` coordinate planes in `[-1, 1]`, `2×h×w`.
pub fn coord_planes(h: usize, w: usize) -> Tensor {
    let n = h * w;
    let lin = |i: usize, len: usize| if len > 1 { 2.0 * i as f64 / (len - 1) as f64 - 1.0 } else { 0.0 };
    Tensor::from_fn(&[2, h, w], |i| {
        let (c, p) = (i / n, i % n);
        if c == 0 {
            lin(p % w, w)
        } else {
            lin(p / w, h)
        }
    })
}

pub fn context_encode(g: &mut Graph, p: &ParamStore, prefix: &str, feat: Var) -> Result<Var> {
    let s = g.shape(feat).to_vec();
    if s.len() != 3 {
        return shape_err(format!("context input must be C×h×w, got {s:?}"));
    }
    let coords = g.constant(coord_planes(s[1], s[2]));
    let x = g.concat0(&[feat, coords]);
    let h = conv(g, p, &format!("{prefix}.0"), x, 1, 1)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    conv(g, p, &format!("{prefix}.1"), h, 1, 1)
}
