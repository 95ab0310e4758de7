//! Backward (gather) warping with bilinear sampling and border clamping.
//!
//! This is the only warping semantics in the crate: the data generator, the
//! flow network and the losses all go through [`backward_warp`] or
//! [`Graph::warp`], so they agree to the last bit.
//!
//! Offsets are in pixels. Output pixel `(x, y)` samples the source at
//! `(x + flow[0, y, x], y + flow[1, y, x])`; coordinates outside the image are
//! clamped to the border.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::imgproc::resize_bilinear;
use crate::tensor::Tensor;

/// Per-pixel `(x_o, y_o)` offsets stored as a `2×H×W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.chw()?;
        if c != 2 {
            return shape_err(format!("flow needs 2 channels, got {c}"));
        }
        t.ensure_finite("flow")?;
        Ok(Self(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[2, h, w]))
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        t.data_mut()[..h * w].fill(dx);
        t.data_mut()[h * w..].fill(dy);
        Self(t)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mean offset length in pixels.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.height() * self.width();
        let d = self.0.data();
        (0..n).map(|i| d[i].hypot(d[n + i])).sum::<f64>() / n as f64
    }

    pub fn max_magnitude(&self) -> f64 {
        let n = self.height() * self.width();
        let d = self.0.data();
        (0..n).map(|i| d[i].hypot(d[n + i])).fold(0.0, f64::max)
    }
}

/// Bilinear tap for one output pixel.
#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: f64,
    ay: f64,
    /// derivative of the clamped coordinate w.r.t. the offset (0 when clamped)
    dx: f64,
    dy: f64,
}

fn taps(flow: &[f64], h: usize, w: usize) -> Vec<Tap> {
    let n = h * w;
    let mut out = Vec::with_capacity(n);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = x as f64 + flow[i];
            let sy = y as f64 + flow[n + i];
            let (cx, dx) = clamp_coord(sx, xmax);
            let (cy, dy) = clamp_coord(sy, ymax);
            let x0 = (cx.floor() as usize).min(w - 1);
            let y0 = (cy.floor() as usize).min(h - 1);
            out.push(Tap {
                x0,
                x1: (x0 + 1).min(w - 1),
                y0,
                y1: (y0 + 1).min(h - 1),
                ax: cx - x0 as f64,
                ay: cy - y0 as f64,
                dx,
                dy,
            });
        }
    }
    out
}

fn clamp_coord(s: f64, max: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= max {
        (max, 0.0)
    } else {
        (s, 1.0)
    }
}

fn warp_forward(src: &[f64], c: usize, h: usize, w: usize, taps: &[Tap]) -> Vec<f64> {
    let n = h * w;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let s = &src[ch * n..(ch + 1) * n];
        let o = &mut out[ch * n..(ch + 1) * n];
        for (i, t) in taps.iter().enumerate() {
            let top = (1.0 - t.ax) * s[t.y0 * w + t.x0] + t.ax * s[t.y0 * w + t.x1];
            let bot = (1.0 - t.ax) * s[t.y1 * w + t.x0] + t.ax * s[t.y1 * w + t.x1];
            o[i] = (1.0 - t.ay) * top + t.ay * bot;
        }
    }
    out
}

fn check_pair(src: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = src.chw()?;
    let (fc, fh, fw) = flow.chw()?;
    if fc != 2 || fh != h || fw != w {
        return shape_err(format!("warp of {:?} by flow {:?}", src.shape(), flow.shape()));
    }
    Ok((c, h, w))
}

/// Warp `src` (`C×H×W`) by `flow`; see the module docs for the convention.
pub fn backward_warp(src: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (c, h, w) = check_pair(src, flow.tensor())?;
    let t = taps(flow.tensor().data(), h, w);
    Ok(Tensor::from_parts(vec![c, h, w], warp_forward(src.data(), c, h, w, &t)))
}

impl Graph {
    /// Differentiable backward warp w.r.t. both the source and the flow.
    pub fn warp(&mut self, src: Var, flow: Var) -> Var {
        let (c, h, w) = check_pair(self.value(src), self.value(flow)).unwrap_or_else(|e| panic!("warp: {e}"));
        let t = taps(self.value(flow).data(), h, w);
        let value = Tensor::from_parts(vec![c, h, w], warp_forward(self.value(src).data(), c, h, w, &t));
        self.op(
            value,
            &[src, flow],
            Box::new(move |g, p, _| {
                let n = h * w;
                let s = p[0].data();
                let gd = g.data();
                let mut gs = vec![0.0; c * n];
                let mut gf = vec![0.0; 2 * n];
                for ch in 0..c {
                    let sc = &s[ch * n..(ch + 1) * n];
                    let gsc = &mut gs[ch * n..(ch + 1) * n];
                    for (i, t) in t.iter().enumerate() {
                        let go = gd[ch * n + i];
                        if go == 0.0 {
                            continue;
                        }
                        let (w00, w01) = ((1.0 - t.ax) * (1.0 - t.ay), t.ax * (1.0 - t.ay));
                        let (w10, w11) = ((1.0 - t.ax) * t.ay, t.ax * t.ay);
                        let (i00, i01) = (t.y0 * w + t.x0, t.y0 * w + t.x1);
                        let (i10, i11) = (t.y1 * w + t.x0, t.y1 * w + t.x1);
                        gsc[i00] += go * w00;
                        gsc[i01] += go * w01;
                        gsc[i10] += go * w10;
                        gsc[i11] += go * w11;
                        let (v00, v01, v10, v11) = (sc[i00], sc[i01], sc[i10], sc[i11]);
                        if t.dx != 0.0 {
                            gf[i] += go * t.dx * ((1.0 - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
                        }
                        if t.dy != 0.0 {
                            gf[n + i] += go * t.dy * ((1.0 - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(vec![c, h, w], gs)),
                    Some(Tensor::from_parts(vec![2, h, w], gf)),
                ]
            }),
        )
    }

    /// Per-pixel mean of `m` stacked flows (`2m×H×W`, pairs of x/y channels).
    pub fn average_flow(&mut self, flows: Var) -> Var {
        let (c, h, w) = self.value(flows).chw().expect("flow stack");
        assert!(c >= 2 && c % 2 == 0, "flow stack needs 2m channels, got {c}");
        let m = c / 2;
        let stacked = self.reshape(flows, &[m, 2 * h * w]);
        let mean = self.mean_axis(stacked, 0);
        self.reshape(mean, &[2, h, w])
    }
}

/// Arithmetic mean of `m ≥ 1` flows, each `2×H×W`.
pub fn average_flow(flows: &[FlowField]) -> Result<FlowField> {
    let first = flows
        .first()
        .ok_or_else(|| Error::InvalidArgument("average_flow of zero flows".into()))?;
    let mut acc = Tensor::zeros(first.tensor().shape());
    for f in flows {
        f.tensor().expect_same_shape(first.tensor())?;
        acc.add_assign(f.tensor());
    }
    acc.scale_in_place(1.0 / flows.len() as f64);
    FlowField::new(acc)
}

/// Bilinearly upsample a flow by an integer factor, scaling the offsets with it.
pub fn upsample_flow(flow: &FlowField, target_h: usize, target_w: usize) -> Result<FlowField> {
    let (h, w) = (flow.height(), flow.width());
    if !target_h.is_multiple_of(h) || !target_w.is_multiple_of(w) || target_h / h != target_w / w {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {h}x{w} flow to {target_h}x{target_w} by one integer factor"
        )));
    }
    let k = (target_h / h) as f64;
    let mut up = resize_bilinear(flow.tensor(), target_h, target_w)?;
    up.scale_in_place(k);
    FlowField::new(up)
}

/// Write a flow as `FLOW <h> <w>\n` followed by `2·h·w` little-endian `f32`.
pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "FLOW {} {}", flow.height(), flow.width())?;
    for v in flow.tensor().data() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bad = |reason: &str| Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header"))?;
    let head = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("bad header"))?;
    let mut it = head.split_whitespace();
    if it.next() != Some("FLOW") {
        return Err(bad("not a flow file"));
    }
    let h: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad height"))?;
    let w: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("bad width"))?;
    let body = &bytes[nl + 1..];
    if body.len() != 2 * h * w * 4 {
        return Err(bad("payload size does not match header"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FlowField::new(Tensor::new(&[2, h, w], data)?)
}
