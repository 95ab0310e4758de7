use super::ops::gemm;
use super::{Graph, Var};
use crate::tensor::Tensor;

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * n];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    /// 2-D convolution of a single `C×H×W` map with an `O×C×k×k` kernel and `O` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).chw().expect("conv input");
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[1] == c && ws[2] == ws[3],
            "conv kernel {ws:?} for input with {c} channels"
        );
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(self.shape(b), &[o], "conv bias");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than input");
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            ho: conv_out_size(h, k, stride, pad),
            wo: conv_out_size(wd, k, stride, pad),
        };
        let n = geom.ho * geom.wo;
        let ckk = c * k * k;
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![0.0; o * n];
        for (oc, bias) in self.value(b).data().iter().enumerate() {
            out[oc * n..(oc + 1) * n].fill(*bias);
        }
        gemm(o, ckk, n, self.value(w).data(), false, &cols, false, &mut out, 1.0);
        let value = Tensor::from_parts(vec![o, geom.ho, geom.wo], out);
        self.op(
            value,
            &[x, w, b],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut gw = vec![0.0; o * ckk];
                gemm(o, n, ckk, gd, false, &cols, true, &mut gw, 0.0);
                let mut gcols = vec![0.0; ckk * n];
                gemm(ckk, o, n, p[1].data(), true, gd, false, &mut gcols, 0.0);
                let gx = col2im(&gcols, &geom);
                let gb: Vec<f64> = gd.chunks(n).map(|r| r.iter().sum()).collect();
                vec![
                    Some(Tensor::from_parts(vec![c, h, geom.w], gx)),
                    Some(Tensor::from_parts(p[1].shape().to_vec(), gw)),
                    Some(Tensor::from_parts(vec![o], gb)),
                ]
            }),
        )
    }

    /// Nearest-neighbour resize of a `C×H×W` map to `C×out_h×out_w`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (c, h, w) = self.value(x).chw().expect("upsample input");
        let map: Vec<usize> = (0..out_h * out_w)
            .map(|i| {
                let (y, xx) = (i / out_w, i % out_w);
                (y * h / out_h) * w + xx * w / out_w
            })
            .collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for (i, &src) in map.iter().enumerate() {
                out[ch * out_h * out_w + i] = xd[ch * h * w + src];
            }
        }
        let value = Tensor::from_parts(vec![c, out_h, out_w], out);
        self.op(
            value,
            &[x],
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for (i, &src) in map.iter().enumerate() {
                        gx[ch * h * w + src] += gd[ch * out_h * out_w + i];
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], gx))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (c, h, wd) = x.chw().unwrap();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[o, ho, wo]);
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.data()[((oc * c + ic) * k + ky) * k + kx]
                                        * x.at3(ic, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.set3(oc, oy, ox, s);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = crate::rng::Rng::new(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = rng.normal_tensor(&[3, 7, 6], 1.0);
            let w = rng.normal_tensor(&[4, 3, k, k], 1.0);
            let b = rng.normal_tensor(&[4], 1.0);
            let mut g = Graph::new();
            let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(vx, vw, vb, stride, pad);
            let want = conv_naive(&x, &w, b.data(), stride, pad);
            assert_eq!(g.shape(y), want.shape());
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn upsample_doubles_each_pixel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2], |i| i as f64));
        let y = g.upsample_nearest(x, 4, 4);
        assert_eq!(
            g.value(y).data(),
            &[0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]
        );
    }
}
