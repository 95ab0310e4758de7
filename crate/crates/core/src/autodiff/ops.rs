use super::{Graph, Var};
use crate::tensor::Tensor;

/// Row-major `C = alpha * op(A) * op(B) + beta * C` with `op(A)` m×k and `op(B)` k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the strides computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {a:?} vs {b:?}");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {a:?} with {b:?}");
            x.max(y)
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output position of a broadcast with the matching input offsets.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum `grad` down to `shape` over broadcast axes.
fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let strides = strides_for(shape, grad.shape());
    let mut out = vec![0.0; shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(grad.shape(), &strides, &strides, |o, i, _| out[i] += g[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = strides_for(a.shape(), &out_shape);
    let sb = strides_for(b.shape(), &out_shape);
    let mut out = vec![0.0; out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
    Tensor::from_parts(out_shape, out)
}

fn unary(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect(),
    )
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x + y);
        self.op(
            value,
            &[a, b],
            Box::new(|g, p, _| {
                vec![Some(reduce_to(g, p[0].shape())), Some(reduce_to(g, p[1].shape()))]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x - y);
        self.op(
            value,
            &[a, b],
            Box::new(|g, p, _| {
                let mut gb = reduce_to(g, p[1].shape());
                gb.scale_in_place(-1.0);
                vec![Some(reduce_to(g, p[0].shape())), Some(gb)]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = binary(self.value(a), self.value(b), |x, y| x * y);
        self.op(
            value,
            &[a, b],
            Box::new(|g, p, _| {
                let ga = binary(g, p[1], |g, y| g * y);
                let gb = binary(g, p[0], |g, x| g * x);
                vec![Some(reduce_to(&ga, p[0].shape())), Some(reduce_to(&gb, p[1].shape()))]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.op(value, &[a], Box::new(move |g, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.op(value, &[a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let value = self.value(a).map(|x| s - x);
        self.op(value, &[a], Box::new(|g, _, _| vec![Some(g.map(|v| -v))]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.op(value, &[a], Box::new(|g, p, _| vec![Some(unary(g, p[0], |g, x| 2.0 * g * x))]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        self.op(
            value,
            &[a],
            Box::new(|g, p, _| {
                vec![Some(unary(g, p[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.op(
            value,
            &[a],
            Box::new(move |g, p, _| {
                vec![Some(unary(g, p[0], |g, x| if x > 0.0 { g } else { slope * g }))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.op(
            value,
            &[a],
            Box::new(|g, _, y| vec![Some(unary(g, y, |g, y| g * y * (1.0 - y)))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.op(
            value,
            &[a],
            Box::new(|g, _, y| vec![Some(unary(g, y, |g, y| g * (1.0 - y * y)))]),
        )
    }

    /// Clip to `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.op(
            value,
            &[a],
            Box::new(move |g, p, _| {
                vec![Some(unary(g, p[0], |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 }))]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.op(
            value,
            &[a],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let value = Tensor::from_parts(out_shape, out);
        self.op(
            value,
            &[a],
            Box::new(|g, p, _| vec![Some(reduce_to_broadcast(g, p[0].shape()))]),
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.op(
            value,
            &[a],
            Box::new(|g, p, _| vec![Some(Tensor::from_parts(p[0].shape().to_vec(), g.data().to_vec()))]),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose2().unwrap_or_else(|e| panic!("transpose: {e}"));
        self.op(
            value,
            &[a],
            Box::new(|g, _, _| vec![Some(g.transpose2().expect("matrix grad"))]),
        )
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat0(&values).unwrap_or_else(|e| panic!("concat: {e}"));
        self.op(
            value,
            parts,
            Box::new(|g, p, _| {
                let mut start = 0;
                p.iter()
                    .map(|t| {
                        let len = t.shape()[0];
                        let s = g.slice0(start, len).expect("concat grad slice");
                        start += len;
                        Some(s)
                    })
                    .collect()
            }),
        )
    }

    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice0(start, len).unwrap_or_else(|e| panic!("slice: {e}"));
        self.op(
            value,
            &[a],
            Box::new(move |g, p, _| {
                let inner: usize = p[0].shape()[1..].iter().product();
                let mut full = Tensor::zeros(p[0].shape());
                full.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
                vec![Some(full)]
            }),
        )
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).rc().expect("matmul lhs");
        let (k2, n) = self.value(b).rc().expect("matmul rhs");
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.op(
            Tensor::from_parts(vec![m, n], out),
            &[a, b],
            Box::new(move |g, p, _| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, p[1].data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, p[0].data(), true, g.data(), false, &mut gb, 0.0);
                vec![
                    Some(Tensor::from_parts(vec![m, k], ga)),
                    Some(Tensor::from_parts(vec![k, n], gb)),
                ]
            }),
        )
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let cols = value.shape()[1];
        self.op(
            value,
            &[a],
            Box::new(move |g, _, y| {
                let mut out = vec![0.0; y.numel()];
                for ((o, gr), yr) in out
                    .chunks_mut(cols)
                    .zip(g.data().chunks(cols))
                    .zip(y.data().chunks(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), out))]
            }),
        )
    }
}

fn reduce_to_broadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    // inverse of reduce_to: expand a keep-dim gradient back over the reduced axis
    let strides = strides_for(g.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut out = vec![0.0; shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(shape, &strides, &zero, |o, i, _| out[o] = gd[i]);
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable row softmax of a matrix.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.rc().expect("softmax needs a matrix");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::from_parts(vec![r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_matches_loop() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let b = Tensor::from_fn(&[1, 3, 1], |i| (i + 1) as f64);
        let out = binary(&a, &b, |x, y| x * y);
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(out.at3(c, y, x), a.at3(c, y, x) * (y + 1) as f64);
                }
            }
        }
        let r = reduce_to(&out, &[1, 3, 1]);
        let want: Vec<f64> = (0..3)
            .map(|y| (0..2).flat_map(|c| (0..4).map(move |x| (c, x))).map(|(c, x)| out.at3(c, y, x)).sum())
            .collect();
        assert_eq!(r.data(), &want[..]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_fn(&[3, 5], |i| (i as f64 * 1.7).sin() * 30.0);
        let s = softmax_rows(&x);
        for row in s.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let a = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 2.0);
        let b = Tensor::from_fn(&[4, 2], |i| (i as f64).cos());
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(va, vb);
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
                assert!((g.value(c).data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }
}
