//! Stage-1 training objective: L1, perceptual, style and the occlusion-aware
//! warp loss (OWL), plus the frozen feature network the perceptual terms use.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{Init, ParamStore};
use crate::synth::{foreground_mask, TryonSample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perc: f64,
    pub style: f64,
    pub owl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perc: 1.0,
            style: 100.0,
            owl: 1.0,
        }
    }
}

const FEAT_CHANNELS: [usize; 3] = [8, 16, 32];

/// Three stride-2 conv stages with frozen random weights and a tap after each.
#[derive(Clone, Debug)]
pub struct FixedFeatureNet {
    params: ParamStore,
}

impl FixedFeatureNet {
    pub fn new(seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed, "fixed-feature-net");
        init.trainable = false;
        let mut c_in = 3;
        for (i, &c) in FEAT_CHANNELS.iter().enumerate() {
            init.conv(&format!("featnet.{i}"), c_in, c, 3)
                .expect("fresh store has unique names");
            c_in = c;
        }
        Self { params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Width of [`FixedFeatureNet::pooled`] embeddings.
    pub fn pooled_dim() -> usize {
        FEAT_CHANNELS.iter().sum()
    }

    /// Feature taps of a `3×H×W` image, on the graph.
    pub fn taps(&self, g: &mut Graph, img: Var) -> Vec<Var> {
        let mut x = img;
        let mut out = Vec::with_capacity(FEAT_CHANNELS.len());
        for i in 0..FEAT_CHANNELS.len() {
            let w = g.constant(self.params.get(&format!("featnet.{i}.w")).expect("featnet weight").clone());
            let b = g.constant(self.params.get(&format!("featnet.{i}.b")).expect("featnet bias").clone());
            let y = g.conv2d(x, w, b, 2, 1);
            x = g.leaky_relu(y, 0.1);
            out.push(x);
        }
        out
    }

    pub fn taps_of(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let (c, h, w) = img.chw()?;
        if c != 3 || h < 8 || w < 8 {
            return shape_err(format!("feature net needs a 3-channel image of at least 8x8, got {c}x{h}x{w}"));
        }
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        Ok(self.taps(&mut g, x).into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Global-average-pooled taps concatenated into one embedding vector.
    pub fn pooled(&self, img: &Tensor) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(Self::pooled_dim());
        for t in self.taps_of(img)? {
            let (c, h, w) = t.chw()?;
            let n = (h * w) as f64;
            v.extend(t.data().chunks(h * w).take(c).map(|ch| ch.iter().sum::<f64>() / n));
        }
        Ok(v)
    }
}

/// Mean absolute difference.
pub fn l1_loss(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// Channel Gram matrix `F Fᵀ / (C·h·w)` of a `C×h×w` map.
pub fn gram(g: &mut Graph, f: Var) -> Var {
    let s = g.shape(f).to_vec();
    let (c, n) = (s[0], s[1] * s[2]);
    let flat = g.reshape(f, &[c, n]);
    let t = g.transpose(flat);
    let m = g.matmul(flat, t);
    g.scale(m, 1.0 / (c * n) as f64)
}

/// Mean L1 distance between feature taps.
pub fn perceptual_loss(g: &mut Graph, net: &FixedFeatureNet, a: Var, b: Var) -> Var {
    let ta = net.taps(g, a);
    let tb = net.taps(g, b);
    let terms: Vec<Var> = ta.into_iter().zip(tb).map(|(x, y)| l1_loss(g, x, y)).collect();
    mean_of(g, &terms)
}

/// Mean over taps of the squared Frobenius distance between Gram matrices.
pub fn style_loss(g: &mut Graph, net: &FixedFeatureNet, a: Var, b: Var) -> Var {
    let ta = net.taps(g, a);
    let tb = net.taps(g, b);
    let terms: Vec<Var> = ta
        .into_iter()
        .zip(tb)
        .map(|(x, y)| {
            let gx = gram(g, x);
            let gy = gram(g, y);
            let d = g.sub(gx, gy);
            let d = g.square(d);
            g.sum(d)
        })
        .collect();
    mean_of(g, &terms)
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Garment-present mask of a ground-truth warp: any channel above `tau` in magnitude.
pub fn owl_mask(gt_warp: &Tensor, tau: f64) -> Result<Tensor> {
    gt_warp.chw()?;
    Ok(foreground_mask(gt_warp, tau))
}

/// OWL value plus whether the mask was empty.
pub struct OwlTerm {
    pub value: Var,
    pub degenerate: bool,
}

/// Masked mean absolute error between `gt_warp` and `pred` over garment-present pixels.
///
/// Pixels outside the mask contribute exactly nothing. An empty mask yields 0
/// and a logged warning.
pub fn owl_loss(g: &mut Graph, gt_warp: &Tensor, pred: Var, tau: f64) -> Result<OwlTerm> {
    let (c, h, w) = gt_warp.chw()?;
    if g.shape(pred) != gt_warp.shape() {
        return shape_err(format!(
            "OWL prediction {:?} vs ground truth {:?}",
            g.shape(pred),
            gt_warp.shape()
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(crate::error::Error::InvalidArgument(format!("OWL threshold {tau} outside (0, 1)")));
    }
    let mask = owl_mask(gt_warp, tau)?;
    let count = mask.sum() * c as f64;
    let degenerate = count == 0.0;
    if degenerate {
        log::warn!("OWL: ground-truth warp has no garment pixels above tau={tau}; degenerate sample contributes 0");
    }
    let full_mask = Tensor::from_fn(&[c, h, w], |i| mask.data()[i % (h * w)]);
    let gt = g.constant(gt_warp.clone());
    let m = g.constant(full_mask);
    let d = g.sub(gt, pred);
    let d = g.abs(d);
    let d = g.mul(d, m);
    let s = g.sum(d);
    let value = g.scale(s, 1.0 / count.max(1.0));
    Ok(OwlTerm { value, degenerate })
}

/// Composite loss terms, each already multiplied by its weight.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub perc: f64,
    pub style: f64,
    pub owl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l1 += other.l1;
        self.perc += other.perc;
        self.style += other.style;
        self.owl += other.owl;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown {
            l1: self.l1 * s,
            perc: self.perc * s,
            style: self.style * s,
            owl: self.owl * s,
            total: self.total * s,
        }
    }
}

pub struct Stage1Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub degenerate: bool,
}

/// Composite stage-1 objective.
///
/// L1, perceptual and style compare the coarse try-on with the person image;
/// OWL compares the warped garment with the occlusion-holed ground truth.
pub fn stage1_loss(
    g: &mut Graph,
    tryon_c: Var,
    warp_g: Var,
    sample: &TryonSample,
    w: &LossWeights,
    net: &FixedFeatureNet,
    tau: f64,
) -> Result<Stage1Loss> {
    if g.shape(tryon_c) != sample.person.shape() {
        return shape_err(format!(
            "coarse try-on {:?} vs person {:?}",
            g.shape(tryon_c),
            sample.person.shape()
        ));
    }
    let person = g.constant(sample.person.clone());
    let l1 = l1_loss(g, tryon_c, person);
    let perc = perceptual_loss(g, net, tryon_c, person);
    let style = style_loss(g, net, tryon_c, person);
    let owl = owl_loss(g, &sample.gt_warp, warp_g, tau)?;

    let terms = [(l1, w.l1), (perc, w.perc), (style, w.style), (owl.value, w.owl)];
    let weighted: Vec<Var> = terms.iter().map(|&(v, lam)| g.scale(v, lam)).collect();
    let mut total = weighted[0];
    for &t in &weighted[1..] {
        total = g.add(total, t);
    }
    let val = |v: Var| g.value(v).item();
    let breakdown = LossBreakdown {
        l1: val(weighted[0]),
        perc: val(weighted[1]),
        style: val(weighted[2]),
        owl: val(weighted[3]),
        total: val(total),
    };
    Ok(Stage1Loss {
        total,
        breakdown,
        degenerate: owl.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn eval_owl(gt: &Tensor, pred: &Tensor, tau: f64) -> (f64, bool) {
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let o = owl_loss(&mut g, gt, p, tau).unwrap();
        (g.value(o.value).item(), o.degenerate)
    }

    #[test]
    fn owl_full_mask_constant_difference() {
        let gt = Tensor::full(&[3, 4, 4], 0.6);
        let pred = Tensor::full(&[3, 4, 4], 0.1);
        let (v, deg) = eval_owl(&gt, &pred, 0.05);
        assert!((v - 0.5).abs() < 1e-12);
        assert!(!deg);
    }

    #[test]
    fn owl_half_mask() {
        // left half garment (diff 0.2), right half hole (diff 1.0)
        let gt = Tensor::from_fn(&[3, 4, 4], |i| if i % 4 < 2 { 0.7 } else { 0.0 });
        let pred = Tensor::from_fn(&[3, 4, 4], |i| if i % 4 < 2 { 0.5 } else { 1.0 });
        let (v, _) = eval_owl(&gt, &pred, 0.05);
        assert!((v - 0.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn owl_empty_mask_is_zero_and_flagged() {
        let gt = Tensor::zeros(&[3, 4, 4]);
        let pred = Tensor::full(&[3, 4, 4], 0.3);
        assert_eq!(eval_owl(&gt, &pred, 0.05), (0.0, true));
    }

    #[test]
    fn style_is_invariant_to_shared_pixel_permutation_of_gram_inputs() {
        let mut rng = Rng::new(3);
        let a = rng.normal_tensor(&[4, 3, 5], 1.0);
        let b = rng.normal_tensor(&[4, 3, 5], 1.0);
        let mut perm: Vec<usize> = (0..15).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor| Tensor::from_fn(&[4, 3, 5], |i| t.data()[(i / 15) * 15 + perm[i % 15]]);
        let gram_diff = |x: &Tensor, y: &Tensor| {
            let mut g = Graph::new();
            let (x, y) = (g.constant(x.clone()), g.constant(y.clone()));
            let (gx, gy) = (gram(&mut g, x), gram(&mut g, y));
            g.value(gx).max_abs_diff(g.value(gy))
        };
        assert!((gram_diff(&a, &b) - gram_diff(&permute(&a), &permute(&b))).abs() < 1e-12);
    }

    #[test]
    fn equal_images_give_zero_perceptual_and_style() {
        let net = FixedFeatureNet::new(0);
        let img = Rng::new(1).uniform_tensor(&[3, 16, 16], -1.0, 1.0);
        let mut g = Graph::new();
        let a = g.constant(img.clone());
        let b = g.constant(img);
        let p = perceptual_loss(&mut g, &net, a, b);
        let s = style_loss(&mut g, &net, a, b);
        assert_eq!(g.value(p).item(), 0.0);
        assert_eq!(g.value(s).item(), 0.0);
    }

    #[test]
    fn feature_net_is_seed_stable() {
        assert_eq!(FixedFeatureNet::new(4).params(), FixedFeatureNet::new(4).params());
        assert_ne!(FixedFeatureNet::new(4).params(), FixedFeatureNet::new(5).params());
        assert!(FixedFeatureNet::new(0).params().iter().all(|(_, p)| !p.trainable));
    }
}
