//! Graph-based flow warping.
//!
//! Correlation between source and reference features yields a motion feature;
//! the reference also yields a context feature. Both are projected onto `K`
//! graph nodes by learned soft assignments, reasoned over (a content adjacency
//! for context nodes, an adaptive learned adjacency for source nodes), and
//! added back to the pixel features through gates that start at zero. A
//! channel-attention gate then fuses the two streams into `m` flow proposals
//! and one attention map; the proposals are averaged into the final flow.

use crate::autodiff::{Graph, Var};
use crate::backbone::{context_encode, conv, init_context_encoder, linear, LEAKY_SLOPE};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GfwConfig {
    /// Channels of the incoming source/reference features.
    pub feat_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Motion/context width `D`.
    pub dim: usize,
    /// Graph node count `K`.
    pub nodes: usize,
    pub iters: usize,
    /// Number of averaged flow proposals `m`.
    pub heads: usize,
}

impl GfwConfig {
    pub fn grid_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.nodes > self.grid_len() {
            return Err(Error::InvalidArgument(format!(
                "graph needs 1..={} nodes for a {}x{} grid, got {}",
                self.grid_len(),
                self.grid_h,
                self.grid_w,
                self.nodes
            )));
        }
        if self.iters == 0 || self.heads == 0 || self.dim < 4 {
            return Err(Error::InvalidArgument("graph iterations, flow heads and width must be positive".into()));
        }
        Ok(())
    }

    fn squeeze_dim(&self) -> usize {
        (self.dim / 4).max(1)
    }
}

pub fn init_gfw(init: &mut Init, prefix: &str, cfg: &GfwConfig) -> Result<()> {
    cfg.validate()?;
    let (n, d, k) = (cfg.grid_len(), cfg.dim, cfg.nodes);
    init.conv(&format!("{prefix}.motion.0"), n, d, 3)?;
    for i in 1..4 {
        init.conv(&format!("{prefix}.motion.{i}"), d, d, 3)?;
    }
    init_context_encoder(init, &format!("{prefix}.context"), cfg.feat_channels, d)?;
    init.normal(&format!("{prefix}.assign_c"), &[k, n], 1.0)?;
    init.normal(&format!("{prefix}.assign_s"), &[k, n], 1.0)?;
    init.linear(&format!("{prefix}.graph.wg"), d, d, false)?;
    init.linear(&format!("{prefix}.graph.wa"), d, d, false)?;
    init.linear(&format!("{prefix}.learner.l1"), d, d, true)?;
    init.linear(&format!("{prefix}.learner.l2"), d, d, false)?;
    init.linear(&format!("{prefix}.learner.mix"), d, d, false)?;
    init.linear(&format!("{prefix}.theta.scale"), d, d, true)?;
    init.linear(&format!("{prefix}.theta.shift"), d, d, true)?;
    init.store.get_mut(&format!("{prefix}.theta.scale.w"))?.scale_in_place(0.1);
    init.store.get_mut(&format!("{prefix}.theta.shift.w"))?.scale_in_place(0.1);
    init.tensor(&format!("{prefix}.gate_h"), Tensor::zeros(&[1]))?;
    init.tensor(&format!("{prefix}.gate_l"), Tensor::zeros(&[1]))?;
    let r = cfg.squeeze_dim();
    init.linear(&format!("{prefix}.fch.squeeze"), d, r, true)?;
    init.linear(&format!("{prefix}.fch.excite"), r, 2 * d, true)?;
    init.conv(&format!("{prefix}.head.0"), 2 * d, d, 3)?;
    init.conv_scaled(&format!("{prefix}.head.1"), d, 2 * cfg.heads + 1, 3, 0.1)
}

/// `C×h×w` → `N×C` pixel-feature matrix.
fn pixels_as_rows(g: &mut Graph, f: Var) -> Var {
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

/// All-pairs scaled dot products `(p, q) ↦ ⟨Fs[p], Fr[q]⟩ / √C`, as an `N×N` matrix.
pub fn build_correlation(g: &mut Graph, feat_s: Var, feat_r: Var) -> Result<Var> {
    let (ss, sr) = (g.shape(feat_s).to_vec(), g.shape(feat_r).to_vec());
    if ss.len() != 3 || ss != sr {
        return shape_err(format!("correlation needs equal C×h×w features, got {ss:?} and {sr:?}"));
    }
    let (c, n) = (ss[0], ss[1] * ss[2]);
    let rows_s = pixels_as_rows(g, feat_s);
    let fr = g.reshape(feat_r, &[c, n]);
    let corr = g.matmul(rows_s, fr);
    Ok(g.scale(corr, 1.0 / (c as f64).sqrt()))
}

/// Plain-tensor correlation volume.
pub fn correlation_volume(feat_s: &Tensor, feat_r: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(feat_s.clone()), g.constant(feat_r.clone()));
    let c = build_correlation(&mut g, a, b)?;
    Ok(g.value(c).clone())
}

/// Four 3×3 convs over the volume laid out with one channel per source pixel
/// and one spatial position per reference pixel.
pub fn motion_feature(g: &mut Graph, p: &ParamStore, prefix: &str, corr: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(corr).to_vec();
    if s != [h * w, h * w] {
        return shape_err(format!("correlation {s:?} does not match a {h}x{w} grid"));
    }
    let mut x = g.reshape(corr, &[h * w, h, w]);
    for i in 0..4 {
        x = conv(g, p, &format!("{prefix}.{i}"), x, 1, 1)?;
        if i < 3 {
            x = g.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    Ok(x)
}

/// Node embeddings plus the assignment used to produce them.
#[derive(Clone, Copy, Debug)]
pub struct GraphProjection {
    /// `K×D`
    pub nodes: Var,
    /// `K×N`, rows sum to one.
    pub assign: Var,
}

/// `U = S · flatten(f)ᵀ` for a given assignment `S` (`K×N`).
pub fn project_with_assignment(g: &mut Graph, assign: Var, f: Var) -> Result<GraphProjection> {
    let fs = g.shape(f).to_vec();
    let s = g.shape(assign).to_vec();
    if fs.len() != 3 || s.len() != 2 || s[1] != fs[1] * fs[2] {
        return shape_err(format!("assignment {s:?} does not match features {fs:?}"));
    }
    let rows = pixels_as_rows(g, f);
    let nodes = g.matmul(assign, rows);
    Ok(GraphProjection { nodes, assign })
}

/// Soft-assign pixels to `K` nodes with the learned logits `name` (`K×N`).
pub fn project_to_graph(g: &mut Graph, p: &ParamStore, name: &str, f: Var) -> Result<GraphProjection> {
    let logits = g.param(p, name)?;
    let (k, n) = (g.shape(logits)[0], g.shape(logits)[1]);
    let fs = g.shape(f).to_vec();
    if fs.len() == 3 && k > fs[1] * fs[2] {
        return Err(Error::InvalidArgument(format!("{k} graph nodes exceed the {} grid pixels", fs[1] * fs[2])));
    }
    if fs.len() != 3 || n != fs[1] * fs[2] {
        return shape_err(format!("assignment `{name}` covers {n} pixels, features are {fs:?}"));
    }
    let assign = g.softmax_rows(logits);
    project_with_assignment(g, assign, f)
}

/// Outputs of [`graph_reason`]; the adjacencies are from the last iteration.
#[derive(Clone, Copy, Debug)]
pub struct GraphReasoning {
    pub context: Var,
    pub source: Var,
    /// Raw context adjacency `U_c U_cᵀ`.
    pub adj_context: Var,
    /// Learned source adjacency before normalisation.
    pub adj_source: Var,
}

fn row_mean(g: &mut Graph, x: Var) -> Var {
    g.mean_axis(x, 0)
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if !g.value(v).is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Context graph convolution: `softmax(A/√D) · U_c · W_g` with `A = U_c U_cᵀ`.
pub fn context_graph_step(g: &mut Graph, p: &ParamStore, prefix: &str, uc: Var) -> Result<(Var, Var)> {
    let d = g.shape(uc)[1] as f64;
    let t = g.transpose(uc);
    let adj = g.matmul(uc, t);
    check_finite(g, adj, "context adjacency")?;
    let scaled = g.scale(adj, 1.0 / d.sqrt());
    let norm = g.softmax_rows(scaled);
    let agg = g.matmul(norm, uc);
    let out = linear(g, p, &format!("{prefix}.graph.wg"), agg)?;
    Ok((out, adj))
}

/// Adaptive source adjacency from `U_s` modulated by the context nodes.
pub fn learn_source_adjacency(g: &mut Graph, p: &ParamStore, prefix: &str, us: Var, uc: Var) -> Result<Var> {
    let ctx = row_mean(g, uc);
    let scale = linear(g, p, &format!("{prefix}.theta.scale"), ctx)?;
    let shift = linear(g, p, &format!("{prefix}.theta.shift"), ctx)?;
    let h = linear(g, p, &format!("{prefix}.learner.l1"), us)?;
    let gain = g.add_scalar(scale, 1.0);
    let h = g.mul(h, gain);
    let h = g.add(h, shift);
    let h1 = g.relu(h);
    let own = linear(g, p, &format!("{prefix}.learner.l2"), h1)?;
    let pooled = row_mean(g, h1);
    let mixed = linear(g, p, &format!("{prefix}.learner.mix"), pooled)?;
    let h2 = g.add(own, mixed);
    let t = g.transpose(h2);
    let adj = g.matmul(h2, t);
    let dim = g.shape(h2)[1] as f64;
    let adj = g.scale(adj, 1.0 / dim.sqrt());
    check_finite(g, adj, "source adjacency")?;
    Ok(adj)
}

/// `t` rounds of context and adaptive source graph convolution.
pub fn graph_reason(g: &mut Graph, p: &ParamStore, prefix: &str, uc: Var, us: Var, iters: usize) -> Result<GraphReasoning> {
    if iters == 0 {
        return Err(Error::InvalidArgument("graph reasoning needs at least one iteration".into()));
    }
    if g.shape(uc) != g.shape(us) || g.shape(uc).len() != 2 {
        return shape_err(format!("node sets {:?} and {:?} differ", g.shape(uc), g.shape(us)));
    }
    let (mut uc, mut us) = (uc, us);
    let mut adj = (uc, us);
    for _ in 0..iters {
        let (uc_next, adj_c) = context_graph_step(g, p, prefix, uc)?;
        let adj_s = learn_source_adjacency(g, p, prefix, us, uc)?;
        let norm = g.softmax_rows(adj_s);
        let agg = g.matmul(norm, us);
        us = linear(g, p, &format!("{prefix}.graph.wa"), agg)?;
        uc = uc_next;
        adj = (adj_c, adj_s);
    }
    Ok(GraphReasoning {
        context: uc,
        source: us,
        adj_context: adj.0,
        adj_source: adj.1,
    })
}

/// `f + gate · reshape((Sᵀ Û)ᵀ)`.
pub fn back_project(g: &mut Graph, f: Var, assign: Option<Var>, u_hat: Var, gate: Var) -> Result<Var> {
    let assign = assign.ok_or_else(|| Error::InvalidArgument("back-projection needs the node assignment".into()))?;
    let fs = g.shape(f).to_vec();
    let (s, u) = (g.shape(assign).to_vec(), g.shape(u_hat).to_vec());
    if fs.len() != 3 || s[1] != fs[1] * fs[2] || u[0] != s[0] || u[1] != fs[0] {
        return shape_err(format!("cannot back-project nodes {u:?} via {s:?} onto {fs:?}"));
    }
    let st = g.transpose(assign);
    let pix = g.matmul(st, u_hat);
    let chan = g.transpose(pix);
    let map = g.reshape(chan, &fs);
    let gate = g.reshape(gate, &[1, 1, 1]);
    let scaled = g.mul(map, gate);
    Ok(g.add(f, scaled))
}

/// Squeeze-excite gate on `f̂_s`: `2D` values in `(0, 1)` shaped `2D×1×1`.
pub fn channel_attention(g: &mut Graph, p: &ParamStore, prefix: &str, fs_hat: Var) -> Result<Var> {
    let s = g.shape(fs_hat).to_vec();
    let flat = g.reshape(fs_hat, &[s[0], s[1] * s[2]]);
    let gap = g.mean_axis(flat, 1);
    let row = g.transpose(gap);
    let z = linear(g, p, &format!("{prefix}.fch.squeeze"), row)?;
    let z = g.relu(z);
    let z = linear(g, p, &format!("{prefix}.fch.excite"), z)?;
    let gate = g.sigmoid(z);
    let c = g.shape(gate)[1];
    Ok(g.reshape(gate, &[c, 1, 1]))
}

/// Flow proposals and attention from the gated concatenation.
#[derive(Clone, Copy, Debug)]
pub struct FusedOffsets {
    /// `2m×h×w`, consecutive `(x, y)` pairs.
    pub flows: Var,
    /// `1×h×w` in `(0, 1)`.
    pub attention: Var,
    /// `(1 + F_ch) ⊙ concat(f̂_c, f̂_s)`.
    pub fused: Var,
    pub gate: Var,
}

pub fn fuse_offsets(g: &mut Graph, p: &ParamStore, prefix: &str, fc_hat: Var, fs_hat: Var) -> Result<FusedOffsets> {
    if g.shape(fc_hat) != g.shape(fs_hat) {
        return shape_err(format!(
            "context {:?} and motion {:?} features must match",
            g.shape(fc_hat),
            g.shape(fs_hat)
        ));
    }
    let gate = channel_attention(g, p, prefix, fs_hat)?;
    let both = g.concat0(&[fc_hat, fs_hat]);
    let gain = g.add_scalar(gate, 1.0);
    let fused = g.mul(both, gain);
    let h = conv(g, p, &format!("{prefix}.head.0"), fused, 1, 1)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let out = conv(g, p, &format!("{prefix}.head.1"), h, 1, 1)?;
    let c = g.shape(out)[0];
    let flows = g.slice0(out, 0, c - 1);
    let att = g.slice0(out, c - 1, 1);
    let attention = g.sigmoid(att);
    Ok(FusedOffsets {
        flows,
        attention,
        fused,
        gate,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GfwOutput {
    /// Averaged flow at feature scale, `2×h×w`.
    pub flow: Var,
    pub flows: Var,
    pub attention: Var,
    /// `warp(Feat_s, flow) ⊙ attention`.
    pub warped: Var,
}

/// Full module: correlation → motion → graph reasoning → fusion → warp.
pub fn gfw_forward(g: &mut Graph, p: &ParamStore, prefix: &str, cfg: &GfwConfig, feat_s: Var, feat_r: Var) -> Result<GfwOutput> {
    let s = g.shape(feat_s).to_vec();
    if s != [cfg.feat_channels, cfg.grid_h, cfg.grid_w] {
        return shape_err(format!(
            "graph warping configured for {}x{}x{} features, got {s:?}",
            cfg.feat_channels, cfg.grid_h, cfg.grid_w
        ));
    }
    let corr = build_correlation(g, feat_s, feat_r)?;
    let f_s = motion_feature(g, p, &format!("{prefix}.motion"), corr, cfg.grid_h, cfg.grid_w)?;
    let f_c = context_encode(g, p, &format!("{prefix}.context"), feat_r)?;
    let pc = project_to_graph(g, p, &format!("{prefix}.assign_c"), f_c)?;
    let ps = project_to_graph(g, p, &format!("{prefix}.assign_s"), f_s)?;
    let r = graph_reason(g, p, prefix, pc.nodes, ps.nodes, cfg.iters)?;
    let gate_h = g.param(p, &format!("{prefix}.gate_h"))?;
    let gate_l = g.param(p, &format!("{prefix}.gate_l"))?;
    let fc_hat = back_project(g, f_c, Some(pc.assign), r.context, gate_h)?;
    let fs_hat = back_project(g, f_s, Some(ps.assign), r.source, gate_l)?;
    let fused = fuse_offsets(g, p, prefix, fc_hat, fs_hat)?;
    let flow = g.average_flow(fused.flows);
    let moved = g.warp(feat_s, flow);
    let warped = g.mul(moved, fused.attention);
    Ok(GfwOutput {
        flow,
        flows: fused.flows,
        attention: fused.attention,
        warped,
    })
}
