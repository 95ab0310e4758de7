//! Stage 1: garment warping and coarse try-on.
//!
//! The garment and the `(pose, agnostic)` stack are encoded separately. Graph
//! warping runs twice with shared weights: once to bring the garment features
//! onto the person, once to align the person features with that result. The
//! refinement net adds a residual offset per stream and a soft layout map; the
//! refined features are decoded into the coarse try-on and the warped garment.

use crate::autodiff::{Graph, Var};
use crate::backbone::{
    conv, decode, encode, init_decoder, init_encoder, init_refine_1x1, refine_1x1, DecoderConfig, EncoderConfig,
    LEAKY_SLOPE,
};
use crate::config::RunConfig;
use crate::error::{shape_err, Error, Result};
use crate::gfw::{gfw_forward, init_gfw, GfwConfig};
use crate::losses::{stage1_loss, FixedFeatureNet, LossBreakdown, LossWeights};
use crate::optim::AdamW;
use crate::params::{Init, ParamStore};
use crate::rng::Rng;
use crate::synth::{verify_sample, TryonSample};
use crate::tensor::Tensor;
use crate::warp::{backward_warp, upsample_flow, FlowField};

/// Seed of the frozen feature network shared by losses and metrics.
pub const FEATURE_NET_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub height: usize,
    pub width: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub motion_dim: usize,
    pub nodes: usize,
    pub iters: usize,
    pub heads: usize,
    pub refine_hidden: usize,
}

impl Stage1Config {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            height: cfg.height,
            width: cfg.width,
            encoder: EncoderConfig {
                channels: cfg.enc_channels.clone(),
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig::default(),
            motion_dim: cfg.motion_dim,
            nodes: cfg.graph_nodes,
            iters: cfg.graph_iters,
            heads: cfg.flow_heads,
            refine_hidden: 64,
        }
    }

    pub fn gfw(&self) -> GfwConfig {
        let f = self.encoder.factor();
        GfwConfig {
            feat_channels: self.encoder.out_channels(),
            grid_h: self.height / f,
            grid_w: self.width / f,
            dim: self.motion_dim,
            nodes: self.nodes,
            iters: self.iters,
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub cfg: Stage1Config,
    pub params: ParamStore,
}

impl Stage1Model {
    pub fn new(cfg: Stage1Config, seed: u64) -> Result<Self> {
        cfg.encoder.check_input(cfg.height, cfg.width)?;
        if cfg.decoder.channels.len() + 1 != cfg.encoder.layers() {
            return Err(Error::InvalidArgument("decoder must mirror the encoder depth".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed, "stage1");
        let c = cfg.encoder.out_channels();
        init_encoder(&mut init, "garment_enc", 3, &cfg.encoder)?;
        init_encoder(&mut init, "person_enc", 6, &cfg.encoder)?;
        init_gfw(&mut init, "gfw", &cfg.gfw())?;
        init.conv("refine_net.0", 2 * c, cfg.refine_hidden, 3)?;
        init.conv("refine_net.1", cfg.refine_hidden, cfg.refine_hidden, 3)?;
        init.conv("refine_net.2", cfg.refine_hidden, cfg.refine_hidden, 3)?;
        init.conv_zero("refine_net.3", cfg.refine_hidden, 5, 3)?;
        init_decoder(&mut init, "decoder", c, &cfg.decoder)?;
        init_refine_1x1(&mut init, "refine_1x1")?;
        Ok(Self { cfg, params })
    }

    /// Rebuild from a parameter store, checking every expected parameter is present.
    pub fn from_params(cfg: Stage1Config, params: ParamStore) -> Result<Self> {
        let template = Self::new(cfg.clone(), 0)?;
        params.check_layout(&template.params)?;
        Ok(Self { cfg, params })
    }
}

/// Refinement outputs at feature scale.
#[derive(Clone, Copy, Debug)]
pub struct RefineOut {
    pub offset_source: Var,
    pub offset_reference: Var,
    pub attention: Var,
}

/// Four 3×3 convs over `concat(Feat_s_warped, Feat_r_warped)` → 5 channels.
pub fn refine_net(g: &mut Graph, p: &ParamStore, prefix: &str, fs_warped: Var, fr_warped: Var) -> Result<RefineOut> {
    if g.shape(fs_warped) != g.shape(fr_warped) {
        return shape_err(format!(
            "refine inputs {:?} and {:?} differ",
            g.shape(fs_warped),
            g.shape(fr_warped)
        ));
    }
    let mut h = g.concat0(&[fs_warped, fr_warped]);
    for i in 0..4 {
        h = conv(g, p, &format!("{prefix}.{i}"), h, 1, 1)?;
        if i < 3 {
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    let offset_source = g.slice0(h, 0, 2);
    let offset_reference = g.slice0(h, 2, 2);
    let logits = g.slice0(h, 4, 1);
    let attention = g.sigmoid(logits);
    Ok(RefineOut {
        offset_source,
        offset_reference,
        attention,
    })
}

/// Graph handles of one stage-1 forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Vars {
    pub warp_g: Var,
    pub tryon_c: Var,
    pub flow_source: Var,
    pub flow_reference: Var,
    pub offset_source: Var,
    pub offset_reference: Var,
    pub refine_attention: Var,
    pub gfw_attention: Var,
}

pub fn stage1_graph(g: &mut Graph, model: &Stage1Model, garment: &Tensor, pose: &Tensor, agnostic: &Tensor) -> Result<Stage1Vars> {
    let cfg = &model.cfg;
    let p = &model.params;
    for (name, t) in [("garment", garment), ("pose", pose), ("agnostic", agnostic)] {
        if t.shape() != [3, cfg.height, cfg.width] {
            return shape_err(format!(
                "{name} is {:?}, model expects 3x{}x{}",
                t.shape(),
                cfg.height,
                cfg.width
            ));
        }
    }
    let gfw_cfg = cfg.gfw();
    let ig = g.constant(garment.clone());
    let person = g.constant(Tensor::concat0(&[pose, agnostic])?);
    let feat_s = encode(g, p, "garment_enc", ig, &cfg.encoder)?;
    let feat_r = encode(g, p, "person_enc", person, &cfg.encoder)?;

    let first = gfw_forward(g, p, "gfw", &gfw_cfg, feat_s, feat_r)?;
    let second = gfw_forward(g, p, "gfw", &gfw_cfg, feat_r, first.warped)?;
    let (fs_w, fr_w) = (first.warped, second.warped);

    let r = refine_net(g, p, "refine_net", fs_w, fr_w)?;
    let s_ref = g.warp(fs_w, r.offset_source);
    let s_ref = g.mul(s_ref, r.attention);
    let r_ref = g.warp(fr_w, r.offset_reference);
    let inv = g.rsub_scalar(1.0, r.attention);
    let r_ref = g.mul(r_ref, inv);

    let both = g.add(s_ref, r_ref);
    let tryon_c = decode(g, p, "decoder", both, &cfg.decoder, cfg.height, cfg.width)?;
    let warp = decode(g, p, "decoder", s_ref, &cfg.decoder, cfg.height, cfg.width)?;
    let warp_g = refine_1x1(g, p, "refine_1x1", warp)?;
    Ok(Stage1Vars {
        warp_g,
        tryon_c,
        flow_source: first.flow,
        flow_reference: second.flow,
        offset_source: r.offset_source,
        offset_reference: r.offset_reference,
        refine_attention: r.attention,
        gfw_attention: first.attention,
    })
}

#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub warp_g: Tensor,
    pub tryon_c: Tensor,
    /// Total garment displacement (graph flow then refinement), full resolution.
    pub flow_source: FlowField,
    pub flow_reference: FlowField,
    /// Refinement attention, full resolution (nearest).
    pub attention: Tensor,
}

/// Follow `outer` then `inner`: the flow sampling `inner` at `p + outer(p)`.
fn compose(outer: &Tensor, inner: &Tensor) -> Result<FlowField> {
    let outer_f = FlowField::new(outer.clone())?;
    let moved = backward_warp(inner, &outer_f)?;
    FlowField::new(outer.zip_map(&moved, |a, b| a + b)?)
}

pub fn stage1_forward(model: &Stage1Model, garment: &Tensor, pose: &Tensor, agnostic: &Tensor) -> Result<Stage1Output> {
    let mut g = Graph::new();
    let v = stage1_graph(&mut g, model, garment, pose, agnostic)?;
    let (h, w) = (model.cfg.height, model.cfg.width);
    let src = compose(g.value(v.offset_source), g.value(v.flow_source))?;
    let rf = compose(g.value(v.offset_reference), g.value(v.flow_reference))?;
    let att = {
        let a = g.constant(g.value(v.refine_attention).clone());
        let up = g.upsample_nearest(a, h, w);
        g.value(up).clone()
    };
    let out = Stage1Output {
        warp_g: g.value(v.warp_g).clone(),
        tryon_c: g.value(v.tryon_c).clone(),
        flow_source: upsample_flow(&src, h, w)?,
        flow_reference: upsample_flow(&rf, h, w)?,
        attention: att,
    };
    out.warp_g.ensure_finite("warped garment")?;
    out.tryon_c.ensure_finite("coarse try-on")?;
    Ok(out)
}

/// Composite loss of one sample on a fresh graph: `(graph, loss var, breakdown)`.
pub fn sample_loss(
    g: &mut Graph,
    model: &Stage1Model,
    s: &TryonSample,
    w: &LossWeights,
    net: &FixedFeatureNet,
    tau: f64,
) -> Result<(Var, LossBreakdown)> {
    let v = stage1_graph(g, model, &s.garment, &s.pose, &s.agnostic)?;
    let l = stage1_loss(g, v.tryon_c, v.warp_g, s, w, net, tau)?;
    Ok((l.total, l.breakdown))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: LossBreakdown,
}

impl EpochLog {
    /// `epoch=.. l1=.. perc=.. style=.. owl=.. total=..`
    pub fn line(&self) -> String {
        format!(
            "epoch={} step={} l1={:.6} perc={:.6} style={:.6} owl={:.6} total={:.6}",
            self.epoch, self.steps, self.loss.l1, self.loss.perc, self.loss.style, self.loss.owl, self.loss.total
        )
    }
}

pub struct Stage1Training {
    pub model: Stage1Model,
    /// Mean composite loss of every optimizer step.
    pub step_losses: Vec<LossBreakdown>,
    pub epochs: Vec<EpochLog>,
}

/// AdamW over mini-batches. Each epoch visits the samples in a seed-derived order.
pub fn train_stage1(data: &[TryonSample], cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Stage1Training> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("stage-1 training needs at least one sample".into()));
    }
    for s in data {
        let v = verify_sample(s);
        if !v.ok {
            return Err(Error::InvalidArgument(format!("sample {} failed verification: {}", s.id, v.message)));
        }
    }
    let model = Stage1Model::new(Stage1Config::from_run(cfg), cfg.seed)?;
    train_stage1_from(model, data, cfg, &mut on_epoch)
}

/// Continue training an existing model.
pub fn train_stage1_from(
    mut model: Stage1Model,
    data: &[TryonSample],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Stage1Training> {
    let net = FixedFeatureNet::new(FEATURE_NET_SEED);
    let weights = cfg.loss_weights();
    let mut opt = AdamW::new(cfg.learning_rate, cfg);
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let bs = cfg.batch_size.min(data.len());
    let mut batch_index = 0;
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::derive(cfg.seed, &format!("stage1-order-{epoch}")).shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        let mut n_steps = 0;
        for chunk in order.chunks(bs) {
            if cfg.max_steps > 0 && step_losses.len() >= cfg.max_steps {
                break 'outer;
            }
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            let mut bd = LossBreakdown::default();
            for &i in chunk {
                let (l, b) = sample_loss(&mut g, &model, &data[i], &weights, &net, cfg.owl_tau)?;
                bd.accumulate(&b);
                total = Some(match total {
                    Some(t) => g.add(t, l),
                    None => l,
                });
            }
            let inv = 1.0 / chunk.len() as f64;
            let loss = g.scale(total.expect("non-empty batch"), inv);
            let bd = bd.scaled(inv);
            if !bd.total.is_finite() {
                return Err(Error::Diverged { batch: batch_index });
            }
            let grads = g.backward(loss).param_grads(&model.params);
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Diverged { batch: batch_index });
            }
            opt.step(&mut model.params, &grads);
            step_losses.push(bd);
            sum.accumulate(&bd);
            n_steps += 1;
            batch_index += 1;
        }
        if n_steps > 0 {
            let log = EpochLog {
                epoch,
                steps: step_losses.len(),
                loss: sum.scaled(1.0 / n_steps as f64),
            };
            on_epoch(&log);
            epochs.push(log);
        }
    }
    Ok(Stage1Training {
        model,
        step_losses,
        epochs,
    })
}
