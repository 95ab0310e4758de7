//! Stage 2: latent diffusion inpainting.
//!
//! A small autoencoder maps images to a `4×H/8×W/8` latent and back. It is
//! pretrained on synthetic garments and persons and then frozen. The denoiser
//! is a three-level conv encoder-decoder that predicts the noise of a latent
//! given the 16-channel stack `[x_t; coarse mask; pose; E(warped garment);
//! E(agnostic)]`, a timestep embedding and the caption and texture tokens,
//! which enter through one [`dcaa_attend`] block per level.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::backbone::{conv, decode, encode, init_decoder, init_encoder, linear, DecoderConfig, EncoderConfig, LEAKY_SLOPE};
use crate::config::RunConfig;
use crate::dcaa::{dcaa_attend, embed_text, embed_texture, init_dcaa_block, init_text_embedder, init_texture_embedder};
use crate::error::{shape_err, Error, Result};
use crate::imgproc::{resize_area, resize_bilinear};
use crate::optim::AdamW;
use crate::params::{Init, ParamStore};
use crate::rng::Rng;
use crate::stage1::{stage1_forward, Stage1Model};
use crate::synth::{foreground_mask, TryonSample};
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;
/// Channels of the conditioning stack fed to the denoiser, noisy latent included.
pub const COND_CHANNELS: usize = 16;
pub const TIME_DIM: usize = 16;
pub const DENOISER_LEVELS: usize = 3;

/// Linear per-step variances and their cumulative signal coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "noise schedule needs steps > 0 and 0 < beta_start <= beta_end < 1, got {steps}, {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let frac = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                beta_start + (beta_end - beta_start) * frac
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let last = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        Self::linear(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `t ∈ [0, T]`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [{lo}, {}]", self.steps())));
        }
        Ok(())
    }

    /// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
    pub fn add_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t, 0)?;
        let (a, b) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// `n` descending timesteps ending the chain, `T` first.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "sampling steps must be in [1, {}], got {n}",
                self.steps()
            )));
        }
        Ok((1..=n).rev().map(|k| k * self.steps() / n).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub height: usize,
    pub width: usize,
    pub ae_encoder: EncoderConfig,
    pub ae_decoder: DecoderConfig,
    pub attn_dim: usize,
    pub channels: usize,
}

impl Stage2Config {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            height: cfg.height,
            width: cfg.width,
            ae_encoder: EncoderConfig {
                channels: vec![16, 32, LATENT_CHANNELS],
                ..EncoderConfig::default()
            },
            ae_decoder: DecoderConfig { channels: vec![32, 16] },
            attn_dim: cfg.attn_dim,
            channels: cfg.unet_channels,
        }
    }

    pub fn latent_size(&self) -> (usize, usize) {
        let f = self.ae_encoder.factor();
        (self.height / f, self.width / f)
    }

    fn level_channels(&self) -> [usize; DENOISER_LEVELS] {
        [self.channels, 2 * self.channels, 2 * self.channels]
    }
}

/// Autoencoder, embedders and denoiser in one parameter store.
#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub cfg: Stage2Config,
    pub params: ParamStore,
}

impl Stage2Model {
    pub fn new(cfg: Stage2Config, seed: u64) -> Result<Self> {
        cfg.ae_encoder.check_input(cfg.height, cfg.width)?;
        if cfg.ae_decoder.channels.len() + 1 != cfg.ae_encoder.layers() || cfg.channels == 0 || cfg.attn_dim == 0 {
            return Err(Error::InvalidArgument("stage-2 widths are inconsistent".into()));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed, "stage2");
        init_encoder(&mut init, "ae.enc", 3, &cfg.ae_encoder)?;
        init_decoder(&mut init, "ae.dec", LATENT_CHANNELS, &cfg.ae_decoder)?;
        init.trainable = false;
        init.tensor("ae.scale", Tensor::full(&[1], 1.0))?;
        init.trainable = true;

        let d = cfg.attn_dim;
        init_text_embedder(&mut init, "text", d)?;
        init_texture_embedder(&mut init, "texture", d)?;

        let ch = cfg.level_channels();
        init.linear("unet.time.0", TIME_DIM, 2 * cfg.channels, true)?;
        init.conv("unet.in", COND_CHANNELS, ch[0], 3)?;
        init.conv("unet.down.1", ch[0], ch[1], 3)?;
        init.conv("unet.down.2", ch[1], ch[2], 3)?;
        init.conv("unet.mid", ch[2], ch[2], 3)?;
        init.conv("unet.up.1", ch[2] + ch[1], ch[1], 3)?;
        init.conv("unet.up.0", ch[1] + ch[0], ch[0], 3)?;
        init.conv_scaled("unet.out", ch[0], LATENT_CHANNELS, 3, 0.1)?;
        for (l, &c) in ch.iter().enumerate() {
            init.linear(&format!("unet.time.l{l}"), 2 * cfg.channels, c, true)?;
            init_dcaa_block(&mut init, &format!("unet.dcaa{l}"), c, d)?;
            init.linear(&format!("unet.dcaa{l}.out"), d, c, false)?;
        }
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: Stage2Config, params: ParamStore) -> Result<Self> {
        let template = Self::new(cfg.clone(), 0)?;
        params.check_layout(&template.params)?;
        Ok(Self { cfg, params })
    }

    pub fn latent_scale(&self) -> f64 {
        self.params.get("ae.scale").map(|t| t.data()[0]).unwrap_or(1.0)
    }

    /// Scaled latent of an image.
    pub fn encode_latent(&self, img: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let z = encode(&mut g, &self.params, "ae.enc", x, &self.cfg.ae_encoder)?;
        let s = self.latent_scale();
        Ok(g.value(z).map(|v| v * s))
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        let (lh, lw) = self.cfg.latent_size();
        if z.shape() != [LATENT_CHANNELS, lh, lw] {
            return shape_err(format!("latent must be {LATENT_CHANNELS}x{lh}x{lw}, got {:?}", z.shape()));
        }
        let s = self.latent_scale();
        let mut g = Graph::new();
        let x = g.constant(z.map(|v| v / s));
        let y = decode(&mut g, &self.params, "ae.dec", x, &self.cfg.ae_decoder, self.cfg.height, self.cfg.width)?;
        Ok(g.value(y).clone())
    }

    pub fn freeze_autoencoder(&mut self) {
        self.params.set_trainable_prefix("ae.", false);
    }

    /// Snapshot of every frozen parameter, for the bitwise-unchanged check.
    pub fn frozen_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }
}

/// Mean-L1 reconstruction pretraining; the autoencoder is frozen afterwards and
/// its latent scale set to the inverse latent standard deviation over `images`.
pub fn pretrain_autoencoder(model: &mut Stage2Model, images: &[Tensor], cfg: &RunConfig) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("autoencoder pretraining needs images".into()));
    }
    model.params.set_trainable_prefix("ae.", true);
    model.params.set_trainable("ae.scale", false)?;
    model.params.set("ae.scale", Tensor::full(&[1], 1.0))?;
    let mut opt = AdamW::new(cfg.ae_learning_rate, cfg);
    let mut rng = Rng::derive(cfg.seed, "ae-batches");
    let (h, w) = (model.cfg.height, model.cfg.width);
    let mut losses = Vec::with_capacity(cfg.ae_steps);
    for step in 0..cfg.ae_steps {
        let mut g = Graph::new();
        let mut total: Option<Var> = None;
        let bs = cfg.batch_size.min(images.len());
        for _ in 0..bs {
            let img = &images[rng.below(images.len())];
            let x = g.constant(img.clone());
            let z = encode(&mut g, &model.params, "ae.enc", x, &model.cfg.ae_encoder)?;
            let y = decode(&mut g, &model.params, "ae.dec", z, &model.cfg.ae_decoder, h, w)?;
            let d = g.sub(y, x);
            let d = g.abs(d);
            let l = g.mean(d);
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        let loss = g.scale(total.expect("non-empty batch"), 1.0 / bs as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { batch: step });
        }
        let grads = g.backward(loss).param_grads(&model.params);
        opt.step(&mut model.params, &grads);
        losses.push(value);
    }
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
    for img in images {
        for v in model.encode_latent(img)?.data() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let var = (sq / n - (sum / n).powi(2)).max(1e-12);
    model.params.set("ae.scale", Tensor::full(&[1], 1.0 / var.sqrt()))?;
    model.freeze_autoencoder();
    Ok(losses)
}

/// Mean absolute reconstruction error of the autoencoder over `images`.
pub fn reconstruction_l1(model: &Stage2Model, images: &[Tensor]) -> Result<f64> {
    let mut tot = 0.0;
    for img in images {
        let rec = model.decode_latent(&model.encode_latent(img)?)?;
        tot += rec.zip_map(img, |a, b| (a - b).abs())?.mean();
    }
    Ok(tot / images.len().max(1) as f64)
}

/// Full-resolution inputs derived from a coarse try-on.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Inputs {
    /// Binary `1×H×W` foreground of the coarse try-on.
    pub coarse_mask: Tensor,
    pub pose: Tensor,
    pub agnostic: Tensor,
}

pub fn derive_stage2_inputs(tryon_c: &Tensor, pose: &Tensor, agnostic: &Tensor, tau: f64) -> Result<Stage2Inputs> {
    let (_, h, w) = tryon_c.chw()?;
    if pose.chw()?.1 != h || agnostic.chw()? != (3, h, w) || pose.chw()?.2 != w {
        return shape_err("pose and agnostic must match the coarse try-on size");
    }
    let coarse_mask = foreground_mask(tryon_c, tau);
    if coarse_mask.sum() == 0.0 {
        return Err(Error::Degenerate("coarse try-on is entirely background".into()));
    }
    Ok(Stage2Inputs {
        coarse_mask,
        pose: pose.clone(),
        agnostic: agnostic.clone(),
    })
}

/// Everything the denoiser sees besides `x_t`, at latent size, plus what the
/// final compositing needs at full size.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// `12×h×w`: coarse mask (area), pose (bilinear), E(warped garment), E(agnostic).
    pub planes: Tensor,
    pub mask: Tensor,
    pub agnostic: Tensor,
}

impl Conditioning {
    pub fn new(model: &Stage2Model, inputs: &Stage2Inputs, warp_g: &Tensor) -> Result<Self> {
        let (lh, lw) = model.cfg.latent_size();
        let mask = resize_area(&inputs.coarse_mask, lh, lw)?;
        let pose = resize_bilinear(&inputs.pose, lh, lw)?;
        let zw = model.encode_latent(warp_g)?;
        let za = model.encode_latent(&inputs.agnostic)?;
        let planes = Tensor::concat0(&[&mask, &pose, &zw, &za])?;
        if planes.shape()[0] != COND_CHANNELS - LATENT_CHANNELS {
            return shape_err(format!("conditioning has {} planes", planes.shape()[0]));
        }
        Ok(Self {
            planes,
            mask: inputs.coarse_mask.clone(),
            agnostic: inputs.agnostic.clone(),
        })
    }

    /// The 16-channel denoiser input `[x_t; planes]`.
    pub fn beta(&self, x_t: &Tensor) -> Result<Tensor> {
        Tensor::concat0(&[x_t, &self.planes])
    }
}

/// Sinusoidal embedding of a timestep, `1×TIME_DIM`.
pub fn timestep_embedding(t: usize) -> Tensor {
    let half = TIME_DIM / 2;
    Tensor::from_fn(&[1, TIME_DIM], |i| {
        let k = i % half;
        let freq = (-(1000f64.ln()) * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        if i < half {
            a.sin()
        } else {
            a.cos()
        }
    })
}

fn level_block(g: &mut Graph, p: &ParamStore, l: usize, h: Var, temb: Var, text: Var, tex: Var) -> Result<Var> {
    let s = g.shape(h).to_vec();
    let te = linear(g, p, &format!("unet.time.l{l}"), temb)?;
    let te = g.reshape(te, &[s[0], 1, 1]);
    let h = g.add(h, te);
    let h = g.leaky_relu(h, LEAKY_SLOPE);
    let flat = g.reshape(h, &[s[0], s[1] * s[2]]);
    let z = g.transpose(flat);
    let att = dcaa_attend(g, p, &format!("unet.dcaa{l}"), z, text, tex)?;
    let o = linear(g, p, &format!("unet.dcaa{l}.out"), att.z_new)?;
    let o = g.transpose(o);
    let o = g.reshape(o, &s);
    Ok(g.add(h, o))
}

/// Noise prediction for `beta = [x_t; planes]` at timestep `t`.
pub fn denoiser(g: &mut Graph, p: &ParamStore, beta: Var, t: usize, text: Var, tex: Var) -> Result<Var> {
    let s = g.shape(beta).to_vec();
    if s.len() != 3 || s[0] != COND_CHANNELS {
        return shape_err(format!("denoiser input must have {COND_CHANNELS} channels, got {s:?}"));
    }
    let temb = g.constant(timestep_embedding(t));
    let temb = linear(g, p, "unet.time.0", temb)?;
    let temb = g.leaky_relu(temb, LEAKY_SLOPE);

    let h0 = conv(g, p, "unet.in", beta, 1, 1)?;
    let h0 = level_block(g, p, 0, h0, temb, text, tex)?;
    let h1 = conv(g, p, "unet.down.1", h0, 2, 1)?;
    let h1 = level_block(g, p, 1, h1, temb, text, tex)?;
    let h2 = conv(g, p, "unet.down.2", h1, 2, 1)?;
    let h2 = level_block(g, p, 2, h2, temb, text, tex)?;
    let h2 = conv(g, p, "unet.mid", h2, 1, 1)?;
    let h2 = g.leaky_relu(h2, LEAKY_SLOPE);

    let (s1, s0) = (g.shape(h1).to_vec(), g.shape(h0).to_vec());
    let u1 = g.upsample_nearest(h2, s1[1], s1[2]);
    let u1 = g.concat0(&[u1, h1]);
    let u1 = conv(g, p, "unet.up.1", u1, 1, 1)?;
    let u1 = g.leaky_relu(u1, LEAKY_SLOPE);
    let u0 = g.upsample_nearest(u1, s0[1], s0[2]);
    let u0 = g.concat0(&[u0, h0]);
    let u0 = conv(g, p, "unet.up.0", u0, 1, 1)?;
    let u0 = g.leaky_relu(u0, LEAKY_SLOPE);
    conv(g, p, "unet.out", u0, 1, 1)
}

/// Caption and texture tokens as plain tensors, for sampling.
pub fn embed_conditions(model: &Stage2Model, caption: &str, garment: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = embed_text(&mut g, &model.params, "text", caption)?;
    let gi = g.constant(garment.clone());
    let t = embed_texture(&mut g, &model.params, "texture", gi, model.cfg.attn_dim)?;
    Ok((g.value(x).clone(), g.value(t).clone()))
}

/// One deterministic reverse step from `t` to `t_prev < t`.
#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    model: &Stage2Model,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    cond: &Conditioning,
    text: &Tensor,
    texture: &Tensor,
) -> Result<Tensor> {
    schedule.check_t(t, 1)?;
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!("reverse step must go down, got {t} -> {t_prev}")));
    }
    let mut g = Graph::new();
    let beta = g.constant(cond.beta(x_t)?);
    let tx = g.constant(text.clone());
    let tt = g.constant(texture.clone());
    let eps = denoiser(&mut g, &model.params, beta, t, tx, tt)?;
    let eps = g.value(eps);
    let (a_t, a_p) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    let x0 = x_t.zip_map(eps, |x, e| (x - (1.0 - a_t).sqrt() * e) / a_t.sqrt())?;
    x0.zip_map(eps, |x, e| a_p.sqrt() * x + (1.0 - a_p).sqrt() * e)
}

/// `mask · decoded + (1 − mask) · agnostic`.
pub fn composite(decoded: &Tensor, mask: &Tensor, agnostic: &Tensor) -> Result<Tensor> {
    let (c, h, w) = decoded.chw()?;
    if agnostic.chw()? != (c, h, w) || mask.chw()? != (1, h, w) {
        return shape_err("compositing inputs disagree in size");
    }
    let n = h * w;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        if mask.data()[i % n] > 0.5 {
            decoded.data()[i]
        } else {
            agnostic.data()[i]
        }
    }))
}

/// Denoise from seeded pure noise over `steps` timesteps, decode and composite.
pub fn sample_tryon(
    model: &Stage2Model,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    caption: &str,
    garment: &Tensor,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let ts = schedule.sampling_timesteps(steps)?;
    let (text, texture) = embed_conditions(model, caption, garment)?;
    let (lh, lw) = model.cfg.latent_size();
    let mut x = Rng::derive(seed, "stage2-sample").normal_tensor(&[LATENT_CHANNELS, lh, lw], 1.0);
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        x = denoise_step(model, schedule, &x, t, t_prev, cond, &text, &texture)?;
    }
    x.ensure_finite("sampled latent")?;
    let decoded = model.decode_latent(&x)?;
    composite(&decoded, &cond.mask, &cond.agnostic)
}

/// One training example: conditioning from the frozen stage 1 and the target latent.
#[derive(Clone, Debug)]
pub struct Stage2Example {
    pub id: String,
    pub cond: Conditioning,
    pub target: Tensor,
    pub caption: String,
    pub garment: Tensor,
}

/// Run stage 1 on every sample and encode the targets.
pub fn prepare_examples(stage1: &Stage1Model, model: &Stage2Model, data: &[TryonSample], tau: f64) -> Result<Vec<Stage2Example>> {
    data.iter()
        .map(|s| {
            let out = stage1_forward(stage1, &s.garment, &s.pose, &s.agnostic)?;
            let inputs = derive_stage2_inputs(&out.tryon_c, &s.pose, &s.agnostic, tau)
                .map_err(|e| Error::Degenerate(format!("sample {}: {e}", s.id)))?;
            Ok(Stage2Example {
                id: s.id.clone(),
                cond: Conditioning::new(model, &inputs, &out.warp_g)?,
                target: model.encode_latent(&s.person)?,
                caption: s.caption.clone(),
                garment: s.garment.clone(),
            })
        })
        .collect()
}

/// `‖ε̂ − ε‖²` averaged over latent elements, for one example on `g`.
pub fn eps_loss(g: &mut Graph, model: &Stage2Model, ex: &Stage2Example, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Var> {
    let x_t = schedule.add_noise(&ex.target, t, eps)?;
    let beta = g.constant(ex.cond.beta(&x_t)?);
    let text = embed_text(g, &model.params, "text", &ex.caption)?;
    let gi = g.constant(ex.garment.clone());
    let tex = embed_texture(g, &model.params, "texture", gi, model.cfg.attn_dim)?;
    let pred = denoiser(g, &model.params, beta, t, text, tex)?;
    let target = g.constant(eps.clone());
    let d = g.sub(pred, target);
    let d = g.square(d);
    Ok(g.mean(d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub eps_mse: f64,
}

impl Stage2EpochLog {
    pub fn line(&self) -> String {
        format!("epoch={} step={} eps_mse={:.6}", self.epoch, self.steps, self.eps_mse)
    }
}

pub struct Stage2Training {
    pub model: Stage2Model,
    pub step_losses: Vec<f64>,
    pub epochs: Vec<Stage2EpochLog>,
}

/// Train denoiser, adapters and embedders with the autoencoder and the frozen
/// attention projections held fixed. Timesteps and noise come from the seed.
pub fn train_stage2(
    mut model: Stage2Model,
    data: &[Stage2Example],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&Stage2EpochLog),
) -> Result<Stage2Training> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("stage-2 training needs at least one example".into()));
    }
    model.freeze_autoencoder();
    let frozen = model.frozen_snapshot();
    let schedule = NoiseSchedule::from_run(cfg)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg);
    let mut rng = Rng::derive(cfg.seed, "stage2-noise");
    let (lh, lw) = model.cfg.latent_size();
    let bs = cfg.batch_size.min(data.len());
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::derive(cfg.seed, &format!("stage2-order-{epoch}")).shuffle(&mut order);
        let (mut sum, mut n_steps) = (0.0, 0);
        for chunk in order.chunks(bs) {
            if cfg.max_steps > 0 && step_losses.len() >= cfg.max_steps {
                break 'outer;
            }
            let batch = step_losses.len();
            let mut g = Graph::new();
            let mut total: Option<Var> = None;
            for &i in chunk {
                let t = 1 + rng.below(schedule.steps());
                let eps = rng.normal_tensor(&[LATENT_CHANNELS, lh, lw], 1.0);
                let l = eps_loss(&mut g, &model, &data[i], t, &eps, &schedule)?;
                total = Some(match total {
                    Some(s) => g.add(s, l),
                    None => l,
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / chunk.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { batch });
            }
            let grads = g.backward(loss).param_grads(&model.params);
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::Diverged { batch });
            }
            opt.step(&mut model.params, &grads);
            step_losses.push(value);
            sum += value;
            n_steps += 1;
        }
        if n_steps > 0 {
            let log = Stage2EpochLog {
                epoch,
                steps: step_losses.len(),
                eps_mse: sum / n_steps as f64,
            };
            on_epoch(&log);
            epochs.push(log);
        }
    }
    for (name, before) in &frozen {
        if model.params.get(name)?.data() != before.data() {
            return Err(Error::InvalidArgument(format!("frozen parameter `{name}` changed during training")));
        }
    }
    Ok(Stage2Training {
        model,
        step_losses,
        epochs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> Stage2Config {
        Stage2Config {
            height: 32,
            width: 24,
            ae_encoder: EncoderConfig {
                channels: vec![4, 6, LATENT_CHANNELS],
                ..EncoderConfig::default()
            },
            ae_decoder: DecoderConfig { channels: vec![6, 4] },
            attn_dim: 8,
            channels: 4,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(200) - 0.02).abs() < 1e-15);
        assert!((1..=200).all(|t| s.alpha_bar(t) < s.alpha_bar(t - 1)));
        let x0 = Rng::new(1).normal_tensor(&[4, 2, 2], 1.0);
        let e = Rng::new(2).normal_tensor(&[4, 2, 2], 1.0);
        assert_eq!(s.add_noise(&x0, 0, &e).unwrap(), x0);
        assert!(s.add_noise(&x0, 201, &e).is_err());
        assert_eq!(s.sampling_timesteps(4).unwrap(), vec![200, 150, 100, 50]);
        assert!(s.sampling_timesteps(0).is_err());
    }

    #[test]
    fn denoiser_shape() {
        let m = Stage2Model::new(tiny(), 0).unwrap();
        let mut g = Graph::new();
        let beta = g.constant(Rng::new(0).normal_tensor(&[COND_CHANNELS, 4, 3], 1.0));
        let text = embed_text(&mut g, &m.params, "text", "plain top").unwrap();
        let gi = g.constant(Tensor::zeros(&[3, 32, 24]));
        let tex = embed_texture(&mut g, &m.params, "texture", gi, 8).unwrap();
        let eps = denoiser(&mut g, &m.params, beta, 7, text, tex).unwrap();
        assert_eq!(g.shape(eps), &[LATENT_CHANNELS, 4, 3]);
    }

    #[test]
    fn degenerate_coarse_tryon() {
        let z = Tensor::zeros(&[3, 8, 6]);
        assert!(matches!(derive_stage2_inputs(&z, &z, &z, 0.05), Err(Error::Degenerate(_))));
    }

    #[test]
    fn compositing_keeps_unmasked_pixels() {
        let mut rng = Rng::new(3);
        let dec = rng.uniform_tensor(&[3, 4, 4], -1.0, 1.0);
        let agn = rng.uniform_tensor(&[3, 4, 4], -1.0, 1.0);
        let mask = Tensor::from_fn(&[1, 4, 4], |i| f64::from(i % 3 == 0));
        let out = composite(&dec, &mask, &agn).unwrap();
        for i in 0..48 {
            let want = if (i % 16) % 3 == 0 { dec.data()[i] } else { agn.data()[i] };
            assert_eq!(out.data()[i], want);
        }
    }
}
