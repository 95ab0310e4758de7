//! Run configuration, serialised as a flat `key = value` text file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Numeric storage precision of trained parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Full 64-bit; used by gradient checks.
    F64,
    /// Parameters are rounded to 32-bit after every optimizer step.
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means "run all epochs".
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_style: f64,
    pub lambda_owl: f64,
    pub owl_tau: f64,
    pub precision: Precision,
    pub enc_channels: Vec<usize>,
    pub graph_nodes: usize,
    pub graph_iters: usize,
    pub flow_heads: usize,
    /// Width of the motion and context features inside graph warping.
    pub motion_dim: usize,
    pub diffusion_steps: usize,
    pub sample_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub attn_dim: usize,
    pub unet_channels: usize,
    pub ae_steps: usize,
    pub ae_learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 48,
            learning_rate: 3.5e-5,
            batch_size: 6,
            epochs: 200,
            max_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            adam_eps: 1e-8,
            lambda_l1: 1.0,
            lambda_perc: 1.0,
            lambda_style: 100.0,
            lambda_owl: 1.0,
            owl_tau: 0.05,
            precision: Precision::F32,
            enc_channels: vec![32, 64, 96],
            graph_nodes: 32,
            graph_iters: 1,
            flow_heads: 6,
            motion_dim: 64,
            diffusion_steps: 200,
            sample_steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            attn_dim: 64,
            unet_channels: 32,
            ae_steps: 1500,
            ae_learning_rate: 2e-3,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl RunConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            l1: self.lambda_l1,
            perc: self.lambda_perc,
            style: self.lambda_style,
            owl: self.lambda_owl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 8",
                self.height, self.width
            ));
        }
        for (name, v) in [
            ("lambda_l1", self.lambda_l1),
            ("lambda_perc", self.lambda_perc),
            ("lambda_style", self.lambda_style),
            ("lambda_owl", self.lambda_owl),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1)"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.ae_learning_rate > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.owl_tau > 0.0 && self.owl_tau < 1.0) {
            return bad("owl_tau must lie in (0, 1)".into());
        }
        if self.enc_channels.len() != 3 || self.enc_channels.contains(&0) {
            return bad("enc_channels needs three positive widths".into());
        }
        let cells = (self.height / 8) * (self.width / 8);
        if self.graph_nodes == 0 || self.graph_nodes > cells {
            return bad(format!(
                "graph_nodes must lie in 1..={cells} for a {}x{} image",
                self.height, self.width
            ));
        }
        if self.graph_iters == 0 || self.flow_heads == 0 || self.motion_dim < 4 {
            return bad("graph_iters and flow_heads must be at least 1, motion_dim at least 4".into());
        }
        if self.diffusion_steps == 0 || self.sample_steps == 0 || self.sample_steps > self.diffusion_steps {
            return bad("need 1 <= sample_steps <= diffusion_steps".into());
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad("need 0 < beta_start <= beta_end < 1".into());
        }
        if self.attn_dim == 0 || self.unet_channels == 0 {
            return bad("attn_dim and unet_channels must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form; keys in fixed order, floats in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let chans: Vec<String> = self.enc_channels.iter().map(|c| c.to_string()).collect();
        let precision = match self.precision {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "beta1 = {:?}", self.beta1);
        let _ = writeln!(s, "beta2 = {:?}", self.beta2);
        let _ = writeln!(s, "weight_decay = {:?}", self.weight_decay);
        let _ = writeln!(s, "adam_eps = {:?}", self.adam_eps);
        let _ = writeln!(s, "lambda_l1 = {:?}", self.lambda_l1);
        let _ = writeln!(s, "lambda_perc = {:?}", self.lambda_perc);
        let _ = writeln!(s, "lambda_style = {:?}", self.lambda_style);
        let _ = writeln!(s, "lambda_owl = {:?}", self.lambda_owl);
        let _ = writeln!(s, "owl_tau = {:?}", self.owl_tau);
        let _ = writeln!(s, "precision = {precision}");
        let _ = writeln!(s, "enc_channels = {}", chans.join(","));
        let _ = writeln!(s, "graph_nodes = {}", self.graph_nodes);
        let _ = writeln!(s, "graph_iters = {}", self.graph_iters);
        let _ = writeln!(s, "flow_heads = {}", self.flow_heads);
        let _ = writeln!(s, "motion_dim = {}", self.motion_dim);
        let _ = writeln!(s, "diffusion_steps = {}", self.diffusion_steps);
        let _ = writeln!(s, "sample_steps = {}", self.sample_steps);
        let _ = writeln!(s, "beta_start = {:?}", self.beta_start);
        let _ = writeln!(s, "beta_end = {:?}", self.beta_end);
        let _ = writeln!(s, "attn_dim = {}", self.attn_dim);
        let _ = writeln!(s, "unet_channels = {}", self.unet_channels);
        let _ = writeln!(s, "ae_steps = {}", self.ae_steps);
        let _ = writeln!(s, "ae_learning_rate = {:?}", self.ae_learning_rate);
        s
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Apply a single override.
    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "seed" => self.seed = parse(k, v)?,
            "height" => self.height = parse(k, v)?,
            "width" => self.width = parse(k, v)?,
            "learning_rate" => self.learning_rate = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "max_steps" => self.max_steps = parse(k, v)?,
            "beta1" => self.beta1 = parse(k, v)?,
            "beta2" => self.beta2 = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "adam_eps" => self.adam_eps = parse(k, v)?,
            "lambda_l1" => self.lambda_l1 = parse(k, v)?,
            "lambda_perc" => self.lambda_perc = parse(k, v)?,
            "lambda_style" => self.lambda_style = parse(k, v)?,
            "lambda_owl" => self.lambda_owl = parse(k, v)?,
            "owl_tau" => self.owl_tau = parse(k, v)?,
            "precision" => {
                self.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::Config(format!("precision must be f32 or f64, got `{v}`"))),
                }
            }
            "enc_channels" => {
                self.enc_channels = v
                    .split(',')
                    .map(|p| parse(k, p.trim()))
                    .collect::<Result<_>>()?
            }
            "graph_nodes" => self.graph_nodes = parse(k, v)?,
            "graph_iters" => self.graph_iters = parse(k, v)?,
            "flow_heads" => self.flow_heads = parse(k, v)?,
            "motion_dim" => self.motion_dim = parse(k, v)?,
            "diffusion_steps" => self.diffusion_steps = parse(k, v)?,
            "sample_steps" => self.sample_steps = parse(k, v)?,
            "beta_start" => self.beta_start = parse(k, v)?,
            "beta_end" => self.beta_end = parse(k, v)?,
            "attn_dim" => self.attn_dim = parse(k, v)?,
            "unet_channels" => self.unet_channels = parse(k, v)?,
            "ae_steps" => self.ae_steps = parse(k, v)?,
            "ae_learning_rate" => self.ae_learning_rate = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn hash(&self) -> String {
        hash_text(&self.to_text())
    }
}

pub(crate) fn hash_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
