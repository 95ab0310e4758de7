//! Conditioning tokens and decoupled cross-attention.
//!
//! Captions become tokens through a small fixed vocabulary, a learned lookup
//! table and one token-mixing layer. Garment images become one token per
//! encoder cell, mixed by a single self-attention layer. A [`dcaa_attend`]
//! call attends from latent queries to both token sets with one shared query
//! projection and separate key/value projections, and sums the two results.

use crate::autodiff::{Graph, Var};
use crate::backbone::{encode, init_encoder, linear, EncoderConfig};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Words the synthetic captions (and a few neighbours) are drawn from.
pub const VOCAB: [&str; 50] = [
    "a", "and", "with", "top", "shirt", "tee", "t", "blouse", "sweater", "jacket", "hoodie", "tank", "dress",
    "short", "long", "sleeve", "sleeveless", "striped", "checkered", "patterned", "plain", "dotted", "floral",
    "solid", "printed", "red", "green", "blue", "yellow", "purple", "cyan", "orange", "black", "white", "gray",
    "pink", "brown", "navy", "light", "dark", "cotton", "knit", "casual", "slim", "loose", "crew", "neck", "v",
    "collar", "pocket",
];

/// Maximum text tokens, the null token included.
pub const MAX_TEXT_TOKENS: usize = 8;

/// Token ids for a caption: id 0 is the null token and always comes first;
/// word `VOCAB[i]` has id `i + 1`. Hyphens split words. Long captions are cut
/// to [`MAX_TEXT_TOKENS`].
pub fn tokenize(caption: &str) -> Result<Vec<usize>> {
    let mut ids = vec![0];
    for word in caption.split(|c: char| c.is_whitespace() || c == '-').filter(|w| !w.is_empty()) {
        let lower = word.to_lowercase();
        let id = VOCAB
            .iter()
            .position(|v| *v == lower)
            .ok_or_else(|| Error::UnknownToken(word.to_string()))?;
        ids.push(id + 1);
    }
    ids.truncate(MAX_TEXT_TOKENS);
    Ok(ids)
}

pub fn init_text_embedder(init: &mut Init, prefix: &str, d: usize) -> Result<()> {
    init.normal(&format!("{prefix}.table"), &[VOCAB.len() + 1, d], 1.0)?;
    init.linear(&format!("{prefix}.self"), d, d, true)?;
    init.linear(&format!("{prefix}.mix"), d, d, false)
}

/// `n_t × d` caption embedding: `x W_self + b + mean_tokens(x) W_mix`.
pub fn embed_text(g: &mut Graph, p: &ParamStore, prefix: &str, caption: &str) -> Result<Var> {
    let ids = tokenize(caption)?;
    let rows = VOCAB.len() + 1;
    let onehot = Tensor::from_fn(&[ids.len(), rows], |i| f64::from(ids[i / rows] == i % rows));
    let onehot = g.constant(onehot);
    let table = g.param(p, &format!("{prefix}.table"))?;
    let x = g.matmul(onehot, table);
    let own = linear(g, p, &format!("{prefix}.self"), x)?;
    let pooled = g.mean_axis(x, 0);
    let mixed = linear(g, p, &format!("{prefix}.mix"), pooled)?;
    Ok(g.add(own, mixed))
}

pub fn texture_encoder_config(d: usize) -> EncoderConfig {
    EncoderConfig {
        channels: vec![16, 32, d],
        ..EncoderConfig::default()
    }
}

pub fn init_texture_embedder(init: &mut Init, prefix: &str, d: usize) -> Result<()> {
    init_encoder(init, &format!("{prefix}.enc"), 3, &texture_encoder_config(d))?;
    for m in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.attn.{m}"), d, d, false)?;
    }
    Ok(())
}

/// Scaled dot-product attention; returns `(softmax(q kᵀ/√d) v, weights)`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return shape_err(format!("attention widths disagree: q {qs:?}, k {ks:?}, v {vs:?}"));
    }
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, 1.0 / (qs[1] as f64).sqrt());
    let w = g.softmax_rows(logits);
    Ok((g.matmul(w, v), w))
}

/// One token per encoder cell (`(H/8)(W/8) × d`), mixed by residual self-attention.
pub fn embed_texture(g: &mut Graph, p: &ParamStore, prefix: &str, garment: Var, d: usize) -> Result<Var> {
    let f = encode(g, p, &format!("{prefix}.enc"), garment, &texture_encoder_config(d))?;
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0], s[1] * s[2]]);
    let tokens = g.transpose(flat);
    let q = linear(g, p, &format!("{prefix}.attn.q"), tokens)?;
    let k = linear(g, p, &format!("{prefix}.attn.k"), tokens)?;
    let v = linear(g, p, &format!("{prefix}.attn.v"), tokens)?;
    let (mixed, _) = attention(g, q, k, v)?;
    let out = linear(g, p, &format!("{prefix}.attn.o"), mixed)?;
    Ok(g.add(tokens, out))
}

/// Query/key/value projections of one block. The shared query and the text
/// key/value projections are frozen; the image key/value projections start as
/// copies of the text ones and are trainable.
pub fn init_dcaa_block(init: &mut Init, prefix: &str, query_dim: usize, d: usize) -> Result<()> {
    let was = init.trainable;
    init.trainable = false;
    init.linear(&format!("{prefix}.w_alpha"), query_dim, d, false)?;
    init.linear(&format!("{prefix}.w_beta"), d, d, false)?;
    init.linear(&format!("{prefix}.w_gamma"), d, d, false)?;
    init.trainable = true;
    let beta = init.store.get(&format!("{prefix}.w_beta.w"))?.clone();
    let gamma = init.store.get(&format!("{prefix}.w_gamma.w"))?.clone();
    init.tensor(&format!("{prefix}.w_beta_img.w"), beta)?;
    init.tensor(&format!("{prefix}.w_gamma_img.w"), gamma)?;
    init.trainable = was;
    Ok(())
}

/// Names of the frozen projections of a block.
pub fn frozen_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_alpha.w"),
        format!("{prefix}.w_beta.w"),
        format!("{prefix}.w_gamma.w"),
    ]
}

pub fn adapter_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.w_beta_img.w"), format!("{prefix}.w_gamma_img.w")]
}

#[derive(Clone, Copy, Debug)]
pub struct DcaaOut {
    /// `z' + z''`
    pub z_new: Var,
    pub z_text: Var,
    pub z_image: Var,
    pub attn_text: Var,
    pub attn_image: Var,
    /// The shared query `α = z W_α`.
    pub query: Var,
}

/// `softmax(α βᵀ/√d) γ + softmax(α β'ᵀ/√d) γ'` with `α` computed once.
pub fn dcaa_attend(g: &mut Graph, p: &ParamStore, prefix: &str, z: Var, x_t: Var, g_i: Var) -> Result<DcaaOut> {
    let (xs, gs) = (g.shape(x_t).to_vec(), g.shape(g_i).to_vec());
    let wb = p.get(&format!("{prefix}.w_beta.w"))?.shape().to_vec();
    if xs.len() != 2 || gs.len() != 2 || xs[1] != wb[0] || gs[1] != wb[0] {
        return shape_err(format!(
            "text tokens {xs:?} and image tokens {gs:?} must both have width {}",
            wb[0]
        ));
    }
    let alpha = linear(g, p, &format!("{prefix}.w_alpha"), z)?;
    let beta = linear(g, p, &format!("{prefix}.w_beta"), x_t)?;
    let gamma = linear(g, p, &format!("{prefix}.w_gamma"), x_t)?;
    let beta_i = linear(g, p, &format!("{prefix}.w_beta_img"), g_i)?;
    let gamma_i = linear(g, p, &format!("{prefix}.w_gamma_img"), g_i)?;
    let (z_text, attn_text) = attention(g, alpha, beta, gamma)?;
    let (z_image, attn_image) = attention(g, alpha, beta_i, gamma_i)?;
    let z_new = g.add(z_text, z_image);
    Ok(DcaaOut {
        z_new,
        z_text,
        z_image,
        attn_text,
        attn_image,
        query: alpha,
    })
}
