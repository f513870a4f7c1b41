//! Pluggable causal sequence backbone. Tokens are assembled as
//! `[H, user, prompt values]`, run through either a small causal transformer
//! or an identity passthrough, and split at index `n` into the
//! intention-aligned block and the rest. Partial freezing keeps the first
//! `F` layers fixed and re-opens only the attention of the last `U` layers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::linear_init;
use crate::tape::{NodeId, ParamId, ParamStore, Tape};

const FF_MULT: usize = 4;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneVariant {
    Transformer,
    IdentityPassthrough,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    /// Backbone width; a linear adapter is inserted when it differs from the
    /// embedding width.
    pub width: usize,
    /// Leading layers that stay fully frozen.
    pub frozen_layers: usize,
    /// Trailing layers whose attention parameters stay trainable.
    pub unfrozen_attention: usize,
    pub variant: BackboneVariant,
}

impl BackboneConfig {
    pub fn new(width: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            width,
            frozen_layers: 0,
            unfrozen_attention: 0,
            variant: BackboneVariant::Transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frozen_layers + self.unfrozen_attention > self.layers {
            return Err(Error::Config(format!(
                "frozen ({}) + unfrozen-attention ({}) layers exceed depth {}",
                self.frozen_layers, self.unfrozen_attention, self.layers
            )));
        }
        if self.variant == BackboneVariant::Transformer {
            if self.layers == 0 || self.heads == 0 {
                return Err(Error::Config("transformer needs at least one layer and head".into()));
            }
            if self.width % self.heads != 0 {
                return Err(Error::Config(format!(
                    "width {} not divisible by heads {}",
                    self.width, self.heads
                )));
            }
            if (self.width / self.heads) % 2 != 0 {
                return Err(Error::Config(format!(
                    "head width {} must be even for rotary positions",
                    self.width / self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_ff1: ParamId,
    b_ff1: ParamId,
    w_ff2: ParamId,
    b_ff2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

impl LayerParams {
    fn attention_ids(&self) -> Vec<ParamId> {
        vec![self.w_q, self.w_k, self.w_v, self.w_o, self.ln1_g, self.ln1_b]
    }

    fn feed_forward_ids(&self) -> Vec<ParamId> {
        vec![self.w_ff1, self.b_ff1, self.w_ff2, self.b_ff2, self.ln2_g, self.ln2_b]
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub cfg: BackboneConfig,
    /// Token width at the interface (the embedding width).
    pub io_dim: usize,
    layers: Vec<LayerParams>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
    adapter: Option<(ParamId, ParamId)>,
}

impl BackboneParams {
    pub fn init(store: &mut ParamStore, cfg: BackboneConfig, io_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let mut layers = Vec::with_capacity(cfg.layers);
        if cfg.variant == BackboneVariant::Transformer {
            for l in 0..cfg.layers {
                let p = |n: &str| format!("backbone.layer{l}.{n}");
                let mut ones = vec![1.0; w];
                let ln1_g = store.add(&p("ln1_g"), 1, w, ones.clone());
                let ln1_b = store.add_zeros(&p("ln1_b"), 1, w);
                let w_q = store.add(&p("w_q"), w, w, linear_init(rng, w, w));
                let w_k = store.add(&p("w_k"), w, w, linear_init(rng, w, w));
                let w_v = store.add(&p("w_v"), w, w, linear_init(rng, w, w));
                let w_o = store.add(&p("w_o"), w, w, linear_init(rng, w, w));
                ones = vec![1.0; w];
                let ln2_g = store.add(&p("ln2_g"), 1, w, ones);
                let ln2_b = store.add_zeros(&p("ln2_b"), 1, w);
                let w_ff1 = store.add(&p("w_ff1"), w, FF_MULT * w, linear_init(rng, w, FF_MULT * w));
                let b_ff1 = store.add_zeros(&p("b_ff1"), 1, FF_MULT * w);
                let w_ff2 = store.add(&p("w_ff2"), FF_MULT * w, w, linear_init(rng, FF_MULT * w, w));
                let b_ff2 = store.add_zeros(&p("b_ff2"), 1, w);
                layers.push(LayerParams {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    ln1_g,
                    ln1_b,
                    w_ff1,
                    b_ff1,
                    w_ff2,
                    b_ff2,
                    ln2_g,
                    ln2_b,
                });
            }
        }
        let ln_f_g = store.add("backbone.ln_f_g", 1, w, vec![1.0; w]);
        let ln_f_b = store.add_zeros("backbone.ln_f_b", 1, w);
        let adapter = if io_dim != w {
            let a_in = store.add("backbone.adapter_in", io_dim, w, linear_init(rng, io_dim, w));
            let a_out = store.add("backbone.adapter_out", w, io_dim, linear_init(rng, w, io_dim));
            Some((a_in, a_out))
        } else {
            None
        };
        let mut out = Self { cfg, io_dim, layers, ln_f_g, ln_f_b, adapter };
        out.apply_freeze_mask(store)?;
        Ok(out)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend(l.attention_ids());
            ids.extend(l.feed_forward_ids());
        }
        ids.push(self.ln_f_g);
        ids.push(self.ln_f_b);
        if let Some((a, b)) = self.adapter {
            ids.push(a);
            ids.push(b);
        }
        ids
    }

    /// Trainability flags per parameter under the partial-freezing contract:
    /// layers `[0, F)` fully frozen, layers `[L-U, L)` attention trainable
    /// with feed-forward frozen, everything between fully trainable. The
    /// final norm and any width adapter count as interface plumbing and stay
    /// trainable.
    pub fn freeze_mask(&self) -> Result<Vec<(ParamId, bool)>> {
        self.cfg.validate()?;
        let mut mask = Vec::new();
        let l = self.cfg.layers;
        let f = self.cfg.frozen_layers;
        let u = self.cfg.unfrozen_attention;
        for (i, layer) in self.layers.iter().enumerate() {
            let (attn, ff) = if i < f {
                (false, false)
            } else if i >= l - u {
                (true, false)
            } else {
                (true, true)
            };
            mask.extend(layer.attention_ids().into_iter().map(|p| (p, attn)));
            mask.extend(layer.feed_forward_ids().into_iter().map(|p| (p, ff)));
        }
        mask.push((self.ln_f_g, true));
        mask.push((self.ln_f_b, true));
        if let Some((a, b)) = self.adapter {
            mask.push((a, true));
            mask.push((b, true));
        }
        Ok(mask)
    }

    pub fn apply_freeze_mask(&mut self, store: &mut ParamStore) -> Result<()> {
        for (pid, trainable) in self.freeze_mask()? {
            store.set_trainable(pid, trainable);
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (tokens, width) = tape.shape(x);
        if width != self.io_dim {
            return Err(Error::Config(format!(
                "backbone expected width {}, got {width}",
                self.io_dim
            )));
        }
        if tokens == 0 {
            return Err(Error::Config("backbone needs at least one token".into()));
        }
        if self.cfg.variant == BackboneVariant::IdentityPassthrough {
            return Ok(x);
        }
        let mut h = x;
        if let Some((a_in, _)) = self.adapter {
            let w = tape.param(a_in);
            h = tape.matmul(h, w);
        }
        for layer in &self.layers {
            h = self.block(tape, h, layer);
        }
        let g = tape.param(self.ln_f_g);
        let b = tape.param(self.ln_f_b);
        let normed = tape.layer_norm_rows(h);
        let scaled = tape.broadcast_row_mul(normed, g);
        h = tape.broadcast_row_add(scaled, b);
        if let Some((_, a_out)) = self.adapter {
            let w = tape.param(a_out);
            h = tape.matmul(h, w);
        }
        Ok(h)
    }

    fn block(&self, tape: &mut Tape, x: NodeId, layer: &LayerParams) -> NodeId {
        let (tokens, _) = tape.shape(x);
        let width = self.cfg.width;
        let heads = self.cfg.heads;
        let hd = width / heads;

        // Pre-norm attention with rotary positions and a causal mask.
        let ln1 = {
            let n = tape.layer_norm_rows(x);
            let g = tape.param(layer.ln1_g);
            let b = tape.param(layer.ln1_b);
            let s = tape.broadcast_row_mul(n, g);
            tape.broadcast_row_add(s, b)
        };
        let wq = tape.param(layer.w_q);
        let wk = tape.param(layer.w_k);
        let wv = tape.param(layer.w_v);
        let q = tape.matmul(ln1, wq);
        let k = tape.matmul(ln1, wk);
        let v = tape.matmul(ln1, wv);
        let (cos, sin) = rope_tables(tape, tokens, hd);
        let mut ctx_heads = Vec::with_capacity(heads);
        for h_i in 0..heads {
            let qh = tape.slice_cols(q, h_i * hd, hd);
            let kh = tape.slice_cols(k, h_i * hd, hd);
            let vh = tape.slice_cols(v, h_i * hd, hd);
            let qh = apply_rope(tape, qh, cos, sin);
            let kh = apply_rope(tape, kh, cos, sin);
            let scores = tape.matmul_trans_b(qh, kh);
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let probs = tape.causal_softmax_rows(scaled);
            ctx_heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&ctx_heads);
        let wo = tape.param(layer.w_o);
        let proj = tape.matmul(ctx, wo);
        let x = tape.add(x, proj);

        // Pre-norm feed-forward.
        let ln2 = {
            let n = tape.layer_norm_rows(x);
            let g = tape.param(layer.ln2_g);
            let b = tape.param(layer.ln2_b);
            let s = tape.broadcast_row_mul(n, g);
            tape.broadcast_row_add(s, b)
        };
        let w1 = tape.param(layer.w_ff1);
        let b1 = tape.param(layer.b_ff1);
        let ff1 = tape.affine(ln2, w1, b1);
        let ff1 = tape.relu(ff1);
        let w2 = tape.param(layer.w_ff2);
        let b2 = tape.param(layer.b_ff2);
        let ff2 = tape.affine(ff1, w2, b2);
        tape.add(x, ff2)
    }
}

fn rope_tables(tape: &mut Tape, tokens: usize, head_dim: usize) -> (NodeId, NodeId) {
    let mut cos = vec![0.0; tokens * head_dim];
    let mut sin = vec![0.0; tokens * head_dim];
    for pos in 0..tokens {
        for i in 0..head_dim / 2 {
            let theta = (pos as f64) / ROPE_BASE.powf(2.0 * i as f64 / head_dim as f64);
            cos[pos * head_dim + 2 * i] = theta.cos();
            cos[pos * head_dim + 2 * i + 1] = theta.cos();
            sin[pos * head_dim + 2 * i] = theta.sin();
            sin[pos * head_dim + 2 * i + 1] = theta.sin();
        }
    }
    (tape.constant(cos, tokens, head_dim), tape.constant(sin, tokens, head_dim))
}

fn apply_rope(tape: &mut Tape, x: NodeId, cos: NodeId, sin: NodeId) -> NodeId {
    let xc = tape.mul(x, cos);
    let xr = tape.rotate_half_cols(x);
    let xs = tape.mul(xr, sin);
    tape.add(xc, xs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Lp,
    Tul,
    Tp,
}

impl TaskMode {
    /// User identity is withheld from the input when linking trajectories to
    /// users, since it is the prediction target.
    pub fn includes_user_token(&self) -> bool {
        !matches!(self, TaskMode::Tul)
    }
}

/// The assembled token matrix `[H, user?, prompts]` with its boundary index.
#[derive(Clone, Copy, Debug)]
pub struct AssembledInput {
    pub tokens: NodeId,
    pub n: usize,
    pub token_count: usize,
}

/// Concatenates intention vectors, the optional user token, and the selected
/// prompt value rows (domain-major, score order) along the sequence axis.
pub fn assemble_input(
    tape: &mut Tape,
    h_rows: NodeId,
    user_row: Option<NodeId>,
    prompt_rows: &[NodeId],
    mode: TaskMode,
) -> Result<AssembledInput> {
    let (n, _) = tape.shape(h_rows);
    if n == 0 {
        return Err(Error::Config("assembled input needs a non-empty intention block".into()));
    }
    let mut parts = vec![h_rows];
    if mode.includes_user_token() {
        let row = user_row.ok_or_else(|| {
            Error::Lookup("task requires a user embedding but none was provided".into())
        })?;
        parts.push(row);
    }
    parts.extend_from_slice(prompt_rows);
    let tokens = tape.concat_rows(&parts);
    let (token_count, _) = tape.shape(tokens);
    Ok(AssembledInput { tokens, n, token_count })
}

#[derive(Clone, Copy, Debug)]
pub struct AlphaBeta {
    pub alpha: NodeId,
    /// Absent when every output token belongs to the intention block.
    pub beta: Option<NodeId>,
}

/// Splits backbone outputs at the intention boundary.
pub fn split_alpha_beta(tape: &mut Tape, output: NodeId, n: usize) -> Result<AlphaBeta> {
    let (tokens, _) = tape.shape(output);
    if n == 0 || n > tokens {
        return Err(Error::Config(format!("split index {n} outside 1..={tokens}")));
    }
    let alpha = tape.slice_rows(output, 0, n);
    let beta = if tokens > n { Some(tape.slice_rows(output, n, tokens - n)) } else { None };
    Ok(AlphaBeta { alpha, beta })
}
