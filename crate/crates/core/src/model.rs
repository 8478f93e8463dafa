//! The full autoencoder: tokenizer, pre-processing encoder blocks, the
//! cross-attention style encoder over learned prototypes, the product-VQ
//! content bottleneck, and the link-attention decoder, with the combined
//! training loss.
//!
//! No positional embedding exists anywhere: position enters the content path
//! only through the decoder convolution, and the style path must stay
//! permutation invariant, which residual pre-norm attention preserves.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::attention::{
    cross_attention, link_attention, self_attention, MhaParams,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
use crate::config::{DecoderKind, Domain, RetrieverConfig};
use crate::constraints::{geometric_concentration_loss, truncated_neighborhood_ce};
use crate::optim::{Binding, ParamId, ParamStore};
use crate::quantizer::{product_quantize, sample_gumbel, vq_perplexity_loss, Codebooks, VqMode};
use crate::seeding::derive_seed;
use crate::tape::{Tape, Var};
use crate::tensor::{randn, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct LayerNormP {
    g: ParamId,
    b: ParamId,
}

impl LayerNormP {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNormP {
            g: store.add(format!("{name}.g"), Tensor::ones(&[d]))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d]))?,
        })
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.add(
                format!("{name}.w"),
                randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng),
            )?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?,
        })
    }
}

#[derive(Debug, Clone)]
struct Ffn {
    lin1: Linear,
    lin2: Linear,
}

impl Ffn {
    fn init(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ffn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Ffn {
            lin1: Linear::init(store, &format!("{name}.1"), d, d_ffn, rng)?,
            lin2: Linear::init(store, &format!("{name}.2"), d_ffn, d, rng)?,
        })
    }
}

/// Mix-FFN: MLP, depthwise 3x3 convolution over the grid, GELU, MLP.
#[derive(Debug, Clone)]
struct MixFfn {
    lin1: Linear,
    dw: ParamId,
    lin2: Linear,
}

impl MixFfn {
    fn init(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ffn: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(MixFfn {
            lin1: Linear::init(store, &format!("{name}.1"), d, d_ffn, rng)?,
            dw: store.add(
                format!("{name}.dw"),
                randn(&[d_ffn, 3, 3], 1.0 / 3.0, rng),
            )?,
            lin2: Linear::init(store, &format!("{name}.2"), d_ffn, d, rng)?,
        })
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    ln1: LayerNormP,
    attn: MhaParams,
    ln2: LayerNormP,
    ffn: Ffn,
}

/// Style encoder block: cross-attention from the prototype tokens into the
/// features, token mixing (self-attention over the m prototypes), FFN.
#[derive(Debug, Clone)]
struct StyleBlock {
    ln_q: LayerNormP,
    ln_kv: LayerNormP,
    ca: MhaParams,
    ln_mix: LayerNormP,
    mix: MhaParams,
    ln_ffn: LayerNormP,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
enum DecoderFfn {
    Plain(Ffn),
    Mix(MixFfn),
}

/// Style injection inside a decoder block: link attention onto the
/// (key, style) pairs, or the AdaIN baseline (flattened style -> per-channel
/// affine over column-standardized activations).
#[derive(Debug, Clone)]
enum StyleInject {
    Link(MhaParams),
    AdaIn(Linear),
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_sa: LayerNormP,
    sa: MhaParams,
    ln_link: LayerNormP,
    inject: StyleInject,
    ln_ffn: LayerNormP,
    ffn: DecoderFfn,
}

/// Per-forward runtime switches.
pub struct ForwardCtx<'a> {
    pub tau: f64,
    pub mode: VqMode,
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Overrides the Gumbel draw with fixed noise [n, groups*entries].
    pub frozen_noise: Option<&'a Tensor>,
}

impl<'a> ForwardCtx<'a> {
    /// Deterministic evaluation: hard codes, no noise, no dropout.
    pub fn eval() -> Self {
        ForwardCtx {
            tau: 1.0,
            mode: VqMode::Hard,
            train: false,
            rng: None,
            frozen_noise: None,
        }
    }

    pub fn train(tau: f64, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardCtx {
            tau,
            mode: VqMode::Hard,
            train: true,
            rng: Some(rng),
            frozen_noise: None,
        }
    }

    /// Gradient-check configuration: soft assignment, frozen noise, no
    /// dropout.
    pub fn frozen(tau: f64, noise: &'a Tensor) -> Self {
        ForwardCtx {
            tau,
            mode: VqMode::Soft,
            train: false,
            rng: None,
            frozen_noise: Some(noise),
        }
    }
}

/// Everything one forward pass exposes for losses and analysis.
pub struct ForwardOut {
    /// The raw input as a constant on the tape.
    pub input: Var,
    /// Reconstruction [n, d_raw].
    pub recon: Var,
    /// Style set [m, d_s].
    pub style: Var,
    /// Features after pre-processing [n, d].
    pub features: Var,
    /// Quantized content [n, d_c] (before the decoder projection).
    pub quantized: Var,
    /// Pre-Gumbel logits [n, groups*entries].
    pub logits: Var,
    /// Hard codes per token per group (argmax of noisy weights).
    pub codes: Vec<Vec<usize>>,
    /// Group-0 pre-Gumbel probabilities [n, entries].
    pub group0_probs: Var,
    /// Group-0 argmax of the pre-Gumbel probabilities (structural
    /// constraint targets).
    pub codes_g0: Vec<usize>,
    /// Link-attention weights per decoder layer and head, each [n, m].
    pub link_weights: Vec<Vec<Var>>,
}

/// Scalar loss components of one batch.
pub struct LossOut {
    pub l_sum: Var,
    pub l_rec: Var,
    pub l_vq: Var,
    pub l_sc: Var,
    pub outs: Vec<ForwardOut>,
}

/// Content-path output before decoding.
pub struct ContentOut {
    pub quantized: Var,
    pub logits: Var,
    pub codes: Vec<Vec<usize>>,
    pub group0_probs: Var,
    pub codes_g0: Vec<usize>,
}

pub struct RetrieverModel {
    pub config: RetrieverConfig,
    pub store: ParamStore,
    tok: Linear,
    enc: Vec<EncoderBlock>,
    style_in: Option<Linear>,
    z0: ParamId,
    style_blocks: Vec<StyleBlock>,
    books: Codebooks,
    post_vq: Option<Linear>,
    link_keys: ParamId,
    dec_conv: ParamId,
    dec_blocks: Vec<DecoderBlock>,
    ln_out: LayerNormP,
    detok: Linear,
}

impl RetrieverModel {
    pub fn new(config: RetrieverConfig) -> Result<Self> {
        config.validate().map_err(|e| TensorError::BadArgument {
            op: "RetrieverModel::new",
            reason: e.to_string(),
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xC0FFEE));
        let mut store = ParamStore::new();
        let d = config.d;
        let d_s = config.d_s;

        let tok = Linear::init(&mut store, "tok", config.d_raw, d, &mut rng)?;
        let mut enc = Vec::with_capacity(config.l_e);
        for i in 0..config.l_e {
            enc.push(EncoderBlock {
                ln1: LayerNormP::init(&mut store, &format!("enc{i}.ln1"), d)?,
                attn: MhaParams::init(&mut store, &format!("enc{i}.sa"), d, d, d, config.heads, &mut rng)?,
                ln2: LayerNormP::init(&mut store, &format!("enc{i}.ln2"), d)?,
                ffn: Ffn::init(&mut store, &format!("enc{i}.ffn"), d, config.d_ffn, &mut rng)?,
            });
        }

        let style_in = if d_s != d {
            Some(Linear::init(&mut store, "style.in", d, d_s, &mut rng)?)
        } else {
            None
        };
        let z0 = store.add("style.z0", randn(&[config.m, d_s], 1.0, &mut rng))?;
        let mut style_blocks = Vec::with_capacity(config.l_s);
        for i in 0..config.l_s {
            style_blocks.push(StyleBlock {
                ln_q: LayerNormP::init(&mut store, &format!("style{i}.ln_q"), d_s)?,
                ln_kv: LayerNormP::init(&mut store, &format!("style{i}.ln_kv"), d_s)?,
                ca: MhaParams::init(&mut store, &format!("style{i}.ca"), d_s, d_s, d_s, config.heads, &mut rng)?,
                ln_mix: LayerNormP::init(&mut store, &format!("style{i}.ln_mix"), d_s)?,
                mix: MhaParams::init(&mut store, &format!("style{i}.mix"), d_s, d_s, d_s, config.heads, &mut rng)?,
                ln_ffn: LayerNormP::init(&mut store, &format!("style{i}.ln_ffn"), d_s)?,
                ffn: Ffn::init(&mut store, &format!("style{i}.ffn"), d_s, config.d_ffn, &mut rng)?,
            });
        }

        let books = Codebooks::init(
            &mut store,
            "vq",
            d,
            config.d_c,
            config.groups,
            config.entries,
            &mut rng,
        )?;
        let post_vq = if config.d_c != d {
            Some(Linear::init(&mut store, "dec.proj", config.d_c, d, &mut rng)?)
        } else {
            None
        };
        let link_keys = store.add("dec.link_keys", randn(&[config.m, d_s], 1.0, &mut rng))?;
        let dec_conv = match config.domain {
            Domain::Sequence => store.add(
                "dec.conv",
                randn(&[d, config.kernel], 1.0 / (config.kernel as f64).sqrt(), &mut rng),
            )?,
            Domain::Grid => store.add(
                "dec.conv",
                randn(
                    &[d, d, config.kernel, config.kernel],
                    1.0 / ((d * config.kernel * config.kernel) as f64).sqrt(),
                    &mut rng,
                ),
            )?,
        };
        let mut dec_blocks = Vec::with_capacity(config.l_d);
        for i in 0..config.l_d {
            let ffn = match config.domain {
                Domain::Sequence => {
                    DecoderFfn::Plain(Ffn::init(&mut store, &format!("dec{i}.ffn"), d, config.d_ffn, &mut rng)?)
                }
                Domain::Grid => {
                    DecoderFfn::Mix(MixFfn::init(&mut store, &format!("dec{i}.mixffn"), d, config.d_ffn, &mut rng)?)
                }
            };
            let inject = match config.decoder {
                DecoderKind::LinkAttention => StyleInject::Link(MhaParams::init(
                    &mut store,
                    &format!("dec{i}.link"),
                    d,
                    d_s,
                    d,
                    config.heads,
                    &mut rng,
                )?),
                DecoderKind::AdaIn => StyleInject::AdaIn(Linear::init(
                    &mut store,
                    &format!("dec{i}.adain"),
                    config.m * d_s,
                    2 * d,
                    &mut rng,
                )?),
            };
            dec_blocks.push(DecoderBlock {
                ln_sa: LayerNormP::init(&mut store, &format!("dec{i}.ln_sa"), d)?,
                sa: MhaParams::init(&mut store, &format!("dec{i}.sa"), d, d, d, config.heads, &mut rng)?,
                ln_link: LayerNormP::init(&mut store, &format!("dec{i}.ln_link"), d)?,
                inject,
                ln_ffn: LayerNormP::init(&mut store, &format!("dec{i}.ln_ffn"), d)?,
                ffn,
            });
        }
        let ln_out = LayerNormP::init(&mut store, "dec.ln_out", d)?;
        let detok = Linear::init(&mut store, "detok", d, config.d_raw, &mut rng)?;

        Ok(RetrieverModel {
            config,
            store,
            tok,
            enc,
            style_in,
            z0,
            style_blocks,
            books,
            post_vq,
            link_keys,
            dec_conv,
            dec_blocks,
            ln_out,
            detok,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn grid_dims(&self) -> (usize, usize) {
        (self.config.grid_h, self.config.grid_w)
    }

    // ── building blocks ─────────────────────────────────────────────────

    fn affine_ln(&self, tape: &mut Tape, b: &Binding, ln: &LayerNormP, x: Var) -> Result<Var> {
        let normed = tape.layer_norm(x, LN_EPS)?;
        let scaled = tape.mul(normed, b.var(ln.g))?;
        tape.add(scaled, b.var(ln.b))
    }

    fn linear(&self, tape: &mut Tape, b: &Binding, lin: &Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(lin.w))?;
        tape.add(y, b.var(lin.b))
    }

    fn maybe_dropout(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Result<Var> {
        if ctx.train && self.config.dropout > 0.0 {
            if let Some(rng) = ctx.rng.as_deref_mut() {
                return tape.dropout(x, self.config.dropout, rng);
            }
        }
        Ok(x)
    }

    fn ffn(&self, tape: &mut Tape, b: &Binding, f: &Ffn, x: Var) -> Result<Var> {
        let h = self.linear(tape, b, &f.lin1, x)?;
        let a = tape.gelu(h)?;
        self.linear(tape, b, &f.lin2, a)
    }

    fn mix_ffn(&self, tape: &mut Tape, b: &Binding, f: &MixFfn, x: Var) -> Result<Var> {
        let (h, w) = self.grid_dims();
        let t = self.linear(tape, b, &f.lin1, x)?;
        let c = tape.conv2d_depthwise(t, b.var(f.dw), h, w)?;
        let a = tape.gelu(c)?;
        self.linear(tape, b, &f.lin2, a)
    }

    // ── pipeline stages ─────────────────────────────────────────────────

    /// Tokenize and run the L_e pre-processing blocks. Returns the raw input
    /// constant and the features F.
    pub fn preprocess(
        &self,
        tape: &mut Tape,
        b: &Binding,
        x_raw: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let shape = x_raw.shape();
        if shape.len() != 2 || shape[1] != self.config.d_raw {
            return Err(TensorError::InvalidShape {
                op: "preprocess",
                shape: shape.to_vec(),
                reason: format!("expected [n, {}] raw tokens", self.config.d_raw),
            });
        }
        if self.config.domain == Domain::Grid && shape[0] != self.config.grid_h * self.config.grid_w
        {
            return Err(TensorError::InvalidShape {
                op: "preprocess",
                shape: shape.to_vec(),
                reason: format!(
                    "grid domain expects {}x{} = {} tokens",
                    self.config.grid_h,
                    self.config.grid_w,
                    self.config.grid_h * self.config.grid_w
                ),
            });
        }
        let input = tape.constant(x_raw.clone());
        let mut f = self.linear(tape, b, &self.tok, input)?;
        for blk in &self.enc {
            let q = self.affine_ln(tape, b, &blk.ln1, f)?;
            let att = self_attention(tape, b, &blk.attn, q)?;
            let att = self.maybe_dropout(tape, ctx, att)?;
            f = tape.add(f, att)?;
            let h = self.affine_ln(tape, b, &blk.ln2, f)?;
            let ff = self.ffn(tape, b, &blk.ffn, h)?;
            let ff = self.maybe_dropout(tape, ctx, ff)?;
            f = tape.add(f, ff)?;
        }
        Ok((input, f))
    }

    /// Cross-attention style encoder: the m learned prototypes attend into F
    /// for L_s rounds. Permutation invariant to the rows of F.
    pub fn encode_style(
        &self,
        tape: &mut Tape,
        b: &Binding,
        f: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let f_kv = match &self.style_in {
            Some(lin) => self.linear(tape, b, lin, f)?,
            None => f,
        };
        let mut z = b.var(self.z0);
        for blk in &self.style_blocks {
            let q = self.affine_ln(tape, b, &blk.ln_q, z)?;
            let kv = self.affine_ln(tape, b, &blk.ln_kv, f_kv)?;
            let ca = cross_attention(tape, b, &blk.ca, q, kv)?;
            let ca = self.maybe_dropout(tape, ctx, ca)?;
            z = tape.add(z, ca)?;
            let mixq = self.affine_ln(tape, b, &blk.ln_mix, z)?;
            let mixed = self_attention(tape, b, &blk.mix, mixq)?;
            let mixed = self.maybe_dropout(tape, ctx, mixed)?;
            z = tape.add(z, mixed)?;
            let h = self.affine_ln(tape, b, &blk.ln_ffn, z)?;
            let ff = self.ffn(tape, b, &blk.ffn, h)?;
            let ff = self.maybe_dropout(tape, ctx, ff)?;
            z = tape.add(z, ff)?;
        }
        Ok(z)
    }

    /// Product-VQ content encoder over the features.
    pub fn encode_content(
        &self,
        tape: &mut Tape,
        b: &Binding,
        f: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<ContentOut> {
        let n = tape.shape(f)[0];
        let (g, v) = (self.config.groups, self.config.entries);
        let drawn;
        let noise: Option<&Tensor> = match (ctx.frozen_noise, ctx.train, ctx.rng.as_deref_mut()) {
            (Some(nz), _, _) => Some(nz),
            (None, true, Some(rng)) => {
                drawn = sample_gumbel(&[n, g * v], rng);
                Some(&drawn)
            }
            _ => None,
        };
        let q = product_quantize(tape, b, &self.books, f, ctx.tau, noise, ctx.mode)?;
        let lg0 = tape.slice_cols(q.logits, 0, v)?;
        let group0_probs = tape.softmax(lg0)?;
        let codes_g0 = tape.argmax_rows(group0_probs);
        Ok(ContentOut {
            quantized: q.quantized,
            logits: q.logits,
            codes: q.codes,
            group0_probs,
            codes_g0,
        })
    }

    /// Link-attention decoder: context conv, then L_d rounds of
    /// self-attention, link attention onto (keys, styles), and FFN.
    pub fn decode(
        &self,
        tape: &mut Tape,
        b: &Binding,
        quantized: Var,
        style: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let c = match &self.post_vq {
            Some(lin) => self.linear(tape, b, lin, quantized)?,
            None => quantized,
        };
        let mut y = match self.config.domain {
            Domain::Sequence => tape.conv1d_depthwise(c, b.var(self.dec_conv))?,
            Domain::Grid => {
                let (h, w) = self.grid_dims();
                tape.conv2d(c, b.var(self.dec_conv), h, w)?
            }
        };
        let mut all_weights = Vec::with_capacity(self.dec_blocks.len());
        for blk in &self.dec_blocks {
            let q = self.affine_ln(tape, b, &blk.ln_sa, y)?;
            let sa = self_attention(tape, b, &blk.sa, q)?;
            let sa = self.maybe_dropout(tape, ctx, sa)?;
            y = tape.add(y, sa)?;
            let lq = self.affine_ln(tape, b, &blk.ln_link, y)?;
            let (injected, weights) = match &blk.inject {
                StyleInject::Link(link) => {
                    let (la, weights) =
                        link_attention(tape, b, link, lq, b.var(self.link_keys), style)?;
                    (la, weights)
                }
                StyleInject::AdaIn(lin) => {
                    let d = self.config.d;
                    let flat = tape.reshape(style, vec![1, self.config.m * self.config.d_s])?;
                    let params = self.linear(tape, b, lin, flat)?;
                    let gamma = tape.slice_cols(params, 0, d)?;
                    let gamma = tape.reshape(gamma, vec![d])?;
                    let beta = tape.slice_cols(params, d, d)?;
                    let beta = tape.reshape(beta, vec![d])?;
                    // Column-standardize over tokens, then align each
                    // channel's mean/variance to the style prediction.
                    let qt = tape.transpose(lq)?;
                    let qn = tape.layer_norm(qt, LN_EPS)?;
                    let qcn = tape.transpose(qn)?;
                    let scaled = tape.mul(qcn, gamma)?;
                    let shifted = tape.add(scaled, beta)?;
                    (shifted, Vec::new())
                }
            };
            let injected = self.maybe_dropout(tape, ctx, injected)?;
            y = tape.add(y, injected)?;
            all_weights.push(weights);
            let h = self.affine_ln(tape, b, &blk.ln_ffn, y)?;
            let ff = match &blk.ffn {
                DecoderFfn::Plain(f) => self.ffn(tape, b, f, h)?,
                DecoderFfn::Mix(f) => self.mix_ffn(tape, b, f, h)?,
            };
            let ff = self.maybe_dropout(tape, ctx, ff)?;
            y = tape.add(y, ff)?;
        }
        let normed = self.affine_ln(tape, b, &self.ln_out, y)?;
        let recon = self.linear(tape, b, &self.detok, normed)?;
        Ok((recon, all_weights))
    }

    /// Full autoencoder pass over one sample.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Binding,
        x_raw: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardOut> {
        let (input, f) = self.preprocess(tape, b, x_raw, ctx)?;
        let style = self.encode_style(tape, b, f, ctx)?;
        let content = self.encode_content(tape, b, f, ctx)?;
        let (recon, link_weights) = self.decode(tape, b, content.quantized, style, ctx)?;
        Ok(ForwardOut {
            input,
            recon,
            style,
            features: f,
            quantized: content.quantized,
            logits: content.logits,
            codes: content.codes,
            group0_probs: content.group0_probs,
            codes_g0: content.codes_g0,
            link_weights,
        })
    }

    /// Combined loss over a batch:
    /// lambda_rec * L_rec + lambda_vq * L_VQ + lambda_sc * L_SC.
    ///
    /// `frozen` optionally pins the Gumbel noise per sample (gradient
    /// checks). All three components are always part of the graph so every
    /// parameter receives a gradient even under zero weights.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        b: &Binding,
        batch: &[&Tensor],
        tau: f64,
        mode: VqMode,
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
        frozen: Option<&[Tensor]>,
    ) -> Result<LossOut> {
        if batch.is_empty() {
            return Err(TensorError::BadArgument {
                op: "total_loss",
                reason: "empty batch".into(),
            });
        }
        let mut outs = Vec::with_capacity(batch.len());
        let mut rec_terms = Vec::with_capacity(batch.len());
        let mut sc_terms = Vec::with_capacity(batch.len());
        let mut logits_all = Vec::with_capacity(batch.len());
        for (i, &x) in batch.iter().enumerate() {
            let noise_i = frozen.map(|f| &f[i]);
            let mut ctx = ForwardCtx {
                tau,
                mode,
                train,
                rng: rng.as_deref_mut(),
                frozen_noise: noise_i,
            };
            let out = self.forward(tape, b, x, &mut ctx)?;
            let rec = tape.mse(out.recon, out.input)?;
            rec_terms.push(rec);
            logits_all.push(out.logits);
            let sc = match self.config.domain {
                Domain::Sequence => truncated_neighborhood_ce(
                    tape,
                    out.group0_probs,
                    &out.codes_g0,
                    self.config.gamma_value(),
                )?,
                Domain::Grid => {
                    let (h, w) = self.grid_dims();
                    let probs_t = tape.transpose(out.group0_probs)?;
                    let (loss, _undef) = if self.config.normalize_coords {
                        scaled_geometric_loss(tape, probs_t, h, w)?
                    } else {
                        geometric_concentration_loss(tape, probs_t, h, w)?
                    };
                    loss
                }
            };
            sc_terms.push(sc);
            outs.push(out);
        }
        let l_rec = mean_of(tape, &rec_terms)?;
        let l_sc = mean_of(tape, &sc_terms)?;
        let l_vq = vq_perplexity_loss(tape, &logits_all, self.config.groups, self.config.entries)?;

        for (name, var) in [("L_rec", l_rec), ("L_VQ", l_vq), ("L_SC", l_sc)] {
            if !tape.data(var)[0].is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("loss component {name}"),
                });
            }
        }
        let wr = tape.mul_scalar(l_rec, self.config.lambda_rec)?;
        let wv = tape.mul_scalar(l_vq, self.config.lambda_vq)?;
        let ws = tape.mul_scalar(l_sc, self.config.lambda_sc)?;
        let partial = tape.add(wr, wv)?;
        let l_sum = tape.add(partial, ws)?;
        Ok(LossOut {
            l_sum,
            l_rec,
            l_vq,
            l_sc,
            outs,
        })
    }

    // ── value-level conveniences ────────────────────────────────────────

    /// Style set of one sample under deterministic evaluation.
    pub fn style_of(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let (_, f) = self.preprocess(&mut tape, &b, x, &mut ctx)?;
        let s = self.encode_style(&mut tape, &b, f, &mut ctx)?;
        Ok(tape.value(s).clone())
    }

    /// Full evaluation pass returning plain tensors.
    pub fn run_eval(&self, x: &Tensor) -> Result<EvalOut> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(&mut tape, &b, x, &mut ctx)?;
        Ok(EvalOut {
            recon: tape.value(out.recon).clone(),
            style: tape.value(out.style).clone(),
            quantized: tape.value(out.quantized).clone(),
            codes: out.codes,
            codes_g0: out.codes_g0,
            group0_probs: tape.value(out.group0_probs).clone(),
            link_weights: out
                .link_weights
                .iter()
                .map(|layer| layer.iter().map(|&w| tape.value(w).clone()).collect())
                .collect(),
        })
    }

    /// Decodes the source's content with a style set mixed from source and
    /// target: style rows listed in `from_target` come from the target, the
    /// rest stay source. `None` transfers the full style set.
    pub fn transfer(
        &self,
        source: &Tensor,
        target: &Tensor,
        from_target: Option<&[usize]>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let mut ctx = ForwardCtx::eval();
        let (_, f_src) = self.preprocess(&mut tape, &b, source, &mut ctx)?;
        let s_src = self.encode_style(&mut tape, &b, f_src, &mut ctx)?;
        let (_, f_tgt) = self.preprocess(&mut tape, &b, target, &mut ctx)?;
        let s_tgt = self.encode_style(&mut tape, &b, f_tgt, &mut ctx)?;
        let content = self.encode_content(&mut tape, &b, f_src, &mut ctx)?;

        let style = match from_target {
            None => s_tgt,
            Some(rows) => {
                let m = self.config.m;
                for &r in rows {
                    if r >= m {
                        return Err(TensorError::BadArgument {
                            op: "transfer",
                            reason: format!("style row {r} out of range {m}"),
                        });
                    }
                }
                let mut mixed = tape.value(s_src).clone();
                let tgt = tape.value(s_tgt).clone();
                let d_s = self.config.d_s;
                for &r in rows {
                    mixed.data_mut()[r * d_s..(r + 1) * d_s]
                        .copy_from_slice(&tgt.data()[r * d_s..(r + 1) * d_s]);
                }
                tape.constant(mixed)
            }
        };
        let (recon, _) = self.decode(&mut tape, &b, content.quantized, style, &mut ctx)?;
        Ok(tape.value(recon).clone())
    }

    // ── persistence ─────────────────────────────────────────────────────

    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> std::result::Result<(), CheckpointError> {
        let meta = CheckpointMeta {
            meta: extra_meta.to_vec(),
            config: self.config.to_lines(),
        };
        save_checkpoint(path, &self.store, &meta)
    }

    /// Rebuilds a model from a checkpoint, using the config echo stored in
    /// the file.
    pub fn load(path: &Path) -> std::result::Result<(RetrieverModel, CheckpointMeta), CheckpointError> {
        let (loaded, meta) = load_checkpoint(path)?;
        let config = RetrieverConfig::from_pairs(&meta.config).map_err(|e| {
            CheckpointError::Parse {
                line: 0,
                reason: e.to_string(),
            }
        })?;
        let mut model = RetrieverModel::new(config).map_err(|e| CheckpointError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        // Copy values (and optimizer state) by name; every model parameter
        // must exist in the checkpoint with the same shape.
        for id in model.store.ids().collect::<Vec<_>>() {
            let (name, shape) = {
                let p = model.store.get(id);
                (p.name.clone(), p.value.shape().to_vec())
            };
            let src_id = loaded
                .find(&name)
                .ok_or(CheckpointError::MissingParam { name: name.clone() })?;
            let src = loaded.get(src_id);
            if src.value.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape,
                    got: src.value.shape().to_vec(),
                });
            }
            let dst = model.store.get_mut(id);
            dst.value = src.value.clone();
            dst.m = src.m.clone();
            dst.v = src.v.clone();
            dst.step = src.step;
        }
        Ok((model, meta))
    }

    /// Like [`Self::load`] but verifies the checkpoint's config echo against
    /// an expected runtime config, erroring on the first differing field.
    pub fn load_with_config(
        path: &Path,
        expected: &RetrieverConfig,
    ) -> std::result::Result<(RetrieverModel, CheckpointMeta), CheckpointError> {
        let (model, meta) = Self::load(path)?;
        let have: std::collections::HashMap<&String, &String> =
            meta.config.iter().map(|(k, v)| (k, v)).collect();
        for (k, v) in expected.to_lines() {
            match have.get(&k) {
                Some(got) if **got == v => {}
                Some(got) => {
                    return Err(CheckpointError::ConfigMismatch {
                        field: k,
                        expected: v,
                        got: (*got).clone(),
                    })
                }
                None => {
                    return Err(CheckpointError::ConfigMismatch {
                        field: k,
                        expected: v,
                        got: "<missing>".into(),
                    })
                }
            }
        }
        Ok((model, meta))
    }
}

/// Geometric loss on [0,1]-normalized coordinates: identical structure, but
/// distances are divided by the grid extent so the scale matches weights
/// tuned for normalized losses.
fn scaled_geometric_loss(
    tape: &mut Tape,
    probs_t: Var,
    h: usize,
    w: usize,
) -> Result<(Var, usize)> {
    let (raw, undef) = geometric_concentration_loss(tape, probs_t, h, w)?;
    // Variance scales quadratically with coordinates; dividing by the mean
    // squared extent converts pixel^2 units to the unit square.
    let scale = 1.0 / (((h.max(2) - 1) * (w.max(2) - 1)) as f64);
    let scaled = tape.mul_scalar(raw, scale)?;
    Ok((scaled, undef))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.mul_scalar(acc, 1.0 / terms.len() as f64)
}

/// Value-level outputs of an evaluation pass.
pub struct EvalOut {
    pub recon: Tensor,
    pub style: Tensor,
    pub quantized: Tensor,
    pub codes: Vec<Vec<usize>>,
    pub codes_g0: Vec<usize>,
    pub group0_probs: Tensor,
    /// [layer][head] attention maps [n, m].
    pub link_weights: Vec<Vec<Tensor>>,
}

impl EvalOut {
    /// Head-averaged link-attention map [n, m] at the given decoder layer.
    pub fn link_map(&self, layer: usize) -> Tensor {
        let maps = &self.link_weights[layer];
        let mut acc = Tensor::zeros(maps[0].shape());
        for m in maps {
            for (a, &v) in acc.data_mut().iter_mut().zip(m.data()) {
                *a += v;
            }
        }
        let s = 1.0 / maps.len() as f64;
        for a in acc.data_mut() {
            *a *= s;
        }
        acc
    }
}
