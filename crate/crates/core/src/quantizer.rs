//! Product vector quantization with Gumbel-softmax assignment.
//!
//! Tokens are projected to G*V logits; each group of V logits picks an entry
//! from its own codebook. Training uses the straight-through estimator: the
//! forward pass takes the one-hot argmax of the Gumbel-softmax weights while
//! the backward pass uses the gradient of the soft weights. A batch-level
//! perplexity loss rewards uniform codebook usage.

use crate::optim::{Binding, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{randn, Result, Tensor, TensorError};

/// Codebook parameters: a logit projection plus G codebooks of V entries.
#[derive(Debug, Clone)]
pub struct Codebooks {
    pub groups: usize,
    pub entries: usize,
    /// Dimension of one group's code vector (d_c / groups).
    pub code_dim: usize,
    /// Logit projection [d_in, groups*entries].
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    /// Codebooks, each [entries, code_dim].
    pub books: Vec<ParamId>,
}

impl Codebooks {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_c: usize,
        groups: usize,
        entries: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if groups == 0 || d_c % groups != 0 {
            return Err(TensorError::BadArgument {
                op: "Codebooks::init",
                reason: format!("groups {groups} must divide d_c {d_c}"),
            });
        }
        if entries < 2 {
            return Err(TensorError::BadArgument {
                op: "Codebooks::init",
                reason: format!("need at least 2 entries per codebook, got {entries}"),
            });
        }
        let code_dim = d_c / groups;
        let proj_w = store.add(
            format!("{prefix}.proj.w"),
            randn(&[d_in, groups * entries], 1.0 / (d_in as f64).sqrt(), rng),
        )?;
        let proj_b = store.add(
            format!("{prefix}.proj.b"),
            Tensor::zeros(&[groups * entries]),
        )?;
        let mut books = Vec::with_capacity(groups);
        for g in 0..groups {
            books.push(store.add(
                format!("{prefix}.book{g}"),
                randn(&[entries, code_dim], 1.0, rng),
            )?);
        }
        Ok(Codebooks {
            groups,
            entries,
            code_dim,
            proj_w,
            proj_b,
            books,
        })
    }
}

/// Forward/backward treatment of the assignment weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VqMode {
    /// One-hot forward, soft gradient (straight-through). Training and eval.
    Hard,
    /// Soft mixture forward. Gradient checks only.
    Soft,
}

/// Result of quantizing one token array.
pub struct QuantizeOut {
    /// [n, d_c]: concatenation of the G chosen (or mixed) code vectors.
    pub quantized: Var,
    /// [n, groups*entries]: pre-noise, pre-temperature logits.
    pub logits: Var,
    /// Per group, the soft Gumbel weights [n, entries].
    pub soft_weights: Vec<Var>,
    /// Hard codes per token and group (argmax of the noisy weights).
    pub codes: Vec<Vec<usize>>,
}

/// Gumbel noise −log(−log(u)), u clamped away from {0, 1}.
pub fn sample_gumbel(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}

/// Gumbel-softmax weights: softmax((logits + noise) / tau) over the last
/// axis. `noise` must match the logits shape.
pub fn gumbel_weights(tape: &mut Tape, logits: Var, noise: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(TensorError::BadArgument {
            op: "gumbel_weights",
            reason: format!("temperature {tau} must be positive"),
        });
    }
    let noisy = tape.add(logits, noise)?;
    let scaled = tape.mul_scalar(noisy, 1.0 / tau)?;
    tape.softmax(scaled)
}

/// Quantizes features [n, d_in] through the product codebooks.
///
/// `noise` of shape [n, groups*entries] freezes the Gumbel draw; pass `None`
/// for noise-free assignment (evaluation).
pub fn product_quantize(
    tape: &mut Tape,
    b: &Binding,
    books: &Codebooks,
    features: Var,
    tau: f64,
    noise: Option<&Tensor>,
    mode: VqMode,
) -> Result<QuantizeOut> {
    if tau <= 0.0 {
        return Err(TensorError::BadArgument {
            op: "product_quantize",
            reason: format!("temperature {tau} must be positive"),
        });
    }
    let n = tape.shape(features)[0];
    let (g, v) = (books.groups, books.entries);
    if let Some(nz) = noise {
        if nz.shape() != [n, g * v] {
            return Err(TensorError::ShapeMismatch {
                op: "product_quantize(noise)",
                lhs: vec![n, g * v],
                rhs: nz.shape().to_vec(),
            });
        }
    }
    let proj = tape.matmul(features, b.var(books.proj_w))?;
    let logits = tape.add(proj, b.var(books.proj_b))?;
    let noise_var = noise.map(|nz| tape.constant(nz.clone()));

    let mut parts = Vec::with_capacity(g);
    let mut soft_weights = Vec::with_capacity(g);
    let mut codes = vec![Vec::with_capacity(g); n];
    for gi in 0..g {
        let lg = tape.slice_cols(logits, gi * v, v)?;
        let weights = match noise_var {
            Some(nv) => {
                let ng = tape.slice_cols(nv, gi * v, v)?;
                gumbel_weights(tape, lg, ng, tau)?
            }
            None => {
                let scaled = tape.mul_scalar(lg, 1.0 / tau)?;
                tape.softmax(scaled)?
            }
        };
        for (i, code) in tape.argmax_rows(weights).into_iter().enumerate() {
            codes[i].push(code);
        }
        let assignment = match mode {
            VqMode::Hard => tape.straight_through_onehot(weights)?,
            VqMode::Soft => weights,
        };
        let quantized_g = tape.matmul(assignment, b.var(books.books[gi]))?;
        parts.push(quantized_g);
        soft_weights.push(weights);
    }
    let quantized = tape.concat_last(&parts)?;
    Ok(QuantizeOut {
        quantized,
        logits,
        soft_weights,
        codes,
    })
}

/// Batch-level VQ perplexity loss:
/// (1/(G·V)) Σ_g exp(Σ_v p̄_{g,v} · log p̄_{g,v}), where p̄_g is the
/// pre-Gumbel softmax of group-g logits averaged over every token in the
/// batch. Uniform usage gives 1/V², a collapsed codebook gives 1/V.
pub fn vq_perplexity_loss(
    tape: &mut Tape,
    batch_logits: &[Var],
    groups: usize,
    entries: usize,
) -> Result<Var> {
    let total_tokens: usize = batch_logits.iter().map(|&l| tape.shape(l)[0]).sum();
    if batch_logits.is_empty() || total_tokens == 0 {
        return Err(TensorError::BadArgument {
            op: "vq_perplexity_loss",
            reason: "empty batch".into(),
        });
    }
    let mut acc: Option<Var> = None;
    for g in 0..groups {
        // p̄_g: average the per-token softmax across every sample.
        let mut sum_g: Option<Var> = None;
        for &logits in batch_logits {
            let lg = tape.slice_cols(logits, g * entries, entries)?;
            let sm = tape.softmax(lg)?;
            let s = tape.sum_axis(sm, 0)?;
            sum_g = Some(match sum_g {
                Some(prev) => tape.add(prev, s)?,
                None => s,
            });
        }
        let pbar = tape.mul_scalar(sum_g.expect("non-empty batch"), 1.0 / total_tokens as f64)?;
        // Guard against exact-zero probabilities (softmax underflow): the
        // offset is far below f64 resolution for any realistic p̄ and keeps
        // p·log(p) at exactly 0 instead of NaN when p = 0.
        let guarded = tape.add_scalar(pbar, 1e-300)?;
        let logp = tape.log(guarded)?;
        let plogp = tape.mul(pbar, logp)?;
        let neg_h = tape.sum_all(plogp)?;
        let e = tape.exp(neg_h)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, e)?,
            None => e,
        });
    }
    tape.mul_scalar(acc.expect("groups >= 1"), 1.0 / (groups * entries) as f64)
}

/// Temperature annealing: tau(step) = max(tau_min, tau_init * decay^step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub tau_init: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl AnnealSchedule {
    pub fn new(tau_init: f64, tau_min: f64, decay: f64) -> Result<Self> {
        if tau_init <= 0.0 || tau_min <= 0.0 || !(0.0..=1.0).contains(&decay) || decay == 0.0 {
            return Err(TensorError::BadArgument {
                op: "AnnealSchedule::new",
                reason: format!(
                    "need tau_init > 0, tau_min > 0, decay in (0, 1]; got {tau_init}, {tau_min}, {decay}"
                ),
            });
        }
        Ok(AnnealSchedule {
            tau_init,
            tau_min,
            decay,
        })
    }

    pub fn tau(&self, step: u64) -> f64 {
        (self.tau_init * self.decay.powf(step as f64)).max(self.tau_min)
    }
}
