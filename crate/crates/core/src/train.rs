//! Training loop: shuffled minibatches, temperature annealing, Adam with an
//! optional warmup/inverse-power lr schedule, per-step logging, and periodic
//! checkpoints.
//!
//! Determinism: the shuffle permutation of epoch e and the Gumbel/dropout
//! RNG of step s are both derived from the config seed and the (e, s)
//! counters alone, so a resumed run replays exactly the stream a straight
//! run would have used.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointError;
use crate::config::Domain;
use crate::data::{Dataset, Structure};
use crate::model::RetrieverModel;
use crate::quantizer::{AnnealSchedule, VqMode};
use crate::seeding::derive_seed;
use crate::tape::Tape;
use crate::tensor::TensorError;

const EPOCH_STREAM: u64 = 1_000_000;
const STEP_STREAM: u64 = 2_000_000;

#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Io(String),
    /// Loss went non-finite; the last checkpoint on disk is kept.
    Diverged { step: u64, component: String },
    DataMismatch { reason: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
            TrainError::Io(e) => write!(f, "training io error: {e}"),
            TrainError::Diverged { step, component } => {
                write!(f, "training diverged at step {step} ({component})")
            }
            TrainError::DataMismatch { reason } => write!(f, "dataset/config mismatch: {reason}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e.to_string())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub tau: f64,
    pub lr: f64,
    pub l_rec: f64,
    pub l_vq: f64,
    pub l_sc: f64,
    pub l_sum: f64,
    /// Mean over groups of exp(entropy) of the batch's hard-code histogram.
    pub perplexity: f64,
}

impl LogRow {
    pub fn csv_header() -> &'static str {
        "step,tau,lr,l_rec,l_vq,l_sc,l_sum,perplexity"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.tau, self.lr, self.l_rec, self.l_vq, self.l_sc, self.l_sum,
            self.perplexity
        )
    }
}

pub struct TrainOpts {
    /// Where checkpoints and the log CSV go; None keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Hard cap on optimizer steps (None = epochs * steps_per_epoch).
    pub max_steps: Option<u64>,
    /// Starting step (resume); 0 for a fresh run.
    pub start_step: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            out_dir: None,
            max_steps: None,
            start_step: 0,
        }
    }
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub final_step: u64,
    pub final_checkpoint: Option<PathBuf>,
}

fn check_compat(model: &RetrieverModel, data: &Dataset) -> Result<(), TrainError> {
    let cfg = &model.config;
    let (domain_ok, reason) = match (cfg.domain, data.structure) {
        (Domain::Sequence, Structure::Sequence { .. }) => (true, String::new()),
        (Domain::Grid, Structure::Grid { h, w }) => (
            h == cfg.grid_h && w == cfg.grid_w,
            format!(
                "dataset grid {h}x{w} vs config {}x{}",
                cfg.grid_h, cfg.grid_w
            ),
        ),
        (a, b) => (false, format!("config domain {a} vs dataset {b:?}")),
    };
    if !domain_ok {
        return Err(TrainError::DataMismatch { reason });
    }
    let d_raw = data.samples[0].tokens.shape()[1];
    if d_raw != cfg.d_raw {
        return Err(TrainError::DataMismatch {
            reason: format!("dataset token dim {d_raw} vs config d_raw {}", cfg.d_raw),
        });
    }
    Ok(())
}

/// Empirical code perplexity of a batch: per group, exp of the entropy of
/// the hard-code histogram, averaged over groups. V means perfectly uniform
/// usage, 1 means collapse.
pub fn code_perplexity(codes: &[&Vec<Vec<usize>>], groups: usize, entries: usize) -> f64 {
    let mut total = 0.0;
    for g in 0..groups {
        let mut hist = vec![0usize; entries];
        let mut n = 0usize;
        for batch in codes {
            for token in batch.iter() {
                hist[token[g]] += 1;
                n += 1;
            }
        }
        let mut h = 0.0;
        for &c in &hist {
            if c > 0 {
                let p = c as f64 / n as f64;
                h -= p * p.ln();
            }
        }
        total += h.exp();
    }
    total / groups as f64
}

/// Runs the training loop. The model is updated in place; per-step rows are
/// returned and (when `out_dir` is set) streamed to `train_log.csv`, with
/// checkpoints every `ckpt_every` steps plus a final `model.ckpt`.
pub fn train(
    model: &mut RetrieverModel,
    data: &Dataset,
    opts: &TrainOpts,
) -> Result<TrainOutcome, TrainError> {
    check_compat(model, data)?;
    let cfg = model.config.clone();
    let anneal = AnnealSchedule::new(cfg.tau_init, cfg.tau_min, cfg.tau_decay)?;
    let steps_per_epoch = data.samples.len() / cfg.batch;
    if steps_per_epoch == 0 {
        return Err(TrainError::DataMismatch {
            reason: format!(
                "batch {} larger than dataset {}",
                cfg.batch,
                data.samples.len()
            ),
        });
    }
    let total_steps = opts
        .max_steps
        .unwrap_or(cfg.epochs as u64 * steps_per_epoch as u64);

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = Vec::new();
    let mut csv = String::new();
    if opts.start_step == 0 {
        csv.push_str(LogRow::csv_header());
        csv.push('\n');
    }

    let mut step = opts.start_step;
    let start_epoch = (opts.start_step / steps_per_epoch as u64) as usize;
    let mut done = step >= total_steps;
    let mut epoch = start_epoch;
    while !done {
        let perm = {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, EPOCH_STREAM + epoch as u64));
            crate::tensor::random_permutation(data.samples.len(), &mut rng)
        };
        let offset_in_epoch = (step - epoch as u64 * steps_per_epoch as u64) as usize;
        for chunk in perm.chunks_exact(cfg.batch).skip(offset_in_epoch) {
            let tau = anneal.tau(step);
            let lr = cfg.lr_at(step + 1);
            let batch: Vec<&crate::tensor::Tensor> =
                chunk.iter().map(|&i| &data.samples[i].tokens).collect();
            let mut step_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STEP_STREAM + step));

            let mut tape = Tape::new();
            let binding = model.store.bind(&mut tape);
            let loss = match model.total_loss(
                &mut tape,
                &binding,
                &batch,
                tau,
                VqMode::Hard,
                true,
                Some(&mut step_rng),
                None,
            ) {
                Ok(l) => l,
                Err(TensorError::NonFinite { context }) => {
                    flush_log(&opts.out_dir, &csv, opts.start_step)?;
                    return Err(TrainError::Diverged {
                        step,
                        component: context,
                    });
                }
                Err(e) => return Err(e.into()),
            };
            let row = LogRow {
                step,
                tau,
                lr,
                l_rec: tape.data(loss.l_rec)[0],
                l_vq: tape.data(loss.l_vq)[0],
                l_sc: tape.data(loss.l_sc)[0],
                l_sum: tape.data(loss.l_sum)[0],
                perplexity: code_perplexity(
                    &loss.outs.iter().map(|o| &o.codes).collect::<Vec<_>>(),
                    cfg.groups,
                    cfg.entries,
                ),
            };
            csv.push_str(&row.to_csv());
            csv.push('\n');
            log.push(row);

            tape.backward(loss.l_sum)?;
            model.store.absorb_grads(&tape, &binding);
            drop(tape);
            model.store.adam_step(lr, cfg.beta1, cfg.beta2, 1e-8)?;
            step += 1;

            if let Some(dir) = &opts.out_dir {
                if cfg.ckpt_every > 0 && step % cfg.ckpt_every as u64 == 0 {
                    save_step_ckpt(model, dir, step, epoch)?;
                }
            }
            if step >= total_steps {
                done = true;
                break;
            }
        }
        epoch += 1;
    }

    flush_log(&opts.out_dir, &csv, opts.start_step)?;
    let final_checkpoint = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            model.save(
                &path,
                &[
                    ("step".into(), step.to_string()),
                    ("epoch".into(), epoch.to_string()),
                ],
            )?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        log,
        final_step: step,
        final_checkpoint,
    })
}

fn save_step_ckpt(
    model: &RetrieverModel,
    dir: &Path,
    step: u64,
    epoch: usize,
) -> Result<(), TrainError> {
    let path = dir.join(format!("ckpt_step{step}.ckpt"));
    model.save(
        &path,
        &[
            ("step".into(), step.to_string()),
            ("epoch".into(), epoch.to_string()),
        ],
    )?;
    Ok(())
}

fn flush_log(
    out_dir: &Option<PathBuf>,
    csv: &str,
    start_step: u64,
) -> Result<(), TrainError> {
    if let Some(dir) = out_dir {
        let path = dir.join("train_log.csv");
        if start_step > 0 && path.exists() {
            let mut existing = fs::read_to_string(&path)?;
            existing.push_str(csv);
            fs::write(&path, existing)?;
        } else {
            fs::write(&path, csv)?;
        }
    }
    Ok(())
}
