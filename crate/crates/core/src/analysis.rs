//! Measurement procedures over trained (or random) models: permutation
//! invariance checks, content-style co-occurrence maps, code probes, style
//! transfer scoring against the generator oracle, and the ablation harness.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RetrieverConfig;
use crate::data::Dataset;
use crate::model::RetrieverModel;
use crate::optim::ParamStore;
use crate::seeding::derive_seed;
use crate::tape::Tape;
use crate::tensor::{random_permutation, randn, Result, Tensor, TensorError};
use crate::train::{train, TrainOpts};

/// Worker-thread budget for embarrassingly parallel evaluation, capped by
/// the RETRIEVER_THREADS environment variable.
pub fn worker_threads() -> usize {
    std::env::var("RETRIEVER_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

// ── permutation invariance ──────────────────────────────────────────────

/// Max absolute deviation of the style set under `trials` random input
/// permutations, evaluated deterministically (no noise, no dropout).
pub fn pi_check(
    model: &RetrieverModel,
    x: &Tensor,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let base = model.style_of(x)?;
    let n = x.shape()[0];
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let perm = random_permutation(n, rng);
        let s = model.style_of(&x.permuted_rows(&perm))?;
        worst = worst.max(s.max_abs_diff(&base));
    }
    Ok(worst)
}

/// Control for the content path: permuting the input changes the code
/// sequence read positionally, but matches exactly once the same
/// permutation is applied to the codes (when no pre-processing blocks mix
/// positions). Returns (max fraction of positionally changed codes,
/// max fraction of mismatches after aligning with the permutation).
pub fn content_permutation_control(
    model: &RetrieverModel,
    x: &Tensor,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let base = model.run_eval(x)?;
    let n = x.shape()[0];
    let mut changed: f64 = 0.0;
    let mut aligned_mismatch: f64 = 0.0;
    for _ in 0..trials {
        let perm = random_permutation(n, rng);
        let permuted = model.run_eval(&x.permuted_rows(&perm))?;
        let direct = (0..n)
            .filter(|&i| permuted.codes[i] != base.codes[i])
            .count();
        let aligned = (0..n)
            .filter(|&i| permuted.codes[i] != base.codes[perm[i]])
            .count();
        changed = changed.max(direct as f64 / n as f64);
        aligned_mismatch = aligned_mismatch.max(aligned as f64 / n as f64);
    }
    Ok((changed, aligned_mismatch))
}

// ── co-occurrence ───────────────────────────────────────────────────────

/// Dataset-averaged link-attention mass between content categories and
/// style tokens, with the two-axis normalization used for analysis.
#[derive(Debug, Clone)]
pub struct CooccurrenceMap {
    /// [categories, m]: mean attention mass per category/style pair.
    pub raw: Tensor,
    /// Rows normalized to sum 1.
    pub row_normalized: Tensor,
    /// Rows normalized, then columns normalized.
    pub normalized: Tensor,
    /// Major content category per style column (argmax of `normalized`).
    pub majors: Vec<usize>,
    /// Style columns sorted by ascending major category.
    pub col_order: Vec<usize>,
    /// Number of columns whose argmax is strictly unique.
    pub unique_majors: usize,
}

/// Accumulates a co-occurrence map from (attention row over styles, content
/// label) pairs; one pair per content token.
pub fn cooccurrence_accumulate(
    rows: &[(Vec<f64>, usize)],
    categories: usize,
    m: usize,
) -> Result<CooccurrenceMap> {
    if rows.is_empty() {
        return Err(TensorError::BadArgument {
            op: "cooccurrence",
            reason: "empty token stream".into(),
        });
    }
    let mut raw = Tensor::zeros(&[categories, m]);
    for (att, label) in rows {
        if att.len() != m || *label >= categories {
            return Err(TensorError::BadArgument {
                op: "cooccurrence",
                reason: format!(
                    "bad row: {} weights (want {m}), label {label} (want < {categories})",
                    att.len()
                ),
            });
        }
        for (j, &a) in att.iter().enumerate() {
            raw.data_mut()[label * m + j] += a;
        }
    }
    let scale = 1.0 / rows.len() as f64;
    for v in raw.data_mut() {
        *v *= scale;
    }

    let mut row_normalized = raw.clone();
    for row in row_normalized.data_mut().chunks_exact_mut(m) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    let mut normalized = row_normalized.clone();
    for j in 0..m {
        let s: f64 = (0..categories).map(|c| normalized.at2(c, j)).sum();
        if s > 0.0 {
            for c in 0..categories {
                normalized.data_mut()[c * m + j] /= s;
            }
        }
    }
    let mut majors = Vec::with_capacity(m);
    let mut unique_majors = 0;
    for j in 0..m {
        let col: Vec<f64> = (0..categories).map(|c| normalized.at2(c, j)).collect();
        let mut idx: Vec<usize> = (0..categories).collect();
        idx.sort_by(|&a, &b| col[b].partial_cmp(&col[a]).unwrap());
        majors.push(idx[0]);
        if categories == 1 || col[idx[0]] > col[idx[1]] + 1e-12 {
            unique_majors += 1;
        }
    }
    let mut col_order: Vec<usize> = (0..m).collect();
    col_order.sort_by_key(|&j| (majors[j], j));
    Ok(CooccurrenceMap {
        raw,
        row_normalized,
        normalized,
        majors,
        col_order,
        unique_majors,
    })
}

/// Computes the co-occurrence map of a model over a dataset, using
/// ground-truth content labels and the configured link-attention layer
/// (head-averaged).
pub fn cooccurrence(
    model: &RetrieverModel,
    data: &Dataset,
    limit: Option<usize>,
) -> Result<CooccurrenceMap> {
    let layer = model.config.cooccur_layer_value();
    let m = model.config.m;
    let take = limit.unwrap_or(data.samples.len()).min(data.samples.len());
    if take == 0 {
        return Err(TensorError::BadArgument {
            op: "cooccurrence",
            reason: "empty dataset".into(),
        });
    }
    let mut rows = Vec::new();
    for s in data.samples.iter().take(take) {
        let out = model.run_eval(&s.tokens)?;
        let map = out.link_map(layer);
        for (i, &label) in s.content.iter().enumerate() {
            rows.push((map.data()[i * m..(i + 1) * m].to_vec(), label));
        }
    }
    cooccurrence_accumulate(&rows, data.categories, m)
}

// ── probes ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMode {
    /// Linear per-token classifier.
    Frame,
    /// 1-D convolution with kernel 17 over the code sequence.
    Context,
}

/// Codes and labels ready for probing: per sample, per token, the selected
/// groups' codes and one label.
pub struct CodeDataset {
    pub samples: Vec<(Vec<Vec<usize>>, Vec<usize>)>,
    pub entries: usize,
    pub classes: usize,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub accuracy_frame: f64,
    pub accuracy_context: f64,
    pub group_subset: Vec<usize>,
    pub seeds: usize,
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "probe groups {:?}: frame {:.4}, context {:.4} ({} seeds)",
            self.group_subset, self.accuracy_frame, self.accuracy_context, self.seeds
        )
    }
}

fn one_hot_features(codes: &[Vec<usize>], entries: usize) -> Tensor {
    let n = codes.len();
    let groups = codes.first().map_or(0, |c| c.len());
    let f = groups * entries;
    let mut t = Tensor::zeros(&[n, f]);
    for (i, token) in codes.iter().enumerate() {
        for (g, &c) in token.iter().enumerate() {
            t.data_mut()[i * f + g * entries + c] = 1.0;
        }
    }
    t
}

/// Extracts a probing dataset from a trained model: hard codes of the
/// selected VQ groups against ground-truth content labels.
pub fn extract_codes(
    model: &RetrieverModel,
    data: &Dataset,
    groups: &[usize],
    limit: Option<usize>,
) -> Result<CodeDataset> {
    let take = limit.unwrap_or(data.samples.len()).min(data.samples.len());
    let mut samples = Vec::with_capacity(take);
    for s in data.samples.iter().take(take) {
        let out = model.run_eval(&s.tokens)?;
        let selected: Vec<Vec<usize>> = out
            .codes
            .iter()
            .map(|token| groups.iter().map(|&g| token[g]).collect())
            .collect();
        samples.push((selected, s.content.clone()));
    }
    Ok(CodeDataset {
        samples,
        entries: model.config.entries,
        classes: data.categories,
    })
}

/// Trains a probe on 80% of the samples and reports held-out accuracy,
/// averaged over the given seeds.
pub fn probe_codes(data: &CodeDataset, mode: ProbeMode, seeds: &[u64]) -> Result<f64> {
    let classes = data.classes;
    let distinct: std::collections::HashSet<usize> = data
        .samples
        .iter()
        .flat_map(|(_, labels)| labels.iter().copied())
        .collect();
    if distinct.len() < 2 {
        return Err(TensorError::BadArgument {
            op: "probe_codes",
            reason: "labels contain a single class".into(),
        });
    }
    let split = (data.samples.len() * 4) / 5;
    if split == 0 || split == data.samples.len() {
        return Err(TensorError::BadArgument {
            op: "probe_codes",
            reason: format!("{} samples cannot be split 80/20", data.samples.len()),
        });
    }
    let feats: Vec<(Tensor, &Vec<usize>)> = data
        .samples
        .iter()
        .map(|(codes, labels)| (one_hot_features(codes, data.entries), labels))
        .collect();
    let (train_set, test_set) = feats.split_at(split);

    let mut total = 0.0;
    for &seed in seeds {
        total += match mode {
            ProbeMode::Frame => {
                let stack = |set: &[(Tensor, &Vec<usize>)]| {
                    let f = set[0].0.shape()[1];
                    let mut rows = Vec::new();
                    let mut labels = Vec::new();
                    for (x, y) in set {
                        rows.extend_from_slice(x.data());
                        labels.extend_from_slice(y);
                    }
                    (
                        Tensor::new(vec![labels.len(), f], rows).expect("consistent"),
                        labels,
                    )
                };
                let (xtr, ytr) = stack(train_set);
                let (xte, yte) = stack(test_set);
                train_linear_probe(&xtr, &ytr, &xte, &yte, classes, seed, 80, 0.1)?
            }
            ProbeMode::Context => {
                train_conv_probe(train_set, test_set, classes, seed, 40, 0.05, 17)?
            }
        };
    }
    Ok(total / seeds.len() as f64)
}

/// Full probe report (both modes).
pub fn probe_report(
    model: &RetrieverModel,
    data: &Dataset,
    groups: &[usize],
    seeds: &[u64],
    limit: Option<usize>,
) -> Result<ProbeReport> {
    let codes = extract_codes(model, data, groups, limit)?;
    Ok(ProbeReport {
        accuracy_frame: probe_codes(&codes, ProbeMode::Frame, seeds)?,
        accuracy_context: probe_codes(&codes, ProbeMode::Context, seeds)?,
        group_subset: groups.to_vec(),
        seeds: seeds.len(),
    })
}

/// Softmax-regression probe trained with Adam, full batch.
pub fn train_linear_probe(
    xtrain: &Tensor,
    ytrain: &[usize],
    xtest: &Tensor,
    ytest: &[usize],
    classes: usize,
    seed: u64,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    let f = xtrain.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7));
    let mut store = ParamStore::new();
    let w = store.add("probe.w", randn(&[f, classes], 0.01, &mut rng))?;
    let b = store.add("probe.b", Tensor::zeros(&[classes]))?;
    let onehot = labels_one_hot(ytrain, classes);

    for _ in 0..epochs {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(xtrain.clone());
        let logits = tape.matmul(x, bind.var(w))?;
        let logits = tape.add(logits, bind.var(b))?;
        let loss = softmax_ce(&mut tape, logits, &onehot)?;
        tape.backward(loss)?;
        store.absorb_grads(&tape, &bind);
        drop(tape);
        store.adam_step(lr, 0.9, 0.999, 1e-8)?;
    }

    // Evaluate.
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let x = tape.constant(xtest.clone());
    let logits = tape.matmul(x, bind.var(w))?;
    let logits = tape.add(logits, bind.var(b))?;
    Ok(accuracy_of(tape.value(logits), ytest))
}

fn train_conv_probe(
    train_set: &[(Tensor, &Vec<usize>)],
    test_set: &[(Tensor, &Vec<usize>)],
    classes: usize,
    seed: u64,
    epochs: usize,
    lr: f64,
    kernel: usize,
) -> Result<f64> {
    let f = train_set[0].0.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11));
    let mut store = ParamStore::new();
    let k = store.add(
        "probe.conv",
        randn(&[classes, f, kernel], 0.05, &mut rng),
    )?;
    let b = store.add("probe.b", Tensor::zeros(&[classes]))?;

    for _ in 0..epochs {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut terms = Vec::with_capacity(train_set.len());
        for (x, y) in train_set {
            let xv = tape.constant((*x).clone());
            let logits = tape.conv1d(xv, bind.var(k))?;
            let logits = tape.add(logits, bind.var(b))?;
            let onehot = labels_one_hot(y, classes);
            terms.push(softmax_ce(&mut tape, logits, &onehot)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        let loss = tape.mul_scalar(acc, 1.0 / terms.len() as f64)?;
        tape.backward(loss)?;
        store.absorb_grads(&tape, &bind);
        drop(tape);
        store.adam_step(lr, 0.9, 0.999, 1e-8)?;
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in test_set {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let xv = tape.constant((*x).clone());
        let logits = tape.conv1d(xv, bind.var(k))?;
        let logits = tape.add(logits, bind.var(b))?;
        let v = tape.value(logits);
        let preds = predictions(v);
        for (p, &t) in preds.iter().zip(y.iter()) {
            if *p == t {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

fn labels_one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

fn softmax_ce(tape: &mut Tape, logits: crate::tape::Var, onehot: &Tensor) -> Result<crate::tape::Var> {
    let p = tape.softmax(logits)?;
    let guarded = tape.add_scalar(p, 1e-300)?;
    let logp = tape.log(guarded)?;
    let oh = tape.constant(onehot.clone());
    let picked = tape.mul(logp, oh)?;
    let row_ce = tape.sum_axis(picked, 1)?;
    let total = tape.mean_all(row_ce)?;
    tape.mul_scalar(total, -1.0)
}

fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        })
        .collect()
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> f64 {
    let preds = predictions(logits);
    let ok = preds.iter().zip(labels).filter(|(p, t)| p == t).count();
    ok as f64 / labels.len() as f64
}

/// Style leakage: accuracy of a linear probe predicting the style label
/// from per-sample code-usage histograms. Values near chance (1/s_true)
/// mean the bottleneck squeezed style out of the content path.
pub fn style_leakage(
    model: &RetrieverModel,
    data: &Dataset,
    seeds: &[u64],
    limit: Option<usize>,
) -> Result<f64> {
    let take = limit.unwrap_or(data.samples.len()).min(data.samples.len());
    let (g, v) = (model.config.groups, model.config.entries);
    let f = g * v;
    let mut rows = Vec::with_capacity(take * f);
    let mut labels = Vec::with_capacity(take);
    for s in data.samples.iter().take(take) {
        let out = model.run_eval(&s.tokens)?;
        let mut hist = vec![0.0; f];
        for token in &out.codes {
            for (gi, &c) in token.iter().enumerate() {
                hist[gi * v + c] += 1.0;
            }
        }
        let scale = 1.0 / out.codes.len() as f64;
        for x in &mut hist {
            *x *= scale;
        }
        rows.extend_from_slice(&hist);
        labels.push(s.style);
    }
    let x = Tensor::new(vec![take, f], rows)?;
    let split = (take * 4) / 5;
    let xtr = Tensor::new(vec![split, f], x.data()[..split * f].to_vec())?;
    let xte = Tensor::new(vec![take - split, f], x.data()[split * f..].to_vec())?;
    let mut total = 0.0;
    for &seed in seeds {
        total += train_linear_probe(
            &xtr,
            &labels[..split],
            &xte,
            &labels[split..],
            data.s_true,
            seed,
            120,
            0.1,
        )?;
    }
    Ok(total / seeds.len() as f64)
}

// ── style transfer scoring ──────────────────────────────────────────────

/// Full style transfer over sample pairs, scored by the generator oracle:
/// the output must classify as the target's style.
pub fn style_transfer_accuracy(
    model: &RetrieverModel,
    data: &Dataset,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(TensorError::BadArgument {
            op: "style_transfer_accuracy",
            reason: "no pairs".into(),
        });
    }
    let mut ok = 0usize;
    for &(src, tgt) in pairs {
        let out = model.transfer(
            &data.samples[src].tokens,
            &data.samples[tgt].tokens,
            None,
        )?;
        if data.dict.classify_style(&out) == data.samples[tgt].style {
            ok += 1;
        }
    }
    Ok(ok as f64 / pairs.len() as f64)
}

/// Style columns serving the given content categories, per the
/// co-occurrence majors. Errors (listing the majors) when no column
/// matches.
pub fn style_rows_for_parts(comap: &CooccurrenceMap, parts: &[usize]) -> Result<Vec<usize>> {
    let rows: Vec<usize> = comap
        .majors
        .iter()
        .enumerate()
        .filter(|(_, major)| parts.contains(major))
        .map(|(j, _)| j)
        .collect();
    if rows.is_empty() {
        return Err(TensorError::BadArgument {
            op: "style_rows_for_parts",
            reason: format!(
                "no style column serves parts {:?}; column majors are {:?}",
                parts, comap.majors
            ),
        });
    }
    Ok(rows)
}

/// Part-level transfer scores over pairs: fraction of cells inside the
/// transferred parts classifying as the target style, and fraction outside
/// classifying as the source style.
pub fn part_transfer_scores(
    model: &RetrieverModel,
    data: &Dataset,
    comap: &CooccurrenceMap,
    pairs: &[(usize, usize)],
    parts: &[usize],
) -> Result<(f64, f64)> {
    let rows = style_rows_for_parts(comap, parts)?;
    let mut in_ok = 0usize;
    let mut in_total = 0usize;
    let mut out_ok = 0usize;
    let mut out_total = 0usize;
    for &(src, tgt) in pairs {
        let s = &data.samples[src];
        let t = &data.samples[tgt];
        let mixed = model.transfer(&s.tokens, &t.tokens, Some(&rows))?;
        let d = data.dict.dim;
        for (cell, &label) in mixed.data().chunks_exact(d).zip(&s.content) {
            let (style_pred, _) = data.dict.nearest(cell);
            if parts.contains(&label) {
                in_total += 1;
                if style_pred == t.style {
                    in_ok += 1;
                }
            } else {
                out_total += 1;
                if style_pred == s.style {
                    out_ok += 1;
                }
            }
        }
    }
    if in_total == 0 || out_total == 0 {
        return Err(TensorError::BadArgument {
            op: "part_transfer_scores",
            reason: "pairs contain no cells inside (or outside) the selected parts".into(),
        });
    }
    Ok((
        in_ok as f64 / in_total as f64,
        out_ok as f64 / out_total as f64,
    ))
}

/// Deterministic transfer pairs: sample i against the next sample of a
/// different style.
pub fn transfer_pairs(data: &Dataset, count: usize) -> Vec<(usize, usize)> {
    let n = data.samples.len();
    let mut pairs = Vec::with_capacity(count);
    let mut i = 0usize;
    while pairs.len() < count && i < n * 2 {
        let src = i % n;
        let mut tgt = (i + 1) % n;
        let mut hops = 0;
        while data.samples[tgt].style == data.samples[src].style && hops < n {
            tgt = (tgt + 1) % n;
            hops += 1;
        }
        if data.samples[tgt].style != data.samples[src].style {
            pairs.push((src, tgt));
        }
        i += 1;
    }
    pairs
}

// ── ablation harness ────────────────────────────────────────────────────

/// One trained variant's measurements.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub kind: String,
    pub seed: u64,
    /// Median reconstruction loss over the final 10% of steps.
    pub final_l_rec: f64,
    /// Style-from-codes probe accuracy.
    pub leakage: f64,
    /// Full-transfer accuracy on the unseen-style dataset.
    pub transfer_acc: f64,
}

impl AblationRow {
    pub fn csv_header() -> &'static str {
        "kind,seed,final_l_rec,leakage,transfer_acc"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.kind, self.seed, self.final_l_rec, self.leakage, self.transfer_acc
        )
    }
}

/// A named (groups, entries) bottleneck preset.
pub type BottleneckPreset = (&'static str, usize, usize);

/// Trains every (variant, seed) combination on identical data and measures
/// reconstruction, leakage, and unseen-style transfer. Variants are
/// bottleneck presets plus style-token counts. Runs in parallel across
/// worker threads; each run owns an independent model.
#[allow(clippy::too_many_arguments)]
pub fn ablation_suite(
    base: &RetrieverConfig,
    data: &Dataset,
    unseen: &Dataset,
    presets: &[BottleneckPreset],
    m_values: &[usize],
    seeds: &[u64],
    max_steps: Option<u64>,
    include_adain: bool,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    #[derive(Clone)]
    enum Job {
        Bottleneck(&'static str, usize, usize, u64),
        StyleTokens(usize, u64),
        AdaIn(u64),
    }
    let mut jobs = Vec::new();
    for &(name, g, v) in presets {
        for &seed in seeds {
            jobs.push(Job::Bottleneck(name, g, v, seed));
        }
    }
    for &m in m_values {
        for &seed in seeds {
            jobs.push(Job::StyleTokens(m, seed));
        }
    }
    if include_adain {
        for &seed in seeds {
            jobs.push(Job::AdaIn(seed));
        }
    }

    let queue: Mutex<VecDeque<(usize, Job)>> =
        Mutex::new(jobs.iter().cloned().enumerate().collect());
    let results: Mutex<Vec<Option<Result<AblationRow>>>> =
        Mutex::new(vec![None; jobs.len()]);

    let run_job = |job: &Job| -> Result<AblationRow> {
        let (kind, cfg) = match job {
            Job::Bottleneck(name, g, v, seed) => {
                let mut cfg = base.clone();
                cfg.groups = *g;
                cfg.entries = *v;
                cfg.seed = *seed;
                (format!("bottleneck:{name}"), cfg)
            }
            Job::StyleTokens(m, seed) => {
                let mut cfg = base.clone();
                cfg.m = *m;
                cfg.seed = *seed;
                (format!("m:{m}"), cfg)
            }
            Job::AdaIn(seed) => {
                let mut cfg = base.clone();
                cfg.decoder = crate::config::DecoderKind::AdaIn;
                cfg.seed = *seed;
                ("decoder:adain".to_string(), cfg)
            }
        };
        let seed = cfg.seed;
        let mut model = RetrieverModel::new(cfg).map_err(|e| TensorError::BadArgument {
            op: "ablation_suite",
            reason: e.to_string(),
        })?;
        let outcome = train(
            &mut model,
            data,
            &TrainOpts {
                out_dir: None,
                max_steps,
                start_step: 0,
            },
        )
        .map_err(|e| TensorError::BadArgument {
            op: "ablation_suite",
            reason: e.to_string(),
        })?;
        let tail = outcome.log.len().div_ceil(10);
        let mut recs: Vec<f64> = outcome.log[outcome.log.len() - tail..]
            .iter()
            .map(|r| r.l_rec)
            .collect();
        recs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let final_l_rec = recs[recs.len() / 2];
        let leakage = style_leakage(&model, data, &[seed], Some(200))?;
        let pairs = transfer_pairs(unseen, 64);
        let transfer_acc = style_transfer_accuracy(&model, unseen, &pairs)?;
        Ok(AblationRow {
            kind,
            seed,
            final_l_rec,
            leakage,
            transfer_acc,
        })
    };

    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            scope.spawn(|| loop {
                let job = {
                    let mut q = queue.lock().unwrap();
                    q.pop_front()
                };
                let Some((idx, job)) = job else { break };
                let row = run_job(&job);
                results.lock().unwrap()[idx] = Some(row);
            });
        }
    });

    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RetrieverConfig;
    use rand::Rng;

    fn tiny_model() -> RetrieverModel {
        let mut c = RetrieverConfig::desk_sequence();
        c.d_raw = 12;
        c.d = 16;
        c.d_c = 16;
        c.d_s = 16;
        c.d_ffn = 32;
        c.l_e = 0;
        c.l_s = 2;
        c.l_d = 2;
        c.m = 4;
        c.heads = 2;
        c.groups = 2;
        c.entries = 4;
        c.kernel = 5;
        RetrieverModel::new(c).unwrap()
    }

    #[test]
    fn pi_check_random_weights_within_bound() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&[9, 12], 1.0, &mut rng);
        let dev = pi_check(&model, &x, 25, &mut rng).unwrap();
        assert!(dev <= 1e-9, "deviation {dev}");
    }

    #[test]
    fn content_control_changes_without_alignment() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&[12, 12], 1.5, &mut rng);
        let (changed, aligned) = content_permutation_control(&model, &x, 10, &mut rng).unwrap();
        assert!(changed > 0.0, "codes must move with the permutation");
        assert_eq!(aligned, 0.0, "aligned codes must match exactly when l_e = 0");
    }

    #[test]
    fn cooccurrence_single_style_token_is_all_ones() {
        let rows: Vec<(Vec<f64>, usize)> =
            (0..40).map(|i| (vec![1.0], i % 4)).collect();
        let map = cooccurrence_accumulate(&rows, 4, 1).unwrap();
        for c in 0..4 {
            assert!((map.row_normalized.at2(c, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cooccurrence_uniform_attention_has_flat_rows() {
        // Monte-Carlo oracle: random near-uniform attention with 1000 tokens
        // per category keeps row max/min ratio under 1.5.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cats, m) = (4, 6);
        let mut rows = Vec::new();
        for i in 0..cats * 1000 {
            let mut att: Vec<f64> = (0..m).map(|_| rng.gen_range(0.5..1.5)).collect();
            let s: f64 = att.iter().sum();
            for a in &mut att {
                *a /= s;
            }
            rows.push((att, i % cats));
        }
        let map = cooccurrence_accumulate(&rows, cats, m).unwrap();
        for c in 0..cats {
            let row: Vec<f64> = (0..m).map(|j| map.row_normalized.at2(c, j)).collect();
            let hi = row.iter().cloned().fold(f64::MIN, f64::max);
            let lo = row.iter().cloned().fold(f64::MAX, f64::min);
            assert!(hi / lo < 1.5, "ratio {}", hi / lo);
        }
    }

    #[test]
    fn cooccurrence_sorting_and_majors() {
        // Three categories, three styles with crisp associations shuffled.
        let mut rows = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            // Style column 2 serves category 0, 0 serves 1, 1 serves 2.
            let col = [2, 0, 1][c];
            let mut att = vec![0.05; 3];
            att[col] = 0.9;
            rows.push((att, c));
        }
        let map = cooccurrence_accumulate(&rows, 3, 3).unwrap();
        assert_eq!(map.majors, vec![1, 2, 0]);
        assert_eq!(map.col_order, vec![2, 0, 1]);
        assert_eq!(map.unique_majors, 3);
        // Row normalization invariant.
        for c in 0..3 {
            let s: f64 = (0..3).map(|j| map.row_normalized.at2(c, j)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn probe_learns_identity_labels_and_respects_chance_on_shuffled() {
        // Labels equal to the group-0 code: a probe must hit accuracy 1.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries = 5;
        let samples: Vec<(Vec<Vec<usize>>, Vec<usize>)> = (0..40)
            .map(|_| {
                let codes: Vec<Vec<usize>> =
                    (0..12).map(|_| vec![rng.gen_range(0..entries)]).collect();
                let labels: Vec<usize> = codes.iter().map(|c| c[0]).collect();
                (codes, labels)
            })
            .collect();
        let ds = CodeDataset {
            samples: samples.clone(),
            entries,
            classes: entries,
        };
        let acc = probe_codes(&ds, ProbeMode::Frame, &[0, 1]).unwrap();
        assert!((acc - 1.0).abs() < 1e-12, "identity probe accuracy {acc}");

        // Shuffled labels: accuracy within 3 sigma of chance.
        let shuffled: Vec<(Vec<Vec<usize>>, Vec<usize>)> = samples
            .iter()
            .map(|(codes, _)| {
                let labels: Vec<usize> =
                    (0..codes.len()).map(|_| rng.gen_range(0..entries)).collect();
                (codes.clone(), labels)
            })
            .collect();
        let ds2 = CodeDataset {
            samples: shuffled,
            entries,
            classes: entries,
        };
        let acc = probe_codes(&ds2, ProbeMode::Frame, &[0]).unwrap();
        let chance = 1.0 / entries as f64;
        let n_test = (40 - 32) * 12;
        let sigma = (chance * (1.0 - chance) / n_test as f64).sqrt();
        assert!(
            (acc - chance).abs() <= 3.0 * sigma + 1e-9,
            "shuffled-label probe accuracy {acc} vs chance {chance}"
        );
    }

    #[test]
    fn probe_rejects_single_class() {
        let ds = CodeDataset {
            samples: vec![(vec![vec![0], vec![1]], vec![3, 3])],
            entries: 4,
            classes: 5,
        };
        assert!(probe_codes(&ds, ProbeMode::Frame, &[0]).is_err());
    }

    #[test]
    fn style_rows_error_lists_majors() {
        let rows: Vec<(Vec<f64>, usize)> = (0..30)
            .map(|i| {
                let c = i % 3;
                let mut att = vec![0.1; 2];
                att[c % 2] = 0.8;
                (att, c)
            })
            .collect();
        let map = cooccurrence_accumulate(&rows, 3, 2).unwrap();
        let err = style_rows_for_parts(&map, &[17]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("majors"), "{msg}");
    }

    #[test]
    fn transfer_pairs_cross_styles() {
        let data = crate::data::gen_sequences(&crate::data::SequenceSpec {
            n: 8,
            a: 4,
            s_true: 3,
            d: 16,
            segment_len: 2.0,
            noise_sigma: 0.0,
            count: 24,
            seed: 5,
        })
        .unwrap();
        let pairs = transfer_pairs(&data, 10);
        assert_eq!(pairs.len(), 10);
        for (s, t) in pairs {
            assert_ne!(data.samples[s].style, data.samples[t].style);
        }
    }

    #[test]
    fn worker_threads_respects_env() {
        std::env::set_var("RETRIEVER_THREADS", "3");
        assert_eq!(worker_threads(), 3);
        std::env::remove_var("RETRIEVER_THREADS");
        assert!(worker_threads() >= 1);
    }
}
