//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 config/spec errors, 3 numeric failures
//! (divergence, failed checks), 4 artifact mismatches (checkpoint/config or
//! dataset/config disagreements, corrupted files).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use retriever_core::analysis::{
    cooccurrence, pi_check, probe_report, style_leakage, style_rows_for_parts,
    style_transfer_accuracy, transfer_pairs,
};
use retriever_core::checkpoint::CheckpointError;
use retriever_core::config::{Domain, RetrieverConfig};
use retriever_core::constraints::{part_centers, truncate_ce};
use retriever_core::data::{DataSpec, Dataset, Structure};
use retriever_core::export::{write_attention_map, write_csv, write_pgm, write_ppm_indexed};
use retriever_core::gradcheck::grad_check_params;
use retriever_core::model::RetrieverModel;
use retriever_core::optim::ParamId;
use retriever_core::quantizer::{sample_gumbel, vq_perplexity_loss, VqMode};
use retriever_core::seeding::derive_seed;
use retriever_core::tape::Tape;
use retriever_core::tensor::{randn, Tensor};
use retriever_core::train::{train, TrainError, TrainOpts};

#[derive(Parser)]
#[command(name = "retriever", version, about = "Content-style decomposition on synthetic structured data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a key=value spec file.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint (config must match).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Validate the config and print the parameter count, then exit.
        #[arg(long)]
        dry_run: bool,
        /// Cap the number of optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a named verification suite.
    Check {
        /// pi | grad | losses
        #[arg(long)]
        what: String,
        /// Optional checkpoint; otherwise a freshly initialized model.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Evaluate a checkpoint: probes, co-occurrence map, oracle scores.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional runtime config that must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cap on evaluated samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Decode one sample's content with another sample's style.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source: usize,
        #[arg(long)]
        target: usize,
        /// Comma-separated content categories, or "all" for full transfer.
        #[arg(long, default_value = "all")]
        parts: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

enum CliError {
    Config(String),
    Numeric(String),
    Artifact(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Artifact(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) | CliError::Artifact(m) | CliError::Io(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<retriever_core::tensor::TensorError> for CliError {
    fn from(e: retriever_core::tensor::TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { spec, out, seed } => cmd_generate(&spec, &out, seed),
        Command::Train {
            config,
            data,
            out,
            resume,
            dry_run,
            steps,
            seed,
        } => cmd_train(&config, &data, &out, resume.as_deref(), dry_run, steps, seed),
        Command::Check { what, ckpt, seed } => cmd_check(&what, ckpt.as_deref(), seed),
        Command::Eval {
            ckpt,
            data,
            out,
            config,
            limit,
            seed,
        } => cmd_eval(&ckpt, &data, &out, config.as_deref(), limit, seed),
        Command::Transfer {
            ckpt,
            data,
            out,
            source,
            target,
            parts,
            seed,
        } => cmd_transfer(&ckpt, &data, &out, source, target, &parts, seed),
    }
}

/// Writes the run manifest; every listed artifact must exist.
fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config_echo: &[(String, String)],
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(&format!("command {command}\n"));
    text.push_str(&format!("code_version {}\n", env!("CARGO_PKG_VERSION")));
    text.push_str(&format!("seed {seed}\n"));
    for (k, v) in config_echo {
        text.push_str(&format!("config.{k} {v}\n"));
    }
    for a in artifacts {
        if !a.exists() {
            return Err(CliError::Artifact(format!(
                "artifact {} missing at manifest time",
                a.display()
            )));
        }
        text.push_str(&format!("artifact {}\n", a.display()));
    }
    text.push_str(&format!(
        "wall_clock_secs {:.3}\n",
        started.elapsed().as_secs_f64()
    ));
    fs::write(out.join("run_manifest.txt"), text)?;
    Ok(())
}

fn cmd_generate(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let started = Instant::now();
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Config(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let mut spec = DataSpec::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        match &mut spec {
            DataSpec::Sequence(sp) => sp.seed = s,
            DataSpec::Grid(sp) => sp.seed = s,
        }
    }
    let data = spec.generate().map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    data.save(out).map_err(|e| CliError::Io(e.to_string()))?;
    let used_seed = match &spec {
        DataSpec::Sequence(sp) => sp.seed,
        DataSpec::Grid(sp) => sp.seed,
    };
    println!("generated {} samples, hash {}", data.samples.len(), data.hash());
    let artifacts = ["dataset.manifest", "tokens.blob", "labels.csv", "dict.blob"]
        .iter()
        .map(|f| out.join(f))
        .collect::<Vec<_>>();
    write_manifest(out, "generate", used_seed, &[], &artifacts, started)
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load(dir).map_err(|e| CliError::Artifact(e.to_string()))
}

fn cmd_train(
    config_path: &Path,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    dry_run: bool,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let text = fs::read_to_string(config_path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", config_path.display()))
    })?;
    let mut config = RetrieverConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(s) = seed {
        config.seed = s;
    }

    if dry_run {
        let model =
            RetrieverModel::new(config.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        println!(
            "config ok: {} parameters across {} tensors",
            model.param_count(),
            model.store.len()
        );
        return Ok(());
    }

    let data = load_dataset(data_dir)?;
    let (mut model, start_step) = match resume {
        Some(ckpt) => {
            let (model, meta) = RetrieverModel::load_with_config(ckpt, &config)?;
            let step: u64 = meta
                .get_meta("step")
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            (model, step)
        }
        None => (
            RetrieverModel::new(config.clone()).map_err(|e| CliError::Config(e.to_string()))?,
            0,
        ),
    };

    fs::create_dir_all(out)?;
    let outcome = train(
        &mut model,
        &data,
        &TrainOpts {
            out_dir: Some(out.to_path_buf()),
            max_steps: steps,
            start_step,
        },
    )
    .map_err(|e| match e {
        TrainError::Diverged { step, component } => {
            CliError::Numeric(format!("diverged at step {step} ({component})"))
        }
        TrainError::DataMismatch { reason } => CliError::Artifact(reason),
        TrainError::Checkpoint(c) => CliError::Artifact(c.to_string()),
        other => CliError::Numeric(other.to_string()),
    })?;

    let last = outcome.log.last();
    println!(
        "trained to step {} (l_sum {})",
        outcome.final_step,
        last.map_or(f64::NAN, |r| r.l_sum)
    );
    let mut artifacts = vec![out.join("train_log.csv")];
    if let Some(ckpt) = &outcome.final_checkpoint {
        artifacts.push(ckpt.clone());
    }
    write_manifest(out, "train", config.seed, &config.to_lines(), &artifacts, started)
}

fn check_model(ckpt: Option<&Path>, seed: u64) -> Result<RetrieverModel, CliError> {
    match ckpt {
        Some(path) => Ok(RetrieverModel::load(path)?.0),
        None => {
            let mut cfg = RetrieverConfig::desk_sequence();
            cfg.seed = seed;
            // A small instance keeps the checks fast without changing any
            // property being checked.
            cfg.d_raw = 24;
            cfg.d = 32;
            cfg.d_c = 32;
            cfg.d_s = 32;
            cfg.d_ffn = 64;
            cfg.l_e = 1;
            cfg.l_s = 2;
            cfg.l_d = 2;
            cfg.kernel = 7;
            RetrieverModel::new(cfg).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

fn cmd_check(what: &str, ckpt: Option<&Path>, seed: u64) -> Result<(), CliError> {
    match what {
        "pi" => {
            let model = check_model(ckpt, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
            let n = match model.config.domain {
                Domain::Sequence => 24,
                Domain::Grid => model.config.grid_h * model.config.grid_w,
            };
            let x = randn(&[n, model.config.d_raw], 1.0, &mut rng);
            let dev = pi_check(&model, &x, 100, &mut rng)?;
            println!("pi: style deviation over 100 permutations = {dev:.3e} (bound 1e-9)");
            if dev <= 1e-9 {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "permutation invariance violated: {dev:e} > 1e-9"
                )))
            }
        }
        "grad" => {
            let model = check_model(ckpt, seed)?;
            let cfg = &model.config;
            let n = match cfg.domain {
                Domain::Sequence => 8,
                Domain::Grid => cfg.grid_h * cfg.grid_w,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
            let x = randn(&[n, cfg.d_raw], 1.0, &mut rng);
            let frozen = vec![sample_gumbel(&[n, cfg.groups * cfg.entries], &mut rng)];
            let ids: Vec<ParamId> = model.store.ids().collect();
            let coords: Vec<(ParamId, usize)> = ids
                .iter()
                .enumerate()
                .map(|(i, id)| (*id, i % model.store.get(*id).value.numel()))
                .collect();
            let mut probe = model.store.clone();
            let err = grad_check_params(
                &mut probe,
                |tape, b| {
                    let loss = model.total_loss(
                        tape,
                        b,
                        &[&x],
                        0.8,
                        VqMode::Soft,
                        false,
                        None,
                        Some(&frozen),
                    )?;
                    Ok(loss.l_sum)
                },
                &coords,
                1e-5,
            )?;
            println!(
                "grad: max relative error over {} parameter coordinates = {err:.3e} (bound 1e-5)",
                coords.len()
            );
            if err < 1e-5 {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient check failed: {err:e} >= 1e-5"
                )))
            }
        }
        "losses" => {
            let mut failures = Vec::new();
            // Perplexity closed forms.
            let (g, v) = (2, 8);
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::zeros(&[16, g * v]));
            let uniform = vq_perplexity_loss(&mut tape, &[l], g, v)?;
            let got = tape.data(uniform)[0];
            let want = 1.0 / (v * v) as f64;
            println!("losses: L_VQ(uniform) = {got:.12} (want {want:.12})");
            if (got - want).abs() > 1e-12 {
                failures.push(format!("L_VQ uniform {got} != {want}"));
            }
            let mut data = vec![0.0; 16 * g * v];
            for row in 0..16 {
                for gi in 0..g {
                    data[row * g * v + gi * v + 3] = 1e4;
                }
            }
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::new(vec![16, g * v], data).unwrap());
            let collapsed = vq_perplexity_loss(&mut tape, &[l], g, v)?;
            let got = tape.data(collapsed)[0];
            let want = 1.0 / v as f64;
            println!("losses: L_VQ(collapsed) = {got:.12} (want {want:.12})");
            if (got - want).abs() > 1e-12 {
                failures.push(format!("L_VQ collapsed {got} != {want}"));
            }
            // Truncation ceiling and slope.
            let gamma = (v as f64).ln();
            let mut tape = Tape::new();
            let big = tape.constant(Tensor::scalar(1e9));
            let ceiling = truncate_ce(&mut tape, big, gamma)?;
            let got = tape.data(ceiling)[0];
            println!("losses: L_SC ceiling = {got:.12} (want {gamma:.12})");
            if (got - gamma).abs() > 1e-9 {
                failures.push(format!("L_SC ceiling {got} != {gamma}"));
            }
            let mut tape = Tape::new();
            let zero = tape.leaf(Tensor::scalar(0.0));
            let y = truncate_ce(&mut tape, zero, gamma)?;
            tape.backward(y)?;
            let slope = tape.grad(zero).unwrap()[0];
            println!("losses: L_SC slope at zero = {slope:.12} (want 1)");
            if (slope - 1.0).abs() > 1e-9 {
                failures.push(format!("L_SC slope {slope} != 1"));
            }
            // Geometric loss on point masses.
            let mut grid = Tensor::zeros(&[3, 36]);
            grid.data_mut()[36 + 7] = 1.0; // part 1 all at one pixel
            grid.data_mut()[72 + 30] = 1.0; // part 2 all at one pixel
            let mut tape = Tape::new();
            let lv = tape.constant(grid);
            let (loss, _) =
                retriever_core::constraints::geometric_concentration_loss(&mut tape, lv, 6, 6)?;
            let got = tape.data(loss)[0];
            println!("losses: geometric(point masses) = {got:.3e} (want 0 within 1e-9)");
            if got.abs() > 1e-9 {
                failures.push(format!("geometric point-mass loss {got} != 0"));
            }
            if failures.is_empty() {
                Ok(())
            } else {
                Err(CliError::Numeric(failures.join("; ")))
            }
        }
        other => Err(CliError::Config(format!(
            "unknown check '{other}' (expected pi, grad, or losses)"
        ))),
    }
}

fn load_model_for(
    ckpt: &Path,
    config_path: Option<&Path>,
    data: &Dataset,
) -> Result<RetrieverModel, CliError> {
    let model = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            let cfg = RetrieverConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
            RetrieverModel::load_with_config(ckpt, &cfg)?.0
        }
        None => RetrieverModel::load(ckpt)?.0,
    };
    // The checkpoint must match the dataset it is evaluated on.
    let d_raw = data.samples[0].tokens.shape()[1];
    if d_raw != model.config.d_raw {
        return Err(CliError::Artifact(format!(
            "checkpoint d_raw {} does not match dataset token dim {d_raw}",
            model.config.d_raw
        )));
    }
    match (model.config.domain, data.structure) {
        (Domain::Sequence, Structure::Sequence { .. }) => {}
        (Domain::Grid, Structure::Grid { h, w })
            if h == model.config.grid_h && w == model.config.grid_w => {}
        _ => {
            return Err(CliError::Artifact(
                "checkpoint domain does not match dataset".into(),
            ))
        }
    }
    Ok(model)
}

fn cmd_eval(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    config_path: Option<&Path>,
    limit: Option<usize>,
    seed: u64,
) -> Result<(), CliError> {
    let started = Instant::now();
    let data = load_dataset(data_dir)?;
    let model = load_model_for(ckpt, config_path, &data)?;
    fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();

    let eval_limit = limit.unwrap_or_else(|| data.samples.len().min(256));
    let probe_limit = eval_limit.min(320);

    // Probes per VQ group subset.
    let seeds = [derive_seed(seed, 1), derive_seed(seed, 2)];
    let mut probe_rows = Vec::new();
    let mut subsets: Vec<Vec<usize>> = vec![(0..model.config.groups).collect()];
    if model.config.groups > 1 {
        subsets.push(vec![0]);
        subsets.push(vec![1]);
    }
    for subset in &subsets {
        let report = probe_report(&model, &data, subset, &seeds, Some(probe_limit))?;
        println!("{report}");
        probe_rows.push(format!(
            "\"{:?}\",{},{}",
            report.group_subset, report.accuracy_frame, report.accuracy_context
        ));
    }
    let probe_csv = out.join("probe_report.csv");
    write_csv(&probe_csv, "groups,frame,context", probe_rows)?;
    artifacts.push(probe_csv);

    // Co-occurrence map (sorted columns) as CSV + PGM.
    let comap = cooccurrence(&model, &data, Some(eval_limit))?;
    let m = model.config.m;
    let cats = data.categories;
    let mut sorted = Tensor::zeros(&[cats, m]);
    for (jj, &j) in comap.col_order.iter().enumerate() {
        for c in 0..cats {
            sorted.data_mut()[c * m + jj] = comap.normalized.at2(c, j);
        }
    }
    let co_csv = out.join("cooccurrence.csv");
    let header: String = comap
        .col_order
        .iter()
        .map(|j| format!("style{j}"))
        .collect::<Vec<_>>()
        .join(",");
    write_csv(
        &co_csv,
        &header,
        (0..cats).map(|c| {
            (0..m)
                .map(|j| format!("{}", sorted.at2(c, j)))
                .collect::<Vec<_>>()
                .join(",")
        }),
    )?;
    let co_pgm = out.join("cooccurrence.pgm");
    write_pgm(&co_pgm, &sorted)?;
    artifacts.push(co_csv);
    artifacts.push(co_pgm);
    println!(
        "cooccurrence: {}/{} style columns have a unique major category",
        comap.unique_majors, m
    );

    // Link-attention map of sample 0.
    let out0 = model.run_eval(&data.samples[0].tokens)?;
    let att_csv = out.join("attention_sample0.csv");
    let att_pgm = out.join("attention_sample0.pgm");
    write_attention_map(&att_csv, &att_pgm, &out0.link_map(model.config.cooccur_layer_value()))?;
    artifacts.push(att_csv);
    artifacts.push(att_pgm);

    // Hard codes and raw style vectors, for external tooling.
    let dump_limit = eval_limit.min(64);
    let mut code_rows = Vec::new();
    let mut style_rows = Vec::new();
    for (i, s) in data.samples.iter().take(dump_limit).enumerate() {
        let o = model.run_eval(&s.tokens)?;
        for (t, token) in o.codes.iter().enumerate() {
            for (g, &c) in token.iter().enumerate() {
                code_rows.push(format!("{i},{t},{g},{c}"));
            }
        }
        let d_s = model.config.d_s;
        for (j, row) in o.style.data().chunks_exact(d_s).enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            style_rows.push(format!("{i},{j},{}", vals.join(",")));
        }
    }
    let codes_csv = out.join("codes.csv");
    write_csv(&codes_csv, "sample_id,token_index,group,code", code_rows)?;
    artifacts.push(codes_csv);
    let style_csv = out.join("style_vectors.csv");
    let style_header = {
        let dims: Vec<String> = (0..model.config.d_s).map(|j| format!("c{j}")).collect();
        format!("sample_id,style_token,{}", dims.join(","))
    };
    write_csv(&style_csv, &style_header, style_rows)?;
    artifacts.push(style_csv);

    // Grid extras: predicted part maps and centers.
    if let Structure::Grid { h, w } = data.structure {
        let mut center_rows = Vec::new();
        for (i, s) in data.samples.iter().take(4).enumerate() {
            let o = model.run_eval(&s.tokens)?;
            let labels: Vec<usize> = o.codes_g0.clone();
            let ppm = out.join(format!("parts_sample{i}.ppm"));
            write_ppm_indexed(&ppm, &labels, h, w)?;
            artifacts.push(ppm);
            let probs_t = {
                let v = model.config.entries;
                let mut t = Tensor::zeros(&[v, h * w]);
                for pix in 0..h * w {
                    for part in 0..v {
                        t.data_mut()[part * h * w + pix] = o.group0_probs.at2(pix, part);
                    }
                }
                t
            };
            let centers = part_centers(&probs_t, h, w)?;
            for (part, c) in centers.centers.iter().enumerate() {
                match c {
                    Some((ch, cw)) => center_rows.push(format!("{i},{},{},{}", part + 1, ch, cw)),
                    None => center_rows.push(format!("{i},{},,", part + 1)),
                }
            }
        }
        let centers_csv = out.join("part_centers.csv");
        write_csv(&centers_csv, "sample,part,center_h,center_w", center_rows)?;
        artifacts.push(centers_csv);
    }

    // Oracle scores.
    let pairs = transfer_pairs(&data, 64.min(data.samples.len()));
    let transfer_acc = style_transfer_accuracy(&model, &data, &pairs)?;
    let leak = style_leakage(&model, &data, &seeds, Some(probe_limit))?;
    let chance = 1.0 / data.s_true as f64;
    println!("transfer accuracy (oracle): {transfer_acc:.4}");
    println!("style leakage from codes: {leak:.4} (chance {chance:.4})");
    let summary = out.join("eval_summary.txt");
    fs::write(
        &summary,
        format!(
            "transfer_accuracy {transfer_acc}\nstyle_leakage {leak}\nchance {chance}\nunique_majors {}\nstyle_columns {m}\n",
            comap.unique_majors
        ),
    )?;
    artifacts.push(summary);

    write_manifest(out, "eval", seed, &model.config.to_lines(), &artifacts, started)
}

fn cmd_transfer(
    ckpt: &Path,
    data_dir: &Path,
    out: &Path,
    source: usize,
    target: usize,
    parts: &str,
    seed: u64,
) -> Result<(), CliError> {
    let started = Instant::now();
    let data = load_dataset(data_dir)?;
    let model = load_model_for(ckpt, None, &data)?;
    if source >= data.samples.len() || target >= data.samples.len() {
        return Err(CliError::Config(format!(
            "sample indices {source}/{target} out of range {}",
            data.samples.len()
        )));
    }
    fs::create_dir_all(out)?;

    let src = &data.samples[source];
    let tgt = &data.samples[target];
    let (output, mode) = if parts == "all" {
        (model.transfer(&src.tokens, &tgt.tokens, None)?, "full".to_string())
    } else {
        let wanted: Result<Vec<usize>, _> = parts.split(',').map(str::parse::<usize>).collect();
        let wanted = wanted.map_err(|_| {
            CliError::Config(format!("--parts must be 'all' or comma-separated integers, got '{parts}'"))
        })?;
        let comap = cooccurrence(&model, &data, Some(data.samples.len().min(128)))?;
        let rows = style_rows_for_parts(&comap, &wanted)
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        (
            model.transfer(&src.tokens, &tgt.tokens, Some(&rows))?,
            format!("parts {wanted:?} via style rows {rows:?}"),
        )
    };

    let d = data.dict.dim;
    let out_csv = out.join("transfer_output.csv");
    write_csv(
        &out_csv,
        &(0..d).map(|j| format!("c{j}")).collect::<Vec<_>>().join(","),
        output.data().chunks_exact(d).map(|row| {
            row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
        }),
    )?;
    let style_pred = data.dict.classify_style(&output);
    let report = out.join("transfer_report.txt");
    fs::write(
        &report,
        format!(
            "mode {mode}\nsource {source} (style {})\ntarget {target} (style {})\npredicted_style {style_pred}\nsuccess {}\n",
            src.style,
            tgt.style,
            style_pred == tgt.style
        ),
    )?;
    println!(
        "transfer {mode}: predicted style {style_pred}, target style {}",
        tgt.style
    );
    let artifacts = vec![out_csv, report];
    write_manifest(out, "transfer", seed, &model.config.to_lines(), &artifacts, started)
}
