//! Command implementations for the `tvae` binary.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use tvae::data::{batchify, encode_corpus, load_corpus, Tokenizer, Vocab};
use tvae::diffcore::{Rng, Tensor};
use tvae::eval::{append_metrics_csv, format_table, full_report, EvalConfig, METRICS_COLUMNS};
use tvae::model::Decoding;
use tvae::trainer::{checkpoint, run_phase, train_two_phase, Corpora, RunDir, TrainState};
use tvae::Error;

use crate::config::{trim_num, RunConfig};

/// Fixed exit codes: 0 success, 2 config, 3 divergence, 4 I/O.
pub struct CmdError {
    pub code: u8,
    pub message: String,
}

impl CmdError {
    fn config(msg: impl Into<String>) -> Self {
        CmdError { code: 2, message: msg.into() }
    }
    fn io(msg: impl Into<String>) -> Self {
        CmdError { code: 4, message: msg.into() }
    }
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            Error::Diverged { .. } | Error::NanGradient { .. } => 3,
            Error::Config(_) | Error::Data(_) | Error::FreezeNoMatch(_) => 2,
        };
        CmdError { code, message: e.to_string() }
    }
}

impl From<Vec<String>> for CmdError {
    fn from(problems: Vec<String>) -> Self {
        CmdError { code: 2, message: problems.join("\n") }
    }
}

pub type CmdResult = Result<(), CmdError>;

// ── vocab ────────────────────────────────────────────────────────────

pub fn cmd_vocab(
    corpus: &Path,
    out: &Path,
    max_size: usize,
    min_freq: usize,
    tokenizer: Tokenizer,
) -> CmdResult {
    let lines = load_corpus(corpus)?;
    let vocab = Vocab::build(lines.iter().map(String::as_str), max_size, min_freq, tokenizer)?;
    vocab.save(out)?;
    println!("wrote {} ({} ids incl. 4 reserved)", out.display(), vocab.len());
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

pub enum PhaseSelect {
    One,
    Two,
    Both,
}

fn load_corpora(cfg: &RunConfig, vocab: &Vocab) -> Result<Corpora, CmdError> {
    let train_path = cfg
        .data_train
        .as_ref()
        .ok_or_else(|| CmdError::config("data.train is required"))?;
    let train = encode_corpus(&load_corpus(train_path)?, vocab);
    if train.is_empty() {
        return Err(CmdError::config(format!(
            "{}: no encodable lines",
            train_path.display()
        )));
    }
    let valid = match &cfg.data_valid {
        Some(p) => encode_corpus(&load_corpus(p)?, vocab),
        None => Vec::new(),
    };
    Ok(Corpora { train, valid })
}

pub fn cmd_train(
    config_file: Option<&Path>,
    sets: &[String],
    out_dir: &Path,
    phase: PhaseSelect,
    resume: Option<&Path>,
) -> CmdResult {
    let cfg = RunConfig::resolve(config_file, sets)?;
    let vocab_path = cfg
        .data_vocab
        .as_ref()
        .ok_or_else(|| CmdError::config("data.vocab is required (build one with `tvae vocab`)"))?;
    let vocab = Vocab::load(vocab_path)?;
    let corpora = load_corpora(&cfg, &vocab)?;
    let train_cfg = cfg.to_train_config(vocab.len())?;

    let dir = RunDir::create(out_dir, cfg.run_id.clone())?;
    std::fs::write(dir.root.join("config.resolved.cfg"), cfg.to_resolved_string())
        .map_err(|e| CmdError::io(format!("{}: {e}", dir.root.display())))?;

    let mut state = match resume {
        Some(ck) => {
            let state = checkpoint::load(ck)?;
            if state.model.config() != &train_cfg.model {
                return Err(CmdError::config(format!(
                    "checkpoint {} was trained with a different model config",
                    ck.display()
                )));
            }
            println!(
                "resumed from {} (phase {}, epoch {}, step {})",
                ck.display(),
                state.phase,
                state.epoch_in_phase,
                state.global_step
            );
            state
        }
        None => TrainState::new(&train_cfg),
    };

    let run_p1 = matches!(phase, PhaseSelect::One | PhaseSelect::Both);
    let run_p2 = matches!(phase, PhaseSelect::Two | PhaseSelect::Both);

    if run_p1 && state.phase == 1 && train_cfg.phase1.epochs > 0 {
        let log = run_phase(&mut state, &corpora, &train_cfg.phase1, &train_cfg.eval, Some(&dir))?;
        println!(
            "phase 1: {} steps, final loss {:.3}",
            log.rows.len(),
            log.rows.last().map(|r| r.total).unwrap_or(f64::NAN)
        );
    }
    if run_p2 {
        if state.phase == 1 {
            state.enter_phase(2, train_cfg.optim);
        }
        if train_cfg.phase2.epochs > 0 && state.epoch_in_phase < train_cfg.phase2.epochs {
            let log =
                run_phase(&mut state, &corpora, &train_cfg.phase2, &train_cfg.eval, Some(&dir))?;
            println!(
                "phase 2: {} steps, final loss {:.3}, final beta {:.4}",
                log.rows.len(),
                log.rows.last().map(|r| r.total).unwrap_or(f64::NAN),
                log.rows.last().map(|r| r.beta).unwrap_or(f64::NAN)
            );
        }
    }
    checkpoint::save(&state, &dir.checkpoint_path("final"))?;
    println!("run `{}` complete: {}", cfg.run_id, dir.root.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    ckpt: &Path,
    split: &Path,
    vocab_path: &Path,
    run_id: &str,
    out_csv: Option<&Path>,
    seed: u64,
    sets: &[String],
) -> CmdResult {
    let cfg = RunConfig::resolve(None, sets)?;
    let state = checkpoint::load(ckpt)?;
    let vocab = Vocab::load(vocab_path)?;
    if vocab.len() != state.model.config().vocab_size {
        return Err(CmdError::config(format!(
            "vocab has {} ids but the checkpoint expects {}",
            vocab.len(),
            state.model.config().vocab_size
        )));
    }
    let lines = load_corpus(split)?;
    let seqs = encode_corpus(&lines, &vocab);
    if seqs.is_empty() {
        return Err(CmdError::config(format!("{}: no encodable lines", split.display())));
    }
    let mut throwaway = Rng::seed_from_u64(0);
    let batches =
        batchify(&seqs, 64, state.model.config().max_seq_len, 0.0, &mut throwaway, false);
    let eval_cfg = EvalConfig {
        ppl_mode: cfg.eval_ppl_mode,
        au_delta: cfg.eval_au_delta,
        max_examples: cfg.eval_max_examples,
    };
    let mut rng = Rng::derived(seed, 0xE7A1);
    let report = full_report(&state.model, &batches, &eval_cfg, &mut rng);

    let split_name = split.file_stem().and_then(|s| s.to_str()).unwrap_or("split");
    println!("{}", format_table(run_id, split_name, &report));
    // the same row in CSV form, for scripting
    println!("{METRICS_COLUMNS}");
    let mode = match report.ppl_mode {
        tvae::eval::PplMode::ElboBound => "elbo_bound".to_string(),
        tvae::eval::PplMode::Iw { k } => format!("iw{k}"),
    };
    println!(
        "{run_id},{split_name},{},{},{},{},{},{},{},{},{},{},{},{},{mode},{}",
        state.phase,
        state.epoch_in_phase,
        state.global_step,
        report.ppl,
        report.kl,
        report.neg_elbo,
        report.recon_nll,
        report.mi,
        report.au,
        report.au_fraction,
        report.token_count,
        report.example_count,
        report.au_delta,
    );
    if let Some(path) = out_csv {
        append_metrics_csv(
            path,
            run_id,
            split_name,
            state.phase,
            state.epoch_in_phase,
            state.global_step,
            &report,
        )?;
        println!("appended row to {}", path.display());
    }
    Ok(())
}

// ── sample ───────────────────────────────────────────────────────────

pub enum SampleMode {
    FromPrior(usize),
    Reconstruct(PathBuf),
    Interpolate { a: String, b: String, steps: usize },
}

pub fn cmd_sample(
    ckpt: &Path,
    vocab_path: &Path,
    mode: SampleMode,
    max_len: usize,
    temperature: Option<f64>,
    seed: u64,
) -> CmdResult {
    let state = checkpoint::load(ckpt)?;
    let vocab = Vocab::load(vocab_path)?;
    if vocab.len() != state.model.config().vocab_size {
        return Err(CmdError::config(format!(
            "vocab has {} ids but the checkpoint expects {}",
            vocab.len(),
            state.model.config().vocab_size
        )));
    }
    let model = &state.model;
    let d = model.config().latent_dim;
    let decoding = match temperature {
        Some(tau) => Decoding::Temperature(tau),
        None => Decoding::Greedy,
    };
    let mut rng = Rng::derived(seed, 0x5A4D);

    let posterior_mean = |line: &str| -> Result<Tensor<f32>, CmdError> {
        let ids = vocab.encode_line(line);
        if ids.is_empty() {
            return Err(CmdError::config(format!("line encodes to nothing: `{line}`")));
        }
        let mut tr = Rng::seed_from_u64(0);
        let batch = batchify(
            &[ids],
            1,
            model.config().max_seq_len,
            0.0,
            &mut tr,
            false,
        )
        .remove(0);
        let (mu, _) = model.encode_to_posterior(&batch);
        Ok(mu)
    };

    match mode {
        SampleMode::FromPrior(n) => {
            let z = Tensor::<f32>::randn(vec![n, d], 1.0, &mut rng);
            for ids in model.generate(&z, max_len, decoding, &mut rng) {
                println!("{}", vocab.decode_ids(&ids));
            }
        }
        SampleMode::Reconstruct(file) => {
            let lines = load_corpus(&file)?;
            for line in &lines {
                let mu = posterior_mean(line)?;
                let out = model.generate(&mu, max_len, decoding, &mut rng).remove(0);
                println!("{}", vocab.decode_ids(&out));
            }
        }
        SampleMode::Interpolate { a, b, steps } => {
            if steps < 2 {
                return Err(CmdError::config("--steps must be at least 2"));
            }
            let za = posterior_mean(&a)?;
            let zb = posterior_mean(&b)?;
            for ids in model.interpolate(&za, &zb, steps, max_len) {
                println!("{}", vocab.decode_ids(&ids));
            }
        }
    }
    Ok(())
}

// ── sweep ────────────────────────────────────────────────────────────

fn or_singleton(list: &[String], base: String) -> Vec<String> {
    if list.is_empty() {
        vec![base]
    } else {
        list.to_vec()
    }
}

pub fn cmd_sweep(config_file: Option<&Path>, sets: &[String], out_dir: &Path) -> CmdResult {
    let base = RunConfig::resolve(config_file, sets)?;
    let vocab_path = base
        .data_vocab
        .as_ref()
        .ok_or_else(|| CmdError::config("data.vocab is required"))?;
    let vocab = Vocab::load(vocab_path)?;
    let corpora = load_corpora(&base, &vocab)?;

    let poolings = or_singleton(&base.sweep_pooling, match base.model_pooling {
        tvae::model::Pooling::Mean => "mean".into(),
        tvae::model::Pooling::Max => "max".into(),
    });
    let noises = or_singleton(&base.sweep_denoise_p, trim_num(base.phase2_denoise_p));
    let thresholds = or_singleton(&base.sweep_kl_threshold, trim_num(base.phase2_kl_threshold));
    let schedules = or_singleton(
        &base.sweep_schedule,
        crate::config::schedule_to_string(&base.phase2_schedule),
    );

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CmdError::io(format!("{}: {e}", out_dir.display())))?;
    let manifest_path = out_dir.join("sweep_manifest.csv");
    let mut manifest = std::fs::File::create(&manifest_path)
        .map_err(|e| CmdError::io(format!("{}: {e}", manifest_path.display())))?;
    writeln!(manifest, "run_id,dir,pooling,denoise_p,kl_threshold,schedule,status")
        .map_err(|e| CmdError::io(e.to_string()))?;

    let mut any_diverged = false;
    let mut cells = 0usize;
    for pooling in &poolings {
        for noise in &noises {
            for lam in &thresholds {
                for sched in &schedules {
                    let mut cfg = base.clone();
                    let mut problems = Vec::new();
                    for (k, v) in [
                        ("model.pooling", pooling.as_str()),
                        ("phase1.denoise_p", noise.as_str()),
                        ("phase2.denoise_p", noise.as_str()),
                        ("phase2.kl_threshold", lam.as_str()),
                        ("phase2.schedule", sched.as_str()),
                    ] {
                        if let Err(e) = cfg.apply(k, v) {
                            problems.push(e);
                        }
                    }
                    if !problems.is_empty() {
                        return Err(problems.into());
                    }
                    let label = format!(
                        "pool-{pooling}_noise-{noise}_klt-{lam}_sched-{}",
                        sched.replace(':', "-")
                    );
                    cfg.run_id = label.clone();
                    let cell_dir = out_dir.join(&label);
                    let train_cfg = cfg.to_train_config(vocab.len())?;
                    let dir = RunDir::create(&cell_dir, label.clone())?;
                    std::fs::write(
                        dir.root.join("config.resolved.cfg"),
                        cfg.to_resolved_string(),
                    )
                    .map_err(|e| CmdError::io(format!("{}: {e}", dir.root.display())))?;
                    let status = match train_two_phase(&train_cfg, &corpora, Some(&dir)) {
                        Ok(_) => "ok",
                        Err(Error::Diverged { .. }) | Err(Error::NanGradient { .. }) => {
                            any_diverged = true;
                            "diverged"
                        }
                        Err(e) => return Err(e.into()),
                    };
                    writeln!(
                        manifest,
                        "{label},{},{pooling},{noise},{lam},{sched},{status}",
                        cell_dir.display()
                    )
                    .map_err(|e| CmdError::io(e.to_string()))?;
                    println!("cell {label}: {status}");
                    cells += 1;
                }
            }
        }
    }
    println!("sweep complete: {cells} cells, manifest {}", manifest_path.display());
    if any_diverged {
        return Err(CmdError { code: 3, message: "one or more sweep cells diverged".into() });
    }
    Ok(())
}

// ── plot ─────────────────────────────────────────────────────────────

const METRICS_LEVEL: [&str; 6] = ["ppl", "kl", "neg_elbo", "mi", "au", "au_fraction"];
const STEP_LEVEL: [&str; 6] = ["beta", "recon_nll", "kl_raw", "kl_thresholded", "total", "lr"];

pub fn cmd_plot(
    run_dirs: &[PathBuf],
    metric: &str,
    phase: u8,
    out: Option<&Path>,
) -> CmdResult {
    if run_dirs.is_empty() {
        return Err(CmdError::config("plot needs at least one run directory"));
    }
    let from_metrics = METRICS_LEVEL.contains(&metric);
    if !from_metrics && !STEP_LEVEL.contains(&metric) {
        return Err(CmdError::config(format!(
            "unknown metric `{metric}` (step-level: {STEP_LEVEL:?}; validation-level: {METRICS_LEVEL:?})"
        )));
    }

    let mut rows: Vec<(u64, String, String)> = Vec::new();
    for dir in run_dirs {
        let cfg_path = dir.join("config.resolved.cfg");
        let cfg = RunConfig::resolve(Some(&cfg_path), &[])?;
        let label = cfg.run_label(phase);
        let file = if from_metrics { dir.join("metrics.csv") } else { dir.join("train_log.csv") };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| CmdError::io(format!("{}: {e}", file.display())))?;
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| CmdError::config(format!("{}: empty file", file.display())))?;
        let cols: Vec<&str> = header.split(',').collect();
        let col = |name: &str| {
            cols.iter()
                .position(|c| *c == name)
                .ok_or_else(|| CmdError::config(format!("{}: no `{name}` column", file.display())))
        };
        let step_col = col("step")?;
        let phase_col = col("phase")?;
        let value_col = col(metric)?;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.get(phase_col) != Some(&&*phase.to_string()) {
                continue;
            }
            let step: u64 = fields
                .get(step_col)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CmdError::config(format!("{}: bad step in `{line}`", file.display())))?;
            let value = fields
                .get(value_col)
                .ok_or_else(|| CmdError::config(format!("{}: short row `{line}`", file.display())))?;
            rows.push((step, label.clone(), value.to_string()));
        }
    }

    let mut body = String::from("step,run_label,value\n");
    for (step, label, value) in &rows {
        body.push_str(&format!("{step},{label},{value}\n"));
    }
    match out {
        Some(path) => {
            std::fs::write(path, body)
                .map_err(|e| CmdError::io(format!("{}: {e}", path.display())))?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}
