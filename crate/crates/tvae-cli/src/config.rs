//! Flat key=value run configuration.
//!
//! Resolution order: built-in defaults < config file < `--set key=value`
//! flags. Unknown keys are rejected, and every run writes its fully resolved
//! config next to its outputs; feeding that file back reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tvae::data::Tokenizer;
use tvae::eval::{EvalConfig, PplMode};
use tvae::model::{ModelConfig, Pooling, PoolingScope};
use tvae::objective::Schedule;
use tvae::trainer::{OptimConfig, PhaseConfig, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,

    pub data_train: Option<PathBuf>,
    pub data_valid: Option<PathBuf>,
    pub data_test: Option<PathBuf>,
    pub data_vocab: Option<PathBuf>,
    pub data_tokenizer: Tokenizer,

    pub model_hidden: usize,
    pub model_enc_layers: usize,
    pub model_dec_layers: usize,
    pub model_heads: usize,
    pub model_head_dim: usize,
    pub model_ff_dim: usize,
    pub model_latent_dim: usize,
    pub model_max_seq_len: usize,
    pub model_pooling: Pooling,
    pub model_pooling_scope: PoolingScope,
    pub model_dropout: f64,

    pub phase1_epochs: u32,
    pub phase1_denoise_p: f64,
    pub phase1_batch_size: usize,
    pub phase1_lr: f64,
    pub phase1_freeze: Vec<String>,
    pub phase1_deterministic_latent: bool,

    pub phase2_epochs: u32,
    pub phase2_schedule: Schedule,
    pub phase2_kl_threshold: f64,
    pub phase2_denoise_p: f64,
    pub phase2_batch_size: usize,
    pub phase2_lr: f64,
    pub phase2_freeze: Vec<String>,

    pub optim_beta1: f64,
    pub optim_beta2: f64,
    pub optim_eps: f64,
    pub optim_weight_decay: f64,
    pub optim_grad_clip: f64, // 0 disables

    pub eval_ppl_mode: PplMode,
    pub eval_au_delta: f64,
    pub eval_max_examples: usize,

    pub sweep_pooling: Vec<String>,
    pub sweep_denoise_p: Vec<String>,
    pub sweep_kl_threshold: Vec<String>,
    pub sweep_schedule: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p1 = PhaseConfig::phase1_default();
        let p2 = PhaseConfig::phase2_default();
        let opt = OptimConfig::default();
        let ev = EvalConfig::default();
        RunConfig {
            run_id: "run".into(),
            seed: 42,
            data_train: None,
            data_valid: None,
            data_test: None,
            data_vocab: None,
            data_tokenizer: Tokenizer::Whitespace,
            model_hidden: 64,
            model_enc_layers: 2,
            model_dec_layers: 2,
            model_heads: 4,
            model_head_dim: 16,
            model_ff_dim: 128,
            model_latent_dim: 32,
            model_max_seq_len: 32,
            model_pooling: Pooling::Max,
            model_pooling_scope: PoolingScope::AllLayers,
            model_dropout: 0.0,
            phase1_epochs: p1.epochs,
            phase1_denoise_p: p1.denoise_p,
            phase1_batch_size: p1.batch_size,
            phase1_lr: p1.lr,
            phase1_freeze: p1.freeze,
            phase1_deterministic_latent: p1.deterministic_latent,
            phase2_epochs: p2.epochs,
            phase2_schedule: p2.schedule,
            phase2_kl_threshold: p2.kl_threshold,
            phase2_denoise_p: p2.denoise_p,
            phase2_batch_size: p2.batch_size,
            phase2_lr: p2.lr,
            phase2_freeze: p2.freeze,
            optim_beta1: opt.beta1,
            optim_beta2: opt.beta2,
            optim_eps: opt.eps,
            optim_weight_decay: opt.weight_decay,
            optim_grad_clip: 0.0,
            eval_ppl_mode: ev.ppl_mode,
            eval_au_delta: ev.au_delta,
            eval_max_examples: ev.max_examples,
            sweep_pooling: vec![],
            sweep_denoise_p: vec![],
            sweep_kl_threshold: vec![],
            sweep_schedule: vec![],
        }
    }
}

fn parse_schedule(v: &str) -> Result<Schedule, String> {
    // a cyclical horizon of 0 means "this phase's epoch count"; it is
    // resolved once the whole config is known
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["zero"] => Ok(Schedule::Zero),
        ["constant", b] => b
            .parse()
            .map(|beta| Schedule::Constant { beta })
            .map_err(|_| format!("bad constant beta `{b}`")),
        ["linear", e] => e
            .parse()
            .map(|total_epochs| Schedule::Linear { total_epochs })
            .map_err(|_| format!("bad linear epochs `{e}`")),
        ["cyclical"] => {
            Ok(Schedule::Cyclical { cycles: 4, ramp_fraction: 0.5, total_epochs: 0 })
        }
        ["cyclical", c, r] => {
            let cycles = c.parse().map_err(|_| format!("bad cycle count `{c}`"))?;
            let ramp_fraction = r.parse().map_err(|_| format!("bad ramp fraction `{r}`"))?;
            Ok(Schedule::Cyclical { cycles, ramp_fraction, total_epochs: 0 })
        }
        ["cyclical", c, r, e] => {
            let cycles = c.parse().map_err(|_| format!("bad cycle count `{c}`"))?;
            let ramp_fraction = r.parse().map_err(|_| format!("bad ramp fraction `{r}`"))?;
            let total_epochs = e.parse().map_err(|_| format!("bad cyclical epochs `{e}`"))?;
            Ok(Schedule::Cyclical { cycles, ramp_fraction, total_epochs })
        }
        _ => Err(format!(
            "bad schedule `{v}` (want zero | constant:B | linear:E | cyclical[:C:R[:E]])"
        )),
    }
}

pub fn schedule_to_string(s: &Schedule) -> String {
    match s {
        Schedule::Zero => "zero".into(),
        Schedule::Constant { beta } => format!("constant:{beta}"),
        Schedule::Linear { total_epochs } => format!("linear:{total_epochs}"),
        Schedule::Cyclical { cycles, ramp_fraction, total_epochs } => {
            format!("cyclical:{cycles}:{ramp_fraction}:{total_epochs}")
        }
    }
}

fn parse_ppl_mode(v: &str) -> Result<PplMode, String> {
    let parts: Vec<&str> = v.split(':').collect();
    match parts.as_slice() {
        ["elbo_bound"] => Ok(PplMode::ElboBound),
        ["iw"] => Ok(PplMode::Iw { k: 50 }),
        ["iw", k] => k
            .parse()
            .map(|k| PplMode::Iw { k })
            .map_err(|_| format!("bad iw sample count `{k}`")),
        _ => Err(format!("bad ppl mode `{v}` (want elbo_bound | iw[:K])")),
    }
}

fn ppl_mode_to_string(m: &PplMode) -> String {
    match m {
        PplMode::ElboBound => "elbo_bound".into(),
        PplMode::Iw { k } => format!("iw:{k}"),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned).collect()
}

impl RunConfig {
    /// Apply one `key=value` assignment. Returns an error string for unknown
    /// keys or unparsable values.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse `{v}`"))
        }
        let v = value.trim();
        // an empty value unsets a path key, so resolved configs round-trip
        let opt_path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "run_id" => self.run_id = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "data.train" => self.data_train = opt_path(v),
            "data.valid" => self.data_valid = opt_path(v),
            "data.test" => self.data_test = opt_path(v),
            "data.vocab" => self.data_vocab = opt_path(v),
            "data.tokenizer" => {
                self.data_tokenizer = match v {
                    "whitespace" => Tokenizer::Whitespace,
                    "char" => Tokenizer::Char,
                    _ => return Err(format!("{key}: `{v}` is not whitespace|char")),
                }
            }
            "model.hidden" => self.model_hidden = num(key, v)?,
            "model.enc_layers" => self.model_enc_layers = num(key, v)?,
            "model.dec_layers" => self.model_dec_layers = num(key, v)?,
            "model.heads" => self.model_heads = num(key, v)?,
            "model.head_dim" => self.model_head_dim = num(key, v)?,
            "model.ff_dim" => self.model_ff_dim = num(key, v)?,
            "model.latent_dim" => self.model_latent_dim = num(key, v)?,
            "model.max_seq_len" => self.model_max_seq_len = num(key, v)?,
            "model.pooling" => {
                self.model_pooling = match v {
                    "mean" => Pooling::Mean,
                    "max" => Pooling::Max,
                    _ => return Err(format!("{key}: `{v}` is not mean|max")),
                }
            }
            "model.pooling_scope" => {
                self.model_pooling_scope = match v {
                    "final_layer" => PoolingScope::FinalLayer,
                    "all_layers" => PoolingScope::AllLayers,
                    _ => return Err(format!("{key}: `{v}` is not final_layer|all_layers")),
                }
            }
            "model.dropout" => self.model_dropout = num(key, v)?,
            "phase1.epochs" => self.phase1_epochs = num(key, v)?,
            "phase1.denoise_p" => self.phase1_denoise_p = num(key, v)?,
            "phase1.batch_size" => self.phase1_batch_size = num(key, v)?,
            "phase1.lr" => self.phase1_lr = num(key, v)?,
            "phase1.freeze" => self.phase1_freeze = parse_list(v),
            "phase1.deterministic_latent" => self.phase1_deterministic_latent = num(key, v)?,
            "phase2.epochs" => self.phase2_epochs = num(key, v)?,
            "phase2.schedule" => self.phase2_schedule = parse_schedule(v).map_err(|e| format!("{key}: {e}"))?,
            "phase2.kl_threshold" => self.phase2_kl_threshold = num(key, v)?,
            "phase2.denoise_p" => self.phase2_denoise_p = num(key, v)?,
            "phase2.batch_size" => self.phase2_batch_size = num(key, v)?,
            "phase2.lr" => self.phase2_lr = num(key, v)?,
            "phase2.freeze" => self.phase2_freeze = parse_list(v),
            "optim.beta1" => self.optim_beta1 = num(key, v)?,
            "optim.beta2" => self.optim_beta2 = num(key, v)?,
            "optim.eps" => self.optim_eps = num(key, v)?,
            "optim.weight_decay" => self.optim_weight_decay = num(key, v)?,
            "optim.grad_clip" => self.optim_grad_clip = num(key, v)?,
            "eval.ppl_mode" => self.eval_ppl_mode = parse_ppl_mode(v).map_err(|e| format!("{key}: {e}"))?,
            "eval.au_delta" => self.eval_au_delta = num(key, v)?,
            "eval.max_examples" => self.eval_max_examples = num(key, v)?,
            "sweep.pooling" => self.sweep_pooling = parse_list(v),
            "sweep.denoise_p" => self.sweep_denoise_p = parse_list(v),
            "sweep.kl_threshold" => self.sweep_kl_threshold = parse_list(v),
            "sweep.schedule" => self.sweep_schedule = parse_list(v),
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Parse a key=value file (`#` comments and blank lines allowed) and then
    /// the `--set` overrides, collecting every problem before failing.
    pub fn resolve(
        file: Option<&Path>,
        sets: &[String],
    ) -> Result<RunConfig, Vec<String>> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        if let Some(path) = file {
            match std::fs::read_to_string(path) {
                Err(e) => problems.push(format!("{}: {e}", path.display())),
                Ok(text) => {
                    for (lineno, line) in text.lines().enumerate() {
                        let line = line.trim();
                        if line.is_empty() || line.starts_with('#') {
                            continue;
                        }
                        match line.split_once('=') {
                            None => problems.push(format!(
                                "{}:{}: expected key=value, got `{line}`",
                                path.display(),
                                lineno + 1
                            )),
                            Some((k, v)) => {
                                if let Err(e) = cfg.apply(k.trim(), v) {
                                    problems.push(format!("{}:{}: {e}", path.display(), lineno + 1));
                                }
                            }
                        }
                    }
                }
            }
        }
        for s in sets {
            match s.split_once('=') {
                None => problems.push(format!("--set `{s}`: expected key=value")),
                Some((k, v)) => {
                    if let Err(e) = cfg.apply(k.trim(), v) {
                        problems.push(format!("--set: {e}"));
                    }
                }
            }
        }
        if let Schedule::Cyclical { cycles, ramp_fraction, total_epochs: 0 } =
            cfg.phase2_schedule
        {
            cfg.phase2_schedule = Schedule::Cyclical {
                cycles,
                ramp_fraction,
                total_epochs: cfg.phase2_epochs,
            };
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(problems)
        }
    }

    /// The fully resolved config as a key=value document.
    pub fn to_resolved_string(&self) -> String {
        let path_str = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        let mut pairs: BTreeMap<&str, String> = BTreeMap::new();
        pairs.insert("run_id", self.run_id.clone());
        pairs.insert("seed", self.seed.to_string());
        pairs.insert("data.train", path_str(&self.data_train));
        pairs.insert("data.valid", path_str(&self.data_valid));
        pairs.insert("data.test", path_str(&self.data_test));
        pairs.insert("data.vocab", path_str(&self.data_vocab));
        pairs.insert(
            "data.tokenizer",
            match self.data_tokenizer {
                Tokenizer::Whitespace => "whitespace".into(),
                Tokenizer::Char => "char".into(),
            },
        );
        pairs.insert("model.hidden", self.model_hidden.to_string());
        pairs.insert("model.enc_layers", self.model_enc_layers.to_string());
        pairs.insert("model.dec_layers", self.model_dec_layers.to_string());
        pairs.insert("model.heads", self.model_heads.to_string());
        pairs.insert("model.head_dim", self.model_head_dim.to_string());
        pairs.insert("model.ff_dim", self.model_ff_dim.to_string());
        pairs.insert("model.latent_dim", self.model_latent_dim.to_string());
        pairs.insert("model.max_seq_len", self.model_max_seq_len.to_string());
        pairs.insert(
            "model.pooling",
            match self.model_pooling {
                Pooling::Mean => "mean".into(),
                Pooling::Max => "max".into(),
            },
        );
        pairs.insert(
            "model.pooling_scope",
            match self.model_pooling_scope {
                PoolingScope::FinalLayer => "final_layer".into(),
                PoolingScope::AllLayers => "all_layers".into(),
            },
        );
        pairs.insert("model.dropout", self.model_dropout.to_string());
        pairs.insert("phase1.epochs", self.phase1_epochs.to_string());
        pairs.insert("phase1.denoise_p", self.phase1_denoise_p.to_string());
        pairs.insert("phase1.batch_size", self.phase1_batch_size.to_string());
        pairs.insert("phase1.lr", self.phase1_lr.to_string());
        pairs.insert("phase1.freeze", self.phase1_freeze.join(","));
        pairs.insert(
            "phase1.deterministic_latent",
            self.phase1_deterministic_latent.to_string(),
        );
        pairs.insert("phase2.epochs", self.phase2_epochs.to_string());
        pairs.insert("phase2.schedule", schedule_to_string(&self.phase2_schedule));
        pairs.insert("phase2.kl_threshold", self.phase2_kl_threshold.to_string());
        pairs.insert("phase2.denoise_p", self.phase2_denoise_p.to_string());
        pairs.insert("phase2.batch_size", self.phase2_batch_size.to_string());
        pairs.insert("phase2.lr", self.phase2_lr.to_string());
        pairs.insert("phase2.freeze", self.phase2_freeze.join(","));
        pairs.insert("optim.beta1", self.optim_beta1.to_string());
        pairs.insert("optim.beta2", self.optim_beta2.to_string());
        pairs.insert("optim.eps", self.optim_eps.to_string());
        pairs.insert("optim.weight_decay", self.optim_weight_decay.to_string());
        pairs.insert("optim.grad_clip", self.optim_grad_clip.to_string());
        pairs.insert("eval.ppl_mode", ppl_mode_to_string(&self.eval_ppl_mode));
        pairs.insert("eval.au_delta", self.eval_au_delta.to_string());
        pairs.insert("eval.max_examples", self.eval_max_examples.to_string());
        pairs.insert("sweep.pooling", self.sweep_pooling.join(","));
        pairs.insert("sweep.denoise_p", self.sweep_denoise_p.join(","));
        pairs.insert("sweep.kl_threshold", self.sweep_kl_threshold.join(","));
        pairs.insert("sweep.schedule", self.sweep_schedule.join(","));

        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Assemble the typed training configuration, validating everything and
    /// reporting all problems at once.
    pub fn to_train_config(&self, vocab_size: usize) -> Result<TrainConfig, Vec<String>> {
        let cfg = TrainConfig {
            model: ModelConfig {
                vocab_size,
                hidden: self.model_hidden,
                enc_layers: self.model_enc_layers,
                dec_layers: self.model_dec_layers,
                heads: self.model_heads,
                head_dim: self.model_head_dim,
                ff_dim: self.model_ff_dim,
                latent_dim: self.model_latent_dim,
                max_seq_len: self.model_max_seq_len,
                pooling: self.model_pooling,
                pooling_scope: self.model_pooling_scope,
                dropout: self.model_dropout,
            },
            phase1: PhaseConfig {
                phase: 1,
                epochs: self.phase1_epochs,
                schedule: Schedule::Zero,
                kl_threshold: 0.0,
                denoise_p: self.phase1_denoise_p,
                freeze: self.phase1_freeze.clone(),
                deterministic_latent: self.phase1_deterministic_latent,
                batch_size: self.phase1_batch_size,
                lr: self.phase1_lr,
            },
            phase2: PhaseConfig {
                phase: 2,
                epochs: self.phase2_epochs,
                schedule: self.phase2_schedule,
                kl_threshold: self.phase2_kl_threshold,
                denoise_p: self.phase2_denoise_p,
                freeze: self.phase2_freeze.clone(),
                deterministic_latent: false,
                batch_size: self.phase2_batch_size,
                lr: self.phase2_lr,
            },
            optim: OptimConfig {
                beta1: self.optim_beta1,
                beta2: self.optim_beta2,
                eps: self.optim_eps,
                weight_decay: self.optim_weight_decay,
                grad_clip: if self.optim_grad_clip > 0.0 {
                    Some(self.optim_grad_clip)
                } else {
                    None
                },
            },
            eval: EvalConfig {
                ppl_mode: self.eval_ppl_mode,
                au_delta: self.eval_au_delta,
                max_examples: self.eval_max_examples,
            },
            seed: self.seed,
        };
        match cfg.validate() {
            Ok(()) => Ok(cfg),
            Err(e) => Err(e.to_string().split("; ").map(str::to_owned).collect()),
        }
    }

    /// Short label for plot output: `{pooling}_{denoise}_{frozen}` for
    /// phase 1, `{kl_threshold}_{denoise}` for phase 2.
    pub fn run_label(&self, phase: u8) -> String {
        let pooling = match self.model_pooling {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        };
        if phase == 1 {
            let frozen = if self.phase1_freeze.is_empty() { "unfrozen" } else { "frozen" };
            format!("{pooling}_{}_{frozen}", trim_num(self.phase1_denoise_p))
        } else {
            format!(
                "{}_{}",
                trim_num(self.phase2_kl_threshold),
                trim_num(self.phase2_denoise_p)
            )
        }
    }
}

/// `3.0 -> "3"`, `0.15 -> "0.15"`, `0 -> "0"`.
pub fn trim_num(v: f64) -> String {
    if v == v.trunc() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
