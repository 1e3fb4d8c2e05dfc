//! Intrinsic evaluation: PPL, KL, negative ELBO, mutual information, and
//! active units, on clean (un-noised) inputs.
//!
//! Evaluation reports the raw bound: KL is unweighted and unthresholded;
//! beta and lambda are training devices. All accumulation is f64 regardless
//! of the model's element width.

use std::f64::consts::{PI, TAU};
use std::io::Write as _;
use std::path::Path;

use crate::data::Batch;
use crate::diffcore::{no_grad, BoolMask, Element, Rng, Tensor};
use crate::model::{Eps, ForwardMode, TransformerVae};
use crate::{Error, Result};

/// How perplexity is derived.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PplMode {
    /// `exp(neg_elbo / tokens)`, an upper bound on true perplexity.
    ElboBound,
    /// Importance-weighted bound with `k` posterior samples per example.
    Iw { k: usize },
}

/// Evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    pub ppl_mode: PplMode,
    /// Active-unit variance threshold.
    pub au_delta: f64,
    /// Cap on examples used for MI/AU (keeps the O(N^2) estimator cheap).
    pub max_examples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ppl_mode: PplMode::ElboBound, au_delta: 0.01, max_examples: 2000 }
    }
}

/// One full evaluation of a dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ppl: f64,
    pub kl: f64,
    pub neg_elbo: f64,
    pub recon_nll: f64,
    pub mi: f64,
    pub au: usize,
    pub au_fraction: f64,
    pub token_count: usize,
    pub example_count: usize,
    /// Config echo.
    pub ppl_mode: PplMode,
    pub au_delta: f64,
}

/// Single-sample test ELBO totals over a split:
/// `(neg_elbo, kl, recon_nll, token_count, example_count)`.
pub fn test_elbo<E: Element>(
    model: &TransformerVae<E>,
    batches: &[Batch],
    rng: &mut Rng,
) -> (f64, f64, f64, usize, usize) {
    assert!(!batches.is_empty(), "test_elbo on empty split");
    let mut recon_total = 0.0;
    let mut kl_total = 0.0;
    let mut tokens = 0usize;
    let mut examples = 0usize;
    no_grad(|| {
        for b in batches {
            let (logits, latent) = model.forward(b, Eps::Sample(rng), &mut ForwardMode::Eval);
            let (nll, count) = logits.cross_entropy_logits(&b.tgt_out_ids, &b.tgt_mask);
            recon_total += nll.item().to_f64();
            tokens += count;
            examples += b.batch;
            kl_total += kl_sum(&latent.mu, &latent.log_sigma);
        }
    });
    (recon_total + kl_total, kl_total, recon_total, tokens, examples)
}

/// Sum over examples and dimensions of the closed-form Gaussian KL.
fn kl_sum<E: Element>(mu: &Tensor<E>, log_sigma: &Tensor<E>) -> f64 {
    mu.data()
        .iter()
        .zip(log_sigma.data())
        .map(|(&m, &ls)| {
            let (m, ls) = (m.to_f64(), ls.to_f64());
            0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls)
        })
        .sum()
}

/// Perplexity from an ELBO total: `exp(neg_elbo / tokens)`.
pub fn perplexity(neg_elbo_total: f64, token_count: usize) -> f64 {
    assert!(token_count >= 1, "perplexity needs at least one token");
    (neg_elbo_total / token_count as f64).exp()
}

/// Importance-weighted perplexity with `k` posterior samples per example:
/// `log p(x) >= logmeanexp_j [log p(x|z_j) + log p(z_j) - log q(z_j|x)]`.
pub fn iw_perplexity<E: Element>(
    model: &TransformerVae<E>,
    batches: &[Batch],
    k: usize,
    rng: &mut Rng,
) -> f64 {
    assert!(k >= 1, "iw perplexity needs k >= 1");
    let mut log_px_total = 0.0;
    let mut tokens = 0usize;
    no_grad(|| {
        for b in batches {
            let (mu, log_sigma) = model.encode_to_posterior(b);
            let d = mu.shape()[1];
            let mut log_w = vec![vec![0.0f64; k]; b.batch];
            for j in 0..k {
                let latent = model.reparameterize(&mu, &log_sigma, Eps::Sample(rng));
                let memory = model.project_latent(&latent.z);
                let tgt_mask = BoolMask::new(vec![b.batch, b.tgt_len], b.tgt_mask.clone());
                let logits = model.decode(
                    &memory,
                    &b.tgt_in_ids,
                    &tgt_mask,
                    b.batch,
                    b.tgt_len,
                    &mut ForwardMode::Eval,
                );
                let nll_rows = per_example_nll(&logits, b);
                for r in 0..b.batch {
                    let mut log_q = 0.0;
                    let mut log_p = 0.0;
                    for i in 0..d {
                        let eps = latent.epsilon.data()[r * d + i].to_f64();
                        let ls = log_sigma.data()[r * d + i].to_f64();
                        let z = latent.z.data()[r * d + i].to_f64();
                        log_q += -0.5 * eps * eps - ls - 0.5 * TAU.ln();
                        log_p += -0.5 * z * z - 0.5 * TAU.ln();
                    }
                    log_w[r][j] = -nll_rows[r] + log_p - log_q;
                }
            }
            for r in 0..b.batch {
                log_px_total += log_mean_exp(&log_w[r]);
            }
            tokens += b.target_tokens();
        }
    });
    (-log_px_total / tokens as f64).exp()
}

fn per_example_nll<E: Element>(logits: &Tensor<E>, b: &Batch) -> Vec<f64> {
    let v = logits.shape()[2];
    let mut out = vec![0.0f64; b.batch];
    for r in 0..b.batch {
        for t in 0..b.tgt_len {
            if !b.tgt_mask[r * b.tgt_len + t] {
                continue;
            }
            let row = &logits.data()[(r * b.tgt_len + t) * v..(r * b.tgt_len + t + 1) * v];
            let maxv = row.iter().fold(f64::NEG_INFINITY, |a, x| a.max(x.to_f64()));
            let lse: f64 = row.iter().map(|x| (x.to_f64() - maxv).exp()).sum::<f64>().ln() + maxv;
            out[r] += lse - row[b.tgt_out_ids[r * b.tgt_len + t] as usize].to_f64();
        }
    }
    out
}

fn log_mean_exp(xs: &[f64]) -> f64 {
    let maxv = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - maxv).exp()).sum();
    maxv + (s / xs.len() as f64).ln()
}

/// Collect per-example posteriors `(mu, log_sigma)` as f64 rows.
fn collect_posteriors<E: Element>(
    model: &TransformerVae<E>,
    batches: &[Batch],
    max_examples: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut mus = Vec::new();
    let mut lss = Vec::new();
    no_grad(|| {
        'outer: for b in batches {
            let (mu, ls) = model.encode_to_posterior(b);
            let d = mu.shape()[1];
            for r in 0..b.batch {
                mus.push(mu.data()[r * d..(r + 1) * d].iter().map(|v| v.to_f64()).collect());
                lss.push(ls.data()[r * d..(r + 1) * d].iter().map(|v| v.to_f64()).collect());
                if mus.len() >= max_examples {
                    break 'outer;
                }
            }
        }
    });
    (mus, lss)
}

/// Diagonal Gaussian log-density.
fn log_density(z: &[f64], mu: &[f64], log_sigma: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..z.len() {
        let s = log_sigma[i].exp();
        let t = (z[i] - mu[i]) / s;
        acc += -0.5 * t * t - log_sigma[i] - 0.5 * (2.0 * PI).ln();
    }
    acc
}

/// Aggregate-posterior mutual information estimator on explicit posteriors
/// and latent draws (one `z_n` per example):
/// `MI = (1/N) sum_n [log q(z_n|x_n) - log((1/N) sum_m q(z_n|x_m))]`,
/// log-sum-exp stabilized.
pub fn mi_from_draws(mus: &[Vec<f64>], log_sigmas: &[Vec<f64>], zs: &[Vec<f64>]) -> f64 {
    let n = mus.len();
    assert!(n >= 2, "MI estimator needs at least 2 examples");
    assert_eq!(n, log_sigmas.len());
    assert_eq!(n, zs.len());
    let mut acc = 0.0;
    let mut log_qs = vec![0.0f64; n];
    for (zn, (mu_n, ls_n)) in zs.iter().zip(mus.iter().zip(log_sigmas)) {
        for (m, (mu_m, ls_m)) in mus.iter().zip(log_sigmas).enumerate() {
            log_qs[m] = log_density(zn, mu_m, ls_m);
        }
        let own = log_density(zn, mu_n, ls_n);
        acc += own - log_mean_exp(&log_qs);
    }
    acc / n as f64
}

/// [`mi_from_draws`] with the draws sampled here, one per example.
pub fn mi_from_posteriors(mus: &[Vec<f64>], log_sigmas: &[Vec<f64>], rng: &mut Rng) -> f64 {
    let n = mus.len();
    assert!(n >= 2, "MI estimator needs at least 2 examples");
    let d = mus[0].len();
    let zs: Vec<Vec<f64>> = mus
        .iter()
        .zip(log_sigmas)
        .map(|(mu, ls)| (0..d).map(|i| mu[i] + ls[i].exp() * rng.normal()).collect())
        .collect();
    mi_from_draws(mus, log_sigmas, &zs)
}

/// Mutual information of a model over a split.
pub fn mutual_information<E: Element>(
    model: &TransformerVae<E>,
    batches: &[Batch],
    max_examples: usize,
    rng: &mut Rng,
) -> f64 {
    let (mus, lss) = collect_posteriors(model, batches, max_examples);
    mi_from_posteriors(&mus, &lss, rng)
}

/// Active units on an explicit posterior-mean matrix: dimension `i` is
/// active iff the sample variance of `mu_i` across examples exceeds `delta`.
pub fn au_from_means(mus: &[Vec<f64>], delta: f64) -> (usize, f64) {
    let n = mus.len();
    assert!(n >= 2, "AU needs at least 2 examples");
    let d = mus[0].len();
    let mut active = 0usize;
    for i in 0..d {
        // Welford one-pass variance
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (cnt, row) in mus.iter().enumerate() {
            let delta1 = row[i] - mean;
            mean += delta1 / (cnt + 1) as f64;
            m2 += delta1 * (row[i] - mean);
        }
        let var = m2 / (n - 1) as f64;
        if var > delta {
            active += 1;
        }
    }
    (active, active as f64 / d as f64)
}

/// Active units of a model over a split.
pub fn active_units<E: Element>(
    model: &TransformerVae<E>,
    batches: &[Batch],
    delta: f64,
    max_examples: usize,
) -> (usize, f64) {
    let (mus, _) = collect_posteriors(model, batches, max_examples);
    au_from_means(&mus, delta)
}

/// Compose the full intrinsic report for a split.
pub fn full_report<E: Element>(
    model: &TransformerVae<E>,
    batches: &[Batch],
    cfg: &EvalConfig,
    rng: &mut Rng,
) -> MetricsReport {
    let (neg_elbo, kl, recon_nll, token_count, example_count) = test_elbo(model, batches, rng);
    let ppl = match cfg.ppl_mode {
        PplMode::ElboBound => perplexity(neg_elbo, token_count),
        PplMode::Iw { k } => iw_perplexity(model, batches, k, rng),
    };
    let mi = mutual_information(model, batches, cfg.max_examples, rng);
    let (au, au_fraction) = active_units(model, batches, cfg.au_delta, cfg.max_examples);
    MetricsReport {
        ppl,
        kl,
        neg_elbo,
        recon_nll,
        mi,
        au,
        au_fraction,
        token_count,
        example_count,
        ppl_mode: cfg.ppl_mode,
        au_delta: cfg.au_delta,
    }
}

/// Fixed, versioned column order of the metrics CSV.
pub const METRICS_COLUMNS: &str =
    "run_id,split,phase,epoch,step,ppl,kl,neg_elbo,recon_nll,mi,au,au_fraction,token_count,example_count,ppl_mode,au_delta";

/// Append one report row to a `#metrics v1` CSV, creating it (with header)
/// if missing.
#[allow(clippy::too_many_arguments)]
pub fn append_metrics_csv(
    path: &Path,
    run_id: &str,
    split: &str,
    phase: u8,
    epoch: u32,
    step: u64,
    report: &MetricsReport,
) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    if fresh {
        writeln!(f, "#metrics v1").map_err(io)?;
        writeln!(f, "{METRICS_COLUMNS}").map_err(io)?;
    }
    let mode = match report.ppl_mode {
        PplMode::ElboBound => "elbo_bound".to_string(),
        PplMode::Iw { k } => format!("iw{k}"),
    };
    writeln!(
        f,
        "{run_id},{split},{phase},{epoch},{step},{},{},{},{},{},{},{},{},{},{mode},{}",
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
    )
    .map_err(io)
}

/// Human-readable table for one report.
pub fn format_table(run_id: &str, split: &str, r: &MetricsReport) -> String {
    let mode = match r.ppl_mode {
        PplMode::ElboBound => "elbo_bound".to_string(),
        PplMode::Iw { k } => format!("iw({k})"),
    };
    format!(
        "run: {run_id}  split: {split}  ({} examples, {} tokens)\n\
         +-----------+------------+\n\
         | PPL ({mode}) | {:>10.4} |\n\
         | KL        | {:>10.4} |\n\
         | -ELBO     | {:>10.4} |\n\
         | recon NLL | {:>10.4} |\n\
         | MI        | {:>10.4} |\n\
         | AU        | {:>6} ({:.0}%) |\n\
         +-----------+------------+",
        r.example_count,
        r.token_count,
        r.ppl,
        r.kl,
        r.neg_elbo,
        r.recon_nll,
        r.mi,
        r.au,
        r.au_fraction * 100.0,
    )
}
