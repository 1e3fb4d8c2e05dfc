//! Acceptance suite: one test per shipping criterion, each printing a
//! `criterion N` line with the measured values.
//!
//! The three training-based criteria (6, 7, 8) share one set of runs on the
//! low-entropy topic corpus, built once in a process-wide fixture.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use tvae::data::synthetic::topic_corpus;
use tvae::data::{batchify, encode_corpus, Batch, Tokenizer, Vocab};
use tvae::diffcore::{grad_check, no_grad, BoolMask, Rng, Tensor};
use tvae::eval::{
    active_units, au_from_means, mi_from_posteriors, perplexity, test_elbo,
    EvalConfig, MetricsReport,
};
use tvae::model::{Eps, ForwardMode, ModelConfig, Pooling, PoolingScope, TransformerVae};
use tvae::objective::{elbo_loss, gaussian_kl, kl_weight, threshold_kl, LossConfig, Schedule};
use tvae::trainer::{
    checkpoint, freeze, run_phase, train_two_phase, Corpora, OptimConfig, PhaseConfig, RunDir,
    TrainConfig, TrainState,
};

// ── criterion 1: gradient fidelity ───────────────────────────────────

fn c1_model_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        hidden: 32,
        enc_layers: 2,
        dec_layers: 2,
        heads: 4,
        head_dim: 8,
        ff_dim: 48,
        latent_dim: 8,
        max_seq_len: 8,
        pooling: Pooling::Mean,
        pooling_scope: PoolingScope::AllLayers,
        dropout: 0.0,
    }
}

fn c1_batch() -> Batch {
    Batch {
        batch: 2,
        src_len: 5,
        tgt_len: 6,
        src_ids: vec![4, 9, 6, 0, 0, 7, 8, 15, 10, 0],
        src_mask: vec![true, true, true, false, false, true, true, true, true, false],
        tgt_in_ids: vec![1, 4, 9, 6, 0, 0, 1, 7, 8, 15, 10, 0],
        tgt_out_ids: vec![4, 9, 6, 2, 0, 0, 7, 8, 15, 10, 2, 0],
        tgt_mask: vec![
            true, true, true, true, false, false, true, true, true, true, true, false,
        ],
    }
}

fn c1_loss(model: &TransformerVae<f64>, batch: &Batch, eps: &Tensor<f64>) -> f64 {
    let (logits, latent) = model.forward(batch, Eps::Fixed(eps), &mut ForwardMode::Eval);
    let cfg = LossConfig { schedule: Schedule::Constant { beta: 1.0 }, kl_threshold: 0.0 };
    let (total, _) =
        elbo_loss(&logits, &batch.tgt_out_ids, &batch.tgt_mask, &latent, &cfg, 1.0);
    total.item()
}

// Relative error with a resolution floor: coordinates whose gradient sits
// below 1e-5 (five orders under the dominant gradient scale here) are
// compared absolutely, which is all f64 central differences can resolve on
// a loss of this magnitude.
const C1_FLOOR: f64 = 1e-5;

fn c1_rel(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(C1_FLOOR)
}

#[test]
fn criterion_01_gradient_fidelity_full_elbo_micro_model() {
    let t0 = Instant::now();
    let mut rng = Rng::seed_from_u64(20_240_001);
    let model = TransformerVae::<f64>::new(c1_model_config(), &mut rng);
    let batch = c1_batch();
    let eps = Tensor::<f64>::randn(vec![2, 8], 1.0, &mut rng);

    // analytic gradients from one backward pass
    let (logits, latent) = model.forward(&batch, Eps::Fixed(&eps), &mut ForwardMode::Eval);
    let cfg = LossConfig { schedule: Schedule::Constant { beta: 1.0 }, kl_threshold: 0.0 };
    let (total, _) = elbo_loss(&logits, &batch.tgt_out_ids, &batch.tgt_mask, &latent, &cfg, 1.0);
    total.backward();

    let fd = |probe: &mut TransformerVae<f64>,
              name: &str,
              shape: &[usize],
              base: &[f64],
              i: usize,
              h: f64| {
        let mut plus = base.to_vec();
        plus[i] += h;
        probe.set_param(name, Tensor::from_vec(shape.to_vec(), plus));
        let fp = no_grad(|| c1_loss(probe, &batch, &eps));
        let mut minus = base.to_vec();
        minus[i] -= h;
        probe.set_param(name, Tensor::from_vec(shape.to_vec(), minus));
        let fm = no_grad(|| c1_loss(probe, &batch, &eps));
        probe.set_param(name, Tensor::from_vec(shape.to_vec(), base.to_vec()));
        (fp - fm) / (2.0 * h)
    };

    let mut worst: (f64, String, usize, f64, f64) = (0.0, String::new(), 0, 0.0, 0.0);
    let mut checked = 0usize;
    let mut refined = 0usize;
    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in &names {
        let analytic = model.param(name).grad_vec();
        let base = model.param(name).data().to_vec();
        let shape = model.param(name).shape().to_vec();
        let mut probe = model.cast::<f64>();
        for i in 0..base.len() {
            let a = analytic[i];
            let mut numeric = fd(&mut probe, name, &shape, &base, i, 1e-5);
            let mut rel = c1_rel(a, numeric);
            // a ReLU kink inside the difference window inflates the estimate;
            // shrinking the window steps out of the kink, while a wrong
            // gradient stays wrong at every step size
            for h in [1e-6, 1e-7] {
                if rel < 1e-4 {
                    break;
                }
                refined += 1;
                numeric = fd(&mut probe, name, &shape, &base, i, h);
                rel = c1_rel(a, numeric);
            }
            if rel > worst.0 {
                worst = (rel, name.clone(), i, a, numeric);
            }
            checked += 1;
        }
    }
    let elapsed = t0.elapsed();
    println!(
        "criterion 1: max rel err {:.3e} over {checked} parameters ({refined} kink re-checks; worst: {}[{}] analytic {:.6e} vs numeric {:.6e}), {:.1?}",
        worst.0, worst.1, worst.2, worst.3, worst.4, elapsed
    );
    assert!(
        worst.0 < 1e-4,
        "criterion 1 FAILED: max rel err {:.3e} at {}[{}]",
        worst.0,
        worst.1,
        worst.2
    );
    assert!(elapsed.as_secs() < 120, "criterion 1 exceeded 2 min: {elapsed:?}");
}

// ── criterion 2: KL correctness against Monte Carlo ──────────────────

#[test]
fn criterion_02_gaussian_kl_vs_monte_carlo() {
    let t0 = Instant::now();
    let mut rng = Rng::seed_from_u64(20_240_002);
    let samples = 100_000usize;
    let mut aggregate_mc = 0.0;
    let mut aggregate_closed = 0.0;
    let mut floored = 0usize;
    for pair in 0..100 {
        let mu = rng.next_f64() * 2.0 - 1.0;
        let ls = rng.next_f64() * 2.0 - 1.0;
        let sigma = ls.exp();
        let mut acc = 0.0;
        let mut acc_sq = 0.0;
        for _ in 0..samples {
            let eps = rng.normal();
            let z = mu + sigma * eps;
            let log_q = -0.5 * eps * eps - ls;
            let log_p = -0.5 * z * z;
            let v = log_q - log_p;
            acc += v;
            acc_sq += v * v;
        }
        let mc = acc / samples as f64;
        let se = ((acc_sq / samples as f64 - mc * mc) / samples as f64).sqrt();
        let closed = gaussian_kl(
            &Tensor::<f64>::from_vec(vec![1, 1], vec![mu]),
            &Tensor::from_vec(vec![1, 1], vec![ls]),
        )
        .item();
        aggregate_mc += mc;
        aggregate_closed += closed;
        // 1% relative, floored at the estimator's own standard error where
        // the closed form is too близко to zero for a relative comparison
        let tol = (0.01 * closed).max(3.5 * se);
        if tol > 0.01 * closed {
            floored += 1;
        }
        assert!(
            (mc - closed).abs() <= tol,
            "pair {pair}: mc {mc:.6} vs closed {closed:.6} (mu {mu:.3}, ls {ls:.3}, se {se:.2e})"
        );
    }
    let agg_rel = (aggregate_mc - aggregate_closed).abs() / aggregate_closed;
    let elapsed = t0.elapsed();
    println!(
        "criterion 2: aggregate MC {:.4} vs closed {:.4} (rel {:.4e}), {floored}/100 pairs used the se floor, {:.1?}",
        aggregate_mc, aggregate_closed, agg_rel, elapsed
    );
    assert!(agg_rel < 0.01, "aggregate MC deviates {agg_rel:.3e} > 1%");
    assert!(elapsed.as_secs() < 30, "criterion 2 exceeded 30 s: {elapsed:?}");
}

// ── criterion 3: free-bits semantics ─────────────────────────────────

#[test]
fn criterion_03_free_bits_value_and_gradient_routing() {
    // mixed above/below-threshold vector
    let kl = Tensor::<f64>::param(vec![4], vec![0.2, 4.0, 0.5, 0.9]);
    let out = threshold_kl(&kl, 0.5);
    // 0.5 + 4.0 + 0.5 + 0.9: entries at or below the floor contribute lambda
    assert!((out.item() - 5.9).abs() < 1e-12);
    out.backward();
    assert_eq!(kl.grad_vec(), vec![0.0, 1.0, 0.0, 1.0]);

    // finite differences agree coordinate by coordinate (away from the kink)
    let probe = Tensor::<f64>::from_vec(vec![6], vec![0.1, 2.5, 0.49, 0.52, 3.0, 0.0]);
    let r = grad_check(|t| threshold_kl(t, 0.5), &probe, 1e-3);
    assert!(r.max_rel_err < 1e-8, "{r:?}");

    // all-below floor: D_z * lambda with zero gradient everywhere
    let zeros = Tensor::<f64>::param(vec![32], vec![0.0; 32]);
    let floor = threshold_kl(&zeros, 3.0);
    assert_eq!(floor.item(), 96.0);
    floor.backward();
    assert_eq!(zeros.grad_vec(), vec![0.0; 32]);
    println!("criterion 3: threshold value 5.9, gradient routes only through above-floor dims");
}

// ── criterion 4: schedule exactness ──────────────────────────────────

#[test]
fn criterion_04_schedule_exactness_at_sampled_steps() {
    let mut rng = Rng::seed_from_u64(20_240_004);
    let linear = Schedule::Linear { total_epochs: 50 };
    let cyc = Schedule::Cyclical { cycles: 4, ramp_fraction: 0.5, total_epochs: 8 };
    for _ in 0..1000 {
        let spe = 1 + rng.below(500) as u64;
        let step = rng.below(200_000) as u64;
        let b = kl_weight(linear, step, spe);
        let expect = (step as f64 / (spe as f64 * 50.0)).min(1.0);
        assert_eq!(b, expect, "linear at step {step}, spe {spe}");

        let b = kl_weight(cyc, step, spe);
        let total = spe as f64 * 8.0;
        let cycle = total / 4.0;
        let pos = (step as f64) % cycle;
        let expect = (pos / (cycle * 0.5)).min(1.0);
        assert_eq!(b, expect, "cyclical at step {step}, spe {spe}");
    }
    println!("criterion 4: linear and cyclical schedules exact at 1000 sampled steps");
}

// ── criterion 5: single-slot cross-attention constancy ───────────────

#[test]
fn criterion_05_cross_attention_constant_for_fixed_z() {
    for draw in 0..20u64 {
        let mut rng = Rng::seed_from_u64(20_240_005 + draw);
        let cfg = ModelConfig {
            vocab_size: 12 + rng.below(30),
            hidden: 32,
            enc_layers: 1,
            dec_layers: 1 + rng.below(3),
            heads: if draw % 2 == 0 { 4 } else { 2 },
            head_dim: if draw % 2 == 0 { 8 } else { 16 },
            ff_dim: 24 + rng.below(40),
            latent_dim: 1 + rng.below(16),
            max_seq_len: 12,
            pooling: Pooling::Max,
            pooling_scope: PoolingScope::FinalLayer,
            dropout: 0.0,
        };
        let v = cfg.vocab_size as u32;
        let dec_layers = cfg.dec_layers;
        let model = TransformerVae::<f64>::new(cfg.clone(), &mut rng);
        let batch = 1 + rng.below(3);
        let len = 2 + rng.below(6);
        let z = Tensor::<f64>::randn(vec![batch, cfg.latent_dim], 1.5, &mut rng);
        let memory = model.project_latent(&z);
        let mask = BoolMask::full(vec![batch, len], true);
        let ids_a: Vec<u32> = (0..batch * len).map(|_| 4 + rng.below((v - 4) as usize) as u32).collect();
        let ids_b: Vec<u32> = (0..batch * len).map(|_| 4 + rng.below((v - 4) as usize) as u32).collect();
        let (_, tr_a) = model.decode_traced(&memory, &ids_a, &mask, batch, len);
        let (_, tr_b) = model.decode_traced(&memory, &ids_b, &mask, batch, len);
        assert_eq!(tr_a.len(), dec_layers);
        let h = 32;
        for (layer, (a, b)) in tr_a.iter().zip(&tr_b).enumerate() {
            for r in 0..batch {
                let first = &a.data()[r * len * h..r * len * h + h];
                for p in 0..len {
                    let row_a = &a.data()[(r * len + p) * h..(r * len + p + 1) * h];
                    let row_b = &b.data()[(r * len + p) * h..(r * len + p + 1) * h];
                    assert_eq!(first, row_a, "draw {draw} layer {layer} position {p}: varies by position");
                    assert_eq!(row_a, row_b, "draw {draw} layer {layer} position {p}: depends on target content");
                }
            }
        }
    }
    println!("criterion 5: cross-attention output exactly constant on 20 random model/input draws");
}

// ── criteria 6-8: shared training runs on the topic corpus ───────────

struct RecipeFixture {
    collapse: MetricsReport,
    recipe05: MetricsReport,
    recipe3: MetricsReport,
    frozen_blobs_identical: bool,
    frozen_blob_count: usize,
    elapsed_secs: f64,
}

static FIXTURE: OnceLock<RecipeFixture> = OnceLock::new();

fn lab_model_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden: 64,
        enc_layers: 2,
        dec_layers: 2,
        heads: 4,
        head_dim: 16,
        ff_dim: 128,
        latent_dim: 32,
        max_seq_len: 16,
        pooling: Pooling::Max,
        pooling_scope: PoolingScope::AllLayers,
        dropout: 0.0,
    }
}

fn recipe_config(vocab: usize, kl_threshold: f64) -> TrainConfig {
    TrainConfig {
        model: lab_model_config(vocab),
        phase1: PhaseConfig { epochs: 5, batch_size: 64, ..PhaseConfig::phase1_default() },
        phase2: PhaseConfig {
            epochs: 3,
            batch_size: 64,
            kl_threshold,
            ..PhaseConfig::phase2_default()
        },
        optim: OptimConfig::default(),
        eval: EvalConfig { max_examples: 500, ..Default::default() },
        seed: 1234,
    }
}

fn final_validation(log: &tvae::trainer::PhaseLog) -> MetricsReport {
    log.validation.last().expect("validation ran").1.clone()
}

fn fixture() -> &'static RecipeFixture {
    FIXTURE.get_or_init(|| {
        let t0 = Instant::now();
        let lines = topic_corpus(5000, 200, 42);
        let vocab =
            Vocab::build(lines.iter().map(String::as_str), 400, 1, Tokenizer::Whitespace)
                .unwrap();
        let ids = encode_corpus(&lines, &vocab);
        let corpora = Corpora { train: ids[..4500].to_vec(), valid: ids[4500..].to_vec() };

        // single-phase run: beta = 1 from step 0, no mitigation. At lr 2e-3
        // the full KL pressure wins the race against the decoder's latent
        // readout on every seed tried; at 1e-3 the outcome is bistable.
        let collapse_cfg = TrainConfig {
            model: lab_model_config(vocab.len()),
            phase1: PhaseConfig { epochs: 0, ..PhaseConfig::phase1_default() },
            phase2: PhaseConfig {
                phase: 2,
                epochs: 5,
                schedule: Schedule::Constant { beta: 1.0 },
                kl_threshold: 0.0,
                denoise_p: 0.0,
                freeze: vec![],
                deterministic_latent: false,
                batch_size: 64,
                lr: 2e-3,
            },
            optim: OptimConfig::default(),
            eval: EvalConfig { max_examples: 500, ..Default::default() },
            seed: 1234,
        };
        let (_, _, collapse_log) = train_two_phase(&collapse_cfg, &corpora, None).unwrap();

        // two-phase recipe at lambda = 0.5, instrumented for criterion 8
        let cfg05 = recipe_config(vocab.len(), 0.5);
        let mut state = TrainState::new(&cfg05);
        let frozen_names: Vec<String> = state
            .model
            .params()
            .keys()
            .filter(|n| n.starts_with("decoder.") || n.as_str() == "w_proj")
            .cloned()
            .collect();
        let blobs_before: Vec<Vec<u32>> = frozen_names
            .iter()
            .map(|n| state.model.param(n).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        run_phase(&mut state, &corpora, &cfg05.phase1, &cfg05.eval, None).unwrap();
        let frozen_blobs_identical = frozen_names.iter().zip(&blobs_before).all(|(n, bits)| {
            let now: Vec<u32> =
                state.model.param(n).data().iter().map(|v| v.to_bits()).collect();
            now == *bits
        });
        state.enter_phase(2, cfg05.optim);
        let log05 = run_phase(&mut state, &corpora, &cfg05.phase2, &cfg05.eval, None).unwrap();

        // same setup at lambda = 3
        let cfg3 = recipe_config(vocab.len(), 3.0);
        let (_, _, log3) = train_two_phase(&cfg3, &corpora, None).unwrap();

        RecipeFixture {
            collapse: final_validation(&collapse_log),
            recipe05: final_validation(&log05),
            recipe3: final_validation(&log3),
            frozen_blobs_identical,
            frozen_blob_count: frozen_names.len(),
            elapsed_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_06_posterior_collapse_reproduction_directional() {
    let fx = fixture();
    let c = &fx.collapse;
    let r = &fx.recipe05;
    let c_kl = c.kl / c.example_count as f64;
    let r_kl = r.kl / r.example_count as f64;
    println!(
        "criterion 6: no-mitigation run kl/example {:.4}, au {}, mi {:.4}; two-phase recipe kl/example {:.2}, au {}, mi {:.2}; runs took {:.0} s (target < 1800 s)",
        c_kl, c.au, c.mi, r_kl, r.au, r.mi, fx.elapsed_secs
    );
    assert!(c_kl < 0.5, "collapse run kl/example {c_kl} not < 0.5");
    assert_eq!(c.au, 0, "collapse run au {} not 0", c.au);
    assert!(c.mi < 0.1, "collapse run mi {} not < 0.1", c.mi);
    assert!(r_kl > 1.0, "recipe run kl/example {r_kl} not > 1.0");
    assert!(r.au >= 1, "recipe run au {} not >= 1", r.au);
    assert!(r.mi > 0.2, "recipe run mi {} not > 0.2", r.mi);
}

#[test]
fn criterion_07_thresholding_direction() {
    let fx = fixture();
    let lo = &fx.recipe05;
    let hi = &fx.recipe3;
    // language-modeling NLL bound per token: the quantity perplexity
    // exponentiates (recon + kl over tokens)
    let lo_bound = lo.neg_elbo / lo.token_count as f64;
    let hi_bound = hi.neg_elbo / hi.token_count as f64;
    println!(
        "criterion 7: kl {:.1} (lambda 3) > {:.1} (lambda 0.5); NLL bound/token {:.3} vs {:.3}; recon NLL {:.1} vs {:.1}",
        hi.kl, lo.kl, hi_bound, lo_bound, hi.recon_nll, lo.recon_nll
    );
    assert!(
        hi.kl > lo.kl,
        "lambda 3 KL {} not strictly greater than lambda 0.5 KL {}",
        hi.kl,
        lo.kl
    );
    // the KL capacity must not buy better language modeling
    assert!(
        hi_bound >= lo_bound,
        "lambda 3 NLL bound/token {hi_bound} is better than lambda 0.5's {lo_bound}"
    );
}

#[test]
fn criterion_08_phase1_freezing_contract() {
    let fx = fixture();
    println!(
        "criterion 8: {} decoder/w_proj blobs bit-identical across phase 1: {}",
        fx.frozen_blob_count, fx.frozen_blobs_identical
    );
    assert!(fx.frozen_blob_count > 10);
    assert!(fx.frozen_blobs_identical, "frozen parameter blobs changed during phase 1");
}

// ── criterion 9: metric oracles ──────────────────────────────────────

#[test]
fn criterion_09_metric_oracles() {
    // MI: two synthetic clusters at +/-10, sigma 1, D_z = 1
    let n = 1000usize;
    let mus: Vec<Vec<f64>> =
        (0..n).map(|i| vec![if i % 2 == 0 { 10.0 } else { -10.0 }]).collect();
    let lss = vec![vec![0.0]; n];
    let mut rng = Rng::seed_from_u64(20_240_009);
    let est = mi_from_posteriors(&mus, &lss, &mut rng);
    // numerical-integration oracle: I = H(z) - H(z|x) by Simpson's rule
    let density = |z: f64| {
        let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        0.5 * phi(z - 10.0) + 0.5 * phi(z + 10.0)
    };
    let (a, b, steps) = (-24.0, 24.0, 48_000usize);
    let h = (b - a) / steps as f64;
    let mut hz = 0.0;
    for i in 0..=steps {
        let z = a + i as f64 * h;
        let m = density(z);
        let f = if m > 0.0 { -m * m.ln() } else { 0.0 };
        let w = if i == 0 || i == steps { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        hz += w * f;
    }
    hz *= h / 3.0;
    let oracle = hz - 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!(
        (est - oracle).abs() < 0.02 * oracle,
        "MI estimate {est:.4} vs oracle {oracle:.4} (target ln 2 = {:.4})",
        std::f64::consts::LN_2
    );

    // AU: matches a brute-force two-pass variance computation exactly
    let mut rng2 = Rng::seed_from_u64(20_240_010);
    let m = 300usize;
    let d = 24usize;
    let dump: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|i| rng2.normal() * (i as f64 / d as f64).powi(2)).collect())
        .collect();
    let (au, _) = au_from_means(&dump, 0.01);
    let mut brute = 0usize;
    for i in 0..d {
        let mean: f64 = dump.iter().map(|r| r[i]).sum::<f64>() / m as f64;
        let var: f64 = dump.iter().map(|r| (r[i] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        if var > 0.01 {
            brute += 1;
        }
    }
    assert_eq!(au, brute, "AU {au} != brute-force {brute}");

    // PPL of a uniform-output model equals V exactly
    let mut rng3 = Rng::seed_from_u64(20_240_011);
    let cfg = c1_model_config();
    let v = cfg.vocab_size;
    let mut model = TransformerVae::<f32>::new(cfg, &mut rng3);
    for name in ["output.w", "bottleneck.w_mu", "bottleneck.w_sigma"] {
        let shape = model.param(name).shape().to_vec();
        let n: usize = shape.iter().product();
        model.set_param(name, Tensor::param(shape, vec![0.0; n]));
    }
    let seqs: Vec<Vec<u32>> = (0..40).map(|i| vec![4 + (i % 16) as u32, 5, 6]).collect();
    let mut br = Rng::seed_from_u64(1);
    let batches = batchify(&seqs, 8, 8, 0.0, &mut br, false);
    let (neg_elbo, kl, _, tokens, _) = test_elbo(&model, &batches, &mut rng3);
    assert!(kl.abs() < 1e-9, "severed bottleneck should have zero KL, got {kl}");
    let ppl = perplexity(neg_elbo, tokens);
    assert!(
        (ppl - v as f64).abs() < 1e-5 * v as f64,
        "uniform model ppl {ppl} != vocab size {v}"
    );
    // AU on the same collapsed model is zero (cross-metric consistency)
    let (au0, _) = active_units(&model, &batches, 0.01, 2000);
    assert_eq!(au0, 0);
    println!(
        "criterion 9: MI {est:.4} vs oracle {oracle:.4}; AU {au} == brute force; uniform PPL {ppl:.6} == V {v}"
    );
}

// ── criterion 10: reproducibility and persistence ────────────────────

#[test]
fn criterion_10_checkpoint_resume_and_log_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let lines = topic_corpus(80, 40, 77);
    let vocab =
        Vocab::build(lines.iter().map(String::as_str), 400, 1, Tokenizer::Whitespace).unwrap();
    let ids = encode_corpus(&lines, &vocab);
    let corpora = Corpora { train: ids.clone(), valid: ids[..16].to_vec() };

    let model = ModelConfig {
        vocab_size: vocab.len(),
        hidden: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        head_dim: 8,
        ff_dim: 32,
        latent_dim: 8,
        max_seq_len: 12,
        pooling: Pooling::Max,
        pooling_scope: PoolingScope::AllLayers,
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        model,
        phase1: PhaseConfig { epochs: 1, batch_size: 8, ..PhaseConfig::phase1_default() },
        phase2: PhaseConfig { epochs: 2, batch_size: 8, ..PhaseConfig::phase2_default() },
        optim: OptimConfig::default(),
        eval: EvalConfig { max_examples: 32, ..Default::default() },
        seed: 4242,
    };

    // save after one phase-2 epoch, then 10 more steps resumed vs uninterrupted
    let mut full = TrainState::new(&cfg);
    full.enter_phase(2, cfg.optim);
    run_phase(&mut full, &corpora, &cfg.phase2, &cfg.eval, None).unwrap(); // 2 epochs = 20 steps

    let mut half = TrainState::new(&cfg);
    half.enter_phase(2, cfg.optim);
    let mut one = cfg.phase2.clone();
    one.epochs = 1;
    run_phase(&mut half, &corpora, &one, &cfg.eval, None).unwrap();
    let ck = tmp.path().join("mid.tvae");
    checkpoint::save(&half, &ck).unwrap();
    let mut resumed = checkpoint::load(&ck).unwrap();
    assert_eq!(resumed.step_in_phase, 10);
    run_phase(&mut resumed, &corpora, &cfg.phase2, &cfg.eval, None).unwrap();

    let bits = |s: &TrainState| -> Vec<u32> {
        s.model.params().values().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&full), bits(&resumed), "resumed run diverged from uninterrupted run");

    // identical seeds produce identical TrainLog CSVs (and metrics CSVs)
    let dir_a = RunDir::create(tmp.path().join("a"), "a").unwrap();
    let dir_b = RunDir::create(tmp.path().join("b"), "a").unwrap();
    train_two_phase(&cfg, &corpora, Some(&dir_a)).unwrap();
    train_two_phase(&cfg, &corpora, Some(&dir_b)).unwrap();
    let log_a = std::fs::read(dir_a.train_log_path()).unwrap();
    let log_b = std::fs::read(dir_b.train_log_path()).unwrap();
    assert!(!log_a.is_empty());
    assert_eq!(log_a, log_b, "train logs differ between identically seeded runs");
    let met_a = std::fs::read(dir_a.metrics_path()).unwrap();
    let met_b = std::fs::read(dir_b.metrics_path()).unwrap();
    assert_eq!(met_a, met_b, "metrics CSVs differ between identically seeded runs");
    println!("criterion 10: resume bit-exact over 10 steps; identical seeds give identical CSVs");
}

// ── supporting check: frozen phase-1 decoder keeps stack outputs fixed ─

#[test]
fn phase1_freeze_keeps_decoder_stack_function_fixed() {
    // cheap companion to criterion 8 on a micro model
    let lines = topic_corpus(60, 30, 3);
    let vocab =
        Vocab::build(lines.iter().map(String::as_str), 400, 1, Tokenizer::Whitespace).unwrap();
    let ids = encode_corpus(&lines, &vocab);
    let corpora = Corpora { train: ids, valid: vec![] };
    let cfg = TrainConfig {
        model: ModelConfig {
            vocab_size: vocab.len(),
            hidden: 16,
            enc_layers: 1,
            dec_layers: 2,
            heads: 2,
            head_dim: 8,
            ff_dim: 24,
            latent_dim: 6,
            max_seq_len: 12,
            pooling: Pooling::Mean,
            pooling_scope: PoolingScope::FinalLayer,
            dropout: 0.0,
        },
        phase1: PhaseConfig { epochs: 2, batch_size: 8, ..PhaseConfig::phase1_default() },
        phase2: PhaseConfig { epochs: 1, batch_size: 8, ..PhaseConfig::phase2_default() },
        optim: OptimConfig::default(),
        eval: EvalConfig::default(),
        seed: 9,
    };
    let mut state = TrainState::new(&cfg);
    let frozen = freeze(&state.model, &cfg.phase1.freeze).unwrap();
    let expected: BTreeSet<String> = state
        .model
        .params()
        .keys()
        .filter(|n| n.starts_with("decoder.") || n.as_str() == "w_proj")
        .cloned()
        .collect();
    assert_eq!(frozen, expected);

    let mut zr = Rng::seed_from_u64(5);
    let z = Tensor::<f32>::randn(vec![1, 6], 1.0, &mut zr);
    let ids_probe = vec![1u32, 5, 6, 7, 8];
    let mask = BoolMask::full(vec![1, 5], true);
    let probe = |m: &TransformerVae<f32>| {
        m.decode_states(&m.project_latent(&z), &ids_probe, &mask, 1, 5).data().to_vec()
    };
    let before = probe(&state.model);
    run_phase(&mut state, &corpora, &cfg.phase1, &cfg.eval, None).unwrap();
    assert_eq!(before, probe(&state.model));
}
