//! Miniature encoder–decoder Transformer with a variational bottleneck.
//!
//! Architecture: pooled encoder hidden states feed two bias-free projections
//! producing `(mu, log_sigma)`; a latent `z` is sampled with the
//! reparameterization trick; `z` is projected to one memory slot per decoder
//! layer, and that slot is the sole key and value of the layer's
//! cross-attention. Softmax over a single key always yields weight 1, so the
//! cross-attention sublayer output is constant across decoder positions for a
//! fixed `z`. When the decoder ignores `z`, that constant is the model's
//! only channel from the encoder, which is what makes posterior collapse
//! observable here.
//!
//! Layers are pre-norm with RMS layer norm (no mean-centering, no bias) and
//! ReLU feed-forwards. Positions use learned absolute embeddings. Encoder and
//! decoder have separate embedding tables (no weight tying), so freezing
//! `decoder.*` pins the entire decoding path.

use std::collections::BTreeMap;

use crate::data::{Batch, END, START};
use crate::diffcore::{no_grad, BoolMask, Element, Rng, Tensor};

/// Encoder pooling reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

/// Which hidden states the pooling sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingScope {
    /// Positions of the final encoder layer only.
    FinalLayer,
    /// Positions of every layer (embedding output included), concatenated
    /// along the position axis.
    AllLayers,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub latent_dim: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
    pub pooling_scope: PoolingScope,
    pub dropout: f64,
}

impl ModelConfig {
    /// Small defaults; `latent_dim` 32 matches the reference setup.
    pub fn small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            hidden: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            head_dim: 16,
            ff_dim: 128,
            latent_dim: 32,
            max_seq_len: 32,
            pooling: Pooling::Max,
            pooling_scope: PoolingScope::AllLayers,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let mut problems = Vec::new();
        if self.hidden != self.heads * self.head_dim {
            problems.push(format!(
                "hidden {} must equal heads {} * head_dim {}",
                self.hidden, self.heads, self.head_dim
            ));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("ff_dim", self.ff_dim),
            ("latent_dim", self.latent_dim),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(problems.join("; ")))
        }
    }

    /// Closed-form parameter count; guards silent shape drift.
    pub fn param_count(&self) -> usize {
        let (v, h, f, d) = (self.vocab_size, self.hidden, self.ff_dim, self.latent_dim);
        let emb = v * h + self.max_seq_len * h;
        let enc_layer = 4 * h * h + 2 * h * f + 2 * h;
        let dec_layer = 4 * h * h + 2 * h * h + 2 * h * f + 3 * h;
        let encoder = emb + self.enc_layers * enc_layer + h;
        let decoder = emb + self.dec_layers * dec_layer + h;
        let bottleneck = 2 * h * d;
        let proj = d * self.dec_layers * h;
        let head = h * v;
        encoder + decoder + bottleneck + proj + head
    }
}

/// The symbols of one reparameterized draw: `z = mu + exp(log_sigma) * eps`.
#[derive(Debug, Clone)]
pub struct LatentState<E: Element> {
    pub mu: Tensor<E>,
    pub log_sigma: Tensor<E>,
    pub epsilon: Tensor<E>,
    pub z: Tensor<E>,
}

/// Where the reparameterization noise comes from.
pub enum Eps<'a, E: Element> {
    /// `eps = 0`: deterministic `z = mu`.
    Zero,
    /// Draw i.i.d. standard normal noise.
    Sample(&'a mut Rng),
    /// Inject a fixed tensor (tests, gradient checks).
    Fixed(&'a Tensor<E>),
}

/// Forward-pass mode: evaluation (no dropout) or training.
pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut Rng },
}

/// Decoding strategy for [`TransformerVae::generate`].
#[derive(Debug, Clone, Copy)]
pub enum Decoding {
    Greedy,
    /// Temperature sampling; converges to greedy as tau -> 0.
    Temperature(f64),
}

const INIT_STD: f64 = 0.02;
const MASKED_NEG: f64 = -1.0e30;

/// The model: a named parameter map plus its config.
#[derive(Debug)]
pub struct TransformerVae<E: Element> {
    cfg: ModelConfig,
    params: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> TransformerVae<E> {
    /// Fresh model with N(0, 0.02^2) projections and unit norm gains.
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Self {
        cfg.validate().expect("invalid model config");
        let (v, h, f, d) = (cfg.vocab_size, cfg.hidden, cfg.ff_dim, cfg.latent_dim);
        let m = cfg.max_seq_len;
        let mut params = BTreeMap::new();
        let w = |params: &mut BTreeMap<String, Tensor<E>>, name: String, shape: Vec<usize>, rng: &mut Rng| {
            let t = Tensor::<E>::randn(shape, INIT_STD, rng);
            params.insert(name, Tensor::param(t.shape().to_vec(), t.data().to_vec()));
        };
        let ones = |params: &mut BTreeMap<String, Tensor<E>>, name: String, n: usize| {
            params.insert(name, Tensor::param(vec![n], vec![E::ONE; n]));
        };

        for side in ["encoder", "decoder"] {
            w(&mut params, format!("{side}.embedding.token"), vec![v, h], rng);
            w(&mut params, format!("{side}.embedding.pos"), vec![m, h], rng);
        }
        for l in 0..cfg.enc_layers {
            for q in ["w_q", "w_k", "w_v", "w_o"] {
                w(&mut params, format!("encoder.layer{l}.attn.{q}"), vec![h, h], rng);
            }
            ones(&mut params, format!("encoder.layer{l}.attn_norm.gain"), h);
            w(&mut params, format!("encoder.layer{l}.ffn.w1"), vec![h, f], rng);
            w(&mut params, format!("encoder.layer{l}.ffn.w2"), vec![f, h], rng);
            ones(&mut params, format!("encoder.layer{l}.ffn_norm.gain"), h);
        }
        ones(&mut params, "encoder.final_norm.gain".into(), h);
        w(&mut params, "bottleneck.w_mu".into(), vec![h, d], rng);
        w(&mut params, "bottleneck.w_sigma".into(), vec![h, d], rng);
        w(&mut params, "w_proj".into(), vec![d, cfg.dec_layers * h], rng);
        for l in 0..cfg.dec_layers {
            for q in ["w_q", "w_k", "w_v", "w_o"] {
                w(&mut params, format!("decoder.layer{l}.self_attn.{q}"), vec![h, h], rng);
            }
            ones(&mut params, format!("decoder.layer{l}.self_attn_norm.gain"), h);
            w(&mut params, format!("decoder.layer{l}.cross_attn.w_q"), vec![h, h], rng);
            w(&mut params, format!("decoder.layer{l}.cross_attn.w_o"), vec![h, h], rng);
            ones(&mut params, format!("decoder.layer{l}.cross_attn_norm.gain"), h);
            w(&mut params, format!("decoder.layer{l}.ffn.w1"), vec![h, f], rng);
            w(&mut params, format!("decoder.layer{l}.ffn.w2"), vec![f, h], rng);
            ones(&mut params, format!("decoder.layer{l}.ffn_norm.gain"), h);
        }
        ones(&mut params, "decoder.final_norm.gain".into(), h);
        w(&mut params, "output.w".into(), vec![h, v], rng);

        TransformerVae { cfg, params }
    }

    /// Rebuild from a parameter map (checkpoint load). Shapes are validated
    /// against a freshly initialized layout.
    pub fn from_params(
        cfg: ModelConfig,
        params: BTreeMap<String, Tensor<E>>,
    ) -> crate::Result<Self> {
        cfg.validate()
            .map_err(|e| crate::Error::Checkpoint(format!("stored config invalid: {e}")))?;
        let mut rng = Rng::seed_from_u64(0);
        let reference = TransformerVae::<E>::new(cfg.clone(), &mut rng);
        for (name, t) in &reference.params {
            let got = params.get(name).ok_or_else(|| {
                crate::Error::Checkpoint(format!("missing parameter `{name}`"))
            })?;
            if got.shape() != t.shape() {
                return Err(crate::Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config wants {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        for name in params.keys() {
            if !reference.params.contains_key(name) {
                return Err(crate::Error::Checkpoint(format!("unexpected parameter `{name}`")));
            }
        }
        Ok(TransformerVae { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<E>> {
        &self.params
    }

    /// Replace a parameter tensor (optimizer steps, test constructions).
    /// The replacement must keep the original shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<E>) {
        let old = self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        assert_eq!(
            old.shape(),
            value.shape(),
            "parameter `{name}` shape change {:?} -> {:?}",
            old.shape(),
            value.shape()
        );
        self.params.insert(name.to_string(), value);
    }

    pub fn param(&self, name: &str) -> &Tensor<E> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Same weights at a different element width.
    pub fn cast<F: Element>(&self) -> TransformerVae<F> {
        let params = self.params.iter().map(|(k, t)| (k.clone(), t.cast::<F>())).collect();
        TransformerVae { cfg: self.cfg.clone(), params }
    }

    pub fn actual_param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    // ── building blocks ──────────────────────────────────────────────

    fn embed(&self, side: &str, ids: &[u32], batch: usize, len: usize) -> Tensor<E> {
        assert!(
            len <= self.cfg.max_seq_len,
            "sequence length {len} exceeds max_seq_len {}",
            self.cfg.max_seq_len
        );
        let tok = Tensor::embedding_lookup(
            self.param(&format!("{side}.embedding.token")),
            ids,
            &[batch, len],
        );
        let pos = self.param(&format!("{side}.embedding.pos")).narrow(0, 0, len);
        tok.add(&pos)
    }

    fn multi_head(&self, x: &Tensor<E>) -> Tensor<E> {
        // [B, L, H] -> [B, A, L, S]
        let (b, l) = (x.shape()[0], x.shape()[1]);
        x.reshape(vec![b, l, self.cfg.heads, self.cfg.head_dim]).swap_axes(1, 2)
    }

    fn merge_heads(&self, x: &Tensor<E>) -> Tensor<E> {
        // [B, A, L, S] -> [B, L, H]
        let (b, l) = (x.shape()[0], x.shape()[2]);
        x.swap_axes(1, 2).reshape(vec![b, l, self.cfg.hidden])
    }

    fn attention(
        &self,
        prefix: &str,
        x: &Tensor<E>,
        kv: &Tensor<E>,
        mask: &BoolMask,
    ) -> Tensor<E> {
        let scale = E::from_f64(1.0 / (self.cfg.head_dim as f64).sqrt());
        let q = self.multi_head(&x.matmul(self.param(&format!("{prefix}.w_q"))));
        let k = self.multi_head(&kv.matmul(self.param(&format!("{prefix}.w_k"))));
        let v = self.multi_head(&kv.matmul(self.param(&format!("{prefix}.w_v"))));
        let scores = q.matmul(&k.swap_axes(2, 3)).mul_scalar(scale);
        let attn = scores.masked_softmax(mask);
        let ctx = self.merge_heads(&attn.matmul(&v));
        ctx.matmul(self.param(&format!("{prefix}.w_o")))
    }

    /// Cross-attention whose key and value are one projected memory slot.
    /// Returns the sublayer output (post `w_o`, pre-residual).
    fn cross_attention(&self, layer: usize, x: &Tensor<E>, memory: &Tensor<E>) -> Tensor<E> {
        let prefix = format!("decoder.layer{layer}.cross_attn");
        let scale = E::from_f64(1.0 / (self.cfg.head_dim as f64).sqrt());
        let q = self.multi_head(&x.matmul(self.param(&format!("{prefix}.w_q"))));
        // memory [B, 1, A, S] -> K = V = [B, A, 1, S]
        let kv = memory.swap_axes(1, 2);
        let scores = q.matmul(&kv.swap_axes(2, 3)).mul_scalar(scale);
        // softmax over the single memory slot: weight is exactly 1
        let mask = BoolMask::full(vec![1], true);
        let attn = scores.masked_softmax(&mask);
        let ctx = self.merge_heads(&attn.matmul(&kv));
        ctx.matmul(self.param(&format!("{prefix}.w_o")))
    }

    fn ffn(&self, prefix: &str, x: &Tensor<E>) -> Tensor<E> {
        x.matmul(self.param(&format!("{prefix}.w1")))
            .relu()
            .matmul(self.param(&format!("{prefix}.w2")))
    }

    fn norm(&self, name: &str, x: &Tensor<E>) -> Tensor<E> {
        x.layer_norm(self.param(name), 1e-6)
    }

    fn maybe_dropout(&self, x: Tensor<E>, mode: &mut ForwardMode) -> Tensor<E> {
        match mode {
            ForwardMode::Train { rng } if self.cfg.dropout > 0.0 => {
                x.dropout(self.cfg.dropout, rng)
            }
            _ => x,
        }
    }

    // ── operations ───────────────────────────────────────────────────

    /// Encoder pass. Returns `enc_layers + 1` hidden states (the embedding
    /// output first), each `[batch, len, hidden]`; the last one carries the
    /// final norm.
    pub fn encode(
        &self,
        src_ids: &[u32],
        src_mask: &BoolMask,
        batch: usize,
        len: usize,
        mode: &mut ForwardMode,
    ) -> Vec<Tensor<E>> {
        assert_eq!(src_mask.shape(), &[batch, len], "src mask shape");
        let mut x = self.embed("encoder", src_ids, batch, len);
        x = self.maybe_dropout(x, mode);
        let mut states = vec![x.clone()];
        // keys at padding positions are invisible to every query
        let attn_mask = src_mask.unsqueeze(1).unsqueeze(1); // [B, 1, 1, L]
        for l in 0..self.cfg.enc_layers {
            let pre = format!("encoder.layer{l}");
            let a = self.attention(
                &format!("{pre}.attn"),
                &self.norm(&format!("{pre}.attn_norm.gain"), &x),
                &self.norm(&format!("{pre}.attn_norm.gain"), &x),
                &attn_mask,
            );
            x = x.add(&self.maybe_dropout(a, mode));
            let f = self.ffn(&format!("{pre}.ffn"), &self.norm(&format!("{pre}.ffn_norm.gain"), &x));
            x = x.add(&self.maybe_dropout(f, mode));
            states.push(x.clone());
        }
        let last = states.pop().expect("at least the embedding state");
        states.push(self.norm("encoder.final_norm.gain", &last));
        states
    }

    /// Mean- or max-pool hidden states over unmasked positions into
    /// `h_pooled` of shape `[batch, hidden]`, per the configured scope.
    pub fn pool(&self, states: &[Tensor<E>], src_mask: &BoolMask) -> Tensor<E> {
        let (b, l, h) = (
            states[0].shape()[0],
            states[0].shape()[1],
            states[0].shape()[2],
        );
        let (stacked, reps) = match self.cfg.pooling_scope {
            PoolingScope::FinalLayer => (states.last().expect("states").clone(), 1usize),
            PoolingScope::AllLayers => (Tensor::concat(states, 1), states.len()),
        };
        let positions = l * reps;

        // per-example unmasked counts; every example needs at least one
        let mask_data = src_mask.data();
        let mut counts = vec![0usize; b];
        for r in 0..b {
            counts[r] = mask_data[r * l..(r + 1) * l].iter().filter(|&&m| m).count();
            assert!(counts[r] > 0, "pool: example {r} is fully masked");
        }

        match self.cfg.pooling {
            Pooling::Mean => {
                // zero out padding, sum over positions, divide by counts
                let mut keep = vec![E::ZERO; b * positions * h];
                for r in 0..b {
                    for rep in 0..reps {
                        for j in 0..l {
                            if mask_data[r * l + j] {
                                let base = (r * positions + rep * l + j) * h;
                                keep[base..base + h].iter_mut().for_each(|v| *v = E::ONE);
                            }
                        }
                    }
                }
                let keep = Tensor::from_vec(vec![b, positions, h], keep);
                let summed = stacked.mul(&keep).sum_axis(1); // [B, H]
                let mut inv = vec![E::ZERO; b * h];
                for r in 0..b {
                    let v = E::from_f64(1.0 / (counts[r] * reps) as f64);
                    inv[r * h..(r + 1) * h].iter_mut().for_each(|x| *x = v);
                }
                summed.mul(&Tensor::from_vec(vec![b, h], inv))
            }
            Pooling::Max => {
                // push padding far below any real activation before the max
                let mut penalty = vec![E::ZERO; b * positions * h];
                for r in 0..b {
                    for rep in 0..reps {
                        for j in 0..l {
                            if !mask_data[r * l + j] {
                                let base = (r * positions + rep * l + j) * h;
                                penalty[base..base + h]
                                    .iter_mut()
                                    .for_each(|v| *v = E::from_f64(MASKED_NEG));
                            }
                        }
                    }
                }
                let penalty = Tensor::from_vec(vec![b, positions, h], penalty);
                stacked.add(&penalty).max_axis(1)
            }
        }
    }

    /// Bias-free bottleneck projections: `mu = h W_mu`, `log_sigma = h W_sigma`.
    pub fn bottleneck(&self, h_pooled: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
        (
            h_pooled.matmul(self.param("bottleneck.w_mu")),
            h_pooled.matmul(self.param("bottleneck.w_sigma")),
        )
    }

    /// `z = mu + exp(log_sigma) * eps`. Gradients flow to `mu` and
    /// `log_sigma`; `eps` is a constant.
    pub fn reparameterize(
        &self,
        mu: &Tensor<E>,
        log_sigma: &Tensor<E>,
        eps: Eps<'_, E>,
    ) -> LatentState<E> {
        assert_eq!(mu.shape(), log_sigma.shape(), "mu/log_sigma shape mismatch");
        let epsilon = match eps {
            Eps::Zero => Tensor::zeros(mu.shape().to_vec()),
            Eps::Sample(rng) => Tensor::randn(mu.shape().to_vec(), 1.0, rng),
            Eps::Fixed(t) => {
                assert_eq!(t.shape(), mu.shape(), "fixed epsilon shape mismatch");
                t.detach()
            }
        };
        let z = mu.add(&log_sigma.exp().mul(&epsilon));
        LatentState { mu: mu.clone(), log_sigma: log_sigma.clone(), epsilon, z }
    }

    /// Project `z` to one single-slot cross-attention memory per decoder
    /// layer, each `[batch, 1, heads, head_dim]`. The same tensor serves as
    /// key and value.
    pub fn project_latent(&self, z: &Tensor<E>) -> Vec<Tensor<E>> {
        let b = z.shape()[0];
        let h = self.cfg.hidden;
        let all = z.matmul(self.param("w_proj")); // [B, dec_layers * H]
        (0..self.cfg.dec_layers)
            .map(|l| {
                all.narrow(1, l * h, h)
                    .reshape(vec![b, 1, self.cfg.heads, self.cfg.head_dim])
            })
            .collect()
    }

    /// Decoder pass over shifted-right targets: causal self-attention plus
    /// single-slot cross-attention onto `memory`. Returns logits
    /// `[batch, len, vocab]`.
    pub fn decode(
        &self,
        memory: &[Tensor<E>],
        tgt_in_ids: &[u32],
        tgt_mask: &BoolMask,
        batch: usize,
        len: usize,
        mode: &mut ForwardMode,
    ) -> Tensor<E> {
        self.decode_parts(memory, tgt_in_ids, tgt_mask, batch, len, mode, None).0
    }

    /// Final decoder-stack hidden states (post final norm, pre output head),
    /// shape `[batch, len, hidden]`. With `decoder.*` and `w_proj` frozen,
    /// these are invariant under training for a fixed `(z, target)` pair.
    pub fn decode_states(
        &self,
        memory: &[Tensor<E>],
        tgt_in_ids: &[u32],
        tgt_mask: &BoolMask,
        batch: usize,
        len: usize,
    ) -> Tensor<E> {
        self.decode_parts(memory, tgt_in_ids, tgt_mask, batch, len, &mut ForwardMode::Eval, None)
            .1
    }

    /// Like [`TransformerVae::decode`], additionally exposing each layer's
    /// cross-attention sublayer output (post `w_o`, pre-residual).
    pub fn decode_traced(
        &self,
        memory: &[Tensor<E>],
        tgt_in_ids: &[u32],
        tgt_mask: &BoolMask,
        batch: usize,
        len: usize,
    ) -> (Tensor<E>, Vec<Tensor<E>>) {
        let mut traces = Vec::new();
        let (logits, _) = self.decode_parts(
            memory,
            tgt_in_ids,
            tgt_mask,
            batch,
            len,
            &mut ForwardMode::Eval,
            Some(&mut traces),
        );
        (logits, traces)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_parts(
        &self,
        memory: &[Tensor<E>],
        tgt_in_ids: &[u32],
        tgt_mask: &BoolMask,
        batch: usize,
        len: usize,
        mode: &mut ForwardMode,
        mut traces: Option<&mut Vec<Tensor<E>>>,
    ) -> (Tensor<E>, Tensor<E>) {
        assert_eq!(
            memory.len(),
            self.cfg.dec_layers,
            "memory slots {} != decoder layers {}",
            memory.len(),
            self.cfg.dec_layers
        );
        let mut x = self.embed("decoder", tgt_in_ids, batch, len);
        x = self.maybe_dropout(x, mode);
        // causal AND key-padding: query t sees non-pad keys at positions <= t
        let attn_mask = tgt_mask.unsqueeze(1).unsqueeze(1).and(&BoolMask::causal(len));
        for l in 0..self.cfg.dec_layers {
            let pre = format!("decoder.layer{l}");
            let normed = self.norm(&format!("{pre}.self_attn_norm.gain"), &x);
            let a = self.attention(&format!("{pre}.self_attn"), &normed, &normed, &attn_mask);
            x = x.add(&self.maybe_dropout(a, mode));
            let c = self.cross_attention(
                l,
                &self.norm(&format!("{pre}.cross_attn_norm.gain"), &x),
                &memory[l],
            );
            if let Some(tr) = traces.as_deref_mut() {
                tr.push(c.clone());
            }
            x = x.add(&self.maybe_dropout(c, mode));
            let f = self.ffn(&format!("{pre}.ffn"), &self.norm(&format!("{pre}.ffn_norm.gain"), &x));
            x = x.add(&self.maybe_dropout(f, mode));
        }
        let x = self.norm("decoder.final_norm.gain", &x);
        (x.matmul(self.param("output.w")), x)
    }

    /// Full composition: encode -> pool -> bottleneck -> reparameterize ->
    /// project -> decode.
    pub fn forward(
        &self,
        batch: &Batch,
        eps: Eps<'_, E>,
        mode: &mut ForwardMode,
    ) -> (Tensor<E>, LatentState<E>) {
        let src_mask = BoolMask::new(vec![batch.batch, batch.src_len], batch.src_mask.clone());
        let states = self.encode(&batch.src_ids, &src_mask, batch.batch, batch.src_len, mode);
        let pooled = self.pool(&states, &src_mask);
        let (mu, log_sigma) = self.bottleneck(&pooled);
        let latent = self.reparameterize(&mu, &log_sigma, eps);
        let memory = self.project_latent(&latent.z);
        let tgt_mask = BoolMask::new(vec![batch.batch, batch.tgt_len], batch.tgt_mask.clone());
        let logits = self.decode(
            &memory,
            &batch.tgt_in_ids,
            &tgt_mask,
            batch.batch,
            batch.tgt_len,
            mode,
        );
        (logits, latent)
    }

    /// Encode a batch to `(mu, log_sigma)` without decoding.
    pub fn encode_to_posterior(&self, batch: &Batch) -> (Tensor<E>, Tensor<E>) {
        let src_mask = BoolMask::new(vec![batch.batch, batch.src_len], batch.src_mask.clone());
        let states = self.encode(
            &batch.src_ids,
            &src_mask,
            batch.batch,
            batch.src_len,
            &mut ForwardMode::Eval,
        );
        self.bottleneck(&self.pool(&states, &src_mask))
    }

    /// Autoregressive decoding from latent vectors `z` of shape `[n, D_z]`.
    /// Emits token ids without the start token, stopping at the end token or
    /// `max_len`.
    pub fn generate(
        &self,
        z: &Tensor<E>,
        max_len: usize,
        strategy: Decoding,
        rng: &mut Rng,
    ) -> Vec<Vec<u32>> {
        assert_eq!(z.shape().len(), 2, "z must be [n, latent_dim]");
        let n = z.shape()[0];
        let max_len = max_len.min(self.cfg.max_seq_len);
        no_grad(|| {
            let mut out = Vec::with_capacity(n);
            for r in 0..n {
                let zr = z.narrow(0, r, 1);
                let memory = self.project_latent(&zr);
                let mut seq: Vec<u32> = vec![START];
                loop {
                    let len = seq.len();
                    let mask = BoolMask::full(vec![1, len], true);
                    let logits = self.decode(&memory, &seq, &mask, 1, len, &mut ForwardMode::Eval);
                    let v = self.cfg.vocab_size;
                    let last = &logits.data()[(len - 1) * v..len * v];
                    let next = match strategy {
                        Decoding::Greedy => argmax(last),
                        Decoding::Temperature(tau) if tau < 1e-9 => argmax(last),
                        Decoding::Temperature(tau) => sample_temperature(last, tau, rng),
                    } as u32;
                    if next == END || seq.len() >= max_len {
                        break;
                    }
                    seq.push(next);
                    if seq.len() >= max_len {
                        break;
                    }
                }
                out.push(seq[1..].to_vec());
            }
            out
        })
    }

    /// Greedy decodings along the linear path between two latent vectors
    /// (shape `[1, D_z]` each), endpoints included.
    pub fn interpolate(
        &self,
        z1: &Tensor<E>,
        z2: &Tensor<E>,
        steps: usize,
        max_len: usize,
    ) -> Vec<Vec<u32>> {
        assert!(steps >= 2, "interpolation needs at least 2 steps");
        assert_eq!(z1.shape(), z2.shape(), "latent shape mismatch");
        let mut rng = Rng::seed_from_u64(0); // unused by greedy decoding
        (0..steps)
            .map(|i| {
                let t = i as f64 / (steps - 1) as f64;
                let z = z1
                    .mul_scalar(E::from_f64(1.0 - t))
                    .add(&z2.mul_scalar(E::from_f64(t)));
                self.generate(&z, max_len, Decoding::Greedy, &mut rng)
                    .remove(0)
            })
            .collect()
    }
}

fn argmax<E: Element>(xs: &[E]) -> usize {
    let mut best = 0usize;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_temperature<E: Element>(logits: &[E], tau: f64, rng: &mut Rng) -> usize {
    let maxv = logits[argmax(logits)].to_f64();
    let weights: Vec<f64> = logits.iter().map(|v| ((v.to_f64() - maxv) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
