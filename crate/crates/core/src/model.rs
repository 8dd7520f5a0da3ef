//! Tiny pre-norm decoder-only transformer.
//!
//! One instance serves as the trainable policy, a frozen copy as the
//! reference. [`TransformerLM::trace`] returns everything the losses and
//! masks consume: response-aligned log-distributions, realized-token
//! log-probabilities, per-layer hidden states and activation taps.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsepo_tensor::{no_grad, Tensor};

use crate::archive::Archive;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_len: 64,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ffn_mult: 4,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Model(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Model(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Activation families captured for the activation-based mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TapFamily {
    /// Attention block output (after the output projection).
    Attention,
    /// Feed-forward block output.
    FeedForward,
    /// Residual stream after the block.
    Residual,
}

impl TapFamily {
    pub const ALL: [TapFamily; 3] = [TapFamily::Attention, TapFamily::FeedForward, TapFamily::Residual];

    pub fn name(self) -> &'static str {
        match self {
            TapFamily::Attention => "attn",
            TapFamily::FeedForward => "ffn",
            TapFamily::Residual => "resid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown activation site family '{s}' (attn|ffn|resid)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TapSite {
    pub layer: usize,
    pub family: TapFamily,
}

impl std::fmt::Display for TapSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.family.name(), self.layer)
    }
}

#[derive(Debug, Clone)]
pub struct ActivationTap {
    pub site: TapSite,
    /// `[T, d]`, response-aligned.
    pub values: Tensor,
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct TransformerLM {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<Layer>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    frozen: bool,
}

/// Output of one forward pass over `prompt ++ response`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub response_start: usize,
    /// `[N, V]` logits for every position.
    pub logits: Tensor,
    /// `[T, V]`: row `t` is the next-token log-distribution that predicts
    /// response token `t`.
    pub vocab_log_dist: Tensor,
    /// `[T]`: `vocab_log_dist[t][y_t]`.
    pub token_log_probs: Tensor,
    /// Per layer, `[T, d]` residual stream at the response positions.
    pub hidden_states: Vec<Tensor>,
    pub taps: Vec<ActivationTap>,
}

impl ForwardTrace {
    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.response_start
    }

    pub fn response_tokens(&self) -> &[usize] {
        &self.tokens[self.response_start..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    /// Zero-temperature limit: always take the most likely token.
    pub argmax: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_len: 17,
            argmax: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    /// Stopped at `max_len` or the context limit without emitting eos.
    pub truncated: bool,
}

fn param(data: Vec<f64>, shape: &[usize], trainable: bool) -> Tensor {
    if trainable {
        Tensor::param(data, shape).expect("param shape")
    } else {
        Tensor::new(data, shape).expect("param shape")
    }
}

/// Logits, per-layer residual streams and activation taps of one pass.
type RunOutput = (Tensor, Vec<Tensor>, Vec<(TapSite, Tensor)>);

impl TransformerLM {
    /// Fresh trainable model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_normal = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut gauss = |shape: &[usize], dist: &Normal<f64>| {
            let n = shape.iter().product();
            param((0..n).map(|_| dist.sample(&mut rng)).collect(), shape, true)
        };
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let ones = |n: usize| param(vec![1.0; n], &[n], true);
        let zeros = |n: usize| param(vec![0.0; n], &[n], true);
        let tok_emb = gauss(&[config.vocab_size, d], &normal);
        let pos_emb = gauss(&[config.context_len, d], &normal);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                wq: gauss(&[d, d], &normal),
                wk: gauss(&[d, d], &normal),
                wv: gauss(&[d, d], &normal),
                wo: gauss(&[d, d], &resid_normal),
                bo: zeros(d),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w1: gauss(&[d, f], &normal),
                b1: zeros(f),
                w2: gauss(&[f, d], &resid_normal),
                b2: zeros(d),
            })
            .collect();
        let w_out = gauss(&[d, config.vocab_size], &normal);
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: ones(d),
            lnf_b: zeros(d),
            w_out,
            b_out: zeros(config.vocab_size),
            config,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Parameters in a fixed canonical order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t.clone()));
            }
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g.clone()),
            ("lnf_b".to_string(), self.lnf_b.clone()),
            ("w_out".to_string(), self.w_out.clone()),
            ("b_out".to_string(), self.b_out.clone()),
        ]);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    fn map_params(&self, f: impl Fn(&Tensor) -> Tensor, frozen: bool) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer {
                ln1_g: f(&l.ln1_g),
                ln1_b: f(&l.ln1_b),
                wq: f(&l.wq),
                wk: f(&l.wk),
                wv: f(&l.wv),
                wo: f(&l.wo),
                bo: f(&l.bo),
                ln2_g: f(&l.ln2_g),
                ln2_b: f(&l.ln2_b),
                w1: f(&l.w1),
                b1: f(&l.b1),
                w2: f(&l.w2),
                b2: f(&l.b2),
            })
            .collect();
        Self {
            config: self.config.clone(),
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            layers,
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
            w_out: f(&self.w_out),
            b_out: f(&self.b_out),
            frozen,
        }
    }

    /// Independent copy whose parameters never receive gradients.
    pub fn frozen_copy(&self) -> Self {
        self.map_params(|t| t.deep_copy(false), true)
    }

    /// Independent trainable copy.
    pub fn trainable_copy(&self) -> Self {
        self.map_params(|t| t.deep_copy(true), false)
    }

    /// Order-sensitive hash of every parameter's bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named_params() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data().iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Model("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_len {
            return Err(Error::Model(format!(
                "sequence length {} exceeds context_len {}",
                tokens.len(),
                self.config.context_len
            )));
        }
        if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &id)| id >= self.config.vocab_size) {
            return Err(Error::Model(format!(
                "token id {id} at position {pos} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full causal pass. Returns `[N,V]` logits, per-layer `[N,d]` residual
    /// streams and, when requested, per-layer attention/FFN outputs.
    fn run(&self, tokens: &[usize], with_taps: bool) -> Result<RunOutput> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let positions: Vec<usize> = (0..n).collect();
        let mut x = Tensor::embedding(&self.tok_emb, tokens)?.add(&Tensor::embedding(&self.pos_emb, &positions)?)?;
        let mut causal = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                causal[i * n + j] = f64::NEG_INFINITY;
            }
        }
        let causal = Tensor::new(causal, &[n, n])?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut hidden = Vec::with_capacity(cfg.n_layers);
        let mut taps = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let h = x.layer_norm(&l.ln1_g, &l.ln1_b, LN_EPS)?;
            let q = h.matmul(&l.wq)?;
            let k = h.matmul(&l.wk)?;
            let v = h.matmul(&l.wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hi in 0..cfg.n_heads {
                let (a, b) = (hi * dh, (hi + 1) * dh);
                let qh = q.slice_cols(a, b)?;
                let kh = k.slice_cols(a, b)?;
                let vh = v.slice_cols(a, b)?;
                let scores = qh.matmul(&kh.transpose()?)?.scale(inv_sqrt).add(&causal)?;
                heads.push(scores.softmax(1)?.matmul(&vh)?);
            }
            let attn = Tensor::concat(&heads, 1)?.matmul(&l.wo)?.add_row(&l.bo)?;
            x = x.add(&attn)?;
            let h2 = x.layer_norm(&l.ln2_g, &l.ln2_b, LN_EPS)?;
            let ffn = h2.matmul(&l.w1)?.add_row(&l.b1)?.relu().matmul(&l.w2)?.add_row(&l.b2)?;
            x = x.add(&ffn)?;
            if with_taps {
                taps.push((TapSite { layer: li, family: TapFamily::Attention }, attn));
                taps.push((TapSite { layer: li, family: TapFamily::FeedForward }, ffn));
                taps.push((TapSite { layer: li, family: TapFamily::Residual }, x.clone()));
            }
            hidden.push(x.clone());
        }
        let logits = x
            .layer_norm(&self.lnf_g, &self.lnf_b, LN_EPS)?
            .matmul(&self.w_out)?
            .add_row(&self.b_out)?;
        Ok((logits, hidden, taps))
    }

    /// Forward pass over `tokens`, where `tokens[response_start..]` is the
    /// response being scored. Requires `response_start >= 1`.
    pub fn trace(&self, tokens: &[usize], response_start: usize, with_taps: bool) -> Result<ForwardTrace> {
        if response_start == 0 || response_start > tokens.len() {
            return Err(Error::Model(format!(
                "response_start {response_start} must lie in 1..={}",
                tokens.len()
            )));
        }
        let (logits, hidden, taps) = self.run(tokens, with_taps)?;
        let n = tokens.len();
        let vocab_log_dist = logits.slice_rows(response_start - 1, n - 1)?.log_softmax(1)?;
        let response = &tokens[response_start..];
        let token_log_probs = vocab_log_dist.gather_rows(response)?;
        let hidden_states = hidden
            .iter()
            .map(|h| h.slice_rows(response_start, n))
            .collect::<std::result::Result<_, _>>()?;
        let taps = taps
            .into_iter()
            .map(|(site, t)| {
                Ok(ActivationTap {
                    site,
                    values: t.slice_rows(response_start, n)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ForwardTrace {
            tokens: tokens.to_vec(),
            response_start,
            logits,
            vocab_log_dist,
            token_log_probs,
            hidden_states,
            taps,
        })
    }

    /// Log-distribution of the token following `tokens`.
    pub fn next_token_log_dist(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        no_grad(|| {
            let (logits, _, _) = self.run(tokens, false)?;
            let n = tokens.len();
            Ok(logits.slice_rows(n - 1, n)?.log_softmax(1)?.to_vec())
        })
    }

    /// Autoregressive sampling after `prompt` until `eos` or `max_len`
    /// generated tokens.
    pub fn sample(&self, prompt: &[usize], cfg: &SamplerConfig, eos: usize, rng: &mut impl Rng) -> Result<Sample> {
        if !(cfg.temperature > 0.0) {
            return Err(Error::Model(format!("temperature must be > 0, got {}", cfg.temperature)));
        }
        if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
            return Err(Error::Model(format!("top_p must lie in (0, 1], got {}", cfg.top_p)));
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < cfg.max_len {
            if seq.len() >= self.config.context_len {
                break;
            }
            let logp = self.next_token_log_dist(&seq)?;
            let tok = if cfg.argmax {
                argmax(&logp)
            } else {
                draw(&logp, cfg.temperature, cfg.top_p, rng)
            };
            seq.push(tok);
            out.push(tok);
            if tok == eos {
                return Ok(Sample {
                    tokens: out,
                    truncated: false,
                });
            }
        }
        Ok(Sample {
            tokens: out,
            truncated: true,
        })
    }

    pub fn to_archive(&self, prefix: &str, archive: &mut Archive) {
        for (name, t) in self.named_params() {
            archive.push(format!("{prefix}{name}"), t.shape(), t.to_vec());
        }
    }

    /// Rebuilds a model from `prefix`-named tensors; trainable unless `frozen`.
    pub fn from_archive(config: ModelConfig, prefix: &str, archive: &Archive, frozen: bool) -> Result<Self> {
        let model = Self::new(config)?;
        for (name, t) in model.named_params() {
            let stored = archive.get(&format!("{prefix}{name}"))?;
            if stored.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            t.update_data(|d| d.copy_from_slice(&stored.data));
        }
        Ok(if frozen { model.frozen_copy() } else { model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(json!({
            "kind": "model",
            "version": 1,
            "config": self.config,
        }));
        self.to_archive("", &mut a);
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("model") {
            return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display())));
        }
        let config: ModelConfig = serde_json::from_value(a.meta["config"].clone())?;
        Self::from_archive(config, "", &a, false)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled nucleus draw from a log-distribution.
fn draw(logp: &[f64], temperature: f64, top_p: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logp.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // descending probability, ties by id
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += weights[i] / z;
        if mass >= top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&i| weights[i]).sum();
    let mut u = rng.random::<f64>() * total;
    for &i in &kept {
        u -= weights[i];
        if u < 0.0 {
            return i;
        }
    }
    *kept.last().expect("non-empty nucleus")
}
