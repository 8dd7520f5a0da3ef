//! Supervised fine-tuning and preference-optimization loops.
//!
//! A PO run directory holds:
//!
//! ```text
//! reference.ckpt      frozen reference model
//! metrics.jsonl       one record per logged step
//! step_000000.ckpt    policy + masks + optimizer + progress, every
//! step_000100.ckpt    `checkpoint_every` steps and at the last step
//! ```
//!
//! Step `s` is logged with the loss of its batch computed before the
//! `s`-th update, so step 0 reports the loss at the reference point.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sparsepo_tensor::{no_grad, Tensor};

use crate::archive::Archive;
use crate::data::{model_input, Dataset, PreferencePair, SftCorpus, VocabSpec};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossBreakdown, LossConfig, Method, PairTraces};
use crate::masks::{all_sites, MaskKind, MaskNetwork, MaskStrategy};
use crate::model::{ModelConfig, TapSite, TransformerLM};
use crate::optim::{AdamW, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Linear,
}

impl LrSchedule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "constant" => Some(Self::Constant),
            "linear" => Some(Self::Linear),
            _ => None,
        }
    }

    /// Multiplier on the base learning rate at `step` of `total`.
    pub fn factor(self, step: usize, total: usize, warmup: usize) -> f64 {
        if step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => {
                let span = total.saturating_sub(warmup).max(1);
                (total.saturating_sub(step)) as f64 / span as f64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub mask_lr: f64,
    pub weight_decay: f64,
    pub mask_weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub warmup_frac: f64,
    pub lr_schedule: LrSchedule,
    /// Global-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Stop (after checkpointing) once this many updates are done.
    pub stop_after_steps: Option<usize>,
    /// Activation sites for the activation-based mask.
    pub mapo_sites: Option<Vec<TapSite>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            lr: 3e-4,
            mask_lr: 1e-3,
            weight_decay: 0.0,
            mask_weight_decay: 0.01,
            epochs: 3,
            batch_size: 8,
            grad_accum: 1,
            warmup_frac: 0.0,
            lr_schedule: LrSchedule::Constant,
            grad_clip: 1.0,
            seed: 1,
            log_every: 1,
            checkpoint_every: 100,
            stop_after_steps: None,
            mapo_sites: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let rates = [("lr", self.lr), ("mask_lr", self.mask_lr)];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Train(format!("{k} must be > 0, got {v}")));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::Train("batch_size and grad_accum must be >= 1".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Train("log_every and checkpoint_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Train(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac)));
        }
        if !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) || !(self.mask_weight_decay >= 0.0) {
            return Err(Error::Train("grad_clip and weight decays must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pairs_per_step(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.pairs_per_step())
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Visiting order of the dataset in `epoch`; a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64 + 1));
    order.shuffle(&mut rng);
    order
}

/// Fresh mask strategy for `method`; unmasked baselines get `AllOnes`,
/// which they ignore.
pub fn build_strategy(
    method: Method,
    model: &ModelConfig,
    seed: u64,
    mapo_sites: Option<&[TapSite]>,
) -> Result<MaskStrategy> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x6d61_736b));
    let (l, d) = (model.n_layers, model.d_model);
    Ok(match method.mask_kind() {
        None | Some(MaskKind::AllOnes) => MaskStrategy::AllOnes,
        Some(MaskKind::Random) => MaskStrategy::Random { seed },
        Some(MaskKind::Binary) => MaskStrategy::Binary(MaskNetwork::init(l, d, &mut rng)),
        Some(MaskKind::MaPO) => {
            let sites = mapo_sites.map(<[_]>::to_vec).unwrap_or_else(|| all_sites(l));
            if let Some(bad) = sites.iter().find(|s| s.layer >= l) {
                return Err(Error::Config(format!("activation site {bad} beyond the model's {l} layers")));
            }
            MaskStrategy::MaPO { sites }
        }
        Some(MaskKind::LearnedCommon) => MaskStrategy::LearnedCommon(MaskNetwork::init(l, d, &mut rng)),
        Some(MaskKind::LearnedIndependent) => MaskStrategy::LearnedIndependent {
            reward: MaskNetwork::init(l, d, &mut rng),
            divergence: MaskNetwork::init(l, d, &mut rng),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub preference_loss: f64,
    pub u: f64,
    pub delta: f64,
    pub sparsity_mu: Option<f64>,
    pub sparsity_md: Option<f64>,
    pub mean_token_kl_chosen: f64,
    pub mean_token_kl_rejected: f64,
    pub mask_l1: Option<f64>,
    pub grad_norm: f64,
}

/// Reads a metrics log written by [`run_po`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Train(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Train(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Policy and reference traces for one pair.
pub struct PairForward {
    pub policy_chosen: crate::model::ForwardTrace,
    pub policy_rejected: crate::model::ForwardTrace,
    pub ref_chosen: crate::model::ForwardTrace,
    pub ref_rejected: crate::model::ForwardTrace,
}

impl PairForward {
    pub fn new(
        policy: &TransformerLM,
        reference: &TransformerLM,
        spec: &VocabSpec,
        pair: &PreferencePair,
        with_taps: bool,
    ) -> Result<Self> {
        let (c, cs) = model_input(spec, &pair.prompt, &pair.chosen);
        let (r, rs) = model_input(spec, &pair.prompt, &pair.rejected);
        let (ref_chosen, ref_rejected) = no_grad(|| -> Result<_> {
            Ok((reference.trace(&c, cs, with_taps)?, reference.trace(&r, rs, with_taps)?))
        })?;
        Ok(Self {
            policy_chosen: policy.trace(&c, cs, false)?,
            policy_rejected: policy.trace(&r, rs, false)?,
            ref_chosen,
            ref_rejected,
        })
    }

    pub fn traces(&self, mask_seed: u64) -> PairTraces<'_> {
        PairTraces {
            policy_chosen: &self.policy_chosen,
            policy_rejected: &self.policy_rejected,
            ref_chosen: &self.ref_chosen,
            ref_rejected: &self.ref_rejected,
            mask_seed,
        }
    }
}

/// Loss over `pairs` (indices into `data`) for one micro-batch.
pub fn micro_batch_loss(
    cfg: &LossConfig,
    strategy: &MaskStrategy,
    policy: &TransformerLM,
    reference: &TransformerLM,
    data: &Dataset,
    pairs: &[usize],
    seed_base: u64,
) -> Result<LossBreakdown> {
    let forwards = pairs
        .iter()
        .map(|&i| PairForward::new(policy, reference, &data.spec, &data.pairs[i], strategy.needs_taps()))
        .collect::<Result<Vec<_>>>()?;
    let traces: Vec<PairTraces<'_>> = forwards
        .iter()
        .zip(pairs)
        .map(|(f, &i)| f.traces(mix_seed(seed_base, i as u64)))
        .collect();
    batch_loss(cfg, strategy, &traces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    step: usize,
    total_steps: usize,
}

/// Everything needed to continue or evaluate a PO run.
pub struct PoState {
    pub policy: TransformerLM,
    pub strategy: MaskStrategy,
    pub optimizer: AdamW,
    pub method: Method,
    pub beta: f64,
    pub step: usize,
}

pub fn checkpoint_path(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("step_{step:06}.ckpt"))
}

/// Step checkpoints in a run directory, ascending.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(run_dir).map_err(|e| Error::Checkpoint(format!("{}: {e}", run_dir.display())))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(step) = name
            .strip_prefix("step_")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse().ok())
        {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

fn optimizer_for(policy: &TransformerLM, strategy: &MaskStrategy, cfg: &TrainConfig) -> AdamW {
    let mut groups = vec![ParamGroup::new("policy", policy.params(), cfg.lr, cfg.weight_decay)];
    let mask_params = strategy.trainable_params();
    if !mask_params.is_empty() {
        groups.push(ParamGroup::new("mask", mask_params, cfg.mask_lr, cfg.mask_weight_decay));
    }
    AdamW::new(groups)
}

fn save_checkpoint(path: &Path, state: &PoState, progress: Progress) -> Result<()> {
    let mut a = Archive::new(json!({
        "kind": "po-checkpoint",
        "version": 1,
        "model": state.policy.config(),
        "method": state.method.name(),
        "beta": state.beta,
        "progress": progress,
        "optimizer_step": state.optimizer.step_count(),
    }));
    state.policy.to_archive("policy.", &mut a);
    for (prefix, net) in state.strategy.networks() {
        net.to_archive(prefix, &mut a);
    }
    state.optimizer.to_archive(&mut a);
    a.save(path)
}

/// Policy, masks and metadata of a PO checkpoint.
pub struct LoadedCheckpoint {
    pub policy: TransformerLM,
    pub strategy: MaskStrategy,
    pub method: Method,
    pub beta: f64,
    pub step: usize,
    pub archive: Archive,
}

/// Loads a PO checkpoint. `mapo_sites` and `seed` rebuild the
/// parameter-free strategies, which store nothing.
pub fn load_checkpoint(path: &Path, seed: u64, mapo_sites: Option<&[TapSite]>) -> Result<LoadedCheckpoint> {
    let a = Archive::load(path)?;
    if a.meta["kind"].as_str() != Some("po-checkpoint") {
        return Err(Error::Checkpoint(format!("{} is not a PO checkpoint", path.display())));
    }
    let model: ModelConfig = serde_json::from_value(a.meta["model"].clone())?;
    let method_name = a.meta["method"].as_str().unwrap_or("");
    let method = Method::parse(method_name)
        .ok_or_else(|| Error::Checkpoint(format!("unknown method '{method_name}' in checkpoint")))?;
    let beta = a.meta["beta"].as_f64().unwrap_or(f64::NAN);
    let progress: Progress = serde_json::from_value(a.meta["progress"].clone())?;
    let policy = TransformerLM::from_archive(model.clone(), "policy.", &a, false)?;
    let strategy = build_strategy(method, &model, seed, mapo_sites)?;
    for (prefix, net) in strategy.networks() {
        net.load_from(prefix, &a)?;
    }
    Ok(LoadedCheckpoint {
        policy,
        strategy,
        method,
        beta,
        step: progress.step,
        archive: a,
    })
}

/// Where to start a PO run.
pub enum PoInit {
    /// Policy and reference both start from this model.
    Model(TransformerLM),
    /// Continue from a step checkpoint inside an existing run directory.
    Resume(PathBuf),
}

pub struct PoOutcome {
    pub policy: TransformerLM,
    pub reference: TransformerLM,
    pub strategy: MaskStrategy,
    pub metrics: Vec<MetricsRecord>,
    pub steps_done: usize,
    pub total_steps: usize,
}

/// Summary written to `run.json` when a run starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: String,
    pub beta: f64,
    pub seed: u64,
    pub total_steps: usize,
    pub n_pairs: usize,
}

impl RunInfo {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("run.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::Train(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    Ok(())
}

fn append_metric(path: &Path, r: &MetricsRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().append(true).create(true).open(path)?;
    serde_json::to_writer(&mut f, r)?;
    writeln!(f)?;
    Ok(())
}

/// Preference optimization over `data`, writing into `run_dir`.
pub fn run_po(init: PoInit, data: &Dataset, cfg: &TrainConfig, run_dir: &Path) -> Result<PoOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Train("empty training set".into()));
    }
    fs::create_dir_all(run_dir)?;
    let metrics_path = run_dir.join("metrics.jsonl");
    let ref_path = run_dir.join("reference.ckpt");
    let method = cfg.loss.method;

    let (reference, mut state, mut metrics) = match init {
        PoInit::Model(model) => {
            let reference = model.frozen_copy();
            reference.save(&ref_path)?;
            let policy = model.trainable_copy();
            let strategy = build_strategy(method, policy.config(), cfg.seed, cfg.mapo_sites.as_deref())?;
            let optimizer = optimizer_for(&policy, &strategy, cfg);
            write_metrics(&metrics_path, &[])?;
            let state = PoState {
                policy,
                strategy,
                optimizer,
                method,
                beta: cfg.loss.beta,
                step: 0,
            };
            (reference, state, Vec::new())
        }
        PoInit::Resume(path) => {
            let ck = load_checkpoint(&path, cfg.seed, cfg.mapo_sites.as_deref())?;
            if ck.method != method {
                return Err(Error::Train(format!(
                    "checkpoint was trained with {}, config asks for {method}",
                    ck.method
                )));
            }
            let reference = TransformerLM::load(&ref_path)?.frozen_copy();
            let mut optimizer = optimizer_for(&ck.policy, &ck.strategy, cfg);
            let opt_step = ck.archive.meta["optimizer_step"].as_u64().unwrap_or(0);
            optimizer.load_state(&ck.archive, opt_step)?;
            let kept: Vec<MetricsRecord> = read_metrics(&metrics_path)
                .unwrap_or_default()
                .into_iter()
                .filter(|r| r.step < ck.step)
                .collect();
            write_metrics(&metrics_path, &kept)?;
            let state = PoState {
                policy: ck.policy,
                strategy: ck.strategy,
                optimizer,
                method,
                beta: cfg.loss.beta,
                step: ck.step,
            };
            (reference, state, kept)
        }
    };
    let max_len = data.max_sequence_len();
    if max_len > reference.config().context_len {
        return Err(Error::Train(format!(
            "dataset sequences reach length {max_len}, model context_len is {}",
            reference.config().context_len
        )));
    }
    if let Some(bad) = data
        .pairs
        .iter()
        .flat_map(|p| p.prompt.iter().chain(&p.chosen).chain(&p.rejected))
        .find(|&&id| id >= reference.config().vocab_size)
    {
        return Err(Error::Train(format!("token id {bad} outside the model vocabulary")));
    }
    let ref_checksum = reference.checksum();

    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = cfg.epochs * per_epoch;
    let warmup = (cfg.warmup_frac * total as f64).round() as usize;
    let stop_at = cfg.stop_after_steps.map_or(total, |s| s.min(total));
    let info = RunInfo {
        method: method.name().to_string(),
        beta: cfg.loss.beta,
        seed: cfg.seed,
        total_steps: total,
        n_pairs: data.len(),
    };
    fs::write(run_dir.join("run.json"), serde_json::to_string_pretty(&info)?)?;
    let mut order_cache: Option<(usize, Vec<usize>)> = None;

    loop {
        let step = state.step;
        let at_end = step >= stop_at;
        if step % cfg.checkpoint_every == 0 || at_end {
            let progress = Progress { step, total_steps: total };
            save_checkpoint(&checkpoint_path(run_dir, step), &state, progress)?;
        }
        if at_end {
            break;
        }
        let epoch = step / per_epoch;
        let within = step % per_epoch;
        if order_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order_cache = Some((epoch, epoch_order(data.len(), cfg.seed, epoch)));
        }
        let order = &order_cache.as_ref().expect("order cached").1;
        let start = within * cfg.pairs_per_step();
        let step_pairs = &order[start..(start + cfg.pairs_per_step()).min(order.len())];

        state.optimizer.zero_grad();
        let seed_base = mix_seed(cfg.seed, step as u64);
        let mut parts = Vec::new();
        for chunk in step_pairs.chunks(cfg.batch_size) {
            let b = micro_batch_loss(&cfg.loss, &state.strategy, &state.policy, &reference, data, chunk, seed_base)?;
            let value = b.value();
            if !value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite loss {value} at step {step} (pairs {:?})",
                    chunk
                )));
            }
            b.loss.scale(chunk.len() as f64 / step_pairs.len() as f64).backward()?;
            parts.push((chunk.len(), b));
        }
        let grad_norm = state.optimizer.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Train(format!("non-finite gradient norm at step {step}")));
        }
        let lr_factor = cfg.lr_schedule.factor(step, total, warmup);
        if step % cfg.log_every == 0 {
            let rec = summarize(&parts, step, epoch, cfg.lr * lr_factor, grad_norm);
            append_metric(&metrics_path, &rec)?;
            metrics.push(rec);
        }
        let clip = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            cfg.grad_clip / grad_norm
        } else {
            1.0
        };
        state.optimizer.step(lr_factor, clip);
        state.step += 1;
    }
    if reference.checksum() != ref_checksum {
        return Err(Error::Train("reference parameters changed during training".into()));
    }
    Ok(PoOutcome {
        policy: state.policy,
        reference,
        strategy: state.strategy,
        metrics,
        steps_done: state.step,
        total_steps: total,
    })
}

fn summarize(parts: &[(usize, LossBreakdown)], step: usize, epoch: usize, lr: f64, grad_norm: f64) -> MetricsRecord {
    let n: usize = parts.iter().map(|(k, _)| k).sum();
    let w = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(|(k, b)| f(b) * *k as f64).sum::<f64>() / n as f64;
    let wo = |f: &dyn Fn(&LossBreakdown) -> Option<f64>| -> Option<f64> {
        let mut s = 0.0;
        for (k, b) in parts {
            s += f(b)? * *k as f64;
        }
        Some(s / n as f64)
    };
    MetricsRecord {
        step,
        epoch,
        lr,
        loss: w(&|b| b.value()),
        preference_loss: w(&|b| b.preference_loss),
        u: w(&|b| b.u),
        delta: w(&|b| b.delta),
        sparsity_mu: wo(&|b| b.sparsity_mu),
        sparsity_md: wo(&|b| b.sparsity_md),
        mean_token_kl_chosen: w(&|b| b.mean_token_kl_chosen),
        mean_token_kl_rejected: w(&|b| b.mean_token_kl_rejected),
        mask_l1: wo(&|b| b.mask_l1),
        grad_norm,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 8,
            grad_clip: 1.0,
            seed: 1,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean next-token cross-entropy per response token, in nats.
    pub loss: f64,
}

/// Next-token cross-entropy on the response tokens of `corpus`; the
/// prompt only conditions.
pub fn sft_batch_loss(model: &TransformerLM, spec: &VocabSpec, records: &[&crate::data::SftRecord]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let mut count = 0usize;
    for r in records {
        let (tokens, start) = model_input(spec, &r.prompt, &r.response);
        let tr = model.trace(&tokens, start, false)?;
        count += tr.response_len();
        let s = tr.token_log_probs.sum();
        total = Some(match total {
            Some(t) => t.add(&s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| Error::Train("empty SFT batch".into()))?;
    Ok(total.scale(-1.0 / count as f64))
}

/// Trains `model` in place; returns the loss log.
pub fn run_sft(model: &TransformerLM, corpus: &SftCorpus, cfg: &SftConfig) -> Result<Vec<SftRecord>> {
    if cfg.batch_size == 0 || cfg.log_every == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Train("SFT needs lr > 0, batch_size >= 1 and log_every >= 1".into()));
    }
    if corpus.records.is_empty() {
        return Err(Error::Train("empty SFT corpus".into()));
    }
    let mut opt = AdamW::new(vec![ParamGroup::new("policy", model.params(), cfg.lr, cfg.weight_decay)]);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(corpus.records.len(), cfg.seed, epoch);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            opt.zero_grad();
            let recs: Vec<_> = chunk.iter().map(|&i| &corpus.records[i]).collect();
            let loss = sft_batch_loss(model, &corpus.spec, &recs)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite SFT loss {value} at step {step} (epoch {epoch}, batch {bi})"
                )));
            }
            loss.backward()?;
            let norm = opt.grad_norm();
            if !norm.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite SFT gradient at step {step} (epoch {epoch}, batch {bi})"
                )));
            }
            if step % cfg.log_every == 0 {
                log.push(SftRecord { step, epoch, loss: value });
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                cfg.grad_clip / norm
            } else {
                1.0
            };
            opt.step(1.0, clip);
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_linear_decay() {
        let s = LrSchedule::Linear;
        assert_eq!(s.factor(0, 10, 2), 0.5);
        assert_eq!(s.factor(1, 10, 2), 1.0);
        assert_eq!(s.factor(2, 10, 2), 1.0);
        assert_eq!(s.factor(6, 10, 2), 0.5);
        assert_eq!(LrSchedule::Constant.factor(9, 10, 0), 1.0);
    }

    #[test]
    fn epoch_orders_are_permutations_and_reproducible() {
        let a = epoch_order(50, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        let cfg = TrainConfig {
            batch_size: 4,
            grad_accum: 2,
            ..Default::default()
        };
        assert_eq!(cfg.steps_per_epoch(17), 3);
    }
}
