//! Preference-optimization objectives.
//!
//! Every method is written as `-log σ(u - δ)` for a method-specific pair
//! of scalars `u` and `δ`, so the breakdown reports the same two numbers
//! for all of them. Prompt tokens never enter any sum.

use sparsepo_tensor::Tensor;

use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskStrategy, MaskValues};
use crate::model::ForwardTrace;

/// Tolerance on `|logsumexp|` for a row to count as a distribution.
const NORMALIZATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dpo,
    Tdpo1,
    Tdpo2,
    Simpo,
    Dpop,
    Mapo,
    SparseCommon,
    SparseIndep,
    MaskRandom,
    MaskBinary,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::Dpo,
        Method::Tdpo1,
        Method::Tdpo2,
        Method::Simpo,
        Method::Dpop,
        Method::Mapo,
        Method::SparseCommon,
        Method::SparseIndep,
        Method::MaskRandom,
        Method::MaskBinary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Tdpo1 => "tdpo1",
            Method::Tdpo2 => "tdpo2",
            Method::Simpo => "simpo",
            Method::Dpop => "dpop",
            Method::Mapo => "mapo",
            Method::SparseCommon => "sparse-common",
            Method::SparseIndep => "sparse-indep",
            Method::MaskRandom => "mask-random",
            Method::MaskBinary => "mask-binary",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Mask strategy kind for the masked family; `None` for unmasked baselines.
    pub fn mask_kind(self) -> Option<MaskKind> {
        match self {
            Method::Tdpo1 => Some(MaskKind::AllOnes),
            Method::Mapo => Some(MaskKind::MaPO),
            Method::SparseCommon => Some(MaskKind::LearnedCommon),
            Method::SparseIndep => Some(MaskKind::LearnedIndependent),
            Method::MaskRandom => Some(MaskKind::Random),
            Method::MaskBinary => Some(MaskKind::Binary),
            Method::Dpo | Method::Tdpo2 | Method::Simpo | Method::Dpop => None,
        }
    }

    pub fn is_reference_free(self) -> bool {
        self == Method::Simpo
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    /// TDPO v2 weight on the divergence term.
    pub alpha: f64,
    /// SimPO target margin.
    pub simpo_gamma: f64,
    /// DPOP penalty weight.
    pub dpop_lambda: f64,
    pub epsilon: f64,
    pub l1_coeff: f64,
    /// Detach mask values inside `u` and `δ`.
    pub mask_stop_gradient: bool,
    pub zero_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::SparseCommon,
            beta: 0.1,
            alpha: 0.7,
            simpo_gamma: 0.3,
            dpop_lambda: 50.0,
            epsilon: crate::masks::DEFAULT_EPSILON,
            l1_coeff: 0.001,
            mask_stop_gradient: false,
            zero_threshold: crate::masks::DEFAULT_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Loss(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.simpo_gamma >= 0.0) {
            return Err(Error::Loss(format!("simpo_gamma must be >= 0, got {}", self.simpo_gamma)));
        }
        if !(self.dpop_lambda >= 0.0) {
            return Err(Error::Loss(format!("dpop_lambda must be >= 0, got {}", self.dpop_lambda)));
        }
        if !(self.l1_coeff >= 0.0) {
            return Err(Error::Loss(format!("l1_coeff must be >= 0, got {}", self.l1_coeff)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Loss(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Loss(format!("alpha must be finite, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Policy and reference traces over the chosen and rejected sequences of
/// one pair.
#[derive(Debug, Clone, Copy)]
pub struct PairTraces<'a> {
    pub policy_chosen: &'a ForwardTrace,
    pub policy_rejected: &'a ForwardTrace,
    pub ref_chosen: &'a ForwardTrace,
    pub ref_rejected: &'a ForwardTrace,
    /// Per-pair seed for stochastic mask strategies.
    pub mask_seed: u64,
}

/// Per-response diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct SideBreakdown {
    pub log_ratios: Vec<f64>,
    pub token_kl: Vec<f64>,
    pub mask_u: Vec<f64>,
    pub mask_d: Vec<f64>,
    /// `mask_u * log_ratios`.
    pub masked_rewards: Vec<f64>,
    /// `mask_d * token_kl`.
    pub masked_kl: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    /// `-log σ(u - δ)` plus this pair's L1 mask penalty, on the tape.
    pub loss: Tensor,
    /// `-log σ(u - δ)` alone.
    pub preference_loss: f64,
    pub u: f64,
    pub delta: f64,
    pub l1_penalty: f64,
    pub chosen: SideBreakdown,
    pub rejected: SideBreakdown,
    pub sparsity_mu: Option<f64>,
    pub sparsity_md: Option<f64>,
}

/// Batch-mean loss with averaged diagnostics.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub loss: Tensor,
    pub u: f64,
    pub delta: f64,
    pub preference_loss: f64,
    pub sparsity_mu: Option<f64>,
    pub sparsity_md: Option<f64>,
    /// Mean over pairs of `‖m_u‖₁ + ‖m_d‖₁` summed over both responses;
    /// `None` for strategies without learned masks.
    pub mask_l1: Option<f64>,
    pub mean_token_kl_chosen: f64,
    pub mean_token_kl_rejected: f64,
    pub pairs: Vec<PairLoss>,
}

impl LossBreakdown {
    pub fn value(&self) -> f64 {
        self.loss.item()
    }
}

fn check_normalized(trace: &ForwardTrace, what: &str) -> Result<()> {
    let shape = trace.vocab_log_dist.shape();
    let v = shape[1];
    let data = trace.vocab_log_dist.data();
    for (t, row) in data.chunks_exact(v).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        if !(lse.abs() <= NORMALIZATION_TOL) {
            return Err(Error::Loss(format!(
                "{what} distribution at response position {t} is not normalized (logsumexp {lse})"
            )));
        }
    }
    Ok(())
}

fn check_aligned(policy: &ForwardTrace, reference: &ForwardTrace) -> Result<()> {
    if policy.response_len() != reference.response_len() {
        return Err(Error::Loss(format!(
            "policy trace has {} response tokens, reference has {}",
            policy.response_len(),
            reference.response_len()
        )));
    }
    if policy.response_len() == 0 {
        return Err(Error::Loss("zero-length response".into()));
    }
    Ok(())
}

/// `log π(y_t) - log π_ref(y_t)` per response token. The reference side is
/// a constant.
pub fn token_log_ratio(policy: &ForwardTrace, reference: &ForwardTrace) -> Result<Tensor> {
    check_aligned(policy, reference)?;
    Ok(policy.token_log_probs.sub(&reference.token_log_probs.stop_gradient())?)
}

/// `KL(π(·|prefix) ‖ π_ref(·|prefix))` per response position.
pub fn token_kl(policy: &ForwardTrace, reference: &ForwardTrace) -> Result<Tensor> {
    check_aligned(policy, reference)?;
    if policy.vocab_log_dist.shape() != reference.vocab_log_dist.shape() {
        return Err(Error::Loss(format!(
            "vocabulary mismatch: {:?} vs {:?}",
            policy.vocab_log_dist.shape(),
            reference.vocab_log_dist.shape()
        )));
    }
    check_normalized(policy, "policy")?;
    check_normalized(reference, "reference")?;
    let lp = &policy.vocab_log_dist;
    let lr = reference.vocab_log_dist.stop_gradient();
    Ok(lp.exp().mul(&lp.sub(&lr)?)?.sum_axis(1)?)
}

/// `Σ_t m_d[t] · kl[t]`.
pub fn masked_seq_kl(kl: &Tensor, mask_d: &Tensor) -> Result<Tensor> {
    if kl.shape() != mask_d.shape() {
        return Err(Error::Loss(format!(
            "mask length {:?} does not match response length {:?}",
            mask_d.shape(),
            kl.shape()
        )));
    }
    Ok(kl.mul(mask_d)?.sum())
}

fn side_breakdown(lr: &Tensor, kl: &Tensor, mu: &Tensor, md: &Tensor) -> SideBreakdown {
    let log_ratios = lr.to_vec();
    let token_kl = kl.to_vec();
    let mask_u = mu.to_vec();
    let mask_d = md.to_vec();
    SideBreakdown {
        masked_rewards: log_ratios.iter().zip(&mask_u).map(|(a, b)| a * b).collect(),
        masked_kl: token_kl.iter().zip(&mask_d).map(|(a, b)| a * b).collect(),
        log_ratios,
        token_kl,
        mask_u,
        mask_d,
    }
}

fn ones_like(t: &Tensor) -> Tensor {
    Tensor::full(t.shape(), 1.0)
}

/// Loss for one pair under `cfg.method`. `strategy` supplies the masks
/// for the masked family and is ignored by the unmasked baselines.
pub fn pair_loss(cfg: &LossConfig, strategy: &MaskStrategy, p: PairTraces<'_>) -> Result<PairLoss> {
    cfg.validate()?;
    let beta = cfg.beta;
    let lr_c = token_log_ratio(p.policy_chosen, p.ref_chosen)?;
    let lr_r = token_log_ratio(p.policy_rejected, p.ref_rejected)?;
    let kl_c = token_kl(p.policy_chosen, p.ref_chosen)?;
    let kl_r = token_kl(p.policy_rejected, p.ref_rejected)?;

    let masked = cfg.method.mask_kind().is_some();
    let (masks_c, masks_r) = if masked {
        if strategy.kind() != cfg.method.mask_kind().expect("masked method") {
            return Err(Error::Loss(format!(
                "method {} cannot run with mask strategy {}",
                cfg.method,
                strategy.kind().name()
            )));
        }
        let c = strategy.compute(p.ref_chosen, cfg.epsilon, p.mask_seed)?;
        let r = strategy.compute(p.ref_rejected, cfg.epsilon, p.mask_seed.rotate_left(32) ^ 0x5bd1_e995)?;
        (Some(c), Some(r))
    } else {
        (None, None)
    };
    let weights = |m: &Option<(MaskValues, MaskValues)>, like: &Tensor| -> (Tensor, Tensor) {
        match m {
            Some((mu, md)) => (mu.weights.clone(), md.weights.clone()),
            None => (ones_like(like), ones_like(like)),
        }
    };
    let (mu_c, md_c) = weights(&masks_c, &lr_c);
    let (mu_r, md_r) = weights(&masks_r, &lr_r);
    let gate = |m: &Tensor| if cfg.mask_stop_gradient { m.stop_gradient() } else { m.clone() };

    let (u, delta) = match cfg.method {
        Method::Dpo => (lr_c.sum().sub(&lr_r.sum())?.scale(beta), Tensor::scalar(0.0)),
        Method::Dpop => {
            // penalty: how far the policy has dropped below the reference on y_c
            let shortfall = lr_c.sum().neg().relu();
            let arg = lr_c.sum().sub(&lr_r.sum())?.sub(&shortfall.scale(cfg.dpop_lambda))?;
            (arg.scale(beta), Tensor::scalar(0.0))
        }
        Method::Simpo => {
            let avg = |tr: &ForwardTrace| tr.token_log_probs.mean();
            let u = avg(p.policy_chosen)
                .sub(&avg(p.policy_rejected))?
                .scale(beta)
                .add_scalar(-cfg.simpo_gamma);
            (u, Tensor::scalar(0.0))
        }
        Method::Tdpo2 => {
            let u = lr_c.sum().sub(&lr_r.sum())?.scale(beta);
            let delta = kl_r.sum().sub(&kl_c.sum().stop_gradient())?.scale(cfg.alpha * beta);
            (u, delta)
        }
        Method::Tdpo1
        | Method::Mapo
        | Method::SparseCommon
        | Method::SparseIndep
        | Method::MaskRandom
        | Method::MaskBinary => {
            let u = lr_c.mul(&gate(&mu_c))?.sum().sub(&lr_r.mul(&gate(&mu_r))?.sum())?.scale(beta);
            let delta = masked_seq_kl(&kl_c, &gate(&md_c))?
                .sub(&masked_seq_kl(&kl_r, &gate(&md_r))?)?
                .scale(beta);
            (u, delta)
        }
    };
    let pref = u.sub(&delta)?.log_sigmoid().neg();

    let learned = cfg.method.mask_kind().is_some_and(MaskKind::is_learned);
    let (loss, l1_penalty) = if learned && cfg.l1_coeff > 0.0 {
        // weights are ≥ ε > 0, so the L1 norm is the plain sum
        let l1 = mu_c.sum().add(&md_c.sum())?.add(&mu_r.sum())?.add(&md_r.sum())?;
        let pen = l1.scale(cfg.l1_coeff);
        let value = pen.item();
        (pref.add(&pen)?, value)
    } else {
        (pref.clone(), 0.0)
    };

    let (sparsity_mu, sparsity_md) = match (&masks_c, &masks_r) {
        (Some((mu_c, md_c)), Some((mu_r, md_r))) => {
            let mut u_all = mu_c.values();
            u_all.extend(mu_r.values());
            let mut d_all = md_c.values();
            d_all.extend(md_r.values());
            (
                Some(crate::masks::sparsity(&u_all, cfg.zero_threshold)?),
                Some(crate::masks::sparsity(&d_all, cfg.zero_threshold)?),
            )
        }
        _ => (None, None),
    };

    Ok(PairLoss {
        preference_loss: pref.item(),
        u: u.item(),
        delta: delta.item(),
        l1_penalty,
        chosen: side_breakdown(&lr_c, &kl_c, &mu_c, &md_c),
        rejected: side_breakdown(&lr_r, &kl_r, &mu_r, &md_r),
        sparsity_mu,
        sparsity_md,
        loss,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

/// Arithmetic mean of the per-pair losses.
pub fn batch_loss(cfg: &LossConfig, strategy: &MaskStrategy, batch: &[PairTraces<'_>]) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let pairs = batch
        .iter()
        .map(|p| pair_loss(cfg, strategy, *p))
        .collect::<Result<Vec<_>>>()?;
    let mut total = pairs[0].loss.clone();
    for p in &pairs[1..] {
        total = total.add(&p.loss)?;
    }
    let loss = total.scale(1.0 / pairs.len() as f64);
    let learned = cfg.method.mask_kind().is_some_and(MaskKind::is_learned);
    let mask_l1 = learned.then(|| {
        mean(pairs.iter().map(|p| {
            let s = |v: &[f64]| v.iter().sum::<f64>();
            s(&p.chosen.mask_u) + s(&p.chosen.mask_d) + s(&p.rejected.mask_u) + s(&p.rejected.mask_d)
        }))
    });
    let token_mean = |side: fn(&PairLoss) -> &SideBreakdown| {
        let (s, n) = pairs.iter().fold((0.0, 0usize), |(s, n), p| {
            let kl = &side(p).token_kl;
            (s + kl.iter().sum::<f64>(), n + kl.len())
        });
        s / n as f64
    };
    Ok(LossBreakdown {
        u: mean(pairs.iter().map(|p| p.u)),
        delta: mean(pairs.iter().map(|p| p.delta)),
        preference_loss: mean(pairs.iter().map(|p| p.preference_loss)),
        sparsity_mu: mean_opt(pairs.iter().map(|p| p.sparsity_mu)),
        sparsity_md: mean_opt(pairs.iter().map(|p| p.sparsity_md)),
        mask_l1,
        mean_token_kl_chosen: token_mean(|p| &p.chosen),
        mean_token_kl_rejected: token_mean(|p| &p.rejected),
        loss,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Trace over a prompt of one token and a response with the given
    /// per-position log-distributions.
    fn trace(log_dist: &[Vec<f64>], response: &[usize]) -> ForwardTrace {
        let v = log_dist[0].len();
        let t = response.len();
        let ld = Tensor::new(log_dist.concat(), &[t, v]).unwrap();
        let mut tokens = vec![0];
        tokens.extend_from_slice(response);
        ForwardTrace {
            token_log_probs: ld.gather_rows(response).unwrap(),
            vocab_log_dist: ld,
            logits: Tensor::zeros(&[t + 1, v]),
            hidden_states: vec![Tensor::zeros(&[t, 1])],
            taps: Vec::new(),
            tokens,
            response_start: 1,
        }
    }

    fn lg(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    fn nll_sigmoid(x: f64) -> f64 {
        (1.0 + (-x).exp()).ln()
    }

    #[test]
    fn kl_two_symbol_example() {
        let pol = trace(&[lg(&[0.75, 0.25])], &[0]);
        let reference = trace(&[lg(&[0.5, 0.5])], &[0]);
        let kl = token_kl(&pol, &reference).unwrap().to_vec();
        assert!((kl[0] - 0.130812).abs() < 1e-6);
        assert_eq!(token_kl(&pol, &pol).unwrap().to_vec(), vec![0.0]);
    }

    #[test]
    fn kl_rejects_unnormalized_rows() {
        let bad = trace(&[vec![0.0, 0.0]], &[0]);
        let ok = trace(&[lg(&[0.5, 0.5])], &[0]);
        assert!(token_kl(&bad, &ok).unwrap_err().to_string().contains("normalized"));
    }

    #[test]
    fn log_ratio_example() {
        let pol = trace(&[lg(&[(-1.0f64).exp(), 1.0 - (-1.0f64).exp()])], &[0]);
        let reference = trace(&[lg(&[(-1.5f64).exp(), 1.0 - (-1.5f64).exp()])], &[0]);
        let r = token_log_ratio(&pol, &reference).unwrap().to_vec();
        assert!((r[0] - 0.5).abs() < 1e-12);
        let short = trace(&[lg(&[0.5, 0.5]), lg(&[0.5, 0.5])], &[0, 1]);
        assert!(token_log_ratio(&pol, &short).is_err());
    }

    #[test]
    fn masked_kl_example() {
        let kl = Tensor::from_vec(vec![0.1, 0.3]);
        let v = masked_seq_kl(&kl, &Tensor::from_vec(vec![1.0, 0.5])).unwrap().item();
        assert!((v - 0.25).abs() < 1e-12);
        assert!(masked_seq_kl(&kl, &Tensor::from_vec(vec![1.0])).is_err());
    }

    /// Pair whose chosen summed log-ratio is `a` and rejected is `b`
    /// (single token, four-symbol vocabulary, uniform reference).
    fn pair_with_ratios(a: f64, b: f64) -> [ForwardTrace; 4] {
        let p = |r: f64| {
            let q = 0.25 * r.exp();
            let rest = (1.0 - q) / 3.0;
            lg(&[q, rest, rest, rest])
        };
        let uniform = lg(&[0.25; 4]);
        [
            trace(&[p(a)], &[0]),
            trace(&[p(b)], &[0]),
            trace(std::slice::from_ref(&uniform), &[0]),
            trace(&[uniform], &[0]),
        ]
    }

    fn run(cfg: &LossConfig, s: &MaskStrategy, t: &[ForwardTrace; 4]) -> PairLoss {
        pair_loss(
            cfg,
            s,
            PairTraces {
                policy_chosen: &t[0],
                policy_rejected: &t[1],
                ref_chosen: &t[2],
                ref_rejected: &t[3],
                mask_seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn dpo_example() {
        let t = pair_with_ratios(1.0, -1.0);
        let l = run(&LossConfig::with_method(Method::Dpo), &MaskStrategy::AllOnes, &t);
        assert!((l.preference_loss - 0.598139).abs() < 1e-6);
    }

    #[test]
    fn simpo_example() {
        let t = pair_with_ratios(0.0, 0.0);
        let cfg = LossConfig {
            beta: 2.5,
            simpo_gamma: 0.3,
            ..LossConfig::with_method(Method::Simpo)
        };
        let l = run(&cfg, &MaskStrategy::AllOnes, &t);
        assert!((l.preference_loss - 0.854355).abs() < 1e-6);
        let l0 = run(&LossConfig { simpo_gamma: 0.0, ..cfg }, &MaskStrategy::AllOnes, &t);
        assert!((l0.preference_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpop_example() {
        // chosen: reference lp −2, policy lp −3 on a single token
        let pc = lg(&[(-3.0f64).exp(), 1.0 - (-3.0f64).exp()]);
        let rc = lg(&[(-2.0f64).exp(), 1.0 - (-2.0f64).exp()]);
        // both responses carry ratio −1, so only the penalty moves the argument
        let t = [
            trace(std::slice::from_ref(&pc), &[0]),
            trace(&[pc], &[0]),
            trace(std::slice::from_ref(&rc), &[0]),
            trace(&[rc], &[0]),
        ];
        let cfg = LossConfig {
            beta: 1.0,
            dpop_lambda: 1.0,
            ..LossConfig::with_method(Method::Dpop)
        };
        let l = run(&cfg, &MaskStrategy::AllOnes, &t);
        assert!((l.preference_loss - 1.313262).abs() < 1e-6);
        let dpo = run(&LossConfig { dpop_lambda: 0.0, ..cfg }, &MaskStrategy::AllOnes, &t);
        assert!((dpo.preference_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn swap_negates_argument() {
        let t = pair_with_ratios(0.3, -0.2);
        let s = [t[1].clone(), t[0].clone(), t[3].clone(), t[2].clone()];
        for m in [Method::Dpo, Method::Tdpo1] {
            let cfg = LossConfig::with_method(m);
            let a = run(&cfg, &MaskStrategy::AllOnes, &t);
            let b = run(&cfg, &MaskStrategy::AllOnes, &s);
            assert!(((a.u - a.delta) + (b.u - b.delta)).abs() < 1e-12);
            let sa = 1.0 / (1.0 + (a.u - a.delta).exp().recip());
            let sb = 1.0 / (1.0 + (b.u - b.delta).exp().recip());
            assert!((sa + sb - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tdpo2_with_zero_alpha_is_dpo() {
        let t = pair_with_ratios(0.4, 0.1);
        let dpo = run(&LossConfig::with_method(Method::Dpo), &MaskStrategy::AllOnes, &t);
        let v2 = run(
            &LossConfig {
                alpha: 0.0,
                ..LossConfig::with_method(Method::Tdpo2)
            },
            &MaskStrategy::AllOnes,
            &t,
        );
        assert!((dpo.preference_loss - v2.preference_loss).abs() < 1e-15);
    }

    #[test]
    fn masked_method_requires_matching_strategy() {
        let t = pair_with_ratios(0.1, 0.1);
        let cfg = LossConfig::with_method(Method::SparseCommon);
        let err = pair_loss(
            &cfg,
            &MaskStrategy::AllOnes,
            PairTraces {
                policy_chosen: &t[0],
                policy_rejected: &t[1],
                ref_chosen: &t[2],
                ref_rejected: &t[3],
                mask_seed: 0,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("sparse-common"));
    }

    #[test]
    fn invalid_beta_rejected() {
        let cfg = LossConfig {
            beta: 0.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(batch_loss(&LossConfig::default(), &MaskStrategy::AllOnes, &[]).is_err());
    }

    #[test]
    fn all_ones_breakdown_matches_definition() {
        let t = pair_with_ratios(0.7, -0.2);
        let cfg = LossConfig::with_method(Method::Tdpo1);
        let l = run(&cfg, &MaskStrategy::AllOnes, &t);
        assert!((l.preference_loss - nll_sigmoid(l.u - l.delta)).abs() < 1e-12);
        assert_eq!(l.chosen.masked_rewards, l.chosen.log_ratios);
        assert_eq!(l.sparsity_mu, Some(0.0));
    }
}
