//! Token-level mask strategies for the reward (`m_u`) and KL (`m_d`) terms.
//!
//! Every strategy produces one weight per response token, clamped into
//! `[epsilon, 1]`. The weight for response token `t` is computed from the
//! reference model's state at the position of that token, which by
//! causality only sees the prefix up to and including it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sparsepo_tensor::Tensor;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, TapFamily, TapSite};

pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    AllOnes,
    Random,
    Binary,
    MaPO,
    LearnedCommon,
    LearnedIndependent,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::AllOnes => "all-ones",
            MaskKind::Random => "random",
            MaskKind::Binary => "binary",
            MaskKind::MaPO => "mapo",
            MaskKind::LearnedCommon => "learned-common",
            MaskKind::LearnedIndependent => "learned-independent",
        }
    }

    /// Strategies whose mask values carry trainable parameters (and so
    /// attract the L1 penalty).
    pub fn is_learned(self) -> bool {
        matches!(self, MaskKind::LearnedCommon | MaskKind::LearnedIndependent)
    }
}

/// Per-response-token weights. `weights` has shape `[T]` and may sit on
/// the tape when produced by a learned network.
#[derive(Debug, Clone)]
pub struct MaskValues {
    pub weights: Tensor,
    pub kind: MaskKind,
    pub epsilon: f64,
}

impl MaskValues {
    pub fn len(&self) -> usize {
        self.weights.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        self.weights.to_vec()
    }

    pub fn all_ones(len: usize) -> Self {
        Self {
            weights: Tensor::full(&[len], 1.0),
            kind: MaskKind::AllOnes,
            epsilon: 0.0,
        }
    }

    /// Fraction of weights at or below `zero_threshold`.
    pub fn sparsity(&self, zero_threshold: f64) -> Result<f64> {
        sparsity(&self.weights.data(), zero_threshold)
    }

    pub fn l1(&self) -> f64 {
        self.weights.data().iter().map(|w| w.abs()).sum()
    }
}

pub fn sparsity(weights: &[f64], zero_threshold: f64) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Mask("sparsity of an empty mask".into()));
    }
    if !(zero_threshold >= 0.0) {
        return Err(Error::Mask(format!("zero_threshold must be >= 0, got {zero_threshold}")));
    }
    let zeroed = weights.iter().filter(|&&w| w <= zero_threshold).count();
    Ok(zeroed as f64 / weights.len() as f64)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Mask(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    Ok(())
}

/// One `(w, b)` per model layer plus the merge vector `w_o`.
#[derive(Debug, Clone)]
pub struct MaskNetwork {
    /// Per layer: `w` of shape `[d, 1]`, `b` of shape `[1]`.
    pub layers: Vec<(Tensor, Tensor)>,
    /// `[L, 1]`.
    pub w_o: Tensor,
}

impl MaskNetwork {
    /// Small random `w`, positive bias and an averaging merge, so the
    /// initial mask sits near 0.5 away from both the floor and the ceiling.
    pub fn init(n_layers: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let layers = (0..n_layers)
            .map(|_| {
                let w = (0..d_model).map(|_| normal.sample(rng)).collect();
                (
                    Tensor::param(w, &[d_model, 1]).expect("shape"),
                    Tensor::param(vec![0.5], &[1]).expect("shape"),
                )
            })
            .collect();
        let w_o = Tensor::param(vec![1.0 / n_layers as f64; n_layers], &[n_layers, 1]).expect("shape");
        Self { layers, w_o }
    }

    /// Builds a network from explicit values (all trainable).
    pub fn from_values(layers: &[(Vec<f64>, f64)], w_o: Vec<f64>) -> Result<Self> {
        if layers.is_empty() || w_o.len() != layers.len() {
            return Err(Error::Mask(format!(
                "merge vector has {} entries for {} layers",
                w_o.len(),
                layers.len()
            )));
        }
        let layers = layers
            .iter()
            .map(|(w, b)| Ok((Tensor::param(w.clone(), &[w.len(), 1])?, Tensor::param(vec![*b], &[1])?)))
            .collect::<Result<_>>()?;
        let n = w_o.len();
        Ok(Self {
            layers,
            w_o: Tensor::param(w_o, &[n, 1])?,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.layers.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
        out.push(self.w_o.clone());
        out
    }

    pub fn zero_params(&self) {
        for p in self.params() {
            p.update_data(|d| d.iter_mut().for_each(|v| *v = 0.0));
        }
    }

    /// `Concat_l(ReLU(H_l w_l + b_l)) · w_o`, before the outer ReLU. Shape `[T]`.
    pub fn pre_activation(&self, hidden: &[Tensor]) -> Result<Tensor> {
        if hidden.len() != self.layers.len() {
            return Err(Error::Mask(format!(
                "mask network has {} layers but trace has {} hidden states",
                self.layers.len(),
                hidden.len()
            )));
        }
        let t = hidden[0].shape()[0];
        let per_layer = hidden
            .iter()
            .zip(&self.layers)
            .map(|(h, (w, b))| Ok(h.matmul(w)?.add_row(b)?.relu()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat(&per_layer, 1)?.matmul(&self.w_o)?.reshape(&[t])?)
    }

    pub fn forward(&self, hidden: &[Tensor], epsilon: f64, kind: MaskKind) -> Result<MaskValues> {
        check_epsilon(epsilon)?;
        let weights = self.pre_activation(hidden)?.relu().clamp(epsilon, 1.0);
        Ok(MaskValues { weights, kind, epsilon })
    }

    /// Sign-step variant: 1 where the merged pre-activation is positive,
    /// `epsilon` elsewhere. Carries no gradient.
    pub fn binary(&self, hidden: &[Tensor], epsilon: f64) -> Result<MaskValues> {
        check_epsilon(epsilon)?;
        let pre = self.pre_activation(hidden)?;
        let w: Vec<f64> = pre.data().iter().map(|&z| if z > 0.0 { 1.0 } else { epsilon }).collect();
        Ok(MaskValues {
            weights: Tensor::from_vec(w),
            kind: MaskKind::Binary,
            epsilon,
        })
    }

    pub fn to_archive(&self, prefix: &str, archive: &mut Archive) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            archive.push(format!("{prefix}w{i}"), w.shape(), w.to_vec());
            archive.push(format!("{prefix}b{i}"), b.shape(), b.to_vec());
        }
        archive.push(format!("{prefix}w_o"), self.w_o.shape(), self.w_o.to_vec());
    }

    pub fn load_from(&self, prefix: &str, archive: &Archive) -> Result<()> {
        let load = |name: String, t: &Tensor| -> Result<()> {
            let stored = archive.get(&name)?;
            if stored.shape != t.shape() {
                return Err(Error::Checkpoint(format!("mask tensor '{name}' has shape {:?}", stored.shape)));
            }
            t.update_data(|d| d.copy_from_slice(&stored.data));
            Ok(())
        };
        for (i, (w, b)) in self.layers.iter().enumerate() {
            load(format!("{prefix}w{i}"), w)?;
            load(format!("{prefix}b{i}"), b)?;
        }
        load(format!("{prefix}w_o"), &self.w_o)
    }
}

/// Mask strategy with whatever parameters it owns.
#[derive(Debug, Clone)]
pub enum MaskStrategy {
    AllOnes,
    Random { seed: u64 },
    Binary(MaskNetwork),
    MaPO { sites: Vec<TapSite> },
    LearnedCommon(MaskNetwork),
    LearnedIndependent { reward: MaskNetwork, divergence: MaskNetwork },
}

impl MaskStrategy {
    pub fn kind(&self) -> MaskKind {
        match self {
            MaskStrategy::AllOnes => MaskKind::AllOnes,
            MaskStrategy::Random { .. } => MaskKind::Random,
            MaskStrategy::Binary(_) => MaskKind::Binary,
            MaskStrategy::MaPO { .. } => MaskKind::MaPO,
            MaskStrategy::LearnedCommon(_) => MaskKind::LearnedCommon,
            MaskStrategy::LearnedIndependent { .. } => MaskKind::LearnedIndependent,
        }
    }

    /// Whether the reference trace must carry activation taps.
    pub fn needs_taps(&self) -> bool {
        matches!(self, MaskStrategy::MaPO { .. })
    }

    /// Trainable parameters (empty for the parameter-free strategies and
    /// for `Binary`, whose step function passes no gradient).
    pub fn trainable_params(&self) -> Vec<Tensor> {
        match self {
            MaskStrategy::LearnedCommon(n) => n.params(),
            MaskStrategy::LearnedIndependent { reward, divergence } => {
                let mut p = reward.params();
                p.extend(divergence.params());
                p
            }
            _ => Vec::new(),
        }
    }

    /// Every network the strategy owns, with a stable name prefix.
    pub fn networks(&self) -> Vec<(&'static str, &MaskNetwork)> {
        match self {
            MaskStrategy::Binary(n) | MaskStrategy::LearnedCommon(n) => vec![("mask.", n)],
            MaskStrategy::LearnedIndependent { reward, divergence } => {
                vec![("mask_u.", reward), ("mask_d.", divergence)]
            }
            _ => Vec::new(),
        }
    }

    /// `(m_u, m_d)` for one response. `sample_seed` individualizes the
    /// random strategy per response; other strategies ignore it.
    pub fn compute(&self, reference: &ForwardTrace, epsilon: f64, sample_seed: u64) -> Result<(MaskValues, MaskValues)> {
        let t = reference.response_len();
        if t == 0 {
            return Err(Error::Mask("empty response".into()));
        }
        match self {
            MaskStrategy::AllOnes => Ok((MaskValues::all_ones(t), MaskValues::all_ones(t))),
            MaskStrategy::Random { seed } => {
                let m = random_mask(t, epsilon, seed ^ sample_seed)?;
                Ok((m.clone(), m))
            }
            MaskStrategy::Binary(n) => {
                let m = n.binary(&reference.hidden_states, epsilon)?;
                Ok((m.clone(), m))
            }
            MaskStrategy::MaPO { sites } => {
                let m = mapo_mask(reference, sites, epsilon)?;
                Ok((m.clone(), m))
            }
            MaskStrategy::LearnedCommon(n) => {
                let m = n.forward(&reference.hidden_states, epsilon, MaskKind::LearnedCommon)?;
                Ok((m.clone(), m))
            }
            MaskStrategy::LearnedIndependent { reward, divergence } => Ok((
                reward.forward(&reference.hidden_states, epsilon, MaskKind::LearnedIndependent)?,
                divergence.forward(&reference.hidden_states, epsilon, MaskKind::LearnedIndependent)?,
            )),
        }
    }
}

/// Uniform `[0, 1)` draws floored at `epsilon`.
pub fn random_mask(len: usize, epsilon: f64, seed: u64) -> Result<MaskValues> {
    check_epsilon(epsilon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..len).map(|_| rng.random::<f64>().max(epsilon)).collect();
    Ok(MaskValues {
        weights: Tensor::from_vec(w),
        kind: MaskKind::Random,
        epsilon,
    })
}

/// Every tap site for an `n_layers` model, in trace order.
pub fn all_sites(n_layers: usize) -> Vec<TapSite> {
    (0..n_layers)
        .flat_map(|layer| TapFamily::ALL.into_iter().map(move |family| TapSite { layer, family }))
        .collect()
}

/// Standardizes `values` across the sequence with the population std. A
/// constant sequence has no scale to divide by and maps to all zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; values.len()];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Per-site standardized per-step activation means, before any averaging
/// or clamping.
pub fn mapo_standardized(trace: &ForwardTrace, sites: &[TapSite]) -> Result<Vec<(TapSite, Vec<f64>)>> {
    if trace.response_len() == 0 {
        return Err(Error::Mask("empty response".into()));
    }
    if sites.is_empty() {
        return Err(Error::Mask("no activation sites configured".into()));
    }
    sites
        .iter()
        .map(|site| {
            let tap = trace
                .taps
                .iter()
                .find(|tap| tap.site == *site)
                .ok_or_else(|| Error::Mask(format!("trace has no activation tap for site {site}")))?;
            let [t, d] = tap.values.shape() else {
                return Err(Error::Mask(format!("tap {site} is not 2-d")));
            };
            let data = tap.values.data();
            let means: Vec<f64> = (0..*t).map(|i| data[i * d..(i + 1) * d].iter().sum::<f64>() / *d as f64).collect();
            Ok((*site, standardize(&means)))
        })
        .collect()
}

/// Mean of the standardized sites, clamped into `[epsilon, 1]`.
pub fn mapo_from_standardized(per_site: &[Vec<f64>], epsilon: f64) -> Result<MaskValues> {
    check_epsilon(epsilon)?;
    let t = per_site.first().map(Vec::len).unwrap_or(0);
    if t == 0 {
        return Err(Error::Mask("empty response".into()));
    }
    let g = per_site.len() as f64;
    let w = (0..t)
        .map(|i| (per_site.iter().map(|s| s[i]).sum::<f64>() / g).clamp(epsilon, 1.0))
        .collect();
    Ok(MaskValues {
        weights: Tensor::from_vec(w),
        kind: MaskKind::MaPO,
        epsilon,
    })
}

pub fn mapo_mask(trace: &ForwardTrace, sites: &[TapSite], epsilon: f64) -> Result<MaskValues> {
    let per_site: Vec<Vec<f64>> = mapo_standardized(trace, sites)?.into_iter().map(|(_, v)| v).collect();
    mapo_from_standardized(&per_site, epsilon)
}
