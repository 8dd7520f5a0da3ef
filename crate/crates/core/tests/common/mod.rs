//! Shared fixtures for the integration tests and the acceptance run: tiny
//! hand-built traces, and a closed-form scalar oracle that evaluates every
//! objective directly from probabilities with plain `f64` arithmetic.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsepo::losses::{pair_loss, LossConfig, Method, PairLoss, PairTraces};
use sparsepo::masks::{all_sites, MaskNetwork, MaskStrategy};
use sparsepo::model::{ActivationTap, ForwardTrace};
use sparsepo_tensor::Tensor;

pub const LAYERS: usize = 2;
pub const WIDTH: usize = 2;
/// Activation sites per trace (`LAYERS` layers times three families).
pub const SITES: usize = 3 * LAYERS;

/// One response: policy and reference logits per position plus the
/// reference-side states the masks read.
#[derive(Debug, Clone)]
pub struct Side {
    pub policy_logits: Vec<Vec<f64>>,
    pub ref_logits: Vec<Vec<f64>>,
    pub response: Vec<usize>,
    /// `[layer][t][k]`.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// `[site][t][k]`, sites in `all_sites(LAYERS)` order.
    pub taps: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct NetValues {
    pub layers: Vec<(Vec<f64>, f64)>,
    pub w_o: Vec<f64>,
}

impl NetValues {
    pub fn network(&self) -> MaskNetwork {
        MaskNetwork::from_values(&self.layers, self.w_o.clone()).unwrap()
    }

    /// Trainable tensors in `(w0, b0, w1, b1, w_o)` order.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.push(Tensor::new(w.clone(), &[w.len(), 1]).unwrap());
            out.push(Tensor::new(vec![*b], &[1]).unwrap());
        }
        out.push(Tensor::new(self.w_o.clone(), &[self.w_o.len(), 1]).unwrap());
        out
    }
}

/// Rebuilds a network from tensors laid out as in [`NetValues::tensors`].
pub fn network_from(t: &[Tensor]) -> MaskNetwork {
    let n = (t.len() - 1) / 2;
    MaskNetwork {
        layers: (0..n).map(|l| (t[2 * l].clone(), t[2 * l + 1].clone())).collect(),
        w_o: t[2 * n].clone(),
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub vocab: usize,
    pub chosen: Side,
    pub rejected: Side,
    pub net_u: NetValues,
    pub net_d: NetValues,
    pub net_binary: NetValues,
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    Tensor::new(rows.concat(), &[rows.len(), cols]).unwrap()
}

/// Trace over `side` whose policy log-distribution is `log_softmax(logits)`.
pub fn trace_from(logits: &Tensor, side: &Side) -> ForwardTrace {
    let vocab_log_dist = logits.log_softmax(1).unwrap();
    let token_log_probs = vocab_log_dist.gather_rows(&side.response).unwrap();
    let mut tokens = vec![0];
    tokens.extend(&side.response);
    ForwardTrace {
        tokens,
        response_start: 1,
        logits: logits.clone(),
        vocab_log_dist,
        token_log_probs,
        hidden_states: side.hidden.iter().map(|h| matrix(h)).collect(),
        taps: all_sites(LAYERS)
            .into_iter()
            .zip(&side.taps)
            .map(|(site, v)| ActivationTap { site, values: matrix(v) })
            .collect(),
    }
}

pub fn strategy_for(method: Method, f: &Fixture) -> MaskStrategy {
    match method {
        Method::Mapo => MaskStrategy::MaPO { sites: all_sites(LAYERS) },
        Method::SparseCommon => MaskStrategy::LearnedCommon(f.net_u.network()),
        Method::SparseIndep => MaskStrategy::LearnedIndependent {
            reward: f.net_u.network(),
            divergence: f.net_d.network(),
        },
        Method::MaskRandom => MaskStrategy::Random { seed: 7 },
        Method::MaskBinary => MaskStrategy::Binary(f.net_binary.network()),
        _ => MaskStrategy::AllOnes,
    }
}

/// Library loss for `f`, with the policy logits given explicitly so
/// gradient checks can substitute their own leaves.
pub fn library_loss_with(
    cfg: &LossConfig,
    strategy: &MaskStrategy,
    f: &Fixture,
    policy_chosen: &Tensor,
    policy_rejected: &Tensor,
) -> PairLoss {
    let pc = trace_from(policy_chosen, &f.chosen);
    let pr = trace_from(policy_rejected, &f.rejected);
    let rc = trace_from(&matrix(&f.chosen.ref_logits), &f.chosen);
    let rr = trace_from(&matrix(&f.rejected.ref_logits), &f.rejected);
    pair_loss(
        cfg,
        strategy,
        PairTraces {
            policy_chosen: &pc,
            policy_rejected: &pr,
            ref_chosen: &rc,
            ref_rejected: &rr,
            mask_seed: 11,
        },
    )
    .unwrap()
}

pub fn library_loss(cfg: &LossConfig, f: &Fixture) -> PairLoss {
    library_loss_with(
        cfg,
        &strategy_for(cfg.method, f),
        f,
        &matrix(&f.chosen.policy_logits),
        &matrix(&f.rejected.policy_logits),
    )
}

fn draw(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn draw_side(rng: &mut ChaCha8Rng, vocab: usize, t: usize) -> Side {
    Side {
        policy_logits: (0..t).map(|_| draw(rng, vocab, -2.0, 2.0)).collect(),
        ref_logits: (0..t).map(|_| draw(rng, vocab, -2.0, 2.0)).collect(),
        response: (0..t).map(|_| rng.random_range(0..vocab)).collect(),
        hidden: (0..LAYERS)
            .map(|_| (0..t).map(|_| draw(rng, WIDTH, -1.0, 1.0)).collect())
            .collect(),
        taps: (0..SITES)
            .map(|_| (0..t).map(|_| draw(rng, WIDTH, -1.5, 1.5)).collect())
            .collect(),
    }
}

/// Wide-range mask network: outputs land below the floor, inside the
/// interval and above the ceiling.
fn draw_net_wide(rng: &mut ChaCha8Rng) -> NetValues {
    NetValues {
        layers: (0..LAYERS)
            .map(|_| (draw(rng, WIDTH, -1.0, 1.0), rng.random_range(-0.5..0.5)))
            .collect(),
        w_o: draw(rng, LAYERS, -0.5, 1.5),
    }
}

/// Network whose outputs stay well inside `(ε, 1)`, away from every kink.
fn draw_net_smooth(rng: &mut ChaCha8Rng) -> NetValues {
    NetValues {
        layers: (0..LAYERS)
            .map(|_| (draw(rng, WIDTH, -0.2, 0.2), rng.random_range(0.4..0.6)))
            .collect(),
        w_o: draw(rng, LAYERS, 0.4, 0.6),
    }
}

pub fn random_fixture(seed: u64, vocab: usize, tc: usize, tr: usize, smooth: bool) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = draw_side(&mut rng, vocab, tc);
    let rejected = draw_side(&mut rng, vocab, tr);
    let net = |rng: &mut ChaCha8Rng| if smooth { draw_net_smooth(rng) } else { draw_net_wide(rng) };
    let net_u = net(&mut rng);
    let net_d = net(&mut rng);
    let net_binary = draw_net_wide(&mut rng);
    Fixture {
        vocab,
        chosen,
        rejected,
        net_u,
        net_d,
        net_binary,
    }
}

/// Vocabulary {2, 3} × chosen length {1, 2} × rejected length {1, 2} ×
/// beta {0.1, 1, 2.5} × 24 value draws: 576 parameterizations.
pub fn oracle_grid() -> Vec<(Fixture, f64)> {
    let mut out = Vec::new();
    let mut seed = 0u64;
    for vocab in [2, 3] {
        for tc in [1, 2] {
            for tr in [1, 2] {
                for beta in [0.1, 1.0, 2.5] {
                    for _ in 0..24 {
                        seed += 1;
                        out.push((random_fixture(seed, vocab, tc, tr, false), beta));
                    }
                }
            }
        }
    }
    out
}

pub mod oracle {
    //! Closed-form evaluation from the written formulas, independent of
    //! the tensor engine.

    use super::{Fixture, NetValues, Side};
    use sparsepo::losses::{LossConfig, Method};

    pub fn log_softmax(z: &[f64]) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        z.iter().map(|x| x - lse).collect()
    }

    /// `-log σ(x)`.
    pub fn neg_log_sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            (-x).exp().ln_1p()
        } else {
            -x + x.exp().ln_1p()
        }
    }

    pub struct Terms {
        pub log_ratio: Vec<f64>,
        pub kl: Vec<f64>,
        pub avg_log_prob: f64,
    }

    pub fn terms(side: &Side) -> Terms {
        let mut log_ratio = Vec::new();
        let mut kl = Vec::new();
        let mut lp_sum = 0.0;
        for ((pz, rz), &y) in side.policy_logits.iter().zip(&side.ref_logits).zip(&side.response) {
            let lp = log_softmax(pz);
            let lr = log_softmax(rz);
            log_ratio.push(lp[y] - lr[y]);
            lp_sum += lp[y];
            kl.push(lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum());
        }
        Terms {
            avg_log_prob: lp_sum / side.response.len() as f64,
            log_ratio,
            kl,
        }
    }

    fn merged(net: &NetValues, side: &Side, t: usize) -> f64 {
        net.layers
            .iter()
            .zip(&net.w_o)
            .zip(&side.hidden)
            .map(|(((w, b), wo), h)| {
                let z: f64 = h[t].iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b;
                wo * z.max(0.0)
            })
            .sum()
    }

    pub fn learned_mask(net: &NetValues, side: &Side, eps: f64) -> Vec<f64> {
        (0..side.response.len())
            .map(|t| merged(net, side, t).max(0.0).clamp(eps, 1.0))
            .collect()
    }

    pub fn binary_mask(net: &NetValues, side: &Side, eps: f64) -> Vec<f64> {
        (0..side.response.len())
            .map(|t| if merged(net, side, t) > 0.0 { 1.0 } else { eps })
            .collect()
    }

    pub fn mapo_mask(side: &Side, eps: f64) -> Vec<f64> {
        let n = side.response.len();
        let mut acc = vec![0.0; n];
        for site in &side.taps {
            let a: Vec<f64> = site.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
            let mean = a.iter().sum::<f64>() / n as f64;
            let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
            if a.iter().any(|x| *x != a[0]) {
                for (t, x) in a.iter().enumerate() {
                    acc[t] += (x - mean) / std;
                }
            }
        }
        acc.iter().map(|s| (s / side.taps.len() as f64).clamp(eps, 1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Masks `(m_u, m_d)` per side for masked methods.
    pub type SideMasks = (Vec<f64>, Vec<f64>);

    /// Total loss for `method` on `f`. `random` supplies the masks of the
    /// random strategy, whose draws are not a closed form.
    pub fn loss(cfg: &LossConfig, f: &Fixture, random: Option<(SideMasks, SideMasks)>) -> f64 {
        let b = cfg.beta;
        let c = terms(&f.chosen);
        let r = terms(&f.rejected);
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let ones = |s: &Side| vec![1.0; s.response.len()];
        let eps = cfg.epsilon;
        match cfg.method {
            Method::Dpo => neg_log_sigmoid(b * (sum(&c.log_ratio) - sum(&r.log_ratio))),
            Method::Dpop => {
                let pen = (-sum(&c.log_ratio)).max(0.0);
                neg_log_sigmoid(b * (sum(&c.log_ratio) - sum(&r.log_ratio) - cfg.dpop_lambda * pen))
            }
            Method::Simpo => neg_log_sigmoid(b * (c.avg_log_prob - r.avg_log_prob) - cfg.simpo_gamma),
            Method::Tdpo2 => {
                let u = b * (sum(&c.log_ratio) - sum(&r.log_ratio));
                let delta = cfg.alpha * b * (sum(&r.kl) - sum(&c.kl));
                neg_log_sigmoid(u - delta)
            }
            m => {
                let ((mu_c, md_c), (mu_r, md_r)) = match m {
                    Method::Tdpo1 => ((ones(&f.chosen), ones(&f.chosen)), (ones(&f.rejected), ones(&f.rejected))),
                    Method::SparseCommon => {
                        let c = learned_mask(&f.net_u, &f.chosen, eps);
                        let r = learned_mask(&f.net_u, &f.rejected, eps);
                        ((c.clone(), c), (r.clone(), r))
                    }
                    Method::SparseIndep => (
                        (learned_mask(&f.net_u, &f.chosen, eps), learned_mask(&f.net_d, &f.chosen, eps)),
                        (learned_mask(&f.net_u, &f.rejected, eps), learned_mask(&f.net_d, &f.rejected, eps)),
                    ),
                    Method::Mapo => {
                        let c = mapo_mask(&f.chosen, eps);
                        let r = mapo_mask(&f.rejected, eps);
                        ((c.clone(), c), (r.clone(), r))
                    }
                    Method::MaskBinary => {
                        let c = binary_mask(&f.net_binary, &f.chosen, eps);
                        let r = binary_mask(&f.net_binary, &f.rejected, eps);
                        ((c.clone(), c), (r.clone(), r))
                    }
                    Method::MaskRandom => random.expect("random masks supplied"),
                    _ => unreachable!(),
                };
                let u = b * (dot(&mu_c, &c.log_ratio) - dot(&mu_r, &r.log_ratio));
                let delta = b * (dot(&md_c, &c.kl) - dot(&md_r, &r.kl));
                let l1 = if matches!(m, Method::SparseCommon | Method::SparseIndep) {
                    cfg.l1_coeff * (sum(&mu_c) + sum(&md_c) + sum(&mu_r) + sum(&md_r))
                } else {
                    0.0
                };
                neg_log_sigmoid(u - delta) + l1
            }
        }
    }
}

/// Finite-difference check of one objective's gradient on a random
/// 5-symbol pair (3 chosen, 4 rejected tokens) with kink-free masks.
/// Inputs are both policy logit matrices plus any learned mask parameters.
/// Returns `(passed, max relative error)`.
pub fn loss_gradcheck(method: Method, seed: u64, tol: f64) -> (bool, f64) {
    use sparsepo_tensor::check_gradient;
    let f = random_fixture(seed.wrapping_add(10_000), 5, 3, 4, true);
    let cfg = LossConfig {
        beta: 0.7,
        ..LossConfig::with_method(method)
    };
    if method == Method::Tdpo2 {
        return tdpo2_gradcheck(&cfg, &f, tol);
    }
    let mut inputs = vec![matrix(&f.chosen.policy_logits), matrix(&f.rejected.policy_logits)];
    match method {
        Method::SparseCommon => inputs.extend(f.net_u.tensors()),
        Method::SparseIndep => {
            inputs.extend(f.net_u.tensors());
            inputs.extend(f.net_d.tensors());
        }
        _ => {}
    }
    let per_net = 2 * LAYERS + 1;
    let report = check_gradient(
        |x| {
            let strategy = match method {
                Method::SparseCommon => MaskStrategy::LearnedCommon(network_from(&x[2..2 + per_net])),
                Method::SparseIndep => MaskStrategy::LearnedIndependent {
                    reward: network_from(&x[2..2 + per_net]),
                    divergence: network_from(&x[2 + per_net..2 + 2 * per_net]),
                },
                _ => strategy_for(method, &f),
            };
            Ok(library_loss_with(&cfg, &strategy, &f, &x[0], &x[1]).loss)
        },
        &inputs,
        1e-6,
        tol,
    )
    .unwrap();
    (report.passed(), report.max_relative_error)
}

/// The chosen-side KL of TDPO v2 is detached, so its gradient is the
/// derivative of the objective with that KL frozen at its current value.
/// The numeric side comes from the scalar oracle with the frozen term.
fn tdpo2_gradcheck(cfg: &LossConfig, f: &Fixture, tol: f64) -> (bool, f64) {
    let pc = Tensor::param(f.chosen.policy_logits.concat(), &[f.chosen.response.len(), f.vocab]).unwrap();
    let pr = Tensor::param(f.rejected.policy_logits.concat(), &[f.rejected.response.len(), f.vocab]).unwrap();
    let l = library_loss_with(cfg, &MaskStrategy::AllOnes, f, &pc, &pr);
    l.loss.backward().unwrap();
    let analytic = [pc.grad().unwrap(), pr.grad().unwrap()];

    let frozen_kl_c: f64 = oracle::terms(&f.chosen).kl.iter().sum();
    let surrogate = |g: &Fixture| {
        let c = oracle::terms(&g.chosen);
        let r = oracle::terms(&g.rejected);
        let s = |v: &[f64]| v.iter().sum::<f64>();
        let u = cfg.beta * (s(&c.log_ratio) - s(&r.log_ratio));
        let delta = cfg.alpha * cfg.beta * (s(&r.kl) - frozen_kl_c);
        oracle::neg_log_sigmoid(u - delta)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (which, grads) in analytic.iter().enumerate() {
        for (idx, &a) in grads.iter().enumerate() {
            let shifted = |d: f64| {
                let mut g = f.clone();
                let side = if which == 0 { &mut g.chosen } else { &mut g.rejected };
                side.policy_logits[idx / f.vocab][idx % f.vocab] += d;
                surrogate(&g)
            };
            let num = (shifted(h) - shifted(-h)) / (2.0 * h);
            let err = (a - num).abs() / a.abs().max(num.abs()).max(sparsepo_tensor::RELATIVE_ERROR_FLOOR);
            worst = worst.max(err);
        }
    }
    (worst <= tol, worst)
}

/// `(library, oracle)` loss values for `method` on `f`.
pub fn oracle_pair(method: Method, f: &Fixture, beta: f64) -> (f64, f64) {
    let cfg = LossConfig {
        beta,
        l1_coeff: 0.05,
        ..LossConfig::with_method(method)
    };
    let lib = library_loss(&cfg, f);
    let random = (method == Method::MaskRandom).then(|| {
        (
            (lib.chosen.mask_u.clone(), lib.chosen.mask_d.clone()),
            (lib.rejected.mask_u.clone(), lib.rejected.mask_d.clone()),
        )
    });
    (lib.loss.item(), oracle::loss(&cfg, f, random))
}
