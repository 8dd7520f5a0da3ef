//! Evaluation and reporting: preference accuracy, reward/KL frontier
//! points, token heatmaps, sparsity tables and the mask-selectivity test.
//!
//! Tables are comma-separated with a leading `# format=<name> version=1`
//! comment line and a header row. Heatmaps are line-delimited JSON with a
//! header record.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparsepo_tensor::no_grad;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ground_truth_reward, model_input, Dataset, PreferencePair, VocabSpec};
use crate::error::{Error, Result};
use crate::losses::{pair_loss, token_kl, LossConfig, Method};
use crate::masks::MaskStrategy;
use crate::model::{SamplerConfig, TransformerLM};
use crate::train::{mix_seed, MetricsRecord, PairForward};

pub const FRONTIER_FORMAT: &str = "sparsepo-frontier";
pub const SPARSITY_FORMAT: &str = "sparsepo-sparsity";
pub const HEATMAP_FORMAT: &str = "sparsepo-heatmap";
pub const TABLE_VERSION: u32 = 1;

/// Default β grid for the sparsity sweep.
pub const DEFAULT_BETA_GRID: [f64; 17] = [
    0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0,
];

/// Implicit preference margin of the policy on one pair: β-weighted
/// summed log-ratio difference, or for SimPO the length-normalized
/// log-probability difference minus the target margin.
pub fn preference_margin(cfg: &LossConfig, f: &PairForward) -> Result<f64> {
    let sum = |t: &crate::model::ForwardTrace| t.token_log_probs.data().iter().sum::<f64>();
    if cfg.method == Method::Simpo {
        let avg = |t: &crate::model::ForwardTrace| sum(t) / t.response_len() as f64;
        return Ok(cfg.beta * (avg(&f.policy_chosen) - avg(&f.policy_rejected)) - cfg.simpo_gamma);
    }
    let lr_c = sum(&f.policy_chosen) - sum(&f.ref_chosen);
    let lr_r = sum(&f.policy_rejected) - sum(&f.ref_rejected);
    Ok(cfg.beta * (lr_c - lr_r))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub n_pairs: usize,
    pub n_ties: usize,
    pub margins: Vec<f64>,
}

/// Positive margins count 1, exact ties 0.5.
pub fn accuracy_from_margins(margins: &[f64]) -> Result<AccuracyReport> {
    if margins.is_empty() {
        return Err(Error::Analysis("preference accuracy of an empty dataset".into()));
    }
    let mut score = 0.0;
    let mut ties = 0;
    for &m in margins {
        if m > 0.0 {
            score += 1.0;
        } else if m == 0.0 {
            score += 0.5;
            ties += 1;
        }
    }
    Ok(AccuracyReport {
        accuracy: score / margins.len() as f64,
        n_pairs: margins.len(),
        n_ties: ties,
        margins: margins.to_vec(),
    })
}

pub fn preference_accuracy(
    policy: &TransformerLM,
    reference: &TransformerLM,
    data: &Dataset,
    cfg: &LossConfig,
) -> Result<AccuracyReport> {
    let margins = no_grad(|| {
        data.pairs
            .iter()
            .map(|p| preference_margin(cfg, &PairForward::new(policy, reference, &data.spec, p, false)?))
            .collect::<Result<Vec<_>>>()
    })?;
    accuracy_from_margins(&margins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub run: String,
    pub beta: f64,
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub n_prompts: usize,
    pub n_truncated: usize,
}

/// One sampled completion per prompt, scored by the cue rule, with the
/// response-level KL summed along the sampled trajectory.
pub fn frontier_stats(
    policy: &TransformerLM,
    reference: &TransformerLM,
    spec: &VocabSpec,
    prompts: &[Vec<usize>],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    if prompts.is_empty() {
        return Err(Error::Analysis("no prompts to sample from".into()));
    }
    let (mut reward, mut kl, mut truncated) = (0.0, 0.0, 0);
    for (i, prompt) in prompts.iter().enumerate() {
        let (input, start) = model_input(spec, prompt, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let sample = policy.sample(&input, sampler, spec.eos, &mut rng)?;
        if sample.truncated {
            truncated += 1;
        }
        if sample.tokens.is_empty() {
            // context already full: nothing generated, nothing diverged
            reward += 0.5;
            continue;
        }
        reward += ground_truth_reward(&sample.tokens, spec)?;
        let (tokens, _) = model_input(spec, prompt, &sample.tokens);
        let seq_kl = no_grad(|| -> Result<f64> {
            let p = policy.trace(&tokens, start, false)?;
            let r = reference.trace(&tokens, start, false)?;
            Ok(token_kl(&p, &r)?.data().iter().sum())
        })?;
        kl += seq_kl;
    }
    let n = prompts.len() as f64;
    Ok((reward / n, kl / n, truncated))
}

fn table_writer(path: &Path, format: &str) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "# format={format} version={TABLE_VERSION}")?;
    Ok(csv::Writer::from_writer(f))
}

fn read_table<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Analysis(format!("{}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or("");
    let expected = format!("# format={format} version={TABLE_VERSION}");
    if first.trim() != expected {
        return Err(Error::Analysis(format!(
            "{}: expected header line '{expected}', found '{first}'",
            path.display()
        )));
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn write_frontier(path: &Path, points: &[FrontierPoint]) -> Result<()> {
    let mut w = table_writer(path, FRONTIER_FORMAT)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_frontier(path: &Path) -> Result<Vec<FrontierPoint>> {
    read_table(path, FRONTIER_FORMAT)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub beta: f64,
    pub step: usize,
    pub sparsity_mu: Option<f64>,
    pub sparsity_md: Option<f64>,
    pub mean_token_kl_chosen: f64,
    pub mean_token_kl_rejected: f64,
}

pub fn sparsity_rows(beta: f64, metrics: &[MetricsRecord]) -> Vec<SparsityRow> {
    metrics
        .iter()
        .map(|m| SparsityRow {
            beta,
            step: m.step,
            sparsity_mu: m.sparsity_mu,
            sparsity_md: m.sparsity_md,
            mean_token_kl_chosen: m.mean_token_kl_chosen,
            mean_token_kl_rejected: m.mean_token_kl_rejected,
        })
        .collect()
}

/// Grid values with no matching run (compared to 1e-9).
pub fn missing_betas(grid: &[f64], present: &[f64]) -> Vec<f64> {
    grid.iter()
        .copied()
        .filter(|g| !present.iter().any(|p| (p - g).abs() < 1e-9))
        .collect()
}

pub fn write_sparsity(path: &Path, rows: &[SparsityRow]) -> Result<()> {
    let mut w = table_writer(path, SPARSITY_FORMAT)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sparsity(path: &Path) -> Result<Vec<SparsityRow>> {
    read_table(path, SPARSITY_FORMAT)
}

/// One heatmap row: a per-token quantity of one response, raw or masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub pair: usize,
    pub side: String,
    pub quantity: String,
    pub stage: String,
    pub tokens: Vec<usize>,
    pub values: Vec<f64>,
    pub scaled: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

/// Min-max scaling into `[0, 1]`; constant rows map to 0.5 and report
/// degenerate.
pub fn min_max_scale(values: &[f64]) -> (Vec<f64>, f64, f64, bool) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return (vec![0.5; values.len()], min, max, true);
    }
    let scaled = values.iter().map(|v| (v - min) / (max - min)).collect();
    (scaled, min, max, false)
}

/// Rows for one pair: {chosen, rejected} × {reward, kl} × {raw, masked}.
pub fn heatmap_rows(
    policy: &TransformerLM,
    reference: &TransformerLM,
    strategy: &MaskStrategy,
    cfg: &LossConfig,
    spec: &VocabSpec,
    pair: &PreferencePair,
    index: usize,
) -> Result<Vec<HeatmapRow>> {
    let loss = no_grad(|| -> Result<_> {
        let f = PairForward::new(policy, reference, spec, pair, strategy.needs_taps())?;
        pair_loss(cfg, strategy, f.traces(index as u64))
    })?;
    let mut rows = Vec::new();
    for (side, tokens, b) in [("chosen", &pair.chosen, &loss.chosen), ("rejected", &pair.rejected, &loss.rejected)] {
        for (quantity, raw, masked) in [
            ("reward", &b.log_ratios, &b.masked_rewards),
            ("kl", &b.token_kl, &b.masked_kl),
        ] {
            for (stage, values) in [("raw", raw), ("masked", masked)] {
                let (scaled, min, max, degenerate) = min_max_scale(values);
                rows.push(HeatmapRow {
                    pair: index,
                    side: side.into(),
                    quantity: quantity.into(),
                    stage: stage.into(),
                    tokens: tokens.clone(),
                    values: values.clone(),
                    scaled,
                    min,
                    max,
                    degenerate,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_heatmap(path: &Path, method: Method, rows: &[HeatmapRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    serde_json::to_writer(
        &mut f,
        &serde_json::json!({
            "format": HEATMAP_FORMAT,
            "version": TABLE_VERSION,
            "method": method.name(),
            "scaling": "min-max per row",
        }),
    )?;
    writeln!(f)?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_heatmap(path: &Path) -> Result<Vec<HeatmapRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap_or(""))?;
    if header["format"] != HEATMAP_FORMAT {
        return Err(Error::Analysis(format!("{}: not a heatmap file", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankTest {
    pub n: usize,
    pub w_plus: f64,
    pub z: f64,
    pub p_value: f64,
}

/// One-sided Wilcoxon signed-rank test of `median(d) > 0`, normal
/// approximation with tie and continuity corrections. Zero differences
/// are dropped.
pub fn wilcoxon_signed_rank_greater(diffs: &[f64]) -> Result<RankTest> {
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Err(Error::Analysis("signed-rank test with no non-zero differences".into()));
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut w_plus = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for d in &nz[i..=j] {
            if *d > 0.0 {
                w_plus += rank;
            }
        }
        i = j + 1;
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = if var > 0.0 { (w_plus - mean - 0.5) / var.sqrt() } else { 0.0 };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(RankTest {
        n,
        w_plus,
        z,
        p_value: 1.0 - normal.cdf(z),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectivityReport {
    pub n_responses: usize,
    pub mean_cue_weight: f64,
    pub mean_filler_weight: f64,
    pub test: RankTest,
}

/// Compares `m_u` on positive-cue positions against filler positions of
/// each chosen response.
pub fn mask_selectivity(
    reference: &TransformerLM,
    strategy: &MaskStrategy,
    epsilon: f64,
    data: &Dataset,
) -> Result<SelectivityReport> {
    let spec = &data.spec;
    let mut diffs = Vec::new();
    let (mut cue_sum, mut cue_n, mut fill_sum, mut fill_n) = (0.0, 0usize, 0.0, 0usize);
    no_grad(|| -> Result<()> {
        for (i, p) in data.pairs.iter().enumerate() {
            let (tokens, start) = model_input(spec, &p.prompt, &p.chosen);
            let tr = reference.trace(&tokens, start, strategy.needs_taps())?;
            let (mu, _) = strategy.compute(&tr, epsilon, i as u64)?;
            let w = mu.values();
            let (mut c, mut cn, mut f, mut fnn) = (0.0, 0usize, 0.0, 0usize);
            for (&tok, &wt) in p.chosen.iter().zip(&w) {
                if spec.is_positive(tok) {
                    c += wt;
                    cn += 1;
                } else if !spec.is_special(tok) && !spec.is_cue(tok) {
                    f += wt;
                    fnn += 1;
                }
            }
            if cn > 0 && fnn > 0 {
                diffs.push(c / cn as f64 - f / fnn as f64);
                cue_sum += c;
                cue_n += cn;
                fill_sum += f;
                fill_n += fnn;
            }
        }
        Ok(())
    })?;
    if diffs.is_empty() {
        return Err(Error::Analysis("no response has both cue and filler tokens".into()));
    }
    Ok(SelectivityReport {
        n_responses: diffs.len(),
        mean_cue_weight: cue_sum / cue_n as f64,
        mean_filler_weight: fill_sum / fill_n as f64,
        test: wilcoxon_signed_rank_greater(&diffs)?,
    })
}
