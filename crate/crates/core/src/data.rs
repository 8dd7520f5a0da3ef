//! Synthetic preference data with a known token-level ground truth.
//!
//! Responses are filler tokens sprinkled with cue tokens: chosen responses
//! carry positive cues, rejected ones negative cues. The scorer only
//! counts cues, so the preference-bearing positions of every response are
//! known exactly.
//!
//! Files are line-delimited JSON. The first line is a header:
//!
//! ```text
//! {"format":"sparsepo-dataset","version":1,"kind":"pairs","vocab":{...}}
//! {"prompt":[..],"chosen":[..],"rejected":[..],"chosen_score":0.75,"rejected_score":0.25}
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "sparsepo-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub vocab_size: usize,
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
    pub positive_cues: Vec<usize>,
    pub negative_cues: Vec<usize>,
}

impl VocabSpec {
    /// Specials at 0..3, then the positive cues, then the negative cues;
    /// everything above is filler.
    pub fn standard(vocab_size: usize, n_positive: usize, n_negative: usize) -> Result<Self> {
        let spec = Self {
            vocab_size,
            bos: 0,
            eos: 1,
            pad: 2,
            positive_cues: (3..3 + n_positive).collect(),
            negative_cues: (3 + n_positive..3 + n_positive + n_negative).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positive_cues.is_empty() || self.negative_cues.is_empty() {
            return Err(Error::Data("cue sets must be non-empty".into()));
        }
        let special = [self.bos, self.eos, self.pad];
        let mut seen = vec![false; self.vocab_size];
        for &id in special.iter().chain(&self.positive_cues).chain(&self.negative_cues) {
            if id >= self.vocab_size {
                return Err(Error::Data(format!("token id {id} outside vocab_size {}", self.vocab_size)));
            }
            if seen[id] {
                return Err(Error::Data(format!("token id {id} assigned to more than one role")));
            }
            seen[id] = true;
        }
        if self.filler().is_empty() {
            return Err(Error::Data("no filler tokens left in the vocabulary".into()));
        }
        Ok(())
    }

    pub fn filler(&self) -> Vec<usize> {
        (0..self.vocab_size)
            .filter(|id| !self.is_special(*id) && !self.is_cue(*id))
            .collect()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }

    pub fn is_positive(&self, id: usize) -> bool {
        self.positive_cues.contains(&id)
    }

    pub fn is_negative(&self, id: usize) -> bool {
        self.negative_cues.contains(&id)
    }

    pub fn is_cue(&self, id: usize) -> bool {
        self.is_positive(id) || self.is_negative(id)
    }
}

/// Bag-of-cues score in `[0, 1]`: `(1 + (n_pos - n_neg) / n) / 2` over the
/// non-special tokens of `y`. A response made only of special tokens
/// scores 0.5.
pub fn ground_truth_reward(y: &[usize], spec: &VocabSpec) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Data("cannot score an empty sequence".into()));
    }
    let content: Vec<usize> = y.iter().copied().filter(|&id| !spec.is_special(id)).collect();
    if content.is_empty() {
        return Ok(0.5);
    }
    let pos = content.iter().filter(|&&id| spec.is_positive(id)).count() as f64;
    let neg = content.iter().filter(|&&id| spec.is_negative(id)).count() as f64;
    Ok((1.0 + (pos - neg) / content.len() as f64) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

/// Model input for `prompt ++ response` and the index where the response
/// begins.
pub fn model_input(spec: &VocabSpec, prompt: &[usize], response: &[usize]) -> (Vec<usize>, usize) {
    let mut tokens = Vec::with_capacity(1 + prompt.len() + response.len());
    tokens.push(spec.bos);
    tokens.extend_from_slice(prompt);
    let start = tokens.len();
    tokens.extend_from_slice(response);
    (tokens, start)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub n: usize,
    pub prompt_len: usize,
    /// Content tokens per response, before the trailing eos.
    pub resp_len: usize,
    pub cue_density: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            prompt_len: 8,
            resp_len: 16,
            cue_density: 0.25,
            seed: 1,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.resp_len == 0 {
            return Err(Error::Data("prompt_len and resp_len must be >= 1".into()));
        }
        if !(self.cue_density > 0.0 && self.cue_density < 1.0) {
            return Err(Error::Data(format!("cue_density must lie in (0, 1), got {}", self.cue_density)));
        }
        Ok(())
    }

    /// Cues per response: at least one, so every chosen response strictly
    /// outscores its rejected partner.
    pub fn cues_per_response(&self) -> usize {
        ((self.cue_density * self.resp_len as f64).round() as usize).clamp(1, self.resp_len)
    }

    /// Longest model input a generated record produces.
    pub fn max_sequence_len(&self) -> usize {
        1 + self.prompt_len + self.resp_len + 1
    }
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn pick(rng: &mut ChaCha8Rng, from: &[usize]) -> usize {
    from[rng.random_range(0..from.len())]
}

fn response_with_cues(rng: &mut ChaCha8Rng, spec: &VocabSpec, filler: &[usize], cues: &[usize], cfg: &GenConfig) -> Vec<usize> {
    let mut y: Vec<usize> = (0..cfg.resp_len).map(|_| pick(rng, filler)).collect();
    for pos in sample(rng, cfg.resp_len, cfg.cues_per_response()) {
        y[pos] = pick(rng, cues);
    }
    y.push(spec.eos);
    y
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: VocabSpec,
    pub pairs: Vec<PreferencePair>,
}

/// Each record draws from its own ChaCha stream, so record `i` does not
/// depend on how many records precede it.
pub fn generate_dataset(spec: &VocabSpec, cfg: &GenConfig) -> Result<Dataset> {
    spec.validate()?;
    cfg.validate()?;
    let filler = spec.filler();
    let pairs = (0..cfg.n)
        .map(|i| {
            let mut rng = record_rng(cfg.seed, i);
            let prompt = (0..cfg.prompt_len).map(|_| pick(&mut rng, &filler)).collect();
            let chosen = response_with_cues(&mut rng, spec, &filler, &spec.positive_cues, cfg);
            let rejected = response_with_cues(&mut rng, spec, &filler, &spec.negative_cues, cfg);
            Ok(PreferencePair {
                chosen_score: ground_truth_reward(&chosen, spec)?,
                rejected_score: ground_truth_reward(&rejected, spec)?,
                prompt,
                chosen,
                rejected,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftCorpus {
    pub spec: VocabSpec,
    pub records: Vec<SftRecord>,
}

/// Chosen-style sequences for supervised fine-tuning.
pub fn make_sft_corpus(spec: &VocabSpec, cfg: &GenConfig) -> Result<SftCorpus> {
    spec.validate()?;
    cfg.validate()?;
    let filler = spec.filler();
    let records = (0..cfg.n)
        .map(|i| {
            let mut rng = record_rng(cfg.seed ^ 0x5f7_0000, i);
            let prompt = (0..cfg.prompt_len).map(|_| pick(&mut rng, &filler)).collect();
            let response = response_with_cues(&mut rng, spec, &filler, &spec.positive_cues, cfg);
            Ok(SftRecord {
                score: ground_truth_reward(&response, spec)?,
                prompt,
                response,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SftCorpus {
        spec: spec.clone(),
        records,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    vocab: VocabSpec,
}

fn write_jsonl<T: Serialize>(path: &Path, kind: &str, spec: &VocabSpec, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        kind: kind.into(),
        vocab: spec.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, kind: &str) -> Result<(VocabSpec, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))??;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Data(format!("{}: bad header line: {e}", path.display())))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    if header.kind != kind {
        return Err(Error::Data(format!(
            "{}: expected a '{kind}' file, found '{}'",
            path.display(),
            header.kind
        )));
    }
    header.vocab.validate()?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        out.push(rec);
    }
    Ok((header.vocab, out))
}

fn check_ids(spec: &VocabSpec, seqs: &[&[usize]], record: usize) -> Result<()> {
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Data(format!("record {record}: empty token sequence")));
        }
        if let Some(id) = s.iter().find(|&&id| id >= spec.vocab_size) {
            return Err(Error::Data(format!(
                "record {record}: token id {id} outside vocab_size {}",
                spec.vocab_size
            )));
        }
    }
    Ok(())
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, "pairs", &self.spec, &self.pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, pairs): (VocabSpec, Vec<PreferencePair>) = read_jsonl(path, "pairs")?;
        for (i, p) in pairs.iter().enumerate() {
            check_ids(&spec, &[&p.prompt, &p.chosen, &p.rejected], i)?;
        }
        Ok(Self { spec, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_sequence_len(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| 1 + p.prompt.len() + p.chosen.len().max(p.rejected.len()))
            .max()
            .unwrap_or(0)
    }
}

impl SftCorpus {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, "sft", &self.spec, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (spec, records): (VocabSpec, Vec<SftRecord>) = read_jsonl(path, "sft")?;
        for (i, r) in records.iter().enumerate() {
            check_ids(&spec, &[&r.prompt, &r.response], i)?;
        }
        Ok(Self { spec, records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> VocabSpec {
        VocabSpec::standard(64, 8, 8).unwrap()
    }

    #[test]
    fn scorer_examples() {
        let s = spec();
        let f = s.filler()[0];
        let (p, n) = (s.positive_cues[0], s.negative_cues[0]);
        assert_eq!(ground_truth_reward(&[f, f, f], &s).unwrap(), 0.5);
        assert_eq!(ground_truth_reward(&[p, p], &s).unwrap(), 1.0);
        assert_eq!(ground_truth_reward(&[n, n, n], &s).unwrap(), 0.0);
        assert_eq!(ground_truth_reward(&[p, n, p, f], &s).unwrap(), 0.625);
        assert_eq!(ground_truth_reward(&[p, n, p, f, s.eos], &s).unwrap(), 0.625);
        assert!(ground_truth_reward(&[], &s).is_err());
    }

    #[test]
    fn overlapping_roles_rejected() {
        let mut s = spec();
        s.negative_cues.push(s.positive_cues[0]);
        assert!(s.validate().is_err());
        assert!(VocabSpec::standard(64, 0, 4).is_err());
    }

    #[test]
    fn saturated_density_gives_extreme_scores() {
        let cfg = GenConfig {
            n: 5,
            cue_density: 0.999,
            ..Default::default()
        };
        let d = generate_dataset(&spec(), &cfg).unwrap();
        for p in &d.pairs {
            assert_eq!(p.chosen_score, 1.0);
            assert_eq!(p.rejected_score, 0.0);
        }
    }

    #[test]
    fn generated_pairs_strictly_ordered() {
        let cfg = GenConfig {
            n: 300,
            cue_density: 0.01,
            ..Default::default()
        };
        let d = generate_dataset(&spec(), &cfg).unwrap();
        assert!(d.pairs.iter().all(|p| p.chosen_score > p.rejected_score));
        assert!(d.pairs.iter().all(|p| p.chosen.len() == 17 && *p.chosen.last().unwrap() == 1));
    }

    #[test]
    fn records_are_independent_of_dataset_size() {
        let small = generate_dataset(&spec(), &GenConfig { n: 3, ..Default::default() }).unwrap();
        let big = generate_dataset(&spec(), &GenConfig { n: 10, ..Default::default() }).unwrap();
        assert_eq!(small.pairs[..], big.pairs[..3]);
    }

    #[test]
    fn sft_sequences_are_positive() {
        let c = make_sft_corpus(&spec(), &GenConfig { n: 50, ..Default::default() }).unwrap();
        assert!(c.records.iter().all(|r| r.score > 0.5));
    }

    #[test]
    fn invalid_generation_settings() {
        let bad = GenConfig {
            cue_density: 1.0,
            ..Default::default()
        };
        assert!(generate_dataset(&spec(), &bad).is_err());
        let bad = GenConfig {
            resp_len: 0,
            ..Default::default()
        };
        assert!(generate_dataset(&spec(), &bad).is_err());
    }
}
