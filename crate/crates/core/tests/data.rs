use proptest::prelude::*;
use sparsepo::data::{generate_dataset, ground_truth_reward, make_sft_corpus, Dataset, GenConfig, SftCorpus, VocabSpec};

fn spec() -> VocabSpec {
    VocabSpec::standard(64, 8, 8).unwrap()
}

/// Scorer written out from its definition: positives minus negatives over
/// non-special length, mapped into [0, 1].
fn oracle_score(y: &[usize]) -> f64 {
    let content: Vec<usize> = y.iter().copied().filter(|&t| t > 2).collect();
    if content.is_empty() {
        return 0.5;
    }
    let pos = content.iter().filter(|&&t| (3..11).contains(&t)).count() as f64;
    let neg = content.iter().filter(|&&t| (11..19).contains(&t)).count() as f64;
    0.5 + 0.5 * (pos - neg) / content.len() as f64
}

#[test]
fn pairs_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/pairs.jsonl");
    let d = generate_dataset(&spec(), &GenConfig { n: 50, ..GenConfig::default() }).unwrap();
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
    let first = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert!(first.contains("\"format\":\"sparsepo-dataset\""));
    assert!(first.contains("\"kind\":\"pairs\""));
    assert!(SftCorpus::load(&path).is_err(), "kind mismatch must be rejected");
}

#[test]
fn sft_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sft.jsonl");
    let c = make_sft_corpus(&spec(), &GenConfig { n: 20, ..GenConfig::default() }).unwrap();
    c.save(&path).unwrap();
    assert_eq!(SftCorpus::load(&path).unwrap(), c);
}

#[test]
fn corrupt_records_are_rejected_with_the_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    generate_dataset(&spec(), &GenConfig { n: 3, ..GenConfig::default() }).unwrap().save(&path).unwrap();
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{not json}\n");
    std::fs::write(&path, text).unwrap();
    let e = Dataset::load(&path).unwrap_err().to_string();
    assert!(e.contains("line 5"), "{e}");
}

#[test]
fn out_of_vocabulary_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let mut d = generate_dataset(&spec(), &GenConfig { n: 3, ..GenConfig::default() }).unwrap();
    d.pairs[1].chosen[0] = 64;
    d.save(&path).unwrap();
    assert!(Dataset::load(&path).unwrap_err().to_string().contains("64"));
}

#[test]
fn records_do_not_depend_on_dataset_size() {
    let small = generate_dataset(&spec(), &GenConfig { n: 5, ..GenConfig::default() }).unwrap();
    let large = generate_dataset(&spec(), &GenConfig { n: 40, ..GenConfig::default() }).unwrap();
    assert_eq!(small.pairs[..], large.pairs[..5]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_pairs_respect_the_cue_rule(
        seed in 0u64..10_000,
        prompt_len in 1usize..10,
        resp_len in 1usize..20,
        density in 0.05f64..0.95,
    ) {
        let s = spec();
        let cfg = GenConfig { n: 10, prompt_len, resp_len, cue_density: density, seed };
        let d = generate_dataset(&s, &cfg).unwrap();
        let k = cfg.cues_per_response();
        prop_assert_eq!(k, ((density * resp_len as f64).round() as usize).clamp(1, resp_len));
        for p in &d.pairs {
            prop_assert_eq!(p.prompt.len(), prompt_len);
            prop_assert!(p.prompt.iter().all(|&t| !s.is_special(t) && !s.is_cue(t)));
            for (y, cues, score) in [(&p.chosen, &s.positive_cues, p.chosen_score), (&p.rejected, &s.negative_cues, p.rejected_score)] {
                prop_assert_eq!(y.len(), resp_len + 1);
                prop_assert_eq!(*y.last().unwrap(), s.eos);
                prop_assert_eq!(y.iter().filter(|t| cues.contains(t)).count(), k);
                prop_assert_eq!(y.iter().filter(|&&t| s.is_cue(t)).count(), k);
                prop_assert!((score - oracle_score(y)).abs() < 1e-15);
            }
            prop_assert!(p.chosen_score > p.rejected_score);
        }
    }

    #[test]
    fn scorer_matches_its_definition(y in proptest::collection::vec(0usize..64, 1..30)) {
        let v = ground_truth_reward(&y, &spec()).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - oracle_score(&y)).abs() < 1e-15);
    }
}
