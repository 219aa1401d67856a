//! Synthetic confounded step corpus: generation, length augmentation,
//! best-of-N eval set assembly, and the JSONL on-disk format.
//!
//! Each step's text is a templated token sequence with three ingredients:
//! correctness-cue tokens sampled from the gold label with configurable
//! fidelity, nuisance style tokens, and filler padding up to a length drawn
//! from a class-conditional truncated normal. The class-conditional mean
//! shift (`confound_strength`) is the knob that creates the length↔label
//! confound.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{tokenize, CUE_NEG, CUE_POS, SEPARATOR};

/// Cue tokens carried by every generated step.
pub const CUES_PER_STEP: usize = 3;
/// Shortest step the generator will emit.
pub const MIN_STEP_LEN: usize = 3;

const FILLER_WORDS: [&str; 10] = [
    "thus", "we", "compute", "the", "value", "term", "next", "apply", "rule", "sum",
];

const NUISANCE_STYLES: usize = 4;

const VERBOSE_PHRASES: [&str; 8] = [
    "to be explicit",
    "in other words",
    "as noted before",
    "that is to say",
    "carrying this through",
    "for completeness here",
    "put differently",
    "restating the same idea",
];

/// Deterministic sub-seed derivation: hash the base seed with a tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Duplicated,
    Verbose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub question_id: u32,
    pub trajectory_id: u32,
    pub step_index: u32,
    pub text: String,
    pub gold_correct: u8,
    pub provenance: Provenance,
    /// (trajectory_id, step_index) of the original this step was grown from.
    pub twin_of: Option<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: u32,
    pub trajectory_id: u32,
    pub steps: Vec<StepRecord>,
    pub trajectory_correct: u8,
}

impl Trajectory {
    pub fn total_tokens(&self) -> usize {
        self.steps.iter().map(|s| tokenize(&s.text).len()).sum()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_questions: u32,
    pub trajectories_per_question: u32,
    pub steps_min: u32,
    pub steps_max: u32,
    /// Shift, in tokens, of the correct-class length mean (β).
    pub confound_strength: f64,
    pub base_length: u32,
    pub length_spread: f64,
    /// Probability a cue token reflects the true label.
    pub semantic_signal: f64,
    /// Rate of nuisance style tokens among padding slots.
    pub nuisance_noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_questions: 2000,
            trajectories_per_question: 4,
            steps_min: 2,
            steps_max: 4,
            confound_strength: 40.0,
            base_length: 30,
            length_spread: 15.0,
            semantic_signal: 0.9,
            nuisance_noise: 0.1,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_questions == 0 {
            return Err(Error::validation("num_questions must be positive"));
        }
        if self.trajectories_per_question == 0 {
            return Err(Error::validation("trajectories_per_question must be positive"));
        }
        if self.steps_min == 0 || self.steps_min > self.steps_max {
            return Err(Error::validation(
                "steps_min must be positive and <= steps_max",
            ));
        }
        if self.confound_strength.is_nan() || self.confound_strength < 0.0 {
            return Err(Error::validation("confound_strength must be >= 0"));
        }
        if self.base_length == 0 {
            return Err(Error::validation("base_length must be positive"));
        }
        if self.length_spread.is_nan() || self.length_spread <= 0.0 {
            return Err(Error::validation("length_spread must be positive"));
        }
        if !(0.5..=1.0).contains(&self.semantic_signal) {
            return Err(Error::validation("semantic_signal must lie in [0.5, 1.0]"));
        }
        if !(0.0..=1.0).contains(&self.nuisance_noise) {
            return Err(Error::validation("nuisance_noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Discretized truncated normal, resampled until >= MIN_STEP_LEN.
fn sample_length(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> usize {
    loop {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let l = (mean + std * z).round();
        if l >= MIN_STEP_LEN as f64 {
            return l as usize;
        }
    }
}

fn step_text(rng: &mut ChaCha8Rng, spec: &CorpusSpec, gold: u8) -> String {
    let mean = spec.base_length as f64 + spec.confound_strength * gold as f64;
    let len = sample_length(rng, mean, spec.length_spread);
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..CUES_PER_STEP.min(len) {
        let truthful = rng.gen::<f64>() < spec.semantic_signal;
        let shown = if truthful { gold } else { 1 - gold };
        tokens.push(if shown == 1 { CUE_POS } else { CUE_NEG }.to_string());
    }
    while tokens.len() < len {
        if rng.gen::<f64>() < spec.nuisance_noise {
            tokens.push(format!("style{}", rng.gen_range(0..NUISANCE_STYLES)));
        } else {
            tokens.push(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string());
        }
    }
    tokens.join(" ")
}

/// Generate the full corpus deterministically from the spec. Trajectory
/// correctness is the conjunction of step correctness: a correct trajectory
/// has all steps correct, an incorrect one has at least one incorrect step.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Vec::with_capacity((spec.num_questions * spec.trajectories_per_question) as usize);
    for q in 0..spec.num_questions {
        for t in 0..spec.trajectories_per_question {
            let n_steps = rng.gen_range(spec.steps_min..=spec.steps_max) as usize;
            let traj_correct = rng.gen::<f64>() < 0.5;
            let mut labels = vec![1u8; n_steps];
            if !traj_correct {
                for l in labels.iter_mut() {
                    *l = rng.gen_range(0..2u8);
                }
                if labels.iter().all(|&l| l == 1) {
                    let k = rng.gen_range(0..n_steps);
                    labels[k] = 0;
                }
            }
            let steps = labels
                .iter()
                .enumerate()
                .map(|(i, &gold)| StepRecord {
                    question_id: q,
                    trajectory_id: t,
                    step_index: i as u32,
                    text: step_text(&mut rng, spec, gold),
                    gold_correct: gold,
                    provenance: Provenance::Original,
                    twin_of: None,
                })
                .collect();
            corpus.push(Trajectory {
                question_id: q,
                trajectory_id: t,
                steps,
                trajectory_correct: traj_correct as u8,
            });
        }
    }
    Ok(corpus)
}

/// Double a step: text, separator, text. Labels and identity preserved.
pub fn duplicate_extend(step: &StepRecord) -> Result<StepRecord> {
    if step.provenance != Provenance::Original {
        return Err(Error::validation(format!(
            "duplicate_extend requires an original step, got {:?}",
            step.provenance
        )));
    }
    Ok(StepRecord {
        text: format!("{} {} {}", step.text, SEPARATOR, step.text),
        provenance: Provenance::Duplicated,
        twin_of: Some((step.trajectory_id, step.step_index)),
        ..step.clone()
    })
}

/// Pad a step with semantically inert filler phrases until the token count
/// reaches ceil(factor * original). Original tokens are kept verbatim and
/// in order; insertion points and phrase choices come from the seed.
pub fn verbose_extend(step: &StepRecord, factor: f64, seed: u64) -> Result<StepRecord> {
    if step.provenance != Provenance::Original {
        return Err(Error::validation(format!(
            "verbose_extend requires an original step, got {:?}",
            step.provenance
        )));
    }
    if factor.is_nan() || factor <= 1.0 {
        return Err(Error::validation("verbose factor must be > 1"));
    }
    let mut tokens = tokenize(&step.text).tokens;
    let target = (factor * tokens.len() as f64).ceil() as usize;
    let tag = format!(
        "verbose-{}-{}-{}-{}-{}",
        step.question_id,
        step.trajectory_id,
        step.step_index,
        factor.to_bits(),
        step.text
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag));
    while tokens.len() < target {
        let phrase = VERBOSE_PHRASES[rng.gen_range(0..VERBOSE_PHRASES.len())];
        let at = rng.gen_range(0..=tokens.len());
        for (k, w) in phrase.split_whitespace().enumerate() {
            tokens.insert(at + k, w.to_string());
        }
    }
    Ok(StepRecord {
        text: tokens.join(" "),
        provenance: Provenance::Verbose,
        twin_of: Some((step.trajectory_id, step.step_index)),
        ..step.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// Even twins duplicated, odd twins verbose-rewritten.
    Alternate,
    Duplicate,
    Verbose,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub mode: PlanMode,
    pub verbose_factor: f64,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            mode: PlanMode::Alternate,
            verbose_factor: 2.0,
            seed: 0,
        }
    }
}

fn augment_trajectory(
    traj: &Trajectory,
    new_id: u32,
    duplicate: bool,
    plan: &AugmentPlan,
) -> Result<Trajectory> {
    let steps = traj
        .steps
        .iter()
        .map(|s| {
            let mut aug = if duplicate {
                duplicate_extend(s)?
            } else {
                verbose_extend(s, plan.verbose_factor, plan.seed)?
            };
            aug.trajectory_id = new_id;
            Ok(aug)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        question_id: traj.question_id,
        trajectory_id: new_id,
        steps,
        trajectory_correct: traj.trajectory_correct,
    })
}

/// Per question: the first `n_original` original trajectories plus
/// `n_original` length-augmented twins, giving 2·n_original candidates.
pub fn build_bon_eval(
    corpus: &[Trajectory],
    n_original: usize,
    plan: &AugmentPlan,
) -> Result<Vec<Trajectory>> {
    if n_original == 0 {
        return Err(Error::validation("n_original must be positive"));
    }
    let mut out = Vec::new();
    let mut qids: Vec<u32> = corpus.iter().map(|t| t.question_id).collect();
    qids.dedup();
    for &q in &qids {
        let originals: Vec<&Trajectory> = corpus
            .iter()
            .filter(|t| t.question_id == q && t.steps.iter().all(|s| s.provenance == Provenance::Original))
            .collect();
        if originals.len() < n_original {
            return Err(Error::validation(format!(
                "question {q} has {} original trajectories, need {n_original}",
                originals.len()
            )));
        }
        let max_id = originals.iter().map(|t| t.trajectory_id).max().unwrap();
        for t in originals.iter().take(n_original) {
            out.push((*t).clone());
        }
        for (i, t) in originals.iter().take(n_original).enumerate() {
            let duplicate = match plan.mode {
                PlanMode::Alternate => i % 2 == 0,
                PlanMode::Duplicate => true,
                PlanMode::Verbose => false,
            };
            out.push(augment_trajectory(t, max_id + 1 + i as u32, duplicate, plan)?);
        }
    }
    Ok(out)
}

/// One StepRecord per line, grouped by (question_id, trajectory_id).
pub fn write_jsonl(corpus: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for traj in corpus {
        for step in &traj.steps {
            let line = serde_json::to_string(step)?;
            writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out: Vec<Trajectory> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: StepRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if step.text.trim().is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "field text: empty step text".into(),
            });
        }
        let same_traj = out
            .last()
            .map(|t: &Trajectory| t.question_id == step.question_id && t.trajectory_id == step.trajectory_id)
            .unwrap_or(false);
        if same_traj {
            let traj = out.last_mut().unwrap();
            if step.step_index as usize != traj.steps.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "field step_index: expected {}, found {}",
                        traj.steps.len(),
                        step.step_index
                    ),
                });
            }
            traj.trajectory_correct &= step.gold_correct;
            traj.steps.push(step);
        } else {
            if step.step_index != 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("field step_index: expected 0, found {}", step.step_index),
                });
            }
            out.push(Trajectory {
                question_id: step.question_id,
                trajectory_id: step.trajectory_id,
                trajectory_correct: step.gold_correct,
                steps: vec![step],
            });
        }
    }
    Ok(out)
}

/// Deterministic held-out split: the last `frac` of distinct question ids.
pub fn split_by_question(corpus: &[Trajectory], holdout_frac: f64) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let mut qids: Vec<u32> = corpus.iter().map(|t| t.question_id).collect();
    qids.sort_unstable();
    qids.dedup();
    let n_hold = ((qids.len() as f64 * holdout_frac).round() as usize).min(qids.len());
    let cut = qids[qids.len() - n_hold.max(1)];
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for t in corpus {
        if t.question_id >= cut {
            hold.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, hold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::step_length;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_questions: 50,
            trajectories_per_question: 2,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        assert_eq!(generate_corpus(&spec).unwrap(), generate_corpus(&spec).unwrap());
    }

    #[test]
    fn invalid_spec_names_field() {
        let spec = CorpusSpec {
            semantic_signal: 0.3,
            ..small_spec()
        };
        let err = generate_corpus(&spec).unwrap_err().to_string();
        assert!(err.contains("semantic_signal"), "{err}");
    }

    #[test]
    fn trajectory_correct_is_conjunction() {
        for traj in generate_corpus(&small_spec()).unwrap() {
            let conj = traj.steps.iter().all(|s| s.gold_correct == 1);
            assert_eq!(traj.trajectory_correct == 1, conj);
        }
    }

    #[test]
    fn duplicate_extend_doubles_tokens_plus_separator() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let s = &corpus[0].steps[0];
        let d = duplicate_extend(s).unwrap();
        assert_eq!(step_length(&d), 2 * step_length(s) + 1);
        assert_eq!(d.gold_correct, s.gold_correct);
        assert_eq!(d.provenance, Provenance::Duplicated);
        assert_eq!(d.twin_of, Some((s.trajectory_id, s.step_index)));
        // no double augmentation
        assert!(duplicate_extend(&d).is_err());
    }

    #[test]
    fn duplicate_extend_small_example() {
        let s = StepRecord {
            question_id: 0,
            trajectory_id: 0,
            step_index: 0,
            text: "a b c".into(),
            gold_correct: 0,
            provenance: Provenance::Original,
            twin_of: None,
        };
        let d = duplicate_extend(&s).unwrap();
        assert_eq!(d.text, "a b c <sep> a b c");
        assert_eq!(step_length(&d), 7);
        assert_eq!(d.gold_correct, 0);
    }

    #[test]
    fn verbose_extend_meets_target_and_keeps_cues() {
        let s = StepRecord {
            question_id: 1,
            trajectory_id: 2,
            step_index: 0,
            text: "cuepos cueneg cuepos the sum rule next apply we term".into(),
            gold_correct: 1,
            provenance: Provenance::Original,
            twin_of: None,
        };
        let v = verbose_extend(&s, 2.0, 11).unwrap();
        let n = step_length(&v);
        assert!((20..=24).contains(&n), "got {n} tokens");
        let count = |text: &str, cue: &str| tokenize(text).tokens.iter().filter(|t| *t == cue).count();
        assert_eq!(count(&v.text, "cuepos"), 2);
        assert_eq!(count(&v.text, "cueneg"), 1);
        // determinism
        assert_eq!(verbose_extend(&s, 2.0, 11).unwrap(), v);
        // tiny factor still forces one insertion
        let w = verbose_extend(&s, 1.0001, 11).unwrap();
        assert!(step_length(&w) >= 11);
        // invalid factor
        assert!(verbose_extend(&s, 1.0, 11).is_err());
        assert!(verbose_extend(&v, 2.0, 11).is_err());
    }

    #[test]
    fn bon_eval_doubles_candidates_and_preserves_labels() {
        let spec = CorpusSpec {
            num_questions: 5,
            trajectories_per_question: 8,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let eval = build_bon_eval(&corpus, 8, &AugmentPlan::default()).unwrap();
        assert_eq!(eval.len(), 5 * 16);
        for q in 0..5u32 {
            let cands: Vec<&Trajectory> = eval.iter().filter(|t| t.question_id == q).collect();
            assert_eq!(cands.len(), 16);
            for t in &cands[8..] {
                let orig_id = t.steps[0].twin_of.unwrap().0;
                let orig = cands.iter().find(|o| o.trajectory_id == orig_id).unwrap();
                assert_eq!(t.trajectory_correct, orig.trajectory_correct);
            }
        }
    }

    #[test]
    fn bon_eval_minimal_duplicate_plan() {
        let spec = CorpusSpec {
            num_questions: 1,
            trajectories_per_question: 1,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let plan = AugmentPlan {
            mode: PlanMode::Duplicate,
            ..AugmentPlan::default()
        };
        let eval = build_bon_eval(&corpus, 1, &plan).unwrap();
        assert_eq!(eval.len(), 2);
        assert_eq!(eval[1].steps[0].provenance, Provenance::Duplicated);
        assert_eq!(eval[1].total_tokens(), 2 * eval[0].total_tokens() + eval[0].steps.len());
    }

    #[test]
    fn bon_eval_insufficient_trajectories_names_question() {
        let spec = CorpusSpec {
            num_questions: 2,
            trajectories_per_question: 3,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let err = build_bon_eval(&corpus, 8, &AugmentPlan::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("question 0"), "{err}");
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let corpus = generate_corpus(&small_spec()).unwrap();
        write_jsonl(&corpus, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(corpus, back);

        // byte-identical on rewrite
        let bytes1 = std::fs::read(&path).unwrap();
        write_jsonl(&back, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());

        // empty corpus -> empty file -> empty corpus
        let empty = dir.path().join("empty.jsonl");
        write_jsonl(&[], &empty).unwrap();
        assert!(read_jsonl(&empty).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let corpus = generate_corpus(&small_spec()).unwrap();
        write_jsonl(&corpus[..1], &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        let cut = content.len() - 10;
        content.truncate(cut);
        std::fs::write(&path, content).unwrap();
        let err = read_jsonl(&path).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, corpus[0].steps.len()),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn confound_shifts_class_means() {
        let spec = CorpusSpec {
            num_questions: 1500,
            confound_strength: 40.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let (mut l0, mut l1) = (Vec::new(), Vec::new());
        for t in &corpus {
            for s in &t.steps {
                let l = step_length(s) as f64;
                if s.gold_correct == 1 {
                    l1.push(l)
                } else {
                    l0.push(l)
                }
            }
        }
        assert!(l0.len() + l1.len() >= 10_000);
        let gap = crate::nn::stats::mean(&l1) - crate::nn::stats::mean(&l0);
        assert!((gap - 40.0).abs() < 2.0, "gap {gap}");
    }

    #[test]
    fn zero_confound_has_no_length_label_correlation() {
        let spec = CorpusSpec {
            num_questions: 1500,
            confound_strength: 0.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let (mut ls, mut ys) = (Vec::new(), Vec::new());
        for t in &corpus {
            for s in &t.steps {
                ls.push(step_length(s) as f64);
                ys.push(s.gold_correct as f64);
            }
        }
        assert!(ls.len() >= 10_000);
        let rho = crate::nn::stats::pearson(&ls, &ys).unwrap();
        assert!(rho.abs() < 0.05, "rho {rho}");
    }

    #[test]
    fn confound_correlation_monotone_in_beta() {
        let mut prev = -1.0;
        for beta in [0.0, 10.0, 20.0, 40.0] {
            let spec = CorpusSpec {
                num_questions: 800,
                confound_strength: beta,
                ..CorpusSpec::default()
            };
            let corpus = generate_corpus(&spec).unwrap();
            let (mut ls, mut ys) = (Vec::new(), Vec::new());
            for t in &corpus {
                for s in &t.steps {
                    ls.push(step_length(s) as f64);
                    ys.push(s.gold_correct as f64);
                }
            }
            let rho = crate::nn::stats::pearson(&ls, &ys).unwrap();
            assert!(rho > prev, "beta {beta}: rho {rho} <= {prev}");
            prev = rho;
        }
    }
}
