//! Desk-scale step scorer: two-logit head over prefix features, reward per
//! the stable softmax, min aggregation over trajectories, and the vanilla
//! (biased) training baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::corpus::{derive_seed, StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::features::{featurize_prefix, schema_hash, step_length, FEATURE_DIM};
use crate::nn::{bce_var, two_logit_reward, AdamConfig, AdamState, DenseNet, Normalizer, Tape};

pub const HIDDEN_DIM: usize = 16;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PrmModel {
    pub net: DenseNet,
    pub norm: Normalizer,
    pub feature_schema: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RewardScore {
    pub l_plus: f64,
    pub l_minus: f64,
    pub reward: f64,
    pub debiased: Option<f64>,
}

impl RewardScore {
    pub fn from_logits(l_plus: f64, l_minus: f64) -> Result<Self> {
        Ok(RewardScore {
            l_plus,
            l_minus,
            reward: two_logit_reward(l_plus, l_minus)?,
            debiased: None,
        })
    }
}

impl PrmModel {
    pub fn new(seed: u64) -> Self {
        PrmModel {
            net: DenseNet::xavier(&[FEATURE_DIM, HIDDEN_DIM, 2], derive_seed(seed, "prm-init")),
            norm: Normalizer::identity(FEATURE_DIM),
            feature_schema: schema_hash(),
            seed,
        }
    }

    pub fn score_features(&self, features: &[f64]) -> Result<RewardScore> {
        let out = self.net.forward(&self.norm.apply(features))?;
        RewardScore::from_logits(out[0], out[1])
    }

    /// Score the prefix ending at the last step of `steps`.
    pub fn score_prefix(&self, question_id: u32, steps: &[StepRecord]) -> Result<RewardScore> {
        let f = featurize_prefix(question_id, steps)?;
        self.score_features(&f.values)
    }
}

/// Per-step correction hook: sees the raw score and the step it came from.
pub type StepCorrection<'a> = &'a dyn Fn(&RewardScore, &StepRecord) -> f64;

/// Minimum per-step score of a trajectory, with an optional per-step
/// correction applied first.
pub fn score_trajectory(
    model: &PrmModel,
    traj: &Trajectory,
    per_step_correction: Option<StepCorrection<'_>>,
) -> Result<f64> {
    if traj.steps.is_empty() {
        return Err(Error::validation("empty trajectory"));
    }
    let mut min = f64::INFINITY;
    for j in 0..traj.steps.len() {
        let score = model.score_prefix(traj.question_id, &traj.steps[..=j])?;
        let s = match per_step_correction {
            Some(f) => f(&score, &traj.steps[j]),
            None => score.reward,
        };
        min = min.min(s);
    }
    Ok(min)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch: 128,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// One training example: prefix features, gold label, raw step length.
#[derive(Clone, Debug)]
pub struct PrefixExample {
    pub features: Vec<f64>,
    pub label: u8,
    pub length: f64,
    pub question_id: u32,
}

/// Expand a corpus into per-prefix training examples in corpus order.
pub fn prefix_dataset(corpus: &[Trajectory]) -> Result<Vec<PrefixExample>> {
    let mut out = Vec::new();
    for traj in corpus {
        for j in 0..traj.steps.len() {
            let f = featurize_prefix(traj.question_id, &traj.steps[..=j])?;
            out.push(PrefixExample {
                features: f.values,
                label: traj.steps[j].gold_correct,
                length: step_length(&traj.steps[j]) as f64,
                question_id: traj.question_id,
            });
        }
    }
    Ok(out)
}

/// Train the vanilla PRM: binary cross-entropy of the two-logit reward
/// against step correctness. Returns the model and per-epoch mean loss.
pub fn train_vanilla(corpus: &[Trajectory], cfg: &TrainConfig) -> Result<(PrmModel, Vec<f64>)> {
    if cfg.batch < 2 {
        return Err(Error::validation("batch must be >= 2"));
    }
    let data = prefix_dataset(corpus)?;
    if data.is_empty() {
        return Err(Error::validation("empty corpus"));
    }
    let n_pos = data.iter().filter(|e| e.label == 1).count();
    if n_pos == 0 || n_pos == data.len() {
        return Err(Error::validation(
            "single-class corpus: vanilla objective is degenerate",
        ));
    }
    let mut model = PrmModel::new(cfg.seed);
    model.norm = Normalizer::fit(&data.iter().map(|e| e.features.clone()).collect::<Vec<_>>());
    let rows: Vec<Vec<f64>> = data.iter().map(|e| model.norm.apply(&e.features)).collect();

    let mut params = model.net.params();
    let mut adam = AdamState::new(params.len());
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::with_capacity(1 << 17);

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("shuffle-{epoch}")));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < 2 {
                continue;
            }
            tape.reset();
            model.net.set_params(&params);
            let vars = model.net.register(&mut tape);
            let mut probs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x: Vec<_> = rows[i].iter().map(|&v| tape.constant(v)).collect();
                let logits = vars.forward(&mut tape, &x);
                let z = tape.sub(logits[0], logits[1]);
                probs.push(tape.sigmoid(z));
                labels.push(data[i].label as f64);
            }
            let loss = bce_var(&mut tape, &probs, &labels);
            let lv = tape.value(loss);
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("vanilla loss diverged at epoch {epoch}")));
            }
            tape.backward(loss);
            adam.step(&adam_cfg, &mut params, &vars.grads(&tape));
            epoch_loss += lv;
            n_batches += 1;
        }
        trace.push(epoch_loss / n_batches as f64);
    }
    model.net.set_params(&params);
    Ok((model, trace))
}

pub fn save_checkpoint(model: &PrmModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(model)?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PrmModel> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let model: PrmModel = serde_json::from_str(&json)?;
    if model.feature_schema != schema_hash() {
        return Err(Error::validation(format!(
            "checkpoint feature schema {} does not match current {}",
            model.feature_schema,
            schema_hash()
        )));
    }
    if model.net.input_dim() != FEATURE_DIM {
        return Err(Error::DimMismatch {
            expected: FEATURE_DIM,
            found: model.net.input_dim(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn tiny_corpus() -> Vec<Trajectory> {
        generate_corpus(&CorpusSpec {
            num_questions: 60,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_weight_model_scores_half() {
        let mut model = PrmModel::new(0);
        let zeros = vec![0.0; model.net.num_params()];
        model.net.set_params(&zeros);
        let corpus = tiny_corpus();
        for traj in corpus.iter().take(3) {
            let s = model.score_prefix(traj.question_id, &traj.steps[..1]).unwrap();
            assert_eq!(s.reward, 0.5);
        }
    }

    #[test]
    fn scoring_is_deterministic() {
        let model = PrmModel::new(3);
        let corpus = tiny_corpus();
        let a = model.score_prefix(0, &corpus[0].steps[..2]).unwrap();
        let b = model.score_prefix(0, &corpus[0].steps[..2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trajectory_score_is_min() {
        let model = PrmModel::new(1);
        let corpus = tiny_corpus();
        let traj = &corpus[0];
        let per_step: Vec<f64> = (0..traj.steps.len())
            .map(|j| model.score_prefix(traj.question_id, &traj.steps[..=j]).unwrap().reward)
            .collect();
        let expect = per_step.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(score_trajectory(&model, traj, None).unwrap(), expect);

        // with a correction the min is over corrected scores
        let fixed = [0.9, 0.2, 0.7];
        let k = std::cell::Cell::new(0usize);
        let correction = |_: &RewardScore, _: &StepRecord| {
            let v = fixed[k.get() % fixed.len()];
            k.set(k.get() + 1);
            v
        };
        let mut t3 = traj.clone();
        t3.steps.truncate(3.min(t3.steps.len()));
        if t3.steps.len() == 3 {
            let got = score_trajectory(&model, &t3, Some(&correction)).unwrap();
            assert_eq!(got, 0.2);
        }
    }

    #[test]
    fn empty_trajectory_is_error() {
        let model = PrmModel::new(0);
        let t = Trajectory {
            question_id: 0,
            trajectory_id: 0,
            steps: vec![],
            trajectory_correct: 1,
        };
        assert!(score_trajectory(&model, &t, None).is_err());
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let mut corpus = tiny_corpus();
        for t in &mut corpus {
            for s in &mut t.steps {
                s.gold_correct = 1;
            }
            t.trajectory_correct = 1;
        }
        assert!(train_vanilla(&corpus, &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let (m1, trace1) = train_vanilla(&corpus, &cfg).unwrap();
        let (m2, trace2) = train_vanilla(&corpus, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(trace1, trace2);
        for w in trace1.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "trace not non-increasing: {trace1:?}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_scores() {
        let corpus = tiny_corpus();
        let (model, _) = train_vanilla(
            &corpus,
            &TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prm.json");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(model, back);
        let mut n = 0;
        for traj in &corpus {
            for j in 0..traj.steps.len() {
                let a = model.score_prefix(traj.question_id, &traj.steps[..=j]).unwrap();
                let b = back.score_prefix(traj.question_id, &traj.steps[..=j]).unwrap();
                assert_eq!(a, b);
                n += 1;
                if n >= 100 {
                    return;
                }
            }
        }
    }

    #[test]
    fn truncated_checkpoint_fails_to_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prm.json");
        save_checkpoint(&PrmModel::new(0), &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.truncate(content.len() / 2);
        std::fs::write(&path, content).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
