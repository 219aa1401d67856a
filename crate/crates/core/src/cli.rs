//! Configuration-driven experiment front end. Every command reads one JSON
//! config, derives all of its randomness from the single global seed, and
//! writes its artifacts plus a manifest (config hash, seed) under the output
//! directory, so any report is regenerable from (config, seed) alone.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::corpus::{
    build_bon_eval, derive_seed, generate_corpus, read_jsonl, write_jsonl, AugmentPlan, CorpusSpec,
    Trajectory,
};
use crate::debias::{
    joint_train, load_estimator, save_estimator, train_bias_estimator, BiasTrainConfig,
    JointConfig, PenaltyConfig,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_run, dump_reward_length, eval_report_csv, evaluate, sweep_c, sweep_csv,
    ColdPipeline, EstimatorMode, EvalConfig, EvalReport, ModelSet, TieBreak, SWEEP_C_GRID,
};
use crate::features::schema_json;
use crate::scorer::{load_checkpoint, save_checkpoint, train_vanilla, TrainConfig};

/// Environment variable overriding the output root directory.
pub const OUT_ROOT_ENV: &str = "PRMLAB_OUT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub spec: CorpusSpec,
    pub eval_questions: u32,
    pub n_original: usize,
    pub plan: AugmentPlan,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            spec: CorpusSpec::default(),
            eval_questions: 200,
            n_original: 8,
            plan: AugmentPlan::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub vanilla: TrainConfig,
    pub bias: BiasTrainConfig,
    pub joint: JointConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        // Calibrated for the default synthetic corpus. The vanilla scorer is
        // deliberately stopped early: once it saturates on the confounded
        // labels its within-class length preference washes out, and the whole
        // point of the baseline is to exhibit that preference.
        TrainSection {
            vanilla: TrainConfig {
                epochs: 1,
                batch: 512,
                lr: 3e-3,
                ..TrainConfig::default()
            },
            bias: BiasTrainConfig {
                epochs: 16,
                lr: 3e-3,
                ..BiasTrainConfig::default()
            },
            joint: JointConfig {
                lr_prm: 1e-3,
                lr_bias: 3e-5,
                batch: 512,
                noise_std: 4.0,
                warmup_epochs: 8,
                epochs: 10,
                ..JointConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Length-penalty strength used by penalty pipelines and the ablation.
    pub alpha: f64,
    /// Joint correction magnitude.
    pub c: f64,
    pub sweep: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            // Sized to the corrected-score scale: large enough to re-rank
            // equally plausible candidates by length, small enough not to
            // override the reward ordering across classes.
            alpha: 2e-4,
            c: 1.1,
            sweep: SWEEP_C_GRID.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub corpus: CorpusSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/default"),
            seed: 7,
            corpus: CorpusSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::validation(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.spec.validate()?;
        if self.corpus.eval_questions == 0 {
            return Err(Error::validation("eval_questions must be positive"));
        }
        if self.corpus.n_original == 0 {
            return Err(Error::validation("n_original must be positive"));
        }
        if self.eval.alpha.is_nan() || self.eval.alpha < 0.0 {
            return Err(Error::validation("alpha must be >= 0"));
        }
        self.train.joint.validate()?;
        Ok(())
    }

    /// Output directory after the environment root override.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var(OUT_ROOT_ENV) {
            Ok(root) if !root.is_empty() => {
                let rel: PathBuf = self
                    .out_dir
                    .file_name()
                    .map(PathBuf::from)
                    .unwrap_or_else(|| self.out_dir.clone());
                PathBuf::from(root).join(rel)
            }
            _ => self.out_dir.clone(),
        }
    }

    /// Hash of the canonical config serialization; recorded in manifests.
    pub fn config_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Derived sub-seeds: the global seed is the single randomness source;
    /// per-section seed fields in the config file are overwritten here.
    fn train_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: derive_seed(self.seed, "corpus-train"),
            ..self.corpus.spec.clone()
        }
    }

    fn eval_spec(&self) -> CorpusSpec {
        CorpusSpec {
            num_questions: self.corpus.eval_questions,
            trajectories_per_question: self.corpus.n_original as u32,
            seed: derive_seed(self.seed, "corpus-eval"),
            ..self.corpus.spec.clone()
        }
    }

    fn eval_plan(&self) -> AugmentPlan {
        AugmentPlan {
            seed: derive_seed(self.seed, "augment"),
            ..self.corpus.plan.clone()
        }
    }

    fn vanilla_cfg(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train-vanilla"),
            ..self.train.vanilla.clone()
        }
    }

    fn bias_cfg(&self) -> BiasTrainConfig {
        BiasTrainConfig {
            seed: derive_seed(self.seed, "train-bias"),
            ..self.train.bias.clone()
        }
    }

    fn joint_cfg(&self) -> JointConfig {
        JointConfig {
            seed: derive_seed(self.seed, "train-joint"),
            ..self.train.joint.clone()
        }
    }

    fn eval_cfg(&self) -> EvalConfig {
        EvalConfig {
            n: 2 * self.corpus.n_original,
            tie_break: TieBreak::ShortestThenIndex,
        }
    }
}

pub mod paths {
    pub const TRAIN_CORPUS: &str = "train.jsonl";
    pub const EVAL_CORPUS: &str = "eval.jsonl";
    pub const FEATURE_SCHEMA: &str = "feature_schema.json";
    pub const PRM_VANILLA: &str = "prm_vanilla.json";
    pub const BIAS_ESTIMATOR: &str = "bias_estimator.json";
    pub const PRM_JOINT: &str = "prm_joint.json";
    pub const BIAS_JOINT: &str = "bias_joint.json";
    pub const LOSS_VANILLA: &str = "loss_vanilla.csv";
    pub const LOSS_BIAS: &str = "loss_bias.csv";
    pub const LOSS_JOINT: &str = "loss_joint.csv";
    pub const EVAL_REPORT_CSV: &str = "eval_report.csv";
    pub const EVAL_REPORT_JSON: &str = "eval_report.json";
    pub const ABLATION_CSV: &str = "ablation.csv";
    pub const SWEEP_CSV: &str = "sweep.csv";
    pub const DUMP_VANILLA: &str = "reward_length_vanilla.csv";
    pub const DUMP_JOINT: &str = "reward_length_joint.csv";
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_manifest(cfg: &RunConfig, dir: &Path, command: &str, outputs: &[&str]) -> Result<()> {
    let manifest = serde_json::json!({
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "outputs": outputs,
    });
    write_file(
        dir,
        &format!("manifest_{command}.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::MissingPrereq(format!(
            "expected file {} (run the producing command first)",
            path.display()
        )));
    }
    Ok(path)
}

fn load_eval_set(dir: &Path) -> Result<Vec<Trajectory>> {
    read_jsonl(require(dir, paths::EVAL_CORPUS)?)
}

/// Generate train/eval corpora, the feature schema, and a manifest.
pub fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let train = generate_corpus(&cfg.train_spec())?;
    let eval_orig = generate_corpus(&cfg.eval_spec())?;
    let eval_set = build_bon_eval(&eval_orig, cfg.corpus.n_original, &cfg.eval_plan())?;
    write_jsonl(&train, dir.join(paths::TRAIN_CORPUS))?;
    write_jsonl(&eval_set, dir.join(paths::EVAL_CORPUS))?;
    write_file(&dir, paths::FEATURE_SCHEMA, &schema_json())?;
    write_manifest(
        cfg,
        &dir,
        "gen",
        &[paths::TRAIN_CORPUS, paths::EVAL_CORPUS, paths::FEATURE_SCHEMA],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMethod {
    Vanilla,
    Bias,
    Joint,
}

/// Train one method and write its checkpoints and loss trace.
pub fn cmd_train(cfg: &RunConfig, method: TrainMethod) -> Result<()> {
    let dir = cfg.resolved_out_dir();
    let corpus = read_jsonl(require(&dir, paths::TRAIN_CORPUS)?)?;
    match method {
        TrainMethod::Vanilla => {
            let (model, trace) = train_vanilla(&corpus, &cfg.vanilla_cfg())?;
            save_checkpoint(&model, dir.join(paths::PRM_VANILLA))?;
            let mut csv = String::from("epoch,l_bce\n");
            for (i, l) in trace.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            write_file(&dir, paths::LOSS_VANILLA, &csv)?;
            write_manifest(cfg, &dir, "train-prm", &[paths::PRM_VANILLA, paths::LOSS_VANILLA])
        }
        TrainMethod::Bias => {
            let prm = load_checkpoint(require(&dir, paths::PRM_VANILLA)?)?;
            let (est, trace) = train_bias_estimator(&prm, &corpus, &cfg.bias_cfg())?;
            save_estimator(&est, dir.join(paths::BIAS_ESTIMATOR))?;
            let mut csv = String::from("epoch,l_bce,l_corr\n");
            for (i, row) in trace.iter().enumerate() {
                csv.push_str(&format!("{i},{:.6},{:.6}\n", row.l_bce, row.l_corr));
            }
            write_file(&dir, paths::LOSS_BIAS, &csv)?;
            write_manifest(cfg, &dir, "train-bias", &[paths::BIAS_ESTIMATOR, paths::LOSS_BIAS])
        }
        TrainMethod::Joint => {
            let (prm, est, trace) = joint_train(&corpus, &cfg.joint_cfg())?;
            save_checkpoint(&prm, dir.join(paths::PRM_JOINT))?;
            save_estimator(&est, dir.join(paths::BIAS_JOINT))?;
            let mut csv = String::from("epoch,l_ce,l_rho_r,l_rho_b\n");
            for (i, row) in trace.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{:.6},{:.6},{:.6}\n",
                    row.l_ce, row.l_rho_r, row.l_rho_b
                ));
            }
            write_file(&dir, paths::LOSS_JOINT, &csv)?;
            write_manifest(
                cfg,
                &dir,
                "train-joint",
                &[paths::PRM_JOINT, paths::BIAS_JOINT, paths::LOSS_JOINT],
            )
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PipelineKind {
    Vanilla,
    Penalty,
    Estimator,
    Joint,
}

impl std::str::FromStr for PipelineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(PipelineKind::Vanilla),
            "penalty" => Ok(PipelineKind::Penalty),
            "estimator" => Ok(PipelineKind::Estimator),
            "joint" => Ok(PipelineKind::Joint),
            other => Err(Error::validation(format!(
                "unknown pipeline {other:?}; expected vanilla|penalty|estimator|joint"
            ))),
        }
    }
}

fn build_pipeline(cfg: &RunConfig, dir: &Path, kind: PipelineKind) -> Result<ColdPipeline> {
    match kind {
        PipelineKind::Vanilla => Ok(ColdPipeline::vanilla(load_checkpoint(require(
            dir,
            paths::PRM_VANILLA,
        )?)?)),
        PipelineKind::Penalty => Ok(ColdPipeline {
            prm: load_checkpoint(require(dir, paths::PRM_VANILLA)?)?,
            estimator: None,
            penalty: Some(PenaltyConfig { alpha: cfg.eval.alpha }),
        }),
        PipelineKind::Estimator => Ok(ColdPipeline {
            prm: load_checkpoint(require(dir, paths::PRM_VANILLA)?)?,
            estimator: Some((
                load_estimator(require(dir, paths::BIAS_ESTIMATOR)?)?,
                EstimatorMode::Subtract,
            )),
            penalty: None,
        }),
        PipelineKind::Joint => Ok(ColdPipeline {
            prm: load_checkpoint(require(dir, paths::PRM_JOINT)?)?,
            estimator: Some((
                load_estimator(require(dir, paths::BIAS_JOINT)?)?,
                EstimatorMode::JointFactor { c: cfg.eval.c },
            )),
            penalty: None,
        }),
    }
}

fn pipeline_name(kind: PipelineKind) -> &'static str {
    match kind {
        PipelineKind::Vanilla => "vanilla",
        PipelineKind::Penalty => "penalty",
        PipelineKind::Estimator => "estimator",
        PipelineKind::Joint => "joint",
    }
}

/// Evaluate one pipeline on the generated eval set.
pub fn cmd_eval(cfg: &RunConfig, kind: PipelineKind) -> Result<EvalReport> {
    let dir = cfg.resolved_out_dir();
    let eval_set = load_eval_set(&dir)?;
    let pipeline = build_pipeline(cfg, &dir, kind)?;
    let report = evaluate(&pipeline, &eval_set, &cfg.eval_cfg())?;
    write_file(
        &dir,
        paths::EVAL_REPORT_CSV,
        &eval_report_csv(&[(pipeline_name(kind).to_string(), &report)]),
    )?;
    let summary = serde_json::json!({
        "pipeline": pipeline_name(kind),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "report": report,
    });
    write_file(
        &dir,
        paths::EVAL_REPORT_JSON,
        &serde_json::to_string_pretty(&summary).expect("report serializes"),
    )?;
    write_manifest(cfg, &dir, "eval", &[paths::EVAL_REPORT_CSV, paths::EVAL_REPORT_JSON])?;
    Ok(report)
}

fn load_model_set(dir: &Path) -> Result<ModelSet> {
    Ok(ModelSet {
        vanilla: load_checkpoint(require(dir, paths::PRM_VANILLA)?)?,
        estimator: load_estimator(require(dir, paths::BIAS_ESTIMATOR)?)?,
        joint_prm: load_checkpoint(require(dir, paths::PRM_JOINT)?)?,
        joint_estimator: load_estimator(require(dir, paths::BIAS_JOINT)?)?,
    })
}

/// Emit the six-row component ablation matrix.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.resolved_out_dir();
    let eval_set = load_eval_set(&dir)?;
    let models = load_model_set(&dir)?;
    let rows = ablation_run(&models, &eval_set, &cfg.eval_cfg(), cfg.eval.alpha, cfg.eval.c)?;
    write_file(&dir, paths::ABLATION_CSV, &ablation_csv(&rows))?;
    write_manifest(cfg, &dir, "ablate", &[paths::ABLATION_CSV])
}

/// Sweep the joint correction magnitude over the configured grid.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.resolved_out_dir();
    let eval_set = load_eval_set(&dir)?;
    let models = load_model_set(&dir)?;
    let rows = sweep_c(&models, &eval_set, &cfg.eval_cfg(), &cfg.eval.sweep)?;
    write_file(&dir, paths::SWEEP_CSV, &sweep_csv(&rows))?;
    write_manifest(cfg, &dir, "sweep", &[paths::SWEEP_CSV])
}

/// Dump per-step reward/length rows for the vanilla and joint pipelines.
pub fn cmd_dump(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.resolved_out_dir();
    let eval_set = load_eval_set(&dir)?;
    let vanilla = build_pipeline(cfg, &dir, PipelineKind::Vanilla)?;
    dump_reward_length(&vanilla, &eval_set, dir.join(paths::DUMP_VANILLA))?;
    let joint = build_pipeline(cfg, &dir, PipelineKind::Joint)?;
    dump_reward_length(&joint, &eval_set, dir.join(paths::DUMP_JOINT))?;
    write_manifest(cfg, &dir, "dump-dist", &[paths::DUMP_VANILLA, paths::DUMP_JOINT])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig {
            out_dir: dir.to_path_buf(),
            seed: 11,
            ..RunConfig::default()
        };
        cfg.corpus.spec.num_questions = 60;
        cfg.corpus.eval_questions = 10;
        cfg.corpus.n_original = 4;
        cfg.train.vanilla.epochs = 2;
        cfg.train.bias.epochs = 1;
        cfg.train.joint.epochs = 1;
        cfg
    }

    #[test]
    fn full_command_sequence_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick_config(tmp.path());
        cmd_gen(&cfg).unwrap();
        for f in [paths::TRAIN_CORPUS, paths::EVAL_CORPUS, paths::FEATURE_SCHEMA] {
            assert!(tmp.path().join(f).exists(), "{f} missing");
        }
        cmd_train(&cfg, TrainMethod::Vanilla).unwrap();
        let vanilla_bytes = std::fs::read(tmp.path().join(paths::PRM_VANILLA)).unwrap();
        cmd_train(&cfg, TrainMethod::Bias).unwrap();
        // the freezing contract: training the estimator leaves the vanilla
        // checkpoint bit-identical
        assert_eq!(
            vanilla_bytes,
            std::fs::read(tmp.path().join(paths::PRM_VANILLA)).unwrap()
        );
        cmd_train(&cfg, TrainMethod::Joint).unwrap();
        cmd_eval(&cfg, PipelineKind::Joint).unwrap();
        cmd_ablate(&cfg).unwrap();
        cmd_sweep(&cfg).unwrap();
        cmd_dump(&cfg).unwrap();

        let ablation = std::fs::read_to_string(tmp.path().join(paths::ABLATION_CSV)).unwrap();
        assert_eq!(ablation.lines().count(), 7); // header + 6 rows
        let sweep = std::fs::read_to_string(tmp.path().join(paths::SWEEP_CSV)).unwrap();
        assert_eq!(sweep.lines().count(), 6); // header + 5 grid points
    }

    #[test]
    fn gen_is_byte_deterministic() {
        let tmp1 = tempfile::tempdir().unwrap();
        let tmp2 = tempfile::tempdir().unwrap();
        let cfg1 = quick_config(tmp1.path());
        let mut cfg2 = quick_config(tmp2.path());
        cfg2.out_dir = tmp2.path().to_path_buf();
        cmd_gen(&cfg1).unwrap();
        cmd_gen(&cfg2).unwrap();
        for f in [paths::TRAIN_CORPUS, paths::EVAL_CORPUS] {
            assert_eq!(
                std::fs::read(tmp1.path().join(f)).unwrap(),
                std::fs::read(tmp2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn invalid_spec_fails_before_writing() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(tmp.path());
        cfg.corpus.spec.confound_strength = -1.0;
        assert!(cmd_gen(&cfg).is_err());
        assert!(!tmp.path().join(paths::TRAIN_CORPUS).exists());
    }

    #[test]
    fn missing_prerequisite_has_exit_code_two() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick_config(tmp.path());
        cmd_gen(&cfg).unwrap();
        // bias training before vanilla: missing checkpoint
        let err = cmd_train(&cfg, TrainMethod::Bias).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains(paths::PRM_VANILLA));
    }

    #[test]
    fn config_roundtrips_through_file_form() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.config_hash(), back.config_hash());
    }
}
