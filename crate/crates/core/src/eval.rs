//! Best-of-N harness, metrics, ablation matrix, c-sweep, and distribution
//! dumps. Questions are scored independently; with the `parallel` feature
//! (default) trajectory scoring fans out over rayon, with results collected
//! in input order so reports are identical either way.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::corpus::{Provenance, StepRecord, Trajectory};
use crate::debias::{
    apply_length_penalty, debias_score, joint_debias_score, BiasEstimator, CorrelationStats,
    PenaltyConfig, TwinGap, TwinGapStats,
};
use crate::error::{Error, Result};
use crate::features::{featurize_prefix, LENGTH_COORD};
use crate::nn::stats::pearson;
use crate::scorer::PrmModel;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Raw and corrected score of one prefix, plus the bias-branch output when
/// an estimator is in play.
#[derive(Clone, Copy, Debug)]
pub struct StepScore {
    pub raw: f64,
    pub corrected: f64,
    pub bias: Option<f64>,
}

/// A scoring pipeline applied to one prefix at a time.
pub trait StepScorer: Sync {
    fn score_step(&self, question_id: u32, prefix: &[StepRecord]) -> Result<StepScore>;
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum EstimatorMode {
    /// r - lambda * b (standalone estimator correction).
    Subtract,
    /// (r - c) * sigma(b) (joint product decomposition).
    JointFactor { c: f64 },
}

/// The composable debiasing pipeline: optional estimator correction, then
/// optional length penalty.
pub struct ColdPipeline {
    pub prm: PrmModel,
    pub estimator: Option<(BiasEstimator, EstimatorMode)>,
    pub penalty: Option<PenaltyConfig>,
}

impl ColdPipeline {
    pub fn vanilla(prm: PrmModel) -> Self {
        ColdPipeline {
            prm,
            estimator: None,
            penalty: None,
        }
    }
}

impl StepScorer for ColdPipeline {
    fn score_step(&self, question_id: u32, prefix: &[StepRecord]) -> Result<StepScore> {
        let f = featurize_prefix(question_id, prefix)?;
        let raw = self.prm.score_features(&f.values)?.reward;
        let mut bias = None;
        let mut corrected = raw;
        if let Some((est, mode)) = &self.estimator {
            let b = est.bias(&f.values)?;
            bias = Some(b);
            corrected = match mode {
                EstimatorMode::Subtract => debias_score(raw, b, est.lambda),
                EstimatorMode::JointFactor { c } => joint_debias_score(raw, b, *c),
            };
        }
        if let Some(p) = &self.penalty {
            corrected = apply_length_penalty(corrected, f.values[LENGTH_COORD] as usize, p);
        }
        Ok(StepScore {
            raw,
            corrected,
            bias,
        })
    }
}

/// Scores gold labels directly: the upper bound of the oracle sandwich.
pub struct OracleScorer;

impl StepScorer for OracleScorer {
    fn score_step(&self, _q: u32, prefix: &[StepRecord]) -> Result<StepScore> {
        let r = if prefix.last().unwrap().gold_correct == 1 { 0.75 } else { 0.25 };
        Ok(StepScore { raw: r, corrected: r, bias: None })
    }
}

/// Negated gold scores: the lower bound.
pub struct AntiOracleScorer;

impl StepScorer for AntiOracleScorer {
    fn score_step(&self, _q: u32, prefix: &[StepRecord]) -> Result<StepScore> {
        let r = if prefix.last().unwrap().gold_correct == 1 { 0.25 } else { 0.75 };
        Ok(StepScore { raw: r, corrected: r, bias: None })
    }
}

pub struct ConstantScorer(pub f64);

impl StepScorer for ConstantScorer {
    fn score_step(&self, _q: u32, _p: &[StepRecord]) -> Result<StepScore> {
        Ok(StepScore { raw: self.0, corrected: self.0, bias: None })
    }
}

#[derive(Clone, Debug)]
pub struct ScoredStep {
    pub question_id: u32,
    pub trajectory_id: u32,
    pub step_index: u32,
    pub provenance: Provenance,
    pub gold_correct: u8,
    pub length: usize,
    pub raw: f64,
    pub corrected: f64,
    pub bias: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScoredTrajectory {
    pub question_id: u32,
    pub trajectory_id: u32,
    pub trajectory_correct: u8,
    pub total_tokens: usize,
    /// Minimum corrected per-step score.
    pub score: f64,
}

fn score_one(scorer: &dyn StepScorer, traj: &Trajectory) -> Result<(ScoredTrajectory, Vec<ScoredStep>)> {
    if traj.steps.is_empty() {
        return Err(Error::validation("empty trajectory in eval set"));
    }
    let mut steps = Vec::with_capacity(traj.steps.len());
    let mut min = f64::INFINITY;
    for j in 0..traj.steps.len() {
        let s = scorer.score_step(traj.question_id, &traj.steps[..=j])?;
        if !s.corrected.is_finite() {
            return Err(Error::Numerical("non-finite step score".into()));
        }
        min = min.min(s.corrected);
        let step = &traj.steps[j];
        steps.push(ScoredStep {
            question_id: traj.question_id,
            trajectory_id: traj.trajectory_id,
            step_index: step.step_index,
            provenance: step.provenance,
            gold_correct: step.gold_correct,
            length: crate::features::step_length(step),
            raw: s.raw,
            corrected: s.corrected,
            bias: s.bias,
        });
    }
    Ok((
        ScoredTrajectory {
            question_id: traj.question_id,
            trajectory_id: traj.trajectory_id,
            trajectory_correct: traj.trajectory_correct,
            total_tokens: traj.total_tokens(),
            score: min,
        },
        steps,
    ))
}

/// Sequential scoring path.
pub fn score_corpus_seq(
    scorer: &dyn StepScorer,
    trajs: &[Trajectory],
) -> Result<(Vec<ScoredTrajectory>, Vec<ScoredStep>)> {
    let mut out_t = Vec::with_capacity(trajs.len());
    let mut out_s = Vec::new();
    for traj in trajs {
        let (t, s) = score_one(scorer, traj)?;
        out_t.push(t);
        out_s.extend(s);
    }
    Ok((out_t, out_s))
}

/// Data-parallel scoring path; output order matches the input exactly.
#[cfg(feature = "parallel")]
pub fn score_corpus_par(
    scorer: &(dyn StepScorer + Sync),
    trajs: &[Trajectory],
) -> Result<(Vec<ScoredTrajectory>, Vec<ScoredStep>)> {
    let results: Vec<(ScoredTrajectory, Vec<ScoredStep>)> = trajs
        .par_iter()
        .map(|t| score_one(scorer, t))
        .collect::<Result<Vec<_>>>()?;
    let mut out_t = Vec::with_capacity(trajs.len());
    let mut out_s = Vec::new();
    for (t, s) in results {
        out_t.push(t);
        out_s.extend(s);
    }
    Ok((out_t, out_s))
}

pub fn score_corpus(
    scorer: &(dyn StepScorer + Sync),
    trajs: &[Trajectory],
) -> Result<(Vec<ScoredTrajectory>, Vec<ScoredStep>)> {
    #[cfg(feature = "parallel")]
    {
        score_corpus_par(scorer, trajs)
    }
    #[cfg(not(feature = "parallel"))]
    {
        score_corpus_seq(scorer, trajs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    ShortestThenIndex,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Candidates per question.
    pub n: usize,
    pub tie_break: TieBreak,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 16,
            tie_break: TieBreak::ShortestThenIndex,
        }
    }
}

/// Argmax of trajectory score; ties broken by smaller total token length,
/// then smaller trajectory id. Total and deterministic.
pub fn bon_select(candidates: &[ScoredTrajectory]) -> Result<&ScoredTrajectory> {
    if candidates.is_empty() {
        return Err(Error::validation("empty candidate set"));
    }
    if candidates.iter().any(|c| c.score.is_nan()) {
        return Err(Error::Numerical("NaN trajectory score".into()));
    }
    Ok(candidates
        .iter()
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap()
                .then(b.total_tokens.cmp(&a.total_tokens))
                .then(b.trajectory_id.cmp(&a.trajectory_id))
        })
        .unwrap())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub arith_acc: f64,
    pub mean_selected_length: f64,
    pub correlations: CorrelationStats,
    pub twin: TwinGapSummary,
    pub selections: Vec<(u32, u32)>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TwinGapSummary {
    pub mean_gap: f64,
    pub frac_positive: f64,
    pub n_twins: usize,
    pub missing_links: usize,
}

/// Full evaluation: BoN selection accuracy against trajectory correctness,
/// mean selected length, per-class reward-length correlations, twin gaps.
pub fn evaluate(
    scorer: &(dyn StepScorer + Sync),
    eval_set: &[Trajectory],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.n == 0 {
        return Err(Error::validation("n must be >= 1"));
    }
    let (scored, steps) = score_corpus(scorer, eval_set)?;
    let mut by_question: BTreeMap<u32, Vec<&ScoredTrajectory>> = BTreeMap::new();
    for t in &scored {
        by_question.entry(t.question_id).or_default().push(t);
    }
    let mut correct = 0usize;
    let mut total_len = 0usize;
    let mut selections = Vec::with_capacity(by_question.len());
    for (q, cands) in &by_question {
        if cands.len() != cfg.n {
            return Err(Error::validation(format!(
                "question {q} has {} candidates, eval config expects {}",
                cands.len(),
                cfg.n
            )));
        }
        let owned: Vec<ScoredTrajectory> = cands.iter().map(|t| (*t).clone()).collect();
        let sel = bon_select(&owned)?;
        if sel.trajectory_correct == 1 {
            correct += 1;
        }
        total_len += sel.total_tokens;
        selections.push((*q, sel.trajectory_id));
    }
    let n_q = by_question.len();

    // per-class corrected-score/length correlation plus the global raw and
    // bias-branch correlations
    let mut correlations = CorrelationStats::default();
    for class in [0u8, 1u8] {
        let (xs, ls): (Vec<f64>, Vec<f64>) = steps
            .iter()
            .filter(|s| s.gold_correct == class)
            .map(|s| (s.corrected, s.length as f64))
            .unzip();
        let rho = if xs.len() >= 2 { pearson(&xs, &ls)? } else { 0.0 };
        if class == 0 {
            correlations.rho_y0 = rho;
        } else {
            correlations.rho_y1 = rho;
        }
    }
    let raw: Vec<f64> = steps.iter().map(|s| s.raw).collect();
    let lens: Vec<f64> = steps.iter().map(|s| s.length as f64).collect();
    correlations.rho_r = if raw.len() >= 2 { pearson(&raw, &lens)? } else { 0.0 };
    if steps.iter().all(|s| s.bias.is_some()) && steps.len() >= 2 {
        let bs: Vec<f64> = steps.iter().map(|s| s.bias.unwrap()).collect();
        correlations.rho_b = pearson(&bs, &lens)?;
    }

    let gap_stats = twin_gaps_from_corpus(eval_set, &steps);
    Ok(EvalReport {
        arith_acc: correct as f64 / n_q as f64,
        mean_selected_length: total_len as f64 / n_q as f64,
        correlations,
        twin: TwinGapSummary {
            mean_gap: gap_stats.mean_gap,
            frac_positive: gap_stats.frac_positive,
            n_twins: gap_stats.gaps.len(),
            missing_links: gap_stats.missing_links,
        },
        selections,
    })
}

/// Twin gaps resolved through the corpus twin links, using already-computed
/// corrected step scores.
pub fn twin_gaps_from_corpus(eval_set: &[Trajectory], steps: &[ScoredStep]) -> TwinGapStats {
    use std::collections::HashMap;
    let mut scores: HashMap<(u32, u32, u32), f64> = HashMap::new();
    for s in steps {
        scores.insert((s.question_id, s.trajectory_id, s.step_index), s.corrected);
    }
    let mut stats = TwinGapStats::default();
    for traj in eval_set {
        for step in &traj.steps {
            if step.provenance == Provenance::Original {
                continue;
            }
            let ext = scores.get(&(traj.question_id, traj.trajectory_id, step.step_index));
            let orig = step
                .twin_of
                .and_then(|(tid, sidx)| scores.get(&(traj.question_id, tid, sidx)));
            match (ext, orig) {
                (Some(&e), Some(&o)) => stats.gaps.push(TwinGap {
                    question_id: traj.question_id,
                    original: o,
                    extended: e,
                    gap: e - o,
                }),
                _ => stats.missing_links += 1,
            }
        }
    }
    if !stats.gaps.is_empty() {
        stats.mean_gap = stats.gaps.iter().map(|g| g.gap).sum::<f64>() / stats.gaps.len() as f64;
        stats.frac_positive =
            stats.gaps.iter().filter(|g| g.gap > 0.0).count() as f64 / stats.gaps.len() as f64;
    }
    stats
}

/// The trained models an ablation draws from.
pub struct ModelSet {
    pub vanilla: PrmModel,
    pub estimator: BiasEstimator,
    pub joint_prm: PrmModel,
    pub joint_estimator: BiasEstimator,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Toggles {
    pub joint: bool,
    pub estimator: bool,
    pub penalty: bool,
}

/// The six component rows of the ablation matrix, full method first.
pub const ABLATION_ROWS: [Toggles; 6] = [
    Toggles { joint: true, estimator: true, penalty: true },
    Toggles { joint: true, estimator: true, penalty: false },
    Toggles { joint: false, estimator: true, penalty: true },
    Toggles { joint: false, estimator: true, penalty: false },
    Toggles { joint: false, estimator: false, penalty: true },
    Toggles { joint: false, estimator: false, penalty: false },
];

/// Build the pipeline a toggle row describes. Joint without the estimator is
/// not a defined configuration.
pub fn pipeline_for(models: &ModelSet, t: &Toggles, alpha: f64, c: f64) -> Result<ColdPipeline> {
    if t.joint && !t.estimator {
        return Err(Error::validation(
            "joint=on requires estimator=on; no such ablation row exists",
        ));
    }
    let penalty = t.penalty.then_some(PenaltyConfig { alpha });
    if t.joint {
        Ok(ColdPipeline {
            prm: models.joint_prm.clone(),
            estimator: Some((models.joint_estimator.clone(), EstimatorMode::JointFactor { c })),
            penalty,
        })
    } else if t.estimator {
        Ok(ColdPipeline {
            prm: models.vanilla.clone(),
            estimator: Some((models.estimator.clone(), EstimatorMode::Subtract)),
            penalty,
        })
    } else {
        Ok(ColdPipeline {
            prm: models.vanilla.clone(),
            estimator: None,
            penalty,
        })
    }
}

pub struct AblationRow {
    pub toggles: Toggles,
    pub report: EvalReport,
}

pub fn ablation_run(
    models: &ModelSet,
    eval_set: &[Trajectory],
    cfg: &EvalConfig,
    alpha: f64,
    c: f64,
) -> Result<Vec<AblationRow>> {
    ABLATION_ROWS
        .iter()
        .map(|t| {
            let pipeline = pipeline_for(models, t, alpha, c)?;
            Ok(AblationRow {
                toggles: *t,
                report: evaluate(&pipeline, eval_set, cfg)?,
            })
        })
        .collect()
}

/// Default correction grid for the c sweep.
pub const SWEEP_C_GRID: [f64; 5] = [0.7, 0.9, 1.1, 1.3, 1.5];

pub fn sweep_c(
    models: &ModelSet,
    eval_set: &[Trajectory],
    cfg: &EvalConfig,
    values: &[f64],
) -> Result<Vec<(f64, EvalReport)>> {
    if values.is_empty() {
        return Err(Error::validation("sweep grid must be non-empty"));
    }
    values
        .iter()
        .map(|&c| {
            let pipeline = ColdPipeline {
                prm: models.joint_prm.clone(),
                estimator: Some((
                    models.joint_estimator.clone(),
                    EstimatorMode::JointFactor { c },
                )),
                penalty: None,
            };
            Ok((c, evaluate(&pipeline, eval_set, cfg)?))
        })
        .collect()
}

fn provenance_str(p: Provenance) -> &'static str {
    match p {
        Provenance::Original => "original",
        Provenance::Duplicated => "duplicated",
        Provenance::Verbose => "verbose",
    }
}

/// One CSV row per step: enough to regenerate reward-length scatter plots.
pub fn dump_reward_length(
    scorer: &(dyn StepScorer + Sync),
    trajs: &[Trajectory],
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let (_, steps) = score_corpus(scorer, trajs)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "question_id,provenance,gold_correct,length,raw_reward,corrected_reward")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for s in &steps {
        writeln!(
            w,
            "{},{},{},{},{:.6},{:.6}",
            s.question_id,
            provenance_str(s.provenance),
            s.gold_correct,
            s.length,
            s.raw,
            s.corrected
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(steps.len())
}

pub fn eval_report_csv(rows: &[(String, &EvalReport)]) -> String {
    let mut out = String::from(
        "pipeline,arith_acc,mean_selected_length,rho_y0,rho_y1,rho_r,rho_b,twin_mean_gap,twin_frac_positive\n",
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            name,
            r.arith_acc,
            r.mean_selected_length,
            r.correlations.rho_y0,
            r.correlations.rho_y1,
            r.correlations.rho_r,
            r.correlations.rho_b,
            r.twin.mean_gap,
            r.twin.frac_positive
        ));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("joint,estimator,penalty,arith_acc,mean_selected_length\n");
    for row in rows {
        let mark = |b: bool| if b { "on" } else { "off" };
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            mark(row.toggles.joint),
            mark(row.toggles.estimator),
            mark(row.toggles.penalty),
            row.report.arith_acc,
            row.report.mean_selected_length
        ));
    }
    out
}

pub fn sweep_csv(rows: &[(f64, EvalReport)]) -> String {
    let mut out = String::from("c,arith_acc,mean_selected_length\n");
    for (c, r) in rows {
        out.push_str(&format!(
            "{:.2},{:.6},{:.6}\n",
            c, r.arith_acc, r.mean_selected_length
        ));
    }
    out
}
