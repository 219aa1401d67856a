//! End-to-end acceptance checks: nine criteria covering bias emergence under
//! a confounded corpus, the three debiasing methods, best-of-n selection
//! quality, gradient correctness, protocol fidelity, and determinism.
//!
//! Criteria 1-6 share one lazily built fixture: five independent seeds, each
//! with a freshly generated corpus and freshly trained models; medians across
//! seeds are compared against pinned thresholds. Each test prints a single
//! `criterion N (...): PASS|FAIL` line (visible with `--nocapture`).

use std::sync::LazyLock;
use std::time::Instant;

use prmlab::cli::{self, paths, PipelineKind, RunConfig, TrainMethod};
use prmlab::corpus::{
    build_bon_eval, derive_seed, generate_corpus, AugmentPlan, CorpusSpec, Provenance,
};
use prmlab::debias::{
    joint_debias_score, joint_train, train_bias_estimator, BiasTrainConfig, JointConfig,
    PenaltyConfig,
};
use prmlab::eval::{
    ablation_run, evaluate, score_corpus, ColdPipeline, EstimatorMode, EvalConfig, ModelSet,
    TieBreak, SWEEP_C_GRID,
};
use prmlab::nn::net::{DenseNet, NetVars};
use prmlab::nn::stats::{auc, pearson};
use prmlab::nn::tape::{bce_var, pearson_var, Tape, Var};
use prmlab::nn::{sigmoid, two_logit_reward};
use prmlab::scorer::{prefix_dataset, train_vanilla, PrefixExample, TrainConfig};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ALPHA: f64 = 2e-4;
const C_DEFAULT: f64 = 1.1;

struct SeedMetrics {
    // vanilla scorer on the confounded held-out set and twin eval set
    v_rho_y0: f64,
    v_rho_y1: f64,
    v_dup_frac_pos: f64,
    v_auc: f64,
    v_acc: f64,
    v_len: f64,
    v_twin_abs: f64,
    // standalone bias estimator (debiased reward r*)
    e_rho_y0: f64,
    e_rho_y1: f64,
    e_auc: f64,
    // jointly trained decomposition, measured on an unconfounded held-out set
    j_rho_r: f64,
    j_rho_b: f64,
    j_acc: f64,
    j_len: f64,
    j_twin_abs: f64,
    // (arith_acc, mean_selected_length) for the six ablation rows
    ablation: Vec<(f64, f64)>,
}

struct Fixture {
    seeds: Vec<SeedMetrics>,
    vanilla_secs: f64,
    estimator_secs: f64,
}

static FIXTURE: LazyLock<Fixture> = LazyLock::new(build_fixture);

fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn med(f: impl Fn(&SeedMetrics) -> f64) -> f64 {
    median(FIXTURE.seeds.iter().map(f).collect())
}

fn class_rho(scores: &[f64], data: &[PrefixExample], class: u8) -> f64 {
    let (xs, ls): (Vec<f64>, Vec<f64>) = data
        .iter()
        .zip(scores)
        .filter(|(e, _)| e.label == class)
        .map(|(e, &s)| (s, e.length))
        .unzip();
    pearson(&xs, &ls).unwrap()
}

fn check(label: &str, ok: bool, detail: &str) {
    println!("criterion {label}: {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {label} failed: {detail}");
}

fn build_fixture() -> Fixture {
    let mut seeds = Vec::new();
    let mut vanilla_secs = 0.0;
    let mut estimator_secs = 0.0;
    for seed in SEEDS {
        let train = generate_corpus(&CorpusSpec {
            seed: derive_seed(seed, "train"),
            ..CorpusSpec::default()
        })
        .unwrap();
        let held = generate_corpus(&CorpusSpec {
            num_questions: 200,
            trajectories_per_question: 8,
            seed: derive_seed(seed, "held"),
            ..CorpusSpec::default()
        })
        .unwrap();
        let eval_set = build_bon_eval(
            &held,
            8,
            &AugmentPlan {
                seed: derive_seed(seed, "aug"),
                ..AugmentPlan::default()
            },
        )
        .unwrap();
        // The training distribution couples label and length by construction,
        // so any label-accurate reward correlates with length there. Residual
        // length preference of the reward branch is therefore measured where
        // the confounder is switched off.
        let unconf = generate_corpus(&CorpusSpec {
            num_questions: 200,
            trajectories_per_question: 8,
            confound_strength: 0.0,
            seed: derive_seed(seed, "unconf"),
            ..CorpusSpec::default()
        })
        .unwrap();
        let held_data = prefix_dataset(&held).unwrap();
        let unconf_data = prefix_dataset(&unconf).unwrap();
        let labels: Vec<u8> = held_data.iter().map(|e| e.label).collect();
        let ulens: Vec<f64> = unconf_data.iter().map(|e| e.length).collect();
        let ecfg = EvalConfig {
            n: 16,
            tie_break: TieBreak::ShortestThenIndex,
        };

        // --- vanilla scorer ---
        let t0 = Instant::now();
        let (vanilla, _) = train_vanilla(
            &train,
            &TrainConfig {
                epochs: 1,
                batch: 512,
                lr: 3e-3,
                seed: derive_seed(seed, "v"),
            },
        )
        .unwrap();
        let v_scores: Vec<f64> = held_data
            .iter()
            .map(|e| vanilla.score_features(&e.features).unwrap().reward)
            .collect();
        let v_pipe = ColdPipeline::vanilla(vanilla.clone());
        let v_report = evaluate(&v_pipe, &eval_set, &ecfg).unwrap();
        // positive-gap fraction over duplication twins only
        let (_, v_steps) = score_corpus(&v_pipe, &eval_set).unwrap();
        let mut by_key = std::collections::HashMap::new();
        for s in &v_steps {
            by_key.insert((s.question_id, s.trajectory_id, s.step_index), s.corrected);
        }
        let (mut pos, mut tot) = (0usize, 0usize);
        for traj in &eval_set {
            for step in &traj.steps {
                if step.provenance != Provenance::Duplicated {
                    continue;
                }
                if let Some((tid, sidx)) = step.twin_of {
                    let ext = by_key[&(traj.question_id, traj.trajectory_id, step.step_index)];
                    let orig = by_key[&(traj.question_id, tid, sidx)];
                    tot += 1;
                    if ext > orig {
                        pos += 1;
                    }
                }
            }
        }
        vanilla_secs += t0.elapsed().as_secs_f64();

        // --- standalone bias estimator against the frozen vanilla scorer ---
        let t1 = Instant::now();
        let (est, _) = train_bias_estimator(
            &vanilla,
            &train,
            &BiasTrainConfig {
                epochs: 16,
                lr: 3e-3,
                seed: derive_seed(seed, "bias"),
                ..BiasTrainConfig::default()
            },
        )
        .unwrap();
        let e_scores: Vec<f64> = held_data
            .iter()
            .zip(&v_scores)
            .map(|(e, &r)| r - est.lambda * est.bias(&e.features).unwrap())
            .collect();
        estimator_secs += t1.elapsed().as_secs_f64();

        // --- joint decomposition ---
        let (jprm, jest, _) = joint_train(
            &train,
            &JointConfig {
                lr_prm: 1e-3,
                lr_bias: 3e-5,
                batch: 512,
                noise_std: 4.0,
                warmup_epochs: 8,
                epochs: 10,
                seed: derive_seed(seed, "joint"),
                ..JointConfig::default()
            },
        )
        .unwrap();
        let ur: Vec<f64> = unconf_data
            .iter()
            .map(|e| jprm.score_features(&e.features).unwrap().reward)
            .collect();
        let ub: Vec<f64> = unconf_data
            .iter()
            .map(|e| jest.bias(&e.features).unwrap())
            .collect();
        let j_pipe = ColdPipeline {
            prm: jprm.clone(),
            estimator: Some((jest.clone(), EstimatorMode::JointFactor { c: C_DEFAULT })),
            penalty: None,
        };
        let j_report = evaluate(&j_pipe, &eval_set, &ecfg).unwrap();

        // --- component ablation ---
        let models = ModelSet {
            vanilla: vanilla.clone(),
            estimator: est.clone(),
            joint_prm: jprm.clone(),
            joint_estimator: jest.clone(),
        };
        let rows = ablation_run(&models, &eval_set, &ecfg, ALPHA, C_DEFAULT).unwrap();

        seeds.push(SeedMetrics {
            v_rho_y0: class_rho(&v_scores, &held_data, 0),
            v_rho_y1: class_rho(&v_scores, &held_data, 1),
            v_dup_frac_pos: pos as f64 / tot as f64,
            v_auc: auc(&v_scores, &labels).unwrap(),
            v_acc: v_report.arith_acc,
            v_len: v_report.mean_selected_length,
            v_twin_abs: v_report.twin.mean_gap.abs(),
            e_rho_y0: class_rho(&e_scores, &held_data, 0),
            e_rho_y1: class_rho(&e_scores, &held_data, 1),
            e_auc: auc(&e_scores, &labels).unwrap(),
            j_rho_r: pearson(&ur, &ulens).unwrap(),
            j_rho_b: pearson(&ub, &ulens).unwrap(),
            j_acc: j_report.arith_acc,
            j_len: j_report.mean_selected_length,
            j_twin_abs: j_report.twin.mean_gap.abs(),
            ablation: rows
                .iter()
                .map(|r| (r.report.arith_acc, r.report.mean_selected_length))
                .collect(),
        });
    }
    Fixture {
        seeds,
        vanilla_secs,
        estimator_secs,
    }
}

#[test]
fn criterion_1_vanilla_length_bias_emerges() {
    let rho0 = med(|s| s.v_rho_y0);
    let rho1 = med(|s| s.v_rho_y1);
    let dup = med(|s| s.v_dup_frac_pos);
    let secs = FIXTURE.vanilla_secs;
    check(
        "1 (vanilla length-bias emergence)",
        rho0 >= 0.3 && rho1 >= 0.3 && dup >= 0.6 && secs <= 120.0,
        &format!("rho_y0={rho0:.3} rho_y1={rho1:.3} dup_frac={dup:.3} secs={secs:.1}"),
    );
}

#[test]
fn criterion_2_estimator_removes_bias() {
    let rho0 = med(|s| s.e_rho_y0.abs());
    let rho1 = med(|s| s.e_rho_y1.abs());
    let drop = med(|s| s.v_auc - s.e_auc);
    let secs = FIXTURE.estimator_secs;
    check(
        "2 (estimator debiasing)",
        rho0 < 0.15 && rho1 < 0.15 && drop <= 0.02 && secs <= 120.0,
        &format!("|rho_y0|={rho0:.3} |rho_y1|={rho1:.3} auc_drop={drop:.4} secs={secs:.1}"),
    );
}

#[test]
fn criterion_3_joint_branches_specialize() {
    let rho_r = med(|s| s.j_rho_r.abs());
    let rho_b = med(|s| s.j_rho_b);
    check(
        "3 (joint specialization)",
        rho_r < 0.1 && rho_b > 0.5,
        &format!("|rho_r|={rho_r:.3} rho_b={rho_b:.3}"),
    );
}

#[test]
fn criterion_4_selection_improves() {
    let (jacc, vacc) = (med(|s| s.j_acc), med(|s| s.v_acc));
    let (jlen, vlen) = (med(|s| s.j_len), med(|s| s.v_len));
    check(
        "4 (best-of-n improvement)",
        jacc >= vacc && jlen <= 0.8 * vlen,
        &format!("joint acc={jacc:.3} len={jlen:.1}; vanilla acc={vacc:.3} len={vlen:.1}"),
    );
}

#[test]
fn criterion_5_ablation_ordering() {
    // medians per ablation row; row 0 is the full method, row 4 penalty-only,
    // row 5 all-off
    let rows: Vec<(f64, f64)> = (0..6)
        .map(|i| (med(|s| s.ablation[i].0), med(|s| s.ablation[i].1)))
        .collect();
    let (acc_on, len_on) = rows[0];
    let pareto = rows[1..]
        .iter()
        .all(|&(a, l)| !(a > acc_on && l < len_on));
    let (acc_pen, len_pen) = rows[4];
    let (_, len_off) = rows[5];
    check(
        "5 (ablation ordering)",
        pareto && len_pen < len_off && acc_pen <= acc_on,
        &format!("rows={rows:?}"),
    );
}

#[test]
fn criterion_6_twin_gap_shrinks() {
    let j = med(|s| s.j_twin_abs);
    let v = med(|s| s.v_twin_abs);
    check(
        "6 (twin-gap shrinkage)",
        j <= 0.5 * v,
        &format!("joint |gap|={j:.4} vanilla |gap|={v:.4}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 7: gradients of every loss composition against central finite
// differences, plus the inference-time factorization identity
// ---------------------------------------------------------------------------

struct GradCase {
    kind: usize,
    rnet: DenseNet,
    bnet: DenseNet,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
    lens: Vec<f64>,
    lambda_r: f64,
    lambda_b: f64,
    lambda: f64,
    lambda_corr: f64,
}

/// Build the case's loss on a fresh tape from explicit flat parameters.
/// Returns the tape, the loss node, and the registered net parameter handles.
fn case_loss(case: &GradCase, rp: &[f64], bp: &[f64]) -> (Tape, Var, NetVars, NetVars) {
    let mut rnet = case.rnet.clone();
    rnet.set_params(rp);
    let mut bnet = case.bnet.clone();
    bnet.set_params(bp);
    let mut tape = Tape::new();
    let rv = rnet.register(&mut tape);
    let bv = bnet.register(&mut tape);
    let mut rs = Vec::new();
    let mut bs = Vec::new();
    for x in &case.xs {
        let xv: Vec<Var> = x.iter().map(|&v| tape.constant(v)).collect();
        let out = rv.forward(&mut tape, &xv);
        let diff = tape.sub(out[0], out[1]);
        rs.push(tape.sigmoid(diff));
        let bout = bv.forward(&mut tape, &xv);
        bs.push(bout[0]);
    }
    let lvars: Vec<Var> = case.lens.iter().map(|&l| tape.constant(l)).collect();
    let loss = match case.kind {
        // plain two-logit cross-entropy
        0 => bce_var(&mut tape, &rs, &case.ys),
        // correlation penalty alone
        1 => {
            let rho = pearson_var(&mut tape, &rs, &lvars);
            let sq = tape.square(rho);
            tape.mul_const(sq, case.lambda_r)
        }
        // scorer phase of the joint objective: bce(sigma(r*sigma(b))) + penalty
        2 | 3 => {
            let ps: Vec<Var> = rs
                .iter()
                .zip(&bs)
                .map(|(&r, &b)| {
                    let sb = tape.sigmoid(b);
                    let prod = tape.mul(r, sb);
                    tape.sigmoid(prod)
                })
                .collect();
            let bce = bce_var(&mut tape, &ps, &case.ys);
            if case.kind == 2 {
                let rho = pearson_var(&mut tape, &rs, &lvars);
                let sq = tape.square(rho);
                let pen = tape.mul_const(sq, case.lambda_r);
                tape.add(bce, pen)
            } else {
                // bias phase: reward the bias branch for tracking length
                let rho = pearson_var(&mut tape, &bs, &lvars);
                let sq = tape.square(rho);
                let pen = tape.mul_const(sq, -case.lambda_b);
                tape.add(bce, pen)
            }
        }
        // estimator objective: bce(sigma(r - lambda*b)) + per-class penalties
        4 => {
            let stars: Vec<Var> = rs
                .iter()
                .zip(&bs)
                .map(|(&r, &b)| {
                    let lb = tape.mul_const(b, case.lambda);
                    tape.sub(r, lb)
                })
                .collect();
            let ps: Vec<Var> = stars.iter().map(|&s| tape.sigmoid(s)).collect();
            let mut loss = bce_var(&mut tape, &ps, &case.ys);
            for class in [0.0, 1.0] {
                let (cs, cl): (Vec<Var>, Vec<Var>) = stars
                    .iter()
                    .zip(&lvars)
                    .zip(&case.ys)
                    .filter(|(_, &y)| y == class)
                    .map(|((&s, &l), _)| (s, l))
                    .unzip();
                let rho = pearson_var(&mut tape, &cs, &cl);
                let sq = tape.square(rho);
                let pen = tape.mul_const(sq, case.lambda_corr);
                loss = tape.add(loss, pen);
            }
            loss
        }
        _ => unreachable!(),
    };
    (tape, loss, rv, bv)
}

fn case_loss_value(case: &GradCase, rp: &[f64], bp: &[f64]) -> f64 {
    let (tape, loss, _, _) = case_loss(case, rp, bp);
    tape.value(loss)
}

/// Splitmix-style generator: enough for randomized test configurations.
struct MiniRng(u64);

impl MiniRng {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next() >> 11) as f64 / (1u64 << 53) as f64
    }
    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.next() as usize) % (hi - lo)
    }
}

#[test]
fn criterion_7_gradients_match_finite_differences() {
    let mut rng = MiniRng(0xACCE97);
    let mut max_rel = 0.0f64;
    for i in 0u64..100 {
        let d = rng.range(3, 7);
        let h = rng.range(2, 6);
        let m = 8;
        let rnet = DenseNet::xavier(&[d, h, 2], 1000 + i);
        let bnet = DenseNet::xavier(&[d, h, 1], 2000 + i);
        let xs: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.uniform(-1.5, 1.5)).collect())
            .collect();
        let mut ys: Vec<f64> = (0..m).map(|k| (k % 2) as f64).collect();
        // shuffle labels a little while keeping both classes populated
        ys.swap(rng.range(0, m / 2) * 2, rng.range(0, m / 2) * 2 + 1);
        let lens: Vec<f64> = (0..m)
            .map(|k| rng.uniform(20.0, 200.0) + k as f64)
            .collect();
        let case = GradCase {
            kind: i as usize % 5,
            rnet,
            bnet,
            xs,
            ys,
            lens,
            lambda_r: rng.uniform(0.05, 1.0),
            lambda_b: rng.uniform(0.05, 1.0),
            lambda: rng.uniform(0.2, 1.5),
            lambda_corr: rng.uniform(0.05, 1.0),
        };
        let rp = case.rnet.params();
        let bp = case.bnet.params();
        let (mut tape, loss, rv, bv) = case_loss(&case, &rp, &bp);
        tape.backward(loss);
        let mut analytic = rv.grads(&tape);
        analytic.extend(bv.grads(&tape));
        let nr = rp.len();
        let fd_h = 1e-5;
        for (j, &a) in analytic.iter().enumerate() {
            let mut rp2 = rp.clone();
            let mut bp2 = bp.clone();
            let slot = if j < nr { &mut rp2[j] } else { &mut bp2[j - nr] };
            let orig = *slot;
            *slot = orig + fd_h;
            let up = case_loss_value(&case, &rp2, &bp2);
            let slot = if j < nr { &mut rp2[j] } else { &mut bp2[j - nr] };
            *slot = orig - fd_h;
            let down = case_loss_value(&case, &rp2, &bp2);
            let fd = (up - down) / (2.0 * fd_h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    // inference-time factorization: r*sigma(b) - c*sigma(b) == (r-c)*sigma(b)
    let mut max_fact = 0.0f64;
    let mut rng = MiniRng(0xFAC7);
    for _ in 0..1000 {
        let r = rng.uniform(-2.0, 2.0);
        let b = rng.uniform(-6.0, 6.0);
        let c = rng.uniform(0.0, 2.0);
        let direct = r * sigmoid(b) - c * sigmoid(b);
        max_fact = max_fact.max((direct - joint_debias_score(r, b, c)).abs());
    }
    check(
        "7 (gradient checks)",
        max_rel <= 1e-4 && max_fact <= 1e-12,
        &format!("max_rel_err={max_rel:.2e} max_factorization_err={max_fact:.2e}"),
    );
}

#[test]
fn criterion_8_protocol_fidelity() {
    // trajectory score is the exact min over corrected step scores
    let corpus = generate_corpus(&CorpusSpec {
        num_questions: 20,
        seed: 99,
        ..CorpusSpec::default()
    })
    .unwrap();
    let (prm, _) = train_vanilla(
        &corpus,
        &TrainConfig {
            epochs: 1,
            batch: 512,
            lr: 3e-3,
            seed: 99,
        },
    )
    .unwrap();
    let pipe = ColdPipeline {
        prm,
        estimator: None,
        penalty: Some(PenaltyConfig { alpha: ALPHA }),
    };
    let (trajs, steps) = score_corpus(&pipe, &corpus).unwrap();
    let min_ok = trajs.iter().all(|t| {
        let m = steps
            .iter()
            .filter(|s| s.question_id == t.question_id && s.trajectory_id == t.trajectory_id)
            .map(|s| s.corrected)
            .fold(f64::INFINITY, f64::min);
        m == t.score
    });
    let half = two_logit_reward(0.0, 0.0).unwrap();
    let rho = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    let grid_ok = SWEEP_C_GRID == [0.7, 0.9, 1.1, 1.3, 1.5];
    check(
        "8 (protocol fidelity)",
        min_ok && half == 0.5 && (rho - 0.8).abs() < 1e-15 && grid_ok,
        &format!("min_ok={min_ok} half={half} rho={rho} grid_ok={grid_ok}"),
    );
}

#[test]
fn criterion_9_pipeline_is_deterministic() {
    let t0 = Instant::now();
    let base = std::env::temp_dir().join(format!("prmlab-accept-{}", std::process::id()));
    let run = |dir: std::path::PathBuf| {
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = RunConfig {
            out_dir: dir.clone(),
            ..RunConfig::default()
        };
        cli::cmd_gen(&cfg).unwrap();
        cli::cmd_train(&cfg, TrainMethod::Vanilla).unwrap();
        cli::cmd_train(&cfg, TrainMethod::Bias).unwrap();
        cli::cmd_train(&cfg, TrainMethod::Joint).unwrap();
        cli::cmd_eval(&cfg, PipelineKind::Joint).unwrap();
        dir
    };
    let a = run(base.join("a"));
    let b = run(base.join("b"));
    let mut identical = true;
    for name in [
        paths::LOSS_VANILLA,
        paths::LOSS_BIAS,
        paths::LOSS_JOINT,
        paths::EVAL_REPORT_CSV,
    ] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        if fa != fb {
            identical = false;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    std::fs::remove_dir_all(&base).ok();
    check(
        "9 (determinism)",
        identical && secs <= 600.0,
        &format!("identical={identical} secs={secs:.1}"),
    );
}
