//! End-to-end acceptance checks on the default environment.
//!
//! Each test prints one `PASS`/`FAIL` line (written straight to stderr so it
//! survives output capture) and then asserts. Expensive artifacts (dataset,
//! learned models, trained policies) are built once and shared.
//!
//! The reference numbers below are the published results these checks
//! compare against.

mod common;

use std::io::Write as _;
use std::sync::OnceLock;

use prefshift::env::{check_simplex, total_variation, Item, Slate};
use prefshift::episode::{OracleShiftEstimator, PolicyRecommender, UserSource};
use prefshift::experiment::{self, ExperimentConfig, PolicyCell, TrainMode, TrainedModels};
use prefshift::metrics::{evaluate_policy, shift_distance, EvalMode, EvalReport, ShiftMetrics};
use prefshift::model::{
    dataset_loss_and_gradient, evaluate_predictor, PredictionReport, SequenceModel, Task, TrainConfig,
};
use prefshift::oracle::{BeliefVec, Oracle};
use prefshift::policy::lstm::{ppo_loss, step, LossWeights, LstmShape, LstmState, SeqBatch};
use prefshift::policy::ppo::{discounted_returns, train_policy, LstmPolicy, PgConfig};
use prefshift::policy::{random_policy, ActionSpace};
use prefshift::rng::seeded;
use prefshift::rollout::{simulate_cohort, simulate_future, Dataset};
use prefshift::user::{UserModel, UserParams};
use rand::Rng;

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn config() -> ExperimentConfig {
    ExperimentConfig { seed: 2024, ..Default::default() }
}

fn data() -> &'static Dataset {
    static D: OnceLock<Dataset> = OnceLock::new();
    D.get_or_init(|| experiment::gen_data(&config()).unwrap())
}

fn models() -> &'static TrainedModels {
    static M: OnceLock<TrainedModels> = OnceLock::new();
    M.get_or_init(|| TrainedModels::train(&config(), data(), |_, _| {}).unwrap())
}

fn oracle_report() -> &'static PredictionReport {
    static R: OnceLock<PredictionReport> = OnceLock::new();
    R.get_or_init(|| evaluate_predictor(&Oracle::new(config().user.build().unwrap()), data().validation()).unwrap())
}

const SEEDS: u64 = 3;

struct Trained {
    cell: PolicyCell,
    replicate: u64,
    policy: LstmPolicy,
    oracle_eval: EvalReport,
}

/// The four oracle-trained cells, three replicates each, plus the two
/// cells trained in simulation.
fn policies() -> &'static Vec<Trained> {
    static P: OnceLock<Vec<Trained>> = OnceLock::new();
    P.get_or_init(|| {
        let cfg = config();
        let mut out = Vec::new();
        for cell in PolicyCell::matrix() {
            let reps = if cell.mode == TrainMode::Oracle { SEEDS } else { 1 };
            for r in 0..reps {
                let m = (cell.mode == TrainMode::Sim).then(models);
                let (policy, _) =
                    experiment::train_policy_cell(&cfg, cell, m, 100 * r + cell_tag(cell), |_| {}).unwrap();
                let oracle_eval = experiment::eval_policy(&cfg, &policy, EvalMode::Oracle, None).unwrap();
                out.push(Trained { cell, replicate: r, policy, oracle_eval });
            }
        }
        out
    })
}

fn cell_tag(c: PolicyCell) -> u64 {
    PolicyCell::matrix().iter().position(|x| *x == c).unwrap() as u64
}

fn mean_metrics(cell: PolicyCell) -> ShiftMetrics {
    let runs: Vec<&Trained> = policies().iter().filter(|t| t.cell == cell).collect();
    let n = runs.len() as f64;
    let mut m = [0.0; 4];
    for t in &runs {
        m.iter_mut().zip(t.oracle_eval.mean.as_array()).for_each(|(a, v)| *a += v / n);
    }
    ShiftMetrics::from_array(m)
}

fn cell(gamma: f64, penalized: bool, mode: TrainMode) -> PolicyCell {
    PolicyCell { gamma, penalized, mode }
}

fn fmt(m: &ShiftMetrics) -> String {
    format!("eng {:.2} u0 {:.2} nps {:.2} sum {:.2}", m.eng, m.eng_u0, m.eng_nps, m.sum)
}

#[test]
fn oracle_matches_enumeration() {
    let (exact, mc) = common::exactness_sweep(91, 60);
    let pass = exact < 1e-10 && mc < 0.02;
    verdict("oracle exactness", pass, &format!("max tv exact {exact:.2e} (< 1e-10), monte-carlo {mc:.4} (< 0.02)"));
    assert!(pass);
}

#[test]
fn learned_model_tracks_oracle() {
    let o = oracle_report();
    let m = evaluate_predictor(&models().future, data().validation()).unwrap();
    let (on, mn) = (o.mean_choice_nll(), m.mean_choice_nll());
    let (oa, ma) = (o.mean_pref_accuracy().unwrap(), m.mean_pref_accuracy().unwrap());
    let pass = mn <= 1.1 * on && ma >= 0.9 * oa;
    verdict(
        "learned model quality",
        pass,
        &format!(
            "choice nll {mn:.4} vs oracle {on:.4} (ratio {:.4}, <= 1.1); pref accuracy {ma:.4} vs oracle {oa:.4} (ratio {:.4}, >= 0.9)",
            mn / on,
            ma / oa
        ),
    );
    assert!(pass);
}

#[test]
fn misspecified_choice_model_fits_worse() {
    let mut details = Vec::new();
    let mut pass = true;
    for s in 0..3u64 {
        let base = ExperimentConfig { seed: 7000 + s, ..config() };
        let d = experiment::gen_data(&base).unwrap();
        let nll = |mis: bool| {
            let cfg = ExperimentConfig { misspecified_choice_model: mis, ..base.clone() };
            let (m, _) = experiment::train_model(&cfg, &d, Task::Future, None).unwrap();
            evaluate_predictor(&m, d.validation()).unwrap().mean_choice_nll()
        };
        let (right, wrong) = (nll(false), nll(true));
        pass &= wrong > right;
        details.push(format!("seed {s}: {right:.4} vs swapped {wrong:.4}"));
    }
    verdict("misspecification raises held-out choice nll", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn imagined_natural_shift_matches_cohort() {
    let cfg = config();
    let user = cfg.user.build().unwrap();
    let rnd = random_policy(user.space());
    let h = cfg.eval.horizon;
    let imagined = simulate_future(&[], &[], &rnd, &models().future, h, 1000, &mut seeded(41)).unwrap();
    let truth = simulate_cohort(&user, &rnd, 1000, h, 42).unwrap();
    let mut tvs = Vec::new();
    for t in 0..h {
        let mut hist = vec![0.0; user.n_bins()];
        for tr in &truth {
            hist[tr.gt_prefs.as_ref().unwrap()[t]] += 1e-3;
        }
        tvs.push(total_variation(imagined.beliefs[t].probs(), &hist));
    }
    let mean = tvs.iter().sum::<f64>() / tvs.len() as f64;
    let pass = mean < 0.15;
    let per: Vec<String> = tvs.iter().map(|v| format!("{v:.3}")).collect();
    verdict(
        "imagined natural shifts",
        pass,
        &format!("mean per-step tv {mean:.4} (< 0.15); per step [{}]", per.join(", ")),
    );
    assert!(pass);
}

// published oracle-training results: eng, eng_u0, eng_nps, sum
const MYOPIC: [f64; 4] = [5.71, 1.99, 2.01, 9.69];
const RL: [f64; 4] = [7.49, -0.08, -1.09, 6.33];
const MYOPIC_PEN: [f64; 4] = [6.20, 3.61, 3.10, 12.90];
const RL_PEN: [f64; 4] = [5.28, 6.21, 4.57, 16.05];

#[test]
fn policy_orderings() {
    let my = mean_metrics(cell(0.0, false, TrainMode::Oracle));
    let rl = mean_metrics(cell(0.99, false, TrainMode::Oracle));
    let myp = mean_metrics(cell(0.0, true, TrainMode::Oracle));
    let rlp = mean_metrics(cell(0.99, true, TrainMode::Oracle));
    for t in policies().iter().filter(|t| t.cell.mode == TrainMode::Oracle) {
        let _ = std::io::stderr()
            .write_all(format!("  {} #{}: {}\n", t.cell.id(), t.replicate, fmt(&t.oracle_eval.mean)).as_bytes());
    }
    let a = rl.eng > my.eng;
    let drop = (my.sum - rl.sum) / my.sum;
    let b = rl.sum < my.sum && (0.20..=0.50).contains(&drop);
    let c = rlp.sum > myp.sum && myp.sum > my.sum;
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, got, want) in
        [("myopic", &my, MYOPIC), ("rl", &rl, RL), ("myopic_pen", &myp, MYOPIC_PEN), ("rl_pen", &rlp, RL_PEN)]
    {
        for (k, (g, w)) in got.as_array().iter().zip(want).enumerate() {
            let rel = (g - w).abs() / w.abs();
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}] {g:.2} vs {w:.2}"));
            }
        }
    }
    let d = worst.0 <= 0.30;
    verdict("policy orderings (a) rl eng > myopic eng", a, &format!("{:.2} vs {:.2}", rl.eng, my.eng));
    verdict(
        "policy orderings (b) rl sum ~35% below myopic",
        b,
        &format!("{:.2} vs {:.2}, drop {:.0}% (20..50%)", rl.sum, my.sum, 100.0 * drop),
    );
    verdict(
        "policy orderings (c) penalized rl > penalized myopic > myopic",
        c,
        &format!("{:.2} > {:.2} > {:.2}", rlp.sum, myp.sum, my.sum),
    );
    verdict(
        "policy orderings (d) absolute values within 30%",
        d,
        &format!("worst {} ({:.0}% off)", worst.1, 100.0 * worst.0),
    );
    assert!(a && b && c && d);
}

#[test]
fn estimated_evaluation_preserves_ordering() {
    let cfg = config();
    let first = |c: PolicyCell| policies().iter().find(|t| t.cell == c && t.replicate == 0).unwrap();
    let mut pass = true;
    let mut details = Vec::new();
    for mode in [TrainMode::Oracle, TrainMode::Sim] {
        let (un, pen) = (first(cell(0.99, false, mode)), first(cell(0.99, true, mode)));
        let est = |t: &Trained| {
            experiment::eval_policy(&cfg, &t.policy, EvalMode::Estimated, Some(models())).unwrap().mean.sum
        };
        let (eu, ep) = (est(un), est(pen));
        let (ou, op) = (un.oracle_eval.mean.sum, pen.oracle_eval.mean.sum);
        let same = (op > ou) == (ep > eu);
        pass &= same;
        details.push(format!(
            "{mode}-trained: oracle eval pen {op:.2} / unpen {ou:.2}, estimated pen {ep:.2} / unpen {eu:.2}"
        ));
    }
    let sim = first(cell(0.99, true, TrainMode::Sim)).oracle_eval.mean.sum;
    let orc = first(cell(0.99, true, TrainMode::Oracle)).oracle_eval.mean.sum;
    let ratio = sim / orc;
    pass &= ratio >= 0.85;
    details.push(format!(
        "sim-trained penalized sum {sim:.2} = {:.0}% of oracle-trained {orc:.2} (>= 85%)",
        100.0 * ratio
    ));
    verdict("estimated evaluation consistency", pass, &details.join("; "));
    assert!(pass);
}

#[test]
fn evaluation_standard_errors() {
    let cfg = config();
    let user = cfg.user.build().unwrap();
    let est = OracleShiftEstimator::new(Oracle::new(user.clone())).unwrap();
    let rnd = PolicyRecommender(random_policy(user.space()));
    let mut reports = vec![(
        "random".to_string(),
        evaluate_policy(&rnd, &est, UserSource::GroundTruth(&user), &cfg.eval, 5).unwrap(),
    )];
    for t in policies().iter().filter(|t| t.replicate == 0) {
        reports.push((t.cell.id(), t.oracle_eval.clone()));
    }
    const NAMES: [&str; 4] = ["eng", "eng_u0", "eng_nps", "sum"];
    let worst = reports
        .iter()
        .flat_map(|(id, r)| r.se.as_array().into_iter().zip(NAMES).map(move |(v, m)| (v, format!("{id} {m}"))))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a });
    let pass = reports.iter().all(|(_, r)| r.n_traj == 1000) && worst.0 < 0.1;
    let per: Vec<String> = reports
        .iter()
        .map(|(id, r)| {
            let s = r.se.as_array();
            format!("{id} [{:.3} {:.3} {:.3} {:.3}]", s[0], s[1], s[2], s[3])
        })
        .collect();
    verdict(
        "standard errors at 1000 trajectories",
        pass,
        &format!("largest se {:.4} ({}) over {} policies; {}", worst.0, worst.1, reports.len(), per.join(", ")),
    );
    assert!(pass);
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

fn sequence_model_gradient_error(task: Task) -> f64 {
    let user = UserModel::default_model();
    let cfg = TrainConfig { hidden: 5, components: 2, ..Default::default() };
    let d = &data().train()[..6];
    let init = (task == Task::Counterfactual)
        .then(|| SequenceModel::new(Task::Initial, user.choice_model(), &cfg, &mut seeded(3)).unwrap());
    let mut m = SequenceModel::new(task, user.choice_model(), &cfg, &mut seeded(4)).unwrap();
    let loss = |m: &SequenceModel| dataset_loss_and_gradient(m, d, &cfg, init.as_ref(), &mut seeded(5)).unwrap();
    let (_, g) = loss(&m);
    let mut rng = seeded(6);
    let mut worst: f64 = 0.0;
    for _ in 0..150 {
        let i = rng.random_range(0..g.len());
        let mut p = m.params().clone();
        let orig = p.get(i);
        let h = 1e-6;
        p.set(i, orig + h);
        m.set_params(p.clone()).unwrap();
        let up = loss(&m).0;
        p.set(i, orig - h);
        m.set_params(p.clone()).unwrap();
        let dn = loss(&m).0;
        p.set(i, orig);
        m.set_params(p).unwrap();
        worst = worst.max(rel_err((up - dn) / (2.0 * h), g.get(i)));
    }
    worst
}

fn policy_gradient_error() -> f64 {
    let shape = LstmShape { n_bins: 3, hidden: 4, n_actions: 6 };
    let mut p = shape.init(&mut seeded(8));
    let mut rng = seeded(9);
    let (rows, steps) = (3, 4);
    let inputs: Vec<ndarray::Array2<f64>> = (0..steps)
        .map(|_| ndarray::Array2::from_shape_fn((rows, shape.input_dim()), |_| rng.random::<f64>()))
        .collect();
    let mut actions = vec![vec![0; rows]; steps];
    let mut old_logp = vec![vec![0.0; rows]; steps];
    for r in 0..rows {
        let mut st = LstmState::zeros(&shape);
        for t in 0..steps {
            let (pi, _) = step(&shape, &p, &mut st, inputs[t].row(r).as_slice().unwrap());
            actions[t][r] = rng.random_range(0..6);
            old_logp[t][r] = pi[actions[t][r]].ln() + rng.random_range(-0.5..0.5);
        }
    }
    let mut grid = |s: f64| -> Vec<Vec<f64>> {
        (0..steps).map(|_| (0..rows).map(|_| rng.random_range(-s..s)).collect()).collect()
    };
    let batch = SeqBatch { inputs, actions, old_logp, old_value: grid(1.0), returns: grid(2.0), advantages: grid(1.0) };
    let w = LossWeights { clip: 0.5, value_clip: 0.3, value_coeff: 8.0, entropy_coeff: 0.01 };
    let mut g = p.zeros_like();
    ppo_loss(&shape, &p, &batch, &w, Some(&mut g));
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        let orig = p.get(i);
        let h = 1e-6;
        p.set(i, orig + h);
        let up = ppo_loss(&shape, &p, &batch, &w, None).total;
        p.set(i, orig - h);
        let dn = ppo_loss(&shape, &p, &batch, &w, None).total;
        p.set(i, orig);
        worst = worst.max(rel_err((up - dn) / (2.0 * h), g.get(i)));
    }
    worst
}

fn rotated_user(user: &UserModel, k: usize) -> UserModel {
    let s = user.space();
    let p = user.params();
    let params = UserParams {
        beta_c_field: s.rotate(&p.beta_c_field, k),
        init_pref_mean: p.init_pref_mean + k as f64 * s.bin_width_deg(),
        ..p.clone()
    };
    UserModel::new(s.clone(), params).unwrap()
}

#[test]
fn property_suite() {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let user = UserModel::default_model();
    let space = user.space().clone();
    let oracle = Oracle::new(user.clone());
    let traj = &data().validation()[..20];

    // simplex invariants across every belief-producing component
    let mut simplex = ActionSpace::new(&space).slates().iter().all(|s| check_simplex(s.probs()).is_ok());
    for t in traj {
        let k = 1 + t.user_id as usize % t.len();
        let (s, x) = (&t.slates[..k], &t.choices[..k]);
        for b in [
            oracle.filter_sequence(s, x).unwrap().into_inner(),
            oracle.smooth_initial(s, x).unwrap().into_inner(),
            models().future.predict_next(s, x).unwrap().density_at_bins(&space),
            prefshift::rollout::InitialEstimator::initial_belief(&models().initial, s, x).unwrap().into_inner(),
        ] {
            simplex &= check_simplex(&b).is_ok();
        }
        simplex &=
            check_simplex(&user.user_choice_distribution(t.gt_prefs.as_ref().unwrap()[0], &s[0]).unwrap()).is_ok();
    }
    checks.push(("simplex invariants", simplex));

    // rotating the whole world by k bins rotates dynamics and inference
    let mut equivariant = true;
    for k in [1usize, 7, 20] {
        let ru = rotated_user(&user, k);
        let ro = Oracle::new(ru.clone());
        for t in &traj[..5] {
            let rs: Vec<Slate> = t.slates.iter().map(|s| Slate::new(space.rotate(s.probs(), k)).unwrap()).collect();
            let rx: Vec<Item> = t.choices.iter().map(|x| Item((x.0 + k) % space.n_bins())).collect();
            let a = space.rotate(oracle.filter_sequence(&t.slates, &t.choices).unwrap().probs(), k);
            let b = ro.filter_sequence(&rs, &rx).unwrap();
            let a0 = space.rotate(oracle.smooth_initial(&t.slates, &t.choices).unwrap().probs(), k);
            let b0 = ro.smooth_initial(&rs, &rx).unwrap();
            equivariant &= total_variation(&a, b.probs()) < 1e-9 && total_variation(&a0, b0.probs()) < 1e-9;
            let u = t.gt_prefs.as_ref().unwrap()[0];
            let tr = space.rotate(&user.transition_matrix_for_slate(&t.slates[0]).unwrap()[u * 36..(u + 1) * 36], k);
            let rt = ru.transition_matrix_for_slate(&rs[0]).unwrap();
            let v = (u + k) % 36;
            equivariant &= total_variation(&tr, &rt[v * 36..(v + 1) * 36]) < 1e-9;
        }
    }
    checks.push(("rotation equivariance", equivariant));

    // a trajectory is at distance zero from itself
    let mut zero = true;
    for t in traj {
        let beliefs: Vec<Vec<f64>> = (0..t.len())
            .map(|k| oracle.filter_sequence(&t.slates[..k], &t.choices[..k]).unwrap().into_inner())
            .collect();
        let px: Vec<Vec<f64>> = beliefs
            .iter()
            .zip(&t.slates)
            .map(|(b, s)| oracle.predictive_choice(&BeliefVec::new(b.clone()).unwrap(), s).unwrap())
            .collect();
        zero &= shift_distance(&space, &beliefs, &px, &beliefs).unwrap() == 0.0;
    }
    checks.push(("self distance is zero", zero));

    let rewards: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
    checks.push(("zero discount returns are the rewards", discounted_returns(&rewards, 0.0) == rewards));

    let grads = [
        sequence_model_gradient_error(Task::Future),
        sequence_model_gradient_error(Task::Initial),
        sequence_model_gradient_error(Task::Counterfactual),
        policy_gradient_error(),
    ];
    let worst_grad = grads.iter().cloned().fold(0.0, f64::max);
    checks.push(("gradients match finite differences", worst_grad < 1e-4));

    // same seed, one worker: identical data, models and policies
    let small = ExperimentConfig {
        seed: 99,
        dataset: prefshift::rollout::DatasetConfig { n_traj: 120, ..Default::default() },
        model: TrainConfig { epochs: 2, hidden: 8, ..Default::default() },
        ..config()
    };
    let d1 = experiment::gen_data(&small).unwrap();
    let d2 = experiment::gen_data(&small).unwrap();
    let m1 = experiment::train_model(&small, &d1, Task::Future, None).unwrap().0;
    let m2 = experiment::train_model(&small, &d2, Task::Future, None).unwrap().0;
    let pg = PgConfig {
        iterations: 2,
        batch_size: 60,
        minibatch_size: 30,
        updates_per_minibatch: 2,
        workers: 1,
        hidden: 8,
        ..Default::default()
    };
    let est = OracleShiftEstimator::new(oracle.clone()).unwrap();
    let run = || train_policy("p", &space, &est, UserSource::GroundTruth(&user), &pg, 5, |_| {}).unwrap();
    let (p1, c1) = run();
    let (p2, c2) = run();
    let reproducible = d1 == d2
        && m1.to_json().unwrap() == m2.to_json().unwrap()
        && p1.to_json().unwrap() == p2.to_json().unwrap()
        && c1 == c2;
    checks.push(("bit reproducibility", reproducible));

    let pass = checks.iter().all(|c| c.1);
    let detail: Vec<String> =
        checks.iter().map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "FAILED" })).collect();
    verdict("property suite", pass, &format!("{}; worst gradient error {worst_grad:.2e}", detail.join(", ")));
    assert!(pass);
}
