//! Exact inference against brute-force enumeration over preference paths.

mod common;

use common::*;
use prefshift::env::{total_variation, Item, Slate};
use prefshift::oracle::{BeliefVec, Oracle};
use prefshift::policy::MixturePolicy;
use prefshift::rng::seeded;
use prefshift::user::UserModel;
use rand::Rng;

#[test]
fn filter_sequence_matches_enumeration() {
    let mut rng = seeded(11);
    for _ in 0..60 {
        let inst = random_instance(&mut rng);
        let got = inst.oracle.filter_sequence(&inst.slates, &inst.choices).unwrap();
        let (acc, _) = Brute::run(&inst.oracle, &inst.slates, &inst.choices, None, 0);
        assert!(total_variation(got.probs(), &acc[0]) < 1e-10);
    }
}

#[test]
fn smooth_initial_matches_enumeration() {
    let mut rng = seeded(12);
    for _ in 0..60 {
        let inst = random_instance(&mut rng);
        let got = inst.oracle.smooth_initial(&inst.slates, &inst.choices).unwrap();
        let (_, u0) = Brute::run(&inst.oracle, &inst.slates, &inst.choices, None, 0);
        assert!(total_variation(got.probs(), &u0) < 1e-10);
    }
}

#[test]
fn smoothing_single_step_is_one_filter_step() {
    let mut rng = seeded(13);
    let inst = random_instance(&mut rng);
    let o = &inst.oracle;
    let got = o.smooth_initial(&inst.slates[..1], &inst.choices[..1]).unwrap();
    let want = o.filter_step(o.prior(), &inst.slates[0], inst.choices[0]).unwrap();
    assert!(total_variation(got.probs(), want.probs()) < 1e-12);
}

#[test]
fn predict_future_exact_for_fixed_mixture() {
    let mut rng = seeded(14);
    for _ in 0..30 {
        let inst = random_instance(&mut rng);
        let n = inst.oracle.n_bins();
        let pol = MixturePolicy::new(
            "mix",
            vec![
                (0.3, Slate::new(random_simplex(n, &mut rng)).unwrap()),
                (0.7, Slate::new(random_simplex(n, &mut rng)).unwrap()),
            ],
        )
        .unwrap();
        let extra = 2;
        let h = inst.slates.len() + extra;
        let got = inst.oracle.predict_future(&inst.slates, &inst.choices, &pol, h, 1, &mut rng).unwrap();
        let (acc, _) = Brute::run(&inst.oracle, &inst.slates, &inst.choices, Some(&pol), extra);
        assert_eq!(got.len(), extra + 1);
        for (g, w) in got.iter().zip(&acc) {
            assert!(total_variation(g.probs(), w) < 1e-10);
        }
        // zero extra steps reduces to filtering
        let only =
            inst.oracle.predict_future(&inst.slates, &inst.choices, &pol, inst.slates.len(), 1, &mut rng).unwrap();
        assert_eq!(only, vec![inst.oracle.filter_sequence(&inst.slates, &inst.choices).unwrap()]);
    }
}

#[test]
fn predict_future_monte_carlo_for_history_dependent_policy() {
    let mut rng = seeded(15);
    for _ in 0..4 {
        let user = random_user(4, &mut rng);
        let oracle = Oracle::with_prior(user, BeliefVec::new(random_simplex(4, &mut rng)).unwrap()).unwrap();
        let len = rng.random_range(1..=3);
        let slates: Vec<Slate> = (0..len).map(|_| Slate::new(random_simplex(4, &mut rng)).unwrap()).collect();
        let choices: Vec<Item> = (0..len).map(|_| Item(rng.random_range(0..4))).collect();
        let pol = two_action_policy(4);
        let extra = 2;
        let got = oracle.predict_future(&slates, &choices, &pol, len + extra, 10_000, &mut rng).unwrap();
        let (acc, _) = Brute::run(&oracle, &slates, &choices, Some(&pol), extra);
        for (g, w) in got.iter().zip(&acc) {
            assert!(total_variation(g.probs(), w) < 0.02, "tv {}", total_variation(g.probs(), w));
        }
    }
}

#[test]
fn counterfactual_matches_enumeration() {
    let mut rng = seeded(16);
    for _ in 0..30 {
        let inst = random_instance(&mut rng);
        let n = inst.oracle.n_bins();
        let pol = MixturePolicy::new(
            "mix",
            vec![
                (0.6, Slate::new(random_simplex(n, &mut rng)).unwrap()),
                (0.4, Slate::new(random_simplex(n, &mut rng)).unwrap()),
            ],
        )
        .unwrap();
        let (_, u0) = Brute::run(&inst.oracle, &inst.slates, &inst.choices, None, 0);
        let posterior = Oracle::with_prior(inst.oracle.user().clone(), BeliefVec::new(u0).unwrap()).unwrap();
        let t_target = 3;
        let (acc, _) = Brute::run(&posterior, &[], &[], Some(&pol), t_target);
        let got = inst.oracle.counterfactual(&inst.slates, &inst.choices, &pol, t_target, 1, &mut rng).unwrap();
        assert!(total_variation(got.probs(), &acc[t_target]) < 1e-10);
        let zero = inst.oracle.counterfactual(&inst.slates, &inst.choices, &pol, 0, 1, &mut rng).unwrap();
        assert_eq!(zero, inst.oracle.smooth_initial(&inst.slates, &inst.choices).unwrap());
    }
}

#[test]
fn counterfactual_monte_carlo_for_history_dependent_policy() {
    let mut rng = seeded(17);
    for _ in 0..3 {
        let user = random_user(4, &mut rng);
        let oracle = Oracle::with_prior(user, BeliefVec::new(random_simplex(4, &mut rng)).unwrap()).unwrap();
        let slates: Vec<Slate> = (0..3).map(|_| Slate::new(random_simplex(4, &mut rng)).unwrap()).collect();
        let choices: Vec<Item> = (0..3).map(|_| Item(rng.random_range(0..4))).collect();
        let pol = two_action_policy(4);
        let (_, u0) = Brute::run(&oracle, &slates, &choices, None, 0);
        let posterior = Oracle::with_prior(oracle.user().clone(), BeliefVec::new(u0).unwrap()).unwrap();
        let (acc, _) = Brute::run(&posterior, &[], &[], Some(&pol), 3);
        let got = oracle.counterfactual(&slates, &choices, &pol, 3, 10_000, &mut rng).unwrap();
        assert!(total_variation(got.probs(), &acc[3]) < 0.02);
    }
}

#[test]
fn flat_likelihood_step_leaves_filter_unchanged() {
    // a one-hot slate forces the choice, so the observation carries no information
    let mut rng = seeded(18);
    let inst = random_instance(&mut rng);
    let o = &inst.oracle;
    let n = o.n_bins();
    let b = o.filter_sequence(&inst.slates, &inst.choices).unwrap();
    let forced = Slate::one_hot(n, n - 1).unwrap();
    let post = o.filter_step(&b, &forced, Item(n - 1)).unwrap();
    assert!(total_variation(post.probs(), b.probs()) < 1e-12);
}

#[test]
fn outputs_are_simplices() {
    let mut rng = seeded(19);
    for _ in 0..40 {
        let inst = random_instance(&mut rng);
        let o = &inst.oracle;
        let pol = two_action_policy(o.n_bins());
        let mut outs = vec![
            o.filter_sequence(&inst.slates, &inst.choices).unwrap(),
            o.smooth_initial(&inst.slates, &inst.choices).unwrap(),
        ];
        outs.extend(o.predict_future(&inst.slates, &inst.choices, &pol, inst.slates.len() + 2, 50, &mut rng).unwrap());
        for b in outs {
            assert!(BeliefVec::new(b.into_inner()).is_ok());
        }
    }
}

fn rotate<T: Copy>(v: &[T], k: usize) -> Vec<T> {
    let n = v.len();
    let mut out = v.to_vec();
    for (i, &x) in v.iter().enumerate() {
        out[(i + k) % n] = x;
    }
    out
}

#[test]
fn inference_is_rotation_equivariant() {
    let mut rng = seeded(20);
    for _ in 0..20 {
        let inst = random_instance(&mut rng);
        let o = &inst.oracle;
        let n = o.n_bins();
        let k = rng.random_range(1..n.max(2));
        let mut params = o.user().params().clone();
        params.beta_c_field = rotate(&params.beta_c_field, k);
        let user = UserModel::new(o.space().clone(), params).unwrap();
        let prior = BeliefVec::new(rotate(o.prior().probs(), k)).unwrap();
        let r = Oracle::with_prior(user, prior).unwrap();
        let rs: Vec<Slate> = inst.slates.iter().map(|s| Slate::new(rotate(s.probs(), k)).unwrap()).collect();
        let rx: Vec<Item> = inst.choices.iter().map(|x| Item((x.0 + k) % n)).collect();

        let a = o.filter_sequence(&inst.slates, &inst.choices).unwrap();
        let b = r.filter_sequence(&rs, &rx).unwrap();
        assert!(total_variation(&rotate(a.probs(), k), b.probs()) < 1e-10);
        let a = o.smooth_initial(&inst.slates, &inst.choices).unwrap();
        let b = r.smooth_initial(&rs, &rx).unwrap();
        assert!(total_variation(&rotate(a.probs(), k), b.probs()) < 1e-10);
    }
}

#[test]
fn randomized_sweep_within_tolerance() {
    let (exact, mc) = exactness_sweep(21, 40);
    assert!(exact < 1e-10, "exact tv {exact}");
    assert!(mc < 0.02, "monte-carlo tv {mc}");
}
