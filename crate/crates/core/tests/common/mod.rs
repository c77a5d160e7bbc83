//! Brute-force reference inference shared by the integration tests.
#![allow(dead_code)]

use prefshift::env::{total_variation, Item, PrefSpace, Slate};
use prefshift::oracle::{BeliefVec, Oracle};
use prefshift::policy::{FnPolicy, MixturePolicy, SlatePolicy};
use prefshift::rng::{seeded, SimRng};
use prefshift::user::{UserModel, UserParams};
use rand::Rng;

pub struct Instance {
    pub oracle: Oracle,
    pub slates: Vec<Slate>,
    pub choices: Vec<Item>,
}

pub fn random_simplex(n: usize, rng: &mut SimRng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn random_user(n: usize, rng: &mut SimRng) -> UserModel {
    let params = UserParams {
        lambda: rng.random::<f64>(),
        beta_d: rng.random_range(0.5..6.0),
        beta_c_field: (0..n).map(|_| rng.random_range(0.2..4.0)).collect(),
        init_pref_mean: 0.0,
        init_pref_std: 90.0,
    };
    UserModel::new(PrefSpace::new(n).unwrap(), params).unwrap()
}

pub fn random_instance(rng: &mut SimRng) -> Instance {
    let n = rng.random_range(2..=6);
    let len = rng.random_range(1..=4);
    let user = random_user(n, rng);
    let prior = BeliefVec::new(random_simplex(n, rng)).unwrap();
    let slates: Vec<Slate> = (0..len).map(|_| Slate::new(random_simplex(n, rng)).unwrap()).collect();
    let choices = (0..len).map(|_| Item(rng.random_range(0..n))).collect();
    Instance { oracle: Oracle::with_prior(user, prior).unwrap(), slates, choices }
}

pub fn choice(user: &UserModel, u: usize, s: &Slate) -> Vec<f64> {
    user.user_choice_distribution(u, s).unwrap()
}

pub fn trans(user: &UserModel, u: usize, s: &Slate) -> Vec<f64> {
    user.preference_transition(u, &user.update_slate_belief(s).unwrap()).unwrap()
}

pub fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Walks every preference path through the observed steps, then every
/// (slate, choice, preference) branch of the policy for `extra` more steps.
/// Returns per-time unnormalized masses over `u_t` for `t >= observed.len()`,
/// plus the mass over `u_0`.
pub struct Brute<'a> {
    user: &'a UserModel,
    slates: &'a [Slate],
    choices: &'a [Item],
    policy: Option<&'a dyn SlatePolicy>,
    extra: usize,
    acc: Vec<Vec<f64>>,
    u0: Vec<f64>,
}

impl<'a> Brute<'a> {
    pub fn run(
        oracle: &'a Oracle,
        slates: &'a [Slate],
        choices: &'a [Item],
        policy: Option<&'a dyn SlatePolicy>,
        extra: usize,
    ) -> (Vec<Vec<f64>>, Vec<f64>) {
        let user = oracle.user();
        let n = user.n_bins();
        let mut b =
            Brute { user, slates, choices, policy, extra, acc: vec![vec![0.0; n]; extra + 1], u0: vec![0.0; n] };
        for u0 in 0..n {
            let w = oracle.prior().probs()[u0];
            b.walk(0, u0, u0, w, &mut slates.to_vec(), &mut choices.to_vec());
        }
        let acc = b.acc.into_iter().map(normalized).collect();
        (acc, normalized(b.u0))
    }

    fn walk(&mut self, t: usize, u0: usize, u: usize, w: f64, hs: &mut Vec<Slate>, hx: &mut Vec<Item>) {
        let n = self.user.n_bins();
        let len = self.slates.len();
        if t < len {
            let s = &self.slates[t];
            let l = choice(self.user, u, s)[self.choices[t].0];
            let row = trans(self.user, u, s);
            for v in 0..n {
                self.walk(t + 1, u0, v, w * l * row[v], hs, hx);
            }
            return;
        }
        self.acc[t - len][u] += w;
        if t == len {
            self.u0[u0] += w;
        }
        if t - len == self.extra {
            return;
        }
        let dist = self.policy.unwrap().slate_distribution(hs, hx);
        for (ps, s) in dist {
            let cp = choice(self.user, u, &s);
            let row = trans(self.user, u, &s);
            for x in 0..n {
                hs.push(s.clone());
                hx.push(Item(x));
                for v in 0..n {
                    self.walk(t + 1, u0, v, w * ps * cp[x] * row[v], hs, hx);
                }
                hs.pop();
                hx.pop();
            }
        }
    }
}

pub fn two_action_policy(n: usize) -> impl SlatePolicy {
    let a = Slate::new(normalized((0..n).map(|i| 1.0 + i as f64).collect())).unwrap();
    let b = Slate::new(normalized((0..n).map(|i| (n - i) as f64 * 2.0).collect())).unwrap();
    FnPolicy::new("two_action", move |_: &[Slate], xs: &[Item]| {
        // lean toward `a` after a low-index choice
        let p = match xs.last() {
            Some(x) if x.0 < n / 2 => 0.8,
            Some(_) => 0.3,
            None => 0.5,
        };
        vec![(p, a.clone()), (1.0 - p, b.clone())]
    })
}

/// Worst total variation between the oracle and enumeration over random
/// small instances: (exact branches, Monte-Carlo branches at 10^4 samples).
pub fn exactness_sweep(seed: u64, instances: usize) -> (f64, f64) {
    let mut rng = seeded(seed);
    let (mut exact, mut mc) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let inst = random_instance(&mut rng);
        let o = &inst.oracle;
        let n = o.n_bins();
        let (acc, u0) = Brute::run(o, &inst.slates, &inst.choices, None, 0);
        exact = exact.max(total_variation(o.filter_sequence(&inst.slates, &inst.choices).unwrap().probs(), &acc[0]));
        exact = exact.max(total_variation(o.smooth_initial(&inst.slates, &inst.choices).unwrap().probs(), &u0));

        let mix = MixturePolicy::new(
            "mix",
            vec![
                (0.4, Slate::new(random_simplex(n, &mut rng)).unwrap()),
                (0.6, Slate::new(random_simplex(n, &mut rng)).unwrap()),
            ],
        )
        .unwrap();
        let extra = 4 - inst.slates.len().min(3);
        let h = inst.slates.len() + extra;
        let got = o.predict_future(&inst.slates, &inst.choices, &mix, h, 1, &mut rng).unwrap();
        let (fut, _) = Brute::run(o, &inst.slates, &inst.choices, Some(&mix), extra);
        for (g, w) in got.iter().zip(&fut) {
            exact = exact.max(total_variation(g.probs(), w));
        }
        let posterior = Oracle::with_prior(o.user().clone(), BeliefVec::new(u0.clone()).unwrap()).unwrap();
        let (cf, _) = Brute::run(&posterior, &[], &[], Some(&mix), extra);
        let got = o.counterfactual(&inst.slates, &inst.choices, &mix, extra, 1, &mut rng).unwrap();
        exact = exact.max(total_variation(got.probs(), &cf[extra]));

        // history-dependent policies need sampling; a few instances suffice
        if i % 10 == 0 && n <= 4 {
            let pol = two_action_policy(n);
            let got =
                o.predict_future(&inst.slates, &inst.choices, &pol, inst.slates.len() + 2, 10_000, &mut rng).unwrap();
            let (fut, _) = Brute::run(o, &inst.slates, &inst.choices, Some(&pol), 2);
            for (g, w) in got.iter().zip(&fut) {
                mc = mc.max(total_variation(g.probs(), w));
            }
            let (cf, _) = Brute::run(&posterior, &[], &[], Some(&pol), 2);
            let got = o.counterfactual(&inst.slates, &inst.choices, &pol, 2, 10_000, &mut rng).unwrap();
            mc = mc.max(total_variation(got.probs(), &cf[2]));
        }
    }
    (exact, mc)
}
