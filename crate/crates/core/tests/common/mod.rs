#![allow(dead_code)]

use hysrl_core::mdp::rng_stream;
use hysrl_core::{Dims, Policy, TabularMdp};
use rand::Rng;

/// Random MDP with sparse kernel rows; rewards in `[0, 1]`.
pub fn random_mdp<R: Rng>(rng: &mut R, dims: Dims) -> TabularMdp {
    let n = dims.states;
    let mut kernel = Vec::with_capacity(dims.pairs() * n);
    for _ in 0..dims.pairs() {
        let keep = rng.gen_range(0..n);
        let mut row: Vec<f64> = (0..n)
            .map(|j| {
                if j == keep || rng.gen_bool(0.6) {
                    rng.gen::<f64>() + 1e-3
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        kernel.extend(row);
    }
    let reward = (0..dims.pairs()).map(|_| rng.gen::<f64>()).collect();
    let mut rho: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let total: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|p| *p /= total);
    TabularMdp::new(dims, kernel, reward, rho).expect("valid random MDP")
}

pub fn random_dims<R: Rng>(rng: &mut R, max_s: usize, max_a: usize, max_h: usize) -> Dims {
    Dims::new(
        rng.gen_range(1..=max_s),
        rng.gen_range(1..=max_a),
        rng.gen_range(1..=max_h),
    )
}

pub fn random_stochastic_policy<R: Rng>(rng: &mut R, dims: Dims) -> Policy {
    let mut probs = Vec::with_capacity(dims.horizon * dims.pairs());
    for _ in 0..dims.horizon * dims.states {
        let row: Vec<f64> = (0..dims.actions).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|p| p / total));
    }
    Policy::stochastic(dims, probs).expect("valid policy")
}

pub fn random_deterministic_policy<R: Rng>(rng: &mut R, dims: Dims) -> Policy {
    let actions = (0..dims.horizon * dims.states)
        .map(|_| rng.gen_range(0..dims.actions))
        .collect();
    Policy::deterministic(dims, actions).expect("valid policy")
}

/// Every deterministic non-stationary policy, as flat `h*S + s` tables.
pub fn all_deterministic_policies(dims: Dims) -> Vec<Policy> {
    let slots = dims.horizon * dims.states;
    let total = dims.actions.pow(slots as u32);
    (0..total)
        .map(|mut code| {
            let actions = (0..slots)
                .map(|_| {
                    let a = code % dims.actions;
                    code /= dims.actions;
                    a
                })
                .collect();
            Policy::deterministic(dims, actions).expect("valid policy")
        })
        .collect()
}

/// One complete trajectory with its probability under `(mdp, pi)`.
pub struct Path {
    pub prob: f64,
    pub ret: f64,
    pub pairs: Vec<(usize, usize)>,
}

/// Exhaustive enumeration of every positive-probability trajectory.
pub fn enumerate_paths(mdp: &TabularMdp, pi: &Policy) -> Vec<Path> {
    fn walk(
        mdp: &TabularMdp,
        pi: &Policy,
        h: usize,
        s: usize,
        prefix: &mut Path,
        out: &mut Vec<Path>,
    ) {
        if h == mdp.horizon() {
            out.push(Path {
                prob: prefix.prob,
                ret: prefix.ret,
                pairs: prefix.pairs.clone(),
            });
            return;
        }
        for a in 0..mdp.num_actions() {
            let pa = pi.prob(h, s, a);
            if pa == 0.0 {
                continue;
            }
            for (next, &p) in mdp.kernel_row(s, a).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let (prob, ret) = (prefix.prob, prefix.ret);
                prefix.prob *= pa * p;
                prefix.ret += mdp.reward(s, a);
                prefix.pairs.push((s, a));
                walk(mdp, pi, h + 1, next, prefix, out);
                prefix.pairs.pop();
                prefix.prob = prob;
                prefix.ret = ret;
            }
        }
    }
    let mut out = Vec::new();
    for (s, &p) in mdp.rho().iter().enumerate() {
        if p > 0.0 {
            let mut prefix = Path {
                prob: p,
                ret: 0.0,
                pairs: Vec::new(),
            };
            walk(mdp, pi, 0, s, &mut prefix, &mut out);
        }
    }
    out
}

/// Fixed-seed generator for oracle sweeps.
pub fn oracle_rng(tag: u64) -> hysrl_core::mdp::RngStream {
    rng_stream(0xACCE_0000 + tag)
}
