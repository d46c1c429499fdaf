//! Tabular episodic MDPs with time-independent transitions.
//!
//! Steps are indexed from `0` to `H - 1` throughout the crate; value tables
//! carry an extra terminal row at index `H` that is identically zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::error::{Error, Result};

/// Tolerance for probability normalization checks.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// Random stream used for every sampled quantity. One stream per run.
pub type RngStream = ChaCha8Rng;

pub fn rng_stream(seed: u64) -> RngStream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sizes of a tabular episodic problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn new(states: usize, actions: usize, horizon: usize) -> Self {
        Self {
            states,
            actions,
            horizon,
        }
    }

    pub fn pairs(&self) -> usize {
        self.states * self.actions
    }

    #[inline]
    pub fn pair(&self, s: usize, a: usize) -> usize {
        s * self.actions + a
    }

    pub(crate) fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimensionMismatch {
                expected: other.to_string(),
                found: self.to_string(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "S={}, A={}, H={}",
            self.states, self.actions, self.horizon
        )
    }
}

/// A violated invariant found by [`TabularMdp::validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    /// Row `p(.|s,a)` does not sum to one; `deficit = 1 - sum`.
    KernelRowSum {
        state: usize,
        action: usize,
        deficit: f64,
    },
    NegativeTransition {
        state: usize,
        action: usize,
        next: usize,
    },
    RewardOutOfRange {
        state: usize,
        action: usize,
        value: f64,
    },
    /// `deficit = 1 - sum(rho)`.
    InitialDistSum {
        deficit: f64,
    },
    NegativeInitial {
        state: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KernelRowSum {
                state,
                action,
                deficit,
            } => write!(f, "kernel row ({state},{action}) off by {deficit:.3e}"),
            Violation::NegativeTransition {
                state,
                action,
                next,
            } => write!(f, "negative p({next}|{state},{action})"),
            Violation::RewardOutOfRange {
                state,
                action,
                value,
            } => write!(f, "reward r({state},{action}) = {value} outside [0,1]"),
            Violation::InitialDistSum { deficit } => {
                write!(f, "initial distribution off by {deficit:.3e}")
            }
            Violation::NegativeInitial { state } => write!(f, "negative rho({state})"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidMdp(msg))
    }
}

/// Full description of an episodic MDP `(S, A, H, p, r, rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    dims: Dims,
    kernel: Vec<f64>,
    reward: Vec<f64>,
    rho: Vec<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP from flat row-major tables
    /// (`kernel[(s*A + a)*S + s']`, `reward[s*A + a]`).
    pub fn new(dims: Dims, kernel: Vec<f64>, reward: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        let mdp = Self::from_raw_parts(dims, kernel, reward, rho)?;
        mdp.validate().into_result()?;
        Ok(mdp)
    }

    /// Checks shapes only. Use [`TabularMdp::validate`] to inspect the
    /// probabilistic invariants.
    pub fn from_raw_parts(
        dims: Dims,
        kernel: Vec<f64>,
        reward: Vec<f64>,
        rho: Vec<f64>,
    ) -> Result<Self> {
        if dims.states == 0 || dims.actions == 0 || dims.horizon == 0 {
            return Err(Error::Shape(format!(
                "all dimensions must be positive ({dims})"
            )));
        }
        let (s, a) = (dims.states, dims.actions);
        if kernel.len() != s * a * s {
            return Err(Error::Shape(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                s * a * s
            )));
        }
        if reward.len() != s * a {
            return Err(Error::Shape(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                s * a
            )));
        }
        if rho.len() != s {
            return Err(Error::Shape(format!(
                "rho has {} entries, expected {s}",
                rho.len()
            )));
        }
        Ok(Self {
            dims,
            kernel,
            reward,
            rho,
        })
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n = self.dims.states;
        for s in 0..n {
            for a in 0..self.dims.actions {
                let row = self.kernel_row(s, a);
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        violations.push(Violation::NegativeTransition {
                            state: s,
                            action: a,
                            next,
                        });
                    }
                }
                let deficit = 1.0 - row.iter().sum::<f64>();
                if deficit.abs() > NORMALIZATION_TOL || deficit.is_nan() {
                    violations.push(Violation::KernelRowSum {
                        state: s,
                        action: a,
                        deficit,
                    });
                }
                let r = self.reward(s, a);
                if !(0.0..=1.0).contains(&r) {
                    violations.push(Violation::RewardOutOfRange {
                        state: s,
                        action: a,
                        value: r,
                    });
                }
            }
        }
        for (s, &p) in self.rho.iter().enumerate() {
            if p < 0.0 || !p.is_finite() {
                violations.push(Violation::NegativeInitial { state: s });
            }
        }
        let deficit = 1.0 - self.rho.iter().sum::<f64>();
        if deficit.abs() > NORMALIZATION_TOL || deficit.is_nan() {
            violations.push(Violation::InitialDistSum { deficit });
        }
        ValidationReport { violations }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_states(&self) -> usize {
        self.dims.states
    }

    pub fn num_actions(&self) -> usize {
        self.dims.actions
    }

    pub fn horizon(&self) -> usize {
        self.dims.horizon
    }

    #[inline]
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.dims.states;
        let start = self.dims.pair(s, a) * n;
        &self.kernel[start..start + n]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.dims.pair(s, a)]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// `sum_{s'} p(s'|s,a) f(s')`.
    #[inline]
    pub fn expect(&self, s: usize, a: usize, f: &[f64]) -> f64 {
        dot(self.kernel_row(s, a), f)
    }

    /// Short stable hash of the JSON document, used to tie datasets to
    /// the environment that produced them.
    pub fn fingerprint(&self) -> String {
        let doc = serde_json::to_vec(&self.to_document()).expect("serializable");
        let digest = Sha256::digest(&doc);
        hex::encode(&digest[..8])
    }

    pub fn to_document(&self) -> MdpDocument {
        let (n, m) = (self.dims.states, self.dims.actions);
        MdpDocument {
            states: n,
            actions: m,
            horizon: self.dims.horizon,
            kernel: (0..n)
                .map(|s| (0..m).map(|a| self.kernel_row(s, a).to_vec()).collect())
                .collect(),
            reward: (0..n)
                .map(|s| (0..m).map(|a| self.reward(s, a)).collect())
                .collect(),
            rho: self.rho.clone(),
            generator: None,
        }
    }

    pub fn from_document(doc: &MdpDocument) -> Result<Self> {
        let dims = Dims::new(doc.states, doc.actions, doc.horizon);
        if doc.kernel.len() != dims.states
            || doc.kernel.iter().any(|r| r.len() != dims.actions)
            || doc.reward.len() != dims.states
            || doc.reward.iter().any(|r| r.len() != dims.actions)
        {
            return Err(Error::Shape(format!(
                "nested kernel/reward tables do not match {dims}"
            )));
        }
        let mut kernel = Vec::with_capacity(dims.states * dims.pairs());
        for row in doc.kernel.iter().flatten() {
            if row.len() != dims.states {
                return Err(Error::Shape(format!(
                    "kernel row has {} entries, expected {}",
                    row.len(),
                    dims.states
                )));
            }
            kernel.extend_from_slice(row);
        }
        let reward = doc.reward.iter().flatten().copied().collect();
        Self::new(dims, kernel, reward, doc.rho.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// JSON form of an MDP; nesting is `s -> a -> s'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpDocument {
    #[serde(rename = "S")]
    pub states: usize,
    #[serde(rename = "A")]
    pub actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    /// Generator parameters for environments built by [`crate::envs`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

#[inline]
pub(crate) fn dot(p: &[f64], f: &[f64]) -> f64 {
    p.iter().zip(f).map(|(x, y)| x * y).sum()
}

/// Index and value of the maximum; the lowest index wins ties.
#[inline]
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Samples an index from a probability vector with a single uniform draw.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Time-dependent Markov policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    /// `actions[h*S + s]`.
    Deterministic { dims: Dims, actions: Vec<usize> },
    /// `probs[(h*S + s)*A + a]`.
    Stochastic { dims: Dims, probs: Vec<f64> },
}

impl Policy {
    pub fn deterministic(dims: Dims, actions: Vec<usize>) -> Result<Self> {
        if actions.len() != dims.horizon * dims.states {
            return Err(Error::Shape(format!(
                "policy table has {} entries, expected H*S = {}",
                actions.len(),
                dims.horizon * dims.states
            )));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= dims.actions) {
            return Err(Error::OutOfRange(format!(
                "action {bad} not below A = {}",
                dims.actions
            )));
        }
        Ok(Policy::Deterministic { dims, actions })
    }

    pub fn stochastic(dims: Dims, probs: Vec<f64>) -> Result<Self> {
        let rows = dims.horizon * dims.states;
        if probs.len() != rows * dims.actions {
            return Err(Error::Shape(format!(
                "policy table has {} entries, expected H*S*A = {}",
                probs.len(),
                rows * dims.actions
            )));
        }
        for (i, row) in probs.chunks(dims.actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row (h={}, s={}) is not a distribution",
                    i / dims.states,
                    i % dims.states
                )));
            }
        }
        Ok(Policy::Stochastic { dims, probs })
    }

    pub fn uniform(dims: Dims) -> Self {
        let p = 1.0 / dims.actions as f64;
        Policy::Stochastic {
            dims,
            probs: vec![p; dims.horizon * dims.pairs()],
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Policy::Deterministic { dims, .. } | Policy::Stochastic { dims, .. } => *dims,
        }
    }

    /// Deterministic action at `(h, s)`, if the policy is deterministic.
    #[inline]
    pub fn action(&self, h: usize, s: usize) -> Option<usize> {
        match self {
            Policy::Deterministic { dims, actions } => Some(actions[h * dims.states + s]),
            Policy::Stochastic { .. } => None,
        }
    }

    #[inline]
    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic { dims, actions } => {
                f64::from(u8::from(actions[h * dims.states + s] == a))
            }
            Policy::Stochastic { dims, probs } => probs[(h * dims.states + s) * dims.actions + a],
        }
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> usize {
        match self {
            Policy::Deterministic { dims, actions } => actions[h * dims.states + s],
            Policy::Stochastic { dims, probs } => {
                let start = (h * dims.states + s) * dims.actions;
                sample_categorical(&probs[start..start + dims.actions], rng)
            }
        }
    }

    fn check_against(&self, dims: Dims) -> Result<()> {
        self.dims().ensure_same(&dims)
    }

    pub fn to_document(&self) -> PolicyDocument {
        let d = self.dims();
        match self {
            Policy::Deterministic { actions, .. } => PolicyDocument::Deterministic {
                actions_count: d.actions,
                actions: actions.chunks(d.states).map(<[usize]>::to_vec).collect(),
            },
            Policy::Stochastic { probs, .. } => PolicyDocument::Stochastic {
                probs: probs
                    .chunks(d.pairs())
                    .map(|h| h.chunks(d.actions).map(<[f64]>::to_vec).collect())
                    .collect(),
            },
        }
    }

    pub fn from_document(doc: &PolicyDocument) -> Result<Self> {
        match doc {
            PolicyDocument::Deterministic {
                actions_count,
                actions,
            } => {
                let horizon = actions.len();
                let states = actions.first().map_or(0, Vec::len);
                if actions.iter().any(|r| r.len() != states) {
                    return Err(Error::Shape("ragged policy table".into()));
                }
                let dims = Dims::new(states, *actions_count, horizon);
                Policy::deterministic(dims, actions.iter().flatten().copied().collect())
            }
            PolicyDocument::Stochastic { probs } => {
                let horizon = probs.len();
                let states = probs.first().map_or(0, Vec::len);
                let actions = probs.first().and_then(|r| r.first()).map_or(0, Vec::len);
                if probs
                    .iter()
                    .any(|r| r.len() != states || r.iter().any(|x| x.len() != actions))
                {
                    return Err(Error::Shape("ragged policy table".into()));
                }
                let dims = Dims::new(states, actions, horizon);
                Policy::stochastic(dims, probs.iter().flatten().flatten().copied().collect())
            }
        }
    }
}

/// JSON form of a policy, nested `h -> s (-> a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyDocument {
    Deterministic {
        #[serde(rename = "A")]
        actions_count: usize,
        actions: Vec<Vec<usize>>,
    },
    Stochastic {
        probs: Vec<Vec<Vec<f64>>>,
    },
}

/// `Q_h(s,a)` for `h < H` and `V_h(s)` for `h <= H` (with `V_H = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTables {
    dims: Dims,
    q: Vec<f64>,
    v: Vec<f64>,
}

impl ValueTables {
    fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            q: vec![0.0; dims.horizon * dims.pairs()],
            v: vec![0.0; (dims.horizon + 1) * dims.states],
        }
    }

    #[inline]
    pub fn q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.q[h * self.dims.pairs() + self.dims.pair(s, a)]
    }

    #[inline]
    pub fn v(&self, h: usize, s: usize) -> f64 {
        self.v[h * self.dims.states + s]
    }

    pub fn v_row(&self, h: usize) -> &[f64] {
        &self.v[h * self.dims.states..(h + 1) * self.dims.states]
    }

    /// `sum_s rho(s) V_0(s)`.
    pub fn value_at(&self, rho: &[f64]) -> f64 {
        dot(rho, self.v_row(0))
    }
}

#[derive(Clone, Debug)]
pub struct OptimalSolution {
    pub values: ValueTables,
    /// Greedy deterministic policy; lowest action index on ties.
    pub policy: Policy,
}

/// Backward induction for `Q*` and `V*`.
pub fn optimal_values(mdp: &TabularMdp) -> Result<OptimalSolution> {
    mdp.validate().into_result()?;
    let dims = mdp.dims();
    let (n, m) = (dims.states, dims.actions);
    let mut tables = ValueTables::zeros(dims);
    let mut actions = vec![0; dims.horizon * n];
    for h in (0..dims.horizon).rev() {
        let (head, tail) = tables.v.split_at_mut((h + 1) * n);
        let next = &tail[..n];
        for s in 0..n {
            let qs = &mut tables.q[h * dims.pairs() + s * m..h * dims.pairs() + (s + 1) * m];
            for (a, q) in qs.iter_mut().enumerate() {
                *q = mdp.reward(s, a) + mdp.expect(s, a, next);
            }
            let (best, value) = argmax(qs.iter().copied());
            actions[h * n + s] = best;
            head[h * n + s] = value;
        }
    }
    Ok(OptimalSolution {
        values: tables,
        policy: Policy::Deterministic { dims, actions },
    })
}

#[derive(Clone, Debug)]
pub struct PolicyEvaluation {
    pub values: ValueTables,
    /// `V^pi_1(rho)`.
    pub value_at_rho: f64,
}

/// Exact policy evaluation by backward induction.
pub fn policy_values(mdp: &TabularMdp, pi: &Policy) -> Result<PolicyEvaluation> {
    pi.check_against(mdp.dims())?;
    let dims = mdp.dims();
    let (n, m) = (dims.states, dims.actions);
    let mut tables = ValueTables::zeros(dims);
    for h in (0..dims.horizon).rev() {
        let (head, tail) = tables.v.split_at_mut((h + 1) * n);
        let next = &tail[..n];
        for s in 0..n {
            let mut v = 0.0;
            for a in 0..m {
                let q = mdp.reward(s, a) + mdp.expect(s, a, next);
                tables.q[h * dims.pairs() + s * m + a] = q;
                v += pi.prob(h, s, a) * q;
            }
            head[h * n + s] = v;
        }
    }
    let value_at_rho = tables.value_at(mdp.rho());
    Ok(PolicyEvaluation {
        values: tables,
        value_at_rho,
    })
}

/// `p_h^pi(s,a)`: probability of visiting `(s,a)` at step `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyTable {
    dims: Dims,
    data: Vec<f64>,
}

impl OccupancyTable {
    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[h * self.dims.pairs() + self.dims.pair(s, a)]
    }

    /// State marginal `d_h^pi(s)`.
    pub fn state(&self, h: usize, s: usize) -> f64 {
        (0..self.dims.actions).map(|a| self.get(h, s, a)).sum()
    }

    pub fn step_total(&self, h: usize) -> f64 {
        self.data[h * self.dims.pairs()..(h + 1) * self.dims.pairs()]
            .iter()
            .sum()
    }
}

pub fn occupancy_measures(mdp: &TabularMdp, pi: &Policy) -> Result<OccupancyTable> {
    pi.check_against(mdp.dims())?;
    let dims = mdp.dims();
    let (n, m) = (dims.states, dims.actions);
    let mut data = vec![0.0; dims.horizon * dims.pairs()];
    let mut d = mdp.rho().to_vec();
    for h in 0..dims.horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if d[s] == 0.0 {
                continue;
            }
            for a in 0..m {
                let mass = d[s] * pi.prob(h, s, a);
                data[h * dims.pairs() + s * m + a] = mass;
                if mass == 0.0 {
                    continue;
                }
                for (x, p) in next.iter_mut().zip(mdp.kernel_row(s, a)) {
                    *x += mass * p;
                }
            }
        }
        d = next;
    }
    Ok(OccupancyTable { dims, data })
}

/// Per-pair reachability `sigma(s,a) = max_pi max_h p_h^pi(s,a)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reachability {
    dims: Dims,
    per_pair: Vec<f64>,
    /// Minimum over all pairs; zero means some pair is unreachable.
    pub min: f64,
}

impl Reachability {
    pub fn sigma(&self, s: usize, a: usize) -> f64 {
        self.per_pair[self.dims.pair(s, a)]
    }
}

/// For every target state, maximizes the probability of occupying it after
/// exactly `k` steps by backward maximization, then takes the best step.
/// Once a state is occupied, any action can be chosen there, so the result
/// does not depend on `a`.
pub fn reachability_sigma(mdp: &TabularMdp) -> Result<Reachability> {
    mdp.validate().into_result()?;
    let dims = mdp.dims();
    let (n, m) = (dims.states, dims.actions);
    let mut per_state = vec![0.0f64; n];
    for target in 0..n {
        let mut u = vec![0.0; n];
        u[target] = 1.0;
        let mut best = mdp.rho()[target];
        for _ in 1..dims.horizon {
            let next: Vec<f64> = (0..n)
                .map(|s| argmax((0..m).map(|a| mdp.expect(s, a, &u))).1)
                .collect();
            u = next;
            best = best.max(dot(mdp.rho(), &u));
        }
        per_state[target] = best.min(1.0);
    }
    let per_pair: Vec<f64> = (0..n)
        .flat_map(|s| std::iter::repeat_n(per_state[s], m))
        .collect();
    let min = per_pair.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Reachability {
        dims,
        per_pair,
        min,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// One episode of exactly `H` transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub episode: u64,
    /// Seed of the stream that produced the episode.
    pub lineage: u64,
    pub steps: Vec<Transition>,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|t| t.reward).sum()
    }
}

pub fn sample_episode<R: Rng + ?Sized>(mdp: &TabularMdp, pi: &Policy, rng: &mut R) -> EpisodeTrace {
    debug_assert_eq!(pi.dims(), mdp.dims());
    let mut steps = Vec::with_capacity(mdp.horizon());
    let mut s = sample_categorical(mdp.rho(), rng);
    for h in 0..mdp.horizon() {
        let a = pi.sample_action(h, s, rng);
        let next = sample_categorical(mdp.kernel_row(s, a), rng);
        steps.push(Transition {
            state: s,
            action: a,
            reward: mdp.reward(s, a),
            next_state: next,
        });
        s = next;
    }
    EpisodeTrace {
        episode: 0,
        lineage: 0,
        steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_state() -> TabularMdp {
        // s0: a0 stays (r=0.2), a1 moves to s1 w.p. 0.7 (r=0); s1: r=1 under a0.
        let dims = Dims::new(2, 2, 2);
        let kernel = vec![
            1.0, 0.0, 0.3, 0.7, //
            0.0, 1.0, 0.5, 0.5,
        ];
        let reward = vec![0.2, 0.0, 1.0, 0.4];
        TabularMdp::new(dims, kernel, reward, vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn validate_reports_row_deficit() {
        let dims = Dims::new(2, 1, 1);
        let mdp = TabularMdp::from_raw_parts(
            dims,
            vec![0.5, 0.4, 0.0, 1.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
        )
        .unwrap();
        let report = mdp.validate();
        assert_eq!(report.violations.len(), 1);
        match report.violations[0] {
            Violation::KernelRowSum {
                state,
                action,
                deficit,
            } => {
                assert_eq!((state, action), (0, 0));
                assert_abs_diff_eq!(deficit, 0.1, epsilon = 1e-12);
            }
            ref v => panic!("unexpected violation {v:?}"),
        }
        assert!(optimal_values(&mdp).is_err());
    }

    #[test]
    fn validate_reports_reward_range() {
        let dims = Dims::new(1, 2, 1);
        let mdp =
            TabularMdp::from_raw_parts(dims, vec![1.0, 1.0], vec![0.0, 1.5], vec![1.0]).unwrap();
        assert_eq!(
            mdp.validate().violations,
            vec![Violation::RewardOutOfRange {
                state: 0,
                action: 1,
                value: 1.5
            }]
        );
        assert!(two_state().validate().is_ok());
    }

    #[test]
    fn single_state_unit_reward() {
        let mdp = TabularMdp::new(Dims::new(1, 1, 7), vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let sol = optimal_values(&mdp).unwrap();
        assert_eq!(sol.values.v(0, 0), 7.0);
        assert_eq!(sol.values.v(7, 0), 0.0);
    }

    #[test]
    fn uniform_policy_half_reward() {
        let mdp =
            TabularMdp::new(Dims::new(1, 3, 6), vec![1.0; 3], vec![0.5; 3], vec![1.0]).unwrap();
        let eval = policy_values(&mdp, &Policy::uniform(mdp.dims())).unwrap();
        assert_abs_diff_eq!(eval.value_at_rho, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn greedy_policy_matches_optimal_values() {
        let mdp = two_state();
        let sol = optimal_values(&mdp).unwrap();
        let eval = policy_values(&mdp, &sol.policy).unwrap();
        for h in 0..=2 {
            for s in 0..2 {
                assert_abs_diff_eq!(eval.values.v(h, s), sol.values.v(h, s), epsilon = 1e-12);
            }
        }
        // Hand DP: V_1(s1) = max(1, 0.4) = 1, V_1(s0) = max(0.2, 0) = 0.2;
        // Q_0(s0,a0) = 0.2 + 0.2 = 0.4, Q_0(s0,a1) = 0 + 0.3*0.2 + 0.7*1 = 0.76.
        assert_abs_diff_eq!(sol.values.v(0, 0), 0.76, epsilon = 1e-12);
        assert_eq!(sol.policy.action(0, 0), Some(1));
    }

    #[test]
    fn ties_pick_lowest_action() {
        let mdp =
            TabularMdp::new(Dims::new(1, 3, 2), vec![1.0; 3], vec![0.3; 3], vec![1.0]).unwrap();
        let a = optimal_values(&mdp).unwrap().policy;
        let b = optimal_values(&mdp).unwrap().policy;
        assert_eq!(a, b);
        assert_eq!(a.action(0, 0), Some(0));
        assert_eq!(a.action(1, 0), Some(0));
    }

    #[test]
    fn policy_shape_mismatch_rejected() {
        let mdp = two_state();
        let pi = Policy::uniform(Dims::new(2, 2, 3));
        assert!(policy_values(&mdp, &pi).is_err());
        assert!(Policy::deterministic(Dims::new(2, 2, 1), vec![0, 2]).is_err());
    }

    #[test]
    fn occupancy_first_step_and_absorbing() {
        let mdp = two_state();
        let pi = Policy::uniform(mdp.dims());
        let occ = occupancy_measures(&mdp, &pi).unwrap();
        assert_abs_diff_eq!(occ.get(0, 0, 1), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(occ.get(0, 1, 0), 0.0, epsilon = 1e-15);
        for h in 0..2 {
            assert_abs_diff_eq!(occ.step_total(h), 1.0, epsilon = 1e-12);
        }

        // Absorbing state 1: once there, mass stays.
        let dims = Dims::new(2, 2, 4);
        let kernel = vec![0.5, 0.5, 0.5, 0.5, 0.0, 1.0, 0.0, 1.0];
        let mdp = TabularMdp::new(dims, kernel, vec![0.0; 4], vec![0.0, 1.0]).unwrap();
        let occ = occupancy_measures(&mdp, &Policy::uniform(dims)).unwrap();
        for h in 0..4 {
            assert_abs_diff_eq!(occ.state(h, 1), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn reachability_deterministic_and_unreachable() {
        // Deterministic cycle 0 -> 1 -> 2 -> 0 under action 0, stay under action 1.
        let dims = Dims::new(3, 2, 3);
        let mut kernel = vec![0.0; 18];
        for s in 0..3 {
            kernel[(s * 2) * 3 + (s + 1) % 3] = 1.0;
            kernel[(s * 2 + 1) * 3 + s] = 1.0;
        }
        let mdp = TabularMdp::new(dims, kernel.clone(), vec![0.0; 6], vec![1.0, 0.0, 0.0]).unwrap();
        let reach = reachability_sigma(&mdp).unwrap();
        assert_eq!(reach.min, 1.0);

        // State 2 has no incoming transitions and no initial mass.
        let mut kernel = vec![0.0; 18];
        for s in 0..3 {
            kernel[(s * 2) * 3] = 1.0;
            kernel[(s * 2 + 1) * 3 + 1] = 1.0;
        }
        let mdp = TabularMdp::new(dims, kernel, vec![0.0; 6], vec![1.0, 0.0, 0.0]).unwrap();
        let reach = reachability_sigma(&mdp).unwrap();
        assert_eq!(reach.sigma(2, 0), 0.0);
        assert_eq!(reach.sigma(2, 1), 0.0);
        assert_eq!(reach.sigma(1, 1), 1.0);
        assert_eq!(reach.min, 0.0);
    }

    #[test]
    fn deterministic_path_and_seed_determinism() {
        let dims = Dims::new(3, 1, 4);
        let kernel = vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mdp = TabularMdp::new(dims, kernel, vec![0.1, 0.2, 0.3], vec![1.0, 0.0, 0.0]).unwrap();
        let pi = Policy::deterministic(dims, vec![0; 12]).unwrap();
        let trace = sample_episode(&mdp, &pi, &mut rng_stream(3));
        let states: Vec<_> = trace.steps.iter().map(|t| t.state).collect();
        assert_eq!(states, vec![0, 1, 2, 0]);
        assert_abs_diff_eq!(trace.total_reward(), 0.7, epsilon = 1e-12);

        let mdp = two_state();
        let pi = Policy::uniform(mdp.dims());
        let a = sample_episode(&mdp, &pi, &mut rng_stream(99));
        let b = sample_episode(&mdp, &pi, &mut rng_stream(99));
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let mdp = two_state();
        let back = TabularMdp::from_json(&mdp.to_json()).unwrap();
        assert_eq!(mdp, back);
        assert_eq!(mdp.fingerprint(), back.fingerprint());
        let pi = optimal_values(&mdp).unwrap().policy;
        let doc = serde_json::to_string(&pi.to_document()).unwrap();
        let pi2 = Policy::from_document(&serde_json::from_str(&doc).unwrap()).unwrap();
        assert_eq!(pi, pi2);
    }
}
