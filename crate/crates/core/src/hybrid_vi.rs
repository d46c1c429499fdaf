//! UCB value iteration over hybrid statistics: live target counts inside
//! the shifted region, frozen source counts elsewhere.

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimation::{BonusFunctions, EmpiricalModel, PairSet};
use crate::mdp::{argmax, sample_episode, Dims, EpisodeTrace, Policy, TabularMdp};

/// Statistics `n~(s,a)` and `p~(.|s,a)`.
#[derive(Clone, Debug)]
pub struct HybridModel {
    region: PairSet,
    target: EmpiricalModel,
    sources: Vec<EmpiricalModel>,
    // Index into `sources` for pairs outside `region`; unused inside it.
    provider: Vec<usize>,
}

impl HybridModel {
    pub fn new(region: PairSet, target: EmpiricalModel, source: EmpiricalModel) -> Result<Self> {
        let pairs = region.dims().pairs();
        Self::with_sources(region, target, vec![source], vec![Some(0); pairs])
    }

    /// Pure online statistics: every pair is live and no source is used.
    pub fn online(dims: Dims) -> Self {
        Self {
            region: PairSet::full(dims),
            target: EmpiricalModel::new(dims),
            sources: Vec::new(),
            provider: vec![0; dims.pairs()],
        }
    }

    /// `provider[pair]` names the source serving a pair outside `region`.
    pub fn with_sources(
        region: PairSet,
        target: EmpiricalModel,
        sources: Vec<EmpiricalModel>,
        provider: Vec<Option<usize>>,
    ) -> Result<Self> {
        let dims = region.dims();
        dims.ensure_same(&target.dims())?;
        for src in &sources {
            dims.ensure_same(&src.dims())?;
        }
        if provider.len() != dims.pairs() {
            return Err(Error::Shape(format!(
                "provider table has {} entries, expected {}",
                provider.len(),
                dims.pairs()
            )));
        }
        let mut resolved = vec![0; dims.pairs()];
        for s in 0..dims.states {
            for a in 0..dims.actions {
                if region.contains(s, a) {
                    continue;
                }
                match provider[dims.pair(s, a)] {
                    Some(i) if i < sources.len() => resolved[dims.pair(s, a)] = i,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "pair ({s}, {a}) lies outside the region but has no source"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            region,
            target,
            sources,
            provider: resolved,
        })
    }

    pub fn dims(&self) -> Dims {
        self.region.dims()
    }

    pub fn region(&self) -> &PairSet {
        &self.region
    }

    pub fn target(&self) -> &EmpiricalModel {
        &self.target
    }

    pub fn into_target(self) -> EmpiricalModel {
        self.target
    }

    #[inline]
    fn stats(&self, s: usize, a: usize) -> &EmpiricalModel {
        if self.region.contains(s, a) {
            &self.target
        } else {
            &self.sources[self.provider[self.dims().pair(s, a)]]
        }
    }

    #[inline]
    pub fn n_tilde(&self, s: usize, a: usize) -> u64 {
        self.stats(s, a).count(s, a)
    }

    pub fn p_tilde(&self, s: usize, a: usize) -> &[f64] {
        self.stats(s, a).kernel_row(s, a)
    }

    /// Adds the transitions of `trace` that fall inside the region.
    pub fn update(&mut self, trace: &EpisodeTrace) -> Result<()> {
        self.target.update(trace, Some(&self.region))
    }
}

/// Upper and lower confidence tables; rows `h = H` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTables {
    dims: Dims,
    upper_q: Vec<f64>,
    lower_q: Vec<f64>,
    upper_v: Vec<f64>,
    lower_v: Vec<f64>,
    // Var_{p~}(V_upper_{h+1})(s,a) for h < H.
    variance: Vec<f64>,
}

impl BoundTables {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn upper_q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.upper_q[h * self.dims.pairs() + self.dims.pair(s, a)]
    }

    #[inline]
    pub fn lower_q(&self, h: usize, s: usize, a: usize) -> f64 {
        self.lower_q[h * self.dims.pairs() + self.dims.pair(s, a)]
    }

    pub fn upper_v(&self, h: usize, s: usize) -> f64 {
        self.upper_v[h * self.dims.states + s]
    }

    pub fn lower_v(&self, h: usize, s: usize) -> f64 {
        self.lower_v[h * self.dims.states + s]
    }

    /// Largest `lower - upper` over all entries; never positive.
    pub fn max_inversion(&self) -> f64 {
        self.lower_q
            .iter()
            .zip(&self.upper_q)
            .map(|(l, u)| l - u)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-pair `g1(n)/n` and `g2(n)/n`; infinite when `n = 0`.
fn bonus_rates(model: &HybridModel, bonus: &BonusFunctions) -> (Vec<u64>, Vec<f64>, Vec<f64>) {
    let dims = model.dims();
    let m = dims.actions;
    let counts: Vec<u64> = (0..dims.pairs())
        .map(|i| model.n_tilde(i / m, i % m))
        .collect();
    let rate = |g: &dyn Fn(u64) -> f64| -> Vec<f64> {
        counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    f64::INFINITY
                } else {
                    g(n) / n as f64
                }
            })
            .collect()
    };
    let r1 = rate(&|n| bonus.g1(n));
    let r2 = rate(&|n| bonus.g2(n));
    (counts, r1, r2)
}

/// Backward recursion for `Q_upper`, `Q_lower` with the shared bonus
/// `3 sqrt(Var g2/n) + 14 H^2 g1/n + p~(V_upper - V_lower)/H`, and the
/// greedy policy with respect to `Q_upper`.
pub fn backup_bounds(
    model: &HybridModel,
    rewards: &[f64],
    bonus: &BonusFunctions,
) -> Result<(BoundTables, Policy)> {
    let dims = model.dims();
    let (n, m, horizon) = (dims.states, dims.actions, dims.horizon);
    let pairs = dims.pairs();
    if rewards.len() != pairs {
        return Err(Error::Shape(format!(
            "reward table has {} entries, expected {pairs}",
            rewards.len()
        )));
    }
    let hf = horizon as f64;
    let (counts, r1, r2) = bonus_rates(model, bonus);
    let mut t = BoundTables {
        dims,
        upper_q: vec![0.0; (horizon + 1) * pairs],
        lower_q: vec![0.0; (horizon + 1) * pairs],
        upper_v: vec![0.0; (horizon + 1) * n],
        lower_v: vec![0.0; (horizon + 1) * n],
        variance: vec![0.0; horizon * pairs],
    };
    let mut actions = vec![0; horizon * n];
    for h in (0..horizon).rev() {
        let (uv_head, uv_tail) = t.upper_v.split_at_mut((h + 1) * n);
        let (lv_head, lv_tail) = t.lower_v.split_at_mut((h + 1) * n);
        let (next_upper, next_lower) = (&uv_tail[..n], &lv_tail[..n]);
        for s in 0..n {
            for a in 0..m {
                let i = s * m + a;
                let at = h * pairs + i;
                if counts[i] == 0 {
                    t.upper_q[at] = hf;
                    t.lower_q[at] = 0.0;
                    t.variance[at] = f64::INFINITY;
                    continue;
                }
                let stats = model.stats(s, a);
                let (m1, m2) = stats.moments(s, a, next_upper);
                let lower_next = stats.expect(s, a, next_lower);
                let var = (m2 - m1 * m1).max(0.0);
                t.variance[at] = var;
                let width = 3.0 * (var * r2[i]).sqrt()
                    + 14.0 * hf * hf * r1[i]
                    + (m1 - lower_next).max(0.0) / hf;
                let r = rewards[i];
                t.upper_q[at] = (r + m1 + width).min(hf);
                t.lower_q[at] = (r + lower_next - width).max(0.0);
            }
            let (best, value) = argmax(
                t.upper_q[h * pairs + s * m..h * pairs + (s + 1) * m]
                    .iter()
                    .copied(),
            );
            actions[h * n + s] = best;
            uv_head[h * n + s] = value;
            lv_head[h * n + s] = t.lower_q[h * pairs + s * m..h * pairs + (s + 1) * m]
                .iter()
                .copied()
                .fold(0.0, f64::max);
        }
    }
    let inversion = t.max_inversion();
    if inversion > 0.0 {
        return Err(Error::InvalidArgument(format!(
            "lower bound exceeds upper bound by {inversion}"
        )));
    }
    Ok((t, Policy::Deterministic { dims, actions }))
}

/// `G_h(s,a)`; row `H` is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GapTable {
    dims: Dims,
    data: Vec<f64>,
}

impl GapTable {
    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[h * self.dims.pairs() + self.dims.pair(s, a)]
    }

    /// `sum_s rho(s) G_0(s, pi_0(s))`.
    pub fn at_rho(&self, pi: &Policy, rho: &[f64]) -> f64 {
        rho.iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| {
                p * (0..self.dims.actions)
                    .map(|a| pi.prob(0, s, a) * self.get(0, s, a))
                    .sum::<f64>()
            })
            .sum()
    }
}

/// `G_h = min(H, 6 sqrt(Var g2/n) + 35 H^2 g1/n + (1 + 3/H) p~ G_{h+1}(., pi_{h+1}))`.
pub fn backup_gap(
    model: &HybridModel,
    bounds: &BoundTables,
    pi: &Policy,
    bonus: &BonusFunctions,
) -> Result<GapTable> {
    let dims = model.dims();
    dims.ensure_same(&bounds.dims)?;
    dims.ensure_same(&pi.dims())?;
    let (n, m, horizon) = (dims.states, dims.actions, dims.horizon);
    let pairs = dims.pairs();
    let hf = horizon as f64;
    let (counts, r1, r2) = bonus_rates(model, bonus);
    let mut data = vec![0.0; (horizon + 1) * pairs];
    let mut next_on_policy = vec![0.0; n];
    let mut cur_on_policy = vec![0.0; n];
    for h in (0..horizon).rev() {
        for s in 0..n {
            for a in 0..m {
                let i = s * m + a;
                let at = h * pairs + i;
                data[at] = if counts[i] == 0 {
                    hf
                } else {
                    let var = bounds.variance[at];
                    let propagated = model.stats(s, a).expect(s, a, &next_on_policy);
                    (6.0 * (var * r2[i]).sqrt()
                        + 35.0 * hf * hf * r1[i]
                        + (1.0 + 3.0 / hf) * propagated)
                        .min(hf)
                };
            }
            cur_on_policy[s] = (0..m)
                .map(|a| pi.prob(h, s, a) * data[h * pairs + s * m + a])
                .sum();
        }
        std::mem::swap(&mut next_on_policy, &mut cur_on_policy);
    }
    Ok(GapTable { dims, data })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub bonus_scale: f64,
    pub max_episodes: u64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 0.1,
            bonus_scale: 2e-3,
            max_episodes: 200_000,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon = {} not in (0,1]",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta = {} not in (0,1)",
                self.delta
            )));
        }
        Ok(())
    }
}

/// State of one iteration, passed to observers before the stopping test.
pub struct ViIteration<'a> {
    /// Episodes collected in this phase before the backup.
    pub episode: u64,
    pub statistic: f64,
    pub bounds: &'a BoundTables,
    pub gap: &'a GapTable,
    pub policy: &'a Policy,
    pub model: &'a HybridModel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViPoint {
    pub episode: u64,
    pub statistic: f64,
}

#[derive(Clone, Debug)]
pub struct ViResult {
    pub policy: Policy,
    pub episodes: u64,
    pub statistic: f64,
    pub stopped: bool,
    pub cap_hit: bool,
    pub trace: Vec<ViPoint>,
    pub model: HybridModel,
}

impl ViResult {
    /// CSV with columns
    /// `episode,target_samples_cumulative,rho_pi_G,epsilon`, where sample
    /// counts include `offset_episodes` collected before this phase.
    pub fn trace_csv(&self, horizon: usize, offset_episodes: u64, epsilon: f64) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "episode",
            "target_samples_cumulative",
            "rho_pi_G",
            "epsilon",
        ])?;
        for p in &self.trace {
            let episode = offset_episodes + p.episode;
            w.write_record([
                episode.to_string(),
                (episode * horizon as u64).to_string(),
                p.statistic.to_string(),
                epsilon.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Runs optimistic value iteration on `env` until `rho pi_0 G_0 <= epsilon`
/// or `max_episodes` episodes, updating target counts inside the region only.
pub fn run_hybrid_ucbvi<R: Rng + ?Sized>(
    env: &TabularMdp,
    mut model: HybridModel,
    cfg: &ViConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(&ViIteration),
) -> Result<ViResult> {
    cfg.validate()?;
    let dims = env.dims();
    dims.ensure_same(&model.dims())?;
    let bonus = BonusFunctions::new(dims, cfg.delta, cfg.bonus_scale)?;
    let mut trace = Vec::new();
    let mut episodes = 0;
    loop {
        let (bounds, policy) = backup_bounds(&model, env.rewards(), &bonus)?;
        let gap = backup_gap(&model, &bounds, &policy, &bonus)?;
        let statistic = gap.at_rho(&policy, env.rho());
        observer(&ViIteration {
            episode: episodes,
            statistic,
            bounds: &bounds,
            gap: &gap,
            policy: &policy,
            model: &model,
        });
        trace.push(ViPoint {
            episode: episodes,
            statistic,
        });
        let stopped = statistic <= cfg.epsilon;
        if stopped || episodes >= cfg.max_episodes {
            return Ok(ViResult {
                policy,
                episodes,
                statistic,
                stopped,
                cap_hit: !stopped,
                trace,
                model,
            });
        }
        let mut episode = sample_episode(env, &policy, rng);
        episode.episode = episodes;
        model.update(&episode)?;
        episodes += 1;
    }
}
