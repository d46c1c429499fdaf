//! Reward-free exploration of the target driven by the uncertainty
//! recursion `W`, followed by the TV test that flags shifted pairs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::estimation::{
    tv_distance, tv_unchecked, BonusFunctions, EmpiricalModel, PairSet, SourceDataset,
};
use crate::mdp::{argmax, sample_episode, Dims, Policy, TabularMdp};

/// `W_h(s,a)` for `h = 0..=H`; row `H` is identically zero.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyTable {
    dims: Dims,
    data: Vec<f64>,
}

impl UncertaintyTable {
    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.data[h * self.dims.pairs() + self.dims.pair(s, a)]
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Backward recursion
/// `W_h = min(1, 4H g1(n)/n + p_hat max_a' W_{h+1})`, with `W = 1` on
/// unvisited pairs, and the greedy policy `argmax_a W_h(s,a)`.
pub fn backup_w(model: &EmpiricalModel, bonus: &BonusFunctions) -> (UncertaintyTable, Policy) {
    let dims = model.dims();
    let (n, m, horizon) = (dims.states, dims.actions, dims.horizon);
    let pairs = dims.pairs();
    let mut data = vec![0.0; (horizon + 1) * pairs];
    let mut actions = vec![0; horizon * n];
    let width = 4.0 * horizon as f64;
    let exploration: Vec<f64> = (0..pairs)
        .map(|i| {
            let count = model.count(i / m, i % m);
            if count == 0 {
                f64::INFINITY
            } else {
                width * bonus.g1(count) / count as f64
            }
        })
        .collect();
    let mut next_max = vec![0.0; n];
    let mut cur_max = vec![0.0; n];
    for h in (0..horizon).rev() {
        let (head, _) = data.split_at_mut((h + 1) * pairs);
        let row = &mut head[h * pairs..];
        for s in 0..n {
            for a in 0..m {
                let i = s * m + a;
                row[i] = if exploration[i].is_infinite() {
                    1.0
                } else {
                    (exploration[i] + model.expect(s, a, &next_max)).min(1.0)
                };
            }
            let (best, value) = argmax(row[s * m..(s + 1) * m].iter().copied());
            actions[h * n + s] = best;
            cur_max[s] = value;
        }
        std::mem::swap(&mut next_max, &mut cur_max);
    }
    (
        UncertaintyTable { dims, data },
        Policy::Deterministic { dims, actions },
    )
}

/// `3 sqrt(m) + m` with `m = sum_s rho(s) W_0(s, pi_0(s))`.
pub fn stopping_statistic(w: &UncertaintyTable, pi: &Policy, rho: &[f64]) -> f64 {
    let m: f64 = rho
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| {
            let value: f64 = (0..w.dims.actions)
                .map(|a| pi.prob(0, s, a) * w.get(0, s, a))
                .sum();
            p * value
        })
        .sum();
    3.0 * m.sqrt() + m
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftIdConfig {
    pub beta: f64,
    pub sigma: f64,
    pub delta: f64,
    pub bonus_scale: f64,
    pub max_episodes: u64,
}

impl Default for ShiftIdConfig {
    fn default() -> Self {
        Self {
            beta: 0.45,
            sigma: 0.25,
            delta: 0.1,
            bonus_scale: 1e-6,
            max_episodes: 1_000_000,
        }
    }
}

impl ShiftIdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta = {} not in (0,1]",
                self.beta
            )));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sigma = {} not in (0,1]",
                self.sigma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta = {} not in (0,1)",
                self.delta
            )));
        }
        if self.max_episodes == 0 {
            return Err(Error::InvalidArgument(
                "max_episodes must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// `sigma beta / 8`.
    pub fn threshold(&self) -> f64 {
        self.sigma * self.beta / 8.0
    }
}

/// Shifted pairs together with the TV value that decided membership.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftRegion {
    pub set: PairSet,
    tv: Vec<f64>,
}

impl ShiftRegion {
    /// Pairs whose empirical TV strictly exceeds `beta / 2`.
    pub fn estimate(source: &EmpiricalModel, target: &EmpiricalModel, beta: f64) -> Result<Self> {
        let dims = source.dims();
        dims.ensure_same(&target.dims())?;
        Ok(Self::from_tv(
            dims,
            |s, a| tv_unchecked(source.kernel_row(s, a), target.kernel_row(s, a)),
            beta / 2.0,
        ))
    }

    /// Region from precomputed per-pair TV values (row-major), keeping pairs
    /// whose value strictly exceeds `cut`.
    pub fn from_evidence(dims: Dims, tv: Vec<f64>, cut: f64) -> Result<Self> {
        if tv.len() != dims.pairs() {
            return Err(Error::Shape(format!(
                "evidence has {} entries, expected {}",
                tv.len(),
                dims.pairs()
            )));
        }
        Ok(Self::from_tv(dims, |s, a| tv[dims.pair(s, a)], cut))
    }

    fn from_tv(dims: Dims, tv_of: impl Fn(usize, usize) -> f64, cut: f64) -> Self {
        let mut set = PairSet::empty(dims);
        let mut tv = vec![0.0; dims.pairs()];
        for s in 0..dims.states {
            for a in 0..dims.actions {
                let d = tv_of(s, a);
                tv[dims.pair(s, a)] = d;
                if d > cut {
                    set.insert(s, a);
                }
            }
        }
        Self { set, tv }
    }

    pub fn tv(&self, s: usize, a: usize) -> f64 {
        self.tv[self.set.dims().pair(s, a)]
    }

    /// Smallest TV among member pairs; 1 when the region is empty.
    pub fn effective_beta(&self) -> f64 {
        self.set
            .iter()
            .map(|(s, a)| self.tv(s, a))
            .fold(1.0, f64::min)
    }
}

/// Exact region `{(s,a) : p_src(.|s,a) != p_tar(.|s,a)}` with exact TV.
pub fn true_shift_region(source: &TabularMdp, target: &TabularMdp) -> Result<ShiftRegion> {
    let dims = source.dims();
    dims.ensure_same(&target.dims())?;
    for s in 0..dims.states {
        for a in 0..dims.actions {
            tv_distance(source.kernel_row(s, a), target.kernel_row(s, a))?;
        }
    }
    Ok(ShiftRegion::from_tv(
        dims,
        |s, a| tv_unchecked(source.kernel_row(s, a), target.kernel_row(s, a)),
        0.0,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftIteration {
    /// Episodes collected before this iteration's backup.
    pub episode: u64,
    pub statistic: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug)]
pub struct ShiftIdResult {
    pub episodes: u64,
    pub target: EmpiricalModel,
    pub region: ShiftRegion,
    pub statistic: f64,
    pub trace: Vec<ShiftIteration>,
    pub cap_hit: bool,
}

impl ShiftIdResult {
    /// CSV with columns `episode,samples,stopping_statistic,threshold`.
    pub fn trace_csv(&self, horizon: usize) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["episode", "samples", "stopping_statistic", "threshold"])?;
        for it in &self.trace {
            w.write_record([
                it.episode.to_string(),
                (it.episode * horizon as u64).to_string(),
                it.statistic.to_string(),
                it.threshold.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Outcome of the exploration loop shared by shift identification and
/// source-data collection.
pub struct Exploration {
    pub model: EmpiricalModel,
    pub episodes: u64,
    pub statistic: f64,
    pub stopped: bool,
}

/// Runs the `W`-greedy exploration loop on `env` starting from `model`.
/// Stops once the statistic is at most `threshold` (never, when `None`) or
/// after `max_episodes` episodes.
pub fn explore<R: Rng + ?Sized>(
    env: &TabularMdp,
    mut model: EmpiricalModel,
    bonus: &BonusFunctions,
    threshold: Option<f64>,
    max_episodes: u64,
    rng: &mut R,
    observer: &mut dyn FnMut(&ShiftIteration),
) -> Result<Exploration> {
    env.dims().ensure_same(&model.dims())?;
    let mut episodes = 0;
    loop {
        let (w, pi) = backup_w(&model, bonus);
        let statistic = stopping_statistic(&w, &pi, env.rho());
        observer(&ShiftIteration {
            episode: episodes,
            statistic,
            threshold: threshold.unwrap_or(f64::NAN),
        });
        let stopped = threshold.is_some_and(|t| statistic <= t);
        if stopped || episodes >= max_episodes {
            return Ok(Exploration {
                model,
                episodes,
                statistic,
                stopped,
            });
        }
        let mut trace = sample_episode(env, &pi, rng);
        trace.episode = episodes;
        model.update(&trace, None)?;
        episodes += 1;
    }
}

/// Explores the target until `3 sqrt(m) + m <= sigma beta / 8` (or the cap),
/// then compares the target estimate with the source data.
pub fn run_shift_identification<R: Rng + ?Sized>(
    env: &TabularMdp,
    source: &SourceDataset,
    cfg: &ShiftIdConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(&ShiftIteration),
) -> Result<ShiftIdResult> {
    cfg.validate()?;
    let dims = env.dims();
    dims.ensure_same(&source.dims())?;
    let bonus = BonusFunctions::new(dims, cfg.delta, cfg.bonus_scale)?;
    let mut trace = Vec::new();
    let run = explore(
        env,
        EmpiricalModel::new(dims),
        &bonus,
        Some(cfg.threshold()),
        cfg.max_episodes,
        rng,
        &mut |it| {
            trace.push(*it);
            observer(it);
        },
    )?;
    let region = ShiftRegion::estimate(&source.model, &run.model, cfg.beta)?;
    Ok(ShiftIdResult {
        episodes: run.episodes,
        target: run.model,
        region,
        statistic: run.statistic,
        trace,
        cap_hit: !run.stopped,
    })
}
