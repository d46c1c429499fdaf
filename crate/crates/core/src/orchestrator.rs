//! The full pipeline: gate on `sigma beta`, identify the shift, then run
//! hybrid value iteration. Also the pure online baseline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{EmpiricalModel, PairSet, SourceDataset};
use crate::hybrid_vi::{run_hybrid_ucbvi, HybridModel, ViConfig, ViIteration, ViPoint};
use crate::mdp::{rng_stream, Dims, Policy, TabularMdp};
use crate::shift_id::{run_shift_identification, ShiftIdConfig, ShiftIteration, ShiftRegion};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Hysrl,
    BpiUcbvi,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Hysrl => "hysrl",
            Algorithm::BpiUcbvi => "bpi_ucbvi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HySRLConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub beta: f64,
    pub sigma: f64,
    pub shift_bonus_scale: f64,
    pub vi_bonus_scale: f64,
    pub shift_max_episodes: u64,
    pub vi_max_episodes: u64,
    /// Pairs with fewer source samples join the exploration region.
    /// `None` disables the check.
    pub min_source_count: Option<u64>,
    /// Seed the value-iteration counts inside the region with the counts
    /// gathered during shift identification.
    pub reuse_counts: bool,
    /// Count shift-identification episodes against `vi_max_episodes`.
    pub vi_budget_includes_shift: bool,
    pub algorithm: Algorithm,
}

impl Default for HySRLConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            delta: 0.1,
            beta: 0.45,
            sigma: 0.25,
            shift_bonus_scale: 1e-6,
            vi_bonus_scale: 2e-3,
            shift_max_episodes: 1_000_000,
            vi_max_episodes: 200_000,
            min_source_count: None,
            reuse_counts: true,
            vi_budget_includes_shift: false,
            algorithm: Algorithm::Hysrl,
        }
    }
}

impl HySRLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return bad(format!("epsilon = {} not in (0,1]", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} not in (0,1)", self.delta));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad(format!("beta = {} not in (0,1]", self.beta));
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return bad(format!("sigma = {} not in (0,1]", self.sigma));
        }
        if !(self.shift_bonus_scale > 0.0 && self.vi_bonus_scale > 0.0) {
            return bad("bonus scales must be positive".into());
        }
        if self.shift_max_episodes == 0 {
            return bad("shift_max_episodes must be at least 1".into());
        }
        Ok(())
    }

    /// True when `sigma beta <= sqrt(S/H) epsilon`, i.e. the source is
    /// abandoned and every pair is explored online.
    pub fn abandons_source(&self, dims: Dims) -> bool {
        self.sigma * self.beta <= (dims.states as f64 / dims.horizon as f64).sqrt() * self.epsilon
    }

    pub fn shift_config(&self) -> ShiftIdConfig {
        ShiftIdConfig {
            beta: self.beta,
            sigma: self.sigma,
            delta: self.delta,
            bonus_scale: self.shift_bonus_scale,
            max_episodes: self.shift_max_episodes,
        }
    }

    pub fn vi_config(&self) -> ViConfig {
        ViConfig {
            epsilon: self.epsilon,
            delta: self.delta,
            bonus_scale: self.vi_bonus_scale,
            max_episodes: self.vi_max_episodes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ShiftId,
    Vi,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::ShiftId => "shift_id",
            Phase::Vi => "vi",
        }
    }
}

/// Callbacks invoked once per iteration of each phase.
pub trait Observer {
    fn shift_iteration(&mut self, _it: &ShiftIteration) {}

    /// `offset` is the number of target episodes collected before the
    /// value-iteration phase.
    fn vi_iteration(&mut self, _offset: u64, _it: &ViIteration) {}
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub algorithm: Algorithm,
    pub policy: Policy,
    /// Region explored during value iteration.
    pub region: PairSet,
    /// `None` when shift identification was skipped.
    pub shift_region: Option<ShiftRegion>,
    pub shift_episodes: u64,
    pub vi_episodes: u64,
    pub total_samples: u64,
    pub shift_trace: Vec<ShiftIteration>,
    pub vi_trace: Vec<ViPoint>,
    pub shift_cap_hit: bool,
    pub vi_stopped: bool,
    pub vi_statistic: f64,
}

impl RunResult {
    pub fn total_episodes(&self) -> u64 {
        self.shift_episodes + self.vi_episodes
    }
}

/// `C = {(s,a) : n_src(s,a) < gate}`.
pub fn insufficient_source_set(source: &SourceDataset, gate: u64) -> PairSet {
    let dims = source.dims();
    let mut set = PairSet::empty(dims);
    for s in 0..dims.states {
        for a in 0..dims.actions {
            if source.model.count(s, a) < gate {
                set.insert(s, a);
            }
        }
    }
    set
}

/// Intersection of the estimated regions and, for each pair outside it, the
/// lowest-index source whose region excludes that pair.
pub fn multi_source_region(
    regions: &[ShiftRegion],
    sources: &[SourceDataset],
) -> Result<(PairSet, Vec<Option<usize>>)> {
    if regions.is_empty() || regions.len() != sources.len() {
        return Err(Error::InvalidArgument(format!(
            "need one region per source, got {} regions and {} sources",
            regions.len(),
            sources.len()
        )));
    }
    let dims = sources[0].dims();
    for (r, src) in regions.iter().zip(sources) {
        dims.ensure_same(&r.set.dims())?;
        dims.ensure_same(&src.dims())?;
    }
    let combined = regions[1..]
        .iter()
        .fold(regions[0].set.clone(), |acc, r| acc.intersection(&r.set));
    let provider = (0..dims.pairs())
        .map(|i| {
            let (s, a) = (i / dims.actions, i % dims.actions);
            if combined.contains(s, a) {
                None
            } else {
                regions.iter().position(|r| !r.set.contains(s, a))
            }
        })
        .collect();
    Ok((combined, provider))
}

/// Runs the full pipeline on `env` with the stream `rng_stream(seed)`.
pub fn run_hysrl(
    env: &TabularMdp,
    source: &SourceDataset,
    cfg: &HySRLConfig,
    seed: u64,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    cfg.validate()?;
    let dims = env.dims();
    dims.ensure_same(&source.dims())?;
    let mut rng = rng_stream(seed);

    if cfg.abandons_source(dims) {
        let vi = run_hybrid_ucbvi(
            env,
            HybridModel::online(dims),
            &cfg.vi_config(),
            &mut rng,
            &mut |it| observer.vi_iteration(0, it),
        )?;
        return Ok(assemble(
            seed,
            Algorithm::Hysrl,
            dims,
            None,
            0,
            Vec::new(),
            false,
            vi,
        ));
    }

    let shift = run_shift_identification(env, source, &cfg.shift_config(), &mut rng, &mut |it| {
        observer.shift_iteration(it)
    })?;
    let mut region = shift.region.set.clone();
    if let Some(gate) = cfg.min_source_count {
        region = region.union(&insufficient_source_set(source, gate));
    }
    let target = if cfg.reuse_counts {
        shift.target.restricted_to(&region)
    } else {
        EmpiricalModel::new(dims)
    };
    let model = HybridModel::new(region, target, source.model.clone())?;
    let offset = shift.episodes;
    let mut vi_cfg = cfg.vi_config();
    if cfg.vi_budget_includes_shift {
        vi_cfg.max_episodes = vi_cfg.max_episodes.saturating_sub(offset);
    }
    let vi = run_hybrid_ucbvi(env, model, &vi_cfg, &mut rng, &mut |it| {
        observer.vi_iteration(offset, it)
    })?;
    Ok(assemble(
        seed,
        Algorithm::Hysrl,
        dims,
        Some(shift.region),
        shift.episodes,
        shift.trace,
        shift.cap_hit,
        vi,
    ))
}

/// Online baseline: value iteration with every pair live and no source.
pub fn run_baseline(
    env: &TabularMdp,
    cfg: &HySRLConfig,
    seed: u64,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    cfg.validate()?;
    let dims = env.dims();
    let mut rng = rng_stream(seed);
    let vi = run_hybrid_ucbvi(
        env,
        HybridModel::online(dims),
        &cfg.vi_config(),
        &mut rng,
        &mut |it| observer.vi_iteration(0, it),
    )?;
    Ok(assemble(
        seed,
        Algorithm::BpiUcbvi,
        dims,
        None,
        0,
        Vec::new(),
        false,
        vi,
    ))
}

/// Dispatches on `cfg.algorithm`.
pub fn run_algorithm(
    env: &TabularMdp,
    source: &SourceDataset,
    cfg: &HySRLConfig,
    seed: u64,
    observer: &mut dyn Observer,
) -> Result<RunResult> {
    match cfg.algorithm {
        Algorithm::Hysrl => run_hysrl(env, source, cfg, seed, observer),
        Algorithm::BpiUcbvi => run_baseline(env, cfg, seed, observer),
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    seed: u64,
    algorithm: Algorithm,
    dims: Dims,
    shift_region: Option<ShiftRegion>,
    shift_episodes: u64,
    shift_trace: Vec<ShiftIteration>,
    shift_cap_hit: bool,
    vi: crate::hybrid_vi::ViResult,
) -> RunResult {
    let region = vi.model.region().clone();
    RunResult {
        seed,
        algorithm,
        policy: vi.policy,
        region,
        shift_region,
        shift_episodes,
        vi_episodes: vi.episodes,
        total_samples: (shift_episodes + vi.episodes) * dims.horizon as u64,
        shift_trace,
        vi_trace: vi.trace,
        shift_cap_hit,
        vi_stopped: vi.stopped,
        vi_statistic: vi.statistic,
    }
}

/// Applies `f` to every seed in parallel; results keep the order of `seeds`.
pub fn map_seeds<T, F>(seeds: &[u64], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    seeds.par_iter().map(|&seed| f(seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::generative_counts;

    fn env() -> TabularMdp {
        let dims = Dims::new(2, 2, 3);
        let kernel = vec![1.0, 0.0, 0.3, 0.7, 1.0, 0.0, 0.0, 1.0];
        TabularMdp::new(dims, kernel, vec![0.2, 0.0, 0.0, 1.0], vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn gate_arithmetic() {
        let dims = Dims::new(16, 4, 20);
        let cfg = HySRLConfig::default();
        assert!((0.8f64.sqrt() * 0.1 - 0.089_442_719_1).abs() < 1e-10);
        assert!(!cfg.abandons_source(dims));
        let loose = HySRLConfig {
            epsilon: 1.0,
            ..cfg.clone()
        };
        assert!(loose.abandons_source(dims));
        // sigma beta = 0.5 and sqrt(4/4) eps = 0.5: the fallback branch.
        let edge = HySRLConfig {
            sigma: 1.0,
            beta: 0.5,
            epsilon: 0.5,
            ..cfg
        };
        assert!(edge.abandons_source(Dims::new(4, 1, 4)));
    }

    #[test]
    fn insufficient_set_cases() {
        let e = env();
        let dims = e.dims();
        let fresh = SourceDataset::empty(dims);
        assert_eq!(insufficient_source_set(&fresh, 1).len(), dims.pairs());
        let mut counts = vec![0u64; 8];
        counts[0] = 150;
        counts[3] = 99;
        counts[4] = 100;
        counts[7] = 5;
        let src = SourceDataset::new(EmpiricalModel::from_counts(dims, counts).unwrap(), "x", 0);
        let c = insufficient_source_set(&src, 100);
        assert_eq!(c.iter().collect::<Vec<_>>(), vec![(0, 1), (1, 1)]);
        assert!(insufficient_source_set(&src, 0).is_empty());
    }

    #[test]
    fn multi_source_cases() {
        let dims = Dims::new(2, 2, 3);
        let region = |pairs: &[(usize, usize)]| {
            let tv = (0..dims.pairs())
                .map(|i| {
                    if pairs.contains(&(i / 2, i % 2)) {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            ShiftRegion::from_evidence(dims, tv, 0.5).unwrap()
        };
        let sources = vec![SourceDataset::empty(dims), SourceDataset::empty(dims)];
        let a = region(&[(0, 0)]);
        let b = region(&[(1, 1)]);
        assert_eq!(a.set.iter().collect::<Vec<_>>(), vec![(0, 0)]);

        let (single, provider) =
            multi_source_region(std::slice::from_ref(&a), &sources[..1]).unwrap();
        assert_eq!(single, a.set);
        assert_eq!(provider[0], None);
        assert_eq!(provider[1], Some(0));

        let (both, provider) = multi_source_region(&[a.clone(), b], &sources).unwrap();
        assert!(both.is_empty());
        assert_eq!(provider[0], Some(1));
        assert_eq!(provider[3], Some(0));
        assert!(provider.iter().all(Option::is_some));

        let (same, _) = multi_source_region(&[a.clone(), a.clone()], &sources).unwrap();
        assert_eq!(same, a.set);
        assert!(multi_source_region(&[], &[]).is_err());
    }

    #[test]
    fn abandoned_source_matches_baseline() {
        let e = env();
        let cfg = HySRLConfig {
            epsilon: 1.0,
            vi_max_episodes: 200,
            ..HySRLConfig::default()
        };
        assert!(cfg.abandons_source(e.dims()));
        let src = SourceDataset::new(
            generative_counts(&e, 1000, &mut rng_stream(0)),
            e.fingerprint(),
            0,
        );
        let a = run_hysrl(&e, &src, &cfg, 9, &mut ()).unwrap();
        let b = run_baseline(&e, &cfg, 9, &mut ()).unwrap();
        assert_eq!(a.vi_trace, b.vi_trace);
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.region, PairSet::full(e.dims()));
        assert_eq!(a.shift_episodes, 0);
    }

    #[test]
    fn sample_accounting_and_reuse() {
        let e = env();
        let cfg = HySRLConfig {
            epsilon: 0.05,
            shift_bonus_scale: 1e-3,
            vi_max_episodes: 50,
            min_source_count: Some(10),
            ..HySRLConfig::default()
        };
        assert!(!cfg.abandons_source(e.dims()));
        let src = SourceDataset::new(
            generative_counts(&e, 100_000, &mut rng_stream(0)),
            e.fingerprint(),
            0,
        );
        let out = run_hysrl(&e, &src, &cfg, 4, &mut ()).unwrap();
        assert!(out.shift_episodes > 0);
        assert_eq!(
            out.total_samples,
            3 * (out.shift_episodes + out.vi_episodes)
        );
        assert!(out.shift_region.as_ref().unwrap().set.is_empty());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let seeds = [5, 3, 9, 1];
        assert_eq!(map_seeds(&seeds, |s| s * 2), vec![10, 6, 18, 2]);
    }
}
