//! Benchmark fixtures: the GridWorld pair with counts drawn from a
//! generative model.

use hysrl_core::envs::{build_gridworld, GridWorldSpec};
use hysrl_core::estimation::generative_counts;
use hysrl_core::mdp::rng_stream;
use hysrl_core::shift_id::true_shift_region;
use hysrl_core::{BonusFunctions, EmpiricalModel, HybridModel, TabularMdp};

pub struct Fixture {
    pub target: TabularMdp,
    pub source_model: EmpiricalModel,
    pub hybrid: HybridModel,
    pub shift_bonus: BonusFunctions,
    pub vi_bonus: BonusFunctions,
}

/// `source_per_pair` and `target_per_pair` samples of every row.
pub fn gridworld(source_per_pair: u64, target_per_pair: u64) -> Fixture {
    let source = build_gridworld(&GridWorldSpec::source()).expect("valid gridworld");
    let target = build_gridworld(&GridWorldSpec::target()).expect("valid gridworld");
    let region = true_shift_region(&source, &target).expect("same shape").set;
    let source_model = generative_counts(&source, source_per_pair, &mut rng_stream(1));
    let target_model = generative_counts(&target, target_per_pair, &mut rng_stream(2));
    let hybrid = HybridModel::new(region, target_model, source_model.clone()).expect("same shape");
    let dims = target.dims();
    Fixture {
        target,
        source_model,
        hybrid,
        shift_bonus: BonusFunctions::new(dims, 0.1, 1e-6).expect("valid bonus"),
        vi_bonus: BonusFunctions::new(dims, 0.1, 2e-3).expect("valid bonus"),
    }
}
