//! Environment generators: the 4x4 GridWorld source/target pair and the
//! bandit-state hard instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{reachability_sigma, Dims, MdpDocument, TabularMdp};
use crate::shift_id::true_shift_region;

/// Grid cell, 1-based `(row, col)` with row 1 at the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Up, down, left, right.
pub const GRID_ACTIONS: usize = 4;
const MOVES: [(isize, isize); GRID_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Rewarding absorbing cells pay once: they lead to an extra zero-reward
    /// absorbing "spent" state appended after the grid cells.
    OnceOnly,
    /// Absorbing cells are self-loops that keep paying; exactly
    /// `width * height` states.
    EveryStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub success_prob: f64,
    /// Raw reward values; rescaled by the largest value when it exceeds 1.
    pub rewards: Vec<(Cell, f64)>,
    pub absorbing: Vec<Cell>,
    pub traps: Vec<Cell>,
    pub start: Cell,
    pub reward_mode: RewardMode,
}

impl GridWorldSpec {
    /// The source room: four reward cells, absorbing goal at (1,4).
    pub fn source() -> Self {
        Self {
            width: 4,
            height: 4,
            horizon: 20,
            success_prob: 0.95,
            rewards: vec![
                (Cell::new(1, 4), 1.0),
                (Cell::new(2, 3), 0.1),
                (Cell::new(3, 2), 0.01),
                (Cell::new(3, 4), 1.5),
            ],
            absorbing: vec![Cell::new(1, 4)],
            traps: Vec::new(),
            start: Cell::new(3, 2),
            reward_mode: RewardMode::OnceOnly,
        }
    }

    /// The source room plus three absorbing traps.
    pub fn target() -> Self {
        Self {
            traps: vec![Cell::new(2, 2), Cell::new(2, 4), Cell::new(3, 3)],
            ..Self::source()
        }
    }

    pub fn with_success_prob(mut self, p: f64) -> Self {
        self.success_prob = p;
        self
    }

    pub fn num_states(&self) -> usize {
        let cells = self.width * self.height;
        match self.reward_mode {
            RewardMode::EveryStep => cells,
            RewardMode::OnceOnly => cells + self.spent_cells().len(),
        }
    }

    pub fn state_of(&self, cell: Cell) -> usize {
        (cell.row - 1) * self.width + (cell.col - 1)
    }

    pub fn cell_of(&self, state: usize) -> Option<Cell> {
        (state < self.width * self.height)
            .then(|| Cell::new(state / self.width + 1, state % self.width + 1))
    }

    fn raw_reward(&self, cell: Cell) -> f64 {
        self.rewards
            .iter()
            .filter(|(c, _)| *c == cell)
            .fold(0.0, |acc, (_, r)| acc + r)
    }

    /// Absorbing cells that pay a reward; each gets a spent state in
    /// [`RewardMode::OnceOnly`].
    fn spent_cells(&self) -> Vec<Cell> {
        self.absorbing
            .iter()
            .copied()
            .filter(|&c| self.raw_reward(c) > 0.0)
            .collect()
    }

    fn in_grid(&self, c: Cell) -> bool {
        (1..=self.height).contains(&c.row) && (1..=self.width).contains(&c.col)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.width == 0 || self.height == 0 || self.horizon == 0 {
            return bad("grid dimensions and horizon must be positive".into());
        }
        if !(self.success_prob > 0.0 && self.success_prob <= 1.0) {
            return bad(format!("success_prob {} not in (0,1]", self.success_prob));
        }
        let cells = self
            .rewards
            .iter()
            .map(|(c, _)| *c)
            .chain(self.absorbing.iter().copied())
            .chain(self.traps.iter().copied())
            .chain(std::iter::once(self.start));
        for c in cells {
            if !self.in_grid(c) {
                return bad(format!("cell ({}, {}) outside the grid", c.row, c.col));
            }
        }
        if self.rewards.iter().any(|(_, r)| *r < 0.0 || !r.is_finite()) {
            return bad("rewards must be nonnegative".into());
        }
        for t in &self.traps {
            if self.rewards.iter().any(|(c, _)| c == t) || self.absorbing.contains(t) {
                return bad(format!(
                    "trap ({}, {}) overlaps a reward or absorbing cell",
                    t.row, t.col
                ));
            }
            if *t == self.start {
                return bad("start cell cannot be a trap".into());
            }
        }
        Ok(())
    }

    fn neighbor(&self, cell: Cell, action: usize) -> Option<Cell> {
        let (dr, dc) = MOVES[action];
        let row = cell.row as isize + dr;
        let col = cell.col as isize + dc;
        let next = Cell::new(row.max(0) as usize, col.max(0) as usize);
        (row >= 1 && col >= 1 && self.in_grid(next)).then_some(next)
    }

    /// Next-state distribution over grid cells for a free cell: the intended
    /// move succeeds with `success_prob` and otherwise slips uniformly to the
    /// other valid neighbors; a move into a wall is replaced by a uniform
    /// move to a valid neighbor.
    fn move_row(&self, cell: Cell, action: usize) -> Vec<(usize, f64)> {
        let valid: Vec<(usize, Cell)> = (0..GRID_ACTIONS)
            .filter_map(|a| self.neighbor(cell, a).map(|c| (a, c)))
            .collect();
        if valid.is_empty() {
            return vec![(self.state_of(cell), 1.0)];
        }
        let intended_valid = valid.iter().any(|(a, _)| *a == action);
        let k = valid.len();
        valid
            .iter()
            .map(|&(a, c)| {
                let p = if !intended_valid {
                    1.0 / k as f64
                } else if a == action {
                    if k == 1 {
                        1.0
                    } else {
                        self.success_prob
                    }
                } else {
                    (1.0 - self.success_prob) / (k - 1) as f64
                };
                (self.state_of(c), p)
            })
            .collect()
    }
}

pub fn build_gridworld(spec: &GridWorldSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let n = spec.num_states();
    let cells = spec.width * spec.height;
    let dims = Dims::new(n, GRID_ACTIONS, spec.horizon);
    let max_reward = spec.rewards.iter().map(|(_, r)| *r).fold(1.0, f64::max);
    let spent = spec.spent_cells();

    let mut kernel = vec![0.0; n * GRID_ACTIONS * n];
    let mut reward = vec![0.0; n * GRID_ACTIONS];
    let mut set_row = |s: usize, a: usize, row: &[(usize, f64)]| {
        let base = (s * GRID_ACTIONS + a) * n;
        for &(next, p) in row {
            kernel[base + next] += p;
        }
    };
    for s in 0..cells {
        let cell = spec.cell_of(s).expect("grid cell");
        let r = spec.raw_reward(cell) / max_reward;
        for a in 0..GRID_ACTIONS {
            reward[s * GRID_ACTIONS + a] = r;
            if spec.traps.contains(&cell) {
                set_row(s, a, &[(s, 1.0)]);
            } else if spec.absorbing.contains(&cell) {
                let target = match (spec.reward_mode, spent.iter().position(|c| *c == cell)) {
                    (RewardMode::OnceOnly, Some(i)) => cells + i,
                    _ => s,
                };
                set_row(s, a, &[(target, 1.0)]);
            } else {
                set_row(s, a, &spec.move_row(cell, a));
            }
        }
    }
    for s in cells..n {
        for a in 0..GRID_ACTIONS {
            set_row(s, a, &[(s, 1.0)]);
        }
    }
    let mut rho = vec![0.0; n];
    rho[spec.state_of(spec.start)] = 1.0;
    TabularMdp::new(dims, kernel, reward, rho)
}

/// Bandit-state construction with a good and a bad absorbing state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardInstanceSpec {
    pub bandit_states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub gamma: f64,
    /// Favoured action per bandit state; `None` gives the uninformative
    /// instance where every action is equivalent.
    pub optimal_actions: Option<Vec<usize>>,
}

impl HardInstanceSpec {
    pub fn good_state(&self) -> usize {
        self.bandit_states
    }

    pub fn bad_state(&self) -> usize {
        self.bandit_states + 1
    }
}

/// `gamma = 48 eps / H`, the bias that makes instances `eps`-hard.
pub fn hard_instance_gamma(epsilon: f64, horizon: usize) -> f64 {
    48.0 * epsilon / horizon as f64
}

pub fn build_hard_instance(spec: &HardInstanceSpec) -> Result<TabularMdp> {
    if spec.bandit_states == 0 || spec.actions == 0 {
        return Err(Error::InvalidArgument(
            "need at least one bandit state and action".into(),
        ));
    }
    if spec.horizon < 3 {
        return Err(Error::InvalidArgument(format!(
            "horizon {} < 3",
            spec.horizon
        )));
    }
    if !(0.0..=1.0 / 3.0).contains(&spec.gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma {} not in [0, 1/3]",
            spec.gamma
        )));
    }
    if let Some(best) = &spec.optimal_actions {
        if best.len() != spec.bandit_states || best.iter().any(|&a| a >= spec.actions) {
            return Err(Error::InvalidArgument(
                "optimal action vector must have one valid action per bandit state".into(),
            ));
        }
    }
    let n = spec.bandit_states + 2;
    let m = spec.actions;
    let h = spec.horizon as f64;
    let (good, bad) = (spec.good_state(), spec.bad_state());
    let mut kernel = vec![0.0; n * m * n];
    let mut reward = vec![0.0; n * m];
    for s in 0..spec.bandit_states {
        for a in 0..m {
            let bias = match &spec.optimal_actions {
                Some(best) if best[s] == a => spec.gamma,
                _ => 0.0,
            };
            let base = (s * m + a) * n;
            kernel[base + s] = 1.0 - 1.0 / h;
            kernel[base + good] = (0.5 + bias) / h;
            kernel[base + bad] = (0.5 - bias) / h;
        }
    }
    for a in 0..m {
        kernel[(good * m + a) * n + good] = 1.0;
        kernel[(bad * m + a) * n + bad] = 1.0;
        reward[good * m + a] = 1.0;
    }
    let mut rho = vec![0.0; n];
    rho[..spec.bandit_states].fill(1.0 / spec.bandit_states as f64);
    TabularMdp::new(Dims::new(n, m, spec.horizon), kernel, reward, rho)
}

/// Smallest nonzero TV over the true shifted region (1 when the kernels
/// agree everywhere) and the reachability constant of `target`.
pub fn effective_beta_sigma(source: &TabularMdp, target: &TabularMdp) -> Result<(f64, f64)> {
    let region = true_shift_region(source, target)?;
    let sigma = reachability_sigma(target)?.min;
    Ok((region.effective_beta(), sigma))
}

/// Serializable description of how an environment was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Gridworld(GridWorldSpec),
    HardInstance(HardInstanceSpec),
}

impl Generator {
    pub fn build(&self) -> Result<TabularMdp> {
        match self {
            Generator::Gridworld(spec) => build_gridworld(spec),
            Generator::HardInstance(spec) => build_hard_instance(spec),
        }
    }

    /// MDP document carrying both the tables and this generator.
    pub fn document(&self) -> Result<MdpDocument> {
        let mut doc = self.build()?.to_document();
        doc.generator = Some(serde_json::to_value(self)?);
        Ok(doc)
    }
}
