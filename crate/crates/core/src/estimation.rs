//! Visitation counts, empirical kernels and the statistics shared by shift
//! identification and hybrid value iteration.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdp::{dot, Dims, EpisodeTrace, TabularMdp, NORMALIZATION_TOL};

/// A subset of `S x A`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairSet {
    dims: Dims,
    members: Vec<bool>,
}

impl PairSet {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            members: vec![false; dims.pairs()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            members: vec![true; dims.pairs()],
        }
    }

    pub fn from_pairs(dims: Dims, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut set = Self::empty(dims);
        for (s, a) in pairs {
            set.insert(s, a);
        }
        set
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn insert(&mut self, s: usize, a: usize) {
        let i = self.dims.pair(s, a);
        self.members[i] = true;
    }

    #[inline]
    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.members[self.dims.pair(s, a)]
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let m = self.dims.actions;
        self.members
            .iter()
            .enumerate()
            .filter(|(_, &x)| x)
            .map(move |(i, _)| (i / m, i % m))
    }

    pub fn union(&self, other: &PairSet) -> PairSet {
        assert_eq!(self.dims, other.dims);
        PairSet {
            dims: self.dims,
            members: self
                .members
                .iter()
                .zip(&other.members)
                .map(|(a, b)| *a || *b)
                .collect(),
        }
    }

    pub fn intersection(&self, other: &PairSet) -> PairSet {
        assert_eq!(self.dims, other.dims);
        PairSet {
            dims: self.dims,
            members: self
                .members
                .iter()
                .zip(&other.members)
                .map(|(a, b)| *a && *b)
                .collect(),
        }
    }
}

/// Visitation counts and the empirical kernel derived from them.
///
/// Rows with `n(s,a) = 0` hold the uniform distribution `1/S`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalModel {
    dims: Dims,
    pair_counts: Vec<u64>,
    triple_counts: Vec<u64>,
    kernel: Vec<f64>,
    // Next states with a positive count, ascending. Empty for unvisited rows.
    support: Vec<Vec<u32>>,
}

impl EmpiricalModel {
    pub fn new(dims: Dims) -> Self {
        let n = dims.states;
        Self {
            dims,
            pair_counts: vec![0; dims.pairs()],
            triple_counts: vec![0; dims.pairs() * n],
            kernel: vec![1.0 / n as f64; dims.pairs() * n],
            support: vec![Vec::new(); dims.pairs()],
        }
    }

    /// Builds a model from `n(s,a,s')` in row-major order.
    pub fn from_counts(dims: Dims, triple_counts: Vec<u64>) -> Result<Self> {
        if triple_counts.len() != dims.pairs() * dims.states {
            return Err(Error::Shape(format!(
                "count table has {} entries, expected {}",
                triple_counts.len(),
                dims.pairs() * dims.states
            )));
        }
        let mut model = Self::new(dims);
        model.triple_counts = triple_counts;
        for i in 0..dims.pairs() {
            model.refresh_row(i);
        }
        Ok(model)
    }

    fn refresh_row(&mut self, pair: usize) {
        let n = self.dims.states;
        let counts = &self.triple_counts[pair * n..(pair + 1) * n];
        let total: u64 = counts.iter().sum();
        self.pair_counts[pair] = total;
        let row = &mut self.kernel[pair * n..(pair + 1) * n];
        let support = &mut self.support[pair];
        support.clear();
        if total == 0 {
            row.fill(1.0 / n as f64);
            return;
        }
        for (next, (&c, p)) in counts.iter().zip(row.iter_mut()).enumerate() {
            *p = c as f64 / total as f64;
            if c > 0 {
                support.push(next as u32);
            }
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn count(&self, s: usize, a: usize) -> u64 {
        self.pair_counts[self.dims.pair(s, a)]
    }

    #[inline]
    pub fn count_to(&self, s: usize, a: usize, next: usize) -> u64 {
        self.triple_counts[self.dims.pair(s, a) * self.dims.states + next]
    }

    pub fn triple_counts(&self) -> &[u64] {
        &self.triple_counts
    }

    pub fn total_count(&self) -> u64 {
        self.pair_counts.iter().sum()
    }

    #[inline]
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        let n = self.dims.states;
        let start = self.dims.pair(s, a) * n;
        &self.kernel[start..start + n]
    }

    /// `p_hat f (s,a)`, summing only over observed successors.
    #[inline]
    pub fn expect(&self, s: usize, a: usize, f: &[f64]) -> f64 {
        let pair = self.dims.pair(s, a);
        let support = &self.support[pair];
        if support.is_empty() {
            return dot(self.kernel_row(s, a), f);
        }
        let row = self.kernel_row(s, a);
        support
            .iter()
            .map(|&i| row[i as usize] * f[i as usize])
            .sum()
    }

    /// Returns `(p_hat f, p_hat f^2)` in one pass.
    #[inline]
    pub fn moments(&self, s: usize, a: usize, f: &[f64]) -> (f64, f64) {
        let pair = self.dims.pair(s, a);
        let row = self.kernel_row(s, a);
        let support = &self.support[pair];
        let (mut m1, mut m2) = (0.0, 0.0);
        if support.is_empty() {
            for (p, x) in row.iter().zip(f) {
                m1 += p * x;
                m2 += p * x * x;
            }
        } else {
            for &i in support {
                let (p, x) = (row[i as usize], f[i as usize]);
                m1 += p * x;
                m2 += p * x * x;
            }
        }
        (m1, m2)
    }

    /// Adds the transitions of `trace` whose pair lies in `mask` (all of
    /// them when `mask` is `None`) and refreshes the touched rows.
    pub fn update(&mut self, trace: &EpisodeTrace, mask: Option<&PairSet>) -> Result<()> {
        let d = self.dims;
        for t in &trace.steps {
            if t.state >= d.states || t.action >= d.actions || t.next_state >= d.states {
                return Err(Error::OutOfRange(format!(
                    "transition ({}, {}, {}) outside {d}",
                    t.state, t.action, t.next_state
                )));
            }
        }
        let mut touched = Vec::with_capacity(trace.steps.len());
        for t in &trace.steps {
            if mask.is_some_and(|m| !m.contains(t.state, t.action)) {
                continue;
            }
            let pair = d.pair(t.state, t.action);
            self.triple_counts[pair * d.states + t.next_state] += 1;
            touched.push(pair);
        }
        touched.sort_unstable();
        touched.dedup();
        for pair in touched {
            self.refresh_row(pair);
        }
        Ok(())
    }

    /// Copy of this model with every row outside `keep` reset to zero counts.
    pub fn restricted_to(&self, keep: &PairSet) -> Self {
        let n = self.dims.states;
        let mut counts = self.triple_counts.clone();
        for s in 0..self.dims.states {
            for a in 0..self.dims.actions {
                if !keep.contains(s, a) {
                    let p = self.dims.pair(s, a);
                    counts[p * n..(p + 1) * n].fill(0);
                }
            }
        }
        Self::from_counts(self.dims, counts).expect("same shape")
    }

    /// Smallest `n(s,a)` over `region` (all pairs when `None`).
    pub fn min_count(&self, region: Option<&PairSet>) -> Result<u64> {
        let value = match region {
            None => self.pair_counts.iter().copied().min(),
            Some(set) => set.iter().map(|(s, a)| self.count(s, a)).min(),
        };
        value.ok_or_else(|| Error::InvalidArgument("min_count over an empty region".into()))
    }
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidArgument(format!(
            "{name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

fn check_lengths(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Total variation distance `(1/2) sum |p_i - q_i|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(tv_unchecked(p, q))
}

#[inline]
pub(crate) fn tv_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let l1: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    (0.5 * l1).min(1.0)
}

/// `KL(p || q)`; `+inf` when `p` puts mass where `q` does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a <= 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += a * (a / b).ln();
    }
    Ok(kl.max(0.0))
}

/// `Var_p(f) = p f^2 - (p f)^2`, clamped at zero.
pub fn variance_under(p: &[f64], f: &[f64]) -> Result<f64> {
    check_lengths(p, f)?;
    let (m1, m2) = p
        .iter()
        .zip(f)
        .fold((0.0, 0.0), |(m1, m2), (p, x)| (m1 + p * x, m2 + p * x * x));
    Ok((m2 - m1 * m1).max(0.0))
}

/// The confidence functions `g1`, `g2`, `g3`, each multiplied by `scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BonusFunctions {
    states: f64,
    log_sah: f64,
    log_sa: f64,
    scale: f64,
}

impl BonusFunctions {
    pub fn new(dims: Dims, delta: f64, scale: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta = {delta} not in (0,1)"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bonus scale {scale} must be positive"
            )));
        }
        let sa = (dims.states * dims.actions) as f64;
        Ok(Self {
            states: dims.states as f64,
            log_sah: (6.0 * sa * dims.horizon as f64 / delta).ln(),
            log_sa: (6.0 * sa / delta).ln(),
            scale,
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `log(6SAH/delta) + S log(8e(n+1))`.
    #[inline]
    pub fn g1(&self, n: u64) -> f64 {
        self.scale * (self.log_sah + self.states * log_8e(n))
    }

    /// `log(6SAH/delta) + log(8e(n+1))`.
    #[inline]
    pub fn g2(&self, n: u64) -> f64 {
        self.scale * (self.log_sah + log_8e(n))
    }

    /// `log(6SA/delta)`.
    pub fn g3(&self) -> f64 {
        self.scale * self.log_sa
    }
}

#[inline]
fn log_8e(n: u64) -> f64 {
    (8.0 * std::f64::consts::E * (n as f64 + 1.0)).ln()
}

/// Header of a source-dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub version: u32,
    #[serde(rename = "S")]
    pub states: usize,
    #[serde(rename = "A")]
    pub actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub env_fingerprint: String,
    pub episodes: u64,
}

/// Offline transitions from the source environment, stored as counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDataset {
    pub meta: SourceMeta,
    pub model: EmpiricalModel,
}

const SEPARATOR: &str = "---";
const CSV_HEADER: &str = "s,a,s_next,count";

impl SourceDataset {
    pub fn new(model: EmpiricalModel, env_fingerprint: impl Into<String>, episodes: u64) -> Self {
        let d = model.dims();
        Self {
            meta: SourceMeta {
                version: 1,
                states: d.states,
                actions: d.actions,
                horizon: d.horizon,
                env_fingerprint: env_fingerprint.into(),
                episodes,
            },
            model,
        }
    }

    /// An empty dataset; every pair has count zero.
    pub fn empty(dims: Dims) -> Self {
        Self::new(EmpiricalModel::new(dims), "", 0)
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.meta).expect("serializable");
        out.push('\n');
        out.push_str(SEPARATOR);
        out.push('\n');
        out.push_str(CSV_HEADER);
        out.push('\n');
        let d = self.dims();
        for s in 0..d.states {
            for a in 0..d.actions {
                for next in 0..d.states {
                    let c = self.model.count_to(s, a, next);
                    if c > 0 {
                        let _ = writeln!(out, "{s},{a},{next},{c}");
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads a dataset, checking its dimensions against `expected` if given.
    pub fn load(path: &Path, expected: Option<Dims>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, expected).map_err(|e| match e {
            Error::Shape(reason) | Error::OutOfRange(reason) | Error::InvalidArgument(reason) => {
                Error::CorruptDataset {
                    path: path.to_path_buf(),
                    reason,
                }
            }
            Error::Json(err) => Error::CorruptDataset {
                path: path.to_path_buf(),
                reason: err.to_string(),
            },
            Error::Csv(err) => Error::CorruptDataset {
                path: path.to_path_buf(),
                reason: err.to_string(),
            },
            other => other,
        })
    }

    pub fn parse(text: &str, expected: Option<Dims>) -> Result<Self> {
        let sep = text
            .find(&format!("\n{SEPARATOR}\n"))
            .ok_or_else(|| Error::Shape("missing '---' separator".into()))?;
        let meta: SourceMeta = serde_json::from_str(&text[..sep])?;
        if meta.version != 1 {
            return Err(Error::InvalidArgument(format!(
                "unsupported dataset version {}",
                meta.version
            )));
        }
        let dims = Dims::new(meta.states, meta.actions, meta.horizon);
        if let Some(expected) = expected {
            dims.ensure_same(&expected)?;
        }
        if dims.states == 0 || dims.actions == 0 || dims.horizon == 0 {
            return Err(Error::Shape(format!("degenerate dimensions {dims}")));
        }
        let body = &text[sep + SEPARATOR.len() + 2..];
        let mut reader = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header = reader.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER.split(',').collect::<Vec<_>>() {
            return Err(Error::Shape(format!("unexpected CSV header {header:?}")));
        }
        let mut counts = vec![0u64; dims.pairs() * dims.states];
        for record in reader.deserialize() {
            let (s, a, next, c): (usize, usize, usize, u64) = record?;
            if s >= dims.states || a >= dims.actions || next >= dims.states {
                return Err(Error::OutOfRange(format!(
                    "row ({s},{a},{next}) outside {dims}"
                )));
            }
            counts[dims.pair(s, a) * dims.states + next] += c;
        }
        let model = EmpiricalModel::from_counts(dims, counts)?;
        Ok(Self { meta, model })
    }
}

/// Draws `per_pair` independent transitions from every row of `mdp`
/// (generative-model sampling) using sequential binomial splitting.
pub fn generative_counts<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    per_pair: u64,
    rng: &mut R,
) -> EmpiricalModel {
    let d = mdp.dims();
    let mut counts = vec![0u64; d.pairs() * d.states];
    for s in 0..d.states {
        for a in 0..d.actions {
            let row = mdp.kernel_row(s, a);
            let base = d.pair(s, a) * d.states;
            let mut remaining = per_pair;
            let mut mass = 1.0;
            for (next, &p) in row.iter().enumerate() {
                if remaining == 0 {
                    break;
                }
                if next + 1 == d.states || p >= mass {
                    counts[base + next] += remaining;
                    break;
                }
                if p <= 0.0 {
                    continue;
                }
                let k = binomial(remaining, (p / mass).clamp(0.0, 1.0), rng);
                counts[base + next] += k;
                remaining -= k;
                mass -= p;
            }
        }
    }
    EmpiricalModel::from_counts(d, counts).expect("same shape")
}

// Large trial counts are split into chunks that the sampler handles reliably.
fn binomial<R: Rng + ?Sized>(trials: u64, p: f64, rng: &mut R) -> u64 {
    const CHUNK: u64 = 1 << 30;
    let mut left = trials;
    let mut total = 0;
    while left > 0 {
        let n = left.min(CHUNK);
        total += Binomial::new(n, p).expect("valid binomial").sample(rng);
        left -= n;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Transition;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn trace(steps: &[(usize, usize, usize)]) -> EpisodeTrace {
        EpisodeTrace {
            episode: 0,
            lineage: 0,
            steps: steps
                .iter()
                .map(|&(s, a, n)| Transition {
                    state: s,
                    action: a,
                    reward: 0.0,
                    next_state: n,
                })
                .collect(),
        }
    }

    #[test]
    fn single_visit_sets_point_mass() {
        let mut m = EmpiricalModel::new(Dims::new(2, 1, 1));
        assert_eq!(m.kernel_row(0, 0), &[0.5, 0.5]);
        m.update(&trace(&[(0, 0, 1)]), None).unwrap();
        assert_eq!(m.count(0, 0), 1);
        assert_eq!(m.kernel_row(0, 0), &[0.0, 1.0]);
    }

    #[test]
    fn mask_excludes_pair() {
        let dims = Dims::new(2, 2, 2);
        let mut m = EmpiricalModel::new(dims);
        let mask = PairSet::from_pairs(dims, [(1, 0)]);
        m.update(&trace(&[(0, 0, 1), (1, 0, 0)]), Some(&mask))
            .unwrap();
        assert_eq!(m.count(0, 0), 0);
        assert_eq!(m.count(1, 0), 1);
    }

    #[test]
    fn ratio_row() {
        let dims = Dims::new(3, 1, 4);
        let mut m = EmpiricalModel::new(dims);
        m.update(&trace(&[(0, 0, 1), (0, 0, 1), (0, 0, 2), (0, 0, 1)]), None)
            .unwrap();
        assert_eq!(m.kernel_row(0, 0), &[0.0, 0.75, 0.25]);
        assert!(m.update(&trace(&[(0, 0, 3)]), None).is_err());
    }

    #[test]
    fn min_count_cases() {
        let dims = Dims::new(2, 2, 1);
        let m = EmpiricalModel::new(dims);
        assert_eq!(m.min_count(None).unwrap(), 0);
        let m = EmpiricalModel::from_counts(dims, vec![5, 0, 2, 3, 1, 4, 0, 5]).unwrap();
        assert_eq!(m.min_count(None).unwrap(), 5);
        let m = EmpiricalModel::from_counts(dims, vec![5, 0, 2, 3, 1, 4, 9, 5]).unwrap();
        assert_eq!(
            m.min_count(Some(&PairSet::from_pairs(dims, [(1, 1)])))
                .unwrap(),
            14
        );
        assert!(m.min_count(Some(&PairSet::empty(dims))).is_err());
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            tv_distance(&[0.5, 0.5], &[0.8, 0.2]).unwrap(),
            0.3,
            epsilon = 1e-15
        );
        assert!(tv_distance(&[0.5, 0.5], &[1.0]).is_err());
        assert!(tv_distance(&[0.5, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_eq!(
            kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn variance_examples() {
        assert_eq!(variance_under(&[0.2, 0.8], &[3.0, 3.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(variance_under(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.25);
        assert_eq!(
            variance_under(&[0.0, 1.0, 0.0], &[5.0, -2.0, 7.0]).unwrap(),
            0.0
        );
        assert!(variance_under(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bonus_closed_forms() {
        let dims = Dims::new(16, 4, 20);
        let g = BonusFunctions::new(dims, 0.1, 1.0).unwrap();
        // log(76800) + 16 log(8e); log(76800) + log(8e); log(3840).
        assert_abs_diff_eq!(g.g1(0), 60.520_024_586_013, epsilon = 1e-10);
        assert_abs_diff_eq!(g.g2(0), 14.328_401_460_816, epsilon = 1e-10);
        assert_abs_diff_eq!(g.g3(), 8.253_227_645_582, epsilon = 1e-10);
        let scaled = BonusFunctions::new(dims, 0.1, 2e-3).unwrap();
        assert_abs_diff_eq!(scaled.g1(7), 2e-3 * g.g1(7), epsilon = 1e-15);
        assert!(BonusFunctions::new(dims, 1.0, 1.0).is_err());
        assert!(BonusFunctions::new(dims, 0.0, 1.0).is_err());
    }

    #[test]
    fn dataset_round_trip_and_mismatch() {
        let dims = Dims::new(3, 2, 4);
        let counts: Vec<u64> = (0..18).map(|i| (i * 7 % 5) as u64).collect();
        let ds = SourceDataset::new(
            EmpiricalModel::from_counts(dims, counts).unwrap(),
            "abc",
            12,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("src.dataset");
        ds.save(&path).unwrap();
        let back = SourceDataset::load(&path, Some(dims)).unwrap();
        assert_eq!(back, ds);

        let err = SourceDataset::load(&path, Some(Dims::new(4, 2, 4))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("S=4") && msg.contains("S=3"), "{msg}");

        let empty = SourceDataset::empty(dims);
        empty.save(&path).unwrap();
        let back = SourceDataset::load(&path, None).unwrap();
        assert_eq!(back.model.min_count(None).unwrap(), 0);

        std::fs::write(&path, "{\"version\":1}\n---\n").unwrap();
        assert!(matches!(
            SourceDataset::load(&path, None),
            Err(Error::CorruptDataset { .. })
        ));
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, n).prop_map(|v| {
            let total: f64 = v.iter().sum::<f64>() + 1e-12;
            v.iter()
                .map(|x| (x + 1e-12 / v.len() as f64) / total)
                .collect()
        })
    }

    proptest! {
        #[test]
        fn tv_is_a_metric((p, q, r) in (2usize..7).prop_flat_map(|n| (simplex(n), simplex(n), simplex(n)))) {
            let pq = tv_distance(&p, &q).unwrap();
            let qp = tv_distance(&q, &p).unwrap();
            prop_assert_eq!(pq, qp);
            prop_assert!(tv_distance(&p, &p).unwrap() == 0.0);
            prop_assert!((0.0..=1.0).contains(&pq));
            let pr = tv_distance(&p, &r).unwrap();
            let rq = tv_distance(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-12);
        }

        #[test]
        fn pinsker((p, q) in (2usize..7).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            let kl = kl_divergence(&p, &q).unwrap();
            if kl.is_finite() {
                prop_assert!(tv_distance(&p, &q).unwrap() <= (kl / 2.0).sqrt() + 1e-12);
            }
        }

        #[test]
        fn bonus_ordering(n in 0u64..10_000_000, s in 1usize..40, a in 1usize..8, h in 1usize..50, delta in 0.001f64..0.999) {
            let g = BonusFunctions::new(Dims::new(s, a, h), delta, 1.0).unwrap();
            prop_assert!(g.g1(n) >= g.g2(n));
            prop_assert!(g.g2(n) >= g.g3());
        }

        #[test]
        fn g1_per_sample_decreasing(n in 1u64..10_000_000, s in 1usize..40) {
            let g = BonusFunctions::new(Dims::new(s, 4, 20), 0.1, 1.0).unwrap();
            prop_assert!(g.g1(n + 1) / (n + 1) as f64 <= g.g1(n) / n as f64);
        }

        #[test]
        fn rows_normalize(counts in proptest::collection::vec(0u64..4, 2 * 3 * 3)) {
            let m = EmpiricalModel::from_counts(Dims::new(3, 2, 1), counts).unwrap();
            for s in 0..3 {
                for a in 0..2 {
                    let sum: f64 = m.kernel_row(s, a).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
