//! Static description of a karma economy with one account per resource.
//!
//! An economy is a cyclic sequence of resources competed for once per day.
//! Each resource carries its own karma account; a user's private state is
//! its urgency and the vector of karma balances. This module holds the
//! configuration types, their validation, and the enumerated state/action
//! spaces every other module indexes into.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for treating a floating-point karma amount as an integer.
///
/// Exchange rates such as 2/3 are not representable exactly, so
/// `floor(16.000000000000004)` and `floor(15.999999999999998)` must agree.
pub const INTEGER_SNAP: f64 = 1e-9;

/// Default cap on the number of states per user type.
pub const DEFAULT_STATE_BUDGET: usize = 1_000_000;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub name: String,
    /// Total capacity `s[r]` as a fraction of the population.
    pub total_capacity: f64,
    /// Priority (congestion-free) capacity `s^pr[r]`.
    pub priority_capacity: f64,
    pub karma_max: u32,
    /// Initial per-user endowment, which is also the conserved mean.
    pub karma_mean: u32,
    /// Discount applied on the transition out of this resource.
    pub discount: f64,
}

impl ResourceSpec {
    /// General-purpose capacity `s[r] - s^pr[r]`.
    pub fn general_capacity(&self) -> f64 {
        self.total_capacity - self.priority_capacity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTypeSpec {
    pub name: String,
    pub share: f64,
    /// Row-major transition matrix over `(resource, urgency)` pairs, where
    /// pair `(r, u)` has index `r * n_urgency + u`.
    pub transitions: Vec<Vec<f64>>,
}

/// Exchange rates `chi[r][r']`: how much one unit of `r'`-karma counts
/// toward a bid for resource `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExchangeMatrix {
    pub rates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExchangeRegime {
    NoExchange,
    Unit,
    NonUnit,
    /// Off-diagonal rates that fit none of the named regimes.
    Irregular,
}

impl ExchangeMatrix {
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn unit(n: usize) -> Self {
        Self::from_fn(n, |_, _| 1.0)
    }

    /// Geometric rates `chi[r][r'] = ratio^(r' - r)`, which satisfy
    /// `chi[r][r'] * chi[r'][r] = 1`. For two resources this is the pair
    /// `chi[0][1] = ratio`, `chi[1][0] = 1 / ratio`.
    pub fn geometric(n: usize, ratio: f64) -> Self {
        Self::from_fn(n, |r, c| ratio.powi(c as i32 - r as i32))
    }

    fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        Self {
            rates: (0..n).map(|r| (0..n).map(|c| f(r, c)).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    #[inline]
    pub fn rate(&self, to: usize, from: usize) -> f64 {
        self.rates[to][from]
    }

    pub fn regime(&self) -> ExchangeRegime {
        let n = self.len();
        let off: Vec<(usize, usize)> = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .collect();
        if off.iter().all(|&(r, c)| self.rates[r][c] == 0.0) {
            ExchangeRegime::NoExchange
        } else if off.iter().all(|&(r, c)| self.rates[r][c] == 1.0) {
            ExchangeRegime::Unit
        } else if off
            .iter()
            .all(|&(r, c)| (self.rates[r][c] * self.rates[c][r] - 1.0).abs() < 1e-12)
        {
            ExchangeRegime::NonUnit
        } else {
            ExchangeRegime::Irregular
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedistributionRule {
    /// Only users that bid (did not abstain) share the payments.
    ToActive,
    /// Every user shares the payments.
    ToAll,
}

impl fmt::Display for RedistributionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RedistributionRule::ToActive => f.write_str("to_active"),
            RedistributionRule::ToAll => f.write_str("to_all"),
        }
    }
}

/// How redistribution handles recipients that would exceed `k^max`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaturationRule {
    /// Raise the common gain until the capped recipients absorb exactly the
    /// payments; karma is lost only if every recipient saturates.
    #[default]
    WaterFilling,
    /// Add the overflow of the nominal gain once, uniformly, to the
    /// recipients that did not overflow.
    SinglePass,
    /// Cap balances and discard the overflow.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomyConfig {
    pub resources: Vec<ResourceSpec>,
    /// Urgency levels shared by all types; the first must be 0 ("no need").
    pub urgency_levels: Vec<f64>,
    pub types: Vec<UserTypeSpec>,
    pub exchange: ExchangeMatrix,
    pub redistribution: RedistributionRule,
    #[serde(default)]
    pub saturation: SaturationRule,
    pub nominal_payoff: f64,
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_budget: Option<usize>,
}

impl EconomyConfig {
    pub fn n_resources(&self) -> usize {
        self.resources.len()
    }

    pub fn n_urgency(&self) -> usize {
        self.urgency_levels.len()
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn shares(&self) -> Vec<f64> {
        self.types.iter().map(|t| t.share).collect()
    }

    /// Transition probability `phi_tau[next | current]` over `(r, u)` pairs.
    #[inline]
    pub fn phi(&self, tau: usize, r: usize, u: usize, r_next: usize, u_next: usize) -> f64 {
        let nu = self.n_urgency();
        self.types[tau].transitions[r * nu + u][r_next * nu + u_next]
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The same economy with uncontrolled access (`s^pr = 0` everywhere).
    pub fn benchmark(&self) -> Self {
        let mut cfg = self.clone();
        for res in &mut cfg.resources {
            res.priority_capacity = 0.0;
        }
        cfg
    }

    /// Two-resource commute example: highway `H` then parking `P`, with a
    /// suburb type that needs both every day and a city type that needs the
    /// highway on half of the days.
    pub fn case_study() -> Self {
        let p_low = 0.75;
        let p_high = 0.25;
        // Pair indices: H0=0, H1=1, H9=2, P0=3, P1=4, P9=5.
        let day_start = [0.0, p_low, p_high];
        let suburb = vec![
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [&day_start[..], &[0.0; 3]].concat(),
            [&day_start[..], &[0.0; 3]].concat(),
            [&day_start[..], &[0.0; 3]].concat(),
        ];
        let city_start = [0.5, 0.5 * p_low, 0.5 * p_high, 0.0, 0.0, 0.0];
        let city = vec![
            vec![0.0, 0.0, 0.0, 0.0, p_low, p_high],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            city_start.to_vec(),
            city_start.to_vec(),
            city_start.to_vec(),
        ];
        EconomyConfig {
            resources: vec![
                ResourceSpec {
                    name: "H".into(),
                    total_capacity: 0.5,
                    priority_capacity: 0.1875,
                    karma_max: 24,
                    karma_mean: 8,
                    discount: 1.0,
                },
                ResourceSpec {
                    name: "P".into(),
                    total_capacity: 0.5,
                    priority_capacity: 0.2,
                    karma_max: 24,
                    karma_mean: 8,
                    discount: 0.98,
                },
            ],
            urgency_levels: vec![0.0, 1.0, 9.0],
            types: vec![
                UserTypeSpec {
                    name: "S".into(),
                    share: 0.5,
                    transitions: suburb,
                },
                UserTypeSpec {
                    name: "C".into(),
                    share: 0.5,
                    transitions: city,
                },
            ],
            exchange: ExchangeMatrix::unit(2),
            redistribution: RedistributionRule::ToAll,
            saturation: SaturationRule::WaterFilling,
            nominal_payoff: 2.0,
            epsilon: 1e-4,
            state_budget: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, msg: impl Into<String>) {
        self.violations.push(msg.into());
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(self.violations))
        }
    }
}

/// Checks every structural constraint of the economy and lists violations.
pub fn validate_config(cfg: &EconomyConfig) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n_r = cfg.n_resources();
    let n_u = cfg.n_urgency();

    if n_r == 0 {
        report.push("at least one resource is required");
    }
    if n_u == 0 {
        report.push("at least one urgency level is required");
    } else if cfg.urgency_levels[0] != 0.0 {
        report.push("the first urgency level must be 0 (no need)");
    }
    for (i, u) in cfg.urgency_levels.iter().enumerate() {
        if !(u.is_finite() && *u >= 0.0) {
            report.push(format!("urgency level {i} must be finite and nonnegative"));
        }
    }

    for (r, res) in cfg.resources.iter().enumerate() {
        let tag = &res.name;
        if !(res.priority_capacity >= 0.0 && res.priority_capacity < res.total_capacity) {
            report.push(format!("resource {tag}: need 0 <= s^pr < s"));
        }
        if !(res.total_capacity < 1.0) {
            report.push(format!("resource {tag}: total capacity must be < 1"));
        }
        if !(res.general_capacity() > 0.0) {
            report.push(format!("resource {tag}: general-purpose capacity must be > 0"));
        }
        if res.karma_mean > res.karma_max {
            report.push(format!("resource {tag}: karma mean exceeds karma max"));
        }
        if r + 1 < n_r {
            if res.discount != 1.0 {
                report.push(format!("resource {tag}: within-day discount must be 1"));
            }
        } else if !(res.discount >= 0.0 && res.discount < 1.0) {
            report.push(format!(
                "resource {tag}: day-boundary discount must lie in [0, 1)"
            ));
        }
        // Worst case: every user is active and priority absorbs only s^pr - eps.
        let s_gp = res.general_capacity();
        if s_gp > 0.0 {
            let worst_delay = ((1.0 - res.total_capacity + cfg.epsilon) / s_gp).max(0.0);
            if !(cfg.nominal_payoff > worst_delay) {
                report.push(format!(
                    "resource {tag}: nominal payoff must exceed the worst-case delay {worst_delay:.6}"
                ));
            }
        }
    }

    let any_priority = cfg.resources.iter().any(|r| r.priority_capacity > 0.0);
    if !(cfg.epsilon > 0.0) {
        report.push("epsilon must be positive");
    }
    if any_priority {
        let min_pr = cfg
            .resources
            .iter()
            .filter(|r| r.priority_capacity > 0.0)
            .map(|r| r.priority_capacity)
            .fold(f64::INFINITY, f64::min);
        if !(cfg.epsilon < min_pr) {
            report.push("epsilon must be smaller than every positive priority capacity");
        }
    }

    // Exchange matrix.
    if cfg.exchange.len() != n_r || cfg.exchange.rates.iter().any(|row| row.len() != n_r) {
        report.push(format!("exchange matrix must be {n_r} x {n_r}"));
    } else {
        for r in 0..n_r {
            if cfg.exchange.rates[r][r] != 1.0 {
                report.push(format!("exchange rate chi[{r}][{r}] must be 1"));
            }
            for c in 0..n_r {
                let x = cfg.exchange.rates[r][c];
                if !(x.is_finite() && x >= 0.0) {
                    report.push(format!("exchange rate chi[{r}][{c}] must be finite and >= 0"));
                }
            }
        }
        match cfg.exchange.regime() {
            ExchangeRegime::Irregular => {
                report.push("non-unit exchange requires chi[r][r'] * chi[r'][r] = 1");
            }
            ExchangeRegime::NonUnit
                if (0..n_r).any(|r| (0..n_r).any(|c| cfg.exchange.rates[r][c] == 0.0)) =>
            {
                report.push("non-unit exchange requires chi[r][r'] * chi[r'][r] = 1");
            }
            _ => {}
        }
    }

    // Types and their resource-urgency chains.
    if cfg.types.is_empty() {
        report.push("at least one user type is required");
    }
    let share_sum: f64 = cfg.types.iter().map(|t| t.share).sum();
    if cfg.types.iter().any(|t| !(t.share >= 0.0 && t.share <= 1.0)) {
        report.push("type shares must lie in [0, 1]");
    }
    if !cfg.types.is_empty() && (share_sum - 1.0).abs() > ROW_SUM_TOL {
        report.push(format!("type shares must sum to 1 (got {share_sum})"));
    }
    let n_pairs = n_r * n_u;
    for t in &cfg.types {
        let tag = &t.name;
        if t.transitions.len() != n_pairs || t.transitions.iter().any(|row| row.len() != n_pairs)
        {
            report.push(format!(
                "type {tag}: transition matrix must be {n_pairs} x {n_pairs}"
            ));
            continue;
        }
        for (row_idx, row) in t.transitions.iter().enumerate() {
            let r = row_idx / n_u.max(1);
            let u = row_idx % n_u.max(1);
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                report.push(format!("type {tag}: row ({r},{u}) has invalid probabilities"));
                continue;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                report.push(format!(
                    "type {tag}: row ({r},{u}) must sum to 1 (got {sum})"
                ));
            }
            let next_r = (r + 1) % n_r;
            let leak: f64 = row
                .iter()
                .enumerate()
                .filter(|(col, _)| col / n_u != next_r)
                .map(|(_, p)| p)
                .sum();
            if leak > 0.0 {
                report.push(format!(
                    "type {tag}: row ({r},{u}) must move all mass to resource {next_r}"
                ));
            }
        }
    }

    report
}

/// Maximum bid for resource `r`: `floor(sum_r' chi[r][r'] * k[r'])`.
pub fn max_bid(r: usize, karma: &[u32], chi: &ExchangeMatrix) -> u32 {
    let total: f64 = karma
        .iter()
        .enumerate()
        .map(|(src, &k)| chi.rate(r, src) * k as f64)
        .sum();
    (total + INTEGER_SNAP).floor() as u32
}

/// A bid: either abstain (`¬`) or a nonnegative karma amount.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bid {
    Abstain,
    Amount(u32),
}

impl Bid {
    /// Position of the bid inside an action list (`¬` first, then 0, 1, ...).
    #[inline]
    pub fn action_index(self) -> usize {
        match self {
            Bid::Abstain => 0,
            Bid::Amount(b) => b as usize + 1,
        }
    }

    #[inline]
    pub fn from_action_index(idx: usize) -> Self {
        if idx == 0 {
            Bid::Abstain
        } else {
            Bid::Amount((idx - 1) as u32)
        }
    }
}

impl fmt::Display for Bid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bid::Abstain => f.write_str("none"),
            Bid::Amount(b) => write!(f, "{b}"),
        }
    }
}

/// Enumeration of states `x = [r, u, K]` and of the bids available in each.
///
/// State index is `(r * n_u + u) * n_k + k_idx`, where `k_idx` is the
/// mixed-radix index of the karma vector with account 0 varying fastest.
/// Per-state action lists are laid out contiguously; see [`StateSpace::action_range`].
#[derive(Debug, Clone)]
pub struct StateSpace {
    n_resources: usize,
    n_urgency: usize,
    n_karma: usize,
    radix: Vec<usize>,
    karma_vectors: Vec<u32>,
    max_bids: Vec<u32>,
    action_offsets: Vec<usize>,
}

impl StateSpace {
    pub fn n_resources(&self) -> usize {
        self.n_resources
    }

    pub fn n_urgency(&self) -> usize {
        self.n_urgency
    }

    /// Number of karma vectors `prod_r (k^max[r] + 1)`.
    pub fn n_karma(&self) -> usize {
        self.n_karma
    }

    pub fn n_states(&self) -> usize {
        self.n_resources * self.n_urgency * self.n_karma
    }

    /// Number of private states `(u, K)` per resource.
    pub fn block_len(&self) -> usize {
        self.n_urgency * self.n_karma
    }

    pub fn n_actions_total(&self) -> usize {
        *self.action_offsets.last().unwrap_or(&0)
    }

    #[inline]
    pub fn state_index(&self, r: usize, u: usize, k_idx: usize) -> usize {
        (r * self.n_urgency + u) * self.n_karma + k_idx
    }

    #[inline]
    pub fn decompose(&self, state: usize) -> (usize, usize, usize) {
        let k_idx = state % self.n_karma;
        let ru = state / self.n_karma;
        (ru / self.n_urgency, ru % self.n_urgency, k_idx)
    }

    #[inline]
    pub fn karma(&self, k_idx: usize) -> &[u32] {
        &self.karma_vectors[k_idx * self.n_resources..(k_idx + 1) * self.n_resources]
    }

    pub fn karma_index(&self, karma: &[u32]) -> Option<usize> {
        if karma.len() != self.n_resources {
            return None;
        }
        let mut idx = 0;
        let mut stride = 1;
        for (r, &k) in karma.iter().enumerate() {
            if k as usize >= self.radix[r] {
                return None;
            }
            idx += k as usize * stride;
            stride *= self.radix[r];
        }
        Some(idx)
    }

    /// Index offset between karma vectors differing by one unit in account `r`.
    #[inline]
    pub fn karma_stride(&self, r: usize) -> usize {
        self.radix[..r].iter().product()
    }

    pub fn karma_max(&self, r: usize) -> u32 {
        (self.radix[r] - 1) as u32
    }

    #[inline]
    pub fn max_bid(&self, r: usize, k_idx: usize) -> u32 {
        self.max_bids[r * self.n_karma + k_idx]
    }

    /// Largest bid available for resource `r` in any state.
    pub fn max_bid_overall(&self, r: usize) -> u32 {
        self.max_bids[r * self.n_karma..(r + 1) * self.n_karma]
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
    }

    /// Range of the state's actions inside a flat per-action vector.
    #[inline]
    pub fn action_range(&self, state: usize) -> std::ops::Range<usize> {
        self.action_offsets[state]..self.action_offsets[state + 1]
    }

    #[inline]
    pub fn n_actions(&self, state: usize) -> usize {
        self.action_offsets[state + 1] - self.action_offsets[state]
    }

    pub fn bids(&self, state: usize) -> impl Iterator<Item = Bid> {
        (0..self.n_actions(state)).map(Bid::from_action_index)
    }
}

/// Enumerates every state of the economy, rejecting configurations whose
/// per-type state count exceeds the budget.
pub fn build_state_space(cfg: &EconomyConfig) -> Result<StateSpace> {
    let n_resources = cfg.n_resources();
    let n_urgency = cfg.n_urgency();
    let radix: Vec<usize> = cfg
        .resources
        .iter()
        .map(|r| r.karma_max as usize + 1)
        .collect();
    let budget = cfg.state_budget.unwrap_or(DEFAULT_STATE_BUDGET);
    let n_karma = radix
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or(Error::CapacityOverflow { states: usize::MAX, budget })?;
    let n_states = n_karma
        .checked_mul(n_resources * n_urgency)
        .ok_or(Error::CapacityOverflow { states: usize::MAX, budget })?;
    if n_states > budget {
        return Err(Error::CapacityOverflow { states: n_states, budget });
    }

    let mut karma_vectors = Vec::with_capacity(n_karma * n_resources);
    let mut cur = vec![0u32; n_resources];
    for _ in 0..n_karma {
        karma_vectors.extend_from_slice(&cur);
        for (r, k) in cur.iter_mut().enumerate() {
            *k += 1;
            if (*k as usize) < radix[r] {
                break;
            }
            *k = 0;
        }
    }

    let mut max_bids = Vec::with_capacity(n_resources * n_karma);
    for r in 0..n_resources {
        for k_idx in 0..n_karma {
            let karma = &karma_vectors[k_idx * n_resources..(k_idx + 1) * n_resources];
            max_bids.push(max_bid(r, karma, &cfg.exchange));
        }
    }

    let mut action_offsets = Vec::with_capacity(n_states + 1);
    action_offsets.push(0);
    let mut acc = 0usize;
    for r in 0..n_resources {
        for _u in 0..n_urgency {
            for k_idx in 0..n_karma {
                acc += max_bids[r * n_karma + k_idx] as usize + 2;
                action_offsets.push(acc);
            }
        }
    }

    Ok(StateSpace {
        n_resources,
        n_urgency,
        n_karma,
        radix,
        karma_vectors,
        max_bids,
        action_offsets,
    })
}
