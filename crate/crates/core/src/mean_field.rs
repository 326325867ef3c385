//! Population-level quantities induced by a social state.
//!
//! Given the distribution of private states and the bidding policy of every
//! type, this module derives the bid distribution, the outcome probabilities
//! of the priority auction, the congestion delay, the average payments, and
//! the resulting karma and state transition kernels. Fractional karma amounts
//! are handled by probabilistic rounding, represented exactly as two-point
//! distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bid, EconomyConfig, RedistributionRule, SaturationRule, StateSpace, INTEGER_SNAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Priority,
    General,
    Inactive,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Priority, Outcome::General, Outcome::Inactive];
}

/// Distribution of private states `d` and bidding policy `pi`, per type.
///
/// `d[tau]` is indexed by state; each resource block of length
/// `n_urgency * n_karma` is a conditional distribution summing to one.
/// `pi[tau]` is indexed by flat action position (see `StateSpace::action_range`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocialState {
    pub d: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
}

impl SocialState {
    /// Karma point mass at the endowment, urgency at the stationary
    /// marginal of each type's chain, uniform policy over feasible bids.
    pub fn initial(cfg: &EconomyConfig, space: &StateSpace) -> Self {
        let endowment: Vec<u32> = cfg.resources.iter().map(|r| r.karma_mean).collect();
        let k_idx = space
            .karma_index(&endowment)
            .expect("endowment within karma bounds");
        let d = (0..cfg.n_types())
            .map(|tau| {
                let marginal = urgency_marginals(cfg, tau);
                let mut d = vec![0.0; space.n_states()];
                for r in 0..space.n_resources() {
                    for u in 0..space.n_urgency() {
                        d[space.state_index(r, u, k_idx)] = marginal[r][u];
                    }
                }
                d
            })
            .collect();
        let pi = (0..cfg.n_types()).map(|_| uniform_policy(space)).collect();
        SocialState { d, pi }
    }

    /// Checks normalization of `d` per resource block and of `pi` per state.
    pub fn check(&self, space: &StateSpace, tol: f64) -> Result<()> {
        if self.d.len() != self.pi.len() {
            return Err(Error::Shape("d and pi cover different type counts".into()));
        }
        for (tau, (d, pi)) in self.d.iter().zip(&self.pi).enumerate() {
            if d.len() != space.n_states() || pi.len() != space.n_actions_total() {
                return Err(Error::Shape(format!("type {tau}: vector length mismatch")));
            }
            for (r, block) in d.chunks(space.block_len()).enumerate() {
                let s: f64 = block.iter().sum();
                if (s - 1.0).abs() > tol || block.iter().any(|&p| p < -tol) {
                    return Err(Error::Shape(format!(
                        "type {tau}: d[.|{r}] is not a distribution (sum {s})"
                    )));
                }
            }
            for x in 0..space.n_states() {
                let row = &pi[space.action_range(x)];
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > tol || row.iter().any(|&p| p < -tol) {
                    return Err(Error::Shape(format!(
                        "type {tau}: pi[.|{x}] is not a distribution (sum {s})"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn uniform_policy(space: &StateSpace) -> Vec<f64> {
    let mut pi = vec![0.0; space.n_actions_total()];
    for x in 0..space.n_states() {
        let range = space.action_range(x);
        let p = 1.0 / range.len() as f64;
        pi[range].iter_mut().for_each(|v| *v = p);
    }
    pi
}

/// Stationary conditional urgency distribution `P[u | r]` of a type's
/// resource-urgency chain, ignoring karma.
///
/// Computed by power iteration on the lazy day-composite chain, which has
/// the same stationary law and is aperiodic.
pub fn urgency_marginals(cfg: &EconomyConfig, tau: usize) -> Vec<Vec<f64>> {
    let n_r = cfg.n_resources();
    let n_u = cfg.n_urgency();
    let step = |from: &[f64], r: usize| -> Vec<f64> {
        let r_next = (r + 1) % n_r;
        let mut to = vec![0.0; n_u];
        for (u, &m) in from.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (un, t) in to.iter_mut().enumerate() {
                *t += m * cfg.phi(tau, r, u, r_next, un);
            }
        }
        to
    };
    let mut first = vec![1.0 / n_u as f64; n_u];
    for _ in 0..100_000 {
        let mut cur = first.clone();
        for r in 0..n_r {
            cur = step(&cur, r);
        }
        let next: Vec<f64> = first
            .iter()
            .zip(&cur)
            .map(|(a, b)| 0.5 * a + 0.5 * b)
            .collect();
        let diff: f64 = next.iter().zip(&first).map(|(a, b)| (a - b).abs()).sum();
        first = next;
        if diff < 1e-15 {
            break;
        }
    }
    let mut out = Vec::with_capacity(n_r);
    out.push(first);
    for r in 0..n_r - 1 {
        let next = step(&out[r], r);
        out.push(next);
    }
    out
}

/// Outcome probabilities `psi[o | r, b]` for every action of one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    /// Action-indexed; entry 0 (abstain) is always 0.
    pub priority: Vec<f64>,
    /// Action-indexed; entry 0 (abstain) is always 0.
    pub general: Vec<f64>,
}

impl OutcomeTable {
    #[inline]
    pub fn prob(&self, outcome: Outcome, action: usize) -> f64 {
        match outcome {
            Outcome::Priority => self.priority[action],
            Outcome::General => self.general[action],
            Outcome::Inactive => {
                if action == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Field quantities for a single resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceField {
    /// Bid distribution `nu[b | r]`, action-indexed (entry 0 is abstain).
    pub nu: Vec<f64>,
    pub psi: OutcomeTable,
    pub delay: f64,
    pub avg_payment: f64,
    /// Payment per active user; zero (and flagged) when nobody is active.
    pub active_payment: f64,
    pub active_payment_defined: bool,
    /// Expected karma each non-saturated recipient gains after the
    /// redistribution has been raised to absorb saturated recipients.
    pub gain: f64,
    /// Expected karma that would exceed `k^max` under the nominal share.
    pub saturation_surplus: f64,
    /// Expected karma that cannot be redistributed because every recipient
    /// is saturated.
    pub lost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldQuantities {
    pub resources: Vec<ResourceField>,
}

impl FieldQuantities {
    pub fn delays(&self) -> Vec<f64> {
        self.resources.iter().map(|f| f.delay).collect()
    }
}

/// Share of the population bidding each action at resource `r`.
pub fn bid_distribution_at(
    space: &StateSpace,
    social: &SocialState,
    shares: &[f64],
    r: usize,
) -> Vec<f64> {
    let mut nu = vec![0.0; space.max_bid_overall(r) as usize + 2];
    let start = space.state_index(r, 0, 0);
    for (tau, &g) in shares.iter().enumerate() {
        let d = &social.d[tau];
        let pi = &social.pi[tau];
        for x in start..start + space.block_len() {
            let w = g * d[x];
            if w == 0.0 {
                continue;
            }
            for (a, &p) in pi[space.action_range(x)].iter().enumerate() {
                nu[a] += w * p;
            }
        }
    }
    nu
}

pub fn bid_distribution(space: &StateSpace, social: &SocialState, shares: &[f64]) -> Vec<Vec<f64>> {
    (0..space.n_resources())
        .map(|r| bid_distribution_at(space, social, shares, r))
        .collect()
}

/// Priority-rationing outcome probabilities for a bid distribution.
///
/// The highest bidders receive priority; at the marginal bid priority is
/// rationed proportionally, with the capacity under-allocated by `eps` so
/// that the probabilities are continuous in `nu`.
pub fn outcome_probabilities(nu: &[f64], s_pr: f64, eps: f64) -> OutcomeTable {
    let n = nu.len();
    let mut priority = vec![0.0; n];
    let mut general = vec![0.0; n];
    let mut above = 0.0;
    for a in (1..n).rev() {
        let p = if above <= s_pr - eps - nu[a] {
            1.0
        } else if above >= s_pr {
            0.0
        } else {
            ((s_pr - above) / (eps + nu[a])).clamp(0.0, 1.0)
        };
        priority[a] = p;
        general[a] = 1.0 - p;
        above += nu[a];
    }
    OutcomeTable { priority, general }
}

/// Congestion delay from general-purpose demand in excess of `s_gp`.
pub fn congestion_delay(nu: &[f64], psi: &OutcomeTable, s_gp: f64) -> f64 {
    let demand: f64 = nu.iter().zip(&psi.general).map(|(n, g)| n * g).sum();
    ((demand - s_gp) / s_gp).max(0.0)
}

pub fn immediate_payoff(urgency: f64, bid: Bid, psi_gp: f64, delay: f64, nominal: f64) -> f64 {
    match bid {
        Bid::Abstain => 0.0,
        Bid::Amount(_) if urgency > 0.0 => urgency * (nominal - psi_gp * delay),
        Bid::Amount(_) => -psi_gp * delay,
    }
}

pub fn average_payment(nu: &[f64], psi: &OutcomeTable) -> f64 {
    nu.iter()
        .zip(&psi.priority)
        .enumerate()
        .skip(1)
        .map(|(a, (n, p))| n * p * (a - 1) as f64)
        .sum()
}

/// Payment per active user, `avg / (1 - nu[abstain])`; returns `(0, false)`
/// when nobody is active.
pub fn active_payment(nu: &[f64], avg: f64) -> (f64, bool) {
    let active = 1.0 - nu[0];
    if active <= 0.0 {
        (0.0, false)
    } else {
        (avg / active, true)
    }
}

/// Uniform per-recipient gain that redistributes `total` karma among
/// recipients whose balances have distribution `mass[k]` (unnormalized),
/// capping each balance at `k_max`.
///
/// A recipient at `k` with gain `a` ends at `min(k + a, k_max)` in
/// expectation (exact under probabilistic rounding since `k_max` is an
/// integer). Returns `(gain, lost)` where `lost` is the expected karma that
/// the capped recipients do not absorb.
pub fn redistribution_gain(mass: &[f64], total: f64, k_max: u32, rule: SaturationRule) -> (f64, f64) {
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let recipients: f64 = mass.iter().sum();
    if recipients <= 0.0 {
        return (0.0, total);
    }
    let absorbed = |a: f64| -> f64 {
        mass.iter()
            .enumerate()
            .map(|(k, m)| m * a.min((k_max as usize - k) as f64))
            .sum()
    };
    let nominal = total / recipients;
    let gain = match rule {
        SaturationRule::WaterFilling => water_level(mass, total, k_max),
        SaturationRule::Truncate => nominal,
        SaturationRule::SinglePass => {
            let overflow = total - absorbed(nominal);
            let room: f64 = mass
                .iter()
                .enumerate()
                .filter(|(k, _)| *k as f64 + nominal <= k_max as f64)
                .map(|(_, m)| m)
                .sum();
            if room > 0.0 {
                nominal + overflow / room
            } else {
                nominal
            }
        }
    };
    let gain = gain.min(k_max as f64);
    (gain, (total - absorbed(gain)).max(0.0))
}

/// Solves `sum_k mass[k] * min(a, k_max - k) = total` for `a`, or returns
/// `k_max` when even that cannot absorb `total`.
fn water_level(mass: &[f64], total: f64, k_max: u32) -> f64 {
    let k_max = k_max as usize;
    let mut unsaturated: f64 = mass.iter().sum();
    let mut absorbed = 0.0;
    for c in 0..=k_max {
        let k = k_max - c;
        if unsaturated > 0.0 {
            let a = (total - absorbed) / unsaturated;
            if a <= c as f64 {
                return a;
            }
        }
        absorbed += mass[k] * c as f64;
        unsaturated -= mass[k];
    }
    k_max as f64
}

/// Field quantities of resource `r` under the given social state.
pub fn compute_resource_field(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    r: usize,
) -> ResourceField {
    let res = &cfg.resources[r];
    let shares = cfg.shares();
    let nu = bid_distribution_at(space, social, &shares, r);
    let psi = outcome_probabilities(&nu, res.priority_capacity, cfg.epsilon);
    let delay = congestion_delay(&nu, &psi, res.general_capacity());
    let avg_payment = average_payment(&nu, &psi);
    let (active_payment, active_payment_defined) = active_payment(&nu, avg_payment);

    // Post-payment balance distribution in account r among recipients.
    let k_max = res.karma_max;
    let mut recipients = vec![0.0; k_max as usize + 1];
    let start = space.state_index(r, 0, 0);
    for (tau, &g) in shares.iter().enumerate() {
        let d = &social.d[tau];
        let pi = &social.pi[tau];
        for x in start..start + space.block_len() {
            let w = g * d[x];
            if w == 0.0 {
                continue;
            }
            let (_, _, k_idx) = space.decompose(x);
            let k_r = space.karma(k_idx)[r];
            for (a, &p) in pi[space.action_range(x)].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let m = w * p;
                if a == 0 {
                    if cfg.redistribution == RedistributionRule::ToAll {
                        recipients[k_r as usize] += m;
                    }
                    continue;
                }
                let b = (a - 1) as u32;
                let p_pr = psi.priority[a];
                recipients[k_r.saturating_sub(b) as usize] += m * p_pr;
                recipients[k_r as usize] += m * (1.0 - p_pr);
            }
        }
    }
    let recipient_mass: f64 = recipients.iter().sum();
    let (gain, lost) = redistribution_gain(&recipients, avg_payment, k_max, cfg.saturation);
    let nominal = if recipient_mass > 0.0 {
        avg_payment / recipient_mass
    } else {
        0.0
    };
    let saturation_surplus = recipients
        .iter()
        .enumerate()
        .map(|(k, m)| m * (k as f64 + nominal - k_max as f64).max(0.0))
        .sum();

    ResourceField {
        nu,
        psi,
        delay,
        avg_payment,
        active_payment,
        active_payment_defined,
        gain,
        saturation_surplus,
        lost,
    }
}

pub fn compute_field(cfg: &EconomyConfig, space: &StateSpace, social: &SocialState) -> FieldQuantities {
    FieldQuantities {
        resources: (0..space.n_resources())
            .map(|r| compute_resource_field(cfg, space, social, r))
            .collect(),
    }
}

/// Up to two weighted points; the common shape of a probabilistically
/// rounded karma update.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TwoPoint {
    pub(crate) points: [(usize, f64); 2],
    pub(crate) len: usize,
}

impl TwoPoint {
    fn one(idx: usize) -> Self {
        Self {
            points: [(idx, 1.0), (idx, 0.0)],
            len: 1,
        }
    }

    /// `lo` with probability `1 - frac`, `hi` with probability `frac`.
    fn split(lo: usize, hi: usize, frac: f64) -> Self {
        if frac <= 0.0 || lo == hi {
            Self::one(lo)
        } else {
            Self {
                points: [(lo, 1.0 - frac), (hi, frac)],
                len: 2,
            }
        }
    }

    pub(crate) fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.points[..self.len].iter().copied()
    }
}

fn snap(x: f64) -> f64 {
    let rounded = x.round();
    if (x - rounded).abs() < INTEGER_SNAP {
        rounded
    } else {
        x
    }
}

/// Post-payment karma index after winning priority with bid `b`.
///
/// The bid is debited from account `r` until depletion, then from the
/// following accounts in cyclic order at rate `1 / chi[r][j]`. A fractional
/// debit is rounded up with probability equal to its fractional part.
pub(crate) fn pay_priority(
    cfg: &EconomyConfig,
    space: &StateSpace,
    r: usize,
    k_idx: usize,
    b: u32,
) -> TwoPoint {
    let karma = space.karma(k_idx);
    let k_r = karma[r];
    if b <= k_r {
        return TwoPoint::one(k_idx - b as usize * space.karma_stride(r));
    }
    let n_r = space.n_resources();
    let mut idx = k_idx - k_r as usize * space.karma_stride(r);
    let mut remaining = (b - k_r) as f64;
    for step in 1..n_r {
        let j = (r + step) % n_r;
        let chi = cfg.exchange.rate(r, j);
        let k_j = karma[j];
        if chi <= 0.0 || k_j == 0 {
            continue;
        }
        let stride = space.karma_stride(j);
        let debit = snap(remaining / chi).min(k_j as f64);
        if debit < k_j as f64 || remaining <= chi * k_j as f64 + INTEGER_SNAP {
            let lo = debit.floor();
            let frac = debit - lo;
            let lo = lo as usize;
            let hi = (lo + 1).min(k_j as usize);
            return TwoPoint::split(idx - lo * stride, idx - hi * stride, frac);
        }
        idx -= k_j as usize * stride;
        remaining -= chi * k_j as f64;
    }
    assert!(
        remaining <= INTEGER_SNAP,
        "bid {b} exceeds the convertible balance {karma:?}"
    );
    TwoPoint::one(idx)
}

/// Post-redistribution karma index for a recipient at `k_hat`.
#[inline]
pub(crate) fn receive(space: &StateSpace, r: usize, k_hat: usize, gain: f64) -> TwoPoint {
    if gain <= 0.0 {
        return TwoPoint::one(k_hat);
    }
    let k = space.karma(k_hat)[r] as f64;
    let k_max = space.karma_max(r) as f64;
    let lo = gain.floor();
    let frac = gain - lo;
    let stride = space.karma_stride(r);
    let to_lo = (k + lo).min(k_max) - k;
    let to_hi = (k + lo + 1.0).min(k_max) - k;
    TwoPoint::split(
        k_hat + to_lo as usize * stride,
        k_hat + to_hi as usize * stride,
        frac,
    )
}

/// Visits `(next_karma_index, probability)` for a user at `(r, k_idx)`
/// taking `action`, summed over outcomes, payments and redistribution.
#[inline]
pub(crate) fn for_each_next_karma(
    cfg: &EconomyConfig,
    space: &StateSpace,
    field: &ResourceField,
    r: usize,
    k_idx: usize,
    action: usize,
    mut f: impl FnMut(usize, f64),
) {
    let gain = field.gain;
    if action == 0 {
        match cfg.redistribution {
            RedistributionRule::ToActive => f(k_idx, 1.0),
            RedistributionRule::ToAll => {
                for (k, p) in receive(space, r, k_idx, gain).iter() {
                    f(k, p);
                }
            }
        }
        return;
    }
    let p_pr = field.psi.priority[action];
    let p_gp = 1.0 - p_pr;
    if p_pr > 0.0 {
        let paid = pay_priority(cfg, space, r, k_idx, (action - 1) as u32);
        for (k_hat, q) in paid.iter() {
            for (k, p) in receive(space, r, k_hat, gain).iter() {
                f(k, p_pr * q * p);
            }
        }
    }
    if p_gp > 0.0 {
        for (k, p) in receive(space, r, k_idx, gain).iter() {
            f(k, p_gp * p);
        }
    }
}

fn merge(mut points: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    points.sort_by_key(|&(k, _)| k);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(points.len());
    for (k, p) in points {
        match out.last_mut() {
            Some(last) if last.0 == k => last.1 += p,
            _ => out.push((k, p)),
        }
    }
    out.retain(|&(_, p)| p > 0.0);
    out
}

fn to_vectors(space: &StateSpace, points: Vec<(usize, f64)>) -> Vec<(Vec<u32>, f64)> {
    merge(points)
        .into_iter()
        .map(|(k, p)| (space.karma(k).to_vec(), p))
        .collect()
}

/// Distribution of the post-payment karma vector.
pub fn payment_kernel(
    cfg: &EconomyConfig,
    space: &StateSpace,
    r: usize,
    karma: &[u32],
    bid: Bid,
    outcome: Outcome,
) -> Vec<(Vec<u32>, f64)> {
    let k_idx = space.karma_index(karma).expect("karma within bounds");
    match (outcome, bid) {
        (Outcome::Priority, Bid::Amount(b)) => {
            assert!(b <= space.max_bid(r, k_idx), "bid above the maximum bid");
            to_vectors(space, pay_priority(cfg, space, r, k_idx, b).iter().collect())
        }
        _ => vec![(karma.to_vec(), 1.0)],
    }
}

/// Distribution of the post-redistribution karma vector, given the
/// post-payment vector `karma_hat` and the per-recipient `gain`.
pub fn redistribution_kernel(
    space: &StateSpace,
    rule: RedistributionRule,
    r: usize,
    karma_hat: &[u32],
    outcome: Outcome,
    gain: f64,
) -> Vec<(Vec<u32>, f64)> {
    let k_hat = space.karma_index(karma_hat).expect("karma within bounds");
    if rule == RedistributionRule::ToActive && outcome == Outcome::Inactive {
        return vec![(karma_hat.to_vec(), 1.0)];
    }
    to_vectors(space, receive(space, r, k_hat, gain).iter().collect())
}

/// Composition of the payment and redistribution kernels.
pub fn karma_kernel(
    cfg: &EconomyConfig,
    space: &StateSpace,
    field: &ResourceField,
    r: usize,
    karma: &[u32],
    bid: Bid,
    outcome: Outcome,
) -> Vec<(Vec<u32>, f64)> {
    let mut out = Vec::new();
    for (k_hat, p) in payment_kernel(cfg, space, r, karma, bid, outcome) {
        for (k_next, q) in
            redistribution_kernel(space, cfg.redistribution, r, &k_hat, outcome, field.gain)
        {
            out.push((space.karma_index(&k_next).unwrap(), p * q));
        }
    }
    to_vectors(space, out)
}

/// Distribution of the next state `(r+, u+, K+)` for a type-`tau` user in
/// `state` placing `bid`, as merged `(state_index, probability)` pairs.
pub fn state_transition(
    cfg: &EconomyConfig,
    space: &StateSpace,
    field: &FieldQuantities,
    tau: usize,
    state: usize,
    bid: Bid,
) -> Vec<(usize, f64)> {
    let (r, u, k_idx) = space.decompose(state);
    let r_next = (r + 1) % space.n_resources();
    let mut points = Vec::new();
    for_each_next_karma(
        cfg,
        space,
        &field.resources[r],
        r,
        k_idx,
        bid.action_index(),
        |k_next, p| {
            for u_next in 0..space.n_urgency() {
                let phi = cfg.phi(tau, r, u, r_next, u_next);
                if phi > 0.0 {
                    points.push((space.state_index(r_next, u_next, k_next), p * phi));
                }
            }
        },
    );
    merge(points)
}
