//! Finite-population simulation of the karma protocol.
//!
//! Agents follow a fixed policy. Priority goes to the top `floor(s^pr N)`
//! bidders with uniform random tie-breaking at the marginal bid, payments
//! and redistribution shares are sampled integers, and the capped overflow
//! is re-offered to unsaturated recipients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mean_field::{pay_priority, urgency_marginals, SocialState};
use crate::model::{
    build_state_space, EconomyConfig, ExchangeRegime, RedistributionRule, StateSpace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSettings {
    pub agents: usize,
    /// Days recorded after the burn-in.
    pub days: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Number of batches for batch-means standard errors.
    pub batches: usize,
    pub record_daily: bool,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        SimulationSettings {
            agents: 10_000,
            days: 10_000,
            burn_in: 1_000,
            seed: 0,
            batches: 50,
            record_daily: false,
        }
    }
}

/// Agents of the simulated population; all agents visit resources in the
/// same order, so the current resource is shared.
#[derive(Debug, Clone)]
pub struct Population {
    pub types: Vec<usize>,
    pub urgency: Vec<usize>,
    /// Index into the state space's karma vectors.
    pub karma: Vec<usize>,
    pub day: usize,
    rng: ChaCha8Rng,
}

impl Population {
    /// Types are assigned in blocks by share, karma starts at the
    /// endowment, urgency is drawn from the chain's stationary marginal at
    /// the first resource.
    pub fn new(cfg: &EconomyConfig, space: &StateSpace, agents: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut types = Vec::with_capacity(agents);
        let mut cumulative = 0.0;
        for (tau, t) in cfg.types.iter().enumerate() {
            cumulative += t.share;
            let until = if tau + 1 == cfg.n_types() {
                agents
            } else {
                (cumulative * agents as f64).round() as usize
            };
            while types.len() < until {
                types.push(tau);
            }
        }
        let marginals: Vec<Vec<f64>> = (0..cfg.n_types())
            .map(|tau| urgency_marginals(cfg, tau).swap_remove(0))
            .collect();
        let urgency = types
            .iter()
            .map(|&tau| sample_index(&marginals[tau], rng.gen()))
            .collect();
        let endowment: Vec<u32> = cfg.resources.iter().map(|r| r.karma_mean).collect();
        let k0 = space.karma_index(&endowment).expect("endowment within bounds");
        Population {
            types,
            urgency,
            karma: vec![k0; agents],
            day: 0,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// Sum of each account over all agents.
    pub fn account_totals(&self, space: &StateSpace) -> Vec<u64> {
        let mut totals = vec![0u64; space.n_resources()];
        for &k in &self.karma {
            for (t, &v) in totals.iter_mut().zip(space.karma(k)) {
                *t += v as u64;
            }
        }
        totals
    }
}

fn sample_index(weights: &[f64], draw: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if draw < acc {
            return i;
        }
    }
    last
}

/// Mean with batch-means standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_batches(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// Whether `target` lies within `k` standard errors, allowing one
    /// observation of resolution `slack`.
    pub fn covers(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + slack
    }
}

/// One resource step of one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRow {
    pub day: usize,
    pub resource: usize,
    pub delay: f64,
    pub priority_grants: usize,
    pub paid: u64,
    pub lost: u64,
    pub mean_payoff: f64,
}

impl DayRow {
    pub const HEADER: &'static str = "day,resource,delay,priority_grants,paid,lost,mean_payoff";

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{:.6}",
            self.day, self.resource, self.delay, self.priority_grants, self.paid, self.lost, self.mean_payoff
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationStats {
    pub seed: u64,
    pub agents: usize,
    pub days: usize,
    pub burn_in: usize,
    pub payoff_endogenous: Vec<Estimate>,
    pub payoff_exogenous: Vec<Estimate>,
    pub delay: Vec<Estimate>,
    /// Per resource, action-indexed (entry 0 is abstain).
    pub bid_distribution: Vec<Vec<Estimate>>,
    /// Per resource, action-indexed share of bidders granted priority;
    /// `None` for actions never bid in some batch.
    pub priority_rate: Vec<Vec<Option<Estimate>>>,
    pub max_priority_grants: Vec<usize>,
    /// Resource steps in which redistribution hit every recipient's cap.
    pub saturation_events: usize,
    pub karma_lost: u64,
    /// Steps that broke the account-sum invariant without a saturation event.
    pub conservation_violations: usize,
    /// Whether account sums were checked (no exchange or unit exchange).
    pub conservation_checked: bool,
    pub daily: Vec<DayRow>,
}

impl SimulationStats {
    /// Delimited per-day rows preceded by a header carrying the seed.
    pub fn daily_csv(&self) -> String {
        let mut out = format!("# seed={} agents={}\n{}\n", self.seed, self.agents, DayRow::HEADER);
        for row in &self.daily {
            out.push_str(&row.to_line());
            out.push('\n');
        }
        out
    }
}

struct Accumulator {
    payoff: Vec<f64>,
    steps: Vec<f64>,
    active: Vec<f64>,
    delay: Vec<f64>,
    bids: Vec<Vec<f64>>,
    wins: Vec<Vec<f64>>,
    bid_totals: Vec<Vec<f64>>,
}

impl Accumulator {
    fn new(n_types: usize, space: &StateSpace) -> Self {
        let n_r = space.n_resources();
        Accumulator {
            payoff: vec![0.0; n_types],
            steps: vec![0.0; n_types],
            active: vec![0.0; n_types],
            delay: vec![0.0; n_r],
            bids: (0..n_r)
                .map(|r| vec![0.0; space.max_bid_overall(r) as usize + 2])
                .collect(),
            wins: (0..n_r)
                .map(|r| vec![0.0; space.max_bid_overall(r) as usize + 2])
                .collect(),
            bid_totals: (0..n_r)
                .map(|r| vec![0.0; space.max_bid_overall(r) as usize + 2])
                .collect(),
        }
    }
}

/// Runs the protocol for `burn_in + days` days under the policy in `social`.
pub fn run_simulation(
    cfg: &EconomyConfig,
    social: &SocialState,
    settings: &SimulationSettings,
) -> Result<SimulationStats> {
    let space = build_state_space(cfg)?;
    if social.pi.len() != cfg.n_types() {
        return Err(Error::Shape("policy covers a different number of types".into()));
    }
    for pi in &social.pi {
        if pi.len() != space.n_actions_total() {
            return Err(Error::Shape("policy length does not match the state space".into()));
        }
    }
    let mut pop = Population::new(cfg, &space, settings.agents, settings.seed);
    let batches = settings.batches.clamp(1, settings.days.max(1));
    let batch_len = (settings.days / batches).max(1);
    let n_r = space.n_resources();
    let n_types = cfg.n_types();
    let regime = cfg.exchange.regime();
    let conservation_checked = matches!(regime, ExchangeRegime::NoExchange | ExchangeRegime::Unit);

    let mut batch_stats: Vec<Accumulator> = Vec::new();
    let mut acc = Accumulator::new(n_types, &space);
    let mut max_grants = vec![0usize; n_r];
    let mut saturation_events = 0;
    let mut karma_lost = 0u64;
    let mut violations = 0;
    let mut daily = Vec::new();
    let mut scratch = StepScratch::default();

    for day in 0..settings.burn_in + settings.days {
        let recording = day >= settings.burn_in;
        for r in 0..n_r {
            let before = conservation_checked.then(|| pop.account_totals(&space));
            let out = step(cfg, &space, social, &mut pop, r, &mut scratch)?;
            max_grants[r] = max_grants[r].max(out.grants);
            if out.lost > 0 {
                saturation_events += 1;
                karma_lost += out.lost;
            } else if let Some(before) = before {
                let after = pop.account_totals(&space);
                let ok = match regime {
                    ExchangeRegime::NoExchange => before == after,
                    _ => before.iter().sum::<u64>() == after.iter().sum::<u64>(),
                };
                if !ok {
                    violations += 1;
                }
            }
            if recording {
                for tau in 0..n_types {
                    acc.payoff[tau] += out.payoff[tau];
                    acc.steps[tau] += out.steps[tau];
                    acc.active[tau] += out.active[tau];
                }
                acc.delay[r] += out.delay;
                for (a, c) in out.bid_counts.iter().enumerate() {
                    acc.bids[r][a] += *c as f64 / pop.len() as f64;
                    acc.bid_totals[r][a] += *c as f64;
                    acc.wins[r][a] += out.win_counts[a] as f64;
                }
                if settings.record_daily {
                    let total_steps: f64 = out.steps.iter().sum();
                    daily.push(DayRow {
                        day: pop.day,
                        resource: r,
                        delay: out.delay,
                        priority_grants: out.grants,
                        paid: out.paid,
                        lost: out.lost,
                        mean_payoff: out.payoff.iter().sum::<f64>() / total_steps.max(1.0),
                    });
                }
            }
        }
        pop.day += 1;
        if recording {
            let recorded = day + 1 - settings.burn_in;
            if recorded % batch_len == 0 && batch_stats.len() < batches {
                batch_stats.push(std::mem::replace(&mut acc, Accumulator::new(n_types, &space)));
            }
        }
    }

    let per_batch = |f: &dyn Fn(&Accumulator) -> f64| -> Estimate {
        let values: Vec<f64> = batch_stats.iter().map(f).collect();
        Estimate::from_batches(&values)
    };
    let payoff_endogenous = (0..n_types)
        .map(|t| per_batch(&|a: &Accumulator| a.payoff[t] / a.steps[t].max(1.0)))
        .collect();
    let payoff_exogenous = (0..n_types)
        .map(|t| per_batch(&|a: &Accumulator| a.payoff[t] / a.active[t].max(1.0)))
        .collect();
    let delay = (0..n_r)
        .map(|r| per_batch(&|a: &Accumulator| a.delay[r] / batch_len as f64))
        .collect();
    let bid_distribution = (0..n_r)
        .map(|r| {
            (0..acc.bids[r].len())
                .map(|b| per_batch(&|a: &Accumulator| a.bids[r][b] / batch_len as f64))
                .collect()
        })
        .collect();

    let priority_rate = (0..n_r)
        .map(|r| {
            (0..acc.bids[r].len())
                .map(|b| {
                    if batch_stats.iter().any(|a| a.bid_totals[r][b] == 0.0) {
                        return None;
                    }
                    Some(per_batch(&|a: &Accumulator| a.wins[r][b] / a.bid_totals[r][b]))
                })
                .collect()
        })
        .collect();

    Ok(SimulationStats {
        seed: settings.seed,
        agents: settings.agents,
        days: settings.days,
        burn_in: settings.burn_in,
        payoff_endogenous,
        payoff_exogenous,
        delay,
        bid_distribution,
        priority_rate,
        max_priority_grants: max_grants,
        saturation_events,
        karma_lost,
        conservation_violations: violations,
        conservation_checked,
        daily,
    })
}

#[derive(Default)]
struct StepScratch {
    actions: Vec<usize>,
    buckets: Vec<Vec<usize>>,
    priority: Vec<bool>,
    recipients: Vec<usize>,
}

struct StepOutcome {
    grants: usize,
    paid: u64,
    lost: u64,
    delay: f64,
    payoff: Vec<f64>,
    steps: Vec<f64>,
    active: Vec<f64>,
    bid_counts: Vec<usize>,
    win_counts: Vec<usize>,
}

/// One resource competition for the whole population, followed by the
/// transition to the next resource.
fn step(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    pop: &mut Population,
    r: usize,
    scratch: &mut StepScratch,
) -> Result<StepOutcome> {
    let n = pop.len();
    let res = &cfg.resources[r];
    let n_actions = space.max_bid_overall(r) as usize + 2;

    // Bids.
    scratch.actions.clear();
    for i in 0..n {
        let tau = pop.types[i];
        let x = space.state_index(r, pop.urgency[i], pop.karma[i]);
        let row = &social.pi[tau][space.action_range(x)];
        let a = sample_index(row, pop.rng.gen());
        if row[a] <= 0.0 {
            return Err(Error::InfeasibleBid {
                state: x,
                bid: a.saturating_sub(1) as u32,
            });
        }
        scratch.actions.push(a);
    }
    let mut bid_counts = vec![0usize; n_actions];
    for &a in &scratch.actions {
        bid_counts[a] += 1;
    }

    // Priority to the highest bids, random tie-breaking at the margin.
    let slots = (res.priority_capacity * n as f64 + 1e-9).floor() as usize;
    scratch.buckets.resize(n_actions, Vec::new());
    scratch.buckets.iter_mut().for_each(Vec::clear);
    for (i, &a) in scratch.actions.iter().enumerate() {
        if a > 0 {
            scratch.buckets[a].push(i);
        }
    }
    scratch.priority.clear();
    scratch.priority.resize(n, false);
    let mut grants = 0;
    let mut win_counts = vec![0usize; n_actions];
    for a in (1..n_actions).rev() {
        if grants >= slots {
            break;
        }
        let bucket = &mut scratch.buckets[a];
        let take = (slots - grants).min(bucket.len());
        let (winners, _) = bucket.partial_shuffle(&mut pop.rng, take);
        for &i in winners.iter() {
            scratch.priority[i] = true;
        }
        win_counts[a] = take;
        grants += take;
    }

    // Congestion among active users without priority.
    let general = scratch
        .actions
        .iter()
        .zip(&scratch.priority)
        .filter(|(&a, &p)| a > 0 && !p)
        .count();
    let s_gp = res.general_capacity();
    let delay = ((general as f64 / n as f64 - s_gp) / s_gp).max(0.0);

    // Payoffs.
    let n_types = cfg.n_types();
    let mut payoff = vec![0.0; n_types];
    let mut steps = vec![0.0; n_types];
    let mut active = vec![0.0; n_types];
    for i in 0..n {
        let tau = pop.types[i];
        steps[tau] += 1.0;
        let a = scratch.actions[i];
        if a == 0 {
            continue;
        }
        active[tau] += 1.0;
        let u = cfg.urgency_levels[pop.urgency[i]];
        payoff[tau] += if scratch.priority[i] {
            u * cfg.nominal_payoff
        } else if u > 0.0 {
            u * (cfg.nominal_payoff - delay)
        } else {
            -delay
        };
    }

    // Payments.
    let mut paid = 0u64;
    for i in 0..n {
        if !scratch.priority[i] {
            continue;
        }
        let b = (scratch.actions[i] - 1) as u32;
        paid += b as u64;
        let outcome = pay_priority(cfg, space, r, pop.karma[i], b);
        let draw: f64 = pop.rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for (k, p) in outcome.iter() {
            acc += p;
            chosen = Some(k);
            if draw < acc {
                break;
            }
        }
        pop.karma[i] = chosen.expect("payment outcome");
    }

    // Redistribution in integer units.
    scratch.recipients.clear();
    for i in 0..n {
        let eligible = match cfg.redistribution {
            RedistributionRule::ToAll => true,
            RedistributionRule::ToActive => scratch.actions[i] > 0,
        };
        if eligible {
            scratch.recipients.push(i);
        }
    }
    let lost = redistribute(space, r, &mut pop.karma, &mut scratch.recipients, paid, &mut pop.rng);

    // Urgency and resource transition.
    let n_r = space.n_resources();
    let r_next = (r + 1) % n_r;
    let n_u = space.n_urgency();
    let mut weights = vec![0.0; n_u];
    for i in 0..n {
        let tau = pop.types[i];
        for (u_next, w) in weights.iter_mut().enumerate() {
            *w = cfg.phi(tau, r, pop.urgency[i], r_next, u_next);
        }
        pop.urgency[i] = sample_index(&weights, pop.rng.gen());
    }

    Ok(StepOutcome {
        grants,
        paid,
        lost,
        delay,
        payoff,
        steps,
        active,
        bid_counts,
        win_counts,
    })
}

/// Shares `total` units of account `r` among `recipients`: `floor(T / M)`
/// each plus one extra unit for `T mod M` distinct random recipients.
/// Units that would exceed the cap are re-offered to unsaturated
/// recipients; returns the units nobody could absorb.
fn redistribute(
    space: &StateSpace,
    r: usize,
    karma: &mut [usize],
    recipients: &mut Vec<usize>,
    total: u64,
    rng: &mut ChaCha8Rng,
) -> u64 {
    let k_max = space.karma_max(r) as u64;
    let stride = space.karma_stride(r);
    let mut remaining = total;
    while remaining > 0 {
        recipients.retain(|&i| (space.karma(karma[i])[r] as u64) < k_max);
        if recipients.is_empty() {
            return remaining;
        }
        let m = recipients.len() as u64;
        let each = remaining / m;
        let extra = (remaining % m) as usize;
        // The `extra` randomly chosen recipients end up at the tail.
        recipients.partial_shuffle(rng, extra);
        let lucky_from = recipients.len() - extra;
        let mut overflow = 0u64;
        for (j, &i) in recipients.iter().enumerate() {
            let share = each + u64::from(j >= lucky_from);
            let k = space.karma(karma[i])[r] as u64;
            let credited = share.min(k_max - k);
            overflow += share - credited;
            karma[i] += credited as usize * stride;
        }
        remaining = overflow;
    }
    0
}
