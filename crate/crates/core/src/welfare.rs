//! Long-run average payoffs, the uncontrolled benchmark and Nash welfare.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::expected_rewards;
use crate::mean_field::{urgency_marginals, FieldQuantities, Outcome, SocialState};
use crate::model::{EconomyConfig, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffMode {
    /// Every step counts, including abstentions.
    Endogenous,
    /// Only steps where the user bids count.
    Exogenous,
}

/// Average payoff per resource step of type `tau`.
///
/// Each conditional block `d[. | r]` carries weight one, so the endogenous
/// denominator equals the number of resources.
pub fn average_payoff(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
    tau: usize,
    mode: PayoffMode,
) -> Result<f64> {
    let rewards = expected_rewards(cfg, space, social, field, tau);
    let d = &social.d[tau];
    let pi = &social.pi[tau];
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for x in 0..space.n_states() {
        if d[x] == 0.0 {
            continue;
        }
        numerator += d[x] * rewards[x];
        denominator += match mode {
            PayoffMode::Endogenous => d[x],
            PayoffMode::Exogenous => d[x] * (1.0 - pi[space.action_range(x).start]),
        };
    }
    if denominator <= 0.0 {
        return match mode {
            PayoffMode::Endogenous => Ok(0.0),
            PayoffMode::Exogenous => Err(Error::NoActiveMass(cfg.types[tau].name.clone())),
        };
    }
    Ok(numerator / denominator)
}

/// Closed-form outcome of uncontrolled access.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    /// Congestion delay per resource.
    pub delays: Vec<f64>,
    pub endogenous: Vec<f64>,
    pub exogenous: Vec<f64>,
}

/// Every user with positive urgency takes general access and nobody else
/// shows up; delays follow from the stationary demand.
pub fn benchmark_payoffs(cfg: &EconomyConfig) -> Benchmark {
    let n_r = cfg.n_resources();
    let marginals: Vec<Vec<Vec<f64>>> = (0..cfg.n_types()).map(|t| urgency_marginals(cfg, t)).collect();
    let delays: Vec<f64> = (0..n_r)
        .map(|r| {
            let demand: f64 = cfg
                .types
                .iter()
                .zip(&marginals)
                .map(|(t, m)| t.share * (1.0 - m[r][0]))
                .sum();
            let s_gp = cfg.resources[r].total_capacity;
            ((demand - s_gp) / s_gp).max(0.0)
        })
        .collect();
    let mut endogenous = Vec::new();
    let mut exogenous = Vec::new();
    for m in &marginals {
        let mut payoff = 0.0;
        let mut active = 0.0;
        for (r, mr) in m.iter().enumerate() {
            for (u, &p) in mr.iter().enumerate().skip(1) {
                let urgency = cfg.urgency_levels[u];
                payoff += p * urgency * (cfg.nominal_payoff - delays[r]);
                active += p;
            }
        }
        endogenous.push(payoff / n_r as f64);
        exogenous.push(if active > 0.0 { payoff / active } else { 0.0 });
    }
    Benchmark {
        delays,
        endogenous,
        exogenous,
    }
}

/// `sum_tau g_tau * ln(payoff_tau - benchmark_tau)`.
pub fn nash_welfare(payoffs: &[f64], benchmark: &[f64], shares: &[f64], names: &[String]) -> Result<f64> {
    let mut total = 0.0;
    for (i, ((p, b), g)) in payoffs.iter().zip(benchmark).zip(shares).enumerate() {
        let gain = p - b;
        if !(gain > 0.0) {
            let type_name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            return Err(Error::NotDominated { type_name, gain });
        }
        total += g * gain.ln();
    }
    Ok(total)
}

/// Nash welfare from gains directly.
pub fn nash_welfare_of_gains(gains: &[f64], shares: &[f64], names: &[String]) -> Result<f64> {
    let zeros = vec![0.0; gains.len()];
    nash_welfare(gains, &zeros, shares, names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelfareReport {
    pub types: Vec<String>,
    pub endogenous: Vec<f64>,
    pub exogenous: Vec<f64>,
    pub benchmark: Benchmark,
    /// `None` when some type is not better off than under the benchmark.
    pub social_endogenous: Option<f64>,
    pub social_exogenous: Option<f64>,
}

pub fn welfare_report(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
) -> Result<WelfareReport> {
    let n = cfg.n_types();
    let endogenous = (0..n)
        .map(|t| average_payoff(cfg, space, social, field, t, PayoffMode::Endogenous))
        .collect::<Result<Vec<_>>>()?;
    let exogenous = (0..n)
        .map(|t| average_payoff(cfg, space, social, field, t, PayoffMode::Exogenous))
        .collect::<Result<Vec<_>>>()?;
    let benchmark = benchmark_payoffs(cfg);
    let names: Vec<String> = cfg.types.iter().map(|t| t.name.clone()).collect();
    let shares = cfg.shares();
    let social_endogenous = nash_welfare(&endogenous, &benchmark.endogenous, &shares, &names).ok();
    let social_exogenous = nash_welfare(&exogenous, &benchmark.exogenous, &shares, &names).ok();
    Ok(WelfareReport {
        types: names,
        endogenous,
        exogenous,
        benchmark,
        social_endogenous,
        social_exogenous,
    })
}

/// Stationary mass of one (type, urgency) cell at one resource split by outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub resource: String,
    pub type_name: String,
    pub urgency: f64,
    pub priority: f64,
    pub general: f64,
    pub inactive: f64,
}

/// Population mass receiving each outcome per resource, type and urgency.
/// Rows of one resource sum to one.
pub fn utilization(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
) -> Vec<UtilizationRow> {
    let n_u = space.n_urgency();
    let n_k = space.n_karma();
    let mut rows = Vec::new();
    for r in 0..space.n_resources() {
        let f = &field.resources[r];
        for (tau, t) in cfg.types.iter().enumerate() {
            for u in 0..n_u {
                let mut mass = [0.0; 3];
                for k_idx in 0..n_k {
                    let x = space.state_index(r, u, k_idx);
                    let m = t.share * social.d[tau][x];
                    if m == 0.0 {
                        continue;
                    }
                    for (a, &p) in social.pi[tau][space.action_range(x)].iter().enumerate() {
                        for (slot, o) in Outcome::ALL.iter().enumerate() {
                            mass[slot] += m * p * f.psi.prob(*o, a);
                        }
                    }
                }
                rows.push(UtilizationRow {
                    resource: cfg.resources[r].name.clone(),
                    type_name: t.name.clone(),
                    urgency: cfg.urgency_levels[u],
                    priority: mass[0],
                    general: mass[1],
                    inactive: mass[2],
                });
            }
        }
    }
    rows
}
