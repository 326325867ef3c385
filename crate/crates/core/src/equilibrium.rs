//! Stationary Nash equilibrium computation.
//!
//! The solver runs damped perturbed best-response dynamics on the social
//! state: every outer iteration recomputes the field quantities from the
//! current `(d, pi)`, refreshes the value of the current policy, moves the
//! policy a step towards the logit response `softmax(Q / lambda)`, and
//! advances the state distribution along the induced dynamics. Once the
//! residuals are small the distribution is polished to stationarity and the
//! result is certified from scratch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{max_q_gap, policy_chain, q_values, StagedChain};
use crate::mean_field::{
    compute_field, compute_resource_field, for_each_next_karma, FieldQuantities, SocialState,
};
use crate::model::{build_state_space, validate_config, EconomyConfig, ExchangeRegime, StateSpace};
use crate::welfare::{average_payoff, PayoffMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Policy step size `eta` in (0, 1].
    pub step_size: f64,
    /// When set, the step decays as `eta / (1 + t / T)` down to `step_min`.
    pub step_decay_iterations: Option<f64>,
    pub step_min: f64,
    /// Initial logit temperature, in units of the nominal payoff.
    pub lambda_initial: f64,
    /// Temperature floor, in units of the nominal payoff.
    pub lambda_min: f64,
    /// Iterations over which the temperature halves: `lambda_t = lambda_0 / (1 + t / T)`.
    pub lambda_decay_iterations: f64,
    /// Total-variation stationarity tolerance.
    pub tol_stationarity: f64,
    /// Max-entry policy movement tolerance.
    pub tol_policy: f64,
    /// Q-optimality gap tolerance, in units of the nominal payoff.
    pub tol_q_relative: f64,
    pub max_outer: usize,
    /// Day sweeps of policy evaluation per outer iteration.
    pub value_sweeps: usize,
    /// Bellman residual accepted when certifying.
    pub value_tol: f64,
    /// Coupled day steps of the distribution per outer iteration.
    pub distribution_steps: usize,
    /// Day steps allowed when polishing the distribution to stationarity.
    pub max_polish_steps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            step_size: 0.1,
            step_decay_iterations: Some(1000.0),
            step_min: 0.005,
            lambda_initial: 0.05,
            lambda_min: 5e-4,
            lambda_decay_iterations: 10.0,
            tol_stationarity: 1e-8,
            tol_policy: 1e-5,
            tol_q_relative: 1e-3,
            max_outer: 20_000,
            value_sweeps: 10,
            value_tol: 1e-9,
            distribution_steps: 1,
            max_polish_steps: 200_000,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            problems.push("step size must lie in (0, 1]".to_string());
        }
        if !(self.lambda_initial >= 0.0 && self.lambda_min >= 0.0) {
            problems.push("temperatures must be nonnegative".to_string());
        }
        for (name, v) in [
            ("tol_stationarity", self.tol_stationarity),
            ("tol_policy", self.tol_policy),
            ("tol_q_relative", self.tol_q_relative),
            ("value_tol", self.value_tol),
        ] {
            if !(v > 0.0) {
                problems.push(format!("{name} must be positive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems))
        }
    }

    /// Policy step size at outer iteration `t`.
    pub fn step_at(&self, t: usize) -> f64 {
        match self.step_decay_iterations {
            Some(horizon) => (self.step_size / (1.0 + t as f64 / horizon)).max(self.step_min.min(self.step_size)),
            None => self.step_size,
        }
    }

    /// Temperature at outer iteration `t`, in payoff units.
    pub fn lambda_at(&self, t: usize, nominal: f64) -> f64 {
        let decayed = self.lambda_initial / (1.0 + t as f64 / self.lambda_decay_iterations);
        decayed.max(self.lambda_min) * nominal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub stationarity: f64,
    pub policy_movement: f64,
    pub q_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub lambda: f64,
    pub stationarity: f64,
    pub policy_movement: f64,
    pub q_gap: f64,
    /// Endogenous average payoff per type at this iterate.
    pub welfare: Vec<f64>,
}

impl TraceRow {
    pub const HEADER: &'static str = "iteration,lambda,stationarity,policy_movement,q_gap,welfare";

    /// Comma-separated line; per-type welfare values are joined with `;`.
    pub fn to_line(&self) -> String {
        let welfare: Vec<String> = self.welfare.iter().map(|w| format!("{w:.6}")).collect();
        format!(
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{}",
            self.iteration,
            self.lambda,
            self.stationarity,
            self.policy_movement,
            self.q_gap,
            welfare.join(";")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Expected karma that would overflow `k^max` per resource.
    pub saturation_surplus: Vec<f64>,
    /// Expected karma destroyed because every recipient was saturated.
    pub lost: Vec<f64>,
    /// Population mean balance of each account at the first resource.
    pub karma_mean: Vec<f64>,
    /// Mean karma measured in units of the first account,
    /// `sum_j chi[0][j] * mean_j`; conserved under unit or non-unit exchange.
    pub karma_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub social: SocialState,
    pub field: FieldQuantities,
    pub residuals: Residuals,
    pub iterations: usize,
    pub converged: bool,
    pub lambda: f64,
    pub diagnostics: Diagnostics,
    pub trace: Vec<TraceRow>,
}

/// Total variation distance `0.5 * sum |a - b|`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Result of a power iteration.
#[derive(Debug, Clone)]
pub struct Stationary {
    pub d: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Stationary conditional distributions of a staged chain by power
/// iteration over whole days, starting from `init`.
///
/// The residual is the largest total-variation gap between a stage block
/// and the push-forward of its predecessor.
pub fn stationary_staged(
    chain: &StagedChain,
    init: &[f64],
    tol: f64,
    max_days: usize,
) -> Result<Stationary> {
    let n_s = chain.n_stages();
    let len = chain.block_len;
    let mut d = init.to_vec();
    let mut next = vec![0.0; d.len()];
    let mut residual = f64::INFINITY;
    for day in 1..=max_days {
        let first = d[..len].to_vec();
        for s in 0..n_s {
            chain.push_stage(s, &d, &mut next);
            let nb = (s + 1) % n_s;
            d[nb * len..(nb + 1) * len].copy_from_slice(&next[nb * len..(nb + 1) * len]);
        }
        normalize_blocks(&mut d, len);
        residual = total_variation(&first, &d[..len]);
        if residual <= tol {
            residual = staged_residual(chain, &d);
            if residual <= tol {
                return Ok(Stationary {
                    d,
                    residual,
                    iterations: day,
                });
            }
        }
    }
    Err(Error::NotConverged {
        what: "stationary distribution",
        iterations: max_days,
        residual,
    })
}

fn staged_residual(chain: &StagedChain, d: &[f64]) -> f64 {
    let len = chain.block_len;
    let mut next = vec![0.0; d.len()];
    (0..chain.n_stages())
        .map(|s| {
            chain.push_stage(s, d, &mut next);
            let nb = (s + 1) % chain.n_stages();
            total_variation(&next[nb * len..(nb + 1) * len], &d[nb * len..(nb + 1) * len])
        })
        .fold(0.0, f64::max)
}

fn normalize_blocks(d: &mut [f64], len: usize) {
    for block in d.chunks_mut(len) {
        let s: f64 = block.iter().sum();
        if s > 0.0 {
            block.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Stationary distribution of every type under a fixed policy and fixed
/// field quantities.
pub fn stationary_distribution(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
    tol: f64,
    max_days: usize,
) -> Result<Vec<Stationary>> {
    (0..cfg.n_types())
        .map(|tau| {
            let chain = policy_chain(cfg, space, social, field, tau);
            stationary_staged(&chain, &social.d[tau], tol, max_days)
        })
        .collect()
}

/// Pushes the type's mass at resource `r` one step forward into `out`
/// (the block of resource `r + 1`), using the field of resource `r`.
fn push_resource(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &crate::mean_field::ResourceField,
    tau: usize,
    r: usize,
    out: &mut [f64],
) {
    let n_r = space.n_resources();
    let n_u = space.n_urgency();
    let n_k = space.n_karma();
    let r_next = (r + 1) % n_r;
    out.iter_mut().for_each(|v| *v = 0.0);
    let d = &social.d[tau];
    let pi = &social.pi[tau];
    let mut acc = vec![0.0; n_k];
    for u in 0..n_u {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let mut any = false;
        for k_idx in 0..n_k {
            let x = space.state_index(r, u, k_idx);
            let m = d[x];
            if m == 0.0 {
                continue;
            }
            any = true;
            for (a, &p) in pi[space.action_range(x)].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let w = m * p;
                for_each_next_karma(cfg, space, field, r, k_idx, a, |k, q| acc[k] += w * q);
            }
        }
        if !any {
            continue;
        }
        for u_next in 0..n_u {
            let phi = cfg.phi(tau, r, u, r_next, u_next);
            if phi == 0.0 {
                continue;
            }
            let dst = &mut out[u_next * n_k..(u_next + 1) * n_k];
            for (o, &a) in dst.iter_mut().zip(&acc) {
                *o += phi * a;
            }
        }
    }
}

/// Advances the coupled population dynamics by one day: the field of each
/// resource is recomputed from the current distribution before its mass is
/// pushed forward. Returns the total-variation change of the first block.
pub fn coupled_day_step(cfg: &EconomyConfig, space: &StateSpace, social: &mut SocialState) -> f64 {
    let len = space.block_len();
    let n_r = space.n_resources();
    let first: Vec<Vec<f64>> = social.d.iter().map(|d| d[..len].to_vec()).collect();
    let mut out = vec![0.0; len];
    for r in 0..n_r {
        let field = compute_resource_field(cfg, space, social, r);
        let nb = (r + 1) % n_r;
        for tau in 0..cfg.n_types() {
            push_resource(cfg, space, social, &field, tau, r, &mut out);
            let s: f64 = out.iter().sum();
            let block = &mut social.d[tau][nb * len..(nb + 1) * len];
            for (b, o) in block.iter_mut().zip(&out) {
                *b = o / s;
            }
        }
    }
    first
        .iter()
        .zip(&social.d)
        .map(|(f, d)| total_variation(f, &d[..len]))
        .fold(0.0, f64::max)
}

/// Largest total-variation gap between `d[. | r+1]` and the push-forward of
/// `d[. | r]` under the field induced by `(d, pi)` itself.
pub fn stationarity_residual(cfg: &EconomyConfig, space: &StateSpace, social: &SocialState) -> f64 {
    let len = space.block_len();
    let n_r = space.n_resources();
    let field = compute_field(cfg, space, social);
    let mut out = vec![0.0; len];
    let mut worst: f64 = 0.0;
    for r in 0..n_r {
        let nb = (r + 1) % n_r;
        for tau in 0..cfg.n_types() {
            push_resource(cfg, space, social, &field.resources[r], tau, r, &mut out);
            worst = worst.max(total_variation(&out, &social.d[tau][nb * len..(nb + 1) * len]));
        }
    }
    worst
}

/// Logit response over one state's feasible bids; `lambda = 0` splits mass
/// evenly among maximizers and `lambda = inf` is uniform.
pub fn softmax_response(q: &[f64], lambda: f64) -> Vec<f64> {
    let n = q.len();
    if lambda.is_infinite() {
        return vec![1.0 / n as f64; n];
    }
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = if lambda <= 0.0 {
        q.iter().map(|&v| if v >= best { 1.0 } else { 0.0 }).collect()
    } else {
        q.iter().map(|&v| ((v - best) / lambda).exp()).collect()
    };
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// `(1 - eta) * pi_old + eta * softmax(Q / lambda)` for one state.
pub fn smoothed_policy_update(pi_old: &[f64], q: &[f64], lambda: f64, eta: f64) -> Vec<f64> {
    softmax_response(q, lambda)
        .into_iter()
        .zip(pi_old)
        .map(|(t, &p)| (1.0 - eta) * p + eta * t)
        .collect()
}

/// Applies the smoothed update to every state of a policy in place and
/// returns the largest entry change.
fn update_policy(space: &StateSpace, pi: &mut [f64], q: &[f64], lambda: f64, eta: f64) -> f64 {
    let mut movement: f64 = 0.0;
    for x in 0..space.n_states() {
        let range = space.action_range(x);
        let new = smoothed_policy_update(&pi[range.clone()], &q[range.clone()], lambda, eta);
        for (p, n) in pi[range].iter_mut().zip(new) {
            movement = movement.max((n - *p).abs());
            *p = n;
        }
    }
    movement
}

pub fn diagnostics(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
) -> Diagnostics {
    let n_r = space.n_resources();
    let mut karma_mean = vec![0.0; n_r];
    for (tau, t) in cfg.types.iter().enumerate() {
        for x in 0..space.block_len() {
            let m = t.share * social.d[tau][x];
            if m == 0.0 {
                continue;
            }
            let (_, _, k_idx) = space.decompose(x);
            for (j, &k) in space.karma(k_idx).iter().enumerate() {
                karma_mean[j] += m * k as f64;
            }
        }
    }
    let karma_value = match cfg.exchange.regime() {
        ExchangeRegime::NoExchange => karma_mean[0],
        _ => karma_mean
            .iter()
            .enumerate()
            .map(|(j, m)| cfg.exchange.rate(0, j) * m)
            .sum(),
    };
    Diagnostics {
        saturation_surplus: field.resources.iter().map(|f| f.saturation_surplus).collect(),
        lost: field.resources.iter().map(|f| f.lost).collect(),
        karma_mean,
        karma_value,
    }
}

/// Independently recomputed equilibrium residuals of a social state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub q_gap: f64,
    pub stationarity: f64,
    pub value_residual: f64,
}

impl Certificate {
    pub fn passes(&self, tol_q: f64, tol_d: f64) -> bool {
        self.q_gap <= tol_q && self.stationarity <= tol_d
    }
}

/// Recomputes the field, the policy values from scratch, the Q-optimality
/// gap and the stationarity residual from a social state alone.
pub fn certify(cfg: &EconomyConfig, social: &SocialState, value_tol: f64) -> Result<Certificate> {
    let space = build_state_space(cfg)?;
    social.check(&space, 1e-9)?;
    let field = compute_field(cfg, &space, social);
    let stationarity = stationarity_residual(cfg, &space, social);
    let mut q_gap: f64 = 0.0;
    let mut value_residual: f64 = 0.0;
    for tau in 0..cfg.n_types() {
        let chain = policy_chain(cfg, &space, social, &field, tau);
        let v = chain.evaluate(value_tol, 1_000_000)?;
        value_residual = value_residual.max(chain.residual(&v));
        let q = q_values(cfg, &space, &field, tau, &v);
        q_gap = q_gap.max(max_q_gap(&space, &social.pi[tau], &q));
    }
    Ok(Certificate {
        q_gap,
        stationarity,
        value_residual,
    })
}

fn endogenous_welfare(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
) -> Vec<f64> {
    (0..cfg.n_types())
        .map(|tau| {
            average_payoff(cfg, space, social, field, tau, PayoffMode::Endogenous).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Computes a stationary Nash equilibrium, starting from `init` or from
/// [`SocialState::initial`].
///
/// Non-convergence is not an error: the report carries `converged = false`
/// together with the full residual trace.
pub fn solve_sne(
    cfg: &EconomyConfig,
    settings: &SolverSettings,
    init: Option<SocialState>,
) -> Result<SolveReport> {
    validate_config(cfg).into_result()?;
    settings.validate()?;
    let space = build_state_space(cfg)?;
    let mut social = match init {
        Some(s) => {
            s.check(&space, 1e-9)?;
            s
        }
        None => SocialState::initial(cfg, &space),
    };
    let nominal = cfg.nominal_payoff;
    let tol_q = settings.tol_q_relative * nominal;
    let n_types = cfg.n_types();
    let mut values: Vec<Vec<f64>> = vec![vec![0.0; space.n_states()]; n_types];
    let mut trace = Vec::new();
    let mut residuals = Residuals {
        stationarity: f64::INFINITY,
        policy_movement: f64::INFINITY,
        q_gap: f64::INFINITY,
    };
    let mut lambda = settings.lambda_at(0, nominal);
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..settings.max_outer {
        iterations = t + 1;
        lambda = settings.lambda_at(t, nominal);
        let field = compute_field(cfg, &space, &social);
        let mut qs = Vec::with_capacity(n_types);
        let mut q_gap: f64 = 0.0;
        for (tau, v) in values.iter_mut().enumerate() {
            let chain = policy_chain(cfg, &space, &social, &field, tau);
            for _ in 0..settings.value_sweeps {
                chain.sweep(v);
            }
            let q = q_values(cfg, &space, &field, tau, v);
            q_gap = q_gap.max(max_q_gap(&space, &social.pi[tau], &q));
            qs.push(q);
        }
        let welfare = endogenous_welfare(cfg, &space, &social, &field);

        let mut movement: f64 = 0.0;
        for (tau, q) in qs.iter().enumerate() {
            movement = movement.max(update_policy(
                &space,
                &mut social.pi[tau],
                q,
                lambda,
                settings.step_at(t),
            ));
        }
        let mut stationarity = 0.0;
        for _ in 0..settings.distribution_steps.max(1) {
            stationarity = coupled_day_step(cfg, &space, &mut social);
        }
        residuals = Residuals {
            stationarity,
            policy_movement: movement,
            q_gap,
        };
        let row = TraceRow {
            iteration: t,
            lambda,
            stationarity,
            policy_movement: movement,
            q_gap,
            welfare,
        };
        log::debug!("{}", row.to_line());
        trace.push(row);

        let at_floor = lambda <= settings.lambda_min * nominal * (1.0 + 1e-12);
        if at_floor && movement <= settings.tol_policy && q_gap <= tol_q {
            let stationarity = polish(cfg, &space, &mut social, settings)?;
            let field = compute_field(cfg, &space, &social);
            let mut q_gap: f64 = 0.0;
            for (tau, v) in values.iter_mut().enumerate() {
                let chain = policy_chain(cfg, &space, &social, &field, tau);
                chain.evaluate_in_place(v, settings.value_tol, 1_000_000)?;
                let q = q_values(cfg, &space, &field, tau, v);
                q_gap = q_gap.max(max_q_gap(&space, &social.pi[tau], &q));
            }
            residuals = Residuals {
                stationarity,
                policy_movement: movement,
                q_gap,
            };
            log::debug!(
                "certification at {t}: stationarity {stationarity:.3e}, q_gap {q_gap:.3e}"
            );
            if stationarity <= settings.tol_stationarity && q_gap <= tol_q {
                converged = true;
                break;
            }
        }
    }

    let field = compute_field(cfg, &space, &social);
    let diagnostics = diagnostics(cfg, &space, &social, &field);
    Ok(SolveReport {
        social,
        field,
        residuals,
        iterations,
        converged,
        lambda,
        diagnostics,
        trace,
    })
}

/// Runs coupled day steps until the stationarity residual is below
/// tolerance; returns the final residual.
fn polish(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &mut SocialState,
    settings: &SolverSettings,
) -> Result<f64> {
    let tol = settings.tol_stationarity;
    let mut residual = stationarity_residual(cfg, space, social);
    let mut steps = 0;
    while residual > tol && steps < settings.max_polish_steps {
        let change = coupled_day_step(cfg, space, social);
        steps += 1;
        if change <= 0.1 * tol || steps % 50 == 0 {
            residual = stationarity_residual(cfg, space, social);
        }
    }
    Ok(residual)
}
