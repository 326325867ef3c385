//! Best-response problem of a single user type.
//!
//! For a fixed social state every type faces a Markov decision process whose
//! states cycle through the resources of a day. Discounting happens only on
//! the transition out of the last resource, so Bellman backups are organized
//! as backward sweeps over one day: each sweep is a contraction with modulus
//! equal to the day-boundary discount.

use crate::error::{Error, Result};
use crate::mean_field::{for_each_next_karma, immediate_payoff, FieldQuantities, SocialState};
use crate::model::{Bid, EconomyConfig, StateSpace};

/// Default tie tolerance for [`best_response_set`].
pub const DEFAULT_TIE_TOLERANCE: f64 = 1e-9;

/// A Markov reward process whose states are split into equal-length stage
/// blocks visited cyclically: every transition out of stage `s` lands in
/// stage `(s + 1) % n_stages` and is discounted by `discount[s]`.
#[derive(Debug, Clone)]
pub struct StagedChain {
    pub block_len: usize,
    pub discount: Vec<f64>,
    pub reward: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl StagedChain {
    /// Builds a chain from per-state sparse rows `(next_state, probability)`.
    pub fn from_rows(
        block_len: usize,
        discount: Vec<f64>,
        reward: Vec<f64>,
        rows: &[Vec<(usize, f64)>],
    ) -> Result<Self> {
        let n = discount.len() * block_len;
        if reward.len() != n || rows.len() != n {
            return Err(Error::Shape(format!(
                "staged chain expects {n} states, got {} rewards and {} rows",
                reward.len(),
                rows.len()
            )));
        }
        let mut chain = StagedChain {
            block_len,
            discount,
            reward,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        };
        for (x, row) in rows.iter().enumerate() {
            let next_stage = (chain.stage_of(x) + 1) % chain.n_stages();
            for &(c, p) in row {
                if c / block_len != next_stage {
                    return Err(Error::Shape(format!(
                        "state {x} transitions to {c} outside stage {next_stage}"
                    )));
                }
                chain.cols.push(c);
                chain.vals.push(p);
            }
            chain.row_ptr.push(chain.cols.len());
        }
        Ok(chain)
    }

    pub fn n_states(&self) -> usize {
        self.reward.len()
    }

    pub fn n_stages(&self) -> usize {
        self.discount.len()
    }

    #[inline]
    pub fn stage_of(&self, x: usize) -> usize {
        x / self.block_len
    }

    pub fn row(&self, x: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[x]..self.row_ptr[x + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.vals[range].iter().copied())
    }

    #[inline]
    fn backup(&self, x: usize, v: &[f64]) -> f64 {
        let alpha = self.discount[self.stage_of(x)];
        let cont: f64 = self.row(x).map(|(c, p)| p * v[c]).sum();
        self.reward[x] + alpha * cont
    }

    /// One backward sweep over the day, updating `v` in place.
    pub fn sweep(&self, v: &mut [f64]) {
        for s in (0..self.n_stages()).rev() {
            for x in s * self.block_len..(s + 1) * self.block_len {
                v[x] = self.backup(x, v);
            }
        }
    }

    /// Sup-norm Bellman residual `|T(v) - v|`.
    pub fn residual(&self, v: &[f64]) -> f64 {
        (0..self.n_states())
            .map(|x| (self.backup(x, v) - v[x]).abs())
            .fold(0.0, f64::max)
    }

    /// Residual restricted to the last stage, which is the only stage a
    /// fresh sweep leaves out of date.
    fn last_stage_residual(&self, v: &[f64]) -> f64 {
        let s = self.n_stages() - 1;
        (s * self.block_len..(s + 1) * self.block_len)
            .map(|x| (self.backup(x, v) - v[x]).abs())
            .fold(0.0, f64::max)
    }

    /// Solves `v = r + alpha P v` by repeated day sweeps starting from `v`.
    /// Returns the number of sweeps used.
    pub fn evaluate_in_place(&self, v: &mut [f64], tol: f64, max_sweeps: usize) -> Result<usize> {
        let mut residual = f64::INFINITY;
        for sweep in 1..=max_sweeps {
            self.sweep(v);
            residual = if self.n_stages() == 1 {
                self.residual(v)
            } else {
                self.last_stage_residual(v)
            };
            if residual <= tol {
                residual = self.residual(v);
                if residual <= tol {
                    return Ok(sweep);
                }
            }
        }
        Err(Error::NotConverged {
            what: "value iteration",
            iterations: max_sweeps,
            residual,
        })
    }

    pub fn evaluate(&self, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.n_states()];
        self.evaluate_in_place(&mut v, tol, max_sweeps)?;
        Ok(v)
    }

    /// One step of the distribution: mass at stage `s` is pushed to stage
    /// `s + 1`. `from` and `to` are full-length vectors; only the stage
    /// blocks involved are read and written.
    pub fn push_stage(&self, s: usize, from: &[f64], to: &mut [f64]) {
        let next = (s + 1) % self.n_stages();
        to[next * self.block_len..(next + 1) * self.block_len]
            .iter_mut()
            .for_each(|v| *v = 0.0);
        for x in s * self.block_len..(s + 1) * self.block_len {
            let m = from[x];
            if m == 0.0 {
                continue;
            }
            for (c, p) in self.row(x) {
                to[c] += m * p;
            }
        }
    }
}

/// Value of the current policy and the corresponding state-action values.
#[derive(Debug, Clone)]
pub struct ValueFunction {
    /// Indexed by state.
    pub v: Vec<f64>,
    /// Indexed by flat action position.
    pub q: Vec<f64>,
    pub residual: f64,
    pub sweeps: usize,
}

/// Policy-weighted immediate payoffs `R_tau[x]`.
pub fn expected_rewards(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
    tau: usize,
) -> Vec<f64> {
    let pi = &social.pi[tau];
    (0..space.n_states())
        .map(|x| {
            let (r, u, _) = space.decompose(x);
            let f = &field.resources[r];
            let urgency = cfg.urgency_levels[u];
            pi[space.action_range(x)]
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(a, &p)| {
                    p * immediate_payoff(
                        urgency,
                        Bid::from_action_index(a),
                        f.psi.general[a],
                        f.delay,
                        cfg.nominal_payoff,
                    )
                })
                .sum()
        })
        .collect()
}

/// The Markov reward process induced by a type's policy.
pub fn policy_chain(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
    tau: usize,
) -> StagedChain {
    let n_r = space.n_resources();
    let n_u = space.n_urgency();
    let pi = &social.pi[tau];
    let mut acc = vec![0.0; space.n_karma()];
    let mut touched: Vec<usize> = Vec::new();
    let mut row_ptr = Vec::with_capacity(space.n_states() + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for x in 0..space.n_states() {
        let (r, u, k_idx) = space.decompose(x);
        let f = &field.resources[r];
        for (a, &p) in pi[space.action_range(x)].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for_each_next_karma(cfg, space, f, r, k_idx, a, |k, q| {
                if acc[k] == 0.0 {
                    touched.push(k);
                }
                acc[k] += p * q;
            });
        }
        touched.sort_unstable();
        let r_next = (r + 1) % n_r;
        for u_next in 0..n_u {
            let phi = cfg.phi(tau, r, u, r_next, u_next);
            if phi == 0.0 {
                continue;
            }
            for &k in &touched {
                cols.push(space.state_index(r_next, u_next, k));
                vals.push(acc[k] * phi);
            }
        }
        for &k in &touched {
            acc[k] = 0.0;
        }
        touched.clear();
        row_ptr.push(cols.len());
    }
    StagedChain {
        block_len: space.block_len(),
        discount: cfg.resources.iter().map(|r| r.discount).collect(),
        reward: expected_rewards(cfg, space, social, field, tau),
        row_ptr,
        cols,
        vals,
    }
}

/// Continuation values `W[(r, u)][K+] = sum_u+ phi[r+, u+ | r, u] V[r+, u+, K+]`.
fn continuation(cfg: &EconomyConfig, space: &StateSpace, tau: usize, v: &[f64]) -> Vec<f64> {
    let n_r = space.n_resources();
    let n_u = space.n_urgency();
    let n_k = space.n_karma();
    let mut w = vec![0.0; n_r * n_u * n_k];
    for r in 0..n_r {
        let r_next = (r + 1) % n_r;
        for u in 0..n_u {
            let out = &mut w[(r * n_u + u) * n_k..(r * n_u + u + 1) * n_k];
            for u_next in 0..n_u {
                let phi = cfg.phi(tau, r, u, r_next, u_next);
                if phi == 0.0 {
                    continue;
                }
                let base = space.state_index(r_next, u_next, 0);
                for (o, &vv) in out.iter_mut().zip(&v[base..base + n_k]) {
                    *o += phi * vv;
                }
            }
        }
    }
    w
}

/// State-action values `Q[x, b]` = immediate payoff + discounted continuation.
pub fn q_values(
    cfg: &EconomyConfig,
    space: &StateSpace,
    field: &FieldQuantities,
    tau: usize,
    v: &[f64],
) -> Vec<f64> {
    let n_k = space.n_karma();
    let w = continuation(cfg, space, tau, v);
    let mut q = vec![0.0; space.n_actions_total()];
    for x in 0..space.n_states() {
        let (r, u, k_idx) = space.decompose(x);
        let f = &field.resources[r];
        let alpha = cfg.resources[r].discount;
        let urgency = cfg.urgency_levels[u];
        let w_ru = &w[(r * space.n_urgency() + u) * n_k..(r * space.n_urgency() + u + 1) * n_k];
        let range = space.action_range(x);
        for (a, qa) in q[range].iter_mut().enumerate() {
            let mut cont = 0.0;
            for_each_next_karma(cfg, space, f, r, k_idx, a, |k, p| cont += p * w_ru[k]);
            *qa = immediate_payoff(
                urgency,
                Bid::from_action_index(a),
                f.psi.general[a],
                f.delay,
                cfg.nominal_payoff,
            ) + alpha * cont;
        }
    }
    q
}

/// Value of the type's current policy, warm-started from `warm` if given.
pub fn value_iteration(
    cfg: &EconomyConfig,
    space: &StateSpace,
    social: &SocialState,
    field: &FieldQuantities,
    tau: usize,
    tol: f64,
    max_sweeps: usize,
    warm: Option<&[f64]>,
) -> Result<ValueFunction> {
    let chain = policy_chain(cfg, space, social, field, tau);
    let mut v = warm.map_or_else(|| vec![0.0; space.n_states()], <[f64]>::to_vec);
    let sweeps = chain.evaluate_in_place(&mut v, tol, max_sweeps)?;
    let residual = chain.residual(&v);
    let q = q_values(cfg, space, field, tau, &v);
    Ok(ValueFunction {
        v,
        q,
        residual,
        sweeps,
    })
}

/// Bids whose value is within `tie_tol` of the best one.
pub fn best_response_set(q: &[f64], tie_tol: f64) -> Vec<Bid> {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q.iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - tie_tol)
        .map(|(a, _)| Bid::from_action_index(a))
        .collect()
}

/// Largest shortfall `max_b Q[x, b] - sum_b pi[b|x] Q[x, b]` over states.
pub fn max_q_gap(space: &StateSpace, pi: &[f64], q: &[f64]) -> f64 {
    (0..space.n_states())
        .map(|x| {
            let range = space.action_range(x);
            let qx = &q[range.clone()];
            let best = qx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let avg: f64 = qx.iter().zip(&pi[range]).map(|(a, b)| a * b).sum();
            best - avg
        })
        .fold(0.0, f64::max)
}
