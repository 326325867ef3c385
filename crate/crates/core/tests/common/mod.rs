#![allow(dead_code)]
//! Random economies, random social states and the kernel checks shared by
//! the property tests and the acceptance suite.

use multikarma::mdp::StagedChain;
use multikarma::mean_field::{
    compute_field, karma_kernel, outcome_probabilities, payment_kernel, redistribution_kernel,
    state_transition, FieldQuantities, Outcome, SocialState,
};
use multikarma::model::{
    build_state_space, validate_config, Bid, EconomyConfig, ExchangeMatrix, RedistributionRule,
    ResourceSpec, SaturationRule, StateSpace, UserTypeSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Positive weights normalized to one, with roughly `sparsity` of the
/// entries zeroed (at least one entry stays positive).
pub fn random_simplex(rng: &mut impl Rng, n: usize, sparsity: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < sparsity { 0.0 } else { rng.gen_range(0.05..1.0) })
        .collect();
    if w.iter().all(|&v| v == 0.0) {
        w[rng.gen_range(0..n)] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// A small valid economy with 1 to 3 resources and 1 to 2 types.
pub fn random_config(seed: u64) -> EconomyConfig {
    let mut rng = rng(seed);
    let n_r = rng.gen_range(1..=3usize);
    let k_cap = match n_r {
        1 => 8,
        2 => 5,
        _ => 3,
    };
    let eps = 1e-4;
    let resources: Vec<ResourceSpec> = (0..n_r)
        .map(|r| {
            let total: f64 = rng.gen_range(0.3..0.9);
            let priority = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.05..0.8 * total) };
            let karma_max = rng.gen_range(1..=k_cap);
            ResourceSpec {
                name: format!("R{r}"),
                total_capacity: total,
                priority_capacity: priority,
                karma_max,
                karma_mean: rng.gen_range(0..=karma_max),
                discount: if r + 1 == n_r { rng.gen_range(0.5..0.99) } else { 1.0 },
            }
        })
        .collect();
    let worst = resources
        .iter()
        .map(|r| (1.0 - r.total_capacity + eps) / r.general_capacity())
        .fold(0.0, f64::max);
    let mut urgency_levels = vec![0.0, 1.0];
    if rng.gen_bool(0.5) {
        urgency_levels.push(rng.gen_range(2.0..9.0));
    }
    let n_u = urgency_levels.len();
    let n_types = rng.gen_range(1..=2usize);
    let shares = random_simplex(&mut rng, n_types, 0.0);
    let types = shares
        .iter()
        .enumerate()
        .map(|(t, &share)| {
            let transitions = (0..n_r * n_u)
                .map(|pair| {
                    let next_r = (pair / n_u + 1) % n_r;
                    let w = random_simplex(&mut rng, n_u, 0.3);
                    let mut row = vec![0.0; n_r * n_u];
                    row[next_r * n_u..(next_r + 1) * n_u].copy_from_slice(&w);
                    row
                })
                .collect();
            UserTypeSpec {
                name: format!("T{t}"),
                share,
                transitions,
            }
        })
        .collect();
    let exchange = match rng.gen_range(0..4) {
        0 => ExchangeMatrix::identity(n_r),
        1 => ExchangeMatrix::unit(n_r),
        _ => ExchangeMatrix::geometric(n_r, *[1.5, 2.0 / 3.0, 2.0, 0.5].choose(&mut rng).unwrap()),
    };
    let cfg = EconomyConfig {
        resources,
        urgency_levels,
        types,
        exchange,
        redistribution: if rng.gen_bool(0.5) {
            RedistributionRule::ToActive
        } else {
            RedistributionRule::ToAll
        },
        saturation: *[SaturationRule::WaterFilling, SaturationRule::SinglePass, SaturationRule::Truncate]
            .choose(&mut rng)
            .unwrap(),
        nominal_payoff: worst + rng.gen_range(0.5..3.0),
        epsilon: eps,
        state_budget: None,
    };
    let report = validate_config(&cfg);
    assert!(report.is_valid(), "generator produced {:?}", report.violations);
    cfg
}

/// Random distribution per resource block and random policy per state.
/// With `low_balances` the distribution avoids every balance above half its
/// cap, which leaves room for redistribution.
pub fn random_social(space: &StateSpace, n_types: usize, seed: u64, low_balances: bool) -> SocialState {
    let mut rng = rng(seed ^ 0x5eed);
    let len = space.block_len();
    let n_k = space.n_karma();
    let low = |k_idx: usize| -> bool {
        space
            .karma(k_idx)
            .iter()
            .enumerate()
            .all(|(j, &k)| 2 * k <= space.karma_max(j))
    };
    let d = (0..n_types)
        .map(|_| {
            (0..space.n_resources())
                .flat_map(|_| {
                    let mut w = random_simplex(&mut rng, len, 0.3);
                    if low_balances {
                        // Block layout is urgency-major, karma index innermost.
                        w.iter_mut().enumerate().for_each(|(i, v)| {
                            if !low(i % n_k) {
                                *v = 0.0;
                            }
                        });
                        let s: f64 = w.iter().sum();
                        if s > 0.0 {
                            w.iter_mut().for_each(|v| *v /= s);
                        } else {
                            w[0] = 1.0;
                        }
                    }
                    w
                })
                .collect()
        })
        .collect();
    let pi = (0..n_types)
        .map(|_| {
            let mut pi = vec![0.0; space.n_actions_total()];
            for x in 0..space.n_states() {
                let range = space.action_range(x);
                let w = random_simplex(&mut rng, range.len(), 0.4);
                pi[range].copy_from_slice(&w);
            }
            pi
        })
        .collect();
    SocialState { d, pi }
}

pub struct Instance {
    pub cfg: EconomyConfig,
    pub space: StateSpace,
    pub social: SocialState,
    pub field: FieldQuantities,
}

pub fn instance(seed: u64) -> Instance {
    build_instance(seed, false)
}

/// An instance whose balances sit in the lower half of every account.
pub fn low_balance_instance(seed: u64) -> Instance {
    build_instance(seed, true)
}

fn build_instance(seed: u64, low_balances: bool) -> Instance {
    let cfg = random_config(seed);
    let space = build_state_space(&cfg).unwrap();
    let social = random_social(&space, cfg.n_types(), seed, low_balances);
    let field = compute_field(&cfg, &space, &social);
    Instance {
        cfg,
        space,
        social,
        field,
    }
}

/// Largest row-sum error of every type's resource-urgency chain.
pub fn phi_row_error(cfg: &EconomyConfig) -> f64 {
    cfg.types
        .iter()
        .flat_map(|t| t.transitions.iter().map(|row| (row.iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max)
}

/// Worst-case findings of the payment, karma and state kernels.
#[derive(Debug, Default)]
pub struct KernelCheck {
    pub payment_row_error: f64,
    pub karma_row_error: f64,
    pub transition_row_error: f64,
    /// `|value debited - bid|` in units of the contested resource.
    pub debit_error: f64,
    /// A payment that raised some account or left the karma bounds.
    pub bad_payment: bool,
}

fn row_error(row: &[(Vec<u32>, f64)]) -> f64 {
    (row.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs()
}

pub fn check_kernels(inst: &Instance) -> KernelCheck {
    let Instance {
        cfg, space, field, ..
    } = inst;
    let mut out = KernelCheck::default();
    for x in 0..space.n_states() {
        let (r, _, k_idx) = space.decompose(x);
        let karma = space.karma(k_idx);
        for bid in space.bids(x) {
            for o in Outcome::ALL {
                let pay = payment_kernel(cfg, space, r, karma, bid, o);
                out.payment_row_error = out.payment_row_error.max(row_error(&pay));
                let mut debited = 0.0;
                for (k_hat, p) in &pay {
                    if space.karma_index(k_hat).is_none() || k_hat.iter().zip(karma).any(|(a, b)| a > b) {
                        out.bad_payment = true;
                    }
                    debited += p * k_hat
                        .iter()
                        .zip(karma)
                        .enumerate()
                        .map(|(j, (a, b))| cfg.exchange.rate(r, j) * (*b as f64 - *a as f64))
                        .sum::<f64>();
                }
                let owed = match (o, bid) {
                    (Outcome::Priority, Bid::Amount(b)) => b as f64,
                    _ => 0.0,
                };
                out.debit_error = out.debit_error.max((debited - owed).abs());
                let kappa = karma_kernel(cfg, space, &field.resources[r], r, karma, bid, o);
                out.karma_row_error = out.karma_row_error.max(row_error(&kappa));
            }
            for tau in 0..cfg.n_types() {
                let row = state_transition(cfg, space, field, tau, x, bid);
                let s: f64 = row.iter().map(|(_, p)| p).sum();
                out.transition_row_error = out.transition_row_error.max((s - 1.0).abs());
            }
        }
    }
    out
}

/// `(sum error, monotone)` of the outcome probabilities for a bid profile.
pub fn check_outcomes(nu: &[f64], s_pr: f64, eps: f64) -> (f64, bool) {
    let psi = outcome_probabilities(nu, s_pr, eps);
    let mut sum_error: f64 = 0.0;
    for a in 0..nu.len() {
        let s: f64 = Outcome::ALL.iter().map(|o| psi.prob(*o, a)).sum();
        sum_error = sum_error.max((s - 1.0).abs());
    }
    let monotone = psi.priority[1..].windows(2).all(|w| w[0] <= w[1]);
    (sum_error, monotone)
}

/// Expected karma paid at resource `r` (from the field), expected value
/// debited by the payment kernel and expected karma credited by the
/// redistribution kernel, all per unit of population.
pub fn karma_flows(inst: &Instance, r: usize) -> (f64, f64, f64) {
    let Instance {
        cfg,
        space,
        social,
        field,
    } = inst;
    let f = &field.resources[r];
    let mut debited = 0.0;
    let mut credited = 0.0;
    let start = space.state_index(r, 0, 0);
    for (tau, t) in cfg.types.iter().enumerate() {
        for x in start..start + space.block_len() {
            let m = t.share * social.d[tau][x];
            if m == 0.0 {
                continue;
            }
            let karma = space.karma(space.decompose(x).2);
            for (a, &p) in social.pi[tau][space.action_range(x)].iter().enumerate() {
                let bid = Bid::from_action_index(a);
                for o in Outcome::ALL {
                    let w = m * p * f.psi.prob(o, a);
                    if w == 0.0 {
                        continue;
                    }
                    for (k_hat, q) in payment_kernel(cfg, space, r, karma, bid, o) {
                        debited += w * q * k_hat
                            .iter()
                            .zip(karma)
                            .enumerate()
                            .map(|(j, (a, b))| cfg.exchange.rate(r, j) * (*b as f64 - *a as f64))
                            .sum::<f64>();
                        for (k_next, q2) in
                            redistribution_kernel(space, cfg.redistribution, r, &k_hat, o, f.gain)
                        {
                            credited += w * q * q2 * (k_next[r] as f64 - k_hat[r] as f64);
                        }
                    }
                }
            }
        }
    }
    (f.avg_payment, debited, credited)
}

/// Population mean of every account in block `r`.
pub fn account_means(cfg: &EconomyConfig, space: &StateSpace, social: &SocialState, r: usize) -> Vec<f64> {
    let mut mean = vec![0.0; space.n_resources()];
    let start = space.state_index(r, 0, 0);
    for (tau, t) in cfg.types.iter().enumerate() {
        for x in start..start + space.block_len() {
            let m = t.share * social.d[tau][x];
            for (j, &k) in space.karma(space.decompose(x).2).iter().enumerate() {
                mean[j] += m * k as f64;
            }
        }
    }
    mean
}

/// A random staged reward process with dense or sparse rows, plus its dense
/// transition matrix and per-state discount.
pub struct RandomChain {
    pub chain: StagedChain,
    pub dense: DMatrix<f64>,
    pub discount: DVector<f64>,
}

pub fn random_chain(seed: u64, max_states: usize, sparsity: f64) -> RandomChain {
    let mut rng = rng(seed);
    let n_stages = rng.gen_range(1..=3usize);
    let block_len = rng.gen_range(1..=max_states / n_stages);
    let n = n_stages * block_len;
    let mut discount: Vec<f64> = vec![1.0; n_stages];
    discount[n_stages - 1] = rng.gen_range(0.5..0.99);
    let reward: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..10.0)).collect();
    let mut dense = DMatrix::zeros(n, n);
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|x| {
            let next = (x / block_len + 1) % n_stages;
            random_simplex(&mut rng, block_len, sparsity)
                .into_iter()
                .enumerate()
                .filter(|(_, p)| *p > 0.0)
                .map(|(c, p)| {
                    dense[(x, next * block_len + c)] = p;
                    (next * block_len + c, p)
                })
                .collect()
        })
        .collect();
    let per_state = DVector::from_fn(n, |x, _| discount[x / block_len]);
    RandomChain {
        chain: StagedChain::from_rows(block_len, discount, reward, &rows).unwrap(),
        dense,
        discount: per_state,
    }
}

/// Solves `(I - diag(alpha) P) v = r` directly.
pub fn dense_values(c: &RandomChain) -> DVector<f64> {
    let n = c.dense.nrows();
    let mut a = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] -= c.discount[i] * c.dense[(i, j)];
        }
    }
    let r = DVector::from_column_slice(&c.chain.reward);
    a.lu().solve(&r).expect("discounted system is nonsingular")
}

/// Stationary law from the null space of `P^T - I`, normalized per stage
/// block (the chain visits the stages cyclically).
pub fn null_space_stationary(c: &RandomChain) -> Vec<f64> {
    let n = c.dense.nrows();
    let a = c.dense.transpose() - DMatrix::<f64>::identity(n, n);
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let (i_min, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let mut d: Vec<f64> = v_t.row(i_min).iter().copied().collect();
    let len = c.chain.block_len;
    for block in d.chunks_mut(len) {
        let s: f64 = block.iter().sum();
        block.iter_mut().for_each(|v| *v /= s);
    }
    d
}
