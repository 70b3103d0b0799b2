//! Monte Carlo estimation of lookahead action values under a generative
//! model.
//!
//! To estimate `Q_h^π(s,a)` the procedure builds a layered sampling tree:
//! the root pair sits at level h, every expanded pair at level k draws
//! `M_k` i.i.d. successor states, and leaf states at level 0 receive value
//! estimates from `M₀` truncated rollouts of π (length H). Values back up
//! through the levels by
//!
//! ```text
//! Q̂_k(s,a) = r(s,a) + (γ/M_k) Σ_{s' ∈ children(s,a)} V̂_k(s')
//! V̂_{k+1}(s) = max_a Q̂_k(s,a)        (V̂_1 = rollout estimates)
//! ```
//!
//! where the sum runs over the sampled-children multiset (so the 1/M_k
//! normalization is exact). Within a level, value estimates are computed at
//! most once per distinct state and shared across queries.
//!
//! Every sampling site draws from its own counter-based stream keyed by
//! (seed, level, state, action, trajectory), so results are bit-identical
//! across thread counts and the sample ledger is exact: the run consumes
//! `|𝒮₀|·M₀·H` rollout transitions plus `Σ_k #pairs(k)·M_k` branch draws.

use crate::error::{Error, Result};
use crate::mdp::{Policy, QTable, TabularMdp};
use crate::par;
use crate::rng::{self, DOMAIN_BRANCH, DOMAIN_ROLLOUT};
use rand::RngCore;
use std::collections::BTreeMap;

/// Sampling access to an MDP: i.i.d. successor draws plus known rewards.
pub trait GenerativeModel: Sync {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn discount(&self) -> f64;
    /// Deterministic reward r(s,a).
    fn reward(&self, s: usize, a: usize) -> f64;
    /// One draw s' ~ P(·|s,a).
    fn sample_next(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> usize;
}

impl GenerativeModel for TabularMdp {
    fn n_states(&self) -> usize {
        self.n_states()
    }

    fn n_actions(&self) -> usize {
        self.n_actions()
    }

    fn discount(&self) -> f64 {
        self.discount()
    }

    fn reward(&self, s: usize, a: usize) -> f64 {
        TabularMdp::reward(self, s, a)
    }

    fn sample_next(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> usize {
        TabularMdp::sample_next(self, s, a, rng)
    }
}

/// Read access to policy rows; lets rollouts run against either a tabular
/// policy or one reconstructed on demand from fitted parameters.
pub trait PolicyProvider: Sync {
    /// Writes π(·|s) into `buf` (cleared first).
    fn write_row(&self, s: usize, buf: &mut Vec<f64>);
}

impl PolicyProvider for Policy {
    fn write_row(&self, s: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(self.row(s));
    }
}

/// Sample sizes for the estimation tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimatorParams {
    /// Lookahead depth h ≥ 1.
    pub h: usize,
    /// M₀: rollouts per leaf state.
    pub m_leaf: u64,
    /// M₁..M_h: successor draws per expanded pair, one entry per level.
    pub m_branch: Vec<u64>,
    /// H: rollout truncation horizon.
    pub horizon: u64,
    /// Root seed of the counter-based streams.
    pub rng_seed: u64,
}

impl EstimatorParams {
    /// All branch widths equal to `m`.
    pub fn uniform(h: usize, m: u64, m_leaf: u64, horizon: u64, rng_seed: u64) -> Self {
        Self {
            h,
            m_leaf,
            m_branch: vec![m; h],
            horizon,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::InvalidParameter {
                what: "lookahead depth",
                details: "h must be at least 1".into(),
            });
        }
        if self.m_branch.len() != self.h {
            return Err(Error::DimensionMismatch {
                what: "branch widths",
                expected: self.h,
                got: self.m_branch.len(),
            });
        }
        if self.m_leaf == 0 || self.horizon == 0 || self.m_branch.iter().any(|&m| m == 0) {
            return Err(Error::InvalidParameter {
                what: "sample counts",
                details: "M₀, H and every M_k must be at least 1".into(),
            });
        }
        Ok(())
    }

    fn m_level(&self, k: usize) -> u64 {
        self.m_branch[k - 1]
    }
}

/// Exact accounting of generative-model calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleLedger {
    /// Rollout transitions: |𝒮₀| · M₀ · H.
    pub rollout_samples: u64,
    /// Branch draws: Σ_k #expanded-pairs(k) · M_k.
    pub branch_samples: u64,
}

impl SampleLedger {
    pub fn total(&self) -> u64 {
        self.rollout_samples + self.branch_samples
    }
}

/// Result of one estimation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LookaheadEstimate {
    /// Q̂_h for every queried pair.
    pub q_hat: BTreeMap<(usize, usize), f64>,
    pub samples: SampleLedger,
    /// Distinct states materialized per level; index 0 = leaves (rollout
    /// states 𝒮₀), index h = distinct root states.
    pub layer_sizes: Vec<usize>,
}

impl LookaheadEstimate {
    /// Copies the queried values into a dense Q-table (missing pairs stay 0).
    pub fn to_q_table(&self, n_states: usize, n_actions: usize) -> QTable {
        let mut q = QTable::zeros(n_states, n_actions);
        for (&(s, a), &v) in &self.q_hat {
            q.set(s, a, v);
        }
        q
    }
}

/// One truncated rollout return Σ_{t<H} γ^t r(s_t, a_t) from `s`.
fn rollout_return<M, P>(model: &M, policy: &P, s: usize, horizon: u64, rng: &mut dyn RngCore) -> f64
where
    M: GenerativeModel + ?Sized,
    P: PolicyProvider + ?Sized,
{
    let gamma = model.discount();
    let mut state = s;
    let mut discount = 1.0;
    let mut acc = 0.0;
    let mut row = Vec::with_capacity(model.n_actions());
    for _ in 0..horizon {
        policy.write_row(state, &mut row);
        let a = crate::mdp::sample_from_row(&row, rng);
        acc += discount * model.reward(state, a);
        state = model.sample_next(state, a, rng);
        discount *= gamma;
    }
    acc
}

/// Monte Carlo value estimate: mean of `m0` truncated rollouts of `policy`
/// from `s`, drawn sequentially from `rng`.
pub fn rollout_value<M, P>(
    model: &M,
    policy: &P,
    s: usize,
    m0: u64,
    horizon: u64,
    rng: &mut dyn RngCore,
) -> f64
where
    M: GenerativeModel + ?Sized,
    P: PolicyProvider + ?Sized,
{
    let mut acc = 0.0;
    for _ in 0..m0 {
        acc += rollout_return(model, policy, s, horizon, rng);
    }
    acc / m0 as f64
}

/// Leaf value with one independent stream per trajectory, so leaves can be
/// evaluated in parallel without perturbing each other's draws.
fn leaf_value<M, P>(model: &M, policy: &P, s: u32, params: &EstimatorParams) -> f64
where
    M: GenerativeModel + ?Sized,
    P: PolicyProvider + ?Sized,
{
    let mut acc = 0.0;
    for j in 0..params.m_leaf {
        let mut rng = rng::node_rng(params.rng_seed, DOMAIN_ROLLOUT, 0, s, 0, j as u32);
        acc += rollout_return(model, policy, s as usize, params.horizon, &mut rng);
    }
    acc / params.m_leaf as f64
}

/// Children of one expanded pair, as (state, multiplicity) sorted by state.
fn sample_children<M>(model: &M, level: u32, s: u32, a: u32, m: u64, seed: u64) -> Vec<(u32, u32)>
where
    M: GenerativeModel + ?Sized,
{
    let mut rng = rng::node_rng(seed, DOMAIN_BRANCH, level, s, a, 0);
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for _ in 0..m {
        let next = model.sample_next(s as usize, a as usize, &mut rng) as u32;
        *counts.entry(next).or_insert(0) += 1;
    }
    counts.into_iter().collect()
}

struct Level {
    /// Expanded pairs in deterministic order, with their children multisets.
    pairs: Vec<(u32, u32, Vec<(u32, u32)>)>,
    /// Distinct states at this level (sorted).
    states: Vec<u32>,
}

/// Estimates `Q̂_h^π` at every queried pair.
///
/// Duplicated queries are evaluated once. With `h = 1` the procedure
/// degenerates to `r(s,a) + (γ/M₁) Σ` rollout leaf values.
pub fn estimate_q_h<M, P>(
    model: &M,
    policy: &P,
    queries: &[(usize, usize)],
    params: &EstimatorParams,
) -> Result<LookaheadEstimate>
where
    M: GenerativeModel + ?Sized,
    P: PolicyProvider + ?Sized,
{
    params.validate()?;
    let n_states = model.n_states();
    let n_actions = model.n_actions();
    for &(s, a) in queries {
        if s >= n_states || a >= n_actions {
            return Err(Error::InvalidParameter {
                what: "query",
                details: format!("pair ({s}, {a}) out of range"),
            });
        }
    }
    let mut roots: Vec<(u32, u32)> = queries.iter().map(|&(s, a)| (s as u32, a as u32)).collect();
    roots.sort_unstable();
    roots.dedup();
    if roots.is_empty() {
        return Ok(LookaheadEstimate {
            q_hat: BTreeMap::new(),
            samples: SampleLedger::default(),
            layer_sizes: vec![0; params.h + 1],
        });
    }

    let h = params.h;
    let gamma = model.discount();
    let clamp_hi = 1.0 / (1.0 - gamma);
    let seed = params.rng_seed;

    // Top-down: materialize each level's expansion pairs and children.
    let mut levels: Vec<Level> = Vec::with_capacity(h);
    let mut frontier_pairs: Vec<(u32, u32)> = roots.clone();
    for k in (1..=h).rev() {
        let m_k = params.m_level(k);
        let expanded: Vec<(u32, u32, Vec<(u32, u32)>)> =
            par::map_collect(&frontier_pairs, |&(s, a)| {
                (s, a, sample_children(model, k as u32, s, a, m_k, seed))
            });
        let mut child_states: Vec<u32> = expanded
            .iter()
            .flat_map(|(_, _, ch)| ch.iter().map(|&(st, _)| st))
            .collect();
        child_states.sort_unstable();
        child_states.dedup();
        let mut states: Vec<u32> = expanded.iter().map(|&(s, _, _)| s).collect();
        states.sort_unstable();
        states.dedup();
        levels.push(Level {
            pairs: expanded,
            states,
        });
        if k > 1 {
            frontier_pairs = child_states
                .iter()
                .flat_map(|&s| (0..n_actions as u32).map(move |a| (s, a)))
                .collect();
        } else {
            frontier_pairs = child_states.iter().map(|&s| (s, 0)).collect();
        }
    }
    // levels[i] holds level h-i; leaves are the last frontier's states.
    let leaf_states: Vec<u32> = frontier_pairs.iter().map(|&(s, _)| s).collect();

    // Bottom-up: rollout leaves, then back the values up level by level.
    let leaf_vals = par::map_collect(&leaf_states, |&s| leaf_value(model, policy, s, params));
    let mut vhat = vec![0.0f64; n_states];
    for (&s, &v) in leaf_states.iter().zip(&leaf_vals) {
        vhat[s as usize] = v;
    }

    let mut layer_sizes = vec![0usize; h + 1];
    layer_sizes[0] = leaf_states.len();
    let mut branch_samples: u64 = 0;
    let mut q_root: BTreeMap<(usize, usize), f64> = BTreeMap::new();

    for k in 1..=h {
        let level = &levels[h - k];
        layer_sizes[k] = level.states.len();
        let m_k = params.m_level(k);
        branch_samples += level.pairs.len() as u64 * m_k;
        let backed: Vec<f64> = par::map_collect(&level.pairs, |(s, a, children)| {
            let mut sum = 0.0;
            for &(child, mult) in children {
                sum += mult as f64 * vhat[child as usize];
            }
            let q = model.reward(*s as usize, *a as usize) + gamma * sum / m_k as f64;
            q.clamp(0.0, clamp_hi)
        });
        if k == h {
            for ((s, a, _), q) in level.pairs.iter().zip(&backed) {
                q_root.insert((*s as usize, *a as usize), *q);
            }
        } else {
            let mut next_vhat = vec![0.0f64; n_states];
            debug_assert_eq!(level.pairs.len(), level.states.len() * n_actions);
            for (i, &s) in level.states.iter().enumerate() {
                let row = &backed[i * n_actions..(i + 1) * n_actions];
                next_vhat[s as usize] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            vhat = next_vhat;
        }
    }

    let rollout_samples = leaf_states.len() as u64 * params.m_leaf * params.horizon;
    Ok(LookaheadEstimate {
        q_hat: q_root,
        samples: SampleLedger {
            rollout_samples,
            branch_samples,
        },
        layer_sizes,
    })
}

/// High-probability error bound of the estimator (holds with probability at
/// least 1 − δ_V − δ_J for a single queried pair):
///
/// ```text
/// γ^{H+h}/(1-γ)
///   + γ^h/(1-γ) · √(log(2|𝒮₀|/δ_V)/M₀)
///   + γ²(1-γ^{h-1})/(1-γ)² · √(log(2·A·|𝒮₀|·h/δ_J)/M)
/// ```
pub fn aggregate_error_bound(
    gamma: f64,
    h: usize,
    horizon: u64,
    m_leaf: u64,
    m_branch: u64,
    s0_size: usize,
    n_actions: usize,
    delta_v: f64,
    delta_j: f64,
) -> f64 {
    let truncation = gamma.powi(horizon as i32 + h as i32) / (1.0 - gamma);
    let leaf = gamma.powi(h as i32) / (1.0 - gamma)
        * ((2.0 * s0_size as f64 / delta_v).ln() / m_leaf as f64).sqrt();
    let interior = gamma * gamma * (1.0 - gamma.powi(h as i32 - 1)) / ((1.0 - gamma) * (1.0 - gamma))
        * ((2.0 * n_actions as f64 * s0_size as f64 * h as f64 / delta_j).ln() / m_branch as f64)
            .sqrt();
    truncation + leaf + interior
}

/// Sample sizes meeting a target accuracy: the smallest M, M₀ and H with
///
/// ```text
/// M  > 9γ⁴(1-γ^{h-1})²/((1-γ)⁴b²) · log(2h·A·|𝒮₀|·|𝒞|/δ_J)
/// M₀ > 9γ^{2h}/((1-γ)²b²)         · log(2·|𝒮₀|·|𝒞|/δ_V)
/// H  > 1/(1-γ) · log(3γ^h/(b(1-γ)))
/// ```
///
/// where `b = ε(1-γ)(1-γ^h)/4`, `δ_V = δ_J = δ/2`, and `|𝒮₀|` is replaced
/// by its deterministic cap `A^h·M^h`. Since the cap contains M itself, M is
/// resolved by fixed-point iteration from 1 (monotone; the log grows slower
/// than linearly), truncated at 10⁶ with a warning. All counts floor at 1.
pub fn params_for_accuracy(
    gamma: f64,
    h: usize,
    epsilon: f64,
    delta: f64,
    n_actions: usize,
    c_size: usize,
) -> Result<EstimatorParams> {
    const M_CAP: u64 = 1_000_000;
    if h == 0 || n_actions == 0 || c_size == 0 {
        return Err(Error::InvalidParameter {
            what: "params_for_accuracy",
            details: "h, A and |𝒞| must be positive".into(),
        });
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter {
            what: "epsilon",
            details: format!("must be positive, got {epsilon}"),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter {
            what: "delta",
            details: format!("must lie in (0, 1), got {delta}"),
        });
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter {
            what: "discount",
            details: format!("must lie in (0, 1), got {gamma}"),
        });
    }
    let b = epsilon * (1.0 - gamma) * (1.0 - gamma.powi(h as i32)) / 4.0;
    let delta_half = delta / 2.0;
    let a = n_actions as f64;
    let c = c_size as f64;

    let coef_m =
        9.0 * gamma.powi(4) * (1.0 - gamma.powi(h as i32 - 1)).powi(2) / ((1.0 - gamma).powi(4) * b * b);
    let mut m: u64 = 1;
    let mut capped = false;
    for _ in 0..200 {
        let ln_s0 = h as f64 * (a.ln() + (m as f64).ln());
        let ln_arg = (2.0 * h as f64 * a * c / delta_half).ln() + ln_s0;
        let bound = coef_m * ln_arg.max(0.0);
        let next = if bound >= M_CAP as f64 {
            capped = true;
            M_CAP
        } else {
            bound.floor() as u64 + 1
        };
        if next == m {
            break;
        }
        m = next;
    }
    if capped {
        log::warn!("branch width M hit the {M_CAP} cap; the requested accuracy is unattainable at sane budgets");
    }

    let ln_s0 = h as f64 * (a.ln() + (m as f64).ln());
    let coef_m0 = 9.0 * gamma.powi(2 * h as i32) / ((1.0 - gamma).powi(2) * b * b);
    let m0_bound = coef_m0 * ((2.0 * c / delta_half).ln() + ln_s0).max(0.0);
    let m_leaf = if m0_bound >= u64::MAX as f64 {
        log::warn!("rollout count M₀ saturates u64");
        u64::MAX
    } else {
        m0_bound.floor() as u64 + 1
    };

    let h_arg = 3.0 * gamma.powi(h as i32) / (b * (1.0 - gamma));
    let horizon = if h_arg <= 1.0 {
        1
    } else {
        let bound = h_arg.ln() / (1.0 - gamma);
        if bound >= u64::MAX as f64 {
            u64::MAX
        } else {
            (bound.floor() as u64 + 1).max(1)
        }
    };

    Ok(EstimatorParams {
        h,
        m_leaf,
        m_branch: vec![m; h],
        horizon,
        rng_seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs;
    use crate::mdp::{lookahead_values, policy_eval_exact};
    use approx::assert_abs_diff_eq;

    fn single_state_mdp(gamma: f64, r: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![r], gamma, vec![1.0]).unwrap()
    }

    /// Deterministic 2-state chain: 0 → 1 → 1, rewards 0.2 / 0.8.
    fn chain() -> TabularMdp {
        TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![0.2, 0.8],
            0.5,
            vec![1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn rollout_on_single_state_is_truncated_geometric() {
        let mdp = single_state_mdp(0.5, 1.0);
        let pi = Policy::uniform(1, 1);
        for m0 in [1, 7] {
            let mut rng = crate::rng::node_rng(1, DOMAIN_ROLLOUT, 0, 0, 0, 0);
            let v = rollout_value(&mdp, &pi, 0, m0, 3, &mut rng);
            assert_abs_diff_eq!(v, 1.75, epsilon = 1e-15);
        }
    }

    #[test]
    fn rollout_with_zero_rewards_is_zero() {
        let mdp = single_state_mdp(0.9, 0.0);
        let pi = Policy::uniform(1, 1);
        let mut rng = crate::rng::node_rng(1, DOMAIN_ROLLOUT, 0, 0, 0, 0);
        assert_eq!(rollout_value(&mdp, &pi, 0, 5, 50, &mut rng), 0.0);
    }

    #[test]
    fn rollout_on_chain_matches_hand_unrolled_return() {
        let mdp = chain();
        let pi = Policy::uniform(2, 1);
        let mut rng = crate::rng::node_rng(1, DOMAIN_ROLLOUT, 0, 0, 0, 0);
        let v = rollout_value(&mdp, &pi, 0, 3, 4, &mut rng);
        // 0.2 + 0.5·0.8 + 0.25·0.8 + 0.125·0.8
        assert_abs_diff_eq!(v, 0.2 + 0.8 * (0.5 + 0.25 + 0.125), epsilon = 1e-15);
    }

    #[test]
    fn estimate_on_deterministic_mdp_has_only_truncation_bias() {
        let mdp = chain();
        let pi = Policy::uniform(2, 1);
        let params = EstimatorParams::uniform(1, 1, 1, 40, 3);
        let est = estimate_q_h(&mdp, &pi, &[(0, 0), (1, 0)], &params).unwrap();
        let (_, q) = lookahead_values(&mdp, &pi, 1).unwrap();
        let bias = 0.5f64.powi(40) / 0.5;
        for (&(s, a), &v) in &est.q_hat {
            assert!((v - q.get(s, a)).abs() <= bias + 1e-12);
        }
    }

    #[test]
    fn single_action_mdp_estimator_targets_q_pi_for_any_depth() {
        let mdp = envs::build_random_mdp(4, 1, 0.8, 11, 0.0).unwrap();
        let pi = Policy::uniform(4, 1);
        let v_pi = policy_eval_exact(&mdp, &pi).unwrap();
        let queries: Vec<(usize, usize)> = (0..4).map(|s| (s, 0)).collect();
        for h in [1usize, 3] {
            let params = EstimatorParams::uniform(h, 400, 400, 120, 5);
            let est = estimate_q_h(&mdp, &pi, &queries, &params).unwrap();
            let (_, q) = lookahead_values(&mdp, &pi, h).unwrap();
            let bound = aggregate_error_bound(0.8, h, 120, 400, 400, est.layer_sizes[0], 1, 0.025, 0.025);
            for (&(s, a), &v) in &est.q_hat {
                assert!(
                    (v - q.get(s, a)).abs() <= bound,
                    "h={h}: |Q̂-Q|={} > bound={bound}",
                    (v - q.get(s, a)).abs()
                );
            }
            let _ = v_pi;
        }
    }

    #[test]
    fn ledger_matches_analytic_counts() {
        let mdp = envs::build_random_mdp(5, 2, 0.9, 2, 0.0).unwrap();
        let pi = Policy::uniform(5, 2);
        let params = EstimatorParams::uniform(2, 7, 3, 11, 9);
        let queries: Vec<(usize, usize)> = vec![(0, 0), (0, 1), (2, 1)];
        let est = estimate_q_h(&mdp, &pi, &queries, &params).unwrap();
        assert_eq!(
            est.samples.rollout_samples,
            est.layer_sizes[0] as u64 * 3 * 11
        );
        // Level 2 expands the 3 queried pairs; level 1 expands |S_1|·A pairs.
        assert_eq!(
            est.samples.branch_samples,
            3 * 7 + est.layer_sizes[1] as u64 * 2 * 7
        );
    }

    #[test]
    fn estimates_are_deterministic_and_bounded() {
        let mdp = envs::build_random_mdp(6, 2, 0.9, 4, 0.0).unwrap();
        let pi = Policy::uniform(6, 2);
        let params = EstimatorParams::uniform(3, 5, 4, 20, 21);
        let queries: Vec<(usize, usize)> = (0..6).flat_map(|s| [(s, 0), (s, 1)]).collect();
        let a = estimate_q_h(&mdp, &pi, &queries, &params).unwrap();
        let b = estimate_q_h(&mdp, &pi, &queries, &params).unwrap();
        assert_eq!(a, b);
        assert!(a.q_hat.values().all(|&v| (0.0..=10.0).contains(&v)));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn estimates_do_not_depend_on_thread_count() {
        let mdp = envs::build_random_mdp(6, 2, 0.95, 4, 0.0).unwrap();
        let pi = Policy::uniform(6, 2);
        let params = EstimatorParams::uniform(2, 16, 8, 25, 77);
        let queries: Vec<(usize, usize)> = (0..6).flat_map(|s| [(s, 0), (s, 1)]).collect();
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| estimate_q_h(&mdp, &pi, &queries, &params).unwrap());
        let b = pool4.install(|| estimate_q_h(&mdp, &pi, &queries, &params).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mean_error_shrinks_as_samples_double() {
        let mdp = envs::build_random_mdp(4, 2, 0.9, 13, 0.0).unwrap();
        let pi = Policy::uniform(4, 2);
        let (_, q) = lookahead_values(&mdp, &pi, 2).unwrap();
        let queries: Vec<(usize, usize)> = (0..4).flat_map(|s| [(s, 0), (s, 1)]).collect();
        let mut means = Vec::new();
        for level in 0..4u32 {
            let m = 25u64 << level;
            let mut total = 0.0;
            for seed in 0..50u64 {
                let params = EstimatorParams::uniform(2, m, m, 60, seed);
                let est = estimate_q_h(&mdp, &pi, &queries, &params).unwrap();
                let worst = est
                    .q_hat
                    .iter()
                    .map(|(&(s, a), &v)| (v - q.get(s, a)).abs())
                    .fold(0.0f64, f64::max);
                total += worst;
            }
            means.push(total / 50.0);
        }
        for w in means.windows(2) {
            assert!(w[1] < w[0], "means not decreasing: {means:?}");
        }
    }

    #[test]
    fn depth_one_estimator_mean_matches_closed_form() {
        // E[Q̂₁(s,a)] = r(s,a) + γ Σ_s' P(s'|s,a) · V_H^π(s') where V_H is the
        // H-truncated value; check the empirical mean across seeds to 3 SE.
        let mdp = TabularMdp::new(
            2,
            1,
            vec![0.3, 0.7, 0.6, 0.4],
            vec![0.25, 0.9],
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        let pi = Policy::uniform(2, 1);
        let horizon = 30u64;
        // Truncated value by H backups of 𝒯^π on the zero vector.
        let mut v_trunc = crate::mdp::VTable::zeros(2);
        for _ in 0..horizon {
            v_trunc = crate::mdp::bellman_expected(&mdp, &pi, &v_trunc).unwrap();
        }
        let target = 0.25
            + 0.9 * (0.3 * v_trunc.values[0] + 0.7 * v_trunc.values[1]);
        let n = 10_000u64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..n {
            let params = EstimatorParams::uniform(1, 4, 4, horizon, seed);
            let est = estimate_q_h(&mdp, &pi, &[(0, 0)], &params).unwrap();
            let v = est.q_hat[&(0, 0)];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - target).abs() <= 3.0 * se,
            "mean={mean}, target={target}, 3se={}",
            3.0 * se
        );
    }

    #[test]
    fn accuracy_params_match_formula_spot_checks() {
        // γ=0.9, h=1, ε=0.1, δ=0.1 ⇒ b = 2.5e-4 and
        // H = ⌊10·ln(2.7/2.5e-5)⌋ + 1.
        let p = params_for_accuracy(0.9, 1, 0.1, 0.1, 2, 4).unwrap();
        let b = 0.1 * 0.1 * 0.1 / 4.0;
        let expected_h = ((3.0 * 0.9 / (b * 0.1)).ln() / 0.1).floor() as u64 + 1;
        assert_eq!(p.horizon, expected_h);
        assert_eq!(p.m_branch, vec![1]); // (1-γ^{h-1}) = 0 at h = 1
        assert!(p.m_leaf > 1_000_000);
    }

    #[test]
    fn accuracy_params_floor_at_one_for_loose_targets() {
        let p = params_for_accuracy(0.5, 2, 1e9, 0.5, 2, 1).unwrap();
        assert_eq!(p.m_leaf, 1);
        assert_eq!(p.horizon, 1);
        assert_eq!(p.m_branch, vec![1, 1]);
    }

    #[test]
    fn accuracy_params_golden_case() {
        // Regression pin: γ=0.99, h=5, ε=0.5, δ=0.05. The branch width hits
        // its 10⁶ cap and the remaining counts follow from it.
        let p = params_for_accuracy(0.99, 5, 0.5, 0.05, 2, 1).unwrap();
        assert_eq!(p.m_branch, vec![1_000_000; 5]);
        assert_eq!(p.horizon, 1536);
        assert_eq!(p.m_leaf, 2_733_437_363_477_795);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(params_for_accuracy(0.9, 1, 0.0, 0.1, 2, 1).is_err());
        assert!(params_for_accuracy(0.9, 1, 0.1, 1.5, 2, 1).is_err());
        let bad = EstimatorParams {
            h: 2,
            m_leaf: 1,
            m_branch: vec![1],
            horizon: 1,
            rng_seed: 0,
        };
        assert!(bad.validate().is_err());
    }
}
