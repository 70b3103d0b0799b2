//! Finite MDPs, Bellman operators, and exact evaluation.
//!
//! States and actions are `0..n_states` and `0..n_actions`. The transition
//! kernel is stored as a dense row-major tensor `[S][A][S]`, rewards as a
//! dense `[S][A]` matrix with entries in `[0, 1]`, and the discount is
//! strictly inside `(0, 1)`, so every value function of the MDP lives in
//! `[0, 1/(1-γ)]`.
//!
//! Operator conventions: `(Pv)(s,a) = Σ_{s'} P(s'|s,a) v(s')`, the expected
//! Bellman operator `𝒯^π V = r^π + γ P^π V`, and the optimality operator
//! `𝒯 V = max_a [r + γ P V]`. Both operators are γ-contractions in the max
//! norm; their fixed points are `V^π` and `V★`.
//!
//! # Interchange schema
//!
//! [`TabularMdp::to_json`] / [`TabularMdp::from_json`] read and write a flat
//! JSON object with exactly these fields:
//!
//! ```json
//! {
//!   "n_states": 2,
//!   "n_actions": 1,
//!   "discount": 0.9,
//!   "reward": [0.0, 1.0],          // row-major [s][a]
//!   "transition": [0.0, 1.0, ...], // row-major [s][a][s']
//!   "initial_dist": [1.0, 0.0]
//! }
//! ```

use crate::error::{Error, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};

/// Tolerance for "sums to one" checks on stored distributions.
pub const DISTRIBUTION_TOL: f64 = 1e-12;

/// Default tie tolerance for greedy action sets. Kept above linear-solve
/// residual noise so solver jitter cannot manufacture or destroy ties.
pub const GREEDY_TOL: f64 = 1e-9;

/// Largest state count solved by direct dense LU; larger systems fall back
/// to fixed-point iteration on `𝒯^π` (see [`EvalMethod`]).
pub const DENSE_SOLVE_LIMIT: usize = 600;

const EVAL_RESIDUAL: f64 = 1e-12;

/// Per-(s,a) nonzero structure of the kernel, cached at construction for
/// sparse backups and inverse-CDF sampling.
#[derive(Debug, Clone)]
struct KernelRow {
    support: Box<[(u32, f64)]>,
    cdf: Box<[f64]>,
}

/// A finite discounted MDP.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    rows: Vec<KernelRow>,
}

#[derive(Serialize, Deserialize)]
struct MdpSchema {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    reward: Vec<f64>,
    transition: Vec<f64>,
    initial_dist: Vec<f64>,
}

impl TabularMdp {
    /// Builds and validates an MDP from dense row-major arrays.
    ///
    /// `transition[(s*A + a)*S + s']`, `reward[s*A + a]`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidParameter {
                what: "state/action count",
                details: "n_states and n_actions must be positive".into(),
            });
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidParameter {
                what: "discount",
                details: format!("γ must lie strictly in (0, 1), got {discount}"),
            });
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch {
                what: "transition tensor",
                expected: n_states * n_actions * n_states,
                got: transition.len(),
            });
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                what: "reward matrix",
                expected: n_states * n_actions,
                got: reward.len(),
            });
        }
        if initial_dist.len() != n_states {
            return Err(Error::DimensionMismatch {
                what: "initial distribution",
                expected: n_states,
                got: initial_dist.len(),
            });
        }
        for (i, &r) in reward.iter().enumerate() {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidParameter {
                    what: "reward",
                    details: format!("reward[{i}] = {r} outside [0, 1]"),
                });
            }
        }
        check_distribution("initial_dist", &initial_dist)?;
        let mut rows = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                check_distribution(&format!("transition row (s={s}, a={a})"), row)?;
                rows.push(KernelRow::from_dense(row));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            initial_dist,
            rows,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Dense kernel row `P(·|s,a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    /// Upper bound `1/(1-γ)` on any value of this MDP.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// Draws `s' ~ P(·|s,a)` by inverse-CDF lookup.
    pub fn sample_next(&self, s: usize, a: usize, rng: &mut dyn RngCore) -> usize {
        let row = &self.rows[s * self.n_actions + a];
        let u = rand::Rng::gen::<f64>(rng);
        let i = row.cdf.partition_point(|&c| c <= u);
        let i = i.min(row.support.len() - 1);
        row.support[i].0 as usize
    }

    fn sparse_dot(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.rows[s * self.n_actions + a]
            .support
            .iter()
            .map(|&(j, p)| p * v[j as usize])
            .sum()
    }

    pub fn to_json(&self) -> String {
        let schema = MdpSchema {
            n_states: self.n_states,
            n_actions: self.n_actions,
            discount: self.discount,
            reward: self.reward.clone(),
            transition: self.transition.clone(),
            initial_dist: self.initial_dist.clone(),
        };
        serde_json::to_string_pretty(&schema).expect("schema serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: MdpSchema =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        Self::new(
            schema.n_states,
            schema.n_actions,
            schema.transition,
            schema.reward,
            schema.discount,
            schema.initial_dist,
        )
    }
}

impl KernelRow {
    fn from_dense(row: &[f64]) -> Self {
        let support: Vec<(u32, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(j, &p)| (j as u32, p))
            .collect();
        let mut cdf = Vec::with_capacity(support.len());
        let mut acc = 0.0;
        for &(_, p) in &support {
            acc += p;
            cdf.push(acc);
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        Self {
            support: support.into_boxed_slice(),
            cdf: cdf.into_boxed_slice(),
        }
    }
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if let Some(&bad) = p.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidDistribution {
            what: format!("{what} (entry {bad})"),
            sum: p.iter().sum(),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(Error::InvalidDistribution {
            what: what.to_string(),
            sum,
        });
    }
    Ok(())
}

/// A row-stochastic policy table π(a|s).
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    /// Validates that every row of `probs` (row-major `[S][A]`) is a
    /// distribution.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::DimensionMismatch {
                what: "policy table",
                expected: n_states * n_actions,
                got: probs.len(),
            });
        }
        for s in 0..n_states {
            check_distribution(
                &format!("policy row (s={s})"),
                &probs[s * n_actions..(s + 1) * n_actions],
            )?;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    /// Uniform policy; lies in the relative interior of the policy set.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            n_states,
            n_actions,
            probs: vec![p; n_states * n_actions],
        }
    }

    /// Deterministic policy from one action index per state.
    pub fn deterministic(n_states: usize, n_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != n_states {
            return Err(Error::DimensionMismatch {
                what: "action list",
                expected: n_states,
                got: actions.len(),
            });
        }
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidParameter {
                    what: "action index",
                    details: format!("action {a} out of range for state {s}"),
                });
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// True iff every entry is strictly positive (π ∈ relint(Π)).
    pub fn is_interior(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// Samples an action from π(·|s).
    pub fn sample_action(&self, s: usize, rng: &mut dyn RngCore) -> usize {
        sample_from_row(self.row(s), rng)
    }
}

/// Inverse-CDF draw from a probability row. Callers guarantee the row sums
/// to one; the final entry absorbs rounding slack.
pub(crate) fn sample_from_row(row: &[f64], rng: &mut dyn RngCore) -> usize {
    let u = rand::Rng::gen::<f64>(rng);
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.len() - 1
}

/// A state value vector (V^π, V★, 𝒯^k V, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    pub values: Vec<f64>,
}

impl VTable {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            values: vec![0.0; n_states],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// ‖self − other‖_∞.
    pub fn max_abs_diff(&self, other: &VTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A state-action value table (Q^π, Q_h^π).
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

fn check_v_shape(mdp: &TabularMdp, v: &VTable) -> Result<()> {
    if v.len() != mdp.n_states {
        return Err(Error::DimensionMismatch {
            what: "value vector",
            expected: mdp.n_states,
            got: v.len(),
        });
    }
    Ok(())
}

fn check_policy_shape(mdp: &TabularMdp, policy: &Policy) -> Result<()> {
    if policy.n_states != mdp.n_states || policy.n_actions != mdp.n_actions {
        return Err(Error::DimensionMismatch {
            what: "policy table",
            expected: mdp.n_states * mdp.n_actions,
            got: policy.n_states * policy.n_actions,
        });
    }
    Ok(())
}

/// `(Pv)(s,a) = Σ_{s'} P(s'|s,a) v(s')`.
pub fn apply_p(mdp: &TabularMdp, v: &VTable) -> Result<QTable> {
    check_v_shape(mdp, v)?;
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            q.set(s, a, mdp.sparse_dot(s, a, &v.values));
        }
    }
    Ok(q)
}

/// Expected Bellman operator `𝒯^π V = r^π + γ P^π V`.
pub fn bellman_expected(mdp: &TabularMdp, policy: &Policy, v: &VTable) -> Result<VTable> {
    check_v_shape(mdp, v)?;
    check_policy_shape(mdp, policy)?;
    let mut out = vec![0.0; mdp.n_states];
    for s in 0..mdp.n_states {
        let row = policy.row(s);
        let mut acc = 0.0;
        for (a, &pa) in row.iter().enumerate() {
            if pa > 0.0 {
                acc += pa * (mdp.reward(s, a) + mdp.discount * mdp.sparse_dot(s, a, &v.values));
            }
        }
        out[s] = acc;
    }
    Ok(VTable::from_vec(out))
}

/// Bellman optimality operator `𝒯 V = max_a [r + γ P V]`.
pub fn bellman_optimal(mdp: &TabularMdp, v: &VTable) -> Result<VTable> {
    check_v_shape(mdp, v)?;
    let mut out = vec![0.0; mdp.n_states];
    for s in 0..mdp.n_states {
        let mut best = f64::NEG_INFINITY;
        for a in 0..mdp.n_actions {
            let q = mdp.reward(s, a) + mdp.discount * mdp.sparse_dot(s, a, &v.values);
            if q > best {
                best = q;
            }
        }
        out[s] = best;
    }
    Ok(VTable::from_vec(out))
}

/// How [`policy_eval_exact`] solves `(I - γ P^π) V = r^π`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    /// Dense LU factorization of the S×S system.
    Direct,
    /// Fixed-point iteration on `𝒯^π`, optionally warm-started.
    Iterative,
    /// `Direct` up to [`DENSE_SOLVE_LIMIT`] states, `Iterative` beyond.
    Auto,
}

/// Exact policy evaluation: the fixed point `V^π` of `𝒯^π`.
///
/// The result satisfies `‖𝒯^π V − V‖_∞ ≤ 1e-10`; a larger residual is
/// reported as a solve failure (it cannot happen for γ < 1 unless the
/// arithmetic itself broke down).
pub fn policy_eval_exact(mdp: &TabularMdp, policy: &Policy) -> Result<VTable> {
    policy_eval_with(mdp, policy, EvalMethod::Auto, None)
}

/// [`policy_eval_exact`] with an explicit method and optional warm start for
/// the iterative path.
pub fn policy_eval_with(
    mdp: &TabularMdp,
    policy: &Policy,
    method: EvalMethod,
    warm: Option<&VTable>,
) -> Result<VTable> {
    check_policy_shape(mdp, policy)?;
    let direct = match method {
        EvalMethod::Direct => true,
        EvalMethod::Iterative => false,
        EvalMethod::Auto => mdp.n_states <= DENSE_SOLVE_LIMIT,
    };
    let v = if direct {
        policy_eval_direct(mdp, policy)?
    } else {
        policy_eval_iterative(mdp, policy, warm)?
    };
    let residual = bellman_expected(mdp, policy, &v)?.max_abs_diff(&v);
    if residual > 1e-10 {
        return Err(Error::SolveFailure(format!(
            "policy evaluation residual {residual:.3e} exceeds 1e-10"
        )));
    }
    Ok(v)
}

fn policy_eval_direct(mdp: &TabularMdp, policy: &Policy) -> Result<VTable> {
    let n = mdp.n_states;
    let mut mat = nalgebra::DMatrix::<f64>::identity(n, n);
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    for s in 0..n {
        let row = policy.row(s);
        let mut r_pi = 0.0;
        for (a, &pa) in row.iter().enumerate() {
            if pa > 0.0 {
                r_pi += pa * mdp.reward(s, a);
                for &(j, p) in mdp.rows[s * mdp.n_actions + a].support.iter() {
                    mat[(s, j as usize)] -= mdp.discount * pa * p;
                }
            }
        }
        rhs[s] = r_pi;
    }
    let lu = mat.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::SolveFailure("singular (I - γPᵖ) system".into()))?;
    Ok(VTable::from_vec(sol.data.into()))
}

fn policy_eval_iterative(
    mdp: &TabularMdp,
    policy: &Policy,
    warm: Option<&VTable>,
) -> Result<VTable> {
    let gamma = mdp.discount;
    let mut v = match warm {
        Some(w) if w.len() == mdp.n_states => w.clone(),
        _ => VTable::zeros(mdp.n_states),
    };
    // Residual target below the 1e-10 contract so downstream gap
    // comparisons keep headroom.
    let target = EVAL_RESIDUAL;
    let cap = iteration_cap(gamma, target) + 1000;
    for _ in 0..cap {
        let next = bellman_expected(mdp, policy, &v)?;
        let residual = next.max_abs_diff(&v);
        v = next;
        if residual * gamma / (1.0 - gamma) <= target {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        what: "iterative policy evaluation",
        iterations: cap,
    })
}

fn iteration_cap(gamma: f64, tol: f64) -> usize {
    let t = (tol * (1.0 - gamma)).ln() / gamma.ln();
    t.ceil().max(1.0) as usize
}

/// Value iteration to `‖V − V★‖_∞ ≤ tol`, plus a 1-step greedy deterministic
/// policy of the final iterate (ties broken to the lowest action index).
pub fn optimal_value(mdp: &TabularMdp, tol: f64) -> Result<(VTable, Policy)> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            what: "tolerance",
            details: format!("must be positive, got {tol}"),
        });
    }
    let gamma = mdp.discount;
    // Stopping rule ‖𝒯V − V‖ ≤ tol(1-γ)/γ guarantees ‖V − V★‖ ≤ tol.
    let residual_target = tol * (1.0 - gamma) / gamma;
    let cap = iteration_cap(gamma, tol) + 1000;
    let mut v = VTable::zeros(mdp.n_states);
    let mut converged = false;
    for _ in 0..cap {
        let next = bellman_optimal(mdp, &v)?;
        let residual = next.max_abs_diff(&v);
        v = next;
        if residual <= residual_target {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "value iteration",
            iterations: cap,
        });
    }
    let q = q_from_v(mdp, &v);
    let actions: Vec<usize> = (0..mdp.n_states)
        .map(|s| argmax_lowest(q.row(s)))
        .collect();
    let policy = Policy::deterministic(mdp.n_states, mdp.n_actions, &actions)?;
    Ok((v, policy))
}

/// Lowest-index argmax; the crate-wide deterministic tie-breaking rule.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (a, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = a;
        }
    }
    best
}

/// `r + γ P v` as a Q-table.
pub(crate) fn q_from_v(mdp: &TabularMdp, v: &VTable) -> QTable {
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            q.set(
                s,
                a,
                mdp.reward(s, a) + mdp.discount * mdp.sparse_dot(s, a, &v.values),
            );
        }
    }
    q
}

/// Lookahead values: `V_h^π = 𝒯^{h-1} V^π` and
/// `Q_h^π(s,a) = r(s,a) + γ (P V_h^π)(s,a)`.
///
/// `h = 1` gives the classic `Q^π`.
pub fn lookahead_values(mdp: &TabularMdp, policy: &Policy, h: usize) -> Result<(VTable, QTable)> {
    let v_pi = policy_eval_exact(mdp, policy)?;
    lookahead_from_value(mdp, &v_pi, h)
}

/// Lookahead values from an already-evaluated `V^π`.
pub fn lookahead_from_value(mdp: &TabularMdp, v_pi: &VTable, h: usize) -> Result<(VTable, QTable)> {
    if h == 0 {
        return Err(Error::InvalidParameter {
            what: "lookahead depth",
            details: "h must be at least 1".into(),
        });
    }
    check_v_shape(mdp, v_pi)?;
    let mut v_h = v_pi.clone();
    for _ in 0..h - 1 {
        v_h = bellman_optimal(mdp, &v_h)?;
    }
    let q_h = q_from_v(mdp, &v_h);
    Ok((v_h, q_h))
}

/// Per-state sets `{a : Q(s,a) ≥ max_a' Q(s,a') − tol}`, ascending.
pub fn greedy_set(q: &QTable, tol: f64) -> Vec<Vec<usize>> {
    (0..q.n_states)
        .map(|s| {
            let row = q.row(s);
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v >= best - tol)
                .map(|(a, _)| a)
                .collect()
        })
        .collect()
}
