//! Linear function approximation for lookahead policy mirror descent.
//!
//! Large state spaces are handled by approximating `Q_h ≈ Ψθ` for a feature
//! matrix `Ψ ∈ ℝ^{SA×d}`. Per iteration the Monte Carlo estimator produces
//! targets on a small core set `𝒞` of state-action pairs, a weighted least
//! squares fit yields `θ_k`, and the policy is advanced from `Ψθ_k`.
//!
//! Extrapolation from `𝒞` to all pairs is controlled by a D-optimal
//! (Kiefer-Wolfowitz) design: a distribution ρ on at most `d(d+1)/2` core
//! points whose Gram matrix `G_ρ = Σ ρ ψψᵀ` keeps every candidate feature
//! norm `‖ψ(z)‖_{G_ρ^{-1}}` at or below `√d` (times a small slack). The
//! design is computed by Frank-Wolfe ascent on `log det G_ρ` with away
//! steps, followed by support truncation and reverification.
//!
//! Policies need not be stored tabularly: a policy row `π_k(·|s)` is
//! reconstructed on demand from `θ_0..θ_{k-1}` by replaying the per-state
//! proximal updates with stepsize `η_j(s) = D_φ(π̃(·|s), π_j(·|s))/γ^{2h(j+1)}`
//! (the per-state version of the adaptive rule), memoizing every row.
//!
//! # Feature file schema
//!
//! [`FeatureMap::to_json`] / [`FeatureMap::from_json`] use a flat JSON
//! object: `{"n_states", "n_actions", "dim", "data"}` with `data` row-major
//! over pairs then feature components (`data[(s*A + a)*d + j]`).

use crate::engine::{policy_improvement, IterateRecord, IterateTrace, RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::estimator::{estimate_q_h, GenerativeModel, PolicyProvider};
use crate::mdp::{
    lookahead_values, optimal_value, policy_eval_exact, Policy, QTable, TabularMdp, GREEDY_TOL,
};
use crate::mirror::{bregman, prox_update, MirrorMap};
use crate::rng::{derive_seed, DOMAIN_ITERATION};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

/// State-action feature map ψ(s,a) ∈ ℝ^d, stored densely.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FeatureSchema {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Validates shape and full column rank (via column-pivoted QR).
    pub fn new(n_states: usize, n_actions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidParameter {
                what: "feature map",
                details: "dimensions must be positive".into(),
            });
        }
        if data.len() != n_states * n_actions * dim {
            return Err(Error::DimensionMismatch {
                what: "feature data",
                expected: n_states * n_actions * dim,
                got: data.len(),
            });
        }
        let map = Self {
            n_states,
            n_actions,
            dim,
            data,
        };
        let m = map.matrix_of(&map.all_pairs());
        let qr = m.col_piv_qr();
        let diag = qr.r().map_diagonal(|x| x.abs());
        let tol = 1e-10 * diag.max();
        let rank = diag.iter().filter(|&&x| x > tol).count();
        if rank < dim {
            return Err(Error::RankDeficient { rank, dim });
        }
        Ok(map)
    }

    /// Indicator features: d = S·A, ψ(s,a) = e_{s·A+a}.
    pub fn one_hot(n_states: usize, n_actions: usize) -> Self {
        let d = n_states * n_actions;
        let mut data = vec![0.0; d * d];
        for z in 0..d {
            data[z * d + z] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            dim: d,
            data,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn eval(&self, s: usize, a: usize) -> &[f64] {
        let z = s * self.n_actions + a;
        &self.data[z * self.dim..(z + 1) * self.dim]
    }

    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n_states)
            .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
            .collect()
    }

    /// Stacked feature matrix of the given pairs (rows in pair order).
    pub fn matrix_of(&self, pairs: &[(usize, usize)]) -> DMatrix<f64> {
        DMatrix::from_fn(pairs.len(), self.dim, |i, j| {
            let (s, a) = pairs[i];
            self.eval(s, a)[j]
        })
    }

    /// (Ψθ)_s: the A-vector of fitted values at state `s`.
    pub fn logits_row(&self, theta: &[f64], s: usize, out: &mut Vec<f64>) {
        out.clear();
        for a in 0..self.n_actions {
            let psi = self.eval(s, a);
            out.push(psi.iter().zip(theta).map(|(x, t)| x * t).sum());
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&FeatureSchema {
            n_states: self.n_states,
            n_actions: self.n_actions,
            dim: self.dim,
            data: self.data.clone(),
        })
        .expect("schema serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: FeatureSchema =
            serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        Self::new(s.n_states, s.n_actions, s.dim, s.data)
    }
}

/// Kiefer-Wolfowitz core set: pairs, weights, and the associated Gram data.
#[derive(Debug, Clone)]
pub struct DesignSet {
    core: Vec<(usize, usize)>,
    weights: Vec<f64>,
    gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    /// Achieved sup over candidates of ‖ψ(z)‖_{G_ρ^{-1}}.
    max_norm: f64,
}

impl DesignSet {
    pub fn core(&self) -> &[(usize, usize)] {
        &self.core
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    pub fn max_design_norm(&self) -> f64 {
        self.max_norm
    }
}

fn gram_of(features: &FeatureMap, pairs: &[(usize, usize)], weights: &[f64]) -> DMatrix<f64> {
    let d = features.dim();
    let mut g = DMatrix::<f64>::zeros(d, d);
    for (&(s, a), &w) in pairs.iter().zip(weights) {
        if w > 0.0 {
            let psi = features.eval(s, a);
            for i in 0..d {
                for j in 0..d {
                    g[(i, j)] += w * psi[i] * psi[j];
                }
            }
        }
    }
    g
}

fn invert_spd(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    g.clone()
        .try_inverse()
        .ok_or_else(|| Error::SolveFailure("singular design Gram matrix".into()))
}

fn design_norms(features: &FeatureMap, pairs: &[(usize, usize)], gram_inv: &DMatrix<f64>) -> Vec<f64> {
    let d = features.dim();
    pairs
        .iter()
        .map(|&(s, a)| {
            let psi = features.eval(s, a);
            let mut q = 0.0;
            for i in 0..d {
                let mut gi = 0.0;
                for j in 0..d {
                    gi += gram_inv[(i, j)] * psi[j];
                }
                q += psi[i] * gi;
            }
            q
        })
        .collect()
}

/// Frank-Wolfe ascent on log det G(ρ) with away steps, to
/// `max_z g_z ≤ d·(1+slack)²`.
fn frank_wolfe_design(
    features: &FeatureMap,
    candidates: &[(usize, usize)],
    slack: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let d = features.dim() as f64;
    let n = candidates.len();
    let mut weights = vec![1.0 / n as f64; n];
    let target = d * (1.0 + slack) * (1.0 + slack);
    for _ in 0..max_iters {
        let gram = gram_of(features, candidates, &weights);
        let inv = invert_spd(&gram)?;
        let norms = design_norms(features, candidates, &inv);
        let (z_fw, &g_fw) = norms
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        if g_fw <= target {
            return Ok(weights);
        }
        // Away candidate: smallest sensitivity among supported points.
        let away = norms
            .iter()
            .enumerate()
            .filter(|(i, _)| weights[*i] > 0.0)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap());
        // Closed-form optimal steps of log det along both directions.
        let lambda = ((g_fw / d - 1.0) / (g_fw - 1.0)).clamp(0.0, 1.0);
        let fw_gain = d * (1.0 - lambda).ln() + (1.0 + lambda / (1.0 - lambda) * g_fw).ln();
        let mut away_gain = f64::NEG_INFINITY;
        let mut away_step = 0.0;
        let mut z_away = usize::MAX;
        if let Some((za, &g_a)) = away {
            if g_a < d && weights[za] < 1.0 {
                let mu_opt = (d - g_a) / (g_a * (d - 1.0));
                let mu_max = weights[za] / (1.0 - weights[za]);
                let mu = mu_opt.min(mu_max).max(0.0);
                if mu > 0.0 {
                    away_gain = d * (1.0 + mu).ln() + (1.0 - mu / (1.0 + mu) * g_a).ln();
                    away_step = mu;
                    z_away = za;
                }
            }
        }
        if away_gain > fw_gain && z_away != usize::MAX {
            let mu = away_step;
            for w in weights.iter_mut() {
                *w *= 1.0 + mu;
            }
            weights[z_away] -= mu;
            weights[z_away] = weights[z_away].max(0.0);
        } else {
            for w in weights.iter_mut() {
                *w *= 1.0 - lambda;
            }
            weights[z_fw] += lambda;
        }
        // Drop numerically dead weights and renormalize.
        let mut total = 0.0;
        for w in weights.iter_mut() {
            if *w < 1e-8 {
                *w = 0.0;
            }
            total += *w;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
    Err(Error::NoConvergence {
        what: "Frank-Wolfe design optimization",
        iterations: max_iters,
    })
}

/// Computes a Kiefer-Wolfowitz design over `candidates`:
/// `|𝒞| ≤ d(d+1)/2` and `sup_z ‖ψ(z)‖_{G_ρ^{-1}} ≤ √d·(1+eps_kw)`.
///
/// After Frank-Wolfe convergence the support is truncated to the
/// `d(d+1)/2` largest weights, weights are re-optimized on the truncated
/// support, and the norm condition is reverified against all candidates;
/// on failure the slack relaxes by factors of 2 up to 0.1 before erroring.
pub fn compute_design(
    features: &FeatureMap,
    candidates: &[(usize, usize)],
    eps_kw: f64,
) -> Result<DesignSet> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter {
            what: "design candidates",
            details: "candidate set is empty".into(),
        });
    }
    if !(eps_kw > 0.0) {
        return Err(Error::InvalidParameter {
            what: "design slack",
            details: format!("eps_kw must be positive, got {eps_kw}"),
        });
    }
    let d = features.dim();
    {
        let m = features.matrix_of(candidates);
        let qr = m.col_piv_qr();
        let diag = qr.r().map_diagonal(|x| x.abs());
        let tol = 1e-10 * diag.max();
        let rank = diag.iter().filter(|&&x| x > tol).count();
        if rank < d {
            return Err(Error::RankDeficient { rank, dim: d });
        }
    }
    let max_support = d * (d + 1) / 2;
    let mut eps = eps_kw;
    loop {
        // Solve to half the accepted slack to leave truncation headroom.
        let weights = frank_wolfe_design(features, candidates, eps / 2.0, 200_000)?;
        let mut supported: Vec<(usize, f64)> = weights
            .iter()
            .cloned()
            .enumerate()
            .filter(|&(_, w)| w > 0.0)
            .collect();
        supported.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        supported.truncate(max_support);
        supported.sort_by_key(|&(i, _)| i);
        let total: f64 = supported.iter().map(|&(_, w)| w).sum();
        let mut core_pairs: Vec<(usize, usize)> = Vec::with_capacity(supported.len());
        let mut core_weights: Vec<f64> = Vec::with_capacity(supported.len());
        for &(i, w) in &supported {
            core_pairs.push(candidates[i]);
            core_weights.push(w / total);
        }
        // Re-optimize the weights on the truncated support before verifying.
        if supported.len() < weights.iter().filter(|&&w| w > 0.0).count() {
            if let Ok(rew) = frank_wolfe_design(features, &core_pairs, eps / 2.0, 200_000) {
                core_weights = rew;
            }
        }
        let gram = gram_of(features, &core_pairs, &core_weights);
        if let Ok(gram_inv) = invert_spd(&gram) {
            let norms = design_norms(features, candidates, &gram_inv);
            let worst = norms.iter().cloned().fold(0.0f64, f64::max).sqrt();
            let limit = (d as f64).sqrt() * (1.0 + eps);
            if worst <= limit {
                // Keep only strictly positive weights in the final set.
                let mut pairs = Vec::new();
                let mut ws = Vec::new();
                for (p, w) in core_pairs.iter().zip(&core_weights) {
                    if *w > 0.0 {
                        pairs.push(*p);
                        ws.push(*w);
                    }
                }
                let gram = gram_of(features, &pairs, &ws);
                let gram_inv = invert_spd(&gram)?;
                return Ok(DesignSet {
                    core: pairs,
                    weights: ws,
                    gram,
                    gram_inv,
                    max_norm: worst,
                });
            }
        }
        if eps * 2.0 > 0.1 {
            return Err(Error::DesignVerification(format!(
                "norm condition failed at every slack up to 0.1 (requested {eps_kw})"
            )));
        }
        eps *= 2.0;
    }
}

/// Weighted least squares on the design:
/// `θ̂ = G_ρ^{-1} Σ_{z∈𝒞} ρ(z) R̂(z) ψ(z)`.
pub fn fit_theta(
    design: &DesignSet,
    features: &FeatureMap,
    targets: &BTreeMap<(usize, usize), f64>,
) -> Result<Vec<f64>> {
    let d = features.dim();
    let mut moment = DVector::<f64>::zeros(d);
    for (&(s, a), &w) in design.core.iter().zip(&design.weights) {
        let r = *targets.get(&(s, a)).ok_or(Error::InvalidParameter {
            what: "regression targets",
            details: format!("missing target for core pair ({s}, {a})"),
        })?;
        let psi = features.eval(s, a);
        for i in 0..d {
            moment[i] += w * r * psi[i];
        }
    }
    let theta = &design.gram_inv * moment;
    Ok(theta.data.into())
}

/// Discrete Chebyshev (minimax) linear fit via Lawson's iteratively
/// reweighted least squares. Returns the fitted coefficients and their
/// achieved max absolute residual — a certified upper bound on the best
/// possible `inf_θ ‖y − Ψθ‖_∞`.
pub fn minimax_fit(matrix: &DMatrix<f64>, y: &DVector<f64>, iters: usize) -> (Vec<f64>, f64) {
    let n = matrix.nrows();
    let mut w = DVector::<f64>::from_element(n, 1.0 / n as f64);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..iters {
        let mut ata = DMatrix::<f64>::zeros(matrix.ncols(), matrix.ncols());
        let mut aty = DVector::<f64>::zeros(matrix.ncols());
        for i in 0..n {
            let row = matrix.row(i);
            for p in 0..matrix.ncols() {
                aty[p] += w[i] * row[p] * y[i];
                for q in 0..matrix.ncols() {
                    ata[(p, q)] += w[i] * row[p] * row[q];
                }
            }
        }
        let theta = match ata.lu().solve(&aty) {
            Some(t) => t,
            None => break,
        };
        let resid = y - matrix * &theta;
        let max_err = resid.amax();
        if best.as_ref().map_or(true, |(_, e)| max_err < *e) {
            best = Some((theta.data.as_vec().clone(), max_err));
        }
        let mut total = 0.0;
        for i in 0..n {
            w[i] *= resid[i].abs().max(1e-300);
            total += w[i];
        }
        if total <= 0.0 {
            break;
        }
        w /= total;
    }
    best.expect("at least one Lawson iteration must succeed")
}

/// Run state of the function-approximation algorithm: the fitted parameter
/// vectors, the initial policy, and the memo of reconstructed rows.
pub struct FaRunState {
    thetas: Vec<Vec<f64>>,
    pi0: Policy,
    memo: Mutex<BTreeMap<(usize, u32), Vec<f64>>>,
    logit_evals: AtomicU64,
    memo_hits: AtomicU64,
}

impl FaRunState {
    pub fn new(pi0: Policy) -> Self {
        Self {
            thetas: Vec::new(),
            pi0,
            memo: Mutex::new(BTreeMap::new()),
            logit_evals: AtomicU64::new(0),
            memo_hits: AtomicU64::new(0),
        }
    }

    pub fn push_theta(&mut self, theta: Vec<f64>) {
        self.thetas.push(theta);
    }

    pub fn thetas(&self) -> &[Vec<f64>] {
        &self.thetas
    }

    pub fn pi0(&self) -> &Policy {
        &self.pi0
    }

    /// Number of distinct memoized policy rows.
    pub fn memoized_rows(&self) -> usize {
        self.memo.lock().unwrap().len()
    }

    /// Count of (Ψθ)_s evaluations performed so far.
    pub fn logit_evals(&self) -> u64 {
        self.logit_evals.load(Ordering::Relaxed)
    }

    pub fn memo_hits(&self) -> u64 {
        self.memo_hits.load(Ordering::Relaxed)
    }
}

/// Per-state stepsize of the on-demand reconstruction: computing π_{j+1}
/// from π_j uses η_j(s) = D_φ(π̃(·|s), π_j(·|s)) / γ^{2h(j+1)}.
fn on_demand_eta(mirror: MirrorMap, greedy_row: &[f64], old_row: &[f64], gamma: f64, h: usize, j: usize) -> f64 {
    let c = gamma.powi((2 * h * (j + 1)) as i32);
    let d = bregman(mirror, greedy_row, old_row);
    if d == 0.0 || c == 0.0 || d.is_infinite() {
        f64::INFINITY
    } else {
        d / c
    }
}

/// Greedy row from fitted logits: uniform over the argmax set.
fn greedy_row_from_logits(logits: &[f64]) -> Vec<f64> {
    let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let hits: Vec<usize> = logits
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - GREEDY_TOL)
        .map(|(a, _)| a)
        .collect();
    let mut row = vec![0.0; logits.len()];
    let w = 1.0 / hits.len() as f64;
    for a in hits {
        row[a] = w;
    }
    row
}

/// Reconstructs π_k(·|s) from θ_0..θ_{k-1}, memoizing every intermediate
/// row. Concurrent calls are safe: rows are pure functions of the stored
/// parameters, so memo inserts are idempotent.
pub fn policy_row_on_demand(
    state: &FaRunState,
    k: usize,
    s: usize,
    features: &FeatureMap,
    mirror: MirrorMap,
    h: usize,
    gamma: f64,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Ok(state.pi0.row(s).to_vec());
    }
    if state.thetas.len() < k {
        return Err(Error::InvalidParameter {
            what: "on-demand reconstruction",
            details: format!("iteration {k} requested but only {} parameter vectors stored", state.thetas.len()),
        });
    }
    // Resume from the deepest memoized ancestor instead of recursing.
    let mut start = 0usize;
    let mut row = state.pi0.row(s).to_vec();
    {
        let memo = state.memo.lock().unwrap();
        for j in (1..=k).rev() {
            if let Some(r) = memo.get(&(j, s as u32)) {
                if j == k {
                    state.memo_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(r.clone());
                }
                start = j;
                row = r.clone();
                state.memo_hits.fetch_add(1, Ordering::Relaxed);
                break;
            }
        }
    }
    let mut logits = Vec::with_capacity(features.n_actions());
    for j in start..k {
        features.logits_row(&state.thetas[j], s, &mut logits);
        state.logit_evals.fetch_add(1, Ordering::Relaxed);
        let greedy = greedy_row_from_logits(&logits);
        let eta = on_demand_eta(mirror, &greedy, &row, gamma, h, j);
        let next = prox_update(mirror, &logits, &row, eta)?;
        state
            .memo
            .lock()
            .unwrap()
            .entry((j + 1, s as u32))
            .or_insert_with(|| next.clone());
        row = next;
    }
    Ok(row)
}

/// How [`run_fa`] advances the policy between iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaPolicyAdvance {
    /// Maintain the full tabular policy and update it exactly like the
    /// inexact tabular driver, using Ψθ_k as the value estimate. Feasible
    /// whenever the state space is enumerable.
    Eager,
    /// Store only θ_0..θ_{k-1} and reconstruct rows on demand with the
    /// per-state stepsize rule; memory scales with the states the
    /// estimator actually touches.
    OnDemand,
}

/// Diagnostics computed per iteration when a tabular reference is supplied.
struct FaDiagnostics<'a> {
    mdp: &'a TabularMdp,
    vstar: crate::mdp::VTable,
}

/// Runs h-PMD with linear function approximation: per iteration, estimate
/// `Q̂_h` on the design's core set, fit θ by weighted least squares, and
/// advance the policy from `Ψθ`.
///
/// With `diagnostics` supplied (small state spaces), the trace carries the
/// exact suboptimality gap and the measured extrapolation-bound value
/// `ε_π(1+√d) + ε_Q√d` per iteration; otherwise both are NaN.
pub fn run_fa<M: GenerativeModel + ?Sized>(
    model: &M,
    features: &FeatureMap,
    design: &DesignSet,
    config: &RunConfig,
    pi0: &Policy,
    advance: FaPolicyAdvance,
    diagnostics: Option<&TabularMdp>,
) -> Result<(FaRunState, IterateTrace)> {
    let params = match &config.mode {
        RunMode::Inexact(p) => p.clone(),
        RunMode::Exact => {
            return Err(Error::InvalidParameter {
                what: "run mode",
                details: "run_fa requires RunMode::Inexact".into(),
            })
        }
    };
    if features.n_states() != model.n_states() || features.n_actions() != model.n_actions() {
        return Err(Error::DimensionMismatch {
            what: "feature map",
            expected: model.n_states() * model.n_actions(),
            got: features.n_states() * features.n_actions(),
        });
    }
    if config.h != params.h {
        return Err(Error::InvalidParameter {
            what: "lookahead depth",
            details: "config.h and estimator params.h disagree".into(),
        });
    }
    let gamma = model.discount();
    let diag = match diagnostics {
        Some(mdp) => {
            let (vstar, _) = optimal_value(mdp, 1e-10)?;
            Some(FaDiagnostics { mdp, vstar })
        }
        None => None,
    };
    let mut state = FaRunState::new(pi0.clone());
    let mut tabular = pi0.clone();
    let mut trace = IterateTrace {
        gap0: f64::NAN,
        records: Vec::with_capacity(config.n_iters),
    };
    if let Some(d) = &diag {
        let v = policy_eval_exact(d.mdp, pi0)?;
        trace.gap0 = d.vstar.max_abs_diff(&v);
    }

    for k in 0..config.n_iters {
        let t0 = Instant::now();
        let mut iter_params = params.clone();
        iter_params.rng_seed = derive_seed(config.seed, DOMAIN_ITERATION, k as u64);
        // Estimate targets on the core set under the current policy.
        let est = match advance {
            FaPolicyAdvance::Eager => estimate_q_h(model, &tabular, design.core(), &iter_params)?,
            FaPolicyAdvance::OnDemand => {
                let provider = OnDemandPolicy {
                    state: &state,
                    features,
                    mirror: config.mirror,
                    h: config.h,
                    gamma,
                    iteration: k,
                };
                estimate_q_h(model, &provider, design.core(), &iter_params)?
            }
        };
        let theta = fit_theta(design, features, &est.q_hat)?;

        // Measured extrapolation bound, when a reference MDP is available.
        let mut bound = f64::NAN;
        if let Some(dg) = &diag {
            let current = match advance {
                FaPolicyAdvance::Eager => tabular.clone(),
                FaPolicyAdvance::OnDemand => {
                    materialize_policy(&state, k, features, config.mirror, config.h, gamma)?
                }
            };
            let (_, q_exact) = lookahead_values(dg.mdp, &current, config.h)?;
            let eps_q = design
                .core()
                .iter()
                .map(|&(s, a)| (est.q_hat[&(s, a)] - q_exact.get(s, a)).abs())
                .fold(0.0f64, f64::max);
            let pairs = features.all_pairs();
            let m = features.matrix_of(&pairs);
            let y = DVector::from_fn(pairs.len(), |i, _| {
                let (s, a) = pairs[i];
                q_exact.get(s, a)
            });
            let (_, eps_pi) = minimax_fit(&m, &y, 200);
            let sd = (features.dim() as f64).sqrt();
            bound = eps_pi * (1.0 + sd) + eps_q * sd;
        }

        state.push_theta(theta);

        // Advance the policy.
        let mut eta = f64::NAN;
        if advance == FaPolicyAdvance::Eager {
            let mut q = QTable::zeros(model.n_states(), model.n_actions());
            let mut logits = Vec::with_capacity(model.n_actions());
            for s in 0..model.n_states() {
                features.logits_row(state.thetas().last().unwrap(), s, &mut logits);
                for a in 0..model.n_actions() {
                    q.set(s, a, logits[a]);
                }
            }
            let c_k = config.schedule.c_k(gamma, k);
            let (next, e) =
                policy_improvement(&q, &tabular, config.mirror, config.schedule.mode, c_k)?;
            tabular = next;
            eta = e;
        }

        let mut gap = f64::NAN;
        if let Some(dg) = &diag {
            let pi_next = match advance {
                FaPolicyAdvance::Eager => tabular.clone(),
                FaPolicyAdvance::OnDemand => {
                    materialize_policy(&state, k + 1, features, config.mirror, config.h, gamma)?
                }
            };
            let v = policy_eval_exact(dg.mdp, &pi_next)?;
            gap = dg.vstar.max_abs_diff(&v);
        }

        trace.records.push(IterateRecord {
            iteration: k + 1,
            gap,
            bound,
            eta,
            c_k: config.schedule.c_k(gamma, k),
            samples: est.samples.total(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((state, trace))
}

/// Reconstructs the full tabular policy at iteration `k` (diagnostics only).
pub fn materialize_policy(
    state: &FaRunState,
    k: usize,
    features: &FeatureMap,
    mirror: MirrorMap,
    h: usize,
    gamma: f64,
) -> Result<Policy> {
    let mut probs = Vec::with_capacity(features.n_states() * features.n_actions());
    for s in 0..features.n_states() {
        probs.extend_from_slice(&policy_row_on_demand(state, k, s, features, mirror, h, gamma)?);
    }
    Policy::new(features.n_states(), features.n_actions(), probs)
}

/// Policy view backed by on-demand reconstruction at a fixed iteration.
struct OnDemandPolicy<'a> {
    state: &'a FaRunState,
    features: &'a FeatureMap,
    mirror: MirrorMap,
    h: usize,
    gamma: f64,
    iteration: usize,
}

impl PolicyProvider for OnDemandPolicy<'_> {
    fn write_row(&self, s: usize, buf: &mut Vec<f64>) {
        let row = policy_row_on_demand(
            self.state,
            self.iteration,
            s,
            self.features,
            self.mirror,
            self.h,
            self.gamma,
        )
        .expect("reconstruction cannot fail below the stored iteration count");
        buf.clear();
        buf.extend_from_slice(&row);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::build_random_mdp;
    use crate::estimator::EstimatorParams;
    use crate::mirror::StepsizeSchedule;
    use approx::assert_abs_diff_eq;

    fn gaussian_features(n_states: usize, n_actions: usize, dim: usize, seed: u64) -> FeatureMap {
        let mut data = vec![0.0; n_states * n_actions * dim];
        let mut rng = crate::rng::node_rng(seed, crate::rng::DOMAIN_CELL, 3, 0, 0, 0);
        for x in data.iter_mut() {
            // Box-Muller standard normals.
            let u1: f64 = rand::Rng::gen::<f64>(&mut rng);
            let u2: f64 = rand::Rng::gen::<f64>(&mut rng);
            *x = (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        FeatureMap::new(n_states, n_actions, dim, data).unwrap()
    }

    #[test]
    fn one_hot_design_is_uniform_and_tight() {
        let f = FeatureMap::one_hot(3, 2);
        let design = compute_design(&f, &f.all_pairs(), 0.01).unwrap();
        assert_eq!(design.core().len(), 6);
        for &w in design.weights() {
            assert_abs_diff_eq!(w, 1.0 / 6.0, epsilon = 1e-12);
        }
        assert!(design.max_design_norm() <= 6f64.sqrt() * 1.01);
    }

    #[test]
    fn three_vector_design_matches_brute_force_grid() {
        // Candidates (1,0), (0,1), (1,1) in d=2: with weight ½,½ on the
        // first two, ‖(1,1)‖_{G^{-1}} = 2 > √2, so (1,1) must enter the
        // support; the D-optimal design is uniform over all three.
        let f = FeatureMap::new(3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let half = gram_of(&f, &[(0, 0), (1, 0)], &[0.5, 0.5]);
        let half_inv = invert_spd(&half).unwrap();
        let norm_11 = design_norms(&f, &[(2, 0)], &half_inv)[0].sqrt();
        assert!(norm_11 > 2f64.sqrt() + 0.5);
        assert_abs_diff_eq!(norm_11, 2.0, epsilon = 1e-12);

        // Brute-force grid search over the weight simplex at 1e-3.
        let mut best = (f64::NEG_INFINITY, [0.0; 3]);
        let steps = 1000usize;
        for i in 0..=steps {
            for j in 0..=steps - i {
                let w = [
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ];
                let g = gram_of(&f, &[(0, 0), (1, 0), (2, 0)], &w);
                let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
                if det > best.0 {
                    best = (det, w);
                }
            }
        }
        let design = compute_design(&f, &f.all_pairs(), 0.01).unwrap();
        assert_eq!(design.core().len(), 3);
        for (&(s, _), &w) in design.core().iter().zip(design.weights()) {
            assert!((w - best.1[s]).abs() <= 1e-2, "weight {w} vs grid {}", best.1[s]);
        }
    }

    #[test]
    fn random_feature_designs_satisfy_invariants() {
        for (dim, seed) in [(2usize, 0u64), (4, 1), (8, 2)] {
            let f = gaussian_features(50, 2, dim, seed);
            let design = compute_design(&f, &f.all_pairs(), 0.01).unwrap();
            assert!(design.core().len() <= dim * (dim + 1) / 2);
            assert!(design.max_design_norm() <= (dim as f64).sqrt() * 1.01);
            let total: f64 = design.weights().iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn design_rejects_rank_deficient_candidates() {
        let f = gaussian_features(10, 2, 3, 5);
        // Only pairs sharing state 0 and action 0: a single feature vector.
        assert!(compute_design(&f, &[(0, 0)], 0.01).is_err());
    }

    #[test]
    fn fit_theta_zero_targets_and_interpolation() {
        let f = gaussian_features(12, 2, 3, 9);
        let design = compute_design(&f, &f.all_pairs(), 0.01).unwrap();
        let zeros: BTreeMap<(usize, usize), f64> =
            design.core().iter().map(|&z| (z, 0.0)).collect();
        let theta = fit_theta(&design, &f, &zeros).unwrap();
        assert!(theta.iter().all(|&t| t.abs() < 1e-12));

        let truth = [0.4, -1.3, 2.2];
        let targets: BTreeMap<(usize, usize), f64> = design
            .core()
            .iter()
            .map(|&(s, a)| {
                let v: f64 = f.eval(s, a).iter().zip(&truth).map(|(x, t)| x * t).sum();
                ((s, a), v)
            })
            .collect();
        let theta = fit_theta(&design, &f, &targets).unwrap();
        for (got, want) in theta.iter().zip(&truth) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-10);
        }
    }

    #[test]
    fn fit_theta_matches_normal_equations_oracle() {
        let f = gaussian_features(9, 2, 3, 13);
        let design = compute_design(&f, &f.all_pairs(), 0.01).unwrap();
        let mut rng = crate::rng::node_rng(4, crate::rng::DOMAIN_CELL, 5, 0, 0, 0);
        let targets: BTreeMap<(usize, usize), f64> = design
            .core()
            .iter()
            .map(|&z| (z, rand::Rng::gen::<f64>(&mut rng)))
            .collect();
        let theta = fit_theta(&design, &f, &targets).unwrap();
        // Weighted normal equations solved independently.
        let d = f.dim();
        let mut ata = DMatrix::<f64>::zeros(d, d);
        let mut aty = DVector::<f64>::zeros(d);
        for (&(s, a), &w) in design.core().iter().zip(design.weights()) {
            let psi = f.eval(s, a);
            let y = targets[&(s, a)];
            for i in 0..d {
                aty[i] += w * psi[i] * y;
                for j in 0..d {
                    ata[(i, j)] += w * psi[i] * psi[j];
                }
            }
        }
        let oracle = ata.lu().solve(&aty).unwrap();
        for (got, want) in theta.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn minimax_fit_constant_case() {
        let m = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let (theta, err) = minimax_fit(&m, &y, 100);
        assert_abs_diff_eq!(theta[0], 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(err, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn on_demand_base_case_and_memo_hits() {
        let f = FeatureMap::one_hot(3, 2);
        let pi0 = Policy::uniform(3, 2);
        let mut state = FaRunState::new(pi0.clone());
        state.push_theta(vec![0.5, 1.0, 0.0, 0.2, 0.9, 0.4]);
        let row0 = policy_row_on_demand(&state, 0, 1, &f, MirrorMap::NegativeEntropy, 2, 0.9).unwrap();
        assert_eq!(row0, pi0.row(1));
        let first =
            policy_row_on_demand(&state, 1, 1, &f, MirrorMap::NegativeEntropy, 2, 0.9).unwrap();
        let evals = state.logit_evals();
        let again =
            policy_row_on_demand(&state, 1, 1, &f, MirrorMap::NegativeEntropy, 2, 0.9).unwrap();
        assert_eq!(first, again);
        assert_eq!(state.logit_evals(), evals, "memo hit must not re-evaluate features");
        assert!(state.memo_hits() > 0);
    }

    #[test]
    fn on_demand_equals_eager_forward_maintenance() {
        // One-hot features make Ψθ an exact tabular Q, so replaying the
        // same per-state rule forward must agree bitwise.
        let mdp = build_random_mdp(4, 2, 0.9, 21, 0.0).unwrap();
        let f = FeatureMap::one_hot(4, 2);
        let pi0 = Policy::uniform(4, 2);
        let h = 2usize;
        let mut state = FaRunState::new(pi0.clone());
        let mut rng = crate::rng::node_rng(8, crate::rng::DOMAIN_CELL, 6, 0, 0, 0);
        for _ in 0..5 {
            let theta: Vec<f64> = (0..8).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
            state.push_theta(theta);
        }
        for mirror in [MirrorMap::NegativeEntropy, MirrorMap::SquaredEuclidean] {
            // Eager: maintain all rows forward.
            let mut eager: Vec<Vec<f64>> = (0..4).map(|s| pi0.row(s).to_vec()).collect();
            for j in 0..5 {
                let theta = &state.thetas()[j];
                let mut logits = Vec::new();
                for s in 0..4 {
                    let f_ref = &f;
                    f_ref.logits_row(theta, s, &mut logits);
                    let greedy = greedy_row_from_logits(&logits);
                    let eta = on_demand_eta(mirror, &greedy, &eager[s], 0.9, h, j);
                    eager[s] = prox_update(mirror, &logits, &eager[s], eta).unwrap();
                }
            }
            let fresh = FaRunState {
                thetas: state.thetas().to_vec(),
                pi0: pi0.clone(),
                memo: Mutex::new(BTreeMap::new()),
                logit_evals: AtomicU64::new(0),
                memo_hits: AtomicU64::new(0),
            };
            for s in 0..4 {
                let od = policy_row_on_demand(&fresh, 5, s, &f, mirror, h, 0.9).unwrap();
                assert_eq!(od, eager[s], "state {s} under {mirror:?}");
            }
        }
        let _ = &mdp;
    }

    #[test]
    fn run_fa_one_hot_matches_tabular_inexact_driver() {
        let mdp = build_random_mdp(4, 2, 0.9, 33, 0.0).unwrap();
        let f = FeatureMap::one_hot(4, 2);
        let design = compute_design(&f, &f.all_pairs(), 0.01).unwrap();
        let pi0 = Policy::uniform(4, 2);
        let params = EstimatorParams::uniform(2, 8, 8, 30, 0);
        let config = crate::engine::RunConfig::inexact(
            2,
            6,
            MirrorMap::NegativeEntropy,
            StepsizeSchedule::adaptive_per_depth(2),
            params,
            99,
        );
        let (_, fa_trace) = run_fa(
            &mdp,
            &f,
            &design,
            &config,
            &pi0,
            FaPolicyAdvance::Eager,
            Some(&mdp),
        )
        .unwrap();
        let (_, tab_trace) = crate::engine::run_inexact(&mdp, &config, &pi0).unwrap();
        for (a, b) in fa_trace.records.iter().zip(&tab_trace.records) {
            assert!((a.gap - b.gap).abs() <= 1e-9, "gap {} vs {}", a.gap, b.gap);
            assert_eq!(a.samples, b.samples);
        }
    }

    #[test]
    fn feature_schema_round_trip() {
        let f = gaussian_features(4, 2, 3, 77);
        let text = f.to_json();
        let back = FeatureMap::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert!(FeatureMap::from_json("{}").is_err());
    }

    #[test]
    fn rank_deficient_features_are_rejected() {
        let data = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0];
        assert!(FeatureMap::new(2, 2, 2, data).is_err());
    }
}
