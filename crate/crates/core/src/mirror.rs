//! Mirror maps, Bregman divergences, and proximal policy updates.
//!
//! Two mirror maps are supported, matching the two closed-form instances of
//! the proximal step:
//!
//! - negative entropy → KL divergence → multiplicative (softmax) update
//!   `π⁺(a) ∝ π(a) exp(η q(a))`, computed in log space with max
//!   subtraction;
//! - squared 2-norm → squared Euclidean distance → projected ascent
//!   `π⁺ = Proj_Δ(π + η q)` with an exact sort-based simplex projection.
//!
//! An infinite stepsize degenerates to the greedy (argmax) update in both
//! cases, which is how policy iteration arises as a limit.

use crate::error::{Error, Result};
use crate::mdp::{argmax_lowest, Policy};

/// The two supported mirror maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MirrorMap {
    /// φ(p) = Σ p log p; D_φ = KL(p‖q).
    NegativeEntropy,
    /// φ(p) = ½‖p‖₂²; D_φ(p, q) = ½‖p − q‖₂².
    SquaredEuclidean,
}

/// Whether the proximal step uses the adaptive stepsize lower bound or the
/// greedy (infinite-stepsize) limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsizeMode {
    Adaptive,
    Infinite,
}

/// Rule generating the sequence (c_k) that scales the adaptive stepsizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CRule {
    /// c_k = γ^{2h(k+1)}; the depth-aware schedule.
    PerDepth,
    /// c_k = γ^{2(k+1)}; identical across lookahead depths.
    Shared,
    /// Constant positive c.
    Constant(f64),
}

/// Stepsize schedule: a (c_k) rule plus the lookahead depth it refers to.
///
/// Note γ^{2h(k+1)} underflows to exactly 0 for large h·k; the resulting
/// stepsize d/c = ∞ degrades gracefully to a greedy step, which is the
/// correct limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepsizeSchedule {
    pub mode: StepsizeMode,
    pub c_rule: CRule,
    pub h: usize,
}

impl StepsizeSchedule {
    pub fn adaptive_per_depth(h: usize) -> Self {
        Self {
            mode: StepsizeMode::Adaptive,
            c_rule: CRule::PerDepth,
            h,
        }
    }

    pub fn adaptive_shared(h: usize) -> Self {
        Self {
            mode: StepsizeMode::Adaptive,
            c_rule: CRule::Shared,
            h,
        }
    }

    pub fn infinite(h: usize) -> Self {
        Self {
            mode: StepsizeMode::Infinite,
            c_rule: CRule::PerDepth,
            h,
        }
    }

    /// c_k for iteration k (0-based).
    pub fn c_k(&self, gamma: f64, k: usize) -> f64 {
        match self.c_rule {
            CRule::PerDepth => gamma.powi((2 * self.h * (k + 1)) as i32),
            CRule::Shared => gamma.powi((2 * (k + 1)) as i32),
            CRule::Constant(c) => c,
        }
    }
}

/// Bregman divergence D_φ(p, q) between two action distributions.
///
/// Under the KL divergence, a zero in `q` where `p` has mass yields
/// `f64::INFINITY` (the divergence really is infinite there); the
/// convention 0·log 0 = 0 applies where `p` is zero.
pub fn bregman(map: MirrorMap, p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    match map {
        MirrorMap::NegativeEntropy => {
            let mut acc = 0.0;
            for (&pi, &qi) in p.iter().zip(q) {
                if pi > 0.0 {
                    if qi <= 0.0 {
                        return f64::INFINITY;
                    }
                    acc += pi * (pi / qi).ln();
                }
            }
            acc.max(0.0)
        }
        MirrorMap::SquaredEuclidean => {
            0.5 * p
                .iter()
                .zip(q)
                .map(|(&pi, &qi)| (pi - qi) * (pi - qi))
                .sum::<f64>()
        }
    }
}

/// Euclidean projection onto the probability simplex, by the sort-based
/// thresholding algorithm (O(A log A), exact up to rounding).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("no NaN in projection input"));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (j, &vj) in sorted.iter().enumerate() {
        acc += vj;
        let t = (acc - 1.0) / (j + 1) as f64;
        if vj - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidDistribution {
            what: what.to_string(),
            sum: row.iter().sum(),
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > crate::mdp::DISTRIBUTION_TOL {
        return Err(Error::InvalidDistribution {
            what: what.to_string(),
            sum,
        });
    }
    Ok(())
}

/// One proximal policy step on a single state's action distribution:
/// argmax over the simplex of η⟨q, π⟩ − D_φ(π, π_old).
///
/// `eta = f64::INFINITY` returns the deterministic greedy row (lowest
/// action index on ties). Under the KL map the mathematical update requires
/// a strictly positive `old_row`; zero entries (which arise from floating
/// underflow after many large steps) are tolerated and simply stay zero,
/// i.e. the update restricts to the support of `old_row`.
pub fn prox_update(map: MirrorMap, q_row: &[f64], old_row: &[f64], eta: f64) -> Result<Vec<f64>> {
    if q_row.len() != old_row.len() {
        return Err(Error::DimensionMismatch {
            what: "prox update row",
            expected: old_row.len(),
            got: q_row.len(),
        });
    }
    if eta < 0.0 || eta.is_nan() {
        return Err(Error::InvalidParameter {
            what: "stepsize",
            details: format!("η must be nonnegative, got {eta}"),
        });
    }
    check_row(old_row, "old policy row")?;
    if eta.is_infinite() {
        let mut out = vec![0.0; q_row.len()];
        out[argmax_lowest(q_row)] = 1.0;
        return Ok(out);
    }
    match map {
        MirrorMap::NegativeEntropy => {
            // Logit-space multiplicative update with max subtraction.
            let logits: Vec<f64> = old_row
                .iter()
                .zip(q_row)
                .map(|(&p, &q)| if p > 0.0 { p.ln() + eta * q } else { f64::NEG_INFINITY })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = weights.iter().sum();
            Ok(weights.iter().map(|&w| w / z).collect())
        }
        MirrorMap::SquaredEuclidean => {
            let shifted: Vec<f64> = old_row
                .iter()
                .zip(q_row)
                .map(|(&p, &q)| p + eta * q)
                .collect();
            Ok(project_simplex(&shifted))
        }
    }
}

/// D_φ(δ_a, row) for a deterministic row concentrated at `a`.
fn divergence_to_vertex(map: MirrorMap, row: &[f64], a: usize) -> f64 {
    match map {
        MirrorMap::NegativeEntropy => {
            if row[a] > 0.0 {
                -row[a].ln()
            } else {
                f64::INFINITY
            }
        }
        MirrorMap::SquaredEuclidean => {
            let mut acc = 0.0;
            for (i, &p) in row.iter().enumerate() {
                let d = if i == a { 1.0 - p } else { p };
                acc += d * d;
            }
            0.5 * acc
        }
    }
}

/// Adaptive stepsize lower bound
/// `(1/c_k) max_s min_{a ∈ greedy(s)} D_φ(δ_a, π(·|s))`.
///
/// The minimum over each state's greedy set is taken over deterministic
/// greedy rows. The result is 0 when the policy already sits on a greedy
/// vertex everywhere, and may be `f64::INFINITY` under the KL map when
/// every greedy action of some state has zero mass; callers treat both
/// extremes as "take a greedy step".
pub fn adaptive_stepsize(
    map: MirrorMap,
    greedy: &[Vec<usize>],
    old_policy: &Policy,
    c_k: f64,
) -> Result<f64> {
    // c_k = 0 only arises when γ^{2h(k+1)} underflows; the resulting d/0 = ∞
    // stepsize degrades to a greedy step downstream.
    if c_k.is_nan() || c_k < 0.0 {
        return Err(Error::InvalidParameter {
            what: "c_k",
            details: format!("must be positive, got {c_k}"),
        });
    }
    let mut worst = 0.0f64;
    for (s, actions) in greedy.iter().enumerate() {
        if actions.is_empty() {
            return Err(Error::EmptyGreedySet { state: s });
        }
        let row = old_policy.row(s);
        let d = actions
            .iter()
            .map(|&a| divergence_to_vertex(map, row, a))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(d);
    }
    Ok(worst / c_k)
}
