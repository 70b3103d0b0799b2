//! Benchmark MDP builders.
//!
//! # DeepSea
//!
//! The bsuite-style DeepSea grid: an N×N grid of cells plus one absorbing
//! terminal state. The diver starts at the top-left cell, descends one row
//! per step, and steers left/right; stepping off the bottom row ends the
//! episode in the terminal state. Raw rewards follow the benchmark's
//! conventions: every `right` choice costs `0.01/N`, and the bottom-right
//! cell pays a treasure of 1 on its final step. In the stochastic variant
//! the chosen left/right direction is flipped with probability `slip_prob`
//! (our construction; the flip probability defaults to 0.05).
//!
//! Because the library requires rewards in [0, 1], raw rewards are rescaled
//! affinely by `r = (raw + move_cost) / (treasure + move_cost)`. The map is
//! monotone, so optimal policies are unchanged; the terminal self-loop
//! therefore carries the small positive reward `move_cost/(treasure +
//! move_cost)` rather than zero.
//!
//! States are indexed row-major (`state = row*N + col`), the terminal state
//! is `N²`, action 0 steers left and action 1 steers right. The initial
//! distribution is a point mass on the top-left cell.

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::rng;
use rand::Rng;

/// Parameters of a DeepSea instance.
#[derive(Debug, Clone, Copy)]
pub struct DeepSeaSpec {
    /// Grid side length N (the MDP has N²+1 states).
    pub grid_size: usize,
    /// Probability that the chosen left/right action is flipped.
    pub slip_prob: f64,
    /// Per-`right`-move penalty (raw scale). Defaults to 0.01/N.
    pub move_cost: f64,
    /// Treasure paid at the bottom-right cell (raw scale).
    pub treasure_reward: f64,
    /// Discount factor.
    pub discount: f64,
}

impl DeepSeaSpec {
    /// Deterministic DeepSea with the benchmark's default rewards.
    pub fn deterministic(grid_size: usize, discount: f64) -> Self {
        Self::new(grid_size, 0.0, discount)
    }

    pub fn new(grid_size: usize, slip_prob: f64, discount: f64) -> Self {
        Self {
            grid_size,
            slip_prob,
            move_cost: 0.01 / grid_size as f64,
            treasure_reward: 1.0,
            discount,
        }
    }

    /// Affine rescale applied to raw rewards: `r = (raw + add) / div`.
    pub fn reward_rescale(&self) -> (f64, f64) {
        (self.move_cost, self.treasure_reward + self.move_cost)
    }
}

/// Builds the DeepSea MDP for `spec`.
pub fn build_deepsea(spec: &DeepSeaSpec) -> Result<TabularMdp> {
    let n = spec.grid_size;
    if n < 2 {
        return Err(Error::InvalidParameter {
            what: "grid size",
            details: format!("need N ≥ 2, got {n}"),
        });
    }
    if !(0.0..=0.5).contains(&spec.slip_prob) {
        return Err(Error::InvalidParameter {
            what: "slip probability",
            details: format!("must lie in [0, 0.5], got {}", spec.slip_prob),
        });
    }
    if spec.move_cost < 0.0 || spec.treasure_reward <= 0.0 {
        return Err(Error::InvalidParameter {
            what: "DeepSea rewards",
            details: "move_cost must be ≥ 0 and treasure_reward > 0".into(),
        });
    }
    let n_states = n * n + 1;
    let n_actions = 2;
    let terminal = n * n;
    let (add, div) = spec.reward_rescale();
    let rescale = |raw: f64| (raw + add) / div;

    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    for a in 0..n_actions {
        transition[(terminal * n_actions + a) * n_states + terminal] = 1.0;
        reward[terminal * n_actions + a] = rescale(0.0);
    }
    for row in 0..n {
        for col in 0..n {
            let s = row * n + col;
            for a in 0..n_actions {
                let mut raw = if a == 1 { -spec.move_cost } else { 0.0 };
                if row == n - 1 && col == n - 1 {
                    raw += spec.treasure_reward;
                }
                reward[s * n_actions + a] = rescale(raw);
                let t = &mut transition[(s * n_actions + a) * n_states..][..n_states];
                if row == n - 1 {
                    t[terminal] = 1.0;
                } else {
                    let col_if_left = col.saturating_sub(1);
                    let col_if_right = (col + 1).min(n - 1);
                    let (intended, flipped) = if a == 0 {
                        (col_if_left, col_if_right)
                    } else {
                        (col_if_right, col_if_left)
                    };
                    t[(row + 1) * n + intended] += 1.0 - spec.slip_prob;
                    t[(row + 1) * n + flipped] += spec.slip_prob;
                }
            }
        }
    }
    let mut initial = vec![0.0; n_states];
    initial[0] = 1.0;
    TabularMdp::new(n_states, n_actions, transition, reward, spec.discount, initial)
}

/// Seeded dense random MDP: transition rows drawn Dirichlet(1) (normalized
/// unit exponentials), rewards uniform on [0, 1], uniform initial
/// distribution.
///
/// `sparsity` in [0, 1) zeroes that fraction of each transition row's
/// support before normalization (at least one successor always survives);
/// 0 keeps rows dense.
pub fn build_random_mdp(
    n_states: usize,
    n_actions: usize,
    discount: f64,
    seed: u64,
    sparsity: f64,
) -> Result<TabularMdp> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidParameter {
            what: "sparsity",
            details: format!("must lie in [0, 1), got {sparsity}"),
        });
    }
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    let mut reward = vec![0.0; n_states * n_actions];
    let support_size = (((1.0 - sparsity) * n_states as f64).ceil() as usize).clamp(1, n_states);
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut rng = rng::node_rng(seed, rng::DOMAIN_CELL, 0, s as u32, a as u32, 0);
            reward[s * n_actions + a] = rng.gen::<f64>();
            // Sample the support by a partial Fisher-Yates shuffle, then put
            // Exp(1) weights on it; normalizing yields Dirichlet(1) rows.
            let mut idx: Vec<usize> = (0..n_states).collect();
            for i in 0..support_size {
                let j = rng.gen_range(i..n_states);
                idx.swap(i, j);
            }
            let row = &mut transition[(s * n_actions + a) * n_states..][..n_states];
            let mut total = 0.0;
            for &j in &idx[..support_size] {
                let e = -(1.0 - rng.gen::<f64>()).ln();
                row[j] = e;
                total += e;
            }
            for p in row.iter_mut() {
                *p /= total;
            }
        }
    }
    let initial = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(n_states, n_actions, transition, reward, discount, initial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{optimal_value, policy_eval_exact, Policy};

    #[test]
    fn deterministic_deepsea_tensor_is_binary() {
        let mdp = build_deepsea(&DeepSeaSpec::deterministic(4, 0.95)).unwrap();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                for &p in mdp.transition_row(s, a) {
                    assert!(p == 0.0 || p == 1.0);
                }
            }
        }
    }

    #[test]
    fn deepsea_2x2_optimal_policy_is_always_right() {
        // Small enough to enumerate all deterministic policies exhaustively.
        let spec = DeepSeaSpec::deterministic(2, 0.9);
        let mdp = build_deepsea(&spec).unwrap();
        let n = mdp.n_states();
        let mut best = f64::NEG_INFINITY;
        let mut best_actions = vec![0; n];
        for mask in 0..(1u32 << n) {
            let actions: Vec<usize> = (0..n).map(|s| ((mask >> s) & 1) as usize).collect();
            let pi = Policy::deterministic(n, 2, &actions).unwrap();
            let v = policy_eval_exact(&mdp, &pi).unwrap();
            if v.values[0] > best {
                best = v.values[0];
                best_actions = actions;
            }
        }
        // Start cell and the diagonal cell must steer right to reach the
        // treasure; the treasure cell itself prefers the free left action.
        assert_eq!(best_actions[0], 1);
        assert_eq!(best_actions[3], 0);
        let (vstar, _) = optimal_value(&mdp, 1e-10).unwrap();
        assert!((vstar.values[0] - best).abs() < 1e-8);
    }

    #[test]
    fn deepsea_64_has_paper_scale_structure() {
        let mdp = build_deepsea(&DeepSeaSpec::deterministic(64, 0.99)).unwrap();
        assert_eq!(mdp.n_states(), 64 * 64 + 1);
        assert_eq!(mdp.n_actions(), 2);
        assert_eq!(mdp.discount(), 0.99);
        assert_eq!(mdp.initial_dist()[0], 1.0);
    }

    #[test]
    fn stochastic_deepsea_rows_mix_intended_and_flipped() {
        let mdp = build_deepsea(&DeepSeaSpec::new(3, 0.1, 0.9)).unwrap();
        // Interior cell (0, 1): right goes to (1, 2) w.p. 0.9, (1, 0) w.p. 0.1.
        let row = mdp.transition_row(1, 1);
        assert!((row[3 + 2] - 0.9).abs() < 1e-15);
        assert!((row[3] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn random_mdp_is_reproducible() {
        let a = build_random_mdp(4, 3, 0.9, 7, 0.0).unwrap();
        let b = build_random_mdp(4, 3, 0.9, 7, 0.0).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = build_random_mdp(4, 3, 0.9, 8, 0.0).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn random_mdp_rows_are_distributions() {
        let mdp = build_random_mdp(5, 2, 0.9, 0, 0.4).unwrap();
        for s in 0..5 {
            for a in 0..2 {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn generative_samples_match_kernel_frequencies() {
        let mdp = build_random_mdp(5, 2, 0.9, 3, 0.0).unwrap();
        let draws = 100_000usize;
        let mut rng = crate::rng::node_rng(99, crate::rng::DOMAIN_CELL, 1, 0, 0, 0);
        for &(s, a) in &[(0usize, 0usize), (3, 1)] {
            let mut counts = vec![0usize; 5];
            for _ in 0..draws {
                counts[mdp.sample_next(s, a, &mut rng)] += 1;
            }
            for (sp, &c) in counts.iter().enumerate() {
                let p = mdp.transition_row(s, a)[sp];
                let se = (p * (1.0 - p) / draws as f64).sqrt();
                let err = (c as f64 / draws as f64 - p).abs();
                assert!(err <= 3.0 * se + 1e-9, "s'={sp}: err={err}, 3se={}", 3.0 * se);
            }
        }
    }

    #[test]
    fn deepsea_values_stay_in_unit_range_over_horizon() {
        let mdp = build_deepsea(&DeepSeaSpec::new(4, 0.05, 0.9)).unwrap();
        let pi = Policy::uniform(mdp.n_states(), 2);
        let v = policy_eval_exact(&mdp, &pi).unwrap();
        let bound = mdp.value_bound();
        assert!(v.values.iter().all(|&x| (0.0..=bound).contains(&x)));
    }
}
