use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::envcore::{check_action, EnvSpec, Environment, GoalObservation, StepResult};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitFlipConfig {
    pub n_bits: usize,
    /// Defaults to `n_bits`.
    #[serde(default)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitState {
    pub bits: Vec<u8>,
    pub t: usize,
    pub done: bool,
}

/// Flip one bit per step until the array equals the target.
#[derive(Debug, Clone)]
pub struct BitFlip {
    spec: EnvSpec,
}

impl BitFlip {
    pub fn new(config: &BitFlipConfig) -> Result<Self> {
        if config.n_bits == 0 {
            return Err(Error::env("bit-flip needs n_bits >= 1"));
        }
        let horizon = config.horizon.unwrap_or(config.n_bits);
        if horizon == 0 {
            return Err(Error::env("bit-flip horizon must be positive"));
        }
        Ok(BitFlip {
            spec: EnvSpec {
                action_count: config.n_bits,
                horizon,
                feature_dim: 2 * config.n_bits,
                goal_dim: config.n_bits,
                value_scale: 1.0 / horizon as f64,
            },
        })
    }

    pub fn n_bits(&self) -> usize {
        self.spec.action_count
    }

    fn random_bits(&self, rng: &mut dyn RngCore) -> Vec<u8> {
        (0..self.n_bits()).map(|_| rng.gen_range(0..=1u8)).collect()
    }

    fn check_goal(&self, goal: &[u8]) -> Result<()> {
        if goal.len() != self.n_bits() {
            return Err(Error::env(format!(
                "goal has {} bits, expected {}",
                goal.len(),
                self.n_bits()
            )));
        }
        if goal.iter().any(|&b| b > 1) {
            return Err(Error::env("goal bits must be 0 or 1"));
        }
        Ok(())
    }
}

impl Environment for BitFlip {
    type State = BitState;
    type Goal = Vec<u8>;

    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(
        &self,
        rng: &mut dyn RngCore,
        goal_override: Option<Vec<u8>>,
    ) -> Result<GoalObservation<BitState, Vec<u8>>> {
        let mut bits = self.random_bits(rng);
        let goal = match goal_override {
            Some(g) => {
                self.check_goal(&g)?;
                while bits == g {
                    bits = self.random_bits(rng);
                }
                g
            }
            None => loop {
                let g = self.random_bits(rng);
                if g != bits {
                    break g;
                }
            },
        };
        let state = BitState {
            bits,
            t: 0,
            done: false,
        };
        Ok(self.observe(state, goal))
    }

    fn step(
        &self,
        state: &BitState,
        desired: &Vec<u8>,
        action: usize,
    ) -> Result<StepResult<BitState, Vec<u8>>> {
        check_action(&self.spec, action)?;
        if state.done {
            return Err(Error::env("cannot step a terminal state"));
        }
        let mut bits = state.bits.clone();
        bits[action] ^= 1;
        let (reward, success) = self.compute_reward(&bits, desired)?;
        let t = state.t + 1;
        let terminal = success || t >= self.spec.horizon;
        let next = BitState {
            bits,
            t,
            done: terminal,
        };
        Ok(StepResult {
            observation: self.observe(next, desired.clone()),
            reward,
            terminal,
            success,
        })
    }

    fn achieved_goal(&self, state: &BitState) -> Vec<u8> {
        state.bits.clone()
    }

    fn compute_reward(&self, achieved: &Vec<u8>, desired: &Vec<u8>) -> Result<(f64, bool)> {
        if achieved.len() != desired.len() {
            return Err(Error::env(format!(
                "goal dimension mismatch: {} vs {}",
                achieved.len(),
                desired.len()
            )));
        }
        Ok(if achieved == desired {
            (0.0, true)
        } else {
            (-1.0, false)
        })
    }

    fn legal_actions(&self, state: &BitState) -> Result<Vec<bool>> {
        if state.done {
            return Err(Error::env("terminal state has no legal actions"));
        }
        Ok(vec![true; self.n_bits()])
    }

    fn encode(&self, state: &BitState, desired: &Vec<u8>) -> Vec<f64> {
        state
            .bits
            .iter()
            .chain(desired)
            .map(|&b| f64::from(b))
            .collect()
    }

    /// `done` depends on the goal: a state that already achieves it is
    /// terminal.
    fn rebind_state(&self, state: &BitState, goal: &Vec<u8>) -> BitState {
        let reached = self.compute_reward(&state.bits, goal).map_or(false, |(_, ok)| ok);
        BitState {
            done: reached || state.t >= self.spec.horizon,
            ..state.clone()
        }
    }

    fn is_terminal(&self, state: &BitState) -> bool {
        state.done
    }

    fn elapsed(&self, state: &BitState) -> usize {
        state.t
    }

    fn goal_distance(&self, a: &Vec<u8>, b: &Vec<u8>) -> f64 {
        a.iter().zip(b).filter(|(x, y)| x != y).count() as f64
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{HashMap, VecDeque};

    use super::*;
    use crate::envcore::suite;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(n: usize) -> BitFlip {
        BitFlip::new(&BitFlipConfig {
            n_bits: n,
            horizon: None,
        })
        .unwrap()
    }

    fn state(bits: &[u8]) -> BitState {
        BitState {
            bits: bits.to_vec(),
            t: 0,
            done: false,
        }
    }

    #[test]
    fn zero_bits_rejected() {
        assert!(BitFlip::new(&BitFlipConfig {
            n_bits: 0,
            horizon: None
        })
        .is_err());
    }

    #[test]
    fn goal_override_passes_through() {
        let e = env(3);
        let obs = e
            .reset(&mut ChaCha8Rng::seed_from_u64(1), Some(vec![1, 0, 1]))
            .unwrap();
        assert_eq!(obs.desired_goal, vec![1, 0, 1]);
        assert_ne!(obs.state.bits, obs.desired_goal);
        assert!(e.reset(&mut ChaCha8Rng::seed_from_u64(1), Some(vec![1, 0])).is_err());
        assert!(e.reset(&mut ChaCha8Rng::seed_from_u64(1), Some(vec![1, 0, 2])).is_err());
    }

    #[test]
    fn seeded_reset_is_reproducible() {
        let e = env(3);
        let a = e.reset(&mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        let b = e.reset(&mut ChaCha8Rng::seed_from_u64(9), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_examples() {
        let e = env(3);
        let r = e.step(&state(&[0, 1, 0]), &vec![0, 0, 0], 1).unwrap();
        assert_eq!(r.observation.state.bits, vec![0, 0, 0]);
        assert!(r.success && r.terminal);
        assert_eq!(r.reward, 0.0);

        let r = e.step(&state(&[0, 1, 0]), &vec![1, 1, 1], 1).unwrap();
        assert_eq!(r.observation.state.bits, vec![0, 0, 0]);
        assert_eq!(r.reward, -1.0);
        assert!(!r.terminal);

        assert!(e.step(&state(&[0, 1, 0]), &vec![1, 1, 1], 3).is_err());
        assert!(e.step(&r.observation.state.clone(), &vec![1, 1, 1], 0).is_ok());
    }

    #[test]
    fn one_bit_solves_in_one_step() {
        let e = env(1);
        let r = e.step(&state(&[0]), &vec![1], 0).unwrap();
        assert!(r.success);
    }

    #[test]
    fn compute_reward_examples() {
        let e = env(2);
        assert_eq!(e.compute_reward(&vec![1, 0], &vec![1, 0]).unwrap(), (0.0, true));
        assert_eq!(e.compute_reward(&vec![1, 0], &vec![0, 0]).unwrap(), (-1.0, false));
        assert!(e.compute_reward(&vec![1, 0], &vec![0, 0, 1]).is_err());
    }

    #[test]
    fn encode_concatenates() {
        let e = env(3);
        assert_eq!(
            e.encode(&state(&[0, 1, 0]), &vec![1, 1, 1]),
            vec![0.0, 1.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(e.spec().feature_dim, 6);
        assert_eq!(e.legal_actions(&state(&[0, 1, 0])).unwrap(), vec![true; 3]);
    }

    #[test]
    fn flip_is_an_involution() {
        let e = env(4);
        let s = state(&[1, 0, 1, 1]);
        let g = vec![0, 0, 0, 0];
        for a in 0..4 {
            let once = e.step(&s, &g, a).unwrap().observation.state;
            let twice = e.step(&once, &g, a).unwrap().observation.state;
            assert_eq!(twice.bits, s.bits);
        }
    }

    /// Breadth-first search over the environment's own dynamics: the best
    /// return from any start is -(d - 1) for Hamming distance d.
    #[test]
    fn optimal_return_matches_bfs() {
        let e = env(3);
        let all: Vec<Vec<u8>> = (0..8u8)
            .map(|v| vec![v & 1, (v >> 1) & 1, (v >> 2) & 1])
            .collect();
        for start in &all {
            for goal in &all {
                if start == goal {
                    continue;
                }
                let mut best: HashMap<Vec<u8>, f64> = HashMap::new();
                let mut queue = VecDeque::from([(state(start), 0.0)]);
                let mut optimum = f64::NEG_INFINITY;
                while let Some((s, ret)) = queue.pop_front() {
                    for a in 0..3 {
                        let r = e.step(&s, goal, a).unwrap();
                        let total = ret + r.reward;
                        if r.success {
                            optimum = optimum.max(total);
                        } else if !r.terminal
                            && best.get(&r.observation.state.bits).map_or(true, |&b| total > b)
                        {
                            best.insert(r.observation.state.bits.clone(), total);
                            queue.push_back((r.observation.state, total));
                        }
                    }
                }
                let d = e.goal_distance(start, goal);
                assert_eq!(optimum, -(d - 1.0), "{start:?} -> {goal:?}");
            }
        }
    }

    #[test]
    fn contract_suite() {
        suite::check_contract(&env(5), 50, 11);
        suite::check_contract(
            &BitFlip::new(&BitFlipConfig {
                n_bits: 3,
                horizon: Some(7),
            })
            .unwrap(),
            50,
            3,
        );
    }
}
