//! One-dimensional piston line.
//!
//! Piston `i` spans cells `[i, i + 1)`; the ball starts over the rightmost
//! piston and must reach `x = 0`. The ball rolls left while the piston to its
//! left is no higher than the one under it, faster on a downhill step. A
//! higher left neighbour blocks it at the cell boundary and its velocity
//! decays.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fmt_real, EnvParams};

pub const HEIGHT_STEP: f64 = 0.25;
pub const BALL_ROLL_SPEED: f64 = 0.4;
pub const BALL_MAX_SPEED: f64 = 1.0;
const SLOPE_GAIN: f64 = 0.6;
const BLOCKED_DECAY: f64 = 0.5;
const HEIGHT_EPS: f64 = 1e-9;
const SEED_SALT: u64 = 0x9157_0a11;

#[derive(Debug, Clone, PartialEq)]
pub struct PistonLineState {
    pub piston_heights: Vec<f64>,
    /// Ball position along the line, in cells, within `[0, N]`.
    pub ball_x: f64,
    /// Ball velocity in cells per step; never positive.
    pub ball_vx: f64,
    pub step_count: usize,
    pub done: bool,
}

impl PistonLineState {
    pub fn initial(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT);
        let piston_heights = (0..n)
            .map(|_| rng.random_range(0..=4u32) as f64 * HEIGHT_STEP)
            .collect();
        let ball_x = (n as f64 - 0.5) + rng.random_range(-0.25..0.25);
        Self {
            piston_heights,
            ball_x,
            ball_vx: 0.0,
            step_count: 0,
            done: false,
        }
    }

    pub fn n(&self) -> usize {
        self.piston_heights.len()
    }

    /// Index of the piston under the ball.
    pub fn ball_cell(&self) -> usize {
        let n = self.n();
        (self.ball_x.max(0.0).floor() as usize).min(n.saturating_sub(1))
    }

    pub(super) fn advance(
        &self,
        actions: &[&str],
        params: &EnvParams,
        horizon: usize,
    ) -> (Self, f64) {
        let mut next = self.clone();
        for (h, a) in next.piston_heights.iter_mut().zip(actions) {
            *h = match *a {
                "up" => (*h + HEIGHT_STEP).min(1.0),
                "down" => (*h - HEIGHT_STEP).max(0.0),
                _ => *h,
            };
        }

        let x_before = next.ball_x;
        let cell = next.ball_cell();
        let under = next.piston_heights[cell];
        let left = if cell == 0 {
            0.0
        } else {
            next.piston_heights[cell - 1]
        };
        if cell > 0 && left > under + HEIGHT_EPS {
            next.ball_vx *= BLOCKED_DECAY;
            next.ball_x = (next.ball_x + next.ball_vx).max(cell as f64);
        } else {
            let speed =
                (BALL_ROLL_SPEED + SLOPE_GAIN * (under - left).max(0.0)).min(BALL_MAX_SPEED);
            next.ball_vx = -speed;
            next.ball_x = (next.ball_x - speed).max(0.0);
        }

        next.step_count += 1;
        next.done = next.ball_x <= 0.0 || next.step_count >= horizon;
        let reward = params.alpha * (x_before - next.ball_x) - params.time_penalty;
        (next, reward)
    }

    pub(super) fn local_text(&self, agent: usize, window: usize) -> String {
        let h = &self.piston_heights;
        let mut s = format!(
            "You are piston {agent}. Your height: {}.",
            fmt_real(h[agent])
        );
        match agent.checked_sub(1) {
            Some(l) => s.push_str(&format!(" Left neighbour height: {}.", fmt_real(h[l]))),
            None => s.push_str(" Left neighbour: none (left wall)."),
        }
        match h.get(agent + 1) {
            Some(r) => s.push_str(&format!(" Right neighbour height: {}.", fmt_real(*r))),
            None => s.push_str(" Right neighbour: none (right end)."),
        }
        let offset = self.ball_cell() as i64 - agent as i64;
        if offset.unsigned_abs() as usize > window {
            s.push_str(" ball: not visible.");
            return s;
        }
        let plural = |d: u64| if d == 1 { "cell" } else { "cells" };
        let place = match offset {
            0 => "ball is directly above you".to_string(),
            d if d > 0 => format!("ball is {d} {} to your right", plural(d as u64)),
            d => format!("ball is {} {} to your left", -d, plural((-d) as u64)),
        };
        let motion = if self.ball_vx < 0.0 {
            "rolling left"
        } else {
            "not moving"
        };
        s.push_str(&format!(" {place}, {motion}."));
        s
    }

    pub(super) fn global_text(&self, horizon: usize) -> String {
        let heights: Vec<String> = self
            .piston_heights
            .iter()
            .enumerate()
            .map(|(i, h)| format!("p{i}={}", fmt_real(*h)))
            .collect();
        format!(
            "Piston heights: {}. Ball at x={} (cell {}), velocity {} cells/step. Step {} of {}{}.",
            heights.join(", "),
            fmt_real(self.ball_x),
            self.ball_cell(),
            fmt_real(self.ball_vx),
            self.step_count,
            horizon,
            if self.done { ", finished" } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvState, Environment};
    use crate::types::{Action, AgentId};

    fn env(n: usize, horizon: usize) -> Environment {
        Environment::from_name("piston_line", n, horizon, EnvParams::default()).unwrap()
    }

    fn state(heights: &[f64], x: f64) -> PistonLineState {
        PistonLineState {
            piston_heights: heights.to_vec(),
            ball_x: x,
            ball_vx: 0.0,
            step_count: 0,
            done: false,
        }
    }

    fn holds(n: usize) -> Vec<Action> {
        (0..n).map(|i| Action::new(AgentId(i), "hold")).collect()
    }

    #[test]
    fn reset_is_deterministic() {
        let e = env(5, 30);
        assert_eq!(e.reset(42), e.reset(42));
        assert_ne!(e.reset(42).0, e.reset(43).0);
    }

    #[test]
    fn initial_ball_in_range() {
        let e = env(5, 30);
        for seed in 0..100 {
            let (s, _) = e.reset(seed);
            let EnvState::Piston(p) = s else {
                unreachable!()
            };
            assert!((0.0..=5.0).contains(&p.ball_x));
            assert!(p.piston_heights.iter().all(|h| (0.0..=1.0).contains(h)));
        }
    }

    #[test]
    fn flat_roll_rewards_progress_minus_penalty() {
        let e = env(3, 30);
        let s = EnvState::Piston(state(&[0.5, 0.5, 0.5], 2.5));
        let out = e.step(&s, &holds(3)).unwrap();
        let EnvState::Piston(p) = &out.state else {
            unreachable!()
        };
        assert!((2.5 - p.ball_x - 0.4).abs() < 1e-12);
        assert!((out.reward - 0.3).abs() < 1e-12);
    }

    #[test]
    fn blocked_ball_only_pays_penalty() {
        let e = env(3, 30);
        let s = EnvState::Piston(state(&[0.0, 1.0, 0.0], 2.0));
        let out = e.step(&s, &holds(3)).unwrap();
        assert!((out.reward + 0.1).abs() < 1e-12);
        let EnvState::Piston(p) = &out.state else {
            unreachable!()
        };
        assert_eq!(p.ball_x, 2.0);
    }

    #[test]
    fn downhill_rolls_faster() {
        let e = env(2, 30);
        let s = EnvState::Piston(state(&[0.0, 1.0], 1.5));
        let out = e.step(&s, &holds(2)).unwrap();
        let EnvState::Piston(p) = &out.state else {
            unreachable!()
        };
        assert!((p.ball_x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reaching_wall_ends_episode() {
        let e = env(2, 30);
        let s = EnvState::Piston(state(&[0.0, 0.0], 0.3));
        let out = e.step(&s, &holds(2)).unwrap();
        assert!(out.done);
        assert!((out.reward - (0.3 - 0.1)).abs() < 1e-12);
        assert!(e.step(&out.state, &holds(2)).is_err());
    }

    #[test]
    fn horizon_ends_episode() {
        let e = env(2, 1);
        let s = EnvState::Piston(state(&[1.0, 0.0], 1.5));
        assert!(e.step(&s, &holds(2)).unwrap().done);
    }

    #[test]
    fn visibility_window_phrasing() {
        let e = env(9, 30);
        let far = EnvState::Piston(state(&[0.5; 9], 7.3));
        assert!(e
            .textualize(&far, AgentId(2))
            .text
            .contains("ball: not visible"));
        let near = EnvState::Piston(state(&[0.5; 9], 3.3));
        assert!(e
            .textualize(&near, AgentId(2))
            .text
            .contains("ball is 1 cell to your right"));
        let left = EnvState::Piston(state(&[0.5; 9], 0.3));
        assert!(e
            .textualize(&left, AgentId(2))
            .text
            .contains("ball is 2 cells to your left"));
        let above = EnvState::Piston(state(&[0.5; 9], 2.0));
        assert!(e
            .textualize(&above, AgentId(2))
            .text
            .contains("ball is directly above you"));
        assert_eq!(
            e.textualize(&near, AgentId(2)),
            e.textualize(&near, AgentId(2))
        );
    }

    #[test]
    fn global_text_lists_everything() {
        let e = env(3, 30);
        let s = EnvState::Piston(state(&[0.25, 1.0, 0.0], 2.35));
        let g = e.global_textualize(&s);
        for part in ["p0=0.25", "p1=1.00", "p2=0.00", "x=2.35"] {
            assert!(g.contains(part), "{g}");
        }
    }
}
