//! Builders for unit tests.

use crate::types::{Action, AgentId, Step, TextObservation, Trajectory};

pub fn obs(agent: usize, step: usize, text: &str) -> TextObservation {
    TextObservation {
        agent: AgentId(agent),
        step,
        text: text.to_string(),
    }
}

/// Single-agent trajectory carrying the given per-step rewards.
pub fn trajectory_with_rewards(rewards: &[f64]) -> Trajectory {
    let steps = rewards
        .iter()
        .enumerate()
        .map(|(t, &reward)| Step {
            index: t,
            observations: vec![obs(0, t, "o")],
            joint_action: vec![Action::new(AgentId(0), "hold")],
            reward,
            global_text: format!("state {t}"),
        })
        .collect();
    Trajectory {
        id: "t".into(),
        env_name: "piston_line".into(),
        seed: 0,
        steps,
        final_observations: vec![obs(0, rewards.len(), "o")],
        final_global_text: "final".into(),
    }
}

/// `n_agents`-agent trajectory with `n_steps` synthetic steps.
pub fn small_trajectory(n_agents: usize, n_steps: usize) -> Trajectory {
    let steps = (0..n_steps)
        .map(|t| Step {
            index: t,
            observations: (0..n_agents)
                .map(|i| obs(i, t, &format!("agent {i} sees step {t}")))
                .collect(),
            joint_action: (0..n_agents)
                .map(|i| Action::new(AgentId(i), if (i + t) % 2 == 0 { "down" } else { "hold" }))
                .collect(),
            reward: -0.1 * (t as f64 + 1.0),
            global_text: format!("global state {t}"),
        })
        .collect();
    Trajectory {
        id: format!("small-{n_agents}-{n_steps}"),
        env_name: "piston_line".into(),
        seed: 3,
        steps,
        final_observations: (0..n_agents)
            .map(|i| obs(i, n_steps, &format!("agent {i} final")))
            .collect(),
        final_global_text: format!("global state {n_steps}"),
    }
}
