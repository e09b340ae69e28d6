//! Returns and batch statistics.

use crate::error::{Error, Result};
use crate::types::Trajectory;

/// Discounted sum of the shared team reward, `sum_t discount^t * r_t`.
pub fn episodic_return(trajectory: &Trajectory, discount: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&discount));
    let mut weight = 1.0;
    let mut total = 0.0;
    for reward in trajectory.rewards() {
        total += weight * reward;
        weight *= discount;
    }
    total
}

pub fn mean_return(trajectories: &[Trajectory], discount: f64) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::NoTrajectories);
    }
    let sum: f64 = trajectories
        .iter()
        .map(|t| episodic_return(t, discount))
        .sum();
    Ok(sum / trajectories.len() as f64)
}

/// Mean and population standard deviation of episodic returns.
pub fn return_stats(trajectories: &[Trajectory], discount: f64) -> Result<(f64, f64)> {
    let mean = mean_return(trajectories, discount)?;
    let var = trajectories
        .iter()
        .map(|t| (episodic_return(t, discount) - mean).powi(2))
        .sum::<f64>()
        / trajectories.len() as f64;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::trajectory_with_rewards;

    // Loop oracle kept independent of the implementation's weight recurrence.
    fn oracle(rewards: &[f64], discount: f64) -> f64 {
        rewards
            .iter()
            .enumerate()
            .map(|(t, r)| discount.powi(t as i32) * r)
            .sum()
    }

    #[test]
    fn return_examples() {
        assert_eq!(
            episodic_return(&trajectory_with_rewards(&[1.0, 1.0, 1.0]), 1.0),
            3.0
        );
        assert_eq!(
            episodic_return(&trajectory_with_rewards(&[2.0, 3.0]), 0.5),
            3.5
        );
        assert_eq!(episodic_return(&trajectory_with_rewards(&[5.0]), 0.0), 5.0);
    }

    #[test]
    fn mean_examples() {
        let a = trajectory_with_rewards(&[1.0, 2.0]);
        let b = trajectory_with_rewards(&[5.0]);
        assert_eq!(mean_return(&[a, b], 1.0).unwrap(), 4.0);
        let single = trajectory_with_rewards(&[7.2]);
        assert_eq!(mean_return(&[single], 1.0).unwrap(), 7.2);
        let ten: Vec<_> = (0..10)
            .map(|r| trajectory_with_rewards(&[r as f64]))
            .collect();
        assert!((mean_return(&ten, 1.0).unwrap() - 4.5).abs() < 1e-12);
        assert!(matches!(mean_return(&[], 1.0), Err(Error::NoTrajectories)));
    }

    #[test]
    fn stats_of_constant_batch_have_zero_spread() {
        let ts: Vec<_> = (0..3)
            .map(|_| trajectory_with_rewards(&[1.5, -0.5]))
            .collect();
        let (m, s) = return_stats(&ts, 1.0).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(s, 0.0);
    }

    proptest::proptest! {
        #[test]
        fn matches_loop_oracle(rewards in proptest::collection::vec(-50.0f64..50.0, 1..60),
                               which in 0usize..3) {
            let discount = [0.0, 0.5, 1.0][which];
            let t = trajectory_with_rewards(&rewards);
            let got = episodic_return(&t, discount);
            proptest::prop_assert!((got - oracle(&rewards, discount)).abs() <= 1e-12);
        }
    }
}
