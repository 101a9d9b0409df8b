//! Pseudo-time grid with a piecewise-linear load multiplier and the
//! midpoint temporal quadrature used by every time integral in the kit:
//! n_t - 1 intervals, integrand values at midpoints taken as the average of
//! the adjacent nodal values.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Default load program: two symmetric triangular cycles peaking at +-1.
pub const DEFAULT_PROFILE: [(f64, f64); 7] = [
    (0.0, 0.0),
    (0.125, 1.0),
    (0.375, -1.0),
    (0.5, 0.0),
    (0.625, 1.0),
    (0.875, -1.0),
    (1.0, 0.0),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    multipliers: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid of `n_steps` points across the knot span, multiplier
    /// interpolated linearly from the (time, value) knots.
    pub fn from_profile(knots: &[(f64, f64)], n_steps: usize) -> Result<TimeGrid> {
        if n_steps < 2 {
            return Err(Error::IllPosed("need at least two time points".into()));
        }
        if knots.len() < 2 {
            return Err(Error::IllPosed("load profile needs at least two knots".into()));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::IllPosed(
                    "load profile knots must have strictly increasing times".into(),
                ));
            }
        }
        let t0 = knots[0].0;
        let t1 = knots[knots.len() - 1].0;
        let times: Vec<f64> = (0..n_steps)
            .map(|i| t0 + (t1 - t0) * i as f64 / (n_steps - 1) as f64)
            .collect();
        let multipliers = times.iter().map(|&t| interp(knots, t)).collect();
        Ok(TimeGrid { times, multipliers })
    }

    pub fn default_profile(n_steps: usize) -> Result<TimeGrid> {
        TimeGrid::from_profile(&DEFAULT_PROFILE, n_steps)
    }

    pub fn from_parts(times: Vec<f64>, multipliers: Vec<f64>) -> Result<TimeGrid> {
        if times.len() != multipliers.len() || times.len() < 2 {
            return Err(Error::DimensionMismatch(
                "times and multipliers must match with length >= 2".into(),
            ));
        }
        for w in times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::IllPosed("times must be strictly increasing".into()));
            }
        }
        Ok(TimeGrid { times, multipliers })
    }

    /// Number of time points.
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn multipliers(&self) -> &[f64] {
        &self.multipliers
    }

    pub fn dt(&self, interval: usize) -> f64 {
        self.times[interval + 1] - self.times[interval]
    }

    /// Midpoint value of a nodal history on the given interval.
    pub fn midpoint(&self, nodal: &[f64], interval: usize) -> f64 {
        0.5 * (nodal[interval] + nodal[interval + 1])
    }

    pub fn midpoint_multiplier(&self, interval: usize) -> f64 {
        self.midpoint(&self.multipliers, interval)
    }

    /// Temporal seminorm sqrt(sum_i mid(g, i)^2 dt_i); triplet time profiles
    /// are normalized to 1 in this norm.
    pub fn time_norm(&self, nodal: &[f64]) -> f64 {
        debug_assert_eq!(nodal.len(), self.n_steps());
        (0..self.n_intervals())
            .map(|i| {
                let m = self.midpoint(nodal, i);
                m * m * self.dt(i)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Temporal inner product sum_i mid(a, i) mid(b, i) dt_i.
    pub fn time_dot(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..self.n_intervals())
            .map(|i| self.midpoint(a, i) * self.midpoint(b, i) * self.dt(i))
            .sum()
    }

    /// Load multiplier scaled to unit time norm, the starting time profile
    /// of every new expansion term.
    pub fn normalized_multiplier(&self) -> Result<Vec<f64>> {
        let norm = self.time_norm(&self.multipliers);
        if !(norm > 0.0) {
            return Err(Error::IllPosed(
                "load multiplier vanishes in the temporal norm".into(),
            ));
        }
        Ok(self.multipliers.iter().map(|m| m / norm).collect())
    }
}

fn interp(knots: &[(f64, f64)], t: f64) -> f64 {
    if t <= knots[0].0 {
        return knots[0].1;
    }
    for w in knots.windows(2) {
        if t <= w[1].0 {
            let a = (t - w[0].0) / (w[1].0 - w[0].0);
            return w[0].1 + a * (w[1].1 - w[0].1);
        }
    }
    knots[knots.len() - 1].1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_profile_hits_knots_on_41_points() {
        let grid = TimeGrid::default_profile(41).unwrap();
        assert_eq!(grid.n_steps(), 41);
        assert_eq!(grid.n_intervals(), 40);
        let m = grid.multipliers();
        assert_eq!(m[0], 0.0);
        assert_eq!(m[5], 1.0);
        assert_eq!(m[15], -1.0);
        assert_eq!(m[20], 0.0);
        assert_eq!(m[25], 1.0);
        assert_eq!(m[35], -1.0);
        assert_eq!(m[40], 0.0);
        assert_relative_eq!(m.iter().fold(0.0_f64, |a, &b| a.max(b.abs())), 1.0);
    }

    #[test]
    fn constant_history_time_norm_is_span() {
        let grid = TimeGrid::from_parts(vec![0.0, 0.25, 1.0], vec![1.0, 1.0, 1.0]).unwrap();
        // sqrt(sum 1^2 dt) = sqrt(total span).
        assert_relative_eq!(grid.time_norm(&[1.0, 1.0, 1.0]), 1.0, max_relative = 1e-14);
        assert_relative_eq!(grid.time_dot(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]), 2.0);
    }

    #[test]
    fn normalized_multiplier_has_unit_norm() {
        let grid = TimeGrid::default_profile(41).unwrap();
        let g = grid.normalized_multiplier().unwrap();
        assert_relative_eq!(grid.time_norm(&g), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_profile_rejected() {
        let grid = TimeGrid::from_parts(vec![0.0, 1.0], vec![0.0, 0.0]).unwrap();
        assert!(grid.normalized_multiplier().is_err());
    }

    #[test]
    fn bad_profiles_rejected() {
        assert!(TimeGrid::from_profile(&[(0.0, 0.0)], 5).is_err());
        assert!(TimeGrid::from_profile(&[(0.0, 0.0), (0.0, 1.0)], 5).is_err());
        assert!(TimeGrid::from_profile(&[(0.0, 0.0), (1.0, 1.0)], 1).is_err());
    }
}
