use crate::error::{Error, Result};

const GRID_TOL: f64 = 1e-9;

/// Forward-Euler schedule for integrating from `from` to `to`.
///
/// The step count is `K = max(1, round((to - from) * n_steps))` with uniform
/// steps. When both endpoints sit on the global `1/n_steps` grid the step
/// times are computed from integer grid indices, so splitting an
/// integration at a grid point reproduces the unsplit result bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPlan {
    steps: usize,
    h: f64,
    from: f64,
    grid: Option<(usize, usize)>,
}

impl StepPlan {
    pub fn new(from: f64, to: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::contract("n_steps must be >= 1"));
        }
        if !(0.0..=1.0).contains(&from) || !(0.0..=1.0).contains(&to) || from > to {
            return Err(Error::contract(format!(
                "invalid flow interval [{from}, {to}]"
            )));
        }
        if from == to {
            return Ok(Self {
                steps: 0,
                h: 0.0,
                from,
                grid: None,
            });
        }
        let n = n_steps as f64;
        let (a, b) = (from * n, to * n);
        if (a - a.round()).abs() < GRID_TOL && (b - b.round()).abs() < GRID_TOL {
            let (i0, i1) = (a.round() as usize, b.round() as usize);
            if i1 > i0 {
                return Ok(Self {
                    steps: i1 - i0,
                    h: 1.0 / n,
                    from,
                    grid: Some((i0, n_steps)),
                });
            }
        }
        let steps = (((to - from) * n).round() as usize).max(1);
        Ok(Self {
            steps,
            h: (to - from) / steps as f64,
            from,
            grid: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_size(&self) -> f64 {
        self.h
    }

    /// Flow time at the start of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        match self.grid {
            Some((i0, n)) => (i0 + k) as f64 / n as f64,
            None => self.from + k as f64 * self.h,
        }
        .min(1.0)
    }
}
