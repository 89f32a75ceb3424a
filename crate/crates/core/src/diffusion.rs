//! Noise schedule, forward noising and the x0-parameterized reverse step.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Squared-cosine cumulative product with offset `s = 0.008`.
    Cosine,
    /// Betas linear from `1e-4` to `2e-2`, rescaled by `1000 / T`.
    Linear,
}

/// Upper bound on `alpha_bar_T` for the terminal distribution to count as
/// standard normal.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 1e-3;

const MAX_BETA: f64 = 0.999;

/// Immutable diffusion constants; index 0 of the cumulative arrays is the
/// clean-data boundary (`alpha_bar_0 = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Serializable description from which a schedule is rebuilt bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.kind)
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let t_max = steps as f64;
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    ((t / t_max + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Linear => {
                let scale = 1000.0 / t_max;
                let (start, end) = (scale * 1e-4, scale * 2e-2);
                (0..steps)
                    .map(|i| {
                        let frac = if steps == 1 { 0.0 } else { i as f64 / (t_max - 1.0) };
                        (start + (end - start) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let schedule = Self {
            kind,
            steps,
            betas,
            alphas,
            alpha_bars,
        };
        schedule.check_invariants()?;
        Ok(schedule)
    }

    fn check_invariants(&self) -> Result<()> {
        if let Some(t) = self.alphas.iter().position(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config(format!("alpha_{} outside (0, 1)", t + 1)));
        }
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar is not strictly decreasing".into()));
        }
        let last = self.alpha_bar(self.steps);
        if last >= MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::Config(format!(
                "alpha_bar_T = {last:.3e} is not below {MAX_TERMINAL_ALPHA_BAR:e}; use more steps"
            )));
        }
        Ok(())
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            steps: self.steps,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// `alpha_t` for `1 <= t <= T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps {
            return Err(Error::Step {
                step: t,
                min,
                max: self.steps,
            });
        }
        Ok(())
    }

    /// Posterior `q(x_{t-1} | x_t, x0)`: `(coef_x0, coef_xt, variance)`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let coef_x0 = beta * ab_prev.sqrt() / (1.0 - ab);
        let coef_xt = (1.0 - ab_prev) * self.alpha(t).sqrt() / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        (coef_x0, coef_xt, var)
    }

    /// Closed-form forward sample `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`;
    /// `t = 0` returns `x0`.
    pub fn q_sample(&self, x0: ArrayView2<f64>, t: usize, noise: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_step(t, 0)?;
        if x0.dim() != noise.dim() {
            return Err(Error::Validation(format!(
                "noise shape {:?} differs from x0 shape {:?}",
                noise.dim(),
                x0.dim()
            )));
        }
        let a = self.alpha_bar(t).sqrt();
        let b = (1.0 - self.alpha_bar(t)).sqrt();
        Ok(Zip::from(&x0).and(&noise).map_collect(|x, e| a * x + b * e))
    }

    /// One ancestral step from `x_t` given a clean prediction; the final step
    /// (`t = 1`) returns the posterior mean without noise.
    pub fn posterior_step<R: Rng + ?Sized>(
        &self,
        x_t: ArrayView2<f64>,
        x0_hat: ArrayView2<f64>,
        t: usize,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.check_step(t, 1)?;
        if x_t.dim() != x0_hat.dim() {
            return Err(Error::Validation(format!(
                "prediction shape {:?} differs from x_t shape {:?}",
                x0_hat.dim(),
                x_t.dim()
            )));
        }
        let (c0, ct, var) = self.posterior_coefficients(t);
        let mut mean = Zip::from(&x0_hat).and(&x_t).map_collect(|x0, xt| c0 * x0 + ct * xt);
        if t > 1 {
            let sd = var.sqrt();
            mean.mapv_inplace(|m| m + sd * rng.sample::<f64, _>(StandardNormal));
        }
        Ok(mean)
    }
}

/// Standard normal array of the given shape.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}
