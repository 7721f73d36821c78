//! Noise schedule, forward corruption, posterior reverse transition and the
//! guided ancestral sampling loop.
//!
//! Timesteps are 1-based: `t` ranges over `1..=T` and `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{DpgError, Result};
use crate::rng::{gaussian_vec, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Linear,
}

/// Serializable description from which a schedule is rebuilt bit-exactly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            shape: ScheduleShape::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn build(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            steps,
            beta_start,
            beta_end,
            shape,
        } = spec;
        if steps == 0 {
            return Err(DpgError::InvalidArgument("diffusion needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DpgError::InvalidArgument(format!(
                "beta bounds must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = match shape {
            ScheduleShape::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_start
                    } else {
                        beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule {
            spec,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Builds a schedule from explicit betas (used for hand-checked cases).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(DpgError::InvalidArgument("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DpgError::InvalidArgument("betas must be non-decreasing".into()));
        }
        let spec = ScheduleSpec {
            steps: betas.len(),
            beta_start: betas[0],
            beta_end: *betas.last().unwrap(),
            shape: ScheduleShape::Linear,
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule {
            spec,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0) == 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(DpgError::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )))
        } else {
            Ok(())
        }
    }

    /// Coefficients `(c_x0, c_xt, sigma)` of the forward-process posterior
    /// `q(x_s | x_t, x_0)` for `0 <= s < t`.
    pub fn posterior(&self, t: usize, s: usize) -> (f64, f64, f64) {
        debug_assert!(s < t);
        let ab_t = self.alpha_bar(t);
        let ab_s = self.alpha_bar(s);
        let a_ts = ab_t / ab_s;
        let b_ts = 1.0 - a_ts;
        let c_x0 = ab_s.sqrt() * b_ts / (1.0 - ab_t);
        let c_xt = a_ts.sqrt() * (1.0 - ab_s) / (1.0 - ab_t);
        let var = b_ts * (1.0 - ab_s) / (1.0 - ab_t);
        (c_x0, c_xt, var.max(0.0).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<NoisyState> {
    sched.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(DpgError::InvalidArgument("x0 and eps dimensions differ".into()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(NoisyState {
        x_t: x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect(),
        t,
        eps: eps.to_vec(),
    })
}

/// One posterior step from `t` to `s < t`.
pub fn reverse_step_to(x_t: &[f64], t: usize, s: usize, x0_hat: &[f64], sched: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if s >= t {
        return Err(DpgError::InvalidArgument(format!("reverse step must go down ({t} -> {s})")));
    }
    if x_t.iter().chain(x0_hat).chain(noise).any(|v| !v.is_finite()) {
        return Err(DpgError::NonFinite("reverse step input".into()));
    }
    let (c0, ct, sigma) = sched.posterior(t, s);
    let sigma = if s == 0 { 0.0 } else { sigma };
    Ok(x0_hat
        .iter()
        .zip(x_t)
        .zip(noise)
        .map(|((x0, xt), n)| c0 * x0 + ct * xt + sigma * n)
        .collect())
}

/// `x_{t-1} = mu(x_t, x0_hat) + sigma_t * noise`; deterministic at `t == 1`.
pub fn reverse_step(state: &NoisyState, x0_hat: &[f64], sched: &DiffusionSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    reverse_step_to(&state.x_t, state.t, state.t - 1, x0_hat, sched, noise)
}

/// Evenly strided descending timesteps, always starting at `T` and, for
/// `n >= 2`, ending at 1.
pub fn strided_timesteps(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(DpgError::InvalidArgument(format!(
            "inference steps {n_steps} outside 1..={total}"
        )));
    }
    if n_steps == 1 {
        return Ok(vec![total]);
    }
    let stride = (total - 1) as f64 / (n_steps - 1) as f64;
    Ok((0..n_steps)
        .map(|i| (total as f64 - i as f64 * stride).round() as usize)
        .collect())
}

/// Anything that predicts `x0` from a noisy state at a timestep. Guidance is
/// bound inside the implementor.
pub trait Denoiser {
    fn predict_x0(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&[f64], usize) -> Result<Vec<f64>>,
{
    fn predict_x0(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self(x_t, t)
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` over the strided timesteps;
/// returns the final `x0` prediction.
pub fn guided_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    sched: &DiffusionSchedule,
    dim: usize,
    n_steps: usize,
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let steps = strided_timesteps(sched.steps(), n_steps)?;
    let mut x = gaussian_vec(rng, dim);
    let mut x0_hat = Vec::new();
    for (i, &t) in steps.iter().enumerate() {
        x0_hat = denoiser.predict_x0(&x, t)?;
        let s = steps.get(i + 1).copied().unwrap_or(0);
        let noise = if s == 0 { vec![0.0; dim] } else { gaussian_vec(rng, dim) };
        x = reverse_step_to(&x, t, s, &x0_hat, sched, &noise)?;
    }
    Ok(x0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn default_sched() -> DiffusionSchedule {
        DiffusionSchedule::build(ScheduleSpec::default()).unwrap()
    }

    #[test]
    fn single_and_two_step_products() {
        let s = DiffusionSchedule::build(ScheduleSpec {
            steps: 1,
            beta_start: 0.1,
            beta_end: 0.1,
            shape: ScheduleShape::Linear,
        })
        .unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        let s = DiffusionSchedule::build(ScheduleSpec {
            steps: 2,
            beta_start: 0.1,
            beta_end: 0.2,
            shape: ScheduleShape::Linear,
        })
        .unwrap();
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_bounds() {
        for (b0, b1) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            let spec = ScheduleSpec {
                steps: 5,
                beta_start: b0,
                beta_end: b1,
                shape: ScheduleShape::Linear,
            };
            assert!(DiffusionSchedule::build(spec).is_err());
        }
        let spec = ScheduleSpec { steps: 0, ..ScheduleSpec::default() };
        assert!(DiffusionSchedule::build(spec).is_err());
    }

    #[test]
    fn forward_edge_cases() {
        let s = default_sched();
        let x0 = [1.0, -2.0];
        let st = forward_diffuse(&x0, 10, &[0.0, 0.0], &s).unwrap();
        let a = s.alpha_bar(10).sqrt();
        assert_eq!(st.x_t, vec![a, -2.0 * a]);
        let st = forward_diffuse(&[0.0, 0.0], 10, &[0.5, 1.0], &s).unwrap();
        let b = (1.0 - s.alpha_bar(10)).sqrt();
        assert_eq!(st.x_t, vec![0.5 * b, b]);
        assert!(forward_diffuse(&x0, 0, &[0.0, 0.0], &s).is_err());
        assert!(forward_diffuse(&x0, 51, &[0.0, 0.0], &s).is_err());
    }

    #[test]
    fn reverse_step_edge_cases() {
        let s = default_sched();
        let st = NoisyState { x_t: vec![0.3, 0.7], t: 1, eps: vec![0.0; 2] };
        let out = reverse_step(&st, &[1.5, -0.5], &s, &[9.0, 9.0]).unwrap();
        assert_eq!(out, vec![1.5, -0.5]);

        let st = NoisyState { x_t: vec![0.3], t: 20, eps: vec![0.0] };
        let out = reverse_step(&st, &[1.0], &s, &[0.0]).unwrap();
        let (c0, ct, _) = s.posterior(20, 19);
        assert_eq!(out, vec![c0 * 1.0 + ct * 0.3]);

        assert!(reverse_step(&st, &[f64::NAN], &s, &[0.0]).is_err());
    }

    #[test]
    fn strided_full_equals_all_steps() {
        let full = strided_timesteps(50, 50).unwrap();
        assert_eq!(full, (1..=50).rev().collect::<Vec<_>>());
        assert_eq!(strided_timesteps(50, 1).unwrap(), vec![50]);
        let five = strided_timesteps(50, 5).unwrap();
        assert_eq!(five.first(), Some(&50));
        assert_eq!(five.last(), Some(&1));
        assert_eq!(five.len(), 5);
        assert!(five.windows(2).all(|w| w[0] > w[1]));
        assert!(strided_timesteps(50, 51).is_err());
    }

    #[test]
    fn constant_oracle_denoiser_is_reached() {
        let s = default_sched();
        let target = vec![0.25, -1.0, 3.0];
        let oracle = |_: &[f64], _: usize| Ok(target.clone());
        let mut r = rng::stream(4, "t", 0);
        let out = guided_sample(&oracle, &s, 3, 50, &mut r).unwrap();
        for (a, b) in out.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_calls_denoiser_once() {
        let s = default_sched();
        let calls = std::cell::Cell::new(0);
        let d = |x: &[f64], t: usize| {
            calls.set(calls.get() + 1);
            assert_eq!(t, 50);
            Ok(x.to_vec())
        };
        let mut r = rng::stream(4, "t", 0);
        guided_sample(&d, &s, 2, 1, &mut r).unwrap();
        assert_eq!(calls.get(), 1);
    }
}
