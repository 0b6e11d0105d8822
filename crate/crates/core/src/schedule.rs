//! Linear-beta noise schedule, forward noising and the deterministic DDIM
//! sampler.

use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Tables indexed by timestep `t` in `1..=T`; `alpha_bar(0)` is 1.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::validation("a noise schedule needs at least one step"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::validation(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
    pub fn q_sample(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != eps.len() {
            return Err(Error::dim(format!("noise has {} values for {}", eps.len(), x0.len())));
        }
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
    }

    /// Strictly decreasing visit order `t_0 = T > ... > t_{n-1} >= 1`.
    pub fn ddim_timesteps(&self, n_steps: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n_steps < 1 || n_steps > t {
            return Err(Error::validation(format!("sampling steps {n_steps} outside 1..={t}")));
        }
        Ok((0..n_steps)
            .map(|k| ((t * (n_steps - k)) as f64 / n_steps as f64).round() as usize)
            .collect())
    }

    /// One deterministic update from `t` to `t_prev` (`t_prev = 0` returns
    /// the clean-image estimate).
    pub fn ddim_step(&self, x_t: &[f64], eps_hat: &[f64], t: usize, t_prev: usize) -> Vec<f64> {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t_prev);
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pn) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x_t.iter()
            .zip(eps_hat)
            .map(|(x, e)| {
                let x0 = (x - sn * e) / sa;
                if t_prev == 0 {
                    x0
                } else {
                    pa * x0 + pn * e
                }
            })
            .collect()
    }

    /// Runs the sampler from `x_start`; `eps_fn(x_t, t)` predicts the noise.
    pub fn ddim_sample<F>(&self, n_steps: usize, x_start: Vec<f64>, mut eps_fn: F) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
    {
        let ts = self.ddim_timesteps(n_steps)?;
        let mut x = x_start;
        for (k, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(k + 1).copied().unwrap_or(0);
            let eps = eps_fn(&x, t)?;
            if eps.len() != x.len() {
                return Err(Error::dim("noise prediction changed the sample size"));
            }
            x = self.ddim_step(&x, &eps, t, t_prev);
        }
        Ok(x)
    }
}
