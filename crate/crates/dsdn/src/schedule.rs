//! DDPM noise schedule shared by both streams.
//!
//! Forward noising collapses to the closed form
//! `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps` with
//! `abar_t = prod_{i<=t} (1 - beta_i)`; the reverse step is the standard
//! ancestral update for an eps-predicting network with `sigma_t^2 = beta_t`.
//! All schedule constants live in f64; per-element work casts at the edge.
//!
//! Timesteps are 1-based: `t` runs over `1..=T` everywhere in this crate.

use crate::error::{config_err, Result};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Scalar};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `t_steps` steps, endpoints inclusive. A
    /// single-step schedule takes `beta_start`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_steps < 1 {
            return config_err(format!("schedule needs T >= 1, got {t_steps}"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return config_err(format!(
                "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}/{beta_end}"
            ));
        }
        let mut betas = Vec::with_capacity(t_steps);
        for i in 0..t_steps {
            let frac = if t_steps == 1 {
                0.0
            } else {
                i as f64 / (t_steps - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_steps);
        let mut run = 1.0;
        for &a in &alphas {
            run *= a;
            alpha_bars.push(run);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return config_err(format!("timestep {t} outside [1, {}]", self.len()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Closed-form forward noising at step `t`.
    pub fn q_sample<T: Scalar>(
        &self,
        z0: &Array<T>,
        t: usize,
        eps: &Array<T>,
    ) -> Result<Array<T>> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return config_err(format!(
                "q_sample shapes differ: {:?} vs {:?}",
                z0.shape(),
                eps.shape()
            ));
        }
        let ab = self.alpha_bar(t);
        let c0 = T::from_f64(ab.sqrt());
        let c1 = T::from_f64((1.0 - ab).sqrt());
        let data: Vec<T> = z0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&z, &e)| z * c0 + e * c1)
            .collect();
        Array::new(z0.shape().to_vec(), data).map_err(Into::into)
    }

    /// In-graph forward noising with a per-batch-row timestep, for inputs
    /// whose leading axis is the batch. Gradients flow through `z0`; the
    /// noise is a constant of the step.
    pub fn q_sample_graph<T: Scalar>(
        &self,
        z0: &Tensor<T>,
        ts: &[usize],
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let shape = z0.shape();
        if shape.is_empty() || shape[0] != ts.len() {
            return config_err(format!(
                "q_sample_graph wants one timestep per batch row, got {} for {:?}",
                ts.len(),
                shape
            ));
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let mut coeff_shape = vec![1usize; shape.len()];
        coeff_shape[0] = ts.len();
        let mut c0 = Vec::with_capacity(ts.len());
        let mut c1 = Vec::with_capacity(ts.len());
        for &t in ts {
            let ab = self.alpha_bar(t);
            c0.push(T::from_f64(ab.sqrt()));
            c1.push(T::from_f64((1.0 - ab).sqrt()));
        }
        let g = z0.graph();
        let c0 = g.constant(&Array::new(coeff_shape.clone(), c0)?);
        let c1 = g.constant(&Array::new(coeff_shape, c1)?);
        let signal = z0.mul(&c0)?;
        let noise = eps.mul(&c1)?;
        Ok(signal.add(&noise)?)
    }

    /// One ancestral reverse step:
    /// `z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    ///            + sqrt(beta_t) * noise`,
    /// with the noise term dropped at t = 1.
    pub fn p_step<T: Scalar>(
        &self,
        z_t: &Array<T>,
        eps_hat: &Array<T>,
        t: usize,
        noise: &Array<T>,
    ) -> Result<Array<T>> {
        self.check_t(t)?;
        if z_t.shape() != eps_hat.shape() || z_t.shape() != noise.shape() {
            return config_err(format!(
                "p_step shapes differ: {:?} / {:?} / {:?}",
                z_t.shape(),
                eps_hat.shape(),
                noise.shape()
            ));
        }
        let beta = self.beta(t);
        let k_eps = beta / (1.0 - self.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
        let sigma = if t == 1 { 0.0 } else { beta.sqrt() };
        let data: Vec<T> = z_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .zip(noise.data())
            .map(|((&z, &e), &n)| {
                let v = (z.into_f64() - k_eps * e.into_f64()) * inv_sqrt_alpha
                    + sigma * n.into_f64();
                T::from_f64(v)
            })
            .collect();
        Array::new(z_t.shape().to_vec(), data).map_err(Into::into)
    }
}

/// Sinusoidal timestep features, one row per entry of `ts`: the first
/// half of each row is sin at geometrically spaced frequencies, the
/// second half cos. Computed in f64 and cast, so rows are reproducible
/// across element types.
pub fn time_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Result<Array<T>> {
    if dim < 2 || dim % 2 != 0 {
        return crate::error::config_err(format!("time embedding width {dim} must be even"));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(i as f64) * (10_000.0_f64).ln() / (half.max(2) - 1) as f64).exp();
            data.push(T::from_f64((t as f64 * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(i as f64) * (10_000.0_f64).ln() / (half.max(2) - 1) as f64).exp();
            data.push(T::from_f64((t as f64 * freq).cos()));
        }
    }
    Array::new(vec![ts.len(), dim], data).map_err(Into::into)
}
