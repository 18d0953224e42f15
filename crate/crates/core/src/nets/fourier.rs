use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Sinusoidal flow-time features with dyadic frequencies `1, 2, 4, ...`.
///
/// `embed(τ) = [sin(2π f_0 τ), …, sin(2π f_{k-1} τ), cos(2π f_0 τ), …]`
/// with `k = dim / 2`. Frequencies are fixed, not learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierEmbed {
    dim: usize,
}

impl Default for FourierEmbed {
    fn default() -> Self {
        Self { dim: 16 }
    }
}

impl FourierEmbed {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "Fourier embedding dim must be even and positive, got {dim}"
            )));
        }
        Ok(Self { dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.dim / 2).map(|i| (1u64 << i) as f64).collect()
    }

    pub fn embed(&self, tau: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::contract(format!("flow time {tau} outside [0, 1]")));
        }
        let mut out = vec![0.0; self.dim];
        self.write(tau, &mut out);
        Ok(out)
    }

    fn write(&self, tau: f64, out: &mut [f64]) {
        let half = self.dim / 2;
        for i in 0..half {
            let phase = TAU * (1u64 << i) as f64 * tau;
            out[i] = phase.sin();
            out[half + i] = phase.cos();
        }
    }

    /// `[taus.len(), dim]` feature matrix.
    pub fn embed_rows(&self, taus: &[f64]) -> Result<Tensor> {
        let mut data = vec![0.0; taus.len() * self.dim];
        for (row, &tau) in data.chunks_mut(self.dim).zip(taus) {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::contract(format!("flow time {tau} outside [0, 1]")));
            }
            self.write(tau, row);
        }
        Ok(Tensor::matrix(taus.len(), self.dim, data))
    }
}

/// One-off embedding of a single flow time.
pub fn fourier_embed(tau: f64, dim: usize) -> Result<Vec<f64>> {
    FourierEmbed::new(dim)?.embed(tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time() {
        let e = fourier_embed(0.0, 16).unwrap();
        assert_eq!(e.len(), 16);
        assert!(e[..8].iter().all(|&v| v == 0.0));
        assert!(e[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_time_first_frequency() {
        let e = fourier_embed(0.5, 16).unwrap();
        assert!(e[0].abs() < 1e-15);
        assert_eq!(e[8], -1.0);
    }

    #[test]
    fn rejects_out_of_range_and_odd_dims() {
        assert!(fourier_embed(1.5, 16).is_err());
        assert!(fourier_embed(-0.1, 16).is_err());
        assert!(FourierEmbed::new(7).is_err());
    }

    #[test]
    fn bounded_and_smooth() {
        let emb = FourierEmbed::default();
        let h = 1e-6;
        for k in 1..50 {
            let tau = k as f64 / 51.0;
            let e = emb.embed(tau).unwrap();
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
            let (ep, em) = (emb.embed(tau + h).unwrap(), emb.embed(tau - h).unwrap());
            for (i, f) in emb.frequencies().iter().enumerate() {
                let w = TAU * f;
                let fd_sin = (ep[i] - em[i]) / (2.0 * h);
                let fd_cos = (ep[8 + i] - em[8 + i]) / (2.0 * h);
                // derivative scales with w; compare relative to it
                assert!((fd_sin - w * (w * tau).cos()).abs() / w < 1e-6);
                assert!((fd_cos + w * (w * tau).sin()).abs() / w < 1e-6);
            }
        }
    }
}
