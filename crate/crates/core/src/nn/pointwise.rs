use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{Denoiser, Plane};
use crate::error::Result;

/// Elementwise noise predictor
/// `ε̂(x, τ) = σ(τ)·[Σ_j a_j·tanh(u_j·x + v_j·τ + c_j) + d·x + e]`.
///
/// The bracket is minus the score, which stays bounded as `τ → 0` for
/// smooth densities. Every value of a window is treated independently,
/// which makes this the reference model for scalar toy densities. With
/// `hidden` units it has `4·hidden + 2` parameters.
#[derive(Debug, Clone)]
pub struct PointwiseMlp {
    markov_order: usize,
    n_vars: usize,
    hidden: usize,
    params: Vec<f64>,
}

impl PointwiseMlp {
    pub fn new(markov_order: usize, n_vars: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..4 * hidden + 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            markov_order,
            n_vars,
            hidden,
            params,
        }
    }

    pub fn from_params(markov_order: usize, n_vars: usize, params: Vec<f64>) -> Self {
        assert!(params.len() >= 2 && (params.len() - 2) % 4 == 0);
        Self {
            markov_order,
            n_vars,
            hidden: (params.len() - 2) / 4,
            params,
        }
    }

    fn bracket(&self, x: f64, tau: f64) -> f64 {
        let h = self.hidden;
        let p = &self.params;
        let mut out = p[4 * h] * x + p[4 * h + 1];
        for j in 0..h {
            out += p[j] * (p[h + j] * x + p[2 * h + j] * tau + p[3 * h + j]).tanh();
        }
        out
    }
}

impl Denoiser for PointwiseMlp {
    fn markov_order(&self) -> usize {
        self.markov_order
    }

    fn n_vars(&self) -> usize {
        self.n_vars
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn predict_noise(&self, window: &[f64], plane: Plane, tau: f64) -> Result<Vec<f64>> {
        self.check_window(window.len(), plane)?;
        let g = self.schedule().sigma(tau);
        Ok(window.iter().map(|&x| g * self.bracket(x, tau)).collect())
    }

    fn squared_error_grad(
        &self,
        window: &[f64],
        plane: Plane,
        tau: f64,
        target: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.check_window(window.len(), plane)?;
        let h = self.hidden;
        let p = &self.params;
        let g = self.schedule().sigma(tau);
        let mut loss = 0.0;
        for (&x, &t) in window.iter().zip(target) {
            let r = g * self.bracket(x, tau) - t;
            loss += r * r;
            let d = 2.0 * scale * r * g;
            grad[4 * h] += d * x;
            grad[4 * h + 1] += d;
            for j in 0..h {
                let act = (p[h + j] * x + p[2 * h + j] * tau + p[3 * h + j]).tanh();
                let dz = d * p[j] * (1.0 - act * act);
                grad[j] += d * act;
                grad[h + j] += dz * x;
                grad[2 * h + j] += dz * tau;
                grad[3 * h + j] += dz;
            }
        }
        Ok(scale * loss)
    }
}
