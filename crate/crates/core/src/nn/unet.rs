//! Two-level convolutional U-Net noise predictor.
//!
//! ```text
//! [window ⊕ τ-embedding] → conv_in → conv_enc ──────────────┐ skip
//!                                      ↓ avg-pool 2×          │
//!                           conv_mid1 → conv_mid2             │
//!                                      ↓ upsample 2×          │
//!                                    [up ⊕ skip] → conv_dec → conv_out
//! ```
//!
//! Every convolution is 3×3, stride 1, zero padding 1, followed by SiLU
//! except the zero-initialized output layer. The diffusion time enters as
//! a sinusoidal embedding broadcast over the plane as extra input channels.
//!
//! The noise estimate is `σ(τ)·x + α(τ)·F(x, τ)`, so `F` is a velocity
//! `αε − σx₀` and its errors reach `x̂(0)` scaled by `σ` instead of `σ/α`.
//! With `α(1) = 10⁻³` a bare ε-network wrecks the first sampler step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    avg_pool2, avg_pool2_backward, col2im, gemm, im2col, silu, silu_grad, upsample2,
    upsample2_backward,
};
use super::ParamSpec;
use crate::diffusion::{Denoiser, Plane};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub markov_order: usize,
    pub n_vars: usize,
    pub base_channels: usize,
    pub mid_channels: usize,
    pub emb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            markov_order: 1,
            n_vars: 1,
            base_channels: 16,
            mid_channels: 32,
            emb_dim: 16,
        }
    }
}

impl UNetConfig {
    pub fn window_channels(&self) -> usize {
        (2 * self.markov_order + 1) * self.n_vars
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    weight: usize,
    bias: usize,
}

impl Conv {
    fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }
}

#[derive(Debug, Clone)]
struct Layers {
    conv_in: Conv,
    conv_enc: Conv,
    conv_mid1: Conv,
    conv_mid2: Conv,
    conv_dec: Conv,
    conv_out: Conv,
}

impl Layers {
    fn build(cfg: &UNetConfig) -> (Self, Vec<ParamSpec>) {
        let (c1, c2) = (cfg.base_channels, cfg.mid_channels);
        let shapes = [
            ("conv_in", cfg.window_channels() + cfg.emb_dim, c1),
            ("conv_enc", c1, c1),
            ("conv_mid1", c1, c2),
            ("conv_mid2", c2, c2),
            ("conv_dec", c2 + c1, c1),
            ("conv_out", c1, cfg.window_channels()),
        ];
        let mut specs = Vec::new();
        let mut convs = Vec::new();
        let mut offset = 0;
        for (name, cin, cout) in shapes {
            let weight = offset;
            specs.push(ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, 3, 3],
                offset,
            });
            offset += cout * cin * 9;
            let bias = offset;
            specs.push(ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                offset,
            });
            offset += cout;
            convs.push(Conv {
                cin,
                cout,
                weight,
                bias,
            });
        }
        let layers = Self {
            conv_in: convs[0],
            conv_enc: convs[1],
            conv_mid1: convs[2],
            conv_mid2: convs[3],
            conv_dec: convs[4],
            conv_out: convs[5],
        };
        (layers, specs)
    }
}

/// Sinusoidal embedding of the diffusion time.
pub fn tau_embedding(tau: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        let arg = 1000.0 * tau * freq;
        e[j] = arg.sin();
        e[half + j] = arg.cos();
    }
    e
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    layers: Layers,
    specs: Vec<ParamSpec>,
    params: Vec<f64>,
}

struct ConvTape {
    col: Vec<f64>,
    pre: Vec<f64>,
}

struct Tape {
    conv_in: ConvTape,
    conv_enc: ConvTape,
    conv_mid1: ConvTape,
    conv_mid2: ConvTape,
    conv_dec: ConvTape,
    conv_out_col: Vec<f64>,
}

impl UNet {
    /// He-uniform initialization with a zero output layer, so a fresh
    /// network predicts zero noise everywhere.
    pub fn new(cfg: UNetConfig, seed: u64) -> Self {
        let mut net = Self::with_params(cfg, Vec::new());
        net.init(seed, true);
        net
    }

    /// Like [`UNet::new`] but with a random output layer too; used to make
    /// every layer's gradient non-trivial.
    pub fn new_dense(cfg: UNetConfig, seed: u64) -> Self {
        let mut net = Self::with_params(cfg, Vec::new());
        net.init(seed, false);
        net
    }

    fn with_params(cfg: UNetConfig, params: Vec<f64>) -> Self {
        let (layers, specs) = Layers::build(&cfg);
        Self {
            cfg,
            layers,
            specs,
            params,
        }
    }

    /// Rebuilds a network from a flat parameter vector.
    pub fn from_params(cfg: UNetConfig, params: Vec<f64>) -> Result<Self> {
        let net = Self::with_params(cfg, params);
        let want = net.param_count();
        ensure!(
            net.params.len() == want,
            Shape,
            "parameter vector has {} entries, architecture needs {want}",
            net.params.len()
        );
        Ok(net)
    }

    fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.len()).sum()
    }

    fn init(&mut self, seed: u64, zero_output: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params = vec![0.0; self.param_count()];
        let out = self.layers.conv_out;
        for conv in [
            self.layers.conv_in,
            self.layers.conv_enc,
            self.layers.conv_mid1,
            self.layers.conv_mid2,
            self.layers.conv_dec,
            out,
        ] {
            let bound = (6.0 / (conv.cin * 9) as f64).sqrt();
            let is_out = conv.weight == out.weight;
            for p in &mut self.params[conv.weight..conv.weight + conv.weight_len()] {
                let r: f64 = rng.gen_range(-bound..bound);
                *p = if is_out && zero_output { 0.0 } else { r };
            }
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    fn conv_forward(&self, conv: Conv, input: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let hw = h * w;
        let mut col = vec![0.0; conv.cin * 9 * hw];
        im2col(input, conv.cin, h, w, &mut col);
        let mut out = vec![0.0; conv.cout * hw];
        for (o, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(self.params[conv.bias + o]);
        }
        let weight = &self.params[conv.weight..conv.weight + conv.weight_len()];
        gemm(conv.cout, conv.cin * 9, hw, weight, false, &col, false, 1.0, &mut out);
        (col, out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    fn conv_backward(
        &self,
        conv: Conv,
        col: &[f64],
        dout: &[f64],
        h: usize,
        w: usize,
        grad: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let hw = h * w;
        let k = conv.cin * 9;
        gemm(
            conv.cout,
            hw,
            k,
            dout,
            false,
            col,
            true,
            1.0,
            &mut grad[conv.weight..conv.weight + conv.weight_len()],
        );
        for (o, row) in dout.chunks_exact(hw).enumerate() {
            grad[conv.bias + o] += row.iter().sum::<f64>();
        }
        if !need_input {
            return None;
        }
        let weight = &self.params[conv.weight..conv.weight + conv.weight_len()];
        let mut dcol = vec![0.0; k * hw];
        gemm(k, conv.cout, hw, weight, true, dout, false, 0.0, &mut dcol);
        let mut dinput = vec![0.0; conv.cin * hw];
        col2im(&dcol, conv.cin, h, w, &mut dinput);
        Some(dinput)
    }

    fn activated(&self, conv: Conv, input: &[f64], h: usize, w: usize) -> (ConvTape, Vec<f64>) {
        let (col, pre) = self.conv_forward(conv, input, h, w);
        let act = pre.iter().map(|&z| silu(z)).collect();
        (ConvTape { col, pre }, act)
    }

    fn forward(&self, window: &[f64], plane: Plane, tau: f64) -> (Vec<f64>, Tape) {
        let (h, w) = (plane.h, plane.w);
        let hw = h * w;
        let (h2, w2) = (h / 2, w / 2);
        let c1 = self.cfg.base_channels;
        let c2 = self.cfg.mid_channels;

        let mut input = Vec::with_capacity((self.cfg.window_channels() + self.cfg.emb_dim) * hw);
        input.extend_from_slice(window);
        for e in tau_embedding(tau, self.cfg.emb_dim) {
            input.extend(std::iter::repeat(e).take(hw));
        }

        let (t_in, a_in) = self.activated(self.layers.conv_in, &input, h, w);
        let (t_enc, skip) = self.activated(self.layers.conv_enc, &a_in, h, w);
        let pooled = avg_pool2(&skip, c1, h, w);
        let (t_m1, a_m1) = self.activated(self.layers.conv_mid1, &pooled, h2, w2);
        let (t_m2, a_m2) = self.activated(self.layers.conv_mid2, &a_m1, h2, w2);
        let mut cat = upsample2(&a_m2, c2, h2, w2);
        cat.extend_from_slice(&skip);
        let (t_dec, a_dec) = self.activated(self.layers.conv_dec, &cat, h, w);
        let (out_col, out) = self.conv_forward(self.layers.conv_out, &a_dec, h, w);
        let tape = Tape {
            conv_in: t_in,
            conv_enc: t_enc,
            conv_mid1: t_m1,
            conv_mid2: t_m2,
            conv_dec: t_dec,
            conv_out_col: out_col,
        };
        (out, tape)
    }

    fn backward(&self, tape: &Tape, dout: &[f64], plane: Plane, grad: &mut [f64]) {
        let (h, w) = (plane.h, plane.w);
        let (h2, w2) = (h / 2, w / 2);
        let c1 = self.cfg.base_channels;
        let c2 = self.cfg.mid_channels;
        let through_silu = |d: Vec<f64>, t: &ConvTape| -> Vec<f64> {
            d.iter().zip(&t.pre).map(|(g, &z)| g * silu_grad(z)).collect()
        };
        let l = &self.layers;

        let d_dec = self
            .conv_backward(l.conv_out, &tape.conv_out_col, dout, h, w, grad, true)
            .unwrap();
        let dz = through_silu(d_dec, &tape.conv_dec);
        let d_cat = self
            .conv_backward(l.conv_dec, &tape.conv_dec.col, &dz, h, w, grad, true)
            .unwrap();
        let (d_up, d_skip) = d_cat.split_at(c2 * h * w);
        let d_m2 = upsample2_backward(d_up, c2, h2, w2);
        let dz = through_silu(d_m2, &tape.conv_mid2);
        let d_m1 = self
            .conv_backward(l.conv_mid2, &tape.conv_mid2.col, &dz, h2, w2, grad, true)
            .unwrap();
        let dz = through_silu(d_m1, &tape.conv_mid1);
        let d_pool = self
            .conv_backward(l.conv_mid1, &tape.conv_mid1.col, &dz, h2, w2, grad, true)
            .unwrap();
        let mut d_enc = avg_pool2_backward(&d_pool, c1, h, w);
        for (a, b) in d_enc.iter_mut().zip(d_skip) {
            *a += b;
        }
        let dz = through_silu(d_enc, &tape.conv_enc);
        let d_in = self
            .conv_backward(l.conv_enc, &tape.conv_enc.col, &dz, h, w, grad, true)
            .unwrap();
        let dz = through_silu(d_in, &tape.conv_in);
        self.conv_backward(l.conv_in, &tape.conv_in.col, &dz, h, w, grad, false);
    }

    fn check_plane(&self, plane: Plane) -> Result<()> {
        ensure!(
            plane.h >= 2 && plane.w >= 2 && plane.h % 2 == 0 && plane.w % 2 == 0,
            Shape,
            "U-Net needs even spatial extents, got {}x{}",
            plane.h,
            plane.w
        );
        Ok(())
    }
}

impl UNet {
    fn to_noise(&self, out: &mut [f64], window: &[f64], tau: f64) {
        let s = self.schedule();
        let (a, g) = (s.alpha(tau), s.sigma(tau));
        for (o, x) in out.iter_mut().zip(window) {
            *o = g * x + a * *o;
        }
    }
}

impl Denoiser for UNet {
    fn markov_order(&self) -> usize {
        self.cfg.markov_order
    }

    fn n_vars(&self) -> usize {
        self.cfg.n_vars
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn predict_noise(&self, window: &[f64], plane: Plane, tau: f64) -> Result<Vec<f64>> {
        self.check_window(window.len(), plane)?;
        self.check_plane(plane)?;
        let mut out = self.forward(window, plane, tau).0;
        self.to_noise(&mut out, window, tau);
        Ok(out)
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
        self.check_plane(plane)?;
        ensure!(target.len() == window.len(), Shape, "target length mismatch");
        let (mut out, tape) = self.forward(window, plane, tau);
        self.to_noise(&mut out, window, tau);
        let a = self.schedule().alpha(tau);
        let mut loss = 0.0;
        let dout: Vec<f64> = out
            .iter()
            .zip(target)
            .map(|(o, t)| {
                let r = o - t;
                loss += r * r;
                2.0 * scale * a * r
            })
            .collect();
        self.backward(&tape, &dout, plane, grad);
        Ok(scale * loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::check_gradient;

    fn tiny() -> UNetConfig {
        UNetConfig {
            markov_order: 1,
            n_vars: 2,
            base_channels: 3,
            mid_channels: 4,
            emb_dim: 4,
        }
    }

    #[test]
    fn fresh_network_predicts_the_linear_term() {
        let cfg = UNetConfig {
            n_vars: 2,
            ..UNetConfig::default()
        };
        let net = UNet::new(cfg, 7);
        let plane = Plane { h: 8, w: 8 };
        let window: Vec<f64> = (0..6 * 64).map(|i| (i as f64 * 0.1).sin()).collect();
        let out = net.predict_noise(&window, plane, 0.4).unwrap();
        assert_eq!(out.len(), window.len());
        let g = net.schedule().sigma(0.4);
        assert!(out.iter().zip(&window).all(|(o, x)| *o == g * x));
    }

    #[test]
    fn default_size_is_tens_of_thousands() {
        let net = UNet::new(
            UNetConfig {
                n_vars: 2,
                ..Default::default()
            },
            0,
        );
        let n = net.params().len();
        assert!((10_000..100_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn rejects_odd_planes_and_wrong_windows() {
        let net = UNet::new_dense(tiny(), 1);
        assert!(net.predict_noise(&vec![0.0; 6 * 9], Plane { h: 3, w: 3 }, 0.5).is_err());
        assert!(net.predict_noise(&vec![0.0; 5 * 16], Plane { h: 4, w: 4 }, 0.5).is_err());
    }

    #[test]
    fn every_layer_gradient_matches_finite_differences() {
        let net = UNet::new_dense(tiny(), 11);
        let plane = Plane { h: 4, w: 4 };
        let n = 6 * 16;
        let window: Vec<f64> = (0..n).map(|i| ((i * 7) % 13) as f64 / 6.5 - 1.0).collect();
        let target: Vec<f64> = (0..n).map(|i| ((i * 5) % 11) as f64 / 5.5 - 1.0).collect();
        let rel = check_gradient(&net, &window, plane, 0.37, &target);
        for spec in net.param_specs() {
            let worst = rel[spec.offset..spec.offset + spec.len()]
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(worst < 1e-3, "{}: relative error {worst}", spec.name);
        }
    }

    #[test]
    fn embedding_has_sin_cos_halves() {
        let e = tau_embedding(0.0, 16);
        assert!(e[..8].iter().all(|&x| x == 0.0));
        assert!(e[8..].iter().all(|&x| x == 1.0));
    }
}
