use sda_core::diffusion::{Denoiser, Plane};
use sda_core::nn::{UNet, UNetConfig};
use std::time::Instant;

fn main() {
    let plane = Plane { h: 32, w: 32 };
    for (base, mid, emb) in [(8, 16, 8), (12, 24, 16), (16, 32, 16)] {
        let cfg = UNetConfig { n_vars: 2, base_channels: base, mid_channels: mid, emb_dim: emb, ..Default::default() };
        let net = UNet::new_dense(cfg, 1);
        let window: Vec<f64> = (0..cfg.window_channels() * 1024).map(|i| (i as f64 * 0.01).sin()).collect();
        let t = Instant::now();
        for _ in 0..50 {
            std::hint::black_box(net.predict_noise(&window, plane, 0.5).unwrap());
        }
        let fwd = t.elapsed() / 50;
        let mut g = vec![0.0; net.params().len()];
        let t = Instant::now();
        for _ in 0..20 {
            net.squared_error_grad(&window, plane, 0.5, &window, 1.0, &mut g).unwrap();
        }
        println!("{base}/{mid}/{emb}: {} params, forward {fwd:?}, fwd+bwd {:?} per window", net.params().len(), t.elapsed() / 20);
    }
}
