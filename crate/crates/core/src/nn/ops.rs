//! Dense kernels: 3×3 same-padding convolution via im2col + GEMM, 2×2
//! average pooling, nearest-neighbour upsampling and SiLU.

/// `c = beta·c + a·b` for row-major `a: m×k`, `b: k×n`, `c: m×n`, with
/// optional transposition of `a` or `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe the row-major buffers whose lengths are
    // asserted above; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `(c, h, w)` into a `(c·9) × (h·w)` patch matrix, zero padded.
pub fn im2col(input: &[f64], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * 9 * hw);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * hw..((ch * 9) + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto `(c, h, w)`.
pub fn col2im(col: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    out.fill(0.0);
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 9) + ky * 3 + kx) * hw..((ch * 9) + ky * 3 + kx + 1) * hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src = &row[i * w..(i + 1) * w];
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn avg_pool2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                let p = |di: usize, dj: usize| input[ch * h * w + (2 * i + di) * w + 2 * j + dj];
                out[ch * h2 * w2 + i * w2 + j] = 0.25 * (p(0, 0) + p(0, 1) + p(1, 0) + p(1, 1));
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out[ch * h * w + i * w + j] = 0.25 * grad[ch * h2 * w2 + (i / 2) * w2 + j / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling from `(c, h, w)` to `(c, 2h, 2w)`.
pub fn upsample2(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[ch * h2 * w2 + i * w2 + j] = input[ch * h * w + (i / 2) * w + j / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[ch * h * w + (i / 2) * w + j / 2] += grad[ch * h2 * w2 + i * w2 + j];
            }
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * cin + c) * 3 + ky) * 3 + kx]
                                    * input[(c * h + si as usize) * w + sj as usize];
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let (cin, cout, h, w) = (3, 2, 5, 4);
        let input: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let mut col = vec![0.0; cin * 9 * h * w];
        im2col(&input, cin, h, w, &mut col);
        let mut out = vec![0.0; cout * h * w];
        gemm(cout, cin * 9, h * w, &weight, false, &col, false, 0.0, &mut out);
        let want = naive_conv(&input, cin, h, w, &weight, cout);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w) = (2, 4, 6);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c * 9 * h * w).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, h, w, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let (c, h, w) = (2, 4, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64).sqrt()).collect();
        let g: Vec<f64> = (0..c * 4).map(|i| i as f64 - 1.5).collect();
        let lhs: f64 = avg_pool2(&x, c, h, w).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = avg_pool2_backward(&g, c, h, w).iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs: f64 = upsample2(&g, c, 2, 2).iter().zip(&x).map(|(a, b)| a * b).sum();
        let rhs: f64 = upsample2_backward(&x, c, 2, 2).iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
