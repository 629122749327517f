//! Dense kernels for the backbone: im2col convolution, per-channel affine,
//! ReLU and fully connected layers. Feature maps are channel-major
//! `C × H × W` slices.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the column matrix (`cin·k·k`).
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Columns of the column matrix (output pixels).
    pub fn pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch() * p];
    for ci in 0..g.cin {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides and sizes passed by the callers below describe
    // views that lie entirely within `a`, `b` and `c`.
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

/// Returns `(output, cols)`; `cols` is kept for the backward pass.
pub(crate) fn conv_forward(input: &[f64], weight: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let (kk, p) = (g.patch(), g.pixels());
    let mut out = vec![0.0; g.cout * p];
    gemm(
        g.cout,
        kk,
        p,
        weight,
        (kk as isize, 1),
        &cols,
        (p as isize, 1),
        0.0,
        &mut out,
    );
    (out, cols)
}

/// Accumulates the weight gradient into `grad_w` and returns the gradient
/// with respect to the conv input.
pub(crate) fn conv_backward(
    grad_out: &[f64],
    cols: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    grad_w: &mut [f64],
) -> Vec<f64> {
    let (kk, p) = (g.patch(), g.pixels());
    // dW (cout × kk) += dOut (cout × p) · colsᵀ (p × kk)
    gemm(
        g.cout,
        p,
        kk,
        grad_out,
        (p as isize, 1),
        cols,
        (1, p as isize),
        1.0,
        grad_w,
    );
    // dCols (kk × p) = Wᵀ (kk × cout) · dOut (cout × p)
    let mut dcols = vec![0.0; kk * p];
    gemm(
        kk,
        g.cout,
        p,
        weight,
        (1, kk as isize),
        grad_out,
        (p as isize, 1),
        0.0,
        &mut dcols,
    );
    let mut grad_in = vec![0.0; g.cin * g.h * g.w];
    col2im_add(&dcols, g, &mut grad_in);
    grad_in
}

pub(crate) fn affine_forward(x: &[f64], scale: &[f64], shift: &[f64], plane: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (c, chunk) in x.chunks(plane).enumerate() {
        let (s, b) = (scale[c], shift[c]);
        out.extend(chunk.iter().map(|&v| v * s + b));
    }
    out
}

/// Backward through `y = relu(affine(x))` given `pre = affine(x)`.
/// Accumulates scale/shift gradients and returns `dx`.
pub(crate) fn affine_relu_backward(
    grad_act: &[f64],
    pre: &[f64],
    x: &[f64],
    scale: &[f64],
    plane: usize,
    grad_scale: &mut [f64],
    grad_shift: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for c in 0..scale.len() {
        let r = c * plane..(c + 1) * plane;
        let (mut ds, mut db) = (0.0, 0.0);
        for i in r {
            if pre[i] > 0.0 {
                let g = grad_act[i];
                ds += g * x[i];
                db += g;
                dx[i] = g * scale[c];
            }
        }
        grad_scale[c] += ds;
        grad_shift[c] += db;
    }
    dx
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// `y = W x + b`, `W` is `out × in` row-major.
pub(crate) fn linear_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let din = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            let row = &w[o * din..(o + 1) * din];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates `dW += dy ⊗ x`, `db += dy`; returns `Wᵀ dy`.
pub(crate) fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let din = x.len();
    let mut dx = vec![0.0; din];
    for (o, &g) in dy.iter().enumerate() {
        grad_b[o] += g;
        if g == 0.0 {
            continue;
        }
        let row = &w[o * din..(o + 1) * din];
        let grow = &mut grad_w[o * din..(o + 1) * din];
        for i in 0..din {
            grow[i] += g * x[i];
            dx[i] += g * row[i];
        }
    }
    dx
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Backward through `u = v / ‖v‖` given `u` and `‖v‖`.
pub(crate) fn normalize_backward(u: &[f64], n: f64, du: &[f64]) -> Vec<f64> {
    let dot: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    u.iter().zip(du).map(|(&ui, &gi)| (gi - ui * dot) / n).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv(input: &[f64], weight: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.cout * oh * ow];
        for co in 0..g.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += input[ci * g.h * g.w + iy as usize * g.w + ix as usize]
                                    * weight[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + salt) * 0.731).sin()).collect()
    }

    #[test]
    fn gemm_conv_matches_naive() {
        for &(cin, cout, k, stride, pad, h, w) in &[
            (3, 4, 3, 1, 1, 7, 5),
            (2, 3, 3, 2, 1, 8, 8),
            (3, 2, 1, 2, 0, 5, 6),
        ] {
            let g = ConvGeom {
                cin,
                cout,
                k,
                stride,
                pad,
                h,
                w,
            };
            let x = pseudo(cin * h * w, 0.3);
            let wt = pseudo(cout * cin * k * k, 1.7);
            let (y, _) = conv_forward(&x, &wt, &g);
            let reference = naive_conv(&x, &wt, &g);
            for (a, b) in y.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, conv_backward(dy)> for fixed weights.
        let g = ConvGeom {
            cin: 3,
            cout: 4,
            k: 3,
            stride: 2,
            pad: 1,
            h: 9,
            w: 6,
        };
        let x = pseudo(g.cin * g.h * g.w, 0.1);
        let wt = pseudo(g.cout * g.patch(), 2.2);
        let dy = pseudo(g.cout * g.pixels(), 5.5);
        let (y, cols) = conv_forward(&x, &wt, &g);
        let mut gw = vec![0.0; wt.len()];
        let dx = conv_backward(&dy, &cols, &wt, &g, &mut gw);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = wt.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn softmax_is_on_simplex() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|&v| v >= 0.0));
    }
}
