//! Raw numeric loops behind the tape ops.
//!
//! Everything here is a pure function over flat `f64` slices; shape
//! validation happens one level up in `Op::eval`. Convolution comes as the
//! closed bilinear triple (forward, input-gradient, weight-gradient) so the
//! tape can differentiate convolutions to arbitrary order.

/// `[n,k] @ [k,m] -> [n,m]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Spatial geometry of one convolution application.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

/// Cross-correlation with zero padding, stride 1:
/// `y[n,co,i,j] = sum over ci,a,b of x[n,ci,i+a-pad,j+b-pad] * w[co,ci,a,b]`.
pub fn conv2d(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut y = vec![0.0; g.n * g.co * ho * wo];
    for n in 0..g.n {
        for co in 0..g.co {
            for ci in 0..g.ci {
                for a in 0..g.kh {
                    for i in 0..ho {
                        let xi = (i + a) as isize - g.pad as isize;
                        if xi < 0 || xi >= g.h as isize {
                            continue;
                        }
                        let xrow = &x[((n * g.ci + ci) * g.h + xi as usize) * g.w..][..g.w];
                        let yrow = &mut y[((n * g.co + co) * ho + i) * wo..][..wo];
                        let wrow = &w[((co * g.ci + ci) * g.kh + a) * g.kw..][..g.kw];
                        for (b, &wv) in wrow.iter().enumerate() {
                            // j + b - pad must land inside [0, w)
                            let jlo = g.pad.saturating_sub(b);
                            let jhi = (g.w + g.pad - b).min(wo);
                            for j in jlo..jhi {
                                yrow[j] += wv * xrow[j + b - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of `conv2d` with respect to its input: accumulates
/// `gx[n,ci,i+a-pad,j+b-pad] += gy[n,co,i,j] * w[co,ci,a,b]`.
pub fn conv2d_input_grad(gy: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut gx = vec![0.0; g.n * g.ci * g.h * g.w];
    for n in 0..g.n {
        for co in 0..g.co {
            for ci in 0..g.ci {
                for a in 0..g.kh {
                    for i in 0..ho {
                        let xi = (i + a) as isize - g.pad as isize;
                        if xi < 0 || xi >= g.h as isize {
                            continue;
                        }
                        let gxrow = &mut gx[((n * g.ci + ci) * g.h + xi as usize) * g.w..][..g.w];
                        let gyrow = &gy[((n * g.co + co) * ho + i) * wo..][..wo];
                        let wrow = &w[((co * g.ci + ci) * g.kh + a) * g.kw..][..g.kw];
                        for (b, &wv) in wrow.iter().enumerate() {
                            let jlo = g.pad.saturating_sub(b);
                            let jhi = (g.w + g.pad - b).min(wo);
                            for j in jlo..jhi {
                                gxrow[j + b - g.pad] += wv * gyrow[j];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of `conv2d` with respect to its kernel: accumulates
/// `gw[co,ci,a,b] += gy[n,co,i,j] * x[n,ci,i+a-pad,j+b-pad]`.
pub fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut gw = vec![0.0; g.co * g.ci * g.kh * g.kw];
    for n in 0..g.n {
        for co in 0..g.co {
            for ci in 0..g.ci {
                for a in 0..g.kh {
                    for i in 0..ho {
                        let xi = (i + a) as isize - g.pad as isize;
                        if xi < 0 || xi >= g.h as isize {
                            continue;
                        }
                        let xrow = &x[((n * g.ci + ci) * g.h + xi as usize) * g.w..][..g.w];
                        let gyrow = &gy[((n * g.co + co) * ho + i) * wo..][..wo];
                        let gwrow = &mut gw[((co * g.ci + ci) * g.kh + a) * g.kw..][..g.kw];
                        for (b, gw_ab) in gwrow.iter_mut().enumerate() {
                            let jlo = g.pad.saturating_sub(b);
                            let jhi = (g.w + g.pad - b).min(wo);
                            let mut acc = 0.0;
                            for j in jlo..jhi {
                                acc += gyrow[j] * xrow[j + b - g.pad];
                            }
                            *gw_ab += acc;
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Row-wise softmax of an `[n,k]` matrix, stabilized by the row max.
pub fn softmax_rows(x: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let orow = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean softmax cross-entropy over rows, computed through log-sum-exp so
/// large logits do not overflow: `mean_i [ lse(row_i) - row_i[label_i] ]`.
pub fn softmax_xent_mean(x: &[f64], labels: &[usize], n: usize, k: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &x[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        total += lse - row[labels[i]];
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x2() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_ones_3x3_no_padding_sums_kernel() {
        let g = ConvGeom { n: 1, ci: 1, h: 3, w: 3, co: 1, kh: 3, kw: 3, pad: 0 };
        let y = conv2d(&[1.0; 9], &[1.0; 9], g);
        assert_eq!(y, vec![9.0]);
    }

    #[test]
    fn conv_padding_grows_output() {
        let g = ConvGeom { n: 1, ci: 1, h: 3, w: 3, co: 1, kh: 3, kw: 3, pad: 1 };
        let y = conv2d(&[1.0; 9], &[1.0; 9], g);
        assert_eq!(y.len(), 9);
        // center sees the full kernel, corners only a 2x2 portion
        assert_eq!(y[4], 9.0);
        assert_eq!(y[0], 4.0);
    }

    /// The two adjoints must satisfy the defining inner-product identities
    /// <conv(x,w), gy> == <x, input_grad(gy,w)> == <w, weight_grad(x,gy)>.
    #[test]
    fn conv_adjoint_identities() {
        let g = ConvGeom { n: 2, ci: 3, h: 5, w: 4, co: 2, kh: 3, kw: 3, pad: 1 };
        let mut seed = 1234u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        };
        let x: Vec<f64> = (0..g.n * g.ci * g.h * g.w).map(|_| next()).collect();
        let w: Vec<f64> = (0..g.co * g.ci * g.kh * g.kw).map(|_| next()).collect();
        let gy: Vec<f64> = (0..g.n * g.co * g.out_h() * g.out_w()).map(|_| next()).collect();

        let y = conv2d(&x, &w, g);
        let gx = conv2d_input_grad(&gy, &w, g);
        let gw = conv2d_weight_grad(&x, &gy, g);

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&y, &gy);
        assert!((lhs - dot(&x, &gx)).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!((lhs - dot(&w, &gw)).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = softmax_rows(&[1.0, 2.0, 3.0, -1.0, 0.0, 1.0], 2, 3);
        for row in s.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn xent_of_uniform_logits_is_ln_k() {
        let loss = softmax_xent_mean(&[0.0, 0.0], &[0], 1, 2);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn xent_stable_for_huge_logits() {
        let loss = softmax_xent_mean(&[1e4, 0.0], &[0], 1, 2);
        assert!(loss.is_finite());
        assert!(loss >= 0.0 && loss < 1e-12);
    }
}
