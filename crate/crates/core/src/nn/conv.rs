use rayon::prelude::*;

use super::Param;
use crate::tensor::Tensor;

/// 2-D convolution without bias, lowered to im2col + GEMM per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) fn output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

fn im2col(x: &[f32], g: Geometry, cols: &mut [f32]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: Geometry, dx: &mut [f32]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] (+ beta * c)`, all row-major unless strides say otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every caller passes buffers whose extents match the given
    // dimensions and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_channels, in_channels, kernel, kernel]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            c: self.in_channels,
            h,
            w,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
            ho: output_size(h, self.kernel, self.stride, self.padding),
            wo: output_size(w, self.kernel, self.stride, self.padding),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let g = self.geometry(h, w);
        let p = g.ho * g.wo;
        let kk = c * g.k * g.k;
        let mut out = Tensor::zeros([n, self.out_channels, g.ho, g.wo]);
        let out_len = self.out_channels * p;
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(i, y)| {
                let xi = x.image(i);
                if g.is_pointwise() {
                    gemm(self.out_channels, kk, p, &self.weight.value, (kk as isize, 1), xi, (p as isize, 1), 0.0, y);
                } else {
                    let mut cols = vec![0.0f32; kk * p];
                    im2col(xi, g, &mut cols);
                    gemm(self.out_channels, kk, p, &self.weight.value, (kk as isize, 1), &cols, (p as isize, 1), 0.0, y);
                }
            });
        out
    }

    /// Accumulates the weight gradient and, when `need_input_grad`, returns
    /// the gradient with respect to `x`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let [n, c, h, w] = x.shape();
        let g = self.geometry(h, w);
        let p = g.ho * g.wo;
        let kk = c * g.k * g.k;
        let cout = self.out_channels;
        let weight = &self.weight.value;

        let per_image: Vec<(Vec<f32>, Option<Vec<f32>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x.image(i);
                let dyi = dy.image(i);
                let owned_cols;
                let cols: &[f32] = if g.is_pointwise() {
                    xi
                } else {
                    let mut buf = vec![0.0f32; kk * p];
                    im2col(xi, g, &mut buf);
                    owned_cols = buf;
                    &owned_cols
                };
                let mut dw = vec![0.0f32; cout * kk];
                gemm(cout, p, kk, dyi, (p as isize, 1), cols, (1, p as isize), 0.0, &mut dw);
                let dx = need_input_grad.then(|| {
                    let mut dcols = vec![0.0f32; kk * p];
                    gemm(kk, cout, p, weight, (1, kk as isize), dyi, (p as isize, 1), 0.0, &mut dcols);
                    if g.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![0.0f32; c * h * w];
                        col2im(&dcols, g, &mut dx);
                        dx
                    }
                });
                (dw, dx)
            })
            .collect();

        let mut dx_all = need_input_grad.then(|| Vec::with_capacity(n * c * h * w));
        for (dw, dx) in per_image {
            for (acc, v) in self.weight.grad.iter_mut().zip(&dw) {
                *acc += *v;
            }
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend_from_slice(&dx);
            }
        }
        dx_all.map(|d| Tensor::from_vec([n, c, h, w], d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, conv: &Conv2d) -> Tensor {
        let [n, c, h, w] = x.shape();
        let ho = output_size(h, conv.kernel, conv.stride, conv.padding);
        let wo = output_size(w, conv.kernel, conv.stride, conv.padding);
        let mut out = Tensor::zeros([n, conv.out_channels, ho, wo]);
        let k = conv.kernel;
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = conv.weight.value[((o * c + ci) * k + ky) * k + kx];
                                    acc += f64::from(xv) * f64::from(wv);
                                }
                            }
                        }
                        out.data_mut()[((b * conv.out_channels + o) * ho + oy) * wo + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503));
                ((v >> 8) % 1000) as f32 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (7, 2, 3)] {
            let mut conv = Conv2d::new(3, 4, k, s, p);
            conv.weight.value = pseudo(conv.weight.len(), 1);
            let x = Tensor::from_vec([2, 3, 9, 8], pseudo(2 * 3 * 9 * 8, 2));
            let fast = conv.forward(&x);
            let slow = naive_conv(&x, &conv);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut conv = Conv2d::new(2, 3, 3, 2, 1);
        conv.weight.value = pseudo(conv.weight.len(), 3);
        let x = Tensor::from_vec([2, 2, 5, 5], pseudo(100, 4));
        let y = conv.forward(&x);
        // loss = sum(y * r) for a fixed r
        let r = Tensor::from_vec(y.shape(), pseudo(y.data().len(), 5));
        let dx = conv.backward(&x, &r, true).unwrap();
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum()
        };
        let eps = 1e-2f32;
        for idx in [0usize, 7, 19, 40, 53] {
            let mut plus = conv.clone();
            plus.weight.value[idx] += eps;
            let mut minus = conv.clone();
            minus.weight.value[idx] -= eps;
            let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(conv.weight.grad[idx])).abs() < 1e-2, "dw[{idx}]");
        }
        for idx in [0usize, 12, 33, 71, 99] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dx.data()[idx])).abs() < 1e-2, "dx[{idx}]");
        }
    }
}
