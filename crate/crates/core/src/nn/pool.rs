use crate::tensor::Tensor;

use super::conv::output_size;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Flat input index of the winning element for every output element.
pub struct MaxPoolCache {
    argmax: Vec<u32>,
    input_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn forward(&self, x: &Tensor) -> (Tensor, MaxPoolCache) {
        let [n, c, h, w] = x.shape();
        let ho = output_size(h, self.kernel, self.stride, self.padding);
        let wo = output_size(w, self.kernel, self.stride, self.padding);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = (plane * h * w + best_idx) as u32;
                }
            }
        }
        (
            out,
            MaxPoolCache {
                argmax,
                input_shape: [n, c, h, w],
            },
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(cache.input_shape);
        for (g, &i) in dy.data().iter().zip(&cache.argmax) {
            dx.data_mut()[i as usize] += *g;
        }
        dx
    }
}

/// Mean over spatial positions: returns `[n][c]` flattened.
pub fn global_avg_pool(x: &Tensor) -> Vec<f32> {
    let [n, c, h, w] = x.shape();
    let hw = (h * w) as f32;
    (0..n * c)
        .map(|plane| x.data()[plane * h * w..(plane + 1) * h * w].iter().sum::<f32>() / hw)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f32], shape: [usize; 4]) -> Tensor {
    let [_, _, h, w] = shape;
    let hw = h * w;
    let mut dx = Tensor::zeros(shape);
    for (plane, g) in dy.iter().enumerate() {
        dx.data_mut()[plane * hw..(plane + 1) * hw].fill(g / hw as f32);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|v| v as f32).collect());
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = pool.backward(&cache, &Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(dx.data()[5], 1.0);
        assert_eq!(dx.data()[15], 4.0);
        assert_eq!(dx.data().iter().sum::<f32>(), 10.0);
    }
}
