use super::Param;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

/// Saved normalized activations for the backward pass.
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(&[channels], 1.0),
            bias: Param::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut out = x.clone();
        let data = out.data_mut();
        for ch in 0..c {
            let scale = self.weight.value[ch] / (self.running_var[ch] + self.eps).sqrt();
            let shift = self.bias.value[ch] - self.running_mean[ch] * scale;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for v in &mut data[base..base + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        out
    }

    /// Normalizes with batch statistics and folds them into the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BatchNormCache) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = vec![0.0f32; c];
        for (ch, inv) in inv_std.iter_mut().enumerate() {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for &v in &x.data()[base..base + hw] {
                    sum += f64::from(v);
                }
            }
            let mean = sum / m;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for &v in &x.data()[base..base + hw] {
                    let d = f64::from(v) - mean;
                    sq += d * d;
                }
            }
            let var = sq / m;
            let istd = 1.0 / (var + f64::from(self.eps)).sqrt();
            *inv = istd as f32;
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mom = f64::from(self.momentum);
            self.running_mean[ch] = ((1.0 - mom) * f64::from(self.running_mean[ch]) + mom * mean) as f32;
            self.running_var[ch] = ((1.0 - mom) * f64::from(self.running_var[ch]) + mom * unbiased) as f32;

            let gamma = self.weight.value[ch];
            let beta = self.bias.value[ch];
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = ((f64::from(x.data()[i]) - mean) * istd) as f32;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = gamma * xh + beta;
                }
            }
        }
        (out, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let m = (n * hw) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let g = f64::from(dy.data()[i]);
                    sum_dy += g;
                    sum_dy_xhat += g * f64::from(cache.xhat.data()[i]);
                }
            }
            self.weight.grad[ch] += sum_dy_xhat as f32;
            self.bias.grad[ch] += sum_dy as f32;
            let k = f64::from(self.weight.value[ch]) * f64::from(cache.inv_std[ch]) / m;
            for b in 0..n {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let g = f64::from(dy.data()[i]);
                    let xh = f64::from(cache.xhat.data()[i]);
                    dx.data_mut()[i] = (k * (m * g - sum_dy - xh * sum_dy_xhat)) as f32;
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.weight.value = vec![1.3, 0.7];
        bn.bias.value = vec![0.1, -0.2];
        let x = Tensor::from_vec(
            [2, 2, 2, 2],
            vec![0.3, -1.2, 0.5, 2.0, 1.1, 0.4, -0.6, 0.9, -0.3, 0.8, 1.5, -2.0, 0.2, 0.0, 0.7, -1.1],
        );
        let r: Vec<f32> = (0..16).map(|i| ((i * 7 % 5) as f32 - 2.0) * 0.3).collect();
        let (_, cache) = bn.clone().forward_train(&x);
        let dx = bn.backward(&cache, &Tensor::from_vec([2, 2, 2, 2], r.clone()));
        let loss = |x: &Tensor| -> f64 {
            let (y, _) = bn.clone().forward_train(x);
            y.data().iter().zip(&r).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let eps = 1e-3;
        for i in 0..16 {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * f64::from(eps));
            assert!((fd - f64::from(dx.data()[i])).abs() < 2e-3, "dx[{i}]: {fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0];
        bn.eps = 0.0;
        let y = bn.forward_eval(&Tensor::from_vec([1, 1, 1, 2], vec![2.0, 6.0]));
        assert_eq!(y.data(), &[0.0, 2.0]);
    }
}
