//! Stochastic gradient descent with momentum and L2 weight decay.

use crate::nn::resnet::SlotMut;
use crate::nn::ResNet;

/// Update rule per parameter `p` with gradient `g`:
/// `v = momentum * v + (g + weight_decay * p)`, then `p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    skip_prefixes: Vec<String>,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate: learning_rate as f32,
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            skip_prefixes: Vec::new(),
            velocity: Vec::new(),
        }
    }

    /// Leaves parameters whose name starts with `prefix` untouched.
    pub fn skip(mut self, prefix: &str) -> Self {
        self.skip_prefixes.push(prefix.to_string());
        self
    }

    pub fn step(&mut self, net: &mut ResNet) {
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let skip = &self.skip_prefixes;
        let velocity = &mut self.velocity;
        let mut index = 0;
        net.for_each_slot_mut(&mut |name, slot| {
            let SlotMut::Param(p) = slot else { return };
            if skip.iter().any(|s| name.starts_with(s.as_str())) {
                return;
            }
            if velocity.len() == index {
                velocity.push(vec![0.0; p.len()]);
            }
            let v = &mut velocity[index];
            for ((w, g), m) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *m = mu * *m + g + wd * *w;
                *w -= lr * *m;
            }
            index += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn momentum_accumulates() {
        let mut net = ResNet::new(Architecture::toy(2));
        net.conv1.weight.value.fill(1.0);
        net.conv1.weight.grad.fill(0.5);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).skip("fc.");
        opt.step(&mut net);
        assert!((net.conv1.weight.value[0] - 0.95).abs() < 1e-7);
        opt.step(&mut net);
        // v = 0.9 * 0.5 + 0.5
        assert!((net.conv1.weight.value[0] - (0.95 - 0.095)).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut net = ResNet::new(Architecture::toy(2));
        net.conv1.weight.value.fill(2.0);
        Sgd::new(0.5, 0.0, 0.1).step(&mut net);
        assert!((net.conv1.weight.value[3] - 1.9).abs() < 1e-7);
    }
}
