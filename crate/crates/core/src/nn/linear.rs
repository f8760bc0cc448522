use super::Param;

/// Fully connected layer, `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::zeros(&[outputs, inputs]),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    /// `x` is `[batch][inputs]` flattened; returns `[batch][outputs]`.
    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        let (i, o) = (self.inputs(), self.outputs());
        x.chunks(i)
            .flat_map(|row| {
                (0..o).map(move |k| {
                    let w = &self.weight.value[k * i..(k + 1) * i];
                    self.bias.value[k] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f32>()
                })
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[f32], dy: &[f32]) -> Vec<f32> {
        let (i, o) = (self.inputs(), self.outputs());
        let mut dx = vec![0.0f32; x.len()];
        for (b, row) in x.chunks(i).enumerate() {
            for k in 0..o {
                let g = dy[b * o + k];
                self.bias.grad[k] += g;
                for j in 0..i {
                    self.weight.grad[k * i + j] += g * row[j];
                    dx[b * i + j] += g * self.weight.value[k * i + j];
                }
            }
        }
        dx
    }
}
