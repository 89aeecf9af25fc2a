use super::checkpoint::{NamedTensor, TensorStore};
use super::layers::{Conv1d, Dense};
use crate::error::Result;

/// A fixed, ordered collection of parameter tensors.
///
/// The same type doubles as its own gradient set: `zeros_like` gives a
/// shape-congruent accumulator.
pub trait Parameters: Clone + Send + Sync {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;
    fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor>;
    fn load_tensors(&mut self, prefix: &str, store: &TensorStore) -> Result<()>;

    fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl Parameters for Conv1d {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn zeros_like(&self) -> Self {
        Conv1d::zeros(self.out_channels, self.in_channels, self.kernel_size, self.stride)
    }

    fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new(
                format!("{prefix}.weight"),
                vec![self.out_channels, self.in_channels, self.kernel_size],
                self.kernels_logical(),
            ),
            NamedTensor::new(format!("{prefix}.bias"), vec![self.out_channels], self.bias.clone()),
        ]
    }

    fn load_tensors(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        let w = store.expect(&format!("{prefix}.weight"), &[self.out_channels, self.in_channels, self.kernel_size])?;
        self.set_kernels_logical(&w.values)?;
        self.bias = store.expect(&format!("{prefix}.bias"), &[self.out_channels])?.values.clone();
        Ok(())
    }
}

impl Parameters for Dense {
    fn slices(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn zeros_like(&self) -> Self {
        Dense {
            train_bias: self.train_bias,
            ..Dense::zeros(self.inputs, self.outputs)
        }
    }

    fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        vec![
            NamedTensor::new(format!("{prefix}.weight"), vec![self.inputs, self.outputs], self.weight.clone()),
            NamedTensor::new(format!("{prefix}.bias"), vec![self.outputs], self.bias.clone()),
        ]
    }

    fn load_tensors(&mut self, prefix: &str, store: &TensorStore) -> Result<()> {
        self.weight = store.expect(&format!("{prefix}.weight"), &[self.inputs, self.outputs])?.values.clone();
        self.bias = store.expect(&format!("{prefix}.bias"), &[self.outputs])?.values.clone();
        Ok(())
    }
}
