use rand::Rng;

use super::Module;
use crate::error::Result;
use crate::tensor::{
    add, batch_norm2d, conv2d, matmul, BatchNormOptions, Buffer, Float, Mode, Parameter,
    RunningStats, Tensor,
};

/// He (fan-in scaled normal) standard deviation.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug)]
pub struct Conv2d<T: Float = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let std = he_std(in_channels * kernel * kernel);
        Conv2d {
            weight: Parameter::new(format!("{name}.weight"), Tensor::randn(&shape, std, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    /// All-zero weights and bias.
    pub fn zeroed(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, self.weight.tensor(), Some(self.bias.tensor()), self.stride, self.padding)
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug)]
pub struct BatchNorm2d<T: Float = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub stats: RunningStats<T>,
    pub options: BatchNormOptions,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            stats: RunningStats::new(name, channels),
            options: BatchNormOptions::default(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        batch_norm2d(x, self.gamma.tensor(), self.beta.tensor(), &self.stats, mode, self.options)
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<T>> {
        vec![&self.stats.mean, &self.stats.var]
    }
}

/// Fully connected layer on `(N, in)` rows; the weight is stored `(in, out)`.
#[derive(Debug)]
pub struct Linear<T: Float = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Float> Linear<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::randn(&[inputs, outputs], he_std(inputs), rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        add(&matmul(x, self.weight.tensor())?, self.bias.tensor())
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
