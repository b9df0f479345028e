use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{matvec, FlopCounter, Matrix};

/// Affine map `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::DimensionMismatch {
                op: "affine",
                left: weight.shape(),
                right: (bias.len(), 1),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))`, zero bias.
    pub fn fan_in<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (inputs.max(1) as f64).sqrt();
        Self {
            weight: Matrix::random_uniform(outputs, inputs, scale, rng),
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform init with an explicit scale on both weight and bias.
    pub fn uniform<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = Matrix::random_uniform(outputs, inputs, scale, rng);
        let bias = Matrix::random_uniform(outputs, 1, scale, rng).into_data();
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn apply(&self, x: &[f64], counter: &mut FlopCounter) -> Result<Vec<f64>> {
        let mut y = matvec(&self.weight, x, counter)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(y)
    }
}

/// Elementwise nonlinearity applied after an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn apply_slice(self, xs: &mut [f64]) {
        if self != Activation::Identity {
            for x in xs {
                *x = self.apply(*x);
            }
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "none" | "linear" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
