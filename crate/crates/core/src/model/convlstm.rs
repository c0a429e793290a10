//! Convolutional LSTM over bottleneck features.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use candle_nn::{Conv2d, Module};
use serde::{Deserialize, Serialize};

use super::layers::conv;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Nonlinearity applied to the candidate cell input and the emitted cell state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmActivation {
    Tanh,
    Relu,
    Elu,
    None,
}

impl LstmActivation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            LstmActivation::Tanh => x.tanh()?,
            LstmActivation::Relu => x.relu()?,
            LstmActivation::Elu => x.elu(1.0)?,
            LstmActivation::None => x.clone(),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LstmActivation::Tanh => "tanh",
            LstmActivation::Relu => "relu",
            LstmActivation::Elu => "elu",
            LstmActivation::None => "none",
        }
    }
}

impl fmt::Display for LstmActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LstmActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(LstmActivation::Tanh),
            "relu" => Ok(LstmActivation::Relu),
            "elu" => Ok(LstmActivation::Elu),
            "none" => Ok(LstmActivation::None),
            other => Err(Error::Config(format!("unknown LSTM activation `{other}`"))),
        }
    }
}

/// Hidden and cell state, each `(B, C, h, w)`.
#[derive(Clone, Debug)]
pub struct HiddenState {
    pub h: Tensor,
    pub c: Tensor,
}

impl HiddenState {
    /// Same values, cut from the autograd graph.
    pub fn detach(&self) -> Self {
        Self {
            h: self.h.detach(),
            c: self.c.detach(),
        }
    }

    pub fn batch(&self) -> usize {
        self.h.dims()[0]
    }

    /// The first `n` batch elements.
    pub fn narrow_batch(&self, n: usize) -> Result<Self> {
        Ok(Self {
            h: self.h.narrow(0, 0, n)?,
            c: self.c.narrow(0, 0, n)?,
        })
    }
}

/// Gates are computed by one 3x3 convolution over `[X, H]`, in the order
/// input, forget, output, candidate.
pub struct ConvLstmCell {
    gates: Conv2d,
    channels: usize,
    activation: LstmActivation,
}

impl ConvLstmCell {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, activation: LstmActivation) -> Result<Self> {
        let gates = conv(store, &format!("{name}.gates"), 2 * channels, 4 * channels, 3, 1, true)?;
        // Start with the forget gate leaning open.
        if let (Some(bias), Some(_)) = (store.get(&format!("{name}.gates.bias")), gates.bias()) {
            let mut b = vec![0f32; 4 * channels];
            for v in &mut b[channels..2 * channels] {
                *v = 1.0;
            }
            bias.set(&Tensor::from_vec(b, 4 * channels, store.device())?.to_dtype(store.dtype())?)?;
        }
        Ok(Self {
            gates,
            channels,
            activation,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn activation(&self) -> LstmActivation {
        self.activation
    }

    pub fn step(&self, x: &Tensor, state: &HiddenState) -> Result<HiddenState> {
        if x.dims() != state.h.dims() || x.dims() != state.c.dims() {
            return Err(Error::shape(format!(
                "LSTM input {:?} does not match state {:?}",
                x.dims(),
                state.h.dims()
            )));
        }
        let n = self.channels;
        let z = self.gates.forward(&Tensor::cat(&[x, &state.h], 1)?)?;
        let i = candle_nn::ops::sigmoid(&z.narrow(1, 0, n)?)?;
        let f = candle_nn::ops::sigmoid(&z.narrow(1, n, n)?)?;
        let o = candle_nn::ops::sigmoid(&z.narrow(1, 2 * n, n)?)?;
        let g = self.activation.apply(&z.narrow(1, 3 * n, n)?)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * self.activation.apply(&c)?)?;
        Ok(HiddenState { h, c })
    }
}
