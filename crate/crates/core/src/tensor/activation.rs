use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Tanh,
    Relu,
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(ActivationKind::Tanh),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation kind `{other}`"))),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActivationKind::Tanh => "tanh",
            ActivationKind::Relu => "relu",
        })
    }
}

pub fn activation_forward<T: Scalar>(kind: ActivationKind, input: &Tensor<T>) -> Tensor<T> {
    match kind {
        ActivationKind::Tanh => input.map(|x| x.tanh()),
        ActivationKind::Relu => input.map(|x| x.max(T::zero())),
    }
}

/// Multiplies `grad_out` by the derivative evaluated at `input`.
/// The ReLU derivative at exactly 0 is taken as 0.
pub fn activation_backward<T: Scalar>(kind: ActivationKind, input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "activation_backward",
            "grad_out",
            format!("{:?}", input.shape()),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| match kind {
            ActivationKind::Tanh => {
                let t = x.tanh();
                g * (T::one() - t * t)
            }
            ActivationKind::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}
