//! Joint imputation of missing cardiac features and Gaussian-process
//! emulation of a lumped cardiovascular model, conditioned on brain and
//! clinical covariates.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

pub mod baselines;
pub mod cohort;
pub mod cvae;
pub mod explorer;
pub mod gp;
pub mod heart;
pub mod joint;
pub mod numerics;
pub mod optim;

/// Real scalar the numerical core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Literal conversion from `f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Tape64 = numerics::Tape<f64>;
pub type Matrix64 = numerics::DenseMatrix<f64>;
