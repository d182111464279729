//! Delay statistics: mean estimation without known correlations,
//! parametric and mixture fitting, goodness-of-fit, and log-densities.
//!
//! Everything except [`estimate_means`] is generic over [`Real`], so models
//! can be fitted and evaluated in `f32` or `f64`.

mod dist;
mod fit;
pub mod gmm;
pub mod gof;
mod means;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use dist::{Family, FamilyKind, LOG_DENSITY_FLOOR};
pub use fit::{
    fit_model, fit_parametric, log_density, CandidateFit, DelayModel, FitConfig, FitDiagnostics,
    FitError, SelectionStage,
};
pub use gmm::{GmmConfig, GmmFit};
pub use means::{estimate_means, DelayEstimate, StatsError};

/// Floating-point scalar the statistics code runs on.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn mean<T: Real>(xs: &[T]) -> T {
    let n = T::from_usize(xs.len()).unwrap();
    xs.iter().fold(T::zero(), |a, &x| a + x) / n
}

/// Population variance (divides by `n`), the maximum-likelihood estimate.
pub(crate) fn variance<T: Real>(xs: &[T], m: T) -> T {
    let n = T::from_usize(xs.len()).unwrap();
    xs.iter().fold(T::zero(), |a, &x| a + (x - m) * (x - m)) / n
}
