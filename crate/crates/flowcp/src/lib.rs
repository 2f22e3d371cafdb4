//! Flow-based conformal prediction for multivariate time series.
//!
//! Trains a classifier-free-guided flow on base-predictor residuals,
//! constructs prediction sets with target coverage from inverse-flow
//! non-conformity scores, and estimates set sizes with a log-det-Jacobian
//! ODE integrated over Sobol quasi-Monte Carlo samples of the calibration
//! ball.
//!
//! The numerical core is generic over the scalar type ([`scalar::Real`],
//! f32 or f64); the aliases below fix f64, which is what the solver
//! tolerances and quantile routines are tuned for.

pub mod conformal;
pub mod data;
pub mod diffmath;
pub mod encoder;
pub mod eval;
pub mod flow;
pub mod ode;
pub mod pipeline;
pub mod predictor;
pub mod qmc;
pub mod scalar;
pub mod special;

pub use scalar::Real;

/// f64 matrix.
pub type Matrix = diffmath::Matrix<f64>;
/// f64 parameter store.
pub type ParamStore = diffmath::ParamStore<f64>;
/// f64 solver configuration.
pub type OdeConfig = ode::OdeConfig<f64>;
/// f64 flow configuration.
pub type FlowConfig = flow::FlowConfig<f64>;
/// f64 guided flow model.
pub type GuidedFlowModel = flow::GuidedFlowModel<f64>;
/// f64 series dataset.
pub type SeriesDataset = data::SeriesDataset<f64>;
/// f64 run configuration.
pub type RunConfig = pipeline::RunConfig<f64>;
/// f64 evaluation report.
pub type RunReport = pipeline::RunReport<f64>;
