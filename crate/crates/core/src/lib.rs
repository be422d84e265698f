//! Indefinite linear-quadratic control and mean-square stabilization of
//! discrete-time Markov jump linear systems with multiplicative noise.
//!
//! The solvers are generic over the scalar type ([`Real`]: `f32` or `f64`);
//! the aliases at the crate root fix it to `f64`.

pub mod analysis;
pub mod error;
pub mod fixtures;
pub mod model;
pub mod numlin;
pub mod problem;
pub mod riccati;
pub mod scalar;
pub mod simulate;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Model = model::MjlsModel<f64>;
pub type Weights = model::CostWeights<f64>;
pub type Initial = model::InitialState<f64>;
pub type Step = riccati::RiccatiStep<f64>;
pub type Finite = riccati::FiniteSolution<f64>;
pub type Shifted = riccati::ShiftedWeights<f64>;
pub type Stationary = riccati::StationarySolution<f64>;
pub type SetS = analysis::SetSReport<f64>;
pub type Observability = analysis::ObservabilityReport<f64>;
pub type Stability = analysis::StabilityCertificate<f64>;
pub type Simulation = simulate::SimulationReport<f64>;

pub type ModelF32 = model::MjlsModel<f32>;
pub type WeightsF32 = model::CostWeights<f32>;
