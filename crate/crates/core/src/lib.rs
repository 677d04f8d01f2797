pub mod apps;
pub mod dictlearn;
pub mod error;
pub mod io;
pub mod ipsolve;
pub mod lbfgs;
pub mod penalties;
pub mod plq;
pub mod seeds;

pub use error::{Error, Result};
pub use ipsolve::{solve, IpState, KktResiduals, ModelProblem, SolverOptions};
pub use penalties::{Family, Loss, Misfit, MisfitBlock, PenaltySpec};
pub use plq::PlqRep;
