//! Safety filters for control-affine systems built from high-order control barrier
//! functions, with a Gaussian-process model of the certificate residual and a
//! second-order cone program per control step.

pub mod barrier;
pub mod episodic;
pub mod experiment;
pub mod filter;
pub mod gp;
pub mod plant;
pub mod poly;
pub mod socp;
