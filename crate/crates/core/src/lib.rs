//! Quasi-local quantum dynamical semigroups on lattice spin systems and
//! their Hudson–Parthasarathy dilations, in finite truncation.

pub mod error;
pub mod hp;
pub mod linalg;
pub mod lindblad;
pub mod tensor_algebra;

pub use error::{Error, Result};
