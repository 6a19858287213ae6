//! Test programs: the litmus suite, malware samples, random programs and
//! gadget-injected benign code.

pub mod fuzz;
pub mod inject;
pub mod litmus;
pub mod malware;

pub use fuzz::{generate, FuzzProgram};
pub use inject::{inject, Injected};
pub use litmus::{litmus, padded_v01, Litmus, SECRET_PAIRS};
