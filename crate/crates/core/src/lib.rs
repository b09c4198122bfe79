//! Tools for studying how layer representations evolve during training.
//!
//! * [`cka`]: linear CKA and epoch-pair similarity diagrams
//! * [`probe`]: linear classifier probes on frozen representations
//! * [`plane`]: input-space planes through example triplets
//! * [`drs`]: decision region similarity and fragmentation
//! * [`trainer`]: deterministic reference trainer producing checkpoint stores
//! * [`diagram`]: CSV and PPM export
//! * [`tensor_io`]: the REPDYN01 tensor format and store layout

pub mod cka;
pub mod cli;
pub mod diagram;
pub mod drs;
pub mod error;
pub mod plane;
pub mod probe;
pub mod rng;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
