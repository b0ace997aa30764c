//! Shared finite-difference oracle.
#![allow(unused_imports)]

pub use gea_core::numerics::gradcheck::*;
