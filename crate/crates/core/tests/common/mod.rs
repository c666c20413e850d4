//! Checks shared by the property suites and the acceptance runner.
#![allow(dead_code)]

pub mod ops;
pub mod props;
