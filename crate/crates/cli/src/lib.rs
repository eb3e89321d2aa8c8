//! Library side of the `gosl` binary: dataset conversion.

pub mod convert;
