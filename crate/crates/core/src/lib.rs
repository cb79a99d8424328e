//! Run-time partitioned sanitization for PIR programs.

pub mod bench;
pub mod dispatch;
pub mod fuzz;
pub mod pir;
pub mod profiler;
pub mod runtime;
pub mod sanitize;
pub mod variants;

pub use dispatch::DispatchTable;
