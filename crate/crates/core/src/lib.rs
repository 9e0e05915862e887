//! Progressive, probability-bounded token pruning for autoregressive attention.
//!
//! Keys are quantized to 12-bit two's complement and streamed most-significant
//! chunk first. After each chunk the engine brackets the token's score using
//! query-only margins, compares the resulting probability upper bound against
//! a running subset denominator and either prunes the token (skipping its
//! remaining key chunks and its value vector) or requests the next chunk.
//!
//! Modules:
//! - [`quant`]: 12-bit quantization and chunk encoding.
//! - [`margin`]: query-derived bounds on the unknown key bits.
//! - [`engine`]: the functional prune/request engine and the final softmax.
//! - [`sched`]: cycle-approximate out-of-order and blocking fetch simulators.
//! - [`oracle`]: exact reference attention and brute-force bound enumeration.
//! - [`io`]: trace files, synthetic workloads and JSON run configuration.
//! - [`report`]: end-to-end runs producing [`report::RunMetrics`].

pub mod engine;
pub mod error;
pub mod instance;
pub mod io;
pub mod margin;
pub mod oracle;
pub mod quant;
pub mod report;
pub mod sched;

pub use error::{Error, Result};
pub use instance::Instance;
