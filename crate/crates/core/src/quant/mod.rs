//! INT8 affine quantization: schemes, range tracking and the quantized
//! checkpoint.

mod export;
mod scheme;

pub use export::{params_checkpoint, size_report, QuantizedModel, QuantizedTensor, SizeReport};
pub use scheme::{EmaObserver, QuantScheme, EMA_DECAY, QMAX, QMIN, SCALE_FLOOR};
