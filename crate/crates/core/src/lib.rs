//! Core library for the neural circuit diagram compiler: a typed
//! tensor-diagram IR with shape inference, a reference interpreter, a
//! semantics-preserving rewrite engine, derivative transforms, a cost model,
//! contraction-plan and SVG back ends, and the `.ncd` frontend.




pub mod diagram;

pub mod error;
pub mod interp;

pub mod prim;

pub mod shape;
pub mod tensor;

pub use diagram::{BroadcastKind, BroadcastScope, Builder, Cell, CellBody, Diagram, Section};
pub use error::{Error, Result};
pub use prim::{AxisRef, ConvSpec, EwFn, PadSpec, PoolKind, Primitive};
pub use shape::{conv_out_extent, Axis, AxisBindings, AxisLen, DataShape, TensorShape};
pub use tensor::Tensor;
