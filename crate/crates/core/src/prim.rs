//! The closed primitive set and its local typing rules.
//!
//! Every primitive consumes a fixed number of consecutive tuple segments and
//! produces a list of output segments.  `apply_shapes` is the single typing
//! rule used by diagram validation, and the linearity / differentiability
//! tables here drive the rewrite and derivative transforms.

use std::fmt;

use crate::error::{Error, Result};
use crate::shape::{conv_out_extent, Axis, AxisBindings, AxisLen, TensorShape};

/// Element-wise scalar functions.
///
/// The public surface names `relu`, `gelu`, `exp`, `neg`, `scale(c)`,
/// `addc(c)`, `recip` and `sqrt`; the remaining entries are derivative
/// functions produced by the derivative transforms.
#[derive(Debug, Clone, PartialEq)]
pub enum EwFn {
    Relu,
    Gelu,
    Exp,
    Neg,
    Scale(f64),
    AddC(f64),
    Recip,
    Sqrt,
    /// relu' with the subderivative at 0 fixed to 0.
    Step,
    DGelu,
    DRecip,
    DSqrt,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl EwFn {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            EwFn::Relu => x.max(0.0),
            EwFn::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            EwFn::Exp => x.exp(),
            EwFn::Neg => -x,
            EwFn::Scale(c) => c * x,
            EwFn::AddC(c) => x + c,
            EwFn::Recip => 1.0 / x,
            EwFn::Sqrt => x.sqrt(),
            EwFn::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            EwFn::DGelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            EwFn::DRecip => -1.0 / (x * x),
            EwFn::DSqrt => 0.5 / x.sqrt(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, EwFn::Neg | EwFn::Scale(_))
    }

    /// The element-wise derivative function, or `None` when the tangent map
    /// is the function itself (linear case) or constant.
    pub fn derivative(&self) -> Option<EwFn> {
        match self {
            EwFn::Relu => Some(EwFn::Step),
            EwFn::Gelu => Some(EwFn::DGelu),
            EwFn::Exp => Some(EwFn::Exp),
            EwFn::Neg => None,
            EwFn::Scale(_) => None,
            EwFn::AddC(_) => Some(EwFn::Scale(1.0)),
            EwFn::Recip => Some(EwFn::DRecip),
            EwFn::Sqrt => Some(EwFn::DSqrt),
            EwFn::Step => Some(EwFn::Scale(0.0)),
            EwFn::DGelu | EwFn::DRecip | EwFn::DSqrt => None,
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, EwFn::DGelu | EwFn::DRecip | EwFn::DSqrt)
    }

    pub fn name(&self) -> String {
        match self {
            EwFn::Relu => "relu".into(),
            EwFn::Gelu => "gelu".into(),
            EwFn::Exp => "exp".into(),
            EwFn::Neg => "neg".into(),
            EwFn::Scale(c) => format!("scale({c})"),
            EwFn::AddC(c) => format!("addc({c})"),
            EwFn::Recip => "recip".into(),
            EwFn::Sqrt => "sqrt".into(),
            EwFn::Step => "step".into(),
            EwFn::DGelu => "dgelu".into(),
            EwFn::DRecip => "drecip".into(),
            EwFn::DSqrt => "dsqrt".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

/// One axis of one segment within a cell's consumed span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisRef {
    pub seg: usize,
    pub axis: usize,
}

impl AxisRef {
    pub fn new(seg: usize, axis: usize) -> Self {
        AxisRef { seg, axis }
    }
}

impl fmt::Display for AxisRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.seg, self.axis)
    }
}

/// Padding for one spatial dimension of a convolution tensor.
///
/// `Infer` carries the fresh output-extent symbol used while the frontend
/// solves padding against a declared output shape; validated diagrams carry
/// `Explicit` only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PadSpec {
    Explicit(usize),
    Infer(String),
}

/// Parameters of the convolution tensor: the 0/1 tensor with entry 1 exactly
/// when the input position equals `stride*i + dilation*j` on the padded
/// input, per spatial dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_extent: Vec<AxisLen>,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub pad: Vec<PadSpec>,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn rank(&self) -> usize {
        self.kernel.len()
    }

    pub fn new_1d(in_extent: AxisLen, k: usize, s: usize, d: usize, pad: usize) -> Self {
        ConvSpec {
            in_extent: vec![in_extent],
            kernel: vec![k],
            stride: vec![s],
            dilation: vec![d],
            pad: vec![PadSpec::Explicit(pad)],
            transposed: false,
        }
    }

    /// Output extent of dimension `dim` as an axis length.
    pub fn out_len(&self, dim: usize, b: &AxisBindings) -> AxisLen {
        match &self.pad[dim] {
            PadSpec::Infer(sym) => AxisLen::Sym(sym.clone()),
            PadSpec::Explicit(p) => b.resolve(&AxisLen::Conv {
                input: Box::new(self.in_extent[dim].clone()),
                kernel: self.kernel[dim],
                stride: self.stride[dim],
                dilation: self.dilation[dim],
                pad: *p,
            }),
        }
    }

    /// Concrete (x, k, s, d, pad, y) tuples, one per dimension.
    pub fn concrete_dims(&self, b: &AxisBindings) -> Result<Vec<(usize, usize, usize, usize, usize, usize)>> {
        (0..self.rank())
            .map(|dim| {
                let x = b.resolve_const(&self.in_extent[dim])?;
                let p = match &self.pad[dim] {
                    PadSpec::Explicit(p) => *p,
                    PadSpec::Infer(sym) => return Err(Error::UnboundAxis(sym.clone())),
                };
                let (k, s, d) = (self.kernel[dim], self.stride[dim], self.dilation[dim]);
                let y = conv_out_extent(x, k, s, d, p)?;
                Ok((x, k, s, d, p, y))
            })
            .collect()
    }
}

/// The closed kernel set.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Identity(TensorShape),
    /// One segment duplicated: x -> (x, x).
    Copy,
    Delete,
    /// Swap the first and last of `span` consumed segments.
    SegmentSwap { span: usize },
    /// Output axis `t` reads input axis `perm[t]`.
    AxisTranspose { perm: Vec<usize> },
    /// Merge equal-length axes `a` and `b` (a < b); the merged axis stays at `a`.
    Diag { a: usize, b: usize },
    View {
        input: TensorShape,
        output: TensorShape,
    },
    /// Fix one axis to a constant index, extracting the subtensor.
    IndexKet { axis: usize, index: usize },
    /// Two segments merged into the tensor of pairwise products.
    OuterProduct,
    /// Contract a pair of equal-length axes: within one segment (partial
    /// trace) or across two segments (inner product / tensor contraction).
    Cup { a: AxisRef, b: AxisRef },
    /// Scalar r to r times the identity matrix on `len`.
    Unit { len: AxisLen },
    ElementWise(EwFn),
    SoftMax { axis: usize },
    /// Element-wise sum of two equal-shaped segments.
    Add,
    SumAxis { axis: usize },
    LinearParam {
        name: String,
        input: TensorShape,
        output: TensorShape,
        bias: bool,
        transposed: bool,
    },
    ConvTensor(ConvSpec),
    /// Reduce the last axis of the segment.
    Pool { kind: PoolKind },
    ConstScalar(f64),
    /// One-hot marker of the maximum along the last axis (lowest index wins
    /// ties).  Produced by the derivative transform of max pooling.
    ArgmaxOneHot,
}

impl Primitive {
    /// Number of consecutive input segments the primitive consumes.
    pub fn in_segments(&self) -> usize {
        match self {
            Primitive::ConstScalar(_) => 0,
            Primitive::Copy
            | Primitive::Delete
            | Primitive::Identity(_)
            | Primitive::AxisTranspose { .. }
            | Primitive::Diag { .. }
            | Primitive::View { .. }
            | Primitive::IndexKet { .. }
            | Primitive::Unit { .. }
            | Primitive::ElementWise(_)
            | Primitive::SoftMax { .. }
            | Primitive::SumAxis { .. }
            | Primitive::LinearParam { .. }
            | Primitive::ConvTensor(_)
            | Primitive::Pool { .. }
            | Primitive::ArgmaxOneHot => 1,
            Primitive::OuterProduct | Primitive::Add => 2,
            Primitive::Cup { a, b } => b.seg.max(a.seg) + 1,
            Primitive::SegmentSwap { span } => *span,
        }
    }

    /// Local typing rule: output segment shapes for the given inputs.
    pub fn apply_shapes(
        &self,
        inputs: &[TensorShape],
        b: &mut AxisBindings,
        at: &str,
    ) -> Result<Vec<TensorShape>> {
        if inputs.len() != self.in_segments() {
            return Err(Error::Invalid(format!(
                "{at}: primitive consumes {} segments, got {}",
                self.in_segments(),
                inputs.len()
            )));
        }
        match self {
            Primitive::Identity(shape) => {
                b.unify_shapes(at, shape, &inputs[0])?;
                Ok(vec![inputs[0].clone()])
            }
            Primitive::Copy => Ok(vec![inputs[0].clone(), inputs[0].clone()]),
            Primitive::Delete => Ok(vec![]),
            Primitive::SegmentSwap { span } => {
                if *span < 2 {
                    return Err(Error::Invalid(format!("{at}: swap span must be >= 2")));
                }
                let mut out: Vec<TensorShape> = inputs.to_vec();
                out.swap(0, span - 1);
                Ok(out)
            }
            Primitive::AxisTranspose { perm } => {
                let s = &inputs[0];
                let mut seen = vec![false; s.rank()];
                if perm.len() != s.rank() {
                    return Err(Error::mismatch(at, format!("rank {}", perm.len()), s.display(b)));
                }
                for &p in perm {
                    if p >= s.rank() || seen[p] {
                        return Err(Error::Invalid(format!("{at}: invalid permutation {perm:?}")));
                    }
                    seen[p] = true;
                }
                let axes = perm.iter().map(|&p| s.axes[p].clone()).collect();
                Ok(vec![TensorShape::new(axes)])
            }
            Primitive::Diag { a, b: bx } => {
                let s = &inputs[0];
                if *a >= *bx || *bx >= s.rank() {
                    return Err(Error::Invalid(format!("{at}: diag axes ({a}, {bx}) out of range")));
                }
                b.unify(at, &s.axes[*a].len, &s.axes[*bx].len)?;
                Ok(vec![s.without_axis(*bx)])
            }
            Primitive::View { input, output } => {
                b.unify_shapes(at, input, &inputs[0])?;
                let mi = inputs[0].elem_monomial(b);
                let mo = output.elem_monomial(b);
                if mi != mo {
                    return Err(Error::mismatch(
                        format!("{at}: view must preserve the element count"),
                        mi,
                        mo,
                    ));
                }
                Ok(vec![output.clone()])
            }
            Primitive::IndexKet { axis, index } => {
                let s = &inputs[0];
                if *axis >= s.rank() {
                    return Err(Error::Invalid(format!("{at}: index axis {axis} out of range")));
                }
                if let AxisLen::Const(n) = b.resolve(&s.axes[*axis].len) {
                    if *index >= n {
                        return Err(Error::Invalid(format!(
                            "{at}: index {index} out of range for axis of length {n}"
                        )));
                    }
                }
                Ok(vec![s.without_axis(*axis)])
            }
            Primitive::OuterProduct => {
                let mut axes = inputs[0].axes.clone();
                axes.extend(inputs[1].axes.iter().cloned());
                Ok(vec![TensorShape::new(axes)])
            }
            Primitive::Cup { a, b: bref } => {
                let check = |r: &AxisRef| -> Result<()> {
                    if r.axis >= inputs[r.seg].rank() {
                        return Err(Error::Invalid(format!("{at}: cup axis {r} out of range")));
                    }
                    Ok(())
                };
                check(a)?;
                check(bref)?;
                b.unify(
                    at,
                    &inputs[a.seg].axes[a.axis].len,
                    &inputs[bref.seg].axes[bref.axis].len,
                )?;
                if a.seg == bref.seg {
                    if a.axis == bref.axis {
                        return Err(Error::Invalid(format!("{at}: cup needs two distinct axes")));
                    }
                    let (lo, hi) = (a.axis.min(bref.axis), a.axis.max(bref.axis));
                    Ok(vec![inputs[0].without_axis(hi).without_axis(lo)])
                } else {
                    let mut axes = inputs[a.seg].without_axis(a.axis).axes;
                    axes.extend(inputs[bref.seg].without_axis(bref.axis).axes);
                    Ok(vec![TensorShape::new(axes)])
                }
            }
            Primitive::Unit { len } => {
                if !inputs[0].is_scalar() {
                    return Err(Error::mismatch(at, "[]", inputs[0].display(b)));
                }
                Ok(vec![TensorShape::new(vec![
                    Axis::new(len.clone()),
                    Axis::new(len.clone()),
                ])])
            }
            Primitive::ElementWise(_) => Ok(vec![inputs[0].clone()]),
            Primitive::SoftMax { axis } => {
                if *axis >= inputs[0].rank() {
                    return Err(Error::Invalid(format!("{at}: softmax axis {axis} out of range")));
                }
                Ok(vec![inputs[0].clone()])
            }
            Primitive::Add => {
                b.unify_shapes(at, &inputs[0], &inputs[1])?;
                Ok(vec![inputs[0].clone()])
            }
            Primitive::SumAxis { axis } => {
                if *axis >= inputs[0].rank() {
                    return Err(Error::Invalid(format!("{at}: sum axis {axis} out of range")));
                }
                Ok(vec![inputs[0].without_axis(*axis)])
            }
            Primitive::LinearParam {
                input,
                output,
                transposed,
                ..
            } => {
                let (expect, produce) = if *transposed { (output, input) } else { (input, output) };
                b.unify_shapes(at, expect, &inputs[0])?;
                Ok(vec![produce.clone()])
            }
            Primitive::ConvTensor(spec) => self.conv_shapes(spec, inputs, b, at),
            Primitive::Pool { .. } => {
                if inputs[0].is_scalar() {
                    return Err(Error::Invalid(format!("{at}: pool needs at least one axis")));
                }
                Ok(vec![inputs[0].without_axis(inputs[0].rank() - 1)])
            }
            Primitive::ConstScalar(_) => Ok(vec![TensorShape::scalar()]),
            Primitive::ArgmaxOneHot => {
                if inputs[0].is_scalar() {
                    return Err(Error::Invalid(format!("{at}: argmax needs at least one axis")));
                }
                Ok(vec![inputs[0].clone()])
            }
        }
    }

    fn conv_shapes(
        &self,
        spec: &ConvSpec,
        inputs: &[TensorShape],
        b: &mut AxisBindings,
        at: &str,
    ) -> Result<Vec<TensorShape>> {
        let r = spec.rank();
        let s = &inputs[0];
        if !spec.transposed {
            if s.rank() < r {
                return Err(Error::mismatch(at, format!("rank >= {r}"), s.display(b)));
            }
            for dim in 0..r {
                b.unify(at, &spec.in_extent[dim], &s.axes[dim].len)?;
                // Surface invalid arithmetic eagerly when everything is concrete.
                if let PadSpec::Explicit(p) = &spec.pad[dim] {
                    if let AxisLen::Const(x) = b.resolve(&spec.in_extent[dim]) {
                        conv_out_extent(x, spec.kernel[dim], spec.stride[dim], spec.dilation[dim], *p)?;
                    }
                }
            }
            let mut axes = Vec::with_capacity(s.rank() + r);
            for dim in 0..r {
                let mut ax = Axis::new(spec.out_len(dim, b)).width();
                if r > 1 {
                    ax = ax.tandem(1);
                }
                axes.push(ax);
            }
            for dim in 0..r {
                let mut ax = Axis::of(spec.kernel[dim]);
                if r > 1 {
                    ax = ax.tandem(2);
                }
                axes.push(ax);
            }
            axes.extend(s.axes[r..].iter().cloned());
            Ok(vec![TensorShape::new(axes)])
        } else {
            if s.rank() < 2 * r {
                return Err(Error::mismatch(at, format!("rank >= {}", 2 * r), s.display(b)));
            }
            for dim in 0..r {
                b.unify(at, &spec.out_len(dim, b), &s.axes[dim].len)?;
                b.unify(at, &AxisLen::Const(spec.kernel[dim]), &s.axes[r + dim].len)?;
            }
            let mut axes = Vec::with_capacity(s.rank() - r);
            for dim in 0..r {
                let mut ax = Axis::new(spec.in_extent[dim].clone()).width();
                if r > 1 {
                    ax = ax.tandem(1);
                }
                axes.push(ax);
            }
            axes.extend(s.axes[2 * r..].iter().cloned());
            Ok(vec![TensorShape::new(axes)])
        }
    }

    /// Jointly linear as a map on the whole consumed tuple.
    pub fn is_linear(&self) -> bool {
        match self {
            Primitive::Identity(_)
            | Primitive::Copy
            | Primitive::Delete
            | Primitive::SegmentSwap { .. }
            | Primitive::AxisTranspose { .. }
            | Primitive::Diag { .. }
            | Primitive::View { .. }
            | Primitive::IndexKet { .. }
            | Primitive::Unit { .. }
            | Primitive::Add
            | Primitive::SumAxis { .. }
            | Primitive::ConvTensor(_) => true,
            Primitive::Cup { a, b } => a.seg == b.seg,
            Primitive::ElementWise(f) => f.is_linear(),
            Primitive::LinearParam { bias, .. } => !bias,
            Primitive::Pool { kind } => *kind == PoolKind::Mean,
            Primitive::OuterProduct
            | Primitive::SoftMax { .. }
            | Primitive::ConstScalar(_)
            | Primitive::ArgmaxOneHot => false,
        }
    }

    /// Linear in each tuple argument separately (with one or more segments).
    pub fn is_multilinear(&self) -> bool {
        match self {
            Primitive::OuterProduct => true,
            Primitive::Cup { a, b } => a.seg != b.seg,
            _ => self.is_linear(),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        match self {
            Primitive::ElementWise(f) => f.is_differentiable(),
            Primitive::ArgmaxOneHot => false,
            _ => true,
        }
    }

    /// Short name for diagnostics.
    pub fn describe(&self) -> &'static str {
        match self {
            Primitive::Identity(_) => "identity",
            Primitive::Copy => "copy",
            Primitive::Delete => "delete",
            Primitive::SegmentSwap { .. } => "swap",
            Primitive::AxisTranspose { .. } => "transpose",
            Primitive::Diag { .. } => "diag",
            Primitive::View { .. } => "view",
            Primitive::IndexKet { .. } => "index",
            Primitive::OuterProduct => "outer",
            Primitive::Cup { .. } => "cup",
            Primitive::Unit { .. } => "unit",
            Primitive::ElementWise(_) => "ew",
            Primitive::SoftMax { .. } => "softmax",
            Primitive::Add => "add",
            Primitive::SumAxis { .. } => "sum",
            Primitive::LinearParam { .. } => "linear",
            Primitive::ConvTensor(_) => "conv",
            Primitive::Pool { .. } => "pool",
            Primitive::ConstScalar(_) => "const",
            Primitive::ArgmaxOneHot => "maxmask",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn apply(p: &Primitive, inputs: &[TensorShape]) -> Result<Vec<TensorShape>> {
        let mut b = AxisBindings::new();
        p.apply_shapes(inputs, &mut b, "test")
    }

    #[test]
    fn cup_requires_equal_lengths() {
        let p = Primitive::Cup {
            a: AxisRef::new(0, 0),
            b: AxisRef::new(1, 0),
        };
        let err = apply(&p, &[TensorShape::of(&[3]), TensorShape::of(&[4])]);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let ok = apply(&p, &[TensorShape::of(&[3]), TensorShape::of(&[3])]).unwrap();
        assert_eq!(ok, vec![TensorShape::scalar()]);
    }

    #[test]
    fn view_checks_element_products() {
        let p = Primitive::View {
            input: TensorShape::of(&[4, 3]),
            output: TensorShape::of(&[12]),
        };
        assert!(apply(&p, &[TensorShape::of(&[4, 3])]).is_ok());
        let bad = Primitive::View {
            input: TensorShape::of(&[4, 3]),
            output: TensorShape::of(&[11]),
        };
        assert!(apply(&bad, &[TensorShape::of(&[4, 3])]).is_err());
    }

    #[test]
    fn conv_tensor_gains_block_axes() {
        let spec = ConvSpec::new_1d(AxisLen::Const(5), 3, 1, 1, 0);
        let out = apply(&Primitive::ConvTensor(spec), &[TensorShape::of(&[5])]).unwrap();
        assert_eq!(out[0].extents(&AxisBindings::new()).unwrap(), vec![3, 3]);
    }

    #[test]
    fn conv_tensor_2d_types_as_product_of_1d() {
        let spec = ConvSpec {
            in_extent: vec![AxisLen::Const(6), AxisLen::Const(5)],
            kernel: vec![2, 3],
            stride: vec![2, 1],
            dilation: vec![1, 2],
            pad: vec![PadSpec::Explicit(0), PadSpec::Explicit(1)],
            transposed: false,
        };
        let out = apply(
            &Primitive::ConvTensor(spec.clone()),
            &[TensorShape::of(&[6, 5])],
        )
        .unwrap();
        let got = out[0].extents(&AxisBindings::new()).unwrap();
        // Axis-wise product of the two 1-D typings.
        let y0 = conv_out_extent(6, 2, 2, 1, 0).unwrap();
        let y1 = conv_out_extent(5, 3, 1, 2, 1).unwrap();
        assert_eq!(got, vec![y0, y1, 2, 3]);
    }

    #[test]
    fn unit_requires_scalar_input() {
        let p = Primitive::Unit {
            len: AxisLen::Const(4),
        };
        assert!(apply(&p, &[TensorShape::of(&[2])]).is_err());
        let out = apply(&p, &[TensorShape::scalar()]).unwrap();
        assert_eq!(out[0].extents(&AxisBindings::new()).unwrap(), vec![4, 4]);
    }
}
