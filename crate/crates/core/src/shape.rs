//! Axis lengths, axes, tensor shapes and tuple data shapes.
//!
//! A wire boundary is a [`DataShape`]: an ordered, nonempty tuple of
//! [`TensorShape`]s (the dashed-line segments).  Axis lengths may be concrete,
//! symbolic, or a deferred convolution-extent expression; symbolic arithmetic
//! is limited to products (for element counts) and the convolution formula.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

/// Output extent of a (possibly padded) 1-D convolution pass.
///
/// Computes `floor((x + 2*pad - d*(k-1) - 1) / s) + 1` and rejects results
/// below 1.
pub fn conv_out_extent(x: usize, k: usize, s: usize, d: usize, pad: usize) -> Result<usize> {
    debug_assert!(x >= 1 && k >= 1 && s >= 1 && d >= 1);
    let span = x as i64 + 2 * pad as i64 - d as i64 * (k as i64 - 1) - 1;
    if span < 0 {
        return Err(Error::ConvArithmetic(format!(
            "kernel span exceeds input: x={x}, k={k}, s={s}, d={d}, pad={pad}"
        )));
    }
    Ok((span / s as i64) as usize + 1)
}

/// The length of one axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AxisLen {
    /// A concrete extent, always >= 1.
    Const(usize),
    /// A named symbolic extent, resolved through an [`AxisBindings`].
    Sym(String),
    /// Deferred convolution output extent over a (possibly symbolic) input.
    Conv {
        input: Box<AxisLen>,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad: usize,
    },
}

impl AxisLen {
    pub fn sym(name: impl Into<String>) -> Self {
        AxisLen::Sym(name.into())
    }

    pub fn as_const(&self) -> Option<usize> {
        match self {
            AxisLen::Const(n) => Some(*n),
            _ => None,
        }
    }

    /// Canonical monomial key for products; opaque lengths count as variables.
    fn var_key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AxisLen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisLen::Const(n) => write!(f, "{n}"),
            AxisLen::Sym(s) => write!(f, "{s}"),
            AxisLen::Conv {
                input,
                kernel,
                stride,
                dilation,
                pad,
            } => write!(f, "conv({input},k={kernel},s={stride},d={dilation},p={pad})"),
        }
    }
}

/// One tensor axis: a length plus presentation metadata.
///
/// `is_width` marks item-count axes (drawn with an overline); `tandem_group`
/// ties multi-dimensional conv axes together (drawn bold).  Both are
/// metadata: structural comparison looks at lengths only.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Axis {
    pub len: AxisLen,
    pub is_width: bool,
    pub tandem_group: Option<u32>,
}

impl Axis {
    pub fn new(len: AxisLen) -> Self {
        Axis {
            len,
            is_width: false,
            tandem_group: None,
        }
    }

    pub fn of(n: usize) -> Self {
        Axis::new(AxisLen::Const(n))
    }

    pub fn sym(name: impl Into<String>) -> Self {
        Axis::new(AxisLen::sym(name))
    }

    pub fn width(mut self) -> Self {
        self.is_width = true;
        self
    }

    pub fn tandem(mut self, group: u32) -> Self {
        self.tandem_group = Some(group);
        self
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_width {
            write!(f, "~{}", self.len)
        } else {
            write!(f, "{}", self.len)
        }
    }
}

/// An ordered list of axes; the empty list is the scalar shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TensorShape {
    pub axes: Vec<Axis>,
}

impl TensorShape {
    pub fn scalar() -> Self {
        TensorShape { axes: Vec::new() }
    }

    pub fn new(axes: Vec<Axis>) -> Self {
        TensorShape { axes }
    }

    pub fn of(extents: &[usize]) -> Self {
        TensorShape {
            axes: extents.iter().map(|&n| Axis::of(n)).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.axes.is_empty()
    }

    /// Concrete extents, or an error naming the first unresolved axis.
    pub fn extents(&self, b: &AxisBindings) -> Result<Vec<usize>> {
        self.axes.iter().map(|a| b.resolve_const(&a.len)).collect()
    }

    pub fn elems(&self, b: &AxisBindings) -> Result<usize> {
        Ok(self.extents(b)?.iter().product())
    }

    /// Element count as a monomial over unresolved axis lengths.
    pub fn elem_monomial(&self, b: &AxisBindings) -> Monomial {
        let mut m = Monomial::one();
        for a in &self.axes {
            m.mul_len(&b.resolve(&a.len));
        }
        m
    }

    /// Lengths-only equality after resolving both sides.
    pub fn same_lens(&self, other: &TensorShape, b: &AxisBindings) -> bool {
        self.rank() == other.rank()
            && self
                .axes
                .iter()
                .zip(&other.axes)
                .all(|(x, y)| b.resolve(&x.len) == b.resolve(&y.len))
    }

    pub fn without_axis(&self, i: usize) -> TensorShape {
        let mut axes = self.axes.clone();
        axes.remove(i);
        TensorShape { axes }
    }

    pub fn display(&self, b: &AxisBindings) -> String {
        let parts: Vec<String> = self
            .axes
            .iter()
            .map(|a| {
                let len = b.resolve(&a.len);
                if a.is_width {
                    format!("~{len}")
                } else {
                    len.to_string()
                }
            })
            .collect();
        format!("[{}]", parts.join(", "))
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.display(&AxisBindings::default()))
    }
}

/// A tuple of tensor segments separated by dashed lines.  Always nonempty.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataShape {
    segments: Vec<TensorShape>,
}

impl DataShape {
    pub fn new(segments: Vec<TensorShape>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Invalid("a data shape needs at least one segment".into()));
        }
        Ok(DataShape { segments })
    }

    pub fn single(shape: TensorShape) -> Self {
        DataShape {
            segments: vec![shape],
        }
    }

    pub fn segments(&self) -> &[TensorShape] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn concat(&self, other: &DataShape) -> DataShape {
        let mut segments = self.segments.clone();
        segments.extend(other.segments.iter().cloned());
        DataShape { segments }
    }

    /// New data shape with `axis` prepended to every segment.
    pub fn with_leading(&self, axis: &Axis) -> DataShape {
        DataShape {
            segments: self
                .segments
                .iter()
                .map(|s| {
                    let mut axes = vec![axis.clone()];
                    axes.extend(s.axes.iter().cloned());
                    TensorShape { axes }
                })
                .collect(),
        }
    }

    pub fn same_lens(&self, other: &DataShape, b: &AxisBindings) -> bool {
        self.len() == other.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(x, y)| x.same_lens(y, b))
    }

    pub fn display(&self, b: &AxisBindings) -> String {
        let parts: Vec<String> = self.segments.iter().map(|s| s.display(b)).collect();
        parts.join(" | ")
    }
}

impl fmt::Display for DataShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.display(&AxisBindings::default()))
    }
}

/// Axis-name bindings plus unification state.
///
/// Bindings map symbol names to lengths (possibly other symbols).  Resolution
/// chases bindings to a fixpoint and folds the convolution formula once its
/// input is concrete.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AxisBindings {
    map: BTreeMap<String, AxisLen>,
}

impl AxisBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_consts<I: IntoIterator<Item = (String, usize)>>(iter: I) -> Self {
        AxisBindings {
            map: iter
                .into_iter()
                .map(|(k, v)| (k, AxisLen::Const(v)))
                .collect(),
        }
    }

    pub fn bind(&mut self, name: impl Into<String>, len: AxisLen) {
        self.map.insert(name.into(), len);
    }

    pub fn bind_const(&mut self, name: impl Into<String>, n: usize) {
        self.map.insert(name.into(), AxisLen::Const(n));
    }

    pub fn get(&self, name: &str) -> Option<&AxisLen> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AxisLen)> {
        self.map.iter()
    }

    /// Resolve a length as far as the bindings allow.
    pub fn resolve(&self, len: &AxisLen) -> AxisLen {
        match len {
            AxisLen::Const(n) => AxisLen::Const(*n),
            AxisLen::Sym(s) => match self.map.get(s) {
                Some(next) if next != len => self.resolve(&next.clone()),
                _ => len.clone(),
            },
            AxisLen::Conv {
                input,
                kernel,
                stride,
                dilation,
                pad,
            } => {
                let input = self.resolve(input);
                if let AxisLen::Const(x) = input {
                    match conv_out_extent(x, *kernel, *stride, *dilation, *pad) {
                        Ok(y) => AxisLen::Const(y),
                        // Leave unresolvable arithmetic in symbolic form; the
                        // consumer that needs a concrete value will re-derive
                        // the error with context.
                        Err(_) => AxisLen::Conv {
                            input: Box::new(input),
                            kernel: *kernel,
                            stride: *stride,
                            dilation: *dilation,
                            pad: *pad,
                        },
                    }
                } else {
                    AxisLen::Conv {
                        input: Box::new(input),
                        kernel: *kernel,
                        stride: *stride,
                        dilation: *dilation,
                        pad: *pad,
                    }
                }
            }
        }
    }

    /// Resolve to a concrete extent or fail with the blocking symbol.
    pub fn resolve_const(&self, len: &AxisLen) -> Result<usize> {
        match self.resolve(len) {
            AxisLen::Const(n) => Ok(n),
            AxisLen::Sym(s) => Err(Error::UnboundAxis(s)),
            conv @ AxisLen::Conv { .. } => {
                // Either the input is symbolic or the formula was invalid.
                match conv {
                    AxisLen::Conv {
                        input,
                        kernel,
                        stride,
                        dilation,
                        pad,
                    } => match self.resolve(&input) {
                        AxisLen::Const(x) => {
                            conv_out_extent(x, kernel, stride, dilation, pad)
                        }
                        other => Err(Error::UnboundAxis(other.to_string())),
                    },
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Unify two lengths, binding symbols as needed.
    pub fn unify(&mut self, at: &str, a: &AxisLen, b: &AxisLen) -> Result<()> {
        let ra = self.resolve(a);
        let rb = self.resolve(b);
        if ra == rb {
            return Ok(());
        }
        match (&ra, &rb) {
            (AxisLen::Sym(s), _) => {
                self.map.insert(s.clone(), rb);
                Ok(())
            }
            (_, AxisLen::Sym(s)) => {
                self.map.insert(s.clone(), ra);
                Ok(())
            }
            _ => Err(Error::mismatch(at, &ra, &rb)),
        }
    }

    pub fn unify_shapes(&mut self, at: &str, a: &TensorShape, b: &TensorShape) -> Result<()> {
        if a.rank() != b.rank() {
            return Err(Error::mismatch(at, a.display(self), b.display(self)));
        }
        for (x, y) in a.axes.iter().zip(&b.axes) {
            self.unify(at, &x.len, &y.len)?;
        }
        Ok(())
    }

    pub fn unify_data(&mut self, at: &str, a: &DataShape, b: &DataShape) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::mismatch(at, a.display(self), b.display(self)));
        }
        for (x, y) in a.segments().iter().zip(b.segments()) {
            self.unify_shapes(at, x, y)?;
        }
        Ok(())
    }
}

/// A product of axis lengths: concrete coefficient times symbolic factors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomial {
    pub coeff: usize,
    pub vars: BTreeMap<String, u32>,
}

impl Monomial {
    pub fn one() -> Self {
        Monomial {
            coeff: 1,
            vars: BTreeMap::new(),
        }
    }

    pub fn mul_len(&mut self, len: &AxisLen) {
        match len {
            AxisLen::Const(n) => self.coeff *= n,
            other => *self.vars.entry(other.var_key()).or_insert(0) += 1,
        }
    }

    pub fn is_const(&self) -> bool {
        self.vars.is_empty()
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.vars.is_empty() {
            return write!(f, "{}", self.coeff);
        }
        let mut parts = Vec::new();
        if self.coeff != 1 {
            parts.push(self.coeff.to_string());
        }
        for (v, e) in &self.vars {
            if *e == 1 {
                parts.push(v.clone());
            } else {
                parts.push(format!("{v}^{e}"));
            }
        }
        write!(f, "{}", parts.join("*"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_extent_matches_closed_form() {
        assert_eq!(conv_out_extent(5, 3, 1, 1, 0).unwrap(), 3);
        assert_eq!(conv_out_extent(5, 1, 1, 1, 0).unwrap(), 5);
        assert_eq!(conv_out_extent(7, 3, 2, 2, 0).unwrap(), 2);
        // s = d = 1, pad = 0 reduces to x - k + 1.
        for x in 1..30 {
            for k in 1..=x {
                assert_eq!(conv_out_extent(x, k, 1, 1, 0).unwrap(), x - k + 1);
            }
        }
        assert!(conv_out_extent(3, 5, 1, 1, 0).is_err());
    }

    #[test]
    fn unify_binds_symbols() {
        let mut b = AxisBindings::new();
        b.unify("t", &AxisLen::sym("a"), &AxisLen::Const(4)).unwrap();
        assert_eq!(b.resolve_const(&AxisLen::sym("a")).unwrap(), 4);
        // Chained symbol aliasing resolves transitively.
        b.unify("t", &AxisLen::sym("b"), &AxisLen::sym("a")).unwrap();
        assert_eq!(b.resolve_const(&AxisLen::sym("b")).unwrap(), 4);
        assert!(b.unify("t", &AxisLen::sym("a"), &AxisLen::Const(5)).is_err());
    }

    #[test]
    fn deferred_conv_resolves_once_bound() {
        let mut b = AxisBindings::new();
        let y = AxisLen::Conv {
            input: Box::new(AxisLen::sym("x")),
            kernel: 3,
            stride: 1,
            dilation: 1,
            pad: 0,
        };
        assert!(b.resolve_const(&y).is_err());
        b.bind_const("x", 5);
        assert_eq!(b.resolve_const(&y).unwrap(), 3);
    }

    #[test]
    fn monomial_products_compare() {
        let b = AxisBindings::new();
        let s1 = TensorShape::new(vec![Axis::sym("h"), Axis::sym("k")]);
        let s2 = TensorShape::new(vec![Axis::sym("k"), Axis::sym("h")]);
        assert_eq!(s1.elem_monomial(&b), s2.elem_monomial(&b));
        let s3 = TensorShape::of(&[3, 4]);
        let s4 = TensorShape::of(&[12]);
        assert_eq!(s3.elem_monomial(&b), s4.elem_monomial(&b));
    }

    #[test]
    fn axis_order_is_significant() {
        let b = AxisBindings::new();
        let s1 = TensorShape::of(&[2, 3]);
        let s2 = TensorShape::of(&[3, 2]);
        assert!(!s1.same_lens(&s2, &b));
    }
}
