//! Diagrams: vertical sections of cells over tuple-of-tensor boundaries.
//!
//! A [`Diagram`] is a sequence of [`Section`]s.  Each section tiles the full
//! current [`DataShape`]: its cells consume consecutive segments (identity
//! cells fill untouched ones) and their outputs concatenate to the next
//! boundary.  Cells carry broadcast scopes, outermost first; an outer scope
//! prepends its axis to every input and output segment, an inner scope only
//! to the targeted input segments (and every output).

use crate::error::{Error, Result};
use crate::prim::Primitive;
use crate::shape::{Axis, AxisBindings, AxisLen, DataShape, TensorShape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BroadcastKind {
    Outer,
    /// The axis is peeled from the listed input segments only; the others are
    /// shared across instances.
    Inner { targets: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BroadcastScope {
    pub axis: Axis,
    pub kind: BroadcastKind,
}

impl BroadcastScope {
    pub fn outer(axis: Axis) -> Self {
        BroadcastScope {
            axis,
            kind: BroadcastKind::Outer,
        }
    }

    pub fn inner(axis: Axis, targets: Vec<usize>) -> Self {
        BroadcastScope {
            axis,
            kind: BroadcastKind::Inner { targets },
        }
    }
}

/// A cell body: a primitive or a nested diagram.
#[derive(Debug, Clone)]
pub enum CellBody {
    Prim(Primitive),
    Sub {
        /// Source-level name, kept for printing only.
        name: Option<String>,
        diagram: Diagram,
    },
}

// Sub names are presentation metadata; structural equality ignores them.
impl PartialEq for CellBody {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (CellBody::Prim(a), CellBody::Prim(b)) => a == b,
            (CellBody::Sub { diagram: a, .. }, CellBody::Sub { diagram: b, .. }) => a == b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub body: CellBody,
    pub broadcasts: Vec<BroadcastScope>,
}

impl Cell {
    pub fn prim(p: Primitive) -> Cell {
        Cell {
            body: CellBody::Prim(p),
            broadcasts: Vec::new(),
        }
    }

    pub fn sub(diagram: Diagram) -> Cell {
        Cell {
            body: CellBody::Sub {
                name: None,
                diagram,
            },
            broadcasts: Vec::new(),
        }
    }

    pub fn named_sub(name: impl Into<String>, diagram: Diagram) -> Cell {
        Cell {
            body: CellBody::Sub {
                name: Some(name.into()),
                diagram,
            },
            broadcasts: Vec::new(),
        }
    }

    pub fn with_scopes(mut self, scopes: Vec<BroadcastScope>) -> Cell {
        self.broadcasts = scopes;
        self
    }

    pub fn identity(shape: TensorShape) -> Cell {
        Cell::prim(Primitive::Identity(shape))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.body, CellBody::Prim(Primitive::Identity(_)))
    }

    pub fn in_segments(&self) -> usize {
        match &self.body {
            CellBody::Prim(p) => p.in_segments(),
            CellBody::Sub { diagram, .. } => diagram.domain.len(),
        }
    }

    pub fn out_segments(&self) -> usize {
        match &self.body {
            CellBody::Prim(p) => match p {
                Primitive::Copy => 2,
                Primitive::Delete => 0,
                Primitive::SegmentSwap { span } => *span,
                _ => 1,
            },
            CellBody::Sub { diagram, .. } => diagram.codomain.len(),
        }
    }

    pub fn is_linear(&self) -> bool {
        match &self.body {
            CellBody::Prim(p) => p.is_linear(),
            CellBody::Sub { diagram, .. } => diagram.is_linear(),
        }
    }

    pub fn is_differentiable(&self) -> bool {
        match &self.body {
            CellBody::Prim(p) => p.is_differentiable(),
            CellBody::Sub { diagram, .. } => diagram
                .sections
                .iter()
                .all(|s| s.cells.iter().all(|c| c.is_differentiable())),
        }
    }

    /// Type the cell: peel broadcast axes, apply the body rule, re-add them.
    pub fn apply_shapes(
        &self,
        inputs: &[TensorShape],
        b: &mut AxisBindings,
        at: &str,
    ) -> Result<Vec<TensorShape>> {
        let n_in = self.in_segments();
        if inputs.len() != n_in {
            return Err(Error::Invalid(format!(
                "{at}: cell consumes {n_in} segments, got {}",
                inputs.len()
            )));
        }
        let mut core: Vec<TensorShape> = inputs.to_vec();
        for scope in &self.broadcasts {
            let segs: Vec<usize> = match &scope.kind {
                BroadcastKind::Outer => (0..n_in).collect(),
                BroadcastKind::Inner { targets } => {
                    for &t in targets {
                        if t >= n_in {
                            return Err(Error::SegmentOutOfRange {
                                index: t,
                                len: n_in,
                            });
                        }
                    }
                    targets.clone()
                }
            };
            for seg in segs {
                let s = &mut core[seg];
                if s.is_scalar() {
                    return Err(Error::mismatch(
                        format!("{at}: broadcast axis {} missing", scope.axis),
                        &scope.axis.len,
                        "[]",
                    ));
                }
                b.unify(at, &scope.axis.len, &s.axes[0].len)?;
                s.axes.remove(0);
            }
        }
        let mut out = match &self.body {
            CellBody::Prim(p) => p.apply_shapes(&core, b, at)?,
            CellBody::Sub { diagram, .. } => {
                for (i, (got, want)) in core.iter().zip(diagram.domain.segments()).enumerate() {
                    b.unify_shapes(&format!("{at} (nested input {i})"), want, got)?;
                }
                diagram.check_sections(b, at)?;
                diagram.codomain.segments().to_vec()
            }
        };
        for scope in self.broadcasts.iter().rev() {
            for s in &mut out {
                s.axes.insert(0, scope.axis.clone());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Section {
    pub cells: Vec<Cell>,
}

impl Section {
    pub fn new(cells: Vec<Cell>) -> Self {
        Section { cells }
    }

    pub fn identity_for(boundary: &DataShape) -> Section {
        Section {
            cells: boundary
                .segments()
                .iter()
                .map(|s| Cell::identity(s.clone()))
                .collect(),
        }
    }

    pub fn is_all_identity(&self) -> bool {
        self.cells.iter().all(Cell::is_identity)
    }

    /// Split the boundary among the cells and type each one.
    pub fn apply_shapes(
        &self,
        boundary: &DataShape,
        b: &mut AxisBindings,
        at: &str,
    ) -> Result<DataShape> {
        let segs = boundary.segments();
        let mut offset = 0;
        let mut out: Vec<TensorShape> = Vec::new();
        for (ci, cell) in self.cells.iter().enumerate() {
            let n = cell.in_segments();
            if offset + n > segs.len() {
                return Err(Error::Invalid(format!(
                    "{at}: cells overrun the boundary ({} segments)",
                    segs.len()
                )));
            }
            let produced =
                cell.apply_shapes(&segs[offset..offset + n], b, &format!("{at} cell {ci}"))?;
            out.extend(produced);
            offset += n;
        }
        if offset != segs.len() {
            return Err(Error::Invalid(format!(
                "{at}: section covers {offset} of {} segments",
                segs.len()
            )));
        }
        DataShape::new(out).map_err(|_| {
            Error::Invalid(format!("{at}: section deletes every segment"))
        })
    }
}

/// A typed tensor diagram.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagram {
    pub domain: DataShape,
    pub codomain: DataShape,
    pub sections: Vec<Section>,
}

impl Diagram {
    /// The identity diagram on `shape` (zero sections).
    pub fn identity(shape: DataShape) -> Diagram {
        Diagram {
            domain: shape.clone(),
            codomain: shape,
            sections: Vec::new(),
        }
    }

    /// A one-section diagram holding a single cell.
    pub fn single(domain: DataShape, cell: Cell) -> Result<Diagram> {
        let mut b = AxisBindings::new();
        let codomain = Section::new(vec![cell.clone()]).apply_shapes(&domain, &mut b, "section 0")?;
        Ok(Diagram {
            domain,
            codomain,
            sections: vec![Section::new(vec![cell])],
        })
    }

    fn check_sections(&self, b: &mut AxisBindings, at: &str) -> Result<()> {
        let mut cur = self.domain.clone();
        for (k, section) in self.sections.iter().enumerate() {
            cur = section.apply_shapes(&cur, b, &format!("{at} section {k}"))?;
        }
        b.unify_data(&format!("{at} codomain"), &self.codomain, &cur)
    }

    /// All section boundaries (one more than there are sections), with axis
    /// lengths resolved as far as `env` allows.
    pub fn infer_shapes(&self, env: &AxisBindings) -> Result<Vec<DataShape>> {
        Ok(self.infer_with(env.clone())?.0)
    }

    pub fn infer_with(&self, env: AxisBindings) -> Result<(Vec<DataShape>, AxisBindings)> {
        let mut b = env;
        let mut boundaries = vec![self.domain.clone()];
        let mut cur = self.domain.clone();
        for (k, section) in self.sections.iter().enumerate() {
            cur = section.apply_shapes(&cur, &mut b, &format!("section {k}"))?;
            boundaries.push(cur.clone());
        }
        b.unify_data("codomain", &self.codomain, &cur)?;
        let resolved = boundaries
            .iter()
            .map(|d| resolve_data(d, &b))
            .collect::<Vec<_>>();
        Ok((resolved, b))
    }

    pub fn validate(&self, env: &AxisBindings) -> Result<()> {
        self.infer_shapes(env).map(|_| ())
    }

    /// Sequential composition `self ; g`.
    pub fn compose(&self, g: &Diagram) -> Result<Diagram> {
        let mut b = AxisBindings::new();
        b.unify_data("composition boundary", &self.codomain, &g.domain)?;
        let mut sections = self.sections.clone();
        sections.extend(g.sections.iter().cloned());
        let d = Diagram {
            domain: self.domain.clone(),
            codomain: g.codomain.clone(),
            sections,
        };
        // Propagate any lengths the boundary match pinned down.
        d.resolve_lens(&b)
    }

    /// Parallel composition: segment-concatenated domains, row-aligned cells.
    pub fn stack(&self, g: &Diagram) -> Diagram {
        let n = self.sections.len().max(g.sections.len());
        let mut sections = Vec::with_capacity(n);
        for k in 0..n {
            let left = match self.sections.get(k) {
                Some(s) => s.cells.clone(),
                None => Section::identity_for(&self.codomain).cells,
            };
            let mut cells = left;
            match g.sections.get(k) {
                Some(s) => cells.extend(s.cells.iter().cloned()),
                None => cells.extend(Section::identity_for(&g.codomain).cells),
            }
            sections.push(Section::new(cells));
        }
        Diagram {
            domain: self.domain.concat(&g.domain),
            codomain: self.codomain.concat(&g.codomain),
            sections,
        }
    }

    /// Lift over a new leading axis on every segment.
    pub fn broadcast(&self, axis: Axis) -> Diagram {
        Diagram {
            domain: self.domain.with_leading(&axis),
            codomain: self.codomain.with_leading(&axis),
            sections: vec![Section::new(vec![
                Cell::sub(self.clone()).with_scopes(vec![BroadcastScope::outer(axis)])
            ])],
        }
    }

    /// Lift over a new leading axis on one input segment; the rest are shared.
    pub fn inner_broadcast(&self, axis: Axis, target: usize) -> Result<Diagram> {
        if target >= self.domain.len() {
            return Err(Error::SegmentOutOfRange {
                index: target,
                len: self.domain.len(),
            });
        }
        let mut dom_segs = self.domain.segments().to_vec();
        let mut axes = vec![axis.clone()];
        axes.extend(dom_segs[target].axes.iter().cloned());
        dom_segs[target] = TensorShape::new(axes);
        Ok(Diagram {
            domain: DataShape::new(dom_segs)?,
            codomain: self.codomain.with_leading(&axis),
            sections: vec![Section::new(vec![Cell::sub(self.clone())
                .with_scopes(vec![BroadcastScope::inner(axis, vec![target])])])],
        })
    }

    pub fn is_linear(&self) -> bool {
        self.sections
            .iter()
            .all(|s| s.cells.iter().all(Cell::is_linear))
    }

    /// Substitute every axis length through `f`.
    pub fn try_map_lens<F: FnMut(&AxisLen) -> Result<AxisLen>>(&self, f: &mut F) -> Result<Diagram> {
        let map_shape = |s: &TensorShape, f: &mut F| -> Result<TensorShape> {
            let axes = s
                .axes
                .iter()
                .map(|a| {
                    Ok(Axis {
                        len: f(&a.len)?,
                        is_width: a.is_width,
                        tandem_group: a.tandem_group,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TensorShape::new(axes))
        };
        let map_data = |d: &DataShape, f: &mut F| -> Result<DataShape> {
            DataShape::new(
                d.segments()
                    .iter()
                    .map(|s| map_shape(s, f))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let mut sections = Vec::with_capacity(self.sections.len());
        for section in &self.sections {
            let mut cells = Vec::with_capacity(section.cells.len());
            for cell in &section.cells {
                let body = match &cell.body {
                    CellBody::Prim(p) => CellBody::Prim(map_prim_lens(p, f, &map_shape)?),
                    CellBody::Sub { name, diagram } => CellBody::Sub {
                        name: name.clone(),
                        diagram: diagram.try_map_lens(f)?,
                    },
                };
                let broadcasts = cell
                    .broadcasts
                    .iter()
                    .map(|sc| {
                        Ok(BroadcastScope {
                            axis: Axis {
                                len: f(&sc.axis.len)?,
                                is_width: sc.axis.is_width,
                                tandem_group: sc.axis.tandem_group,
                            },
                            kind: sc.kind.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                cells.push(Cell { body, broadcasts });
            }
            sections.push(Section::new(cells));
        }
        Ok(Diagram {
            domain: map_data(&self.domain, f)?,
            codomain: map_data(&self.codomain, f)?,
            sections,
        })
    }

    /// Resolve axis lengths as far as `b` allows, keeping unresolved symbols.
    pub fn resolve_lens(&self, b: &AxisBindings) -> Result<Diagram> {
        self.try_map_lens(&mut |len| Ok(b.resolve(len)))
    }

    /// Fully concrete copy; fails with [`Error::UnboundAxis`] when a symbol
    /// stays unresolved.
    pub fn bind(&self, env: &AxisBindings) -> Result<Diagram> {
        self.try_map_lens(&mut |len| Ok(AxisLen::Const(env.resolve_const(len)?)))
    }
}

fn map_prim_lens<F, G>(p: &Primitive, f: &mut F, map_shape: &G) -> Result<Primitive>
where
    F: FnMut(&AxisLen) -> Result<AxisLen>,
    G: Fn(&TensorShape, &mut F) -> Result<TensorShape>,
{
    Ok(match p {
        Primitive::Identity(s) => Primitive::Identity(map_shape(s, f)?),
        Primitive::View { input, output } => Primitive::View {
            input: map_shape(input, f)?,
            output: map_shape(output, f)?,
        },
        Primitive::Unit { len } => Primitive::Unit { len: f(len)? },
        Primitive::LinearParam {
            name,
            input,
            output,
            bias,
            transposed,
        } => Primitive::LinearParam {
            name: name.clone(),
            input: map_shape(input, f)?,
            output: map_shape(output, f)?,
            bias: *bias,
            transposed: *transposed,
        },
        Primitive::ConvTensor(spec) => {
            let mut spec = spec.clone();
            spec.in_extent = spec
                .in_extent
                .iter()
                .map(|l| f(l))
                .collect::<Result<Vec<_>>>()?;
            Primitive::ConvTensor(spec)
        }
        other => other.clone(),
    })
}

pub fn resolve_data(d: &DataShape, b: &AxisBindings) -> DataShape {
    DataShape::new(
        d.segments()
            .iter()
            .map(|s| {
                TensorShape::new(
                    s.axes
                        .iter()
                        .map(|a| Axis {
                            len: b.resolve(&a.len),
                            is_width: a.is_width,
                            tandem_group: a.tandem_group,
                        })
                        .collect(),
                )
            })
            .collect(),
    )
    .expect("resolved data shape keeps its segments")
}

/// Incremental diagram builder that type-checks each section as it is added.
pub struct Builder {
    domain: DataShape,
    cur: DataShape,
    sections: Vec<Section>,
    bindings: AxisBindings,
}

impl Builder {
    pub fn new(domain: DataShape) -> Self {
        Builder {
            cur: domain.clone(),
            domain,
            sections: Vec::new(),
            bindings: AxisBindings::new(),
        }
    }

    pub fn boundary(&self) -> &DataShape {
        &self.cur
    }

    pub fn bindings(&self) -> &AxisBindings {
        &self.bindings
    }

    pub fn section(&mut self, cells: Vec<Cell>) -> Result<&mut Self> {
        let section = Section::new(cells);
        let at = format!("section {}", self.sections.len());
        self.cur = section.apply_shapes(&self.cur, &mut self.bindings, &at)?;
        self.sections.push(section);
        Ok(self)
    }

    /// Add one cell consuming segments starting at `seg`, identity elsewhere.
    pub fn cell_at(&mut self, seg: usize, cell: Cell) -> Result<&mut Self> {
        let n = cell.in_segments();
        let total = self.cur.len();
        if seg + n > total {
            return Err(Error::SegmentOutOfRange {
                index: seg + n,
                len: total,
            });
        }
        let mut cells: Vec<Cell> = Vec::new();
        for s in &self.cur.segments()[..seg] {
            cells.push(Cell::identity(s.clone()));
        }
        cells.push(cell);
        for s in &self.cur.segments()[seg + n..] {
            cells.push(Cell::identity(s.clone()));
        }
        self.section(cells)
    }

    /// Reorder segments to `perm` (output position -> current position) with
    /// a network of adjacent swaps.
    pub fn permute_segments(&mut self, perm: &[usize]) -> Result<&mut Self> {
        assert_eq!(perm.len(), self.cur.len());
        // current[i] = which original segment sits at position i
        let mut current: Vec<usize> = (0..perm.len()).collect();
        let target: Vec<usize> = perm.to_vec();
        // Bubble the target order into place with adjacent swaps.
        loop {
            let mut swapped = false;
            for i in 0..current.len() - 1 {
                let pos_a = target.iter().position(|&t| t == current[i]).unwrap();
                let pos_b = target.iter().position(|&t| t == current[i + 1]).unwrap();
                if pos_a > pos_b {
                    let mut cells: Vec<Cell> = Vec::new();
                    for s in &self.cur.segments()[..i] {
                        cells.push(Cell::identity(s.clone()));
                    }
                    cells.push(Cell::prim(Primitive::SegmentSwap { span: 2 }));
                    for s in &self.cur.segments()[i + 2..] {
                        cells.push(Cell::identity(s.clone()));
                    }
                    self.section(cells)?;
                    current.swap(i, i + 1);
                    swapped = true;
                }
            }
            if !swapped {
                break;
            }
        }
        Ok(self)
    }

    pub fn finish(self) -> Diagram {
        Diagram {
            domain: self.domain,
            codomain: self.cur,
            sections: self.sections,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prim::AxisRef;

    fn vec_shape(n: usize) -> DataShape {
        DataShape::single(TensorShape::of(&[n]))
    }

    #[test]
    fn compose_checks_boundary_order() {
        let f = Diagram::identity(DataShape::single(TensorShape::of(&[2, 3])));
        let g = Diagram::identity(DataShape::single(TensorShape::of(&[3, 2])));
        assert!(matches!(f.compose(&g), Err(Error::ShapeMismatch { .. })));
        let h = Diagram::identity(DataShape::single(TensorShape::of(&[2, 3])));
        assert!(f.compose(&h).is_ok());
    }

    #[test]
    fn compose_unifies_symbols() {
        let f = Diagram::identity(DataShape::single(TensorShape::new(vec![Axis::sym("b")])));
        let g = Diagram::identity(vec_shape(7));
        let fg = f.compose(&g).unwrap();
        assert_eq!(fg.domain, vec_shape(7).clone());
    }

    #[test]
    fn broadcast_adds_leading_axis_everywhere() {
        let g = Diagram::single(
            vec_shape(3),
            Cell::prim(Primitive::SumAxis { axis: 0 }),
        )
        .unwrap();
        let lifted = g.broadcast(Axis::of(4));
        let bounds = lifted.infer_shapes(&AxisBindings::new()).unwrap();
        assert_eq!(bounds[0].display(&AxisBindings::new()), "[4, 3]");
        assert_eq!(bounds[1].display(&AxisBindings::new()), "[4]");
    }

    #[test]
    fn inner_broadcast_targets_one_segment() {
        // H : R^3 x R^4 -> (scalar), lifted over 4 on segment 0.
        let dom = DataShape::new(vec![TensorShape::of(&[3]), TensorShape::of(&[3])]).unwrap();
        let h = Diagram::single(
            dom,
            Cell::prim(Primitive::Cup {
                a: AxisRef::new(0, 0),
                b: AxisRef::new(1, 0),
            }),
        )
        .unwrap();
        let lifted = h.inner_broadcast(Axis::of(4), 0).unwrap();
        let bounds = lifted.infer_shapes(&AxisBindings::new()).unwrap();
        assert_eq!(bounds[0].display(&AxisBindings::new()), "[4, 3] | [3]");
        assert_eq!(bounds[1].display(&AxisBindings::new()), "[4]");
    }

    #[test]
    fn section_must_tile_boundary() {
        let dom = DataShape::new(vec![TensorShape::of(&[2]), TensorShape::of(&[3])]).unwrap();
        let section = Section::new(vec![Cell::identity(TensorShape::of(&[2]))]);
        let mut b = AxisBindings::new();
        assert!(section.apply_shapes(&dom, &mut b, "s").is_err());
    }

    #[test]
    fn permute_segments_reorders() {
        let dom = DataShape::new(vec![
            TensorShape::of(&[1]),
            TensorShape::of(&[2]),
            TensorShape::of(&[3]),
        ])
        .unwrap();
        let mut builder = Builder::new(dom);
        builder.permute_segments(&[2, 0, 1]).unwrap();
        let d = builder.finish();
        assert_eq!(
            d.codomain.display(&AxisBindings::new()),
            "[3] | [1] | [2]"
        );
        d.validate(&AxisBindings::new()).unwrap();
    }
}
