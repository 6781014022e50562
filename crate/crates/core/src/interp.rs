//! Reference dense-tensor interpreter plus definitional oracles.
//!
//! Evaluation is deterministic: reductions run in ascending index order and
//! results are bit-identical across runs.  Diagrams must be fully concrete
//! (see [`Diagram::bind`]) before evaluation.

use std::collections::BTreeMap;

use crate::diagram::{BroadcastKind, BroadcastScope, Cell, CellBody, Diagram};
use crate::error::{Error, Result};
use crate::prim::{ConvSpec, PoolKind, Primitive};
use crate::shape::{AxisBindings, AxisLen, TensorShape};
use crate::tensor::{increment, Tensor};

/// One learned parameter: the associated tensor (input axes then output
/// axes, row-major) and an optional bias of the output shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

pub type ParamStore = BTreeMap<String, Param>;

/// Evaluation environment: one tensor per domain segment plus parameters.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub inputs: Vec<Tensor>,
    pub params: ParamStore,
}

impl Env {
    pub fn new(inputs: Vec<Tensor>) -> Self {
        Env {
            inputs,
            params: ParamStore::new(),
        }
    }

    pub fn with_param(mut self, name: impl Into<String>, weight: Tensor) -> Self {
        self.params.insert(name.into(), Param { weight, bias: None });
        self
    }

    pub fn with_biased_param(
        mut self,
        name: impl Into<String>,
        weight: Tensor,
        bias: Tensor,
    ) -> Self {
        self.params
            .insert(name.into(), Param { weight, bias: Some(bias) });
        self
    }
}

fn konst(len: &AxisLen) -> Result<usize> {
    len.as_const()
        .ok_or_else(|| Error::UnboundAxis(len.to_string()))
}

fn shape_extents(s: &TensorShape) -> Result<Vec<usize>> {
    s.axes.iter().map(|a| konst(&a.len)).collect()
}

/// Evaluate a concrete diagram: one result tensor per codomain segment.
pub fn eval(d: &Diagram, env: &Env) -> Result<Vec<Tensor>> {
    if env.inputs.len() != d.domain.len() {
        return Err(Error::EnvMismatch(format!(
            "diagram takes {} input segments, got {}",
            d.domain.len(),
            env.inputs.len()
        )));
    }
    for (i, (t, s)) in env.inputs.iter().zip(d.domain.segments()).enumerate() {
        let want = shape_extents(s)?;
        if t.shape() != want.as_slice() {
            return Err(Error::EnvMismatch(format!(
                "input segment {i}: expected shape {:?}, got {:?}",
                want,
                t.shape()
            )));
        }
    }
    let mut state = env.inputs.clone();
    for section in &d.sections {
        let mut next = Vec::new();
        let mut offset = 0;
        for cell in &section.cells {
            let n = cell.in_segments();
            let outs = eval_cell(cell, &state[offset..offset + n], &env.params)?;
            next.extend(outs);
            offset += n;
        }
        debug_assert_eq!(offset, state.len());
        state = next;
    }
    Ok(state)
}

fn eval_cell(cell: &Cell, inputs: &[Tensor], params: &ParamStore) -> Result<Vec<Tensor>> {
    eval_scoped(&cell.body, &cell.broadcasts, inputs, params)
}

fn eval_scoped(
    body: &CellBody,
    scopes: &[BroadcastScope],
    inputs: &[Tensor],
    params: &ParamStore,
) -> Result<Vec<Tensor>> {
    let Some(scope) = scopes.first() else {
        return match body {
            CellBody::Prim(p) => eval_prim(p, inputs, params),
            CellBody::Sub { diagram, .. } => eval(
                diagram,
                &Env {
                    inputs: inputs.to_vec(),
                    params: params.clone(),
                },
            ),
        };
    };
    let n = konst(&scope.axis.len)?;
    let affected: Vec<usize> = match &scope.kind {
        BroadcastKind::Outer => (0..inputs.len()).collect(),
        BroadcastKind::Inner { targets } => targets.clone(),
    };
    let mut per_instance: Vec<Vec<Tensor>> = Vec::with_capacity(n);
    for i in 0..n {
        let sliced: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                if affected.contains(&k) {
                    t.slice_leading(i)
                } else {
                    t.clone()
                }
            })
            .collect();
        per_instance.push(eval_scoped(body, &scopes[1..], &sliced, params)?);
    }
    let out_count = per_instance[0].len();
    let mut outs = Vec::with_capacity(out_count);
    for seg in 0..out_count {
        let parts: Vec<Tensor> = per_instance.iter().map(|v| v[seg].clone()).collect();
        outs.push(Tensor::stack_leading(&parts));
    }
    Ok(outs)
}

fn eval_prim(p: &Primitive, inputs: &[Tensor], params: &ParamStore) -> Result<Vec<Tensor>> {
    match p {
        Primitive::Identity(_) => Ok(vec![inputs[0].clone()]),
        Primitive::Copy => Ok(vec![inputs[0].clone(), inputs[0].clone()]),
        Primitive::Delete => Ok(vec![]),
        Primitive::SegmentSwap { span } => {
            let mut out = inputs.to_vec();
            out.swap(0, span - 1);
            Ok(out)
        }
        Primitive::AxisTranspose { perm } => {
            let x = &inputs[0];
            let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            let mut out = Tensor::zeros(out_shape.clone());
            let mut idx = vec![0usize; out_shape.len()];
            let mut in_idx = vec![0usize; out_shape.len()];
            for off in 0..out.elems() {
                for (t, &pt) in perm.iter().enumerate() {
                    in_idx[pt] = idx[t];
                }
                out.data_mut()[off] = x.get(&in_idx);
                increment(&mut idx, &out_shape);
            }
            Ok(vec![out])
        }
        Primitive::Diag { a, b } => {
            let x = &inputs[0];
            let out_shape: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| i != b)
                .map(|(_, &n)| n)
                .collect();
            let mut out = Tensor::zeros(out_shape.clone());
            let mut idx = vec![0usize; out_shape.len()];
            for off in 0..out.elems() {
                let mut in_idx = Vec::with_capacity(x.rank());
                let mut it = idx.iter();
                for i in 0..x.rank() {
                    if i == *b {
                        in_idx.push(in_idx[*a]);
                    } else {
                        in_idx.push(*it.next().unwrap());
                    }
                }
                out.data_mut()[off] = x.get(&in_idx);
                increment(&mut idx, &out_shape);
            }
            Ok(vec![out])
        }
        Primitive::View { output, .. } => {
            let shape = shape_extents(output)?;
            Ok(vec![inputs[0].reshaped(shape)])
        }
        Primitive::IndexKet { axis, index } => {
            let x = &inputs[0];
            let out_shape: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| i != axis)
                .map(|(_, &n)| n)
                .collect();
            let mut out = Tensor::zeros(out_shape.clone());
            let mut idx = vec![0usize; out_shape.len()];
            for off in 0..out.elems() {
                let mut in_idx = Vec::with_capacity(x.rank());
                let mut it = idx.iter();
                for i in 0..x.rank() {
                    if i == *axis {
                        in_idx.push(*index);
                    } else {
                        in_idx.push(*it.next().unwrap());
                    }
                }
                out.data_mut()[off] = x.get(&in_idx);
                increment(&mut idx, &out_shape);
            }
            Ok(vec![out])
        }
        Primitive::OuterProduct => {
            let (x, y) = (&inputs[0], &inputs[1]);
            let mut shape = x.shape().to_vec();
            shape.extend_from_slice(y.shape());
            let mut out = Tensor::zeros(shape);
            let mut off = 0;
            for xv in x.data() {
                for yv in y.data() {
                    out.data_mut()[off] = xv * yv;
                    off += 1;
                }
            }
            Ok(vec![out])
        }
        Primitive::Cup { a, b } => {
            if a.seg == b.seg {
                let x = &inputs[0];
                let (lo, hi) = (a.axis.min(b.axis), a.axis.max(b.axis));
                let n = x.shape()[lo];
                let out_shape: Vec<usize> = x
                    .shape()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != lo && *i != hi)
                    .map(|(_, &d)| d)
                    .collect();
                let mut out = Tensor::zeros(out_shape.clone());
                let mut idx = vec![0usize; out_shape.len()];
                for off in 0..out.elems() {
                    let mut acc = 0.0;
                    for t in 0..n {
                        let mut in_idx = Vec::with_capacity(x.rank());
                        let mut it = idx.iter();
                        for i in 0..x.rank() {
                            if i == lo || i == hi {
                                in_idx.push(t);
                            } else {
                                in_idx.push(*it.next().unwrap());
                            }
                        }
                        acc += x.get(&in_idx);
                    }
                    out.data_mut()[off] = acc;
                    increment(&mut idx, &out_shape);
                }
                Ok(vec![out])
            } else {
                let (x, y) = (&inputs[0], &inputs[1]);
                let n = x.shape()[a.axis];
                let x_keep: Vec<usize> = x
                    .shape()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != a.axis)
                    .map(|(_, &d)| d)
                    .collect();
                let y_keep: Vec<usize> = y
                    .shape()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != b.axis)
                    .map(|(_, &d)| d)
                    .collect();
                let x_rank_out = x_keep.len();
                let mut out_shape = x_keep;
                out_shape.extend(&y_keep);
                let mut out = Tensor::zeros(out_shape.clone());
                let mut idx = vec![0usize; out_shape.len()];
                for off in 0..out.elems() {
                    let mut acc = 0.0;
                    for t in 0..n {
                        let mut xi = Vec::with_capacity(x.rank());
                        let mut it = idx[..x_rank_out].iter();
                        for i in 0..x.rank() {
                            if i == a.axis {
                                xi.push(t);
                            } else {
                                xi.push(*it.next().unwrap());
                            }
                        }
                        let mut yi = Vec::with_capacity(y.rank());
                        let mut it = idx[x_rank_out..].iter();
                        for i in 0..y.rank() {
                            if i == b.axis {
                                yi.push(t);
                            } else {
                                yi.push(*it.next().unwrap());
                            }
                        }
                        acc += x.get(&xi) * y.get(&yi);
                    }
                    out.data_mut()[off] = acc;
                    increment(&mut idx, &out_shape);
                }
                Ok(vec![out])
            }
        }
        Primitive::Unit { len } => {
            let n = konst(len)?;
            let r = inputs[0].as_scalar()?;
            let mut out = Tensor::zeros(vec![n, n]);
            for i in 0..n {
                out.set(&[i, i], r);
            }
            Ok(vec![out])
        }
        Primitive::ElementWise(f) => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = f.apply(*v);
            }
            Ok(vec![out])
        }
        Primitive::SoftMax { axis } => {
            let x = &inputs[0];
            let n = x.shape()[*axis];
            let frame: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| i != axis)
                .map(|(_, &d)| d)
                .collect();
            let frames: usize = frame.iter().product();
            let mut out = x.clone();
            let mut fidx = vec![0usize; frame.len()];
            for _ in 0..frames {
                let mut offs = Vec::with_capacity(n);
                for t in 0..n {
                    let mut idx = Vec::with_capacity(x.rank());
                    let mut it = fidx.iter();
                    for i in 0..x.rank() {
                        if i == *axis {
                            idx.push(t);
                        } else {
                            idx.push(*it.next().unwrap());
                        }
                    }
                    offs.push(x.offset(&idx));
                }
                // Max subtraction keeps exp in range.
                let mut m = f64::NEG_INFINITY;
                for &o in &offs {
                    m = m.max(x.data()[o]);
                }
                let mut total = 0.0;
                for &o in &offs {
                    let e = (x.data()[o] - m).exp();
                    out.data_mut()[o] = e;
                    total += e;
                }
                for &o in &offs {
                    out.data_mut()[o] /= total;
                }
                increment(&mut fidx, &frame);
            }
            Ok(vec![out])
        }
        Primitive::Add => {
            let mut out = inputs[0].clone();
            for (o, v) in out.data_mut().iter_mut().zip(inputs[1].data()) {
                *o += v;
            }
            Ok(vec![out])
        }
        Primitive::SumAxis { axis } => {
            let x = &inputs[0];
            let n = x.shape()[*axis];
            let out_shape: Vec<usize> = x
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| i != axis)
                .map(|(_, &d)| d)
                .collect();
            let mut out = Tensor::zeros(out_shape.clone());
            let mut idx = vec![0usize; out_shape.len()];
            for off in 0..out.elems() {
                let mut acc = 0.0;
                for t in 0..n {
                    let mut in_idx = Vec::with_capacity(x.rank());
                    let mut it = idx.iter();
                    for i in 0..x.rank() {
                        if i == *axis {
                            in_idx.push(t);
                        } else {
                            in_idx.push(*it.next().unwrap());
                        }
                    }
                    acc += x.get(&in_idx);
                }
                out.data_mut()[off] = acc;
                increment(&mut idx, &out_shape);
            }
            Ok(vec![out])
        }
        Primitive::LinearParam {
            name,
            input,
            output,
            bias,
            transposed,
        } => {
            let param = params
                .get(name)
                .ok_or_else(|| Error::EnvMismatch(format!("parameter `{name}` not provided")))?;
            let in_shape = shape_extents(input)?;
            let out_shape = shape_extents(output)?;
            let mut assoc: Vec<usize> = in_shape.clone();
            assoc.extend(&out_shape);
            if param.weight.shape() != assoc.as_slice() {
                return Err(Error::EnvMismatch(format!(
                    "parameter `{name}`: expected shape {assoc:?}, got {:?}",
                    param.weight.shape()
                )));
            }
            let in_e: usize = in_shape.iter().product();
            let out_e: usize = out_shape.iter().product();
            let w = param.weight.data();
            let x = inputs[0].data();
            if !*transposed {
                let mut out = Tensor::zeros(out_shape.clone());
                for o in 0..out_e {
                    let mut acc = 0.0;
                    for i in 0..in_e {
                        acc += x[i] * w[i * out_e + o];
                    }
                    out.data_mut()[o] = acc;
                }
                if *bias {
                    let bt = param.bias.as_ref().ok_or_else(|| {
                        Error::EnvMismatch(format!("parameter `{name}` needs a bias tensor"))
                    })?;
                    if bt.shape() != out_shape.as_slice() {
                        return Err(Error::EnvMismatch(format!(
                            "bias of `{name}`: expected shape {out_shape:?}, got {:?}",
                            bt.shape()
                        )));
                    }
                    for (o, v) in out.data_mut().iter_mut().zip(bt.data()) {
                        *o += v;
                    }
                }
                Ok(vec![out])
            } else {
                let mut out = Tensor::zeros(in_shape.clone());
                for i in 0..in_e {
                    let mut acc = 0.0;
                    for o in 0..out_e {
                        acc += x[o] * w[i * out_e + o];
                    }
                    out.data_mut()[i] = acc;
                }
                Ok(vec![out])
            }
        }
        Primitive::ConvTensor(spec) => eval_conv(spec, &inputs[0]),
        Primitive::Pool { kind } => {
            let x = &inputs[0];
            let n = x.shape()[x.rank() - 1];
            let out_shape = x.shape()[..x.rank() - 1].to_vec();
            let rows: usize = out_shape.iter().product();
            let mut out = Tensor::zeros(out_shape);
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                out.data_mut()[r] = match kind {
                    PoolKind::Max => {
                        let mut best = row[0];
                        for &v in &row[1..] {
                            if v > best {
                                best = v;
                            }
                        }
                        best
                    }
                    PoolKind::Mean => {
                        let mut acc = 0.0;
                        for &v in row {
                            acc += v;
                        }
                        acc / n as f64
                    }
                };
            }
            Ok(vec![out])
        }
        Primitive::ConstScalar(c) => Ok(vec![Tensor::scalar(*c)]),
        Primitive::ArgmaxOneHot => {
            let x = &inputs[0];
            let n = x.shape()[x.rank() - 1];
            let mut out = Tensor::zeros(x.shape().to_vec());
            let rows = x.elems() / n;
            for r in 0..rows {
                let row = &x.data()[r * n..(r + 1) * n];
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    // Strict comparison keeps the lowest index on ties.
                    if v > row[best] {
                        best = i;
                    }
                }
                out.data_mut()[r * n + best] = 1.0;
            }
            Ok(vec![out])
        }
    }
}

fn eval_conv(spec: &ConvSpec, x: &Tensor) -> Result<Vec<Tensor>> {
    let b = AxisBindings::new();
    let dims = spec.concrete_dims(&b)?;
    let r = spec.rank();
    let rest: Vec<usize> = x.shape()[if spec.transposed { 2 * r } else { r }..].to_vec();
    let rest_elems: usize = rest.iter().product();
    if !spec.transposed {
        let ys: Vec<usize> = dims.iter().map(|d| d.5).collect();
        let ks: Vec<usize> = dims.iter().map(|d| d.1).collect();
        let mut out_shape = ys.clone();
        out_shape.extend(&ks);
        out_shape.extend(&rest);
        let mut out = Tensor::zeros(out_shape);
        let y_total: usize = ys.iter().product();
        let k_total: usize = ks.iter().product();
        let mut i_idx = vec![0usize; r];
        let mut off = 0;
        for _ in 0..y_total {
            let mut j_idx = vec![0usize; r];
            for _ in 0..k_total {
                // Source position on the padded input, per dimension.
                let mut src = Vec::with_capacity(r);
                let mut in_range = true;
                for dim in 0..r {
                    let (xd, _k, s, d, p, _y) = dims[dim];
                    let pos = (s * i_idx[dim] + d * j_idx[dim]) as i64 - p as i64;
                    if pos < 0 || pos >= xd as i64 {
                        in_range = false;
                        break;
                    }
                    src.push(pos as usize);
                }
                for rest_off in 0..rest_elems {
                    out.data_mut()[off] = if in_range {
                        let mut in_off = 0;
                        for (dim, &pd) in src.iter().enumerate() {
                            in_off = in_off * x.shape()[dim] + pd;
                        }
                        x.data()[in_off * rest_elems + rest_off]
                    } else {
                        0.0
                    };
                    off += 1;
                }
                increment(&mut j_idx, &ks);
            }
            increment(&mut i_idx, &ys);
        }
        Ok(vec![out])
    } else {
        let xs: Vec<usize> = dims.iter().map(|d| d.0).collect();
        let ys: Vec<usize> = dims.iter().map(|d| d.5).collect();
        let ks: Vec<usize> = dims.iter().map(|d| d.1).collect();
        let mut out_shape = xs.clone();
        out_shape.extend(&rest);
        let mut out = Tensor::zeros(out_shape);
        let x_total: usize = xs.iter().product();
        let y_total: usize = ys.iter().product();
        let k_total: usize = ks.iter().product();
        let mut l_idx = vec![0usize; r];
        for l_off in 0..x_total {
            for rest_off in 0..rest_elems {
                let mut acc = 0.0;
                let mut i_idx = vec![0usize; r];
                for iy in 0..y_total {
                    let mut j_idx = vec![0usize; r];
                    for jk in 0..k_total {
                        let mut hit = true;
                        for dim in 0..r {
                            let (_x, _k, s, d, p, _y) = dims[dim];
                            if (s * i_idx[dim] + d * j_idx[dim]) as i64 - p as i64
                                != l_idx[dim] as i64
                            {
                                hit = false;
                                break;
                            }
                        }
                        if hit {
                            acc += x.data()[(iy * k_total + jk) * rest_elems + rest_off];
                        }
                        increment(&mut j_idx, &ks);
                    }
                    increment(&mut i_idx, &ys);
                }
                out.data_mut()[l_off * rest_elems + rest_off] = acc;
            }
            increment(&mut l_idx, &xs);
        }
        Ok(vec![out])
    }
}

/// Upper bound on either side of a materialized linear map.
pub const MATERIALIZE_LIMIT: usize = 10_000;

/// The matrix of a linear diagram, found by evaluating on basis vectors.
///
/// Returns a `[out_elems, in_elems]` tensor over the concatenated segment
/// elements of the domain and codomain.
pub fn materialize_linear(d: &Diagram, params: &ParamStore) -> Result<Tensor> {
    if !d.is_linear() {
        return Err(Error::NotLinear("diagram".into()));
    }
    let in_shapes: Vec<Vec<usize>> = d
        .domain
        .segments()
        .iter()
        .map(shape_extents)
        .collect::<Result<_>>()?;
    let in_elems: usize = in_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let out_elems: usize = d
        .codomain
        .segments()
        .iter()
        .map(|s| Ok(shape_extents(s)?.iter().product::<usize>()))
        .collect::<Result<Vec<usize>>>()?
        .iter()
        .sum();
    if in_elems > MATERIALIZE_LIMIT || out_elems > MATERIALIZE_LIMIT {
        return Err(Error::TooLarge(in_elems.max(out_elems), MATERIALIZE_LIMIT));
    }
    let mut mat = Tensor::zeros(vec![out_elems, in_elems]);
    for j in 0..in_elems {
        let mut inputs = Vec::with_capacity(in_shapes.len());
        let mut base = 0;
        for s in &in_shapes {
            let elems: usize = s.iter().product();
            let mut t = Tensor::zeros(s.clone());
            if j >= base && j < base + elems {
                t.data_mut()[j - base] = 1.0;
            }
            base += elems;
            inputs.push(t);
        }
        let outs = eval(
            d,
            &Env {
                inputs,
                params: params.clone(),
            },
        )?;
        let mut i = 0;
        for t in outs {
            for &v in t.data() {
                mat.data_mut()[i * in_elems + j] = v;
                i += 1;
            }
        }
    }
    Ok(mat)
}

/// Definitional convolution: `out[i] = sum_j v_pad[s*i + d*j] * w[j]` on the
/// zero-padded input, dimension-wise for higher ranks.
pub fn oracle_conv(
    v: &Tensor,
    w: &Tensor,
    stride: &[usize],
    dilation: &[usize],
    pad: &[usize],
) -> Result<Tensor> {
    let r = v.rank();
    if w.rank() != r || stride.len() != r || dilation.len() != r || pad.len() != r {
        return Err(Error::EnvMismatch(
            "conv oracle: rank mismatch between input, kernel and parameters".into(),
        ));
    }
    let mut out_shape = Vec::with_capacity(r);
    for dim in 0..r {
        out_shape.push(crate::shape::conv_out_extent(
            v.shape()[dim],
            w.shape()[dim],
            stride[dim],
            dilation[dim],
            pad[dim],
        )?);
    }
    let mut out = Tensor::zeros(out_shape.clone());
    let mut i_idx = vec![0usize; r];
    for off in 0..out.elems() {
        let mut acc = 0.0;
        let mut j_idx = vec![0usize; r];
        for _ in 0..w.elems() {
            let mut v_idx = Vec::with_capacity(r);
            let mut in_range = true;
            for dim in 0..r {
                let pos = (stride[dim] * i_idx[dim] + dilation[dim] * j_idx[dim]) as i64
                    - pad[dim] as i64;
                if pos < 0 || pos >= v.shape()[dim] as i64 {
                    in_range = false;
                    break;
                }
                v_idx.push(pos as usize);
            }
            if in_range {
                acc += v.get(&v_idx) * w.get(&j_idx);
            }
            increment(&mut j_idx, w.shape());
        }
        out.data_mut()[off] = acc;
        increment(&mut i_idx, &out_shape);
    }
    Ok(out)
}

fn softmax_rows(scores: &mut [f64], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let mut m = f64::NEG_INFINITY;
        for &v in row.iter() {
            m = m.max(v);
        }
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Scaled dot-product attention straight from its defining equation:
/// `SoftMax(Q K^T / sqrt(d_k)) V` with row-wise SoftMax.
pub fn oracle_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (y, dk) = (q.shape()[0], q.shape()[1]);
    let (x, dv) = (v.shape()[0], v.shape()[1]);
    if k.shape() != [x, dk] {
        return Err(Error::EnvMismatch("attention oracle: K shape".into()));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut scores = vec![0.0; y * x];
    for i in 0..y {
        for j in 0..x {
            let mut acc = 0.0;
            for t in 0..dk {
                acc += q.get(&[i, t]) * k.get(&[j, t]);
            }
            scores[i * x + j] = acc * scale;
        }
    }
    softmax_rows(&mut scores, x);
    let mut out = Tensor::zeros(vec![y, dv]);
    for i in 0..y {
        for t in 0..dv {
            let mut acc = 0.0;
            for j in 0..x {
                acc += scores[i * x + j] * v.get(&[j, t]);
            }
            out.set(&[i, t], acc);
        }
    }
    Ok(out)
}

/// Multi-head attention computed head by head and concatenated:
/// `MultiHead(Q,K,V) = Concat(head_1, ..., head_h) W^O` with
/// `head_i = Attention(Q W_i^Q, K W_i^K, V W_i^V)`.
///
/// `wq`, `wk`, `wv` have shape `[m, h, dk]`; `wo` is applied as a
/// `[h*dk, m]` matrix.
pub fn oracle_multihead(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
) -> Result<Tensor> {
    let (y, m) = (q.shape()[0], q.shape()[1]);
    let x = k.shape()[0];
    let (h, dk) = (wq.shape()[1], wq.shape()[2]);
    let project = |src: &Tensor, w: &Tensor, head: usize, rows: usize| -> Tensor {
        let mut out = Tensor::zeros(vec![rows, dk]);
        for i in 0..rows {
            for t in 0..dk {
                let mut acc = 0.0;
                for c in 0..m {
                    acc += src.get(&[i, c]) * w.get(&[c, head, t]);
                }
                out.set(&[i, t], acc);
            }
        }
        out
    };
    let mut concat = Tensor::zeros(vec![y, h * dk]);
    for head in 0..h {
        let qh = project(q, wq, head, y);
        let kh = project(k, wk, head, x);
        let vh = project(v, wv, head, x);
        let att = oracle_attention(&qh, &kh, &vh)?;
        for i in 0..y {
            for t in 0..dk {
                concat.set(&[i, head * dk + t], att.get(&[i, t]));
            }
        }
    }
    let mut out = Tensor::zeros(vec![y, m]);
    for i in 0..y {
        for c in 0..m {
            let mut acc = 0.0;
            for u in 0..h * dk {
                acc += concat.get(&[i, u]) * wo.data()[u * m + c];
            }
            out.set(&[i, c], acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prim::AxisRef;
    use crate::shape::{Axis, DataShape};

    fn run1(d: &Diagram, inputs: Vec<Tensor>) -> Tensor {
        eval(d, &Env::new(inputs)).unwrap().remove(0)
    }

    #[test]
    fn softmax_is_symmetric_on_zeros() {
        let d = Diagram::single(
            DataShape::single(TensorShape::of(&[2])),
            Cell::prim(Primitive::SoftMax { axis: 0 }),
        )
        .unwrap();
        let out = run1(&d, vec![Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()]);
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_oracle_matches_definitional_sums() {
        let v = Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::new(vec![3], vec![1.0, 0.0, -1.0]).unwrap();
        let out = oracle_conv(&v, &w, &[1], &[1], &[0]).unwrap();
        assert_eq!(out.data(), &[-2.0, -2.0, -2.0]);

        let w2 = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let out = oracle_conv(&v, &w2, &[2], &[1], &[0]).unwrap();
        assert_eq!(out.data(), &[3.0, 7.0]);

        // Identity kernel.
        let w1 = Tensor::new(vec![1], vec![1.0]).unwrap();
        let out = oracle_conv(&v, &w1, &[1], &[1], &[0]).unwrap();
        assert_eq!(out.data(), v.data());

        // Dilation 2 shrinks the output to a single element: v[0] - v[4].
        let out = oracle_conv(&v, &w, &[1], &[2], &[0]).unwrap();
        assert_eq!(out.data(), &[-4.0]);
    }

    #[test]
    fn unit_materializes_the_identity() {
        let d = Diagram::single(
            DataShape::single(TensorShape::scalar()),
            Cell::prim(Primitive::Unit {
                len: AxisLen::Const(2),
            }),
        )
        .unwrap();
        let m = materialize_linear(&d, &ParamStore::new()).unwrap();
        assert_eq!(m.shape(), &[4, 1]);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_tensor_matrix_is_the_star_tensor() {
        let spec = ConvSpec::new_1d(AxisLen::Const(5), 3, 1, 1, 0);
        let d = Diagram::single(
            DataShape::single(TensorShape::of(&[5])),
            Cell::prim(Primitive::ConvTensor(spec)),
        )
        .unwrap();
        let m = materialize_linear(&d, &ParamStore::new()).unwrap();
        assert_eq!(m.shape(), &[9, 5]);
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..5 {
                    let want = if l == i + j { 1.0 } else { 0.0 };
                    assert_eq!(m.get(&[i * 3 + j, l]), want, "i={i} j={j} l={l}");
                }
            }
        }
    }

    #[test]
    fn broadcast_semantics_slicewise() {
        let g = Diagram::single(
            DataShape::single(TensorShape::of(&[3])),
            Cell::prim(Primitive::SumAxis { axis: 0 }),
        )
        .unwrap();
        let lifted = g.broadcast(Axis::of(4));
        let x = Tensor::from_fn(vec![4, 3], |idx| (idx[0] * 3 + idx[1]) as f64);
        let out = run1(&lifted, vec![x.clone()]);
        for i in 0..4 {
            let direct = run1(&g, vec![x.slice_leading(i)]);
            assert_eq!(out.get(&[i]), direct.as_scalar().unwrap());
        }
    }

    #[test]
    fn matmul_from_double_inner_broadcast_of_cup() {
        // Fig-15 construction: the vector inner product, inner-broadcast
        // over p (segment 0) and then q (segment 1).
        let dom = DataShape::new(vec![TensorShape::of(&[3]), TensorShape::of(&[3])]).unwrap();
        let ip = Diagram::single(
            dom,
            Cell::prim(Primitive::Cup {
                a: AxisRef::new(0, 0),
                b: AxisRef::new(1, 0),
            }),
        )
        .unwrap();
        let rows = ip.inner_broadcast(Axis::of(2), 0).unwrap();
        let mm = rows.inner_broadcast(Axis::of(4), 1).unwrap();
        let a = Tensor::from_fn(vec![2, 3], |i| (i[0] * 3 + i[1]) as f64 * 0.5 + 1.0);
        let bt = Tensor::from_fn(vec![4, 3], |i| (i[0] as f64 - i[1] as f64) * 0.25);
        let out = eval(&mm, &Env::new(vec![a.clone(), bt.clone()])).unwrap().remove(0);
        // The q scope was applied last, so its axis is outermost: [4, 2].
        assert_eq!(out.shape(), &[4, 2]);
        for qi in 0..4 {
            for pi in 0..2 {
                let mut acc = 0.0;
                for t in 0..3 {
                    acc += a.get(&[pi, t]) * bt.get(&[qi, t]);
                }
                assert!((out.get(&[qi, pi]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn copy_is_linear() {
        let dom = DataShape::single(TensorShape::of(&[3]));
        let d = Diagram::single(dom, Cell::prim(Primitive::Copy)).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = Tensor::new(vec![3], vec![4.0, 0.25, -1.0]).unwrap();
        let sum = Tensor::new(vec![3], vec![5.0, -1.75, -0.5]).unwrap();
        let dx = eval(&d, &Env::new(vec![x.clone()])).unwrap();
        let dy = eval(&d, &Env::new(vec![y.clone()])).unwrap();
        let dsum = eval(&d, &Env::new(vec![sum])).unwrap();
        for seg in 0..2 {
            for i in 0..3 {
                assert_eq!(dsum[seg].data()[i], dx[seg].data()[i] + dy[seg].data()[i]);
            }
        }
    }
}
