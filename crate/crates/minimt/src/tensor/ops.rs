//! Operation kinds, their shape rules, and their gradients.
//!
//! Forward evaluation and the corresponding vector-Jacobian products live
//! side by side in this module so each op's contract is auditable in one
//! place. Shape errors name the op and the offending dimensions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The recorded operation of a tape node.
///
/// Attribute-carrying variants hold their attributes inline; id lists
/// (embedding rows, gathered columns, scatter targets) are owned by the node
/// and never aliased.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// (m×k) · (k×n) -> m×n
    MatMul,
    /// Elementwise add of equal shapes, or bias-row add: (m×n) + [n].
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    /// y = scale·x + shift, elementwise.
    Lin { scale: f64, shift: f64 },
    /// Natural log, elementwise.
    Log,
    Tanh,
    Sigmoid,
    Relu,
    /// Normalizes along `axis` (rank 1 or 2); defined as exp(log_softmax).
    Softmax { axis: usize },
    /// Max-subtracted log softmax along `axis`.
    LogSoftmax { axis: usize },
    /// Concatenate rank-2 inputs along `axis` (0 or 1).
    Concat { axis: usize },
    /// Contiguous slice of a rank-2 tensor along `axis`.
    Slice { axis: usize, start: usize, len: usize },
    /// Row gather from an embedding matrix (V×D) -> (ids.len()×D).
    EmbedLookup { ids: Vec<usize> },
    /// (x, mask) -> x ∘ mask; the mask comes from `dropout_mask`.
    Dropout,
    /// Sum of all elements -> scalar.
    Sum,
    /// Mean of all elements -> scalar.
    Mean,
    /// (t n×m, s n×1) -> rows of t scaled by s.
    ScaleRows,
    /// Picks t[i, ids[i]] -> n×1.
    GatherCols { ids: Vec<usize> },
    /// (B×H) -> (times·B)×H, block-repeating the rows.
    TileRows { times: usize },
    /// Metadata-only reshape; element count preserved.
    Reshape { shape: Vec<usize> },
    /// (memory (S·B)×H, query B×H) -> S×B of per-position dot products.
    AttnScores { batch: usize },
    /// (weights S×B, memory (S·B)×H) -> B×H weighted sum over S.
    AttnContext { batch: usize },
    /// (weights S×B) -> B×width, adding weight[s,b] at column ids[s·B+b].
    CopyScatter { ids: Vec<usize>, width: usize },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Lin { .. } => "lin",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::EmbedLookup { .. } => "embedding_lookup",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::ScaleRows => "scale_rows",
            OpKind::GatherCols { .. } => "gather_cols",
            OpKind::TileRows { .. } => "tile_rows",
            OpKind::Reshape { .. } => "reshape",
            OpKind::AttnScores { .. } => "attn_scores",
            OpKind::AttnContext { .. } => "attn_context",
            OpKind::CopyScatter { .. } => "copy_scatter",
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    // Strides are element strides; matrixmultiply handles all layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { op, axis, rank });
    }
    Ok(())
}

/// Log-softmax along `axis` with max subtraction, writing into a fresh tensor.
fn log_softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("log_softmax", axis, x.rank().max(1))?;
    let mut out = x.clone();
    match x.rank() {
        1 => lse_inplace(out.data_mut(), 1),
        2 => {
            let (r, c) = x.dims2()?;
            if axis == 1 {
                for i in 0..r {
                    lse_inplace(&mut out.data_mut()[i * c..(i + 1) * c], 1);
                }
            } else {
                // columns: strided
                let data = out.data_mut();
                for j in 0..c {
                    let mut max = f64::NEG_INFINITY;
                    for i in 0..r {
                        max = max.max(data[i * c + j]);
                    }
                    let mut sum = 0.0;
                    for i in 0..r {
                        sum += (data[i * c + j] - max).exp();
                    }
                    let lse = max + sum.ln();
                    for i in 0..r {
                        data[i * c + j] -= lse;
                    }
                }
            }
        }
        r => return Err(shape_err("log_softmax", format!("rank {r} unsupported"))),
    }
    Ok(out)
}

fn lse_inplace(row: &mut [f64], _stride: usize) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Max-subtracted softmax along `axis`. Equivalent to exp(log_softmax) but
/// normalized by direct division, which keeps symmetric inputs exactly
/// uniform and masked (-1e30) entries exactly zero.
fn softmax_values(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", axis, x.rank().max(1))?;
    let mut out = x.clone();
    match x.rank() {
        1 => softmax_inplace(out.data_mut()),
        2 => {
            let (r, c) = x.dims2()?;
            if axis == 1 {
                for i in 0..r {
                    softmax_inplace(&mut out.data_mut()[i * c..(i + 1) * c]);
                }
            } else {
                let data = out.data_mut();
                let mut col = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = data[i * c + j];
                    }
                    softmax_inplace(&mut col);
                    for i in 0..r {
                        data[i * c + j] = col[i];
                    }
                }
            }
        }
        r => return Err(shape_err("softmax", format!("rank {r} unsupported"))),
    }
    Ok(out)
}

fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2().map_err(|_| shape_err("matmul", format!("lhs rank {} != 2", a.rank())))?;
            let (k2, n) = b.dims2().map_err(|_| shape_err("matmul", format!("rhs rank {} != 2", b.rank())))?;
            if k != k2 {
                return Err(shape_err("matmul", format!("inner dims {k} vs {k2} ({m}x{k} · {k2}x{n})")));
            }
            let mut out = Tensor::zeros(&[m, n]);
            dgemm(m, k, n, 1.0, a.data(), k as isize, 1, b.data(), n as isize, 1, 0.0, out.data_mut(), n as isize, 1);
            Ok(out)
        }
        OpKind::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                let mut out = a.clone();
                for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
                    *o += v;
                }
                Ok(out)
            } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
                // bias-row broadcast: the one permitted broadcast
                let (r, c) = a.dims2()?;
                let mut out = a.clone();
                let bias = b.data();
                for i in 0..r {
                    let row = &mut out.data_mut()[i * c..(i + 1) * c];
                    for (o, v) in row.iter_mut().zip(bias) {
                        *o += v;
                    }
                }
                Ok(out)
            } else {
                Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let mut out = a.clone();
            for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
                *o *= v;
            }
            Ok(out)
        }
        OpKind::Lin { scale, shift } => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = scale * *v + shift;
            }
            Ok(out)
        }
        OpKind::Log => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = v.ln();
            }
            Ok(out)
        }
        OpKind::Tanh => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = v.tanh();
            }
            Ok(out)
        }
        OpKind::Sigmoid => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
            Ok(out)
        }
        OpKind::Relu => {
            let mut out = inputs[0].clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        OpKind::LogSoftmax { axis } => log_softmax_values(inputs[0], *axis),
        OpKind::Softmax { axis } => softmax_values(inputs[0], *axis),
        OpKind::Concat { axis } => {
            if inputs.is_empty() {
                return Err(shape_err("concat", "no inputs".into()));
            }
            check_axis("concat", *axis, 2)?;
            let (r0, c0) = inputs[0].dims2().map_err(|_| shape_err("concat", "rank 2 required".into()))?;
            if *axis == 0 {
                let mut rows = 0;
                for t in inputs {
                    let (r, c) = t.dims2().map_err(|_| shape_err("concat", "rank 2 required".into()))?;
                    if c != c0 {
                        return Err(shape_err("concat", format!("col mismatch {c} vs {c0}")));
                    }
                    rows += r;
                }
                let mut out = Tensor::zeros(&[rows, c0]);
                let mut off = 0;
                for t in inputs {
                    out.data_mut()[off..off + t.len()].copy_from_slice(t.data());
                    off += t.len();
                }
                Ok(out)
            } else {
                let mut cols = 0;
                for t in inputs {
                    let (r, c) = t.dims2().map_err(|_| shape_err("concat", "rank 2 required".into()))?;
                    if r != r0 {
                        return Err(shape_err("concat", format!("row mismatch {r} vs {r0}")));
                    }
                    cols += c;
                }
                let mut out = Tensor::zeros(&[r0, cols]);
                for i in 0..r0 {
                    let mut off = 0;
                    for t in inputs {
                        let c = t.shape()[1];
                        out.data_mut()[i * cols + off..i * cols + off + c]
                            .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
                        off += c;
                    }
                }
                Ok(out)
            }
        }
        OpKind::Slice { axis, start, len } => {
            let t = inputs[0];
            let (r, c) = t.dims2().map_err(|_| shape_err("slice", "rank 2 required".into()))?;
            check_axis("slice", *axis, 2)?;
            let extent = if *axis == 0 { r } else { c };
            if start + len > extent {
                return Err(shape_err("slice", format!("{start}..{} beyond extent {extent}", start + len)));
            }
            if *axis == 0 {
                let mut out = Tensor::zeros(&[*len, c]);
                out.data_mut().copy_from_slice(&t.data()[start * c..(start + len) * c]);
                Ok(out)
            } else {
                let mut out = Tensor::zeros(&[r, *len]);
                for i in 0..r {
                    out.data_mut()[i * len..(i + 1) * len]
                        .copy_from_slice(&t.data()[i * c + start..i * c + start + len]);
                }
                Ok(out)
            }
        }
        OpKind::EmbedLookup { ids } => {
            let e = inputs[0];
            let (v, d) = e.dims2().map_err(|_| shape_err("embedding_lookup", "rank 2 required".into()))?;
            let mut out = Tensor::zeros(&[ids.len(), d]);
            for (i, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(shape_err("embedding_lookup", format!("id {id} >= vocab {v}")));
                }
                out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&e.data()[id * d..(id + 1) * d]);
            }
            Ok(out)
        }
        OpKind::Dropout => {
            let (x, mask) = (inputs[0], inputs[1]);
            if x.shape() != mask.shape() {
                return Err(shape_err("dropout", format!("{:?} vs mask {:?}", x.shape(), mask.shape())));
            }
            let mut out = x.clone();
            for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
                *o *= m;
            }
            Ok(out)
        }
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => {
            let n = inputs[0].len() as f64;
            Ok(Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n))
        }
        OpKind::ScaleRows => {
            let (t, s) = (inputs[0], inputs[1]);
            let (r, c) = t.dims2().map_err(|_| shape_err("scale_rows", "rank 2 required".into()))?;
            if s.shape() != [r, 1] {
                return Err(shape_err("scale_rows", format!("scale {:?} wants [{r}, 1]", s.shape())));
            }
            let mut out = t.clone();
            for i in 0..r {
                let f = s.data()[i];
                for v in &mut out.data_mut()[i * c..(i + 1) * c] {
                    *v *= f;
                }
            }
            Ok(out)
        }
        OpKind::GatherCols { ids } => {
            let t = inputs[0];
            let (r, c) = t.dims2().map_err(|_| shape_err("gather_cols", "rank 2 required".into()))?;
            if ids.len() != r {
                return Err(shape_err("gather_cols", format!("{} ids for {r} rows", ids.len())));
            }
            let mut out = Tensor::zeros(&[r, 1]);
            for (i, &id) in ids.iter().enumerate() {
                if id >= c {
                    return Err(shape_err("gather_cols", format!("col {id} >= {c}")));
                }
                out.data_mut()[i] = t.data()[i * c + id];
            }
            Ok(out)
        }
        OpKind::TileRows { times } => {
            let t = inputs[0];
            let (b, h) = t.dims2().map_err(|_| shape_err("tile_rows", "rank 2 required".into()))?;
            let mut out = Tensor::zeros(&[times * b, h]);
            for s in 0..*times {
                out.data_mut()[s * b * h..(s + 1) * b * h].copy_from_slice(t.data());
            }
            Ok(out)
        }
        OpKind::Reshape { shape } => inputs[0].clone().reshaped(shape.clone()),
        OpKind::AttnScores { batch } => {
            let (mem, q) = (inputs[0], inputs[1]);
            let b = *batch;
            let (sb, h) = mem.dims2().map_err(|_| shape_err("attn_scores", "memory rank 2 required".into()))?;
            let (qb, qh) = q.dims2().map_err(|_| shape_err("attn_scores", "query rank 2 required".into()))?;
            if qb != b || sb % b != 0 || qh != h {
                return Err(shape_err(
                    "attn_scores",
                    format!("memory {sb}x{h}, query {qb}x{qh}, batch {b}"),
                ));
            }
            let s_len = sb / b;
            let mut out = Tensor::zeros(&[s_len, b]);
            for s in 0..s_len {
                for bi in 0..b {
                    let mrow = &mem.data()[(s * b + bi) * h..(s * b + bi + 1) * h];
                    let qrow = &q.data()[bi * h..(bi + 1) * h];
                    let mut acc = 0.0;
                    for x in 0..h {
                        acc += mrow[x] * qrow[x];
                    }
                    out.data_mut()[s * b + bi] = acc;
                }
            }
            Ok(out)
        }
        OpKind::AttnContext { batch } => {
            let (w, mem) = (inputs[0], inputs[1]);
            let b = *batch;
            let (s_len, wb) = w.dims2().map_err(|_| shape_err("attn_context", "weights rank 2 required".into()))?;
            let (sb, h) = mem.dims2().map_err(|_| shape_err("attn_context", "memory rank 2 required".into()))?;
            if wb != b || sb != s_len * b {
                return Err(shape_err(
                    "attn_context",
                    format!("weights {s_len}x{wb}, memory {sb}x{h}, batch {b}"),
                ));
            }
            let mut out = Tensor::zeros(&[b, h]);
            for s in 0..s_len {
                for bi in 0..b {
                    let f = w.data()[s * b + bi];
                    if f == 0.0 {
                        continue;
                    }
                    let mrow = &mem.data()[(s * b + bi) * h..(s * b + bi + 1) * h];
                    let orow = &mut out.data_mut()[bi * h..(bi + 1) * h];
                    for x in 0..h {
                        orow[x] += f * mrow[x];
                    }
                }
            }
            Ok(out)
        }
        OpKind::CopyScatter { ids, width } => {
            let w = inputs[0];
            let (s_len, b) = w.dims2().map_err(|_| shape_err("copy_scatter", "rank 2 required".into()))?;
            if ids.len() != s_len * b {
                return Err(shape_err("copy_scatter", format!("{} ids for {s_len}x{b}", ids.len())));
            }
            let mut out = Tensor::zeros(&[b, *width]);
            for s in 0..s_len {
                for bi in 0..b {
                    let id = ids[s * b + bi];
                    if id >= *width {
                        return Err(shape_err("copy_scatter", format!("target {id} >= width {width}")));
                    }
                    out.data_mut()[bi * width + id] += w.data()[s * b + bi];
                }
            }
            Ok(out)
        }
    }
}

/// Accumulates vector-Jacobian products into `acc` (one slot per input).
/// `needs[i]` gates the work; slots arrive zero-initialized by the caller.
pub(crate) fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
    acc: &mut [Option<Tensor>],
) {
    fn ensure<'s>(slot: &'s mut Option<Tensor>, shape: &[usize]) -> &'s mut Tensor {
        slot.get_or_insert_with(|| Tensor::zeros(shape))
    }
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if needs[0] {
                // dA += dC · B^T
                let da = ensure(&mut acc[0], a.shape());
                dgemm(m, n, k, 1.0, grad.data(), n as isize, 1, b.data(), 1, n as isize, 1.0, da.data_mut(), k as isize, 1);
            }
            if needs[1] {
                // dB += A^T · dC
                let db = ensure(&mut acc[1], b.shape());
                dgemm(k, m, n, 1.0, a.data(), 1, k as isize, grad.data(), n as isize, 1, 1.0, db.data_mut(), n as isize, 1);
            }
        }
        OpKind::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                let da = ensure(&mut acc[0], a.shape());
                for (o, g) in da.data_mut().iter_mut().zip(grad.data()) {
                    *o += g;
                }
            }
            if needs[1] {
                if a.shape() == b.shape() {
                    let db = ensure(&mut acc[1], b.shape());
                    for (o, g) in db.data_mut().iter_mut().zip(grad.data()) {
                        *o += g;
                    }
                } else {
                    // bias row: column sums of the upstream gradient
                    let (r, c) = (a.shape()[0], a.shape()[1]);
                    let db = ensure(&mut acc[1], b.shape());
                    for i in 0..r {
                        for j in 0..c {
                            db.data_mut()[j] += grad.data()[i * c + j];
                        }
                    }
                }
            }
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                let da = ensure(&mut acc[0], a.shape());
                for ((o, g), v) in da.data_mut().iter_mut().zip(grad.data()).zip(b.data()) {
                    *o += g * v;
                }
            }
            if needs[1] {
                let db = ensure(&mut acc[1], b.shape());
                for ((o, g), v) in db.data_mut().iter_mut().zip(grad.data()).zip(a.data()) {
                    *o += g * v;
                }
            }
        }
        OpKind::Lin { scale, .. } => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for (o, g) in dx.data_mut().iter_mut().zip(grad.data()) {
                    *o += scale * g;
                }
            }
        }
        OpKind::Log => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for ((o, g), x) in dx.data_mut().iter_mut().zip(grad.data()).zip(inputs[0].data()) {
                    *o += g / x;
                }
            }
        }
        OpKind::Tanh => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for ((o, g), y) in dx.data_mut().iter_mut().zip(grad.data()).zip(output.data()) {
                    *o += g * (1.0 - y * y);
                }
            }
        }
        OpKind::Sigmoid => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for ((o, g), y) in dx.data_mut().iter_mut().zip(grad.data()).zip(output.data()) {
                    *o += g * y * (1.0 - y);
                }
            }
        }
        OpKind::Relu => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for ((o, g), x) in dx.data_mut().iter_mut().zip(grad.data()).zip(inputs[0].data()) {
                    if *x > 0.0 {
                        *o += g;
                    }
                }
            }
        }
        OpKind::Softmax { axis } => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                softmax_family_backward(dx, output, grad, *axis, SoftmaxRule::Softmax);
            }
        }
        OpKind::LogSoftmax { axis } => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                softmax_family_backward(dx, output, grad, *axis, SoftmaxRule::LogSoftmax);
            }
        }
        OpKind::Concat { axis } => {
            if *axis == 0 {
                let mut off = 0;
                for (i, t) in inputs.iter().enumerate() {
                    if needs[i] {
                        let dt = ensure(&mut acc[i], t.shape());
                        for (o, g) in dt.data_mut().iter_mut().zip(&grad.data()[off..off + t.len()]) {
                            *o += g;
                        }
                    }
                    off += t.len();
                }
            } else {
                let r = inputs[0].shape()[0];
                let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut off = 0;
                for (idx, t) in inputs.iter().enumerate() {
                    let c = t.shape()[1];
                    if needs[idx] {
                        let dt = ensure(&mut acc[idx], t.shape());
                        for i in 0..r {
                            for j in 0..c {
                                dt.data_mut()[i * c + j] += grad.data()[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
        }
        OpKind::Slice { axis, start, len } => {
            if needs[0] {
                let t = inputs[0];
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let dt = ensure(&mut acc[0], t.shape());
                if *axis == 0 {
                    for (o, g) in dt.data_mut()[start * c..(start + len) * c].iter_mut().zip(grad.data()) {
                        *o += g;
                    }
                } else {
                    for i in 0..r {
                        for j in 0..*len {
                            dt.data_mut()[i * c + start + j] += grad.data()[i * len + j];
                        }
                    }
                }
            }
        }
        OpKind::EmbedLookup { ids } => {
            if needs[0] {
                let d = inputs[0].shape()[1];
                let de = ensure(&mut acc[0], inputs[0].shape());
                for (i, &id) in ids.iter().enumerate() {
                    let row = &mut de.data_mut()[id * d..(id + 1) * d];
                    for (o, g) in row.iter_mut().zip(&grad.data()[i * d..(i + 1) * d]) {
                        *o += g;
                    }
                }
            }
        }
        OpKind::Dropout => {
            let (x, mask) = (inputs[0], inputs[1]);
            if needs[0] {
                let dx = ensure(&mut acc[0], x.shape());
                for ((o, g), m) in dx.data_mut().iter_mut().zip(grad.data()).zip(mask.data()) {
                    *o += g * m;
                }
            }
            if needs[1] {
                let dm = ensure(&mut acc[1], mask.shape());
                for ((o, g), v) in dm.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
                    *o += g * v;
                }
            }
        }
        OpKind::Sum => {
            if needs[0] {
                let g = grad.data()[0];
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for o in dx.data_mut() {
                    *o += g;
                }
            }
        }
        OpKind::Mean => {
            if needs[0] {
                let g = grad.data()[0] / inputs[0].len() as f64;
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for o in dx.data_mut() {
                    *o += g;
                }
            }
        }
        OpKind::ScaleRows => {
            let (t, s) = (inputs[0], inputs[1]);
            let (r, c) = (t.shape()[0], t.shape()[1]);
            if needs[0] {
                let dt = ensure(&mut acc[0], t.shape());
                for i in 0..r {
                    let f = s.data()[i];
                    for j in 0..c {
                        dt.data_mut()[i * c + j] += grad.data()[i * c + j] * f;
                    }
                }
            }
            if needs[1] {
                let ds = ensure(&mut acc[1], s.shape());
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += grad.data()[i * c + j] * t.data()[i * c + j];
                    }
                    ds.data_mut()[i] += dot;
                }
            }
        }
        OpKind::GatherCols { ids } => {
            if needs[0] {
                let c = inputs[0].shape()[1];
                let dt = ensure(&mut acc[0], inputs[0].shape());
                for (i, &id) in ids.iter().enumerate() {
                    dt.data_mut()[i * c + id] += grad.data()[i];
                }
            }
        }
        OpKind::TileRows { times } => {
            if needs[0] {
                let (b, h) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let dq = ensure(&mut acc[0], inputs[0].shape());
                for s in 0..*times {
                    for (o, g) in dq.data_mut().iter_mut().zip(&grad.data()[s * b * h..(s + 1) * b * h]) {
                        *o += g;
                    }
                }
            }
        }
        OpKind::Reshape { .. } => {
            if needs[0] {
                let dx = ensure(&mut acc[0], inputs[0].shape());
                for (o, g) in dx.data_mut().iter_mut().zip(grad.data()) {
                    *o += g;
                }
            }
        }
        OpKind::AttnScores { batch } => {
            let (mem, q) = (inputs[0], inputs[1]);
            let b = *batch;
            let h = mem.shape()[1];
            let s_len = mem.shape()[0] / b;
            if needs[0] {
                let dm = ensure(&mut acc[0], mem.shape());
                for s in 0..s_len {
                    for bi in 0..b {
                        let g = grad.data()[s * b + bi];
                        if g == 0.0 {
                            continue;
                        }
                        let qrow = &q.data()[bi * h..(bi + 1) * h];
                        let mrow = &mut dm.data_mut()[(s * b + bi) * h..(s * b + bi + 1) * h];
                        for x in 0..h {
                            mrow[x] += g * qrow[x];
                        }
                    }
                }
            }
            if needs[1] {
                let dq = ensure(&mut acc[1], q.shape());
                for s in 0..s_len {
                    for bi in 0..b {
                        let g = grad.data()[s * b + bi];
                        if g == 0.0 {
                            continue;
                        }
                        let mrow = &mem.data()[(s * b + bi) * h..(s * b + bi + 1) * h];
                        let qrow = &mut dq.data_mut()[bi * h..(bi + 1) * h];
                        for x in 0..h {
                            qrow[x] += g * mrow[x];
                        }
                    }
                }
            }
        }
        OpKind::AttnContext { batch } => {
            let (w, mem) = (inputs[0], inputs[1]);
            let b = *batch;
            let h = mem.shape()[1];
            let s_len = w.shape()[0];
            if needs[0] {
                let dw = ensure(&mut acc[0], w.shape());
                for s in 0..s_len {
                    for bi in 0..b {
                        let mrow = &mem.data()[(s * b + bi) * h..(s * b + bi + 1) * h];
                        let grow = &grad.data()[bi * h..(bi + 1) * h];
                        let mut dot = 0.0;
                        for x in 0..h {
                            dot += mrow[x] * grow[x];
                        }
                        dw.data_mut()[s * b + bi] += dot;
                    }
                }
            }
            if needs[1] {
                let dm = ensure(&mut acc[1], mem.shape());
                for s in 0..s_len {
                    for bi in 0..b {
                        let f = w.data()[s * b + bi];
                        if f == 0.0 {
                            continue;
                        }
                        let grow = &grad.data()[bi * h..(bi + 1) * h];
                        let mrow = &mut dm.data_mut()[(s * b + bi) * h..(s * b + bi + 1) * h];
                        for x in 0..h {
                            mrow[x] += f * grow[x];
                        }
                    }
                }
            }
        }
        OpKind::CopyScatter { ids, width } => {
            if needs[0] {
                let (s_len, b) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                let dw = ensure(&mut acc[0], inputs[0].shape());
                for s in 0..s_len {
                    for bi in 0..b {
                        let id = ids[s * b + bi];
                        dw.data_mut()[s * b + bi] += grad.data()[bi * width + id];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy)]
enum SoftmaxRule {
    /// output y is softmax(x): dx = y ∘ (g − Σ g∘y)
    Softmax,
    /// output y is log_softmax(x): dx = g − exp(y) · Σ g
    LogSoftmax,
}

impl SoftmaxRule {
    fn reduce(self, y: &[f64], g: &[f64]) -> f64 {
        match self {
            SoftmaxRule::Softmax => y.iter().zip(g).map(|(a, b)| a * b).sum(),
            SoftmaxRule::LogSoftmax => g.iter().sum(),
        }
    }

    fn combine(self, y: f64, g: f64, reduced: f64) -> f64 {
        match self {
            SoftmaxRule::Softmax => y * (g - reduced),
            SoftmaxRule::LogSoftmax => g - y.exp() * reduced,
        }
    }
}

/// Shared row/column walker for the two softmax backward rules. `axis`
/// selects the normalized slices; the reduction is taken over each slice.
fn softmax_family_backward(dx: &mut Tensor, output: &Tensor, grad: &Tensor, axis: usize, rule: SoftmaxRule) {
    match output.rank() {
        1 => {
            let reduced = rule.reduce(output.data(), grad.data());
            for i in 0..output.len() {
                dx.data_mut()[i] += rule.combine(output.data()[i], grad.data()[i], reduced);
            }
        }
        2 => {
            let (r, c) = (output.shape()[0], output.shape()[1]);
            if axis == 1 {
                for i in 0..r {
                    let y = &output.data()[i * c..(i + 1) * c];
                    let g = &grad.data()[i * c..(i + 1) * c];
                    let reduced = rule.reduce(y, g);
                    for j in 0..c {
                        dx.data_mut()[i * c + j] += rule.combine(y[j], g[j], reduced);
                    }
                }
            } else {
                let mut ys = vec![0.0; r];
                let mut gs = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        ys[i] = output.data()[i * c + j];
                        gs[i] = grad.data()[i * c + j];
                    }
                    let reduced = rule.reduce(&ys, &gs);
                    for i in 0..r {
                        dx.data_mut()[i * c + j] += rule.combine(ys[i], gs[i], reduced);
                    }
                }
            }
        }
        _ => unreachable!("softmax rank checked in forward"),
    }
}
