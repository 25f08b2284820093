use std::rc::Rc;

use super::counter;
use super::kernels::{gemm, Layout};
use super::{numel, permute_index, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Gather index meaning "write zero here".
pub const FILL: usize = usize::MAX;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// rhs repeats every `len` elements of the output.
    Suffix(usize),
    /// rhs offset for each output element.
    Map(Rc<[usize]>),
}

impl Broadcast {
    #[inline]
    fn offset(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::Map(map) => map[i],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    trans_b: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    kernel: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.cin
    }

    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let plen = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * plen..][..plen];
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        let dst = &mut row[(ky * self.kernel + kx) * self.cin..][..self.cin];
                        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                        } else {
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            dst.copy_from_slice(&image[src..src + self.cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], image_grad: &mut [T]) {
        let plen = self.patch_len();
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * plen..][..plen];
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = &row[(ky * self.kernel + kx) * self.cin..][..self.cin];
                        let dst = (iy as usize * self.w + ix as usize) * self.cin;
                        image_grad[dst..dst + self.cin].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, geom: MatMulGeom },
    Binary { a: Var, b: Var, kind: BinaryKind, bcast: Broadcast },
    Scale { x: Var, factor: T },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Gelu { x: Var },
    Conv2d { x: Var, weight: Var, bias: Var, geom: ConvGeom },
    Reshape { x: Var },
    Gather { x: Var, idx: Rc<[usize]> },
    Concat { parts: Vec<Var>, outer: usize },
    Mean { x: Var, outer: usize, len: usize, inner: usize },
    Sum { x: Var },
    SegmentMean { x: Var, segments: Rc<[usize]>, counts: Rc<[usize]>, width: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: T, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of executed operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one reverse sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of recorded operations whose adjoint was computed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients flow into it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        value.zero_grad();
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor { shape, data, grad: None, requires_grad: needs_grad };
        self.push(value, op, needs_grad)
    }

    /// Batched matrix product `a[..×m×k] · b[..×k×n]`.
    ///
    /// `b` is either a plain matrix shared by every batch entry or has the same
    /// leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` where `b` is `[..×n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || dim_err!("matmul: cannot multiply {sa:?} by {sb:?}{}", if trans_b { "ᵀ" } else { "" });
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_rhs = numel(lead_b) == 1;
        if !shared_rhs && lead_a != lead_b {
            return Err(mismatch());
        }
        let batch = numel(lead_a);
        let geom = MatMulGeom { batch, m, k, n, shared_rhs, trans_b };
        let mut out = vec![T::zero(); batch * m * n];
        matmul_forward(&geom, self.value(a).data(), self.value(b).data(), &mut out);
        counter::add_matmul(batch * m * k * n);
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        Ok(self.push_op(shape, out, Op::MatMul { a, b, geom }, &[a, b]))
    }

    /// `x · w + bias` over the last axis of `x`; `w` is `[in×out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    fn broadcast(&self, a: Var, b: Var, name: &str) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sb.len() > sa.len() {
            return Err(dim_err!("{name}: {sb:?} does not broadcast into {sa:?}"));
        }
        let pad = sa.len() - sb.len();
        let mut aligned = vec![1usize; pad];
        aligned.extend_from_slice(sb);
        if aligned.iter().zip(sa).any(|(&d, &o)| d != o && d != 1) {
            return Err(dim_err!("{name}: {sb:?} does not broadcast into {sa:?}"));
        }
        let first_real = aligned.iter().position(|&d| d != 1).unwrap_or(aligned.len());
        if aligned[first_real..] == sa[first_real..] {
            return Ok(Broadcast::Suffix(numel(sb)));
        }
        let rank = sa.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for d in (0..rank).rev() {
            strides[d] = if aligned[d] == 1 { 0 } else { s };
            s *= aligned[d];
        }
        let total = numel(sa);
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            map.push(offset);
            for d in (0..rank).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < sa[d] {
                    break;
                }
                offset -= strides[d] * sa[d];
                counter[d] = 0;
            }
        }
        Ok(Broadcast::Map(map.into()))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let bcast = self.broadcast(a, b, &format!("{kind:?}").to_lowercase())?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = xa
            .iter()
            .enumerate()
            .map(|(i, &va)| {
                let vb = xb[bcast.offset(i)];
                match kind {
                    BinaryKind::Add => va + vb,
                    BinaryKind::Sub => va - vb,
                    BinaryKind::Mul => va * vb,
                }
            })
            .collect();
        counter::add_unmodeled(out.len());
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Binary { a, b, kind, bcast }, &[a, b]))
    }

    /// Elementwise `a + b`; `b` broadcasts into the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * factor).collect();
        counter::add_unmodeled(out.len());
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale { x, factor }, &[x])
    }

    fn check_axis(&self, x: Var, axis: usize, name: &str) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(dim_err!("{name}: axis {axis} out of range for rank {rank}"));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len).map(|j| xs[base + j * inner]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xs[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                let inv = total.recip();
                for j in 0..len {
                    out[base + j * inner] *= inv;
                }
            }
        }
        counter::add_unmodeled(out.len());
        Ok(self.push_op(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| dim_err!("layer_norm: scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "layer_norm: channels {c} vs gamma {:?} / beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let eps = T::of(eps);
        let (xs, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let inv_c = T::of(1.0 / c as f64);
        let mut out = vec![T::zero(); xs.len()];
        let mut stats = Vec::with_capacity(xs.len() / c);
        for (row, dst) in xs.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = (var + eps).sqrt().recip();
            for j in 0..c {
                dst[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        counter::add_unmodeled(out.len());
        Ok(self.push_op(shape, out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    /// Exact GELU, `x·Φ(x)` with Φ computed through `erf`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        counter::add_unmodeled(out.len());
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Gelu { x }, &[x])
    }

    /// Cross-correlation over `[B×H×W×Cin]` with a `[K×K×Cin×Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(weight).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] || sb != [sw[3]] {
            return Err(dim_err!("conv2d: input {sx:?}, weight {sw:?}, bias {sb:?} are inconsistent"));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let (h, w, kernel) = (sx[1], sx[2], sw[0]);
        let extent = |n: usize| (n + 2 * padding).checked_sub(kernel).map(|v| v / stride + 1);
        let (ho, wo) = match (extent(h), extent(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d: {h}×{w} input with kernel {kernel}, stride {stride}, padding {padding} has no output"
                )))
            }
        };
        let geom = ConvGeom { batch: sx[0], h, w, cin: sx[3], kernel, cout: sw[3], stride, pad: padding, ho, wo };
        let (xs, ws, bs) = (self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let rows = ho * wo;
        let plen = geom.patch_len();
        let mut out = vec![T::zero(); geom.batch * rows * geom.cout];
        let mut cols = vec![T::zero(); rows * plen];
        for (img, dst) in xs.chunks_exact(h * w * geom.cin).zip(out.chunks_exact_mut(rows * geom.cout)) {
            geom.im2col(img, &mut cols);
            for row in dst.chunks_exact_mut(geom.cout) {
                row.copy_from_slice(bs);
            }
            gemm(rows, plen, geom.cout, &cols, Layout::Normal, ws, Layout::Normal, dst, true);
        }
        counter::add_conv(geom.batch * rows * plen * geom.cout);
        let shape = vec![geom.batch, ho, wo, geom.cout];
        Ok(self.push_op(shape, out, Op::Conv2d { x, weight, bias, geom }, &[x, weight, bias]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.contains(&0) {
            return Err(dim_err!("reshape: cannot view {:?} as {shape:?}", self.shape(x)));
        }
        let data = self.value(x).data().to_vec();
        Ok(self.push_op(shape.to_vec(), data, Op::Reshape { x }, &[x]))
    }

    /// `out[i] = x[idx[i]]`, or zero where `idx[i] == FILL`.
    pub fn gather(&mut self, x: Var, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != idx.len() {
            return Err(dim_err!("gather: {} indices cannot fill shape {shape:?}", idx.len()));
        }
        let xs = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i != FILL && i >= xs.len()) {
            return Err(Error::Index(format!("gather: index {bad} out of range for {} elements", xs.len())));
        }
        let out: Vec<T> = idx.iter().map(|&i| if i == FILL { T::zero() } else { xs[i] }).collect();
        counter::add_unmodeled(out.len());
        Ok(self.push_op(shape.to_vec(), out, Op::Gather { x, idx }, &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let idx = permute_index(&shape, axes)?;
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.gather(x, idx.into(), &out_shape)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "narrow")?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow: {start}..{} exceeds extent {} of axis {axis}", start + len, shape[axis]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, idx.into(), &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat: no inputs"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(dim_err!("concat: {s:?} does not match {base:?} off axis {axis}"));
            }
            total_axis += s[axis];
        }
        let outer = numel(&base[..axis]);
        let mut out = Vec::with_capacity(outer * total_axis * numel(&base[axis + 1..]));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.value(p).numel() / outer;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        counter::add_unmodeled(out.len());
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.push_op(shape, out, Op::Concat { parts: parts.to_vec(), outer }, parts))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean")?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let xs = self.value(x).data();
        let inv = T::of(1.0 / len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xs[(o * len + j) * inner..][..inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        counter::add_unmodeled(xs.len());
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push_op(out_shape, out, Op::Mean { x, outer, len, inner }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum::<T>();
        counter::add_unmodeled(self.value(x).numel());
        self.push_op(vec![1], vec![total], Op::Sum { x }, &[x])
    }

    /// Treats `x` as rows of `width` values and replaces every row with the
    /// mean of all rows sharing its segment id.
    pub fn segment_mean(&mut self, x: Var, segments: Rc<[usize]>, width: usize) -> Result<Var> {
        let xs = self.value(x).data();
        if width == 0 || xs.len() != segments.len() * width {
            return Err(dim_err!(
                "segment_mean: {} values do not form {} rows of width {width}",
                xs.len(),
                segments.len()
            ));
        }
        let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut counts = vec![0usize; nseg];
        let mut sums = vec![T::zero(); nseg * width];
        for (r, &s) in segments.iter().enumerate() {
            counts[s] += 1;
            sums[s * width..(s + 1) * width]
                .iter_mut()
                .zip(&xs[r * width..(r + 1) * width])
                .for_each(|(d, &v)| *d += v);
        }
        let mut out = Vec::with_capacity(xs.len());
        for &s in segments.iter() {
            let inv = T::of(1.0 / counts[s] as f64);
            out.extend(sums[s * width..(s + 1) * width].iter().map(|&v| v * inv));
        }
        counter::add_unmodeled(out.len());
        let shape = self.shape(x).to_vec();
        let counts: Rc<[usize]> = counts.into();
        Ok(self.push_op(shape, out, Op::SegmentMean { x, segments, counts, width }, &[x]))
    }

    /// Mean label-smoothed cross-entropy of `[B×K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(dim_err!("cross_entropy: logits {shape:?} vs {} targets", targets.len()));
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("cross_entropy: class {bad} out of range for {k} logits")));
        }
        let eps = T::of(smoothing);
        let off = eps / T::of(k as f64);
        let on = T::one() - eps + off;
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); xs.len()];
        let mut loss = T::zero();
        for (b, row) in xs.chunks_exact(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                let logp = row[j] - lse;
                probs[b * k + j] = logp.exp();
                let q = if j == targets[b] { on } else { off };
                loss -= q * logp;
            }
        }
        loss = loss / T::of(targets.len() as f64);
        counter::add_unmodeled(xs.len());
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing: eps, probs };
        Ok(self.push_op(vec![1], vec![loss], op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar objective, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
                self.backprop(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.numel()
    }

    fn backprop(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, geom } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let da = acc(grads, *a, av.len());
                    matmul_grad_lhs(geom, g, bv, da);
                }
                if self.needs(*b) {
                    let db = acc(grads, *b, bv.len());
                    matmul_grad_rhs(geom, av, g, db);
                }
            }
            Op::Binary { a, b, kind, bcast } => {
                if self.needs(*a) {
                    let da = acc(grads, *a, g.len());
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => da.iter_mut().zip(g).for_each(|(d, &v)| *d += v),
                        BinaryKind::Mul => {
                            let bv = self.value(*b).data();
                            for (i, (d, &v)) in da.iter_mut().zip(g).enumerate() {
                                *d += v * bv[bcast.offset(i)];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let len = self.len_of(*b);
                    let av = self.value(*a).data();
                    let db = acc(grads, *b, len);
                    for (i, &v) in g.iter().enumerate() {
                        let j = bcast.offset(i);
                        match kind {
                            BinaryKind::Add => db[j] += v,
                            BinaryKind::Sub => db[j] -= v,
                            BinaryKind::Mul => db[j] += v * av[i],
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v * *factor);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if !self.needs(*x) {
                    return;
                }
                let y = out.data();
                let dx = acc(grads, *x, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot = (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum::<T>();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xs = self.value(*x).data();
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let inv_c = T::of(1.0 / c as f64);
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for ((row, gr), &(mean, rstd)) in xs.chunks_exact(c).zip(g.chunks_exact(c)).zip(stats) {
                        for j in 0..c {
                            dg[j] += gr[j] * (row[j] - mean) * rstd;
                            db[j] += gr[j];
                        }
                    }
                    if self.needs(*gamma) {
                        acc(grads, *gamma, c).iter_mut().zip(&dg).for_each(|(d, &v)| *d += v);
                    }
                    if self.needs(*beta) {
                        acc(grads, *beta, c).iter_mut().zip(&db).for_each(|(d, &v)| *d += v);
                    }
                }
                if self.needs(*x) {
                    let dx = acc(grads, *x, xs.len());
                    let mut xhat = vec![T::zero(); c];
                    let mut dxhat = vec![T::zero(); c];
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let row = &xs[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        for j in 0..c {
                            xhat[j] = (row[j] - mean) * rstd;
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() * inv_c;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for j in 0..c {
                            dx[r * c + j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xs = self.value(*x).data();
                    let dx = acc(grads, *x, xs.len());
                    for ((d, &v), &gv) in dx.iter_mut().zip(xs).zip(g) {
                        *d += gv * gelu_grad(v);
                    }
                }
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let rows = geom.ho * geom.wo;
                let plen = geom.patch_len();
                let img_len = geom.h * geom.w * geom.cin;
                let out_len = rows * geom.cout;
                if self.needs(*bias) {
                    let db = acc(grads, *bias, geom.cout);
                    for row in g.chunks_exact(geom.cout) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                }
                let xs = self.value(*x).data();
                let ws = self.value(*weight).data();
                let mut cols = vec![T::zero(); rows * plen];
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); ws.len()];
                    for (img, gi) in xs.chunks_exact(img_len).zip(g.chunks_exact(out_len)) {
                        geom.im2col(img, &mut cols);
                        gemm(plen, rows, geom.cout, &cols, Layout::Transposed, gi, Layout::Normal, &mut dw, true);
                    }
                    acc(grads, *weight, ws.len()).iter_mut().zip(&dw).for_each(|(d, &v)| *d += v);
                }
                if self.needs(*x) {
                    let dx = acc(grads, *x, xs.len());
                    for (dimg, gi) in dx.chunks_exact_mut(img_len).zip(g.chunks_exact(out_len)) {
                        gemm(rows, geom.cout, plen, gi, Layout::Normal, ws, Layout::Transposed, &mut cols, false);
                        geom.col2im(&cols, dimg);
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    acc(grads, *x, g.len()).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let dx = acc(grads, *x, self.len_of(*x));
                    for (&i, &v) in idx.iter().zip(g) {
                        if i != FILL {
                            dx[i] += v;
                        }
                    }
                }
            }
            Op::Concat { parts, outer } => {
                let mut offset = 0;
                let total = g.len() / outer;
                for &p in parts {
                    let chunk = self.len_of(p) / outer;
                    if self.needs(p) {
                        let dp = acc(grads, p, chunk * outer);
                        for o in 0..*outer {
                            dp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[o * total + offset..o * total + offset + chunk])
                                .for_each(|(d, &v)| *d += v);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Mean { x, outer, len, inner } => {
                if self.needs(*x) {
                    let inv = T::of(1.0 / *len as f64);
                    let dx = acc(grads, *x, outer * len * inner);
                    for o in 0..*outer {
                        for j in 0..*len {
                            dx[(o * len + j) * inner..][..*inner]
                                .iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(d, &v)| *d += v * inv);
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let len = self.len_of(*x);
                    acc(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SegmentMean { x, segments, counts, width } => {
                if self.needs(*x) {
                    let w = *width;
                    let mut sums = vec![T::zero(); counts.len() * w];
                    for (r, &s) in segments.iter().enumerate() {
                        sums[s * w..(s + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, &v)| *d += v);
                    }
                    let dx = acc(grads, *x, g.len());
                    for (r, &s) in segments.iter().enumerate() {
                        let inv = T::of(1.0 / counts[s] as f64);
                        dx[r * w..(r + 1) * w].iter_mut().zip(&sums[s * w..(s + 1) * w]).for_each(|(d, &v)| *d += v * inv);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                if self.needs(*logits) {
                    let k = probs.len() / targets.len();
                    let off = *smoothing / T::of(k as f64);
                    let on = T::one() - *smoothing + off;
                    let scale = g[0] / T::of(targets.len() as f64);
                    let dx = acc(grads, *logits, probs.len());
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let q = if j == t { on } else { off };
                            dx[b * k + j] += (probs[b * k + j] - q) * scale;
                        }
                    }
                }
            }
        }
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn rhs_layout(trans_b: bool) -> Layout {
    if trans_b {
        Layout::Transposed
    } else {
        Layout::Normal
    }
}

fn matmul_forward<T: Scalar>(geom: &MatMulGeom, a: &[T], b: &[T], out: &mut [T]) {
    let MatMulGeom { batch, m, k, n, shared_rhs, trans_b } = *geom;
    if shared_rhs {
        gemm(batch * m, k, n, a, Layout::Normal, b, rhs_layout(trans_b), out, false);
        return;
    }
    for ((ab, bb), ob) in a.chunks_exact(m * k).zip(b.chunks_exact(k * n)).zip(out.chunks_exact_mut(m * n)) {
        gemm(m, k, n, ab, Layout::Normal, bb, rhs_layout(trans_b), ob, false);
    }
}

/// dA += dC · Bᵀ (or dC · B when B was used transposed).
fn matmul_grad_lhs<T: Scalar>(geom: &MatMulGeom, g: &[T], b: &[T], da: &mut [T]) {
    let MatMulGeom { batch, m, k, n, shared_rhs, trans_b } = *geom;
    let layout = if trans_b { Layout::Normal } else { Layout::Transposed };
    if shared_rhs {
        gemm(batch * m, n, k, g, Layout::Normal, b, layout, da, true);
        return;
    }
    for ((gb, bb), db) in g.chunks_exact(m * n).zip(b.chunks_exact(k * n)).zip(da.chunks_exact_mut(m * k)) {
        gemm(m, n, k, gb, Layout::Normal, bb, layout, db, true);
    }
}

/// dB += Aᵀ · dC, stored transposed when B was used transposed.
fn matmul_grad_rhs<T: Scalar>(geom: &MatMulGeom, a: &[T], g: &[T], db: &mut [T]) {
    let MatMulGeom { batch, m, k, n, shared_rhs, trans_b } = *geom;
    let rows = if shared_rhs { batch * m } else { m };
    let step = |ab: &[T], gb: &[T], dbb: &mut [T]| {
        if trans_b {
            gemm(n, rows, k, gb, Layout::Transposed, ab, Layout::Normal, dbb, true);
        } else {
            gemm(k, rows, n, ab, Layout::Transposed, gb, Layout::Normal, dbb, true);
        }
    };
    if shared_rhs {
        step(a, g, db);
        return;
    }
    for ((ab, gb), dbb) in a.chunks_exact(m * k).zip(g.chunks_exact(m * n)).zip(db.chunks_exact_mut(k * n)) {
        step(ab, gb, dbb);
    }
}
