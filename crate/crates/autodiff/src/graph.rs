use crate::params::{BufferId, BufferUpdate, ParamId, ParamStore};
use crate::{Error, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { x: Var, w: Var, rows: usize, k: usize, n: usize },
    AddTrailing { x: Var, y: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Softmax(Var),
    SplitHeads { x: Var, b: usize, t: usize, h: usize, dh: usize },
    MergeHeads { x: Var, b: usize, t: usize, h: usize, dh: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ChannelAffine { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    MeanTokens { x: Var, b: usize, t: usize, d: usize },
    PairwiseSqDist { x: Var, b: usize, d: usize },
    Gather { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

/// A single-use computation record.
///
/// Nodes are appended in evaluation order, so reverse creation order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    bound: Vec<(ParamId, Var)>,
    buffer_updates: Vec<BufferUpdate>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + k.saturating_sub(1) * csa + usize::from(k > 0));
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b` and `c` (checked
    // above in debug builds); `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.needs_grad.push(needs_grad);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (readable via [`Graph::grad`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter into the graph. Binding the same id twice
    /// returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone());
        self.bound.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn defer_buffer_update(&mut self, id: BufferId, value: Vec<f64>) {
        self.buffer_updates.push(BufferUpdate { id, value });
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate> {
        std::mem::take(&mut self.buffer_updates)
    }

    /// `x[..., k] · w[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = leading(&xs);
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.values[x.0].data(),
            (k, 1),
            self.values[w.0].data(),
            (n, 1),
            &mut out,
            0.0,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { x, w, rows, k, n }, ng))
    }

    /// Adds `y` broadcast over the leading axes of `x`; `y`'s shape must be a
    /// suffix of `x`'s shape (bias vectors, positional tables).
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_trailing", xs, ys));
        }
        let yd = self.values[y.0].data();
        let mut out = self.values[x.0].data().to_vec();
        for chunk in out.chunks_mut(yd.len()) {
            chunk.iter_mut().zip(yd).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(xs, out)?;
        let ng = self.ng(&[x, y]);
        Ok(self.push(t, Op::AddTrailing { x, y }, ng))
    }

    /// Linear projection over the last axis with an optional bias.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_trailing(y, b),
            None => Ok(y),
        }
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Ok((Tensor::new(self.shape(a), out)?, self.ng(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = &self.values[x.0];
        let data = v.data().iter().map(|&p| f(p)).collect();
        Tensor::new(v.shape(), data).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.unary(x, |p| p * s);
        let ng = self.ng(&[x]);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.unary(x, |p| p + s);
        let ng = self.ng(&[x]);
        self.push(t, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |p| p.max(0.0));
        let ng = self.ng(&[x]);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.values[x.0].clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Concatenation along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let lead_shape = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead_shape.len() + 1 || s[..s.len() - 1] != lead_shape[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead_shape.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead_shape;
        shape.push(total);
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            ng,
        ))
    }

    /// Batched matrix product `a[b, m, k] · b[b, k, n]`, or `a · bᵀ` with
    /// `b[b, n, k]` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::shape("bmm", &as_, &bs));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if transpose_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(Error::shape("bmm", &as_, &bs));
        }
        let mut out = vec![0.0; batch * m * n];
        let ad = self.values[a.0].data();
        let bd = self.values[b.0].data();
        let bstride = if transpose_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                (k, 1),
                &bd[i * k * n..(i + 1) * k * n],
                bstride,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            row.iter_mut().for_each(|e| *e /= sum);
        }
        let t = Tensor::new(v.shape(), out).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(t, Op::Softmax(x), ng)
    }

    /// `[b, t, h·dh] → [b·h, t, dh]`.
    pub fn split_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("split_heads", &s, &[h]));
        }
        if h == 0 || s[2] % h != 0 {
            return Err(Error::HeadConfig { width: s[2], heads: h });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / h;
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let from = (bi * t + ti) * d + hi * dh;
                    let to = ((bi * h + hi) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[b * h, t, dh], out)?, Op::SplitHeads { x, b, t, h, dh }, ng))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, h: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || h == 0 || s[0] % h != 0 {
            return Err(Error::shape("merge_heads", &s, &[h]));
        }
        let (b, t, dh) = (s[0] / h, s[1], s[2]);
        let d = h * dh;
        let src = self.values[x.0].data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for hi in 0..h {
                    let to = (bi * t + ti) * d + hi * dh;
                    let from = ((bi * h + hi) * t + ti) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[b, t, d], out)?, Op::MergeHeads { x, b, t, h, dh }, ng))
    }

    /// Normalization over the last axis with learnable `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.values[x.0].last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Training-mode batch normalization with channels on the last axis.
    /// Returns the output plus the per-channel batch mean and biased variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let c = self.values[x.0].last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.values[x.0].data();
        let rows = xv.len() / c;
        if rows == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] += xv[r * c + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            for j in 0..c {
                let dlt = xv[r * c + j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            for j in 0..c {
                let xh = (xv[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + bt[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        );
        Ok((v, mean, var))
    }

    /// Eval-mode batch normalization: fixed per-channel statistics, learnable affine.
    pub fn channel_affine(&mut self, x: Var, mean: &[f64], var: &[f64], gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.values[x.0].last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let j = i % c;
            *xh = (v - mean[j]) * inv_std[j];
            *o = *xh * g[j] + bt[j];
        }
        let t = Tensor::new(self.shape(x), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise `x / ‖x‖₂` over the last axis.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = &self.values[x.0];
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            if !(norm >= 1e-12) {
                return Err(Error::DegenerateEmbedding { norm });
            }
            row.iter_mut().for_each(|e| *e /= norm);
            norms.push(norm);
        }
        let t = Tensor::new(v.shape(), out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::L2Normalize { x, norms }, ng))
    }

    /// `[b, t, d] → [b, d]`, averaging over the token axis.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::shape("mean_tokens", &s, &[]));
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let src = self.values[x.0].data();
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &src[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                out[bi * d..(bi + 1) * d].iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[b, d], out)?, Op::MeanTokens { x, b, t, d }, ng))
    }

    /// Matrix of squared Euclidean distances between the rows of `x[b, d]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("pairwise_sq_dist", &s, &[]));
        }
        let (b, d) = (s[0], s[1]);
        let xv = self.values[x.0].data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let dist: f64 = xv[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xv[j * d..(j + 1) * d])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                out[i * b + j] = dist;
                out[j * b + i] = dist;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(&[b, b], out)?, Op::PairwiseSqDist { x, b, d }, ng))
    }

    /// Picks flat-indexed elements of `x` into a 1-d tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.values[x.0].data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::shape("gather", self.shape(x), &[bad]));
        }
        let out: Vec<f64> = idx.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::new(&[idx.len()], out)?,
            Op::Gather { x, idx: idx.to_vec() },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.values[x.0].data();
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Reverse sweep from a scalar node. Gradients accumulate, so calling
    /// this twice on one graph doubles every leaf gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        add_into(&mut self.grads, &self.needs_grad, loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    /// Adds leaf gradients of bound parameters into the store's accumulators.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bound {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, dy: &[f64]) {
        let vals = &self.values;
        let grads = &mut self.grads;
        let needs = &self.needs_grad;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { x, w, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if let Some(gx) = slot(grads, needs, *x, rows * k) {
                    // dx = dy · wᵀ
                    gemm(rows, n, k, dy, (n, 1), vals[w.0].data(), (1, n), gx, 1.0);
                }
                if let Some(gw) = slot(grads, needs, *w, k * n) {
                    // dw = xᵀ · dy
                    gemm(k, rows, n, vals[x.0].data(), (1, k), dy, (n, 1), gw, 1.0);
                }
            }
            Op::AddTrailing { x, y } => {
                add_into(grads, needs, *x, dy);
                let len = vals[y.0].numel();
                if let Some(gy) = slot(grads, needs, *y, len) {
                    for chunk in dy.chunks(len) {
                        gy.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grads, needs, *a, dy);
                add_into(grads, needs, *b, dy);
            }
            Op::Sub(a, b) => {
                add_into(grads, needs, *a, dy);
                if let Some(gb) = slot(grads, needs, *b, dy.len()) {
                    gb.iter_mut().zip(dy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                if let Some(ga) = slot(grads, needs, *a, dy.len()) {
                    for ((g, d), q) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * q;
                    }
                }
                if let Some(gb) = slot(grads, needs, *b, dy.len()) {
                    for ((g, d), p) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * p;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => add_into(grads, needs, *x, dy),
            Op::Relu(x) => {
                let xv = vals[x.0].data();
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    for ((g, d), v) in gx.iter_mut().zip(dy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = dy.len() / total.max(1);
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = slot(grads, needs, *p, rows * w) {
                        for r in 0..rows {
                            let src = &dy[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(g, d)| *g += d);
                        }
                    }
                    offset += w;
                }
            }
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (batch, m, k, n, tb) = (*batch, *m, *k, *n, *transpose_b);
                if let Some(ga) = slot(grads, needs, *a, batch * m * k) {
                    let bd = vals[b.0].data();
                    // da = dy · bᵀ (or dy · b when b was transposed)
                    let bs = if tb { (k, 1) } else { (1, n) };
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &dy[i * m * n..(i + 1) * m * n],
                            (n, 1),
                            &bd[i * k * n..(i + 1) * k * n],
                            bs,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = slot(grads, needs, *b, batch * k * n) {
                    let ad = vals[a.0].data();
                    for i in 0..batch {
                        let a_i = &ad[i * m * k..(i + 1) * m * k];
                        let dy_i = &dy[i * m * n..(i + 1) * m * n];
                        let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            // db[n, k] = dyᵀ · a
                            gemm(n, m, k, dy_i, (1, n), a_i, (k, 1), gb_i, 1.0);
                        } else {
                            // db[k, n] = aᵀ · dy
                            gemm(k, m, n, a_i, (1, k), dy_i, (n, 1), gb_i, 1.0);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = vals[i].data();
                let d = vals[i].last_dim();
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    for ((gr, yr), dr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                }
            }
            Op::SplitHeads { x, b, t, h, dh } => {
                let (b, t, h, dh) = (*b, *t, *h, *dh);
                let d = h * dh;
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let to = (bi * t + ti) * d + hi * dh;
                                let from = ((bi * h + hi) * t + ti) * dh;
                                gx[to..to + dh].iter_mut().zip(&dy[from..from + dh]).for_each(|(g, v)| *g += v);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, b, t, h, dh } => {
                let (b, t, h, dh) = (*b, *t, *h, *dh);
                let d = h * dh;
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for hi in 0..h {
                                let from = (bi * t + ti) * d + hi * dh;
                                let to = ((bi * h + hi) * t + ti) * dh;
                                gx[to..to + dh].iter_mut().zip(&dy[from..from + dh]).for_each(|(g, v)| *g += v);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = vals[x.0].last_dim();
                let g = vals[gamma.0].data();
                if let Some(gg) = slot(grads, needs, *gamma, d) {
                    for (dr, xr) in dy.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dr[j] * xr[j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, needs, *beta, d) {
                    for dr in dy.chunks(d) {
                        gb.iter_mut().zip(dr).for_each(|(a, v)| *a += v);
                    }
                }
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (dr, xr)) in dy.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = dr[j] * g[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(p, q)| p * q).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += scale * (d as f64 * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = vals[x.0].last_dim();
                let rows = dy.len() / c;
                let g = vals[gamma.0].data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        sum_dy[j] += dy[r * c + j];
                        sum_dy_xhat[j] += dy[r * c + j] * xhat[r * c + j];
                    }
                }
                if let Some(gg) = slot(grads, needs, *gamma, c) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, v)| *a += v);
                }
                if let Some(gb) = slot(grads, needs, *beta, c) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(a, v)| *a += v);
                }
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    let m = rows as f64;
                    for r in 0..rows {
                        for j in 0..c {
                            let k = r * c + j;
                            gx[k] += g[j] * inv_std[j] / m * (m * dy[k] - sum_dy[j] - xhat[k] * sum_dy_xhat[j]);
                        }
                    }
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = vals[x.0].last_dim();
                let g = vals[gamma.0].data();
                if let Some(gg) = slot(grads, needs, *gamma, c) {
                    for (k, (d, xh)) in dy.iter().zip(xhat).enumerate() {
                        gg[k % c] += d * xh;
                    }
                }
                if let Some(gb) = slot(grads, needs, *beta, c) {
                    for (k, d) in dy.iter().enumerate() {
                        gb[k % c] += d;
                    }
                }
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    for (k, d) in dy.iter().enumerate() {
                        gx[k] += d * g[k % c] * inv_std[k % c];
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = vals[i].data();
                let d = vals[i].last_dim();
                if let Some(gx) = slot(grads, needs, *x, dy.len()) {
                    for (r, ((gr, yr), dr)) in gx.chunks_mut(d).zip(y.chunks(d)).zip(dy.chunks(d)).enumerate() {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            gr[j] += (dr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::MeanTokens { x, b, t, d } => {
                let (b, t, d) = (*b, *t, *d);
                if let Some(gx) = slot(grads, needs, *x, b * t * d) {
                    let inv = 1.0 / t as f64;
                    for bi in 0..b {
                        for ti in 0..t {
                            let row = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            row.iter_mut().zip(&dy[bi * d..(bi + 1) * d]).for_each(|(g, v)| *g += v * inv);
                        }
                    }
                }
            }
            Op::PairwiseSqDist { x, b, d } => {
                let (b, d) = (*b, *d);
                let xv = vals[x.0].data();
                if let Some(gx) = slot(grads, needs, *x, b * d) {
                    for p in 0..b {
                        for q in 0..b {
                            if p == q {
                                continue;
                            }
                            let coef = 2.0 * (dy[p * b + q] + dy[q * b + p]);
                            if coef == 0.0 {
                                continue;
                            }
                            for j in 0..d {
                                gx[p * d + j] += coef * (xv[p * d + j] - xv[q * d + j]);
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let len = vals[x.0].numel();
                if let Some(gx) = slot(grads, needs, *x, len) {
                    for (&k, d) in idx.iter().zip(dy) {
                        gx[k] += d;
                    }
                }
            }
            Op::Sum(x) => {
                let len = vals[x.0].numel();
                if let Some(gx) = slot(grads, needs, *x, len) {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean(x) => {
                let len = vals[x.0].numel();
                if let Some(gx) = slot(grads, needs, *x, len) {
                    let v = dy[0] / len as f64;
                    gx.iter_mut().for_each(|g| *g += v);
                }
            }
        }
    }
}

/// Gradient buffer of `v`, zero-allocated on first touch; `None` when `v`
/// does not participate in differentiation.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], needs: &[bool], v: Var, len: usize) -> Option<&'a mut Vec<f64>> {
    if !needs[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(grads: &mut [Option<Vec<f64>>], needs: &[bool], v: Var, dy: &[f64]) {
    if let Some(g) = slot(grads, needs, v, dy.len()) {
        g.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
    }
}
