//! Parameterized building blocks registered into a [`ParamStore`].

use rand::Rng;

use crate::{BufferId, Error, Graph, Mode, ParamId, ParamStore, Result, Tensor, Var};

/// Xavier/Glorot uniform initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, d_in, d_out))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// Concatenates `parts` along the last axis and projects with `proj`.
pub fn concat_project(g: &mut Graph, store: &ParamStore, parts: &[Var], proj: &Linear) -> Result<Var> {
    let joined = if parts.len() == 1 { parts[0] } else { g.concat(parts)? };
    proj.forward(g, store, joined)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Batch normalization over a 2-channel coordinate axis (the last axis).
///
/// Statistics are taken per channel over every other position, so a batch
/// of poses `[batch, joints, 2]` gets one mean/variance for x and one for y.
/// Running variance is tracked with the unbiased estimator.
#[derive(Debug, Clone)]
pub struct BatchNorm2ch {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2ch {
    pub const CHANNELS: usize = 2;

    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[2], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[2]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[2]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[2], 1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// In train mode the updated running statistics are deferred on the graph;
    /// apply them with [`ParamStore::apply_buffer_updates`].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        if g.shape(x).last() != Some(&Self::CHANNELS) {
            return Err(Error::shape("batchnorm_2ch", g.shape(x), &[Self::CHANNELS]));
        }
        if g.value(x).numel() == 0 {
            return Err(Error::EmptyBatch);
        }
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let count = g.value(x).numel() / Self::CHANNELS;
                let (y, mean, var) = g.batch_norm(x, gamma, beta, self.eps)?;
                let m = self.momentum;
                let rm = store.buffer(self.running_mean).data();
                let rv = store.buffer(self.running_var).data();
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                let new_mean = rm.iter().zip(&mean).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_var = rv.iter().zip(&var).map(|(r, b)| (1.0 - m) * r + m * b * unbias).collect();
                g.defer_buffer_update(self.running_mean, new_mean);
                g.defer_buffer_update(self.running_var, new_var);
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.buffer(self.running_mean).data().to_vec();
                let var = store.buffer(self.running_var).data().to_vec();
                g.channel_affine(x, &mean, &var, gamma, beta, self.eps)
            }
        }
    }
}

/// Multi-head scaled dot-product self-attention over `[batch, tokens, d]`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::HeadConfig { width: d, heads });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng)?,
            heads,
            d,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with_weights(g, store, x).map(|(y, _)| y)
    }

    /// Also returns the attention weights, shaped `[batch·heads, tokens, tokens]`.
    pub fn forward_with_weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d {
            return Err(Error::shape("msa", &s, &[self.d]));
        }
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.bmm(q, k, true)?;
        let dh = (self.d / self.heads) as f64;
        let scores = g.scale(scores, 1.0 / dh.sqrt());
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        let y = self.o.forward(g, store, ctx)?;
        Ok((y, attn))
    }

    pub fn num_scalars(&self) -> usize {
        self.q.num_scalars() + self.k.num_scalars() + self.v.num_scalars() + self.o.num_scalars()
    }
}

/// One encoder stage: self-attention, optionally wrapped as
/// `LayerNorm(x + MSA(x))` (post-norm). Without the wrapper it is bare MSA.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub msa: MultiHeadAttention,
    pub norm: Option<LayerNorm>,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        residual_ln: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let msa = MultiHeadAttention::new(store, &format!("{name}.msa"), d, heads, rng)?;
        let norm = if residual_ln {
            Some(LayerNorm::new(store, &format!("{name}.norm"), d)?)
        } else {
            None
        };
        Ok(Self { msa, norm })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.msa.forward(g, store, x)?;
        match &self.norm {
            Some(ln) => {
                let sum = g.add(x, y)?;
                ln.forward(g, store, sum)
            }
            None => Ok(y),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.msa.num_scalars() + self.norm.as_ref().map_or(0, |_| 2 * self.msa.d)
    }
}
