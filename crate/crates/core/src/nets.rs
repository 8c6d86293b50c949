//! Network building blocks: MLP encoder and projector, a pre-norm attention
//! block, and exponential-moving-average maintenance for target copies.
//!
//! Blocks hold no tensors themselves; parameters live in a [`ParamStore`]
//! under the block's prefix and are bound per graph through a [`Lease`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{concat_last, Var};
use crate::params::{Lease, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Gelu,
}

impl Activation {
    fn apply(&self, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub obs_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
}

impl EncoderConfig {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            hidden_dims: vec![64, 64],
            repr_dim: 64,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.obs_dim];
        d.extend_from_slice(&self.hidden_dims);
        d.push(self.repr_dim);
        d
    }
}

#[derive(Clone, Debug)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl ProjectorConfig {
    pub fn new(repr_dim: usize) -> Self {
        Self {
            in_dim: repr_dim,
            hidden_dim: 512,
            out_dim: repr_dim,
        }
    }
}

/// Register one linear layer: weight `[fan_in, fan_out]` drawn from
/// uniform(−s, s) with s = 1/sqrt(fan_in), bias zero.
pub fn init_linear(
    store: &mut ParamStore,
    w_name: &str,
    b_name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidArg {
            op: "init_linear",
            why: format!("zero dimension in {fan_in}x{fan_out} layer"),
        });
    }
    let s = 1.0 / (fan_in as f64).sqrt();
    store.insert(w_name, Tensor::uniform(&[fan_in, fan_out], -s, s, rng))?;
    store.insert(b_name, Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn linear(lease: &Lease, w_name: &str, b_name: &str, x: &Var) -> Result<Var> {
    let w = lease.var(w_name)?;
    let b = lease.var(b_name)?;
    x.matmul(w)?.add(b)
}

/// Fully connected stack applied row-wise; rows are independent, so agent
/// permutations commute with the forward pass bit-exactly.
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    hidden: Activation,
    output: Activation,
}

impl Mlp {
    /// Register parameters under `prefix` and return the block descriptor.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArg {
                op: "mlp_init",
                why: format!("need at least input and output dims, got {dims:?}"),
            });
        }
        for (i, pair) in dims.windows(2).enumerate() {
            init_linear(
                store,
                &format!("{prefix}.w{i}"),
                &format!("{prefix}.b{i}"),
                pair[0],
                pair[1],
                rng,
            )?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            hidden,
            output,
        })
    }

    pub fn encoder(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init(store, prefix, &cfg.dims(), Activation::Gelu, Activation::Gelu, rng)
    }

    pub fn projector(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ProjectorConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init(
            store,
            prefix,
            &[cfg.in_dim, cfg.hidden_dim, cfg.out_dim],
            Activation::Gelu,
            Activation::Linear,
            rng,
        )
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// `x: [rows, in_dim] -> [rows, out_dim]`.
    pub fn forward(&self, lease: &Lease, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dims[0] {
            return Err(Error::InvalidShape {
                op: "mlp_forward",
                shape,
                why: format!("expected [rows, {}]", self.dims[0]),
            });
        }
        let layers = self.dims.len() - 1;
        let mut h = x.clone();
        for i in 0..layers {
            h = linear(
                lease,
                &format!("{}.w{i}", self.prefix),
                &format!("{}.b{i}", self.prefix),
                &h,
            )?;
            let act = if i + 1 == layers { self.output } else { self.hidden };
            h = act.apply(h)?;
        }
        Ok(h)
    }
}

/// Pre-norm residual attention block:
/// `h = x + proj(attend(LN(x)))`, `out = h + ffn(LN(h))`,
/// with an inner feed-forward width of 4x the token dimension.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    prefix: String,
    d: usize,
    heads: usize,
}

impl AttnBlock {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArg {
                op: "attn_block",
                why: format!("token dim {d} not divisible by {heads} heads"),
            });
        }
        store.insert(&format!("{prefix}.ln1.g"), Tensor::full(&[d], 1.0))?;
        store.insert(&format!("{prefix}.ln1.b"), Tensor::zeros(&[d]))?;
        for name in ["wq", "wk", "wv"] {
            init_linear(
                store,
                &format!("{prefix}.{name}"),
                &format!("{prefix}.{}", name.replace('w', "b")),
                d,
                d,
                rng,
            )?;
        }
        // Both residual branches start at zero, so a fresh block is the
        // identity map. With a random output projection the attention path
        // leaks every token into every other position from step one, which
        // biases contrastive retrieval toward distractor keys before any
        // training has happened. Gradients reach these weights directly, so
        // they move on the first step and unlock the rest of the block.
        store.insert(&format!("{prefix}.wo"), Tensor::zeros(&[d, d]))?;
        store.insert(&format!("{prefix}.bo"), Tensor::zeros(&[d]))?;
        store.insert(&format!("{prefix}.ln2.g"), Tensor::full(&[d], 1.0))?;
        store.insert(&format!("{prefix}.ln2.b"), Tensor::zeros(&[d]))?;
        init_linear(
            store,
            &format!("{prefix}.ffn.w0"),
            &format!("{prefix}.ffn.b0"),
            d,
            4 * d,
            rng,
        )?;
        store.insert(&format!("{prefix}.ffn.w1"), Tensor::zeros(&[4 * d, d]))?;
        store.insert(&format!("{prefix}.ffn.b1"), Tensor::zeros(&[d]))?;
        Ok(Self {
            prefix: prefix.to_string(),
            d,
            heads,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.d
    }

    fn qkv(&self, lease: &Lease, x: &Var) -> Result<(Var, Var, Var)> {
        let p = &self.prefix;
        let xn = x.layer_norm(
            lease.var(&format!("{p}.ln1.g"))?,
            lease.var(&format!("{p}.ln1.b"))?,
        )?;
        let q = linear(lease, &format!("{p}.wq"), &format!("{p}.bq"), &xn)?;
        let k = linear(lease, &format!("{p}.wk"), &format!("{p}.bk"), &xn)?;
        let v = linear(lease, &format!("{p}.wv"), &format!("{p}.bv"), &xn)?;
        Ok((q, k, v))
    }

    /// `x: [n_tokens, d] -> [n_tokens, d]`.
    pub fn forward(&self, lease: &Lease, x: &Var) -> Result<Var> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(Error::InvalidShape {
                op: "attn_block",
                shape,
                why: format!("expected [tokens, {}]", self.d),
            });
        }
        let p = &self.prefix;
        let (q, k, v) = self.qkv(lease, x)?;
        let hd = self.d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut mixed: Vec<Var> = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_last(h * hd, hd)?;
            let kh = k.slice_last(h * hd, hd)?;
            let vh = v.slice_last(h * hd, hd)?;
            let scores = qh.matmul(&kh.transpose()?)?.smul(scale)?;
            let attn = scores.softmax_last()?;
            mixed.push(attn.attn_mix(&vh)?);
        }
        let refs: Vec<&Var> = mixed.iter().collect();
        let cat = if refs.len() == 1 {
            mixed[0].clone()
        } else {
            concat_last(&refs)?
        };
        let proj = linear(lease, &format!("{p}.wo"), &format!("{p}.bo"), &cat)?;
        let h1 = proj.add(x)?;

        let hn = h1.layer_norm(
            lease.var(&format!("{p}.ln2.g"))?,
            lease.var(&format!("{p}.ln2.b"))?,
        )?;
        let f = linear(lease, &format!("{p}.ffn.w0"), &format!("{p}.ffn.b0"), &hn)?
            .gelu()?;
        let f = linear(lease, &format!("{p}.ffn.w1"), &format!("{p}.ffn.b1"), &f)?;
        f.add(&h1)
    }

    /// Per-head attention weight matrices for inspection, each `[n, n]`.
    pub fn attention_weights(&self, lease: &Lease, x: &Var) -> Result<Vec<Tensor>> {
        let (q, k, _v) = self.qkv(lease, x)?;
        let hd = self.d / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        (0..self.heads)
            .map(|h| {
                let qh = q.slice_last(h * hd, hd)?;
                let kh = k.slice_last(h * hd, hd)?;
                let scores = qh.matmul(&kh.transpose()?)?.smul(scale)?;
                Ok(scores.softmax_last()?.value())
            })
            .collect()
    }
}

/// In-place exponential moving average: every target entry becomes
/// `tau * target + (1 - tau) * online`. Stores must mirror each other.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidArg {
            op: "ema_update",
            why: format!("tau {tau} outside [0, 1)"),
        });
    }
    target.mirrors(online)?;
    let names: Vec<String> = target.names().map(String::from).collect();
    for name in names {
        let o = online.get(&name)?.clone();
        target.update(&name, |t| {
            for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = tau * *tv + (1.0 - tau) * ov;
            }
        })?;
    }
    Ok(())
}

/// Replace the zero-initialized residual projections of every attention
/// block under `prefix` with fan-in uniform draws. Tests that exercise
/// cross-token mixing call this so a fresh block does not hide behind its
/// identity initialization.
#[cfg(test)]
pub(crate) fn randomize_residual_projections(
    store: &mut ParamStore,
    prefix: &str,
    rng: &mut impl Rng,
) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && (n.ends_with(".wo") || n.ends_with(".ffn.w1")))
        .map(String::from)
        .collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let s = 1.0 / (shape[0] as f64).sqrt();
        store
            .set(&name, Tensor::uniform(&shape, -s, s, rng))
            .unwrap();
    }
}
