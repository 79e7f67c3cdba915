//! Multi-head dot-product attention and the residual self/cross-attention
//! stacks built from it. No positional encodings are added anywhere, so a
//! stack is equivariant in its queries and invariant in its context.

use lasernv_tensor::{Real, Tensor, Var};

use crate::nn::{Builder, Init, LayerNorm, Linear};
use crate::{Error, Result};

/// Added to the logits of masked keys.
pub const MASK_LOGIT: f64 = -1e9;

/// Boolean attention mask, `true` = attend. Shape `[batch, rows, keys]`,
/// where `rows` is either the query count or 1 (shared by all queries).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub batch: usize,
    pub rows: usize,
    pub keys: usize,
    pub allow: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, rows: usize, keys: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != batch * rows * keys {
            return Err(Error::domain("attention mask length does not match its shape"));
        }
        let mask = Self { batch, rows, keys, allow };
        mask.validate()?;
        Ok(mask)
    }

    /// Every query row must see at least one key.
    pub fn validate(&self) -> Result<()> {
        if self.keys == 0 {
            return Err(Error::domain("attention over an empty key set"));
        }
        for (i, row) in self.allow.chunks(self.keys).enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(Error::domain(format!("attention mask row {i} hides every key")));
            }
        }
        Ok(())
    }

    fn bias<T: Real>(&self) -> Tensor<T> {
        let neg = T::of(MASK_LOGIT);
        Tensor::new(
            vec![self.batch, 1, self.rows, self.keys],
            self.allow.iter().map(|&a| if a { T::zero() } else { neg }).collect(),
        )
    }
}

/// Projections of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MhaParams {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, ctx_dim: usize, heads: usize, out_init: Init) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model dim {dim} not divisible by {heads} heads");
        let mut s = b.sub(name);
        Self {
            heads,
            dim,
            q: Linear::new(&mut s, "q", dim, dim, Init::Fan(1.0), false),
            k: Linear::new(&mut s, "k", ctx_dim, dim, Init::Fan(1.0), false),
            v: Linear::new(&mut s, "v", ctx_dim, dim, Init::Fan(1.0), false),
            o: Linear::new(&mut s, "o", dim, dim, out_init, true),
        }
    }
}

/// Multi-head attention of `queries [B, Nq, dim]` over `keys`/`values [B, Nk, ctx_dim]`.
pub fn mha<'t, T: Real>(
    queries: Var<'t, T>,
    keys: Var<'t, T>,
    values: Var<'t, T>,
    mask: Option<&Mask>,
    p: &MhaParams,
) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (queries.shape(), keys.shape(), values.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::domain("attention inputs must be [batch, set, dim]"));
    }
    if ks[..2] != vs[..2] {
        return Err(Error::domain(format!("keys {ks:?} and values {vs:?} differ in size")));
    }
    if ks[1] == 0 {
        return Err(Error::domain("attention over an empty key set"));
    }
    let (b, nq, nk) = (qs[0], qs[1], ks[1]);
    if ks[0] != b {
        return Err(Error::domain(format!("query batch {b} != key batch {}", ks[0])));
    }
    if let Some(m) = mask {
        if m.batch != b || m.keys != nk || (m.rows != nq && m.rows != 1) {
            return Err(Error::domain(format!(
                "mask [{}, {}, {}] does not fit queries {qs:?} keys {ks:?}",
                m.batch, m.rows, m.keys
            )));
        }
        m.validate()?;
    }
    let (h, dh) = (p.heads, p.dim / p.heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let tape = queries.tape();
    let q = p.q.forward(queries).scale(scale);
    let k = p.k.forward(keys);
    let v = p.v.forward(values);

    let out = if nq == 1 {
        // One query per batch entry (per-point attention): broadcast products
        // avoid a tiny matrix product per batch entry and head.
        let q4 = q.reshape(vec![b, 1, h, dh]);
        let k4 = k.reshape(vec![b, nk, h, dh]);
        let v4 = v.reshape(vec![b, nk, h, dh]);
        let mut logits = q4.mul(k4).sum_axis(3, false).permute(&[0, 2, 1]); // [b, h, nk]
        if let Some(m) = mask {
            logits = logits.add(tape.constant(m.bias::<T>().reshape(vec![b, 1, nk])));
        }
        let w = logits.softmax().permute(&[0, 2, 1]).reshape(vec![b, nk, h, 1]);
        w.mul(v4).sum_axis(1, false).reshape(vec![b, 1, p.dim])
    } else {
        let split = |x: Var<'t, T>, n: usize| x.reshape(vec![b, n, h, dh]).permute(&[0, 2, 1, 3]).reshape(vec![b * h, n, dh]);
        let (q3, k3, v3) = (split(q, nq), split(k, nk), split(v, nk));
        let mut logits = q3.bmm(k3, false, true).reshape(vec![b, h, nq, nk]);
        if let Some(m) = mask {
            logits = logits.add(tape.constant(m.bias::<T>()));
        }
        let w = logits.softmax().reshape(vec![b * h, nq, nk]);
        w.bmm(v3, false, false).reshape(vec![b, h, nq, dh]).permute(&[0, 2, 1, 3]).reshape(vec![b, nq, p.dim])
    };
    Ok(p.o.forward(out))
}

/// Pre-normalization residual block: attention then a GELU feedforward of width `2 * dim`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_ctx: Option<LayerNorm>,
    pub mha: MhaParams,
    pub norm_ff: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl AttentionBlock {
    fn new(b: &mut Builder<'_>, name: &str, dim: usize, ctx_dim: Option<usize>, heads: usize, out_init: Init) -> Self {
        let mut s = b.sub(name);
        Self {
            norm_q: LayerNorm::new(&mut s, "norm_q", dim),
            norm_ctx: ctx_dim.map(|c| LayerNorm::new(&mut s, "norm_ctx", c)),
            mha: MhaParams::new(&mut s, "mha", dim, ctx_dim.unwrap_or(dim), heads, out_init),
            norm_ff: LayerNorm::new(&mut s, "norm_ff", dim),
            ff1: Linear::dense(&mut s, "ff1", dim, 2 * dim),
            ff2: Linear::new(&mut s, "ff2", 2 * dim, dim, out_init, true),
        }
    }

    fn forward<'t, T: Real>(&self, x: Var<'t, T>, ctx: Option<Var<'t, T>>, mask: Option<&Mask>) -> Result<Var<'t, T>> {
        let xn = self.norm_q.forward(x);
        let kv = match (ctx, &self.norm_ctx) {
            (Some(c), Some(norm)) => norm.forward(c),
            (None, None) => xn,
            _ => return Err(Error::domain("context presence does not match the attention type")),
        };
        let h = x.add(mha(xn, kv, kv, mask, &self.mha)?);
        let ff = self.ff2.forward(self.ff1.forward(self.norm_ff.forward(h)).gelu());
        Ok(h.add(ff))
    }
}

/// A stack of `L` attention blocks: self-attention when built without a
/// context dimension, cross-attention otherwise.
#[derive(Clone, Debug)]
pub struct Attention {
    pub dim: usize,
    pub ctx_dim: Option<usize>,
    pub blocks: Vec<AttentionBlock>,
}

/// Residual-branch output projections start small so deep stacks begin near identity.
const OUT_INIT: Init = Init::Fan(0.5);

impl Attention {
    pub fn self_attn(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize, layers: usize) -> Self {
        Self::with_init(b, name, dim, None, heads, layers, OUT_INIT)
    }

    pub fn cross_attn(b: &mut Builder<'_>, name: &str, dim: usize, ctx_dim: usize, heads: usize, layers: usize) -> Self {
        Self::with_init(b, name, dim, Some(ctx_dim), heads, layers, OUT_INIT)
    }

    /// Explicit output-projection initialization, e.g. [`Init::Zero`] for an identity stack.
    pub fn with_init(
        b: &mut Builder<'_>,
        name: &str,
        dim: usize,
        ctx_dim: Option<usize>,
        heads: usize,
        layers: usize,
        out_init: Init,
    ) -> Self {
        let mut s = b.sub(name);
        let blocks = (0..layers).map(|i| AttentionBlock::new(&mut s, &format!("block{i}"), dim, ctx_dim, heads, out_init)).collect();
        Self { dim, ctx_dim, blocks }
    }

    /// `x: [B, Nq, dim]`; `ctx: [B, Nk, ctx_dim]` for cross-attention.
    pub fn forward<'t, T: Real>(&self, mut x: Var<'t, T>, ctx: Option<Var<'t, T>>, mask: Option<&Mask>) -> Result<Var<'t, T>> {
        if let Some(c) = ctx {
            if c.shape().len() != 3 || c.dim(1) == 0 {
                return Err(Error::domain("cross-attention context must be a nonempty [batch, set, dim] tensor"));
            }
        }
        for block in &self.blocks {
            x = block.forward(x, ctx, mask)?;
        }
        Ok(x)
    }

    pub fn self_forward<'t, T: Real>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward(x, None, None)
    }

    pub fn cross_forward<'t, T: Real>(&self, x: Var<'t, T>, ctx: Var<'t, T>, mask: Option<&Mask>) -> Result<Var<'t, T>> {
        self.forward(x, Some(ctx), mask)
    }
}
