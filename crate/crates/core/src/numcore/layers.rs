//! Parameterized building blocks whose weights live in a [`ParamStore`].

use rand::Rng;

use super::attention::{attention, attention_backward, AttentionCache};
use super::ops::{affine, affine_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, LayerNormCache};
use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn named(prefix: &str) -> Self {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
        }
    }

    /// Registers weights uniform in `±1/√d_in` and a zero bias.
    pub fn init(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let l = Self::named(prefix);
        store.insert_uniform(&l.w, d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng);
        store.insert(&l.b, Tensor2::zeros(1, d_out));
        l
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        affine(x, store.value(&self.w), store.value(&self.b))
    }

    /// Accumulates weight gradients and returns `dL/dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
        let g = affine_backward(x, store.value(&self.w), dy)?;
        store.accumulate(&self.w, &g.dw)?;
        store.accumulate(&self.b, &g.db)?;
        Ok(g.dx)
    }

    /// Like [`Linear::backward`] but skips the input gradient.
    pub fn backward_params(&self, store: &mut ParamStore, x: &Tensor2, dy: &Tensor2) -> Result<()> {
        store.accumulate(&self.w, &super::tensor::matmul_tn(x, dy)?)?;
        store.accumulate(&self.b, &dy.sum_rows())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn init(prefix: &str, d: usize, store: &mut ParamStore) -> Self {
        let ln = LayerNorm {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
        };
        store.insert(&ln.gain, Tensor2::full(1, d, 1.0));
        store.insert(&ln.bias, Tensor2::zeros(1, d));
        ln
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
        layer_norm(x, store.value(&self.gain), store.value(&self.bias))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor2,
    ) -> Result<Tensor2> {
        let g = layer_norm_backward(cache, store.value(&self.gain), dy)?;
        store.accumulate(&self.gain, &g.dgain)?;
        store.accumulate(&self.bias, &g.dbias)?;
        Ok(g.dx)
    }
}

/// Single-head attention with query/key/value/output projections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionBlockCache {
    x: Tensor2,
    key_src: Tensor2,
    value_src: Tensor2,
    attn: AttentionCache,
    mixed: Tensor2,
}

impl AttentionBlockCache {
    pub fn weights(&self) -> &Tensor2 {
        self.attn.weights()
    }
}

impl AttentionBlock {
    pub fn init(prefix: &str, d: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        AttentionBlock {
            q: Linear::init(&format!("{prefix}.q"), d, d, store, rng),
            k: Linear::init(&format!("{prefix}.k"), d, d, store, rng),
            v: Linear::init(&format!("{prefix}.v"), d, d, store, rng),
            o: Linear::init(&format!("{prefix}.o"), d, d, store, rng),
        }
    }

    /// Attends from `x` to keys computed from `key_src` and values from
    /// `value_src`. Self-attention passes `x` for both.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        key_src: &Tensor2,
        value_src: &Tensor2,
        mask: Option<&[bool]>,
    ) -> Result<(Tensor2, AttentionBlockCache)> {
        let q = self.q.forward(store, x)?;
        let k = self.k.forward(store, key_src)?;
        let v = self.v.forward(store, value_src)?;
        let (mixed, attn) = attention(&q, &k, &v, mask)?;
        let out = self.o.forward(store, &mixed)?;
        Ok((
            out,
            AttentionBlockCache {
                x: x.clone(),
                key_src: key_src.clone(),
                value_src: value_src.clone(),
                attn,
                mixed,
            },
        ))
    }

    /// Returns `(dL/dx, dL/dkey_src, dL/dvalue_src)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AttentionBlockCache,
        dout: &Tensor2,
    ) -> Result<(Tensor2, Tensor2, Tensor2)> {
        let dmixed = self.o.backward(store, &cache.mixed, dout)?;
        let g = attention_backward(&cache.attn, &dmixed)?;
        let dx = self.q.backward(store, &cache.x, &g.dq)?;
        let dkey = self.k.backward(store, &cache.key_src, &g.dk)?;
        let dval = self.v.backward(store, &cache.value_src, &g.dv)?;
        Ok((dx, dkey, dval))
    }

    /// Self-attention convenience: gradients w.r.t. the single input summed.
    pub fn backward_self(
        &self,
        store: &mut ParamStore,
        cache: &AttentionBlockCache,
        dout: &Tensor2,
    ) -> Result<Tensor2> {
        let (mut dx, dk, dv) = self.backward(store, cache, dout)?;
        dx.add_assign(&dk);
        dx.add_assign(&dv);
        Ok(dx)
    }
}

/// Two-layer position-wise map with GELU in between.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct FeedForwardCache {
    x: Tensor2,
    pre: Tensor2,
    hidden: Tensor2,
}

impl FeedForward {
    pub fn init(
        prefix: &str,
        d: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        FeedForward {
            l1: Linear::init(&format!("{prefix}.l1"), d, hidden, store, rng),
            l2: Linear::init(&format!("{prefix}.l2"), hidden, d, store, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<(Tensor2, FeedForwardCache)> {
        let pre = self.l1.forward(store, x)?;
        let hidden = gelu(&pre);
        let out = self.l2.forward(store, &hidden)?;
        Ok((
            out,
            FeedForwardCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &FeedForwardCache,
        dout: &Tensor2,
    ) -> Result<Tensor2> {
        let dh = self.l2.backward(store, &cache.hidden, dout)?;
        let dpre = gelu_backward(&cache.pre, &dh)?;
        self.l1.backward(store, &cache.x, &dpre)
    }
}
