//! Inner-instance query fusion: each query is replaced by (or augmented
//! with) a weighted sum of transformed queries of its own instance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::AttentionMask;
use crate::error::{Error, Result};
use crate::numcore::{AttentionBlock, AttentionBlockCache, FeedForward, FeedForwardCache, ParamStore, Tensor2};
use crate::queries::QuerySet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    Mean,
    FeedForward,
    SelfAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::Mean,
        FusionMode::FeedForward,
        FusionMode::SelfAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Mean => "mean",
            FusionMode::FeedForward => "feed_forward",
            FusionMode::SelfAttention => "self_attention",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown fusion mode {s:?} (valid: none, mean, feed_forward, self_attention)"
            ))
        })
    }
}

/// Fusion mode together with the parameters it needs.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryFusion {
    None,
    Mean { n_p: usize },
    /// `q ← q + (1/n_p)·Σ_k φ(q_k)`, φ a shared two-layer map of width `2d`.
    FeedForward { n_p: usize, phi: FeedForward },
    /// `q ← q + Attn(q, Q_i)` restricted to the query's own instance.
    SelfAttention { n_p: usize, attn: AttentionBlock },
}

#[derive(Debug, Clone)]
pub enum FusionCache {
    None,
    Mean,
    FeedForward(FeedForwardCache),
    SelfAttention(AttentionBlockCache),
}

impl QueryFusion {
    pub fn init(
        mode: FusionMode,
        n_p: usize,
        d: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        match mode {
            FusionMode::None => QueryFusion::None,
            FusionMode::Mean => QueryFusion::Mean { n_p },
            FusionMode::FeedForward => QueryFusion::FeedForward {
                n_p,
                phi: FeedForward::init("fusion.phi", d, 2 * d, store, rng),
            },
            FusionMode::SelfAttention => QueryFusion::SelfAttention {
                n_p,
                attn: AttentionBlock::init("fusion.attn", d, store, rng),
            },
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            QueryFusion::None => FusionMode::None,
            QueryFusion::Mean { .. } => FusionMode::Mean,
            QueryFusion::FeedForward { .. } => FusionMode::FeedForward,
            QueryFusion::SelfAttention { .. } => FusionMode::SelfAttention,
        }
    }

    pub fn forward(&self, store: &ParamStore, q: &Tensor2) -> Result<(Tensor2, FusionCache)> {
        match self {
            QueryFusion::None => Ok((q.clone(), FusionCache::None)),
            QueryFusion::Mean { n_p } => Ok((block_mean(q, *n_p)?, FusionCache::Mean)),
            QueryFusion::FeedForward { n_p, phi } => {
                let (h, cache) = phi.forward(store, q)?;
                let mut out = block_mean(&h, *n_p)?;
                out.add_assign(q);
                Ok((out, FusionCache::FeedForward(cache)))
            }
            QueryFusion::SelfAttention { n_p, attn } => {
                let mask = block_mask(q.rows(), *n_p);
                let (h, cache) = attn.forward(store, q, q, q, Some(mask.as_slice()))?;
                let mut out = h;
                out.add_assign(q);
                Ok((out, FusionCache::SelfAttention(cache)))
            }
        }
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &FusionCache,
        dout: &Tensor2,
    ) -> Result<Tensor2> {
        match (self, cache) {
            (QueryFusion::None, FusionCache::None) => Ok(dout.clone()),
            // the block mean is self-adjoint
            (QueryFusion::Mean { n_p }, FusionCache::Mean) => block_mean(dout, *n_p),
            (QueryFusion::FeedForward { n_p, phi }, FusionCache::FeedForward(c)) => {
                let dh = block_mean(dout, *n_p)?;
                let mut dq = phi.backward(store, c, &dh)?;
                dq.add_assign(dout);
                Ok(dq)
            }
            (QueryFusion::SelfAttention { attn, .. }, FusionCache::SelfAttention(c)) => {
                let mut dq = attn.backward_self(store, c, dout)?;
                dq.add_assign(dout);
                Ok(dq)
            }
            _ => Err(Error::InvalidArgument(
                "fusion cache does not match fusion mode".into(),
            )),
        }
    }
}

/// Applies fusion to a query set, keeping its layout and provenance.
pub fn fuse_queries(qs: &QuerySet, fusion: &QueryFusion, store: &ParamStore) -> Result<QuerySet> {
    let (queries, _) = fusion.forward(store, &qs.queries)?;
    Ok(QuerySet {
        queries,
        instance_of: qs.instance_of.clone(),
        provenance: qs.provenance.clone(),
    })
}

/// Replaces every row with the mean of its `n_p`-row block.
fn block_mean(x: &Tensor2, n_p: usize) -> Result<Tensor2> {
    if n_p == 0 || !x.rows().is_multiple_of(n_p) {
        return Err(Error::InvalidArgument(format!(
            "{} queries do not split into blocks of {n_p}",
            x.rows()
        )));
    }
    let d = x.cols();
    let mut out = Tensor2::zeros(x.rows(), d);
    let inv = 1.0 / n_p as f64;
    for start in (0..x.rows()).step_by(n_p) {
        let mut mean = vec![0.0; d];
        for r in start..start + n_p {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        for r in start..start + n_p {
            out.row_mut(r).copy_from_slice(&mean);
        }
    }
    Ok(out)
}

fn block_mask(n: usize, n_p: usize) -> AttentionMask {
    AttentionMask::from_fn(n, |a, b| a / n_p != b / n_p)
}
