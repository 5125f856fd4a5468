use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mask::{build_instance_mask, AttentionMask, MaskConfig};
use crate::error::{Error, Result};
use crate::numcore::{
    AttentionBlock, AttentionBlockCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache,
    ParamStore, Tensor2,
};

/// Whether and how the inner-instance self-attention sub-layer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Sub-layer absent.
    Off,
    /// Sub-layer present, attending over all queries.
    NoMaskAttn,
    /// Sub-layer present with the inner-instance mask.
    Masked,
}

impl MaskMode {
    pub const ALL: [MaskMode; 3] = [MaskMode::Off, MaskMode::NoMaskAttn, MaskMode::Masked];

    pub fn name(self) -> &'static str {
        match self {
            MaskMode::Off => "off",
            MaskMode::NoMaskAttn => "no_mask_attn",
            MaskMode::Masked => "masked",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown mask mode {s:?} (valid: off, no_mask_attn, masked)"
            ))
        })
    }
}

/// Where the inner-instance sub-layer sits relative to cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AfterCross,
    BeforeCross,
}

impl Placement {
    pub const ALL: [Placement; 2] = [Placement::AfterCross, Placement::BeforeCross];

    pub fn name(self) -> &'static str {
        match self {
            Placement::AfterCross => "after_cross",
            Placement::BeforeCross => "before_cross",
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown placement {s:?} (valid: after_cross, before_cross)"
            ))
        })
    }
}

/// Residual sub-layer wrapper output: `LN(x + f(x))`.
#[derive(Debug, Clone)]
struct ResidualCache<C> {
    inner: C,
    norm: LayerNormCache,
}

#[derive(Debug, Clone)]
enum StepCache {
    SelfAttn(ResidualCache<AttentionBlockCache>),
    Cross(ResidualCache<AttentionBlockCache>),
    Inner(ResidualCache<AttentionBlockCache>),
    Ffn(ResidualCache<FeedForwardCache>),
}

#[derive(Debug, Clone)]
pub struct DecoderLayerCache {
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    SelfAttn,
    Cross,
    Inner,
    Ffn,
}

/// One decoder layer.
///
/// Sub-layers in order: plain self-attention over all queries,
/// cross-attention to the BEV tokens, masked inner-instance self-attention,
/// position-wise feed-forward. Each is wrapped as `LN(x + f(x))`. The
/// inner-instance sub-layer may be dropped or moved before cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    self_attn: AttentionBlock,
    self_norm: LayerNorm,
    cross: AttentionBlock,
    cross_norm: LayerNorm,
    inner: Option<(AttentionBlock, LayerNorm)>,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
    mask_mode: MaskMode,
    placement: Placement,
}

impl DecoderLayer {
    pub fn init(
        prefix: &str,
        d: usize,
        mask_mode: MaskMode,
        placement: Placement,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let self_attn = AttentionBlock::init(&format!("{prefix}.self"), d, store, rng);
        let self_norm = LayerNorm::init(&format!("{prefix}.self_norm"), d, store);
        let cross = AttentionBlock::init(&format!("{prefix}.cross"), d, store, rng);
        let cross_norm = LayerNorm::init(&format!("{prefix}.cross_norm"), d, store);
        let inner = (mask_mode != MaskMode::Off).then(|| {
            (
                AttentionBlock::init(&format!("{prefix}.inner"), d, store, rng),
                LayerNorm::init(&format!("{prefix}.inner_norm"), d, store),
            )
        });
        let ffn = FeedForward::init(&format!("{prefix}.ffn"), d, 2 * d, store, rng);
        let ffn_norm = LayerNorm::init(&format!("{prefix}.ffn_norm"), d, store);
        DecoderLayer {
            self_attn,
            self_norm,
            cross,
            cross_norm,
            inner,
            ffn,
            ffn_norm,
            mask_mode,
            placement,
        }
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    fn steps(&self) -> Vec<Step> {
        let mut s = vec![Step::SelfAttn];
        match (self.inner.is_some(), self.placement) {
            (false, _) => s.push(Step::Cross),
            (true, Placement::AfterCross) => s.extend([Step::Cross, Step::Inner]),
            (true, Placement::BeforeCross) => s.extend([Step::Inner, Step::Cross]),
        }
        s.push(Step::Ffn);
        s
    }

    /// Runs the layer. `mask` is used only by the inner-instance sub-layer
    /// and only in [`MaskMode::Masked`].
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        bev_keys: &Tensor2,
        bev_values: &Tensor2,
        mask: &AttentionMask,
    ) -> Result<(Tensor2, DecoderLayerCache)> {
        if mask.size() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "decoder mask",
                left: (x.rows(), x.rows()),
                right: (mask.size(), mask.size()),
            });
        }
        let mut h = x.clone();
        let mut steps = Vec::with_capacity(4);
        for step in self.steps() {
            match step {
                Step::SelfAttn => {
                    let (f, c) = self.self_attn.forward(store, &h, &h, &h, None)?;
                    let (y, norm) = self.self_norm.forward(store, &h.add(&f)?)?;
                    steps.push(StepCache::SelfAttn(ResidualCache { inner: c, norm }));
                    h = y;
                }
                Step::Cross => {
                    let (f, c) = self.cross.forward(store, &h, bev_keys, bev_values, None)?;
                    let (y, norm) = self.cross_norm.forward(store, &h.add(&f)?)?;
                    steps.push(StepCache::Cross(ResidualCache { inner: c, norm }));
                    h = y;
                }
                Step::Inner => {
                    let (y, cache) = self.inner_sublayer(store, &h, mask)?;
                    steps.push(StepCache::Inner(cache));
                    h = y;
                }
                Step::Ffn => {
                    let (f, c) = self.ffn.forward(store, &h)?;
                    let (y, norm) = self.ffn_norm.forward(store, &h.add(&f)?)?;
                    steps.push(StepCache::Ffn(ResidualCache { inner: c, norm }));
                    h = y;
                }
            }
        }
        Ok((h, DecoderLayerCache { steps }))
    }

    fn inner_sublayer(
        &self,
        store: &ParamStore,
        h: &Tensor2,
        mask: &AttentionMask,
    ) -> Result<(Tensor2, ResidualCache<AttentionBlockCache>)> {
        let (attn, norm) = self
            .inner
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("layer has no inner-instance sub-layer".into()))?;
        let m = match self.mask_mode {
            MaskMode::Masked => Some(mask.as_slice()),
            _ => None,
        };
        let (f, c) = attn.forward(store, h, h, h, m)?;
        let (y, nc) = norm.forward(store, &h.add(&f)?)?;
        Ok((y, ResidualCache { inner: c, norm: nc }))
    }

    /// The masked inner-instance sub-layer on its own (`LN(x + Attn(x))`).
    pub fn inner_instance_sublayer(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        mask: &AttentionMask,
    ) -> Result<Tensor2> {
        Ok(self.inner_sublayer(store, x, mask)?.0)
    }

    /// Returns `(dL/dx, dL/dbev_keys, dL/dbev_values)` and accumulates
    /// parameter gradients.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &DecoderLayerCache,
        dout: &Tensor2,
    ) -> Result<(Tensor2, Tensor2, Tensor2)> {
        let mut dh = dout.clone();
        let mut dkeys: Option<Tensor2> = None;
        let mut dvalues: Option<Tensor2> = None;
        for step in cache.steps.iter().rev() {
            dh = match step {
                StepCache::SelfAttn(c) => {
                    let dsum = self.self_norm.backward(store, &c.norm, &dh)?;
                    let mut dx = self.self_attn.backward_self(store, &c.inner, &dsum)?;
                    dx.add_assign(&dsum);
                    dx
                }
                StepCache::Cross(c) => {
                    let dsum = self.cross_norm.backward(store, &c.norm, &dh)?;
                    let (mut dx, dk, dv) = self.cross.backward(store, &c.inner, &dsum)?;
                    dkeys = Some(dk);
                    dvalues = Some(dv);
                    dx.add_assign(&dsum);
                    dx
                }
                StepCache::Inner(c) => {
                    let (attn, norm) = self.inner.as_ref().expect("cached inner step");
                    let dsum = norm.backward(store, &c.norm, &dh)?;
                    let mut dx = attn.backward_self(store, &c.inner, &dsum)?;
                    dx.add_assign(&dsum);
                    dx
                }
                StepCache::Ffn(c) => {
                    let dsum = self.ffn_norm.backward(store, &c.norm, &dh)?;
                    let mut dx = self.ffn.backward(store, &c.inner, &dsum)?;
                    dx.add_assign(&dsum);
                    dx
                }
            };
        }
        Ok((
            dh,
            dkeys.expect("cross-attention always runs"),
            dvalues.expect("cross-attention always runs"),
        ))
    }
}

/// Stack of decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// Output of every layer; the last entry is the final query state.
    pub per_layer: Vec<Tensor2>,
    pub caches: Vec<DecoderLayerCache>,
}

impl DecoderOutput {
    pub fn last(&self) -> &Tensor2 {
        self.per_layer.last().expect("at least one layer")
    }
}

impl Decoder {
    pub fn init(
        num_layers: usize,
        d: usize,
        mask_mode: MaskMode,
        placement: Placement,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one layer".into()));
        }
        Ok(Decoder {
            layers: (0..num_layers)
                .map(|l| DecoderLayer::init(&format!("dec.{l}"), d, mask_mode, placement, store, rng))
                .collect(),
        })
    }

    /// One mask per layer. Training draws a fresh ε-mask for each layer from `rng`.
    pub fn draw_masks(
        &self,
        instance_of: &[usize],
        cfg: &MaskConfig,
        rng: &mut impl Rng,
        training: bool,
    ) -> Vec<AttentionMask> {
        self.layers
            .iter()
            .map(|_| build_instance_mask(instance_of, cfg.epsilon, rng, training))
            .collect()
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        queries: &Tensor2,
        bev_keys: &Tensor2,
        bev_values: &Tensor2,
        masks: &[AttentionMask],
    ) -> Result<DecoderOutput> {
        if masks.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        let mut per_layer = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = queries.clone();
        for (layer, mask) in self.layers.iter().zip(masks) {
            let (y, c) = layer.forward(store, &h, bev_keys, bev_values, mask)?;
            per_layer.push(y.clone());
            caches.push(c);
            h = y;
        }
        Ok(DecoderOutput { per_layer, caches })
    }

    /// `d_per_layer[l]` is the loss gradient w.r.t. layer `l`'s output.
    /// Returns `(dL/dqueries, dL/dbev_keys, dL/dbev_values)`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        out: &DecoderOutput,
        d_per_layer: &[Tensor2],
    ) -> Result<(Tensor2, Tensor2, Tensor2)> {
        let mut dh = d_per_layer.last().expect("at least one layer").clone();
        let mut dkeys: Option<Tensor2> = None;
        let mut dvalues: Option<Tensor2> = None;
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                dh.add_assign(&d_per_layer[l]);
            }
            let (dx, dk, dv) = self.layers[l].backward(store, &out.caches[l], &dh)?;
            match (&mut dkeys, &mut dvalues) {
                (Some(k), Some(v)) => {
                    k.add_assign(&dk);
                    v.add_assign(&dv);
                }
                _ => {
                    dkeys = Some(dk);
                    dvalues = Some(dv);
                }
            }
            dh = dx;
        }
        Ok((dh, dkeys.expect("non-empty"), dvalues.expect("non-empty")))
    }
}
