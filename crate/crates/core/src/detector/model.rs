use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DetectorConfig;
use super::encoder::{BevEncoder, EncodedBev};
use super::loss::NO_OBJECT;
use crate::decoder::{AttentionMask, Decoder, DecoderOutput, FusionCache, MaskConfig, QueryFusion};
use crate::error::Result;
use crate::geometry::{ElementClass, Instance, InstanceKind, Point};
use crate::metrics::{ScoredInstance, SceneEval};
use crate::numcore::{gelu, gelu_backward, sigmoid, sigmoid_backward, softmax_rows, Linear, ParamStore, Tensor2};
use crate::queries::{QueryConfig, QueryGenerator};
use crate::synthgen::BevRaster;

/// Purpose tags for derived random streams.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
}

/// Generator keyed by `(seed, tag, a, b)`; used so that every random draw
/// in training is a pure function of its position.
pub fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, tag, a, b].iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Heads applied to one decoder layer's output.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Per-instance logits over `K + 1` labels (mean of its queries' logits).
    pub inst_logits: Tensor2,
    pub probs: Tensor2,
    /// Per-query points in normalized `[0,1]²`.
    pub points: Tensor2,
    hidden_pre: Tensor2,
    hidden: Tensor2,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub enc: EncodedBev,
    pub dec: DecoderOutput,
    pub heads: Vec<HeadOutput>,
    fusion_cache: FusionCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotPrediction {
    /// Distribution over the four classes and no-object.
    pub probs: Vec<f64>,
    pub confidence: f64,
    /// Most likely real class.
    pub label: ElementClass,
    /// Points in meters.
    pub points: Vec<Point>,
}

impl SlotPrediction {
    /// Whether no-object is the single most likely label.
    pub fn is_background(&self) -> bool {
        self.probs[NO_OBJECT] >= self.probs[self.label.index()]
    }

    /// Prediction as a map instance. Repeated consecutive points are dropped.
    pub fn to_instance(&self) -> Instance {
        let mut pts: Vec<Point> = Vec::with_capacity(self.points.len());
        for &p in &self.points {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
        match self.label.natural_kind() {
            InstanceKind::Polygon => {
                if pts.len() > 1 && pts.first() == pts.last() {
                    pts.pop();
                }
                Instance::polygon_from_ring(self.label, pts)
            }
            InstanceKind::Polyline => Instance::polyline(self.label, pts),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub slots: Vec<SlotPrediction>,
}

impl PredictionSet {
    /// Slot indices by descending confidence (ties by slot index).
    pub fn confidence_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.slots.len()).collect();
        idx.sort_by(|&a, &b| self.slots[b].confidence.total_cmp(&self.slots[a].confidence).then(a.cmp(&b)));
        idx
    }

    /// Metric input: every slot scores for AP; non-background slots form the TOPO graph.
    pub fn to_scene_eval(&self, gts: &[Instance]) -> SceneEval {
        SceneEval {
            preds: self
                .slots
                .iter()
                .map(|s| ScoredInstance {
                    instance: s.to_instance(),
                    confidence: s.confidence,
                })
                .collect(),
            gts: gts.to_vec(),
            topo_preds: self
                .slots
                .iter()
                .filter(|s| !s.is_background())
                .map(SlotPrediction::to_instance)
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub encoder: BevEncoder,
    pub queries: QueryGenerator,
    pub fusion: QueryFusion,
    pub decoder: Decoder,
    pub cls_head: Linear,
    pub pts_hidden: Linear,
    pub pts_out: Linear,
}

impl Detector {
    /// Builds the model and registers freshly initialized parameters.
    pub fn init(cfg: &DetectorConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived_rng(cfg.seed, stream::INIT, 0, 0);
        let d = cfg.dim;
        let encoder = BevEncoder::init(
            cfg.raster_height,
            cfg.raster_width,
            ElementClass::COUNT,
            cfg.patch,
            d,
            store,
            &mut rng,
        );
        let qcfg = QueryConfig::new(cfg.num_instances, cfg.points_per_instance, d)?;
        let queries = QueryGenerator::init(qcfg, cfg.query_scheme, store, &mut rng);
        let fusion = QueryFusion::init(cfg.fusion, cfg.points_per_instance, d, store, &mut rng);
        let decoder = Decoder::init(cfg.layers, d, cfg.mask, cfg.placement, store, &mut rng)?;
        let cls_head = Linear::init("head.cls", d, ElementClass::COUNT + 1, store, &mut rng);
        let pts_hidden = Linear::init("head.pts_hidden", d, d, store, &mut rng);
        let pts_out = Linear::init("head.pts_out", d, 2, store, &mut rng);
        Ok(Detector {
            cfg: cfg.clone(),
            encoder,
            queries,
            fusion,
            decoder,
            cls_head,
            pts_hidden,
            pts_out,
        })
    }

    pub fn instance_of(&self) -> Vec<usize> {
        self.queries.cfg.instance_of()
    }

    /// One mask per decoder layer.
    pub fn draw_masks(&self, rng: &mut impl Rng, training: bool) -> Vec<AttentionMask> {
        let mc = MaskConfig {
            epsilon: self.cfg.epsilon,
            seed: self.cfg.seed,
        };
        self.decoder.draw_masks(&self.instance_of(), &mc, rng, training)
    }

    pub fn forward(&self, store: &ParamStore, raster: &BevRaster, masks: &[AttentionMask]) -> Result<ForwardPass> {
        let enc = self.encoder.forward(store, raster)?;
        let qs = self.queries.forward(store)?;
        let (fused, fusion_cache) = self.fusion.forward(store, &qs.queries)?;
        let dec = self.decoder.forward(store, &fused, &enc.keys, &enc.values, masks)?;
        let heads = dec
            .per_layer
            .iter()
            .map(|h| self.heads(store, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardPass {
            enc,
            dec,
            heads,
            fusion_cache,
        })
    }

    fn heads(&self, store: &ParamStore, h: &Tensor2) -> Result<HeadOutput> {
        let n_p = self.cfg.points_per_instance;
        let logits = self.cls_head.forward(store, h)?;
        let k1 = logits.cols();
        let inst_logits = Tensor2::from_fn(self.cfg.num_instances, k1, |i, c| {
            (0..n_p).map(|k| logits.get(i * n_p + k, c)).sum::<f64>() / n_p as f64
        });
        let probs = softmax_rows(&inst_logits);
        let hidden_pre = self.pts_hidden.forward(store, h)?;
        let hidden = gelu(&hidden_pre);
        let points = sigmoid(&self.pts_out.forward(store, &hidden)?);
        Ok(HeadOutput {
            inst_logits,
            probs,
            points,
            hidden_pre,
            hidden,
        })
    }

    /// Backpropagates head gradients of every layer (`None` for layers
    /// without a loss) into all parameters.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        pass: &ForwardPass,
        grads: &[Option<(Tensor2, Tensor2)>],
    ) -> Result<()> {
        let n_p = self.cfg.points_per_instance;
        let mut d_layers = Vec::with_capacity(grads.len());
        for (l, g) in grads.iter().enumerate() {
            let h = &pass.dec.per_layer[l];
            let Some((d_inst_logits, d_points)) = g else {
                d_layers.push(Tensor2::zeros(h.rows(), h.cols()));
                continue;
            };
            let head = &pass.heads[l];
            let d_logits = Tensor2::from_fn(h.rows(), d_inst_logits.cols(), |r, c| {
                d_inst_logits.get(r / n_p, c) / n_p as f64
            });
            let mut dh = self.cls_head.backward(store, h, &d_logits)?;
            let d_pre_out = sigmoid_backward(&head.points, d_points)?;
            let d_hidden = self.pts_out.backward(store, &head.hidden, &d_pre_out)?;
            let d_hidden_pre = gelu_backward(&head.hidden_pre, &d_hidden)?;
            dh.add_assign(&self.pts_hidden.backward(store, h, &d_hidden_pre)?);
            d_layers.push(dh);
        }
        let (dq, dkeys, dvalues) = self.decoder.backward(store, &pass.dec, &d_layers)?;
        self.encoder.backward(store, &pass.enc, &dkeys, &dvalues)?;
        let dq0 = self.fusion.backward(store, &pass.fusion_cache, &dq)?;
        self.queries.backward(store, &dq0)
    }

    /// Eval-mode prediction from the last decoder layer.
    pub fn predict(&self, store: &ParamStore, raster: &BevRaster) -> Result<PredictionSet> {
        let masks = self.draw_masks(&mut derived_rng(0, 0, 0, 0), false);
        let pass = self.forward(store, raster, &masks)?;
        Ok(self.slot_predictions(pass.heads.last().expect("at least one layer")))
    }

    pub fn slot_predictions(&self, head: &HeadOutput) -> PredictionSet {
        let n_p = self.cfg.points_per_instance;
        let (x0, x1) = self.cfg.x_range;
        let (y0, y1) = self.cfg.y_range;
        let slots = (0..self.cfg.num_instances)
            .map(|i| {
                let probs = head.probs.row(i).to_vec();
                let label = (0..ElementClass::COUNT)
                    .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                    .and_then(ElementClass::from_index)
                    .expect("four classes");
                let points = (0..n_p)
                    .map(|k| {
                        let r = head.points.row(i * n_p + k);
                        Point::new(x0 + r[0] * (x1 - x0), y0 + r[1] * (y1 - y0))
                    })
                    .collect();
                SlotPrediction {
                    confidence: 1.0 - probs[NO_OBJECT],
                    probs,
                    label,
                    points,
                }
            })
            .collect();
        PredictionSet { slots }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(cfg: &DetectorConfig, seed: u64) -> BevRaster {
        let mut rng = derived_rng(seed, 9, 0, 0);
        let mut r = BevRaster::zeros(cfg.raster_height, cfg.raster_width, 4, 0.3);
        r.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        r
    }

    fn small_cfg() -> DetectorConfig {
        DetectorConfig {
            dim: 16,
            layers: 2,
            num_instances: 4,
            points_per_instance: 4,
            raster_height: 40,
            raster_width: 20,
            ..Default::default()
        }
    }

    #[test]
    fn untrained_predictions_are_well_formed() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let det = Detector::init(&cfg, &mut store).unwrap();
        let p = det.predict(&store, &raster(&cfg, 1)).unwrap();
        assert_eq!(p.slots.len(), 4);
        for s in &p.slots {
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert_eq!(s.points.len(), 4);
            for q in &s.points {
                assert!(q.x.is_finite() && q.y.is_finite());
                assert!((-15.0..=15.0).contains(&q.x) && (-30.0..=30.0).contains(&q.y));
            }
        }
        let mut order = p.confidence_order();
        order.sort();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn prediction_is_deterministic() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let det = Detector::init(&cfg, &mut store).unwrap();
        let r = raster(&cfg, 2);
        assert_eq!(det.predict(&store, &r).unwrap(), det.predict(&store, &r).unwrap());
        let mut store2 = ParamStore::new();
        Detector::init(&cfg, &mut store2).unwrap();
        assert_eq!(store, store2);
    }

    #[test]
    fn derived_streams_are_distinct() {
        let a: u64 = derived_rng(1, 2, 3, 4).gen();
        let b: u64 = derived_rng(1, 2, 4, 3).gen();
        let c: u64 = derived_rng(1, 2, 3, 4).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn polygon_slot_becomes_closed_instance() {
        let s = SlotPrediction {
            probs: vec![0.7, 0.1, 0.1, 0.05, 0.05],
            confidence: 0.95,
            label: ElementClass::PedestrianCrossing,
            points: vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)],
        };
        let inst = s.to_instance();
        assert_eq!(inst.kind, InstanceKind::Polygon);
        assert_eq!(inst.points.len(), 4);
        assert!(inst.check().is_ok());
        assert!(!s.is_background());
    }
}
