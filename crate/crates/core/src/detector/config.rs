use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::decoder::{FusionMode, MaskMode, Placement};
use crate::error::{Error, Result};
use crate::geometry::ElementClass;
use crate::queries::QueryScheme;

/// Detector, training and evaluation settings.
///
/// Read from plain `key = value` files; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub num_instances: usize,
    pub points_per_instance: usize,
    pub dim: usize,
    pub layers: usize,
    /// Square patch side of the BEV encoder, in raster cells.
    pub patch: usize,
    pub raster_height: usize,
    pub raster_width: usize,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub lambda_cls: f64,
    pub lambda_pts: f64,
    /// Auxiliary losses on every intermediate decoder layer.
    pub aux_loss: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub query_scheme: QueryScheme,
    pub fusion: FusionMode,
    pub mask: MaskMode,
    pub placement: Placement,
    pub epsilon: f64,
    /// The last `eval_scenes` scenes of the dataset are held out.
    pub eval_scenes: usize,
    /// Held-out evaluation every this many epochs (and after the last).
    pub eval_every: usize,
    pub topo_centerline_only: bool,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_instances: 12,
            points_per_instance: 8,
            dim: 64,
            layers: 3,
            patch: 10,
            raster_height: 200,
            raster_width: 100,
            x_range: (-15.0, 15.0),
            y_range: (-30.0, 30.0),
            lambda_cls: 2.0,
            lambda_pts: 5.0,
            aux_loss: true,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            query_scheme: QueryScheme::Hybrid,
            fusion: FusionMode::SelfAttention,
            mask: MaskMode::Masked,
            placement: Placement::AfterCross,
            epsilon: 0.1,
            eval_scenes: 200,
            eval_every: 1,
            topo_centerline_only: false,
            resume: None,
        }
    }
}

/// Keys that do not change the model or its training trajectory; they are
/// left out of the config hash so a run can be extended or resumed.
const UNHASHED: [&str; 3] = ["epochs", "eval_every", "resume"];

impl DetectorConfig {
    pub const NUM_CLASSES: usize = ElementClass::COUNT;

    /// Micro shapes used by gradient checks.
    pub fn micro() -> Self {
        DetectorConfig {
            num_instances: 2,
            points_per_instance: 3,
            dim: 8,
            layers: 1,
            patch: 10,
            raster_height: 20,
            raster_width: 20,
            ..Default::default()
        }
    }

    pub fn tokens(&self) -> usize {
        (self.raster_height / self.patch) * (self.raster_width / self.patch)
    }

    pub fn num_queries(&self) -> usize {
        self.num_instances * self.points_per_instance
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_instances == 0 {
            problems.push("num_instances must be >= 1".to_string());
        }
        if self.points_per_instance < 2 {
            problems.push("points_per_instance must be >= 2".into());
        }
        if self.dim < 4 || !self.dim.is_multiple_of(4) {
            problems.push("dim must be a positive multiple of 4".into());
        }
        if self.layers == 0 {
            problems.push("layers must be >= 1".into());
        }
        if self.patch == 0 || !self.raster_height.is_multiple_of(self.patch) || !self.raster_width.is_multiple_of(self.patch) {
            problems.push(format!(
                "patch {} must divide raster {}x{}",
                self.patch, self.raster_height, self.raster_width
            ));
        }
        if !(self.x_range.0 < self.x_range.1 && self.y_range.0 < self.y_range.1) {
            problems.push("empty BEV range".into());
        }
        for (k, v) in [("lambda_cls", self.lambda_cls), ("lambda_pts", self.lambda_pts)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{k} must be finite and >= 0"));
            }
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            problems.push("invalid optimizer settings".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            problems.push("batch_size and eval_every must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            problems.push(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Parses a `key = value` file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = DetectorConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidArgument(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::InvalidArgument(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "num_instances" => self.num_instances = num(key, value)?,
            "points_per_instance" => self.points_per_instance = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "raster_height" => self.raster_height = num(key, value)?,
            "raster_width" => self.raster_width = num(key, value)?,
            "x_min" => self.x_range.0 = num(key, value)?,
            "x_max" => self.x_range.1 = num(key, value)?,
            "y_min" => self.y_range.0 = num(key, value)?,
            "y_max" => self.y_range.1 = num(key, value)?,
            "lambda_cls" => self.lambda_cls = num(key, value)?,
            "lambda_pts" => self.lambda_pts = num(key, value)?,
            "aux_loss" => self.aux_loss = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "query_scheme" => self.query_scheme = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "mask" => self.mask = value.parse()?,
            "placement" => self.placement = value.parse()?,
            "epsilon" => self.epsilon = num(key, value)?,
            "eval_scenes" => self.eval_scenes = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "topo_centerline_only" => self.topo_centerline_only = num(key, value)?,
            "resume" => self.resume = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::InvalidArgument(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its canonical value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_instances", self.num_instances.to_string()),
            ("points_per_instance", self.points_per_instance.to_string()),
            ("dim", self.dim.to_string()),
            ("layers", self.layers.to_string()),
            ("patch", self.patch.to_string()),
            ("raster_height", self.raster_height.to_string()),
            ("raster_width", self.raster_width.to_string()),
            ("x_min", self.x_range.0.to_string()),
            ("x_max", self.x_range.1.to_string()),
            ("y_min", self.y_range.0.to_string()),
            ("y_max", self.y_range.1.to_string()),
            ("lambda_cls", self.lambda_cls.to_string()),
            ("lambda_pts", self.lambda_pts.to_string()),
            ("aux_loss", self.aux_loss.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("query_scheme", self.query_scheme.to_string()),
            ("fusion", self.fusion.to_string()),
            ("mask", self.mask.to_string()),
            ("placement", self.placement.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("topo_centerline_only", self.topo_centerline_only.to_string()),
            (
                "resume",
                self.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
        ]
    }

    /// Every key in a fixed order; `parse(to_kv_string())` reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            if k == "resume" && v.is_empty() {
                continue;
            }
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// SHA-256 over the canonical text of the hashed keys, hex encoded.
    pub fn hash_hex(&self) -> String {
        let digest = self.hash_bytes();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().into()
    }
}

fn strip_prefix(e: &Error) -> String {
    let s = e.to_string();
    s.strip_prefix("invalid argument: ").map(str::to_owned).unwrap_or(s)
}
