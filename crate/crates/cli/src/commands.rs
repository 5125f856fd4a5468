use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Map, Value};
use vecmap_core::detector::{self, evaluate_model, load_trained, prepare, DetectorConfig};
use vecmap_core::gradsuite::{run_suite, SuiteOptions, SuiteReport};
use vecmap_core::metrics::{evaluate, EvalReport, MetricConfig, SceneEval};
use vecmap_core::synthgen::{generate_dataset, read_dataset, write_dataset, DatasetMeta, RasterSpec, SceneConfig};

use crate::manifest::{manifest_path, ManifestBuilder};
use crate::{CliError, CliResult};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Raster cell size in meters.
    #[arg(long, default_value_t = 0.3)]
    pub resolution: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Key-value config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint; `config.txt` must sit next to it.
    #[arg(long, required_unless_present = "gt_as_pred")]
    pub checkpoint: Option<PathBuf>,
    /// Report path. Defaults to `eval_report.json` beside the checkpoint.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Debug: score the ground truth against itself.
    #[arg(long)]
    pub gt_as_pred: bool,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Config whose architecture choices the end-to-end check uses.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Negative control: corrupt the named op's gradient.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn read_config(path: &Path) -> CliResult<DetectorConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    DetectorConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn config_json(cfg: &DetectorConfig) -> Value {
    Value::Object(
        cfg.entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect::<Map<_, _>>(),
    )
}

/// Rejects a dataset whose rasters the model cannot consume.
pub fn check_compatible(meta: &DatasetMeta, cfg: &DetectorConfig) -> CliResult<()> {
    let spec = &meta.raster;
    if (spec.height(), spec.width()) != (cfg.raster_height, cfg.raster_width)
        || spec.x_range != cfg.x_range
        || spec.y_range != cfg.y_range
    {
        return Err(CliError::usage(format!(
            "dataset rasters are {}x{} over x {:?}, y {:?}; config expects {}x{} over x {:?}, y {:?}",
            spec.height(),
            spec.width(),
            spec.x_range,
            spec.y_range,
            cfg.raster_height,
            cfg.raster_width,
            cfg.x_range,
            cfg.y_range
        )));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::start("gen-data");
    let scene_cfg = SceneConfig {
        seed: a.seed,
        ..Default::default()
    };
    let spec = RasterSpec {
        resolution: a.resolution,
        ..Default::default()
    };
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    m.config(json!({ "scene": scene_cfg, "raster": spec, "scenes": a.scenes }))
        .seed(a.seed);
    let (scenes, diags) = generate_dataset(&scene_cfg, a.scenes, &spec)?;
    for d in &diags {
        eprintln!("warning: {d}");
    }
    write_dataset(&scenes, &spec, &a.out)
        .map_err(|e| CliError::usage(format!("cannot write dataset to {}: {e}", a.out.display())))?;
    m.output(&a.out);
    let manifest = m.finish();
    manifest.write(&manifest_path(&a.out, "gen-data"))?;
    println!(
        "wrote {} scenes to {} in {:.2}s",
        a.scenes,
        a.out.display(),
        manifest.wall_clock_secs
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut m = ManifestBuilder::start("train");
    let cfg = read_config(&a.config)?;
    cfg.validate().map_err(|e| CliError::usage(format!("{}: {e}", a.config.display())))?;
    let (meta, scenes) = read_dataset(&a.data)?;
    check_compatible(&meta, &cfg)?;
    m.config(config_json(&cfg)).seed(cfg.seed).input(&a.data).input(&a.config);
    let summary = detector::train(&scenes, &cfg, &a.out, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  mAP {}  TOPO {}",
            e.epoch,
            e.loss,
            e.map.map_or("-".into(), |v| format!("{v:.4}")),
            e.topo.map_or("-".into(), |v| format!("{v:.4}")),
        );
    })?;
    m.output(&summary.checkpoint)
        .output(&summary.log)
        .output(&a.out.join(detector::CONFIG_FILE));
    m.finish().write(&manifest_path(&a.out, "train"))?;
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<EvalReport> {
    let mut m = ManifestBuilder::start("eval");
    let (meta, scenes) = read_dataset(&a.data)?;
    m.input(&a.data);
    let report = if a.gt_as_pred {
        let evals: Vec<SceneEval> = scenes.iter().map(|s| SceneEval::gt_as_pred(&s.instances)).collect();
        let metric_cfg = match &a.checkpoint {
            Some(ck) => detector::metric_config(&load_trained(ck)?.0.cfg),
            None => MetricConfig::default(),
        };
        m.config(json!({ "gt_as_pred": true }));
        evaluate(&evals, &metric_cfg)
    } else {
        let ck = a.checkpoint.as_ref().expect("clap requires --checkpoint");
        let (det, store) = load_trained(ck)?;
        check_compatible(&meta, &det.cfg)?;
        m.config(config_json(&det.cfg)).seed(det.cfg.seed).input(ck);
        evaluate_model(&det, &store, &prepare(&scenes, &det.cfg)?)?
    };
    let report_path = match (&a.report, &a.checkpoint) {
        (Some(p), _) => p.clone(),
        (None, Some(ck)) => ck.parent().unwrap_or(Path::new(".")).join("eval_report.json"),
        (None, None) => a.data.join("eval_report.json"),
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&report_path, format!("{text}\n"))
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", report_path.display())))?;
    m.output(&report_path);
    let dir = report_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    m.finish().write(&manifest_path(dir, "eval"))?;
    println!("{text}");
    Ok(report)
}

pub fn render_suite(rep: &SuiteReport) -> String {
    let mut s = format!("{:<36} {:>6} {:>12}  {}\n", "op", "trials", "max rel err", "status");
    for o in &rep.ops {
        s += &format!(
            "{:<36} {:>6} {:>12.3e}  {}\n",
            o.op,
            o.trials,
            o.max_rel_err,
            if o.passed { "ok" } else { "FAIL" }
        );
    }
    s
}

pub fn grad_check(a: &GradCheckArgs) -> CliResult<SuiteReport> {
    let mut m = ManifestBuilder::start("grad-check");
    let cfg = match &a.config {
        Some(p) => {
            m.input(p);
            read_config(p)?
        }
        None => DetectorConfig::default(),
    };
    let opts = SuiteOptions {
        inject_fault: a.inject_fault.clone(),
        ..Default::default()
    };
    m.config(json!({ "detector": config_json(&cfg), "trials": opts.trials, "rel_tol": opts.rel_tol }))
        .seed(opts.seed);
    let rep = run_suite(&cfg, &opts)?;
    print!("{}", render_suite(&rep));
    eprintln!("manifest: {}", serde_json::to_string(&m.finish()).expect("manifest serializes"));
    let failed: Vec<String> = rep
        .failures()
        .map(|o| format!("{} (max rel err {:.3e}, worst at {})", o.op, o.max_rel_err, o.worst))
        .collect();
    if !failed.is_empty() {
        return Err(CliError::check(format!(
            "gradient check failed (tolerance {:e}): {}",
            rep.rel_tol,
            failed.join(", ")
        )));
    }
    println!("all {} ops within {:e}", rep.ops.len(), rep.rel_tol);
    Ok(rep)
}
