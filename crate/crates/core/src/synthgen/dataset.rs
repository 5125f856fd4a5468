//! On-disk dataset: `scenes.jsonl` (one scene per line), one `.bevr` raster
//! per scene under `rasters/`, and a `meta.json` sidecar carrying the format
//! version and raster geometry.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raster::{rasterize, BevRaster, RasterDiagnostic, RasterSpec};
use super::scene::{generate_indexed_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::Instance;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const RASTER_MAGIC: &[u8; 4] = b"BEVR";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: u64,
    pub instances: Vec<Instance>,
    pub raster: BevRaster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub num_scenes: usize,
    pub raster: RasterSpec,
}

#[derive(Serialize, Deserialize)]
struct SceneLine {
    scene_id: u64,
    instances: Vec<Instance>,
    raster_file: String,
}

/// Generates `n` scenes; scene `i` uses the child stream `(cfg.seed, i)`.
pub fn generate_dataset(
    cfg: &SceneConfig,
    n: usize,
    spec: &RasterSpec,
) -> Result<(Vec<Scene>, Vec<RasterDiagnostic>)> {
    let mut scenes = Vec::with_capacity(n);
    let mut diags = Vec::new();
    for i in 0..n {
        let gen = generate_indexed_scene(cfg, i as u64)?;
        let (raster, d) = rasterize(&gen.instances, spec)?;
        diags.extend(d);
        scenes.push(Scene {
            scene_id: i as u64,
            instances: gen.instances,
            raster,
        });
    }
    Ok((scenes, diags))
}

fn raster_name(id: u64) -> String {
    format!("rasters/scene_{id:06}.bevr")
}

pub fn encode_raster(r: &BevRaster) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * r.data.len());
    buf.extend_from_slice(RASTER_MAGIC);
    for v in [r.height, r.width, r.channels] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &r.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_raster(bytes: &[u8], resolution: f64, path: &Path) -> Result<BevRaster> {
    let parse = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 16 {
        return Err(parse(bytes.len(), "truncated raster header".into()));
    }
    if &bytes[..4] != RASTER_MAGIC {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            expected: "BEVR".into(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| parse(4, format!("raster dimensions {h}x{w}x{c} overflow")))?;
    if bytes.len() < expected {
        return Err(parse(
            bytes.len(),
            format!("truncated raster data: expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(parse(expected, "trailing bytes after raster data".into()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(BevRaster {
        height: h,
        width: w,
        channels: c,
        resolution,
        data,
    })
}

/// Writes `scenes` under directory `dir`, creating it if needed.
///
/// All rasters must share one resolution; `spec` records the grid geometry.
pub fn write_dataset(scenes: &[Scene], spec: &RasterSpec, dir: &Path) -> Result<()> {
    if let Some(s) = scenes.iter().find(|s| s.raster.resolution != spec.resolution) {
        return Err(Error::InvalidArgument(format!(
            "scene {} has resolution {} but dataset uses {}",
            s.scene_id, s.raster.resolution, spec.resolution
        )));
    }
    let raster_dir = dir.join("rasters");
    fs::create_dir_all(&raster_dir).map_err(|e| Error::io(&raster_dir, e))?;

    let mut lines = Vec::new();
    for s in scenes {
        let name = raster_name(s.scene_id);
        let rpath = dir.join(&name);
        fs::write(&rpath, encode_raster(&s.raster)).map_err(|e| Error::io(&rpath, e))?;
        let line = SceneLine {
            scene_id: s.scene_id,
            instances: s.instances.clone(),
            raster_file: name,
        };
        serde_json::to_writer(&mut lines, &line).expect("scene serializes");
        lines.push(b'\n');
    }
    let spath = dir.join(SCENES_FILE);
    let mut f = fs::File::create(&spath).map_err(|e| Error::io(&spath, e))?;
    f.write_all(&lines).map_err(|e| Error::io(&spath, e))?;

    let meta = DatasetMeta {
        format_version: DATASET_FORMAT_VERSION,
        num_scenes: scenes.len(),
        raster: *spec,
    };
    let mpath = dir.join(META_FILE);
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let mpath = dir.join(META_FILE);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| json_error(&mpath, &bytes, 0, &e))?;
    let found = value.get("format_version").and_then(|v| v.as_u64());
    if found != Some(DATASET_FORMAT_VERSION as u64) {
        return Err(Error::VersionMismatch {
            path: mpath,
            found: value
                .get("format_version")
                .map_or_else(|| "missing".to_string(), |v| v.to_string()),
            expected: DATASET_FORMAT_VERSION.to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse {
        path: mpath,
        offset: 0,
        message: e.to_string(),
    })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<Scene>)> {
    let meta = read_meta(dir)?;
    let spath = dir.join(SCENES_FILE);
    let bytes = fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    let mut scenes = Vec::new();
    let mut start = 0usize;
    while start < bytes.len() {
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |p| start + p);
        let line = &bytes[start..end];
        if !line.iter().all(u8::is_ascii_whitespace) {
            let parsed: SceneLine =
                serde_json::from_slice(line).map_err(|e| json_error(&spath, line, start, &e))?;
            for (k, inst) in parsed.instances.iter().enumerate() {
                inst.check().map_err(|m| Error::Parse {
                    path: spath.clone(),
                    offset: start as u64,
                    message: format!("scene {} instance {k}: {m}", parsed.scene_id),
                })?;
            }
            let rpath = resolve_raster(dir, &parsed.raster_file, &spath, start)?;
            let rbytes = fs::read(&rpath).map_err(|e| Error::io(&rpath, e))?;
            let raster = decode_raster(&rbytes, meta.raster.resolution, &rpath)?;
            scenes.push(Scene {
                scene_id: parsed.scene_id,
                instances: parsed.instances,
                raster,
            });
        }
        start = end + 1;
    }
    if scenes.len() != meta.num_scenes {
        return Err(Error::Parse {
            path: spath,
            offset: bytes.len() as u64,
            message: format!(
                "found {} scenes but {} declares {}",
                scenes.len(),
                META_FILE,
                meta.num_scenes
            ),
        });
    }
    Ok((meta, scenes))
}

fn resolve_raster(dir: &Path, name: &str, spath: &Path, offset: usize) -> Result<PathBuf> {
    let rel = Path::new(name);
    let escapes = rel.is_absolute()
        || rel
            .components()
            .any(|c| !matches!(c, std::path::Component::Normal(_)));
    if escapes {
        return Err(Error::Parse {
            path: spath.to_path_buf(),
            offset: offset as u64,
            message: format!("raster_file {name:?} must be a relative path inside the dataset"),
        });
    }
    Ok(dir.join(rel))
}

/// Converts a serde error inside `chunk` (starting at byte `base` of the
/// file) into an error carrying the absolute byte offset.
fn json_error(path: &Path, chunk: &[u8], base: usize, e: &serde_json::Error) -> Error {
    let mut off = 0usize;
    let mut line = 1usize;
    for (i, &b) in chunk.iter().enumerate() {
        if line == e.line() {
            off = i;
            break;
        }
        if b == b'\n' {
            line += 1;
            off = i + 1;
        }
    }
    let local = if e.is_eof() {
        chunk.len()
    } else {
        (off + e.column().saturating_sub(1)).min(chunk.len())
    };
    Error::Parse {
        path: path.to_path_buf(),
        offset: (base + local) as u64,
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(n: usize) -> (Vec<Scene>, RasterSpec) {
        let spec = RasterSpec {
            resolution: 1.0,
            ..Default::default()
        };
        let cfg = SceneConfig {
            seed: 5,
            ..Default::default()
        };
        (generate_dataset(&cfg, n, &spec).unwrap().0, spec)
    }

    fn assert_same(a: &[Scene], b: &[Scene]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.scene_id, y.scene_id);
            assert_eq!(x.instances, y.instances);
            for (p, q) in x.instances.iter().zip(&y.instances) {
                for (u, v) in p.points.iter().zip(&q.points) {
                    assert_eq!((u.x.to_bits(), u.y.to_bits()), (v.x.to_bits(), v.y.to_bits()));
                }
            }
            assert!(x.raster.bit_eq(&y.raster));
        }
    }

    #[test]
    fn round_trip_ten_scenes() {
        let (scenes, spec) = small_dataset(10);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, &spec, dir.path()).unwrap();
        let (meta, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(meta.num_scenes, 10);
        assert_eq!(meta.raster, spec);
        assert_same(&scenes, &back);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], &RasterSpec::default(), dir.path()).unwrap();
        let (_, back) = read_dataset(dir.path()).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn truncated_jsonl_reports_offset() {
        let (scenes, spec) = small_dataset(3);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, &spec, dir.path()).unwrap();
        let p = dir.path().join(SCENES_FILE);
        let bytes = fs::read(&p).unwrap();
        let first_nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let cut = first_nl + 40;
        fs::write(&p, &bytes[..cut]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, cut as u64, "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_raster_reports_offset() {
        let (scenes, spec) = small_dataset(1);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&scenes, &spec, dir.path()).unwrap();
        let p = dir.path().join(raster_name(0));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset == (bytes.len() - 7) as u64));
        assert!(err.to_string().contains("byte offset"));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], &RasterSpec::default(), dir.path()).unwrap();
        let p = dir.path().join(META_FILE);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&p, text).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { ref found, .. } if found == "9"), "{err}");
    }

    #[test]
    fn bad_raster_magic_is_version_error() {
        let r = BevRaster::zeros(1, 1, 1, 1.0);
        let mut b = encode_raster(&r);
        b[0] = b'X';
        assert!(matches!(
            decode_raster(&b, 1.0, Path::new("x")),
            Err(Error::VersionMismatch { .. })
        ));
    }

    #[test]
    fn raster_header_layout() {
        let mut r = BevRaster::zeros(2, 3, 4, 0.5);
        r.data[5] = 0.25;
        let b = encode_raster(&r);
        assert_eq!(&b[..4], b"BEVR");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 4);
        assert_eq!(b.len(), 16 + 2 * 3 * 4 * 4);
        assert_eq!(f32::from_le_bytes(b[16 + 20..16 + 24].try_into().unwrap()), 0.25);
        assert!(decode_raster(&b, 0.5, Path::new("x")).unwrap().bit_eq(&r));
    }

    #[test]
    fn escaping_raster_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[], &RasterSpec::default(), dir.path()).unwrap();
        let meta = dir.path().join(META_FILE);
        let t = fs::read_to_string(&meta).unwrap().replace("\"num_scenes\": 0", "\"num_scenes\": 1");
        fs::write(&meta, t).unwrap();
        fs::write(
            dir.path().join(SCENES_FILE),
            "{\"scene_id\":0,\"instances\":[],\"raster_file\":\"../x.bevr\"}\n",
        )
        .unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { .. })));
    }
}
