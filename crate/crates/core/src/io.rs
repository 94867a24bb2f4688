//! File formats: task JSON, density/similarity CSV, binary checkpoints,
//! and loss/report emission.
//!
//! Task schema (one JSON file per task):
//!
//! ```json
//! {
//!   "category_id": 3,
//!   "image": { "h": 64, "w": 64, "c": 1, "data": "<base64 LE f64>" },
//!   "dots": [[x, y], ...],
//!   "exemplar_boxes": [[x0, y0, x1, y1], ...]
//! }
//! ```
//!
//! `image.data` holds `c*h*w` little-endian 64-bit reals in `[c,h,w]`
//! row-major order. Boxes are half-open pixel bounds. Density maps export
//! as CSV with one line per image row; values print in shortest
//! round-trip form, so re-parsing reproduces the exact numbers.
//!
//! Checkpoints: magic `SIMC`, format version u32, parameter count u32,
//! then per parameter: name length u32, UTF-8 name, ndims u32, dims
//! (u32 each), values (little-endian f64). All integers little-endian.

use crate::counting::DensityMap;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::synthetic::CountingTask;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

// ── Fingerprints ────────────────────────────────────────────────────

/// FNV-1a 64-bit hash, hex-encoded. Used as a config fingerprint.
pub fn fingerprint(text: &str) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

// ── Task files ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ImageJson {
    h: usize,
    w: usize,
    c: usize,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct TaskJson {
    category_id: u32,
    image: ImageJson,
    dots: Vec<(f64, f64)>,
    exemplar_boxes: Vec<[f64; 4]>,
}

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = BASE64
        .decode(text)
        .map_err(|e| Error::Parse(format!("invalid base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse("binary payload length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn task_to_json(task: &CountingTask) -> String {
    let json = TaskJson {
        category_id: task.category_id,
        image: ImageJson {
            h: task.h,
            w: task.w,
            c: task.c,
            data: encode_f64s(&task.image),
        },
        dots: task.dots.clone(),
        exemplar_boxes: task.exemplar_boxes.clone(),
    };
    let mut s = serde_json::to_string_pretty(&json).expect("task serialization cannot fail");
    s.push('\n');
    s
}

pub fn task_from_json(text: &str) -> Result<CountingTask> {
    let json: TaskJson =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("bad task file: {e}")))?;
    let image = decode_f64s(&json.image.data)?;
    if image.len() != json.image.c * json.image.h * json.image.w {
        return Err(Error::Parse(format!(
            "image payload has {} values, expected {}",
            image.len(),
            json.image.c * json.image.h * json.image.w
        )));
    }
    Ok(CountingTask {
        category_id: json.category_id,
        c: json.image.c,
        h: json.image.h,
        w: json.image.w,
        image,
        dots: json.dots,
        exemplar_boxes: json.exemplar_boxes,
    })
}

pub fn save_task(path: &Path, task: &CountingTask) -> Result<()> {
    fs::write(path, task_to_json(task))?;
    Ok(())
}

pub fn load_task(path: &Path) -> Result<CountingTask> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    task_from_json(&text)
}

/// Load every `*.json` task in a directory, sorted by file name.
pub fn load_task_dir(dir: &Path) -> Result<Vec<CountingTask>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Io(format!("no task files in {}", dir.display())));
    }
    paths.iter().map(|p| load_task(p)).collect()
}

// ── Map exports ─────────────────────────────────────────────────────

/// CSV with one line per map row; values print in round-trip form.
pub fn map_to_csv(data: &[f64], h: usize, w: usize) -> String {
    assert_eq!(data.len(), h * w);
    let mut out = String::new();
    for row in data.chunks_exact(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn save_density_csv(path: &Path, map: &DensityMap) -> Result<()> {
    fs::write(path, map_to_csv(&map.data, map.h, map.w))?;
    Ok(())
}

pub fn parse_map_csv(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    for line in text.lines() {
        for field in line.split(',') {
            values.push(
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad CSV value '{field}': {e}")))?,
            );
        }
    }
    Ok(values)
}

// ── Checkpoints ─────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"SIMC";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut file =
        fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Load a checkpoint into a freshly initialized parameter set for
/// `config`. Every stored name must match a parameter of the model and
/// vice versa.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cur = Cursor { data: &bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut params = ModelParams::init(config)?;
    let mut filled = 0usize;
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse("checkpoint name is not UTF-8".into()))?;
        let ndims = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let param = params
            .get_mut(&name)
            .ok_or_else(|| Error::Parse(format!("checkpoint parameter {name} not in model")))?;
        if param.shape != shape {
            return Err(Error::Parse(format!(
                "checkpoint parameter {name} has shape {shape:?}, model expects {:?}",
                param.shape
            )));
        }
        param.value = values;
        filled += 1;
    }
    if filled != params.len() {
        return Err(Error::Parse(format!(
            "checkpoint holds {filled} parameters, model expects {}",
            params.len()
        )));
    }
    Ok(params)
}

// ── Generic JSON / text emission ────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("serialization failed: {e}")))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}
