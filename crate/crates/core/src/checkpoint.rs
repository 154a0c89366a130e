//! Model checkpoints.
//!
//! A checkpoint is a short text header followed by raw parameters:
//!
//! ```text
//! DLRM-CHECKPOINT\n
//! version 1\n
//! digest <16 hex digits>\n
//! config <DlrmConfig as one line of JSON>\n
//! params <count>\n
//! <count little-endian f64 values>
//! ```
//!
//! The digest is 64-bit FNV-1a over the config JSON bytes. Parameters follow
//! [`DlrmModel::flat_params`]: for the bottom and then the top MLP, each
//! layer's row-major `n_out × n_in` weight followed by its bias; then each
//! embedding table's row-major `m × d` weights in table order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::datagen::fnv1a64;
use crate::error::{Error, Result};
use crate::model::{DlrmConfig, DlrmModel};

pub const MAGIC: &str = "DLRM-CHECKPOINT";
pub const VERSION: u32 = 1;

pub fn config_digest(config: &DlrmConfig) -> u64 {
    fnv1a64(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn write_checkpoint(model: &DlrmModel, mut w: impl Write) -> std::io::Result<()> {
    let json = serde_json::to_string(&model.config).expect("config serializes");
    let params = model.flat_params();
    write!(
        w,
        "{MAGIC}\nversion {VERSION}\ndigest {:016x}\nconfig {json}\nparams {}\n",
        fnv1a64(json.as_bytes()),
        params.len()
    )?;
    let mut buf = Vec::with_capacity(params.len() * 8);
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()
}

fn header_line(r: &mut impl BufRead, source: &Path, line: usize, key: &str) -> Result<String> {
    let mut s = String::new();
    r.read_line(&mut s).map_err(|e| Error::io(source, e))?;
    let s = s.strip_suffix('\n').unwrap_or(&s);
    let bad = |reason: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason,
    };
    if key.is_empty() {
        return Ok(s.to_string());
    }
    s.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::to_string)
        .ok_or_else(|| bad(format!("expected `{key} ...`, found {s:?}")))
}

pub fn read_checkpoint(r: impl Read, source: &Path) -> Result<DlrmModel> {
    let mut r = BufReader::new(r);
    let bad = |line: usize, reason: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        reason,
    };
    let magic = header_line(&mut r, source, 1, "")?;
    if magic != MAGIC {
        return Err(bad(1, "not a checkpoint file".into()));
    }
    let version = header_line(&mut r, source, 2, "version")?;
    if version != VERSION.to_string() {
        return Err(bad(2, format!("unsupported version {version}")));
    }
    let digest = header_line(&mut r, source, 3, "digest")?;
    let digest = u64::from_str_radix(&digest, 16).map_err(|e| bad(3, format!("bad digest: {e}")))?;
    let json = header_line(&mut r, source, 4, "config")?;
    if fnv1a64(json.as_bytes()) != digest {
        return Err(bad(4, "config does not match its digest".into()));
    }
    let config: DlrmConfig = serde_json::from_str(&json).map_err(|e| bad(4, format!("bad config: {e}")))?;
    let count: usize = header_line(&mut r, source, 5, "params")?
        .parse()
        .map_err(|e| bad(5, format!("bad parameter count: {e}")))?;

    let mut model = DlrmModel::zeros(config)?;
    if count != model.param_count() {
        return Err(bad(
            5,
            format!("{count} parameters stored, the config needs {}", model.param_count()),
        ));
    }
    let mut bytes = Vec::with_capacity(count * 8);
    r.read_to_end(&mut bytes).map_err(|e| Error::io(source, e))?;
    if bytes.len() != count * 8 {
        return Err(bad(6, format!("expected {} parameter bytes, found {}", count * 8, bytes.len())));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut fill = |dst: &mut [f64]| {
        for v in dst {
            *v = values.next().expect("count checked");
        }
    };
    for mlp in [&mut model.bottom, &mut model.top] {
        for layer in mlp.layers_mut() {
            fill(layer.weight.as_mut_slice());
            fill(&mut layer.bias);
        }
    }
    for t in &mut model.tables {
        fill(t.weights_mut().as_mut_slice());
    }
    Ok(model)
}

pub fn save(model: &DlrmModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<DlrmModel> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(f, path)
}
