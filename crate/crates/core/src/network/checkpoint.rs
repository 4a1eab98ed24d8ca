//! Binary checkpoints: the magic `GCAPS1`, a length-prefixed UTF-8
//! `key=value` manifest, then every parameter as (name length, name, rank,
//! dims, values). All integers are u64 little-endian, all values f64
//! little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ArchConfig, Model, NetError, Param, ROUTING_WEIGHT_STD};
use crate::data_io::write_atomic;
use crate::routing::RoutingConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"GCAPS1";

fn manifest(arch: &ArchConfig, routing: &RoutingConfig) -> Vec<(&'static str, String)> {
    let (c, h, w) = arch.input;
    vec![
        ("input_channels", c.to_string()),
        ("input_height", h.to_string()),
        ("input_width", w.to_string()),
        ("stem_channels", arch.stem_channels.to_string()),
        ("stem_kernel", arch.stem_kernel.to_string()),
        ("primary_types", arch.primary_types.to_string()),
        ("primary_dim", arch.primary_dim.to_string()),
        ("primary_kernel", arch.primary_kernel.to_string()),
        ("primary_stride", arch.primary_stride.to_string()),
        ("num_classes", arch.num_classes.to_string()),
        ("digit_dim", arch.digit_dim.to_string()),
        ("decoder_hidden1", arch.decoder_hidden.0.to_string()),
        ("decoder_hidden2", arch.decoder_hidden.1.to_string()),
        ("routing", routing.to_string()),
        ("routing_iterations", routing.iterations.to_string()),
        ("routing_weight_std", ROUTING_WEIGHT_STD.to_string()),
    ]
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), NetError> {
    let mut bytes = CHECKPOINT_MAGIC.to_vec();
    let text: String = manifest(&model.arch, &model.routing)
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_u64(&mut bytes, text.len() as u64);
    bytes.extend(text.as_bytes());
    for param in model.params() {
        put_u64(&mut bytes, param.name.len() as u64);
        bytes.extend(param.name.as_bytes());
        let shape = param.value.shape();
        put_u64(&mut bytes, shape.len() as u64);
        for &d in shape {
            put_u64(&mut bytes, d as u64);
        }
        for &x in param.value.data() {
            bytes.extend(x.to_le_bytes());
        }
    }
    let path = path.as_ref();
    write_atomic(path, &bytes).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn put_u64(bytes: &mut Vec<u8>, x: u64) {
    bytes.extend(x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NetError> {
        if self.bytes.len() - self.pos < n {
            return Err(NetError::Corrupt {
                path: self.path.clone(),
                reason: format!("truncated reading {what} at offset {}", self.pos),
            });
        }
        let bytes: &'a [u8] = self.bytes;
        let out = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64, NetError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, NetError> {
        let n = self.u64(what)?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(self.corrupt(format!("{what} {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn corrupt(&self, reason: String) -> NetError {
        NetError::Corrupt {
            path: self.path.clone(),
            reason,
        }
    }
}

fn parse_manifest(reader: &mut Reader) -> Result<BTreeMap<String, String>, NetError> {
    let len = reader.len("manifest length")?;
    let raw = reader.take(len, "manifest")?;
    let text = std::str::from_utf8(raw).map_err(|_| reader.corrupt("manifest is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| reader.corrupt(format!("malformed manifest line `{line}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn config_from_manifest(map: &BTreeMap<String, String>, path: &str) -> Result<(ArchConfig, RoutingConfig), NetError> {
    let corrupt = |reason: String| NetError::Corrupt {
        path: path.to_string(),
        reason,
    };
    let get = |key: &str| -> Result<&String, NetError> {
        map.get(key).ok_or_else(|| corrupt(format!("manifest lacks `{key}`")))
    };
    let num = |key: &str| -> Result<usize, NetError> {
        let raw = get(key)?;
        raw.parse().map_err(|_| corrupt(format!("manifest `{key}={raw}` is not a count")))
    };
    let arch = ArchConfig {
        input: (num("input_channels")?, num("input_height")?, num("input_width")?),
        stem_channels: num("stem_channels")?,
        stem_kernel: num("stem_kernel")?,
        primary_types: num("primary_types")?,
        primary_dim: num("primary_dim")?,
        primary_kernel: num("primary_kernel")?,
        primary_stride: num("primary_stride")?,
        num_classes: num("num_classes")?,
        digit_dim: num("digit_dim")?,
        decoder_hidden: (num("decoder_hidden1")?, num("decoder_hidden2")?),
    };
    let routing: RoutingConfig = get("routing")?.parse().map_err(|e: String| corrupt(e))?;
    Ok((arch, routing.with_iterations(num("routing_iterations")?)))
}

/// Loads a checkpoint, taking architecture and routing from its manifest.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, NetError> {
    load(path.as_ref(), None)
}

/// Loads a checkpoint and rejects it unless its manifest describes exactly
/// `arch` and `routing`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, arch: &ArchConfig, routing: &RoutingConfig) -> Result<Model, NetError> {
    load(path.as_ref(), Some((arch, routing)))
}

fn load(path: &Path, expected: Option<(&ArchConfig, &RoutingConfig)>) -> Result<Model, NetError> {
    let shown = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| NetError::Io {
        path: shown.clone(),
        source,
    })?;
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(NetError::BadMagic { path: shown });
    }
    let mut reader = Reader {
        bytes: &bytes,
        pos: CHECKPOINT_MAGIC.len(),
        path: shown.clone(),
    };
    let map = parse_manifest(&mut reader)?;
    if let Some((arch, routing)) = expected {
        for (key, want) in manifest(arch, routing) {
            let found = map.get(key).cloned().unwrap_or_else(|| "<missing>".into());
            if found != want {
                return Err(NetError::ManifestMismatch {
                    key: key.to_string(),
                    expected: want,
                    found,
                });
            }
        }
    }
    let (arch, routing) = config_from_manifest(&map, &shown)?;
    let shapes = arch.parameter_shapes()?;
    let mut params = Vec::with_capacity(shapes.len());
    for (name, shape) in shapes {
        let name_len = reader.len("parameter name length")?;
        let found = reader.take(name_len, "parameter name")?;
        if found != name.as_bytes() {
            return Err(reader.corrupt(format!(
                "expected parameter `{name}`, found `{}`",
                String::from_utf8_lossy(found)
            )));
        }
        let rank = reader.len("rank")?;
        let dims = (0..rank)
            .map(|_| reader.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims != shape {
            return Err(reader.corrupt(format!("parameter `{name}` has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = shape.iter().product();
        let raw = reader.take(count * 8, "parameter values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name: name.to_string(),
            value: Tensor::new(&shape, values)?,
        });
    }
    if reader.pos != bytes.len() {
        return Err(reader.corrupt(format!("{} trailing bytes", bytes.len() - reader.pos)));
    }
    Ok(Model::from_params(arch, routing, params))
}
