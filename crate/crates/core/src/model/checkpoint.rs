//! MACR checkpoint container.
//!
//! Layout (little-endian): `"MACR"`, version u8, mode u8, cascades u8, Nγ u8,
//! u32 entry count, then per entry a u16 name length, the UTF-8 name and an
//! embedded MACT tensor. MAC entries are `dwp/{n}/{i}/weight|bias`, STATIC
//! entries `static/{n}/{i}/kernel`, with 1-based `n` and `i`. A finite DF λ
//! is stored as the one-element entry `config/df_lambda`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AffineMap, CnnBlockSpec, DwpParameters, ModelConfig, ModelMode, ReconModel, StaticKernels, Weights, LAYERS};
use crate::error::{Error, Result};
use crate::tensor::{read_mact_bytes, write_mact_bytes, DType, Tensor};

const MAGIC: &[u8; 4] = b"MACR";
pub const CHECKPOINT_VERSION: u8 = 1;
const LAMBDA_ENTRY: &str = "config/df_lambda";

fn entries(model: &ReconModel) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    match model.weights() {
        Weights::Mac(p) => {
            for (n, block) in p.blocks.iter().enumerate() {
                for (i, m) in block.iter().enumerate() {
                    out.push((format!("dwp/{}/{}/weight", n + 1, i + 1), &m.weight));
                    out.push((format!("dwp/{}/{}/bias", n + 1, i + 1), &m.bias));
                }
            }
        }
        Weights::Static(k) => {
            for (n, block) in k.blocks.iter().enumerate() {
                for (i, t) in block.iter().enumerate() {
                    out.push((format!("static/{}/{}/kernel", n + 1, i + 1), t));
                }
            }
        }
    }
    out
}

pub fn checkpoint_bytes(model: &ReconModel) -> Vec<u8> {
    let cfg = model.config();
    let lambda = cfg.df_lambda.map(|l| Tensor::from_parts(vec![1], vec![l]));
    let mut list = entries(model);
    if let Some(l) = &lambda {
        list.push((LAMBDA_ENTRY.to_string(), l));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(cfg.mode.code());
    buf.push(cfg.cascades as u8);
    buf.push(cfg.context_len as u8);
    buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
    for (name, t) in list {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_mact_bytes(t, DType::F64, &mut buf);
    }
    buf
}

pub fn save_checkpoint(model: &ReconModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ReconModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_checkpoint(&bytes, path)
}

/// Like [`load_checkpoint`] but fails with a mode-mismatch error unless the
/// stored model has mode `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: ModelMode) -> Result<ReconModel> {
    let model = load_checkpoint(path)?;
    if model.mode() != expected {
        return Err(Error::ModeMismatch {
            expected: expected.name(),
            found: model.mode().name(),
        });
    }
    Ok(model)
}

pub fn parse_checkpoint(bytes: &[u8], origin: &Path) -> Result<ReconModel> {
    let fail = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(fail("truncated checkpoint header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, expected MACR".into()));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(fail(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let mode = ModelMode::from_code(bytes[5]).ok_or_else(|| fail(format!("unknown mode code {}", bytes[5])))?;
    let cascades = bytes[6] as usize;
    let context_len = bytes[7] as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    let mut pos = 12;
    let mut found: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..count {
        if bytes.len() < pos + 2 {
            return Err(fail("truncated entry name length".into()));
        }
        let len = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) as usize;
        pos += 2;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| fail("truncated entry name".into()))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| fail("entry name is not UTF-8".into()))?
            .to_string();
        pos += len;
        let (t, used) = read_mact_bytes(&bytes[pos..], origin)?;
        pos += used;
        if found.insert(name.clone(), t).is_some() {
            return Err(fail(format!("duplicate entry {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - pos)));
    }

    let df_lambda = match found.remove(LAMBDA_ENTRY) {
        Some(t) if t.len() == 1 => Some(t.data()[0]),
        Some(t) => return Err(fail(format!("{LAMBDA_ENTRY} must hold one value, has {}", t.len()))),
        None => None,
    };
    let mut take = |name: String| found.remove(&name).ok_or_else(|| fail(format!("missing entry {name}")));

    let (block, weights) = match mode {
        ModelMode::Mac => {
            let mut blocks = Vec::with_capacity(cascades);
            for n in 1..=cascades {
                let mut maps = Vec::with_capacity(LAYERS);
                for i in 1..=LAYERS {
                    maps.push(AffineMap {
                        weight: take(format!("dwp/{n}/{i}/weight"))?,
                        bias: take(format!("dwp/{n}/{i}/bias"))?,
                    });
                }
                blocks.push(<[AffineMap; LAYERS]>::try_from(maps).expect("five layers"));
            }
            let block = blocks
                .first()
                .map(|b| infer_from_flat(b[0].bias.len(), b[1].bias.len()))
                .transpose()
                .map_err(fail)?;
            (
                block,
                Weights::Mac(DwpParameters {
                    context_len,
                    blocks,
                }),
            )
        }
        ModelMode::Static => {
            let mut blocks = Vec::with_capacity(cascades);
            for n in 1..=cascades {
                let ks = (1..=LAYERS)
                    .map(|i| take(format!("static/{n}/{i}/kernel")))
                    .collect::<Result<Vec<_>>>()?;
                blocks.push(<[Tensor; LAYERS]>::try_from(ks).expect("five layers"));
            }
            let block = blocks
                .first()
                .map(|b| match b[0].shape() {
                    [c, 1, k, k2] if k == k2 => Ok(CnnBlockSpec {
                        channels: *c,
                        kernel: *k,
                    }),
                    other => Err(format!("first kernel has shape {other:?}")),
                })
                .transpose()
                .map_err(fail)?;
            (block, Weights::Static(StaticKernels { blocks }))
        }
    };
    if let Some(extra) = found.keys().next() {
        return Err(fail(format!("unknown entry {extra}")));
    }
    let config = ModelConfig {
        mode,
        cascades,
        context_len,
        block: block.ok_or_else(|| fail("checkpoint has no cascades".into()))?,
        df_lambda,
        precision: Default::default(),
    };
    ReconModel::from_weights(config, weights).map_err(|e| fail(e.to_string()))
}

/// Recovers channels and kernel size from the flat sizes of layers 1 and 2
/// (`C·k²` and `C²·k²`).
fn infer_from_flat(first: usize, second: usize) -> std::result::Result<CnnBlockSpec, String> {
    let bad = || format!("cannot infer block shape from flat sizes {first}, {second}");
    if first == 0 || second % first != 0 {
        return Err(bad());
    }
    let channels = second / first;
    if first % channels != 0 {
        return Err(bad());
    }
    let k2 = first / channels;
    let kernel = (k2 as f64).sqrt().round() as usize;
    if kernel * kernel != k2 {
        return Err(bad());
    }
    Ok(CnnBlockSpec { channels, kernel })
}
