//! Versioned checkpoint container.
//!
//! Layout: a text header of `key=value` lines opened by the magic line
//! `CCN-CKPT-v1` and closed by a blank line, then one record per parameter
//! array: an ASCII line `name rows cols` followed immediately by
//! `rows*cols` 64-bit little-endian floats. Arrays appear in the model's
//! canonical entry order. The header carries the hyperparameters, the
//! variant, the seed lineage, and an FNV-1a schema fingerprint that load
//! recomputes and verifies.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::contrastive::HyperParams;
use crate::embedding::EmbeddingSchema;
use crate::graph::Value;
use crate::model::{fingerprint_of, ModelParams, ModelSchema, ModelVariant};
use crate::params::ParamStore;

pub const FORMAT_VERSION: &str = "CCN-CKPT-v1";

#[derive(Debug)]
pub enum CheckpointError {
    Io { path: String, source: std::io::Error },
    BadMagic { found: String },
    UnsupportedVersion { found: String },
    BadHeader { detail: String },
    Corrupt { detail: String },
    SchemaMismatch { detail: String },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io { path, source } => write!(f, "{path}: {source}"),
            CheckpointError::BadMagic { found } => {
                write!(f, "not a checkpoint (first line `{found}`)")
            }
            CheckpointError::UnsupportedVersion { found } => {
                write!(f, "unsupported checkpoint version `{found}`, expected {FORMAT_VERSION}")
            }
            CheckpointError::BadHeader { detail } => write!(f, "bad header: {detail}"),
            CheckpointError::Corrupt { detail } => write!(f, "corrupt container: {detail}"),
            CheckpointError::SchemaMismatch { detail } => write!(f, "schema mismatch: {detail}"),
        }
    }
}

impl std::error::Error for CheckpointError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CheckpointError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

fn join_usizes(xs: &[usize]) -> String {
    if xs.is_empty() {
        return "-".to_string();
    }
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usizes(s: &str) -> Result<Vec<usize>, CheckpointError> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse::<usize>().map_err(|_| CheckpointError::BadHeader {
                detail: format!("`{p}` is not an integer"),
            })
        })
        .collect()
}

/// Serialize parameters to bytes.
pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let schema = &params.schema;
    let emb = &schema.embedding;
    let hyper = &params.hyper;
    let mut head = String::new();
    head.push_str(FORMAT_VERSION);
    head.push('\n');
    head.push_str(&format!("fingerprint={:016x}\n", params.fingerprint()));
    head.push_str(&format!("variant={}\n", params.variant.name()));
    head.push_str(&format!("seed={}\n", params.seed));
    head.push_str(&format!("dim={}\n", emb.dim));
    head.push_str(&format!("heads={}\n", schema.heads));
    head.push_str(&format!("item_buckets={}\n", emb.item_buckets));
    head.push_str(&format!("category_buckets={}\n", emb.category_buckets));
    head.push_str(&format!("seller_buckets={}\n", emb.seller_buckets));
    head.push_str(&format!("user_buckets={}\n", emb.user_buckets));
    head.push_str(&format!("profile_fields={}\n", emb.profile_fields));
    head.push_str(&format!("profile_buckets={}\n", emb.profile_buckets));
    head.push_str(&format!("cm_hidden={}\n", join_usizes(&schema.cm_hidden)));
    head.push_str(&format!("pred_hidden={}\n", join_usizes(&schema.pred_hidden)));
    head.push_str(&format!("l_short={}\n", schema.l_short));
    head.push_str(&format!("l_long={}\n", schema.l_long));
    head.push_str(&format!("tau={}\n", hyper.tau));
    head.push_str(&format!("xi={}\n", hyper.xi));
    head.push_str(&format!("lambda={}\n", hyper.lambda));
    head.push_str(&format!("learning_rate={}\n", hyper.learning_rate));
    head.push_str(&format!("batch_size={}\n", hyper.batch_size));
    head.push_str(&format!("arrays={}\n", params.store.len()));
    head.push('\n');

    let mut out = head.into_bytes();
    for (name, value) in params.store.entries() {
        out.extend_from_slice(format!("{name} {} {}\n", value.rows(), value.cols()).as_bytes());
        for x in value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Write a checkpoint file.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, checkpoint_bytes(params)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        let rest = &self.bytes[self.at..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CheckpointError::Corrupt { detail: "missing newline".to_string() })?;
        self.at += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| CheckpointError::Corrupt {
            detail: "non-utf8 header line".to_string(),
        })
    }

    fn raw(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt {
                detail: format!(
                    "expected {n} more bytes, found {}",
                    self.bytes.len() - self.at
                ),
            });
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
}

/// Parse checkpoint bytes back into parameters.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams, CheckpointError> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.line()?;
    if magic != FORMAT_VERSION {
        if magic.starts_with("CCN-CKPT-") {
            return Err(CheckpointError::UnsupportedVersion { found: magic.to_string() });
        }
        return Err(CheckpointError::BadMagic { found: magic.to_string() });
    }

    let mut fields: HashMap<String, String> = HashMap::new();
    loop {
        let line = cur.line()?;
        if line.is_empty() {
            break;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CheckpointError::BadHeader {
            detail: format!("`{line}` is not key=value"),
        })?;
        fields.insert(key.to_string(), value.to_string());
    }

    let get = |key: &str| -> Result<&String, CheckpointError> {
        fields.get(key).ok_or_else(|| CheckpointError::BadHeader {
            detail: format!("missing key `{key}`"),
        })
    };
    let get_usize = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?.parse::<usize>().map_err(|_| CheckpointError::BadHeader {
            detail: format!("`{key}` is not an integer"),
        })
    };
    let get_f64 = |key: &str| -> Result<f64, CheckpointError> {
        get(key)?.parse::<f64>().map_err(|_| CheckpointError::BadHeader {
            detail: format!("`{key}` is not a number"),
        })
    };

    let variant = ModelVariant::parse(get("variant")?).ok_or_else(|| CheckpointError::BadHeader {
        detail: format!("unknown variant `{}`", fields["variant"]),
    })?;
    let seed = get("seed")?.parse::<u64>().map_err(|_| CheckpointError::BadHeader {
        detail: "`seed` is not an integer".to_string(),
    })?;

    let schema = ModelSchema {
        embedding: EmbeddingSchema {
            dim: get_usize("dim")?,
            item_buckets: get_usize("item_buckets")?,
            category_buckets: get_usize("category_buckets")?,
            seller_buckets: get_usize("seller_buckets")?,
            user_buckets: get_usize("user_buckets")?,
            profile_fields: get_usize("profile_fields")?,
            profile_buckets: get_usize("profile_buckets")?,
        },
        heads: get_usize("heads")?,
        cm_hidden: parse_usizes(get("cm_hidden")?)?,
        pred_hidden: parse_usizes(get("pred_hidden")?)?,
        l_short: get_usize("l_short")?,
        l_long: get_usize("l_long")?,
    };
    let hyper = HyperParams {
        tau: get_f64("tau")?,
        xi: get_f64("xi")?,
        lambda: get_f64("lambda")?,
        dim: schema.embedding.dim,
        heads: schema.heads,
        learning_rate: get_f64("learning_rate")?,
        batch_size: get_usize("batch_size")?,
        l_short: schema.l_short,
        l_long: schema.l_long,
    };
    schema
        .validate()
        .map_err(|detail| CheckpointError::SchemaMismatch { detail })?;
    hyper
        .validate()
        .map_err(|detail| CheckpointError::SchemaMismatch { detail })?;

    let stated = u64::from_str_radix(get("fingerprint")?, 16).map_err(|_| {
        CheckpointError::BadHeader { detail: "fingerprint is not hex".to_string() }
    })?;
    let computed = fingerprint_of(&schema, &hyper, variant);
    if stated != computed {
        return Err(CheckpointError::SchemaMismatch {
            detail: format!(
                "fingerprint {stated:016x} does not match schema ({computed:016x})"
            ),
        });
    }

    let n_arrays = get_usize("arrays")?;
    let expected = ModelParams::expected_entries(&schema, variant);
    if n_arrays != expected.len() {
        return Err(CheckpointError::SchemaMismatch {
            detail: format!(
                "container declares {n_arrays} arrays, schema expects {}",
                expected.len()
            ),
        });
    }

    let mut store = ParamStore::new();
    for (want_name, (want_rows, want_cols)) in &expected {
        let line = cur.line()?;
        let mut parts = line.split(' ');
        let name = parts.next().unwrap_or("");
        let rows = parts.next().and_then(|s| s.parse::<usize>().ok());
        let cols = parts.next().and_then(|s| s.parse::<usize>().ok());
        let (rows, cols) = match (rows, cols) {
            (Some(r), Some(c)) => (r, c),
            _ => {
                return Err(CheckpointError::Corrupt {
                    detail: format!("bad array header `{line}`"),
                })
            }
        };
        if name != want_name || rows != *want_rows || cols != *want_cols {
            return Err(CheckpointError::SchemaMismatch {
                detail: format!(
                    "array `{name}` ({rows}x{cols}) where schema expects `{want_name}` ({want_rows}x{want_cols})"
                ),
            });
        }
        let raw = cur.raw(rows * cols * 8)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        store.add(name, Value::new(rows, cols, data));
    }
    if cur.at != bytes.len() {
        return Err(CheckpointError::Corrupt {
            detail: format!("{} trailing bytes after last array", bytes.len() - cur.at),
        });
    }

    Ok(ModelParams::assemble(schema, hyper, variant, store, seed))
}

/// Load a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(variant: ModelVariant) -> ModelParams {
        let hyper = HyperParams { dim: 8, heads: 2, l_short: 4, l_long: 6, ..HyperParams::default() };
        let mut schema = ModelSchema::from_hyper(&hyper);
        schema.embedding.item_buckets = 40;
        schema.embedding.category_buckets = 10;
        schema.embedding.seller_buckets = 12;
        schema.embedding.user_buckets = 16;
        schema.embedding.profile_buckets = 8;
        schema.cm_hidden = vec![8];
        schema.pred_hidden = vec![12, 6];
        ModelParams::init(schema, hyper, variant, 31)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let original = params(ModelVariant::Ccn);
        let bytes = checkpoint_bytes(&original);
        let loaded = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.variant, original.variant);
        assert_eq!(loaded.seed, original.seed);
        assert_eq!(loaded.schema, original.schema);
        assert_eq!(loaded.store.len(), original.store.len());
        for ((na, va), (nb, vb)) in loaded.store.entries().zip(original.store.entries()) {
            assert_eq!(na, nb);
            assert_eq!(va.shape(), vb.shape());
            // bit equality, not approximate
            let bits_a: Vec<u64> = va.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = vb.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "array {na} differs");
        }
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = std::env::temp_dir().join("ccn-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let original = params(ModelVariant::Tan);
        save_checkpoint(&original, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.variant, ModelVariant::Tan);
        assert_eq!(
            loaded.store.get("pred.w0").unwrap().data(),
            original.store.get("pred.w0").unwrap().data()
        );
    }

    #[test]
    fn wrong_version_is_versioned_error() {
        let mut bytes = checkpoint_bytes(&params(ModelVariant::Ccn));
        // rewrite the magic line to a future version of the same family
        let magic_len = FORMAT_VERSION.len();
        bytes.splice(..magic_len, "CCN-CKPT-v9".bytes());
        match checkpoint_from_bytes(&bytes).unwrap_err() {
            CheckpointError::UnsupportedVersion { found } => assert_eq!(found, "CCN-CKPT-v9"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn garbage_magic_is_bad_magic() {
        let err = checkpoint_from_bytes(b"hello world\n").unwrap_err();
        assert!(matches!(err, CheckpointError::BadMagic { .. }));
    }

    #[test]
    fn truncated_container_is_corrupt() {
        let bytes = checkpoint_bytes(&params(ModelVariant::Ccn));
        let cut = &bytes[..bytes.len() - 100];
        let err = checkpoint_from_bytes(cut).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt { .. }), "{err}");
    }

    #[test]
    fn edited_dim_fails_fingerprint_check() {
        let mut bytes = checkpoint_bytes(&params(ModelVariant::Ccn));
        let pos = bytes.windows(6).position(|w| w == b"\ndim=8").unwrap();
        bytes[pos + 5] = b'4';
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, CheckpointError::SchemaMismatch { .. }), "{err}");
    }

    #[test]
    fn renamed_array_is_named_in_error() {
        let bytes = checkpoint_bytes(&params(ModelVariant::Ccn));
        let pos = bytes
            .windows(11)
            .position(|w| w == b"emb.item_id")
            .unwrap();
        let mut bad = bytes.clone();
        bad[pos..pos + 11].copy_from_slice(b"emb.itemxid");
        match checkpoint_from_bytes(&bad).unwrap_err() {
            CheckpointError::SchemaMismatch { detail } => {
                assert!(detail.contains("emb.itemxid"), "{detail}");
            }
            other => panic!("unexpected {other}"),
        }
    }
}
