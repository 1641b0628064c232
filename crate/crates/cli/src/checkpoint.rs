//! Weight files: a fixed header, the architecture as JSON, a tensor table,
//! and a trailing checksum. All integers are little-endian so files move
//! across platforms.
//!
//! ```text
//! "CTN1"               magic
//! u32  version         currently 1
//! u32  config length   followed by that many bytes of UTF-8 JSON
//! u32  tensor count    checksum region starts at this field
//! per tensor:
//!   u32 name length, the UTF-8 name
//!   u32 rank, then one u32 extent per axis
//!   f32 values, row-major, IEEE-754 bit patterns
//! u64  FNV-1a digest of the checksum region
//! ```
//!
//! Values are written as raw bit patterns, so a save/load cycle is
//! bit-identical, NaN payloads included. Every FNV-1a step is an xor and a
//! multiply by an odd constant, both invertible in the running state, so
//! any single corrupted byte in the tensor table changes the digest.

use std::fs;
use std::io::Write;
use std::path::Path;

use ctn_core::model::{ModelConfig, ModelParams, build};
use ctn_core::{Error, Result};

const MAGIC: &[u8; 4] = b"CTN1";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Write through a temp file in the destination directory and rename into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serialize parameters to the format above.
pub fn encode(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let config_json = serde_json::to_string(&params.config)
        .map_err(|e| Error::Data(format!("config does not serialize: {e}")))?;
    let named = params.named_tensors();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());

    let table_start = out.len();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let digest = fnv1a(&out[table_start..]);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("checkpoint truncated reading {what}")))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::Data(format!("checkpoint {what} is not UTF-8")))
    }
}

/// Parse a checkpoint back into parameters. The digest is verified before
/// any of the tensor table is trusted, so a flipped byte surfaces as
/// corruption rather than as a confusing shape or name error.
pub fn decode(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Data("not a checkpoint: magic mismatch".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let clen = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_str(r.str(clen, "config")?)
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    config.validate()?;

    if bytes.len() < r.at + 8 {
        return Err(Error::Data("checkpoint truncated before the digest".into()));
    }
    let table = &bytes[r.at..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if fnv1a(table) != stored {
        return Err(Error::Data(
            "checkpoint corrupted: tensor table does not match its digest".into(),
        ));
    }
    r.buf = &bytes[..bytes.len() - 8];

    // Build a skeleton from the config and overwrite every tensor in file
    // order. Name-by-name matching ties the table to the architecture; a
    // file that verifies but disagrees with its own config is rejected.
    let mut params: ModelParams<f32> = build(&config, 0)?;
    let count = r.u32("tensor count")? as usize;
    let mut named = params.named_tensors_mut();
    if count != named.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {count} tensors, the config calls for {}",
            named.len()
        )));
    }
    for (name, t) in named.iter_mut() {
        let nlen = r.u32("name length")? as usize;
        let fname = r.str(nlen, "tensor name")?;
        if fname != name.as_str() {
            return Err(Error::Data(format!(
                "tensor {fname:?} where {name:?} was expected"
            )));
        }
        let rank = r.u32("rank")? as usize;
        if rank != t.shape().len() {
            return Err(Error::Data(format!(
                "tensor {name}: rank {rank}, expected {}",
                t.shape().len()
            )));
        }
        for axis in 0..rank {
            let got = r.u32("extent")? as usize;
            let want = t.shape()[axis];
            if got != want {
                return Err(Error::Data(format!(
                    "tensor {name}: axis {axis} has extent {got}, expected {want}"
                )));
            }
        }
        let raw = r.take(4 * t.numel(), "tensor values")?;
        for (dst, src) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_bits(u32::from_le_bytes(src.try_into().unwrap()));
        }
    }
    if r.at != r.buf.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} trailing bytes after the tensor table",
            r.buf.len() - r.at
        )));
    }
    Ok(params)
}

pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let bytes =
        fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ctn_core::model::{EncoderKind, MaskKind, param_count};

    fn micro() -> ModelConfig {
        ModelConfig {
            n_filters: 8,
            filter_len: 4,
            bottleneck: 4,
            block_channels: 8,
            skip_channels: 4,
            kernel: 3,
            blocks_per_repeat: 2,
            repeats: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let params: ModelParams<f32> = build(&micro(), 41).unwrap();
        let first = encode(&params).unwrap();
        let loaded = decode(&first).unwrap();
        assert_eq!(encode(&loaded).unwrap(), first);

        for ((an, a), (bn, b)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(an, &bn);
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn table_counts_match_param_count() {
        let cfg = micro();
        let params: ModelParams<f32> = build(&cfg, 7).unwrap();
        let named = params.named_tensors();
        let scalars: usize = named.iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(scalars, param_count(&cfg));

        // The file stores exactly those tensors: count field, then per
        // tensor 4 bytes per value plus name and shape framing.
        let bytes = encode(&params).unwrap();
        let framing: usize =
            named.iter().map(|(n, t)| 4 + n.len() + 4 + 4 * t.shape().len()).sum();
        let config_json = serde_json::to_string(&params.config).unwrap();
        let expect = 4 + 4 + 4 + config_json.len() + 4 + framing + 4 * scalars + 8;
        assert_eq!(bytes.len(), expect);
    }

    #[test]
    fn pinv_encoder_has_no_encoder_tensor() {
        let cfg =
            ModelConfig { encoder: EncoderKind::Pinv, mask: MaskKind::Softmax, ..micro() };
        let params: ModelParams<f32> = build(&cfg, 3).unwrap();
        let first = encode(&params).unwrap();
        let loaded = decode(&first).unwrap();
        assert!(loaded.encoder.is_none());
        assert_eq!(encode(&loaded).unwrap(), first);
    }

    #[test]
    fn every_flipped_table_byte_is_caught() {
        // Small model so the sweep over every byte stays fast.
        let cfg = ModelConfig {
            n_filters: 4,
            filter_len: 4,
            bottleneck: 2,
            block_channels: 4,
            skip_channels: 2,
            kernel: 3,
            blocks_per_repeat: 1,
            repeats: 1,
            ..ModelConfig::default()
        };
        let params: ModelParams<f32> = build(&cfg, 11).unwrap();
        let bytes = encode(&params).unwrap();
        let config_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let table_start = 12 + config_len;

        for i in table_start..bytes.len() {
            for flip in [0x01u8, 0x80] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                assert!(
                    decode(&bad).is_err(),
                    "flip of bit {flip:#x} at byte {i} went undetected"
                );
            }
        }
    }

    #[test]
    fn rejects_foreign_and_damaged_headers() {
        let params: ModelParams<f32> = build(&micro(), 0).unwrap();
        let bytes = encode(&params).unwrap();

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(decode(&wrong_magic).unwrap_err().to_string().contains("magic"));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(decode(&wrong_version).unwrap_err().to_string().contains("version"));

        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        assert!(decode(b"").is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
    }

    #[test]
    fn save_and_load_go_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params: ModelParams<f32> = build(&micro(), 19).unwrap();
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(encode(&loaded).unwrap(), encode(&params).unwrap());

        let missing = load(&dir.path().join("absent.ckpt")).unwrap_err();
        assert!(matches!(missing, Error::Data(_)));
    }
}
