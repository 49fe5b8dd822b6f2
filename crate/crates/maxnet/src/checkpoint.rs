//! Binary checkpoints: every learnable parameter of a network plus enough
//! architecture metadata to rebuild it and detect mismatches.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MXN1"
//! 4       4     format version, u32 (currently 1)
//! 8       8     u64 FNV-1a hash of the canonical architecture string
//! 16      1     scalar width in bits (32 or 64)
//! 17      1     inverted-dropout flag (0 or 1)
//! 18      8     input keep probability, f64
//! 26      8     hidden keep probability, f64
//! 34      4     pool size, u32
//! 38      4     input width, u32
//! 42      4     output classes, u32
//! 46      4     hidden layer count H, u32
//! 50      4*H   presynaptic width of each hidden layer, u32 each
//! then, for each affine layer (H hidden, then output):
//!         4     input dimension, u32
//!         4     layer width, u32
//!         d*w*(bits/8)  weights, row-major
//!         w*(bits/8)    bias row
//! ```
//!
//! The file must end exactly at the last bias byte; anything shorter or
//! longer is rejected. The stored architecture hash is recomputed from the
//! metadata on load, so a corrupted header cannot pair weights with the
//! wrong shape silently.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{MaxoutNetwork, NetworkConfig};
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"MXN1";
const VERSION: u32 = 1;

/// 64-bit FNV-1a. Stable, dependency-free content hash for the
/// architecture string; not collision-resistant against adversaries and not
/// meant to be.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hash of the canonical architecture description for a config at the given
/// precision.
pub fn config_hash(cfg: &NetworkConfig, precision: &str) -> u64 {
    fnv1a64(cfg.arch_string(precision).as_bytes())
}

/// Serialize a network's architecture and parameters.
pub fn save<S: Scalar>(net: &MaxoutNetwork<S>, path: &Path) -> Result<()> {
    let cfg = net.config();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&config_hash(cfg, S::NAME).to_le_bytes());
    bytes.push(S::BITS as u8);
    bytes.push(cfg.inverted_dropout as u8);
    bytes.extend_from_slice(&cfg.input_keep.to_le_bytes());
    bytes.extend_from_slice(&cfg.hidden_keep.to_le_bytes());
    bytes.extend_from_slice(&(cfg.pool_size as u32).to_le_bytes());
    bytes.extend_from_slice(&(cfg.input_width as u32).to_le_bytes());
    bytes.extend_from_slice(&(cfg.output_classes as u32).to_le_bytes());
    bytes.extend_from_slice(&(cfg.hidden_widths.len() as u32).to_le_bytes());
    for &w in &cfg.hidden_widths {
        bytes.extend_from_slice(&(w as u32).to_le_bytes());
    }
    for i in 0..net.num_affine_layers() {
        let layer = net.affine_layer(i);
        bytes.extend_from_slice(&(layer.d_in() as u32).to_le_bytes());
        bytes.extend_from_slice(&(layer.width() as u32).to_le_bytes());
        for &v in layer.w().as_slice() {
            v.write_le(&mut bytes);
        }
        for &v in layer.b().as_slice() {
            v.write_le(&mut bytes);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset + n;
        if self.bytes.len() < end {
            return Err(Error::Length {
                path: self.path.to_path_buf(),
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Scalar width stored in a checkpoint, without loading the weights. Lets a
/// caller pick the right `load::<S>` instantiation.
pub fn peek_precision(path: &Path) -> Result<u32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    check_magic_and_version(&mut r)?;
    r.u64()?; // architecture hash
    Ok(r.byte()? as u32)
}

fn check_magic_and_version(r: &mut Reader) -> Result<()> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            path: r.path.to_path_buf(),
            reason: format!("magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            path: r.path.to_path_buf(),
            reason: format!("format version {version}, this build reads {VERSION}"),
        });
    }
    Ok(())
}

/// Deserialize a checkpoint into a freshly built network.
pub fn load<S: Scalar>(path: &Path) -> Result<MaxoutNetwork<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        offset: 0,
        path,
    };
    check_magic_and_version(&mut r)?;
    let stored_hash = r.u64()?;
    let bits = r.byte()? as u32;
    if bits != S::BITS {
        return Err(Error::Config(format!(
            "checkpoint {} stores {bits}-bit scalars, expected {}-bit",
            path.display(),
            S::BITS
        )));
    }
    let inverted = match r.byte()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("inverted-dropout flag must be 0 or 1, found {other}"),
            })
        }
    };
    let input_keep = r.f64()?;
    let hidden_keep = r.f64()?;
    let pool_size = r.u32()? as usize;
    let input_width = r.u32()? as usize;
    let output_classes = r.u32()? as usize;
    let hidden_count = r.u32()? as usize;
    let mut hidden_widths = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        hidden_widths.push(r.u32()? as usize);
    }
    let cfg = NetworkConfig {
        input_width,
        hidden_widths,
        pool_size,
        output_classes,
        input_keep,
        hidden_keep,
        inverted_dropout: inverted,
    };
    if config_hash(&cfg, S::NAME) != stored_hash {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "architecture hash mismatch: header corrupt or incompatible".into(),
        });
    }
    let mut net = MaxoutNetwork::new(cfg)?;
    let word = (S::BITS / 8) as usize;
    for i in 0..net.num_affine_layers() {
        let d_in = r.u32()? as usize;
        let width = r.u32()? as usize;
        let layer = net.affine_layer_mut(i);
        if d_in != layer.d_in() || width != layer.width() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "layer {i} stored as {d_in}x{width}, architecture needs {}x{}",
                    layer.d_in(),
                    layer.width()
                ),
            });
        }
        let w_bytes = r.take(d_in * width * word)?;
        for (slot, chunk) in layer
            .w_mut()
            .as_mut_slice()
            .iter_mut()
            .zip(w_bytes.chunks_exact(word))
        {
            *slot = S::read_le(chunk);
        }
        let b_bytes = r.take(width * word)?;
        for (slot, chunk) in layer
            .b_mut()
            .as_mut_slice()
            .iter_mut()
            .zip(b_bytes.chunks_exact(word))
        {
            *slot = S::read_le(chunk);
        }
    }
    if r.offset != bytes.len() {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: r.offset,
            actual: bytes.len(),
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{stream_rng, STREAM_INIT};

    fn test_net() -> MaxoutNetwork<f32> {
        let cfg = NetworkConfig {
            input_width: 6,
            hidden_widths: vec![8, 4],
            pool_size: 2,
            output_classes: 3,
            input_keep: 0.8,
            hidden_keep: 0.5,
            inverted_dropout: false,
        };
        let mut net = MaxoutNetwork::new(cfg).unwrap();
        let mut rng = stream_rng(31, STREAM_INIT);
        net.init_params(&mut rng);
        net
    }

    #[test]
    fn save_load_round_trips_parameters_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let net = test_net();
        save(&net, &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.config(), net.config());
        for i in 0..net.num_affine_layers() {
            assert_eq!(
                loaded.affine_layer(i).w().bit_pattern(),
                net.affine_layer(i).w().bit_pattern()
            );
            assert_eq!(
                loaded.affine_layer(i).b().bit_pattern(),
                net.affine_layer(i).b().bit_pattern()
            );
        }
    }

    #[test]
    fn peek_precision_reads_the_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&test_net(), &path).unwrap();
        assert_eq!(peek_precision(&path).unwrap(), 32);
    }

    #[test]
    fn wrong_precision_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&test_net(), &path).unwrap();
        let err = load::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn truncated_file_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&test_net(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        let err = load::<f32>(&cut).unwrap_err();
        assert!(matches!(err, Error::Length { .. }), "{err}");
    }

    #[test]
    fn trailing_garbage_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&test_net(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 1, 2]);
        let padded = dir.path().join("padded.ckpt");
        std::fs::write(&padded, &bytes).unwrap();
        let err = load::<f32>(&padded).unwrap_err();
        assert!(matches!(err, Error::Length { .. }), "{err}");
    }

    #[test]
    fn corrupted_header_fails_the_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save(&test_net(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[34] ^= 0xff; // pool size byte
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        let err = load::<f32>(&bad).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("hash"), "{err}");
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not-a-ckpt");
        std::fs::write(&path, b"nope, not a checkpoint at all").unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn fnv_hash_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
