//! Self-describing binary checkpoint.
//!
//! Layout (little-endian):
//!   magic "ATMC" | version u16 | dtype u8 (4|8) | quant bits u8
//!   arch_len u32 | architecture JSON
//!   layer_count u16, then per layer:
//!     transposed u8 | uses_factors u8 | bias_len u32 | bias f32...
//!     three matrices (U, V, C), each:
//!       rows u32 | cols u32 | encoding u8
//!       encoding 0 (raw):      rows*cols f32 values
//!       encoding 1 (quantized): n_values u32 | codebook f32... |
//!                               rows*cols indices packed at bits+1 bits each
//!                               (index 0 = zero, i > 0 = codebook[i-1])
//!       encoding 2 (all-zero): nothing
//!   sha256 of everything above (32 bytes)
//!
//! Values are stored as f32; for f32 models save/load is the identity.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AtmcError, Result};
use crate::model::{ArchitectureSpec, ModelParams, ParamTriple};
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 4] = b"ATMC";
const VERSION: u16 = 1;

const ENC_RAW: u8 = 0;
const ENC_QUANT: u8 = 1;
const ENC_ZERO: u8 = 2;

struct BitWriter {
    buf: Vec<u8>,
    acc: u64,
    nbits: u32,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            buf: Vec::new(),
            acc: 0,
            nbits: 0,
        }
    }

    fn push(&mut self, value: u32, width: u32) {
        debug_assert!(width <= 32 && (width == 32 || value < (1 << width)));
        self.acc = (self.acc << width) | value as u64;
        self.nbits += width;
        while self.nbits >= 8 {
            self.nbits -= 8;
            self.buf.push(((self.acc >> self.nbits) & 0xFF) as u8);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.buf.push(((self.acc << (8 - self.nbits)) & 0xFF) as u8);
        }
        self.buf
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    nbits: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        BitReader {
            bytes,
            pos: 0,
            acc: 0,
            nbits: 0,
        }
    }

    fn pull(&mut self, width: u32) -> Option<u32> {
        while self.nbits < width {
            let b = *self.bytes.get(self.pos)?;
            self.pos += 1;
            self.acc = (self.acc << 8) | b as u64;
            self.nbits += 8;
        }
        self.nbits -= width;
        Some(((self.acc >> self.nbits) & ((1u64 << width) - 1)) as u32)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AtmcError::CheckpointTruncated { offset: self.pos });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Index width for a b-bit codebook: the zero slot makes it 2^b + 1 symbols.
fn index_width(bits: u8) -> u32 {
    (bits as u32) + 1
}

fn encode_matrix<E: Element>(m: &Tensor<E>, bits: u8, out: &mut Vec<u8>) -> Result<()> {
    let rows = m.shape()[0] as u32;
    let cols = m.shape()[1] as u32;
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    let values_f32: Vec<f32> = m.data().iter().map(|&v| v.as_f64() as f32).collect();
    if values_f32.iter().all(|&v| v == 0.0) {
        out.push(ENC_ZERO);
        return Ok(());
    }
    if bits >= 32 {
        out.push(ENC_RAW);
        for v in &values_f32 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        return Ok(());
    }
    // Codebook of distinct nonzero f32 values, ascending.
    let mut codebook: Vec<f32> = values_f32.iter().copied().filter(|&v| v != 0.0).collect();
    codebook.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite weight"));
    codebook.dedup();
    if codebook.len() > (1usize << bits) {
        return Err(AtmcError::InfeasibleQuantization {
            distinct: codebook.len(),
            bits,
        });
    }
    out.push(ENC_QUANT);
    out.extend_from_slice(&(codebook.len() as u32).to_le_bytes());
    for v in &codebook {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut bw = BitWriter::new();
    let width = index_width(bits);
    for &v in &values_f32 {
        let idx = if v == 0.0 {
            0u32
        } else {
            1 + codebook
                .binary_search_by(|x| x.partial_cmp(&v).unwrap())
                .expect("value missing from codebook") as u32
        };
        bw.push(idx, width);
    }
    let packed = bw.finish();
    out.extend_from_slice(&(packed.len() as u32).to_le_bytes());
    out.extend_from_slice(&packed);
    Ok(())
}

fn decode_matrix<E: Element>(cur: &mut Cursor<'_>, bits: u8) -> Result<Tensor<E>> {
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let numel = rows * cols;
    let enc = cur.u8()?;
    match enc {
        ENC_ZERO => Ok(Tensor::zeros(&[rows, cols])),
        ENC_RAW => {
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(E::from_f64(cur.f32()? as f64));
            }
            Tensor::new(vec![rows, cols], data)
        }
        ENC_QUANT => {
            let n_values = cur.u32()? as usize;
            let mut codebook = Vec::with_capacity(n_values);
            for _ in 0..n_values {
                codebook.push(cur.f32()?);
            }
            let packed_len = cur.u32()? as usize;
            let packed = cur.take(packed_len)?;
            let mut br = BitReader::new(packed);
            let width = index_width(bits);
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let idx = br
                    .pull(width)
                    .ok_or(AtmcError::CheckpointTruncated { offset: cur.pos })?
                    as usize;
                if idx == 0 {
                    data.push(E::zero());
                } else if idx <= codebook.len() {
                    data.push(E::from_f64(codebook[idx - 1] as f64));
                } else {
                    return Err(AtmcError::CheckpointTruncated { offset: cur.pos });
                }
            }
            Tensor::new(vec![rows, cols], data)
        }
        _ => Err(AtmcError::CheckpointTruncated { offset: cur.pos }),
    }
}

/// Serialize a model. `bits < 32` stores every matrix through a codebook at
/// bits+1 bits per entry and fails if any matrix exceeds 2^bits distinct
/// nonzero values; `bits = 32` stores raw f32 values.
pub fn save_checkpoint<E: Element>(model: &ModelParams<E>, bits: u8, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match E::DTYPE {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    });
    out.push(bits);
    let arch_json = serde_json::to_vec(&model.arch)?;
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch_json);
    out.extend_from_slice(&(model.layers.len() as u16).to_le_bytes());
    for t in &model.layers {
        out.push(t.transposed as u8);
        out.push(t.uses_factors as u8);
        out.extend_from_slice(&(t.bias.numel() as u32).to_le_bytes());
        for &b in t.bias.data() {
            out.extend_from_slice(&(b.as_f64() as f32).to_le_bytes());
        }
        for m in [&t.u, &t.v, &t.c] {
            encode_matrix(m, bits, &mut out)?;
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    std::fs::write(path, out)?;
    Ok(())
}

/// Read just the stored dtype, verifying magic and version.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    peek_header(path).map(|(d, _)| d)
}

/// Read the stored dtype and quantization bit width.
pub fn peek_header(path: &Path) -> Result<(Dtype, u8)> {
    let bytes = std::fs::read(path)?;
    parse_header(&bytes)
}

fn parse_header(bytes: &[u8]) -> Result<(Dtype, u8)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(AtmcError::CheckpointBadMagic);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(AtmcError::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let dtype = match bytes[6] {
        4 => Dtype::F32,
        8 => Dtype::F64,
        other => {
            return Err(AtmcError::CheckpointDtype {
                found: format!("tag {}", other),
                requested: "f32|f64".to_string(),
            })
        }
    };
    Ok((dtype, bytes[7]))
}

/// Load a checkpoint saved at the same element precision.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<ModelParams<E>> {
    let bytes = std::fs::read(path)?;
    let (dtype, bits) = parse_header(&bytes)?;
    if dtype != E::DTYPE {
        return Err(AtmcError::CheckpointDtype {
            found: dtype.name().to_string(),
            requested: E::DTYPE.name().to_string(),
        });
    }
    if bytes.len() < 32 {
        return Err(AtmcError::CheckpointTruncated { offset: bytes.len() });
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != trailer {
        return Err(AtmcError::CheckpointChecksum);
    }

    let mut cur = Cursor {
        bytes: payload,
        pos: 8,
    };
    let arch_len = cur.u32()? as usize;
    let arch_bytes = cur.take(arch_len)?;
    let arch: ArchitectureSpec = serde_json::from_slice(arch_bytes)?;
    let layer_count = cur.u16()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let transposed = cur.u8()? != 0;
        let uses_factors = cur.u8()? != 0;
        let bias_len = cur.u32()? as usize;
        let mut bias = Vec::with_capacity(bias_len);
        for _ in 0..bias_len {
            bias.push(E::from_f64(cur.f32()? as f64));
        }
        let u = decode_matrix::<E>(&mut cur, bits)?;
        let v = decode_matrix::<E>(&mut cur, bits)?;
        let c = decode_matrix::<E>(&mut cur, bits)?;
        layers.push(ParamTriple {
            u,
            v,
            c,
            bias: Tensor::from_vec(bias),
            transposed,
            uses_factors,
        });
    }
    let model = ModelParams { arch, layers };
    // Shape sanity against the declared architecture.
    let shapes = model.arch.layer_shapes()?;
    if shapes.len() != model.layers.len() {
        return Err(AtmcError::InvalidConfig(
            "checkpoint layer count does not match architecture".into(),
        ));
    }
    for (s, t) in shapes.iter().zip(model.layers.iter()) {
        let (m, n) = if s.rows >= s.cols {
            (s.rows, s.cols)
        } else {
            (s.cols, s.rows)
        };
        if t.c.shape() != [m, n] || t.u.shape() != [m, m] || t.bias.numel() != s.rows {
            return Err(AtmcError::InvalidConfig(
                "checkpoint matrix shapes do not match architecture".into(),
            ));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureSpec;
    use crate::projections::{quantize_model, ZkOptions};

    #[test]
    fn roundtrip_raw_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.atmc");
        let arch = ArchitectureSpec::mlp_small();
        let model: ModelParams<f32> = ModelParams::init_factorized(&arch, 3).unwrap();
        save_checkpoint(&model, 32, &path).unwrap();
        let back: ModelParams<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(model.arch, back.arch);
        for (a, b) in model.layers.iter().zip(back.layers.iter()) {
            assert!(a.u.bits_eq(&b.u) && a.v.bits_eq(&b.v) && a.c.bits_eq(&b.c));
            assert!(a.bias.bits_eq(&b.bias));
            assert_eq!(a.transposed, b.transposed);
            assert_eq!(a.uses_factors, b.uses_factors);
        }
    }

    #[test]
    fn roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.atmc");
        let arch = ArchitectureSpec::mlp_small();
        let mut model: ModelParams<f32> = ModelParams::init_factorized(&arch, 4).unwrap();
        quantize_model(&mut model, 3, &ZkOptions::default(), 9);
        save_checkpoint(&model, 3, &path).unwrap();
        let back: ModelParams<f32> = load_checkpoint(&path).unwrap();
        for (a, b) in model.layers.iter().zip(back.layers.iter()) {
            assert!(a.u.bits_eq(&b.u) && a.v.bits_eq(&b.v) && a.c.bits_eq(&b.c));
        }
    }

    #[test]
    fn too_many_distinct_values_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.atmc");
        let arch = ArchitectureSpec::mlp_small();
        let model: ModelParams<f32> = ModelParams::init_factorized(&arch, 5).unwrap();
        // Fresh uniform init has far more than 2 distinct values.
        assert!(matches!(
            save_checkpoint(&model, 1, &path),
            Err(AtmcError::InfeasibleQuantization { .. })
        ));
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.atmc");
        let arch = ArchitectureSpec::mlp_small();
        let model: ModelParams<f32> = ModelParams::init_factorized(&arch, 6).unwrap();
        save_checkpoint(&model, 32, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Flip a payload byte: checksum failure.
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0xFF;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(AtmcError::CheckpointChecksum)
        ));

        // Truncated file.
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        // Version bump.
        let mut vers = bytes.clone();
        vers[4] = 99;
        std::fs::write(&path, &vers).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(AtmcError::CheckpointVersion { found: 99, .. })
        ));

        // Wrong magic.
        let mut mag = bytes.clone();
        mag[0] = b'X';
        std::fs::write(&path, &mag).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(AtmcError::CheckpointBadMagic)
        ));
    }

    #[test]
    fn dtype_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.atmc");
        let arch = ArchitectureSpec::mlp_small();
        let model: ModelParams<f64> = ModelParams::init_factorized(&arch, 7).unwrap();
        save_checkpoint(&model, 32, &path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), Dtype::F64);
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(AtmcError::CheckpointDtype { .. })
        ));
    }
}
