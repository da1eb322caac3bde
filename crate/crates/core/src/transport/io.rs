//! Binary velocity-field files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EFVF"            magic, 4 bytes
//! version           u16 (currently 1)
//! kind              u8  (0 = affine, 1 = mlp, 2 = rotation)
//! dimension         u32
//! [mlp only]        u32 layer count, then that many u32 layer sizes
//! payload           f64 parameters
//! checksum          u64 FNV-1a over the payload bytes
//! ```
//!
//! Payload contents: affine `μ₁..μ_d, σ`; rotation `ω`; mlp the flat
//! parameter vector in [`MlpVelocityField`] layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::VelocityField;
use crate::flow_training::MlpVelocityField;

pub const MAGIC: &[u8; 4] = b"EFVF";
pub const FORMAT_VERSION: u16 = 1;

const KIND_AFFINE: u8 = 0;
const KIND_MLP: u8 = 1;
const KIND_ROTATION: u8 = 2;

#[derive(Debug, Error)]
pub enum FieldFormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown field kind tag {0}")]
    UnknownKind(u8),
    #[error("header truncated while reading {0}")]
    TruncatedHeader(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("payload truncated: expected {expected} parameters, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Serializes a field to bytes.
pub fn write_field(field: &VelocityField) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let params: Vec<f64> = match field {
        VelocityField::Affine(a) => {
            out.push(KIND_AFFINE);
            out.extend_from_slice(&(a.mean.len() as u32).to_le_bytes());
            a.mean.iter().copied().chain(std::iter::once(a.scale)).collect()
        }
        VelocityField::Mlp(m) => {
            out.push(KIND_MLP);
            out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
            let sizes = m.layer_sizes();
            out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
            for &s in sizes {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            m.params().to_vec()
        }
        VelocityField::Rotation(r) => {
            out.push(KIND_ROTATION);
            out.extend_from_slice(&(r.dim as u32).to_le_bytes());
            vec![r.rate]
        }
    };
    let start = out.len();
    for p in &params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let checksum = fnv1a64(&out[start..]);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FieldFormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FieldFormatError::TruncatedHeader(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FieldFormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a field from bytes.
pub fn read_field(bytes: &[u8]) -> Result<VelocityField, FieldFormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(FieldFormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FieldFormatError::UnsupportedVersion(version));
    }
    let kind = r.take(1, "kind")?[0];
    let dim = r.u32("dimension")? as usize;
    if dim == 0 {
        return Err(FieldFormatError::DimensionMismatch("dimension is zero".into()));
    }

    let (n_params, sizes) = match kind {
        KIND_AFFINE => (dim + 1, Vec::new()),
        KIND_ROTATION => (1, Vec::new()),
        KIND_MLP => {
            let count = r.u32("layer count")? as usize;
            if count < 2 {
                return Err(FieldFormatError::DimensionMismatch(format!(
                    "mlp needs at least 2 layer sizes, header lists {count}"
                )));
            }
            let mut sizes = Vec::with_capacity(count);
            for _ in 0..count {
                sizes.push(r.u32("layer sizes")? as usize);
            }
            if sizes[0] != dim + 1 || sizes[count - 1] != dim {
                return Err(FieldFormatError::DimensionMismatch(format!(
                    "layer sizes {sizes:?} inconsistent with dimension {dim}"
                )));
            }
            (MlpVelocityField::param_count_for(&sizes), sizes)
        }
        other => return Err(FieldFormatError::UnknownKind(other)),
    };

    let remaining = bytes.len() - r.pos;
    let payload_bytes = n_params * 8;
    if remaining < payload_bytes + 8 {
        let found = remaining.saturating_sub(8) / 8;
        return Err(FieldFormatError::TruncatedPayload {
            expected: n_params,
            found,
        });
    }
    let payload = r.take(payload_bytes, "payload")?;
    let stored = u64::from_le_bytes(r.take(8, "checksum")?.try_into().unwrap());
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(FieldFormatError::ChecksumMismatch { stored, computed });
    }
    if r.pos != bytes.len() {
        return Err(FieldFormatError::TrailingBytes(bytes.len() - r.pos));
    }
    let params: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let invalid = |e: super::TransportError| FieldFormatError::InvalidParameters(e.to_string());
    match kind {
        KIND_AFFINE => {
            let scale = params[dim];
            VelocityField::affine(params[..dim].to_vec(), scale).map_err(invalid)
        }
        KIND_ROTATION => {
            VelocityField::rotation(dim, params[0]).map_err(invalid)
        }
        _ => MlpVelocityField::from_parts(sizes, params)
            .map(VelocityField::Mlp)
            .map_err(|e| FieldFormatError::InvalidParameters(e.to_string())),
    }
}

/// Writes a field file atomically (temporary file, then rename).
pub fn save_field(field: &VelocityField, path: impl AsRef<Path>) -> Result<(), FieldFormatError> {
    let path = path.as_ref();
    let tmp = path.with_extension("efvf.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&write_field(field))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<VelocityField, FieldFormatError> {
    read_field(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_mlp() -> VelocityField {
        VelocityField::Mlp(MlpVelocityField::init(2, &[5, 4], 3))
    }

    #[test]
    fn round_trip_each_kind() {
        let fields = [
            VelocityField::affine(vec![1.5, -2.0, 0.25], 0.7).unwrap(),
            VelocityField::rotation(3, -0.4).unwrap(),
            sample_mlp(),
        ];
        for f in fields {
            let back = read_field(&write_field(&f)).unwrap();
            assert_eq!(back, f);
        }
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = write_field(&sample_mlp());
        bytes[0] = b'X';
        assert!(matches!(read_field(&bytes), Err(FieldFormatError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = write_field(&sample_mlp());
        let cut = &bytes[..bytes.len() - 40];
        match read_field(cut) {
            Err(FieldFormatError::TruncatedPayload { expected, found }) => assert!(found < expected),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inconsistent_dimension() {
        let mut bytes = write_field(&sample_mlp());
        // dimension field sits after magic (4), version (2) and kind (1)
        bytes[7..11].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(
            read_field(&bytes),
            Err(FieldFormatError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = write_field(&sample_mlp());
        let n = bytes.len();
        bytes[n - 12] ^= 0x01;
        assert!(matches!(
            read_field(&bytes),
            Err(FieldFormatError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn unknown_kind_and_version() {
        let mut bytes = write_field(&sample_mlp());
        bytes[6] = 9;
        assert!(matches!(read_field(&bytes), Err(FieldFormatError::UnknownKind(9))));
        let mut bytes = write_field(&sample_mlp());
        bytes[4] = 7;
        assert!(matches!(
            read_field(&bytes),
            Err(FieldFormatError::UnsupportedVersion(7))
        ));
        assert!(matches!(
            read_field(b"EFV"),
            Err(FieldFormatError::TruncatedHeader("magic"))
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = write_field(&VelocityField::rotation(2, 1.0).unwrap());
        bytes.push(0);
        assert!(matches!(read_field(&bytes), Err(FieldFormatError::TrailingBytes(1))));
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.efvf");
        let f = sample_mlp();
        save_field(&f, &path).unwrap();
        assert_eq!(load_field(&path).unwrap(), f);
    }
}
