//! Deterministic persistence: the `TSR1` tensor container, CSV reports, and
//! flat key-value run manifests.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset  size       field
//! 0       4          magic "TSR1"
//! 4       1          dtype: 1 = f32, 2 = f64
//! 5       1          ndim
//! 6       8 * ndim   dims as u64
//! ...     n * size   row-major payload
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::denoiser::GmmModel;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::report::MetricsReport;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TSR1";
const HEADER_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }
}

pub fn encode_tensor(x: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let ndim = u8::try_from(x.shape().len())
        .map_err(|_| Error::param("ndim", format!("{} dims exceed 255", x.shape().len())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * ndim as usize + dtype.size() * x.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.push(ndim);
    for &d in x.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => x
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => x
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(
            0,
            format!("bad magic {:?}, expected \"TSR1\"", &bytes[..4]),
        ));
    }
    let dtype = Dtype::from_code(bytes[4])
        .ok_or_else(|| format_err(4, format!("unsupported dtype code {}", bytes[4])))?;
    let ndim = bytes[5] as usize;
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(format_err(
            bytes.len(),
            format!(
                "{ndim} dims need {dims_end} header bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for i in 0..ndim {
        let off = HEADER_LEN + 8 * i;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
        count = count
            .checked_mul(d)
            .ok_or_else(|| format_err(off, "dims product overflows u64"))?;
        shape.push(usize::try_from(d).map_err(|_| format_err(off, "dim exceeds usize"))?);
    }
    let expected = count
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| format_err(HEADER_LEN, "payload size overflows u64"))?;
    let actual = (bytes.len() - dims_end) as u64;
    if actual != expected {
        return Err(format_err(
            dims_end,
            format!("payload length mismatch: expected {expected} bytes, got {actual}"),
        ));
    }
    let payload = &bytes[dims_end..];
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(shape, data)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write `x` as f64.
pub fn write_tensor(path: impl AsRef<Path>, x: &Tensor) -> Result<()> {
    write_tensor_as(path, x, Dtype::F64)
}

pub fn write_tensor_as(path: impl AsRef<Path>, x: &Tensor, dtype: Dtype) -> Result<()> {
    write_bytes(path.as_ref(), &encode_tensor(x, dtype)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_tensor(&read_bytes(path)?).map_err(|e| match e {
        Error::Format { offset, reason } => Error::Format {
            offset,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    write_bytes(path.as_ref(), report.to_csv().as_bytes())
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_bytes(path.as_ref(), text.as_bytes())
}

/// Model files inside `dir`: `weights.tsr`, `means.tsr` (stacked), and
/// `component_std.tsr` (rank 0).
pub fn write_model(dir: impl AsRef<Path>, model: &GmmModel) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let files = [
        (
            dir.join("weights.tsr"),
            Tensor::from_vec(model.weights().to_vec()),
        ),
        (dir.join("means.tsr"), Tensor::stack(&model.means())?),
        (
            dir.join("component_std.tsr"),
            Tensor::scalar(model.component_std()),
        ),
    ];
    for (p, t) in &files {
        write_tensor(p, t)?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

pub fn read_model(dir: impl AsRef<Path>) -> Result<GmmModel> {
    let dir = dir.as_ref();
    let weights = read_tensor(dir.join("weights.tsr"))?.into_data();
    let means = read_tensor(dir.join("means.tsr"))?.unstack()?;
    let s = read_tensor(dir.join("component_std.tsr"))?;
    GmmModel::new(weights, means, s.data()[0])
}

/// `{prefix}_states.tsr` (T + 1 stacked states) and `{prefix}_eps.tsr`.
pub fn write_trajectory(
    dir: impl AsRef<Path>,
    prefix: &str,
    traj: &Trajectory,
) -> Result<Vec<PathBuf>> {
    traj.check_complete()?;
    let dir = dir.as_ref();
    let states = dir.join(format!("{prefix}_states.tsr"));
    let eps = dir.join(format!("{prefix}_eps.tsr"));
    write_tensor(&states, &Tensor::stack(&traj.states)?)?;
    write_tensor(&eps, &Tensor::stack(&traj.eps_records)?)?;
    Ok(vec![states, eps])
}

/// Flat `key=value` run manifest.
///
/// Keys keep insertion order. `manifest_hash` is a SHA-256 over every entry
/// except the sidecar keys (`status`), so a manifest rewritten with the same
/// parameters hashes identically.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

const UNHASHED_KEYS: &[&str] = &["status"];
const ARTIFACT_PREFIX: &str = "artifact.";

impl RunManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((key, value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Register an artifact path relative to the run directory.
    pub fn add_artifact(&mut self, name: &str, relative: impl AsRef<Path>) -> &mut Self {
        let rel = relative.as_ref().to_string_lossy().replace('\\', "/");
        self.set(format!("{ARTIFACT_PREFIX}{name}"), rel)
    }

    pub fn artifacts(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(ARTIFACT_PREFIX).map(|n| (n, v.as_str())))
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            if UNHASHED_KEYS.contains(&k.as_str()) {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out.push_str("manifest_hash=");
        out.push_str(&self.hash());
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::new();
        let mut seen = BTreeSet::new();
        let mut offset = 0usize;
        let mut stored_hash = None;
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format_err(offset, format!("line without '=': {line:?}")))?;
            if !seen.insert(k.to_string()) {
                return Err(format_err(offset, format!("duplicate key {k:?}")));
            }
            if k == "manifest_hash" {
                stored_hash = Some(v.to_string());
            } else {
                m.set(k, v);
            }
            offset += line.len() + 1;
        }
        if let Some(h) = stored_hash {
            if h != m.hash() {
                return Err(format_err(0, "manifest_hash does not match entries"));
            }
        }
        Ok(m)
    }

    /// Write to `path`, verifying every artifact exists under `root`.
    pub fn write(&self, path: impl AsRef<Path>, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for (name, rel) in self.artifacts() {
            let p = root.join(rel);
            if !p.exists() {
                return Err(Error::Precondition(format!(
                    "artifact {name} missing at {}",
                    p.display()
                )));
            }
        }
        write_bytes(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_bytes(path.as_ref())?;
        let text = String::from_utf8(bytes)
            .map_err(|e| format_err(e.utf8_error().valid_up_to(), "manifest is not UTF-8"))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn round_trip_is_bit_identical() {
        let x = Tensor::randn(&[3, 8, 8], &mut stream(1, Purpose::InitialNoise, 0));
        let back = decode_tensor(&encode_tensor(&x, Dtype::F64).unwrap()).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(back
            .data()
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn f32_round_trip_rounds_once() {
        let x = Tensor::from_vec(vec![0.1, -2.5]);
        let back = decode_tensor(&encode_tensor(&x, Dtype::F32).unwrap()).unwrap();
        assert_eq!(back.data(), &[0.1f32 as f64, -2.5]);
    }

    #[test]
    fn hex_layout() {
        let bytes = encode_tensor(&Tensor::from_vec(vec![1.0]), Dtype::F64).unwrap();
        let want: Vec<u8> = [
            b"TSR1".as_slice(),
            &[2, 1],
            &1u64.to_le_bytes(),
            &[0, 0, 0, 0, 0, 0, 0xf0, 0x3f],
        ]
        .concat();
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[2, 2]), Dtype::F64).unwrap();
        bytes.pop();
        match decode_tensor(&bytes).unwrap_err() {
            Error::Format { offset, reason } => {
                assert_eq!(offset, 22);
                assert!(reason.contains("expected 32"), "{reason}");
                assert!(reason.contains("got 31"), "{reason}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn bad_magic_and_dtype() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[1]), Dtype::F64).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn huge_dims_rejected_before_allocation() {
        let mut bytes = b"TSR1".to_vec();
        bytes.extend_from_slice(&[2, 2]);
        bytes.extend_from_slice(&(1u64 << 40).to_le_bytes());
        bytes.extend_from_slice(&(1u64 << 40).to_le_bytes());
        let err = decode_tensor(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 14, .. }), "{err:?}");
    }

    #[test]
    fn manifest_hash_ignores_status() {
        let mut m = RunManifest::new();
        m.set("method", "naive").set("status", "running");
        let h = m.hash();
        m.set("status", "complete");
        assert_eq!(m.hash(), h);
        m.set("eta", 0);
        assert_ne!(m.hash(), h);
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let mut m = RunManifest::new();
        m.set("seed", 1);
        let text = m.to_text().replace("seed=1", "seed=2");
        assert!(RunManifest::parse(&text).is_err());
    }
}
