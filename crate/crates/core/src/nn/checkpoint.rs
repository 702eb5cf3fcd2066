//! Checkpoint file format: magic `MTRN1`, a JSON manifest (tensor names,
//! shapes, dtype, byte offsets, config echo), then raw little-endian f32
//! payloads in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Real, Tensor};

const MAGIC: &[u8; 5] = b"MTRN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset in elements from the start of the payload.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Model configuration echo, checked against the loader's expectations.
    pub config: serde_json::Value,
    /// Free-form companion data (vocab, optimizer step, epoch).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

/// Writes named tensors (cast to f32) with a manifest. Tensor order is
/// preserved, so identical inputs produce byte-identical files.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    tensors: &[(String, &Tensor<F>)],
    config: serde_json::Value,
    extra: serde_json::Value,
) -> Result<(), CheckpointError> {
    let mut metas = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, tensor) in tensors {
        metas.push(TensorMeta {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
            len: tensor.len(),
        });
        offset += tensor.len();
    }
    let manifest = CheckpointManifest {
        format_version: 1,
        config,
        extra,
        tensors: metas,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).expect("manifest serializes");

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    for (_, tensor) in tensors {
        for v in tensor.data() {
            out.write_all(&v.to_f32_lossy().to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a checkpoint back; every manifest entry must be backed by a full
/// payload or the file is rejected as corrupt.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointManifest, Vec<Tensor<f32>>), CheckpointError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(CheckpointError::CorruptFile("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(eof)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes).map_err(eof)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::CorruptFile(format!("manifest json: {e}")))?;

    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    let mut payload = vec![0u8; total * 4];
    file.read_exact(&mut payload).map_err(eof)?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(CheckpointError::CorruptFile("trailing bytes after payload".into()));
    }

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for meta in &manifest.tensors {
        if meta.dtype != "f32" {
            return Err(CheckpointError::CorruptFile(format!(
                "unsupported dtype {}",
                meta.dtype
            )));
        }
        let expected: usize = meta.shape.iter().product();
        if expected != meta.len {
            return Err(CheckpointError::CorruptFile(format!(
                "tensor {} shape {:?} disagrees with len {}",
                meta.name, meta.shape, meta.len
            )));
        }
        let start = meta.offset * 4;
        let end = start + meta.len * 4;
        if end > payload.len() {
            return Err(CheckpointError::CorruptFile(format!(
                "tensor {} payload out of range",
                meta.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(
            Tensor::new(meta.shape.clone(), data)
                .map_err(|e| CheckpointError::CorruptFile(e.to_string()))?,
        );
    }
    Ok((manifest, tensors))
}

fn eof(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::CorruptFile("truncated file".into())
    } else {
        CheckpointError::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mtrn");
        let a = Tensor::<f32>::matrix(2, 3, vec![1.5, -2.25, 0.0, 3.125, f32::MIN_POSITIVE, 7.0])
            .unwrap();
        let b = Tensor::<f32>::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let config = serde_json::json!({"d": 64});
        save_checkpoint(
            &path,
            &[("enc.w".to_string(), &a), ("enc.b".to_string(), &b)],
            config.clone(),
            serde_json::json!({"epoch": 3}),
        )
        .unwrap();

        let (manifest, tensors) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.config, config);
        assert_eq!(manifest.extra["epoch"], 3);
        assert_eq!(manifest.tensors[0].name, "enc.w");
        assert_eq!(tensors[0], a);
        assert_eq!(tensors[1], b);
    }

    #[test]
    fn identical_saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::matrix(3, 3, (0..9).map(|i| i as f32 * 0.5).collect()).unwrap();
        let p1 = dir.path().join("a.mtrn");
        let p2 = dir.path().join("b.mtrn");
        for p in [&p1, &p2] {
            save_checkpoint(
                p,
                &[("t".to_string(), &t)],
                serde_json::json!({}),
                serde_json::Value::Null,
            )
            .unwrap();
        }
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_and_garbled_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mtrn");
        let t = Tensor::<f32>::matrix(8, 8, vec![1.0; 64]).unwrap();
        save_checkpoint(
            &path,
            &[("t".to_string(), &t)],
            serde_json::json!({}),
            serde_json::Value::Null,
        )
        .unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.mtrn");
        std::fs::write(&cut, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut),
            Err(CheckpointError::CorruptFile(_))
        ));

        let garbled = dir.path().join("garbled.mtrn");
        let mut copy = bytes.clone();
        copy[0] = b'X';
        std::fs::write(&garbled, &copy).unwrap();
        assert!(matches!(
            load_checkpoint(&garbled),
            Err(CheckpointError::CorruptFile(_))
        ));
    }
}
