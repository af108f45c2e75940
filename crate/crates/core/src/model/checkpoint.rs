//! Versioned binary checkpoints.
//!
//! Layout: magic `RGLB`, format version, the JSON-encoded [`ModelConfig`]
//! (seed included), then every tensor as `name, rows, cols, row-major f64
//! little-endian data` in canonical order. Loading parses the whole file
//! before constructing the model, so a truncated or corrupt file never yields
//! a partially loaded model.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Mat;

use super::{MicroTransformer, ModelConfig};

const MAGIC: &[u8; 4] = b"RGLB";
const FORMAT_VERSION: u32 = 1;

impl MicroTransformer {
    /// Serialize to `path`; the write goes through a temp file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let cfg_json = serde_json::to_vec(&self.cfg)
            .map_err(|e| Error::Internal(format!("config serialization failed: {e}")))?;
        buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg_json);
        let tensors = self.tensors();
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, mat) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(mat.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(mat.cols() as u32).to_le_bytes());
            buf.extend_from_slice(&mat.to_le_bytes());
        }

        let tmp = path.with_extension("ckpt.tmp");
        let mut file = fs::File::create(&tmp)
            .map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        file.write_all(&buf)
            .map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
        file.sync_all().ok();
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    /// Load a checkpoint, reconstructing the model from the embedded config.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut reader = Reader { bytes: &bytes, pos: 0 };

        let magic = reader.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
        }
        let version = reader.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let cfg_len = reader.u32("config length")? as usize;
        let cfg_bytes = reader.take(cfg_len, "config")?;
        let cfg: ModelConfig = serde_json::from_slice(cfg_bytes)
            .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
        cfg.validate()?;

        let mut model = MicroTransformer::init(&cfg)?;
        let expected: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        let count = reader.u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(Error::CheckpointShape(format!(
                "checkpoint has {count} tensors, config implies {}",
                expected.len()
            )));
        }

        let mut loaded: Vec<Mat> = Vec::with_capacity(count);
        for name in &expected {
            let name_len = reader.u32("tensor name length")? as usize;
            let found = std::str::from_utf8(reader.take(name_len, "tensor name")?)
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            if found != name {
                return Err(Error::CheckpointShape(format!(
                    "tensor `{found}` where `{name}` was expected"
                )));
            }
            let rows = reader.u32("tensor rows")? as usize;
            let cols = reader.u32("tensor cols")? as usize;
            let data = reader.take(rows * cols * 8, &format!("tensor `{name}` data"))?;
            let mut values = Vec::with_capacity(rows * cols);
            for chunk in data.chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            loaded.push(Mat::from_vec(rows, cols, values));
        }
        if reader.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after final tensor",
                bytes.len() - reader.pos
            )));
        }

        // install, verifying shapes against the freshly built structure
        let mut iter = loaded.into_iter();
        let mut install = |slot: &mut Mat, name: &str| -> Result<()> {
            let mat = iter.next().expect("tensor count checked");
            if mat.shape() != slot.shape() {
                return Err(Error::CheckpointShape(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    mat.shape(),
                    slot.shape()
                )));
            }
            *slot = mat;
            Ok(())
        };
        install(&mut model.embedding, "embedding")?;
        install(&mut model.positional, "positional")?;
        install(&mut model.head, "head")?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let l = i + 1;
            install(&mut layer.wq, &format!("L{l}.wq"))?;
            install(&mut layer.wk, &format!("L{l}.wk"))?;
            install(&mut layer.wv, &format!("L{l}.wv"))?;
            install(&mut layer.wo, &format!("L{l}.wo"))?;
            install(&mut layer.w1_gate, &format!("L{l}.w1_gate"))?;
            install(&mut layer.v_up, &format!("L{l}.v_up"))?;
            install(&mut layer.w2_down, &format!("L{l}.w2_down"))?;
            if let Some(ad) = layer.adapters.as_mut() {
                for j in 0..4 {
                    install(&mut ad.a[j], &format!("L{l}.adapter_a[{j}]"))?;
                    install(&mut ad.b[j], &format!("L{l}.adapter_b[{j}]"))?;
                }
            }
        }
        Ok(model)
    }

    /// Load and verify the checkpoint was produced under `expected` (shape
    /// fields and seed alike); a different configuration is a shape error.
    pub fn load_expected(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.cfg != *expected {
            return Err(Error::CheckpointShape(format!(
                "checkpoint config {:?} differs from expected {:?}",
                model.cfg, expected
            )));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CheckpointTruncated(format!(
                "file ends inside {what} (needed {n} bytes at offset {})",
                self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}
