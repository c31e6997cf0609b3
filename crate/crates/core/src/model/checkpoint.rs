//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `b"HGNCKPT\0"`, `u32` version, config echo (nine `u32` sizes, `f64`
//! dropout, three flag bytes), `u32` tensor count, then per tensor `u32`
//! rows, `u32` cols and the values as `f32`, followed by a CRC32 of every
//! preceding byte.

use std::fs;
use std::path::Path;

use super::tensor::{Mat, Scalar};
use super::{ModelConfig, ModelError, Result, Seq2Seq};

pub const MAGIC: &[u8; 8] = b"HGNCKPT\0";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Seq2Seq<T>) -> Vec<u8> {
    let c = &model.config;
    let mut buf = Vec::with_capacity(64 + model.num_params() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.vocab_size,
        c.d_model,
        c.encoder_layers,
        c.decoder_layers,
        c.n_heads,
        c.ffn_dim,
        c.max_len,
        c.proj_dim,
        c.proj_hidden,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&c.dropout.to_le_bytes());
    buf.extend([c.pre_norm as u8, c.tie_embeddings as u8, c.learned_positions as u8]);
    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&(p.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(p.cols as u32).to_le_bytes());
        for v in &p.data {
            buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ModelError::CorruptFile("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(ModelError::CorruptFile(format!("bad flag byte {b}"))),
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Seq2Seq<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(ModelError::CorruptFile("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < r.pos + 4 {
        return Err(ModelError::CorruptFile("unexpected end of file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(ModelError::CorruptFile("checksum mismatch".into()));
    }
    let mut sizes = [0usize; 9];
    for s in &mut sizes {
        *s = r.u32()? as usize;
    }
    let dropout = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let config = ModelConfig {
        vocab_size: sizes[0],
        d_model: sizes[1],
        encoder_layers: sizes[2],
        decoder_layers: sizes[3],
        n_heads: sizes[4],
        ffn_dim: sizes[5],
        max_len: sizes[6],
        proj_dim: sizes[7],
        proj_hidden: sizes[8],
        dropout,
        pre_norm: r.flag()?,
        tie_embeddings: r.flag()?,
        learned_positions: r.flag()?,
    };
    let mut model = Seq2Seq::<f32>::new(config, 0).map_err(|e| ModelError::CorruptFile(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(ModelError::CorruptFile(format!("expected {} tensors, found {count}", params.len())));
    }
    for p in params.iter_mut() {
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        if (rows, cols) != (p.rows, p.cols) {
            return Err(ModelError::CorruptFile(format!(
                "tensor shape {rows}x{cols} does not match {}x{}",
                p.rows, p.cols
            )));
        }
        let raw = r.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        **p = Mat::from_vec(rows, cols, data);
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptFile("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Seq2Seq<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2Seq<f32>> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;

    #[test]
    fn save_load_save_is_identical() {
        let mut c = tiny_config(11);
        c.learned_positions = true;
        c.tie_embeddings = false;
        let m = Seq2Seq::<f32>::new(c, 5).unwrap();
        let bytes = to_bytes(&m);
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(to_bytes(&loaded), bytes);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let m = Seq2Seq::<f32>::new(tiny_config(11), 5).unwrap();
        let bytes = to_bytes(&m);
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(ModelError::CorruptFile(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(ModelError::CorruptFile(_))));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let m = Seq2Seq::<f32>::new(tiny_config(11), 5).unwrap();
        let mut bytes = to_bytes(&m);
        bytes[8] = 2;
        assert!(matches!(from_bytes(&bytes), Err(ModelError::VersionMismatch { found: 2, expected: 1 })));
    }
}
