//! Binary weight files.
//!
//! ```text
//! magic      8 bytes   "LTSFWGT" + version byte ('1')
//! header     7 x u32   n_layers n_heads d_model d_mlp vocab_size max_seq_len has_planted
//! tensors    repeated  u16 name_len, name, u8 rank, rank x u32 dims, f32 data
//! planted    optional  u32 n, n x u32 layers, u32 trigger, u32 spurious, f64 strength, u32 m, m x u32 layers
//! crc32      u32       over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. Tensor order is fixed by the
//! header: `tok_embed`, `pos_embed`, then the twelve tensors of each layer,
//! then `unembed`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::{LayerWeights, Model, ModelConfig, PlantedSpec};

pub const WEIGHT_MAGIC_PREFIX: &[u8; 7] = b"LTSFWGT";
const WEIGHT_VERSION: u8 = 1;

/// Little-endian byte sink shared by the weight and plan formats.
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(prefix: &[u8; 7], version: u8) -> Self {
        let mut buf = prefix.to_vec();
        buf.push(b'0' + version);
        ByteWriter { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("sizes are validated to fit in u32"));
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn tensor(&mut self, name: &str, dims: &[usize], data: &[f32]) {
        self.u16(name.len() as u16);
        self.buf.extend_from_slice(name.as_bytes());
        self.u8(dims.len() as u8);
        for &d in dims {
            self.usize(d);
        }
        for &x in data {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        for &x in xs {
            self.f64(x);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Cursor over a checked container (magic, version and CRC already verified).
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Verifies magic, version and trailing CRC and returns a reader over the body.
    pub fn open(bytes: &'a [u8], prefix: &[u8; 7], version: u8) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..7] != prefix {
            return Err(Error::Format(format!(
                "bad magic: expected {}",
                String::from_utf8_lossy(prefix)
            )));
        }
        let vb = bytes[7];
        let found = if vb.is_ascii_digit() { vb - b'0' } else { vb };
        if !vb.is_ascii_digit() || found != version {
            return Err(Error::UnsupportedVersion(found));
        }
        if bytes.len() < 12 {
            return Err(Error::Format("file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        Ok(ByteReader { data: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format("file truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.data.len() - self.pos) / 8 {
            return Err(Error::Format("array length exceeds file size".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    /// Reads a tensor and checks its name and shape.
    pub fn tensor(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        let len = self.u16()? as usize;
        let got = self.take(len)?;
        if got != name.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(got)
            )));
        }
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize()?);
        }
        if shape != dims {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {dims:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes before checksum",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn layer_name(l: usize, t: &str) -> String {
    format!("layers.{l}.{t}")
}

/// Serializes `model` into `out`.
pub fn write_weights(model: &Model, out: &mut impl Write) -> std::io::Result<()> {
    let c = &model.config;
    let mut w = ByteWriter::new(WEIGHT_MAGIC_PREFIX, WEIGHT_VERSION);
    for v in [c.n_layers, c.n_heads, c.d_model, c.d_mlp, c.vocab_size, c.max_seq_len] {
        w.usize(v);
    }
    w.u32(model.planted.is_some() as u32);
    w.tensor("tok_embed", &[c.vocab_size, c.d_model], &model.tok_embed);
    w.tensor("pos_embed", &[c.max_seq_len, c.d_model], &model.pos_embed);
    for (l, lw) in model.layers.iter().enumerate() {
        for (name, dims, data) in lw.tensors(c) {
            w.tensor(&layer_name(l, name), &dims, data);
        }
    }
    w.tensor("unembed", &[c.d_model, c.vocab_size], &model.unembed);
    if let Some(p) = &model.planted {
        w.usize(p.hallucination_layers.len());
        for &l in &p.hallucination_layers {
            w.usize(l);
        }
        w.u32(p.trigger_token);
        w.u32(p.spurious_token);
        w.f64(p.strength);
        w.usize(p.task_layers.len());
        for &l in &p.task_layers {
            w.usize(l);
        }
    }
    out.write_all(&w.finish())
}

/// Parses a weight file from memory.
pub fn read_weights(bytes: &[u8]) -> Result<Model> {
    let mut r = ByteReader::open(bytes, WEIGHT_MAGIC_PREFIX, WEIGHT_VERSION)?;
    let mut h = [0usize; 6];
    for v in &mut h {
        *v = r.usize()?;
    }
    let config = ModelConfig {
        n_layers: h[0],
        n_heads: h[1],
        d_model: h[2],
        d_mlp: h[3],
        vocab_size: h[4],
        max_seq_len: h[5],
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let planted_flag = r.u32()?;
    if planted_flag > 1 {
        return Err(Error::Format(format!("invalid planted flag {planted_flag}")));
    }
    let c = &config;
    let tok = r.tensor("tok_embed", &[c.vocab_size, c.d_model])?;
    let pos = r.tensor("pos_embed", &[c.max_seq_len, c.d_model])?;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let z = LayerWeights::zeros(c);
        let mut data = Vec::with_capacity(12);
        for (name, dims, _) in z.tensors(c) {
            data.push(r.tensor(&layer_name(l, name), &dims)?);
        }
        let mut it = data.into_iter();
        let mut next = || it.next().expect("12 tensors");
        layers.push(LayerWeights {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            ln1_g: next(),
            ln1_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln2_g: next(),
            ln2_b: next(),
        });
    }
    let unembed = r.tensor("unembed", &[c.d_model, c.vocab_size])?;
    let planted = if planted_flag == 1 {
        let list = |r: &mut ByteReader| -> Result<Vec<usize>> {
            let n = r.usize()?;
            if n > c.n_layers {
                return Err(Error::Format("planted layer list longer than n_layers".into()));
            }
            (0..n).map(|_| r.usize()).collect()
        };
        let hallucination_layers = list(&mut r)?;
        let trigger_token = r.u32()?;
        let spurious_token = r.u32()?;
        let strength = r.f64()?;
        let task_layers = list(&mut r)?;
        Some(PlantedSpec {
            hallucination_layers,
            trigger_token,
            spurious_token,
            strength,
            task_layers,
        })
    } else {
        None
    };
    r.finish()?;
    Model::from_parts(config, tok, pos, layers, unembed, planted)
        .map_err(|e| Error::Format(format!("inconsistent weight file: {e}")))
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(model, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_planted, random_model};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 4,
            d_mlp: 6,
            vocab_size: 12,
            max_seq_len: 5,
        }
    }

    #[test]
    fn roundtrip_random() {
        let m = random_model(&small_cfg(), 9).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"LTSFWGT1");
        assert_eq!(read_weights(&buf).unwrap(), m);
    }

    #[test]
    fn roundtrip_planted_through_file() {
        let spec = PlantedSpec {
            hallucination_layers: vec![3],
            trigger_token: 10,
            spurious_token: 15,
            strength: 4.0,
            task_layers: vec![1, 6],
        };
        let m = build_planted(&ModelConfig::default(), &spec, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_weights(&m, &p).unwrap();
        let back = load_weights(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.planted(), Some(&spec));
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = random_model(&small_cfg(), 9).unwrap();
        let mut buf = Vec::new();
        write_weights(&m, &mut buf).unwrap();

        let mut v = buf.clone();
        v[7] = 0xFF;
        assert!(matches!(read_weights(&v), Err(Error::UnsupportedVersion(255))));
        let mut v = buf.clone();
        v[7] = b'2';
        assert!(matches!(read_weights(&v), Err(Error::UnsupportedVersion(2))));
        let mut v = buf.clone();
        v[0] = b'X';
        assert!(matches!(read_weights(&v), Err(Error::Format(_))));
        let mut v = buf.clone();
        let mid = v.len() / 2;
        v[mid] ^= 1;
        assert!(matches!(read_weights(&v), Err(Error::Format(_))));
        assert!(matches!(read_weights(&buf[..buf.len() - 9]), Err(Error::Format(_))));
        assert!(matches!(read_weights(&buf[..5]), Err(Error::Format(_))));
    }
}
