//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "CDDV"  version:u32  M:u32  V':u32  D':u32
//! entries: M*V'*D' x f64   (sub-codebook major, row-major)
//! usage:   M*V'    x u64
//! section*: tag:[u8;4]  len:u64  payload[len]
//! ```
//!
//! Sections: `CONF` (model config as `key = value` text), `ENCD`/`DECD`
//! (perceptron weights), `ALOC` (allocator), `OPTM` (Adam state) and `STEP`
//! (training step counter). Unknown sections are skipped on load.

use std::fs;
use std::path::Path;

use crate::allocator::AllocatorParams;
use crate::autoencoder::Mlp;
use crate::codebook::Codebook;
use crate::config;
use crate::error::{Error, Result};
use crate::model::Tokenizer;
use crate::numerics::Matrix;
use crate::optim::{Adam, Moments};

pub const MAGIC: &[u8; 4] = b"CDDV";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn section(&mut self, tag: &[u8; 4], payload: Writer) {
        self.buf.extend(tag);
        self.u64(payload.buf.len() as u64);
        self.buf.extend(payload.buf);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos, message: msg.into() }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.err(format!("truncated: wanted {n} more bytes")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("length overflow"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if (self.data.len() - self.pos) / 8 < n {
            return Err(self.err(format!("truncated: wanted {n} floats")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn write_mlp(m: &Mlp) -> Writer {
    let mut w = Writer::default();
    w.u32(m.input_dim() as u32);
    w.u32(m.hidden_dim() as u32);
    w.u32(m.output_dim() as u32);
    w.f64s(m.w1.as_slice());
    w.f64s(&m.b1);
    w.f64s(m.w2.as_slice());
    w.f64s(&m.b2);
    w
}

fn read_mlp(r: &mut Reader) -> Result<Mlp> {
    let (i, h, o) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let w1 = Matrix::new(i, h, r.f64s(i * h)?)?;
    let b1 = r.f64s(h)?;
    let w2 = Matrix::new(h, o, r.f64s(h * o)?)?;
    let b2 = r.f64s(o)?;
    Ok(Mlp { w1, b1, w2, b2 })
}

fn write_allocator(a: &AllocatorParams) -> Writer {
    let mut w = Writer::default();
    for v in [a.embed_dim, a.hidden, a.width1, a.width2] {
        w.u32(v as u32);
    }
    w.f64s(&a.w1);
    w.f64s(&a.b1);
    w.f64s(&a.w2);
    w.f64(a.b2);
    w
}

fn read_allocator(r: &mut Reader) -> Result<AllocatorParams> {
    let (d, h, w1, w2) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut p = AllocatorParams::zeros(d, h, w1, w2)?;
    p.w1 = r.f64s(p.w1.len())?;
    p.b1 = r.f64s(h)?;
    p.w2 = r.f64s(p.w2.len())?;
    p.b2 = r.f64()?;
    if !p.is_finite() {
        return Err(Error::Checkpoint("allocator parameters are not finite".into()));
    }
    Ok(p)
}

fn write_adam(a: &Adam) -> Writer {
    let mut w = Writer::default();
    w.f64(a.lr);
    w.f64(a.beta1);
    w.f64(a.beta2);
    w.f64(a.eps);
    w.u64(a.t);
    w.u64(a.slots.len() as u64);
    for s in &a.slots {
        w.u64(s.first.len() as u64);
        w.f64s(&s.first);
        w.f64s(&s.second);
    }
    w
}

fn read_adam(r: &mut Reader) -> Result<Adam> {
    let mut a = Adam::new(r.f64()?);
    a.beta1 = r.f64()?;
    a.beta2 = r.f64()?;
    a.eps = r.f64()?;
    a.t = r.u64()?;
    let n = r.len()?;
    for _ in 0..n {
        let len = r.len()?;
        let first = r.f64s(len)?;
        let second = r.f64s(len)?;
        a.slots.push(Moments { first, second });
    }
    Ok(a)
}

/// Codebook header, entries and usage counts.
pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend(MAGIC);
    w.u32(VERSION);
    w.u32(cb.num_subcodebooks() as u32);
    w.u32(cb.size() as u32);
    w.u32(cb.dim() as u32);
    for e in cb.entries() {
        w.f64s(e.as_slice());
    }
    for c in cb.usage_counts().iter().flatten() {
        w.u64(*c);
    }
    w.buf
}

fn read_codebook(r: &mut Reader) -> Result<Codebook> {
    if r.take(4)? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "missing CDDV magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let (m, v, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if m == 0 || v == 0 || d == 0 {
        return Err(r.err("zero codebook dimension"));
    }
    let entries = (0..m).map(|_| Matrix::new(v, d, r.f64s(v * d)?)).collect::<Result<Vec<_>>>()?;
    let mut cb = Codebook::from_entries(entries)?;
    let usage = (0..m).map(|_| (0..v).map(|_| r.u64()).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
    cb.set_usage_counts(usage)?;
    Ok(cb)
}

pub fn decode_codebook(data: &[u8]) -> Result<Codebook> {
    read_codebook(&mut Reader { data, pos: 0 })
}

/// A model plus optional training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Tokenizer,
    pub optimizer: Option<Adam>,
    pub step: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer { buf: encode_codebook(&self.model.codebook) };
        let mut conf = Writer::default();
        conf.buf.extend(config::model_config_text(&self.model.config).into_bytes());
        w.section(b"CONF", conf);
        w.section(b"ENCD", write_mlp(&self.model.encoder));
        w.section(b"ALOC", write_allocator(&self.model.allocator));
        w.section(b"DECD", write_mlp(&self.model.decoder));
        if let Some(opt) = &self.optimizer {
            w.section(b"OPTM", write_adam(opt));
        }
        let mut step = Writer::default();
        step.u64(self.step);
        w.section(b"STEP", step);
        w.buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let codebook = read_codebook(&mut r)?;
        let (mut conf, mut enc, mut dec, mut alloc, mut optimizer, mut step) = (None, None, None, None, None, 0);
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.len()?;
            let start = r.pos;
            let payload = r.take(len)?;
            let mut sub = Reader { data: &data[..start + len], pos: start };
            match &tag {
                b"CONF" => {
                    let text = std::str::from_utf8(payload).map_err(|_| sub.err("CONF is not UTF-8"))?;
                    conf = Some(config::parse_model_config(text)?);
                    sub.pos = sub.data.len();
                }
                b"ENCD" => enc = Some(read_mlp(&mut sub)?),
                b"DECD" => dec = Some(read_mlp(&mut sub)?),
                b"ALOC" => alloc = Some(read_allocator(&mut sub)?),
                b"OPTM" => optimizer = Some(read_adam(&mut sub)?),
                b"STEP" => step = sub.u64()?,
                _ => continue,
            }
            if !sub.done() {
                return Err(sub.err(format!("trailing bytes in {} section", String::from_utf8_lossy(&tag))));
            }
        }
        let missing = |name: &str| Error::Checkpoint(format!("missing {name} section"));
        let model = Tokenizer {
            config: conf.ok_or_else(|| missing("CONF"))?,
            encoder: enc.ok_or_else(|| missing("ENCD"))?,
            allocator: alloc.ok_or_else(|| missing("ALOC"))?,
            codebook,
            decoder: dec.ok_or_else(|| missing("DECD"))?,
        };
        model.validate()?;
        Ok(Self { model, optimizer, step })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Checkpoint(format!("{}: {other}", path.display())),
        })
    }
}
