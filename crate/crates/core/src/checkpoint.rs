//! Binary persistence of trained models and materialized adversarial sets.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "ADVNET01" | u32 version | u64 iteration | str config echo
//! u32 model count, per model:
//!     str role | str architecture | u8 mode | dims input shape
//!     u32 entry count, per entry: str name | u8 kind | dims shape | u64 offset
//!     u64 parameter count | u64 buffer count | f32 parameters | f32 buffers
//! u32 optimizer count, per optimizer:
//!     str role | str rule (JSON) | u64 step | f32 vector first | f32 vector second
//!     u8 has mask [| u64 length | u8 per coordinate]
//! u8 has rng [| 32-byte seed | u64 stream | u128 word position]
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8, `dims` a u32 rank followed
//! by u32 extents.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::error::{CheckpointErrorKind as Kind, Error, Result};
use crate::minimax::TrainOutcome;
use crate::nn::{EntryKind, Mode, Model, OptimizerRule, OptimizerState};
use crate::tensor::Tensor;
use crate::zoo::{compile_network, ArchitectureId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVNET01";
pub const ADVSET_MAGIC: &[u8; 8] = b"ADVSET01";
pub const FORMAT_VERSION: u32 = 1;

pub const ROLE_DISCRIMINATOR: &str = "discriminator";
pub const ROLE_GENERATOR: &str = "generator";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(FORMAT_VERSION);
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn dims(&mut self, d: &[usize]) {
        self.u32(d.len() as u32);
        for &x in d {
            self.u32(x as u32);
        }
    }

    fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn f32_vec(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        self.f32s(v);
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic, CRC and version, then runs `parse` on the body. When
    /// the CRC fails, a body that also runs out of bytes while parsing is
    /// reported as truncated rather than corrupted.
    fn decode<T>(bytes: &'a [u8], magic: &[u8; 8], what: &str, parse: impl Fn(&mut Reader<'a>) -> Result<T>) -> Result<T> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            if bytes.len() < 8 && magic.starts_with(bytes) {
                return Err(Error::checkpoint(Kind::Truncated, format!("{what} shorter than its magic")));
            }
            return Err(Error::checkpoint(Kind::BadMagic, format!("not a {what} file")));
        }
        if bytes.len() < 16 {
            return Err(Error::checkpoint(Kind::Truncated, format!("{what} header cut short")));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let mut r = Self { buf: body, pos: 8 };
        let version = r.u32()?;
        if stored != computed {
            let parsed = parse(&mut r).and_then(|_| r.done());
            return Err(match parsed {
                Err(e) if e.checkpoint_kind() == Some(Kind::Truncated) => Error::checkpoint(Kind::Truncated, format!("{what} ends early: {e}")),
                _ => Error::checkpoint(Kind::CrcMismatch, format!("stored crc {stored:08x}, computed {computed:08x}")),
            });
        }
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(Kind::UnsupportedVersion, format!("version {version}, expected {FORMAT_VERSION}")));
        }
        let value = parse(&mut r)?;
        r.done()?;
        Ok(value)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::checkpoint(Kind::Truncated, format!("need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(unit).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::checkpoint(Kind::Truncated, format!("declared length {n} exceeds the remaining bytes")));
        }
        Ok(n)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::checkpoint(Kind::Malformed, format!("invalid UTF-8 string at offset {}", self.pos - n)))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::checkpoint(Kind::Malformed, format!("rank {rank} too large")));
        }
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::checkpoint(Kind::Malformed, "length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f32_vec(&mut self) -> Result<Vec<f32>> {
        let n = self.len(4)?;
        self.f32s(n)
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::checkpoint(Kind::Malformed, format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Seed, stream and position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to reuse or resume a trained run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    /// Free-form configuration text saved for provenance.
    pub config_echo: String,
    pub discriminator: Option<Model<f32>>,
    pub generator: Option<Model<f32>>,
    pub d_optimizer: Option<OptimizerState<f32>>,
    pub g_optimizer: Option<OptimizerState<f32>>,
    pub rng: Option<RngState>,
}

fn mode_code(m: Mode) -> u8 {
    match m {
        Mode::Train => 0,
        Mode::Inference => 1,
    }
}

fn write_model(w: &mut Writer, role: &str, m: &Model<f32>) {
    w.str(role);
    w.str(m.arch());
    w.u8(mode_code(m.mode()));
    w.dims(m.input_shape());
    w.u32(m.entries().len() as u32);
    for e in m.entries() {
        w.str(&e.name);
        w.u8(e.kind.code());
        w.dims(&e.shape);
        w.u64(e.offset as u64);
    }
    w.u64(m.params().len() as u64);
    w.u64(m.buffers().len() as u64);
    w.f32s(m.params());
    w.f32s(m.buffers());
}

fn read_model(r: &mut Reader<'_>) -> Result<(String, Model<f32>)> {
    let role = r.str()?;
    let arch = r.str()?;
    let mode = match r.u8()? {
        0 => Mode::Train,
        1 => Mode::Inference,
        other => return Err(Error::checkpoint(Kind::Malformed, format!("unknown mode code {other}"))),
    };
    let input = r.dims()?;
    let id: ArchitectureId = arch
        .parse()
        .map_err(|_| Error::checkpoint(Kind::ArchitectureMismatch, format!("unknown architecture {arch:?}")))?;
    if (role == ROLE_GENERATOR) != id.family.is_generator() {
        return Err(Error::checkpoint(Kind::ArchitectureMismatch, format!("{arch} stored under role {role}")));
    }
    let mut model: Model<f32> = compile_network(&id, &input).map_err(|e| Error::checkpoint(Kind::ArchitectureMismatch, e.to_string()))?;
    model.set_mode(mode);
    let count = r.u32()? as usize;
    if count != model.entries().len() {
        return Err(Error::checkpoint(
            Kind::ArchitectureMismatch,
            format!("{arch} has {} entries, file lists {count}", model.entries().len()),
        ));
    }
    for i in 0..count {
        let name = r.str()?;
        let kind = EntryKind::from_code(r.u8()?).ok_or_else(|| Error::checkpoint(Kind::Malformed, "unknown entry kind"))?;
        let shape = r.dims()?;
        let offset = r.u64()? as usize;
        let e = &model.entries()[i];
        if e.name != name || e.kind != kind || e.shape != shape || e.offset != offset {
            return Err(Error::checkpoint(Kind::ArchitectureMismatch, format!("entry {name} {shape:?} does not match {arch}")));
        }
    }
    let (np, nb) = (r.u64()? as usize, r.u64()? as usize);
    if np != model.params().len() || nb != model.buffers().len() {
        return Err(Error::checkpoint(Kind::ArchitectureMismatch, format!("payload sizes {np}/{nb} do not match {arch}")));
    }
    let params = r.f32s(np)?;
    let buffers = r.f32s(nb)?;
    model.params_mut().copy_from_slice(&params);
    model.buffers_mut().copy_from_slice(&buffers);
    Ok((role, model))
}

fn write_optimizer(w: &mut Writer, role: &str, o: &OptimizerState<f32>) {
    w.str(role);
    w.str(&serde_json::to_string(&o.rule).expect("rule serializes"));
    w.u64(o.step);
    w.f32_vec(&o.first);
    w.f32_vec(&o.second);
    match &o.decay_mask {
        Some(mask) => {
            w.u8(1);
            w.u64(mask.len() as u64);
            for &m in mask {
                w.u8(m as u8);
            }
        }
        None => w.u8(0),
    }
}

fn read_optimizer(r: &mut Reader<'_>) -> Result<(String, OptimizerState<f32>)> {
    let role = r.str()?;
    let rule: OptimizerRule = serde_json::from_str(&r.str()?).map_err(|e| Error::checkpoint(Kind::Malformed, format!("optimizer rule: {e}")))?;
    let step = r.u64()?;
    let first = r.f32_vec()?;
    let second = r.f32_vec()?;
    let decay_mask = match r.u8()? {
        0 => None,
        1 => {
            let n = r.len(1)?;
            Some(r.take(n)?.iter().map(|&b| b != 0).collect())
        }
        other => return Err(Error::checkpoint(Kind::Malformed, format!("mask flag {other}"))),
    };
    Ok((role, OptimizerState { rule, step, first, second, decay_mask }))
}

impl Checkpoint {
    /// Checkpoint of a finished run. A generator-only run stores just the
    /// generator; its target classifier is an input, not a product.
    pub fn from_outcome(out: &TrainOutcome, config_echo: impl Into<String>) -> Self {
        let keep_d = out.config.kind != crate::minimax::TrainerKind::GeneratorOnly;
        Self {
            iteration: out.iteration,
            config_echo: config_echo.into(),
            discriminator: keep_d.then(|| out.discriminator.clone()),
            generator: out.generator.clone(),
            d_optimizer: out.d_optimizer.clone(),
            g_optimizer: out.g_optimizer.clone(),
            rng: Some(RngState::capture(&out.rng)),
        }
    }

    pub fn for_model(model: &Model<f32>) -> Self {
        let generator = model.arch().parse::<ArchitectureId>().is_ok_and(|id| id.family.is_generator());
        Self {
            iteration: 0,
            config_echo: String::new(),
            discriminator: (!generator).then(|| model.clone()),
            generator: generator.then(|| model.clone()),
            d_optimizer: None,
            g_optimizer: None,
            rng: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.u64(self.iteration);
        w.str(&self.config_echo);
        let models: Vec<(&str, &Model<f32>)> = [(ROLE_DISCRIMINATOR, &self.discriminator), (ROLE_GENERATOR, &self.generator)]
            .into_iter()
            .filter_map(|(r, m)| m.as_ref().map(|m| (r, m)))
            .collect();
        w.u32(models.len() as u32);
        for (role, m) in models {
            write_model(&mut w, role, m);
        }
        let opts: Vec<(&str, &OptimizerState<f32>)> = [(ROLE_DISCRIMINATOR, &self.d_optimizer), (ROLE_GENERATOR, &self.g_optimizer)]
            .into_iter()
            .filter_map(|(r, o)| o.as_ref().map(|o| (r, o)))
            .collect();
        w.u32(opts.len() as u32);
        for (role, o) in opts {
            write_optimizer(&mut w, role, o);
        }
        match &self.rng {
            Some(s) => {
                w.u8(1);
                w.buf.extend_from_slice(&s.seed);
                w.u64(s.stream);
                w.u128(s.word_pos);
            }
            None => w.u8(0),
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Reader::decode(bytes, CHECKPOINT_MAGIC, "checkpoint", Self::parse)
    }

    fn parse(r: &mut Reader<'_>) -> Result<Self> {
        let iteration = r.u64()?;
        let config_echo = r.str()?;
        let mut ck = Self {
            iteration,
            config_echo,
            discriminator: None,
            generator: None,
            d_optimizer: None,
            g_optimizer: None,
            rng: None,
        };
        for _ in 0..r.u32()? {
            let (role, m) = read_model(r)?;
            match role.as_str() {
                ROLE_DISCRIMINATOR => ck.discriminator = Some(m),
                ROLE_GENERATOR => ck.generator = Some(m),
                other => return Err(Error::checkpoint(Kind::Malformed, format!("unknown model role {other:?}"))),
            }
        }
        for _ in 0..r.u32()? {
            let (role, o) = read_optimizer(r)?;
            match role.as_str() {
                ROLE_DISCRIMINATOR => ck.d_optimizer = Some(o),
                ROLE_GENERATOR => ck.g_optimizer = Some(o),
                other => return Err(Error::checkpoint(Kind::Malformed, format!("unknown optimizer role {other:?}"))),
            }
        }
        if r.u8()? == 1 {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = r.u128()?;
            ck.rng = Some(RngState { seed, stream, word_pos });
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// The classifier, or an architecture-mismatch error if the file holds
    /// only a generator.
    pub fn into_discriminator(self) -> Result<Model<f32>> {
        self.discriminator.ok_or_else(|| {
            let what = self.generator.as_ref().map_or("nothing".to_string(), |g| format!("generator {}", g.arch()));
            Error::checkpoint(Kind::ArchitectureMismatch, format!("expected a classifier, checkpoint holds {what}"))
        })
    }

    pub fn into_generator(self) -> Result<Model<f32>> {
        self.generator.ok_or_else(|| {
            let what = self.discriminator.as_ref().map_or("nothing".to_string(), |d| format!("classifier {}", d.arch()));
            Error::checkpoint(Kind::ArchitectureMismatch, format!("expected a generator, checkpoint holds {what}"))
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads a classifier from a checkpoint file.
pub fn load_discriminator(path: &Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.into_discriminator()
}

/// Loads a generator from a checkpoint file.
pub fn load_generator(path: &Path) -> Result<Model<f32>> {
    Checkpoint::load(path)?.into_generator()
}

/// Provenance of a materialized adversarial test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSetMeta {
    /// Identifier of the model the attack ran against.
    pub source: String,
    pub attack: AttackSpec,
    pub seed: u64,
    /// Tag of the clean data the set was derived from.
    pub dataset: String,
}

/// Attacked images with their true labels.
///
/// Layout: `"ADVSET01" | u32 version | str metadata (JSON) | u32 classes |
/// dims image shape | u64 label count | u32 labels | f32 images | u32 CRC-32`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSet {
    pub meta: AdversarialSetMeta,
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl AdversarialSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(ADVSET_MAGIC);
        w.str(&serde_json::to_string(&self.meta).expect("metadata serializes"));
        w.u32(self.classes as u32);
        w.dims(self.images.shape());
        w.u64(self.labels.len() as u64);
        for &y in &self.labels {
            w.u32(y as u32);
        }
        w.f32s(self.images.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Reader::decode(bytes, ADVSET_MAGIC, "adversarial set", Self::parse)
    }

    fn parse(r: &mut Reader<'_>) -> Result<Self> {
        let meta: AdversarialSetMeta = serde_json::from_str(&r.str()?).map_err(|e| Error::checkpoint(Kind::Malformed, format!("metadata: {e}")))?;
        let classes = r.u32()? as usize;
        let shape = r.dims()?;
        let n = r.len(4)?;
        let labels = (0..n).map(|_| r.u32().map(|y| y as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        if shape.first() != Some(&n) {
            return Err(Error::checkpoint(Kind::Malformed, format!("{n} labels for images {shape:?}")));
        }
        let images = Tensor::new(shape, r.f32s(len)?)?;
        Ok(Self { meta, images, labels, classes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_network_for, Family};
    use rand::SeedableRng;

    fn d1() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        build_network_for(&ArchitectureId::new(Family::D1), &[28, 28, 1], &mut rng).unwrap()
    }

    fn g0() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        build_network_for(&ArchitectureId::new(Family::G0).with_width(4), &[28, 28, 1], &mut rng).unwrap()
    }

    fn batch() -> Tensor<f32> {
        Tensor::new(vec![3, 28, 28, 1], (0..3 * 784).map(|i| ((i * 7919 % 255) as f32 / 127.5) - 1.0).collect()).unwrap()
    }

    fn full_checkpoint() -> Checkpoint {
        let d = d1();
        let g = g0();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: u64 = rand::Rng::random(&mut rng);
        let mut d_opt = OptimizerState::new(OptimizerRule::sgd(0.01, 0.9, 1e-4), d.param_count()).with_decay_mask(d.decay_mask());
        d_opt.first.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 1e-3);
        d_opt.step = 12;
        let g_opt = OptimizerState::new(OptimizerRule::adam(0.002, 0.5, 0.999, 0.0), g.param_count());
        Checkpoint {
            iteration: 12,
            config_echo: "train.kind=adversarial-network\n".into(),
            discriminator: Some(d),
            generator: Some(g),
            d_optimizer: Some(d_opt),
            g_optimizer: Some(g_opt),
            rng: Some(RngState::capture(&rng)),
        }
    }

    #[test]
    fn round_trip_reproduces_forward_pass_bit_exactly() {
        let ck = full_checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let x = batch();
        let (d0, d1) = (ck.discriminator.as_ref().unwrap(), back.discriminator.as_ref().unwrap());
        assert_eq!(d0.predict(&x).unwrap().data(), d1.predict(&x).unwrap().data());
        let (g0, g1) = (ck.generator.as_ref().unwrap(), back.generator.as_ref().unwrap());
        assert_eq!(g0.predict(&x).unwrap().data(), g1.predict(&x).unwrap().data());
        assert_eq!(back.d_optimizer, ck.d_optimizer);
        assert_eq!(back.g_optimizer, ck.g_optimizer);
        assert_eq!(back.iteration, 12);
        assert_eq!(back.config_echo, ck.config_echo);
        let (mut a, mut b) = (ck.rng.unwrap().restore(), back.rng.unwrap().restore());
        assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut b));
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/d.ckpt");
        Checkpoint::for_model(&d1()).save(&path).unwrap();
        let d = load_discriminator(&path).unwrap();
        assert_eq!(d.params(), d1().params());
    }

    #[test]
    fn corrupted_payload_byte_is_crc_error() {
        let mut bytes = full_checkpoint().to_bytes();
        let i = bytes.len() / 2;
        bytes[i] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert_eq!(err.checkpoint_kind(), Some(Kind::CrcMismatch), "{err}");
    }

    #[test]
    fn distinct_error_codes() {
        let good = Checkpoint::for_model(&d1()).to_bytes();
        let mut magic = good.clone();
        magic[0] = b'X';
        assert_eq!(Checkpoint::from_bytes(&magic).unwrap_err().checkpoint_kind(), Some(Kind::BadMagic));

        let mut version = good[..good.len() - 4].to_vec();
        version[8..12].copy_from_slice(&2u32.to_le_bytes());
        let crc = crc32fast::hash(&version);
        version.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&version).unwrap_err().checkpoint_kind(), Some(Kind::UnsupportedVersion));

        assert_eq!(Checkpoint::from_bytes(&good[..5]).unwrap_err().checkpoint_kind(), Some(Kind::Truncated));
        assert_eq!(Checkpoint::from_bytes(&good[..12]).unwrap_err().checkpoint_kind(), Some(Kind::Truncated));

        // A cut whose CRC is recomputed fails on the missing payload.
        let mut cut = good[..good.len() / 2].to_vec();
        let crc = crc32fast::hash(&cut);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(Checkpoint::from_bytes(&cut).unwrap_err().checkpoint_kind(), Some(Kind::Truncated));
    }

    #[test]
    fn generator_where_classifier_expected_is_architecture_mismatch() {
        let bytes = Checkpoint::for_model(&g0()).to_bytes();
        let err = Checkpoint::from_bytes(&bytes).unwrap().into_discriminator().unwrap_err();
        assert_eq!(err.checkpoint_kind(), Some(Kind::ArchitectureMismatch));
        let err = Checkpoint::from_bytes(&Checkpoint::for_model(&d1()).to_bytes()).unwrap().into_generator().unwrap_err();
        assert_eq!(err.checkpoint_kind(), Some(Kind::ArchitectureMismatch));
    }

    #[test]
    fn adversarial_set_round_trip_and_crc() {
        let set = AdversarialSet {
            meta: AdversarialSetMeta {
                source: "A'".into(),
                attack: AttackSpec::pgd(0.3),
                seed: 4,
                dataset: "mnist:test:2000".into(),
            },
            images: batch(),
            labels: vec![1, 7, 3],
            classes: 10,
        };
        let bytes = set.to_bytes();
        assert_eq!(&bytes[..8], ADVSET_MAGIC);
        assert_eq!(AdversarialSet::from_bytes(&bytes).unwrap(), set);
        let mut bad = bytes.clone();
        bad[40] ^= 1;
        assert_eq!(AdversarialSet::from_bytes(&bad).unwrap_err().checkpoint_kind(), Some(Kind::CrcMismatch));
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap_err().checkpoint_kind(), Some(Kind::BadMagic));
    }
}
