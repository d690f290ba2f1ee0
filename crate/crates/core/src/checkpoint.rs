//! Checkpoint container: a tagged little-endian binary holding the run
//! configuration, named parameter arrays, optimiser state, generator state
//! and step counter.
//!
//! Layout: the magic `DOODCKPT`, a `u32` version, then sections of
//! `tag: [u8; 4]`, `len: u64`, `payload`. Sections appear once each, in the
//! order `CONF PARA ADAM RNGS STEP NVIL`. Reals are IEEE-754 binary32.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};
use crate::model::DoodModel;
use crate::scalar::{lit, Scalar};
use crate::training::{Adam, NvilStats, Trainer};

pub const MAGIC: &[u8; 8] = b"DOODCKPT";
pub const VERSION: u32 = 1;
const TAGS: [&[u8; 4]; 6] = [b"CONF", b"PARA", b"ADAM", b"RNGS", b"STEP", b"NVIL"];

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub skipped: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// TOML text of the run configuration, kept verbatim.
    pub config: String,
    pub params: Vec<NamedArray>,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub step: u64,
    pub nvil: NvilStats,
}

fn f32s<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

fn scalars<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| lit(x as f64)).collect()
}

impl Checkpoint {
    pub fn from_trainer<T: Scalar>(cfg: &RunConfig, tr: &Trainer<T>) -> Self {
        let params = tr
            .model
            .params
            .entries()
            .iter()
            .map(|e| NamedArray {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data: f32s(&e.value),
            })
            .collect();
        Self {
            config: cfg.to_toml(),
            params,
            optimizer: OptimizerState {
                t: tr.adam.t,
                skipped: tr.adam.skipped,
                m: tr.adam.m.iter().map(|m| f32s(m)).collect(),
                v: tr.adam.v.iter().map(|v| f32s(v)).collect(),
            },
            rng: RngState::of(&tr.rng),
            step: tr.step,
            nvil: tr.nvil,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig, CheckpointError> {
        Ok(RunConfig::from_toml(&self.config, &[])?)
    }

    /// Rebuilds the trainer exactly as it was saved.
    pub fn restore<T: Scalar>(&self) -> Result<(RunConfig, Trainer<T>), CheckpointError> {
        let cfg = self.run_config()?;
        let mut model = DoodModel::<T>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0));
        let entries = model.params.entries().to_vec();
        if entries.len() != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "model has {} arrays, checkpoint has {}",
                entries.len(),
                self.params.len()
            )));
        }
        if self.optimizer.m.len() != entries.len() || self.optimizer.v.len() != entries.len() {
            return Err(CheckpointError::Mismatch("optimizer state does not match parameters".into()));
        }
        for (i, (e, a)) in entries.iter().zip(&self.params).enumerate() {
            if e.name != a.name || e.shape != a.shape {
                return Err(CheckpointError::Mismatch(format!(
                    "array {i}: model has {} {:?}, checkpoint has {} {:?}",
                    e.name, e.shape, a.name, a.shape
                )));
            }
            let n = a.data.len();
            if self.optimizer.m[i].len() != n || self.optimizer.v[i].len() != n {
                return Err(CheckpointError::Mismatch(format!("optimizer state for {}", a.name)));
            }
            let id = model.params.find(&a.name).expect("name checked above");
            *model.params.value_mut(id) = scalars(&a.data);
        }
        let mut tr = Trainer::new(model, cfg.train.clone());
        tr.adam = Adam {
            t: self.optimizer.t,
            skipped: self.optimizer.skipped,
            m: self.optimizer.m.iter().map(|m| scalars(m)).collect(),
            v: self.optimizer.v.iter().map(|v| scalars(v)).collect(),
            ..tr.adam
        };
        tr.rng = self.rng.rng();
        tr.step = self.step;
        tr.nvil = self.nvil;
        Ok((cfg, tr))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut w = Writer::default();
        w.str(&self.config);
        section(&mut out, TAGS[0], w);

        let mut w = Writer::default();
        w.u64(self.params.len() as u64);
        for a in &self.params {
            w.str(&a.name);
            w.u64(a.shape.len() as u64);
            for &d in &a.shape {
                w.u64(d as u64);
            }
            w.reals(&a.data);
        }
        section(&mut out, TAGS[1], w);

        let mut w = Writer::default();
        w.u64(self.optimizer.t);
        w.u64(self.optimizer.skipped);
        w.u64(self.optimizer.m.len() as u64);
        for (m, v) in self.optimizer.m.iter().zip(&self.optimizer.v) {
            w.reals(m);
            w.reals(v);
        }
        section(&mut out, TAGS[2], w);

        let mut w = Writer::default();
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        section(&mut out, TAGS[3], w);

        let mut w = Writer::default();
        w.u64(self.step);
        section(&mut out, TAGS[4], w);

        let mut w = Writer::default();
        for x in [self.nvil.mean, self.nvil.var, self.nvil.decay] {
            w.0.extend_from_slice(&x.to_le_bytes());
        }
        section(&mut out, TAGS[5], w);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.err(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut sections = Vec::with_capacity(TAGS.len());
        for tag in TAGS {
            let at = r.pos;
            if r.take(4)? != tag {
                return Err(r.err(at, &format!("expected section {}", String::from_utf8_lossy(tag))));
            }
            let len = r.u64()? as usize;
            let start = r.pos;
            let body = r.take(len)?;
            sections.push(Reader { buf: body, pos: 0 }.offset(start));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        let mut s = sections.into_iter();
        let mut conf = s.next().expect("six sections");
        let config = conf.str()?;
        conf.end()?;

        let mut para = s.next().expect("six sections");
        let n = para.u64()? as usize;
        let mut params = Vec::new();
        for _ in 0..n {
            let name = para.str()?;
            let rank = para.u64()? as usize;
            let shape = (0..rank).map(|_| para.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let at = para.abs();
            let data = para.reals()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(para.err(at, &format!("array {name}: shape {shape:?} does not match {} values", data.len())));
            }
            params.push(NamedArray { name, shape, data });
        }
        para.end()?;

        let mut adam = s.next().expect("six sections");
        let t = adam.u64()?;
        let skipped = adam.u64()?;
        let n = adam.u64()? as usize;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n {
            m.push(adam.reals()?);
            v.push(adam.reals()?);
        }
        adam.end()?;

        let mut rng = s.next().expect("six sections");
        let seed: [u8; 32] = rng.take(32)?.try_into().expect("32 bytes");
        let stream = rng.u64()?;
        let word_pos = u128::from_le_bytes(rng.take(16)?.try_into().expect("16 bytes"));
        rng.end()?;

        let mut st = s.next().expect("six sections");
        let step = st.u64()?;
        st.end()?;

        let mut nv = s.next().expect("six sections");
        let mut f = || nv.take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
        let nvil = NvilStats {
            mean: f()?,
            var: f()?,
            decay: f()?,
        };
        nv.end()?;

        Ok(Self {
            config,
            params,
            optimizer: OptimizerState { t, skipped, m, v },
            rng: RngState { seed, stream, word_pos },
            step,
            nvil,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], w: Writer) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(w.0.len() as u64).to_le_bytes());
    out.extend_from_slice(&w.0);
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn reals(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

struct Section<'a> {
    r: Reader<'a>,
    base: usize,
}

impl<'a> Reader<'a> {
    fn offset(self, base: usize) -> Section<'a> {
        Section { r: self, base }
    }

    fn err(&self, offset: usize, msg: &str) -> CheckpointError {
        CheckpointError::Format {
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.err(self.pos, "truncated")),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl<'a> Section<'a> {
    fn abs(&self) -> usize {
        self.base + self.r.pos
    }

    fn err(&self, offset: usize, msg: &str) -> CheckpointError {
        self.r.err(offset, msg)
    }

    fn wrap<V>(&self, v: Result<V, CheckpointError>) -> Result<V, CheckpointError> {
        v.map_err(|e| match e {
            CheckpointError::Format { offset, msg } => CheckpointError::Format {
                offset: offset + self.base,
                msg,
            },
            e => e,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let v = self.r.take(n);
        self.wrap(v)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let v = self.r.u64();
        self.wrap(v)
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let at = self.abs();
        let n = self.u64()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err(at, "string is not UTF-8"))
    }

    fn reals(&mut self) -> Result<Vec<f32>, CheckpointError> {
        let n = self.u64()? as usize;
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.err(self.abs(), "length overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn end(&self) -> Result<(), CheckpointError> {
        if self.r.pos == self.r.buf.len() {
            Ok(())
        } else {
            Err(self.err(self.abs(), "unread bytes at end of section"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generative::tests::tiny_config;

    fn setup() -> (RunConfig, Trainer<f32>) {
        let mut cfg = RunConfig::default();
        cfg.model = tiny_config();
        cfg.synthetic.image_size = cfg.model.image_size;
        cfg.train.batch_size = 3;
        let tr = cfg.trainer::<f32>();
        (cfg, tr)
    }

    fn data(n: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|i| (0..256).map(|p| if (p + i) % 37 < 4 { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (cfg, mut tr) = setup();
        tr.train(&data(5), 2, |_, _| Ok(())).unwrap();
        let bytes = Checkpoint::from_trainer(&cfg, &tr).to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let (_, back) = ck.restore::<f32>().unwrap();
        assert_eq!(Checkpoint::from_trainer(&cfg, &back).to_bytes(), bytes);
        for (a, b) in tr.model.params.entries().iter().zip(back.model.params.entries()) {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (cfg, mut tr) = setup();
        let d = data(6);
        tr.train(&d, 2, |_, _| Ok(())).unwrap();
        let (_, mut back) = Checkpoint::from_bytes(&Checkpoint::from_trainer(&cfg, &tr).to_bytes())
            .unwrap()
            .restore::<f32>()
            .unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        tr.train(&d, 4, |_, m| Ok(a.push(m.clone()))).unwrap();
        back.train(&d, 4, |_, m| Ok(b.push(m.clone()))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let (cfg, tr) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = Checkpoint::from_trainer(&cfg, &tr);
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (cfg, tr) = setup();
        let bytes = Checkpoint::from_trainer(&cfg, &tr).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Format { .. })));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Format { offset: 0, .. })));
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(CheckpointError::Version(_))));
        let mut b = bytes.clone();
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let (cfg, tr) = setup();
        let mut ck = Checkpoint::from_trainer(&cfg, &tr);
        let mut other = cfg.clone();
        other.model.hidden += 1;
        ck.config = other.to_toml();
        assert!(matches!(ck.restore::<f32>(), Err(CheckpointError::Mismatch(_))));
    }
}
