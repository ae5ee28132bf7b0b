//! Binary checkpoints of the complete trainer state.
//!
//! Layout: the 8-byte magic `GATECKPT`, a `u32` format version, a `u64`
//! payload length, the payload, and the SHA-256 of the payload. Integers and
//! reals are little-endian; reals are stored as raw `f64` bits so a reload is
//! exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::bilevel::{AdamLambdaState, EpochRecord, InnerOptimizer, TrainerState, TransferRatios};
use crate::data::{SplitState, TaskSplit};
use crate::error::{GateError, Result};
use crate::losses::LossBreakdown;
use crate::model::{Dense, GateParams, Mlp, TaskModules, TaskRegistry};

pub const MAGIC: &[u8; 8] = b"GATECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    /// hex SHA-256 of the training configuration
    pub config_hash: String,
    pub state: TrainerState,
}

/// `<out>/ckpt_<epoch>.bin`
pub fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt_{epoch}.bin"))
}

/// Checkpoint files in `dir`, sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries =
        fs::read_dir(dir).map_err(|e| GateError::io(format!("listing {}", dir.display()), e))?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| GateError::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(epoch) = name
            .strip_prefix("ckpt_")
            .and_then(|r| r.strip_suffix(".bin"))
            .and_then(|e| e.parse::<usize>().ok())
        {
            found.push((epoch, entry.path()));
        }
    }
    found.sort();
    Ok(found)
}

/// Write atomically: a temp file in the same directory, then rename.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    let tmp = path.with_extension("bin.tmp");
    fs::write(&tmp, &bytes).map_err(|e| GateError::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| GateError::io(format!("renaming to {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| GateError::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

/// Load and require a matching configuration hash.
pub fn load_for_resume(path: &Path, config_hash: &str) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.config_hash != config_hash {
        return Err(GateError::ConfigHashMismatch);
    }
    Ok(ckpt)
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.usize(ckpt.epoch);
    w.str(&ckpt.config_hash);
    write_state(&mut w, &ckpt.state);
    let payload = w.buf;

    let mut out = Vec::with_capacity(payload.len() + 52);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| GateError::CorruptCheckpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(GateError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() != len.saturating_add(32) {
        return Err(corrupt("length does not match payload"));
    }
    let (payload, digest) = body.split_at(len);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let epoch = r.usize()?;
    let config_hash = r.str()?;
    let state = read_state(&mut r)?;
    if r.pos != payload.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        epoch,
        config_hash,
        state,
    })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }
    fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.f64(*x));
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usizes(t.shape());
        self.f64s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(GateError::CorruptCheckpoint("payload ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| GateError::CorruptCheckpoint("length overflow".into()))
    }
    /// A length prefix, bounded by the bytes left so corrupt input cannot
    /// trigger a huge allocation.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(GateError::CorruptCheckpoint("length exceeds payload".into()));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?)
            .map_err(|_| GateError::CorruptCheckpoint("invalid utf-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.usizes()?;
        let data = self.f64s()?;
        Tensor::new(shape, data).map_err(|e| GateError::CorruptCheckpoint(e.to_string()))
    }
}

fn write_mlp(w: &mut Writer, m: &Mlp) {
    w.usize(m.layers().len());
    for l in m.layers() {
        w.tensor(&l.weight);
        w.tensor(&l.bias);
    }
}

fn read_mlp(r: &mut Reader<'_>) -> Result<Mlp> {
    let n = r.len(1)?;
    let layers = (0..n)
        .map(|_| {
            Ok(Dense {
                weight: r.tensor()?,
                bias: r.tensor()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Mlp::new(layers).map_err(|e| GateError::CorruptCheckpoint(e.to_string()))
}

fn write_state(w: &mut Writer, s: &TrainerState) {
    let reg = s.params.registry();
    w.usize(reg.len());
    for id in reg.ids() {
        w.str(id.as_str());
    }
    write_mlp(w, s.params.embedder());
    for i in 0..reg.len() {
        let t = s.params.task(i);
        for m in [&t.encoder, &t.to_manifold, &t.from_manifold, &t.head] {
            write_mlp(w, m);
        }
    }

    w.usize(s.lambda.num_tasks());
    w.f64(s.lambda.lambda_min());
    w.u8(s.lambda.symmetric() as u8);
    w.f64s(s.lambda.values());

    let a = &s.lambda_opt;
    w.f64s(&a.m);
    w.f64s(&a.v);
    w.u64(a.step);
    for x in [a.beta0, a.beta1, a.eta, a.eps] {
        w.f64(x);
    }

    match &s.inner_opt {
        InnerOptimizer::Sgd { lr } => {
            w.u8(0);
            w.f64(*lr);
        }
        InnerOptimizer::Adam {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        } => {
            w.u8(1);
            for x in [*lr, *beta1, *beta2, *eps] {
                w.f64(x);
            }
            w.u64(*step);
            for moments in [m, v] {
                w.usize(moments.len());
                moments.iter().for_each(|x| w.f64s(x));
            }
        }
    }

    w.usize(s.split.tasks.len());
    for t in &s.split.tasks {
        w.usizes(&t.train);
        w.usizes(&t.val);
        w.usizes(&t.test);
    }

    w.bytes(&s.noise_rng.get_seed());
    w.u64(s.noise_rng.get_stream());
    w.u128(s.noise_rng.get_word_pos());

    w.usize(s.epoch);
    w.f64(s.best_val);
    w.usize(s.stale_epochs);
    w.u8(s.stopped as u8);

    w.usize(s.history.len());
    for rec in &s.history {
        w.usize(rec.epoch);
        w.f64s(&rec.val_rmse);
        w.usize(rec.train_losses.len());
        for b in &rec.train_losses {
            for x in [b.reg, b.map, b.ae, b.cons, b.dis, b.tot] {
                w.f64(x);
            }
        }
        w.f64s(&rec.lambda);
        match rec.seconds {
            None => w.u8(0),
            Some(sec) => {
                w.u8(1);
                w.f64(sec);
            }
        }
    }
}

fn read_state(r: &mut Reader<'_>) -> Result<TrainerState> {
    let corrupt = |e: GateError| GateError::CorruptCheckpoint(e.to_string());
    let n = r.len(8)?;
    let names = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let registry = TaskRegistry::from_names(&names).map_err(corrupt)?;
    let embedder = read_mlp(r)?;
    let tasks = (0..n)
        .map(|_| {
            Ok(TaskModules {
                encoder: read_mlp(r)?,
                to_manifold: read_mlp(r)?,
                from_manifold: read_mlp(r)?,
                head: read_mlp(r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = GateParams::from_parts(registry, embedder, tasks).map_err(corrupt)?;

    let ln = r.usize()?;
    let lambda_min = r.f64()?;
    let symmetric = r.u8()? != 0;
    let values = r.f64s()?;
    let lambda = TransferRatios::from_values(ln, values.clone(), lambda_min, symmetric).map_err(corrupt)?;
    if lambda.values() != values.as_slice() {
        return Err(GateError::CorruptCheckpoint("ratio matrix is not canonical".into()));
    }

    let m = r.f64s()?;
    let v = r.f64s()?;
    let step = r.u64()?;
    let lambda_opt = AdamLambdaState {
        m,
        v,
        step,
        beta0: r.f64()?,
        beta1: r.f64()?,
        eta: r.f64()?,
        eps: r.f64()?,
    };

    let inner_opt = match r.u8()? {
        0 => InnerOptimizer::Sgd { lr: r.f64()? },
        1 => {
            let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let step = r.u64()?;
            let mut moments = Vec::with_capacity(2);
            for _ in 0..2 {
                let k = r.len(8)?;
                moments.push((0..k).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?);
            }
            let v = moments.pop().expect("two");
            let m = moments.pop().expect("two");
            InnerOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            }
        }
        tag => return Err(GateError::CorruptCheckpoint(format!("unknown optimizer tag {tag}"))),
    };

    let k = r.len(24)?;
    let tasks = (0..k)
        .map(|_| {
            Ok(TaskSplit {
                train: r.usizes()?,
                val: r.usizes()?,
                test: r.usizes()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let split = SplitState { tasks };

    let seed: [u8; 32] = r
        .bytes()?
        .try_into()
        .map_err(|_| GateError::CorruptCheckpoint("rng seed must be 32 bytes".into()))?;
    let mut noise_rng = ChaCha8Rng::from_seed(seed);
    noise_rng.set_stream(r.u64()?);
    noise_rng.set_word_pos(r.u128()?);

    let epoch = r.usize()?;
    let best_val = r.f64()?;
    let stale_epochs = r.usize()?;
    let stopped = r.u8()? != 0;

    let h = r.len(8)?;
    let mut history = Vec::with_capacity(h);
    for _ in 0..h {
        let epoch = r.usize()?;
        let val_rmse = r.f64s()?;
        let nl = r.len(48)?;
        let train_losses = (0..nl)
            .map(|_| {
                Ok(LossBreakdown {
                    reg: r.f64()?,
                    map: r.f64()?,
                    ae: r.f64()?,
                    cons: r.f64()?,
                    dis: r.f64()?,
                    tot: r.f64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lambda = r.f64s()?;
        let seconds = match r.u8()? {
            0 => None,
            _ => Some(r.f64()?),
        };
        history.push(EpochRecord {
            epoch,
            val_rmse,
            train_losses,
            lambda,
            seconds,
        });
    }

    Ok(TrainerState {
        params,
        lambda,
        lambda_opt,
        inner_opt,
        split,
        noise_rng,
        epoch,
        best_val,
        stale_epochs,
        stopped,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::tests::{toy_problem, toy_settings};
    use crate::bilevel::{InnerOptimizerSpec, Trainer};

    fn trained(epochs: usize, sgd: bool) -> Trainer {
        let (ds, split) = toy_problem(2, 30);
        let mut s = toy_settings(epochs.max(1));
        if sgd {
            s.train.optimizer = InnerOptimizerSpec::Sgd { lr: 0.05 };
            s.train.record_wall_clock = true;
        }
        let mut tr = Trainer::new(s, ds, split).unwrap();
        if epochs > 0 {
            tr.run().unwrap();
        }
        tr
    }

    fn ckpt(tr: &Trainer) -> Checkpoint {
        Checkpoint {
            epoch: tr.epoch(),
            config_hash: "abc".into(),
            state: tr.state().clone(),
        }
    }

    #[test]
    fn round_trip_fresh_and_trained() {
        let fresh = trained(0, false);
        let c = ckpt(&fresh);
        let back = decode(&encode(&c)).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.state.params.checksum(), fresh.params().checksum());

        for sgd in [false, true] {
            let c = ckpt(&trained(2, sgd));
            assert_eq!(decode(&encode(&c)).unwrap(), c);
        }
    }

    #[test]
    fn truncated_and_flipped() {
        let bytes = encode(&ckpt(&trained(1, false)));
        for cut in [0, 10, 19, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut]),
                Err(GateError::CorruptCheckpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&flipped), Err(GateError::CorruptCheckpoint(_))));
        let mut versioned = bytes;
        versioned[8] = 9;
        assert!(matches!(
            decode(&versioned),
            Err(GateError::CheckpointVersion { found: 9, .. })
        ));
    }

    #[test]
    fn file_io_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt(&trained(1, false));
        let path = checkpoint_path(dir.path(), 1);
        save(&c, &path).unwrap();
        assert_eq!(load(&path).unwrap(), c);
        assert!(load_for_resume(&path, "abc").is_ok());
        assert!(matches!(
            load_for_resume(&path, "xyz"),
            Err(GateError::ConfigHashMismatch)
        ));
        assert_eq!(list_checkpoints(dir.path()).unwrap(), vec![(1, path)]);
    }

    #[test]
    fn restored_rng_continues_stream() {
        use rand::Rng;
        let tr = trained(1, false);
        let mut a = tr.state().noise_rng.clone();
        let mut b = decode(&encode(&ckpt(&tr))).unwrap().state.noise_rng;
        let xa: Vec<u64> = (0..5).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..5).map(|_| b.random()).collect();
        assert_eq!(xa, xb);
    }
}
