//! Binary checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` version, then fields in a
//! fixed order. Integers and floats are little-endian; every variable-length
//! field is prefixed by a `u64` element count that is checked against the
//! bytes remaining before anything is allocated. Trailing bytes are an error.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::minimax::run::{EpochAccum, RunPhase};
use crate::minimax::{Etas, PruneGroup, PruningState, SparsityMode};
use crate::optim::{OptimizerKind, WeightMask};
use crate::resource::ResourceKind;
use crate::snn::{Architecture, Layer, LifParams, SpikingNetwork};
use crate::sparsity::Granularity;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNNMXCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub lif: LifParams,
    pub prunable: bool,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// Position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerRecord {
    pub kind: OptimizerKind,
    pub steps: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

/// Everything beyond the model needed to continue a run mid-way.
#[derive(Debug, Clone, PartialEq)]
pub struct ResumeState {
    pub optimizer: OptimizerRecord,
    pub budgets: Vec<f64>,
    pub pure_training: bool,
    pub phase: RunPhase,
    pub mask: Option<WeightMask>,
    pub perm: Vec<usize>,
    pub cursor: usize,
    pub accum: EpochAccum,
    pub last_resource: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub timesteps: usize,
    pub detach_reset: bool,
    pub resource: ResourceKind,
    pub layers: Vec<LayerRecord>,
    pub pruning: PruningState,
    pub rng: RngState,
    pub budget_tag: Option<f64>,
    pub epoch: u64,
    pub iteration: u64,
    pub accuracy: Option<f64>,
    pub resume: Option<ResumeState>,
}

impl Checkpoint {
    pub fn from_network(net: &SpikingNetwork, pruning: PruningState, resource: ResourceKind, rng: RngState) -> Self {
        Self {
            arch: net.architecture().to_string(),
            timesteps: net.timesteps(),
            detach_reset: net.detach_reset,
            resource,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    lif: l.lif,
                    prunable: l.prunable,
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.as_ref().map(|b| b.data().to_vec()),
                })
                .collect(),
            pruning,
            rng,
            budget_tag: None,
            epoch: 0,
            iteration: 0,
            accuracy: None,
            resume: None,
        }
    }

    /// Rebuild the network, checking every tensor against the architecture.
    pub fn network(&self) -> Result<SpikingNetwork> {
        let arch: Architecture = self.arch.parse()?;
        let kinds = arch.geometries()?;
        if kinds.len() != self.layers.len() {
            return Err(Error::format(format!(
                "architecture has {} layers, checkpoint stores {}",
                kinds.len(),
                self.layers.len()
            )));
        }
        let layers = kinds
            .into_iter()
            .zip(&self.layers)
            .map(|(kind, rec)| {
                let weight = Tensor::new(kind.weight_shape(), rec.weight.clone())?;
                let bias = rec
                    .bias
                    .as_ref()
                    .map(|b| Tensor::new(vec![b.len()], b.clone()))
                    .transpose()?;
                let mut layer = Layer::new(kind, weight, bias, rec.lif)?;
                layer.prunable = rec.prunable;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = SpikingNetwork::new(arch.input_shape, layers, self.timesteps)?;
        net.detach_reset = self.detach_reset;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(&self.arch);
        w.u64(self.timesteps as u64);
        w.bool(self.detach_reset);
        w.u8(match self.resource {
            ResourceKind::Connectivity => 0,
            ResourceKind::Parameters => 1,
            ResourceKind::Flops => 2,
        });
        w.u64(self.layers.len() as u64);
        for l in &self.layers {
            w.f64(l.lif.tau_m);
            w.f64(l.lif.v_rest);
            w.f64(l.lif.v_th);
            w.bool(l.prunable);
            w.f64s(&l.weight);
            w.opt(l.bias.as_ref(), |w, b| w.f64s(b));
        }
        write_pruning(&mut w, &self.pruning);
        w.buf.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.opt(self.budget_tag.as_ref(), |w, v| w.f64(*v));
        w.u64(self.epoch);
        w.u64(self.iteration);
        w.opt(self.accuracy.as_ref(), |w, v| w.f64(*v));
        w.opt(self.resume.as_ref(), write_resume);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let arch = r.str()?;
        let timesteps = r.usize()?;
        let detach_reset = r.bool()?;
        let resource = match r.u8()? {
            0 => ResourceKind::Connectivity,
            1 => ResourceKind::Parameters,
            2 => ResourceKind::Flops,
            t => return Err(Error::format(format!("bad resource tag {t}"))),
        };
        let n = r.len(8 * 3 + 1 + 8 + 1)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let lif = LifParams {
                tau_m: r.f64()?,
                v_rest: r.f64()?,
                v_th: r.f64()?,
            };
            layers.push(LayerRecord {
                lif,
                prunable: r.bool()?,
                weight: r.f64s()?,
                bias: r.opt(|r| r.f64s())?,
            });
        }
        let pruning = read_pruning(&mut r)?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let budget_tag = r.opt(|r| r.f64())?;
        let epoch = r.u64()?;
        let iteration = r.u64()?;
        let accuracy = r.opt(|r| r.f64())?;
        let resume = r.opt(read_resume)?;
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            arch,
            timesteps,
            detach_reset,
            resource,
            layers,
            pruning,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            budget_tag,
            epoch,
            iteration,
            accuracy,
            resume,
        })
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Read and fully validate a checkpoint, including its tensor shapes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::from_bytes(&fs::read(path)?)?;
    let net = ck.network()?;
    ck.pruning.validate(&net)?;
    Ok(ck)
}

fn write_pruning(w: &mut Writer, p: &PruningState) {
    w.u8(match p.mode {
        SparsityMode::Global => 0,
        SparsityMode::PerLayer => 1,
    });
    w.u8(match p.granularity {
        Granularity::Unstructured => 0,
        Granularity::Structured => 1,
    });
    for e in [p.etas.eta1, p.etas.eta2, p.etas.eta3, p.etas.eta4, p.z] {
        w.f64(e);
    }
    w.u64(p.groups.len() as u64);
    for g in &p.groups {
        w.u64(g.layers.len() as u64);
        g.layers.iter().for_each(|&l| w.u64(l as u64));
        w.f64(g.s);
        w.f64(g.y);
    }
}

fn read_pruning(r: &mut Reader) -> Result<PruningState> {
    let mode = match r.u8()? {
        0 => SparsityMode::Global,
        1 => SparsityMode::PerLayer,
        t => return Err(Error::format(format!("bad sparsity mode tag {t}"))),
    };
    let granularity = match r.u8()? {
        0 => Granularity::Unstructured,
        1 => Granularity::Structured,
        t => return Err(Error::format(format!("bad granularity tag {t}"))),
    };
    let etas = Etas {
        eta1: r.f64()?,
        eta2: r.f64()?,
        eta3: r.f64()?,
        eta4: r.f64()?,
    };
    let z = r.f64()?;
    let n = r.len(8 + 16)?;
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.len(8)?;
        let layers = (0..k).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        groups.push(PruneGroup {
            layers,
            s: r.f64()?,
            y: r.f64()?,
        });
    }
    Ok(PruningState {
        groups,
        z,
        etas,
        mode,
        granularity,
    })
}

fn write_resume(w: &mut Writer, s: &ResumeState) {
    let o = &s.optimizer;
    match o.kind {
        OptimizerKind::Adam { beta1, beta2, eps } => {
            w.u8(0);
            [beta1, beta2, eps].into_iter().for_each(|v| w.f64(v));
        }
        OptimizerKind::Sgd {
            momentum,
            weight_decay,
        } => {
            w.u8(1);
            [momentum, weight_decay, 0.0].into_iter().for_each(|v| w.f64(v));
        }
    }
    w.u64(o.steps);
    for bufs in [&o.first, &o.second] {
        w.u64(bufs.len() as u64);
        bufs.iter().for_each(|b| w.f64s(b));
    }
    w.f64s(&s.budgets);
    w.bool(s.pure_training);
    match s.phase {
        RunPhase::Pruning => w.u8(0),
        RunPhase::Finetune {
            budget,
            epochs_left,
            partial,
            iter,
            iters_total,
        } => {
            w.u8(1);
            w.f64(budget);
            w.u64(epochs_left);
            w.bool(partial);
            w.u64(iter);
            w.u64(iters_total);
        }
        RunPhase::Done => w.u8(2),
    }
    w.opt(s.mask.as_ref(), |w, mask| {
        w.u64(mask.len() as u64);
        for (layer, m) in mask {
            w.u64(*layer as u64);
            w.u64(m.len() as u64);
            w.buf.extend(m.iter().map(|&b| u8::from(b)));
        }
    });
    w.u64(s.perm.len() as u64);
    s.perm.iter().for_each(|&p| w.u64(p as u64));
    w.u64(s.cursor as u64);
    w.f64(s.accum.loss_sum);
    w.u64(s.accum.batches);
    w.u64(s.accum.correct);
    w.u64(s.accum.seen);
    w.f64(s.last_resource);
}

fn read_resume(r: &mut Reader) -> Result<ResumeState> {
    let tag = r.u8()?;
    let (a, b, c) = (r.f64()?, r.f64()?, r.f64()?);
    let kind = match tag {
        0 => OptimizerKind::Adam {
            beta1: a,
            beta2: b,
            eps: c,
        },
        1 => OptimizerKind::Sgd {
            momentum: a,
            weight_decay: b,
        },
        t => return Err(Error::format(format!("bad optimizer tag {t}"))),
    };
    let steps = r.u64()?;
    let mut bufs = Vec::with_capacity(2);
    for _ in 0..2 {
        let n = r.len(8)?;
        bufs.push((0..n).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?);
    }
    let second = bufs.pop().expect("two buffers");
    let first = bufs.pop().expect("two buffers");
    let budgets = r.f64s()?;
    let pure_training = r.bool()?;
    let phase = match r.u8()? {
        0 => RunPhase::Pruning,
        1 => RunPhase::Finetune {
            budget: r.f64()?,
            epochs_left: r.u64()?,
            partial: r.bool()?,
            iter: r.u64()?,
            iters_total: r.u64()?,
        },
        2 => RunPhase::Done,
        t => return Err(Error::format(format!("bad phase tag {t}"))),
    };
    let mask = r.opt(|r| {
        let n = r.len(16)?;
        (0..n)
            .map(|_| {
                let layer = r.usize()?;
                let len = r.len(1)?;
                let bits = r
                    .take(len)?
                    .iter()
                    .map(|&b| match b {
                        0 => Ok(false),
                        1 => Ok(true),
                        _ => Err(Error::format(format!("bad mask byte {b}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((layer, bits))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let n = r.len(8)?;
    let perm = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let cursor = r.usize()?;
    if cursor > perm.len() {
        return Err(Error::format("batch cursor past the permutation"));
    }
    let accum = EpochAccum {
        loss_sum: r.f64()?,
        batches: r.u64()?,
        correct: r.u64()?,
        seen: r.u64()?,
    };
    Ok(ResumeState {
        optimizer: OptimizerRecord {
            kind,
            steps,
            first,
            second,
        },
        budgets,
        pure_training,
        phase,
        mask,
        perm,
        cursor,
        accum,
        last_resource: r.f64()?,
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

    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn opt<T>(&mut self, v: Option<&T>, f: impl FnOnce(&mut Self, &T)) {
        match v {
            None => self.u8(0),
            Some(v) => {
                self.u8(1);
                f(self, v);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(format!("bad boolean byte {b}"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format("value does not fit in usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Element count of a following sequence whose elements take at least `min_size` bytes each.
    fn len(&mut self, min_size: usize) -> Result<usize> {
        let n = self.usize()?;
        let remaining = self.buf.len() - self.pos;
        match n.checked_mul(min_size) {
            Some(bytes) if bytes <= remaining => Ok(n),
            _ => Err(Error::format(format!(
                "length {n} at byte {} exceeds the {remaining} bytes left",
                self.pos - 8
            ))),
        }
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("string is not utf-8"))
    }

    fn opt<T>(&mut self, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<Option<T>> {
        if self.bool()? {
            f(self).map(Some)
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::DEFAULT_MIN_PRUNABLE;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let arch: Architecture = "1x6x6/c2k3s1p1/fc3".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = SpikingNetwork::init(&arch, 3, LifParams::default(), true, &mut rng).unwrap();
        net.mark_prunable(DEFAULT_MIN_PRUNABLE.min(20));
        let mut state = PruningState::new(&net, SparsityMode::PerLayer, Granularity::Unstructured, Etas::default());
        state.groups[0].s = 3.5;
        state.groups[0].y = 0.25;
        state.z = 17.0;
        let mut ck = Checkpoint::from_network(
            &net,
            state,
            ResourceKind::Parameters,
            RngState {
                seed: [7; 32],
                stream: 3,
                word_pos: 1 << 70,
            },
        );
        ck.budget_tag = Some(0.25);
        ck.accuracy = Some(0.875);
        ck.epoch = 4;
        ck.iteration = 99;
        ck.resume = Some(ResumeState {
            optimizer: OptimizerRecord {
                kind: OptimizerKind::adam(),
                steps: 9,
                first: vec![vec![0.5; 3], vec![]],
                second: vec![vec![1e-300; 3], vec![]],
            },
            budgets: vec![0.25, 0.1],
            pure_training: false,
            phase: RunPhase::Finetune {
                budget: 0.25,
                epochs_left: 2,
                partial: true,
                iter: 5,
                iters_total: 40,
            },
            mask: Some(vec![(0, vec![true, false, true])]),
            perm: vec![2, 0, 1],
            cursor: 1,
            accum: EpochAccum {
                loss_sum: 0.1 + 0.2,
                batches: 2,
                correct: 3,
                seen: 4,
            },
            last_resource: 0.3,
        });
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let net = back.network().unwrap();
        assert_eq!(net.layers[0].weight.data(), ck.layers[0].weight.as_slice());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let ck = sample();
        save_checkpoint(&p, &ck).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
    }

    #[test]
    fn rejects_other_versions() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Version { found, .. }) if found == FORMAT_VERSION + 1
        ));
    }

    #[test]
    fn corrupt_length_is_a_format_error() {
        let mut bytes = sample().to_bytes();
        // arch string length sits right after the version
        bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 12, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn weight_shape_mismatch_is_caught() {
        let mut ck = sample();
        ck.layers[1].weight.pop();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.network().is_err());
    }
}
