use std::path::Path;

use super::write_atomic;
use crate::deq::{Activation, DeqCell, DeqStack, SolverConfig};
use crate::error::{Error, Result};
use crate::harness::{Pretrained, Protocol, TunedModel};
use crate::lion::{Affine, Backbone, Classifier, GatePair, PromptModel, TuneMode};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"LIONCKPT";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
///
/// Layout: the 8-byte magic, `u32` version, `u32` entry count, then per entry
/// `u32` name length, UTF-8 name, `u32` rank, `rank × u32` dims and the values
/// as little-endian `f64`. All integers are little-endian.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Format(format!("duplicate entry `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        self.insert(name, Tensor::scalar(value)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.rank() != 0 {
            return Err(Error::Format(format!("entry `{name}` is not a scalar")));
        }
        Ok(t.item())
    }

    fn count(&self, name: &str) -> Result<usize> {
        let v = self.scalar(name)?;
        if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(Error::Format(format!("entry `{name}` = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a whole checkpoint; nothing is returned unless every entry is valid.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 2 {
                return Err(Error::Format(format!("entry `{name}` has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(Error::Format(format!("entry `{name}` is truncated")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?;
            ckpt.insert(name, t)?;
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Tanh => 0.0,
        Activation::Identity => 1.0,
        Activation::Relu => 2.0,
    }
}

fn activation_from(code: f64) -> Result<Activation> {
    match code {
        0.0 => Ok(Activation::Tanh),
        1.0 => Ok(Activation::Identity),
        2.0 => Ok(Activation::Relu),
        _ => Err(Error::Format(format!("unknown activation code {code}"))),
    }
}

fn protocol_code(p: Protocol) -> f64 {
    Protocol::ALL.iter().position(|&q| q == p).expect("listed") as f64
}

fn protocol_from(code: f64) -> Result<Protocol> {
    Protocol::ALL
        .iter()
        .enumerate()
        .find(|(i, _)| *i as f64 == code)
        .map(|(_, &p)| p)
        .ok_or_else(|| Error::Format(format!("unknown protocol code {code}")))
}

fn put_affine(ck: &mut Checkpoint, prefix: &str, a: &Affine) -> Result<()> {
    ck.insert(format!("{prefix}.weight"), a.weight.clone())?;
    ck.insert(format!("{prefix}.bias"), a.bias.clone())
}

fn get_affine(ck: &Checkpoint, prefix: &str) -> Result<Affine> {
    let weight = ck.get(&format!("{prefix}.weight"))?.clone();
    let bias = ck.get(&format!("{prefix}.bias"))?.clone();
    if weight.rank() != 2 || bias.rank() != 1 || bias.len() != weight.rows() {
        return Err(Error::Format(format!("`{prefix}` has inconsistent shapes")));
    }
    Ok(Affine { weight, bias })
}

fn put_backbone(ck: &mut Checkpoint, b: &Backbone) -> Result<()> {
    ck.insert_scalar("meta.backbone_layers", b.layers.len() as f64)?;
    ck.insert_scalar("meta.backbone_activation", activation_code(b.activation))?;
    for (i, l) in b.layers.iter().enumerate() {
        put_affine(ck, &format!("backbone.{i}"), l)?;
    }
    Ok(())
}

fn get_backbone(ck: &Checkpoint) -> Result<Backbone> {
    let n = ck.count("meta.backbone_layers")?;
    let layers = (0..n)
        .map(|i| get_affine(ck, &format!("backbone.{i}")))
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() || layers.windows(2).any(|w| w[0].output_dim() != w[1].input_dim()) {
        return Err(Error::Format("backbone layers do not chain".into()));
    }
    Ok(Backbone {
        layers,
        activation: activation_from(ck.scalar("meta.backbone_activation")?)?,
        frozen: true,
    })
}

/// Pretrained backbone and source head.
pub fn pretrained_to_checkpoint(p: &Pretrained) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    put_backbone(&mut ck, &p.backbone)?;
    put_affine(&mut ck, "head", &p.head)?;
    ck.insert_scalar("meta.train_accuracy", p.train_accuracy)?;
    if let Some(acc) = p.test_accuracy {
        ck.insert_scalar("meta.test_accuracy", acc)?;
    }
    Ok(ck)
}

pub fn pretrained_from_checkpoint(ck: &Checkpoint) -> Result<Pretrained> {
    let backbone = get_backbone(ck)?;
    let head = get_affine(ck, "head")?;
    if head.input_dim() != backbone.output_dim() {
        return Err(Error::Format("head does not match backbone output".into()));
    }
    Ok(Pretrained {
        backbone,
        head,
        train_accuracy: ck.scalar("meta.train_accuracy")?,
        test_accuracy: ck.scalar("meta.test_accuracy").ok(),
    })
}

fn put_stack(ck: &mut Checkpoint, prefix: &str, s: &DeqStack) -> Result<()> {
    for (k, c) in s.cells.iter().enumerate() {
        ck.insert(format!("{prefix}.{k}.w"), c.w.clone())?;
        ck.insert(format!("{prefix}.{k}.u"), c.u.clone())?;
        ck.insert(format!("{prefix}.{k}.b"), c.b.clone())?;
    }
    Ok(())
}

fn get_stack(ck: &Checkpoint, prefix: &str, layers: usize, kappa: f64, act: Activation) -> Result<DeqStack> {
    let cells = (0..layers)
        .map(|k| {
            let t = |f: &str| ck.get(&format!("{prefix}.{k}.{f}")).cloned();
            DeqCell::new(t("w")?, t("u")?, t("b")?, kappa, act)
        })
        .collect::<Result<Vec<_>>>()?;
    DeqStack::new(cells)
}

/// Any tuned model, tagged with its protocol.
pub fn tuned_to_checkpoint(protocol: Protocol, model: &TunedModel) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new();
    ck.insert_scalar("meta.protocol", protocol_code(protocol))?;
    match model {
        TunedModel::Classifier(m) => {
            put_backbone(&mut ck, &m.backbone)?;
            put_affine(&mut ck, "head", &m.head)?;
        }
        TunedModel::Lion(m) => {
            put_backbone(&mut ck, &m.backbone)?;
            let cell = &m.p1.cells[0];
            ck.insert_scalar("meta.layers", m.p1.layers() as f64)?;
            ck.insert_scalar("meta.kappa", cell.kappa)?;
            ck.insert_scalar("meta.activation", activation_code(cell.activation))?;
            ck.insert_scalar("meta.single_pass", if m.single_pass { 1.0 } else { 0.0 })?;
            ck.insert_scalar("meta.power_iters", m.power_iters as f64)?;
            ck.insert_scalar("meta.solver.tol", m.solver.tol)?;
            ck.insert_scalar("meta.solver.max_iters", m.solver.max_iters as f64)?;
            ck.insert_scalar("meta.solver.anderson_depth", m.solver.anderson_depth as f64)?;
            ck.insert_scalar("meta.solver.damping", m.solver.damping)?;
            put_stack(&mut ck, "p1", &m.p1)?;
            put_stack(&mut ck, "p2", &m.p2)?;
            put_affine(&mut ck, "proj", &m.proj)?;
            put_affine(&mut ck, "head", &m.head)?;
            for (prefix, g) in [("gate1", m.gate1), ("gate2", m.gate2)] {
                ck.insert_scalar(format!("{prefix}.g_alpha"), g.g_alpha)?;
                ck.insert_scalar(format!("{prefix}.g_beta"), g.g_beta)?;
            }
        }
    }
    Ok(ck)
}

pub fn tuned_from_checkpoint(ck: &Checkpoint) -> Result<(Protocol, TunedModel)> {
    let protocol = protocol_from(ck.scalar("meta.protocol")?)?;
    let backbone = get_backbone(ck)?;
    let head = get_affine(ck, "head")?;
    let model = match protocol {
        Protocol::Lion => {
            let layers = ck.count("meta.layers")?;
            let kappa = ck.scalar("meta.kappa")?;
            let act = activation_from(ck.scalar("meta.activation")?)?;
            let solver = SolverConfig {
                tol: ck.scalar("meta.solver.tol")?,
                max_iters: ck.count("meta.solver.max_iters")?,
                anderson_depth: ck.count("meta.solver.anderson_depth")?,
                damping: ck.scalar("meta.solver.damping")?,
            };
            solver.validate()?;
            let gate = |p: &str| -> Result<GatePair> {
                Ok(GatePair::new(
                    ck.scalar(&format!("{p}.g_alpha"))?,
                    ck.scalar(&format!("{p}.g_beta"))?,
                ))
            };
            let m = PromptModel {
                p1: get_stack(ck, "p1", layers, kappa, act)?,
                p2: get_stack(ck, "p2", layers, kappa, act)?,
                proj: get_affine(ck, "proj")?,
                head,
                gate1: gate("gate1")?,
                gate2: gate("gate2")?,
                backbone,
                solver,
                single_pass: ck.scalar("meta.single_pass")? != 0.0,
                power_iters: ck.count("meta.power_iters")?,
            };
            let (d, h) = (m.backbone.input_dim(), m.backbone.output_dim());
            if m.p1.input_dim() != d
                || m.p1.output_dim() != d
                || m.p2.input_dim() != h
                || m.proj.input_dim() != m.p2.output_dim()
                || m.proj.output_dim() != h
                || m.head.input_dim() != h
            {
                return Err(Error::Format("prompt blocks do not match the backbone".into()));
            }
            TunedModel::Lion(Box::new(m))
        }
        _ => {
            let mode = match protocol {
                Protocol::HeadTuning => TuneMode::Head,
                Protocol::BiasTuning => TuneMode::Bias,
                _ => TuneMode::Full,
            };
            TunedModel::Classifier(Classifier::new(backbone, head, mode)?)
        }
    };
    Ok((protocol, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{pretrain_backbone, run_protocol, PretrainConfig, ProtocolConfig, TaskSpec};
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert(
            "a",
            Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.1, 1e-300, -0.0]).unwrap(),
        )
        .unwrap();
        ck.insert_scalar("s", std::f64::consts::PI).unwrap();
        ck.insert("v", Tensor::vector(vec![]).unwrap()).unwrap();
        ck
    }

    #[test]
    fn bytes_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("s").unwrap().item().to_bits(), std::f64::consts::PI.to_bits());
        assert!(back.get("a").unwrap().data()[5].is_sign_negative());
    }

    #[test]
    fn rejects_bad_version_magic_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(7))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn models_round_trip_bit_exactly() {
        let spec = TaskSpec {
            dim: 5,
            train_samples: 80,
            test_samples: 40,
            ..TaskSpec::desk(1)
        };
        let task = spec.build().unwrap();
        let pcfg = PretrainConfig {
            hidden: vec![8],
            repr_dim: 4,
            target_accuracy: 0.0,
            ..PretrainConfig::default()
        };
        let pre = pretrain_backbone(&task.source_train, &pcfg, 1).unwrap();
        let ck = pretrained_to_checkpoint(&pre).unwrap();
        assert_eq!(pretrained_from_checkpoint(&ck).unwrap(), pre);

        let mut cfg = ProtocolConfig::default();
        cfg.train.epochs = 2;
        for p in Protocol::ALL {
            let run = run_protocol(p, &pre, &task.target_train, &task.target_test, &cfg).unwrap();
            let ck = tuned_to_checkpoint(p, &run.model).unwrap();
            let bytes = ck.to_bytes();
            let (q, model) = tuned_from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(q, p);
            assert_eq!(model, run.model);
            assert_eq!(tuned_to_checkpoint(q, &model).unwrap().to_bytes(), bytes);
            assert_eq!(model.accuracy(&task.target_test).unwrap(), run.result.accuracy);
        }
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(
            rows in 0usize..4,
            cols in 0usize..4,
            seed in proptest::collection::vec(-1e6f64..1e6, 16),
        ) {
            let mut ck = Checkpoint::new();
            ck.insert("m", Tensor::matrix(rows, cols, seed[..rows * cols].to_vec()).unwrap()).unwrap();
            ck.insert_scalar("x", seed[0]).unwrap();
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
