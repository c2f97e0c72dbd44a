//! Versioned binary checkpoints: parameters, optimizer accumulators, and
//! the training configuration, with a CRC-32 over the payload.
//!
//! Layout (little-endian):
//!   magic "SSEG" | u32 version | u64 spec hash | config | u64 epochs done
//!   | tensor directory (name, rank, dims, f64 offset) | payload f64s
//!   | u32 CRC-32 of the payload bytes

use std::path::Path;

use crate::error::{Result, SaltError};
use crate::loss::Reduction;
use crate::model::{build_model, Model};
use crate::optim::{AdadeltaParams, OptimizerState, ParamState};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"SSEG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: u64,
    pub config: TrainConfig,
    pub epochs_completed: u64,
    /// Named tensors: parameters and optimizer accumulators.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot a model plus optimizer state. Tensor order is fixed:
    /// per conv layer weights/bias, then the two accumulators of each.
    pub fn capture(
        model: &Model,
        opt: &OptimizerState,
        config: &TrainConfig,
        epochs_completed: u64,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, k) in model.params.iter().enumerate() {
            tensors.push((format!("conv{i}.w"), k.weights.clone()));
            tensors.push((format!("conv{i}.b"), k.bias.clone()));
        }
        for (i, slot) in opt.slots.iter().enumerate() {
            tensors.push((format!("slot{i}.acc_g"), slot.acc_grad_sq.clone()));
            tensors.push((format!("slot{i}.acc_d"), slot.acc_update_sq.clone()));
        }
        Checkpoint {
            spec_hash: model.spec_hash(),
            config: config.clone(),
            epochs_completed,
            tensors,
        }
    }

    fn named(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| SaltError::Checkpoint(format!("missing tensor '{name}'")))
    }

    /// Rebuild the model and optimizer state this checkpoint captured.
    pub fn restore(&self) -> Result<(Model, OptimizerState)> {
        let mut model = build_model(self.config.seed, self.config.faithful_table1);
        if model.spec_hash() != self.spec_hash {
            return Err(SaltError::Checkpoint(format!(
                "model spec hash {:016x} does not match checkpoint {:016x}",
                model.spec_hash(),
                self.spec_hash
            )));
        }
        let n = model.params.len();
        let hyper = AdadeltaParams {
            rho: self.config.rho,
            eps: self.config.eps,
            lr_scale: self.config.lr_scale,
        };
        let mut slots = Vec::with_capacity(2 * n);
        for i in 0..n {
            let w = self.named(&format!("conv{i}.w"))?;
            let b = self.named(&format!("conv{i}.b"))?;
            if w.dims() != model.params[i].weights.dims() || b.dims() != model.params[i].bias.dims()
            {
                return Err(SaltError::Checkpoint(format!(
                    "tensor dims for conv layer {i} do not match the architecture"
                )));
            }
            model.params[i].weights = w.clone();
            model.params[i].bias = b.clone();
        }
        for i in 0..2 * n {
            slots.push(ParamState {
                acc_grad_sq: self.named(&format!("slot{i}.acc_g"))?.clone(),
                acc_update_sq: self.named(&format!("slot{i}.acc_d"))?.clone(),
            });
        }
        Ok((model, OptimizerState { hyper, slots }))
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u64(&mut buf, ckpt.spec_hash);

    let c = &ckpt.config;
    push_u64(&mut buf, c.epochs);
    push_u64(&mut buf, c.batch_size as u64);
    push_f64(&mut buf, c.lr_scale);
    push_f64(&mut buf, c.rho);
    push_f64(&mut buf, c.eps);
    push_u64(&mut buf, c.seed);
    push_f64(&mut buf, c.train_fraction);
    buf.push(u8::from(c.faithful_table1));
    buf.push(match c.reduction {
        Reduction::MeanAll => 0,
        Reduction::MeanBatch => 1,
    });
    push_u64(&mut buf, c.log_every);
    push_u64(&mut buf, c.checkpoint_every);
    push_u64(&mut buf, ckpt.epochs_completed);

    push_u32(&mut buf, ckpt.tensors.len() as u32);
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, t.rank() as u32);
        for &d in t.dims() {
            push_u64(&mut buf, d as u64);
        }
        push_u64(&mut buf, offset);
        offset += t.len() as u64;
    }
    push_u64(&mut buf, offset);
    let payload_start = buf.len();
    for (_, t) in &ckpt.tensors {
        for &v in t.data() {
            push_f64(&mut buf, v);
        }
    }
    let crc = crc32fast::hash(&buf[payload_start..]);
    push_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(SaltError::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(SaltError::Checkpoint("wrong magic (not a checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SaltError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let spec_hash = r.u64()?;
    let config = TrainConfig {
        epochs: r.u64()?,
        batch_size: r.u64()? as usize,
        lr_scale: r.f64()?,
        rho: r.f64()?,
        eps: r.f64()?,
        seed: r.u64()?,
        train_fraction: r.f64()?,
        faithful_table1: r.take(1)?[0] != 0,
        reduction: match r.take(1)?[0] {
            0 => Reduction::MeanAll,
            1 => Reduction::MeanBatch,
            other => {
                return Err(SaltError::Checkpoint(format!(
                    "unknown reduction tag {other}"
                )))
            }
        },
        log_every: r.u64()?,
        checkpoint_every: r.u64()?,
    };
    let epochs_completed = r.u64()?;

    let count = r.u32()? as usize;
    let mut directory = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SaltError::Checkpoint("invalid tensor name".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        directory.push((name, dims, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload_start = r.pos;
    let payload = r.take(payload_len * 8)?;
    let crc_stored = r.u32()?;
    let crc_actual = crc32fast::hash(&bytes[payload_start..payload_start + payload_len * 8]);
    if crc_stored != crc_actual {
        return Err(SaltError::Checkpoint(format!(
            "payload CRC mismatch (stored {crc_stored:08x}, computed {crc_actual:08x})"
        )));
    }

    let mut tensors = Vec::with_capacity(count);
    for (name, dims, offset) in directory {
        let n: usize = dims.iter().product();
        if offset + n > payload_len {
            return Err(SaltError::Checkpoint(format!(
                "tensor '{name}' exceeds payload bounds"
            )));
        }
        let data: Vec<f64> = payload[offset * 8..(offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(dims, data)?));
    }
    Ok(Checkpoint {
        spec_hash,
        config,
        epochs_completed,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = TrainConfig::default();
        let model = build_model(cfg.seed, cfg.faithful_table1);
        let opt = OptimizerState::new(AdadeltaParams::default(), &model.param_tensors());
        Checkpoint::capture(&model, &opt, &cfg, 0)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = encode(&ckpt);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample_checkpoint());
        let payload_byte = bytes.len() - 100;
        bytes[payload_byte] ^= 0x01;
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = encode(&sample_checkpoint());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn truncation_rejected() {
        let bytes = encode(&sample_checkpoint());
        assert!(decode(&bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn spec_hash_mismatch_rejected_on_restore() {
        let mut ckpt = sample_checkpoint();
        ckpt.spec_hash ^= 1;
        assert!(matches!(
            ckpt.restore(),
            Err(SaltError::Checkpoint(_))
        ));
    }

    #[test]
    fn restore_preserves_parameters() {
        let ckpt = sample_checkpoint();
        let (model, opt) = ckpt.restore().unwrap();
        let again = Checkpoint::capture(&model, &opt, &ckpt.config, ckpt.epochs_completed);
        assert_eq!(encode(&again), encode(&ckpt));
    }
}
