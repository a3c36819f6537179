//! Auto-encoder prior: training on auxiliary images, anomaly scoring and
//! the binary model file.
//!
//! Model file layout, all integers little-endian:
//!
//! ```text
//! b"GIPIP01\0"            8 bytes
//! tensor count            u32
//! per tensor:
//!   name length           u16
//!   name                  UTF-8
//!   rank                  u8
//!   extents               u32 × rank
//!   values                f64 × product(extents)
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::optim::{adam_step, AdamConfig, AdamState};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::nn::{init_autoencoder, AutoEncoderParams, InitScheme, ParamSet};
use crate::tensor::{Graph, Tensor};

pub const MODEL_MAGIC: [u8; 8] = *b"GIPIP01\0";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        PriorTrainConfig { epochs: 50, learning_rate: 1e-3, batch_size: 64, seed: 0 }
    }
}

impl PriorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("prior learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("prior batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Sum of squared reconstruction residuals over `batch` and its gradient
/// with respect to the flat auto-encoder parameters.
fn batch_loss_and_grad(ae: &AutoEncoderParams, batch: &Tensor) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let p = ae.params.bind(&mut g, true);
    let x = g.constant(batch.clone());
    let recon = ae.forward(&mut g, &p, x)?;
    let r = g.sub(recon, x)?;
    let sq = g.mul(r, r)?;
    let loss = g.sum(sq);
    let value = g.value(loss).item();
    let grads = g.gradients(loss, &p)?;
    Ok((value, grads.into_iter().flat_map(Tensor::into_data).collect()))
}

/// Trains the auto-encoder on `aux` with Adam on the per-batch summed
/// squared error. Returns the parameters and the mean per-image loss of
/// every epoch, accumulated while training.
pub fn train_autoencoder(
    aux: &ImageSet,
    config: &PriorTrainConfig,
    init: InitScheme,
) -> Result<(AutoEncoderParams, Vec<f64>)> {
    config.validate()?;
    if aux.is_empty() {
        return Err(Error::config("auxiliary set is empty; the prior needs training images"));
    }
    let [c, h, w] = aux.image_shape();
    let mut ae = init_autoencoder(c, init)?;
    ae.check_images(&[1, c, h, w])?;

    let mut flat = ae.params.flatten();
    let mut state = AdamState::new(flat.len());
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = aux.batch(chunk)?;
            let (loss, grad) = batch_loss_and_grad(&ae, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numeric { iteration: step, message: format!("prior loss is {loss}") });
            }
            total += loss;
            adam_step(&mut state, &mut flat, &grad, &adam, step)?;
            ae.params = ae.params.unflatten(&flat)?;
            step += 1;
        }
        trace.push(total / aux.len() as f64);
    }
    Ok((ae, trace))
}

/// Per-image squared reconstruction error `‖F(x_i) − x_i‖²`.
pub fn anomaly_score(x: &Tensor, ae: &AutoEncoderParams) -> Result<Vec<f64>> {
    ae.check_images(x.shape())?;
    let recon = ae.reconstruct(x)?;
    let per = x.numel() / x.shape()[0];
    Ok(recon
        .data()
        .chunks(per)
        .zip(x.data().chunks(per))
        .map(|(r, v)| r.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

/// Serialized size of `params` in the model file format.
pub fn encoded_len(params: &ParamSet) -> usize {
    12 + params
        .entries()
        .iter()
        .map(|(n, t)| 2 + n.len() + 1 + 4 * t.rank() + 8 * t.numel())
        .sum::<usize>()
}

pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(params));
    out.extend_from_slice(&MODEL_MAGIC);
    let count = u32::try_from(params.len()).map_err(|_| Error::arg("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.entries() {
        let len = u16::try_from(name.len()).map_err(|_| Error::arg(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| Error::arg(format!("rank of {name} exceeds 255")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::arg(format!("extent of {name} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Decodes a model file. Also returns the byte offset of every tensor
/// descriptor, for error reporting by callers that validate layouts.
pub fn decode_params(bytes: &[u8]) -> Result<(ParamSet, Vec<u64>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MODEL_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let count = u32::from_le_bytes(r.take(4, "tensor count")?.try_into().unwrap());
    let mut params = ParamSet::default();
    let mut offsets = Vec::new();
    for _ in 0..count {
        let start = r.pos as u64;
        offsets.push(start);
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format(start + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.pos as u64;
            let d = u32::from_le_bytes(r.take(4, "extent")?.try_into().unwrap()) as usize;
            if d == 0 {
                return Err(Error::format(at, format!("zero extent in {name}")));
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(start, format!("extents of {name} overflow")))?
            / 8;
        let raw = r.take(numel * 8, "tensor values")?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(name, Tensor::from_parts(shape, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((params, offsets))
}

pub fn save_model(params: &ParamSet, path: &Path) -> Result<()> {
    let bytes = encode_params(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_params(&bytes)?.0)
}

/// Decodes a model file and checks it holds an auto-encoder layout.
/// Layout mismatches are reported at the offset of the offending tensor.
pub fn decode_autoencoder(bytes: &[u8]) -> Result<AutoEncoderParams> {
    let (params, offsets) = decode_params(bytes)?;
    let channels = params.get("enc1.weight").and_then(|t| t.shape().get(1).copied()).unwrap_or(0);
    if channels == 0 {
        return Err(Error::format(12, "no enc1.weight tensor with an input-channel extent"));
    }
    let reference = init_autoencoder(channels, InitScheme::normal(0.0, 0))?;
    let expected = reference.params.entries();
    for (i, (name, t)) in params.entries().iter().enumerate() {
        match expected.get(i) {
            Some((en, et)) if en == name && et.shape() == t.shape() => {}
            Some((en, et)) => {
                return Err(Error::format(
                    offsets[i],
                    format!("expected {en} {:?}, found {name} {:?}", et.shape(), t.shape()),
                ))
            }
            None => return Err(Error::format(offsets[i], format!("unexpected tensor {name}"))),
        }
    }
    if params.len() != expected.len() {
        return Err(Error::format(
            bytes.len() as u64,
            format!("{} tensors, auto-encoder needs {}", params.len(), expected.len()),
        ));
    }
    AutoEncoderParams::from_param_set(params)
}

pub fn load_autoencoder(path: &Path) -> Result<AutoEncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_autoencoder(&bytes)
}
