//! The fixed pretrained network the plug-in attaches to: a small
//! deterministic autoencoder trained once on the shapes grid and then
//! frozen, plus an import path for externally produced latents.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::container::{self, Entry};
use crate::error::{CoreError, Result};
use crate::nn::{Activation, LayerSpec, Mlp, Mode};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::synth::ShapeDataset;
use crate::tensor::Tensor;

const IN_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct HostConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            dim: 32,
            lr: 1e-3,
            batch: 64,
            steps: 5000,
            seed: 7,
        }
    }
}

/// Frozen encoder/decoder pair providing `z = Enc(x)` and `x̃ = Dec(z)`.
/// The decoder ends in a sigmoid so outputs live in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct HostModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub dim: usize,
    pub frozen: bool,
}

fn encoder_specs(dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(128, false, 0.0, Activation::LeakyRelu),
        LayerSpec::new(64, false, 0.0, Activation::LeakyRelu),
        LayerSpec::new(dim, false, 0.0, Activation::Linear),
    ]
}

fn decoder_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::new(64, false, 0.0, Activation::LeakyRelu),
        LayerSpec::new(128, false, 0.0, Activation::LeakyRelu),
        LayerSpec::new(IN_DIM, false, 0.0, Activation::Linear),
    ]
}

impl HostModel {
    pub fn init(dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x0501);
        let encoder = Mlp::new_fan_in_scaled(IN_DIM, &encoder_specs(dim), 0.01, &mut rng)?;
        let decoder = Mlp::new_fan_in_scaled(dim, &decoder_specs(), 0.01, &mut rng)?;
        Ok(HostModel {
            encoder,
            decoder,
            dim,
            frozen: false,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn to_entries(&self) -> Vec<Entry> {
        let mut entries = vec![
            Entry::scalar("meta.kind", 1.0),
            Entry::scalar("meta.dim", self.dim as f64),
        ];
        for (prefix, mlp) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (li, layer) in mlp.layers.iter().enumerate() {
                entries.push(Entry::from_tensor(format!("{prefix}.l{li}.w"), &layer.weight));
                entries.push(Entry::from_tensor(format!("{prefix}.l{li}.b"), &layer.bias));
            }
        }
        entries
    }

    /// Digest of all parameters at 32-bit storage precision; stable for as
    /// long as the parameters are untouched.
    pub fn checksum(&self) -> String {
        let bytes = container::to_bytes(&self.to_entries());
        hex_digest(&bytes)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Train the autoencoder with per-pixel squared error and freeze it.
pub fn train_host(dataset: &ShapeDataset, config: &HostConfig, seed: u64) -> Result<HostModel> {
    let mut model = HostModel::init(config.dim, seed)?;
    let mut params: Vec<&Tensor> = Vec::new();
    let enc = model.encoder.params();
    let dec = model.decoder.params();
    params.extend(enc);
    params.extend(dec);
    let mut opt = AdamState::new(&params, AdamHyper::new(config.lr, 0.9, 0.999));
    drop(params);

    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(0x0502);
    let n = dataset.len();
    for step in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch)
            .map(|_| batch_rng.random_range(0..n))
            .collect();
        let x = dataset.images.gather_rows(&idx);

        let mut tape = Tape::new();
        let xv = tape.leaf(x)?;
        let mut slot = 0;
        let enc_b = model.encoder.bind(&mut tape, &mut slot)?;
        let dec_b = model.decoder.bind(&mut tape, &mut slot)?;
        let z = enc_b.forward(&mut tape, &model.encoder, xv, Mode::Eval, None)?;
        let logits = dec_b.forward(&mut tape, &model.decoder, z, Mode::Eval, None)?;
        let xhat = tape.sigmoid(logits)?;
        let d = tape.sub(xhat, xv)?;
        let sq = tape.mul(d, d)?;
        let loss = tape.mean_all(sq)?;

        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            return Err(CoreError::Diverged {
                step,
                message: format!("host loss {loss_value}"),
            });
        }
        let grads = tape.backward(loss)?;
        let mut vars = enc_b.param_vars();
        vars.extend(dec_b.param_vars());
        let grad_tensors: Vec<Tensor> = vars
            .iter()
            .map(|&v| grads.get_or_zeros(v, tape.value(v).shape()))
            .collect();
        let mut params = model.params_mut();
        adam_step(&mut params, &grad_tensors, &mut opt)?;
    }
    model.frozen = true;
    Ok(model)
}

/// Deterministic eval-mode encoding, `[batch, 256] -> [batch, dim]`.
pub fn encode(host: &HostModel, x: &Tensor) -> Result<Tensor> {
    host.encoder.forward_eval(x)
}

/// Deterministic eval-mode decoding with sigmoid range, `[batch, dim] -> [batch, 256]`.
pub fn decode(host: &HostModel, z: &Tensor) -> Result<Tensor> {
    let logits = host.decoder.forward_eval(z)?;
    let mut tape = Tape::new();
    let l = tape.leaf(logits)?;
    let s = tape.sigmoid(l)?;
    Ok(tape.value(s).clone())
}

/// Mean per-pixel squared reconstruction error over the given images.
pub fn reconstruction_error(host: &HostModel, images: &Tensor) -> Result<f64> {
    let z = encode(host, images)?;
    let xhat = decode(host, &z)?;
    let n = images.numel() as f64;
    let sse: f64 = images
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sse / n)
}

pub fn save_host(model: &HostModel, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path, &model.to_entries())
}

pub fn load_host(path: impl AsRef<Path>) -> Result<HostModel> {
    let entries = container::read_file(path)?;
    let kind = container::find(&entries, "meta.kind")?.data[0];
    if kind != 1.0 {
        return Err(CoreError::Validation(format!(
            "not a host checkpoint (meta.kind = {kind})"
        )));
    }
    let dim = container::find(&entries, "meta.dim")?.data[0] as usize;
    let mut model = HostModel::init(dim, 0)?;
    for (prefix, mlp) in [
        ("enc", &mut model.encoder),
        ("dec", &mut model.decoder),
    ] {
        for (li, layer) in mlp.layers.iter_mut().enumerate() {
            let w = container::find(&entries, &format!("{prefix}.l{li}.w"))?.to_tensor()?;
            let b = container::find(&entries, &format!("{prefix}.l{li}.b"))?.to_tensor()?;
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(CoreError::Validation(format!(
                    "checkpoint layer {prefix}.l{li} has shape {:?}/{:?}, expected {:?}/{:?} for declared dim {dim}",
                    w.shape(),
                    b.shape(),
                    layer.weight.shape(),
                    layer.bias.shape(),
                )));
            }
            layer.weight = w;
            layer.bias = b;
        }
    }
    model.frozen = true;
    Ok(model)
}

/// Latent rows with optional source samples and per-sample attribute labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDataset {
    pub z: Tensor,
    pub x: Option<Tensor>,
    /// `(attribute name, labels)` in head order.
    pub labels: Vec<(String, Vec<usize>)>,
}

impl LatentDataset {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if let Some(x) = &self.x {
            if x.rows() != n {
                return Err(CoreError::Validation(format!(
                    "x has {} rows, z has {n}",
                    x.rows()
                )));
            }
        }
        for (name, l) in &self.labels {
            if l.len() != n {
                return Err(CoreError::Validation(format!(
                    "labels_{name} has {} rows, z has {n}",
                    l.len()
                )));
            }
        }
        Ok(())
    }

    /// Encode a shapes dataset with a frozen host, carrying its labels.
    pub fn from_shapes(host: &HostModel, ds: &ShapeDataset) -> Result<Self> {
        let z = encode(host, &ds.images)?;
        let mut labels = Vec::new();
        for (i, name) in crate::synth::ATTRIBUTE_NAMES.iter().enumerate() {
            let (col, _) = ds.attribute(i)?;
            labels.push((name.to_string(), col.to_vec()));
        }
        Ok(LatentDataset {
            z,
            x: Some(ds.images.clone()),
            labels,
        })
    }
}

/// Read a representation container: entry `z` required, `x` optional,
/// label columns named `labels_<attr>`.
pub fn import_representations(path: impl AsRef<Path>) -> Result<LatentDataset> {
    let entries = container::read_file(path)?;
    let z = container::find(&entries, "z")?.to_tensor()?;
    if z.shape().len() != 2 {
        return Err(CoreError::Validation(format!(
            "entry `z` must be rank 2, got {:?}",
            z.shape()
        )));
    }
    let x = entries
        .iter()
        .find(|e| e.name == "x")
        .map(|e| e.to_tensor())
        .transpose()?;
    let mut labels = Vec::new();
    for e in &entries {
        if let Some(name) = e.name.strip_prefix("labels_") {
            let t = e.to_tensor()?;
            let col: Vec<usize> = t.data().iter().map(|&v| v as usize).collect();
            labels.push((name.to_string(), col));
        }
    }
    let ds = LatentDataset { z, x, labels };
    ds.validate()?;
    Ok(ds)
}

pub fn export_representations(ds: &LatentDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let mut entries = vec![Entry::from_tensor("z", &ds.z)];
    if let Some(x) = &ds.x {
        entries.push(Entry::from_tensor("x", x));
    }
    for (name, col) in &ds.labels {
        let t = Tensor::from_vec(vec![col.len()], col.iter().map(|&v| v as f64).collect())?;
        entries.push(Entry::from_tensor(format!("labels_{name}"), &t));
    }
    container::write_file(path, &entries)
}
