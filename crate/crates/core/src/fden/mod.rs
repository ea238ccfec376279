//! The plug-in: a decomposer that splits a frozen model's latent vector
//! into factor vectors, an entangler that reassembles them, a statisticians
//! network estimating the factors' total correlation through the
//! Donsker-Varadhan bound (behind a gradient-reversal node), and per-factor
//! alignment heads. Training minimizes
//! `α·L_R + β·L_C − γ·L_M` with the total-correlation gradient flow
//! adaptively clipped against the reconstruction+alignment flow.

mod loss;
mod train;

pub use loss::{loss_lc, loss_lm, loss_lr, tc_batches, tc_plan, TcPlan};
pub use train::{train, train_step, StepMetrics, TrainData, TrainLog, TrainState, CURVES_HEADER};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::container::{self, Entry};
use crate::error::{CoreError, Result};
use crate::host::hex_digest;
use crate::nn::{Activation, LayerSpec, Mlp, MlpBinding, Mode};
use crate::tensor::Tensor;

/// How product-of-marginals batches are built from a factor batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalMode {
    /// N batches; the k-th shuffles only factor k's rows.
    OneVsAll,
    /// One batch with every factor i ≥ 1 independently shuffled.
    FullShuffle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdenConfig {
    pub dim: usize,
    /// Number of supervised factors N; factor 0 is the unsupervised residual.
    pub n_factors: usize,
    /// Logit count per supervised head, length `n_factors`.
    pub head_classes: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub grl: bool,
    pub factorizer: bool,
    pub marginal_mode: MarginalMode,
    pub leaky_slope: f64,
    pub init_sigma: f64,
    pub dropout: f64,
}

impl Default for FdenConfig {
    fn default() -> Self {
        FdenConfig {
            dim: 32,
            n_factors: 4,
            head_classes: vec![3, 3, 2, 2],
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            lambda: 0.5,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch: 16,
            steps: 30_000,
            seed: 7,
            grl: true,
            factorizer: true,
            marginal_mode: MarginalMode::OneVsAll,
            leaky_slope: 0.01,
            init_sigma: 0.001,
            dropout: 0.2,
        }
    }
}

impl FdenConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(CoreError::invalid(
                    "FdenConfig",
                    format!("{name} = {v} must be nonnegative"),
                ));
            }
        }
        if self.batch < 2 {
            return Err(CoreError::invalid(
                "FdenConfig",
                format!("batch = {} but shuffling needs at least 2 rows", self.batch),
            ));
        }
        if self.n_factors == 0 {
            return Err(CoreError::invalid("FdenConfig", "n_factors must be positive"));
        }
        if self.head_classes.len() != self.n_factors {
            return Err(CoreError::invalid(
                "FdenConfig",
                format!(
                    "{} head class counts for {} supervised factors",
                    self.head_classes.len(),
                    self.n_factors
                ),
            ));
        }
        if self.head_classes.iter().any(|&c| c < 2) {
            return Err(CoreError::invalid("FdenConfig", "heads need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::invalid(
                "FdenConfig",
                format!("dropout {} outside [0,1)", self.dropout),
            ));
        }
        if self.lr <= 0.0 || self.init_sigma <= 0.0 {
            return Err(CoreError::invalid("FdenConfig", "lr and init_sigma must be positive"));
        }
        Ok(())
    }

    /// Number of factor vectors including the unsupervised factor 0.
    pub fn total_factors(&self) -> usize {
        self.n_factors + 1
    }
}

/// Ordered factor vectors for one batch; factor 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    pub factors: Vec<Tensor>,
}

impl FactorSet {
    pub fn new(factors: Vec<Tensor>) -> Result<Self> {
        if factors.is_empty() {
            return Err(CoreError::invalid("FactorSet", "no factors"));
        }
        let batch = factors[0].rows();
        let dim = factors[0].cols();
        for (i, f) in factors.iter().enumerate() {
            if f.rows() != batch || f.cols() != dim {
                return Err(CoreError::shape(
                    "FactorSet",
                    format!("[{batch}, {dim}]"),
                    format!("factor {i}: {:?}", f.shape()),
                ));
            }
        }
        Ok(FactorSet { factors })
    }

    pub fn batch(&self) -> usize {
        self.factors[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.factors[0].cols()
    }

    pub fn count(&self) -> usize {
        self.factors.len()
    }
}

/// Parameter sets of the plug-in (Table of layer stacks in module docs):
/// global decomposer, per-factor local decoders, per-factor entangler
/// streams, global entangler encoder, statisticians network, and one
/// alignment head per supervised factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FdenModel {
    pub dim: usize,
    pub n_factors: usize,
    pub head_classes: Vec<usize>,
    pub decomposer_global: Mlp,
    pub local_decoders: Vec<Mlp>,
    pub entangler_streams: Vec<Mlp>,
    pub entangler_global: Mlp,
    pub statnet: Mlp,
    pub heads: Vec<Mlp>,
}

fn stack(widths: &[usize], first_bn: bool, dropout: f64) -> Vec<LayerSpec> {
    widths
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let last = i + 1 == widths.len();
            LayerSpec::new(
                w,
                first_bn && i == 0,
                dropout,
                if last { Activation::Linear } else { Activation::LeakyRelu },
            )
        })
        .collect()
}

impl FdenModel {
    pub fn new(cfg: &FdenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x0F01);
        let dim = cfg.dim;
        let total = cfg.total_factors();
        let new_mlp = |in_dim: usize, widths: &[usize], rng: &mut ChaCha8Rng| {
            Mlp::new(
                in_dim,
                &stack(widths, true, cfg.dropout),
                cfg.leaky_slope,
                cfg.init_sigma,
                rng,
            )
        };
        let decomposer_global = new_mlp(dim, &[512, 512, 512, 2 * dim], &mut rng)?;
        let local_decoders = (0..total)
            .map(|_| new_mlp(2 * dim, &[512, 512, dim], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let entangler_streams = (0..total)
            .map(|_| new_mlp(dim, &[256, 256, dim], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let entangler_global = new_mlp(total * dim, &[512, 512, 512, dim], &mut rng)?;
        let statnet = new_mlp(total * dim, &[1024, 256, 64, 1], &mut rng)?;
        let heads = cfg
            .head_classes
            .iter()
            .map(|&c| new_mlp(dim, &[512, 256, 64, c], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(FdenModel {
            dim,
            n_factors: cfg.n_factors,
            head_classes: cfg.head_classes.clone(),
            decomposer_global,
            local_decoders,
            entangler_streams,
            entangler_global,
            statnet,
            heads,
        })
    }

    pub fn total_factors(&self) -> usize {
        self.n_factors + 1
    }

    /// All sub-networks in canonical order. Bindings, parameter flattening,
    /// checkpoints, and batch-norm slot numbering all follow this order.
    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.decomposer_global];
        v.extend(self.local_decoders.iter());
        v.extend(self.entangler_streams.iter());
        v.push(&self.entangler_global);
        v.push(&self.statnet);
        v.extend(self.heads.iter());
        v
    }

    pub fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.decomposer_global];
        v.extend(self.local_decoders.iter_mut());
        v.extend(self.entangler_streams.iter_mut());
        v.push(&mut self.entangler_global);
        v.push(&mut self.statnet);
        v.extend(self.heads.iter_mut());
        v
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.mlps().into_iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlps_mut()
            .into_iter()
            .flat_map(|m| m.params_mut())
            .collect()
    }

    /// Indices into the flattened parameter list: parameters shared between
    /// the task losses and the total-correlation flow (decomposer,
    /// entangler, heads) versus the statisticians network's own.
    pub fn param_groups(&self) -> (Vec<usize>, Vec<usize>) {
        let mut shared = Vec::new();
        let mut stat = Vec::new();
        let mut offset = 0;
        let total = self.total_factors();
        for (mi, mlp) in self.mlps().into_iter().enumerate() {
            let count = mlp.params().len();
            let is_stat = mi == 1 + 2 * total + 1; // after dec_global, locals, streams, ent_global
            for i in offset..offset + count {
                if is_stat {
                    stat.push(i);
                } else {
                    shared.push(i);
                }
            }
            offset += count;
        }
        (shared, stat)
    }

    pub fn checksum(&self) -> String {
        hex_digest(&container::to_bytes(&self.to_entries()))
    }

    fn mlp_names(&self) -> Vec<String> {
        let mut names = vec!["ddec".to_string()];
        let total = self.total_factors();
        names.extend((0..total).map(|i| format!("dloc{i}")));
        names.extend((0..total).map(|i| format!("estream{i}")));
        names.push("eenc".to_string());
        names.push("stat".to_string());
        names.extend((0..self.n_factors).map(|i| format!("head{}", i + 1)));
        names
    }

    fn to_entries(&self) -> Vec<Entry> {
        let mut entries = vec![
            Entry::scalar("meta.kind", 2.0),
            Entry::scalar("meta.dim", self.dim as f64),
            Entry::scalar("meta.n_factors", self.n_factors as f64),
            Entry {
                name: "meta.head_classes".into(),
                dims: vec![self.head_classes.len() as u32],
                data: self.head_classes.iter().map(|&c| c as f32).collect(),
            },
        ];
        for (name, mlp) in self.mlp_names().into_iter().zip(self.mlps()) {
            for (li, layer) in mlp.layers.iter().enumerate() {
                entries.push(Entry::from_tensor(format!("{name}.l{li}.w"), &layer.weight));
                entries.push(Entry::from_tensor(format!("{name}.l{li}.b"), &layer.bias));
                if let Some(bn) = &layer.bn {
                    entries.push(Entry::from_tensor(format!("{name}.l{li}.bn.gamma"), &bn.gamma));
                    entries.push(Entry::from_tensor(format!("{name}.l{li}.bn.beta"), &bn.beta));
                    entries.push(Entry::from_tensor(
                        format!("{name}.l{li}.bn.rmean"),
                        &bn.running_mean,
                    ));
                    entries.push(Entry::from_tensor(
                        format!("{name}.l{li}.bn.rvar"),
                        &bn.running_var,
                    ));
                }
            }
        }
        entries
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_file(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let entries = container::read_file(path)?;
        let kind = container::find(&entries, "meta.kind")?.data[0];
        if kind != 2.0 {
            return Err(CoreError::Validation(format!(
                "not a factorizer checkpoint (meta.kind = {kind})"
            )));
        }
        let dim = container::find(&entries, "meta.dim")?.data[0] as usize;
        let n_factors = container::find(&entries, "meta.n_factors")?.data[0] as usize;
        let head_classes: Vec<usize> = container::find(&entries, "meta.head_classes")?
            .data
            .iter()
            .map(|&c| c as usize)
            .collect();
        let cfg = FdenConfig {
            dim,
            n_factors,
            head_classes,
            ..FdenConfig::default()
        };
        let mut model = FdenModel::new(&cfg)?;
        let names = model.mlp_names();
        for (name, mlp) in names.into_iter().zip(model.mlps_mut()) {
            for (li, layer) in mlp.layers.iter_mut().enumerate() {
                let load_into = |dst: &mut Tensor, entry_name: String| -> Result<()> {
                    let t = container::find(&entries, &entry_name)?.to_tensor()?;
                    if t.shape() != dst.shape() {
                        return Err(CoreError::Validation(format!(
                            "{entry_name}: shape {:?} does not match declared architecture {:?}",
                            t.shape(),
                            dst.shape()
                        )));
                    }
                    *dst = t;
                    Ok(())
                };
                load_into(&mut layer.weight, format!("{name}.l{li}.w"))?;
                load_into(&mut layer.bias, format!("{name}.l{li}.b"))?;
                if let Some(bn) = &mut layer.bn {
                    load_into(&mut bn.gamma, format!("{name}.l{li}.bn.gamma"))?;
                    load_into(&mut bn.beta, format!("{name}.l{li}.bn.beta"))?;
                    load_into(&mut bn.running_mean, format!("{name}.l{li}.bn.rmean"))?;
                    load_into(&mut bn.running_var, format!("{name}.l{li}.bn.rvar"))?;
                }
            }
        }
        Ok(model)
    }

    /// Bind every sub-network onto a tape in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> Result<FdenBinding> {
        let mut slot = 0;
        let decomposer_global = self.decomposer_global.bind(tape, &mut slot)?;
        let locals = self
            .local_decoders
            .iter()
            .map(|m| m.bind(tape, &mut slot))
            .collect::<Result<Vec<_>>>()?;
        let streams = self
            .entangler_streams
            .iter()
            .map(|m| m.bind(tape, &mut slot))
            .collect::<Result<Vec<_>>>()?;
        let entangler_global = self.entangler_global.bind(tape, &mut slot)?;
        let statnet = self.statnet.bind(tape, &mut slot)?;
        let heads = self
            .heads
            .iter()
            .map(|m| m.bind(tape, &mut slot))
            .collect::<Result<Vec<_>>>()?;
        Ok(FdenBinding {
            decomposer_global,
            locals,
            streams,
            entangler_global,
            statnet,
            heads,
        })
    }

    /// Fold observed batch statistics into each batch-norm layer's running
    /// estimates, in slot order.
    pub fn apply_bn_updates(&mut self, stats: &[&crate::autodiff::BnBatchStats], momentum: f64) {
        let mut slots: Vec<&mut crate::nn::BnParams> = self
            .mlps_mut()
            .into_iter()
            .flat_map(|m| m.bn_params_mut())
            .collect();
        for s in stats {
            slots[s.slot].update_running(&s.mean, &s.var, momentum);
        }
    }
}

/// Tape bindings for one step, mirroring [`FdenModel`]'s canonical order.
pub struct FdenBinding {
    pub decomposer_global: MlpBinding,
    pub locals: Vec<MlpBinding>,
    pub streams: Vec<MlpBinding>,
    pub entangler_global: MlpBinding,
    pub statnet: MlpBinding,
    pub heads: Vec<MlpBinding>,
}

impl FdenBinding {
    pub fn param_vars(&self) -> Vec<Var> {
        let mut vars = self.decomposer_global.param_vars();
        for b in &self.locals {
            vars.extend(b.param_vars());
        }
        for b in &self.streams {
            vars.extend(b.param_vars());
        }
        vars.extend(self.entangler_global.param_vars());
        vars.extend(self.statnet.param_vars());
        for b in &self.heads {
            vars.extend(b.param_vars());
        }
        vars
    }

    /// `z → z_dec → (f_0 … f_N)` on the tape.
    pub fn decompose(
        &self,
        tape: &mut Tape,
        model: &FdenModel,
        z: Var,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let z_dec = self
            .decomposer_global
            .forward(tape, &model.decomposer_global, z, mode, rng.as_deref_mut())?;
        self.locals
            .iter()
            .zip(&model.local_decoders)
            .map(|(b, m)| b.forward(tape, m, z_dec, mode, rng.as_deref_mut()))
            .collect()
    }

    /// `(f_0 … f_N) → streams → concat → z̃` on the tape.
    pub fn entangle(
        &self,
        tape: &mut Tape,
        model: &FdenModel,
        factors: &[Var],
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if factors.len() != model.total_factors() {
            return Err(CoreError::shape(
                "entangle",
                format!("{} factors", model.total_factors()),
                format!("{}", factors.len()),
            ));
        }
        let streams = self
            .streams
            .iter()
            .zip(&model.entangler_streams)
            .zip(factors)
            .map(|((b, m), &f)| b.forward(tape, m, f, mode, rng.as_deref_mut()))
            .collect::<Result<Vec<_>>>()?;
        let cat = tape.concat_cols(&streams)?;
        self.entangler_global
            .forward(tape, &model.entangler_global, cat, mode, rng)
    }

    /// Statisticians-network score of a concatenated factor batch, with the
    /// gradient-reversal node prepended when `use_grl` is set.
    pub fn statnet_score(
        &self,
        tape: &mut Tape,
        model: &FdenModel,
        input: Var,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        use_grl: bool,
    ) -> Result<Var> {
        let input = if use_grl { tape.grad_reverse(input)? } else { input };
        self.statnet.forward(tape, &model.statnet, input, mode, rng)
    }
}

/// Decompose a latent batch outside a training step.
pub fn decompose(
    model: &FdenModel,
    z: &Tensor,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<FactorSet> {
    if z.cols() != model.dim {
        return Err(CoreError::shape(
            "decompose",
            format!("[batch, {}]", model.dim),
            format!("{:?}", z.shape()),
        ));
    }
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone())?;
    let binding = model.bind(&mut tape)?;
    let vars = binding.decompose(&mut tape, model, zv, mode, rng.as_deref_mut())?;
    FactorSet::new(vars.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Reassemble a factor set into a latent batch outside a training step.
pub fn entangle(
    model: &FdenModel,
    fs: &FactorSet,
    mode: Mode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    if fs.count() != model.total_factors() {
        return Err(CoreError::shape(
            "entangle",
            format!("{} factors", model.total_factors()),
            format!("{}", fs.count()),
        ));
    }
    if fs.dim() != model.dim {
        return Err(CoreError::shape(
            "entangle",
            format!("factor width {}", model.dim),
            format!("{}", fs.dim()),
        ));
    }
    let mut tape = Tape::new();
    let vars = fs
        .factors
        .iter()
        .map(|f| tape.leaf(f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let binding = model.bind(&mut tape)?;
    let out = binding.entangle(&mut tape, model, &vars, mode, rng.as_deref_mut())?;
    Ok(tape.value(out).clone())
}

/// Linear interpolation of selected factors: `α·fA + (1−α)·fB` where the
/// mask is set, factors from `fs_a` elsewhere.
pub fn factor_interpolate(
    fs_a: &FactorSet,
    fs_b: &FactorSet,
    alpha: f64,
    mask: &[bool],
) -> Result<FactorSet> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CoreError::invalid(
            "factor_interpolate",
            format!("alpha {alpha} outside [0,1]"),
        ));
    }
    if fs_a.count() != fs_b.count() || fs_a.batch() != fs_b.batch() || fs_a.dim() != fs_b.dim() {
        return Err(CoreError::shape(
            "factor_interpolate",
            format!("{} factors of {:?}", fs_a.count(), fs_a.factors[0].shape()),
            format!("{} factors of {:?}", fs_b.count(), fs_b.factors[0].shape()),
        ));
    }
    if mask.len() != fs_a.count() {
        return Err(CoreError::shape(
            "factor_interpolate",
            format!("mask of {} factors", fs_a.count()),
            format!("{}", mask.len()),
        ));
    }
    let factors = fs_a
        .factors
        .iter()
        .zip(&fs_b.factors)
        .zip(mask)
        .map(|((fa, fb), &selected)| {
            if selected {
                let data = fa
                    .data()
                    .iter()
                    .zip(fb.data())
                    .map(|(&a, &b)| alpha * a + (1.0 - alpha) * b)
                    .collect();
                Tensor::from_vec(fa.shape().to_vec(), data).expect("same shape")
            } else {
                fa.clone()
            }
        })
        .collect();
    FactorSet::new(factors)
}

/// Replace one sample's factor `i` by the mean of factor `i` over all
/// dataset samples whose attribute-`i` label equals `target_value`.
pub fn factor_transfer_mean(
    model: &FdenModel,
    latents: &crate::host::LatentDataset,
    sample_idx: usize,
    factor_idx: usize,
    target_value: usize,
) -> Result<FactorSet> {
    if factor_idx == 0 || factor_idx > model.n_factors {
        return Err(CoreError::invalid(
            "factor_transfer_mean",
            format!("factor {factor_idx} has no aligned attribute"),
        ));
    }
    if sample_idx >= latents.len() {
        return Err(CoreError::invalid(
            "factor_transfer_mean",
            format!("sample {sample_idx} out of range ({} rows)", latents.len()),
        ));
    }
    let (attr_name, labels) = latents
        .labels
        .get(factor_idx - 1)
        .map(|(n, l)| (n.clone(), l))
        .ok_or_else(|| {
            CoreError::invalid(
                "factor_transfer_mean",
                format!("dataset has no label column for factor {factor_idx}"),
            )
        })?;
    let group: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &l)| (l == target_value).then_some(i))
        .collect();
    if group.is_empty() {
        return Err(CoreError::invalid(
            "factor_transfer_mean",
            format!("no samples with {attr_name} = {target_value}"),
        ));
    }
    let all = decompose(model, &latents.z, Mode::Eval, None)?;
    let dim = all.dim();
    let mut mean = vec![0.0; dim];
    for &i in &group {
        for (m, &v) in mean.iter_mut().zip(all.factors[factor_idx].row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= group.len() as f64;
    }
    let mut factors = Vec::with_capacity(all.count());
    for (fi, f) in all.factors.iter().enumerate() {
        let row = if fi == factor_idx {
            mean.clone()
        } else {
            f.row(sample_idx).to_vec()
        };
        factors.push(Tensor::from_vec(vec![1, dim], row)?);
    }
    FactorSet::new(factors)
}
