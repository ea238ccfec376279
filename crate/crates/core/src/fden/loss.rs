//! Loss terms: reconstruction with the optional sample-space regularizer,
//! alignment cross-entropy, and the Donsker-Varadhan total-correlation
//! estimate over shuffled marginal batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::nn::{Mlp, Mode};
use crate::tensor::Tensor;

use super::{FactorSet, MarginalMode};

/// Row permutations for building product-of-marginals batches. Factor 0 is
/// taken from the joint and never shuffled; `perms[k-1]` shuffles factor k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcPlan {
    pub mode: MarginalMode,
    pub perms: Vec<Vec<usize>>,
}

/// Draw independent uniform permutations for factors 1..=N.
pub fn tc_plan(
    total_factors: usize,
    batch: usize,
    mode: MarginalMode,
    rng: &mut ChaCha8Rng,
) -> Result<TcPlan> {
    if batch < 2 {
        return Err(CoreError::invalid(
            "tc_plan",
            format!("batch {batch} too small to shuffle"),
        ));
    }
    if total_factors < 2 {
        return Err(CoreError::invalid("tc_plan", "need at least two factors"));
    }
    let perms = (1..total_factors)
        .map(|_| rand::seq::index::sample(rng, batch, batch).into_vec())
        .collect();
    Ok(TcPlan { mode, perms })
}

impl TcPlan {
    /// Concatenated `[batch, total·dim]` marginal batches on a tape;
    /// gradient flows back through the permutations.
    pub fn marginal_vars(&self, tape: &mut Tape, factors: &[Var]) -> Result<Vec<Var>> {
        match self.mode {
            MarginalMode::OneVsAll => (1..factors.len())
                .map(|k| {
                    let mut parts = Vec::with_capacity(factors.len());
                    for (i, &f) in factors.iter().enumerate() {
                        parts.push(if i == k {
                            tape.permute_rows(f, &self.perms[k - 1])?
                        } else {
                            f
                        });
                    }
                    tape.concat_cols(&parts)
                })
                .collect(),
            MarginalMode::FullShuffle => {
                let mut parts = Vec::with_capacity(factors.len());
                for (i, &f) in factors.iter().enumerate() {
                    parts.push(if i == 0 {
                        f
                    } else {
                        tape.permute_rows(f, &self.perms[i - 1])?
                    });
                }
                Ok(vec![tape.concat_cols(&parts)?])
            }
        }
    }
}

/// Joint batch (unmodified concatenation) plus marginal batches as plain
/// tensors, for callers outside a training step.
pub fn tc_batches(
    fs: &FactorSet,
    mode: MarginalMode,
    seed: u64,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7C01);
    let plan = tc_plan(fs.count(), fs.batch(), mode, &mut rng)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = fs
        .factors
        .iter()
        .map(|f| tape.leaf(f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let joint = tape.concat_cols(&vars)?;
    let marginals = plan.marginal_vars(&mut tape, &vars)?;
    Ok((
        tape.value(joint).clone(),
        marginals.into_iter().map(|v| tape.value(v).clone()).collect(),
    ))
}

/// `L_M = mean(F(joint)) − log(mean(exp(F(marginal))))` with the exp term
/// averaged over all marginal rows. Scores enter through a max-guarded
/// log-mean-exp.
pub fn loss_lm_vars(tape: &mut Tape, joint_scores: Var, marginal_scores: &[Var]) -> Result<Var> {
    if marginal_scores.is_empty() {
        return Err(CoreError::invalid("loss_lm", "no marginal batches"));
    }
    let joint_mean = tape.mean_all(joint_scores)?;
    let all_marginals = if marginal_scores.len() == 1 {
        marginal_scores[0]
    } else {
        tape.concat_rows(marginal_scores)?
    };
    let lme = tape.log_mean_exp(all_marginals)?;
    tape.sub(joint_mean, lme)
}

/// Standalone total-correlation estimate for prepared batches, evaluated
/// with the statisticians network in eval mode.
pub fn loss_lm(statnet: &Mlp, joint: &Tensor, marginals: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut slot = 0;
    let binding = statnet.bind(&mut tape, &mut slot)?;
    let jv = tape.leaf(joint.clone())?;
    let jr = tape.grad_reverse(jv)?;
    let js = binding.forward(&mut tape, statnet, jr, Mode::Eval, None)?;
    let ms = marginals
        .iter()
        .map(|m| {
            let mv = tape.leaf(m.clone())?;
            let mr = tape.grad_reverse(mv)?;
            binding.forward(&mut tape, statnet, mr, Mode::Eval, None)
        })
        .collect::<Result<Vec<_>>>()?;
    let lm = loss_lm_vars(&mut tape, js, &ms)?;
    Ok(tape.scalar(lm))
}

/// Reconstruction objective on the tape: batch mean of rowwise squared
/// error, plus `λ` times the same over the sample space when present.
pub fn loss_lr_vars(
    tape: &mut Tape,
    z: Var,
    z_tilde: Var,
    x_pair: Option<(Var, Var)>,
    lambda: f64,
) -> Result<Var> {
    let batch = tape.value(z).rows() as f64;
    let d = tape.sub(z, z_tilde)?;
    let sq = tape.mul(d, d)?;
    let sum = tape.sum_all(sq)?;
    let z_term = tape.scale(sum, 1.0 / batch)?;
    match x_pair {
        Some((x, x_tilde)) if lambda > 0.0 => {
            let dx = tape.sub(x, x_tilde)?;
            let sqx = tape.mul(dx, dx)?;
            let sumx = tape.sum_all(sqx)?;
            let x_term = tape.scale(sumx, lambda / batch)?;
            tape.add(z_term, x_term)
        }
        _ => Ok(z_term),
    }
}

/// Plain-tensor reconstruction loss. Either of `x`/`x_tilde` absent means
/// the regularizer is dropped (λ treated as 0).
pub fn loss_lr(
    z: &Tensor,
    z_tilde: &Tensor,
    x: Option<&Tensor>,
    x_tilde: Option<&Tensor>,
    lambda: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone())?;
    let ztv = tape.leaf(z_tilde.clone())?;
    let pair = match (x, x_tilde) {
        (Some(a), Some(b)) => Some((tape.leaf(a.clone())?, tape.leaf(b.clone())?)),
        _ => None,
    };
    let l = loss_lr_vars(&mut tape, zv, ztv, pair, lambda)?;
    Ok(tape.scalar(l))
}

/// Mean over supervised heads of softmax cross-entropy on the tape.
pub fn loss_lc_vars(tape: &mut Tape, head_logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if head_logits.is_empty() || head_logits.len() != labels.len() {
        return Err(CoreError::shape(
            "loss_lc",
            format!("{} label columns", head_logits.len()),
            format!("{}", labels.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&logits, lab) in head_logits.iter().zip(labels) {
        let ce = tape.softmax_cross_entropy(logits, lab)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    tape.scale(acc.expect("nonempty"), 1.0 / head_logits.len() as f64)
}

/// Plain-tensor alignment loss over per-head logit batches.
pub fn loss_lc(head_logits: &[Tensor], labels: &[Vec<usize>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = head_logits
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let l = loss_lc_vars(&mut tape, &vars, labels)?;
    Ok(tape.scalar(l))
}
