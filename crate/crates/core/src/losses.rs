//! Adaptive entropy-aware losses.
//!
//! Every loss is recorded on a [`Tape`] so gradients reach the model. Per-sample
//! terms are averaged over the batch. The adaptive weight is always computed
//! from the fused prediction and, unless `detach_weight` is off, carries no
//! gradient.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Axis, NodeId, Tape, EPS_LOG};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discrepancy {
    #[default]
    L1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Entropy threshold separating likely-known from likely-unknown.
    pub alpha: f64,
    /// Sharpness of the adaptive weight.
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub detach_weight: bool,
    pub discrepancy: Discrepancy,
    /// Include the fused adaptive-entropy term. Off only for ablations.
    pub uae: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 4.0,
            gamma1: 0.1,
            gamma2: 0.1,
            detach_weight: true,
            discrepancy: Discrepancy::L1,
            uae: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma1 >= 0.0 && self.gamma1.is_finite()) || !(self.gamma2 >= 0.0 && self.gamma2.is_finite()) {
            return Err(Error::Config("gamma1 and gamma2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which loss terms take part in adaptation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    UaeOnly,
    AmpOnly,
    NoDiv,
}

impl Ablation {
    pub fn apply(self, cfg: &LossConfig) -> LossConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::Full => {}
            Ablation::UaeOnly => out.gamma1 = 0.0,
            Ablation::AmpOnly => out.uae = false,
            Ablation::NoDiv => out.gamma2 = 0.0,
        }
        out
    }
}

/// Values of every term of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ada_ent: f64,
    pub ada_ent_star: f64,
    pub ada_dis: f64,
    pub div: f64,
    pub total: f64,
    pub per_sample_entropy: Vec<f64>,
    pub per_sample_weight: Vec<f64>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ada_ent, self.ada_ent_star, self.ada_dis, self.div, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Node handles of a recorded loss.
#[derive(Clone, Debug)]
pub struct AeoLossGraph {
    pub entropy: NodeId,
    pub weight: NodeId,
    pub ada_ent: NodeId,
    pub ada_ent_star: NodeId,
    pub ada_dis: NodeId,
    pub div: NodeId,
    pub total: NodeId,
}

impl AeoLossGraph {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let scalar = |id| tape.value(id).data()[0];
        LossBreakdown {
            ada_ent: scalar(self.ada_ent),
            ada_ent_star: scalar(self.ada_ent_star),
            ada_dis: scalar(self.ada_dis),
            div: scalar(self.div),
            total: scalar(self.total),
            per_sample_entropy: tape.value(self.entropy).data().to_vec(),
            per_sample_weight: tape.value(self.weight).data().to_vec(),
        }
    }
}

/// `-(sum_c p_c log p_c) / log C` per row, as a `B × 1` node.
pub fn normalized_entropy(tape: &mut Tape, probs: NodeId) -> Result<NodeId> {
    let c = tape.value(probs).cols();
    if c < 2 {
        return Err(Error::Config(format!("normalized entropy needs C >= 2, got {c}")));
    }
    let log_p = tape.log(probs);
    let plogp = tape.mul(probs, log_p)?;
    let s = tape.sum(plogp, Axis::Cols);
    Ok(tape.scale(s, -1.0 / (c as f64).ln()))
}

/// Unnormalized Shannon entropy per row (`B × 1`).
pub fn shannon_entropy(tape: &mut Tape, probs: NodeId) -> Result<NodeId> {
    let log_p = tape.log(probs);
    let plogp = tape.mul(probs, log_p)?;
    let s = tape.sum(plogp, Axis::Cols);
    Ok(tape.neg(s))
}

/// `tanh(beta (H - alpha))`, detached when `cfg.detach_weight` is set.
pub fn adaptive_weight(tape: &mut Tape, entropy: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    let alpha = tape.constant(crate::Array::scalar(cfg.alpha));
    let centered = tape.sub(entropy, alpha)?;
    let scaled = tape.scale(centered, cfg.beta);
    let w = tape.tanh(scaled);
    Ok(if cfg.detach_weight { tape.detach(w) } else { w })
}

/// Batch mean of `-H * W`.
pub fn weighted_entropy_loss(tape: &mut Tape, entropy: NodeId, weight: NodeId) -> Result<NodeId> {
    let hw = tape.mul(entropy, weight)?;
    let m = tape.mean(hw, Axis::All);
    Ok(tape.neg(m))
}

fn ensure_nonempty(tape: &Tape, probs: NodeId) -> Result<()> {
    if tape.value(probs).numel() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

/// Fused adaptive entropy loss.
pub fn uae_loss(tape: &mut Tape, fused_probs: NodeId, cfg: &LossConfig) -> Result<NodeId> {
    ensure_nonempty(tape, fused_probs)?;
    let h = normalized_entropy(tape, fused_probs)?;
    let w = adaptive_weight(tape, h, cfg)?;
    weighted_entropy_loss(tape, h, w)
}

/// `-(1/M) sum_i H(p^i) * W`, batch-averaged.
pub fn amp_entropy_loss(tape: &mut Tape, modality_probs: &[NodeId], weight: NodeId) -> Result<NodeId> {
    let Some((&first, rest)) = modality_probs.split_first() else {
        return Err(Error::Contract("no modality predictions".into()));
    };
    let mut acc = normalized_entropy(tape, first)?;
    for &p in rest {
        let h = normalized_entropy(tape, p)?;
        acc = tape.add(acc, h)?;
    }
    let mean_h = tape.scale(acc, 1.0 / modality_probs.len() as f64);
    weighted_entropy_loss(tape, mean_h, weight)
}

/// Per-row L1 distance between two probability matrices (`B × 1`).
pub fn discrepancy(tape: &mut Tape, p1: NodeId, p2: NodeId) -> Result<NodeId> {
    let d = tape.sub(p1, p2)?;
    let a = tape.abs(d);
    Ok(tape.sum(a, Axis::Cols))
}

/// L1 distance between two probability rows.
pub fn discrepancy_rows(p1: &[f64], p2: &[f64]) -> f64 {
    p1.iter().zip(p2).map(|(a, b)| (a - b).abs()).sum()
}

/// `-(2 / (M (M-1))) sum_{i<j} Dis(p^i, p^j) * W`, batch-averaged.
///
/// With a single modality there are no pairs and the loss is zero.
pub fn amp_discrepancy_loss(tape: &mut Tape, modality_probs: &[NodeId], weight: NodeId) -> Result<NodeId> {
    let m = modality_probs.len();
    if m < 2 {
        let zero = tape.constant(crate::Array::scalar(0.0));
        let w = tape.mean(weight, Axis::All);
        return tape.mul(zero, w);
    }
    let mut acc: Option<NodeId> = None;
    for i in 0..m - 1 {
        for j in i + 1..m {
            let d = discrepancy(tape, modality_probs[i], modality_probs[j])?;
            acc = Some(match acc {
                Some(a) => tape.add(a, d)?,
                None => d,
            });
        }
    }
    let pairs = tape.scale(acc.expect("m >= 2"), 2.0 / (m * (m - 1)) as f64);
    weighted_entropy_loss(tape, pairs, weight)
}

/// `sum_c pbar_c log pbar_c` where `pbar` is the batch-mean prediction.
pub fn div_loss(tape: &mut Tape, fused_probs: NodeId) -> Result<NodeId> {
    ensure_nonempty(tape, fused_probs)?;
    let pbar = tape.mean(fused_probs, Axis::Rows);
    let log_p = tape.log(pbar);
    let plogp = tape.mul(pbar, log_p)?;
    Ok(tape.sum(plogp, Axis::All))
}

/// Full objective `L_AdaEnt + g1 (L_AdaEnt* + L_AdaDis) + g2 L_Div`.
pub fn aeo_loss(
    tape: &mut Tape,
    fused_probs: NodeId,
    modality_probs: &[NodeId],
    cfg: &LossConfig,
) -> Result<AeoLossGraph> {
    ensure_nonempty(tape, fused_probs)?;
    let entropy = normalized_entropy(tape, fused_probs)?;
    let weight = adaptive_weight(tape, entropy, cfg)?;
    aeo_loss_with_weight(tape, fused_probs, modality_probs, entropy, weight, cfg)
}

/// Full objective with a caller-supplied per-sample weight (`B × 1`).
///
/// Passing a constant weight evaluates the objective exactly as the detached
/// variant sees it, which is what a finite-difference check has to compare to.
pub fn aeo_loss_with_weight(
    tape: &mut Tape,
    fused_probs: NodeId,
    modality_probs: &[NodeId],
    entropy: NodeId,
    weight: NodeId,
    cfg: &LossConfig,
) -> Result<AeoLossGraph> {
    let ada_ent = weighted_entropy_loss(tape, entropy, weight)?;
    let ada_ent_star = amp_entropy_loss(tape, modality_probs, weight)?;
    let ada_dis = amp_discrepancy_loss(tape, modality_probs, weight)?;
    let div = div_loss(tape, fused_probs)?;

    let amp = tape.add(ada_ent_star, ada_dis)?;
    let amp = tape.scale(amp, cfg.gamma1);
    let div_term = tape.scale(div, cfg.gamma2);
    let rest = tape.add(amp, div_term)?;
    let total = if cfg.uae { tape.add(ada_ent, rest)? } else { rest };
    Ok(AeoLossGraph {
        entropy,
        weight,
        ada_ent,
        ada_ent_star,
        ada_dis,
        div,
        total,
    })
}

/// Tent objective: batch mean of unnormalized fused entropy.
pub fn tent_loss(tape: &mut Tape, fused_probs: NodeId) -> Result<NodeId> {
    ensure_nonempty(tape, fused_probs)?;
    let h = shannon_entropy(tape, fused_probs)?;
    Ok(tape.mean(h, Axis::All))
}

/// Normalized entropy of one probability row, with the same log guard as the tape.
pub fn normalized_entropy_row(p: &[f64]) -> f64 {
    let c = p.len() as f64;
    -p.iter().map(|&v| v * (v + EPS_LOG).ln()).sum::<f64>() / c.ln()
}
