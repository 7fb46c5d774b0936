//! Central finite-difference checks for every loss and for the model.
//!
//! With a detached weight the analytic gradient treats `W` as a constant, so
//! the numerical side holds `W` at its unperturbed value too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Axis, NodeId, Tape};
use crate::error::Result;
use crate::losses::{self, LossConfig};
use crate::model::{Activation, ModelSpec, MultimodalModel, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor of the relative error, so that near-zero
    /// gradients are compared on an absolute scale.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub detach: bool,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Uae,
    AmpEntropy,
    AmpDiscrepancy,
    Diversity,
    Total,
    Tent,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Uae,
        LossKind::AmpEntropy,
        LossKind::AmpDiscrepancy,
        LossKind::Diversity,
        LossKind::Total,
        LossKind::Tent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Uae => "ada_ent",
            LossKind::AmpEntropy => "ada_ent_star",
            LossKind::AmpDiscrepancy => "ada_dis",
            LossKind::Diversity => "div",
            LossKind::Total => "aeo_total",
            LossKind::Tent => "tent",
        }
    }

    fn uses_weight(self) -> bool {
        !matches!(self, LossKind::Diversity | LossKind::Tent)
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Records loss `kind` on logits; `fixed_weight` replaces the adaptive weight.
fn record_on_probs(
    tape: &mut Tape,
    kind: LossKind,
    fused: NodeId,
    modality: &[NodeId],
    cfg: &LossConfig,
    fixed_weight: Option<&Array>,
) -> Result<NodeId> {
    let weight = |tape: &mut Tape| -> Result<NodeId> {
        let h = losses::normalized_entropy(tape, fused)?;
        match fixed_weight {
            Some(w) => Ok(tape.constant(w.clone())),
            None => losses::adaptive_weight(tape, h, cfg),
        }
    };
    match kind {
        LossKind::Uae => match fixed_weight {
            None => losses::uae_loss(tape, fused, cfg),
            Some(_) => {
                let h = losses::normalized_entropy(tape, fused)?;
                let w = weight(tape)?;
                losses::weighted_entropy_loss(tape, h, w)
            }
        },
        LossKind::AmpEntropy => {
            let w = weight(tape)?;
            losses::amp_entropy_loss(tape, modality, w)
        }
        LossKind::AmpDiscrepancy => {
            let w = weight(tape)?;
            losses::amp_discrepancy_loss(tape, modality, w)
        }
        LossKind::Diversity => losses::div_loss(tape, fused),
        LossKind::Total => match fixed_weight {
            None => Ok(losses::aeo_loss(tape, fused, modality, cfg)?.total),
            Some(_) => {
                let h = losses::normalized_entropy(tape, fused)?;
                let w = weight(tape)?;
                Ok(losses::aeo_loss_with_weight(tape, fused, modality, h, w, cfg)?.total)
            }
        },
        LossKind::Tent => losses::tent_loss(tape, fused),
    }
}

/// Loss value and, when requested, gradients with respect to every logit
/// matrix (`logits[0]` is fused, the rest are per modality).
fn evaluate(
    kind: LossKind,
    logits: &[Array],
    cfg: &LossConfig,
    fixed_weight: Option<&Array>,
    with_grad: bool,
) -> Result<(f64, Vec<Array>)> {
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = logits.iter().map(|z| tape.leaf(z.clone(), with_grad)).collect();
    let probs = leaves
        .iter()
        .map(|&z| tape.softmax(z, Axis::Cols))
        .collect::<Result<Vec<_>>>()?;
    let loss = record_on_probs(&mut tape, kind, probs[0], &probs[1..], cfg, fixed_weight)?;
    let value = tape.value(loss).data()[0];
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((value, leaves.iter().map(|&l| tape.grad(l).clone()).collect()))
}

fn fused_weight(fused_logits: &Array, cfg: &LossConfig) -> Result<Array> {
    let mut tape = Tape::new();
    let z = tape.constant(fused_logits.clone());
    let p = tape.softmax(z, Axis::Cols)?;
    let h = losses::normalized_entropy(&mut tape, p)?;
    let w = losses::adaptive_weight(&mut tape, h, cfg)?;
    Ok(tape.value(w).clone())
}

fn random_logits(rng: &mut ChaCha8Rng, m: usize, b: usize, c: usize) -> Vec<Array> {
    let normal = Normal::new(0.0, 1.5).expect("valid sigma");
    (0..=m)
        .map(|_| {
            let data = (0..b * c).map(|_| normal.sample(rng)).collect();
            Array::matrix(b, c, data).expect("sized")
        })
        .collect()
}

/// Worst relative error of one loss over `cfg.trials` random logit sets.
pub fn check_loss(kind: LossKind, detach: bool, cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lcfg = LossConfig {
        detach_weight: detach,
        // alpha and beta are drawn so weights of both signs show up
        ..LossConfig::default()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.trials {
        let (m, b, c) = (
            rng.random_range(1..=3),
            rng.random_range(2..=6),
            rng.random_range(2..=6),
        );
        let trial_cfg = LossConfig {
            alpha: rng.random_range(0.2..0.9),
            beta: rng.random_range(1.0..6.0),
            ..lcfg.clone()
        };
        let mut logits = random_logits(&mut rng, m, b, c);
        let fixed = if detach && kind.uses_weight() {
            Some(fused_weight(&logits[0], &trial_cfg)?)
        } else {
            None
        };
        let (_, grads) = evaluate(kind, &logits, &trial_cfg, None, true)?;
        for (k, g) in grads.iter().enumerate() {
            for i in 0..logits[k].numel() {
                let orig = logits[k].data()[i];
                logits[k].data_mut()[i] = orig + cfg.step;
                let (up, _) = evaluate(kind, &logits, &trial_cfg, fixed.as_ref(), false)?;
                logits[k].data_mut()[i] = orig - cfg.step;
                let (down, _) = evaluate(kind, &logits, &trial_cfg, fixed.as_ref(), false)?;
                logits[k].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * cfg.step);
                worst = worst.max(relative_error(g.data()[i], numeric, cfg.floor));
            }
        }
    }
    Ok(CheckOutcome {
        name: kind.name().to_string(),
        detach,
        trials: cfg.trials,
        max_rel_err: worst,
        passed: worst < cfg.rel_tol,
    })
}

fn model_loss(
    model: &MultimodalModel,
    features: &[Array],
    cfg: &LossConfig,
    fixed_weight: Option<&Array>,
    trainable: &[ParamId],
) -> Result<(f64, Vec<(ParamId, Array)>, Array)> {
    let mut tape = Tape::new();
    let with_grad = fixed_weight.is_none();
    let graph = model.forward_graph(&mut tape, features, &|id| with_grad && trainable.contains(&id))?;
    let loss = match fixed_weight {
        None => losses::aeo_loss(&mut tape, graph.fused_probs, &graph.modality_probs, cfg)?,
        Some(w) => {
            let h = losses::normalized_entropy(&mut tape, graph.fused_probs)?;
            let w = tape.constant(w.clone());
            losses::aeo_loss_with_weight(&mut tape, graph.fused_probs, &graph.modality_probs, h, w, cfg)?
        }
    };
    let value = tape.value(loss.total).data()[0];
    let weight = tape.value(loss.weight).clone();
    if !with_grad {
        return Ok((value, Vec::new(), weight));
    }
    tape.backward(loss.total)?;
    let grads = trainable
        .iter()
        .map(|&id| (id, tape.grad(graph.params[&id]).clone()))
        .collect();
    Ok((value, grads, weight))
}

/// Full objective through the model, with respect to the adaptable parameters.
pub fn check_model(detach: bool, cfg: &GradCheckConfig) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let normal = Normal::new(0.0, 1.0).expect("valid sigma");
    let mut worst: f64 = 0.0;
    for trial in 0..cfg.trials {
        let m = rng.random_range(1..=3);
        let input_dims: Vec<usize> = (0..m).map(|_| rng.random_range(2..=4)).collect();
        let spec = ModelSpec {
            input_dims: input_dims.clone(),
            embed_dims: (0..m).map(|_| rng.random_range(2..=3)).collect(),
            num_classes: rng.random_range(2..=4),
            activation: Activation::Tanh,
        };
        let mut model = MultimodalModel::init(&spec, cfg.seed.wrapping_add(trial as u64))?;
        // larger weights than the init keeps predictions away from uniform
        for id in model.parameter_ids() {
            for v in model.param_mut(id).data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        let b = rng.random_range(2..=5);
        let features: Vec<Array> = input_dims
            .iter()
            .map(|&d| Array::matrix(b, d, (0..b * d).map(|_| 2.0 * normal.sample(&mut rng)).collect()).expect("sized"))
            .collect();
        let lcfg = LossConfig {
            alpha: rng.random_range(0.2..0.9),
            beta: rng.random_range(1.0..6.0),
            detach_weight: detach,
            ..LossConfig::default()
        };
        let trainable = model.adaptable_parameters(true);
        let (_, grads, weight) = model_loss(&model, &features, &lcfg, None, &trainable)?;
        let fixed = detach.then_some(weight);
        for (id, g) in grads {
            for i in 0..g.numel() {
                let orig = model.param(id).data()[i];
                model.param_mut(id).data_mut()[i] = orig + cfg.step;
                let up = numeric_value(&model, &features, &lcfg, fixed.as_ref())?;
                model.param_mut(id).data_mut()[i] = orig - cfg.step;
                let down = numeric_value(&model, &features, &lcfg, fixed.as_ref())?;
                model.param_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * cfg.step);
                worst = worst.max(relative_error(g.data()[i], numeric, cfg.floor));
            }
        }
    }
    Ok(CheckOutcome {
        name: "model_aeo_total".into(),
        detach,
        trials: cfg.trials,
        max_rel_err: worst,
        passed: worst < cfg.rel_tol,
    })
}

fn numeric_value(model: &MultimodalModel, features: &[Array], cfg: &LossConfig, fixed: Option<&Array>) -> Result<f64> {
    match fixed {
        Some(w) => Ok(model_loss(model, features, cfg, Some(w), &[])?.0),
        None => {
            let mut tape = Tape::new();
            let graph = model.forward_graph(&mut tape, features, &|_| false)?;
            let loss = losses::aeo_loss(&mut tape, graph.fused_probs, &graph.modality_probs, cfg)?;
            Ok(tape.value(loss.total).data()[0])
        }
    }
}

/// Every loss in both detach modes, then the model-level check.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let modes: &[bool] = if kind.uses_weight() { &[true, false] } else { &[true] };
        for &detach in modes {
            out.push(check_loss(kind, detach, cfg)?);
        }
    }
    for detach in [true, false] {
        out.push(check_model(detach, cfg)?);
    }
    Ok(out)
}
