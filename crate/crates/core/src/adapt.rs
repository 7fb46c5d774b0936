//! Online test-time adaptation loop.
//!
//! Per batch: forward, predict, score, weight, loss, backward, Adam step.
//! Predictions and scores are taken from the forward pass before the update.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape};
use crate::error::{Error, Result};
use crate::losses::{self, Ablation, LossBreakdown, LossConfig};
use crate::metrics::{self, EvalSet, OpenSetMetrics, ScoreFunction};
use crate::model::{MultimodalModel, ParamId};
use crate::optimizer::{AdamConfig, AdamState};
use crate::streams::Batch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Source,
    Tent,
    Aeo,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Source => "source",
            Method::Tent => "tent",
            Method::Aeo => "aeo",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Method::Source),
            "tent" => Ok(Method::Tent),
            "aeo" => Ok(Method::Aeo),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    pub loss: LossConfig,
    pub score: ScoreFunction,
    pub ablation: Ablation,
    pub optimizer: AdamConfig,
    /// Also adapt the per-modality heads.
    pub include_heads: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Aeo,
            loss: LossConfig::default(),
            score: ScoreFunction::Msp,
            ablation: Ablation::Full,
            optimizer: AdamConfig::default(),
            include_heads: false,
        }
    }
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Short label used in output rows, e.g. `aeo`, `aeo+uae_only`.
    pub fn label(&self) -> String {
        let mut s = self.method.name().to_string();
        if self.method == Method::Aeo && self.ablation != Ablation::Full {
            let a = serde_json::to_value(self.ablation).expect("enum");
            s.push('+');
            s.push_str(a.as_str().unwrap_or("ablation"));
        }
        if self.score != ScoreFunction::Msp {
            s.push('@');
            s.push_str(self.score.name());
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct AdaptState {
    pub model: MultimodalModel,
    pub optimizer: AdamState<ParamId>,
    pub batch_index: usize,
    pub selection: Vec<ParamId>,
    /// Detector threshold; when set, records carry per-sample decisions.
    pub eta: Option<f64>,
}

impl AdaptState {
    pub fn new(model: MultimodalModel, cfg: &MethodConfig) -> Self {
        let selection = model.adaptable_parameters(cfg.include_heads);
        Self {
            model,
            optimizer: AdamState::new(cfg.optimizer.clone()),
            batch_index: 0,
            selection,
            eta: None,
        }
    }
}

/// Scalar loss terms of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ada_ent: f64,
    pub ada_ent_star: f64,
    pub ada_dis: f64,
    pub div: f64,
    pub total: f64,
}

impl From<&LossBreakdown> for LossTerms {
    fn from(b: &LossBreakdown) -> Self {
        Self {
            ada_ent: b.ada_ent,
            ada_ent_star: b.ada_ent_star,
            ada_dis: b.ada_dis,
            div: b.div,
            total: b.total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch_index: usize,
    pub segment: usize,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
    /// Normalized fused entropy.
    pub entropy: Vec<f64>,
    pub weight: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detected_known: Option<Vec<bool>>,
    /// Method objective; `None` for the source method or a skipped update.
    pub loss: Option<LossTerms>,
    pub skipped_update: bool,
}

impl BatchRecord {
    pub fn eval_set(&self, num_known: usize) -> EvalSet {
        let mut set = EvalSet::default();
        for (i, &label) in self.labels.iter().enumerate() {
            if label < num_known {
                set.known_scores.push(self.scores[i]);
                set.known_correct.push(self.predictions[i] == label);
            } else {
                set.unknown_scores.push(self.scores[i]);
            }
        }
        set
    }
}

fn adaptive_weight_value(h: f64, cfg: &LossConfig) -> f64 {
    (cfg.beta * (h - cfg.alpha)).tanh()
}

/// Processes one batch: records pre-update predictions, then adapts.
pub fn adapt_batch(state: &mut AdaptState, batch: &Batch, cfg: &MethodConfig) -> Result<BatchRecord> {
    let trainable: BTreeSet<ParamId> = if cfg.method == Method::Source {
        BTreeSet::new()
    } else {
        state.selection.iter().copied().collect()
    };
    let mut tape = Tape::new();
    let graph = state
        .model
        .forward_graph(&mut tape, &batch.features, &|id| trainable.contains(&id))?;
    let out = graph.output(&tape);

    let predictions = out.predictions();
    let scores = metrics::score(&out, cfg.score);
    let entropy: Vec<f64> = out.fused_probs.row_iter().map(losses::normalized_entropy_row).collect();
    let weight = entropy.iter().map(|&h| adaptive_weight_value(h, &cfg.loss)).collect();
    let detected_known = state.eta.map(|eta| scores.iter().map(|&s| s >= eta).collect());

    let (loss_node, terms) = match cfg.method {
        Method::Source => (None, None),
        Method::Tent => {
            let l = losses::tent_loss(&mut tape, graph.fused_probs)?;
            let total = tape.value(l).data()[0];
            let terms = LossTerms {
                ada_ent: 0.0,
                ada_ent_star: 0.0,
                ada_dis: 0.0,
                div: 0.0,
                total,
            };
            (Some(l), Some(terms))
        }
        Method::Aeo => {
            let lcfg = cfg.ablation.apply(&cfg.loss);
            let g = losses::aeo_loss(&mut tape, graph.fused_probs, &graph.modality_probs, &lcfg)?;
            let b = g.breakdown(&tape);
            (Some(g.total), Some(LossTerms::from(&b)))
        }
    };

    let mut skipped_update = false;
    let mut loss = terms;
    if let Some(node) = loss_node {
        if !tape.value(node).data()[0].is_finite() {
            skipped_update = true;
            loss = None;
        } else {
            tape.backward(node)?;
            let grads: Vec<(ParamId, Array)> = state
                .selection
                .iter()
                .map(|id| (*id, tape.grad(graph.params[id]).clone()))
                .collect();
            let mut values: Vec<(ParamId, Array)> = grads
                .iter()
                .map(|(id, _)| (*id, state.model.param(*id).clone()))
                .collect();
            let stepped = {
                let mut slots: Vec<(ParamId, &mut Array, &Array)> = values
                    .iter_mut()
                    .zip(&grads)
                    .map(|((id, v), (_, g))| (*id, v, g))
                    .collect();
                state.optimizer.step(&mut slots, state.batch_index)
            };
            match stepped {
                Ok(()) => {
                    for (id, v) in values {
                        *state.model.param_mut(id) = v;
                    }
                }
                Err(Error::NonFiniteGradient { .. }) => skipped_update = true,
                Err(e) => return Err(e),
            }
        }
    }

    let record = BatchRecord {
        batch_index: state.batch_index,
        segment: batch.segment,
        labels: batch.labels.clone(),
        predictions,
        scores,
        entropy,
        weight,
        detected_known,
        loss,
        skipped_update,
    };
    state.batch_index += 1;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub segment: usize,
    pub metrics: OpenSetMetrics,
    /// Mean normalized entropy of unknown minus known samples.
    pub entropy_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub overall: OpenSetMetrics,
    pub overall_gap: f64,
    pub segments: Vec<SegmentMetrics>,
    pub gap_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub records: Vec<BatchRecord>,
    pub report: EpisodeReport,
    pub final_model: MultimodalModel,
}

/// Batches per entropy-gap window.
pub const DEFAULT_GAP_WINDOW: usize = 5;

/// Adapts a copy of `model` over the whole stream and evaluates it.
pub fn run_episode(
    model: &MultimodalModel,
    stream: impl IntoIterator<Item = Batch>,
    cfg: &MethodConfig,
    eta: Option<f64>,
) -> Result<Episode> {
    let mut state = AdaptState::new(model.clone(), cfg);
    state.eta = eta;
    let num_known = model.num_classes;
    let mut records = Vec::new();
    for batch in stream {
        records.push(adapt_batch(&mut state, &batch, cfg)?);
    }
    let report = evaluate_records(&records, num_known, DEFAULT_GAP_WINDOW)?;
    Ok(Episode {
        records,
        report,
        final_model: state.model,
    })
}

pub fn evaluate_records(records: &[BatchRecord], num_known: usize, window: usize) -> Result<EpisodeReport> {
    if records.is_empty() {
        return Err(Error::MetricUndefined("empty stream".into()));
    }
    let mut all = EvalSet::default();
    let mut segments: Vec<(usize, EvalSet, Vec<&BatchRecord>)> = Vec::new();
    for r in records {
        let set = r.eval_set(num_known);
        all.extend(&set);
        match segments.last_mut() {
            Some((seg, s, rs)) if *seg == r.segment => {
                s.extend(&set);
                rs.push(r);
            }
            _ => segments.push((r.segment, set, vec![r])),
        }
    }
    let segments = segments
        .into_iter()
        .map(|(segment, set, rs)| {
            Ok(SegmentMetrics {
                segment,
                metrics: set.metrics()?,
                entropy_gap: entropy_gap(rs.into_iter(), num_known)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeReport {
        overall: all.metrics()?,
        overall_gap: entropy_gap(records.iter(), num_known)?,
        segments,
        gap_trace: entropy_gap_trace(records, num_known, window)?,
    })
}

/// Mean entropy of unknown samples minus mean entropy of known samples.
pub fn entropy_gap<'a>(records: impl Iterator<Item = &'a BatchRecord>, num_known: usize) -> Result<f64> {
    let (mut ks, mut kn, mut us, mut un) = (0.0, 0usize, 0.0, 0usize);
    for r in records {
        for (&l, &h) in r.labels.iter().zip(&r.entropy) {
            if l < num_known {
                ks += h;
                kn += 1;
            } else {
                us += h;
                un += 1;
            }
        }
    }
    if kn == 0 || un == 0 {
        return Err(Error::MetricUndefined(
            "entropy gap needs known and unknown samples".into(),
        ));
    }
    Ok(us / un as f64 - ks / kn as f64)
}

/// Entropy gap over consecutive windows of `window` batches.
pub fn entropy_gap_trace(records: &[BatchRecord], num_known: usize, window: usize) -> Result<Vec<f64>> {
    records
        .chunks(window.max(1))
        .map(|w| entropy_gap(w.iter(), num_known))
        .collect()
}

/// Pearson correlation between entropy gap and `1 - FPR95` across scenarios.
/// `None` when undefined (fewer than two points or a constant column).
pub fn gap_fpr_correlation(points: &[(f64, f64)]) -> Option<f64> {
    let gaps: Vec<f64> = points.iter().map(|p| p.0).collect();
    let tnr: Vec<f64> = points.iter().map(|p| 1.0 - p.1).collect();
    metrics::pearson(&gaps, &tnr)
}
