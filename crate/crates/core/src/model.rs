//! Late-fusion multimodal classifier.
//!
//! Each modality `k` has an encoder producing an embedding `Z^k`. The fusion
//! head classifies the concatenation `[Z^1, ..., Z^M]`, and every modality
//! also has its own head over `Z^k` alone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Axis, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEncoder {
    pub weight: Array,
    /// Row vector `1 × d_emb`.
    pub bias: Array,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityHead {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dims: Vec<usize>,
    pub embed_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.input_dims.len() != self.embed_dims.len() {
            return Err(Error::Config(
                "input_dims and embed_dims must have one entry per modality".into(),
            ));
        }
        if let Some(k) = self.input_dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("modality {k}: d_in must be positive")));
        }
        if let Some(k) = self.embed_dims.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("modality {k}: d_emb must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    /// Number of scalar parameters in a model of this shape.
    pub fn parameter_count(&self) -> usize {
        let c = self.num_classes;
        let enc: usize = self
            .input_dims
            .iter()
            .zip(&self.embed_dims)
            .map(|(&i, &e)| i * e + e)
            .sum();
        let emb: usize = self.embed_dims.iter().sum();
        let heads: usize = self.embed_dims.iter().map(|&e| e * c + c).sum();
        enc + emb * c + c + heads
    }
}

/// Identifies one parameter array of a [`MultimodalModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    EncoderWeight(usize),
    EncoderBias(usize),
    FusionWeight,
    FusionBias,
    HeadWeight(usize),
    HeadBias(usize),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::EncoderWeight(k) => write!(f, "encoder.{k}.weight"),
            ParamId::EncoderBias(k) => write!(f, "encoder.{k}.bias"),
            ParamId::FusionWeight => write!(f, "fusion.weight"),
            ParamId::FusionBias => write!(f, "fusion.bias"),
            ParamId::HeadWeight(k) => write!(f, "head.{k}.weight"),
            ParamId::HeadBias(k) => write!(f, "head.{k}.bias"),
        }
    }
}

impl std::str::FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown parameter name {s:?}"));
        let parts: Vec<&str> = s.split('.').collect();
        match parts.as_slice() {
            ["fusion", "weight"] => Ok(ParamId::FusionWeight),
            ["fusion", "bias"] => Ok(ParamId::FusionBias),
            [group, k, kind] => {
                let k: usize = k.parse().map_err(|_| bad())?;
                match (*group, *kind) {
                    ("encoder", "weight") => Ok(ParamId::EncoderWeight(k)),
                    ("encoder", "bias") => Ok(ParamId::EncoderBias(k)),
                    ("head", "weight") => Ok(ParamId::HeadWeight(k)),
                    ("head", "bias") => Ok(ParamId::HeadBias(k)),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalModel {
    pub encoders: Vec<ModalityEncoder>,
    pub fusion: FusionHead,
    pub heads: Vec<ModalityHead>,
    pub num_classes: usize,
}

/// Plain-array result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub fused_logits: Array,
    pub fused_probs: Array,
    pub modality_logits: Vec<Array>,
    pub modality_probs: Vec<Array>,
    pub embeddings: Vec<Array>,
}

impl ForwardOutput {
    pub fn batch_size(&self) -> usize {
        self.fused_probs.rows()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.fused_probs.row_iter().map(argmax).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Node handles of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ForwardGraph {
    pub params: BTreeMap<ParamId, NodeId>,
    pub embeddings: Vec<NodeId>,
    pub fused_logits: NodeId,
    pub fused_probs: NodeId,
    pub modality_logits: Vec<NodeId>,
    pub modality_probs: Vec<NodeId>,
}

impl ForwardGraph {
    pub fn output(&self, tape: &Tape) -> ForwardOutput {
        let get = |ids: &[NodeId]| ids.iter().map(|&i| tape.value(i).clone()).collect();
        ForwardOutput {
            fused_logits: tape.value(self.fused_logits).clone(),
            fused_probs: tape.value(self.fused_probs).clone(),
            modality_logits: get(&self.modality_logits),
            modality_probs: get(&self.modality_probs),
            embeddings: get(&self.embeddings),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Array::matrix(rows, cols, data).expect("positive dims")
}

impl MultimodalModel {
    /// Weights i.i.d. uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.num_classes;
        let encoders = spec
            .input_dims
            .iter()
            .zip(&spec.embed_dims)
            .map(|(&d_in, &d_emb)| ModalityEncoder {
                weight: uniform(&mut rng, d_in, d_emb),
                bias: Array::zeros(&[1, d_emb]),
                activation: spec.activation,
            })
            .collect();
        let total_emb: usize = spec.embed_dims.iter().sum();
        let fusion = FusionHead {
            weight: uniform(&mut rng, total_emb, c),
            bias: Array::zeros(&[1, c]),
        };
        let heads = spec
            .embed_dims
            .iter()
            .map(|&d_emb| ModalityHead {
                weight: uniform(&mut rng, d_emb, c),
                bias: Array::zeros(&[1, c]),
            })
            .collect();
        Ok(Self {
            encoders,
            fusion,
            heads,
            num_classes: c,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(|e| e.weight.rows()).collect()
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            input_dims: self.input_dims(),
            embed_dims: self.encoders.iter().map(|e| e.weight.cols()).collect(),
            num_classes: self.num_classes,
            activation: self.encoders[0].activation,
        }
    }

    /// All parameter ids in canonical order.
    pub fn parameter_ids(&self) -> Vec<ParamId> {
        let m = self.num_modalities();
        let mut ids = Vec::with_capacity(4 * m + 2);
        for k in 0..m {
            ids.push(ParamId::EncoderWeight(k));
            ids.push(ParamId::EncoderBias(k));
        }
        ids.push(ParamId::FusionWeight);
        ids.push(ParamId::FusionBias);
        for k in 0..m {
            ids.push(ParamId::HeadWeight(k));
            ids.push(ParamId::HeadBias(k));
        }
        ids
    }

    /// Parameters updated at test time: the last (here: only) layer of each
    /// modality encoder plus the fusion classifier. Modality heads join only
    /// when `include_heads` is set.
    pub fn adaptable_parameters(&self, include_heads: bool) -> Vec<ParamId> {
        self.parameter_ids()
            .into_iter()
            .filter(|id| include_heads || !matches!(id, ParamId::HeadWeight(_) | ParamId::HeadBias(_)))
            .collect()
    }

    pub fn param(&self, id: ParamId) -> &Array {
        match id {
            ParamId::EncoderWeight(k) => &self.encoders[k].weight,
            ParamId::EncoderBias(k) => &self.encoders[k].bias,
            ParamId::FusionWeight => &self.fusion.weight,
            ParamId::FusionBias => &self.fusion.bias,
            ParamId::HeadWeight(k) => &self.heads[k].weight,
            ParamId::HeadBias(k) => &self.heads[k].bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Array {
        match id {
            ParamId::EncoderWeight(k) => &mut self.encoders[k].weight,
            ParamId::EncoderBias(k) => &mut self.encoders[k].bias,
            ParamId::FusionWeight => &mut self.fusion.weight,
            ParamId::FusionBias => &mut self.fusion.bias,
            ParamId::HeadWeight(k) => &mut self.heads[k].weight,
            ParamId::HeadBias(k) => &mut self.heads[k].bias,
        }
    }

    pub fn check_inputs(&self, features: &[Array]) -> Result<usize> {
        if features.len() != self.num_modalities() {
            return Err(Error::Dimension(format!(
                "expected {} modalities, got {}",
                self.num_modalities(),
                features.len()
            )));
        }
        let rows = features[0].rows();
        for (k, (x, enc)) in features.iter().zip(&self.encoders).enumerate() {
            if x.shape().len() != 2 || x.cols() != enc.weight.rows() {
                return Err(Error::Dimension(format!(
                    "modality {k}: expected {} features, got shape {:?}",
                    enc.weight.rows(),
                    x.shape()
                )));
            }
            if x.rows() != rows {
                return Err(Error::Dimension(format!(
                    "modality {k}: {} rows, modality 0 has {rows}",
                    x.rows()
                )));
            }
        }
        Ok(rows)
    }

    /// Records the forward pass on `tape`. Parameters for which `trainable`
    /// returns true become gradient-carrying leaves.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        features: &[Array],
        trainable: &dyn Fn(ParamId) -> bool,
    ) -> Result<ForwardGraph> {
        let rows = self.check_inputs(features)?;
        let params: BTreeMap<ParamId, NodeId> = self
            .parameter_ids()
            .into_iter()
            .map(|id| (id, tape.leaf(self.param(id).clone(), trainable(id))))
            .collect();
        let ones = tape.constant(Array::ones(&[rows, 1]));
        let affine = |tape: &mut Tape, x: NodeId, w: ParamId, b: ParamId| -> Result<NodeId> {
            let xw = tape.matmul(x, params[&w])?;
            let bias = tape.matmul(ones, params[&b])?;
            tape.add(xw, bias)
        };

        let mut embeddings = Vec::with_capacity(features.len());
        for (k, x) in features.iter().enumerate() {
            let x = tape.constant(x.clone());
            let pre = affine(tape, x, ParamId::EncoderWeight(k), ParamId::EncoderBias(k))?;
            let z = match self.encoders[k].activation {
                Activation::Tanh => tape.tanh(pre),
                Activation::Identity => pre,
            };
            embeddings.push(z);
        }
        let joint = tape.concat_cols(&embeddings)?;
        let fused_logits = affine(tape, joint, ParamId::FusionWeight, ParamId::FusionBias)?;
        let fused_probs = tape.softmax(fused_logits, Axis::Cols)?;

        let mut modality_logits = Vec::with_capacity(features.len());
        let mut modality_probs = Vec::with_capacity(features.len());
        for (k, &z) in embeddings.iter().enumerate() {
            let logits = affine(tape, z, ParamId::HeadWeight(k), ParamId::HeadBias(k))?;
            modality_probs.push(tape.softmax(logits, Axis::Cols)?);
            modality_logits.push(logits);
        }
        Ok(ForwardGraph {
            params,
            embeddings,
            fused_logits,
            fused_probs,
            modality_logits,
            modality_probs,
        })
    }

    pub fn forward(&self, features: &[Array]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let graph = self.forward_graph(&mut tape, features, &|_| false)?;
        Ok(graph.output(&tape))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            num_classes: self.num_classes,
            activations: self.encoders.iter().map(|e| e.activation).collect(),
            params: self
                .parameter_ids()
                .into_iter()
                .map(|id| NamedArray {
                    name: id.to_string(),
                    shape: self.param(id).shape().to_vec(),
                    data: self.param(id).data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = ckpt.activations.len();
        let mut arrays = BTreeMap::new();
        for p in &ckpt.params {
            let id: ParamId = p.name.parse()?;
            arrays.insert(id, Array::new(p.shape.clone(), p.data.clone())?);
        }
        let mut take = |id: ParamId| {
            arrays
                .remove(&id)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing {id}")))
        };
        let mut encoders = Vec::with_capacity(m);
        let mut heads = Vec::with_capacity(m);
        for (k, &activation) in ckpt.activations.iter().enumerate() {
            encoders.push(ModalityEncoder {
                weight: take(ParamId::EncoderWeight(k))?,
                bias: take(ParamId::EncoderBias(k))?,
                activation,
            });
            heads.push(ModalityHead {
                weight: take(ParamId::HeadWeight(k))?,
                bias: take(ParamId::HeadBias(k))?,
            });
        }
        let fusion = FusionHead {
            weight: take(ParamId::FusionWeight)?,
            bias: take(ParamId::FusionBias)?,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Config(format!("checkpoint has unexpected {extra}")));
        }
        let model = Self {
            encoders,
            fusion,
            heads,
            num_classes: ckpt.num_classes,
        };
        model.validate_shapes()?;
        Ok(model)
    }

    fn validate_shapes(&self) -> Result<()> {
        let c = self.num_classes;
        let total: usize = self.encoders.iter().map(|e| e.weight.cols()).sum();
        let bad = |what: &str| Err(Error::Dimension(format!("inconsistent {what} shape")));
        for (k, (e, h)) in self.encoders.iter().zip(&self.heads).enumerate() {
            let d = e.weight.cols();
            if e.bias.shape() != [1, d] {
                return bad(&format!("encoder.{k}.bias"));
            }
            if h.weight.shape() != [d, c] || h.bias.shape() != [1, c] {
                return bad(&format!("head.{k}"));
            }
        }
        if self.fusion.weight.shape() != [total, c] || self.fusion.bias.shape() != [1, c] {
            return bad("fusion");
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk model: named parameter arrays with shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub num_classes: usize,
    pub activations: Vec<Activation>,
    pub params: Vec<NamedArray>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec2() -> ModelSpec {
        ModelSpec {
            input_dims: vec![5, 3],
            embed_dims: vec![4, 2],
            num_classes: 3,
            activation: Activation::Tanh,
        }
    }

    fn batch(rows: usize, dims: &[usize], seed: u64) -> Vec<Array> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        dims.iter()
            .map(|&d| {
                let data = (0..rows * d).map(|_| rng.random_range(-2.0..2.0)).collect();
                Array::matrix(rows, d, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic() {
        let a = MultimodalModel::init(&spec2(), 9).unwrap();
        let b = MultimodalModel::init(&spec2(), 9).unwrap();
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
        let c = MultimodalModel::init(&spec2(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_zero_input_dim() {
        let mut s = spec2();
        s.input_dims[1] = 0;
        assert!(matches!(MultimodalModel::init(&s, 0), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_formula() {
        let s = spec2();
        let m = MultimodalModel::init(&s, 1).unwrap();
        let counted: usize = m.parameter_ids().iter().map(|&id| m.param(id).numel()).sum();
        // (5*4+4) + (3*2+2) + 6*3+3 + (4*3+3) + (2*3+3)
        assert_eq!(counted, 24 + 8 + 21 + 15 + 9);
        assert_eq!(s.parameter_count(), counted);
    }

    #[test]
    fn init_within_bounds() {
        let m = MultimodalModel::init(&spec2(), 2).unwrap();
        let bound = 1.0 / 5f64.sqrt();
        assert!(m.encoders[0].weight.data().iter().all(|v| v.abs() <= bound));
        assert!(m.encoders[0].bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let mut m = MultimodalModel::init(&spec2(), 3).unwrap();
        for id in m.parameter_ids() {
            m.param_mut(id).fill(0.0);
        }
        let out = m.forward(&batch(4, &[5, 3], 1)).unwrap();
        for p in std::iter::once(&out.fused_probs).chain(&out.modality_probs) {
            assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn single_modality_is_two_layer_classifier() {
        let s = ModelSpec {
            input_dims: vec![4],
            embed_dims: vec![3],
            num_classes: 2,
            activation: Activation::Tanh,
        };
        let m = MultimodalModel::init(&s, 4).unwrap();
        let x = batch(6, &[4], 2);
        let out = m.forward(&x).unwrap();
        let hidden = x[0].matmul(&m.encoders[0].weight).unwrap().map(f64::tanh);
        let logits = hidden.matmul(&m.fusion.weight).unwrap();
        for (a, b) in logits.data().iter().zip(out.fused_logits.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_normalized_and_forward_pure() {
        let m = MultimodalModel::init(&spec2(), 5).unwrap();
        let x = batch(16, &[5, 3], 3);
        let out = m.forward(&x).unwrap();
        for p in std::iter::once(&out.fused_probs).chain(&out.modality_probs) {
            for row in p.row_iter() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(out, m.forward(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_names_modality() {
        let m = MultimodalModel::init(&spec2(), 5).unwrap();
        let x = batch(2, &[5, 4], 3);
        let err = m.forward(&x).unwrap_err().to_string();
        assert!(err.contains("modality 1"), "{err}");
        assert!(m.forward(&x[..1]).is_err());
    }

    #[test]
    fn adaptable_selection() {
        let m = MultimodalModel::init(&spec2(), 6).unwrap();
        let sel = m.adaptable_parameters(false);
        assert_eq!(sel.len(), 6);
        assert!(!sel
            .iter()
            .any(|id| matches!(id, ParamId::HeadWeight(_) | ParamId::HeadBias(_))));
        let with_heads = m.adaptable_parameters(true);
        assert_eq!(with_heads.len(), 6 + 2 * 2);
        let unique: std::collections::BTreeSet<_> = with_heads.iter().collect();
        assert_eq!(unique.len(), with_heads.len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = MultimodalModel::init(&spec2(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = MultimodalModel::load(&path).unwrap();
        for id in m.parameter_ids() {
            let a: Vec<u64> = m.param(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.param(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{id}");
        }
        assert_eq!(m, back);
    }

    #[test]
    fn param_names_parse_back() {
        let m = MultimodalModel::init(&spec2(), 8).unwrap();
        for id in m.parameter_ids() {
            assert_eq!(id.to_string().parse::<ParamId>().unwrap(), id);
        }
        assert!("encoder.x.weight".parse::<ParamId>().is_err());
    }
}
