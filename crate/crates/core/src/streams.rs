//! Synthetic multimodal open-set data.
//!
//! Every class has one Gaussian prototype per modality. Known prototypes sit
//! on a sphere of radius `known_radius`; each unknown prototype blends the
//! midpoint of two known ones with a direction orthogonal to all of them
//! (`unknown_offaxis`) and sits at radius `unknown_radius`.
//! A target domain applies, per modality, `x -> A (mu + eps) + b` with
//! `A = I + s G / sqrt(d)`, an offset of length `s * offset_scale * known_radius`
//! and noise inflated by a per-modality factor.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Axis, Tape};
use crate::error::{Error, Result};
use crate::model::{MultimodalModel, ParamId};
use crate::optimizer::{AdamConfig, AdamState};

/// Shift applied to every modality of one target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub name: String,
    /// Per-modality strength of the random affine distortion.
    pub severity: Vec<f64>,
    /// Per-modality multiplier on `noise_sigma`.
    pub noise_inflation: Vec<f64>,
}

impl DomainShift {
    pub fn identity(name: &str, modalities: usize) -> Self {
        Self {
            name: name.to_string(),
            severity: vec![0.0; modalities],
            noise_inflation: vec![1.0; modalities],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub input_dims: Vec<usize>,
    pub num_known: usize,
    pub num_unknown: usize,
    pub known_radius: f64,
    pub unknown_radius: f64,
    pub noise_sigma: f64,
    /// Blend between the known-pair midpoint direction (0) and a random
    /// direction orthogonal to every known prototype (1) for unknown
    /// prototypes.
    pub unknown_offaxis: f64,
    /// Offset length per unit severity, relative to `known_radius`.
    pub offset_scale: f64,
    pub domains: Vec<DomainShift>,
    pub n_source: usize,
    /// Samples per target pass over one domain.
    pub n_target: usize,
    pub unknown_ratio: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            input_dims: vec![8, 8],
            num_known: 6,
            num_unknown: 4,
            known_radius: 10.0,
            unknown_radius: 0.1,
            noise_sigma: 0.3,
            unknown_offaxis: 1.0,
            offset_scale: 0.2,
            domains: vec![
                DomainShift {
                    name: "shift_a".into(),
                    severity: vec![2.4, 1.2],
                    noise_inflation: vec![1.2, 1.1],
                },
                DomainShift {
                    name: "shift_b".into(),
                    severity: vec![1.2, 2.8],
                    noise_inflation: vec![1.1, 1.3],
                },
                DomainShift {
                    name: "shift_c".into(),
                    severity: vec![2.0, 2.0],
                    noise_inflation: vec![1.3, 1.2],
                },
            ],
            n_source: 1200,
            n_target: 1920,
            unknown_ratio: 0.5,
            seed: 0,
        }
    }
}

/// Minimum pairwise distance between known prototypes, relative to radius.
pub const MIN_SEPARATION: f64 = 1.0;

impl ScenarioConfig {
    /// Default scenario widened to `m` modalities; extra modalities cycle
    /// through the two-modality shift pattern.
    pub fn with_modalities(m: usize) -> Self {
        let base = Self::default();
        let pick = |v: &[f64]| (0..m).map(|k| v[k % v.len()]).collect::<Vec<_>>();
        Self {
            input_dims: vec![base.input_dims[0]; m],
            domains: base
                .domains
                .iter()
                .map(|d| DomainShift {
                    name: d.name.clone(),
                    severity: pick(&d.severity),
                    noise_inflation: pick(&d.noise_inflation),
                })
                .collect(),
            ..base
        }
    }

    pub fn modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return cfg("input_dims must be non-empty and positive".into());
        }
        if self.num_known < 2 {
            return cfg(format!("num_known must be >= 2, got {}", self.num_known));
        }
        if self.num_unknown < 1 {
            return cfg("num_unknown must be >= 1".into());
        }
        if !(self.unknown_ratio > 0.0 && self.unknown_ratio < 1.0) {
            return cfg(format!("unknown_ratio must lie in (0,1), got {}", self.unknown_ratio));
        }
        if !(0.0..=1.0).contains(&self.unknown_offaxis) {
            return cfg(format!(
                "unknown_offaxis must lie in [0,1], got {}",
                self.unknown_offaxis
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.known_radius > 0.0) || !(self.unknown_radius > 0.0) {
            return cfg("radii must be positive and noise_sigma non-negative".into());
        }
        if self.n_source == 0 || self.n_target == 0 {
            return cfg("n_source and n_target must be positive".into());
        }
        let m = self.modalities();
        for d in &self.domains {
            if d.severity.len() != m || d.noise_inflation.len() != m {
                return cfg(format!("domain {:?} needs {m} severity and noise entries", d.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityTransform {
    pub scale: Array,
    pub offset: Vec<f64>,
    pub noise_factor: f64,
}

/// Generated scenario: prototypes and concrete domain transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// `[class][modality] -> mean vector`; classes `0..C` known, then unknown.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    /// `[domain][modality]`.
    pub transforms: Vec<Vec<ModalityTransform>>,
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to `basis`; falls back to a plain random
/// direction when the basis already spans the space.
fn orthogonal_unit(rng: &mut ChaCha8Rng, basis: &[Vec<f64>]) -> Vec<f64> {
    let d = basis.first().map_or(1, |b| b.len());
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut v = b.clone();
        for q in &ortho {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let n = norm(&v);
        if n > 1e-9 {
            ortho.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut v = unit(rng, d);
    for q in &ortho {
        let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
    }
    let n = norm(&v);
    if n > 1e-9 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        unit(rng, d)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, cu) = (config.num_known, config.num_unknown);
        let mut prototypes = vec![Vec::with_capacity(config.modalities()); c + cu];
        for &d in &config.input_dims {
            let mut known: Vec<Vec<f64>> = Vec::with_capacity(c);
            let mut attempts = 0;
            while known.len() < c {
                let u = unit(&mut rng, d);
                let cand: Vec<f64> = u.iter().map(|x| x * config.known_radius).collect();
                attempts += 1;
                let ok = known
                    .iter()
                    .all(|k| distance(k, &cand) >= MIN_SEPARATION * config.known_radius);
                if ok || attempts > 10_000 {
                    if !ok {
                        return Err(Error::Config(format!(
                            "cannot place {c} separated prototypes in {d} dimensions"
                        )));
                    }
                    known.push(cand);
                }
            }
            // each unknown leans towards a distinct pair of known prototypes
            let mut pairs: Vec<(usize, usize)> = (0..c).flat_map(|a| (a + 1..c).map(move |b| (a, b))).collect();
            pairs.shuffle(&mut rng);
            for j in 0..cu {
                let (a, b) = pairs[j % pairs.len()];
                let mid: Vec<f64> = known[a].iter().zip(&known[b]).map(|(x, y)| x + y).collect();
                let n = norm(&mid).max(1e-9);
                let off = orthogonal_unit(&mut rng, &known);
                let lam = config.unknown_offaxis;
                let dir: Vec<f64> = mid
                    .iter()
                    .zip(&off)
                    .map(|(m, o)| (1.0 - lam) * m / n + lam * o)
                    .collect();
                let n = norm(&dir).max(1e-9);
                let proto = dir.iter().map(|x| x / n * config.unknown_radius).collect();
                prototypes[c + j].push(proto);
            }
            for (i, k) in known.into_iter().enumerate() {
                prototypes[i].push(k);
            }
        }

        let transforms = config
            .domains
            .iter()
            .map(|dom| {
                config
                    .input_dims
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| {
                        let s = dom.severity[k];
                        let mut scale = Array::identity(d);
                        for v in scale.data_mut() {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            *v += s * g / (d as f64).sqrt();
                        }
                        let dir = unit(&mut rng, d);
                        let len = s * config.offset_scale * config.known_radius;
                        ModalityTransform {
                            scale,
                            offset: dir.into_iter().map(|x| x * len).collect(),
                            noise_factor: dom.noise_inflation[k],
                        }
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            config,
            prototypes,
            transforms,
        })
    }

    pub fn num_known(&self) -> usize {
        self.config.num_known
    }

    pub fn is_known(&self, label: usize) -> bool {
        label < self.config.num_known
    }

    fn sample(&self, rng: &mut ChaCha8Rng, class: usize, domain: Option<usize>, rows: &mut [Vec<f64>]) {
        for (k, out) in rows.iter_mut().enumerate() {
            let proto = &self.prototypes[class][k];
            let noise = self.config.noise_sigma * domain.map_or(1.0, |d| self.transforms[d][k].noise_factor);
            let clean: Vec<f64> = proto
                .iter()
                .map(|&mu| {
                    let e: f64 = StandardNormal.sample(rng);
                    mu + noise * e
                })
                .collect();
            match domain {
                None => out.extend(clean),
                Some(d) => {
                    let t = &self.transforms[d][k];
                    let dim = clean.len();
                    for i in 0..dim {
                        let row = &t.scale.data()[i * dim..(i + 1) * dim];
                        let v: f64 = row.iter().zip(&clean).map(|(a, x)| a * x).sum();
                        out.push(v + t.offset[i]);
                    }
                }
            }
        }
    }

    /// Draw a batch with the given labels from `domains[i % len]` per sample.
    fn draw(&self, rng: &mut ChaCha8Rng, labels: &[usize], domains: &[Option<usize>]) -> Vec<Array> {
        let m = self.config.modalities();
        let mut per_mod: Vec<Vec<f64>> = vec![Vec::new(); m];
        for (i, &label) in labels.iter().enumerate() {
            let mut rows = vec![Vec::new(); m];
            self.sample(rng, label, domains[i % domains.len()], &mut rows);
            for (k, r) in rows.into_iter().enumerate() {
                per_mod[k].extend(r);
            }
        }
        per_mod
            .into_iter()
            .zip(&self.config.input_dims)
            .map(|(data, &d)| Array::matrix(labels.len(), d, data).expect("sized"))
            .collect()
    }

    /// Labeled known-only data from the unshifted source distribution.
    /// Labels cycle round-robin so classes stay balanced within one.
    pub fn source_dataset(&self) -> Dataset {
        self.known_dataset(self.config.n_source, 0)
    }

    /// Held-out source data used to calibrate the detector threshold.
    pub fn calibration_dataset(&self, n: usize) -> Dataset {
        self.known_dataset(n, 1)
    }

    fn known_dataset(&self, n: usize, stream: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        let labels: Vec<usize> = (0..n).map(|i| i % self.config.num_known).collect();
        let features = self.draw(&mut rng, &labels, &[None]);
        Dataset { features, labels }
    }

    fn domain_pass(&self, domains: &[Option<usize>], stream: u64, batch_size: usize) -> Vec<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        let n_batches = (self.config.n_target / batch_size).max(1);
        let n_unknown = ((batch_size as f64) * self.config.unknown_ratio).round() as usize;
        let n_unknown = n_unknown.clamp(1, batch_size - 1);
        let (c, cu) = (self.config.num_known, self.config.num_unknown);
        let (mut next_known, mut next_unknown) = (0usize, 0usize);
        (0..n_batches)
            .map(|_| {
                let mut labels = Vec::with_capacity(batch_size);
                for _ in 0..batch_size - n_unknown {
                    labels.push(next_known % c);
                    next_known += 1;
                }
                for _ in 0..n_unknown {
                    labels.push(c + next_unknown % cu);
                    next_unknown += 1;
                }
                labels.shuffle(&mut rng);
                let features = self.draw(&mut rng, &labels, domains);
                Batch {
                    features,
                    labels,
                    num_known: c,
                    segment: 0,
                }
            })
            .collect()
    }

    /// The full target stream of a protocol as an iterator of batches.
    pub fn target_stream(&self, protocol: &Protocol, batch_size: usize) -> Result<TargetStream> {
        if batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        let nd = self.transforms.len();
        let check = |d: usize| {
            if d >= nd {
                Err(Error::Config(format!("domain index {d} out of range ({nd} domains)")))
            } else {
                Ok(())
            }
        };
        let mut batches = Vec::new();
        match protocol {
            Protocol::Single { domain } => {
                check(*domain)?;
                batches = self.domain_pass(&[Some(*domain)], 2 + *domain as u64, batch_size);
            }
            Protocol::LongTerm { domain, rounds } => {
                check(*domain)?;
                if *rounds == 0 {
                    return Err(Error::Config("long_term needs rounds >= 1".into()));
                }
                let pass = self.domain_pass(&[Some(*domain)], 2 + *domain as u64, batch_size);
                for r in 0..*rounds {
                    batches.extend(pass.iter().cloned().map(|mut b| {
                        b.segment = r;
                        b
                    }));
                }
            }
            Protocol::Continual { domains } => {
                if domains.is_empty() {
                    return Err(Error::Config("continual needs at least one domain".into()));
                }
                for (seg, &d) in domains.iter().enumerate() {
                    check(d)?;
                    batches.extend(
                        self.domain_pass(&[Some(d)], 2 + d as u64, batch_size)
                            .into_iter()
                            .map(|mut b| {
                                b.segment = seg;
                                b
                            }),
                    );
                }
            }
            Protocol::Mixed { domains } => {
                if domains.is_empty() {
                    return Err(Error::Config("mixed needs at least one domain".into()));
                }
                for &d in domains {
                    check(d)?;
                }
                let doms: Vec<Option<usize>> = domains.iter().map(|&d| Some(d)).collect();
                batches = self.domain_pass(&doms, 1000, batch_size);
            }
        }
        Ok(TargetStream {
            batches: batches.into_iter(),
        })
    }
}

/// Online evaluation protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    Single {
        domain: usize,
    },
    /// Replays one domain's stream `rounds` times without resetting.
    LongTerm {
        domain: usize,
        rounds: usize,
    },
    /// Visits domains in order without resetting.
    Continual {
        domains: Vec<usize>,
    },
    /// Every batch mixes samples from all listed domains.
    Mixed {
        domains: Vec<usize>,
    },
}

impl Protocol {
    pub fn segments(&self) -> usize {
        match self {
            Protocol::Single { .. } | Protocol::Mixed { .. } => 1,
            Protocol::LongTerm { rounds, .. } => *rounds,
            Protocol::Continual { domains } => domains.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Single { .. } => "single",
            Protocol::LongTerm { .. } => "long_term",
            Protocol::Continual { .. } => "continual",
            Protocol::Mixed { .. } => "mixed",
        }
    }
}

/// One online mini-batch. Labels are evaluation-only: ids `< num_known` are
/// known classes, larger ids are unknown classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<Array>,
    pub labels: Vec<usize>,
    pub num_known: usize,
    /// Round (long-term) or domain position (continual) this batch belongs to.
    pub segment: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_known(&self, i: usize) -> bool {
        self.labels[i] < self.num_known
    }

    pub fn unknown_count(&self) -> usize {
        (0..self.len()).filter(|&i| !self.is_known(i)).count()
    }
}

#[derive(Debug)]
pub struct TargetStream {
    batches: std::vec::IntoIter<Batch>,
}

impl Iterator for TargetStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.batches.next()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

impl ExactSizeIterator for TargetStream {}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Array>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> (Vec<Array>, Vec<usize>) {
        (
            self.features.iter().map(|f| f.select_rows(idx)).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// One row per sample: modality features concatenated, label last.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = Vec::new();
        for (k, f) in self.features.iter().enumerate() {
            for j in 0..f.cols() {
                header.push(format!("m{k}_f{j}"));
            }
        }
        header.push("label".into());
        writeln!(out, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = Vec::new();
            for f in &self.features {
                row.extend(f.row(i).iter().map(|v| crate::harness::fmt_f64(*v)));
            }
            row.push(self.labels[i].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of each per-modality auxiliary cross-entropy.
    pub head_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 32,
            head_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub source_accuracy: f64,
}

fn cross_entropy(
    tape: &mut Tape,
    probs: crate::diffcore::NodeId,
    onehot: crate::diffcore::NodeId,
) -> Result<crate::diffcore::NodeId> {
    let lp = tape.log(probs);
    let picked = tape.mul(lp, onehot)?;
    let per_row = tape.sum(picked, Axis::Cols);
    let m = tape.mean(per_row, Axis::All);
    Ok(tape.neg(m))
}

/// Supervised source training: fused cross-entropy plus one auxiliary
/// cross-entropy per modality head, all parameters trainable.
pub fn pretrain_source(
    model: &mut MultimodalModel,
    data: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt: AdamState<ParamId> = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let c = model.num_classes;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (features, labels) = data.subset(chunk);
            let mut onehot = Array::zeros(&[chunk.len(), c]);
            for (i, &l) in labels.iter().enumerate() {
                onehot.data_mut()[i * c + l] = 1.0;
            }
            tape.clear();
            let g = model.forward_graph(&mut tape, &features, &|_| true)?;
            let oh = tape.constant(onehot);
            let mut loss = cross_entropy(&mut tape, g.fused_probs, oh)?;
            for &p in &g.modality_probs {
                let ce = cross_entropy(&mut tape, p, oh)?;
                let ce = tape.scale(ce, cfg.head_weight);
                loss = tape.add(loss, ce)?;
            }
            total += tape.value(loss).data()[0] * chunk.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<(ParamId, Array)> = g
                .params
                .iter()
                .map(|(&id, &node)| (id, tape.grad(node).clone()))
                .collect();
            let mut values: Vec<(ParamId, Array)> =
                grads.iter().map(|(id, _)| (*id, model.param(*id).clone())).collect();
            {
                let mut slots: Vec<(ParamId, &mut Array, &Array)> = values
                    .iter_mut()
                    .zip(&grads)
                    .map(|((id, v), (_, g))| (*id, v, g))
                    .collect();
                opt.step(&mut slots, 0)?;
            }
            for (id, v) in values {
                *model.param_mut(id) = v;
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let source_accuracy = dataset_accuracy(model, data)?;
    Ok(PretrainReport {
        epoch_losses,
        source_accuracy,
    })
}

pub fn dataset_accuracy(model: &MultimodalModel, data: &Dataset) -> Result<f64> {
    let out = model.forward(&data.features)?;
    let correct = out
        .predictions()
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelSpec};

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_source: 300,
            n_target: 256,
            seed: 5,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn same_seed_same_prototypes() {
        let a = Scenario::new(small()).unwrap();
        let b = Scenario::new(small()).unwrap();
        assert_eq!(a, b);
        let c = Scenario::new(ScenarioConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.prototypes, c.prototypes);
    }

    #[test]
    fn single_class_rejected() {
        let cfg = ScenarioConfig {
            num_known: 1,
            ..small()
        };
        assert!(matches!(Scenario::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn prototype_separation() {
        let s = Scenario::new(small()).unwrap();
        let c = s.num_known();
        for k in 0..s.config.modalities() {
            for a in 0..c {
                for b in a + 1..c {
                    let d = distance(&s.prototypes[a][k], &s.prototypes[b][k]);
                    assert!(d >= MIN_SEPARATION * s.config.known_radius);
                }
            }
            for j in c..s.prototypes.len() {
                let r = norm(&s.prototypes[j][k]);
                assert!((r - s.config.unknown_radius).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn source_is_balanced_and_known_only() {
        let s = Scenario::new(small()).unwrap();
        let d = s.source_dataset();
        assert_eq!(d.len(), 300);
        let mut hist = vec![0; s.num_known()];
        for &l in &d.labels {
            assert!(s.is_known(l));
            hist[l] += 1;
        }
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1);
    }

    #[test]
    fn source_mean_converges_to_prototype() {
        let cfg = ScenarioConfig {
            n_source: 6000,
            ..small()
        };
        let s = Scenario::new(cfg).unwrap();
        let d = s.source_dataset();
        let sigma = s.config.noise_sigma;
        for class in 0..s.num_known() {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
            let n = idx.len() as f64;
            for k in 0..2 {
                for j in 0..s.config.input_dims[k] {
                    let mean = idx.iter().map(|&i| d.features[k].get(i, j)).sum::<f64>() / n;
                    let proto = s.prototypes[class][k][j];
                    // 4 sigma keeps the family-wise false alarm rate small
                    assert!(
                        (mean - proto).abs() < 4.0 * sigma / n.sqrt(),
                        "class {class} mod {k} dim {j}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_composition() {
        let s = Scenario::new(small()).unwrap();
        for b in s.target_stream(&Protocol::Single { domain: 0 }, 64).unwrap() {
            assert_eq!(b.len(), 64);
            assert_eq!(b.unknown_count(), 32);
            assert!(b.labels.iter().all(|&l| l < s.num_known() + s.config.num_unknown));
        }
        let s2 = Scenario::new(ScenarioConfig {
            unknown_ratio: 0.2,
            ..small()
        })
        .unwrap();
        for b in s2.target_stream(&Protocol::Single { domain: 0 }, 64).unwrap() {
            assert_eq!(b.unknown_count(), 13);
        }
    }

    #[test]
    fn long_term_replays() {
        let s = Scenario::new(small()).unwrap();
        let single: Vec<_> = s.target_stream(&Protocol::Single { domain: 1 }, 64).unwrap().collect();
        let long: Vec<_> = s
            .target_stream(&Protocol::LongTerm { domain: 1, rounds: 10 }, 64)
            .unwrap()
            .collect();
        assert_eq!(long.len(), 10 * single.len());
        assert_eq!(long[single.len()].features, single[0].features);
        assert_eq!(long.last().unwrap().segment, 9);
    }

    #[test]
    fn continual_and_mixed() {
        let s = Scenario::new(small()).unwrap();
        let cont: Vec<_> = s
            .target_stream(&Protocol::Continual { domains: vec![0, 1, 2] }, 64)
            .unwrap()
            .collect();
        assert_eq!(cont.len(), 12);
        assert_eq!(cont[4].segment, 1);
        let mixed: Vec<_> = s
            .target_stream(&Protocol::Mixed { domains: vec![0, 1, 2] }, 64)
            .unwrap()
            .collect();
        assert_eq!(mixed.len(), 4);
        assert!(s.target_stream(&Protocol::Single { domain: 9 }, 64).is_err());
        let mut it = s.target_stream(&Protocol::Single { domain: 0 }, 64).unwrap();
        assert_eq!(it.len(), 4);
        for _ in 0..4 {
            assert!(it.next().is_some());
        }
        assert!(it.next().is_none());
    }

    #[test]
    fn stream_is_deterministic() {
        let a: Vec<_> = Scenario::new(small())
            .unwrap()
            .target_stream(&Protocol::Mixed { domains: vec![0, 2] }, 32)
            .unwrap()
            .collect();
        let b: Vec<_> = Scenario::new(small())
            .unwrap()
            .target_stream(&Protocol::Mixed { domains: vec![0, 2] }, 32)
            .unwrap()
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_shift_matches_source() {
        let mut cfg = small();
        cfg.domains = vec![DomainShift::identity("none", 2)];
        cfg.n_target = 64 * 60;
        cfg.n_source = 64 * 30;
        let s = Scenario::new(cfg).unwrap();
        let src = s.source_dataset();
        let stream: Vec<_> = s.target_stream(&Protocol::Single { domain: 0 }, 64).unwrap().collect();
        let sigma = s.config.noise_sigma;
        for class in [0, 3] {
            let mut t_sum = [0.0f64; 2];
            let mut t_n = 0.0;
            for b in &stream {
                for i in 0..b.len() {
                    if b.labels[i] == class {
                        t_sum[0] += b.features[0].get(i, 0);
                        t_sum[1] += b.features[1].get(i, 0);
                        t_n += 1.0;
                    }
                }
            }
            let idx: Vec<usize> = (0..src.len()).filter(|&i| src.labels[i] == class).collect();
            let s_n = idx.len() as f64;
            for k in 0..2 {
                let s_mean = idx.iter().map(|&i| src.features[k].get(i, 0)).sum::<f64>() / s_n;
                let t_mean = t_sum[k] / t_n;
                let se = sigma * (1.0 / s_n + 1.0 / t_n).sqrt();
                assert!((s_mean - t_mean).abs() < 4.0 * se);
            }
        }
    }

    #[test]
    fn csv_dump() {
        let s = Scenario::new(ScenarioConfig {
            n_source: 10,
            ..small()
        })
        .unwrap();
        let d = s.source_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("source.csv");
        d.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        assert!(lines[0].ends_with(",label"));
        let width: usize = s.config.input_dims.iter().sum();
        assert_eq!(lines[1].split(',').count(), width + 1);
    }

    fn toy_model(s: &Scenario, seed: u64) -> MultimodalModel {
        MultimodalModel::init(
            &ModelSpec {
                input_dims: s.config.input_dims.clone(),
                embed_dims: vec![8; s.config.modalities()],
                num_classes: s.num_known(),
                activation: Activation::Tanh,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_is_noop() {
        let s = Scenario::new(small()).unwrap();
        let mut m = toy_model(&s, 1);
        let before = m.clone();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        pretrain_source(&mut m, &s.source_dataset(), &cfg, 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn separable_toy_reaches_high_accuracy() {
        let cfg = ScenarioConfig {
            noise_sigma: 0.3,
            n_source: 300,
            ..small()
        };
        let s = Scenario::new(cfg).unwrap();
        let mut m = toy_model(&s, 2);
        let report = pretrain_source(
            &mut m,
            &s.source_dataset(),
            &PretrainConfig {
                epochs: 50,
                ..PretrainConfig::default()
            },
            1,
        )
        .unwrap();
        assert!(report.source_accuracy >= 0.95, "{}", report.source_accuracy);
    }

    #[test]
    fn loss_decreases_early() {
        let s = Scenario::new(small()).unwrap();
        let mut m = toy_model(&s, 3);
        let report = pretrain_source(
            &mut m,
            &s.source_dataset(),
            &PretrainConfig {
                epochs: 5,
                ..PretrainConfig::default()
            },
            2,
        )
        .unwrap();
        for w in report.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", report.epoch_losses);
        }
    }
}
