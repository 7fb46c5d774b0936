//! Experiment configuration, orchestration and output files.

mod persist;
mod tools;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use persist::{
    fmt_f64, persist, read_records, read_summary, summary_rows, to_json_line, write_summary, RecordLine, SummaryRow,
    HISTOGRAM_BINS,
};
pub use tools::{
    report_rows, run_analysis, run_sweep, write_analysis, write_report, write_sweep, AnalysisPoint, ReportRow,
    SweepGrid, SweepRow,
};

use crate::adapt::{run_episode, BatchRecord, EpisodeReport, Method, MethodConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{quantile, score, ScoreFunction};
use crate::model::{Activation, ModelSpec, MultimodalModel};
use crate::optimizer::AdamConfig;
use crate::streams::{pretrain_source, PretrainConfig, Protocol, Scenario, ScenarioConfig};

/// Adam step size used by the shipped experiments. The synthetic model is
/// tiny and the streams are short, so the adaptation step is far larger
/// than the 2e-5 in `AdamConfig::default`.
pub const DESK_LR: f64 = 3e-3;
/// Diversity weight used by the shipped experiments.
pub const DESK_GAMMA2: f64 = 0.3;

/// Method configuration with the experiment-level step size and weights.
pub fn desk_method(method: Method) -> MethodConfig {
    MethodConfig {
        method,
        loss: LossConfig {
            gamma2: DESK_GAMMA2,
            ..LossConfig::default()
        },
        optimizer: AdamConfig {
            lr: DESK_LR,
            ..AdamConfig::default()
        },
        ..MethodConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario label written to every output row.
    pub name: String,
    /// `scenario.seed` is ignored; each run uses its own seed.
    pub scenario: ScenarioConfig,
    pub protocol: Protocol,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub pretrain: PretrainConfig,
    /// Fixed detector threshold. When absent it is the 5th percentile of
    /// known scores on a held-out source calibration set.
    pub eta: Option<f64>,
    pub calibration_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            scenario: ScenarioConfig::default(),
            protocol: Protocol::Single { domain: 0 },
            methods: [Method::Source, Method::Tent, Method::Aeo]
                .into_iter()
                .map(desk_method)
                .collect(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("out"),
            batch_size: 64,
            embed_dim: 16,
            pretrain: PretrainConfig::default(),
            eta: None,
            calibration_size: 600,
        }
    }
}

/// A validation failure tied to the config key it concerns.
struct Invalid {
    key: &'static str,
    message: String,
}

fn invalid<T>(key: &'static str, message: impl Into<String>) -> std::result::Result<T, Invalid> {
    Err(Invalid {
        key,
        message: message.into(),
    })
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|e| Error::Config(format!("{}: {}", e.key, e.message)))
    }

    fn check(&self) -> std::result::Result<(), Invalid> {
        if let Err(e) = self.scenario.validate() {
            return invalid("scenario", e.to_string());
        }
        if self.methods.is_empty() {
            return invalid("methods", "at least one method is required");
        }
        let mut labels: Vec<String> = self.methods.iter().map(MethodConfig::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return invalid("methods", format!("duplicate method label {:?}", w[0]));
        }
        for m in &self.methods {
            if let Err(e) = m.loss.validate() {
                return invalid("loss", e.to_string());
            }
            let lr = m.optimizer.lr;
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid("lr", format!("must be positive, got {lr}"));
            }
        }
        if self.seeds.is_empty() {
            return invalid("seeds", "at least one seed is required");
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return invalid("seeds", "seeds must be distinct");
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be positive");
        }
        if self.embed_dim == 0 {
            return invalid("embed_dim", "must be positive");
        }
        if self.calibration_size == 0 && self.eta.is_none() {
            return invalid("calibration_size", "must be positive when eta is not fixed");
        }
        if let Some(eta) = self.eta {
            if !eta.is_finite() {
                return invalid("eta", "must be finite");
            }
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return invalid("pretrain", "epochs, batch_size and lr must be positive");
        }
        let n = self.scenario.domains.len();
        let domains: Vec<usize> = match &self.protocol {
            Protocol::Single { domain } => vec![*domain],
            Protocol::LongTerm { domain, rounds } => {
                if *rounds == 0 {
                    return invalid("rounds", "must be positive");
                }
                vec![*domain]
            }
            Protocol::Continual { domains } | Protocol::Mixed { domains } => {
                if domains.is_empty() {
                    return invalid("domains", "at least one domain is required");
                }
                domains.clone()
            }
        };
        if let Some(d) = domains.iter().find(|&&d| d >= n) {
            return invalid("protocol", format!("domain {d} out of range for {n} domains"));
        }
        Ok(())
    }

    /// Parses and validates a config; errors name `origin:line:column`.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let msg = msg
                .rsplit_once(" at line ")
                .map_or(msg.as_str(), |(m, _)| m)
                .to_string();
            Error::Config(format!("{origin}:{}:{}: {msg}", e.line(), e.column()))
        })?;
        cfg.check().map_err(|e| {
            let needle = format!("\"{}\"", e.key);
            let line = text.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1);
            Error::Config(format!("{origin}:{line}: {}: {}", e.key, e.message))
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = self.scenario.modalities();
        ModelSpec {
            input_dims: self.scenario.input_dims.clone(),
            embed_dims: vec![self.embed_dim; m],
            num_classes: self.scenario.num_known,
            activation: Activation::Tanh,
        }
    }
}

/// Command-line overrides layered on top of a config.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub unknown_ratio: Option<f64>,
    pub score: Option<ScoreFunction>,
    pub protocol: Option<String>,
    pub rounds: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(m) = self.method {
            cfg.methods.retain(|c| c.method == m);
            if cfg.methods.is_empty() {
                cfg.methods.push(desk_method(m));
            }
        }
        for m in &mut cfg.methods {
            let loss = &mut m.loss;
            if let Some(v) = self.alpha {
                loss.alpha = v;
            }
            if let Some(v) = self.beta {
                loss.beta = v;
            }
            if let Some(v) = self.gamma1 {
                loss.gamma1 = v;
            }
            if let Some(v) = self.gamma2 {
                loss.gamma2 = v;
            }
            if let Some(v) = self.lr {
                m.optimizer.lr = v;
            }
            if let Some(s) = self.score {
                m.score = s;
            }
        }
        if let Some(v) = self.unknown_ratio {
            cfg.scenario.unknown_ratio = v;
        }
        if let Some(p) = &self.protocol {
            let all: Vec<usize> = (0..cfg.scenario.domains.len()).collect();
            cfg.protocol = match p.as_str() {
                "single" => Protocol::Single { domain: 0 },
                "long_term" => Protocol::LongTerm {
                    domain: 0,
                    rounds: self.rounds.unwrap_or(10),
                },
                "continual" => Protocol::Continual { domains: all },
                "mixed" => Protocol::Mixed { domains: all },
                other => return Err(Error::Config(format!("unknown protocol {other:?}"))),
            };
        }
        if let Some(r) = self.rounds {
            match &mut cfg.protocol {
                Protocol::LongTerm { rounds, .. } => *rounds = r,
                _ => return Err(Error::Config("--rounds needs the long_term protocol".into())),
            }
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()
    }
}

/// Scenario and pretrained source model for one seed.
#[derive(Clone, Debug)]
pub struct SeedSetup {
    pub seed: u64,
    pub scenario: Scenario,
    pub model: MultimodalModel,
    pub source_accuracy: f64,
}

pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let scenario = Scenario::new(ScenarioConfig {
        seed,
        ..cfg.scenario.clone()
    })?;
    let mut model = MultimodalModel::init(&cfg.model_spec(), seed)?;
    let rep = pretrain_source(&mut model, &scenario.source_dataset(), &cfg.pretrain, seed)?;
    Ok(SeedSetup {
        seed,
        scenario,
        model,
        source_accuracy: rep.source_accuracy,
    })
}

/// 5th percentile of known-sample scores on held-out source data.
pub fn calibrate_eta(model: &MultimodalModel, scenario: &Scenario, kind: ScoreFunction, n: usize) -> Result<f64> {
    let cal = scenario.calibration_dataset(n);
    let out = model.forward(&cal.features)?;
    quantile(&score(&out, kind), 0.05)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub eta: f64,
    pub records: Vec<BatchRecord>,
    pub report: EpisodeReport,
}

pub fn run_method(cfg: &ExperimentConfig, setup: &SeedSetup, method: &MethodConfig) -> Result<RunResult> {
    let eta = match cfg.eta {
        Some(e) => e,
        None => calibrate_eta(&setup.model, &setup.scenario, method.score, cfg.calibration_size)?,
    };
    let stream = setup.scenario.target_stream(&cfg.protocol, cfg.batch_size)?;
    let ep = run_episode(&setup.model, stream, method, Some(eta))?;
    Ok(RunResult {
        method: method.label(),
        scenario: cfg.name.clone(),
        seed: setup.seed,
        eta,
        records: ep.records,
        report: ep.report,
    })
}

/// Runs `f` on a pool of `jobs` threads (0 means one per core).
pub fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Every (seed, method) run, sorted by method, scenario and seed.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let setups: Vec<SeedSetup> = cfg
        .seeds
        .par_iter()
        .map(|&s| prepare_seed(cfg, s))
        .collect::<Result<_>>()?;
    let tasks: Vec<(&SeedSetup, &MethodConfig)> = setups
        .iter()
        .flat_map(|s| cfg.methods.iter().map(move |m| (s, m)))
        .collect();
    let mut runs: Vec<RunResult> = tasks
        .par_iter()
        .map(|(s, m)| run_method(cfg, s, m))
        .collect::<Result<_>>()?;
    runs.sort_by(|a, b| (&a.method, &a.scenario, a.seed).cmp(&(&b.method, &b.scenario, b.seed)));
    Ok(runs)
}

pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<RunResult>> {
    with_pool(jobs, || run_all(cfg))?
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            scenario: ScenarioConfig {
                n_source: 240,
                n_target: 256,
                ..ScenarioConfig::default()
            },
            seeds: vec![3, 1],
            pretrain: PretrainConfig {
                epochs: 2,
                ..PretrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_json().unwrap();
        let back = ExperimentConfig::from_json(&text, "cfg").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn unknown_key_rejected_with_position() {
        let err = ExperimentConfig::from_json("{\n  \"seeds\": [1],\n  \"bogus\": 2\n}", "c.json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("c.json:3:"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn semantic_error_points_at_key() {
        let err = ExperimentConfig::from_json("{\n  \"name\": \"x\",\n  \"seeds\": []\n}", "c.json").unwrap_err();
        assert!(err.to_string().contains("c.json:3: seeds:"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::default();
        let o = Overrides {
            method: Some(Method::Aeo),
            alpha: Some(0.6),
            protocol: Some("long_term".into()),
            rounds: Some(3),
            seed: Some(9),
            ..Overrides::default()
        };
        o.apply(&mut cfg).unwrap();
        assert_eq!(cfg.methods.len(), 1);
        assert_eq!(cfg.methods[0].loss.alpha, 0.6);
        assert_eq!(cfg.protocol, Protocol::LongTerm { domain: 0, rounds: 3 });
        assert_eq!(cfg.seeds, vec![9]);
        let bad = Overrides {
            rounds: Some(2),
            ..Overrides::default()
        };
        assert!(bad.apply(&mut ExperimentConfig::default()).is_err());
    }

    #[test]
    fn runs_are_canonical_and_parallel_safe() {
        let cfg = tiny();
        let a = run_experiment(&cfg, 1).unwrap();
        let b = run_experiment(&cfg, 4).unwrap();
        let key = |r: &RunResult| (r.method.clone(), r.seed);
        assert_eq!(
            a.iter().map(key).collect::<Vec<_>>(),
            b.iter().map(key).collect::<Vec<_>>()
        );
        assert_eq!(a[0].method, "aeo");
        assert_eq!(a[0].seed, 1);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.records, y.records);
            assert_eq!(x.eta, y.eta);
        }
    }
}
