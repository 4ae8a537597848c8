use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::scene::{Sequence, SuiteConfig};
use super::track::{evaluate_suite, Metrics, SuiteReport};
use crate::error::{config_err, Result};
use crate::model::{Model, ModelConfig};
use crate::training::{sample_pair, train, Augment, PairSample, SequencePairs, TrainConfig, TrainLog};

/// Pairs in the held-out probe batch logged during training.
pub const PROBE_PAIRS: usize = 16;

/// Generated train/test split plus the probe batch.
pub struct DeskData {
    pub train: Vec<Sequence<f32>>,
    pub test: Vec<(String, Sequence<f32>)>,
    probe_sequences: Vec<Sequence<f32>>,
}

impl DeskData {
    pub fn generate(suite: &SuiteConfig) -> Result<Self> {
        Ok(Self {
            train: suite.train_sequences()?.into_iter().map(|(_, s)| s).collect(),
            test: suite.test_sequences()?,
            probe_sequences: suite.probe_sequences(2)?,
        })
    }

    /// Fixed probe pairs for `cfg`, cut from sequences outside both splits.
    pub fn probe(&self, cfg: &ModelConfig) -> Result<Vec<PairSample<f32>>> {
        let aug = Augment { flip_prob: 0.0, brightness: 0.0, center_jitter: 0.25, ..Augment::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..PROBE_PAIRS)
            .map(|i| sample_pair(&self.probe_sequences[i % self.probe_sequences.len()], cfg, &aug, &mut rng))
            .collect()
    }
}

/// Everything a single training run needs: model, data and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::tiny(), suite: SuiteConfig::default(), train: TrainConfig::default() }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.suite.scene.validate()?;
        self.train.validate()
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| config_err!("run config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Outcome of one train-then-evaluate run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: String,
    pub seed: u64,
    pub report: SuiteReport,
    pub log: TrainLog,
    pub train_secs: f64,
    pub model: Model<f32>,
}

impl RunResult {
    pub fn metrics(&self) -> Metrics {
        self.report.overall
    }
}

/// Trains `cfg` from scratch (weights and sampling seeded by `seed`) on the
/// training split and tracks the held-out split.
pub fn train_and_evaluate(cfg: &ModelConfig, data: &DeskData, tc: &TrainConfig, seed: u64) -> Result<RunResult> {
    let model = Model::new(cfg, seed)?;
    let probe = data.probe(cfg)?;
    let mut source = SequencePairs { sequences: &data.train, config: cfg.clone(), augment: tc.augment };
    let tc = TrainConfig { seed, ..tc.clone() };
    let start = Instant::now();
    let (model, log) = train(model, &mut source, &tc, &probe)?;
    let train_secs = start.elapsed().as_secs_f64();
    let report = evaluate_suite(&model, &data.test)?;
    Ok(RunResult { config: cfg.name.clone(), seed, report, log, train_secs, model })
}

/// Median of the AO values (mean of the middle pair for even counts).
pub fn median_ao(runs: &[RunResult]) -> f64 {
    let mut v: Vec<f64> = runs.iter().map(|r| r.metrics().ao).collect();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Model variants trained and compared on the same suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub configs: Vec<ModelConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl AblationGrid {
    /// Tiny model against its pure-Siamese DW-Corr baseline, two seeds each.
    pub fn tiny_vs_siamese() -> Self {
        let tiny = ModelConfig::tiny();
        Self {
            configs: vec![tiny.clone(), tiny.siamese_baseline()],
            seeds: vec![0, 1],
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.configs.is_empty() || self.seeds.is_empty() {
            return Err(config_err!("ablation grid needs at least one config and one seed"));
        }
        let mut names: Vec<&str> = self.configs.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err!("ablation config names must be unique"));
        }
        for c in &self.configs {
            c.validate()?;
        }
        self.suite.scene.validate()?;
        self.train.validate()
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let grid: Self = toml::from_str(s).map_err(|e| config_err!("ablation grid: {e}"))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ablation grid serializes")
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
}

impl AblationReport {
    /// Per-config mean metrics, in first-appearance order.
    pub fn means(&self) -> Vec<(String, Metrics)> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.config.as_str()) {
                order.push(&r.config);
            }
        }
        order
            .into_iter()
            .map(|name| {
                let rs: Vec<Metrics> = self.runs.iter().filter(|r| r.config == name).map(RunResult::metrics).collect();
                let k = rs.len() as f64;
                let m = Metrics {
                    ao: rs.iter().map(|m| m.ao).sum::<f64>() / k,
                    sr50: rs.iter().map(|m| m.sr50).sum::<f64>() / k,
                    sr75: rs.iter().map(|m| m.sr75).sum::<f64>() / k,
                };
                (name.to_string(), m)
            })
            .collect()
    }

    /// `config,seed,AO,SR50,SR75`: one row per run, then one `mean` row per config.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,seed,AO,SR50,SR75\n");
        for r in &self.runs {
            let m = r.metrics();
            writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.config, r.seed, m.ao, m.sr50, m.sr75).expect("write to string");
        }
        for (name, m) in self.means() {
            writeln!(s, "{name},mean,{:.6},{:.6},{:.6}", m.ao, m.sr50, m.sr75).expect("write to string");
        }
        s
    }
}

/// Trains every config with every seed (runs in parallel) and evaluates
/// them on the same held-out split. Outcome ordering is reported only.
pub fn run_ablation(grid: &AblationGrid) -> Result<AblationReport> {
    grid.validate()?;
    let data = DeskData::generate(&grid.suite)?;
    let jobs: Vec<(&ModelConfig, u64)> =
        grid.configs.iter().flat_map(|c| grid.seeds.iter().map(move |&s| (c, s))).collect();
    let runs = jobs.into_par_iter().map(|(c, s)| train_and_evaluate(c, &data, &grid.train, s)).collect::<Result<_>>()?;
    Ok(AblationReport { runs })
}
