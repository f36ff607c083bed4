//! Declarative experiment configuration.
//!
//! Configs are TOML documents with nested sections; every field has a
//! desk-scale default so presets stay short. `paper` preset values follow
//! the full-scale setup (T=500, T'=15, κ=0.4, ε=0.015, η=0.01, learning
//! rate 1e-5, batch 64, W-DRO budget 0.3, KL-DRO budget 4).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::noise::NoiseSpec;
use crate::data::SynthSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddro,
    Ml,
    Dml,
    Wdro,
    Kldro,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddro => "ddro",
            Method::Ml => "ml",
            Method::Dml => "dml",
            Method::Wdro => "wdro",
            Method::Kldro => "kldro",
        }
    }

    pub const ALL: [Method; 5] = [
        Method::Ml,
        Method::Dml,
        Method::Ddro,
        Method::Wdro,
        Method::Kldro,
    ];
}

/// Which method(s) a `train` invocation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodSelect {
    Ddro,
    Ml,
    Dml,
    Wdro,
    Kldro,
    All,
}

impl MethodSelect {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodSelect::Ddro => vec![Method::Ddro],
            MethodSelect::Ml => vec![Method::Ml],
            MethodSelect::Dml => vec![Method::Dml],
            MethodSelect::Wdro => vec![Method::Wdro],
            MethodSelect::Kldro => vec![Method::Kldro],
            MethodSelect::All => Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Forward/backward step count T.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Reverse standard deviation on the fine-tuned steps.
    pub sigma: f64,
    /// T': final reverse steps fine-tuned by the inner maximization.
    pub finetune_steps: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub batch_size: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 0.008,
            beta_max: 0.25,
            sigma: 0.2,
            finetune_steps: 15,
            hidden: vec![64, 64],
            embed_dim: 16,
            pretrain_epochs: 200,
            pretrain_lr: 1e-3,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    /// Inner iteration count K.
    pub iterations: usize,
    /// Adversarial budget ε. With `epsilon_relative`, the effective budget
    /// is ε × J(θ_ref, S₀), resolved once per run.
    pub epsilon: f64,
    pub epsilon_relative: bool,
    /// Dual step size η.
    pub eta: f64,
    /// PPO clipping parameter κ.
    pub kappa: f64,
    /// Initial multiplier μ⁽¹⁾.
    pub mu_init: f64,
    pub surrogate: SurrogateChoice,
    /// Reset θ to the reference at each outer iteration instead of
    /// fine-tuning continuously.
    pub reset_per_outer: bool,
    pub traj_batch: usize,
    pub use_baseline: bool,
    pub trace_f_samples: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateChoice {
    Ppo,
    PolicyGradient,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            epsilon: 1.05,
            epsilon_relative: true,
            eta: 0.05,
            kappa: 0.4,
            mu_init: 1.0,
            surrogate: SurrogateChoice::Ppo,
            reset_per_outer: false,
            traj_batch: 64,
            use_baseline: false,
            trace_f_samples: 0,
            learning_rate: 2e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    /// Outer iteration count I.
    pub iterations: usize,
    /// Passes over each generated dataset (E).
    pub epochs_per_dataset: usize,
    /// Generated dataset size n.
    pub dataset_size: usize,
    pub optimizer: OptimizerChoice,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Regenerate S_j each outer iteration; disabling reuses the first
    /// generated dataset (the DML degeneracy).
    pub resample_each_iter: bool,
    /// Skip the inner maximization and sample from the reference.
    pub frozen_reference: bool,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            epochs_per_dataset: 2,
            dataset_size: 438,
            optimizer: OptimizerChoice::Adam,
            learning_rate: 1e-3,
            batch_size: 64,
            resample_each_iter: true,
            frozen_reference: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchChoice {
    Mlp,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Input window length L_in.
    pub window: usize,
    /// Forecast horizon L_out.
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub arch: ArchChoice,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            window: 24,
            horizon: 1,
            hidden: vec![32],
            arch: ArchChoice::Mlp,
            pretrain_epochs: 80,
            pretrain_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSynth {
    pub name: String,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCsv {
    pub name: String,
    pub path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Training series (synthetic source).
    pub synthetic: Option<SynthSpec>,
    /// Shifted test sets (synthetic source).
    pub synthetic_tests: Vec<NamedSynth>,
    /// Training series (csv source).
    pub train_csv: Option<String>,
    pub test_csvs: Vec<NamedCsv>,
    /// Min-max scale to [0,1] on the training split.
    pub normalize: bool,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: Some(default_train_spec()),
            synthetic_tests: default_test_specs(),
            train_csv: None,
            test_csvs: Vec::new(),
            normalize: true,
            stride: 1,
        }
    }
}

fn default_train_spec() -> SynthSpec {
    SynthSpec {
        length: 462,
        periods: vec![24.0, 6.0],
        amplitudes: vec![1.0, 0.25],
        phases: vec![],
        trend: 0.0,
        level: 2.0,
        innovation_sigma: 0.08,
        regime: None,
    }
}

fn default_test_specs() -> Vec<NamedSynth> {
    let base = default_train_spec();
    let mut amp = base.clone();
    amp.length = 336;
    amp.amplitudes = vec![1.45, 0.25];
    let mut trend = base.clone();
    trend.length = 336;
    trend.trend = 0.004;
    let mut noisy = base.clone();
    noisy.length = 336;
    noisy.innovation_sigma = 0.3;
    noisy.amplitudes = vec![0.8, 0.25];
    vec![
        NamedSynth {
            name: "amp_shift".into(),
            spec: amp,
        },
        NamedSynth {
            name: "trend_shift".into(),
            spec: trend,
        },
        NamedSynth {
            name: "noise_shift".into(),
            spec: noisy,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBatteryEntry {
    #[serde(flatten)]
    pub spec: NoiseSpec,
    /// Intensity sweep for the kind's primary parameter; empty means the
    /// spec's own level only.
    #[serde(default)]
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub seed: u64,
    pub battery: Vec<NoiseBatteryEntry>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            seed: 777,
            battery: vec![
                NoiseBatteryEntry {
                    spec: NoiseSpec::Gaussian { sigma: 0.1 },
                    levels: vec![0.05, 0.1, 0.2],
                },
                NoiseBatteryEntry {
                    spec: NoiseSpec::Perlin {
                        octaves: 8,
                        amplitude: 1.0,
                    },
                    levels: vec![0.05, 0.5, 1.0],
                },
                NoiseBatteryEntry {
                    spec: NoiseSpec::Cutout {
                        ratio: 0.3,
                        fill: 1.0,
                    },
                    levels: vec![0.1, 0.3, 0.4],
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WdroConfig {
    /// ℓ₂ perturbation budget.
    pub budget: f64,
    /// Projected-ascent steps per batch.
    pub steps: usize,
    pub step_size: f64,
    pub epochs: usize,
}

impl Default for WdroConfig {
    fn default() -> Self {
        Self {
            budget: 0.3,
            steps: 5,
            step_size: 0.1,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KldroConfig {
    /// KL ball radius for the exponential-tilting worst case.
    pub budget: f64,
    pub epochs: usize,
}

impl Default for KldroConfig {
    fn default() -> Self {
        Self {
            budget: 0.5,
            epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlConfig {
    /// Fine-tuning epochs beyond the shared pretraining; the plain ML
    /// baseline is the pretrained model.
    pub extra_epochs: usize,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self { extra_epochs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Gaussian data mean/variance for the analytic probe.
    pub gaussian_mean: f64,
    pub gaussian_var: f64,
    pub probe_samples: usize,
    pub checkpoints: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            gaussian_mean: 0.0,
            gaussian_var: 1.0,
            probe_samples: 10_000,
            checkpoints: 5,
        }
    }
}

/// Root experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: MethodSelect,
    pub out_dir: String,
    pub diffusion: DiffusionConfig,
    pub inner: InnerConfig,
    pub outer: OuterConfig,
    pub predictor: PredictorConfig,
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub wdro: WdroConfig,
    pub kldro: KldroConfig,
    pub ml: MlConfig,
    pub verify: VerifyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: MethodSelect::All,
            out_dir: "runs/out".into(),
            diffusion: DiffusionConfig::default(),
            inner: InnerConfig::default(),
            outer: OuterConfig::default(),
            predictor: PredictorConfig::default(),
            data: DataConfig::default(),
            noise: NoiseConfig::default(),
            wdro: WdroConfig::default(),
            kldro: KldroConfig::default(),
            ml: MlConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale preset following the published setup: T=500 with the
    /// standard (1e-4, 0.02) β range, T'=15, κ=0.4, absolute ε=0.015,
    /// η=0.01, Adam 1e-5, batch 64, W-DRO budget 0.3, KL-DRO budget 4.
    pub fn paper_preset() -> Self {
        let mut cfg = Self::default();
        cfg.diffusion.steps = 500;
        cfg.diffusion.beta_min = 1e-4;
        cfg.diffusion.beta_max = 0.02;
        cfg.diffusion.sigma = 0.3;
        cfg.diffusion.finetune_steps = 15;
        cfg.diffusion.pretrain_lr = 1e-5;
        cfg.inner.iterations = 10;
        cfg.inner.epsilon = 0.015;
        cfg.inner.epsilon_relative = false;
        cfg.inner.eta = 0.01;
        cfg.inner.kappa = 0.4;
        cfg.inner.learning_rate = 1e-5;
        cfg.outer.iterations = 15;
        cfg.outer.epochs_per_dataset = 2;
        cfg.outer.learning_rate = 1e-5;
        cfg.predictor.pretrain_epochs = 100;
        cfg.predictor.pretrain_lr = 1e-5;
        cfg.wdro.budget = 0.3;
        cfg.wdro.epochs = 100;
        cfg.kldro.budget = 4.0;
        cfg.kldro.epochs = 100;
        cfg
    }

    /// Desk-scale preset used by the benchmark suite.
    pub fn desk_preset() -> Self {
        Self::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Identity of the evaluation benchmark: data, predictor and noise
    /// sections only, so method and budget sweeps stay comparable.
    pub fn benchmark_id(&self) -> String {
        #[derive(Serialize)]
        struct Ident<'a> {
            data: &'a DataConfig,
            predictor: &'a PredictorConfig,
            noise: &'a NoiseConfig,
        }
        let text = toml::to_string_pretty(&Ident {
            data: &self.data,
            predictor: &self.predictor,
            noise: &self.noise,
        })
        .expect("identity serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex_string(&hasher.finalize())[..16].to_string()
    }

    /// Output directory, honoring the `DDRO_OUTPUT_ROOT` override for
    /// relative paths.
    pub fn resolved_out_dir(&self) -> PathBuf {
        let dir = PathBuf::from(&self.out_dir);
        if dir.is_absolute() {
            return dir;
        }
        match std::env::var_os("DDRO_OUTPUT_ROOT") {
            Some(root) => PathBuf::from(root).join(dir),
            None => dir,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.diffusion;
        if d.steps == 0 {
            return Err(ConfigError::Invalid("diffusion.steps must be positive".into()));
        }
        if !(d.beta_min > 0.0 && d.beta_min <= d.beta_max && d.beta_max < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "diffusion beta bounds must satisfy 0 < min <= max < 1, got [{}, {}]",
                d.beta_min, d.beta_max
            )));
        }
        if d.sigma < 0.0 {
            return Err(ConfigError::Invalid("diffusion.sigma must be non-negative".into()));
        }
        if d.finetune_steps == 0 || d.finetune_steps > d.steps {
            return Err(ConfigError::Invalid(format!(
                "diffusion.finetune_steps must lie in 1..={}, got {}",
                d.steps, d.finetune_steps
            )));
        }
        if d.embed_dim == 0 || d.embed_dim % 2 != 0 {
            return Err(ConfigError::Invalid(
                "diffusion.embed_dim must be positive and even".into(),
            ));
        }
        if d.batch_size == 0 {
            return Err(ConfigError::Invalid("diffusion.batch_size must be positive".into()));
        }
        let i = &self.inner;
        if !(i.kappa > 0.0 && i.kappa < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "inner.kappa must lie in (0,1), got {}",
                i.kappa
            )));
        }
        if i.epsilon <= 0.0 {
            return Err(ConfigError::Invalid("inner.epsilon must be positive".into()));
        }
        if i.eta <= 0.0 {
            return Err(ConfigError::Invalid("inner.eta must be positive".into()));
        }
        if i.mu_init < 0.0 {
            return Err(ConfigError::Invalid("inner.mu_init must be non-negative".into()));
        }
        if i.traj_batch == 0 {
            return Err(ConfigError::Invalid("inner.traj_batch must be positive".into()));
        }
        let o = &self.outer;
        if o.dataset_size == 0 {
            return Err(ConfigError::Invalid("outer.dataset_size must be positive".into()));
        }
        if o.batch_size == 0 {
            return Err(ConfigError::Invalid("outer.batch_size must be positive".into()));
        }
        if o.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid("outer.learning_rate must be positive".into()));
        }
        let p = &self.predictor;
        if p.window == 0 || p.horizon == 0 {
            return Err(ConfigError::Invalid(
                "predictor.window and predictor.horizon must be positive".into(),
            ));
        }
        match self.data.source {
            DataSource::Synthetic => {
                let spec = self.data.synthetic.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("data.synthetic required for synthetic source".into())
                })?;
                spec.validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                for t in &self.data.synthetic_tests {
                    t.spec
                        .validate()
                        .map_err(|e| ConfigError::Invalid(format!("test `{}`: {e}", t.name)))?;
                }
            }
            DataSource::Csv => {
                let path = self.data.train_csv.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("data.train_csv required for csv source".into())
                })?;
                if !Path::new(path).exists() {
                    return Err(ConfigError::Invalid(format!(
                        "train csv `{path}` does not exist"
                    )));
                }
                for t in &self.data.test_csvs {
                    if !Path::new(&t.path).exists() {
                        return Err(ConfigError::Invalid(format!(
                            "test csv `{}` does not exist",
                            t.path
                        )));
                    }
                }
            }
        }
        if self.data.stride == 0 {
            return Err(ConfigError::Invalid("data.stride must be positive".into()));
        }
        for entry in &self.noise.battery {
            entry
                .spec
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            for &level in &entry.levels {
                entry
                    .spec
                    .with_level(level)
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        if self.wdro.budget < 0.0 {
            return Err(ConfigError::Invalid("wdro.budget must be non-negative".into()));
        }
        if self.kldro.budget <= 0.0 {
            return Err(ConfigError::Invalid("kldro.budget must be positive".into()));
        }
        if self.verify.gaussian_var <= 0.0 {
            return Err(ConfigError::Invalid("verify.gaussian_var must be positive".into()));
        }
        Ok(())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn paper_preset_validates() {
        let cfg = ExperimentConfig::paper_preset();
        cfg.validate().unwrap();
        assert_eq!(cfg.diffusion.steps, 500);
        assert_eq!(cfg.inner.epsilon, 0.015);
        assert_eq!(cfg.kldro.budget, 4.0);
    }

    #[test]
    fn out_of_range_kappa_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.inner.kappa = 1.5;
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
        let text = cfg.to_toml();
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "seed = 1\nnonsense = true\n";
        assert!(matches!(
            ExperimentConfig::from_toml_str(text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn benchmark_id_ignores_method_and_budget() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.method = MethodSelect::Ddro;
        b.inner.epsilon = 10.0;
        b.seed = 99;
        assert_eq!(a.benchmark_id(), b.benchmark_id());
        let mut c = a.clone();
        c.predictor.window = 12;
        assert_ne!(a.benchmark_id(), c.benchmark_id());
    }

    #[test]
    fn missing_csv_paths_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.source = DataSource::Csv;
        cfg.data.train_csv = Some("/nonexistent/series.csv".into());
        assert!(cfg.validate().is_err());
    }
}
