//! Experiment runner: TOML run configs, the four run modes, metrics files,
//! multi-run reports, similarity timing and key generation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_idx, pad_dimension, partition, synth_classification_with, synth_decoy_noise,
    synth_noise_with, DataError, Dataset, DecoyShape, NoiseLabelPolicy, NoiseShape, Normalizer,
    PartitionPlan, ShardMap, DEFAULT_SEPARATION,
};
use crate::fixed_point::{FixedPointCodec, DEFAULT_SCALE_BITS};
use crate::ml::{
    evaluate, train_local, Evaluation, MlError, ModelKind, ModelParams, ModelSpec, TrainConfig,
};
use crate::paillier::{
    generate_keypair, PaillierError, PrivateKey, PublicKey, MIN_KEY_BITS, PAPER_KEY_BITS,
};
use crate::protocol::{
    derive_seed, run_training, Adversary, Aggregation, PartySeeds, PlateauRule, ProtocolError,
    RunReport, RunSetup, ThresholdSchedule, INITIATOR_ID,
};
use crate::similarity::{
    blind_component, compute_blinded_score, encrypt_component, normalize_weights, BlindedComponent,
    BlindingFactor, SimilarityError, DEFAULT_BLIND_BITS,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_KEY_BITS: u32 = 256;
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const PUBLIC_KEY_FILE: &str = "public.key";
pub const PRIVATE_KEY_FILE: &str = "private.key";
pub const NA: &str = "NA";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Paillier(#[from] PaillierError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Codec(#[from] crate::fixed_point::CodecError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn field(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Field {
        path: path.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Filtered,
    /// Same protocol with the threshold disabled.
    Nofilter,
    /// One model on every party's clean training data, no encryption.
    Centralized,
    /// One model on the initiator's data alone.
    Standalone,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Filtered => "filtered",
            Mode::Nofilter => "nofilter",
            Mode::Centralized => "centralized",
            Mode::Standalone => "standalone",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        [
            Mode::Filtered,
            Mode::Nofilter,
            Mode::Centralized,
            Mode::Standalone,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
    }

    fn uses_protocol(self) -> bool {
        matches!(self, Mode::Filtered | Mode::Nofilter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub crypto: u64,
}

impl Seeds {
    /// Splits one seed into the three purpose-specific seeds.
    pub fn from_single(seed: u64) -> Self {
        Seeds {
            data: derive_seed(seed, 1),
            init: derive_seed(seed, 2),
            crypto: derive_seed(seed, 3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Class-centre distance for synthetic data.
    pub separation: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            separation: DEFAULT_SEPARATION,
            images: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Out-of-distribution clusters labelled as a neighbouring clean class.
    #[default]
    Decoy,
    /// Shifted clusters with labels chosen by `label_policy`.
    Disjoint,
    /// Samples from a supplied IDX file pair, zero-padded to the clean dimension.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub gain: f64,
    pub offset: f64,
    pub shift: f64,
    pub spread: f64,
    pub scale: f64,
    pub label_policy: NoiseLabelPolicy,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let decoy = DecoyShape::default();
        let disjoint = NoiseShape::default();
        NoiseConfig {
            kind: NoiseKind::Decoy,
            gain: decoy.gain,
            offset: decoy.offset,
            shift: disjoint.shift,
            spread: disjoint.spread,
            scale: decoy.scale,
            label_policy: disjoint.policy,
            images: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryKind {
    RandomWeights,
    Silent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    pub party: u32,
    pub kind: AdversaryKind,
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyConfig {
    /// Private key file written by `keygen`; overrides generation from the crypto seed.
    pub private: PathBuf,
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingRunConfig {
    pub mode: Mode,
    pub max_rounds: u32,
    pub key_bits: u32,
    pub scale_bits: u32,
    pub blind_bits: u32,
    pub literal_eq9: bool,
    pub barrier_timeout_secs: f64,
    pub seeds: Seeds,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub noise: NoiseConfig,
    pub partition: PartitionPlan,
    pub threshold: ThresholdSchedule,
    pub plateau: Option<PlateauRule>,
    pub adversaries: Vec<AdversaryConfig>,
    pub keys: Option<KeyConfig>,
}

impl Default for TrainingRunConfig {
    /// The desk-scale noisy setup: a 4-class 20-feature logistic task, an
    /// initiator, two reliable participants and one half-noise participant.
    fn default() -> Self {
        TrainingRunConfig {
            mode: Mode::Filtered,
            max_rounds: 150,
            key_bits: DEFAULT_KEY_BITS,
            scale_bits: DEFAULT_SCALE_BITS,
            blind_bits: DEFAULT_BLIND_BITS,
            literal_eq9: false,
            barrier_timeout_secs: 600.0,
            seeds: Seeds {
                data: 1,
                init: 2,
                crypto: 3,
            },
            model: ModelSpec::logistic(20, 4),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            noise: NoiseConfig::default(),
            partition: PartitionPlan::default(),
            threshold: ThresholdSchedule::Fixed { value: 0.9 },
            plateau: None,
            adversaries: Vec::new(),
            keys: None,
        }
    }
}

impl TrainingRunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingRunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_bits < MIN_KEY_BITS || !self.key_bits.is_multiple_of(2) {
            return Err(field(
                "key_bits",
                format!("must be an even number of at least {MIN_KEY_BITS}"),
            ));
        }
        if self.scale_bits == 0 || self.scale_bits > 256 {
            return Err(field("scale_bits", "must be in 1..=256"));
        }
        if !(2..=62).contains(&self.blind_bits) {
            return Err(field("blind_bits", "must be in 2..=62"));
        }
        if !(self.barrier_timeout_secs > 0.0 && self.barrier_timeout_secs.is_finite()) {
            return Err(field("barrier_timeout_secs", "must be positive"));
        }
        self.model
            .validate()
            .map_err(|e| field("model", e.to_string()))?;
        if !(self.model.leaky_slope > 0.0 && self.model.leaky_slope < 1.0) {
            return Err(field("model.leaky_slope", "must lie in (0, 1)"));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(field("train.learning_rate", "must be positive"));
        }
        if self.train.batch_size == 0 {
            return Err(field("train.batch_size", "must be positive"));
        }
        if self.train.local_epochs == 0 {
            return Err(field("train.local_epochs", "must be positive"));
        }
        match self.data.source {
            DataSource::Synthetic
                if (self.data.separation.is_nan() || self.data.separation <= 0.0) =>
            {
                return Err(field("data.separation", "must be positive"));
            }
            DataSource::Idx if self.data.images.is_none() => {
                return Err(field("data.images", "required when data.source = \"idx\""));
            }
            DataSource::Idx if self.data.labels.is_none() => {
                return Err(field("data.labels", "required when data.source = \"idx\""));
            }
            _ => {}
        }
        if self.noise.kind == NoiseKind::Idx {
            if self.noise.images.is_none() {
                return Err(field("noise.images", "required when noise.kind = \"idx\""));
            }
            if self.noise.labels.is_none() {
                return Err(field("noise.labels", "required when noise.kind = \"idx\""));
            }
        }
        if self.noise.scale.is_nan() || self.noise.scale <= 0.0 {
            return Err(field("noise.scale", "must be positive"));
        }
        let p = &self.partition;
        if p.initiator_size == 0 {
            return Err(field("partition.initiator_size", "must be positive"));
        }
        if p.rp_count > 0 && p.rp_size == 0 {
            return Err(field(
                "partition.rp_size",
                "must be positive when rp_count > 0",
            ));
        }
        if p.up_count > 0 && p.up_clean_size + p.up_noise_size == 0 {
            return Err(field(
                "partition.up_clean_size",
                "unreliable participants need training data",
            ));
        }
        self.threshold
            .validate()
            .map_err(|e| field("threshold", e.to_string()))?;
        if let Some(rule) = &self.plateau {
            if rule.patience == 0 {
                return Err(field("plateau.patience", "must be positive"));
            }
            if rule.min_delta.is_nan() || rule.min_delta < 0.0 {
                return Err(field("plateau.min_delta", "must be nonnegative"));
            }
        }
        let participants = p.rp_count + p.up_count;
        for (i, a) in self.adversaries.iter().enumerate() {
            if a.party == INITIATOR_ID || a.party as usize > participants {
                return Err(field(
                    &format!("adversaries[{i}].party"),
                    format!("must name a participant in 1..={participants}"),
                ));
            }
            if a.kind == AdversaryKind::RandomWeights && !a.scale.is_some_and(|s| s > 0.0) {
                return Err(field(
                    &format!("adversaries[{i}].scale"),
                    "random_weights needs a positive scale",
                ));
            }
        }
        if self.mode.uses_protocol() {
            let n = num_bigint::BigUint::from(1u32) << (self.key_bits - 1);
            FixedPointCodec::new(&n, self.scale_bits)
                .and_then(|c| c.check_similarity_budget(self.model.param_count(), self.blind_bits))
                .map_err(|e| field("scale_bits", e.to_string()))?;
        }
        Ok(())
    }

    pub fn adversary_map(&self) -> BTreeMap<u32, Adversary> {
        self.adversaries
            .iter()
            .map(|a| {
                let behaviour = match a.kind {
                    AdversaryKind::RandomWeights => Adversary::RandomWeights {
                        scale: a.scale.unwrap_or(1.0),
                    },
                    AdversaryKind::Silent => Adversary::Silent,
                };
                (a.party, behaviour)
            })
            .collect()
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paper_keys: bool,
    pub mode: Option<Mode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainingRunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_single(s);
        }
        if self.paper_keys {
            cfg.key_bits = PAPER_KEY_BITS;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.validate()
    }
}

/// Builds the normalized clean and noise sources and partitions them.
pub fn build_shards(cfg: &TrainingRunConfig) -> Result<ShardMap> {
    let plan = &cfg.partition;
    let (dim, classes) = (cfg.model.input_dim, cfg.model.num_classes);
    let clean = match cfg.data.source {
        DataSource::Synthetic => synth_classification_with(
            plan.clean_total(),
            dim,
            classes,
            cfg.seeds.data,
            cfg.data.separation,
        ),
        DataSource::Idx => load_idx(
            cfg.data.images.as_deref().expect("validated"),
            cfg.data.labels.as_deref().expect("validated"),
        )?,
    };
    if clean.input_dim() != dim {
        return Err(field(
            "model.input_dim",
            format!("data has {} features", clean.input_dim()),
        ));
    }
    if clean.class_count() > classes {
        return Err(field(
            "model.num_classes",
            format!("data has {} classes", clean.class_count()),
        ));
    }
    let noise_seed = derive_seed(cfg.seeds.data, 1);
    let noise = match cfg.noise.kind {
        NoiseKind::Decoy => synth_decoy_noise(
            plan.noise_total(),
            &clean,
            &DecoyShape {
                gain: cfg.noise.gain,
                offset: cfg.noise.offset,
                scale: cfg.noise.scale,
            },
            noise_seed,
        )?,
        NoiseKind::Disjoint => synth_noise_with(
            plan.noise_total(),
            dim,
            classes,
            noise_seed,
            &NoiseShape {
                shift: cfg.noise.shift,
                spread: cfg.noise.spread,
                scale: cfg.noise.scale,
                policy: cfg.noise.label_policy,
            },
        ),
        NoiseKind::Idx => {
            let raw = load_idx(
                cfg.noise.images.as_deref().expect("validated"),
                cfg.noise.labels.as_deref().expect("validated"),
            )?;
            pad_dimension(&raw, dim)?
        }
    };
    let norm = Normalizer::fit(&clean)?;
    let clean = norm.apply(&clean)?;
    let noise = norm.apply(&noise)?;
    Ok(partition(
        &clean,
        &noise,
        plan,
        derive_seed(cfg.seeds.data, 2),
    )?)
}

/// Loads the configured private key, or derives one from the crypto seed.
pub fn run_keys(cfg: &TrainingRunConfig) -> Result<PrivateKey> {
    match &cfg.keys {
        Some(k) => {
            let bytes = fs::read(&k.private).map_err(io_err(&k.private))?;
            let sk = PrivateKey::from_bytes(&bytes)?;
            if sk.key_bits() != cfg.key_bits {
                return Err(field(
                    "keys.private",
                    format!(
                        "key has {} bits, key_bits is {}",
                        sk.key_bits(),
                        cfg.key_bits
                    ),
                ));
            }
            Ok(sk)
        }
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seeds.crypto, 0));
            Ok(generate_keypair(cfg.key_bits, &mut rng)?.1)
        }
    }
}

pub fn run_setup(cfg: &TrainingRunConfig, shards: ShardMap, sk: PrivateKey) -> RunSetup {
    RunSetup {
        spec: cfg.model.clone(),
        train: cfg.train.clone(),
        shards,
        sk,
        scale_bits: cfg.scale_bits,
        blind_bits: cfg.blind_bits,
        schedule: match cfg.mode {
            Mode::Nofilter => ThresholdSchedule::Disabled,
            _ => cfg.threshold.clone(),
        },
        max_rounds: cfg.max_rounds,
        plateau: cfg.plateau,
        init_seed: cfg.seeds.init,
        crypto_seed: cfg.seeds.crypto,
        aggregation: if cfg.literal_eq9 {
            Aggregation::ModularInverse
        } else {
            Aggregation::Sum
        },
        adversaries: cfg.adversary_map(),
        barrier_timeout: Duration::from_secs_f64(cfg.barrier_timeout_secs),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRound {
    pub round: u32,
    pub eval: Evaluation,
}

/// Plain single-model training; one round is `local_epochs` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub initial: Evaluation,
    pub rounds: Vec<BaselineRound>,
    pub stopped_early: bool,
}

/// Trains the centralized or standalone baseline from the same `W_init` and
/// training seed the initiator uses in the protocol.
pub fn run_baseline(cfg: &TrainingRunConfig, shards: &ShardMap) -> Result<BaselineReport> {
    let data = match cfg.mode {
        Mode::Centralized => shards.pooled_clean_train()?,
        Mode::Standalone => shards.initiator().train.clone(),
        m => {
            return Err(field(
                "mode",
                format!("{} is not a baseline mode", m.as_str()),
            ))
        }
    };
    let eval_set = shards.pooled_clean_test()?;
    let spec = &cfg.model;
    let mut init_rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seeds.init, 0));
    let mut params = ModelParams::init(spec, &mut init_rng);
    let seeds = PartySeeds::derive(cfg.seeds.init, cfg.seeds.crypto, INITIATOR_ID);
    let mut rng = ChaCha20Rng::seed_from_u64(seeds.train);
    let initial = evaluate(spec, &params, &eval_set)?;
    let mut rounds = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    let own_test = &shards.initiator().test;
    for round in 1..=cfg.max_rounds {
        params = train_local(spec, &params, &data, &cfg.train, &mut rng)?;
        let eval = evaluate(spec, &params, &eval_set)?;
        rounds.push(BaselineRound { round, eval });
        if let Some(rule) = cfg.plateau {
            let err = if own_test.is_empty() {
                eval.test_error
            } else {
                evaluate(spec, &params, own_test)?.test_error
            };
            if err < best - rule.min_delta {
                best = err;
                stale = 0;
            } else {
                stale += 1;
                if stale >= rule.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(BaselineReport {
        initial,
        rounds,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Protocol(RunReport),
    Baseline(BaselineReport),
}

impl RunOutcome {
    pub fn final_evaluation(&self) -> Evaluation {
        match self {
            RunOutcome::Protocol(r) => r.final_evaluation(),
            RunOutcome::Baseline(b) => b.rounds.last().map_or(b.initial, |r| r.eval),
        }
    }

    pub fn rounds_completed(&self) -> usize {
        match self {
            RunOutcome::Protocol(r) => r.rounds.len(),
            RunOutcome::Baseline(b) => b.rounds.len(),
        }
    }

    pub fn stopped_early(&self) -> bool {
        match self {
            RunOutcome::Protocol(r) => r.stopped_early,
            RunOutcome::Baseline(b) => b.stopped_early,
        }
    }
}

pub fn execute(cfg: &TrainingRunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let shards = build_shards(cfg)?;
    if cfg.mode.uses_protocol() {
        let sk = run_keys(cfg)?;
        Ok(RunOutcome::Protocol(run_training(&run_setup(
            cfg, shards, sk,
        ))?))
    } else {
        Ok(RunOutcome::Baseline(run_baseline(cfg, &shards)?))
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub party_id: String,
    pub similarity: Option<f64>,
    pub included: Option<bool>,
    pub test_error: f64,
    pub accuracy: f64,
    pub threshold: Option<f64>,
}

pub const METRICS_COLUMNS: [&str; 7] = [
    "round",
    "party_id",
    "similarity",
    "included",
    "test_error",
    "accuracy",
    "threshold",
];

/// Label of the pooled clean-test evaluation row.
pub const GLOBAL_ROW: &str = "global";

/// Per round: one row per party (the global model on that party's test
/// shard, plus the party's similarity and inclusion) and one `global` row.
pub fn metrics_rows(outcome: &RunOutcome) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    match outcome {
        RunOutcome::Protocol(report) => {
            for r in &report.rounds {
                for p in &r.parties {
                    let score = r.scores.iter().find(|s| s.party_id == p.party_id);
                    rows.push(MetricsRow {
                        round: r.round,
                        party_id: p.label.clone(),
                        similarity: score.and_then(|s| s.score),
                        included: Some(score.map_or(p.party_id == INITIATOR_ID, |s| s.included())),
                        test_error: p.test_error,
                        accuracy: p.accuracy,
                        threshold: Some(r.threshold),
                    });
                }
                rows.push(MetricsRow {
                    round: r.round,
                    party_id: GLOBAL_ROW.to_string(),
                    similarity: None,
                    included: None,
                    test_error: r.pooled.test_error,
                    accuracy: r.pooled.accuracy,
                    threshold: Some(r.threshold),
                });
            }
        }
        RunOutcome::Baseline(b) => {
            for r in &b.rounds {
                rows.push(MetricsRow {
                    round: r.round,
                    party_id: GLOBAL_ROW.to_string(),
                    similarity: None,
                    included: None,
                    test_error: r.eval.test_error,
                    accuracy: r.eval.accuracy,
                    threshold: None,
                });
            }
        }
    }
    rows
}

pub fn write_metrics<W: std::io::Write>(
    mut out: W,
    cfg: &TrainingRunConfig,
    rows: &[MetricsRow],
) -> Result<()> {
    writeln!(out, "# schema_version={SCHEMA_VERSION}").map_err(csv::Error::from)?;
    writeln!(out, "# mode={}", cfg.mode.as_str()).map_err(csv::Error::from)?;
    writeln!(out, "# scale_bits={}", cfg.scale_bits).map_err(csv::Error::from)?;
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartySummary {
    pub party_id: String,
    pub mean_similarity: Option<f64>,
    pub rounds_included: usize,
    pub rounds_excluded: usize,
    pub rounds_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub mode: Mode,
    pub rounds_completed: usize,
    pub stopped_early: bool,
    pub final_accuracy: f64,
    pub final_test_error: f64,
    pub participants: Vec<PartySummary>,
    pub config: TrainingRunConfig,
}

pub fn summarize(cfg: &TrainingRunConfig, outcome: &RunOutcome) -> RunSummary {
    let fin = outcome.final_evaluation();
    let mut participants = Vec::new();
    if let RunOutcome::Protocol(report) = outcome {
        let mut by_party: BTreeMap<u32, (String, Vec<f64>, [usize; 3])> = BTreeMap::new();
        let labels: BTreeMap<u32, String> = report
            .rounds
            .first()
            .map(|r| {
                r.parties
                    .iter()
                    .map(|p| (p.party_id, p.label.clone()))
                    .collect()
            })
            .unwrap_or_default();
        for r in &report.rounds {
            for s in &r.scores {
                let e = by_party.entry(s.party_id).or_insert_with(|| {
                    let label = labels
                        .get(&s.party_id)
                        .cloned()
                        .unwrap_or_else(|| s.party_id.to_string());
                    (label, Vec::new(), [0; 3])
                });
                if let Some(v) = s.score {
                    e.1.push(v);
                }
                e.2[match s.status {
                    crate::protocol::ScoreStatus::Included => 0,
                    crate::protocol::ScoreStatus::Excluded => 1,
                    crate::protocol::ScoreStatus::Dropped => 2,
                }] += 1;
            }
        }
        participants = by_party
            .into_values()
            .map(|(party_id, scores, counts)| PartySummary {
                party_id,
                mean_similarity: (!scores.is_empty())
                    .then(|| scores.iter().sum::<f64>() / scores.len() as f64),
                rounds_included: counts[0],
                rounds_excluded: counts[1],
                rounds_dropped: counts[2],
            })
            .collect();
    }
    RunSummary {
        schema_version: SCHEMA_VERSION,
        mode: cfg.mode,
        rounds_completed: outcome.rounds_completed(),
        stopped_early: outcome.stopped_early(),
        final_accuracy: fin.accuracy,
        final_test_error: fin.test_error,
        participants,
        config: cfg.clone(),
    }
}

/// Wall-clock columns kept apart from the deterministic metrics.
pub fn write_timings<W: std::io::Write>(out: W, outcome: &RunOutcome) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "initiator_train",
        "initiator_encrypt",
        "initiator_similarity",
        "participant_train",
        "participant_similarity",
        "server_blinding",
        "round_total",
    ])?;
    if let RunOutcome::Protocol(report) = outcome {
        for r in &report.rounds {
            let t = &r.timings;
            w.write_record([
                r.round.to_string(),
                t.initiator_train.to_string(),
                t.initiator_encrypt.to_string(),
                t.initiator_similarity.to_string(),
                t.participant_train.to_string(),
                t.participant_similarity.to_string(),
                t.server_blinding.to_string(),
                t.round_total.to_string(),
            ])?;
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes `metrics.csv`, `summary.json` and `timings.csv` into `out_dir`.
pub fn write_outputs(
    out_dir: &Path,
    cfg: &TrainingRunConfig,
    outcome: &RunOutcome,
) -> Result<RunSummary> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut buf = Vec::new();
    write_metrics(&mut buf, cfg, &metrics_rows(outcome))?;
    fs::write(&metrics_path, buf).map_err(io_err(&metrics_path))?;

    let summary = summarize(cfg, outcome);
    let summary_path = out_dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary)?;
    fs::write(&summary_path, json + "\n").map_err(io_err(&summary_path))?;

    let timings_path = out_dir.join(TIMINGS_FILE);
    let mut buf = Vec::new();
    write_timings(&mut buf, outcome)?;
    fs::write(&timings_path, buf).map_err(io_err(&timings_path))?;
    Ok(summary)
}

/// A parsed metrics file with every field kept as its original text.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub name: String,
    pub schema_version: u32,
    pub comments: Vec<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsFile {
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut comments = Vec::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim().to_string());
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let schema_version = comments
            .iter()
            .find_map(|c| c.strip_prefix("schema_version="))
            .ok_or_else(|| HarnessError::Format(format!("{name}: missing schema_version header")))?
            .parse()
            .map_err(|_| HarnessError::Format(format!("{name}: unreadable schema_version")))?;
        let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != METRICS_COLUMNS {
            return Err(HarnessError::Format(format!(
                "{name}: unexpected columns {header:?}"
            )));
        }
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>>>()?;
        Ok(MetricsFile {
            name: name.to_string(),
            schema_version,
            comments,
            header,
            rows,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map_or_else(
                || path.display().to_string(),
                |s| s.to_string_lossy().into_owned(),
            );
        Self::parse(&name, &text)
    }

    fn rounds(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self.rows.iter().filter_map(|r| r[0].parse().ok()).collect();
        out.dedup();
        out
    }

    fn cell(&self, round: u32, party: &str, column: usize) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r[0] == round.to_string() && r[1] == party)
            .map(|r| r[column].as_str())
    }
}

/// Runs aligned by round. `series` keeps every source row verbatim with a
/// leading run column, padding rounds a run lacks with `NA`; `comparison`
/// holds one row per round with each run's global accuracy and test error.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub series_header: Vec<String>,
    pub series: Vec<Vec<String>>,
    pub comparison_header: Vec<String>,
    pub comparison: Vec<Vec<String>>,
}

pub fn build_report(files: &[MetricsFile]) -> Result<Report> {
    let first = files
        .first()
        .ok_or_else(|| HarnessError::Format("report needs at least one metrics file".into()))?;
    if let Some(bad) = files
        .iter()
        .find(|f| f.schema_version != first.schema_version)
    {
        return Err(HarnessError::Format(format!(
            "schema version mismatch: {} has {}, {} has {}",
            first.name, first.schema_version, bad.name, bad.schema_version
        )));
    }
    if first.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported schema version {}",
            first.schema_version
        )));
    }
    let mut all_rounds: Vec<u32> = files.iter().flat_map(MetricsFile::rounds).collect();
    all_rounds.sort_unstable();
    all_rounds.dedup();

    let mut series_header = vec!["run".to_string()];
    series_header.extend(first.header.iter().cloned());
    let mut series = Vec::new();
    for f in files {
        let mut parties: Vec<&str> = Vec::new();
        for r in &f.rows {
            if !parties.contains(&r[1].as_str()) {
                parties.push(&r[1]);
            }
        }
        let have: Vec<u32> = f.rounds();
        for &round in &all_rounds {
            if have.contains(&round) {
                for r in f.rows.iter().filter(|r| r[0] == round.to_string()) {
                    let mut row = vec![f.name.clone()];
                    row.extend(r.iter().cloned());
                    series.push(row);
                }
            } else {
                for p in &parties {
                    let mut row = vec![f.name.clone(), round.to_string(), p.to_string()];
                    row.extend(std::iter::repeat_n(NA.to_string(), 5));
                    series.push(row);
                }
            }
        }
    }

    let mut comparison_header = vec!["round".to_string()];
    for f in files {
        comparison_header.push(format!("{}:accuracy", f.name));
        comparison_header.push(format!("{}:test_error", f.name));
    }
    let comparison = all_rounds
        .iter()
        .map(|&round| {
            let mut row = vec![round.to_string()];
            for f in files {
                for col in [5, 4] {
                    row.push(f.cell(round, GLOBAL_ROW, col).unwrap_or(NA).to_string());
                }
            }
            row
        })
        .collect();
    Ok(Report {
        series_header,
        series,
        comparison_header,
        comparison,
    })
}

pub fn write_table<W: std::io::Write>(
    out: W,
    header: &[String],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Fixed-width text rendering of a table for terminals.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header);
    for r in rows {
        line(r);
    }
    out
}

/// Mean seconds per entity for one similarity computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub key_bits: u32,
    pub param_count: usize,
    pub repetitions: usize,
    pub initiator: f64,
    pub participant: f64,
    pub server: f64,
}

impl TimingReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn render(&self) -> String {
        let header = vec!["Entity".to_string(), "Seconds".to_string()];
        let rows = vec![
            vec![
                "Model Initiator".to_string(),
                format!("{:.4}", self.initiator),
            ],
            vec![
                "Participant".to_string(),
                format!("{:.4}", self.participant),
            ],
            vec!["Server".to_string(), format!("{:.4}", self.server)],
        ];
        format!(
            "Run time for weight similarity computation ({} parameters, {}-bit keys, mean of {})\n{}",
            self.param_count,
            self.key_bits,
            self.repetitions,
            render_table(&header, &rows)
        )
    }
}

/// Times the similarity steps of one round: the initiator encrypting its
/// component, the server blinding it, and a participant forming and
/// decrypting the blinded score. Weights come from one round of local training.
pub fn measure_timing(cfg: &TrainingRunConfig, repetitions: usize) -> Result<TimingReport> {
    cfg.validate()?;
    let shards = build_shards(cfg)?;
    let sk = run_keys(cfg)?;
    let pk: PublicKey = sk.public_key();
    let codec = FixedPointCodec::for_key(&pk, cfg.scale_bits)?;
    let spec = &cfg.model;
    let mut init_rng = ChaCha20Rng::seed_from_u64(derive_seed(cfg.seeds.init, 0));
    let w_init = ModelParams::init(spec, &mut init_rng);
    let seeds = PartySeeds::derive(cfg.seeds.init, cfg.seeds.crypto, INITIATOR_ID);
    let mut rng = ChaCha20Rng::seed_from_u64(seeds.train);
    let w_o = train_local(
        spec,
        &w_init,
        &shards.initiator().train,
        &cfg.train,
        &mut rng,
    )?;
    let participant = shards
        .participants()
        .first()
        .map_or(&shards.initiator().train, |p| &p.train);
    let w_p = train_local(spec, &w_init, participant, &cfg.train, &mut rng)?;
    let w_so = normalize_weights(w_o.as_slice())?;
    let w_sp = normalize_weights(w_p.as_slice())?;
    let mut crypto = ChaCha20Rng::seed_from_u64(seeds.crypto);

    let reps = repetitions.max(1);
    let (mut ti, mut tp, mut ts) = (0.0, 0.0, 0.0);
    for _ in 0..reps {
        let t = Instant::now();
        let enc = encrypt_component(&pk, &w_so, &codec, &mut crypto)?;
        ti += t.elapsed().as_secs_f64();

        let l = BlindingFactor::sample(cfg.blind_bits, &mut crypto)?;
        let t = Instant::now();
        let blinded: BlindedComponent = blind_component(&pk, &enc, &l)?;
        ts += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let c = compute_blinded_score(&pk, &blinded, &w_sp, &codec)?;
        let _score = codec.decode(&sk.decrypt(&c)?, 2)?;
        tp += t.elapsed().as_secs_f64();
    }
    let n = reps as f64;
    Ok(TimingReport {
        key_bits: cfg.key_bits,
        param_count: spec.param_count(),
        repetitions: reps,
        initiator: ti / n,
        participant: tp / n,
        server: ts / n,
    })
}

/// Writes `public.key` and `private.key` for a seeded keypair.
pub fn keygen(key_bits: u32, seed: u64, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (pk, sk) = generate_keypair(key_bits, &mut rng)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let public = out_dir.join(PUBLIC_KEY_FILE);
    let private = out_dir.join(PRIVATE_KEY_FILE);
    fs::write(&public, pk.to_bytes()).map_err(io_err(&public))?;
    let mut f = fs::File::create(&private).map_err(io_err(&private))?;
    f.write_all(&sk.to_bytes()).map_err(io_err(&private))?;
    Ok((public, private))
}

/// Short description of a model for log lines.
pub fn describe_model(spec: &ModelSpec) -> String {
    match spec.kind {
        ModelKind::Logistic => format!(
            "logistic {}x{} ({} params)",
            spec.input_dim,
            spec.num_classes,
            spec.param_count()
        ),
        ModelKind::Mlp => {
            let widths: Vec<String> = spec
                .hidden_layers
                .iter()
                .map(|h| h.width.to_string())
                .collect();
            format!(
                "mlp {}-{}-{} ({} params)",
                spec.input_dim,
                widths.join("-"),
                spec.num_classes,
                spec.param_count()
            )
        }
    }
}

/// Dataset shapes of every shard, for log lines.
pub fn describe_shards(shards: &ShardMap) -> String {
    shards
        .parties
        .iter()
        .map(|p: &crate::data::PartyShard| {
            let d: &Dataset = &p.train;
            format!("{}:{}+{}", p.label(), d.len(), p.test.len())
        })
        .collect::<Vec<_>>()
        .join(" ")
}
