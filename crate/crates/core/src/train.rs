//! Training configuration, the epoch loop, early stopping and run outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{build_batch, DataError, SplitPart, SplitStore};
use crate::eval::{evaluate, EvalError, EvalResult, MetricRow, DEFAULT_KS};
use crate::model::{ModelError, PrpModel, Thetas};
use crate::step::{forward_backward, plan_step, StepError, StepOptions, StepOutput};
use crate::tensor::{adam_step, AdamConfig, TensorError};

pub const SEED_ENV: &str = "PRP_SEED";
pub const EARLY_STOP_K: usize = 10;
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DIAGNOSTIC_DIR: &str = "diagnostic";
pub const TELEMETRY_HEADER: &str = "epoch,step,rank_loss,lp_loss,total_loss,mean_alpha,alpha_hist";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Prp,
    Bpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_ranker: bool,
    pub no_lp: bool,
    pub no_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embedding_dim: usize,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub k: usize,
    pub beta: f64,
    pub thetas: [f64; 3],
    pub bins: usize,
    pub epochs: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub ablations: Ablations,
    pub confidence_on_lp: bool,
    pub pin_positive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embedding_dim: 64,
            lr: 1e-3,
            l2: 1e-4,
            batch_size: 1024,
            k: 4,
            beta: 0.3,
            thetas: [0.0, 0.01, 0.1],
            bins: 10,
            epochs: 100,
            eval_every: 1,
            patience: 10,
            seed: 2024,
            loss_mode: LossMode::Prp,
            ablations: Ablations::default(),
            confidence_on_lp: true,
            pin_positive: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("epoch {epoch} step {step}: {source}{}", diagnostic_note(.diagnostic))]
    Step {
        epoch: usize,
        step: usize,
        source: StepError,
        diagnostic: Option<PathBuf>,
    },
    #[error("epoch {epoch} step {step}: {source}{}", diagnostic_note(.diagnostic))]
    Optimizer {
        epoch: usize,
        step: usize,
        source: TensorError,
        diagnostic: Option<PathBuf>,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn diagnostic_note(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => format!(" (model state saved to {})", p.display()),
        None => String::new(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

impl TrainConfig {
    /// Parses a JSON config; missing fields take defaults, unknown fields
    /// are rejected.
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the `PRP_SEED` environment override.
    pub fn with_env_overrides(mut self) -> Result<Self, TrainError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| TrainError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.embedding_dim == 0 {
            return fail("embedding_dim must be >= 1".into());
        }
        if !(2..=10).contains(&self.k) {
            return fail(format!("k must lie in [2, 10], got {}", self.k));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return fail("lr and l2 must be finite and >= 0".into());
        }
        if self.batch_size == 0 || self.bins == 0 || self.eval_every == 0 {
            return fail("batch_size, bins and eval_every must be >= 1".into());
        }
        Thetas::new(self.thetas).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Ranking length actually trained with (BPR always uses pairs).
    pub fn effective_k(&self) -> usize {
        match self.loss_mode {
            LossMode::Bpr => 2,
            LossMode::Prp => self.k,
        }
    }

    pub fn step_options(&self) -> Result<StepOptions, TrainError> {
        let thetas = Thetas::new(self.thetas).map_err(|e| TrainError::Config(e.to_string()))?;
        let base = StepOptions {
            beta: self.beta,
            thetas,
            bins: self.bins,
            pin_positive: self.pin_positive,
            ..StepOptions::default()
        };
        Ok(match self.loss_mode {
            LossMode::Bpr => StepOptions {
                use_ranker: false,
                use_lp: false,
                confidence_main: false,
                confidence_lp: false,
                pin_positive: true,
                ..base
            },
            LossMode::Prp => StepOptions {
                use_ranker: !self.ablations.no_ranker,
                use_lp: !self.ablations.no_lp,
                confidence_main: !self.ablations.no_confidence,
                confidence_lp: !self.ablations.no_confidence && self.confidence_on_lp,
                ..base
            },
        })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            l2: self.l2,
            ..AdamConfig::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One CSV row per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub epoch: usize,
    pub step: usize,
    pub rank_loss: f64,
    pub lp_loss: f64,
    pub total_loss: f64,
    pub mean_alpha: f64,
    pub alpha_hist: Vec<usize>,
}

impl TelemetryRow {
    fn from_step(epoch: usize, step: usize, out: &StepOutput) -> Self {
        TelemetryRow {
            epoch,
            step,
            rank_loss: out.rank_loss,
            lp_loss: out.lp_loss,
            total_loss: out.total_loss,
            mean_alpha: out.mean_alpha(),
            alpha_hist: out.main_profile.as_ref().map(|p| p.counts.clone()).unwrap_or_default(),
        }
    }

    pub fn to_csv(&self) -> String {
        let hist: Vec<String> = self.alpha_hist.iter().map(usize::to_string).collect();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.rank_loss,
            self.lp_loss,
            self.total_loss,
            self.mean_alpha,
            hist.join(";")
        )
    }
}

/// Per-epoch summary; wall time makes it non-deterministic, so it is kept
/// out of the files compared for reproducibility.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_rank_loss: f64,
    pub mean_lp_loss: f64,
    pub mean_total_loss: f64,
    pub valid_ndcg: Option<f64>,
    pub seconds: f64,
}

/// Training state: the model, the three RNG streams and step counters.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub store: &'a SplitStore,
    pub model: PrpModel,
    opts: StepOptions,
    adam: AdamConfig,
    sampling: ChaCha8Rng,
    noise: ChaCha8Rng,
    pub epoch: usize,
    pub global_step: usize,
}

const INIT_STREAM: u64 = 0;
const SAMPLING_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, store: &'a SplitStore) -> Result<Self, TrainError> {
        config.validate()?;
        if config.effective_k() > store.n_items() {
            return Err(TrainError::Config(format!(
                "k={} exceeds the item count {}",
                config.effective_k(),
                store.n_items()
            )));
        }
        let mut model = PrpModel::new(store.n_users(), store.n_items(), config.embedding_dim)?;
        model.init_xavier(&mut stream(config.seed, INIT_STREAM))?;
        Ok(Trainer {
            opts: config.step_options()?,
            adam: config.adam(),
            sampling: stream(config.seed, SAMPLING_STREAM),
            noise: stream(config.seed, NOISE_STREAM),
            config,
            store,
            model,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn step_options(&self) -> &StepOptions {
        &self.opts
    }

    /// One pass over a shuffled permutation of the train pairs in chunks of
    /// `batch_size`, one Adam step per chunk.
    pub fn train_epoch(&mut self, sink: &mut dyn FnMut(&TelemetryRow)) -> Result<Vec<TelemetryRow>, TrainError> {
        self.epoch += 1;
        let k = self.config.effective_k();
        let mut pairs = self.store.train_pairs().to_vec();
        pairs.shuffle(&mut self.sampling);
        let mut rows = Vec::new();
        for (step, chunk) in pairs.chunks(self.config.batch_size).enumerate() {
            let batch = match build_batch(self.store, chunk, k, &mut self.sampling) {
                Ok(b) => b,
                Err(DataError::BatchUnformable { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let (epoch, step) = (self.epoch, step + 1);
            let plan = plan_step(&self.model, &batch, &self.opts, &mut self.sampling, &mut self.noise)
                .map_err(|source| TrainError::Step {
                    epoch,
                    step,
                    source,
                    diagnostic: None,
                })?;
            self.model.params.zero_grad();
            let out = forward_backward(&mut self.model, &plan, &self.opts, None).map_err(|source| TrainError::Step {
                epoch,
                step,
                source,
                diagnostic: None,
            })?;
            adam_step(&mut self.model.params, &self.adam).map_err(|source| TrainError::Optimizer {
                epoch,
                step,
                source,
                diagnostic: None,
            })?;
            self.global_step += 1;
            let row = TelemetryRow::from_step(epoch, step, &out);
            sink(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the best validation epoch.
    pub model: PrpModel,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub valid: EvalResult,
    pub test: EvalResult,
    pub history: Vec<EpochRecord>,
    pub telemetry: Vec<TelemetryRow>,
}

impl FitResult {
    pub fn metric_rows(&self, seed: u64) -> Vec<MetricRow> {
        let mut rows = self.valid.rows(seed, self.best_epoch);
        rows.extend(self.test.rows(seed, self.best_epoch));
        rows
    }
}

fn valid_ndcg(model: &PrpModel, store: &SplitStore) -> Result<(EvalResult, f64), TrainError> {
    let r = evaluate(model, store, SplitPart::Valid, &DEFAULT_KS)?;
    let n = r.ndcg_at(EARLY_STOP_K).expect("early-stopping K is evaluated");
    Ok((r, n))
}

/// Trains until `epochs` or early stopping, then evaluates the best
/// validation checkpoint on test. With `out_dir`, writes telemetry,
/// metrics, history, config and the best checkpoint there.
pub fn fit(config: &TrainConfig, store: &SplitStore, out_dir: Option<&Path>) -> Result<FitResult, TrainError> {
    let mut trainer = Trainer::new(config.clone(), store)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(TELEMETRY_FILE);
            let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            writeln!(w, "{TELEMETRY_HEADER}").map_err(io_err(&path))?;
            Some((w, path))
        }
        None => None,
    };

    let (mut best_valid, mut best) = valid_ndcg(&trainer.model, store)?;
    let mut best_params = trainer.model.params.snapshot();
    let mut best_epoch = 0;
    let mut since_improvement = 0;
    let mut stopped_early = false;
    let mut history = Vec::new();
    let mut telemetry = Vec::new();

    for _ in 0..config.epochs {
        let started = Instant::now();
        let mut write_err = None;
        let result = trainer.train_epoch(&mut |row| {
            if let Some((w, _)) = csv.as_mut() {
                if let Err(e) = writeln!(w, "{}", row.to_csv()) {
                    write_err.get_or_insert(e);
                }
            }
        });
        if let (Some(e), Some((_, path))) = (write_err, csv.as_ref()) {
            return Err(TrainError::Io {
                path: path.clone(),
                source: e,
            });
        }
        let rows = match result {
            Ok(rows) => rows,
            Err(e) => return Err(attach_diagnostic(e, &trainer.model, config, trainer.epoch, out_dir)),
        };
        let epoch = trainer.epoch;
        let mean = |f: fn(&TelemetryRow) -> f64| {
            if rows.is_empty() {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / rows.len() as f64
            }
        };
        let mut record = EpochRecord {
            epoch,
            steps: rows.len(),
            mean_rank_loss: mean(|r| r.rank_loss),
            mean_lp_loss: mean(|r| r.lp_loss),
            mean_total_loss: mean(|r| r.total_loss),
            valid_ndcg: None,
            seconds: 0.0,
        };
        telemetry.extend(rows);

        if epoch % config.eval_every == 0 {
            let (valid, ndcg) = valid_ndcg(&trainer.model, store)?;
            record.valid_ndcg = Some(ndcg);
            if ndcg > best {
                best = ndcg;
                best_valid = valid;
                best_params = trainer.model.params.snapshot();
                best_epoch = epoch;
                since_improvement = 0;
            } else {
                since_improvement += 1;
            }
        }
        record.seconds = started.elapsed().as_secs_f64();
        history.push(record);
        if config.patience > 0 && since_improvement >= config.patience {
            stopped_early = true;
            break;
        }
    }
    if let Some((mut w, path)) = csv.take() {
        w.flush().map_err(io_err(&path))?;
    }

    let epochs_run = trainer.epoch;
    let mut model = trainer.model;
    model.params.restore(&best_params);
    let test = evaluate(&model, store, SplitPart::Test, &DEFAULT_KS)?;
    let result = FitResult {
        model,
        best_epoch,
        best_valid_ndcg: best,
        epochs_run,
        stopped_early,
        valid: best_valid,
        test,
        history,
        telemetry,
    };
    if let Some(dir) = out_dir {
        write_outputs(dir, config, &result)?;
    }
    Ok(result)
}

fn attach_diagnostic(
    e: TrainError,
    model: &PrpModel,
    config: &TrainConfig,
    epoch: usize,
    out_dir: Option<&Path>,
) -> TrainError {
    let Some(dir) = out_dir else { return e };
    let path = dir.join(DIAGNOSTIC_DIR);
    if checkpoint::save(&path, model, config, epoch).is_err() {
        return e;
    }
    match e {
        TrainError::Step {
            epoch, step, source, ..
        } => TrainError::Step {
            epoch,
            step,
            source,
            diagnostic: Some(path),
        },
        TrainError::Optimizer {
            epoch, step, source, ..
        } => TrainError::Optimizer {
            epoch,
            step,
            source,
            diagnostic: Some(path),
        },
        other => other,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn write_outputs(dir: &Path, config: &TrainConfig, result: &FitResult) -> Result<(), TrainError> {
    write_json(&dir.join(METRICS_FILE), &result.metric_rows(config.seed))?;
    write_json(&dir.join(HISTORY_FILE), &result.history)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    checkpoint::save(&dir.join(CHECKPOINT_DIR), &result.model, config, result.best_epoch)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IdMap;

    fn store() -> SplitStore {
        let mut users = IdMap::new();
        let mut items = IdMap::new();
        for u in 0..8 {
            users.get_or_insert(&format!("u{u}"));
        }
        for i in 0..15 {
            items.get_or_insert(&format!("i{i}"));
        }
        let mut train = Vec::new();
        let mut valid = Vec::new();
        let mut test = Vec::new();
        for u in 0..8u32 {
            let base = (u * 2) % 15;
            let its: Vec<u32> = (0..6).map(|j| (base + j) % 15).collect();
            let mut t = its[..4].to_vec();
            t.sort();
            train.push(t);
            valid.push(vec![its[4]]);
            test.push(vec![its[5]]);
        }
        SplitStore::from_parts(users, items, train, valid, test).unwrap()
    }

    fn small(mode: LossMode) -> TrainConfig {
        TrainConfig {
            embedding_dim: 8,
            batch_size: 8,
            k: 3,
            epochs: 2,
            loss_mode: mode,
            lr: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_defaults_and_parsing() {
        let c = TrainConfig::from_json("{}").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.embedding_dim, 64);
        assert_eq!(c.thetas, [0.0, 0.01, 0.1]);
        let c = TrainConfig::from_json(r#"{"loss_mode": "bpr", "ablations": {"no_lp": true}}"#).unwrap();
        assert_eq!(c.loss_mode, LossMode::Bpr);
        assert!(c.ablations.no_lp);
        let e = TrainConfig::from_json(r#"{"learning_rate": 0.1}"#).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = TrainConfig::from_json(r#"{"ablations": {"no_rank": true}}"#).unwrap_err();
        assert!(e.to_string().contains("no_rank"));
        assert!(TrainConfig::from_json(r#"{"k": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"k": 11}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"beta": -0.5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"thetas": [0.0, 0.1, 0.01]}"#).is_err());
        let round = TrainConfig::from_json(&TrainConfig::default().to_json()).unwrap();
        assert_eq!(round, TrainConfig::default());
    }

    #[test]
    fn bpr_mode_options() {
        let c = TrainConfig {
            loss_mode: LossMode::Bpr,
            k: 5,
            ..TrainConfig::default()
        };
        let o = c.step_options().unwrap();
        assert_eq!(c.effective_k(), 2);
        assert!(!o.use_ranker && !o.use_lp && !o.confidence_main && !o.confidence_lp);
        let c = TrainConfig {
            ablations: Ablations {
                no_confidence: true,
                ..Ablations::default()
            },
            ..TrainConfig::default()
        };
        let o = c.step_options().unwrap();
        assert!(o.use_ranker && o.use_lp && !o.confidence_main && !o.confidence_lp);
    }

    #[test]
    fn zero_epochs_evaluates_initial_model() {
        let s = store();
        let c = TrainConfig {
            epochs: 0,
            ..small(LossMode::Prp)
        };
        let r = fit(&c, &s, None).unwrap();
        assert_eq!(r.epochs_run, 0);
        assert_eq!(r.best_epoch, 0);
        assert!(r.telemetry.is_empty());
        let init = Trainer::new(c.clone(), &s).unwrap().model;
        assert_eq!(r.model.params.snapshot(), init.params.snapshot());
    }

    #[test]
    fn frozen_model_stops_after_two_evaluations() {
        let s = store();
        let c = TrainConfig {
            lr: 0.0,
            l2: 0.0,
            patience: 1,
            epochs: 20,
            ..small(LossMode::Prp)
        };
        let r = fit(&c, &s, None).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.epochs_run, 1);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let s = store();
        for mode in [LossMode::Prp, LossMode::Bpr] {
            let c = small(mode);
            let a = fit(&c, &s, None).unwrap();
            let b = fit(&c, &s, None).unwrap();
            let ta: Vec<String> = a.telemetry.iter().map(TelemetryRow::to_csv).collect();
            let tb: Vec<String> = b.telemetry.iter().map(TelemetryRow::to_csv).collect();
            assert_eq!(ta, tb);
            assert_eq!(a.metric_rows(c.seed), b.metric_rows(c.seed));
            assert!(!ta.is_empty());
        }
    }

    #[test]
    fn seed_changes_the_run() {
        let s = store();
        let a = fit(&small(LossMode::Prp), &s, None).unwrap();
        let b = fit(
            &TrainConfig {
                seed: 7,
                ..small(LossMode::Prp)
            },
            &s,
            None,
        )
        .unwrap();
        assert_ne!(a.telemetry[0].to_csv(), b.telemetry[0].to_csv());
    }

    #[test]
    fn telemetry_schema() {
        let s = store();
        let r = fit(&small(LossMode::Prp), &s, None).unwrap();
        let row = &r.telemetry[0];
        assert_eq!(row.epoch, 1);
        assert_eq!(row.step, 1);
        assert_eq!(row.alpha_hist.len(), 10);
        assert_eq!(row.alpha_hist.iter().sum::<usize>(), 8 * 2);
        assert_eq!(row.to_csv().split(',').count(), TELEMETRY_HEADER.split(',').count());
        let bpr = fit(&small(LossMode::Bpr), &s, None).unwrap();
        assert_eq!(bpr.telemetry[0].mean_alpha, 1.0);
        assert_eq!(bpr.telemetry[0].lp_loss, 0.0);
    }

    #[test]
    fn outputs_written() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let c = small(LossMode::Prp);
        fit(&c, &s, Some(dir.path())).unwrap();
        for f in [TELEMETRY_FILE, METRICS_FILE, HISTORY_FILE, CONFIG_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join(TELEMETRY_FILE)).unwrap();
        assert!(csv.starts_with(TELEMETRY_HEADER));
        let rows: Vec<MetricRow> =
            serde_json::from_str(&fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().any(|r| r.split == "test" && r.k == 20));
        let (m, _) = checkpoint::load(&dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(m.dim(), 8);
    }

    #[test]
    fn non_finite_step_saves_diagnostic() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let c = small(LossMode::Prp);
        let mut t = Trainer::new(c.clone(), &s).unwrap();
        let id = t.model.emb.user;
        t.model.params.values_mut(id)[0] = f64::NAN;
        let err = t.train_epoch(&mut |_| {}).unwrap_err();
        let err = attach_diagnostic(err, &t.model, &c, 1, Some(dir.path()));
        assert!(err.to_string().contains("model state saved"), "{err}");
        assert!(dir.path().join(DIAGNOSTIC_DIR).join(checkpoint::MANIFEST_FILE).exists());
    }
}
