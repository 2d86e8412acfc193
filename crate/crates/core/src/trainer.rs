//! Minibatch training with Adam, cyclical KL annealing and early stopping on
//! image-only validation AUC, plus text checkpoints and CSV logs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::model::{ForwardCtx, ModelConfig, Param, VkdModel};
use crate::objectives::{objective_loss, AnnealSchedule, LossBreakdown, LossOptions, Objective, RampFn};
use crate::optim::{Adam, AdamConfig, AdamState};
use crate::rng;
use crate::tensor::{Graph, Tensor};

const STREAM_BATCH_NOISE: u64 = 0x4E;
const STREAM_VALIDATE: u64 = 0x7A;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub mc_m: usize,
    pub mc_l: usize,
    pub anneal_ramp: f64,
    pub anneal_cycles: usize,
    pub anneal_fn: RampFn,
    /// Relative gain in validation macro AUC that resets the patience counter.
    pub early_stop_tolerance: f64,
    pub patience: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub log_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Vkd,
            adam: AdamConfig::default(),
            batch_size: 64,
            max_epochs: 50,
            mc_m: 1,
            mc_l: 1,
            anneal_ramp: 0.5,
            anneal_cycles: 4,
            anneal_fn: RampFn::Linear,
            early_stop_tolerance: 0.01,
            patience: 5,
            eval_samples: eval::DEFAULT_SAMPLES,
            seed: 0,
            log_batches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.adam.lr >= 0.0) {
            return bad(format!("lr {} must be >= 0", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam_eps must be > 0".into());
        }
        if self.batch_size == 0 || self.mc_m == 0 || self.mc_l == 0 || self.eval_samples == 0 {
            return bad("batch_size, mc_m, mc_l and eval_samples must be >= 1".into());
        }
        if !(self.early_stop_tolerance > 0.0 && self.early_stop_tolerance < 1.0) {
            return bad(format!("early_stop_tolerance {} outside (0, 1)", self.early_stop_tolerance));
        }
        if self.anneal_cycles == 0 || !(self.anneal_ramp > 0.0 && self.anneal_ramp <= 1.0) {
            return bad("anneal_cycles must be >= 1 and anneal_ramp in (0, 1]".into());
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }

    /// The annealing schedule for a training set of `n_train` samples. When an
    /// epoch has fewer batches than cycles the cycle count is capped.
    pub fn schedule(&self, n_train: usize) -> Result<AnnealSchedule> {
        let t = self.iters_per_epoch(n_train);
        AnnealSchedule::new(t, self.anneal_cycles.min(t), self.anneal_ramp, self.anneal_fn)
    }
}

/// One log line. Epoch rows carry validation metrics; per-batch rows
/// (`log_batches`) leave them as `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub epoch: usize,
    /// Global batch counter at the end of the row's span.
    pub iter: u64,
    pub beta: f64,
    pub train: LossBreakdown,
    pub val_image_ce: f64,
    pub val_macro_auc: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "epoch,iter,beta,total,image_ce,text_ce,kl,val_image_ce,val_macro_auc,wall_ms";

fn csv_float(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.16e}")
    }
}

impl TrainLogRow {
    pub fn is_epoch_row(&self) -> bool {
        !self.val_macro_auc.is_nan()
    }

    /// The row with its wall-clock field zeroed, the part that is a pure
    /// function of inputs and seeds.
    pub fn without_timing(&self) -> Self {
        TrainLogRow { wall_ms: 0, ..self.clone() }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iter,
            csv_float(self.beta),
            csv_float(self.train.total),
            csv_float(self.train.image_ce),
            csv_float(self.train.text_ce),
            csv_float(self.train.kl),
            csv_float(self.val_image_ce),
            csv_float(self.val_macro_auc),
            self.wall_ms
        )
    }
}

pub fn log_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Early-stopping bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    /// Best validation AUC seen; its weights are the ones returned.
    pub best_auc: Option<f64>,
    /// AUC at the last improvement that exceeded the tolerance.
    pub anchor_auc: Option<f64>,
    /// Epochs since that improvement.
    pub stale: usize,
}

impl EarlyStop {
    fn new() -> Self {
        EarlyStop {
            best_auc: None,
            anchor_auc: None,
            stale: 0,
        }
    }

    /// Records an epoch's AUC; returns whether it is a new best.
    fn observe(&mut self, auc: f64, tolerance: f64) -> bool {
        let best = self.best_auc.is_none_or(|b| auc > b);
        if best {
            self.best_auc = Some(auc);
        }
        match self.anchor_auc {
            Some(a) if auc <= a * (1.0 + tolerance) => self.stale += 1,
            _ => {
                self.anchor_auc = Some(auc);
                self.stale = 0;
            }
        }
        best
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: VkdModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub early: EarlyStop,
    /// Parameters at the best validation AUC so far.
    pub best: Option<Vec<Param>>,
}

impl TrainState {
    pub fn new(model: VkdModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(TrainState {
            adam: AdamState::zeros_like(model.params().iter().map(|p| &p.value)),
            config,
            model,
            epoch: 0,
            early: EarlyStop::new(),
            best: None,
        })
    }

    /// Global batch counter.
    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn best_model(&self) -> Result<VkdModel> {
        match &self.best {
            Some(p) => VkdModel::from_params(self.model.config().clone(), p.clone()),
            None => Ok(self.model.clone()),
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.early.stale >= self.config.patience
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VkdModel,
    pub log: Vec<TrainLogRow>,
    pub state: TrainState,
    pub best_val_auc: Option<f64>,
}

fn check_data(model: &VkdModel, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    let c = model.config();
    if (c.input_dim, c.vocab, c.n_classes) != (ds.input_dim, ds.vocab, ds.n_classes) {
        return Err(Error::DimensionMismatch {
            expected: format!("d={} v={} k={}", c.input_dim, c.vocab, c.n_classes),
            found: format!("d={} v={} k={} ({what})", ds.input_dim, ds.vocab, ds.n_classes),
        });
    }
    Ok(())
}

/// Validation metrics on the image-only path: macro AUC and the mean
/// summed cross entropy of the predictive probabilities.
pub fn validate(model: &VkdModel, val: &Dataset, cfg: &TrainConfig) -> Result<(EvalReport, f64)> {
    let seed = rng::mix(&[STREAM_VALIDATE, cfg.seed]);
    let preds = eval::predict(model, &val.images()?, cfg.eval_samples, seed)?;
    Ok((EvalReport::from_scores(&preds.probs, val)?, eval::mixture_ce(&preds.probs, val)))
}

/// Runs one epoch and its validation pass, appending rows to `log`.
pub fn run_epoch(state: &mut TrainState, train: &Dataset, val: &Dataset, log: &mut Vec<TrainLogRow>) -> Result<()> {
    check_data(&state.model, train, "training")?;
    check_data(&state.model, val, "validation")?;
    let started = Instant::now();
    let cfg = state.config.clone();
    let schedule = cfg.schedule(train.len())?;
    let epoch = state.epoch + 1;
    let order = rng::permutation(train.len(), &[rng::STREAM_SHUFFLE, cfg.seed, epoch as u64]);
    let mut adam = Adam::new(cfg.adam, std::mem::replace(&mut state.adam, AdamState::zeros_like([])));

    let mut sum = LossBreakdown {
        total: 0.0,
        image_ce: 0.0,
        text_ce: 0.0,
        kl: 0.0,
        beta: 0.0,
    };
    let mut n_batches = 0usize;
    let mut outcome = Ok(());
    for idx in order.chunks(cfg.batch_size) {
        let t = adam.state.step + 1;
        let step = (|| -> Result<LossBreakdown> {
            let batch = train.batch(idx)?;
            let beta = schedule.beta_at(t)?;
            let mut opts = LossOptions::new(beta, rng::mix(&[STREAM_BATCH_NOISE, cfg.seed, t]), ForwardCtx::train(cfg.seed, t));
            opts.mc_m = cfg.mc_m;
            opts.mc_l = cfg.mc_l;
            let mut g = Graph::new();
            let p = state.model.bind(&mut g);
            let loss = objective_loss(&mut g, &p, &state.model, &batch, cfg.objective, &opts)?;
            let b = loss.breakdown(&g);
            if !b.is_finite() {
                return Err(Error::NonFiniteLoss { batch: t, breakdown: b });
            }
            g.backward(loss.total)?;
            let grads: Vec<Option<&Tensor>> = p.vars().iter().map(|&v| g.grad(v)).collect();
            let mut params: Vec<&mut Tensor> = state.model.params_mut().iter_mut().map(|p| &mut p.value).collect();
            adam.step(&mut params, &grads)?;
            Ok(b)
        })();
        let b = match step {
            Ok(b) => b,
            Err(e) => {
                outcome = Err(e);
                break;
            }
        };
        sum.total += b.total;
        sum.image_ce += b.image_ce;
        sum.text_ce += b.text_ce;
        sum.kl += b.kl;
        sum.beta = b.beta;
        n_batches += 1;
        if cfg.log_batches {
            log.push(TrainLogRow {
                epoch,
                iter: t,
                beta: b.beta,
                train: b,
                val_image_ce: f64::NAN,
                val_macro_auc: f64::NAN,
                wall_ms: started.elapsed().as_millis() as u64,
            });
        }
    }
    state.adam = adam.state;
    outcome?;

    let k = n_batches as f64;
    let mean = LossBreakdown {
        total: sum.total / k,
        image_ce: sum.image_ce / k,
        text_ce: sum.text_ce / k,
        kl: sum.kl / k,
        beta: sum.beta,
    };
    let (report, val_ce) = validate(&state.model, val, &cfg)?;
    if state.early.observe(report.macro_auc, cfg.early_stop_tolerance) {
        state.best = Some(state.model.params().to_vec());
    }
    state.epoch = epoch;
    log.push(TrainLogRow {
        epoch,
        iter: state.adam.step,
        beta: mean.beta,
        train: mean,
        val_image_ce: val_ce,
        val_macro_auc: report.macro_auc,
        wall_ms: started.elapsed().as_millis() as u64,
    });
    Ok(())
}

/// Continues `state` until early stopping or `max_epochs`.
pub fn train_from(mut state: TrainState, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    let mut log = Vec::new();
    while !state.finished() {
        run_epoch(&mut state, train, val, &mut log)?;
    }
    Ok(TrainOutcome {
        model: state.best_model()?,
        best_val_auc: state.early.best_auc,
        log,
        state,
    })
}

/// Trains `model` from scratch and returns the weights with the best
/// validation macro AUC.
pub fn train(model: VkdModel, train_ds: &Dataset, val_ds: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(TrainState::new(model, config.clone())?, train_ds, val_ds)
}

// ---- checkpoints -------------------------------------------------------------

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor(out: &mut String, name: &str, t: &Tensor) {
    write!(out, "{name} {}", t.rank()).unwrap();
    for e in t.shape() {
        write!(out, " {e}").unwrap();
    }
    out.push('\n');
    let vals: Vec<String> = t.data().iter().map(|x| format!("{x:.16e}")).collect();
    out.push_str(&vals.join(" "));
    out.push('\n');
}

fn opt_float(x: Option<f64>) -> String {
    x.map_or_else(|| "none".to_string(), |x| format!("{x:.16e}"))
}

/// Serializes a training state. Layout: `vkdc 1`; a line of `key=value`
/// pairs (the model and training configuration plus early-stopping state);
/// each parameter as a `name rank extents...` line followed by a line of
/// values; the Adam moments as `.m` / `.v` entries; the best-so-far weights
/// as `.best` entries; and finally `step=<t>`.
pub fn checkpoint_text(state: &TrainState) -> String {
    let cfg = Config {
        model: state.model.config().clone(),
        train: state.config.clone(),
        ..Config::default()
    };
    let mut out = String::from("vkdc 1\n");
    let mut pairs: Vec<String> = cfg
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| !GEN_ONLY_KEYS.contains(k))
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    pairs.push(format!("epoch={}", state.epoch));
    pairs.push(format!("best_auc={}", opt_float(state.early.best_auc)));
    pairs.push(format!("anchor_auc={}", opt_float(state.early.anchor_auc)));
    pairs.push(format!("stale={}", state.early.stale));
    out.push_str(&pairs.join(" "));
    out.push('\n');
    let params = state.model.params();
    for p in params {
        write_tensor(&mut out, &p.name, &p.value);
    }
    for (p, m) in params.iter().zip(&state.adam.m) {
        write_tensor(&mut out, &format!("{}.m", p.name), m);
    }
    for (p, v) in params.iter().zip(&state.adam.v) {
        write_tensor(&mut out, &format!("{}.v", p.name), v);
    }
    if let Some(best) = &state.best {
        for p in best {
            write_tensor(&mut out, &format!("{}.best", p.name), &p.value);
        }
    }
    writeln!(out, "step={}", state.adam.step).unwrap();
    out
}

const GEN_ONLY_KEYS: &[&str] = &["n_samples", "concept_dim", "seq_len", "image_noise", "keyword_prob", "data_seed"];

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(checkpoint_text(state).as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}

fn parse_opt_float(v: &str) -> Result<Option<f64>> {
    if v == "none" {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| ckpt_err(format!("bad number `{v}`")))
}

pub fn parse_checkpoint(text: &str) -> Result<TrainState> {
    let mut lines = text.lines().enumerate();
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| ckpt_err(format!("unexpected end of file, expected {what}")))
    };
    let (_, magic) = next("header")?;
    if magic.trim() != "vkdc 1" {
        return Err(ckpt_err(format!("unsupported checkpoint version `{}`", magic.trim())));
    }
    let (_, kv) = next("configuration line")?;
    let mut cfg = Config::default();
    let (mut epoch, mut best_auc, mut anchor_auc, mut stale) = (None, None, None, None);
    for pair in kv.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ckpt_err(format!("expected key=value, found `{pair}`")))?;
        match k {
            "epoch" => epoch = Some(v.parse().map_err(|_| ckpt_err(format!("bad epoch `{v}`")))?),
            "best_auc" => best_auc = Some(parse_opt_float(v)?),
            "anchor_auc" => anchor_auc = Some(parse_opt_float(v)?),
            "stale" => stale = Some(v.parse().map_err(|_| ckpt_err(format!("bad stale count `{v}`")))?),
            _ => cfg.set(k, v)?,
        }
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let model_cfg: ModelConfig = cfg.model.clone();

    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    let step = loop {
        let (n, line) = next("tensor header or step")?;
        if let Some(s) = line.strip_prefix("step=") {
            break s.trim().parse::<u64>().map_err(|_| ckpt_err(format!("line {}: bad step `{s}`", n + 1)))?;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || ckpt_err(format!("line {}: malformed tensor header `{line}`", n + 1));
        let name = *fields.first().ok_or_else(bad)?;
        let rank: usize = fields.get(1).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if fields.len() != 2 + rank {
            return Err(bad());
        }
        let shape = fields[2..]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        let (vn, vals) = next("tensor values")?;
        let data = vals
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|_| ckpt_err(format!("line {}: bad value `{f}`", vn + 1))))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| ckpt_err(format!("line {}: {e}", vn + 1)))?;
        tensors.push((name.to_string(), t));
    };

    let take = |suffix: &str| -> Vec<Param> {
        tensors
            .iter()
            .filter_map(|(n, t)| {
                let base = if suffix.is_empty() {
                    (!n.ends_with(".m") && !n.ends_with(".v") && !n.ends_with(".best")).then_some(n.as_str())
                } else {
                    n.strip_suffix(suffix)
                };
                base.map(|b| Param {
                    name: b.to_string(),
                    value: t.clone(),
                })
            })
            .collect()
    };
    let model = VkdModel::from_params(model_cfg.clone(), take(""))?;
    let moments = |suffix: &str| -> Result<Vec<Tensor>> {
        let ps = take(suffix);
        let check = VkdModel::from_params(model_cfg.clone(), ps.clone())
            .map_err(|e| ckpt_err(format!("adam moments `{suffix}`: {e}")))?;
        drop(check);
        Ok(ps.into_iter().map(|p| p.value).collect())
    };
    let adam = AdamState {
        m: moments(".m")?,
        v: moments(".v")?,
        step,
    };
    let best = take(".best");
    let best = if best.is_empty() {
        None
    } else {
        Some(VkdModel::from_params(model_cfg, best)?.params().to_vec())
    };
    Ok(TrainState {
        config: cfg.train,
        model,
        adam,
        epoch: epoch.ok_or_else(|| ckpt_err("missing epoch"))?,
        early: EarlyStop {
            best_auc: best_auc.ok_or_else(|| ckpt_err("missing best_auc"))?,
            anchor_auc: anchor_auc.ok_or_else(|| ckpt_err("missing anchor_auc"))?,
            stale: stale.ok_or_else(|| ckpt_err("missing stale"))?,
        },
        best,
    })
}
