//! Training, evaluation and sample-count sweeps.
//!
//! Every random choice is drawn from a stream derived from the run seed and
//! its position (epoch, frame index, batch index), so a run is reproducible
//! bit for bit and can be resumed from any epoch boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{sgd_step, OptimState, Precision, Tape};
use crate::checkpoint::Checkpoint;
use crate::dataset::{batch_order, FrameSource};
use crate::error::{invalid, Error, Result};
use crate::image::{DepthMap, Frame, SparseDepth};
use crate::layers::Mode;
use crate::losses::{self, LossKind, ValidMask};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{build_model, Model, ModelConfig};
use crate::sampling::{augment, bernoulli_sample, make_input, AugmentParams, Normalization, Problem};
use crate::seed;
use crate::tensor::Tensor;

// Stream tags keep the derived rng families apart.
const STREAM_MODEL: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_FORWARD: u64 = 3;
const STREAM_EVAL: u64 = 4;

/// How many sparse depth samples to draw per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleCount {
    /// Every valid pixel.
    All,
    /// Expected count `m` (Bernoulli with `p = m / n`).
    Fixed(usize),
}

impl SampleCount {
    /// Draws the sparse input for one ground-truth image.
    pub fn sample<R: rand::Rng + ?Sized>(self, gt: &DepthMap, rng: &mut R) -> Result<SparseDepth> {
        match self {
            SampleCount::All => Ok(gt.clone()),
            SampleCount::Fixed(m) => bernoulli_sample(gt, m, rng),
        }
    }

    pub fn count(self) -> Option<usize> {
        match self {
            SampleCount::All => None,
            SampleCount::Fixed(m) => Some(m),
        }
    }
}

impl FromStr for SampleCount {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(SampleCount::All);
        }
        s.parse()
            .map(SampleCount::Fixed)
            .map_err(|_| Error::Parse(format!("sample count '{s}' is neither a number nor 'all'")))
    }
}

impl fmt::Display for SampleCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleCount::All => f.write_str("all"),
            SampleCount::Fixed(m) => write!(f, "{m}"),
        }
    }
}

/// What produces predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// The trainable encoder–decoder.
    #[default]
    Network,
    /// Returns its sparse-depth input unchanged; with every sample kept it
    /// reproduces the ground truth, which makes it a reference predictor.
    SparseEcho,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full-size protocol: batch 16, 20 epochs, 228×304 frames.
    Paper,
    /// Small enough for a laptop CPU: batch 4, 64×64 frames.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Parse(format!("unknown preset '{other}' (expected paper, desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub problem: Problem,
    pub samples: SampleCount,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Factor applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossKind,
    pub model: ModelConfig,
    pub precision: Precision,
    /// Random scale/rotation/jitter/flip during training.
    pub augment: bool,
    /// Predictions are clamped to `[depth_min, depth_max]` before metrics.
    pub depth_min: f64,
    pub depth_max: f64,
    pub normalization: Normalization,
    pub architecture: Architecture,
}

impl TrainConfig {
    pub fn preset(preset: Preset, problem: Problem, samples: SampleCount) -> Self {
        let (size, batch_size, model) = match preset {
            Preset::Paper => {
                let size = (228, 304);
                let mut m = ModelConfig::desk(problem.input_channels(), size);
                m.encoder_widths = vec![64, 128, 256, 512];
                m.encoder_block_count = 2;
                (size, 16, m)
            }
            Preset::Desk => {
                let size = (64, 64);
                (size, 4, ModelConfig::desk(problem.input_channels(), size))
            }
        };
        debug_assert_eq!(model.output_size, size);
        TrainConfig {
            problem,
            samples,
            epochs: 20,
            batch_size,
            lr0: 0.01,
            lr_decay: 0.2,
            lr_decay_every: 5,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
            loss: LossKind::L1,
            model,
            precision: Precision::Double,
            augment: true,
            depth_min: 0.1,
            depth_max: 100.0,
            normalization: Normalization::default(),
            architecture: Architecture::Network,
        }
    }

    /// Frame size the model consumes.
    pub fn crop(&self) -> (usize, usize) {
        self.model.output_size
    }

    /// Sets the input/output resolution.
    pub fn with_size(mut self, h: usize, w: usize) -> Self {
        self.model.output_size = (h, w);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return invalid("epochs, batch_size and lr_decay_every must be at least 1");
        }
        let rates = [self.lr0, self.lr_decay];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return invalid(format!("lr0 and lr_decay must be positive, got {} and {}", self.lr0, self.lr_decay));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return invalid("weight_decay must be ≥ 0 and momentum in [0, 1)");
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return invalid(format!("depth clamp [{}, {}] is empty", self.depth_min, self.depth_max));
        }
        if self.problem == Problem::Rgb && self.samples != SampleCount::Fixed(0) {
            return invalid("problem RGB takes no depth samples (use --samples 0)");
        }
        if self.problem.uses_depth() && self.samples == SampleCount::Fixed(0) {
            return invalid(format!("problem {} needs at least one depth sample", self.problem));
        }
        self.normalization.validate()?;
        match self.architecture {
            Architecture::Network => {
                if self.model.input_channels != self.problem.input_channels() {
                    return invalid(format!(
                        "model takes {} input channels but problem {} provides {}",
                        self.model.input_channels,
                        self.problem,
                        self.problem.input_channels()
                    ));
                }
                self.model.validate().map(|_| ())
            }
            Architecture::SparseEcho if !self.problem.uses_depth() => {
                invalid("the sparse-echo predictor needs a depth input")
            }
            Architecture::SparseEcho => Ok(()),
        }
    }
}

/// `lr0 · decay^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_every) as i32;
    cfg.lr0 * cfg.lr_decay.powi(k)
}

/// One row of the training log. Metrics are pooled over the training
/// predictions made during the epoch (before each update).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Zero-based; the learning rate is `lr_schedule(epoch)`.
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch losses.
    pub train_loss: f64,
    pub metrics: MetricsReport,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,rmse,rel,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, m.rmse, m.rel, m.delta1, m.delta2, m.delta3
        )
    }
}

pub fn log_csv(history: &[EpochLog]) -> String {
    let mut s = String::from(EpochLog::CSV_HEADER);
    s.push('\n');
    for row in history {
        s.push_str(&row.csv_row());
        s.push('\n');
    }
    s
}

/// A trained (or reference) depth predictor.
#[derive(Clone, Debug)]
pub enum Predictor {
    Network(Model),
    SparseEcho,
}

impl Predictor {
    /// Depth prediction `(N, 1, H, W)` for an input built by [`make_input`].
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Predictor::Network(model) => model.predict(input),
            Predictor::SparseEcho => {
                let s = input.shape();
                let mut data = Vec::with_capacity(s.n * s.plane());
                for n in 0..s.n {
                    data.extend_from_slice(input.plane(n, s.c - 1));
                }
                Tensor::from_vec([s.n, 1, s.h, s.w], data)
            }
        }
    }

    /// Rebuilds the predictor a checkpoint describes, in evaluation mode.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.config.architecture {
            Architecture::SparseEcho => {
                ckpt.config.validate()?;
                Ok(Predictor::SparseEcho)
            }
            Architecture::Network => Ok(Trainer::from_checkpoint(ckpt)?.predictor()),
        }
    }

    /// Required input size, if any.
    pub fn input_size(&self) -> Option<(usize, usize)> {
        match self {
            Predictor::Network(m) => Some(m.config().output_size),
            Predictor::SparseEcho => None,
        }
    }
}

/// Inputs and ground truth for one training batch.
fn prepare_sample(cfg: &TrainConfig, frame: &Frame, epoch: usize, index: usize) -> Result<(Tensor, DepthMap)> {
    let mut rng = seed::stream(cfg.seed, &[STREAM_SAMPLE, epoch as u64, index as u64]);
    let crop = cfg.crop();
    let (rgb, depth) = if cfg.augment {
        let params = AugmentParams::sample(&mut rng, crop);
        augment(&frame.rgb, &frame.depth, &params, &cfg.normalization)?
    } else {
        let f = frame.center_crop(crop.0, crop.1)?;
        (cfg.normalization.apply(&f.rgb), f.depth)
    };
    let sparse = if cfg.problem.uses_depth() {
        Some(cfg.samples.sample(&depth, &mut rng)?)
    } else {
        None
    };
    Ok((make_input(Some(&rgb), sparse.as_ref(), cfg.problem)?, depth))
}

/// Owns a model and its optimizer across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    optim: OptimState,
    epoch: usize,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.architecture != Architecture::Network {
            return invalid("only the network architecture is trainable");
        }
        let model = build_model(&cfg.model, seed::derive_seed(cfg.seed, &[STREAM_MODEL]))?;
        let optim = OptimState::new(cfg.lr0, cfg.weight_decay, cfg.momentum);
        Ok(Trainer {
            cfg,
            model,
            optim,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Restores the exact training state captured by [`Trainer::checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone())?;
        ckpt.restore_model(&mut t.model)?;
        t.optim.set_velocity(ckpt.velocity_for(&t.model)?);
        t.epoch = ckpt.epoch as usize;
        t.history = ckpt.history.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg, &self.model, self.optim.velocity(), self.epoch as u64, &self.history)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// Runs one epoch over `data` and appends its log row.
    pub fn train_epoch<S: FrameSource + ?Sized>(&mut self, data: &S) -> Result<EpochLog> {
        if data.is_empty() {
            return invalid("training set is empty");
        }
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        self.optim.learning_rate = lr;
        self.model.set_mode(Mode::Train);
        let mut acc = MetricsAccumulator::new();
        let mut loss_sum = 0.0;
        let batches = batch_order(data.len(), self.cfg.batch_size, self.cfg.seed, epoch as u64)?;
        for (bi, indices) in batches.iter().enumerate() {
            let mut inputs = Vec::with_capacity(indices.len());
            let mut gts = Vec::with_capacity(indices.len());
            for &i in indices {
                let (x, gt) = prepare_sample(&self.cfg, &data.frame(i)?, epoch, i)?;
                inputs.push(x);
                gts.push(gt.to_tensor());
            }
            let input = Tensor::stack(&inputs)?;
            let gt = Tensor::stack(&gts)?;
            let mask = ValidMask::from_depth(&gt);

            let mut tape = Tape::with_precision(self.cfg.precision);
            let x = tape.constant(input);
            let mut rng = seed::stream(self.cfg.seed, &[STREAM_FORWARD, epoch as u64, bi as u64]);
            let pass = self.model.forward(&mut tape, x, &mut rng)?;
            let loss = losses::loss(&mut tape, self.cfg.loss, pass.output, &gt, &mask)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            loss_sum += value;
            let pred = self.clamp(tape.value(pass.output));
            acc.add(pred.data(), gt.data(), mask.as_slice())?;

            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = pass
                .params
                .iter()
                .map(|&id| grads.take(id).expect("every parameter requires grad"))
                .collect();
            let mut params = self.model.param_values();
            sgd_step(&mut params, &grads, &mut self.optim)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            self.model.set_param_values(params)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches.len() as f64,
            metrics: acc.finish()?,
        };
        self.history.push(log);
        self.epoch += 1;
        Ok(log)
    }

    /// Trains until the configured epoch count, calling `on_epoch` after each.
    pub fn run<S, F>(&mut self, data: &S, mut on_epoch: F) -> Result<()>
    where
        S: FrameSource + ?Sized,
        F: FnMut(&Trainer, &EpochLog) -> Result<()>,
    {
        while !self.is_finished() {
            let log = self.train_epoch(data)?;
            on_epoch(self, &log)?;
        }
        Ok(())
    }

    fn clamp(&self, t: &Tensor) -> Tensor {
        let (lo, hi) = (self.cfg.depth_min, self.cfg.depth_max);
        t.map(|v| v.clamp(lo, hi))
    }

    pub fn predictor(&self) -> Predictor {
        let mut m = self.model.clone();
        m.set_mode(Mode::Eval);
        Predictor::Network(m)
    }
}

/// Trains from scratch; returns the final checkpoint and the per-epoch log.
pub fn train<S: FrameSource + ?Sized>(cfg: TrainConfig, data: &S) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut t = Trainer::new(cfg)?;
    t.run(data, |_, _| Ok(()))?;
    Ok((t.checkpoint(), t.history))
}

/// Settings that govern how inputs are formed at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub problem: Problem,
    pub samples: SampleCount,
    pub normalization: Normalization,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl From<&TrainConfig> for EvalSettings {
    fn from(cfg: &TrainConfig) -> Self {
        EvalSettings {
            problem: cfg.problem,
            samples: cfg.samples,
            normalization: cfg.normalization,
            depth_min: cfg.depth_min,
            depth_max: cfg.depth_max,
        }
    }
}

const EVAL_CHUNK: usize = 8;

/// Pooled metrics over every valid pixel of every frame.
///
/// Frames are center-cropped to the predictor's input size. The sparse input
/// of each frame is drawn from a stream keyed by `(seed, frame id)`, so the
/// result does not depend on frame order.
pub fn evaluate<S: FrameSource + ?Sized>(predictor: &Predictor, settings: &EvalSettings, data: &S, seed: u64) -> Result<MetricsReport> {
    if data.is_empty() {
        return invalid("evaluation set is empty");
    }
    let mut acc = MetricsAccumulator::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let mut inputs = Vec::new();
        let mut gts = Vec::new();
        for &i in chunk {
            let frame = data.frame(i)?;
            let frame = match predictor.input_size() {
                Some((h, w)) => frame.center_crop(h, w)?,
                None => frame,
            };
            let (input, gt) = eval_input(settings, &frame, seed)?;
            inputs.push(input);
            gts.push(gt);
        }
        let uniform = inputs.windows(2).all(|w| w[0].shape() == w[1].shape());
        let preds: Vec<Tensor> = if uniform {
            predictor.predict(&Tensor::stack(&inputs)?)?.unstack()
        } else {
            inputs.iter().map(|x| predictor.predict(x)).collect::<Result<_>>()?
        };
        for (pred, gt) in preds.iter().zip(&gts) {
            let pred = pred.map(|v| v.clamp(settings.depth_min, settings.depth_max));
            acc.add(pred.data(), gt.as_slice(), &gt.valid_mask())?;
        }
    }
    acc.finish()
}

/// Network input and ground truth for one evaluation frame.
pub fn eval_input(settings: &EvalSettings, frame: &Frame, seed: u64) -> Result<(Tensor, DepthMap)> {
    let mut rng = seed::stream(seed, &[STREAM_EVAL, seed::hash_str(&frame.id)]);
    let sparse = if settings.problem.uses_depth() {
        Some(settings.samples.sample(&frame.depth, &mut rng)?)
    } else {
        None
    };
    let rgb = settings.normalization.apply(&frame.rgb);
    Ok((make_input(Some(&rgb), sparse.as_ref(), settings.problem)?, frame.depth.clone()))
}

/// One line of a sweep table, averaged over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub problem: Problem,
    pub m: usize,
    pub metrics: MetricsReport,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "problem,m,rmse,rel,delta1,delta2,delta3";

    pub fn csv_row(&self) -> String {
        let r = &self.metrics;
        format!(
            "{},{},{},{},{},{},{}",
            self.problem, self.m, r.rmse, r.rel, r.delta1, r.delta2, r.delta3
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SweepRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// The `(problem, m)` jobs of a sweep: RGB contributes a single `m = 0` job,
/// depth problems one job per positive sample count.
pub fn sweep_jobs(problems: &[Problem], sample_counts: &[usize]) -> Vec<(Problem, usize)> {
    let mut jobs = Vec::new();
    for &p in problems {
        if p == Problem::Rgb {
            jobs.push((p, 0));
        } else {
            jobs.extend(sample_counts.iter().filter(|&&m| m > 0).map(|&m| (p, m)));
        }
    }
    jobs
}

/// Trains one model per `(problem, m, seed)` and reports test metrics
/// averaged over seeds. `progress` receives a line per finished training.
pub fn sweep<A, B>(
    template: &TrainConfig,
    problems: &[Problem],
    sample_counts: &[usize],
    seeds: &[u64],
    train_set: &A,
    test_set: &B,
    mut progress: impl FnMut(&str),
) -> Result<Vec<SweepRow>>
where
    A: FrameSource + ?Sized,
    B: FrameSource + ?Sized,
{
    if sample_counts.is_empty() || seeds.is_empty() || problems.is_empty() {
        return invalid("sweep needs at least one problem, sample count and seed");
    }
    let jobs = sweep_jobs(problems, sample_counts);
    if let Some(&max_m) = sample_counts.iter().max() {
        let min_valid = min_valid_pixels(train_set, template.crop())?.min(min_valid_pixels(test_set, template.crop())?);
        if jobs.iter().any(|&(p, _)| p.uses_depth()) && max_m > min_valid {
            return invalid(format!(
                "sample count {max_m} exceeds the smallest valid-pixel count {min_valid} in the data"
            ));
        }
    }
    let mut rows = Vec::new();
    for (problem, m) in jobs {
        let mut reports = Vec::new();
        for &s in seeds {
            let mut cfg = template.clone();
            cfg.problem = problem;
            cfg.samples = SampleCount::Fixed(m);
            cfg.seed = s;
            cfg.model.input_channels = problem.input_channels();
            let mut t = Trainer::new(cfg.clone())?;
            t.run(train_set, |_, _| Ok(()))?;
            let report = evaluate(&t.predictor(), &EvalSettings::from(&cfg), test_set, s)?;
            progress(&format!("{problem} m={m} seed={s}: {report}"));
            reports.push(report);
        }
        rows.push(SweepRow {
            problem,
            m,
            metrics: MetricsReport::mean(&reports).expect("at least one seed"),
        });
    }
    Ok(rows)
}

fn min_valid_pixels<S: FrameSource + ?Sized>(data: &S, crop: (usize, usize)) -> Result<usize> {
    let mut min = usize::MAX;
    for i in 0..data.len() {
        let f = data.frame(i)?;
        let f = f.center_crop(crop.0.min(f.height()), crop.1.min(f.width()))?;
        min = min.min(f.depth.valid_count());
    }
    Ok(min)
}
