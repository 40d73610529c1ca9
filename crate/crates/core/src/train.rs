//! Synthetic tasks, the training loop, loss volatility and variant comparison.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterLayer, BackwardOptions, GradientBundle, Mode, Variant};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, dot, matmul_nt, rng_from_seed, seeded_gaussian, DetRng, Matrix, Vector};
use crate::model::{self, ToyNet};
use crate::optim::{adamw_step, clip_global_norm, lr_at, OptimConfig, OptimState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Regression onto a frozen weight plus a known-rank residual; trains a single layer.
    TeacherStudent,
    /// Classification with labels from a perturbed copy of the toy network.
    SynthClassify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Total samples, holdout included.
    pub n: usize,
    /// Trailing samples kept out of every update.
    pub holdout: usize,
    /// Rank of the teacher residual.
    pub rank_gap: usize,
    pub noise: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub n_classes: usize,
    /// Modules of the toy network that receive adapters.
    pub targets: Vec<String>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::TeacherStudent,
            d_in: 64,
            d_out: 64,
            n: 512,
            holdout: 64,
            rank_gap: 8,
            noise: 0.05,
            seed: 0,
            embed_dim: 16,
            n_classes: 4,
            targets: ["q", "k", "v", "o"].map(String::from).to_vec(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.holdout >= self.n {
            return Err(Error::Config(format!("holdout ({}) must be below n ({})", self.holdout, self.n)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        let (a, b) = match self.kind {
            TaskKind::TeacherStudent => (self.d_in, self.d_out),
            TaskKind::SynthClassify => (self.embed_dim, self.embed_dim),
        };
        if a == 0 || b == 0 {
            return Err(Error::Config("task dimensions must be >= 1".into()));
        }
        if self.rank_gap > a.min(b) {
            return Err(Error::Config(format!("rank_gap {} exceeds min dims {}", self.rank_gap, a.min(b))));
        }
        if self.kind == TaskKind::SynthClassify && self.n_classes < 2 {
            return Err(Error::Config("synth_classify needs n_classes >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    fn rows(&self, idx: &[usize]) -> Result<Dataset> {
        let pick = |m: &Matrix| Matrix::from_fn(idx.len(), m.cols(), |r, c| m.get(idx[r], c));
        if idx.is_empty() {
            return Err(Error::Input("empty row selection".into()));
        }
        let y = match &self.y {
            Targets::Regression(t) => Targets::Regression(pick(t)),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
        };
        Ok(Dataset { x: pick(&self.x), y })
    }

    fn split(&self, holdout: usize) -> Result<(Dataset, Option<Dataset>)> {
        let n_train = self.len() - holdout;
        let train = self.rows(&(0..n_train).collect::<Vec<_>>())?;
        let hold = (holdout > 0).then(|| self.rows(&(n_train..self.len()).collect::<Vec<_>>())).transpose()?;
        Ok((train, hold))
    }
}

/// Generated regression problem with the frozen weight the student starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherStudent {
    pub w0: Matrix,
    /// `ΔW_teacher`, `d_out × d_in`, rank `rank_gap`, columns on the norm sphere of `W0`.
    pub residual: Matrix,
    pub data: Dataset,
}

/// Rank-`rank` residual with column `j` rescaled so that `‖W0_j + R_j‖ = ‖W0_j‖`.
fn norm_preserving_residual(w0: &Matrix, rank: usize, seed: u64) -> Result<Matrix> {
    let (d_out, d_in) = w0.shape();
    if rank == 0 {
        return Ok(Matrix::zeros(d_out, d_in));
    }
    let left = seeded_gaussian(d_out, rank, 1.0, derive_seed(seed, 1));
    let right = seeded_gaussian(rank, d_in, 1.0, derive_seed(seed, 2));
    let raw = left.matmul(&right)?;
    let mut out = Matrix::zeros(d_out, d_in);
    for j in 0..d_in {
        let w = w0.column(j);
        let r = raw.column(j);
        let rr = dot(&r, &r);
        // Nonzero root of ‖w + c·r‖² = ‖w‖².
        let c = if rr > 0.0 { -2.0 * dot(&w, &r) / rr } else { 0.0 };
        for (i, rv) in r.iter().enumerate() {
            out.set(i, j, c * rv);
        }
    }
    Ok(out)
}

pub fn gen_teacher_student(
    d_in: usize,
    d_out: usize,
    rank_gap: usize,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<TeacherStudent> {
    if rank_gap > d_in.min(d_out) {
        return Err(Error::Config(format!("rank_gap {rank_gap} exceeds min({d_in}, {d_out})")));
    }
    if n == 0 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let w0 = seeded_gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), derive_seed(seed, 10));
    let residual = norm_preserving_residual(&w0, rank_gap, derive_seed(seed, 11))?;
    let teacher = w0.add(&residual)?;
    let x = seeded_gaussian(n, d_in, 1.0, derive_seed(seed, 12));
    let mut y = matmul_nt(&x, &teacher)?;
    if noise > 0.0 {
        y.add_assign(&seeded_gaussian(n, d_out, noise, derive_seed(seed, 13)))?;
    }
    Ok(TeacherStudent { w0, residual, data: Dataset { x, y: Targets::Regression(y) } })
}

/// Labels are the argmax logits of a teacher network whose `q, k, v, o` weights
/// carry a norm-preserving rank-`rank_gap` residual.
pub fn gen_synth_classify(task: &TaskSpec) -> Result<(ToyNet, Dataset)> {
    let base = model::build_toy_net(task.embed_dim, task.n_classes, task.seed)?;
    let mut teacher = base.clone();
    for (i, name) in ["q", "k", "v", "o"].iter().enumerate() {
        let m = teacher.module_mut(name).expect("fixed module layout");
        let r = norm_preserving_residual(m.weight(), task.rank_gap, derive_seed(task.seed, 20 + i as u64))?;
        let w = m.weight().add(&r)?;
        m.set_weight(w)?;
    }
    let x = seeded_gaussian(task.n, base.seq_len() * task.embed_dim, 1.0, derive_seed(task.seed, 30));
    let tokens = teacher.tokens_from_samples(&x)?;
    let (logits, _) = model::net_forward(&teacher, &tokens, Mode::Eval, &mut rng_from_seed(0))?;
    let labels = (0..logits.rows())
        .map(|r| {
            logits
                .row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                .0
        })
        .collect();
    Ok((base, Dataset { x, y: Targets::Classes(labels) }))
}

/// What a training step needs from a model.
pub trait Learner {
    /// Train-mode loss and adapter gradients on one micro-batch, plus the
    /// number of clamped columns seen in the forward pass.
    fn loss_and_grads(
        &self,
        batch: &Dataset,
        rng: &mut DetRng,
        opts: BackwardOptions,
    ) -> Result<(f64, Vec<GradientBundle>, usize)>;

    /// Eval-mode loss over a whole dataset.
    fn eval_loss(&self, data: &Dataset) -> Result<f64>;

    fn parameters_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>>;

    fn trainable_parameters(&self) -> usize;
}

fn regression_targets(data: &Dataset) -> Result<&Matrix> {
    match &data.y {
        Targets::Regression(t) => Ok(t),
        Targets::Classes(_) => Err(Error::Config("a single layer trains on regression targets only".into())),
    }
}

fn class_targets(data: &Dataset) -> Result<&[usize]> {
    match &data.y {
        Targets::Classes(c) => Ok(c),
        Targets::Regression(_) => Err(Error::Config("the toy network trains on class labels only".into())),
    }
}

/// Mean squared error over all entries and its gradient.
fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = pred.sub(target)?;
    let n = diff.data().len() as f64;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.scale(2.0 / n)))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= logits.cols() {
            return Err(Error::Input(format!("label {label} out of range")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += total.ln() + max - row[label];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - max).exp() / total;
            *g = (p - if c == label { 1.0 } else { 0.0 }) / b;
        }
    }
    Ok((loss / b, grad))
}

impl Learner for AdapterLayer {
    fn loss_and_grads(
        &self,
        batch: &Dataset,
        rng: &mut DetRng,
        opts: BackwardOptions,
    ) -> Result<(f64, Vec<GradientBundle>, usize)> {
        let (y, cache) = self.forward(&batch.x, Mode::Train, rng)?;
        let (loss, dy) = mse(&y, regression_targets(batch)?)?;
        let (g, _) = self.backward_with(&cache, &dy, opts)?;
        Ok((loss, vec![g], cache.clamp_count()))
    }

    fn eval_loss(&self, data: &Dataset) -> Result<f64> {
        let y = if self.is_merged() {
            self.merged_forward(&data.x)?
        } else {
            self.forward(&data.x, Mode::Eval, &mut rng_from_seed(0))?.0
        };
        Ok(mse(&y, regression_targets(data)?)?.0)
    }

    fn parameters_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>> {
        AdapterLayer::parameters_mut(self)
    }

    fn trainable_parameters(&self) -> usize {
        self.count_parameters().trainable
    }
}

impl Learner for ToyNet {
    fn loss_and_grads(
        &self,
        batch: &Dataset,
        rng: &mut DetRng,
        opts: BackwardOptions,
    ) -> Result<(f64, Vec<GradientBundle>, usize)> {
        let tokens = self.tokens_from_samples(&batch.x)?;
        let (logits, cache) = model::net_forward(self, &tokens, Mode::Train, rng)?;
        let (loss, d) = cross_entropy(&logits, class_targets(batch)?)?;
        let grads = model::net_backward_with(self, &cache, &d, opts)?;
        let clamps = cache.clamp_count();
        Ok((loss, grads.adapters.into_iter().map(|(_, g)| g).collect(), clamps))
    }

    fn eval_loss(&self, data: &Dataset) -> Result<f64> {
        let tokens = self.tokens_from_samples(&data.x)?;
        let (logits, _) = model::net_forward(self, &tokens, Mode::Eval, &mut rng_from_seed(0))?;
        Ok(cross_entropy(&logits, class_targets(data)?)?.0)
    }

    fn parameters_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>> {
        ToyNet::parameters_mut(self)
    }

    fn trainable_parameters(&self) -> usize {
        ToyNet::trainable_parameters(self)
    }
}

/// The model a task trains: one adapted layer or the adapted toy network.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Student {
    Layer(AdapterLayer),
    Net(ToyNet),
}

impl Student {
    fn inner(&self) -> &dyn Learner {
        match self {
            Student::Layer(l) => l,
            Student::Net(n) => n,
        }
    }

    /// Checkpoint bytes: an adapter section for a layer, a network checkpoint otherwise.
    pub fn encode(&self) -> Result<Vec<u8>> {
        match self {
            Student::Layer(l) => crate::adapter::checkpoint::encode_layer(l),
            Student::Net(n) => model::encode_net(n),
        }
    }
}

impl Learner for Student {
    fn loss_and_grads(
        &self,
        batch: &Dataset,
        rng: &mut DetRng,
        opts: BackwardOptions,
    ) -> Result<(f64, Vec<GradientBundle>, usize)> {
        self.inner().loss_and_grads(batch, rng, opts)
    }

    fn eval_loss(&self, data: &Dataset) -> Result<f64> {
        self.inner().eval_loss(data)
    }

    fn parameters_mut(&mut self) -> Result<Vec<(&mut [f64], bool)>> {
        match self {
            Student::Layer(l) => Learner::parameters_mut(l),
            Student::Net(n) => Learner::parameters_mut(n),
        }
    }

    fn trainable_parameters(&self) -> usize {
        self.inner().trainable_parameters()
    }
}

/// Generate the task data and a fresh student carrying adapters built from `adapter`.
pub fn prepare(task: &TaskSpec, adapter: &AdapterConfig) -> Result<(Student, Dataset)> {
    task.validate()?;
    match task.kind {
        TaskKind::TeacherStudent => {
            let ts = gen_teacher_student(task.d_in, task.d_out, task.rank_gap, task.n, task.noise, task.seed)?;
            let layer = AdapterLayer::new(ts.w0, Vector::zeros(task.d_out), adapter.clone())?;
            Ok((Student::Layer(layer), ts.data))
        }
        TaskKind::SynthClassify => {
            let (mut net, data) = gen_synth_classify(task)?;
            let targets: Vec<&str> = task.targets.iter().map(String::as_str).collect();
            model::inject_adapters(&mut net, &targets, adapter)?;
            Ok((Student::Net(net), data))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    /// Micro-batch size.
    pub batch: usize,
    /// Micro-batches per update.
    pub accum: usize,
    /// Number of updates; `None` means as many as `epochs` allow.
    pub steps: Option<usize>,
    pub seed: u64,
    pub volatility_window: usize,
    /// Measure wall-clock time. Off by default so outputs stay byte-stable.
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { epochs: 2, batch: 16, accum: 2, steps: None, seed: 0, volatility_window: 20, timing: false }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.accum == 0 {
            return Err(Error::Config("batch and accum must be >= 1".into()));
        }
        if self.volatility_window < 2 {
            return Err(Error::Config("volatility_window must be >= 2".into()));
        }
        Ok(())
    }

    /// Updates the run performs on `n_train` samples.
    pub fn total_steps(&self, n_train: usize) -> usize {
        self.steps.unwrap_or(self.epochs * (n_train / self.batch) / self.accum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Training loss of each update: train-mode loss of its micro-batches,
    /// averaged over accumulation.
    pub trace: Vec<f64>,
    /// Eval-mode loss on the full training split before each update.
    pub eval_trace: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// Eval-mode loss on the full training split after the last update.
    pub final_loss: f64,
    pub holdout_loss: Option<f64>,
    /// Population std of consecutive differences of `trace`; 0 for traces shorter than 3.
    pub sigma_diff: f64,
    /// The same statistic over `eval_trace`.
    pub eval_sigma_diff: f64,
    /// `sigma_diff` over each window of `volatility_window` consecutive differences.
    pub rolling_sigma: Vec<f64>,
    pub clamp_per_epoch: Vec<usize>,
    pub clamp_events: usize,
    pub trainable_params: usize,
    pub wall_ms: u64,
    pub steps: usize,
    pub seed: u64,
}

/// Population standard deviation of consecutive differences.
pub fn volatility(trace: &[f64]) -> Result<f64> {
    if trace.len() < 3 {
        return Err(Error::Input(format!("volatility needs at least 3 points, got {}", trace.len())));
    }
    let diffs: Vec<f64> = trace.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(population_std(&diffs))
}

fn volatility_or_zero(trace: &[f64]) -> Result<f64> {
    match volatility(trace) {
        Err(Error::Input(_)) => Ok(0.0),
        other => other,
    }
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Population std over each window of `window` consecutive differences.
pub fn rolling_volatility(trace: &[f64], window: usize) -> Result<Vec<f64>> {
    if window < 2 {
        return Err(Error::Config("rolling window must be >= 2".into()));
    }
    let diffs: Vec<f64> = trace.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(diffs.windows(window).map(population_std).collect())
}

fn accumulate(total: &mut Option<Vec<GradientBundle>>, grads: Vec<GradientBundle>, weight: f64) -> Result<()> {
    match total {
        None => {
            let mut g = grads;
            for bundle in &mut g {
                for t in bundle.tensors_mut() {
                    t.iter_mut().for_each(|v| *v *= weight);
                }
            }
            *total = Some(g);
        }
        Some(acc) => {
            if acc.len() != grads.len() {
                return Err(Error::Shape("gradient bundle count changed between micro-batches".into()));
            }
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (ta, tg) in a.tensors_mut().into_iter().zip(g.tensors()) {
                    ta.iter_mut().zip(tg).for_each(|(x, y)| *x += weight * y);
                }
            }
        }
    }
    Ok(())
}

/// Minimise the task loss over adapter parameters only.
///
/// Each update averages `accum` micro-batches drawn from a per-epoch shuffle of
/// `train` (the partial tail batch is dropped), clips the global gradient norm
/// and takes one AdamW step at `lr_at(update_index + 1)`.
pub fn train_loop<L: Learner>(
    learner: &mut L,
    train: &Dataset,
    holdout: Option<&Dataset>,
    optim: &OptimConfig,
    run: &RunConfig,
) -> Result<TrainReport> {
    optim.validate()?;
    run.validate()?;
    let n = train.len();
    if n < run.batch {
        return Err(Error::Config(format!("training split ({n}) is smaller than one batch ({})", run.batch)));
    }
    let steps = run.total_steps(n);
    let micro_per_epoch = n / run.batch;
    let opts = BackwardOptions { tangent_projection: optim.tangent_projection };
    let started = Instant::now();

    let mut shuffle_rng = rng_from_seed(derive_seed(run.seed, 1));
    let mut dropout_rng = rng_from_seed(derive_seed(run.seed, 2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut shuffle_rng);
    let mut micro_seen = 0usize;
    let mut state = OptimState::new();

    let mut report = TrainReport {
        trace: Vec::with_capacity(steps),
        eval_trace: Vec::with_capacity(steps),
        learning_rates: Vec::with_capacity(steps),
        final_loss: 0.0,
        holdout_loss: None,
        sigma_diff: 0.0,
        eval_sigma_diff: 0.0,
        rolling_sigma: Vec::new(),
        clamp_per_epoch: Vec::new(),
        clamp_events: 0,
        trainable_params: learner.trainable_parameters(),
        wall_ms: 0,
        steps,
        seed: run.seed,
    };

    for step in 0..steps {
        let loss = learner.eval_loss(train)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step, clamp_events: report.clamp_events });
        }
        report.eval_trace.push(loss);

        let mut grads = None;
        let mut batch_loss = 0.0;
        for _ in 0..run.accum {
            let slot = micro_seen % micro_per_epoch;
            if slot == 0 && micro_seen > 0 {
                order.shuffle(&mut shuffle_rng);
            }
            let epoch = micro_seen / micro_per_epoch;
            if report.clamp_per_epoch.len() <= epoch {
                report.clamp_per_epoch.push(0);
            }
            let batch = train.rows(&order[slot * run.batch..(slot + 1) * run.batch])?;
            let (l, g, clamps) = learner.loss_and_grads(&batch, &mut dropout_rng, opts)?;
            report.clamp_per_epoch[epoch] += clamps;
            report.clamp_events += clamps;
            if !l.is_finite() {
                return Err(Error::NonFinite { step, clamp_events: report.clamp_events });
            }
            batch_loss += l / run.accum as f64;
            accumulate(&mut grads, g, 1.0 / run.accum as f64)?;
            micro_seen += 1;
        }
        report.trace.push(batch_loss);

        let mut grads = grads.expect("accum >= 1");
        clip_global_norm(&mut grads, optim.clip_norm)?;
        let lr = lr_at(step + 1, optim)?;
        report.learning_rates.push(lr);
        let flat: Vec<&[f64]> = grads.iter().flat_map(GradientBundle::tensors).collect();
        let mut params = learner.parameters_mut()?;
        adamw_step(&mut params, &flat, &mut state, optim, lr)?;
    }

    report.final_loss = learner.eval_loss(train)?;
    if !report.final_loss.is_finite() {
        return Err(Error::NonFinite { step: steps, clamp_events: report.clamp_events });
    }
    report.holdout_loss = holdout.map(|h| learner.eval_loss(h)).transpose()?;
    report.sigma_diff = volatility_or_zero(&report.trace)?;
    report.eval_sigma_diff = volatility_or_zero(&report.eval_trace)?;
    report.rolling_sigma = rolling_volatility(&report.trace, run.volatility_window)?;
    if run.timing {
        report.wall_ms = started.elapsed().as_millis() as u64;
    }
    Ok(report)
}

/// Build the task, train a fresh student and return it with its report.
pub fn run_task(
    task: &TaskSpec,
    adapter: &AdapterConfig,
    optim: &OptimConfig,
    run: &RunConfig,
) -> Result<(Student, TrainReport)> {
    let (mut student, data) = prepare(task, adapter)?;
    let (train, holdout) = data.split(task.holdout)?;
    let report = train_loop(&mut student, &train, holdout.as_ref(), optim, run)?;
    Ok((student, report))
}

pub const COMPARE_HEADER: &str = "variant,seed,steps,final_loss,sigma_diff,trainable_params,clamp_events,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub sigma_diff: f64,
    pub trainable_params: usize,
    pub clamp_events: usize,
    pub wall_ms: u64,
}

impl CompareRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.variant.name(),
            self.seed,
            self.steps,
            self.final_loss,
            self.sigma_diff,
            self.trainable_params,
            self.clamp_events,
            self.wall_ms
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub median_final_loss: f64,
    pub median_sigma_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub summary: Vec<VariantSummary>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARE_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn summary_for(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Train LoRA, DoRA-like and the signed projected adapter on the same data
/// for every seed. Seed `s` sets both the adapter init and the run seed.
/// Runs fan out over `threads` workers; row order is fixed (variant, then seed).
pub fn compare_variants(
    task: &TaskSpec,
    seeds: &[u64],
    base: &AdapterConfig,
    optim: &OptimConfig,
    run: &RunConfig,
    threads: Option<usize>,
) -> Result<Comparison> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("compare needs at least 3 seeds, got {}", seeds.len())));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let work = |&(variant, seed): &(Variant, u64)| -> Result<CompareRow> {
        let cfg = AdapterConfig { seed, ..variant.apply(base) };
        let run = RunConfig { seed, ..run.clone() };
        let (_, report) = run_task(task, &cfg, optim, &run)?;
        Ok(CompareRow {
            variant,
            seed,
            steps: report.steps,
            final_loss: report.final_loss,
            sigma_diff: report.sigma_diff,
            trainable_params: report.trainable_params,
            clamp_events: report.clamp_events,
            wall_ms: report.wall_ms,
        })
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows = pool.install(|| jobs.par_iter().map(work).collect::<Result<Vec<_>>>())?;

    let summary = Variant::ALL
        .iter()
        .map(|&v| {
            let of = |f: fn(&CompareRow) -> f64| rows.iter().filter(|r| r.variant == v).map(f).collect::<Vec<_>>();
            Ok(VariantSummary {
                variant: v,
                median_final_loss: median(&of(|r| r.final_loss))?,
                median_sigma_diff: median(&of(|r| r.sigma_diff))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison { rows, summary })
}

#[cfg(test)]
mod tests;
