//! Teacher training, distillation loops and evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapter::{
    instance_repr, integrate_soft_targets, teacher_scores, teacher_weights, AdapterParams, AdapterVars,
    TeacherBundle, TeacherOutputs,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    angle_loss, cross_entropy, hint_loss, kd_kl, regressor_descriptor, total_loss, LossComponents, LossTerms,
    LossWeights,
};
use crate::nn::{build_model, sgd_step, Model, SgdState};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Student trained on labels alone.
    Indep,
    /// Single-teacher soft-target distillation.
    Okd,
    /// Single-teacher hint regression on top of cross-entropy.
    Fitnet,
    /// Uniform average of several teachers.
    Avgmkd,
    /// Adaptive per-instance teacher weighting with angle and hint terms.
    Amtml,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Indep,
        Method::Okd,
        Method::Fitnet,
        Method::Avgmkd,
        Method::Amtml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Indep => "indep",
            Method::Okd => "okd",
            Method::Fitnet => "fitnet",
            Method::Avgmkd => "avgmkd",
            Method::Amtml => "amtml",
        }
    }

    fn uses_soft_targets(self) -> bool {
        matches!(self, Method::Okd | Method::Avgmkd | Method::Amtml)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method {s:?} (indep, okd, fitnet, avgmkd, amtml)"
            ))
        })
    }
}

/// How teachers are matched to student layer groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MappingStrategy {
    /// Most accurate teacher guides the deepest group.
    BestToHigh,
    /// Most accurate teacher guides the shallowest group.
    BestToLow,
    /// Seeded random permutation.
    Random,
}

impl MappingStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MappingStrategy::BestToHigh => "best_to_high",
            MappingStrategy::BestToLow => "best_to_low",
            MappingStrategy::Random => "random",
        }
    }
}

impl fmt::Display for MappingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            MappingStrategy::BestToHigh,
            MappingStrategy::BestToLow,
            MappingStrategy::Random,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown mapping {s:?} (best_to_high, best_to_low, random)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub method: Method,
    pub temperature: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mapping: MappingStrategy,
    /// Maximum number of ordered triplets per batch for the angle loss.
    pub triplet_budget: usize,
    pub seed: u64,
    /// Stop gradients from the teacher weights into the student features.
    pub detach_delta: bool,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    /// Multiply the KL term by `T²`.
    pub t2_scaling: bool,
    /// Compare angles on `T = 1` probabilities instead of tempered ones.
    pub angle_unit_temperature: bool,
    /// Keep the adapter at its initial values.
    pub freeze_adapter: bool,
    /// Start every teacher factor from the same sample.
    pub tie_thetas: bool,
    /// Compute teacher outputs once for the whole training set.
    pub cache_teacher_outputs: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            method: Method::Amtml,
            temperature: 5.0,
            lambda: 0.7,
            alpha: 1.0,
            beta: 2.0,
            batch_size: 128,
            epochs: 30,
            mapping: MappingStrategy::BestToHigh,
            triplet_budget: 256,
            seed: 0,
            detach_delta: false,
            lr: 0.1,
            decay_epochs: vec![100, 150],
            decay_factor: 0.1,
            momentum: 0.9,
            t2_scaling: true,
            angle_unit_temperature: false,
            freeze_adapter: false,
            tie_thetas: false,
            cache_teacher_outputs: false,
        }
    }
}

impl DistillConfig {
    /// Loss weights actually applied by the configured method.
    pub fn effective_weights(&self) -> LossWeights {
        let w = LossWeights {
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
        };
        match self.method {
            Method::Indep => LossWeights {
                lambda: 0.0,
                alpha: 0.0,
                beta: 0.0,
            },
            Method::Okd => LossWeights {
                alpha: 0.0,
                beta: 0.0,
                ..w
            },
            // single-teacher hint objective carries a one-half factor
            Method::Fitnet => LossWeights {
                lambda: 0.0,
                alpha: 0.0,
                beta: 0.5 * self.beta,
            },
            Method::Avgmkd | Method::Amtml => w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.effective_weights();
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if w.alpha > 0.0 && self.batch_size < 3 {
            return Err(Error::Config(format!(
                "angle loss needs batches of at least 3 examples, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        SgdState::new(
            self.lr,
            self.decay_epochs.clone(),
            self.decay_factor,
            self.momentum,
        )?;
        Ok(())
    }

    /// `key=value` lines covering every effective hyperparameter.
    pub fn echo(&self) -> Vec<(String, String)> {
        let w = self.effective_weights();
        let decay = self
            .decay_epochs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(",");
        [
            ("method", self.method.to_string()),
            ("temp", self.temperature.to_string()),
            ("lambda", self.lambda.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("effective_lambda", w.lambda.to_string()),
            ("effective_alpha", w.alpha.to_string()),
            ("effective_beta", w.beta.to_string()),
            ("batch", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("mapping", self.mapping.to_string()),
            ("triplet_budget", self.triplet_budget.to_string()),
            ("seed", self.seed.to_string()),
            ("detach_delta", self.detach_delta.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay_epochs", decay),
            ("lr_decay_factor", self.decay_factor.to_string()),
            ("momentum", self.momentum.to_string()),
            ("t2_scaling", self.t2_scaling.to_string()),
            ("angle_unit_temp", self.angle_unit_temperature.to_string()),
            ("freeze_adapter", self.freeze_adapter.to_string()),
            ("tie_thetas", self.tie_thetas.to_string()),
            ("cache_teacher_outputs", self.cache_teacher_outputs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// Maps teacher `t` to student group `mapping[t]`.
pub fn assign_groups(
    val_accuracy: &[f64],
    groups: usize,
    strategy: MappingStrategy,
    seed: u64,
) -> Result<Vec<usize>> {
    let m = val_accuracy.len();
    if groups != m {
        return Err(Error::Config(format!(
            "{m} teachers need {m} student groups, found {groups}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    match strategy {
        MappingStrategy::BestToHigh | MappingStrategy::BestToLow => {
            order.sort_by(|&a, &b| val_accuracy[a].total_cmp(&val_accuracy[b]).then(a.cmp(&b)));
            if strategy == MappingStrategy::BestToLow {
                order.reverse();
            }
        }
        MappingStrategy::Random => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let mut mapping = vec![0; m];
    for (group, &teacher) in order.iter().enumerate() {
        mapping[teacher] = group;
    }
    Ok(mapping)
}

/// Ordered triplets of distinct batch positions: all of them when they fit
/// in `budget`, otherwise `budget` drawn uniformly without replacement.
pub fn sample_triplets(batch_size: usize, budget: usize, rng: &mut impl Rng) -> Vec<(usize, usize, usize)> {
    let n = batch_size;
    if n < 3 {
        return Vec::new();
    }
    let total = n * (n - 1) * (n - 2);
    let decode = |code: usize| {
        let i = code / ((n - 1) * (n - 2));
        let rest = code % ((n - 1) * (n - 2));
        let (mut j, mut k) = (rest / (n - 2), rest % (n - 2));
        if j >= i {
            j += 1;
        }
        let (lo, hi) = (i.min(j), i.max(j));
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        (i, j, k)
    };
    if total <= budget {
        (0..total).map(decode).collect()
    } else {
        index::sample(rng, total, budget)
            .into_iter()
            .map(decode)
            .collect()
    }
}

/// Top-1 accuracy; ties go to the lowest class index.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let k = model.num_classes();
    if k != dataset.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {k} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    let mut correct = 0usize;
    for (_, batch, labels) in dataset.chunks(256) {
        let logits = model.predict(&batch)?;
        for (row, &label) in logits.values().chunks(k).zip(&labels) {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Cross-entropy training schedule for teachers.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        TeacherTraining {
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_TRIPLETS: u64 = 3;
const STREAM_ADAPTER: u64 = 4;
const STREAM_REGRESSORS: u64 = 5;
const STREAM_MAPPING: u64 = 6;

fn check_finite(value: f64, component: &str, epoch: usize, batch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            component: component.to_string(),
            epoch,
            batch,
        })
    }
}

/// Trains a classifier with cross-entropy on a seeded 90% split of
/// `dataset` and returns it with its accuracy on the held-out 10%.
pub fn train_teacher(
    arch: &str,
    dataset: &Dataset,
    training: &TeacherTraining,
    seed: u64,
) -> Result<(Model, f64)> {
    if training.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (train, val) = dataset.split(0.9, seed);
    let mut model = build_model(arch, dataset.example_shape(), dataset.num_classes(), {
        stream_rng(seed, STREAM_INIT).random()
    })?;
    let mut sgd = SgdState::new(
        training.lr,
        training.decay_epochs.clone(),
        training.decay_factor,
        training.momentum,
    )?;
    let mut shuffle = stream_rng(seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..training.epochs {
        order.shuffle(&mut shuffle);
        for (b, idx) in order.chunks(training.batch_size).enumerate() {
            let (x, labels) = train.gather(idx);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let trace = model.forward(&mut g, xv, true)?;
            let ce = cross_entropy(&mut g, trace.logits, &labels)?;
            check_finite(g.scalar(ce), "ce", epoch, b)?;
            g.backward(ce)?;
            model.accumulate_grads(&g, &trace);
            sgd_step(&mut model, None, &mut [], &mut sgd, epoch)?;
        }
    }
    let held_out = if val.is_empty() { &train } else { &val };
    let acc = evaluate(&model, held_out)?;
    Ok((model, acc))
}

/// One line of a run report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of every term.
    pub terms: LossTerms,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: DistillConfig,
    pub epochs: Vec<EpochRecord>,
    /// Per-epoch, per-batch loss terms.
    pub batches: Vec<Vec<LossTerms>>,
    pub final_test_acc: f64,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub const HEADER: &'static str = "epoch,ce,kd_kl,angle,hint,total,train_acc,test_acc";

    /// Per-epoch CSV rows followed by a summary line. Wall-clock time is
    /// left out so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.epochs {
            let t = &r.terms;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, t.ce, t.kd_kl, t.angle, t.hint, t.total, r.train_acc, r.test_acc
            ));
        }
        out.push_str(&format!("summary,final_test_acc={}", self.final_test_acc));
        for (k, v) in self.config.echo() {
            out.push_str(&format!(",{k}={}", v.replace(',', ";")));
        }
        out.push('\n');
        out
    }
}

/// Everything a distillation run produces.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: Model,
    /// Present for `amtml`.
    pub adapter: Option<AdapterParams>,
    /// Hint regressors, one per teacher, when the hint term is active.
    pub regressors: Vec<Model>,
    /// Student group assigned to each teacher, when the hint term is active.
    pub mapping: Vec<usize>,
    pub report: RunReport,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let row: usize = t.dims()[1..].iter().product();
    let mut values = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        values.extend_from_slice(&t.values()[i * row..(i + 1) * row]);
    }
    let mut dims = t.dims().to_vec();
    dims[0] = idx.len();
    Tensor::new(dims, values).expect("gathered rows are well-formed")
}

struct TeacherCache {
    tempered: TeacherOutputs,
    unit: Option<TeacherOutputs>,
}

impl TeacherCache {
    fn gather(&self, idx: &[usize]) -> (TeacherOutputs, Option<TeacherOutputs>) {
        let pick = |o: &TeacherOutputs| TeacherOutputs {
            soft: o.soft.iter().map(|t| gather_rows(t, idx)).collect(),
            features: o.features.iter().map(|t| gather_rows(t, idx)).collect(),
        };
        (pick(&self.tempered), self.unit.as_ref().map(pick))
    }
}

fn check_compatibility(
    method: Method,
    teachers: Option<&TeacherBundle>,
    train: &Dataset,
    test: &Dataset,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.num_classes() != test.num_classes() || train.example_shape() != test.example_shape() {
        return Err(Error::Config(
            "train and test sets disagree on classes or example shape".into(),
        ));
    }
    let Some(bundle) = teachers else {
        return match method {
            Method::Indep => Ok(()),
            _ => Err(Error::Config(format!("method {method} needs teachers"))),
        };
    };
    let m = bundle.len();
    match method {
        Method::Okd | Method::Fitnet if m != 1 => {
            return Err(Error::Config(format!(
                "method {method} takes exactly one teacher, got {m}"
            )))
        }
        _ => {}
    }
    for (t, model) in bundle.models.iter().enumerate() {
        if model.num_classes() != train.num_classes() {
            return Err(Error::Config(format!(
                "teacher {t} predicts {} classes, dataset has {}",
                model.num_classes(),
                train.num_classes()
            )));
        }
        if model.input_shape() != train.example_shape() {
            return Err(Error::Config(format!(
                "teacher {t} expects inputs {:?}, dataset has {:?}",
                model.input_shape(),
                train.example_shape()
            )));
        }
    }
    Ok(())
}

/// Trains a student from `student_arch` on `train` under `config.method`,
/// reporting test accuracy on `test` after every epoch.
pub fn distill(
    config: &DistillConfig,
    teachers: Option<&TeacherBundle>,
    student_arch: &str,
    train: &Dataset,
    test: &Dataset,
) -> Result<DistillOutcome> {
    let started = Instant::now();
    config.validate()?;
    check_compatibility(config.method, teachers, train, test)?;
    let weights = config.effective_weights();
    let method = config.method;
    let temp = config.temperature;

    let mut student = build_model(student_arch, train.example_shape(), train.num_classes(), {
        stream_rng(config.seed, STREAM_INIT).random()
    })?;
    let mut shuffle = stream_rng(config.seed, STREAM_SHUFFLE);
    let mut triplet_rng = stream_rng(config.seed, STREAM_TRIPLETS);

    let m = teachers.map_or(0, TeacherBundle::len);
    let use_hint = weights.beta > 0.0 && m > 0;
    let use_angle = weights.alpha > 0.0 && method.uses_soft_targets();
    let unit_needed = use_angle && config.angle_unit_temperature;

    let mut adapter = if method == Method::Amtml {
        let d = *student.feature_shape().first().unwrap_or(&0);
        let seed: u64 = stream_rng(config.seed, STREAM_ADAPTER).random();
        Some(if config.tie_thetas {
            AdapterParams::tied(m, d, seed)?
        } else {
            AdapterParams::new(m, d, seed)?
        })
    } else {
        None
    };
    let adapter_trained = adapter.is_some() && !config.freeze_adapter && (weights.lambda > 0.0 || use_angle);

    let (mut regressors, mapping) = if use_hint {
        let bundle = teachers.expect("hint requires teachers");
        student.set_groups(m)?;
        let mapping = assign_groups(
            &bundle.val_accuracy,
            student.num_groups(),
            config.mapping,
            stream_rng(config.seed, STREAM_MAPPING).random(),
        )?;
        let mut reg_rng = stream_rng(config.seed, STREAM_REGRESSORS);
        let group_shapes: Vec<Vec<usize>> =
            student.group_output_shapes().iter().map(|s| s.to_vec()).collect();
        let regressors = bundle
            .models
            .iter()
            .enumerate()
            .map(|(t, teacher)| {
                let input = &group_shapes[mapping[t]];
                Model::from_descriptor(
                    &regressor_descriptor(input, teacher.feature_shape()),
                    input,
                    reg_rng.random(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        (regressors, mapping)
    } else {
        (Vec::new(), Vec::new())
    };

    let cache = match teachers {
        Some(bundle) if config.cache_teacher_outputs => Some(TeacherCache {
            tempered: bundle.outputs(&train.features(), temp)?,
            unit: if unit_needed {
                Some(bundle.outputs(&train.features(), 1.0)?)
            } else {
                None
            },
        }),
        _ => None,
    };

    let mut sgd = SgdState::new(
        config.lr,
        config.decay_epochs.clone(),
        config.decay_factor,
        config.momentum,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut all_batches = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let mut batch_terms = Vec::new();
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = train.gather(idx);
            let (outs, unit_outs) = match (teachers, &cache) {
                (_, Some(c)) => {
                    let (o, u) = c.gather(idx);
                    (Some(o), u)
                }
                (Some(bundle), None) => (
                    Some(bundle.outputs(&x, temp)?),
                    if unit_needed {
                        Some(bundle.outputs(&x, 1.0)?)
                    } else {
                        None
                    },
                ),
                (None, None) => (None, None),
            };
            let triplets = if use_angle {
                sample_triplets(idx.len(), config.triplet_budget, &mut triplet_rng)
            } else {
                Vec::new()
            };

            let mut g = Graph::new();
            let xv = g.constant(&x);
            let trace = student.forward(&mut g, xv, true)?;
            let ce = cross_entropy(&mut g, trace.logits, &labels)?;

            let mut adapter_vars: Option<AdapterVars> = None;
            let mut kd = None;
            let mut angle = None;
            if method.uses_soft_targets() {
                let outs = outs.as_ref().expect("soft-target methods have teachers");
                let fusion: Option<Var> = match method {
                    Method::Amtml => {
                        let params = adapter.as_ref().expect("amtml has an adapter");
                        let vars = params.bind(&mut g, adapter_trained);
                        let mut delta = instance_repr(&mut g, trace.feature_map)?;
                        if config.detach_delta {
                            delta = g.detach(delta);
                        }
                        let scores = teacher_scores(&mut g, &vars, delta)?;
                        adapter_vars = Some(vars);
                        Some(teacher_weights(&mut g, scores)?)
                    }
                    Method::Avgmkd => Some(g.constant(&Tensor::full(&[idx.len(), m], 1.0 / m as f64))),
                    _ => None,
                };
                let fuse = |g: &mut Graph, softs: &[Tensor]| -> Result<Var> {
                    let vars: Vec<Var> = softs.iter().map(|s| g.constant(s)).collect();
                    match fusion {
                        Some(w) => integrate_soft_targets(g, w, &vars),
                        None => Ok(vars[0]),
                    }
                };
                let target = fuse(&mut g, &outs.soft)?;
                kd = Some(kd_kl(&mut g, target, trace.logits, temp, config.t2_scaling)?);
                if use_angle {
                    let (teacher_side, student_soft) = match &unit_outs {
                        Some(u) => (fuse(&mut g, &u.soft)?, g.softmax_t(trace.logits, 1.0)?),
                        None => (target, g.softmax_t(trace.logits, temp)?),
                    };
                    angle = Some(angle_loss(&mut g, teacher_side, student_soft, &triplets)?);
                }
            }

            let mut hint_traces = Vec::new();
            let hint = if use_hint {
                let outs = outs.as_ref().expect("hint methods have teachers");
                let features: Vec<Var> = outs.features.iter().map(|f| g.constant(f)).collect();
                let out = hint_loss(
                    &mut g,
                    &features,
                    &trace.group_outputs,
                    &regressors,
                    &mapping,
                    true,
                )?;
                hint_traces = out.regressor_traces;
                Some(out.loss)
            } else {
                None
            };

            let parts = LossComponents {
                ce,
                kd_kl: kd,
                angle,
                hint,
            };
            let (total, terms) = total_loss(&mut g, parts, weights).map_err(|e| match e {
                Error::NonFinite { component } => Error::Numeric {
                    component: component.to_string(),
                    epoch,
                    batch: b,
                },
                other => other,
            })?;
            g.backward(total)?;
            student.accumulate_grads(&g, &trace);
            if adapter_trained {
                if let (Some(a), Some(vars)) = (adapter.as_mut(), adapter_vars.as_ref()) {
                    a.accumulate_grads(&g, vars);
                }
            }
            for (r, tr) in regressors.iter_mut().zip(&hint_traces) {
                r.accumulate_grads(&g, tr);
            }
            let trained_adapter = if adapter_trained { adapter.as_mut() } else { None };
            sgd_step(&mut student, trained_adapter, &mut regressors, &mut sgd, epoch)?;
            batch_terms.push(terms);
        }

        let n = batch_terms.len().max(1) as f64;
        let mean = |f: fn(&LossTerms) -> f64| batch_terms.iter().map(f).sum::<f64>() / n;
        let terms = LossTerms {
            ce: mean(|t| t.ce),
            kd_kl: mean(|t| t.kd_kl),
            angle: mean(|t| t.angle),
            hint: mean(|t| t.hint),
            total: mean(|t| t.total),
            lambda: weights.lambda,
            alpha: weights.alpha,
            beta: weights.beta,
        };
        for (name, v) in [
            ("ce", terms.ce),
            ("kd_kl", terms.kd_kl),
            ("angle", terms.angle),
            ("hint", terms.hint),
        ] {
            check_finite(v, name, epoch, batch_terms.len())?;
        }
        records.push(EpochRecord {
            epoch,
            terms,
            train_acc: evaluate(&student, train)?,
            test_acc: evaluate(&student, test)?,
        });
        all_batches.push(batch_terms);
    }

    let final_test_acc = match records.last() {
        Some(r) => r.test_acc,
        None => evaluate(&student, test)?,
    };
    Ok(DistillOutcome {
        student,
        adapter,
        regressors,
        mapping,
        report: RunReport {
            config: config.clone(),
            epochs: records,
            batches: all_batches,
            final_test_acc,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;
    use std::collections::HashSet;

    #[test]
    fn assign_groups_examples() {
        let acc = [0.70, 0.90, 0.80];
        let high = assign_groups(&acc, 3, MappingStrategy::BestToHigh, 0).unwrap();
        assert_eq!(high, vec![0, 2, 1]);
        let low = assign_groups(&acc, 3, MappingStrategy::BestToLow, 0).unwrap();
        assert_eq!(low, vec![2, 0, 1]);
        let r1 = assign_groups(&acc, 3, MappingStrategy::Random, 7).unwrap();
        assert_eq!(r1, assign_groups(&acc, 3, MappingStrategy::Random, 7).unwrap());
        assert!(matches!(
            assign_groups(&acc, 2, MappingStrategy::BestToHigh, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn triplet_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = sample_triplets(3, 6, &mut rng);
        assert_eq!(all.len(), 6);
        let set: HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 6);

        let some = sample_triplets(4, 10, &mut rng);
        assert_eq!(some.len(), 10);
        assert_eq!(some.iter().collect::<HashSet<_>>().len(), 10);
        for &(i, j, k) in &some {
            assert!(i != j && j != k && i != k && i < 4 && j < 4 && k < 4);
        }
        assert!(sample_triplets(2, 10, &mut rng).is_empty());

        let a = sample_triplets(20, 50, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_triplets(20, 50, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn triplet_decoding_covers_every_triplet() {
        let n = 6;
        let all = sample_triplets(n, usize::MAX, &mut ChaCha8Rng::seed_from_u64(0));
        let set: HashSet<_> = all.iter().copied().collect();
        assert_eq!(set.len(), n * (n - 1) * (n - 2));
        for &(i, j, k) in &all {
            assert!(i != j && j != k && i != k && i.max(j).max(k) < n);
        }
    }

    #[test]
    fn constant_predictor_scores_one_over_k() {
        let ds = gen_blobs(4, 25, 3, 3.0, 0.5, 1).unwrap();
        let mut m = build_model("dense:3:4", &[3], 4, 0).unwrap();
        m.params_mut().for_each(|p| p.values_mut().fill(0.0));
        assert_eq!(evaluate(&m, &ds).unwrap(), 0.25);
        m.param_mut("0.bias").unwrap().values_mut()[2] = 1.0;
        assert_eq!(evaluate(&m, &ds).unwrap(), 0.25);
        assert_eq!(evaluate(&m, &ds).unwrap(), evaluate(&m, &ds).unwrap());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = DistillConfig::default();
        assert_eq!(
            (c.temperature, c.lambda, c.alpha, c.beta, c.batch_size),
            (5.0, 0.7, 1.0, 2.0, 128)
        );
        c.validate().unwrap();
        assert!(DistillConfig {
            temperature: 0.0,
            ..c.clone()
        }
        .validate()
        .is_err());
        assert!(DistillConfig {
            batch_size: 2,
            ..c.clone()
        }
        .validate()
        .is_err());
        DistillConfig {
            batch_size: 2,
            alpha: 0.0,
            ..c.clone()
        }
        .validate()
        .unwrap();
        DistillConfig {
            batch_size: 2,
            method: Method::Okd,
            ..c.clone()
        }
        .validate()
        .unwrap();
        let fit = DistillConfig {
            method: Method::Fitnet,
            ..c
        };
        assert_eq!(
            fit.effective_weights(),
            LossWeights {
                lambda: 0.0,
                alpha: 0.0,
                beta: 1.0
            }
        );
        assert_eq!("avgmkd".parse::<Method>().unwrap(), Method::Avgmkd);
        assert!("rkd".parse::<Method>().is_err());
    }

    #[test]
    fn report_csv_layout() {
        let report = RunReport {
            config: DistillConfig::default(),
            epochs: vec![EpochRecord {
                epoch: 0,
                terms: LossTerms {
                    ce: 1.0,
                    total: 1.0,
                    ..Default::default()
                },
                train_acc: 0.5,
                test_acc: 0.25,
            }],
            batches: vec![],
            final_test_acc: 0.25,
            wall_clock_seconds: 3.0,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], RunReport::HEADER);
        assert_eq!(lines[1], "0,1,0,0,0,1,0.5,0.25");
        assert!(lines[2].starts_with("summary,final_test_acc=0.25,method=amtml,temp=5,lambda=0.7"));
        assert!(lines[2].contains("lr_decay_epochs=100;150"));
    }
}
