//! Per-instance teacher weighting.
//!
//! Each teacher `t` owns a latent factor `θ_t ∈ R^d` and the adapter shares
//! one global vector `ν ∈ R^d`. An example is represented by `δ`, the
//! channel-wise global max of the student's last feature map (so `d` equals
//! the student's channel count). Its score for teacher `t` is
//! `ν · (θ_t ⊙ δ)`; a softmax over teachers turns scores into weights, and the
//! integrated soft-target is the weighted sum of the teachers' soft-targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Graph, Tensor, Var};

/// Teacher latent factors and the global scoring vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    thetas: Vec<Tensor>,
    nu: Tensor,
}

/// Graph handles for one bound copy of [`AdapterParams`].
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub thetas: Vec<Var>,
    pub nu: Var,
}

impl AdapterParams {
    /// `θ_t ~ N(0, 0.1)` i.i.d., `ν = 1`.
    pub fn new(teachers: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::init(teachers, dim, seed, false)
    }

    /// Like [`AdapterParams::new`] but every teacher shares one sampled `θ`,
    /// which makes the fused target equal the plain teacher average.
    pub fn tied(teachers: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::init(teachers, dim, seed, true)
    }

    fn init(teachers: usize, dim: usize, seed: u64, tied: bool) -> Result<Self> {
        if teachers == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "adapter needs at least one teacher and dimension, got m={teachers}, d={dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let mut sample = || Tensor::from_vec((0..dim).map(|_| normal.sample(&mut rng)).collect());
        let thetas = if tied {
            let shared = sample();
            vec![shared; teachers]
        } else {
            (0..teachers).map(|_| sample()).collect()
        };
        Self::from_parts(thetas, Tensor::full(&[dim], 1.0))
    }

    pub fn from_parts(thetas: Vec<Tensor>, nu: Tensor) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::State("adapter needs at least one teacher factor".into()));
        }
        if nu.rank() != 1 {
            return Err(Error::State(format!("nu must be rank 1, got {:?}", nu.dims())));
        }
        if let Some((t, bad)) = thetas.iter().enumerate().find(|(_, t)| t.dims() != nu.dims()) {
            return Err(Error::State(format!(
                "theta {t} has dims {:?}, nu has {:?}",
                bad.dims(),
                nu.dims()
            )));
        }
        Ok(AdapterParams {
            thetas: thetas.into_iter().map(Tensor::trainable).collect(),
            nu: nu.trainable(),
        })
    }

    pub fn num_teachers(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.nu.numel()
    }

    pub fn thetas(&self) -> &[Tensor] {
        &self.thetas
    }

    pub fn nu(&self) -> &Tensor {
        &self.nu
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.thetas.iter_mut().chain(std::iter::once(&mut self.nu))
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AdapterVars {
        let mut enter = |t: &Tensor| if trainable { g.leaf(t) } else { g.constant(t) };
        AdapterVars {
            thetas: self.thetas.iter().map(&mut enter).collect(),
            nu: enter(&self.nu),
        }
    }

    pub fn accumulate_grads(&mut self, g: &Graph, vars: &AdapterVars) {
        for (t, &v) in self.thetas.iter_mut().zip(&vars.thetas) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
        if let Some(grad) = g.grad(vars.nu) {
            self.nu.accumulate_grad(grad);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Tensor::zero_grad);
    }
}

/// Instance representation `δ`: per-example global max-pool of a
/// `[N, C, H, W]` feature map. `[N, C]` maps pass through unchanged.
pub fn instance_repr(g: &mut Graph, feature_map: Var) -> Result<Var> {
    match g.dims(feature_map).len() {
        4 => g.global_max_pool_batch(feature_map),
        2 => Ok(feature_map),
        _ => Err(Error::shape(
            "instance_repr",
            format!("expected [N, C, H, W] or [N, C], got {:?}", g.dims(feature_map)),
        )),
    }
}

/// Scores `[N, m]` with `score[i][t] = Σ_c ν_c θ_{t,c} δ_{i,c}`.
pub fn teacher_scores(g: &mut Graph, vars: &AdapterVars, delta: Var) -> Result<Var> {
    let d = g.dims(vars.nu)[0];
    match *g.dims(delta) {
        [_, c] if c == d => {}
        ref dims => {
            return Err(Error::shape(
                "teacher_scores",
                format!("instance representation {dims:?} does not match adapter dimension {d}"),
            ))
        }
    }
    let scaled = vars
        .thetas
        .iter()
        .map(|&theta| g.mul(theta, vars.nu))
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.stack(&scaled)?;
    let per_dim = g.transpose(stacked)?;
    g.matmul(delta, per_dim)
}

/// Row-wise softmax of the scores.
pub fn teacher_weights(g: &mut Graph, scores: Var) -> Result<Var> {
    g.softmax_t(scores, 1.0)
}

/// `Σ_t w[:, t] · soft_t`, one `[N, K]` soft-target node per teacher.
pub fn integrate_soft_targets(g: &mut Graph, weights: Var, teacher_soft: &[Var]) -> Result<Var> {
    let (n, m) = match *g.dims(weights) {
        [n, m] => (n, m),
        ref d => return Err(Error::shape("integrate_soft_targets", format!("weights {d:?}"))),
    };
    if teacher_soft.len() != m {
        return Err(Error::shape(
            "integrate_soft_targets",
            format!("{m} weight columns for {} teachers", teacher_soft.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (t, &soft) in teacher_soft.iter().enumerate() {
        if g.dims(soft).len() != 2 || g.dims(soft)[0] != n {
            return Err(Error::shape(
                "integrate_soft_targets",
                format!("teacher {t} soft-targets {:?} for batch {n}", g.dims(soft)),
            ));
        }
        let w = g.column(weights, t)?;
        let part = g.scale_rows(soft, w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("at least one teacher"))
}

/// Frozen teachers plus their held-out accuracies.
#[derive(Debug, Clone)]
pub struct TeacherBundle {
    pub models: Vec<Model>,
    pub val_accuracy: Vec<f64>,
}

/// Teacher outputs for one batch.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// Per teacher, `[N, K]` soft-targets at the requested temperature.
    pub soft: Vec<Tensor>,
    /// Per teacher, the feature map used as a hint target.
    pub features: Vec<Tensor>,
}

impl TeacherBundle {
    pub fn new(models: Vec<Model>, val_accuracy: Vec<f64>) -> Result<Self> {
        if models.is_empty() || models.len() != val_accuracy.len() {
            return Err(Error::Config(format!(
                "{} teachers with {} accuracies",
                models.len(),
                val_accuracy.len()
            )));
        }
        Ok(TeacherBundle { models, val_accuracy })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Runs every teacher in inference mode on `batch`.
    pub fn outputs(&self, batch: &Tensor, temperature: f64) -> Result<TeacherOutputs> {
        let mut soft = Vec::with_capacity(self.models.len());
        let mut features = Vec::with_capacity(self.models.len());
        for model in &self.models {
            let mut g = Graph::new();
            let x = g.constant(batch);
            let trace = model.forward(&mut g, x, false)?;
            let s = g.softmax_t(trace.logits, temperature)?;
            soft.push(g.to_tensor(s));
            features.push(g.to_tensor(trace.feature_map));
        }
        Ok(TeacherOutputs { soft, features })
    }
}

/// One row of a weight dump.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub example_id: usize,
    pub label: usize,
    pub weights: Vec<f64>,
}

/// Per-example teacher weights over `dataset`, in dataset order.
pub fn inspect_weights(
    params: &AdapterParams,
    student: &Model,
    teachers: &TeacherBundle,
    dataset: &Dataset,
) -> Result<Vec<WeightRow>> {
    if params.num_teachers() != teachers.len() {
        return Err(Error::State(format!(
            "adapter has {} teacher factors but {} teachers were given",
            params.num_teachers(),
            teachers.len()
        )));
    }
    let channels = student.feature_shape()[0];
    if params.dim() != channels {
        return Err(Error::State(format!(
            "adapter dimension {} does not match student feature channels {channels}",
            params.dim()
        )));
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for (start, batch, labels) in dataset.chunks(256) {
        let mut g = Graph::new();
        let x = g.constant(&batch);
        let trace = student.forward(&mut g, x, false)?;
        let vars = params.bind(&mut g, false);
        let delta = instance_repr(&mut g, trace.feature_map)?;
        let scores = teacher_scores(&mut g, &vars, delta)?;
        let w = teacher_weights(&mut g, scores)?;
        let m = params.num_teachers();
        for (i, chunk) in g.value(w).chunks(m).enumerate() {
            rows.push(WeightRow {
                example_id: start + i,
                label: labels[i],
                weights: chunk.to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Renders rows as `example_id,label,w_1,...,w_m` with six decimals.
pub fn weights_csv(rows: &[WeightRow], teachers: usize) -> String {
    let mut out = String::from("example_id,label");
    for t in 1..=teachers {
        out.push_str(&format!(",w_{t}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{}", row.example_id, row.label));
        for w in &row.weights {
            out.push_str(&format!(",{w:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Mean weight per `(class, teacher)`; classes without rows are `NaN`.
pub fn mean_weight_by_class(rows: &[WeightRow], classes: usize, teachers: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; teachers]; classes];
    let mut counts = vec![0usize; classes];
    for row in rows {
        counts[row.label] += 1;
        for (s, w) in sums[row.label].iter_mut().zip(&row.weights) {
            *s += w;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect()
}
