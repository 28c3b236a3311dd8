//! Distillation objectives: hard-label cross-entropy, temperature KL,
//! the triplet angle loss, multi-group hint regression, and their weighted
//! combination.

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, Model};
use crate::tensor::{Graph, Tensor, Var};

pub use crate::tensor::huber;

/// Below this norm a difference vector has no direction.
pub const ANGLE_EPS: f64 = 1e-8;

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let n = labels.len() as f64;
    let log_p = g.log_softmax_t(logits, 1.0)?;
    let picked = g.pick(log_p, labels)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n))
}

/// Mean over the batch of `KL(target ‖ softmax(student / T))`, times `T²`
/// when `t2_scaling` is set. Gradient flows into `target` when it is
/// differentiable.
pub fn kd_kl(
    g: &mut Graph,
    target_probs: Var,
    student_logits: Var,
    temperature: f64,
    t2_scaling: bool,
) -> Result<Var> {
    if g.dims(target_probs) != g.dims(student_logits) {
        return Err(Error::shape(
            "kd_kl",
            format!("{:?} vs {:?}", g.dims(target_probs), g.dims(student_logits)),
        ));
    }
    let (n, k) = match *g.dims(target_probs) {
        [n, k] => (n, k),
        ref d => return Err(Error::shape("kd_kl", format!("expected [N, K], got {d:?}"))),
    };
    for (i, row) in g.value(target_probs).chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
            return Err(Error::Data(format!(
                "target row {i} is not a distribution (sum {s})"
            )));
        }
    }
    let log_q = g.log_softmax_t(student_logits, temperature)?;
    let kl = g.kl_div(target_probs, log_q)?;
    let factor = if t2_scaling {
        temperature * temperature
    } else {
        1.0
    };
    Ok(g.scale(kl, factor / n as f64))
}

/// Cosine of the angle at `b` formed by `a` and `c`; `None` when either
/// arm is shorter than [`ANGLE_EPS`].
pub fn angle_metric(g: &mut Graph, a: Var, b: Var, c: Var) -> Result<Option<Var>> {
    let u = g.sub(a, b)?;
    let v = g.sub(c, b)?;
    let uu = g.dot(u, u)?;
    let vv = g.dot(v, v)?;
    if g.scalar(uu).sqrt() <= ANGLE_EPS || g.scalar(vv).sqrt() <= ANGLE_EPS {
        return Ok(None);
    }
    let nu = g.sqrt(uu);
    let nv = g.sqrt(vv);
    let denom = g.mul(nu, nv)?;
    let num = g.dot(u, v)?;
    Ok(Some(g.div(num, denom)?))
}

/// Mean Huber distance between teacher and student angles over the given
/// `(i, j, k)` triplets (vertex `j`). Degenerate triplets are skipped; if
/// none remain the loss is a constant zero.
pub fn angle_loss(
    g: &mut Graph,
    teacher_targets: Var,
    student_soft: Var,
    triplets: &[(usize, usize, usize)],
) -> Result<Var> {
    if g.dims(teacher_targets) != g.dims(student_soft) || g.dims(student_soft).len() != 2 {
        return Err(Error::shape(
            "angle_loss",
            format!("{:?} vs {:?}", g.dims(teacher_targets), g.dims(student_soft)),
        ));
    }
    let n = g.dims(student_soft)[0];
    let mut rows_t: Vec<Option<Var>> = vec![None; n];
    let mut rows_s: Vec<Option<Var>> = vec![None; n];
    let row = |g: &mut Graph, cache: &mut Vec<Option<Var>>, src: Var, i: usize| -> Result<Var> {
        if let Some(v) = cache[i] {
            return Ok(v);
        }
        let v = g.row(src, i)?;
        cache[i] = Some(v);
        Ok(v)
    };

    let mut sum: Option<Var> = None;
    let mut valid = 0usize;
    for &(i, j, k) in triplets {
        if i >= n || j >= n || k >= n || i == j || j == k || i == k {
            return Err(Error::Param(format!(
                "invalid triplet ({i}, {j}, {k}) for batch {n}"
            )));
        }
        let (ti, tj, tk) = (
            row(g, &mut rows_t, teacher_targets, i)?,
            row(g, &mut rows_t, teacher_targets, j)?,
            row(g, &mut rows_t, teacher_targets, k)?,
        );
        let Some(t_cos) = angle_metric(g, ti, tj, tk)? else {
            continue;
        };
        let (si, sj, sk) = (
            row(g, &mut rows_s, student_soft, i)?,
            row(g, &mut rows_s, student_soft, j)?,
            row(g, &mut rows_s, student_soft, k)?,
        );
        let Some(s_cos) = angle_metric(g, si, sj, sk)? else {
            continue;
        };
        let h = g.huber(t_cos, s_cos)?;
        sum = Some(match sum {
            Some(acc) => g.add(acc, h)?,
            None => h,
        });
        valid += 1;
    }
    Ok(match sum {
        Some(s) => g.scale(s, 1.0 / valid as f64),
        None => g.constant(&Tensor::scalar(0.0)),
    })
}

/// Hint loss plus the regressor traces needed to collect their gradients.
#[derive(Debug, Clone)]
pub struct HintOutput {
    pub loss: Var,
    pub regressor_traces: Vec<ForwardTrace>,
}

/// Regressor architecture mapping a student group output of shape
/// `student` onto a teacher feature of shape `teacher`.
pub fn regressor_descriptor(student: &[usize], teacher: &[usize]) -> String {
    match (student, teacher) {
        ([cs, hs, ws], [ct, ht, wt]) if hs == ht && ws == wt => format!("conv2d:{cs}:{ct}"),
        ([a], [b]) => format!("dense:{a}:{b}"),
        _ => format!(
            "flatten,dense:{}:{}",
            student.iter().product::<usize>(),
            teacher.iter().product::<usize>()
        ),
    }
}

/// `Σ_t ‖u_t − F_t(v_{f(t)})‖²` averaged over the batch.
///
/// `mapping[t]` is the student group guided by teacher `t`; `regressors[t]`
/// is `F_t`. Teacher features are treated as constants.
pub fn hint_loss(
    g: &mut Graph,
    teacher_features: &[Var],
    student_group_outputs: &[Var],
    regressors: &[Model],
    mapping: &[usize],
    train_regressors: bool,
) -> Result<HintOutput> {
    let m = teacher_features.len();
    if regressors.len() != m || mapping.len() != m {
        return Err(Error::Config(format!(
            "{m} teachers, {} regressors, {} mapping entries",
            regressors.len(),
            mapping.len()
        )));
    }
    let mut used = vec![false; student_group_outputs.len()];
    for &grp in mapping {
        if grp >= used.len() || std::mem::replace(&mut used[grp], true) {
            return Err(Error::Config(format!("mapping {mapping:?} is not one-to-one")));
        }
    }

    let mut total: Option<Var> = None;
    let mut traces = Vec::with_capacity(m);
    for t in 0..m {
        let v = student_group_outputs[mapping[t]];
        let batch = g.dims(v)[0];
        let trace = regressors[t]
            .forward(g, v, train_regressors)
            .map_err(|e| Error::shape("hint_loss", format!("teacher {t}: regressor input: {e}")))?;
        let target = g.detach(teacher_features[t]);
        let (out_dims, tgt_dims) = (g.dims(trace.logits).to_vec(), g.dims(target).to_vec());
        let target = if out_dims == tgt_dims {
            target
        } else if out_dims.iter().product::<usize>() == tgt_dims.iter().product::<usize>()
            && out_dims[0] == tgt_dims[0]
        {
            g.reshape(target, out_dims)?
        } else {
            return Err(Error::shape(
                "hint_loss",
                format!("teacher {t}: regressed {out_dims:?} vs teacher feature {tgt_dims:?}"),
            ));
        };
        let diff = g.sub(target, trace.logits)?;
        let sq = g.dot(diff, diff)?;
        let term = g.scale(sq, 1.0 / batch as f64);
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        traces.push(trace);
    }
    let loss = match total {
        Some(l) => l,
        None => g.constant(&Tensor::scalar(0.0)),
    };
    Ok(HintOutput {
        loss,
        regressor_traces: traces,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.7,
            alpha: 1.0,
            beta: 2.0,
        }
    }
}

/// Scalar values of every term, with the weights that combined them.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub ce: f64,
    pub kd_kl: f64,
    pub angle: f64,
    pub hint: f64,
    pub total: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossTerms {
    /// `ce + λ·kd_kl + α·angle + β·hint` recomputed from the stored terms.
    pub fn weighted_sum(&self) -> f64 {
        self.ce + self.lambda * self.kd_kl + self.alpha * self.angle + self.beta * self.hint
    }
}

/// Graph nodes of the individual terms; absent terms count as zero.
#[derive(Debug, Clone, Copy)]
pub struct LossComponents {
    pub ce: Var,
    pub kd_kl: Option<Var>,
    pub angle: Option<Var>,
    pub hint: Option<Var>,
}

/// `(ce + λ·kd_kl) + α·angle + β·hint`.
pub fn total_loss(g: &mut Graph, parts: LossComponents, weights: LossWeights) -> Result<(Var, LossTerms)> {
    let value = |g: &Graph, v: Option<Var>, name: &'static str| -> Result<f64> {
        let x = v.map_or(0.0, |v| g.scalar(v));
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite { component: name })
        }
    };
    let ce = value(g, Some(parts.ce), "ce")?;
    let kd = value(g, parts.kd_kl, "kd_kl")?;
    let angle = value(g, parts.angle, "angle")?;
    let hint = value(g, parts.hint, "hint")?;

    let mut total = parts.ce;
    for (v, w) in [
        (parts.kd_kl, weights.lambda),
        (parts.angle, weights.alpha),
        (parts.hint, weights.beta),
    ] {
        if let Some(v) = v {
            if w != 0.0 {
                let scaled = g.scale(v, w);
                total = g.add(total, scaled)?;
            }
        }
    }
    let terms = LossTerms {
        ce,
        kd_kl: kd,
        angle,
        hint,
        total: g.scalar(total),
        lambda: weights.lambda,
        alpha: weights.alpha,
        beta: weights.beta,
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite { component: "total" });
    }
    Ok((total, terms))
}
