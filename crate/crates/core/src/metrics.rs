//! Instrumentation: gradient norms, alignment and correlation studies,
//! confidence intervals, and the metrics-log text format.
//!
//! A [`MetricsLog`] serializes to two comma-separated files: `steps.csv`
//! (one record per training step) and `events.csv` (one record per growth
//! event, keyed by step). Floats are written with Rust's shortest
//! round-trip formatting, so parsing them back is lossless. Wall-times are
//! deliberately excluded from both files — they go to a separate timing
//! file so reruns of the same spec produce byte-identical logs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::grow::{GrowthDirection, GrowthMethod};
use crate::linalg::{alignment, svd_topk, Matrix};
use crate::net::{cross_gradient, GradientSet, Network};
use crate::{lit, Error, Result, Scalar};

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<T> {
    pub step: usize,
    pub loss: T,
    /// L2 norm of all parameter gradients flattened together.
    pub grad_norm: T,
    /// `grad_norm / loss`; 0 with the degenerate flag when the loss is 0.
    pub adjusted_grad_norm: T,
    pub degenerate: bool,
    /// Frobenius norm of each layer's gradient.
    pub layer_grad_norms: Vec<T>,
    /// Gradient norm of the most recently grown block, once one exists.
    pub new_weight_grad_norm: Option<T>,
    /// Cumulative FLOPs: 2 per multiply-accumulate forward, backward
    /// costed at twice the forward.
    pub flops_cum: u64,
}

/// Per-growth-event record.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthRecord<T> {
    pub step: usize,
    pub layer: usize,
    pub k: usize,
    pub method: GrowthMethod,
    pub direction: GrowthDirection,
    /// Block norm target the initializer was given.
    pub target_norm: T,
    /// Achieved gradient-norm^2 reported by the initializer.
    pub objective: T,
    pub singular_values: Vec<T>,
    /// Wall-time of the initializer computation in milliseconds. Not part
    /// of the serialized log (see module docs).
    pub init_wall_ms: f64,
}

/// Time series of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog<T> {
    pub steps: Vec<StepRecord<T>>,
    pub events: Vec<GrowthRecord<T>>,
}

/// Gradient norm divided by the loss, removing the loss's linear scaling of
/// squared-loss gradients. Returns `(value, degenerate)`; at a global
/// optimum (loss 0, where the gradient is 0 too) the value is 0 and the
/// flag is set.
pub fn adjusted_grad_norm<T: Scalar>(grads: &GradientSet<T>) -> (T, bool) {
    let norm = gradient_norm(grads);
    if grads.loss == T::zero() {
        (T::zero(), true)
    } else {
        (norm / grads.loss, false)
    }
}

/// L2 norm of every parameter gradient flattened together.
pub fn gradient_norm<T: Scalar>(grads: &GradientSet<T>) -> T {
    let mut acc = T::zero();
    for layer in &grads.layers {
        for &v in layer.weights.data() {
            acc += v * v;
        }
        if let Some(b) = &layer.bias {
            for &v in b {
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

/// Mean with a two-sided t-based confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ci<T> {
    pub mean: T,
    pub lo: T,
    pub hi: T,
}

/// Two-sided t-distribution confidence interval at the given level
/// (e.g. 0.8 or 0.95). A single observation gets a zero-width interval.
pub fn t_confidence<T: Scalar>(values: &[T], level: f64) -> Result<Ci<T>> {
    if values.is_empty() {
        return Err(Error::Precondition("confidence interval of nothing".into()));
    }
    let n = values.len();
    let nf = lit::<T>(n as f64);
    let mean = values.iter().copied().sum::<T>() / nf;
    if n == 1 {
        return Ok(Ci {
            mean,
            lo: mean,
            hi: mean,
        });
    }
    let var = values
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / lit::<T>((n - 1) as f64);
    let se = (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Numeric(format!("t-distribution: {e}")))?;
    let q = lit::<T>(dist.inverse_cdf(0.5 + level / 2.0));
    Ok(Ci {
        mean,
        lo: mean - q * se,
        hi: mean + q * se,
    })
}

/// One row of the minibatch-alignment study.
#[derive(Debug, Clone)]
pub struct AlignmentRow<T> {
    pub batch_size: usize,
    pub values: Vec<T>,
    /// 95% confidence interval over the repetitions.
    pub ci: Ci<T>,
}

/// How well minibatch cross-gradient singular vectors approximate the
/// full-batch ones.
///
/// For each batch size, draws `reps` random sample subsets, computes the
/// top-k left singular vectors of the cross-gradient at layer `l` on the
/// subset, and reports their alignment with the full-data vectors. A batch
/// equal to the full dataset aligns to 1 by construction.
#[allow(clippy::too_many_arguments)]
pub fn svd_alignment_study<T: Scalar>(
    net: &Network<T>,
    l: usize,
    inputs: &Matrix<T>,
    targets: &Matrix<T>,
    batch_sizes: &[usize],
    k: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<AlignmentRow<T>>> {
    let n = inputs.cols();
    if batch_sizes.iter().any(|&b| b == 0 || b > n) {
        return Err(Error::Precondition(format!(
            "batch sizes must lie in 1..={n}"
        )));
    }
    let full_cg = cross_gradient(net, l, inputs, targets)?;
    let u_full = svd_topk(&full_cg.matrix_form()?, k)?.left_vectors;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        let mut values = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut idx = rand::seq::index::sample(&mut rng, n, b).into_vec();
            idx.sort_unstable();
            let bx = inputs.select_columns(&idx)?;
            let by = targets.select_columns(&idx)?;
            let cg = cross_gradient(net, l, &bx, &by)?;
            let u_b = svd_topk(&cg.matrix_form()?, k)?.left_vectors;
            values.push(alignment(&u_full, &u_b, k)?);
        }
        let ci = t_confidence(&values, 0.95)?;
        rows.push(AlignmentRow {
            batch_size: b,
            values,
            ci,
        });
    }
    Ok(rows)
}

/// Pearson correlation coefficient; `None` when either series has zero
/// variance (the degenerate case).
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Option<T> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = lit::<T>(xs.len() as f64);
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    let mut syy = T::zero();
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == T::zero() || syy == T::zero() {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn fmt_vec<T: Scalar>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_vec<T: Scalar>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|t| {
            t.parse::<T>()
                .map_err(|_| Error::Parse(format!("bad number '{t}'")))
        })
        .collect()
}

fn parse_num<T: Scalar>(line: usize, tok: &str) -> Result<T> {
    tok.parse::<T>()
        .map_err(|_| Error::Parse(format!("line {line}: bad number '{tok}'")))
}

fn parse_int(line: usize, tok: &str) -> Result<u64> {
    tok.parse::<u64>()
        .map_err(|_| Error::Parse(format!("line {line}: bad integer '{tok}'")))
}

impl<T: Scalar> MetricsLog<T> {
    pub const STEPS_HEADER: &'static str =
        "step,loss,grad_norm,adjusted_grad_norm,degenerate,new_weight_grad_norm,layer_grad_norms,flops";
    pub const EVENTS_HEADER: &'static str =
        "step,layer,k,method,direction,target_norm,objective,singular_values";

    pub fn steps_csv(&self) -> String {
        let mut out = String::from(Self::STEPS_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step,
                r.loss,
                r.grad_norm,
                r.adjusted_grad_norm,
                u8::from(r.degenerate),
                r.new_weight_grad_norm
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
                fmt_vec(&r.layer_grad_norms),
                r.flops_cum,
            ));
        }
        out
    }

    pub fn events_csv(&self) -> String {
        let mut out = String::from(Self::EVENTS_HEADER);
        out.push('\n');
        for e in &self.events {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.step,
                e.layer,
                e.k,
                e.method.name(),
                e.direction.name(),
                e.target_norm,
                e.objective,
                fmt_vec(&e.singular_values),
            ));
        }
        out
    }

    /// Wall-times live here, not in the deterministic logs.
    pub fn timing_csv(&self, mean_step_ms: f64, total_ms: f64) -> String {
        let mut out = String::from("kind,step,millis\n");
        for e in &self.events {
            out.push_str(&format!("event,{},{}\n", e.step, e.init_wall_ms));
        }
        out.push_str(&format!("mean_step,,{mean_step_ms}\n"));
        out.push_str(&format!("total,,{total_ms}\n"));
        out
    }

    pub fn parse_steps_csv(text: &str) -> Result<Vec<StepRecord<T>>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::STEPS_HEADER => {}
            _ => return Err(Error::Parse("bad steps header".into())),
        }
        let mut out = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse(format!("line {ln}: expected 8 fields")));
            }
            out.push(StepRecord {
                step: parse_int(ln, f[0])? as usize,
                loss: parse_num(ln, f[1])?,
                grad_norm: parse_num(ln, f[2])?,
                adjusted_grad_norm: parse_num(ln, f[3])?,
                degenerate: f[4] == "1",
                new_weight_grad_norm: if f[5].is_empty() {
                    None
                } else {
                    Some(parse_num(ln, f[5])?)
                },
                layer_grad_norms: parse_vec(f[6])?,
                flops_cum: parse_int(ln, f[7])?,
            });
        }
        Ok(out)
    }

    pub fn parse_events_csv(text: &str) -> Result<Vec<GrowthRecord<T>>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == Self::EVENTS_HEADER => {}
            _ => return Err(Error::Parse("bad events header".into())),
        }
        let mut out = Vec::new();
        for (i, line) in lines {
            let ln = i + 1;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::Parse(format!("line {ln}: expected 8 fields")));
            }
            out.push(GrowthRecord {
                step: parse_int(ln, f[0])? as usize,
                layer: parse_int(ln, f[1])? as usize,
                k: parse_int(ln, f[2])? as usize,
                method: GrowthMethod::parse(f[3])?,
                direction: GrowthDirection::parse(f[4])?,
                target_norm: parse_num(ln, f[5])?,
                objective: parse_num(ln, f[6])?,
                singular_values: parse_vec(f[7])?,
                init_wall_ms: 0.0,
            });
        }
        Ok(out)
    }
}
