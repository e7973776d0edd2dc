//! Teacher-student protocols: data generation, growth-schedule training
//! runs, and the verification studies.
//!
//! Determinism: all randomness flows from the task seeds and the training
//! seed. The training seed feeds one ChaCha stream per purpose (stream 0
//! initializes the student; stream `1 + step` covers everything that step
//! draws, including growth-event randomness and minibatch sampling), so
//! resuming from a checkpoint reproduces the original trajectory bitwise.

use std::borrow::Cow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grow::{
    block_target_norm, grow_neurons, incoming_width, init_firefly_opt, init_gradmax,
    init_gradmax_opt, init_random, init_zero_unit_bias, new_block_gradients,
    outgoing_block_rows, outgoing_site, AscentConfig, GrowthDirection, GrowthEvent,
    GrowthMethod, GrowthPlan, InitResult, NormPolicy,
};
use crate::linalg::{svd_topk, Matrix};
use crate::metrics::{t_confidence, Ci, GrowthRecord, MetricsLog, StepRecord};
use crate::net::{
    backward_with_deltas, cross_gradient_from_deltas, forward, loss_gradients, sgd_step,
    squared_loss, Activation, Layer, Network, SgdState,
};
use crate::{lit, Error, Result, Scalar};

/// A regression task labeled by a fixed randomly initialized teacher.
#[derive(Debug, Clone)]
pub struct TeacherStudentTask<T> {
    pub teacher: Network<T>,
    /// `m_i x N` standard-normal inputs.
    pub inputs: Matrix<T>,
    /// `m_o x N` teacher outputs.
    pub targets: Matrix<T>,
    pub teacher_seed: u64,
    pub data_seed: u64,
}

/// Build a teacher-student task: teacher weights i.i.d. uniform in [-1, 1],
/// inputs standard normal, targets produced by the teacher.
pub fn make_task<T: Scalar>(
    m_i: usize,
    m_h: usize,
    m_o: usize,
    n: usize,
    teacher_seed: u64,
    data_seed: u64,
) -> Result<TeacherStudentTask<T>> {
    if m_i == 0 || m_h == 0 || m_o == 0 || n == 0 {
        return Err(Error::Precondition("task dimensions must be positive".into()));
    }
    let mut trng = stream_rng(teacher_seed, 0);
    let teacher = mlp(&[m_i, m_h, m_o], false, |rng| uniform_pm1(rng), &mut trng)?;
    let mut drng = stream_rng(data_seed, 0);
    let inputs = Matrix::from_fn(m_i, n, |_, _| T::standard_normal(&mut drng));
    let (targets, _) = forward(&teacher, &inputs)?;
    Ok(TeacherStudentTask {
        teacher,
        inputs,
        targets,
        teacher_seed,
        data_seed,
    })
}

fn uniform_pm1<T: Scalar, R: Rng>(rng: &mut R) -> T {
    lit::<T>(rng.gen_range(-1.0..=1.0))
}

fn mlp<T: Scalar, R: Rng>(
    dims: &[usize],
    bias: bool,
    mut draw: impl FnMut(&mut R) -> T,
    rng: &mut R,
) -> Result<Network<T>> {
    let mut layers = Vec::new();
    for i in 0..dims.len() - 1 {
        let w = Matrix::from_fn(dims[i + 1], dims[i], |_, _| draw(rng));
        let act = if i == dims.len() - 2 {
            Activation::Identity
        } else {
            Activation::Relu0
        };
        let layer = if bias {
            Layer::dense_with_bias(w, vec![T::zero(); dims[i + 1]], act)
        } else {
            Layer::dense(w, act)
        };
        layers.push(layer);
    }
    Network::new(layers)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Student weight initialization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudentInit {
    /// i.i.d. uniform in [-1, 1], like the teacher.
    UniformPm1,
    /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
    Glorot,
}

/// Full-batch gradient descent or fixed-size minibatches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

/// Everything one training run needs besides the task.
#[derive(Debug, Clone)]
pub struct RunConfig<T> {
    /// Hidden width of the seed student.
    pub hidden: usize,
    pub lr: T,
    pub momentum: T,
    pub total_steps: usize,
    pub batch: BatchMode,
    pub plan: GrowthPlan<T>,
    pub train_seed: u64,
    /// Enable a (zero-initialized) bias on the hidden layer; required by the
    /// zero-weights-unit-bias initializer.
    pub student_bias: bool,
    /// Student weight initialization.
    pub student_init: StudentInit,
    /// When a batch-norm layer directly follows a growth site, flip
    /// incoming-zero events to the outgoing-zero direction (and the
    /// closed-form method to its iterative counterpart), which avoids the
    /// 1/sqrt(eps) jump a zero feature would take through the norm.
    pub bn_auto_flip: bool,
}

impl<T: Scalar> RunConfig<T> {
    /// The small protocol: full-batch descent at lr 0.1, momentum 0.
    pub fn new(hidden: usize, total_steps: usize, plan: GrowthPlan<T>, train_seed: u64) -> Self {
        Self {
            hidden,
            lr: lit(0.1),
            momentum: T::zero(),
            total_steps,
            batch: BatchMode::Full,
            plan,
            train_seed,
            student_bias: false,
            student_init: StudentInit::Glorot,
            bn_auto_flip: true,
        }
    }

    /// Same run with every growth event switched to `method`.
    pub fn with_method(&self, method: GrowthMethod) -> Self {
        let events = self
            .plan
            .events()
            .iter()
            .map(|e| GrowthEvent {
                method,
                ..e.clone()
            })
            .collect();
        let mut cfg = self.clone();
        cfg.plan = GrowthPlan::new(events).expect("steps unchanged");
        cfg.student_bias = self.student_bias || method == GrowthMethod::ZeroUnitBias;
        cfg
    }

    /// No-growth baseline; `big` starts at the fully grown width.
    pub fn baseline(&self, big: bool) -> Self {
        let mut cfg = self.clone();
        cfg.hidden = if big {
            self.hidden + self.plan.total_neurons()
        } else {
            self.hidden
        };
        cfg.plan = GrowthPlan::empty();
        cfg
    }
}

/// Snapshot taken right before a growth event (and at the final step).
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub net: Network<T>,
    pub opt: SgdState<T>,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    pub log: MetricsLog<T>,
    pub checkpoints: Vec<Checkpoint<T>>,
    pub final_net: Network<T>,
    pub final_opt: SgdState<T>,
    /// Mean wall-time of one training step in milliseconds, growth work
    /// excluded.
    pub mean_step_ms: f64,
}

/// Fresh seed student for a task.
pub fn build_student<T: Scalar>(
    task: &TeacherStudentTask<T>,
    cfg: &RunConfig<T>,
) -> Result<Network<T>> {
    let m_i = task.inputs.rows();
    let m_o = task.targets.rows();
    let mut rng = stream_rng(cfg.train_seed, 0);
    let dims = [m_i, cfg.hidden, m_o];
    match cfg.student_init {
        StudentInit::UniformPm1 => mlp(&dims, cfg.student_bias, |r| uniform_pm1(r), &mut rng),
        StudentInit::Glorot => {
            let mut layers = Vec::new();
            for i in 0..dims.len() - 1 {
                let limit = (6.0 / (dims[i] + dims[i + 1]) as f64).sqrt();
                let w = Matrix::from_fn(dims[i + 1], dims[i], |_, _| {
                    lit::<T>(rng.gen_range(-limit..=limit))
                });
                let act = if i == dims.len() - 2 {
                    Activation::Identity
                } else {
                    Activation::Relu0
                };
                let layer = if cfg.student_bias {
                    Layer::dense_with_bias(w, vec![T::zero(); dims[i + 1]], act)
                } else {
                    Layer::dense(w, act)
                };
                layers.push(layer);
            }
            Network::new(layers)
        }
    }
}

/// Train a fresh student under the growth plan.
pub fn run_training<T: Scalar>(
    task: &TeacherStudentTask<T>,
    cfg: &RunConfig<T>,
) -> Result<RunOutcome<T>> {
    let net = build_student(task, cfg)?;
    let opt = SgdState::zeros_like(&net);
    run_training_from(net, opt, 0, task, cfg)
}

/// Continue training from an existing state; `start_step` is where the step
/// counter resumes, so re-running from a checkpoint reproduces the original
/// trajectory bitwise.
pub fn run_training_from<T: Scalar>(
    mut net: Network<T>,
    mut opt: SgdState<T>,
    start_step: usize,
    task: &TeacherStudentTask<T>,
    cfg: &RunConfig<T>,
) -> Result<RunOutcome<T>> {
    if let BatchMode::Minibatch(b) = cfg.batch {
        if b == 0 || b > task.inputs.cols() {
            return Err(Error::Precondition(format!(
                "minibatch size {b} out of range for {} samples",
                task.inputs.cols()
            )));
        }
    }
    if let Some(last) = cfg.plan.last_step() {
        if last >= cfg.total_steps {
            return Err(Error::Precondition(
                "growth steps must precede the end of training".into(),
            ));
        }
    }

    let mut log = MetricsLog::default();
    let mut checkpoints = Vec::new();
    let mut newest_block: Option<(usize, usize)> = None;
    let mut flops: u64 = 0;
    let mut events = cfg
        .plan
        .events()
        .iter()
        .skip_while(|e| e.step < start_step)
        .peekable();
    let mut step_time_ms = 0.0;
    let mut steps_timed = 0u32;

    for step in start_step..cfg.total_steps {
        let (bx, by) = batch_for_step(task, cfg, step)?;
        while events.peek().is_some_and(|e| e.step == step) {
            let event = events.next().expect("peeked");
            checkpoints.push(Checkpoint {
                step,
                net: net.clone(),
                opt: opt.clone(),
            });
            let mut rng = stream_rng(cfg.train_seed, 1 + step as u64);
            let record =
                apply_growth_event(&mut net, &mut opt, event, &bx, &by, cfg.bn_auto_flip, &mut rng)?;
            newest_block = Some((event.layer, event.k));
            log.events.push(record);
        }

        let t0 = Instant::now();
        let gs = loss_gradients(&net, &bx, &by)?;
        if !gs.loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}")));
        }
        flops += 6 * net.forward_macs(bx.cols());
        let (adjusted, degenerate) = crate::metrics::adjusted_grad_norm(&gs);
        let new_weight_grad_norm = match newest_block {
            None => None,
            Some((l, k)) => {
                let (gin, _) = new_block_gradients(&net, &gs, l, k)?;
                Some(gin.frobenius_norm())
            }
        };
        log.steps.push(StepRecord {
            step,
            loss: gs.loss,
            grad_norm: crate::metrics::gradient_norm(&gs),
            adjusted_grad_norm: adjusted,
            degenerate,
            layer_grad_norms: gs.layers.iter().map(|g| g.weights.frobenius_norm()).collect(),
            new_weight_grad_norm,
            flops_cum: flops,
        });
        sgd_step(&mut net, &gs, cfg.lr, cfg.momentum, &mut opt)?;
        step_time_ms += t0.elapsed().as_secs_f64() * 1e3;
        steps_timed += 1;
    }

    checkpoints.push(Checkpoint {
        step: cfg.total_steps,
        net: net.clone(),
        opt: opt.clone(),
    });
    Ok(RunOutcome {
        log,
        checkpoints,
        final_net: net,
        final_opt: opt,
        mean_step_ms: step_time_ms / f64::from(steps_timed.max(1)),
    })
}

fn batch_for_step<'t, T: Scalar>(
    task: &'t TeacherStudentTask<T>,
    cfg: &RunConfig<T>,
    step: usize,
) -> Result<(Cow<'t, Matrix<T>>, Cow<'t, Matrix<T>>)> {
    match cfg.batch {
        BatchMode::Full => Ok((Cow::Borrowed(&task.inputs), Cow::Borrowed(&task.targets))),
        BatchMode::Minibatch(b) => {
            let mut rng = stream_rng(cfg.train_seed, 1 + step as u64);
            let mut idx = rand::seq::index::sample(&mut rng, task.inputs.cols(), b).into_vec();
            idx.sort_unstable();
            Ok((
                Cow::Owned(task.inputs.select_columns(&idx)?),
                Cow::Owned(task.targets.select_columns(&idx)?),
            ))
        }
    }
}

/// Compute an initializer for `event` and apply the growth, returning the
/// event record. The wall-time covers only the work growing adds on top of
/// a training step: the gradient pass feeding the closed-form initializer
/// is shared with training and therefore not timed.
pub fn apply_growth_event<T: Scalar>(
    net: &mut Network<T>,
    opt: &mut SgdState<T>,
    event: &GrowthEvent<T>,
    batch: &Matrix<T>,
    targets: &Matrix<T>,
    bn_auto_flip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<GrowthRecord<T>> {
    let l = event.layer;
    let bn_follows = outgoing_site(net, l)? != l + 1;
    let (method, direction) = if bn_auto_flip
        && bn_follows
        && event.direction == GrowthDirection::IncomingZero
    {
        let m = match event.method {
            GrowthMethod::GradMax => GrowthMethod::GradMaxOpt,
            other => other,
        };
        (m, GrowthDirection::OutgoingZero)
    } else {
        (event.method, event.direction)
    };
    let c = block_target_norm(&event.norm_policy, &net.layers[l], event.k)?;

    let (init, wall_ms) = match method {
        GrowthMethod::GradMax => {
            let (outputs, cache) = forward(net, batch)?;
            let (_, loss_grad) = squared_loss(&outputs, targets)?;
            let (_, deltas) = backward_with_deltas(net, &cache, &loss_grad)?;
            let t0 = Instant::now();
            let cg = cross_gradient_from_deltas(net, l, &cache, &deltas)?;
            let init = init_gradmax(&cg, event.k, c, event.epsilon, rng)?;
            (init, t0.elapsed().as_secs_f64() * 1e3)
        }
        GrowthMethod::GradMaxOpt => {
            let t0 = Instant::now();
            let init = init_gradmax_opt(
                net,
                l,
                event.k,
                c,
                event.epsilon,
                batch,
                targets,
                direction,
                &AscentConfig::gradmax_opt(),
                rng,
            )?;
            (init, t0.elapsed().as_secs_f64() * 1e3)
        }
        GrowthMethod::Random => {
            let out_l = outgoing_site(net, l)?;
            let in_cols = incoming_width(&net.layers[l])?;
            let out_rows = outgoing_block_rows(&net.layers[out_l]);
            let t0 = Instant::now();
            let init = init_random(in_cols, out_rows, event.k, c, event.epsilon, direction, rng)?;
            (init, t0.elapsed().as_secs_f64() * 1e3)
        }
        GrowthMethod::FireflyOpt => {
            let t0 = Instant::now();
            let (init, _) = init_firefly_opt(
                net,
                l,
                event.k,
                c,
                event.epsilon,
                batch,
                targets,
                &AscentConfig::firefly(),
                rng,
            )?;
            (init, t0.elapsed().as_secs_f64() * 1e3)
        }
        GrowthMethod::ZeroUnitBias => {
            let out_l = outgoing_site(net, l)?;
            let in_cols = incoming_width(&net.layers[l])?;
            let out_rows = outgoing_block_rows(&net.layers[out_l]);
            let t0 = Instant::now();
            let init = init_zero_unit_bias(in_cols, out_rows, event.k);
            (init, t0.elapsed().as_secs_f64() * 1e3)
        }
    };
    grow_neurons(net, l, &init, Some(opt))?;
    Ok(GrowthRecord {
        step: event.step,
        layer: l,
        k: event.k,
        method,
        direction,
        target_norm: c,
        objective: init.objective_value,
        singular_values: init.singular_values.unwrap_or_default(),
        init_wall_ms: wall_ms,
    })
}

/// Settings for the verification studies.
#[derive(Debug, Clone, Copy)]
pub struct VerifyConfig {
    /// Repetitions for the stochastic methods in the after-growth study.
    pub grow_reps: usize,
    /// Repetitions (random-growth seeds) in the after-N-steps study.
    pub continue_reps: usize,
    /// Post-growth horizon of the after-N-steps study.
    pub horizon: usize,
    pub run_a: bool,
    pub run_b: bool,
    pub run_c: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            grow_reps: 10,
            continue_reps: 5,
            horizon: 500,
            run_a: true,
            run_b: true,
            run_c: true,
        }
    }
}

impl VerifyConfig {
    pub fn only(a: bool, b: bool, c: bool) -> Self {
        Self {
            run_a: a,
            run_b: b,
            run_c: c,
            ..Self::default()
        }
    }
}

/// After-growth gradient norms for one checkpoint and method.
#[derive(Debug, Clone)]
pub struct StudyASample<T> {
    pub checkpoint_step: usize,
    pub method: GrowthMethod,
    /// One value per repetition (one entry for the deterministic method).
    pub values: Vec<T>,
    /// For the closed-form method: sqrt of the reported objective, which
    /// must equal the measured gradient norm.
    pub predicted: Option<T>,
}

/// Loss differences `L(random) - L(closed-form)` after one checkpoint.
#[derive(Debug, Clone)]
pub struct StudyCRow<T> {
    pub checkpoint_step: usize,
    /// Confidence intervals (80%) per post-growth step.
    pub diffs: Vec<Ci<T>>,
}

/// The three verification studies.
#[derive(Debug, Clone)]
pub struct VerificationReport<T> {
    /// Study A: grow one block at each checkpoint with each method and
    /// measure the incoming new-weight gradient norm.
    pub study_a: Vec<StudyASample<T>>,
    /// Study B: full runs per method, for the adjusted-gradient-norm curves.
    pub study_b: Vec<(String, MetricsLog<T>)>,
    /// Study C: continue from each checkpoint with closed-form vs random
    /// growth and track the loss difference.
    pub study_c: Vec<StudyCRow<T>>,
}

/// Run the verification suite against checkpoints from a completed
/// random-method run of `base_cfg`.
///
/// The studies grow with epsilon = 0 so the measured new-weight gradients
/// coincide with the initializers' reported objectives.
pub fn run_verification_suite<T: Scalar>(
    task: &TeacherStudentTask<T>,
    base_cfg: &RunConfig<T>,
    checkpoints: &[Checkpoint<T>],
    vcfg: &VerifyConfig,
) -> Result<VerificationReport<T>> {
    let events = base_cfg.plan.events();
    if events.is_empty() {
        return Err(Error::State("base run has no growth events".into()));
    }
    let growth_ckpts: Vec<(&Checkpoint<T>, &GrowthEvent<T>)> = events
        .iter()
        .filter_map(|e| {
            checkpoints
                .iter()
                .find(|c| c.step == e.step)
                .map(|c| (c, e))
        })
        .collect();
    if growth_ckpts.len() != events.len() {
        return Err(Error::State(format!(
            "missing checkpoints: need one per growth step, found {} of {}",
            growth_ckpts.len(),
            events.len()
        )));
    }

    // Study A.
    let mut study_a = Vec::new();
    let a_ckpts: &[(&Checkpoint<T>, &GrowthEvent<T>)] =
        if vcfg.run_a { &growth_ckpts } else { &[] };
    for (ckpt, event) in a_ckpts {
        let c = block_target_norm(&event.norm_policy, &ckpt.net.layers[event.layer], event.k)?;
        let mut rng = stream_rng(base_cfg.train_seed, 10_000 + ckpt.step as u64);

        let cg = crate::net::cross_gradient(&ckpt.net, event.layer, &task.inputs, &task.targets)?;
        let gm_init = init_gradmax(&cg, event.k, c, T::zero(), &mut rng)?;
        let gm_val = measure_new_grad_norm(&ckpt.net, event, &gm_init, task)?;
        study_a.push(StudyASample {
            checkpoint_step: ckpt.step,
            method: GrowthMethod::GradMax,
            values: vec![gm_val],
            predicted: Some(gm_init.objective_value.sqrt()),
        });

        let mut opt_vals = Vec::with_capacity(vcfg.grow_reps);
        let mut rnd_vals = Vec::with_capacity(vcfg.grow_reps);
        for _ in 0..vcfg.grow_reps {
            let opt_init = init_gradmax_opt(
                &ckpt.net,
                event.layer,
                event.k,
                c,
                T::zero(),
                &task.inputs,
                &task.targets,
                GrowthDirection::IncomingZero,
                &AscentConfig::gradmax_opt(),
                &mut rng,
            )?;
            opt_vals.push(measure_new_grad_norm(&ckpt.net, event, &opt_init, task)?);
            let out_l = outgoing_site(&ckpt.net, event.layer)?;
            let rnd_init = init_random(
                incoming_width(&ckpt.net.layers[event.layer])?,
                outgoing_block_rows(&ckpt.net.layers[out_l]),
                event.k,
                c,
                T::zero(),
                GrowthDirection::IncomingZero,
                &mut rng,
            )?;
            rnd_vals.push(measure_new_grad_norm(&ckpt.net, event, &rnd_init, task)?);
        }
        study_a.push(StudyASample {
            checkpoint_step: ckpt.step,
            method: GrowthMethod::GradMaxOpt,
            values: opt_vals,
            predicted: None,
        });
        study_a.push(StudyASample {
            checkpoint_step: ckpt.step,
            method: GrowthMethod::Random,
            values: rnd_vals,
            predicted: None,
        });
    }

    // Study B: full runs per method plus the two baselines.
    let mut study_b = Vec::new();
    if vcfg.run_b {
        for method in [
            GrowthMethod::GradMax,
            GrowthMethod::GradMaxOpt,
            GrowthMethod::Random,
        ] {
            let cfg = base_cfg.with_method(method);
            study_b.push((
                method.name().to_string(),
                run_training(task, &cfg)?.log,
            ));
        }
        study_b.push((
            "baseline_small".into(),
            run_training(task, &base_cfg.baseline(false))?.log,
        ));
        study_b.push((
            "baseline_big".into(),
            run_training(task, &base_cfg.baseline(true))?.log,
        ));
    }

    // Study C.
    let mut study_c = Vec::new();
    let c_ckpts: &[(&Checkpoint<T>, &GrowthEvent<T>)] =
        if vcfg.run_c { &growth_ckpts } else { &[] };
    for (ckpt, event) in c_ckpts {
        let c = block_target_norm(&event.norm_policy, &ckpt.net.layers[event.layer], event.k)?;
        let mut rng = stream_rng(base_cfg.train_seed, 20_000 + ckpt.step as u64);
        let cg = crate::net::cross_gradient(&ckpt.net, event.layer, &task.inputs, &task.targets)?;
        let gm_init = init_gradmax(&cg, event.k, c, T::zero(), &mut rng)?;
        let gm_losses = continue_after_growth(ckpt, event, &gm_init, task, base_cfg, vcfg.horizon)?;

        let mut diffs: Vec<Vec<T>> = vec![Vec::new(); vcfg.horizon];
        for _ in 0..vcfg.continue_reps {
            let out_l = outgoing_site(&ckpt.net, event.layer)?;
            let rnd_init = init_random(
                incoming_width(&ckpt.net.layers[event.layer])?,
                outgoing_block_rows(&ckpt.net.layers[out_l]),
                event.k,
                c,
                T::zero(),
                GrowthDirection::IncomingZero,
                &mut rng,
            )?;
            let rnd_losses =
                continue_after_growth(ckpt, event, &rnd_init, task, base_cfg, vcfg.horizon)?;
            for (t, (r, g)) in rnd_losses.iter().zip(&gm_losses).enumerate() {
                diffs[t].push(*r - *g);
            }
        }
        let diffs = diffs
            .into_iter()
            .map(|d| t_confidence(&d, 0.80))
            .collect::<Result<Vec<_>>>()?;
        study_c.push(StudyCRow {
            checkpoint_step: ckpt.step,
            diffs,
        });
    }

    Ok(VerificationReport {
        study_a,
        study_b,
        study_c,
    })
}

/// Grow one block on a copy of the checkpoint and return the Frobenius norm
/// of the incoming new-weight gradient.
pub fn measure_new_grad_norm<T: Scalar>(
    net: &Network<T>,
    event: &GrowthEvent<T>,
    init: &InitResult<T>,
    task: &TeacherStudentTask<T>,
) -> Result<T> {
    let mut trial = net.clone();
    grow_neurons(&mut trial, event.layer, init, None)?;
    let gs = loss_gradients(&trial, &task.inputs, &task.targets)?;
    let (gin, _) = new_block_gradients(&trial, &gs, event.layer, event.k)?;
    Ok(gin.frobenius_norm())
}

fn continue_after_growth<T: Scalar>(
    ckpt: &Checkpoint<T>,
    event: &GrowthEvent<T>,
    init: &InitResult<T>,
    task: &TeacherStudentTask<T>,
    base_cfg: &RunConfig<T>,
    horizon: usize,
) -> Result<Vec<T>> {
    let mut net = ckpt.net.clone();
    let mut opt = ckpt.opt.clone();
    grow_neurons(&mut net, event.layer, init, Some(&mut opt))?;
    let mut cfg = base_cfg.clone();
    cfg.plan = GrowthPlan::empty();
    cfg.total_steps = ckpt.step + horizon;
    let outcome = run_training_from(net, opt, ckpt.step, task, &cfg)?;
    Ok(outcome.log.steps.iter().map(|r| r.loss).collect())
}

/// One repetition of the singular-value / loss correlation study.
#[derive(Debug, Clone)]
pub struct CorrelationRep<T> {
    pub singular_values: Vec<T>,
    /// Pearson coefficient between the singular values and the per-direction
    /// losses, indexed by steps after growth (0 = first post-growth step).
    pub pearson_by_horizon: Vec<Option<T>>,
}

/// Correlation study results for one growth iteration.
#[derive(Debug, Clone)]
pub struct CorrelationStudy<T> {
    pub growth_iter: usize,
    pub reps: Vec<CorrelationRep<T>>,
}

/// For each listed growth iteration: train without growing, then grow once
/// with each of the top singular directions separately, continue training,
/// and correlate the singular values with the per-direction losses at every
/// subsequent step. Repetitions vary the task and training seeds.
pub fn singular_value_loss_correlation<T: Scalar>(
    task: &TeacherStudentTask<T>,
    cfg: &RunConfig<T>,
    growth_iters: &[usize],
    top: usize,
    horizon: usize,
    reps: usize,
) -> Result<Vec<CorrelationStudy<T>>> {
    let m_i = task.inputs.rows();
    let m_h = task.teacher.layers[0].weights.rows();
    let m_o = task.targets.rows();
    let n = task.inputs.cols();
    let layer = cfg.plan.events().first().map_or(0, |e| e.layer);
    let policy = cfg
        .plan
        .events()
        .first()
        .map_or(NormPolicy::MeanExisting, |e| e.norm_policy);

    let mut out = Vec::with_capacity(growth_iters.len());
    for &iter in growth_iters {
        if iter >= cfg.total_steps {
            return Err(Error::Precondition(format!(
                "growth iteration {iter} is past the end of training"
            )));
        }
        let mut rep_results = Vec::with_capacity(reps);
        for rep in 0..reps as u64 {
            let rep_task = make_task::<T>(
                m_i,
                m_h,
                m_o,
                n,
                task.teacher_seed + rep,
                task.data_seed + rep,
            )?;
            let mut base = cfg.clone();
            base.plan = GrowthPlan::empty();
            base.total_steps = iter.max(1);
            base.train_seed = cfg.train_seed + rep;
            let outcome = run_training(&rep_task, &base)?;
            let state = Checkpoint {
                step: iter,
                net: outcome.final_net,
                opt: outcome.final_opt,
            };

            let cg =
                crate::net::cross_gradient(&state.net, layer, &rep_task.inputs, &rep_task.targets)?;
            let m = cg.matrix_form()?;
            let max_dirs = m.rows().min(m.cols());
            if max_dirs < 3 {
                return Err(Error::Precondition(
                    "correlation study needs at least 3 singular directions".into(),
                ));
            }
            let k = top.min(max_dirs);
            let svd = svd_topk(&m, k)?;
            let c = block_target_norm(&policy, &state.net.layers[layer], 1)?;

            let mut losses: Vec<Vec<T>> = Vec::with_capacity(k);
            for dir in 0..k {
                let mut w_out = Matrix::zeros(m.rows(), 1);
                for r in 0..m.rows() {
                    w_out.set(r, 0, svd.left_vectors.get(r, dir) * c);
                }
                let init = InitResult {
                    w_in_new: Matrix::zeros(1, cg.incoming_cols()),
                    w_out_new: w_out,
                    objective_value: T::zero(),
                    singular_values: None,
                    bias_new: None,
                };
                let event = GrowthEvent {
                    step: iter,
                    layer,
                    k: 1,
                    method: GrowthMethod::GradMax,
                    direction: GrowthDirection::IncomingZero,
                    norm_policy: policy,
                    epsilon: T::zero(),
                };
                losses.push(continue_after_growth(
                    &state, &event, &init, &rep_task, &base, horizon,
                )?);
            }

            let sigma = svd.singular_values.clone();
            let pearson_by_horizon = (0..horizon)
                .map(|t| {
                    let ys: Vec<T> = losses.iter().map(|l| l[t]).collect();
                    crate::metrics::pearson(&sigma, &ys)
                })
                .collect();
            rep_results.push(CorrelationRep {
                singular_values: sigma,
                pearson_by_horizon,
            });
        }
        out.push(CorrelationStudy {
            growth_iter: iter,
            reps: rep_results,
        });
    }
    Ok(out)
}
