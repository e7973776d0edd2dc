//! Growth mechanics and neuron initializers.
//!
//! Growing `k` neurons at layer `l` appends `k` rows to that layer's weight
//! matrix (the incoming side) and `k` columns to the next weight layer (the
//! outgoing side). One side starts at (or near) zero so the network function
//! is preserved; the other side is what the initializer strategies differ
//! on. The closed-form strategy sets the outgoing columns along the top
//! left-singular vectors of the cross-gradient matrix, which maximizes the
//! gradient norm the new weights will see.

use rand::Rng;

use crate::linalg::{svd_topk, Matrix};
use crate::net::{
    adam_step, backward_with_deltas, bn_backward, bn_forward, cross_gradient, forward,
    loss_gradients, squared_loss, Activation, AdamConfig, AdamState, CrossGradient, GradientSet,
    Layer, LayerBuf, LayerKind, Network, SgdState,
};
use crate::{lit, Error, Result, Scalar};

/// Initializer strategy for newly grown neurons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthMethod {
    /// Closed-form SVD initialization of the outgoing weights.
    GradMax,
    /// Iterative (Adam) maximization of the same objective.
    GradMaxOpt,
    /// Gaussian weights rescaled to the target norm.
    Random,
    /// Both sides trained briefly against the batch loss.
    FireflyOpt,
    /// Both weight sides zero, new bias entries set to one.
    ZeroUnitBias,
}

impl GrowthMethod {
    pub fn name(self) -> &'static str {
        match self {
            GrowthMethod::GradMax => "gradmax",
            GrowthMethod::GradMaxOpt => "gradmaxopt",
            GrowthMethod::Random => "random",
            GrowthMethod::FireflyOpt => "fireflyopt",
            GrowthMethod::ZeroUnitBias => "zerounitbias",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gradmax" => Ok(GrowthMethod::GradMax),
            "gradmaxopt" => Ok(GrowthMethod::GradMaxOpt),
            "random" => Ok(GrowthMethod::Random),
            "fireflyopt" => Ok(GrowthMethod::FireflyOpt),
            "zerounitbias" => Ok(GrowthMethod::ZeroUnitBias),
            other => Err(Error::Parse(format!("unknown growth method '{other}'"))),
        }
    }
}

/// Which side of the new neurons starts at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthDirection {
    IncomingZero,
    OutgoingZero,
}

impl GrowthDirection {
    pub fn name(self) -> &'static str {
        match self {
            GrowthDirection::IncomingZero => "incoming_zero",
            GrowthDirection::OutgoingZero => "outgoing_zero",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "incoming_zero" => Ok(GrowthDirection::IncomingZero),
            "outgoing_zero" => Ok(GrowthDirection::OutgoingZero),
            other => Err(Error::Parse(format!("unknown direction '{other}'"))),
        }
    }
}

/// How the free side's norm target is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormPolicy<T> {
    /// Mean Euclidean norm of the existing neurons' incoming rows.
    MeanExisting,
    Fixed(T),
}

/// One scheduled growth action.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthEvent<T> {
    pub step: usize,
    pub layer: usize,
    pub k: usize,
    pub method: GrowthMethod,
    pub direction: GrowthDirection,
    pub norm_policy: NormPolicy<T>,
    pub epsilon: T,
}

impl<T: Scalar> GrowthEvent<T> {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Precondition("growth event needs k >= 1".into()));
        }
        if self.epsilon < T::zero() {
            return Err(Error::Precondition("epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ordered schedule of growth events (strictly increasing steps).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowthPlan<T> {
    events: Vec<GrowthEvent<T>>,
}

impl<T: Scalar> GrowthPlan<T> {
    pub fn empty() -> Self {
        Self { events: Vec::new() }
    }

    pub fn new(events: Vec<GrowthEvent<T>>) -> Result<Self> {
        for e in &events {
            e.validate()?;
        }
        if events.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::Precondition(
                "growth events must have strictly increasing steps".into(),
            ));
        }
        Ok(Self { events })
    }

    /// `count` identical events starting at `first_step`, `interval` apart.
    #[allow(clippy::too_many_arguments)]
    pub fn schedule(
        first_step: usize,
        interval: usize,
        count: usize,
        layer: usize,
        k: usize,
        method: GrowthMethod,
        direction: GrowthDirection,
        norm_policy: NormPolicy<T>,
        epsilon: T,
    ) -> Result<Self> {
        if count > 0 && interval == 0 {
            return Err(Error::Precondition("growth interval must be positive".into()));
        }
        let events = (0..count)
            .map(|i| GrowthEvent {
                step: first_step + i * interval,
                layer,
                k,
                method,
                direction,
                norm_policy,
                epsilon,
            })
            .collect();
        Self::new(events)
    }

    pub fn events(&self) -> &[GrowthEvent<T>] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn last_step(&self) -> Option<usize> {
        self.events.last().map(|e| e.step)
    }

    pub fn total_neurons(&self) -> usize {
        self.events.iter().map(|e| e.k).sum()
    }
}

/// Weights (and optionally bias entries) for a block of new neurons.
///
/// `w_in_new` is `k x in`, one row per neuron; `w_out_new` holds one column
/// per neuron (`M_{l+1} x k` for dense sites, flattened outgoing filters for
/// conv sites). `objective_value` is the achieved gradient-norm^2 for the
/// gradient-maximizing methods, 0 otherwise.
#[derive(Debug, Clone)]
pub struct InitResult<T> {
    pub w_in_new: Matrix<T>,
    pub w_out_new: Matrix<T>,
    pub objective_value: T,
    pub singular_values: Option<Vec<T>>,
    pub bias_new: Option<Vec<T>>,
}

/// Per-neuron norm target: mean existing row norm, or the fixed scale.
pub fn target_norm<T: Scalar>(policy: &NormPolicy<T>, layer: &Layer<T>) -> Result<T> {
    match policy {
        NormPolicy::Fixed(s) => Ok(*s),
        NormPolicy::MeanExisting => {
            if !layer.is_weight_layer() || layer.weights.rows() == 0 {
                return Err(Error::State(
                    "mean_existing norm needs a non-empty weight layer".into(),
                ));
            }
            let norms = layer.weights.row_norms();
            let n = lit::<T>(norms.len() as f64);
            Ok(norms.into_iter().sum::<T>() / n)
        }
    }
}

/// Frobenius target for the whole new block: `mean_existing` scales the
/// per-neuron norm by sqrt(k) so k = 1 agrees with both readings; `fixed`
/// binds the block directly.
pub fn block_target_norm<T: Scalar>(
    policy: &NormPolicy<T>,
    layer: &Layer<T>,
    k: usize,
) -> Result<T> {
    let per = target_norm(policy, layer)?;
    match policy {
        NormPolicy::Fixed(_) => Ok(per),
        NormPolicy::MeanExisting => Ok(per * lit::<T>((k as f64).sqrt())),
    }
}

/// Gaussian matrix rescaled to the given Frobenius norm (zero for norm 0).
fn random_with_norm<T: Scalar>(
    rows: usize,
    cols: usize,
    norm: T,
    rng: &mut impl Rng,
) -> Result<Matrix<T>> {
    if norm == T::zero() {
        return Ok(Matrix::zeros(rows, cols));
    }
    let g = Matrix::from_fn(rows, cols, |_, _| T::standard_normal(rng));
    g.rescaled_to(norm)
}

/// Closed-form initializer: outgoing columns along the top-k left singular
/// vectors of the cross-gradient, column `i` scaled by `c * sigma_i / |sigma|`
/// so the block's Frobenius norm is exactly `c`. The incoming side is
/// epsilon-scaled Gaussian (exactly zero for epsilon = 0).
pub fn init_gradmax<T: Scalar>(
    cg: &CrossGradient<T>,
    k: usize,
    c: T,
    epsilon: T,
    rng: &mut impl Rng,
) -> Result<InitResult<T>> {
    let m = cg.matrix_form()?;
    let svd = svd_topk(&m, k)?;
    let sig = svd.singular_values.clone();
    let sig_norm = sig.iter().map(|&s| s * s).sum::<T>().sqrt();
    let mut w_out = Matrix::zeros(m.rows(), k);
    if sig_norm > lit::<T>(1e-12) {
        for j in 0..k {
            let scale = c * sig[j] / sig_norm;
            for r in 0..m.rows() {
                w_out.set(r, j, svd.left_vectors.get(r, j) * scale);
            }
        }
    } else {
        // Degenerate signal: spread the norm evenly over the (completed)
        // orthonormal columns.
        let scale = c / lit::<T>((k as f64).sqrt());
        for j in 0..k {
            for r in 0..m.rows() {
                w_out.set(r, j, svd.left_vectors.get(r, j) * scale);
            }
        }
    }
    let w_in_new = random_with_norm(k, cg.incoming_cols(), epsilon, rng)?;
    let objective_value = w_out.matmul_tn(&m)?.frobenius_norm().powi(2);
    Ok(InitResult {
        w_in_new,
        w_out_new: w_out,
        objective_value,
        singular_values: Some(sig),
        bias_new: None,
    })
}

/// Hyperparameters for the iterative initializers.
#[derive(Debug, Clone, Copy)]
pub struct AscentConfig<T> {
    pub steps: usize,
    pub adam: AdamConfig<T>,
}

/// Adam with the second-moment estimate shared across the whole matrix.
///
/// Per-coordinate Adam degenerates to a sign-vector update under the
/// rescale-to-norm projection and stalls far from the top singular vector
/// even on rank-one landscapes; sharing the second moment keeps the
/// momentum-smoothed ascent direction intact while retaining the adaptive
/// step size.
struct ProjectedAdam<T> {
    momentum: Matrix<T>,
    second: T,
    t: i32,
}

impl<T: Scalar> ProjectedAdam<T> {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            momentum: Matrix::zeros(rows, cols),
            second: T::zero(),
            t: 0,
        }
    }

    /// One ascent step followed by the rescale-to-`norm` projection.
    fn ascend(
        &mut self,
        w: &mut Matrix<T>,
        grad: &Matrix<T>,
        cfg: &AdamConfig<T>,
        norm: T,
    ) -> Result<()> {
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient during ascent".into()));
        }
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        self.momentum = self
            .momentum
            .scaled(b1)
            .add(&grad.scaled(T::one() - b1))?;
        let mean_sq = grad.data().iter().map(|&g| g * g).sum::<T>()
            / lit::<T>(grad.data().len() as f64);
        self.second = b2 * self.second + (T::one() - b2) * mean_sq;
        let m_hat = self.momentum.scaled(T::one() / (T::one() - b1.powi(self.t)));
        let v_hat = self.second / (T::one() - b2.powi(self.t));
        let step = cfg.lr / (v_hat.sqrt() + cfg.eps);
        *w = w.add(&m_hat.scaled(step))?;
        *w = w.rescaled_to(norm)?;
        Ok(())
    }
}

impl<T: Scalar> AscentConfig<T> {
    /// Defaults for the gradient-norm ascent: 2000 Adam steps at lr 1e-2.
    pub fn gradmax_opt() -> Self {
        Self {
            steps: 2000,
            adam: AdamConfig::with_lr(lit(1e-2)),
        }
    }

    /// Defaults for the loss-descent initializer: 100 Adam steps at lr 1e-2.
    pub fn firefly() -> Self {
        Self {
            steps: 100,
            adam: AdamConfig::with_lr(lit(1e-2)),
        }
    }
}

/// Iterative counterpart of [`init_gradmax`]: Adam ascent on the new-weight
/// gradient norm with a rescale-to-`c` projection after every step.
///
/// With `IncomingZero` it climbs the same objective the SVD solves in closed
/// form; with `OutgoingZero` (where no closed form exists) it optimizes the
/// incoming weights instead, including through a batch-norm layer directly
/// after the growth site.
#[allow(clippy::too_many_arguments)]
pub fn init_gradmax_opt<T: Scalar>(
    net: &Network<T>,
    l: usize,
    k: usize,
    c: T,
    epsilon: T,
    batch: &Matrix<T>,
    targets: &Matrix<T>,
    direction: GrowthDirection,
    cfg: &AscentConfig<T>,
    rng: &mut impl Rng,
) -> Result<InitResult<T>> {
    match direction {
        GrowthDirection::IncomingZero => {
            let cg = cross_gradient(net, l, batch, targets)?;
            let m = cg.matrix_form()?;
            if k > m.rows().min(m.cols()) {
                return Err(Error::Dimension(format!(
                    "k={k} exceeds cross-gradient rank bound {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            let gram = m.matmul_nt(&m)?;
            let mut w = random_with_norm(m.rows(), k, c, rng)?;
            let mut adam = ProjectedAdam::new(m.rows(), k);
            for _ in 0..cfg.steps {
                // J = |wᵀ G|_F^2, dJ/dw = 2 G Gᵀ w.
                let grad = gram.matmul(&w)?.scaled(lit::<T>(2.0));
                adam.ascend(&mut w, &grad, &cfg.adam, c)?;
            }
            let objective_value = w.matmul_tn(&m)?.frobenius_norm().powi(2);
            let w_in_new = random_with_norm(k, cg.incoming_cols(), epsilon, rng)?;
            Ok(InitResult {
                w_in_new,
                w_out_new: w,
                objective_value,
                singular_values: None,
                bias_new: None,
            })
        }
        GrowthDirection::OutgoingZero => {
            init_gradmax_opt_outgoing(net, l, k, c, epsilon, batch, targets, cfg, rng)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn init_gradmax_opt_outgoing<T: Scalar>(
    net: &Network<T>,
    l: usize,
    k: usize,
    c: T,
    epsilon: T,
    batch: &Matrix<T>,
    targets: &Matrix<T>,
    cfg: &AscentConfig<T>,
    rng: &mut impl Rng,
) -> Result<InitResult<T>> {
    let out_l = outgoing_site(net, l)?;
    if !matches!(net.layers[l].kind, LayerKind::Dense)
        || !matches!(net.layers[out_l].kind, LayerKind::Dense)
    {
        return Err(Error::State(
            "outgoing-zero optimization is implemented for dense growth sites".into(),
        ));
    }
    let bn_eps = match out_l - l {
        1 => None,
        2 => match net.layers[l + 1].kind {
            LayerKind::BatchNorm { eps } => Some(eps),
            _ => unreachable!("outgoing_site skips only batch-norm layers"),
        },
        _ => {
            return Err(Error::State(
                "at most one batch-norm layer between growth site and outgoing layer".into(),
            ))
        }
    };

    // With the outgoing side zero the existing activations and deltas do not
    // depend on the new neurons; compute them once.
    let (outputs, cache) = forward(net, batch)?;
    let (_, loss_grad) = squared_loss(&outputs, targets)?;
    let (_, deltas) = backward_with_deltas(net, &cache, &loss_grad)?;
    let delta_next = &deltas[out_l];
    let h_in = &cache.activations[l];
    let act = net.layers[l].activation;

    let mut w_in = random_with_norm(k, h_in.rows(), c, rng)?;
    let mut adam = ProjectedAdam::new(k, h_in.rows());
    for _ in 0..cfg.steps {
        let (_, grad) = outgoing_objective(&w_in, h_in, delta_next, act, bn_eps)?;
        adam.ascend(&mut w_in, &grad, &cfg.adam, c)?;
    }
    let (objective_value, _) = outgoing_objective(&w_in, h_in, delta_next, act, bn_eps)?;
    let w_out_new = random_with_norm(net.layers[out_l].weights.rows(), k, epsilon, rng)?;
    Ok(InitResult {
        w_in_new: w_in,
        w_out_new,
        objective_value,
        singular_values: None,
        bias_new: None,
    })
}

/// Objective `|Δ_{l+1} b(W_in)ᵀ|_F^2` (the outgoing-weight gradient norm of
/// zero outgoing columns) and its gradient with respect to `w_in`.
fn outgoing_objective<T: Scalar>(
    w_in: &Matrix<T>,
    h_in: &Matrix<T>,
    delta_next: &Matrix<T>,
    act: Activation,
    bn_eps: Option<T>,
) -> Result<(T, Matrix<T>)> {
    let z = w_in.matmul(h_in)?;
    let a = z.map(|v| act.apply(v));
    let (b, bn_ctx) = match bn_eps {
        None => (a.clone(), None),
        Some(eps) => {
            let unit = unit_bn_weights(z.rows());
            let (b, stats) = bn_forward(&unit, eps, &a);
            (b, Some((unit, stats)))
        }
    };
    let am = delta_next.matmul_nt(&b)?;
    let objective = am.frobenius_norm().powi(2);
    // dJ/db = 2 Aᵀ Δ  (k x N)
    let db = am.matmul_tn(delta_next)?.scaled(lit::<T>(2.0));
    let da = match &bn_ctx {
        None => db,
        Some((unit, stats)) => bn_backward(unit, stats, &db).1,
    };
    let mut dz = da;
    for r in 0..dz.rows() {
        let zr = z.row(r);
        for (d, &zv) in dz.row_mut(r).iter_mut().zip(zr) {
            *d *= act.derivative(zv);
        }
    }
    let grad = dz.matmul_nt(h_in)?;
    Ok((objective, grad))
}

fn unit_bn_weights<T: Scalar>(width: usize) -> Matrix<T> {
    let mut w = Matrix::zeros(2, width);
    for j in 0..width {
        w.set(0, j, T::one());
    }
    w
}

/// Gaussian initializer: the free side rescaled to `c`, the zero side
/// epsilon-scaled.
pub fn init_random<T: Scalar>(
    in_cols: usize,
    out_rows: usize,
    k: usize,
    c: T,
    epsilon: T,
    direction: GrowthDirection,
    rng: &mut impl Rng,
) -> Result<InitResult<T>> {
    let (w_in_new, w_out_new) = match direction {
        GrowthDirection::IncomingZero => (
            random_with_norm(k, in_cols, epsilon, rng)?,
            random_with_norm(out_rows, k, c, rng)?,
        ),
        GrowthDirection::OutgoingZero => (
            random_with_norm(k, in_cols, c, rng)?,
            random_with_norm(out_rows, k, epsilon, rng)?,
        ),
    };
    Ok(InitResult {
        w_in_new,
        w_out_new,
        objective_value: T::zero(),
        singular_values: None,
        bias_new: None,
    })
}

/// Loss trajectory of the loss-descent initializer.
#[derive(Debug, Clone, Copy)]
pub struct FireflyTrace<T> {
    pub loss_start: T,
    pub loss_end: T,
}

/// Loss-descent initializer: both sides start as epsilon-scaled Gaussians
/// (the outgoing side must be non-zero to receive loss gradients), then the
/// new block is trained with Adam against the batch loss while the existing
/// weights stay frozen. The best-loss iterate is kept and its incoming side
/// rescaled to `c` so all methods share the same normalization.
#[allow(clippy::too_many_arguments)]
pub fn init_firefly_opt<T: Scalar>(
    net: &Network<T>,
    l: usize,
    k: usize,
    c: T,
    epsilon: T,
    batch: &Matrix<T>,
    targets: &Matrix<T>,
    cfg: &AscentConfig<T>,
    rng: &mut impl Rng,
) -> Result<(InitResult<T>, FireflyTrace<T>)> {
    if epsilon <= T::zero() {
        return Err(Error::Precondition(
            "fireflyopt needs epsilon > 0 (zero outgoing weights receive no loss gradient)".into(),
        ));
    }
    let out_l = outgoing_site(net, l)?;
    let in_cols = incoming_cols(net, l)?;
    let out_rows = outgoing_rows(net, out_l);

    let seed_init = InitResult {
        w_in_new: random_with_norm(k, in_cols, epsilon, rng)?,
        w_out_new: random_with_norm(out_rows, k, epsilon, rng)?,
        objective_value: T::zero(),
        singular_values: None,
        bias_new: None,
    };
    let mut trial = net.clone();
    grow_neurons(&mut trial, l, &seed_init, None)?;

    let mut adam_in = AdamState::zeros(k, in_cols);
    let mut adam_out = AdamState::zeros(out_rows, k);
    let mut best: Option<(T, Matrix<T>, Matrix<T>)> = None;
    let mut loss_start = None;
    for _ in 0..cfg.steps {
        let gs = loss_gradients(&trial, batch, targets)?;
        loss_start.get_or_insert(gs.loss);
        let (cur_in, cur_out) = new_blocks(&trial, l, out_l, k)?;
        if best.as_ref().is_none_or(|(b, _, _)| gs.loss < *b) {
            best = Some((gs.loss, cur_in.clone(), cur_out.clone()));
        }
        let (gin, gout) = new_block_gradients(&trial, &gs, l, k)?;
        let (mut bin, mut bout) = (cur_in, cur_out);
        adam_step(&mut bin, &gin, &mut adam_in, &cfg.adam)?;
        adam_step(&mut bout, &gout, &mut adam_out, &cfg.adam)?;
        set_new_blocks(&mut trial, l, out_l, k, &bin, &bout)?;
    }
    let final_loss = {
        let (out, _) = forward(&trial, batch)?;
        squared_loss(&out, targets)?.0
    };
    let (fin_in, fin_out) = new_blocks(&trial, l, out_l, k)?;
    if best.as_ref().is_none_or(|(b, _, _)| final_loss < *b) {
        best = Some((final_loss, fin_in, fin_out));
    }
    let (best_loss, bin, bout) = best.expect("at least the final iterate is recorded");
    let trace = FireflyTrace {
        loss_start: loss_start.unwrap_or(final_loss),
        loss_end: best_loss,
    };
    Ok((
        InitResult {
            w_in_new: bin.rescaled_to(c)?,
            w_out_new: bout,
            objective_value: T::zero(),
            singular_values: None,
            bias_new: None,
        },
        trace,
    ))
}

/// Both weight sides zero; new bias entries set to one so the first backward
/// pass already produces outgoing-weight gradients.
pub fn init_zero_unit_bias<T: Scalar>(in_cols: usize, out_rows: usize, k: usize) -> InitResult<T> {
    InitResult {
        w_in_new: Matrix::zeros(k, in_cols),
        w_out_new: Matrix::zeros(out_rows, k),
        objective_value: T::zero(),
        singular_values: None,
        bias_new: Some(vec![T::one(); k]),
    }
}

/// Index of the weight layer that receives the outgoing columns when layer
/// `l` grows (skipping batch-norm layers in between).
pub fn outgoing_site<T: Scalar>(net: &Network<T>, l: usize) -> Result<usize> {
    if l >= net.layers.len() {
        return Err(Error::Index(format!("layer {l} out of range")));
    }
    if !net.layers[l].is_weight_layer() {
        return Err(Error::State(format!("layer {l} is not a weight layer")));
    }
    let mut j = l + 1;
    while j < net.layers.len() && matches!(net.layers[j].kind, LayerKind::BatchNorm { .. }) {
        j += 1;
    }
    if j >= net.layers.len() {
        return Err(Error::Index(format!(
            "layer {l} has no outgoing layer to receive new neurons"
        )));
    }
    Ok(j)
}

/// Column count of an incoming growth block at this layer (`M_{l-1}` for
/// dense layers, the flattened filter footprint for conv layers).
pub fn incoming_width<T: Scalar>(layer: &Layer<T>) -> Result<usize> {
    match &layer.kind {
        LayerKind::Dense => Ok(layer.weights.cols()),
        LayerKind::Conv2d(g) => Ok(g.weight_cols()),
        LayerKind::BatchNorm { .. } => {
            Err(Error::State("cannot grow a batch-norm layer".into()))
        }
    }
}

/// Row count of an outgoing growth block when this layer receives new
/// inputs (`M_{l+1}` for dense layers, `o * kh * kw` for conv layers).
pub fn outgoing_block_rows<T: Scalar>(layer: &Layer<T>) -> usize {
    match &layer.kind {
        LayerKind::Dense => layer.weights.rows(),
        LayerKind::Conv2d(g) => g.out_channels * g.kernel_h * g.kernel_w,
        LayerKind::BatchNorm { .. } => unreachable!("outgoing site is a weight layer"),
    }
}

fn incoming_cols<T: Scalar>(net: &Network<T>, l: usize) -> Result<usize> {
    incoming_width(&net.layers[l])
}

fn outgoing_rows<T: Scalar>(net: &Network<T>, out_l: usize) -> usize {
    outgoing_block_rows(&net.layers[out_l])
}

/// Append `k` new neurons at layer `l`.
///
/// Pre-existing weights are untouched (bit-identical); the momentum state,
/// when provided, is extended with zeros for the new entries. A batch-norm
/// layer between the growth site and its outgoing layer gains unit-scale,
/// zero-shift features.
pub fn grow_neurons<T: Scalar>(
    net: &mut Network<T>,
    l: usize,
    init: &InitResult<T>,
    opt: Option<&mut SgdState<T>>,
) -> Result<()> {
    let out_l = outgoing_site(net, l)?;
    let k = init.w_in_new.rows();
    if k == 0 {
        return Err(Error::Precondition("growth block is empty".into()));
    }
    if init.w_in_new.cols() != incoming_cols(net, l)? {
        return Err(Error::Dimension(format!(
            "incoming block is {}x{}, layer {l} expects width {}",
            k,
            init.w_in_new.cols(),
            incoming_cols(net, l)?
        )));
    }
    let want_out = (outgoing_rows(net, out_l), k);
    if init.w_out_new.shape() != want_out {
        return Err(Error::Dimension(format!(
            "outgoing block is {:?}, expected {:?}",
            init.w_out_new.shape(),
            want_out
        )));
    }
    if init.bias_new.is_some() && net.layers[l].bias.is_none() {
        return Err(Error::State(
            "initializer provides bias entries but the layer has bias disabled".into(),
        ));
    }
    if let Some(b) = &init.bias_new {
        if b.len() != k {
            return Err(Error::Dimension("bias block length != k".into()));
        }
    }

    // Incoming side: new rows (dense) / new output-channel filters (conv).
    net.layers[l].weights.append_rows(&init.w_in_new)?;
    if let LayerKind::Conv2d(g) = &mut net.layers[l].kind {
        g.out_channels += k;
    }
    if let Some(bias) = &mut net.layers[l].bias {
        match &init.bias_new {
            Some(b) => bias.extend_from_slice(b),
            None => bias.extend(std::iter::repeat(T::zero()).take(k)),
        }
    }

    // Batch-norm layers in between gain unit-scale, zero-shift features.
    for j in (l + 1)..out_l {
        let ext = Matrix::from_fn(2, k, |r, _| if r == 0 { T::one() } else { T::zero() });
        net.layers[j].weights.append_cols(&ext)?;
    }

    // Outgoing side: new columns (dense) / new input-channel blocks (conv).
    append_outgoing_block(&mut net.layers[out_l], k, &init.w_out_new)?;

    if let Some(state) = opt {
        extend_sgd_state(state, net, l, out_l, k)?;
    }
    net.validate()
}

fn append_outgoing_block<T: Scalar>(
    layer: &mut Layer<T>,
    k: usize,
    block: &Matrix<T>,
) -> Result<()> {
    match &mut layer.kind {
        LayerKind::Dense => layer.weights.append_cols(block),
        LayerKind::Conv2d(g) => {
            let (kh, kw) = (g.kernel_h, g.kernel_w);
            let ext = Matrix::from_fn(g.out_channels, k * kh * kw, |o, col| {
                let (c, rest) = (col / (kh * kw), col % (kh * kw));
                block.get(o * kh * kw + rest, c)
            });
            layer.weights.append_cols(&ext)?;
            g.in_channels += k;
            Ok(())
        }
        LayerKind::BatchNorm { .. } => unreachable!("outgoing site is a weight layer"),
    }
}

fn extend_sgd_state<T: Scalar>(
    state: &mut SgdState<T>,
    net: &Network<T>,
    l: usize,
    out_l: usize,
    k: usize,
) -> Result<()> {
    if state.velocity.len() != net.layers.len() {
        return Err(Error::State("optimizer state layer count mismatch".into()));
    }
    let vin = &mut state.velocity[l];
    vin.weights
        .append_rows(&Matrix::zeros(k, vin.weights.cols()))?;
    if let Some(b) = &mut vin.bias {
        b.extend(std::iter::repeat(T::zero()).take(k));
    }
    for j in (l + 1)..out_l {
        let v = &mut state.velocity[j].weights;
        v.append_cols(&Matrix::zeros(v.rows(), k))?;
    }
    let vout = &mut state.velocity[out_l];
    let added = net.layers[out_l].weights.cols() - vout.weights.cols();
    vout.weights
        .append_cols(&Matrix::zeros(vout.weights.rows(), added))?;
    Ok(())
}

/// The current weights of the newest `k`-neuron block at layer `l`
/// (incoming rows, outgoing columns in initializer layout).
pub fn new_blocks<T: Scalar>(
    net: &Network<T>,
    l: usize,
    out_l: usize,
    k: usize,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let w_in = &net.layers[l].weights;
    if w_in.rows() < k {
        return Err(Error::Dimension("layer has fewer rows than the block".into()));
    }
    let bin = Matrix::from_fn(k, w_in.cols(), |r, c| w_in.get(w_in.rows() - k + r, c));
    let bout = extract_outgoing_block(&net.layers[out_l], k)?;
    Ok((bin, bout))
}

fn extract_outgoing_block<T: Scalar>(layer: &Layer<T>, k: usize) -> Result<Matrix<T>> {
    match &layer.kind {
        LayerKind::Dense => {
            let w = &layer.weights;
            Ok(Matrix::from_fn(w.rows(), k, |r, c| {
                w.get(r, w.cols() - k + c)
            }))
        }
        LayerKind::Conv2d(g) => {
            let (kh, kw) = (g.kernel_h, g.kernel_w);
            let w = &layer.weights;
            let base = (g.in_channels - k) * kh * kw;
            Ok(Matrix::from_fn(g.out_channels * kh * kw, k, |row, c| {
                let (o, rest) = (row / (kh * kw), row % (kh * kw));
                w.get(o, base + c * kh * kw + rest)
            }))
        }
        LayerKind::BatchNorm { .. } => Err(Error::State("not a weight layer".into())),
    }
}

/// Gradients of the newest `k`-neuron block at layer `l`, in the same layout
/// as [`new_blocks`].
pub fn new_block_gradients<T: Scalar>(
    net: &Network<T>,
    grads: &GradientSet<T>,
    l: usize,
    k: usize,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let out_l = outgoing_site(net, l)?;
    let gin_full = &grads.layers[l].weights;
    let gin = Matrix::from_fn(k, gin_full.cols(), |r, c| {
        gin_full.get(gin_full.rows() - k + r, c)
    });
    let gl = Layer {
        kind: net.layers[out_l].kind.clone(),
        weights: grads.layers[out_l].weights.clone(),
        bias: None,
        activation: net.layers[out_l].activation,
        passthrough: 0,
    };
    let gout = extract_outgoing_block(&gl, k)?;
    Ok((gin, gout))
}

fn set_new_blocks<T: Scalar>(
    net: &mut Network<T>,
    l: usize,
    out_l: usize,
    k: usize,
    bin: &Matrix<T>,
    bout: &Matrix<T>,
) -> Result<()> {
    let w_in = &mut net.layers[l].weights;
    let base = w_in.rows() - k;
    for r in 0..k {
        for c in 0..w_in.cols() {
            w_in.set(base + r, c, bin.get(r, c));
        }
    }
    match &net.layers[out_l].kind {
        LayerKind::Dense => {
            let w = &mut net.layers[out_l].weights;
            let base = w.cols() - k;
            for r in 0..w.rows() {
                for c in 0..k {
                    w.set(r, base + c, bout.get(r, c));
                }
            }
        }
        LayerKind::Conv2d(g) => {
            let (kh, kw, in_ch, out_ch) = (g.kernel_h, g.kernel_w, g.in_channels, g.out_channels);
            let base = (in_ch - k) * kh * kw;
            let w = &mut net.layers[out_l].weights;
            for o in 0..out_ch {
                for c in 0..k {
                    for rest in 0..kh * kw {
                        w.set(o, base + c * kh * kw + rest, bout.get(o * kh * kw + rest, c));
                    }
                }
            }
        }
        LayerKind::BatchNorm { .. } => unreachable!(),
    }
    Ok(())
}

/// Insert a new dense layer of width `k` between layers `after` and
/// `after + 1`.
///
/// The inserted computation is additive: the original connection is kept as
/// an identity-routed block (`passthrough`), so a zero incoming block leaves
/// the function unchanged. The next layer's matrix gains the outgoing
/// columns.
pub fn grow_layer<T: Scalar>(
    net: &mut Network<T>,
    after: usize,
    k: usize,
    init: &InitResult<T>,
    activation: Activation,
    opt: Option<&mut SgdState<T>>,
) -> Result<()> {
    if after + 1 >= net.layers.len() {
        return Err(Error::Index(format!(
            "cannot insert after layer {after}: no following layer"
        )));
    }
    if !matches!(net.layers[after].kind, LayerKind::Dense)
        || !matches!(net.layers[after + 1].kind, LayerKind::Dense)
    {
        return Err(Error::State(
            "layer insertion is implemented for dense-dense sites".into(),
        ));
    }
    let mid = net.layers[after].output_width();
    if init.w_in_new.shape() != (k, mid) {
        return Err(Error::Dimension(format!(
            "insertion incoming block {:?}, expected {:?}",
            init.w_in_new.shape(),
            (k, mid)
        )));
    }
    let out2 = net.layers[after + 1].weights.rows();
    if init.w_out_new.shape() != (out2, k) {
        return Err(Error::Dimension(format!(
            "insertion outgoing block {:?}, expected {:?}",
            init.w_out_new.shape(),
            (out2, k)
        )));
    }

    let mut a_weights = Matrix::identity(mid);
    a_weights.append_rows(&init.w_in_new)?;
    let inserted = Layer {
        kind: LayerKind::Dense,
        weights: a_weights,
        bias: None,
        activation,
        passthrough: mid,
    };
    net.layers[after + 1].weights.append_cols(&init.w_out_new)?;
    net.layers.insert(after + 1, inserted);

    if let Some(state) = opt {
        let v = &mut state.velocity[after + 1].weights;
        v.append_cols(&Matrix::zeros(v.rows(), k))?;
        state.velocity.insert(
            after + 1,
            LayerBuf {
                weights: Matrix::zeros(mid + k, mid),
                bias: None,
            },
        );
    }
    net.validate()
}

/// Compute an insertion initializer and apply it.
///
/// The cross-gradient of a layer inserted between `after` and `after + 1`
/// is exactly the weight gradient of layer `after + 1`, so the usual SVD
/// machinery applies. Only the closed-form and random methods are supported
/// for insertion.
#[allow(clippy::too_many_arguments)]
pub fn grow_layer_with_method<T: Scalar>(
    net: &mut Network<T>,
    after: usize,
    k: usize,
    method: GrowthMethod,
    norm_policy: &NormPolicy<T>,
    epsilon: T,
    batch: &Matrix<T>,
    targets: &Matrix<T>,
    activation: Activation,
    rng: &mut impl Rng,
    opt: Option<&mut SgdState<T>>,
) -> Result<InitResult<T>> {
    if after + 1 >= net.layers.len() {
        return Err(Error::Index(format!(
            "cannot insert after layer {after}: no following layer"
        )));
    }
    let c = block_target_norm(norm_policy, &net.layers[after + 1], k)?;
    let mid = net.layers[after].output_width();
    let out2 = net.layers[after + 1].weights.rows();
    let init = match method {
        GrowthMethod::GradMax => {
            let gs = loss_gradients(net, batch, targets)?;
            let cg = CrossGradient::Dense {
                g: gs.layers[after + 1].weights.clone(),
            };
            init_gradmax(&cg, k, c, epsilon, rng)?
        }
        GrowthMethod::Random => {
            init_random(mid, out2, k, c, epsilon, GrowthDirection::IncomingZero, rng)?
        }
        other => {
            return Err(Error::State(format!(
                "{} is not supported for layer insertion",
                other.name()
            )))
        }
    };
    grow_layer(net, after, k, &init, activation, opt)?;
    Ok(init)
}

/// Top singular values of the cross-gradient at every growable site; the
/// values equal the gradient norms attainable there, so they can guide
/// where and when to grow. Does not mutate the network.
pub fn growth_signal<T: Scalar>(
    net: &Network<T>,
    batch: &Matrix<T>,
    targets: &Matrix<T>,
    k: usize,
) -> Result<Vec<(usize, Vec<T>)>> {
    let growable: Vec<usize> = (0..net.layers.len().saturating_sub(1))
        .filter(|&l| {
            matches!(
                (&net.layers[l].kind, &net.layers[l + 1].kind),
                (LayerKind::Dense, LayerKind::Dense) | (LayerKind::Conv2d(_), LayerKind::Conv2d(_))
            )
        })
        .collect();
    if growable.is_empty() {
        return Err(Error::State("network has no growable sites".into()));
    }
    let (outputs, cache) = forward(net, batch)?;
    let (_, loss_grad) = squared_loss(&outputs, targets)?;
    let (_, deltas) = backward_with_deltas(net, &cache, &loss_grad)?;
    let mut signals = Vec::with_capacity(growable.len());
    for l in growable {
        let cg = crate::net::cross_gradient_from_deltas(net, l, &cache, &deltas)?;
        let m = cg.matrix_form()?;
        let kk = k.min(m.rows().min(m.cols()));
        let svd = svd_topk(&m, kk)?;
        signals.push((l, svd.singular_values));
    }
    Ok(signals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_net(dims: &[usize], rng: &mut ChaCha8Rng) -> Network<f64> {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let w = Matrix::from_fn(dims[i + 1], dims[i], |_, _| {
                f64::standard_normal(rng) * 0.5
            });
            let act = if i == dims.len() - 2 {
                Activation::Identity
            } else {
                Activation::Relu0
            };
            layers.push(Layer::dense(w, act));
        }
        Network::new(layers).unwrap()
    }

    fn batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| f64::standard_normal(rng))
    }

    #[test]
    fn grow_small_student_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut net = dense_net(&[20, 5, 10], &mut rng);
        let init = init_random(20, 10, 1, 1.0, 0.0, GrowthDirection::IncomingZero, &mut rng)
            .unwrap();
        grow_neurons(&mut net, 0, &init, None).unwrap();
        assert_eq!(net.layers[0].weights.shape(), (6, 20));
        assert_eq!(net.layers[1].weights.shape(), (10, 6));
    }

    #[test]
    fn incoming_zero_preserves_outputs_and_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = dense_net(&[20, 5, 10], &mut rng);
        let x = batch(20, 50, &mut rng);
        let (before, _) = forward(&net, &x).unwrap();
        let old_w0 = net.layers[0].weights.clone();

        let mut grown = net.clone();
        let init = init_random(20, 10, 3, 2.0, 0.0, GrowthDirection::IncomingZero, &mut rng)
            .unwrap();
        grow_neurons(&mut grown, 0, &init, None).unwrap();
        let (after, _) = forward(&grown, &x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);
        // Pre-existing weights bit-identical.
        for r in 0..5 {
            for c in 0..20 {
                assert_eq!(
                    old_w0.get(r, c).to_bits(),
                    grown.layers[0].weights.get(r, c).to_bits()
                );
            }
        }
    }

    #[test]
    fn outgoing_zero_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let net = dense_net(&[8, 4, 6], &mut rng);
        let x = batch(8, 20, &mut rng);
        let (before, _) = forward(&net, &x).unwrap();
        let mut grown = net.clone();
        let init = init_random(8, 6, 2, 1.5, 0.0, GrowthDirection::OutgoingZero, &mut rng)
            .unwrap();
        grow_neurons(&mut grown, 0, &init, None).unwrap();
        let (after, _) = forward(&grown, &x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);
    }

    #[test]
    fn target_norm_examples() {
        let layer = Layer::dense(
            Matrix::from_rows(&[vec![1.0f64, 0.0], vec![0.0, 3.0]]).unwrap(),
            Activation::Relu0,
        );
        assert!((target_norm(&NormPolicy::MeanExisting, &layer).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(target_norm(&NormPolicy::Fixed(0.5), &layer).unwrap(), 0.5);
        let single = Layer::dense(
            Matrix::from_rows(&[vec![7.0f64, 0.0]]).unwrap(),
            Activation::Relu0,
        );
        assert!((target_norm(&NormPolicy::MeanExisting, &single).unwrap() - 7.0).abs() < 1e-15);
        // Block norm: mean per-neuron scaled by sqrt(k); fixed binds directly.
        assert!(
            (block_target_norm(&NormPolicy::MeanExisting, &layer, 4).unwrap() - 4.0).abs()
                < 1e-12
        );
        assert_eq!(
            block_target_norm(&NormPolicy::Fixed(0.5), &layer, 4).unwrap(),
            0.5
        );
    }

    #[test]
    fn gradmax_rank_one_case() {
        // G = 5 u vᵀ with unit u, v.
        let u = [0.6, 0.8];
        let v = [1.0 / 3f64.sqrt(); 3];
        let g = Matrix::from_fn(2, 3, |r, c| 5.0 * u[r] * v[c]);
        let cg = CrossGradient::Dense { g };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = 1.7;
        let init = init_gradmax(&cg, 1, c, 0.0, &mut rng).unwrap();
        // Column proportional to u with norm c.
        let col = init.w_out_new.column(0);
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - c).abs() < 1e-10);
        assert!((col[0] / norm - u[0]).abs() < 1e-10);
        // Achieved |W_outᵀ G|_F = c * 5.
        assert!((init.objective_value.sqrt() - c * 5.0).abs() < 1e-9);
        assert!((init.singular_values.as_ref().unwrap()[0] - 5.0).abs() < 1e-10);
        // Zero incoming side for epsilon = 0.
        assert!(init.w_in_new.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradmax_zero_gradient_degenerate() {
        let cg = CrossGradient::Dense {
            g: Matrix::<f64>::zeros(4, 6),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let init = init_gradmax(&cg, 2, 1.0, 0.0, &mut rng).unwrap();
        assert!(init.objective_value.abs() < 1e-20);
        assert!(init.singular_values.unwrap().iter().all(|&s| s < 1e-10));
        assert!((init.w_out_new.frobenius_norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn gradmax_block_norm_is_c_for_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let g = batch(6, 9, &mut rng);
        let cg = CrossGradient::Dense { g };
        let init = init_gradmax(&cg, 3, 0.8, 1e-4, &mut rng).unwrap();
        assert!((init.w_out_new.frobenius_norm() - 0.8).abs() < 1e-10);
        assert!((init.w_in_new.frobenius_norm() - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn random_init_deterministic_and_normed() {
        for seed in 0..5u64 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let a = init_random::<f64>(7, 5, 2, 1.3, 1e-4, GrowthDirection::IncomingZero, &mut r1)
                .unwrap();
            let b = init_random::<f64>(7, 5, 2, 1.3, 1e-4, GrowthDirection::IncomingZero, &mut r2)
                .unwrap();
            assert_eq!(a.w_out_new, b.w_out_new);
            assert_eq!(a.w_in_new, b.w_in_new);
            assert!((a.w_out_new.frobenius_norm() - 1.3).abs() < 1e-10);
            assert!((a.w_in_new.frobenius_norm() - 1e-4).abs() < 1e-10);
        }
    }

    #[test]
    fn gradmax_opt_zero_cross_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let net = dense_net(&[4, 3, 2], &mut rng);
        let x = batch(4, 6, &mut rng);
        // Targets equal outputs: zero loss gradient everywhere.
        let (t, _) = forward(&net, &x).unwrap();
        let cfg = AscentConfig {
            steps: 50,
            adam: AdamConfig::with_lr(1e-2),
        };
        let init = init_gradmax_opt(
            &net,
            0,
            1,
            1.0,
            0.0,
            &x,
            &t,
            GrowthDirection::IncomingZero,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!(init.objective_value < 1e-18);
    }

    #[test]
    fn gradmax_opt_rank_one_converges_to_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let net = dense_net(&[6, 4, 5], &mut rng);
        let x = batch(6, 12, &mut rng);
        let t = batch(5, 12, &mut rng);
        let cg = cross_gradient(&net, 0, &x, &t).unwrap();
        let c = 1.0;
        let svd_init = init_gradmax(&cg, 1, c, 0.0, &mut rng).unwrap();
        let cfg = AscentConfig::gradmax_opt();
        let opt_init = init_gradmax_opt(
            &net,
            0,
            1,
            c,
            0.0,
            &x,
            &t,
            GrowthDirection::IncomingZero,
            &cfg,
            &mut rng,
        )
        .unwrap();
        let rel = (svd_init.objective_value - opt_init.objective_value).abs()
            / svd_init.objective_value;
        assert!(rel <= 0.05, "relative gap {rel}");
        assert!(opt_init.objective_value <= svd_init.objective_value + 1e-9);
    }

    #[test]
    fn gradmax_opt_outgoing_zero_improves_over_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let net = dense_net(&[6, 4, 5], &mut rng);
        let x = batch(6, 12, &mut rng);
        let t = batch(5, 12, &mut rng);
        let cfg = AscentConfig {
            steps: 400,
            adam: AdamConfig::with_lr(1e-2),
        };
        let c = 1.0;
        let opt = init_gradmax_opt(
            &net,
            0,
            1,
            c,
            1e-4,
            &x,
            &t,
            GrowthDirection::OutgoingZero,
            &cfg,
            &mut rng,
        )
        .unwrap();
        assert!((opt.w_in_new.frobenius_norm() - c).abs() < 1e-10);
        assert!(opt.objective_value > 0.0);
    }

    #[test]
    fn firefly_requires_positive_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let net = dense_net(&[4, 3, 2], &mut rng);
        let x = batch(4, 5, &mut rng);
        let t = batch(2, 5, &mut rng);
        let cfg = AscentConfig::firefly();
        assert!(matches!(
            init_firefly_opt(&net, 0, 1, 1.0, 0.0, &x, &t, &cfg, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn firefly_zero_steps_matches_norm_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let net = dense_net(&[4, 3, 2], &mut rng);
        let x = batch(4, 5, &mut rng);
        let t = batch(2, 5, &mut rng);
        let cfg = AscentConfig {
            steps: 0,
            adam: AdamConfig::with_lr(1e-2),
        };
        let (init, _) = init_firefly_opt(&net, 0, 2, 1.1, 1e-4, &x, &t, &cfg, &mut rng).unwrap();
        assert!((init.w_in_new.frobenius_norm() - 1.1).abs() < 1e-10);
        assert!((init.w_out_new.frobenius_norm() - 1e-4).abs() < 1e-10);
    }

    #[test]
    fn firefly_descends_on_fittable_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        // Teacher with more hidden units than the student: a fittable gap.
        let teacher = dense_net(&[6, 5, 3], &mut rng);
        let student = dense_net(&[6, 2, 3], &mut rng);
        let x = batch(6, 40, &mut rng);
        let (t, _) = forward(&teacher, &x).unwrap();
        let cfg = AscentConfig::firefly();
        let (_, trace) = init_firefly_opt(&student, 0, 2, 1.0, 1e-2, &x, &t, &cfg, &mut rng)
            .unwrap();
        assert!(trace.loss_end <= trace.loss_start);
    }

    #[test]
    fn zero_unit_bias_needs_bias_enabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut net = dense_net(&[4, 3, 2], &mut rng);
        let init = init_zero_unit_bias::<f64>(4, 2, 1);
        assert!(matches!(
            grow_neurons(&mut net, 0, &init, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_unit_bias_preserves_output_and_wakes_outgoing_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut net = dense_net(&[4, 3, 2], &mut rng);
        net.layers[0].bias = Some(vec![0.0; 3]);
        let x = batch(4, 6, &mut rng);
        let t = batch(2, 6, &mut rng);
        let (before, _) = forward(&net, &x).unwrap();

        let init = init_zero_unit_bias::<f64>(4, 2, 1);
        grow_neurons(&mut net, 0, &init, None).unwrap();
        let (after, _) = forward(&net, &x).unwrap();
        // Outgoing zero annihilates the new unit's contribution.
        assert!(before.max_abs_diff(&after) <= 1e-12);

        // h_new = f(1) = 1, so the outgoing columns see gradient immediately.
        let gs = loss_gradients(&net, &x, &t).unwrap();
        let (_, gout) = new_block_gradients(&net, &gs, 0, 1).unwrap();
        assert!(gout.frobenius_norm() > 1e-8);
    }

    #[test]
    fn grow_through_batch_norm_extends_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let w1 = Matrix::from_fn(3, 4, |_, _| f64::standard_normal(&mut rng));
        let w2 = Matrix::from_fn(2, 3, |_, _| f64::standard_normal(&mut rng));
        let mut net = Network::new(vec![
            Layer::dense(w1, Activation::Relu0),
            Layer::batch_norm(3, 1e-5),
            Layer::dense(w2, Activation::Identity),
        ])
        .unwrap();
        let mut state = SgdState::zeros_like(&net);
        let init = init_random(4, 2, 2, 1.0, 0.0, GrowthDirection::OutgoingZero, &mut rng)
            .unwrap();
        grow_neurons(&mut net, 0, &init, Some(&mut state)).unwrap();
        assert_eq!(net.layers[0].weights.shape(), (5, 4));
        assert_eq!(net.layers[1].weights.shape(), (2, 5));
        assert_eq!(net.layers[1].weights.get(0, 4), 1.0);
        assert_eq!(net.layers[1].weights.get(1, 4), 0.0);
        assert_eq!(net.layers[2].weights.shape(), (2, 5));
        assert!(state.matches(&net));
    }

    #[test]
    fn conv_growth_preserves_outputs() {
        use crate::net::ConvGeom;
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let g1 = ConvGeom::same(2, 3, 3, 5, 5);
        let g2 = ConvGeom::same(3, 2, 3, 5, 5);
        let w1 = Matrix::from_fn(3, g1.weight_cols(), |_, _| {
            f64::standard_normal(&mut rng) * 0.4
        });
        let w2 = Matrix::from_fn(2, g2.weight_cols(), |_, _| {
            f64::standard_normal(&mut rng) * 0.4
        });
        let mut net = Network::new(vec![
            Layer::conv2d(w1, g1, Activation::Relu0),
            Layer::conv2d(w2, g2, Activation::Identity),
        ])
        .unwrap();
        let x = batch(net.input_width(), 4, &mut rng);
        let (before, _) = forward(&net, &x).unwrap();

        let init = init_random(
            2 * 9,
            2 * 9,
            2,
            1.0,
            0.0,
            GrowthDirection::IncomingZero,
            &mut rng,
        )
        .unwrap();
        grow_neurons(&mut net, 0, &init, None).unwrap();
        let (after, _) = forward(&net, &x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);
        assert_eq!(net.layers[0].weights.rows(), 5);
        assert_eq!(net.layers[1].weights.cols(), 5 * 9);
    }

    #[test]
    fn layer_insertion_preserves_outputs_and_reindexes() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let mut net = dense_net(&[6, 5, 4], &mut rng);
        let x = batch(6, 30, &mut rng);
        let t = batch(4, 30, &mut rng);
        let (before, _) = forward(&net, &x).unwrap();

        grow_layer_with_method(
            &mut net,
            0,
            4,
            GrowthMethod::GradMax,
            &NormPolicy::Fixed(0.5),
            0.0,
            &x,
            &t,
            Activation::Relu0,
            &mut rng,
            None,
        )
        .unwrap();
        assert_eq!(net.layers.len(), 3);
        let (after, _) = forward(&net, &x).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);

        // The inserted layer (index 1) participates in later neuron growth.
        let init = init_random(5, 4, 2, 1.0, 0.0, GrowthDirection::IncomingZero, &mut rng)
            .unwrap();
        grow_neurons(&mut net, 1, &init, None).unwrap();
        let (after2, _) = forward(&net, &x).unwrap();
        assert!(before.max_abs_diff(&after2) <= 1e-12);
        assert_eq!(net.layers[1].weights.shape(), (5 + 4 + 2, 5));
    }

    #[test]
    fn growth_signal_zero_at_optimum_and_matches_gradmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let net = dense_net(&[6, 5, 4], &mut rng);
        let x = batch(6, 10, &mut rng);
        let (fitted, _) = forward(&net, &x).unwrap();
        let sig = growth_signal(&net, &x, &fitted, 3).unwrap();
        assert_eq!(sig.len(), 1);
        assert!(sig[0].1.iter().all(|&s| s < 1e-12));

        let t = batch(4, 10, &mut rng);
        let sig = growth_signal(&net, &x, &t, 3).unwrap();
        let cg = cross_gradient(&net, 0, &x, &t).unwrap();
        let init = init_gradmax(&cg, 3, 1.0, 0.0, &mut rng).unwrap();
        for (a, b) in sig[0].1.iter().zip(init.singular_values.unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Deterministic across repeated calls.
        let sig2 = growth_signal(&net, &x, &t, 3).unwrap();
        assert_eq!(sig[0].1, sig2[0].1);
    }
}
