//! Margin-based softmax losses over cosine logits, with analytic gradients.
//!
//! Every loss is the arithmetic mean of independent per-sample terms. With
//! `Δⱼ = zᵧ − zⱼ` the difference between the target logit and non-target
//! logit `j` of a sample:
//!
//! | variant           | per-sample term                                   |
//! |-------------------|---------------------------------------------------|
//! | `softmax`         | `−log softmax(s·z)ᵧ`                              |
//! | `am`              | `−log softmax(s·(z − m·eᵧ))ᵧ`                     |
//! | `am_reformulated` | `log(1 + Σⱼ e^{−s(Δⱼ − m)})`                      |
//! | `am_factored`     | `log(1 + e^{sm} Σⱼ e^{−sΔⱼ})`                     |
//! | `ram`             | `log(1 + Σⱼ e^{max(0, −s(Δⱼ − m))})`              |
//!
//! The three `am*` forms are algebraically identical; they are kept as
//! separate code paths so each can be checked against the others.
//!
//! The `ram` term has a floor of `log C` once every margin is satisfied. The
//! [`FloorMode::ZeroFloor`] variant replaces each `e^{max(0,·)}` by
//! `e^{max(0,·)} − 1` so a fully separated sample contributes exactly zero.
//! Both modes share gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{log1p_sum_exp, log_sum_exp, shifted_log1p, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossVariant {
    Softmax,
    Am,
    AmReformulated,
    AmFactored,
    Ram,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Softmax,
        LossVariant::Am,
        LossVariant::AmReformulated,
        LossVariant::AmFactored,
        LossVariant::Ram,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Softmax => "softmax",
            LossVariant::Am => "am",
            LossVariant::AmReformulated => "am_reformulated",
            LossVariant::AmFactored => "am_factored",
            LossVariant::Ram => "ram",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss `{s}` (expected softmax, am, am_reformulated, am_factored or ram)"
                ))
            })
    }
}

/// How the hinge floor of the `ram` loss is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FloorMode {
    /// Satisfied non-targets contribute `e⁰ = 1`: per-sample floor `log C`.
    #[default]
    Literal,
    /// Satisfied non-targets contribute `e⁰ − 1 = 0`: per-sample floor `0`.
    ZeroFloor,
}

impl FloorMode {
    pub fn name(self) -> &'static str {
        match self {
            FloorMode::Literal => "literal",
            FloorMode::ZeroFloor => "zero_floor",
        }
    }
}

impl fmt::Display for FloorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FloorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(FloorMode::Literal),
            "zero_floor" => Ok(FloorMode::ZeroFloor),
            _ => Err(Error::Config(format!(
                "unknown floor mode `{s}` (expected literal or zero_floor)"
            ))),
        }
    }
}

/// Loss variant plus its hyperparameters. `m ∈ [0, 2]`, `s > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig<T> {
    variant: LossVariant,
    m: T,
    s: T,
    floor_mode: FloorMode,
}

impl<T: Scalar> MarginConfig<T> {
    pub fn new(variant: LossVariant, m: T, s: T) -> Result<Self> {
        if !(m >= T::zero() && m <= T::lit(2.0)) {
            return Err(Error::Config(format!("margin m = {m} outside [0, 2]")));
        }
        if !(s > T::zero() && s.is_finite()) {
            return Err(Error::Config(format!(
                "scale s = {s} must be positive and finite"
            )));
        }
        Ok(Self {
            variant,
            m,
            s,
            floor_mode: FloorMode::Literal,
        })
    }

    /// Plain softmax cross-entropy with `s` as inverse temperature.
    pub fn softmax(s: T) -> Result<Self> {
        Self::new(LossVariant::Softmax, T::zero(), s)
    }

    pub fn with_floor_mode(mut self, floor_mode: FloorMode) -> Self {
        self.floor_mode = floor_mode;
        self
    }

    pub fn with_variant(mut self, variant: LossVariant) -> Self {
        self.variant = variant;
        self
    }

    /// AM-Softmax, m = 0.20, s = 30 (tuned VoxCeleb setting).
    pub fn voxceleb_am() -> Self {
        Self::new(LossVariant::Am, T::lit(0.20), T::lit(30.0)).expect("valid preset")
    }

    /// Real AM-Softmax, m = 0.30, s = 30 (best VoxCeleb1-H setting).
    pub fn voxceleb_ram() -> Self {
        Self::new(LossVariant::Ram, T::lit(0.30), T::lit(30.0)).expect("valid preset")
    }

    /// AM-Softmax, m = 0.10, s = 30 (tuned CNCeleb setting).
    pub fn cnceleb_am() -> Self {
        Self::new(LossVariant::Am, T::lit(0.10), T::lit(30.0)).expect("valid preset")
    }

    /// Real AM-Softmax, m = 0.20, s = 30 (best CNCeleb setting).
    pub fn cnceleb_ram() -> Self {
        Self::new(LossVariant::Ram, T::lit(0.20), T::lit(30.0)).expect("valid preset")
    }

    #[inline]
    pub fn variant(&self) -> LossVariant {
        self.variant
    }

    #[inline]
    pub fn m(&self) -> T {
        self.m
    }

    #[inline]
    pub fn s(&self) -> T {
        self.s
    }

    /// Only meaningful for [`LossVariant::Ram`].
    #[inline]
    pub fn floor_mode(&self) -> FloorMode {
        self.floor_mode
    }
}

/// N×C cosine logits with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledLogits<T> {
    logits: Matrix<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> LabeledLogits<T> {
    pub fn new(logits: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        let out = Self::unbounded(logits, labels)?;
        for i in 0..out.num_samples() {
            for (j, &z) in out.logits.row(i).iter().enumerate() {
                if !(z >= -T::one() && z <= T::one()) {
                    return Err(Error::Config(format!(
                        "logit ({i}, {j}) = {z} is not a cosine in [-1, 1]"
                    )));
                }
            }
        }
        Ok(out)
    }

    /// Finite logits without the `[-1, 1]` bound. Used for asymptotic
    /// analysis, where a logit stands for an already-scaled cosine and
    /// target/non-target gaps beyond 2 are wanted.
    pub fn unbounded(logits: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        let (n, c) = logits.shape();
        if c < 2 {
            return Err(Error::Shape(format!("need at least 2 classes, got {c}")));
        }
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(Error::Shape(format!(
                "label {y} of row {i} out of range for {c} classes"
            )));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits contain NaN or Inf".into()));
        }
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> &Matrix<T> {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }
}

/// Batch-mean loss and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub value: T,
    pub grad: Matrix<T>,
}

/// Evaluates the loss selected by `cfg.variant()`.
pub fn evaluate<T: Scalar>(data: &LabeledLogits<T>, cfg: &MarginConfig<T>) -> LossOutput<T> {
    evaluate_raw(&data.logits, &data.labels, cfg)
}

pub fn softmax_ce<T: Scalar>(data: &LabeledLogits<T>, cfg: &MarginConfig<T>) -> LossOutput<T> {
    reduce(&data.logits, &data.labels, cfg, LossVariant::Softmax)
}

pub fn am_softmax<T: Scalar>(data: &LabeledLogits<T>, cfg: &MarginConfig<T>) -> LossOutput<T> {
    reduce(&data.logits, &data.labels, cfg, LossVariant::Am)
}

pub fn am_softmax_reformulated<T: Scalar>(
    data: &LabeledLogits<T>,
    cfg: &MarginConfig<T>,
) -> LossOutput<T> {
    reduce(&data.logits, &data.labels, cfg, LossVariant::AmReformulated)
}

pub fn am_softmax_factored<T: Scalar>(
    data: &LabeledLogits<T>,
    cfg: &MarginConfig<T>,
) -> LossOutput<T> {
    reduce(&data.logits, &data.labels, cfg, LossVariant::AmFactored)
}

pub fn ram_softmax<T: Scalar>(data: &LabeledLogits<T>, cfg: &MarginConfig<T>) -> LossOutput<T> {
    reduce(&data.logits, &data.labels, cfg, LossVariant::Ram)
}

/// Same as [`evaluate`] but skips the cosine-range validation, so that
/// finite-difference probes may step slightly outside `[-1, 1]`.
pub(crate) fn evaluate_raw<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    cfg: &MarginConfig<T>,
) -> LossOutput<T> {
    reduce(logits, labels, cfg, cfg.variant)
}

fn reduce<T: Scalar>(
    logits: &Matrix<T>,
    labels: &[usize],
    cfg: &MarginConfig<T>,
    variant: LossVariant,
) -> LossOutput<T> {
    let n = labels.len();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    // running mean: fixed order, and exact when every term is equal
    let mut mean = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let li = sample_loss_grad(variant, cfg, logits.row(i), y, grad.row_mut(i));
        mean += (li - mean) / T::from_count(i + 1);
    }
    if n > 0 {
        let inv = T::from_count(n);
        for g in grad.as_mut_slice() {
            *g /= inv;
        }
    }
    LossOutput { value: mean, grad }
}

/// Per-sample loss; writes `∂loss/∂z` into `grad`.
fn sample_loss_grad<T: Scalar>(
    variant: LossVariant,
    cfg: &MarginConfig<T>,
    z: &[T],
    y: usize,
    grad: &mut [T],
) -> T {
    let (m, s) = (cfg.m, cfg.s);
    match variant {
        LossVariant::Softmax => scaled_ce(z, y, s, T::zero(), grad),
        LossVariant::Am => scaled_ce(z, y, s, m, grad),
        LossVariant::AmReformulated => {
            let t: Vec<T> = non_targets(z, y)
                .map(|(_, zj)| -s * ((z[y] - zj) - m))
                .collect();
            let loss = log1p_sum_exp(&t);
            pairwise_grad(z, y, s, &t, loss, |_| true, grad);
            loss
        }
        LossVariant::AmFactored => {
            let u: Vec<T> = non_targets(z, y).map(|(_, zj)| -s * (z[y] - zj)).collect();
            let sm = s * m;
            let umax = u.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let shift = (sm + umax).max(T::zero());
            let mut inner = T::zero();
            for &uj in &u {
                inner += (uj - shift).exp();
            }
            let loss = shifted_log1p(shift, sm.exp() * inner);
            let t: Vec<T> = u.iter().map(|&uj| sm + uj).collect();
            pairwise_grad(z, y, s, &t, loss, |_| true, grad);
            loss
        }
        LossVariant::Ram => {
            let d: Vec<T> = non_targets(z, y).map(|(_, zj)| (z[y] - zj) - m).collect();
            let t: Vec<T> = d.iter().map(|&dj| (-s * dj).max(T::zero())).collect();
            let loss = match cfg.floor_mode {
                FloorMode::Literal => log1p_sum_exp(&t),
                FloorMode::ZeroFloor => log1p_sum_expm1(&t),
            };
            // subgradient 0 at the hinge itself (Δ = m)
            pairwise_grad(z, y, s, &t, loss, |k| d[k] < T::zero(), grad);
            loss
        }
    }
}

fn non_targets<T: Scalar>(z: &[T], y: usize) -> impl Iterator<Item = (usize, T)> + '_ {
    z.iter().copied().enumerate().filter(move |&(j, _)| j != y)
}

/// `−log( e^{aᵧ} / (e^{aᵧ} + Σ_{j≠y} e^{aⱼ}) )` with `aᵧ = s(zᵧ − m)` and
/// `aⱼ = s·zⱼ`; gradient `s·(p − eᵧ)`.
fn scaled_ce<T: Scalar>(z: &[T], y: usize, s: T, m: T, grad: &mut [T]) -> T {
    let a: Vec<T> = z
        .iter()
        .enumerate()
        .map(|(j, &zj)| if j == y { s * (zj - m) } else { s * zj })
        .collect();
    let top = a.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let target = a[y] - top;
    let mut rest = T::zero();
    for (_, aj) in non_targets(&a, y) {
        rest += (aj - top).exp();
    }
    let denom = target.exp() + rest;
    for (j, g) in grad.iter_mut().enumerate() {
        let p = (a[j] - top).exp() / denom;
        *g = if j == y { s * (p - T::one()) } else { s * p };
    }
    if target == T::zero() {
        // target logit is the largest: the ratio is 1 / (1 + rest)
        rest.ln_1p()
    } else {
        denom.ln() - target
    }
}

/// Gradient of `loss = log(1 + Σₖ f(tₖ))` where every `f'(tₖ) = e^{tₖ}` and
/// `tₖ = −s(zᵧ − zₖ) + const` on active terms. The weight of term `k` is
/// `e^{tₖ − loss}`; inactive terms (clamped) get zero.
fn pairwise_grad<T: Scalar>(
    z: &[T],
    y: usize,
    s: T,
    t: &[T],
    loss: T,
    active: impl Fn(usize) -> bool,
    grad: &mut [T],
) {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let mut target = T::zero();
    for (k, (j, _)) in non_targets(z, y).enumerate() {
        if active(k) {
            let w = s * (t[k] - loss).exp();
            grad[j] = w;
            target -= w;
        }
    }
    grad[y] = target;
}

/// `log(1 + Σ (e^{tⱼ} − 1))` for `tⱼ ≥ 0`.
fn log1p_sum_expm1<T: Scalar>(terms: &[T]) -> T {
    let shift = terms.iter().fold(T::zero(), |a, &b| a.max(b));
    if shift <= T::one() {
        let mut sum = T::zero();
        for &t in terms {
            sum += t.exp_m1();
        }
        sum.ln_1p()
    } else {
        let floor = (-shift).exp();
        let mut sum = T::zero();
        for &t in terms {
            sum += (t - shift).exp() - floor;
        }
        shift + (floor + sum).ln()
    }
}

/// Hinge on a pair of distances: `max(0, d_p − d_n + m)`.
pub fn triplet_margin<T: Scalar>(d_p: T, d_n: T, m: T) -> T {
    (d_p - d_n + m).max(T::zero())
}

/// Central finite-difference check of the analytic logit gradient.
///
/// Returns the largest relative deviation over all logit entries (absolute
/// deviation where `|analytic| < 1e-8`). For `ram`, entries within `2·eps`
/// of a hinge point `Δ = m` are skipped, together with the target entry of
/// that sample.
pub fn loss_gradient_check<T: Scalar>(
    data: &LabeledLogits<T>,
    cfg: &MarginConfig<T>,
    eps: T,
) -> Result<T> {
    let analytic = evaluate(data, cfg).grad;
    compare_logit_gradient(data, cfg, eps, &analytic)
}

/// Like [`loss_gradient_check`] but against a caller-supplied gradient.
pub fn compare_logit_gradient<T: Scalar>(
    data: &LabeledLogits<T>,
    cfg: &MarginConfig<T>,
    eps: T,
    analytic: &Matrix<T>,
) -> Result<T> {
    check_eps(eps)?;
    if analytic.shape() != data.logits.shape() {
        return Err(Error::Shape(
            "analytic gradient shape differs from logits".into(),
        ));
    }
    let two = T::lit(2.0);
    let mut worst = T::zero();
    let mut probe = data.logits.clone();
    for i in 0..data.num_samples() {
        let y = data.labels[i];
        let z = data.logits.row(i);
        let near_hinge =
            |j: usize| cfg.variant == LossVariant::Ram && ((z[y] - z[j]) - cfg.m).abs() < two * eps;
        let any_near = (0..z.len()).any(|j| j != y && near_hinge(j));
        for j in 0..data.num_classes() {
            if (j == y && any_near) || (j != y && near_hinge(j)) {
                continue;
            }
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + eps;
            let up = evaluate_raw(&probe, &data.labels, cfg).value;
            probe[(i, j)] = orig - eps;
            let down = evaluate_raw(&probe, &data.labels, cfg).value;
            probe[(i, j)] = orig;
            let numeric = (up - down) / (two * eps);
            worst = worst.max(gradient_deviation(analytic[(i, j)], numeric));
        }
    }
    Ok(worst)
}

pub(crate) fn check_eps<T: Scalar>(eps: T) -> Result<()> {
    if eps >= T::lit(1e-7) && eps <= T::lit(1e-4) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )))
    }
}

/// `|a − n| / |a|`, or `|a − n|` when `|a| < 1e-8`.
pub(crate) fn gradient_deviation<T: Scalar>(analytic: T, numeric: T) -> T {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < T::lit(1e-8) {
        diff
    } else {
        diff / analytic.abs()
    }
}

/// Which part of the easy/hard partition a sample falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardnessSet {
    Easy,
    Hard,
    Unclassified,
}

impl HardnessSet {
    pub fn name(self) -> &'static str {
        match self {
            HardnessSet::Easy => "easy",
            HardnessSet::Hard => "hard",
            HardnessSet::Unclassified => "unclassified",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleHardness<T> {
    /// AM-Softmax posterior of the target class.
    pub posterior: T,
    pub set: HardnessSet,
    /// Exact AM-Softmax term of this sample.
    pub exact_loss: T,
    /// `|exact − approximation|` for the approximation matching `set`;
    /// `None` for unclassified samples.
    pub approx_error: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardnessReport<T> {
    pub samples: Vec<SampleHardness<T>>,
}

impl<T: Scalar> HardnessReport<T> {
    pub fn count(&self, set: HardnessSet) -> usize {
        self.samples.iter().filter(|s| s.set == set).count()
    }

    pub fn fraction(&self, set: HardnessSet) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.count(set) as f64 / self.samples.len() as f64
        }
    }
}

/// Saturated-target form of the AM term: `e^{sm} Σⱼ e^{−sΔⱼ}`.
pub fn easy_set_approximation<T: Scalar>(z: &[T], y: usize, m: T, s: T) -> T {
    let mut sum = T::zero();
    for (_, zj) in non_targets(z, y) {
        sum += (-s * ((z[y] - zj) - m)).exp();
    }
    sum
}

/// Weak-target form of the AM term: `sm + log Σⱼ e^{−sΔⱼ}`.
pub fn hard_set_approximation<T: Scalar>(z: &[T], y: usize, m: T, s: T) -> T {
    let u: Vec<T> = non_targets(z, y).map(|(_, zj)| -s * (z[y] - zj)).collect();
    s * m + log_sum_exp(&u)
}

/// Splits a batch by AM-Softmax target posterior (with the config's `m`
/// and `s`): easy if `≥ easy_threshold`, hard if `≤ hard_threshold`.
pub fn hardness_report<T: Scalar>(
    data: &LabeledLogits<T>,
    cfg: &MarginConfig<T>,
    easy_threshold: T,
    hard_threshold: T,
) -> Result<HardnessReport<T>> {
    if !(hard_threshold > T::zero() && hard_threshold < easy_threshold && easy_threshold < T::one())
    {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 < hard ({hard_threshold}) < easy ({easy_threshold}) < 1"
        )));
    }
    let (m, s) = (cfg.m, cfg.s);
    let mut scratch = vec![T::zero(); data.num_classes()];
    let samples = (0..data.num_samples())
        .map(|i| {
            let z = data.logits.row(i);
            let y = data.labels[i];
            let exact = sample_loss_grad(LossVariant::AmReformulated, cfg, z, y, &mut scratch);
            let posterior = (-exact).exp();
            let (set, approx_error) = if posterior >= easy_threshold {
                let approx = easy_set_approximation(z, y, m, s);
                (HardnessSet::Easy, Some((exact - approx).abs()))
            } else if posterior <= hard_threshold {
                let approx = hard_set_approximation(z, y, m, s);
                (HardnessSet::Hard, Some((exact - approx).abs()))
            } else {
                (HardnessSet::Unclassified, None)
            };
            SampleHardness {
                posterior,
                set,
                exact_loss: exact,
                approx_error,
            }
        })
        .collect();
    Ok(HardnessReport { samples })
}
