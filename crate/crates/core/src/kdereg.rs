//! Differentiable fairness penalties with exact gradients w.r.t. the
//! predicted matrix.
//!
//! Preference rates P(Y~=1 | S) over a set of entries S are replaced by their
//! Gaussian kernel density estimates
//!
//! ```text
//! P(S) = 1/|S| * sum_{e in S} F((tau - y_e) / h),    F(x) = integral_x^inf phi
//! dP(S)/dy_e = phi((tau - y_e) / h) / (|S| h)
//! ```
//!
//! and each absolute gap |P(A) - P(B)| of a measure by the Huber loss
//! H_delta(P(A) - P(B)). The gradient of the sum of Huber terms is
//! `sum_t H'(d_t) (dP(A_t) - dP(B_t))`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GroupAssignment, ObservationMask, PredictionGrad, RatingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyKind {
    /// No fairness term.
    None,
    Dee,
    Der,
    Ugf,
    Cvs,
    Val,
    DeeCondY,
    Cov,
}

impl PenaltyKind {
    pub const ALL: [PenaltyKind; 8] = [
        PenaltyKind::None,
        PenaltyKind::Dee,
        PenaltyKind::Der,
        PenaltyKind::Ugf,
        PenaltyKind::Cvs,
        PenaltyKind::Val,
        PenaltyKind::DeeCondY,
        PenaltyKind::Cov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PenaltyKind::None => "none",
            PenaltyKind::Dee => "dee",
            PenaltyKind::Der => "der",
            PenaltyKind::Ugf => "ugf",
            PenaltyKind::Cvs => "cvs",
            PenaltyKind::Val => "val",
            PenaltyKind::DeeCondY => "dee-cond-y",
            PenaltyKind::Cov => "cov",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PenaltyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown penalty {s:?}")))
    }
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    /// Preference threshold.
    pub tau: f64,
    /// KDE bandwidth.
    pub bandwidth: f64,
    /// Huber transition point.
    pub huber_delta: f64,
    /// Weight of the fairness term; the accuracy term gets `1 - lambda`.
    pub lambda: f64,
}

impl PenaltyConfig {
    pub fn new(kind: PenaltyKind, tau: f64, lambda: f64) -> Self {
        PenaltyConfig { kind, tau, bandwidth: 0.01, huber_delta: 0.01, lambda }
    }

    /// The unregularized baseline.
    pub fn unfair(tau: f64) -> Self {
        PenaltyConfig::new(PenaltyKind::None, tau, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be > 0, got {}", self.bandwidth)));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::invalid(format!("huber delta must be > 0, got {}", self.huber_delta)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !self.tau.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(())
    }

    /// Whether the fairness term contributes to the objective at all.
    pub fn is_active(&self) -> bool {
        self.kind != PenaltyKind::None && self.lambda > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyValueGrad {
    pub value: f64,
    pub grad: PredictionGrad,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn gaussian_kernel(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

// Beyond this the survival function is 0 or 1 to within 1e-18.
const TAIL_CUTOFF: f64 = 9.0;

/// Upper-tail integral of the Gaussian kernel, `0.5 * erfc(x / sqrt(2))`.
pub fn kernel_survival(x: f64) -> f64 {
    if x > TAIL_CUTOFF {
        0.0
    } else if x < -TAIL_CUTOFF {
        1.0
    } else {
        0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
    }
}

fn kernel_tail_density(x: f64) -> f64 {
    if x.abs() > TAIL_CUTOFF {
        0.0
    } else {
        gaussian_kernel(x)
    }
}

/// KDE estimate of the fraction of `entries` at or above `tau`.
pub fn estimate_rate(entries: &[f64], tau: f64, h: f64) -> Result<f64> {
    check_rate_args(entries, h)?;
    let s: f64 = entries.iter().map(|&y| kernel_survival((tau - y) / h)).sum();
    Ok(s / entries.len() as f64)
}

/// Derivative of [`estimate_rate`] with respect to each entry.
pub fn estimate_rate_grad(entries: &[f64], tau: f64, h: f64) -> Result<Vec<f64>> {
    check_rate_args(entries, h)?;
    let scale = 1.0 / (entries.len() as f64 * h);
    Ok(entries
        .iter()
        .map(|&y| scale * gaussian_kernel((tau - y) / h))
        .collect())
}

fn check_rate_args(entries: &[f64], h: f64) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::invalid("rate of an empty set"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be > 0, got {h}")));
    }
    Ok(())
}

pub fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

pub fn huber_deriv(x: f64, delta: f64) -> f64 {
    if x.abs() <= delta {
        x
    } else {
        delta * x.signum()
    }
}

/// What a penalty may need besides the prediction itself.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyInputs<'a> {
    pub groups: &'a GroupAssignment,
    /// Ground truth, used by VAL and the label-conditioned penalty.
    pub truth: Option<&'a RatingMatrix>,
    /// Training observations, used by VAL and the label-conditioned penalty.
    pub train: Option<&'a ObservationMask>,
}

impl<'a> PenaltyInputs<'a> {
    pub fn groups_only(groups: &'a GroupAssignment) -> Self {
        PenaltyInputs { groups, truth: None, train: None }
    }

    fn supervised(&self, kind: PenaltyKind) -> Result<(&'a RatingMatrix, &'a ObservationMask)> {
        match (self.truth, self.train) {
            (Some(t), Some(m)) => Ok((t, m)),
            _ => Err(Error::invalid(format!("{kind} penalty needs ground truth and a training mask"))),
        }
    }
}

/// A penalty prepared for repeated evaluation on predictions of one shape.
#[derive(Debug, Clone)]
pub struct Penalty {
    cfg: PenaltyConfig,
    dim: (usize, usize),
    engine: Engine,
}

#[derive(Debug, Clone)]
enum Engine {
    Zero,
    Gap(RateGap),
    Val(ValGap),
    Cov(Covariance),
}

impl Penalty {
    pub fn new(cfg: &PenaltyConfig, inputs: PenaltyInputs<'_>, dim: (usize, usize)) -> Result<Self> {
        cfg.validate()?;
        let groups = inputs.groups;
        groups.check_dims(dim.0, dim.1)?;
        let engine = match cfg.kind {
            PenaltyKind::None => Engine::Zero,
            PenaltyKind::Dee | PenaltyKind::Der | PenaltyKind::Ugf | PenaltyKind::Cvs => {
                Engine::Gap(RateGap::over_cells(cfg.kind, groups, dim)?)
            }
            PenaltyKind::DeeCondY => {
                let (truth, train) = inputs.supervised(cfg.kind)?;
                Engine::Gap(RateGap::conditioned_on_label(groups, truth, train, cfg.tau)?)
            }
            PenaltyKind::Val => {
                let (truth, train) = inputs.supervised(cfg.kind)?;
                Engine::Val(ValGap::new(groups, truth, train)?)
            }
            PenaltyKind::Cov => Engine::Cov(Covariance::new(groups, dim)?),
        };
        Ok(Penalty { cfg: *cfg, dim, engine })
    }

    pub fn config(&self) -> &PenaltyConfig {
        &self.cfg
    }

    pub fn evaluate(&self, pred: &Array2<f64>) -> Result<PenaltyValueGrad> {
        if pred.dim() != self.dim {
            return Err(Error::invalid(format!(
                "prediction is {:?}, penalty prepared for {:?}",
                pred.dim(),
                self.dim
            )));
        }
        let mut grad = Array2::zeros(self.dim);
        let value = match &self.engine {
            Engine::Zero => 0.0,
            Engine::Gap(g) => {
                let flat = pred.as_standard_layout();
                let out = grad.as_slice_mut().expect("fresh array is contiguous");
                g.evaluate(flat.as_slice().expect("standard layout"), &self.cfg, out)
            }
            Engine::Val(v) => v.evaluate(pred, &self.cfg, &mut grad),
            Engine::Cov(c) => c.evaluate(pred, &mut grad),
        };
        if !value.is_finite() {
            return Err(Error::invalid(format!("{} penalty is not finite", self.cfg.kind)));
        }
        Ok(PenaltyValueGrad { value, grad: PredictionGrad::new(grad)? })
    }
}

/// Sum of Huber-smoothed gaps between KDE rates of unions of entry classes.
#[derive(Debug, Clone)]
struct RateGap {
    /// (row-major index, class) of every participating entry.
    members: Vec<(u32, u32)>,
    class_size: Vec<u64>,
    terms: Vec<GapTerm>,
}

/// `P(plus) - P(minus)`, each a union of classes.
#[derive(Debug, Clone)]
struct GapTerm {
    plus: Vec<usize>,
    minus: Vec<usize>,
}

impl RateGap {
    fn over_cells(kind: PenaltyKind, groups: &GroupAssignment, (n, m): (usize, usize)) -> Result<Self> {
        let mut members = Vec::new();
        let mut class_size = vec![0u64; groups.n_cells()];
        for i in 0..n {
            for j in 0..m {
                if let Some(c) = groups.cell(i, j) {
                    members.push(((i * m + j) as u32, c as u32));
                    class_size[c] += 1;
                }
            }
        }
        let (zu, zi) = (groups.user_alphabet(), groups.item_alphabet());
        let cell = |a: usize, b: usize| a * zi + b;
        let all: Vec<usize> = (0..zu * zi).collect();
        let two = |size: usize, what: &str| {
            if size == 2 {
                Ok(())
            } else {
                Err(Error::Unsupported(format!("{kind} penalty needs two {what} groups, got {size}")))
            }
        };
        let terms = match kind {
            PenaltyKind::Dee => all
                .iter()
                .map(|&c| GapTerm { plus: vec![c], minus: all.clone() })
                .collect(),
            PenaltyKind::Der => (0..zu)
                .flat_map(|a| {
                    let row: Vec<usize> = (0..zi).map(|b| cell(a, b)).collect();
                    (0..zi).map(move |b| GapTerm { plus: vec![cell(a, b)], minus: row.clone() })
                })
                .collect(),
            PenaltyKind::Ugf => {
                two(zu, "user")?;
                let side = |a| (0..zi).map(|b| cell(a, b)).collect();
                vec![GapTerm { plus: side(1), minus: side(0) }]
            }
            PenaltyKind::Cvs => {
                two(zi, "item")?;
                let side = |b| (0..zu).map(|a| cell(a, b)).collect();
                vec![GapTerm { plus: side(1), minus: side(0) }]
            }
            _ => unreachable!("not a cell-rate penalty"),
        };
        let gap = RateGap { members, class_size, terms };
        if let Some(c) = (0..gap.class_size.len()).find(|&c| gap.class_size[c] == 0) {
            let (a, b) = groups.cell_coords(c);
            return Err(Error::invalid(format!("cell (user {a}, item {b}) is empty")));
        }
        Ok(gap)
    }

    /// Classes are (y, cell) over grouped training entries, y = 1{truth >= tau}.
    fn conditioned_on_label(
        groups: &GroupAssignment,
        truth: &RatingMatrix,
        train: &ObservationMask,
        tau: f64,
    ) -> Result<Self> {
        if truth.dim() != train.dim() {
            return Err(Error::invalid("truth and training mask shapes differ"));
        }
        let cells = groups.n_cells();
        let mut members = Vec::new();
        let mut class_size = vec![0u64; 2 * cells];
        for (i, j) in train.iter() {
            if let Some(c) = groups.cell(i, j) {
                let class = usize::from(truth.get(i, j) >= tau) * cells + c;
                members.push(((i * truth.n_items() + j) as u32, class as u32));
                class_size[class] += 1;
            }
        }
        let mut terms = Vec::new();
        for y in 0..2 {
            let stratum: Vec<usize> = (y * cells..(y + 1) * cells).collect();
            if stratum.iter().all(|&k| class_size[k] == 0) {
                log::warn!("no training entries with y = {y}; stratum skipped");
                continue;
            }
            for &k in &stratum {
                if class_size[k] == 0 {
                    let (a, b) = groups.cell_coords(k - y * cells);
                    log::warn!("empty stratum y={y}, user group {a}, item group {b}; skipped");
                    continue;
                }
                terms.push(GapTerm { plus: vec![k], minus: stratum.clone() });
            }
        }
        if terms.is_empty() {
            return Err(Error::invalid("every label-conditioned stratum is empty"));
        }
        Ok(RateGap { members, class_size, terms })
    }

    fn evaluate(&self, pred: &[f64], cfg: &PenaltyConfig, grad: &mut [f64]) -> f64 {
        let h = cfg.bandwidth;
        let mut survival = vec![0.0; self.class_size.len()];
        for &(e, c) in &self.members {
            let x = (cfg.tau - pred[e as usize]) / h;
            survival[c as usize] += kernel_survival(x);
        }
        let mass = |set: &[usize]| -> (f64, f64) {
            set.iter()
                .fold((0.0, 0.0), |(s, n), &c| (s + survival[c], n + self.class_size[c] as f64))
        };
        let mut value = 0.0;
        let mut weight = vec![0.0; self.class_size.len()];
        for t in &self.terms {
            let (sp, np) = mass(&t.plus);
            let (sm, nm) = mass(&t.minus);
            let diff = sp / np - sm / nm;
            value += huber(diff, cfg.huber_delta);
            let d = huber_deriv(diff, cfg.huber_delta);
            t.plus.iter().for_each(|&c| weight[c] += d / np);
            t.minus.iter().for_each(|&c| weight[c] -= d / nm);
        }
        for &(e, c) in &self.members {
            let x = (cfg.tau - pred[e as usize]) / h;
            grad[e as usize] = weight[c as usize] * kernel_tail_density(x) / h;
        }
        value
    }
}

/// Huber-smoothed value unfairness over the training entries.
#[derive(Debug, Clone)]
struct ValGap {
    /// (row, col, user group) of training entries with a grouped user.
    members: Vec<(u32, u32, u8)>,
    truth: Vec<f64>,
    count: [Vec<u64>; 2],
    retained: Vec<usize>,
}

impl ValGap {
    fn new(groups: &GroupAssignment, truth: &RatingMatrix, train: &ObservationMask) -> Result<Self> {
        if groups.user_alphabet() != 2 {
            return Err(Error::Unsupported(format!(
                "VAL penalty needs two user groups, got {}",
                groups.user_alphabet()
            )));
        }
        let m = truth.n_items();
        let mut count = [vec![0u64; m], vec![0u64; m]];
        let mut members = Vec::new();
        let mut values = Vec::new();
        for (i, j) in train.iter() {
            if let Some(g) = groups.user(i) {
                members.push((i as u32, j as u32, g as u8));
                values.push(truth.get(i, j));
                count[g as usize][j] += 1;
            }
        }
        let retained: Vec<usize> = (0..m).filter(|&j| count[0][j] > 0 && count[1][j] > 0).collect();
        if retained.is_empty() {
            return Err(Error::invalid("no item is observed by both user groups"));
        }
        Ok(ValGap { members, truth: values, count, retained })
    }

    fn evaluate(&self, pred: &Array2<f64>, cfg: &PenaltyConfig, grad: &mut Array2<f64>) -> f64 {
        let m = self.count[0].len();
        let mut sum = [vec![0.0; m], vec![0.0; m]];
        for (&(i, j, g), &t) in self.members.iter().zip(&self.truth) {
            sum[g as usize][j as usize] += t - pred[[i as usize, j as usize]];
        }
        let scale = 1.0 / self.retained.len() as f64;
        let mut slope = vec![0.0; m];
        let mut value = 0.0;
        for &j in &self.retained {
            let gap = sum[0][j] / self.count[0][j] as f64 - sum[1][j] / self.count[1][j] as f64;
            value += huber(gap, cfg.huber_delta);
            slope[j] = huber_deriv(gap, cfg.huber_delta) * scale;
        }
        // d(gap_j)/d(pred_ij) is -1/count0 for group 0 and +1/count1 for group 1.
        for &(i, j, g) in &self.members {
            let j = j as usize;
            if slope[j] != 0.0 {
                let sign = if g == 0 { -1.0 } else { 1.0 };
                grad[[i as usize, j]] = sign * slope[j] / self.count[g as usize][j] as f64;
            }
        }
        value * scale
    }
}

/// Squared empirical covariance between predictions and each group label.
#[derive(Debug, Clone)]
struct Covariance {
    members: Vec<(u32, u32)>,
    /// Centered (user label, item label) per member.
    centered: Vec<(f64, f64)>,
}

impl Covariance {
    fn new(groups: &GroupAssignment, (n, m): (usize, usize)) -> Result<Self> {
        let mut members = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            for j in 0..m {
                if let (Some(a), Some(b)) = (groups.user(i), groups.item(j)) {
                    members.push((i as u32, j as u32));
                    labels.push((f64::from(a), f64::from(b)));
                }
            }
        }
        if members.is_empty() {
            return Err(Error::invalid("no grouped entries"));
        }
        let len = labels.len() as f64;
        let (mu, mi) = labels.iter().fold((0.0, 0.0), |(u, i), &(a, b)| (u + a, i + b));
        let (mu, mi) = (mu / len, mi / len);
        let centered = labels.iter().map(|&(a, b)| (a - mu, b - mi)).collect();
        Ok(Covariance { members, centered })
    }

    fn evaluate(&self, pred: &Array2<f64>, grad: &mut Array2<f64>) -> f64 {
        let len = self.members.len() as f64;
        let at = |&(i, j): &(u32, u32)| pred[[i as usize, j as usize]];
        let mean = self.members.iter().map(at).sum::<f64>() / len;
        let (cu, ci) = self
            .members
            .iter()
            .zip(&self.centered)
            .fold((0.0, 0.0), |(u, i), (e, &(a, b))| {
                let y = at(e) - mean;
                (u + y * a, i + y * b)
            });
        let (cu, ci) = (cu / len, ci / len);
        // The centered labels sum to zero, so the mean's derivative drops out.
        for (&(i, j), &(a, b)) in self.members.iter().zip(&self.centered) {
            grad[[i as usize, j as usize]] = 2.0 * (cu * a + ci * b) / len;
        }
        cu * cu + ci * ci
    }
}

fn one_shot(cfg: &PenaltyConfig, inputs: PenaltyInputs<'_>, pred: &Array2<f64>) -> Result<PenaltyValueGrad> {
    Penalty::new(cfg, inputs, pred.dim())?.evaluate(pred)
}

fn with_kind(cfg: &PenaltyConfig, kind: PenaltyKind) -> PenaltyConfig {
    PenaltyConfig { kind, ..*cfg }
}

/// Huber-smoothed DEE with KDE cell and marginal rates.
pub fn dee_penalty(pred: &Array2<f64>, groups: &GroupAssignment, cfg: &PenaltyConfig) -> Result<PenaltyValueGrad> {
    one_shot(&with_kind(cfg, PenaltyKind::Dee), PenaltyInputs::groups_only(groups), pred)
}

pub fn der_penalty(pred: &Array2<f64>, groups: &GroupAssignment, cfg: &PenaltyConfig) -> Result<PenaltyValueGrad> {
    one_shot(&with_kind(cfg, PenaltyKind::Der), PenaltyInputs::groups_only(groups), pred)
}

pub fn ugf_penalty(pred: &Array2<f64>, groups: &GroupAssignment, cfg: &PenaltyConfig) -> Result<PenaltyValueGrad> {
    one_shot(&with_kind(cfg, PenaltyKind::Ugf), PenaltyInputs::groups_only(groups), pred)
}

pub fn cvs_penalty(pred: &Array2<f64>, groups: &GroupAssignment, cfg: &PenaltyConfig) -> Result<PenaltyValueGrad> {
    one_shot(&with_kind(cfg, PenaltyKind::Cvs), PenaltyInputs::groups_only(groups), pred)
}

pub fn val_penalty(
    pred: &Array2<f64>,
    truth: &RatingMatrix,
    train: &ObservationMask,
    groups: &GroupAssignment,
    cfg: &PenaltyConfig,
) -> Result<PenaltyValueGrad> {
    let inputs = PenaltyInputs { groups, truth: Some(truth), train: Some(train) };
    one_shot(&with_kind(cfg, PenaltyKind::Val), inputs, pred)
}

/// Huber-smoothed DEE conditioned on the thresholded ground truth.
pub fn dee_cond_y_penalty(
    pred: &Array2<f64>,
    truth: &RatingMatrix,
    train: &ObservationMask,
    groups: &GroupAssignment,
    cfg: &PenaltyConfig,
) -> Result<PenaltyValueGrad> {
    let inputs = PenaltyInputs { groups, truth: Some(truth), train: Some(train) };
    one_shot(&with_kind(cfg, PenaltyKind::DeeCondY), inputs, pred)
}

pub fn cov_penalty(pred: &Array2<f64>, groups: &GroupAssignment, cfg: &PenaltyConfig) -> Result<PenaltyValueGrad> {
    one_shot(&with_kind(cfg, PenaltyKind::Cov), PenaltyInputs::groups_only(groups), pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::types::ValueDomain;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn rand_matrix(n: usize, m: usize, center: f64, spread: f64, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init);
        Array2::from_shape_fn((n, m), |_| center + spread * (2.0 * rng.random::<f64>() - 1.0))
    }

    fn cfg(kind: PenaltyKind, h: f64, delta: f64) -> PenaltyConfig {
        PenaltyConfig { kind, tau: 0.0, bandwidth: h, huber_delta: delta, lambda: 0.5 }
    }

    #[test]
    fn kernel_values() {
        assert_abs_diff_eq!(gaussian_kernel(0.0), 0.3989422804, epsilon = 1e-10);
        assert_eq!(gaussian_kernel(1.7), gaussian_kernel(-1.7));
        assert!(gaussian_kernel(10.0) < 1e-20);
        assert_abs_diff_eq!(INV_SQRT_2PI, 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-16);
    }

    #[test]
    fn survival_values() {
        assert_eq!(kernel_survival(0.0), 0.5);
        assert_abs_diff_eq!(kernel_survival(-10.0), 1.0, epsilon = 1e-15);
        // Reference values of the standard normal upper tail.
        assert_abs_diff_eq!(kernel_survival(1.0), 0.15865525393145707, epsilon = 1e-7);
        assert_abs_diff_eq!(kernel_survival(-2.5), 0.9937903346742238, epsilon = 1e-7);
        for k in -100..=100 {
            let x = k as f64 * 0.1;
            assert_abs_diff_eq!(kernel_survival(x) + kernel_survival(-x), 1.0, epsilon = 2e-7);
        }
    }

    #[test]
    fn survival_derivative_is_minus_kernel() {
        for k in -40..=40 {
            let x = k as f64 * 0.2;
            let fd = (kernel_survival(x + 1e-6) - kernel_survival(x - 1e-6)) / 2e-6;
            assert_abs_diff_eq!(fd, -gaussian_kernel(x), epsilon = 1e-8);
        }
    }

    #[test]
    fn rate_examples() {
        assert_eq!(estimate_rate(&[0.3], 0.3, 0.01).unwrap(), 0.5);
        assert_abs_diff_eq!(estimate_rate(&[-0.2, 0.6, 0.1, 0.3], 0.2, 0.1).unwrap(), 0.5, epsilon = 1e-15);
        let high: Vec<f64> = (0..50).map(|k| 0.1 + k as f64 * 0.01).collect();
        assert!(estimate_rate(&high, 0.0, 0.01).unwrap() >= 1.0 - 1e-9);
        assert!(estimate_rate(&[], 0.0, 0.1).is_err());
        assert!(estimate_rate(&[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn rate_grad_examples() {
        assert_abs_diff_eq!(estimate_rate_grad(&[2.0], 2.0, 1.0).unwrap()[0], 0.3989422804, epsilon = 1e-10);
        let ys: Vec<f64> = (0..20).map(|k| -1.0 + 0.1 * k as f64).collect();
        let g = estimate_rate_grad(&ys, 0.2, 0.5).unwrap();
        assert!(g.iter().all(|&v| v > 0.0));
        let fd = gradcheck::central_difference(|v| estimate_rate(v, 0.2, 0.5).unwrap(), &ys, 1e-6);
        assert!(gradcheck::compare(&g, &fd, gradcheck::FLOOR).passes(1e-4));
    }

    #[test]
    fn rate_recovers_indicator_for_small_bandwidth() {
        let h = 1e-3;
        let ys: Vec<f64> = (0..40).map(|k| if k % 3 == 0 { -0.5 - k as f64 * 0.01 } else { 0.02 + k as f64 * 0.01 }).collect();
        let exact = ys.iter().filter(|&&y| y >= 0.0).count() as f64 / ys.len() as f64;
        assert_abs_diff_eq!(estimate_rate(&ys, 0.0, h).unwrap(), exact, epsilon = 1e-9);
    }

    #[test]
    fn huber_examples() {
        let d = 0.3;
        assert_eq!(huber(0.0, d), 0.0);
        assert_eq!(huber_deriv(0.0, d), 0.0);
        assert_abs_diff_eq!(huber(2.0 * d, d), 1.5 * d * d, epsilon = 1e-15);
        assert_abs_diff_eq!(huber(-2.0 * d, d), 1.5 * d * d, epsilon = 1e-15);
        assert_eq!(huber(0.1, d), 0.5 * 0.1 * 0.1);
        for k in -50..50 {
            assert!(huber_deriv(k as f64 * 0.05, d).abs() <= d);
        }
    }

    #[test]
    fn penalty_config_validation() {
        assert!(cfg(PenaltyKind::Dee, 0.0, 0.1).validate().is_err());
        assert!(cfg(PenaltyKind::Dee, 0.1, -1.0).validate().is_err());
        let mut c = cfg(PenaltyKind::Dee, 0.1, 0.1);
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        assert_eq!(PenaltyKind::parse("dee-cond-y").unwrap(), PenaltyKind::DeeCondY);
        assert!(PenaltyKind::parse("mi").is_err());
    }

    /// Direct restatement of the smoothed DEE: KDE rates per cell by filtering.
    fn scalar_dee(pred: &Array2<f64>, g: &GroupAssignment, c: &PenaltyConfig) -> f64 {
        let all: Vec<f64> = pred.indexed_iter().filter(|((i, j), _)| g.cell(*i, *j).is_some()).map(|(_, &v)| v).collect();
        let marg = estimate_rate(&all, c.tau, c.bandwidth).unwrap();
        let mut total = 0.0;
        for z1 in 0..g.user_alphabet() as u32 {
            for z2 in 0..g.item_alphabet() as u32 {
                let cell: Vec<f64> = pred
                    .indexed_iter()
                    .filter(|((i, j), _)| g.user(*i) == Some(z1) && g.item(*j) == Some(z2))
                    .map(|(_, &v)| v)
                    .collect();
                total += huber(estimate_rate(&cell, c.tau, c.bandwidth).unwrap() - marg, c.huber_delta);
            }
        }
        total
    }

    #[test]
    fn dee_matches_scalar_reimplementation() {
        let g = GroupAssignment::halves(4, 4).unwrap();
        for seed in 0..5 {
            let pred = rand_matrix(4, 4, 0.0, 0.6, seed);
            let c = cfg(PenaltyKind::Dee, 0.3, 0.05);
            let pv = dee_penalty(&pred, &g, &c).unwrap();
            assert_abs_diff_eq!(pv.value, scalar_dee(&pred, &g, &c), epsilon = 1e-14);
            let x: Vec<f64> = pred.iter().copied().collect();
            let fd = gradcheck::central_difference(
                |v| scalar_dee(&Array2::from_shape_vec((4, 4), v.to_vec()).unwrap(), &g, &c),
                &x,
                1e-6,
            );
            let a: Vec<f64> = pv.grad.as_array().iter().copied().collect();
            assert!(gradcheck::compare(&a, &fd, gradcheck::FLOOR).passes(1e-4));
        }
    }

    #[test]
    fn equal_cells_give_zero_penalty() {
        // Every cell holds the same multiset of values.
        let row = [-0.3, 0.1, -0.3, 0.1];
        let pred = Array2::from_shape_fn((4, 4), |(_, j)| row[j]);
        let g = GroupAssignment::halves(4, 4).unwrap();
        for kind in [PenaltyKind::Dee, PenaltyKind::Der, PenaltyKind::Ugf, PenaltyKind::Cvs] {
            let c = cfg(kind, 0.2, 0.01);
            let pv = Penalty::new(&c, PenaltyInputs::groups_only(&g), (4, 4)).unwrap().evaluate(&pred).unwrap();
            assert!(pv.value.abs() <= 1e-12, "{kind}: {}", pv.value);
            assert!(pv.grad.as_array().iter().all(|v| v.abs() <= 1e-12), "{kind}");
        }
        let cov = cov_penalty(&Array2::from_elem((4, 4), 0.7), &g, &cfg(PenaltyKind::Cov, 0.1, 0.1)).unwrap();
        assert!(cov.value.abs() < 1e-24);
    }

    #[test]
    fn cvs_blind_to_fig1_structure_while_dee_is_not() {
        let pred = Array2::from_shape_fn((6, 6), |(i, j)| if (i < 3) == (j < 3) { 1.0 } else { -1.0 });
        let g = GroupAssignment::halves(6, 6).unwrap();
        let c = cfg(PenaltyKind::Cvs, 0.01, 0.01);
        let cvs = cvs_penalty(&pred, &g, &c).unwrap();
        let ugf = ugf_penalty(&pred, &g, &c).unwrap();
        let dee = dee_penalty(&pred, &g, &c).unwrap();
        assert!(cvs.value < 1e-12 && ugf.value < 1e-12);
        // four cells, each |0.5| gap in the linear Huber regime
        assert_abs_diff_eq!(dee.value, 4.0 * 0.01 * (0.5 - 0.005), epsilon = 1e-12);
    }

    #[test]
    fn val_examples() {
        let truth = RatingMatrix::new(Array2::from_elem((2, 1), 1.0), ValueDomain::Binary).unwrap();
        let g = GroupAssignment::new(vec![Some(0), Some(1)], vec![Some(0)], 2, 1).unwrap();
        let full = ObservationMask::full(2, 1);
        let c = cfg(PenaltyKind::Val, 0.1, 10.0);
        let zero = val_penalty(truth.values(), &truth, &full, &g, &c).unwrap();
        assert_eq!(zero.value, 0.0);
        assert!(zero.grad.as_array().iter().all(|&v| v == 0.0));
        // group errors +1 and -1: gap 2, quadratic regime 0.5 * 4
        let pred = ndarray::array![[0.0], [2.0]];
        assert_eq!(val_penalty(&pred, &truth, &full, &g, &c).unwrap().value, 2.0);
    }

    #[test]
    fn cov_hand_values() {
        let g = GroupAssignment::halves(2, 2).unwrap();
        let c = cfg(PenaltyKind::Cov, 0.1, 0.1);
        // 0/1 predictions aligned with the item label: cov(y, z_item) = 0.25
        let pred = ndarray::array![[0.0, 1.0], [0.0, 1.0]];
        assert_abs_diff_eq!(cov_penalty(&pred, &g, &c).unwrap().value, 0.0625, epsilon = 1e-15);
        // +-1 predictions double the covariance
        let pm = ndarray::array![[-1.0, 1.0], [-1.0, 1.0]];
        assert_abs_diff_eq!(cov_penalty(&pm, &g, &c).unwrap().value, 0.25, epsilon = 1e-15);
    }

    #[test]
    fn cond_y_examples() {
        let truth = RatingMatrix::new(
            Array2::from_shape_fn((6, 6), |(i, j)| if (i * 7 + j * 3) % 5 < 2 { 1.0 } else { -1.0 }),
            ValueDomain::Binary,
        )
        .unwrap();
        let g = GroupAssignment::halves(6, 6).unwrap();
        let full = ObservationMask::full(6, 6);
        let c = cfg(PenaltyKind::DeeCondY, 0.05, 0.01);
        let flat = dee_cond_y_penalty(&Array2::from_elem((6, 6), 0.2), &truth, &full, &g, &c).unwrap();
        assert!(flat.value.abs() < 1e-15);
        assert!(dee_cond_y_penalty(&Array2::zeros((6, 6)), &truth, &ObservationMask::empty(6, 6), &g, &c).is_err());
    }

    /// Scalar restatement of the label-conditioned penalty.
    fn scalar_cond_y(pred: &Array2<f64>, truth: &RatingMatrix, mask: &ObservationMask, g: &GroupAssignment, c: &PenaltyConfig) -> f64 {
        let mut total = 0.0;
        for y in [false, true] {
            let stratum: Vec<(usize, usize)> = mask
                .iter()
                .filter(|&(i, j)| g.cell(i, j).is_some() && (truth.get(i, j) >= c.tau) == y)
                .collect();
            if stratum.is_empty() {
                continue;
            }
            let vals: Vec<f64> = stratum.iter().map(|&(i, j)| pred[[i, j]]).collect();
            let marg = estimate_rate(&vals, c.tau, c.bandwidth).unwrap();
            for z1 in 0..2 {
                for z2 in 0..2 {
                    let cell: Vec<f64> = stratum
                        .iter()
                        .filter(|&&(i, j)| g.user(i) == Some(z1) && g.item(j) == Some(z2))
                        .map(|&(i, j)| pred[[i, j]])
                        .collect();
                    if !cell.is_empty() {
                        total += huber(estimate_rate(&cell, c.tau, c.bandwidth).unwrap() - marg, c.huber_delta);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn cond_y_matches_scalar_reimplementation() {
        let truth = RatingMatrix::new(
            Array2::from_shape_fn((6, 6), |(i, j)| if (i * 5 + j * 2) % 7 < 3 { 1.0 } else { -1.0 }),
            ValueDomain::Binary,
        )
        .unwrap();
        let g = GroupAssignment::halves(6, 6).unwrap();
        let mask = ObservationMask::new(6, 6, (0..36u32).filter(|k| k % 4 != 1).map(|k| (k / 6, k % 6)).collect()).unwrap();
        let c = cfg(PenaltyKind::DeeCondY, 0.4, 0.02);
        for seed in 0..3 {
            let pred = rand_matrix(6, 6, 0.0, 0.8, seed);
            let pv = dee_cond_y_penalty(&pred, &truth, &mask, &g, &c).unwrap();
            assert_abs_diff_eq!(pv.value, scalar_cond_y(&pred, &truth, &mask, &g, &c), epsilon = 1e-14);
        }
    }

    fn check_kind(kind: PenaltyKind, pred: &Array2<f64>, truth: &RatingMatrix, mask: &ObservationMask, g: &GroupAssignment, c: &PenaltyConfig) -> gradcheck::GradCheck {
        let c = with_kind(c, kind);
        let inputs = PenaltyInputs { groups: g, truth: Some(truth), train: Some(mask) };
        let p = Penalty::new(&c, inputs, pred.dim()).unwrap();
        let analytic: Vec<f64> = p.evaluate(pred).unwrap().grad.as_array().iter().copied().collect();
        let x: Vec<f64> = pred.iter().copied().collect();
        gradcheck::check(
            |v| p.evaluate(&Array2::from_shape_vec(pred.dim(), v.to_vec()).unwrap()).unwrap().value,
            &analytic,
            &x,
        )
    }

    #[test]
    fn every_penalty_matches_finite_differences() {
        let (n, m) = (6, 6);
        let g = GroupAssignment::halves(n, m).unwrap();
        let truth = RatingMatrix::new(
            Array2::from_shape_fn((n, m), |(i, j)| if (i + 2 * j) % 3 == 0 { 1.0 } else { -1.0 }),
            ValueDomain::Binary,
        )
        .unwrap();
        let mask = ObservationMask::new(n, m, (0..36u32).filter(|k| k % 3 != 2).map(|k| (k / 6, k % 6)).collect()).unwrap();
        for kind in PenaltyKind::ALL {
            for seed in 0..4 {
                let pred = rand_matrix(n, m, 0.05, 0.5, seed + 10);
                let c = cfg(kind, 0.3, 0.05);
                let r = check_kind(kind, &pred, &truth, &mask, &g, &c);
                assert!(r.passes(1e-4), "{kind} seed {seed}: {r:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn dee_value_zero_iff_rates_equal(vals in proptest::collection::vec(-1.0f64..1.0, 16)) {
            let g = GroupAssignment::halves(4, 4).unwrap();
            let pred = Array2::from_shape_vec((4, 4), vals).unwrap();
            let c = cfg(PenaltyKind::Dee, 0.4, 0.05);
            let pv = dee_penalty(&pred, &g, &c).unwrap();
            prop_assert!(pv.value >= 0.0);
            let all: Vec<f64> = pred.iter().copied().collect();
            let marg = estimate_rate(&all, c.tau, c.bandwidth).unwrap();
            let max_gap = (0..4).map(|cell| {
                let (a, b) = (cell / 2, cell % 2);
                let v: Vec<f64> = pred.indexed_iter().filter(|((i, j), _)| i / 2 == a && j / 2 == b).map(|(_, &v)| v).collect();
                (estimate_rate(&v, c.tau, c.bandwidth).unwrap() - marg).abs()
            }).fold(0.0, f64::max);
            prop_assert_eq!(pv.value == 0.0, max_gap == 0.0);
        }

        #[test]
        fn permutation_covariance(vals in proptest::collection::vec(-1.0f64..1.0, 16)) {
            // Swap users 0 and 1 (both in group 0): value unchanged, gradient rows swap.
            let g = GroupAssignment::halves(4, 4).unwrap();
            let pred = Array2::from_shape_vec((4, 4), vals).unwrap();
            let mut swapped = pred.clone();
            for j in 0..4 {
                swapped.swap([0, j], [1, j]);
            }
            for kind in [PenaltyKind::Dee, PenaltyKind::Der, PenaltyKind::Ugf, PenaltyKind::Cvs, PenaltyKind::Cov] {
                let c = cfg(kind, 0.3, 0.05);
                let a = Penalty::new(&c, PenaltyInputs::groups_only(&g), (4, 4)).unwrap().evaluate(&pred).unwrap();
                let b = Penalty::new(&c, PenaltyInputs::groups_only(&g), (4, 4)).unwrap().evaluate(&swapped).unwrap();
                prop_assert!((a.value - b.value).abs() <= 1e-12);
                for j in 0..4 {
                    prop_assert!((a.grad.as_array()[[0, j]] - b.grad.as_array()[[1, j]]).abs() <= 1e-12);
                }
            }
        }
    }
}
