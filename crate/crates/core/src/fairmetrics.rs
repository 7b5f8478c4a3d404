//! Evaluation-time accuracy and fairness measures.
//!
//! Preference-rate measures count thresholded predictions per
//! (user group, item group) cell with integers, so results do not depend on
//! evaluation order. Entries whose user or item is UNGROUPED are skipped by
//! every fairness measure.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::types::{threshold_preferences, GroupAssignment, ObservationMask, RatingDataset, RatingMatrix};

/// Which entries the preference-rate measures range over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessDomain {
    /// Every grouped entry of the predicted matrix; VAL and the
    /// label-conditioned measure use all observed entries.
    #[default]
    All,
    /// Test entries only.
    Test,
}

/// Integer counts of preferred entries per cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceCounts {
    ones: Vec<u64>,
    total: Vec<u64>,
    user_alphabet: usize,
    item_alphabet: usize,
}

impl PreferenceCounts {
    /// Count over all grouped entries, or only those in `domain` when given.
    pub fn new(prefs: &Array2<bool>, groups: &GroupAssignment, domain: Option<&ObservationMask>) -> Result<Self> {
        let (n, m) = prefs.dim();
        groups.check_dims(n, m)?;
        let mut counts = PreferenceCounts {
            ones: vec![0; groups.n_cells()],
            total: vec![0; groups.n_cells()],
            user_alphabet: groups.user_alphabet(),
            item_alphabet: groups.item_alphabet(),
        };
        let mut add = |i: usize, j: usize| {
            if let Some(c) = groups.cell(i, j) {
                counts.total[c] += 1;
                counts.ones[c] += u64::from(prefs[[i, j]]);
            }
        };
        match domain {
            Some(mask) => {
                if mask.dim() != (n, m) {
                    return Err(Error::invalid("evaluation mask does not match predictions"));
                }
                mask.iter().for_each(|(i, j)| add(i, j));
            }
            None => (0..n).for_each(|i| (0..m).for_each(|j| add(i, j))),
        }
        Ok(counts)
    }

    fn cell(&self, z1: usize, z2: usize) -> usize {
        z1 * self.item_alphabet + z2
    }

    fn rate_over(&self, cells: impl Iterator<Item = usize>, what: &str) -> Result<f64> {
        let (ones, total) = cells.fold((0, 0), |(o, t), c| (o + self.ones[c], t + self.total[c]));
        if total == 0 {
            return Err(Error::invalid(format!("{what} has no grouped entries")));
        }
        Ok(ones as f64 / total as f64)
    }

    pub fn marginal(&self) -> Result<f64> {
        self.rate_over(0..self.ones.len(), "the grouped population")
    }

    pub fn cell_rate(&self, z1: usize, z2: usize) -> Result<f64> {
        self.rate_over(std::iter::once(self.cell(z1, z2)), &format!("cell (user {z1}, item {z2})"))
    }

    pub fn user_rate(&self, z1: usize) -> Result<f64> {
        let cells = (0..self.item_alphabet).map(|z2| self.cell(z1, z2));
        self.rate_over(cells, &format!("user group {z1}"))
    }

    pub fn item_rate(&self, z2: usize) -> Result<f64> {
        let cells = (0..self.user_alphabet).map(|z1| self.cell(z1, z2));
        self.rate_over(cells, &format!("item group {z2}"))
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.user_alphabet).flat_map(move |z1| (0..self.item_alphabet).map(move |z2| (z1, z2)))
    }

    /// Sum over cells of |P(Y~=1) - P(Y~=1 | cell)|.
    pub fn dee(&self) -> Result<f64> {
        let marginal = self.marginal()?;
        self.cells()
            .map(|(z1, z2)| Ok((marginal - self.cell_rate(z1, z2)?).abs()))
            .sum()
    }

    /// Sum over cells of |P(Y~=1 | z_user) - P(Y~=1 | cell)|.
    pub fn der(&self) -> Result<f64> {
        self.cells()
            .map(|(z1, z2)| Ok((self.user_rate(z1)? - self.cell_rate(z1, z2)?).abs()))
            .sum()
    }

    /// Sum over cells of |P(Y~=1 | z_item) - P(Y~=1 | cell)|.
    pub fn der_user_given_item(&self) -> Result<f64> {
        self.cells()
            .map(|(z1, z2)| Ok((self.item_rate(z2)? - self.cell_rate(z1, z2)?).abs()))
            .sum()
    }

    pub fn cvs(&self) -> Result<f64> {
        if self.item_alphabet != 2 {
            return Err(Error::Unsupported(format!(
                "CVS needs two item groups, got {}",
                self.item_alphabet
            )));
        }
        Ok((self.item_rate(1)? - self.item_rate(0)?).abs())
    }

    pub fn ugf(&self) -> Result<f64> {
        if self.user_alphabet != 2 {
            return Err(Error::Unsupported(format!(
                "UGF needs two user groups, got {}",
                self.user_alphabet
            )));
        }
        Ok((self.user_rate(1)? - self.user_rate(0)?).abs())
    }

    pub fn cell_rates(&self) -> Result<CellRates> {
        let rates = self
            .cells()
            .map(|(z1, z2)| self.cell_rate(z1, z2))
            .collect::<Result<_>>()?;
        Ok(CellRates {
            user_alphabet: self.user_alphabet,
            item_alphabet: self.item_alphabet,
            rates,
            marginal: self.marginal()?,
        })
    }
}

/// P(Y~=1 | z_user, z_item) for every cell, plus the marginal rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellRates {
    pub user_alphabet: usize,
    pub item_alphabet: usize,
    /// Row-major over (z_user, z_item).
    pub rates: Vec<f64>,
    pub marginal: f64,
}

impl CellRates {
    pub fn get(&self, z1: usize, z2: usize) -> f64 {
        self.rates[z1 * self.item_alphabet + z2]
    }
}

pub fn rmse(pred: &Array2<f64>, truth: &RatingMatrix, eval_mask: &ObservationMask) -> Result<f64> {
    if eval_mask.is_empty() {
        return Err(Error::invalid("RMSE over an empty mask"));
    }
    if pred.dim() != truth.dim() || eval_mask.dim() != truth.dim() {
        return Err(Error::invalid("prediction, truth and mask shapes differ"));
    }
    let sse: f64 = eval_mask
        .iter()
        .map(|(i, j)| (truth.get(i, j) - pred[[i, j]]).powi(2))
        .sum();
    Ok((sse / eval_mask.len() as f64).sqrt())
}

/// Per-item mean signed error (truth - prediction) of each user group.
pub(crate) struct ItemErrors {
    pub sum: [Vec<f64>; 2],
    pub count: [Vec<u64>; 2],
}

impl ItemErrors {
    pub fn new(pred: &Array2<f64>, truth: &RatingMatrix, mask: &ObservationMask, groups: &GroupAssignment) -> Result<Self> {
        if groups.user_alphabet() != 2 {
            return Err(Error::Unsupported(format!(
                "VAL needs two user groups, got {}",
                groups.user_alphabet()
            )));
        }
        let (n, m) = truth.dim();
        if pred.dim() != (n, m) || mask.dim() != (n, m) {
            return Err(Error::invalid("prediction, truth and mask shapes differ"));
        }
        groups.check_dims(n, m)?;
        let mut errs = ItemErrors {
            sum: [vec![0.0; m], vec![0.0; m]],
            count: [vec![0; m], vec![0; m]],
        };
        for (i, j) in mask.iter() {
            if let Some(g) = groups.user(i) {
                errs.sum[g as usize][j] += truth.get(i, j) - pred[[i, j]];
                errs.count[g as usize][j] += 1;
            }
        }
        Ok(errs)
    }

    /// Items observed by both user groups.
    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.count[0].len()).filter(|&j| self.count[0][j] > 0 && self.count[1][j] > 0)
    }

    pub fn gap(&self, j: usize) -> f64 {
        self.sum[0][j] / self.count[0][j] as f64 - self.sum[1][j] / self.count[1][j] as f64
    }
}

/// Value unfairness: mean over items of the gap in per-group mean signed error.
///
/// Items lacking observations from either group are skipped and the average
/// runs over the retained items only.
pub fn val(pred: &Array2<f64>, truth: &RatingMatrix, mask: &ObservationMask, groups: &GroupAssignment) -> Result<f64> {
    let errs = ItemErrors::new(pred, truth, mask, groups)?;
    let (total, kept) = errs
        .retained()
        .fold((0.0, 0usize), |(s, k), j| (s + errs.gap(j).abs(), k + 1));
    if kept == 0 {
        return Err(Error::invalid("no item is observed by both user groups"));
    }
    Ok(total / kept as f64)
}

pub fn cvs(prefs: &Array2<bool>, groups: &GroupAssignment) -> Result<f64> {
    PreferenceCounts::new(prefs, groups, None)?.cvs()
}

pub fn ugf(prefs: &Array2<bool>, groups: &GroupAssignment) -> Result<f64> {
    PreferenceCounts::new(prefs, groups, None)?.ugf()
}

pub fn der(prefs: &Array2<bool>, groups: &GroupAssignment) -> Result<f64> {
    PreferenceCounts::new(prefs, groups, None)?.der()
}

pub fn dee(prefs: &Array2<bool>, groups: &GroupAssignment) -> Result<f64> {
    PreferenceCounts::new(prefs, groups, None)?.dee()
}

pub fn cell_rates(prefs: &Array2<bool>, groups: &GroupAssignment) -> Result<CellRates> {
    PreferenceCounts::new(prefs, groups, None)?.cell_rates()
}

/// One (y, z_user, z_item) stratum of the label-conditioned measure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratum {
    pub y: u8,
    pub user_group: usize,
    pub item_group: usize,
    /// `None` when the stratum has no observed entries.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CondYMetric {
    pub value: f64,
    pub strata: Vec<Stratum>,
    /// Number of empty strata left out of the sum.
    pub skipped: usize,
}

/// DEE conditioned on the ground-truth preference, over observed entries.
pub fn dee_cond_y(
    prefs: &Array2<bool>,
    truth_prefs: &Array2<bool>,
    mask: &ObservationMask,
    groups: &GroupAssignment,
) -> Result<CondYMetric> {
    let (n, m) = prefs.dim();
    if truth_prefs.dim() != (n, m) || mask.dim() != (n, m) {
        return Err(Error::invalid("prediction, truth and mask shapes differ"));
    }
    groups.check_dims(n, m)?;
    let cells = groups.n_cells();
    let mut ones = vec![0u64; 2 * cells];
    let mut total = vec![0u64; 2 * cells];
    for (i, j) in mask.iter() {
        if let Some(c) = groups.cell(i, j) {
            let k = usize::from(truth_prefs[[i, j]]) * cells + c;
            total[k] += 1;
            ones[k] += u64::from(prefs[[i, j]]);
        }
    }
    if total.iter().all(|&t| t == 0) {
        return Err(Error::invalid("no grouped observed entries"));
    }
    let mut value = 0.0;
    let mut strata = Vec::with_capacity(2 * cells);
    let mut skipped = 0;
    for y in 0..2 {
        let block = y * cells..(y + 1) * cells;
        let t: u64 = total[block.clone()].iter().sum();
        let o: u64 = ones[block].iter().sum();
        for c in 0..cells {
            let k = y * cells + c;
            let (user_group, item_group) = groups.cell_coords(c);
            let rate = (total[k] > 0).then(|| ones[k] as f64 / total[k] as f64);
            match rate {
                Some(r) => value += (o as f64 / t as f64 - r).abs(),
                None => {
                    skipped += 1;
                    log::warn!("empty stratum y={y}, user group {user_group}, item group {item_group}; skipped");
                }
            }
            strata.push(Stratum { y: y as u8, user_group, item_group, rate });
        }
    }
    Ok(CondYMetric { value, strata, skipped })
}

/// Top-K membership per user; ties go to the lower item index.
pub fn top_k_indicator(pred: &Array2<f64>, k: usize) -> Result<Array2<bool>> {
    let m = pred.ncols();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("K = {k} outside 1..={m}")));
    }
    let mut out = Array2::from_elem(pred.dim(), false);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (row, mut flags) in pred.rows().into_iter().zip(out.rows_mut()) {
        order.clear();
        order.extend(0..m);
        let cmp = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < m {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        for &j in &order[..k] {
            flags[j] = true;
        }
    }
    Ok(out)
}

/// DEE of the top-K indicator instead of the thresholded prediction.
pub fn dee_ranking(pred: &Array2<f64>, k: usize, groups: &GroupAssignment) -> Result<f64> {
    dee(&top_k_indicator(pred, k)?, groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub tau: f64,
    #[serde(default)]
    pub topk: Vec<usize>,
    #[serde(default)]
    pub domain: FairnessDomain,
}

/// RMSE plus every fairness measure of a predicted matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub dee: f64,
    pub der: f64,
    /// `None` when the measure is undefined for the group alphabets.
    pub ugf: Option<f64>,
    pub cvs: Option<f64>,
    pub val: Option<f64>,
    pub dee_cond_y: Option<f64>,
    pub dee_ranking: Vec<(usize, f64)>,
    pub cell_rates: CellRates,
}

fn optional(r: Result<f64>, name: &str) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Unsupported(msg)) => {
            log::info!("{name} not reported: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn evaluate(
    pred: &Array2<f64>,
    dataset: &RatingDataset,
    groups: &GroupAssignment,
    test: &ObservationMask,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let truth = dataset.ratings();
    if pred.dim() != truth.dim() {
        return Err(Error::invalid(format!(
            "prediction is {:?}, dataset is {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let prefs = threshold_preferences(pred, opts.tau);
    let (rate_domain, observed) = match opts.domain {
        FairnessDomain::All => (None, dataset.observed()),
        FairnessDomain::Test => (Some(test), test),
    };
    let counts = PreferenceCounts::new(&prefs, groups, rate_domain)?;
    let truth_prefs = threshold_preferences(truth.values(), opts.tau);
    let dee_cond_y = match dee_cond_y(&prefs, &truth_prefs, observed, groups) {
        Ok(r) => Some(r.value),
        Err(e) => {
            log::warn!("label-conditioned DEE not reported: {e}");
            None
        }
    };
    let dee_ranking = opts
        .topk
        .iter()
        .map(|&k| {
            let r = top_k_indicator(pred, k)?;
            Ok((k, PreferenceCounts::new(&r, groups, rate_domain)?.dee()?))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        rmse: rmse(pred, truth, test)?,
        dee: counts.dee()?,
        der: counts.der()?,
        ugf: optional(counts.ugf(), "UGF")?,
        cvs: optional(counts.cvs(), "CVS")?,
        val: optional(val(pred, truth, observed, groups), "VAL")?,
        dee_cond_y,
        dee_ranking,
        cell_rates: counts.cell_rates()?,
    })
}

/// Format with 17 significant digits so values round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

impl MetricsReport {
    /// Flat (name, value) pairs in serialization order.
    pub fn fields(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("rmse".to_string(), Some(self.rmse)),
            ("dee".to_string(), Some(self.dee)),
            ("der".to_string(), Some(self.der)),
            ("ugf".to_string(), self.ugf),
            ("cvs".to_string(), self.cvs),
            ("val".to_string(), self.val),
            ("dee_cond_y".to_string(), self.dee_cond_y),
        ];
        for &(k, v) in &self.dee_ranking {
            out.push((format!("dee_ranking_K{k}"), Some(v)));
        }
        let rates = &self.cell_rates;
        for z1 in 0..rates.user_alphabet {
            for z2 in 0..rates.item_alphabet {
                out.push((format!("rate_u{z1}_i{z2}"), Some(rates.get(z1, z2))));
            }
        }
        out.push(("rate_marginal".to_string(), Some(rates.marginal)));
        out
    }

    /// Flat JSON object; unavailable measures are null.
    pub fn to_json(&self) -> Value {
        let map: Map<String, Value> = self
            .fields()
            .into_iter()
            .map(|(k, v)| (k, v.map_or(Value::Null, Value::from)))
            .collect();
        Value::Object(map)
    }

    pub fn csv_header(&self) -> String {
        self.fields().into_iter().map(|(k, _)| k).collect::<Vec<_>>().join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut row = String::new();
        for (k, (_, v)) in self.fields().into_iter().enumerate() {
            if k > 0 {
                row.push(',');
            }
            if let Some(v) = v {
                let _ = write!(row, "{}", fmt_f64(v));
            }
        }
        row
    }
}
