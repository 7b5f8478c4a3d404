//! Shared value types: ratings, observation masks, group labels and the
//! per-entry gradient that every parameterization chains through.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Group label of a user or item. `None` is the UNGROUPED label.
pub type Label = Option<u32>;

/// Label of users/items that belong to no sensitive group.
pub const UNGROUPED: Label = None;

/// Rating scale of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDomain {
    /// Like/dislike encoded as +1/-1.
    Binary,
    /// Five-star ratings in [1, 5].
    Stars,
}

impl ValueDomain {
    pub fn contains(self, v: f64) -> bool {
        match self {
            ValueDomain::Binary => v == 1.0 || v == -1.0,
            ValueDomain::Stars => (1.0..=5.0).contains(&v),
        }
    }

    /// Preference threshold conventionally used for this scale.
    pub fn default_threshold(self) -> f64 {
        match self {
            ValueDomain::Binary => 0.0,
            ValueDomain::Stars => 3.0,
        }
    }
}

/// Dense n x m rating matrix. Unknown entries are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix {
    values: Array2<f64>,
    domain: ValueDomain,
}

impl RatingMatrix {
    pub fn new(values: Array2<f64>, domain: ValueDomain) -> Result<Self> {
        let (n, m) = values.dim();
        if n == 0 || m == 0 {
            return Err(Error::invalid(format!("rating matrix must be non-empty, got {n}x{m}")));
        }
        if let Some(((i, j), v)) = values
            .indexed_iter()
            .find(|(_, v)| !v.is_nan() && !domain.contains(**v))
        {
            return Err(Error::invalid(format!(
                "rating {v} at ({i}, {j}) outside the {domain:?} domain"
            )));
        }
        Ok(RatingMatrix {
            values: values.as_standard_layout().into_owned(),
            domain,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn domain(&self) -> ValueDomain {
        self.domain
    }

    pub fn n_users(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }
}

/// The set of observed (user, item) positions, kept sorted row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationMask {
    n: usize,
    m: usize,
    entries: Vec<(u32, u32)>,
}

impl ObservationMask {
    pub fn new(n: usize, m: usize, mut entries: Vec<(u32, u32)>) -> Result<Self> {
        if let Some(&(i, j)) = entries
            .iter()
            .find(|&&(i, j)| i as usize >= n || j as usize >= m)
        {
            return Err(Error::invalid(format!("observation ({i}, {j}) outside {n}x{m}")));
        }
        entries.sort_unstable();
        if let Some(w) = entries.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid(format!("duplicate observation {:?}", w[0])));
        }
        Ok(ObservationMask { n, m, entries })
    }

    /// Build from entries already known to be sorted, unique and in range.
    pub(crate) fn from_sorted(n: usize, m: usize, entries: Vec<(u32, u32)>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0] < w[1]));
        ObservationMask { n, m, entries }
    }

    pub fn full(n: usize, m: usize) -> Self {
        let entries = (0..n as u32)
            .flat_map(|i| (0..m as u32).map(move |j| (i, j)))
            .collect();
        ObservationMask { n, m, entries }
    }

    pub fn empty(n: usize, m: usize) -> Self {
        ObservationMask { n, m, entries: Vec::new() }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|&(i, j)| (i as usize, j as usize))
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.entries.binary_search(&(i as u32, j as u32)).is_ok()
    }

    /// 1.0 at observed positions, 0.0 elsewhere.
    pub fn indicator(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.m));
        for (i, j) in self.iter() {
            out[[i, j]] = 1.0;
        }
        out
    }
}

/// Per-user and per-item sensitive-attribute labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupAssignment {
    user_group: Vec<Label>,
    item_group: Vec<Label>,
    user_alphabet: u32,
    item_alphabet: u32,
}

impl GroupAssignment {
    pub fn new(
        user_group: Vec<Label>,
        item_group: Vec<Label>,
        user_alphabet: u32,
        item_alphabet: u32,
    ) -> Result<Self> {
        if user_alphabet == 0 || item_alphabet == 0 {
            return Err(Error::invalid("group alphabets must have at least one label"));
        }
        for (what, labels, size) in [
            ("user", &user_group, user_alphabet),
            ("item", &item_group, item_alphabet),
        ] {
            if let Some((k, l)) = labels
                .iter()
                .enumerate()
                .find_map(|(k, l)| l.filter(|&l| l >= size).map(|l| (k, l)))
            {
                return Err(Error::invalid(format!(
                    "{what} {k} has label {l}, alphabet size is {size}"
                )));
            }
            if labels.iter().all(Option::is_none) {
                return Err(Error::invalid(format!("no grouped {what}s")));
            }
        }
        Ok(GroupAssignment {
            user_group,
            item_group,
            user_alphabet,
            item_alphabet,
        })
    }

    /// First half of users/items in group 0, second half in group 1.
    pub fn halves(n: usize, m: usize) -> Result<Self> {
        let half = |len: usize| (0..len).map(|k| Some(u32::from(k >= len / 2))).collect();
        Self::new(half(n), half(m), 2, 2)
    }

    pub fn n_users(&self) -> usize {
        self.user_group.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_group.len()
    }

    pub fn user_groups(&self) -> &[Label] {
        &self.user_group
    }

    pub fn item_groups(&self) -> &[Label] {
        &self.item_group
    }

    pub fn user(&self, i: usize) -> Label {
        self.user_group[i]
    }

    pub fn item(&self, j: usize) -> Label {
        self.item_group[j]
    }

    pub fn user_alphabet(&self) -> usize {
        self.user_alphabet as usize
    }

    pub fn item_alphabet(&self) -> usize {
        self.item_alphabet as usize
    }

    pub fn n_cells(&self) -> usize {
        self.user_alphabet() * self.item_alphabet()
    }

    /// Flat index `z_user * |Z_item| + z_item` of the cell holding (i, j).
    pub fn cell(&self, i: usize, j: usize) -> Option<usize> {
        match (self.user_group[i], self.item_group[j]) {
            (Some(u), Some(v)) => Some(u as usize * self.item_alphabet() + v as usize),
            _ => None,
        }
    }

    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.item_alphabet(), cell % self.item_alphabet())
    }

    pub fn check_dims(&self, n: usize, m: usize) -> Result<()> {
        if (self.n_users(), self.n_items()) != (n, m) {
            return Err(Error::invalid(format!(
                "group labels cover {}x{}, matrix is {n}x{m}",
                self.n_users(),
                self.n_items()
            )));
        }
        Ok(())
    }
}

/// d(loss)/d(prediction), one entry per predicted rating.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrad(Array2<f64>);

impl PredictionGrad {
    pub fn new(grad: Array2<f64>) -> Result<Self> {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("non-finite prediction gradient"));
        }
        Ok(PredictionGrad(grad))
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        PredictionGrad(Array2::zeros((n, m)))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }
}

/// Random train/test partition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        Ok(SplitSpec { train_fraction, seed })
    }
}

/// Uniformly random partition of the observed set into train and test.
pub fn split_observations(
    mask: &ObservationMask,
    spec: SplitSpec,
) -> Result<(ObservationMask, ObservationMask)> {
    let spec = SplitSpec::new(spec.train_fraction, spec.seed)?;
    if mask.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least two observations to split, got {}",
            mask.len()
        )));
    }
    let mut order: Vec<usize> = (0..mask.len()).collect();
    order.shuffle(&mut rng::stream(spec.seed, Stream::Split));
    let n_train = (spec.train_fraction * mask.len() as f64).round() as usize;
    let mut in_train = vec![false; mask.len()];
    for &k in &order[..n_train] {
        in_train[k] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::new());
    for (k, &e) in mask.entries().iter().enumerate() {
        if in_train[k] {
            train.push(e);
        } else {
            test.push(e);
        }
    }
    let (n, m) = mask.dim();
    Ok((
        ObservationMask::from_sorted(n, m, train),
        ObservationMask::from_sorted(n, m, test),
    ))
}

/// Binary preference matrix: `true` iff the prediction is at least `tau`.
pub fn threshold_preferences(pred: &Array2<f64>, tau: f64) -> Array2<bool> {
    pred.mapv(|v| v >= tau)
}

/// Ground-truth ratings together with the set of observed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    ratings: RatingMatrix,
    observed: ObservationMask,
}

impl RatingDataset {
    pub fn new(ratings: RatingMatrix, observed: ObservationMask) -> Result<Self> {
        if ratings.dim() != observed.dim() {
            return Err(Error::invalid(format!(
                "mask is {:?}, ratings are {:?}",
                observed.dim(),
                ratings.dim()
            )));
        }
        if let Some((i, j)) = observed.iter().find(|&(i, j)| ratings.get(i, j).is_nan()) {
            return Err(Error::invalid(format!("observed entry ({i}, {j}) has no rating")));
        }
        Ok(RatingDataset { ratings, observed })
    }

    pub fn ratings(&self) -> &RatingMatrix {
        &self.ratings
    }

    pub fn observed(&self) -> &ObservationMask {
        &self.observed
    }

    pub fn dim(&self) -> (usize, usize) {
        self.ratings.dim()
    }

    pub fn domain(&self) -> ValueDomain {
        self.ratings.domain()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn mask_of(len: usize) -> ObservationMask {
        ObservationMask::new(len, 1, (0..len as u32).map(|i| (i, 0)).collect()).unwrap()
    }

    #[test]
    fn split_ten_entries() {
        let (train, test) = split_observations(&mask_of(10), SplitSpec::new(0.9, 3).unwrap()).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 1);
        assert!(train.iter().all(|(i, j)| !test.contains(i, j)));
    }

    #[test]
    fn split_is_deterministic() {
        let mask = mask_of(50);
        let spec = SplitSpec::new(0.7, 11).unwrap();
        assert_eq!(split_observations(&mask, spec).unwrap(), split_observations(&mask, spec).unwrap());
        let other = split_observations(&mask, SplitSpec::new(0.7, 12).unwrap()).unwrap();
        assert_ne!(split_observations(&mask, spec).unwrap(), other);
    }

    #[test]
    fn split_is_uniform_over_seeds() {
        let mask = mask_of(100);
        let mut hits = [0u32; 100];
        for seed in 0..1000 {
            let (train, _) = split_observations(&mask, SplitSpec::new(0.5, seed).unwrap()).unwrap();
            for (i, _) in train.iter() {
                hits[i] += 1;
            }
        }
        // Binomial(1000, 0.5) has sd ~15.8; 75 is > 4.7 sd.
        for (k, &h) in hits.iter().enumerate() {
            assert!((425..=575).contains(&h), "entry {k} in train {h} times");
        }
    }

    #[test]
    fn split_rejects_small_masks() {
        let spec = SplitSpec::new(0.9, 0).unwrap();
        assert!(matches!(
            split_observations(&ObservationMask::empty(3, 3), spec),
            Err(Error::InvalidInput(_))
        ));
        assert!(split_observations(&mask_of(1), spec).is_err());
        assert!(SplitSpec::new(1.0, 0).is_err());
    }

    #[test]
    fn threshold_examples() {
        let all_tau = Array2::from_elem((2, 3), 0.25);
        assert!(threshold_preferences(&all_tau, 0.25).iter().all(|&b| b));
        let pm = array![[-1.0, 1.0]];
        assert_eq!(threshold_preferences(&pm, 0.0), array![[false, true]]);
        let stars = array![[2.9, 3.0, 3.1]];
        assert_eq!(threshold_preferences(&stars, 3.0), array![[false, true, true]]);
    }

    #[test]
    fn constructors_validate() {
        assert!(RatingMatrix::new(array![[1.0, 0.5]], ValueDomain::Binary).is_err());
        assert!(RatingMatrix::new(array![[1.0, 6.0]], ValueDomain::Stars).is_err());
        assert!(RatingMatrix::new(Array2::zeros((0, 2)), ValueDomain::Stars).is_err());
        assert!(RatingMatrix::new(array![[1.0, f64::NAN]], ValueDomain::Stars).is_ok());
        assert!(ObservationMask::new(2, 2, vec![(0, 0), (0, 0)]).is_err());
        assert!(ObservationMask::new(2, 2, vec![(2, 0)]).is_err());
        assert!(GroupAssignment::new(vec![Some(2)], vec![Some(0)], 2, 2).is_err());
        assert!(GroupAssignment::new(vec![None], vec![Some(0)], 2, 2).is_err());
        let ratings = RatingMatrix::new(array![[1.0, f64::NAN]], ValueDomain::Stars).unwrap();
        let mask = ObservationMask::new(1, 2, vec![(0, 1)]).unwrap();
        assert!(RatingDataset::new(ratings, mask).is_err());
    }

    #[test]
    fn cells_index_row_major() {
        let g = GroupAssignment::new(vec![Some(1), None], vec![Some(0), Some(2)], 2, 3).unwrap();
        assert_eq!(g.cell(0, 0), Some(3));
        assert_eq!(g.cell(0, 1), Some(5));
        assert_eq!(g.cell(1, 0), None);
        assert_eq!(g.cell_coords(5), (1, 2));
    }

    proptest! {
        #[test]
        fn split_partitions(len in 2usize..200, frac in 0.05f64..0.95, seed: u64) {
            let mask = mask_of(len);
            let (train, test) = split_observations(&mask, SplitSpec::new(frac, seed).unwrap()).unwrap();
            prop_assert_eq!(train.len() + test.len(), len);
            prop_assert_eq!(train.len(), (frac * len as f64).round() as usize);
            for (i, j) in mask.iter() {
                prop_assert!(train.contains(i, j) != test.contains(i, j));
            }
        }

        #[test]
        fn threshold_is_monotone(vals in proptest::collection::vec(-5.0f64..5.0, 1..40), t1 in -5.0f64..5.0, dt in 0.0f64..3.0) {
            let pred = Array2::from_shape_vec((1, vals.len()), vals).unwrap();
            let lo = threshold_preferences(&pred, t1);
            let hi = threshold_preferences(&pred, t1 + dt);
            for (a, b) in lo.iter().zip(hi.iter()) {
                prop_assert!(!(*b && !*a));
            }
        }
    }
}
