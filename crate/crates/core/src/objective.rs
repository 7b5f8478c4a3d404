//! The lambda-blended training objective on a predicted matrix:
//! `(1 - lambda) * squared error over the training entries + lambda * penalty`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdereg::{Penalty, PenaltyConfig, PenaltyInputs};
use crate::types::{GroupAssignment, ObservationMask, RatingDataset};

/// How squared errors over the training entries are reduced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

impl LossReduction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            _ => Err(Error::invalid(format!("unknown loss reduction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub accuracy: f64,
    /// Unweighted penalty value, 0 when the penalty is inactive.
    pub penalty: f64,
    /// d loss / d prediction.
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Objective {
    train: Vec<(u32, u32)>,
    targets: Vec<f64>,
    dim: (usize, usize),
    accuracy_weight: f64,
    penalty: Option<(Penalty, f64)>,
}

impl Objective {
    /// A `None` penalty or `lambda == 0` drops the fairness term entirely; the
    /// accuracy weight is then 1.
    pub fn new(
        dataset: &RatingDataset,
        train: &ObservationMask,
        groups: &GroupAssignment,
        penalty: &PenaltyConfig,
        reduction: LossReduction,
    ) -> Result<Self> {
        penalty.validate()?;
        let dim = dataset.dim();
        if train.dim() != dim {
            return Err(Error::invalid(format!("training mask is {:?}, dataset is {dim:?}", train.dim())));
        }
        if train.is_empty() {
            return Err(Error::invalid("empty training mask"));
        }
        if let Some((i, j)) = train.iter().find(|&(i, j)| !dataset.observed().contains(i, j)) {
            return Err(Error::invalid(format!("training entry ({i}, {j}) is not observed")));
        }
        let targets: Vec<f64> = train.iter().map(|(i, j)| dataset.ratings().get(i, j)).collect();
        let scale = match reduction {
            LossReduction::Mean => 1.0 / train.len() as f64,
            LossReduction::Sum => 1.0,
        };
        let (accuracy_weight, penalty) = if penalty.is_active() {
            let inputs = PenaltyInputs { groups, truth: Some(dataset.ratings()), train: Some(train) };
            let p = Penalty::new(penalty, inputs, dim)?;
            ((1.0 - penalty.lambda) * scale, Some((p, penalty.lambda)))
        } else {
            (scale, None)
        };
        Ok(Objective { train: train.entries().to_vec(), targets, dim, accuracy_weight, penalty })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dim
    }

    pub fn evaluate(&self, pred: &Array2<f64>) -> Result<ObjectiveValue> {
        if pred.dim() != self.dim {
            return Err(Error::invalid(format!("prediction is {:?}, expected {:?}", pred.dim(), self.dim)));
        }
        let (mut grad, penalty, weighted_penalty) = match &self.penalty {
            Some((p, lambda)) => {
                let pv = p.evaluate(pred)?;
                let mut g = pv.grad.into_array();
                g *= *lambda;
                (g, pv.value, lambda * pv.value)
            }
            None => (Array2::zeros(self.dim), 0.0, 0.0),
        };
        let mut sse = 0.0;
        for (&(i, j), &t) in self.train.iter().zip(&self.targets) {
            let (i, j) = (i as usize, j as usize);
            let r = pred[[i, j]] - t;
            sse += r * r;
            grad[[i, j]] += 2.0 * self.accuracy_weight * r;
        }
        let accuracy = self.accuracy_weight * sse;
        Ok(ObjectiveValue { loss: accuracy + weighted_penalty, accuracy, penalty, grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::kdereg::PenaltyKind;
    use crate::synthgen::{generate, SyntheticConfig};
    use crate::types::{split_observations, SplitSpec};

    fn small() -> (RatingDataset, GroupAssignment, ObservationMask) {
        let cfg = SyntheticConfig::symmetric(6, 6, 2, (0.5, 0.5), (0.8, 0.5), 4);
        let (d, g) = generate(&cfg).unwrap();
        let (train, _) = split_observations(d.observed(), SplitSpec::new(0.8, 1).unwrap()).unwrap();
        (d, g, train)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (d, g, train) = small();
        for kind in PenaltyKind::ALL {
            for reduction in [LossReduction::Mean, LossReduction::Sum] {
                let cfg = PenaltyConfig { bandwidth: 0.3, huber_delta: 0.05, ..PenaltyConfig::new(kind, 0.0, 0.6) };
                let obj = Objective::new(&d, &train, &g, &cfg, reduction).unwrap();
                let pred = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin() * 0.5);
                let a: Vec<f64> = obj.evaluate(&pred).unwrap().grad.iter().copied().collect();
                let x: Vec<f64> = pred.iter().copied().collect();
                let r = gradcheck::check(
                    |v| obj.evaluate(&Array2::from_shape_vec((6, 6), v.to_vec()).unwrap()).unwrap().loss,
                    &a,
                    &x,
                );
                assert!(r.passes(1e-4), "{kind} {reduction:?}: {r:?}");
            }
        }
    }

    #[test]
    fn inactive_penalty_is_plain_mse() {
        let (d, g, train) = small();
        let pred = Array2::zeros((6, 6));
        let base = Objective::new(&d, &train, &g, &PenaltyConfig::unfair(0.0), LossReduction::Mean).unwrap();
        let v = base.evaluate(&pred).unwrap();
        // every target is +-1, so each squared error is 1
        assert_eq!(v.loss, 1.0);
        let off = PenaltyConfig::new(PenaltyKind::Dee, 0.0, 0.0);
        let w = Objective::new(&d, &train, &g, &off, LossReduction::Mean).unwrap().evaluate(&pred).unwrap();
        assert_eq!(v.loss.to_bits(), w.loss.to_bits());
        assert_eq!(v.grad, w.grad);
        let sum = Objective::new(&d, &train, &g, &PenaltyConfig::unfair(0.0), LossReduction::Sum).unwrap();
        assert_eq!(sum.evaluate(&pred).unwrap().loss, train.len() as f64);
    }

    #[test]
    fn rejects_unobserved_training_entries() {
        let (d, g, _) = small();
        let full = ObservationMask::full(6, 6);
        if d.observed().len() < 36 {
            assert!(Objective::new(&d, &full, &g, &PenaltyConfig::unfair(0.0), LossReduction::Mean).is_err());
        }
        assert!(Objective::new(&d, &ObservationMask::empty(6, 6), &g, &PenaltyConfig::unfair(0.0), LossReduction::Mean).is_err());
    }
}
