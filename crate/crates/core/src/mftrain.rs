//! Matrix factorization `M = L R` trained by full-batch Adam.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdereg::PenaltyConfig;
use crate::objective::{LossReduction, Objective};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Stream};
use crate::types::{GroupAssignment, ObservationMask, RatingDataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Initial factor entries have standard deviation `init_scale / sqrt(rank)`.
    pub init_scale: f64,
    /// Factorization rank (ignored by the autoencoder).
    pub rank: usize,
    pub seed: u64,
    pub loss_reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            init_scale: 1.0,
            rank: 20,
            seed: 0,
            loss_reduction: LossReduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::invalid(format!("init scale must be > 0, got {}", self.init_scale)));
        }
        self.adam().validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    l: Array2<f64>,
    r: Array2<f64>,
}

impl FactorModel {
    pub fn new(l: Array2<f64>, r: Array2<f64>) -> Result<Self> {
        if l.ncols() != r.nrows() || l.ncols() == 0 {
            return Err(Error::invalid(format!("factor shapes {:?} and {:?} do not chain", l.dim(), r.dim())));
        }
        if !l.iter().chain(r.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite factor entry"));
        }
        Ok(FactorModel {
            l: l.as_standard_layout().into_owned(),
            r: r.as_standard_layout().into_owned(),
        })
    }

    pub fn l(&self) -> &Array2<f64> {
        &self.l
    }

    pub fn r(&self) -> &Array2<f64> {
        &self.r
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.l.nrows(), self.r.ncols())
    }

    pub fn predict(&self) -> Array2<f64> {
        self.l.dot(&self.r)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let (n, m) = self.dim();
        for d in [n, m, self.rank()] {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in self.l.iter().chain(self.r.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut rd: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut rd, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let n = read_u64(&mut rd)?;
        let m = read_u64(&mut rd)?;
        let r = read_u64(&mut rd)?;
        let l = read_matrix(&mut rd, n, r)?;
        let rf = read_matrix(&mut rd, r, m)?;
        let mut rest = Vec::new();
        rd.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        FactorModel::new(l, rf).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FactorModel::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMC1";

pub(crate) fn read_exact(rd: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    rd.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u64(rd: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(rd, &mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("dimension overflows".into()))
}

pub(crate) fn read_matrix(rd: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let len = rows.checked_mul(cols).ok_or_else(|| Error::Format("dimension overflows".into()))?;
    if len > 1 << 34 {
        return Err(Error::Format(format!("implausible tensor size {rows}x{cols}")));
    }
    let mut v = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        read_exact(rd, &mut b)?;
        v.push(f64::from_le_bytes(b));
    }
    Array2::from_shape_vec((rows, cols), v).map_err(|e| Error::Format(e.to_string()))
}

/// Gaussian factors with standard deviation `init_scale / sqrt(r)`.
pub fn init_factors(n: usize, m: usize, r: usize, cfg: &TrainConfig) -> Result<FactorModel> {
    if r == 0 {
        return Err(Error::invalid("rank must be positive"));
    }
    if r > n.min(m) {
        return Err(Error::invalid(format!("rank {r} exceeds min({n}, {m})")));
    }
    let sd = cfg.init_scale / (r as f64).sqrt();
    let normal = Normal::new(0.0, sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = rng::stream(cfg.seed, Stream::Init);
    let l = Array2::from_shape_simple_fn((n, r), || normal.sample(&mut rng));
    let rf = Array2::from_shape_simple_fn((r, m), || normal.sample(&mut rng));
    FactorModel::new(l, rf)
}

/// Objective value and its gradients with respect to both factors.
pub fn loss_and_grads(model: &FactorModel, objective: &Objective) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let v = objective.evaluate(&model.predict())?;
    let gl = v.grad.dot(&model.r.t());
    let gr = model.l.t().dot(&v.grad);
    Ok((v.loss, gl, gr))
}

/// Per-iteration objective values, recorded before each update.
pub type LossTrace = Vec<f64>;

pub fn train(
    dataset: &RatingDataset,
    train_mask: &ObservationMask,
    groups: &GroupAssignment,
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
) -> Result<(FactorModel, LossTrace)> {
    cfg.validate()?;
    let objective = Objective::new(dataset, train_mask, groups, penalty, cfg.loss_reduction)?;
    let (n, m) = dataset.dim();
    let mut model = init_factors(n, m, cfg.rank, cfg)?;
    let mut adam_l = Adam::new(cfg.adam(), model.l.len());
    let mut adam_r = Adam::new(cfg.adam(), model.r.len());
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let pred = model.predict();
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration, loss: f64::NAN });
        }
        let v = objective.evaluate(&pred)?;
        if !v.loss.is_finite() {
            return Err(Error::Divergence { iteration, loss: v.loss });
        }
        trace.push(v.loss);
        let gl = v.grad.dot(&model.r.t());
        let gr = model.l.t().dot(&v.grad);
        adam_l.update(model.l.as_slice_mut().expect("standard layout"), gl.as_slice().expect("standard layout"));
        adam_r.update(model.r.as_slice_mut().expect("standard layout"), gr.as_slice().expect("standard layout"));
        if iteration % 100 == 0 {
            log::debug!("iteration {iteration}: loss {:.6} (penalty {:.6})", v.loss, v.penalty);
        }
    }
    Ok((model, trace))
}
