//! User-based autoencoder: each user's training row is encoded by two ReLU
//! layers (the second followed by dropout) and decoded back to all items.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdereg::PenaltyConfig;
use crate::mftrain::{read_exact, read_matrix, read_u64, LossTrace, TrainConfig};
use crate::objective::Objective;
use crate::optim::Adam;
use crate::rng::{self, Stream};
use crate::types::{GroupAssignment, ObservationMask, PredictionGrad, RatingDataset, ValueDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputMode {
    /// Identity while training, clipped to [1, 5] at evaluation.
    ClipStars,
    /// tanh in both modes.
    Tanh,
}

impl OutputMode {
    pub fn for_domain(domain: ValueDomain) -> Self {
        match domain {
            ValueDomain::Stars => OutputMode::ClipStars,
            ValueDomain::Binary => OutputMode::Tanh,
        }
    }

    fn code(self) -> u8 {
        match self {
            OutputMode::ClipStars => 0,
            OutputMode::Tanh => 1,
        }
    }

    fn from_code(b: u8) -> Result<Self> {
        match b {
            0 => Ok(OutputMode::ClipStars),
            1 => Ok(OutputMode::Tanh),
            _ => Err(Error::Format(format!("unknown output mode byte {b}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeArch {
    pub hidden: usize,
    pub dropout_rate: f64,
    pub output_mode: OutputMode,
}

impl AeArch {
    pub fn new(output_mode: OutputMode) -> Self {
        AeArch { hidden: 512, dropout_rate: 0.7, output_mode }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::invalid("hidden width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub dropout_rate: f64,
    pub output_mode: OutputMode,
}

/// Gradients for each parameter tensor of an [`AutoencoderModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct AeGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Inverted-dropout multipliers for the second hidden layer: 0 or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(Array2<f64>);

impl DropoutMask {
    pub fn sample(rows: usize, hidden: usize, rate: f64, seed: u64, iteration: u64) -> Self {
        let keep = 1.0 - rate;
        let mut rng = rng::substream(seed, Stream::Dropout, iteration);
        DropoutMask(Array2::from_shape_simple_fn((rows, hidden), || {
            if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }
        }))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Activations of a training-mode pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    dropped: Array2<f64>,
    mask: Option<Array2<f64>>,
    pub output: Array2<f64>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn relu(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

impl AutoencoderModel {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
    pub fn init(m: usize, arch: &AeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        if m == 0 {
            return Err(Error::invalid("no items"));
        }
        let h = arch.hidden;
        let mut rng = rng::stream(seed, Stream::Init);
        let (k_in, k_h) = (1.0 / (m as f64).sqrt(), 1.0 / (h as f64).sqrt());
        let w1 = uniform(&mut rng, m, h, k_in);
        let b1 = uniform(&mut rng, 1, h, k_in).remove_axis(Axis(0));
        let w2 = uniform(&mut rng, h, h, k_h);
        let b2 = uniform(&mut rng, 1, h, k_h).remove_axis(Axis(0));
        let w3 = uniform(&mut rng, h, m, k_h);
        let b3 = uniform(&mut rng, 1, m, k_h).remove_axis(Axis(0));
        Ok(AutoencoderModel { w1, b1, w2, b2, w3, b3, dropout_rate: arch.dropout_rate, output_mode: arch.output_mode })
    }

    pub fn n_items(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.n_items() {
            return Err(Error::invalid(format!("input has {} columns, model expects {}", input.ncols(), self.n_items())));
        }
        Ok(())
    }

    /// Parameter tensors in checkpoint order, row-major.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.n_items() as u64).to_le_bytes())?;
        w.write_all(&(self.hidden() as u64).to_le_bytes())?;
        w.write_all(&[self.output_mode.code()])?;
        for t in self.tensors() {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// The dropout rate is not part of the checkpoint; loaded models carry the default.
    pub fn read_from(mut rd: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut rd, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let m = read_u64(&mut rd)?;
        let h = read_u64(&mut rd)?;
        let mut mode = [0u8; 1];
        read_exact(&mut rd, &mut mode)?;
        let output_mode = OutputMode::from_code(mode[0])?;
        let vector = |rd: &mut _, len| read_matrix(rd, 1, len).map(|a| a.remove_axis(Axis(0)));
        let w1 = read_matrix(&mut rd, m, h)?;
        let b1 = vector(&mut rd, h)?;
        let w2 = read_matrix(&mut rd, h, h)?;
        let b2 = vector(&mut rd, h)?;
        let w3 = read_matrix(&mut rd, h, m)?;
        let b3 = vector(&mut rd, m)?;
        let mut rest = Vec::new();
        rd.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        let model = AutoencoderModel { w1, b1, w2, b2, w3, b3, dropout_rate: 0.7, output_mode };
        if !model.tensors().into_iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::Format("non-finite weight in checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        AutoencoderModel::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"AEC1";

/// Training-mode pass: dropout from `mask` (none if `None`), pre-clip output.
pub fn forward_train(model: &AutoencoderModel, input: &Array2<f64>, mask: Option<&DropoutMask>) -> Result<ForwardCache> {
    model.check_input(input)?;
    let mut h1 = input.dot(&model.w1) + &model.b1;
    relu(&mut h1);
    let mut h2 = h1.dot(&model.w2) + &model.b2;
    relu(&mut h2);
    let mask = match mask {
        Some(m) if m.0.dim() != h2.dim() => {
            return Err(Error::invalid(format!("dropout mask is {:?}, layer is {:?}", m.0.dim(), h2.dim())));
        }
        Some(m) => Some(m.0.clone()),
        None => None,
    };
    let dropped = match &mask {
        Some(m) => &h2 * m,
        None => h2.clone(),
    };
    let mut output = dropped.dot(&model.w3) + &model.b3;
    if model.output_mode == OutputMode::Tanh {
        output.mapv_inplace(f64::tanh);
    }
    Ok(ForwardCache { input: input.clone(), h1, h2, dropped, mask, output })
}

/// Evaluation-mode prediction: no dropout, output clipped or squashed.
pub fn forward(model: &AutoencoderModel, input: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = forward_train(model, input, None)?.output;
    if model.output_mode == OutputMode::ClipStars {
        out.mapv_inplace(|v| v.clamp(1.0, 5.0));
    }
    Ok(out)
}

/// Gradients of `sum_ij entry_grad_ij * output_ij` through the training-mode pass.
pub fn backward(model: &AutoencoderModel, cache: &ForwardCache, entry_grad: &PredictionGrad) -> Result<AeGrads> {
    let g = entry_grad.as_array();
    if g.dim() != cache.output.dim() {
        return Err(Error::invalid(format!("gradient is {:?}, output is {:?}", g.dim(), cache.output.dim())));
    }
    let g_out = match model.output_mode {
        OutputMode::Tanh => g * &cache.output.mapv(|y| 1.0 - y * y),
        OutputMode::ClipStars => g.clone(),
    };
    let w3 = cache.dropped.t().dot(&g_out);
    let b3 = g_out.sum_axis(Axis(0));
    let mut g_h2 = g_out.dot(&model.w3.t());
    if let Some(m) = &cache.mask {
        g_h2 *= m;
    }
    ndarray::Zip::from(&mut g_h2).and(&cache.h2).for_each(|d, &a| if a <= 0.0 { *d = 0.0 });
    let w2 = cache.h1.t().dot(&g_h2);
    let b2 = g_h2.sum_axis(Axis(0));
    let mut g_h1 = g_h2.dot(&model.w2.t());
    ndarray::Zip::from(&mut g_h1).and(&cache.h1).for_each(|d, &a| if a <= 0.0 { *d = 0.0 });
    let w1 = cache.input.t().dot(&g_h1);
    let b1 = g_h1.sum_axis(Axis(0));
    Ok(AeGrads { w1, b1, w2, b2, w3, b3 })
}

/// Each user's training ratings, zero elsewhere.
pub fn training_input(dataset: &RatingDataset, train: &ObservationMask) -> Array2<f64> {
    let mut x = Array2::zeros(dataset.dim());
    for (i, j) in train.iter() {
        x[[i, j]] = dataset.ratings().get(i, j);
    }
    x
}

pub fn train_ae(
    dataset: &RatingDataset,
    train_mask: &ObservationMask,
    groups: &GroupAssignment,
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
    arch: &AeArch,
) -> Result<(AutoencoderModel, LossTrace)> {
    cfg.validate()?;
    let objective = Objective::new(dataset, train_mask, groups, penalty, cfg.loss_reduction)?;
    let input = training_input(dataset, train_mask);
    let (n, m) = dataset.dim();
    let mut model = AutoencoderModel::init(m, arch, cfg.seed)?;
    let sizes = [m * arch.hidden, arch.hidden, arch.hidden * arch.hidden, arch.hidden, arch.hidden * m, m];
    let mut adams: Vec<Adam> = sizes.iter().map(|&len| Adam::new(cfg.adam(), len)).collect();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mask = (arch.dropout_rate > 0.0)
            .then(|| DropoutMask::sample(n, arch.hidden, arch.dropout_rate, cfg.seed, iteration as u64));
        let cache = forward_train(&model, &input, mask.as_ref())?;
        if cache.output.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration, loss: f64::NAN });
        }
        let v = objective.evaluate(&cache.output)?;
        if !v.loss.is_finite() {
            return Err(Error::Divergence { iteration, loss: v.loss });
        }
        trace.push(v.loss);
        let grads = backward(&model, &cache, &PredictionGrad::new(v.grad)?)?;
        let flat = [
            grads.w1.as_slice(),
            grads.b1.as_slice(),
            grads.w2.as_slice(),
            grads.b2.as_slice(),
            grads.w3.as_slice(),
            grads.b3.as_slice(),
        ];
        for ((p, g), adam) in model.params_mut().into_iter().zip(flat).zip(&mut adams) {
            adam.update(p, g.expect("standard layout"));
        }
        if iteration % 100 == 0 {
            log::debug!("iteration {iteration}: loss {:.6} (penalty {:.6})", v.loss, v.penalty);
        }
    }
    Ok((model, trace))
}

/// Evaluation-mode predictions for every user of `dataset`.
pub fn predict(model: &AutoencoderModel, dataset: &RatingDataset, train: &ObservationMask) -> Result<Array2<f64>> {
    forward(model, &training_input(dataset, train))
}
