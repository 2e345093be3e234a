//! Training-objective loss kernels: image-text contrastive (ITC), image-text
//! matching (ITM), masked language modeling (MLM), masked image modeling
//! (MIM) and their weighted total.
//!
//! Each kernel has an analytic gradient next to it so that
//! [`finite_diff_grad_check`] can compare the two. Cross-encoder outputs
//! (matching probabilities, token distributions, reconstructions) are
//! consumed as plain arrays.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::ScoreMatrix;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

/// Default weight of the masked-image term in [`total_loss`].
pub const DEFAULT_MIM_WEIGHT: f64 = 0.1356;

/// Coordinates whose reconstruction error is within this distance of zero
/// sit on a kink of the L1 loss and are skipped by the gradient check.
pub const MIM_KINK_MARGIN: f64 = 1e-3;

/// Denominator floor used when forming relative gradient errors, so that
/// coordinates with a true gradient of (nearly) zero are compared on an
/// absolute scale instead of amplifying finite-difference round-off.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("temperature must be positive, got {tau}")))
    }
}

/// Labels and predicted match probabilities for a batch of image-text pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmBatch {
    labels: Vec<u8>,
    probs: Vec<f64>,
}

impl ItmBatch {
    pub fn new(labels: Vec<u8>, probs: Vec<f64>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::param("ITM batch is empty"));
        }
        if labels.len() != probs.len() {
            return Err(Error::shape(format!(
                "ITM batch has {} labels but {} probabilities",
                labels.len(),
                probs.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l > 1) {
            return Err(Error::invalid(format!("ITM label {i} is {}, not 0/1", labels[i])));
        }
        if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "ITM probability {i} is {}, outside [0, 1]",
                probs[i]
            )));
        }
        Ok(Self { labels, probs })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Predicted vocabulary distributions at masked token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    vocab: usize,
    predicted: Vec<f64>,
    targets: Vec<usize>,
}

impl MlmBatch {
    /// `predicted` is row-major `targets.len() x vocab`.
    pub fn new(vocab: usize, predicted: Vec<f64>, targets: Vec<usize>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::param("MLM batch has no masked positions"));
        }
        if vocab == 0 || predicted.len() != targets.len() * vocab {
            return Err(Error::shape(format!(
                "MLM batch: {} predictions for {} positions over vocabulary {vocab}",
                predicted.len(),
                targets.len()
            )));
        }
        for (pos, row) in predicted.chunks_exact(vocab).enumerate() {
            if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!(
                    "MLM position {pos}: probability {j} is {}",
                    row[j]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "MLM position {pos}: distribution sums to {sum}"
                )));
            }
        }
        if let Some(pos) = targets.iter().position(|&t| t >= vocab) {
            return Err(Error::invalid(format!(
                "MLM position {pos}: target {} outside vocabulary {vocab}",
                targets[pos]
            )));
        }
        Ok(Self {
            vocab,
            predicted,
            targets,
        })
    }

    /// Uniform predictions over `vocab` tokens for every target.
    pub fn uniform(vocab: usize, targets: Vec<usize>) -> Result<Self> {
        let p = 1.0 / vocab as f64;
        Self::new(vocab, vec![p; vocab * targets.len()], targets)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// A dense tensor of pixel (or patch) values.
///
/// For the masked-image loss the leading dimension indexes images in the
/// batch; for the view transforms in [`crate::lhp`] the shape is
/// `[height, width]` or `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || count == 0 || count != data.len() {
            return Err(Error::shape(format!(
                "tensor shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("tensor element {i} is not finite")));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let count = shape.iter().product();
        Self::new(shape, vec![value; count])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { shape, data }
    }
}

/// Which elements of an [`ImageTensor`] were masked out of the encoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    masked: Vec<bool>,
}

impl MaskSpec {
    pub fn new(masked: Vec<bool>) -> Self {
        Self { masked }
    }

    pub fn all(len: usize) -> Self {
        Self::new(vec![true; len])
    }

    pub fn masked_flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn mask_ratio(&self) -> f64 {
        if self.masked.is_empty() {
            0.0
        } else {
            self.masked_count() as f64 / self.masked.len() as f64
        }
    }
}

/// Reduction applied by [`mim_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MimReduction {
    /// Mean absolute error over the masked elements of each image, averaged
    /// over the images that have at least one masked element.
    #[default]
    MaskedMean,
    /// Whole-image L1 norm of the reconstruction error, averaged over images.
    ImageSum,
}

/// Values of every loss term and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub itc: f64,
    pub itm: f64,
    pub mlm: f64,
    pub mim: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossReport {
    pub fn recomputed_total(&self) -> f64 {
        self.itc + self.itm + self.mlm + self.alpha * self.mim
    }
}

// ---------------------------------------------------------------------------
// Raw kernels: no validation, value plus gradient.

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn itc_kernel(sim: &[f64], n: usize, tau: f64) -> (f64, Vec<f64>) {
    let z = |i: usize, j: usize| sim[i * n + j] / tau;
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp((0..n).map(move |j| z(i, j)))).collect();
    let col_lse: Vec<f64> = (0..n).map(|j| log_sum_exp((0..n).map(move |i| z(i, j)))).collect();

    let mut log_lik = 0.0;
    for i in 0..n {
        log_lik += (z(i, i) - row_lse[i]) + (z(i, i) - col_lse[i]);
    }
    let value = -0.5 * log_lik / n as f64;

    let scale = 0.5 / (n as f64 * tau);
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let p_row = (z(i, j) - row_lse[i]).exp();
            let p_col = (z(i, j) - col_lse[j]).exp();
            let target = if i == j { 2.0 } else { 0.0 };
            grad[i * n + j] = scale * (p_row + p_col - target);
        }
    }
    (value.max(0.0), grad)
}

fn itm_kernel(labels: &[u8], probs: &[f64]) -> (f64, Vec<f64>) {
    let n = labels.len() as f64;
    let mut sum = 0.0;
    let mut grad = Vec::with_capacity(labels.len());
    for (&l, &p) in labels.iter().zip(probs) {
        let y = f64::from(l);
        let q = clamp_prob(p);
        sum += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
        grad.push(if inside {
            -(y / q - (1.0 - y) / (1.0 - q)) / n
        } else {
            0.0
        });
    }
    (sum / n, grad)
}

fn mlm_kernel(vocab: usize, predicted: &[f64], targets: &[usize]) -> (f64, Vec<f64>) {
    let n = targets.len() as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; predicted.len()];
    for (pos, &t) in targets.iter().enumerate() {
        let at = pos * vocab + t;
        let p = predicted[at];
        let q = p.max(PROB_EPS);
        sum -= q.ln();
        if p > PROB_EPS {
            grad[at] = -1.0 / (n * q);
        }
    }
    (sum / n, grad)
}

// Subgradient of |d| that is zero at the kink.
fn l1_sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn mim_kernel(
    recon: &[f64],
    orig: &[f64],
    masked: &[bool],
    n_images: usize,
    reduction: MimReduction,
) -> (f64, Vec<f64>) {
    let per = recon.len() / n_images;
    let mut grad = vec![0.0; recon.len()];
    match reduction {
        MimReduction::MaskedMean => {
            let counts: Vec<usize> = masked
                .chunks_exact(per)
                .map(|m| m.iter().filter(|&&b| b).count())
                .collect();
            let contributing = counts.iter().filter(|&&c| c > 0).count() as f64;
            let mut total = 0.0;
            for (img, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let weight = 1.0 / (c as f64 * contributing);
                let mut s = 0.0;
                for e in img * per..(img + 1) * per {
                    if masked[e] {
                        let d = recon[e] - orig[e];
                        s += d.abs();
                        grad[e] = weight * l1_sign(d);
                    }
                }
                total += s / c as f64;
            }
            (total / contributing, grad)
        }
        MimReduction::ImageSum => {
            let weight = 1.0 / n_images as f64;
            let mut total = 0.0;
            for (e, g) in grad.iter_mut().enumerate() {
                let d = recon[e] - orig[e];
                total += d.abs();
                *g = weight * l1_sign(d);
            }
            (total / n_images as f64, grad)
        }
    }
}

// ---------------------------------------------------------------------------
// Public losses.

/// Symmetric contrastive loss over a square in-batch similarity matrix whose
/// diagonal holds the matching pairs. Both retrieval directions are derived
/// from the same raw matrix: rows give image-to-text, columns text-to-image.
pub fn itc_loss(sim: &ScoreMatrix, tau: f64) -> Result<f64> {
    if !sim.is_square() {
        return Err(Error::shape(format!(
            "contrastive loss needs a square similarity matrix, got {}x{}",
            sim.n_rows(),
            sim.n_cols()
        )));
    }
    check_tau(tau)?;
    Ok(itc_kernel(sim.as_slice(), sim.n_rows(), tau).0)
}

/// Mean binary cross-entropy between match labels and predicted probabilities.
pub fn itm_loss(batch: &ItmBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("ITM batch is empty"));
    }
    Ok(itm_kernel(&batch.labels, &batch.probs).0)
}

/// Mean negative log-likelihood of the correct token over masked positions.
pub fn mlm_loss(batch: &MlmBatch) -> Result<f64> {
    Ok(mlm_kernel(batch.vocab, &batch.predicted, &batch.targets).0)
}

fn check_mim(reconstructed: &ImageTensor, original: &ImageTensor, mask: &MaskSpec) -> Result<()> {
    if reconstructed.shape != original.shape {
        return Err(Error::shape(format!(
            "reconstruction shape {:?} vs original {:?}",
            reconstructed.shape, original.shape
        )));
    }
    if mask.masked.len() != original.data.len() {
        return Err(Error::shape(format!(
            "mask covers {} elements but the images hold {}",
            mask.masked.len(),
            original.data.len()
        )));
    }
    if mask.masked_count() == 0 {
        return Err(Error::param("mask has no masked elements"));
    }
    Ok(())
}

/// L1 reconstruction loss for masked image modeling. The leading tensor
/// dimension is the image index.
pub fn mim_loss(
    reconstructed: &ImageTensor,
    original: &ImageTensor,
    mask: &MaskSpec,
    reduction: MimReduction,
) -> Result<f64> {
    check_mim(reconstructed, original, mask)?;
    Ok(mim_kernel(
        &reconstructed.data,
        &original.data,
        &mask.masked,
        original.shape[0],
        reduction,
    )
    .0)
}

/// Weighted sum `itc + itm + mlm + alpha * mim`.
pub fn total_loss(itc: f64, itm: f64, mlm: f64, mim: f64, alpha: f64) -> Result<LossReport> {
    for (name, v) in [("itc", itc), ("itm", itm), ("mlm", mlm), ("mim", mim), ("alpha", alpha)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::invalid(format!(
                "loss component {name} must be finite and non-negative, got {v}"
            )));
        }
    }
    Ok(LossReport {
        itc,
        itm,
        mlm,
        mim,
        alpha,
        total: itc + itm + mlm + alpha * mim,
    })
}

// ---------------------------------------------------------------------------
// Gradient checking.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Itc,
    Itm,
    Mlm,
    Mim,
}

impl LossKind {
    /// Central-difference step that keeps both truncation and roundoff below
    /// the checker's tolerance. Temperature-scaled logits amplify roundoff, so
    /// the contrastive loss takes a larger step.
    pub fn default_step(self) -> f64 {
        match self {
            LossKind::Itc => 1e-4,
            LossKind::Itm | LossKind::Mlm | LossKind::Mim => 1e-6,
        }
    }
}

/// Inputs for one loss, with the coordinates the gradient is taken against:
/// the similarity matrix for ITC, the probabilities for ITM and MLM, and the
/// reconstruction for MIM.
#[derive(Debug, Clone)]
pub enum LossInput {
    Itc {
        sim: ScoreMatrix,
        tau: f64,
    },
    Itm(ItmBatch),
    Mlm(MlmBatch),
    Mim {
        reconstructed: ImageTensor,
        original: ImageTensor,
        mask: MaskSpec,
        reduction: MimReduction,
    },
}

impl LossInput {
    pub fn kind(&self) -> LossKind {
        match self {
            LossInput::Itc { .. } => LossKind::Itc,
            LossInput::Itm(_) => LossKind::Itm,
            LossInput::Mlm(_) => LossKind::Mlm,
            LossInput::Mim { .. } => LossKind::Mim,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LossInput::Itc { sim, tau } => itc_loss(sim, *tau).map(drop),
            LossInput::Itm(b) => itm_loss(b).map(drop),
            LossInput::Mlm(b) => mlm_loss(b).map(drop),
            LossInput::Mim {
                reconstructed,
                original,
                mask,
                ..
            } => check_mim(reconstructed, original, mask),
        }
    }

    fn coords(&self) -> &[f64] {
        match self {
            LossInput::Itc { sim, .. } => sim.as_slice(),
            LossInput::Itm(b) => &b.probs,
            LossInput::Mlm(b) => &b.predicted,
            LossInput::Mim { reconstructed, .. } => &reconstructed.data,
        }
    }

    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self {
            LossInput::Itc { sim, tau } => itc_kernel(x, sim.n_rows(), *tau),
            LossInput::Itm(b) => itm_kernel(&b.labels, x),
            LossInput::Mlm(b) => mlm_kernel(b.vocab, x, &b.targets),
            LossInput::Mim {
                original,
                mask,
                reduction,
                ..
            } => mim_kernel(x, &original.data, &mask.masked, original.shape[0], *reduction),
        }
    }

    /// Coordinates where the loss is smooth over `[x - eps, x + eps]`.
    fn smooth_at(&self, i: usize, eps: f64) -> bool {
        match self {
            LossInput::Itc { .. } => true,
            LossInput::Itm(b) => {
                let p = b.probs[i];
                p - eps > PROB_EPS && p + eps < 1.0 - PROB_EPS
            }
            LossInput::Mlm(b) => b.predicted[i] - eps > PROB_EPS,
            LossInput::Mim {
                reconstructed,
                original,
                ..
            } => (reconstructed.data[i] - original.data[i]).abs() > MIM_KINK_MARGIN.max(eps),
        }
    }

    /// Loss value and analytic gradient at the stored inputs.
    pub fn value_and_grad(&self) -> Result<(f64, Vec<f64>)> {
        self.validate()?;
        Ok(self.eval(self.coords()))
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Maximum relative error between the analytic gradient of the loss and
/// central finite differences, taken over every input coordinate where the
/// loss is smooth.
pub fn finite_diff_grad_check(input: &LossInput, epsilon: f64) -> Result<f64> {
    if !(1e-8..=1e-4).contains(&epsilon) {
        return Err(Error::param(format!(
            "finite-difference step must be in [1e-8, 1e-4], got {epsilon}"
        )));
    }
    let (_, analytic) = input.value_and_grad()?;
    let x = input.coords();
    let worst = (0..x.len())
        .into_par_iter()
        .filter(|&i| input.smooth_at(i, epsilon))
        .map(|i| {
            let mut probe = x.to_vec();
            probe[i] = x[i] + epsilon;
            let up = input.eval(&probe).0;
            probe[i] = x[i] - epsilon;
            let down = input.eval(&probe).0;
            relative_error(analytic[i], (up - down) / (2.0 * epsilon))
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}
