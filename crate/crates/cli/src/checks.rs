//! Loss example checks and randomized gradient checks.

use anomret::losses::{
    finite_diff_grad_check, itc_loss, itm_loss, mim_loss, mlm_loss, total_loss, ImageTensor, ItmBatch,
    LossInput, LossKind, MaskSpec, MimReduction, MlmBatch, DEFAULT_MIM_WEIGHT,
};
use anomret::{Result, ScoreMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Absolute tolerance for the worked loss examples.
pub const EXAMPLE_TOL: f64 = 1e-8;
/// Maximum relative gradient error accepted per instance.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutcome {
    pub name: &'static str,
    pub value: f64,
    pub expected: f64,
    /// `true` when `value <= expected` is the requirement rather than equality.
    pub upper_bound: bool,
}

impl ExampleOutcome {
    pub fn passed(&self) -> bool {
        if self.upper_bound {
            self.value <= self.expected
        } else {
            (self.value - self.expected).abs() <= EXAMPLE_TOL
        }
    }
}

fn sq(rows: &[Vec<f64>]) -> Result<ScoreMatrix> {
    ScoreMatrix::from_rows(rows)
}

fn onehot_rows(vocab: usize, probs: &[(usize, f64)]) -> Vec<f64> {
    // Target probability at the given index, the rest spread evenly.
    let mut out = Vec::with_capacity(vocab * probs.len());
    for &(target, p) in probs {
        let rest = (1.0 - p) / (vocab - 1) as f64;
        out.extend((0..vocab).map(|j| if j == target { p } else { rest }));
    }
    out
}

/// Every worked example for the four losses and their weighted sum.
pub fn loss_examples() -> Result<Vec<ExampleOutcome>> {
    let eq = |name, value, expected| ExampleOutcome {
        name,
        value,
        expected,
        upper_bound: false,
    };
    let le = |name, value, expected| ExampleOutcome {
        name,
        value,
        expected,
        upper_bound: true,
    };
    let mean_mim = |recon: Vec<f64>, orig: Vec<f64>, shape: Vec<usize>| -> Result<f64> {
        let n = orig.len();
        mim_loss(
            &ImageTensor::new(shape.clone(), recon)?,
            &ImageTensor::new(shape, orig)?,
            &MaskSpec::all(n),
            MimReduction::MaskedMean,
        )
    };

    let mut out = vec![
        eq("itc.singleton", itc_loss(&sq(&[vec![0.37]])?, 1.0)?, 0.0),
        eq(
            "itc.identity_2x2",
            itc_loss(&sq(&[vec![1.0, 0.0], vec![0.0, 1.0]])?, 1.0)?,
            0.313_261_687_518_222_9,
        ),
        le(
            "itc.saturated",
            itc_loss(&sq(&[vec![100.0, 0.0], vec![0.0, 100.0]])?, 1.0)?,
            1e-10,
        ),
        le("itm.perfect", itm_loss(&ItmBatch::new(vec![1], vec![1.0])?)?, 1e-11),
        eq(
            "itm.half",
            itm_loss(&ItmBatch::new(vec![1], vec![0.5])?)?,
            std::f64::consts::LN_2,
        ),
        eq(
            "itm.pair",
            itm_loss(&ItmBatch::new(vec![1, 0], vec![0.9, 0.2])?)?,
            -(0.9f64.ln() + 0.8f64.ln()) / 2.0,
        ),
        eq(
            "mlm.perfect",
            mlm_loss(&MlmBatch::new(3, vec![0.0, 1.0, 0.0], vec![1])?)?,
            0.0,
        ),
        eq("mlm.uniform_4", mlm_loss(&MlmBatch::uniform(4, vec![2])?)?, 4f64.ln()),
        eq(
            "mlm.two_positions",
            mlm_loss(&MlmBatch::new(4, onehot_rows(4, &[(0, 0.5), (3, 0.25)]), vec![0, 3])?)?,
            1.039_720_770_839_917_9,
        ),
        eq("mim.perfect", mean_mim(vec![0.3; 8], vec![0.3; 8], vec![2, 2, 2])?, 0.0),
        eq("mim.half_diff", mean_mim(vec![0.5; 4], vec![0.0; 4], vec![1, 2, 2])?, 0.5),
        eq(
            "mim.two_images",
            mean_mim(
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
                vec![0.0; 8],
                vec![2, 2, 2],
            )?,
            0.5,
        ),
    ];
    let zero = total_loss(0.0, 0.0, 0.0, 0.0, DEFAULT_MIM_WEIGHT)?;
    out.push(eq("total.zero", zero.total, 0.0));
    let ones = total_loss(1.0, 1.0, 1.0, 1.0, DEFAULT_MIM_WEIGHT)?;
    out.push(eq("total.ones", ones.total, 3.1356));
    let mixed = total_loss(0.5, 0.0, 0.0, 2.0, DEFAULT_MIM_WEIGHT)?;
    out.push(eq("total.mixed", mixed.total, 0.7712));
    Ok(out)
}

/// A random, valid input for `kind`.
pub fn random_instance(kind: LossKind, rng: &mut ChaCha8Rng) -> Result<LossInput> {
    Ok(match kind {
        LossKind::Itc => {
            let n = rng.random_range(2..=8);
            let data = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            LossInput::Itc {
                sim: ScoreMatrix::new(n, n, data)?,
                tau: rng.random_range(0.05..1.0),
            }
        }
        LossKind::Itm => {
            let n = rng.random_range(1..=16);
            let labels = (0..n).map(|_| rng.random_range(0..=1u8)).collect();
            let probs = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            LossInput::Itm(ItmBatch::new(labels, probs)?)
        }
        LossKind::Mlm => {
            let positions = rng.random_range(1..=8);
            let vocab = rng.random_range(2..=20);
            let mut predicted = Vec::with_capacity(positions * vocab);
            for _ in 0..positions {
                let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                predicted.extend(logits.iter().map(|l| l.exp() / z));
            }
            let targets = (0..positions).map(|_| rng.random_range(0..vocab)).collect();
            LossInput::Mlm(MlmBatch::new(vocab, predicted, targets)?)
        }
        LossKind::Mim => {
            let shape = vec![rng.random_range(1..=3), rng.random_range(2..=4), rng.random_range(2..=4)];
            let len: usize = shape.iter().product();
            let original: Vec<f64> = (0..len).map(|_| rng.random()).collect();
            let reconstructed = (0..len).map(|_| rng.random()).collect();
            let mut masked: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
            masked[0] = true;
            let reduction = if rng.random_bool(0.5) {
                MimReduction::MaskedMean
            } else {
                MimReduction::ImageSum
            };
            LossInput::Mim {
                reconstructed: ImageTensor::new(shape.clone(), reconstructed)?,
                original: ImageTensor::new(shape, original)?,
                mask: MaskSpec::new(masked),
                reduction,
            }
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSummary {
    pub kind: LossKind,
    pub instances: usize,
    pub worst: f64,
}

impl GradSummary {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOL
    }
}

pub fn kind_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Itc => "itc",
        LossKind::Itm => "itm",
        LossKind::Mlm => "mlm",
        LossKind::Mim => "mim",
    }
}

/// Gradient-checks `instances` random inputs of one kind, each seed stream
/// separate per kind.
pub fn grad_check_random(kind: LossKind, instances: usize, seed: u64) -> Result<GradSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let input = random_instance(kind, &mut rng)?;
        worst = worst.max(finite_diff_grad_check(&input, kind.default_step())?);
    }
    Ok(GradSummary {
        kind,
        instances,
        worst,
    })
}
