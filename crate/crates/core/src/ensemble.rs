//! Iterative ensemble fusion.
//!
//! Models are folded in one at a time: `S <- w * S + (1 - w) * t`, where the
//! retention weight `w` is picked per step from a fixed grid by maximizing a
//! retrieval metric against ground truth. The procedure is greedy and
//! order-dependent.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{metrics_report, recall_from_topk, GroundTruth, RetrievalMetrics};
use crate::matrix::{topk_rows, ScoreMatrix, TopKResult};

/// Retention weights swept per step by default.
pub const DEFAULT_GRID: [f64; 10] = [0.0, 0.5, 0.8, 0.85, 0.875, 0.9, 0.9125, 0.925, 0.9375, 0.95];

/// Cutoffs reported for the fused matrix.
pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// Strictly increasing retention weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrid(Vec<f64>);

impl WeightGrid {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::param("weight grid is empty"));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::param(format!("weight {w} outside [0, 1]")));
        }
        if weights.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::param(format!(
                "weight grid must be strictly increasing: {weights:?}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn contains_skip(&self) -> bool {
        self.0.last() == Some(&1.0)
    }
}

impl Default for WeightGrid {
    fn default() -> Self {
        Self(DEFAULT_GRID.to_vec())
    }
}

impl FromStr for WeightGrid {
    type Err = Error;

    /// Comma-separated decimals, e.g. `0,0.5,0.9`.
    fn from_str(s: &str) -> Result<Self> {
        let weights = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::param(format!("bad weight {t:?} in grid {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(weights)
    }
}

/// The tuning objective maximized at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    RecallAtK(usize),
}

impl MetricKind {
    pub fn k(&self) -> usize {
        match *self {
            MetricKind::RecallAtK(k) => k,
        }
    }

    fn score(&self, pred: &TopKResult, gt: &GroundTruth) -> f64 {
        match *self {
            MetricKind::RecallAtK(k) => recall_from_topk(pred, gt, k),
        }
    }
}

impl Default for MetricKind {
    fn default() -> Self {
        MetricKind::RecallAtK(1)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::RecallAtK(k) => write!(f, "R@{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepResult {
    pub weight: f64,
    pub value: f64,
}

fn check_pred_k(metric: MetricKind, k_pred: usize, gallery: usize) -> Result<()> {
    let k = metric.k();
    if k == 0 || k > gallery {
        return Err(Error::param(format!("metric cutoff must be in [1, {gallery}], got {k}")));
    }
    if k_pred < k || k_pred > gallery {
        return Err(Error::param(format!(
            "prediction depth must be in [{k}, {gallery}], got {k_pred}"
        )));
    }
    Ok(())
}

fn sweep(
    s_prev: &ScoreMatrix,
    t_model: &ScoreMatrix,
    gt: &GroundTruth,
    weights: &[f64],
    metric: MetricKind,
    k_pred: usize,
) -> Result<SweepResult> {
    let values = weights
        .par_iter()
        .map(|&w| {
            let fused = s_prev.convex_combine(t_model, w)?;
            Ok(metric.score(&topk_rows(&fused, k_pred)?, gt))
        })
        .collect::<Result<Vec<f64>>>()?;
    // Weights are increasing, so keeping the first maximum prefers smaller w.
    let mut best = SweepResult {
        weight: weights[0],
        value: values[0],
    };
    for (&weight, &value) in weights.iter().zip(&values).skip(1) {
        if value > best.value {
            best = SweepResult { weight, value };
        }
    }
    Ok(best)
}

/// Evaluates `metric` on `topk(w * s_prev + (1 - w) * t_model, k_pred)` for
/// every grid weight and returns the best one, ties going to the smallest w.
pub fn sweep_weight(
    s_prev: &ScoreMatrix,
    t_model: &ScoreMatrix,
    gt: &GroundTruth,
    grid: &WeightGrid,
    metric: MetricKind,
    k_pred: usize,
) -> Result<SweepResult> {
    s_prev.ensure_same_shape(t_model, "sweep operands")?;
    gt.check_covers(s_prev)?;
    check_pred_k(metric, k_pred, s_prev.n_cols())?;
    sweep(s_prev, t_model, gt, grid.weights(), metric, k_pred)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub grid: WeightGrid,
    pub metric: MetricKind,
    /// Depth of the inner top-k; defaults to the metric cutoff.
    pub k_pred: Option<usize>,
    /// Min-max normalize every input matrix (and the initial matrix) before
    /// fusion.
    pub normalize: bool,
    /// Starting value of `S`; the zero matrix when absent.
    pub init: Option<ScoreMatrix>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            grid: WeightGrid::default(),
            metric: MetricKind::default(),
            k_pred: None,
            normalize: true,
            init: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleStep {
    /// Position of the model in the input list.
    pub model: usize,
    pub weight: f64,
    /// Tuning metric of the fused matrix after this step.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTrace {
    pub metric: MetricKind,
    pub steps: Vec<EnsembleStep>,
    pub final_metrics: RetrievalMetrics,
}

impl EnsembleTrace {
    /// Key-value report, one step per line, using `names` for model labels
    /// when provided.
    pub fn render(&self, names: Option<&[String]>) -> String {
        let mut out = format!("metric={}\n", self.metric);
        for (i, s) in self.steps.iter().enumerate() {
            let name = names
                .and_then(|n| n.get(s.model))
                .cloned()
                .unwrap_or_else(|| s.model.to_string());
            out.push_str(&format!(
                "step={} model={} weight={} value={:.6}\n",
                i + 1,
                name,
                s.weight,
                s.value
            ));
        }
        for (k, r) in &self.final_metrics.r_at {
            out.push_str(&format!("final.R@{k}={r:.4}\n"));
        }
        out
    }
}

impl fmt::Display for EnsembleTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(None))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub fused: ScoreMatrix,
    pub trace: EnsembleTrace,
}

fn prepared(m: &ScoreMatrix, normalize: bool) -> ScoreMatrix {
    if normalize {
        m.min_max_normalized()
    } else {
        m.clone()
    }
}

/// Folds `models` into one score matrix, in order.
///
/// While `S` is still the all-zero starting matrix, `w = 1` would discard the
/// model and rank every row by index alone; it is only considered at that
/// step if it is the sole grid value.
pub fn iterative_ensemble(
    models: &[ScoreMatrix],
    gt: &GroundTruth,
    config: &EnsembleConfig,
) -> Result<EnsembleOutput> {
    let Some(first) = models.first() else {
        return Err(Error::param("no models to ensemble"));
    };
    for (i, m) in models.iter().enumerate().skip(1) {
        first.ensure_same_shape(m, &format!("model {i} vs model 0"))?;
    }
    gt.check_covers(first)?;
    let k_pred = config.k_pred.unwrap_or(config.metric.k());
    check_pred_k(config.metric, k_pred, first.n_cols())?;

    let (rows, cols) = first.shape();
    let (mut fused, mut at_zero) = match &config.init {
        Some(init) => {
            first.ensure_same_shape(init, "initial matrix")?;
            (prepared(init, config.normalize), false)
        }
        None => (ScoreMatrix::zeros(rows, cols)?, true),
    };

    let all = config.grid.weights();
    let informative: Vec<f64> = all.iter().copied().filter(|&w| w < 1.0).collect();
    let mut steps = Vec::with_capacity(models.len());
    for (i, model) in models.iter().enumerate() {
        let t = prepared(model, config.normalize);
        let weights = if at_zero && !informative.is_empty() {
            &informative[..]
        } else {
            all
        };
        let best = sweep(&fused, &t, gt, weights, config.metric, k_pred)?;
        fused = fused.convex_combine(&t, best.weight)?;
        at_zero &= best.weight == 1.0;
        steps.push(EnsembleStep {
            model: i,
            weight: best.weight,
            value: best.value,
        });
    }

    let ks: Vec<usize> = REPORT_KS.iter().map(|&k| k.min(cols)).collect();
    let mut ks_unique = ks.clone();
    ks_unique.dedup();
    let final_metrics = metrics_report(&fused, gt, &ks_unique)?;
    Ok(EnsembleOutput {
        fused,
        trace: EnsembleTrace {
            metric: config.metric,
            steps,
            final_metrics,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::recall_at_k;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ScoreMatrix {
        ScoreMatrix::new(r, c, (0..r * c).map(|_| rng.random()).collect()).unwrap()
    }

    /// First model is right on queries 0 and 1, second on 2 and 3; both by
    /// a 0.6 margin, and each wrong pick only wins by 0.1.
    pub(crate) fn complementary() -> (ScoreMatrix, ScoreMatrix) {
        let a = ScoreMatrix::from_rows(&[
            vec![1.0, 0.4, 0.0, 0.0],
            vec![0.4, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.4, 0.5],
            vec![0.0, 0.0, 0.5, 0.4],
        ])
        .unwrap();
        let b = ScoreMatrix::from_rows(&[
            vec![0.4, 0.5, 0.0, 0.0],
            vec![0.5, 0.4, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.4],
            vec![0.0, 0.0, 0.4, 1.0],
        ])
        .unwrap();
        (a, b)
    }

    #[test]
    fn grid_validation_and_parsing() {
        assert!(WeightGrid::new(vec![]).is_err());
        assert!(WeightGrid::new(vec![0.5, 0.5]).is_err());
        assert!(WeightGrid::new(vec![0.9, 0.5]).is_err());
        assert!(WeightGrid::new(vec![-0.1]).is_err());
        assert!(WeightGrid::new(vec![1.1]).is_err());
        let g: WeightGrid = "0, 0.5,1".parse().unwrap();
        assert_eq!(g.weights(), &[0.0, 0.5, 1.0]);
        assert!(g.contains_skip());
        assert!("0,x".parse::<WeightGrid>().is_err());
        assert_eq!(WeightGrid::default().weights().len(), 10);
    }

    #[test]
    fn zero_previous_matrix_picks_smallest_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random(&mut rng, 6, 6);
        let gt = GroundTruth::identity(6);
        let zero = ScoreMatrix::zeros(6, 6).unwrap();
        let best = sweep_weight(&zero, &t, &gt, &"0.2,0.5,0.9".parse().unwrap(), MetricKind::default(), 1).unwrap();
        assert_eq!(best.weight, 0.2);
        assert_eq!(best.value, recall_at_k(&t, &gt, 1).unwrap());
    }

    #[test]
    fn singleton_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random(&mut rng, 5, 5);
        let t = random(&mut rng, 5, 5);
        let gt = GroundTruth::identity(5);
        let best = sweep_weight(&s, &t, &gt, &WeightGrid::new(vec![0.0]).unwrap(), MetricKind::default(), 1).unwrap();
        assert_eq!(best.weight, 0.0);
        assert_eq!(best.value, recall_at_k(&t, &gt, 1).unwrap());
    }

    #[test]
    fn complementary_models_fuse_to_perfect() {
        let (a, b) = complementary();
        let gt = GroundTruth::identity(4);
        assert_eq!(recall_at_k(&a, &gt, 1).unwrap(), 0.5);
        assert_eq!(recall_at_k(&b, &gt, 1).unwrap(), 0.5);
        let best = sweep_weight(&a, &b, &gt, &WeightGrid::default(), MetricKind::default(), 1).unwrap();
        assert_eq!(best.value, 1.0);
        assert!(best.weight > 0.0 && best.weight < 1.0);

        let out = iterative_ensemble(&[a, b], &gt, &EnsembleConfig::default()).unwrap();
        assert_eq!(out.trace.final_metrics.recall(1), Some(1.0));
        assert_eq!(out.trace.steps[0].weight, 0.0);
    }

    #[test]
    fn shape_and_parameter_errors() {
        let gt = GroundTruth::identity(3);
        let a = ScoreMatrix::zeros(3, 3).unwrap();
        let b = ScoreMatrix::zeros(3, 4).unwrap();
        let grid = WeightGrid::default();
        assert!(matches!(sweep_weight(&a, &b, &gt, &grid, MetricKind::default(), 1), Err(Error::Shape(_))));
        assert!(matches!(
            sweep_weight(&a, &a, &gt, &grid, MetricKind::RecallAtK(2), 1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(iterative_ensemble(&[], &gt, &EnsembleConfig::default()), Err(Error::Parameter(_))));
        assert!(matches!(
            iterative_ensemble(&[a.clone(), b], &gt, &EnsembleConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn single_model_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random(&mut rng, 7, 7);
        let gt = GroundTruth::identity(7);
        let cfg = EnsembleConfig {
            grid: WeightGrid::new(vec![0.0]).unwrap(),
            normalize: false,
            ..EnsembleConfig::default()
        };
        let out = iterative_ensemble(std::slice::from_ref(&m), &gt, &cfg).unwrap();
        assert_eq!(out.fused, m);
        assert_eq!(
            out.trace.final_metrics,
            metrics_report(&m, &gt, &[1, 5, 7]).unwrap()
        );
    }

    #[test]
    fn identical_models_keep_the_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(&mut rng, 8, 8);
        let gt = GroundTruth::identity(8);
        let out = iterative_ensemble(&[m.clone(), m.clone()], &gt, &EnsembleConfig::default()).unwrap();
        let fused = topk_rows(&out.fused, 8).unwrap();
        let single = topk_rows(&m, 8).unwrap();
        assert!(fused.index_rows().eq(single.index_rows()));
    }

    #[test]
    fn fusion_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let models: Vec<ScoreMatrix> = (0..3).map(|_| random(&mut rng, 6, 6)).collect();
        let gt = GroundTruth::identity(6);
        let cfg = EnsembleConfig {
            normalize: false,
            grid: "0,0.3,0.6,0.9,1".parse().unwrap(),
            ..EnsembleConfig::default()
        };
        let out = iterative_ensemble(&models, &gt, &cfg).unwrap();
        let mut s = ScoreMatrix::zeros(6, 6).unwrap();
        for (step, t) in out.trace.steps.iter().zip(&models) {
            let w = step.weight;
            let next = s.convex_combine(t, w).unwrap();
            for (n, (p, x)) in next.as_slice().iter().zip(s.as_slice().iter().zip(t.as_slice())) {
                assert!((n - (w * p + (1.0 - w) * x)).abs() < 1e-12);
            }
            s = next;
        }
        assert_eq!(s, out.fused);
    }

    #[test]
    fn init_matrix_is_used() {
        let (a, b) = complementary();
        let gt = GroundTruth::identity(4);
        let cfg = EnsembleConfig {
            init: Some(a.clone()),
            ..EnsembleConfig::default()
        };
        let out = iterative_ensemble(&[b], &gt, &cfg).unwrap();
        assert_eq!(out.trace.steps[0].value, 1.0);
    }

    #[test]
    fn trace_report_format() {
        let (a, b) = complementary();
        let gt = GroundTruth::identity(4);
        let out = iterative_ensemble(&[a, b], &gt, &EnsembleConfig::default()).unwrap();
        let names = vec!["guide".to_string(), "matcher".to_string()];
        let text = out.trace.render(Some(&names));
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "metric=R@1");
        assert_eq!(lines[1], "step=1 model=guide weight=0 value=0.500000");
        assert!(lines[2].starts_with("step=2 model=matcher weight=0.5 value=1.000000"));
        assert_eq!(lines[3], "final.R@1=1.0000");
        assert_eq!(lines[4], "final.R@4=1.0000");
    }
}
