//! Retrieval-fusion engine for text-to-image person retrieval.
//!
//! The crate covers the inference-side pipeline around a set of trained
//! encoders whose outputs arrive as embedding or score matrices:
//!
//! * [`matrix`]: cosine similarity, temperature softmax, row-wise top-k.
//! * [`losses`]: contrastive, matching, masked-token and masked-image losses
//!   with analytic gradients and a finite-difference checker.
//! * [`lhp`]: seeded local/global view routing and crop geometry.
//! * [`select`]: guidance-driven top-k candidate selection and reranking.
//! * [`ensemble`]: iterative convex fusion with per-step weight tuning.
//! * [`eval`]: recall at rank cutoffs.
//! * [`synth`]: deterministic synthetic instances.
//! * [`io`]: `.npy`/CSV matrices and JSON manifests.

pub mod ensemble;
pub mod error;
pub mod eval;
pub mod io;
pub mod lhp;
pub mod losses;
pub mod matrix;
pub mod select;
pub mod synth;

pub use ensemble::{iterative_ensemble, sweep_weight, EnsembleConfig, EnsembleTrace, MetricKind, WeightGrid};
pub use error::{Error, Result};
pub use eval::{metrics_report, recall_at_k, GroundTruth, RetrievalMetrics};
pub use matrix::{cosine_similarity, l2_normalize_rows, row_softmax, topk_rows, EmbeddingMatrix, ScoreMatrix, TopKResult};
pub use select::{rerank_selected, select_topk_features, SelectedFeatures};
