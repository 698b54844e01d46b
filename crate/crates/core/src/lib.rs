//! Unsupervised visual anomaly detection with a β-VAE.
//!
//! The crate trains a convolutional β-VAE (and the plain VAE / convolutional
//! autoencoder baselines) on normal-only image crops, scores unseen images
//! with reconstruction, ELBO and gradient-constraint ("GradCon") anomaly
//! scores, calibrates a decision threshold on held-out normals and reports
//! precision / recall / F1. Latent posterior means can be embedded in 2-D with
//! an exact t-SNE for inspection.
//!
//! Everything runs on the CPU with a small hand-written convolution stack in
//! [`nn`]; the network is generic over [`Real`] so that gradient checks can run
//! in double precision while training uses `f32`.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod latentviz;
pub mod model;
pub mod nn;
pub mod objective;
pub mod real;
pub mod scoring;
pub mod trainer;
pub mod tsne;

pub use dataset::{
    augment, generate_synthetic, load_split, preprocess, synthesize_images, write_synthetic,
    AnomalyKind, DatasetSplit, ImageSample, Label, RawImage, SynthConfig, IMAGE_SIZE,
};
pub use error::{Error, Result};
pub use evaluation::{
    aggregate_runs, confusion, precision_recall_f1, ConfusionCounts, Metrics, RunAggregate,
};
pub use model::{EncoderOutput, LatentSample, Mode, Model, ModelKind, ModelSpec};
pub use objective::{GradientState, LossBreakdown};
pub use real::Real;
pub use scoring::{ScoreKind, ScoreRecord, Scorer, ScoringConfig, ThresholdStrategy, Verdict};
pub use trainer::{TrainedModel, TrainingConfig};
