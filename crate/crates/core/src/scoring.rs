//! Per-sample anomaly scores, threshold calibration and the decision rule.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::model::{Gradients, Mode, Model};
use crate::objective::{gradient_loss, GradientState};
use crate::trainer::{group_grads, per_sample_kl, per_sample_recon, recon_grad, samples_to_tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Recon,
    Elbo,
    Gradcon,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 3] = [ScoreKind::Recon, ScoreKind::Elbo, ScoreKind::Gradcon];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Recon => "recon",
            ScoreKind::Elbo => "elbo",
            ScoreKind::Gradcon => "gradcon",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recon" => Ok(ScoreKind::Recon),
            "elbo" => Ok(ScoreKind::Elbo),
            "gradcon" => Ok(ScoreKind::Gradcon),
            other => Err(Error::Config(format!("unknown score kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdStrategy {
    /// The `p`-th percentile (linear interpolation) of validation scores.
    Percentile { p: f64 },
    /// `mean + k · std` with the sample standard deviation.
    MeanPlusKStd { k: f64 },
}

impl Default for ThresholdStrategy {
    fn default() -> Self {
        ThresholdStrategy::Percentile { p: 95.0 }
    }
}

impl fmt::Display for ThresholdStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdStrategy::Percentile { p } => write!(f, "percentile({p})"),
            ThresholdStrategy::MeanPlusKStd { k } => write!(f, "mean_plus_k_std({k})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub score_kind: ScoreKind,
    /// Weight of the gradient term; only read for [`ScoreKind::Gradcon`].
    pub gamma: f64,
    pub threshold: ThresholdStrategy,
    /// KL weight used by the ELBO score, independent of the training β.
    pub beta_score: f64,
    /// Samples per forward pass.
    pub batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            score_kind: ScoreKind::Gradcon,
            gamma: 1.0,
            threshold: ThresholdStrategy::default(),
            beta_score: 1.0,
            batch_size: 32,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "scoring.gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.beta_score >= 0.0 && self.beta_score.is_finite()) {
            return Err(Error::Config("scoring.beta_score must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("scoring.batch_size must be >= 1".into()));
        }
        match self.threshold {
            ThresholdStrategy::Percentile { p } if !(0.0..=100.0).contains(&p) => Err(
                Error::Config(format!("percentile must lie in [0, 100], got {p}")),
            ),
            ThresholdStrategy::MeanPlusKStd { k } if !k.is_finite() => {
                Err(Error::Config("mean_plus_k_std needs a finite k".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Anomaly,
}

impl Verdict {
    pub fn is_anomaly(self) -> bool {
        self == Verdict::Anomaly
    }
}

/// `Anomaly` iff `score > threshold`; ties are normal.
pub fn decide(score: f64, threshold: f64) -> Verdict {
    if score > threshold {
        Verdict::Anomaly
    } else {
        Verdict::Normal
    }
}

pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config(
            "cannot take a percentile of no scores".into(),
        ));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!(
            "percentile must lie in [0, 100], got {p}"
        )));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn calibrate_threshold(val_scores: &[f64], strategy: ThresholdStrategy) -> Result<f64> {
    if val_scores.len() < 2 {
        return Err(Error::Config(format!(
            "threshold calibration needs at least 2 validation scores, got {}",
            val_scores.len()
        )));
    }
    if val_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite validation score".into()));
    }
    match strategy {
        ThresholdStrategy::Percentile { p } => percentile(val_scores, p),
        ThresholdStrategy::MeanPlusKStd { k } => {
            let n = val_scores.len() as f64;
            let mean = val_scores.iter().sum::<f64>() / n;
            let var = val_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(mean + k * var.sqrt())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub kind: ScoreKind,
    pub score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub ground_truth: Option<Label>,
}

/// Write records sorted by id.
pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut sorted: Vec<&ScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id).then(a.kind.cmp(&b.kind)));
    let mut w = csv::Writer::from_path(path)?;
    for r in sorted {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Scores samples against a trained model. Never mutates the model or the
/// gradient history.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a> {
    model: &'a Model<f32>,
    state: &'a GradientState,
    cfg: &'a ScoringConfig,
}

impl<'a> Scorer<'a> {
    /// The gradient history doubles as proof of training: a state with no
    /// recorded iterations is rejected as an untrained model.
    pub fn new(
        model: &'a Model<f32>,
        state: Option<&'a GradientState>,
        cfg: &'a ScoringConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let state = state.ok_or_else(|| {
            Error::Usage("scoring requires the gradient history saved with a trained model".into())
        })?;
        if state.k == 0 {
            return Err(Error::Usage(
                "model has no training history; train it before scoring".into(),
            ));
        }
        let sizes = model.empty_gradient_state().layer_sizes();
        if sizes != state.layer_sizes() {
            return Err(Error::Usage(
                "gradient history does not match the model's decoder layout".into(),
            ));
        }
        Ok(Self { model, state, cfg })
    }

    pub fn config(&self) -> &ScoringConfig {
        self.cfg
    }

    /// Per-sample reconstruction MSE with `ε = 0`.
    pub fn score_recon(&self, samples: &[ImageSample]) -> Result<Vec<f64>> {
        self.chunked(samples, |model, x| {
            let enc = model.encode_pass(x, Mode::Eval)?;
            let dec = model.decode_pass(&enc.mu, Mode::Eval);
            Ok(per_sample_recon(&dec.output, x))
        })
    }

    /// Reconstruction MSE plus `beta_score` times the per-sample KL.
    pub fn score_elbo(&self, samples: &[ImageSample]) -> Result<Vec<f64>> {
        let beta = self.cfg.beta_score;
        self.chunked(samples, |model, x| {
            let enc = model.encode_pass(x, Mode::Eval)?;
            let dec = model.decode_pass(&enc.mu, Mode::Eval);
            let recon = per_sample_recon(&dec.output, x);
            Ok(match &enc.log_var {
                Some(lv) => recon
                    .iter()
                    .zip(per_sample_kl(&enc.mu, lv)?)
                    .map(|(r, k)| r + beta * k)
                    .collect(),
                None => recon,
            })
        })
    }

    /// `recon + γ · L_grad`, where `L_grad` compares this sample's decoder
    /// gradients with the training average.
    pub fn score_gradcon(&self, samples: &[ImageSample]) -> Result<Vec<f64>> {
        let gamma = self.cfg.gamma;
        let state = self.state;
        self.chunked(samples, |model, x| {
            let enc = model.encode_pass(x, Mode::Eval)?;
            // The reconstruction term comes from the same batched pass as
            // `score_recon`, so γ = 0 reproduces it bit for bit.
            let mut out = per_sample_recon(&model.decode_pass(&enc.mu, Mode::Eval).output, x);
            if gamma == 0.0 {
                return Ok(out);
            }
            for (i, score) in out.iter_mut().enumerate() {
                let xi = x.select_batch(i, 1);
                let dec = model.decode_pass(&enc.mu.select_batch(i, 1), Mode::Eval);
                let (dx, _) = recon_grad(&dec.output, &xi);
                let mut grads = Gradients::zeros_like(model);
                model.backward_decoder(&dec, dx, &mut grads, false);
                *score += gamma * gradient_loss(&group_grads(model, &grads), state)?;
            }
            Ok(out)
        })
    }

    pub fn score(&self, kind: ScoreKind, samples: &[ImageSample]) -> Result<Vec<f64>> {
        match kind {
            ScoreKind::Recon => self.score_recon(samples),
            ScoreKind::Elbo => self.score_elbo(samples),
            ScoreKind::Gradcon => self.score_gradcon(samples),
        }
    }

    /// Calibrate on `validation` and score `test` with the configured kind.
    pub fn evaluate(
        &self,
        validation: &[ImageSample],
        test: &[ImageSample],
    ) -> Result<(f64, Vec<ScoreRecord>)> {
        let kind = self.cfg.score_kind;
        let threshold = calibrate_threshold(&self.score(kind, validation)?, self.cfg.threshold)?;
        let scores = self.score(kind, test)?;
        Ok((threshold, records(kind, test, &scores, threshold)))
    }

    fn chunked(
        &self,
        samples: &[ImageSample],
        f: impl Fn(&Model<f32>, &crate::nn::Tensor<f32>) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.cfg.batch_size) {
            out.extend(f(self.model, &samples_to_tensor(chunk))?);
        }
        if out.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite anomaly score".into()));
        }
        Ok(out)
    }
}

/// Attach verdicts and ground truth to raw scores.
pub fn records(
    kind: ScoreKind,
    samples: &[ImageSample],
    scores: &[f64],
    threshold: f64,
) -> Vec<ScoreRecord> {
    let mut out: Vec<ScoreRecord> = samples
        .iter()
        .zip(scores)
        .map(|(s, &score)| ScoreRecord {
            id: s.id.clone(),
            kind,
            score,
            threshold,
            verdict: decide(score, threshold),
            ground_truth: (s.label != Label::Unknown).then_some(s.label),
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}
