//! Train a small model on a small fixture once, then check scoring,
//! checkpointing and latent extraction against it.

use std::sync::OnceLock;

use bvad_core::checkpoint::{load_trained, save_trained};
use bvad_core::latentviz::{collect_latents, reconstruct};
use bvad_core::scoring::{ScoreKind, Scorer, ScoringConfig};
use bvad_core::trainer::{train, TrainedModel};
use bvad_core::{
    generate_synthetic, DatasetSplit, ImageSample, Label, ModelKind, ModelSpec, SynthConfig,
    TrainingConfig,
};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Fixture {
    split: DatasetSplit,
    trained: TrainedModel,
}

fn spec(kind: ModelKind) -> ModelSpec {
    ModelSpec::new(kind).with_filters(vec![4, 4, 8, 8, 8], 2)
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let synth = SynthConfig {
            train_count: 48,
            val_count: 16,
            test_normal: 8,
            test_abnormal: 8,
            ..SynthConfig::default()
        };
        let split = generate_synthetic(&synth, 3);
        let cfg = TrainingConfig {
            epochs: 6,
            batch_size: 8,
            lr_init: 1e-3,
            ..TrainingConfig::default()
        };
        let trained = train(&split, &spec(ModelKind::BetaVae), &cfg).unwrap();
        Fixture { split, trained }
    })
}

fn params_hash(t: &TrainedModel) -> Vec<u8> {
    let mut h = Sha256::new();
    for p in t.model.params() {
        for v in p {
            h.update(v.to_le_bytes());
        }
    }
    for a in &t.gradient_state.averages {
        for v in a {
            h.update(v.to_le_bytes());
        }
    }
    h.update(t.gradient_state.k.to_le_bytes());
    h.finalize().to_vec()
}

fn scorer_cfg(kind: ScoreKind) -> ScoringConfig {
    ScoringConfig {
        score_kind: kind,
        ..ScoringConfig::default()
    }
}

#[test]
fn scoring_leaves_model_and_history_untouched() {
    let f = fixture();
    let before = params_hash(&f.trained);
    for kind in ScoreKind::ALL {
        let cfg = scorer_cfg(kind);
        let scorer = Scorer::new(&f.trained.model, Some(&f.trained.gradient_state), &cfg).unwrap();
        scorer.evaluate(&f.split.validation, &f.split.test).unwrap();
    }
    assert_eq!(before, params_hash(&f.trained));
}

#[test]
fn scores_are_deterministic_and_batch_independent() {
    let f = fixture();
    for kind in ScoreKind::ALL {
        let cfg = scorer_cfg(kind);
        let scorer = Scorer::new(&f.trained.model, Some(&f.trained.gradient_state), &cfg).unwrap();
        let batch = scorer.score(kind, &f.split.test).unwrap();
        assert_eq!(
            batch,
            scorer.score(kind, &f.split.test).unwrap(),
            "{kind} repeat"
        );
        for (i, s) in f.split.test.iter().enumerate() {
            let single = scorer.score(kind, std::slice::from_ref(s)).unwrap()[0];
            let tol = 1e-5 * single.abs().max(1e-3);
            assert!(
                (single - batch[i]).abs() <= tol,
                "{kind} sample {i}: {single} vs {}",
                batch[i]
            );
        }
    }
}

#[test]
fn elbo_score_dominates_recon_score() {
    let f = fixture();
    let cfg = ScoringConfig::default();
    let scorer = Scorer::new(&f.trained.model, Some(&f.trained.gradient_state), &cfg).unwrap();
    let recon = scorer.score(ScoreKind::Recon, &f.split.test).unwrap();
    let elbo = scorer.score(ScoreKind::Elbo, &f.split.test).unwrap();
    assert!(recon.iter().zip(&elbo).all(|(r, e)| e >= r));
}

#[test]
fn noise_scores_above_validation_mean() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise: Vec<ImageSample> = (0..4)
        .map(|i| ImageSample {
            id: format!("noise-{i}"),
            label: Label::Abnormal,
            tensor: Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(-1.0f32..1.0)),
        })
        .collect();
    for kind in ScoreKind::ALL {
        let cfg = scorer_cfg(kind);
        let scorer = Scorer::new(&f.trained.model, Some(&f.trained.gradient_state), &cfg).unwrap();
        let val = scorer.score(kind, &f.split.validation).unwrap();
        let val_mean = val.iter().sum::<f64>() / val.len() as f64;
        for s in scorer.score(kind, &noise).unwrap() {
            assert!(
                s > val_mean,
                "{kind}: noise {s} vs validation mean {val_mean}"
            );
        }
    }
}

#[test]
fn untrained_model_is_rejected() {
    let f = fixture();
    let empty = f.trained.model.empty_gradient_state();
    let cfg = ScoringConfig::default();
    assert!(Scorer::new(&f.trained.model, None, &cfg).is_err());
    assert!(Scorer::new(&f.trained.model, Some(&empty), &cfg).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    save_trained(
        dir.path(),
        &f.trained.model,
        &f.trained.gradient_state,
        3.0,
        &f.trained.fingerprint,
    )
    .unwrap();
    let (model, meta, state) = load_trained(dir.path()).unwrap();
    let state = state.expect("gradient state saved");
    assert_eq!(meta.spec, f.trained.model.spec().clone());
    assert_eq!(state, f.trained.gradient_state);
    for kind in ScoreKind::ALL {
        let cfg = scorer_cfg(kind);
        let a = Scorer::new(&f.trained.model, Some(&f.trained.gradient_state), &cfg).unwrap();
        let b = Scorer::new(&model, Some(&state), &cfg).unwrap();
        assert_eq!(
            a.score(kind, &f.split.test).unwrap(),
            b.score(kind, &f.split.test).unwrap()
        );
    }
}

#[test]
fn latents_and_reconstructions_have_expected_shapes() {
    let f = fixture();
    let latents =
        collect_latents(&f.trained.model, &f.trained.gradient_state, &f.split.test).unwrap();
    assert_eq!(latents.dim(), (f.split.test.len(), 128));
    assert_eq!(
        latents,
        collect_latents(&f.trained.model, &f.trained.gradient_state, &f.split.test).unwrap()
    );
    let recon = reconstruct(&f.trained.model, &f.split.test[..3]).unwrap();
    assert_eq!(recon.len(), 3);
    assert!(recon
        .iter()
        .all(|r| r.dim() == (64, 64, 3) && r.iter().all(|v| v.abs() <= 1.0)));
}

#[test]
fn cae_trains_and_scores_without_kl() {
    let f = fixture();
    let cfg = TrainingConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainingConfig::default()
    };
    let t = train(&f.split, &spec(ModelKind::Cae), &cfg).unwrap();
    assert!(t.log.iter().all(|l| l.kl == 0.0));
    let sc = ScoringConfig::default();
    let scorer = Scorer::new(&t.model, Some(&t.gradient_state), &sc).unwrap();
    let recon = scorer.score(ScoreKind::Recon, &f.split.test).unwrap();
    let elbo = scorer.score(ScoreKind::Elbo, &f.split.test).unwrap();
    assert_eq!(recon, elbo);
}
