//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line per criterion; exits non-zero if any fails.
//!
//! Criterion numbers can be passed as arguments to run a subset, e.g.
//! `cargo test -p bvad-cli --test acceptance -- 1 3 7`.

use std::path::Path;
use std::time::Instant;

use bvad_cli::commands::{cmd_eval, cmd_score, cmd_sweep_beta, cmd_train};
use bvad_cli::ExperimentConfig;
use bvad_core::dataset::SynthConfig;
use bvad_core::latentviz::{scale_unit, tsne_embed};
use bvad_core::model::{Model, ModelKind, ModelSpec};
use bvad_core::nn::{Conv2d, Layer, Sequential, Tensor};
use bvad_core::objective::{
    gradient_loss, kl_divergence, kl_divergence_grad, recon_loss, recon_loss_grad, GradientState,
};
use bvad_core::scoring::{ScoreKind, Scorer, ScoringConfig};
use bvad_core::trainer::{compute_step, train};
use bvad_core::tsne::{tsne, TsneConfig};
use bvad_core::{
    confusion, generate_synthetic, precision_recall_f1, DatasetSplit, Label, TrainingConfig,
};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

const MC_DRAWS: usize = 1_000_000;
const MC_PAIRS: usize = 20;
const MC_TOL: f64 = 1e-3;

/// Monte-Carlo estimate of `KL(N(μ, σ²) ‖ N(0, 1))` as the mean of
/// `log q(z) − log p(z)` over `z ~ q`, using stratified uniform draws pushed
/// through the normal quantile function.
fn kl_monte_carlo(mu: f64, log_var: f64, rng: &mut ChaCha8Rng) -> f64 {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let sigma = (0.5 * log_var).exp();
    let n = MC_DRAWS as f64;
    let mut acc = 0.0;
    for i in 0..MC_DRAWS {
        let u = (i as f64 + rng.random::<f64>()) / n;
        let eps = std_normal.inverse_cdf(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
        let z = mu + sigma * eps;
        let log_q = -0.5 * log_var - 0.5 * eps * eps;
        let log_p = -0.5 * z * z;
        acc += log_q - log_p;
    }
    acc / n
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..MC_PAIRS {
        let mu: f64 = rng.random_range(-2.0..2.0);
        let lv: f64 = rng.random_range(-2.0..2.0);
        let closed = kl_divergence(
            ArrayView2::from_shape((1, 1), &[mu]).unwrap(),
            ArrayView2::from_shape((1, 1), &[lv]).unwrap(),
        )
        .map_err(fail)?;
        let mc = kl_monte_carlo(mu, lv, &mut rng);
        worst = worst.max((closed - mc).abs());
    }
    let zeros = Array2::<f64>::zeros((4, 640));
    let kl0 = kl_divergence(zeros.view(), zeros.view()).map_err(fail)?;

    // Values chosen so every operation is exact in binary floating point.
    let x = [0.25f64, -0.5, 1.0, 0.0, -1.0, 0.75, 0.5, -0.25];
    let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
    let mut one_off = x;
    one_off[3] += 1.0;
    let v = |s: &[f64]| ArrayView1::from(s).to_owned();
    let r_self = recon_loss(v(&x).view(), v(&x).view()).map_err(fail)?;
    let r_shift = recon_loss(v(&shifted).view(), v(&x).view()).map_err(fail)?;
    let r_swap = recon_loss(v(&x).view(), v(&shifted).view()).map_err(fail)?;
    let r_one = recon_loss(v(&one_off).view(), v(&x).view()).map_err(fail)?;
    let identities = r_self == 0.0 && r_shift == 0.25 && r_swap == r_shift && r_one == 1.0 / 8.0;

    check(
        worst <= MC_TOL && kl0 == 0.0 && identities,
        format!(
            "max |closed − MC| = {worst:.2e} over {MC_PAIRS} pairs (tol {MC_TOL:e}); KL(0,1) = {kl0}; \
             recon identities exact: {identities}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_MIN_AGREEMENT: f64 = 0.99;
/// Gradients smaller than this in both estimates count as agreeing zeros.
const FD_ZERO: f64 = 1e-9;

fn micro_net(out_channels: usize, seed: u64) -> Sequential<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sequential::new(vec![
        Layer::Conv(Conv2d::new(3, 4, &mut rng)),
        Layer::Tanh,
        Layer::Conv(Conv2d::new(4, out_channels, &mut rng)),
    ])
}

/// Loss and gradient with respect to the network output.
type LossFn = dyn Fn(&Tensor<f64>) -> (f64, Vec<f64>);

fn fd_agreement(mut net: Sequential<f64>, x: &Tensor<f64>, loss: &LossFn) -> (usize, usize, f64) {
    let (out, tape) = net.forward(x, true);
    let (_, dy) = loss(&out);
    let mut grads = vec![Vec::new(); net.tensor_count()];
    net.backward(&tape, Tensor::from_vec(out.shape(), dy), &mut grads, false);
    let eval = |n: &Sequential<f64>| loss(&n.forward(x, true).0).0;
    let (mut good, mut total, mut worst) = (0, 0, 0.0f64);
    for t in 0..grads.len() {
        for i in 0..grads[t].len() {
            let orig = net.params()[t][i];
            net.params_mut()[t][i] = orig + FD_STEP;
            let plus = eval(&net);
            net.params_mut()[t][i] = orig - FD_STEP;
            let minus = eval(&net);
            net.params_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads[t][i];
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < FD_ZERO {
                0.0
            } else {
                (analytic - numeric).abs() / scale
            };
            worst = worst.max(rel);
            total += 1;
            good += usize::from(rel < FD_REL_TOL);
        }
    }
    (good, total, worst)
}

fn criterion_2() -> Outcome {
    const N: usize = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [3, N, 4, 4];
    let x = Tensor::from_vec(
        shape,
        (0..96).map(|_| rng.random_range(-1.0..1.0)).collect(),
    );

    let target = x.clone();
    let recon = move |out: &Tensor<f64>| {
        let l = recon_loss(
            ArrayView1::from(out.data()),
            ArrayView1::from(target.data()),
        )
        .unwrap();
        (l, recon_loss_grad(out.data(), target.data()).unwrap())
    };
    // Channel 0 holds μ and channel 1 holds log σ²; each is already (N, 16) row-major.
    let kl = |out: &Tensor<f64>| {
        let half = out.data().len() / 2;
        let (mu, lv) = out.data().split_at(half);
        let m = ArrayView2::from_shape((N, half / N), mu).unwrap();
        let l = ArrayView2::from_shape((N, half / N), lv).unwrap();
        let (dm, dl) = kl_divergence_grad(mu, lv, N).unwrap();
        (kl_divergence(m, l).unwrap(), [dm, dl].concat())
    };
    let (g1, t1, w1) = fd_agreement(micro_net(3, 20), &x, &recon);
    let (g2, t2, w2) = fd_agreement(micro_net(2, 21), &x, &kl);
    let (f1, f2) = (g1 as f64 / t1 as f64, g2 as f64 / t2 as f64);
    check(
        f1 >= FD_MIN_AGREEMENT && f2 >= FD_MIN_AGREEMENT,
        format!(
            "recon: {g1}/{t1} parameters within rel {FD_REL_TOL:e} (worst {w1:.1e}); \
             kl: {g2}/{t2} (worst {w2:.1e}); step {FD_STEP:e}, need {FD_MIN_AGREEMENT}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

const COSINE_STATES: usize = 1000;
const AVERAGE_STEPS: usize = 100;
const AVERAGE_TOL: f64 = 1e-10;
/// Agreement with a direct evaluation of `−mean cos`.
const COSINE_ORACLE_TOL: f64 = 1e-12;

fn random_vec(len: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            scale * v
        })
        .collect()
}

fn state_for(sizes: &[usize]) -> GradientState {
    GradientState::new(
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| (format!("layer{i}"), n))
            .collect(),
    )
}

fn naive_loss(avg: &[Vec<f64>], cur: &[Vec<f64>]) -> f64 {
    let cos: Vec<f64> = avg
        .iter()
        .zip(cur)
        .map(|(a, g)| {
            let d: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ng: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || ng == 0.0 {
                0.0
            } else {
                d / (na * ng)
            }
        })
        .collect();
    -cos.iter().sum::<f64>() / cos.len() as f64
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut lo, mut hi, mut oracle_err) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..COSINE_STATES {
        let layers = rng.random_range(1..=6);
        let sizes: Vec<usize> = (0..layers).map(|_| rng.random_range(1..40)).collect();
        let mut state = state_for(&sizes);
        for _ in 0..rng.random_range(1..5) {
            let scale = 10f64.powf(rng.random_range(-4.0..2.0));
            let g: Vec<Vec<f64>> = sizes
                .iter()
                .map(|&n| random_vec(n, scale, &mut rng))
                .collect();
            state.update(&g).map_err(fail)?;
        }
        let cur: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&n| random_vec(n, 1.0, &mut rng))
            .collect();
        let l = gradient_loss(&cur, &state).map_err(fail)?;
        lo = lo.min(l);
        hi = hi.max(l);
        oracle_err = oracle_err.max((l - naive_loss(&state.averages, &cur)).abs());
    }

    let sizes = [7, 13, 1, 40, 5, 9];
    let g: Vec<Vec<f64>> = sizes
        .iter()
        .map(|&n| random_vec(n, 0.3, &mut rng))
        .collect();
    let mut state = state_for(&sizes);
    state.update(&g).map_err(fail)?;
    let identical = gradient_loss(&g, &state).map_err(fail)?;
    let negated: Vec<Vec<f64>> = g.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
    let anti = gradient_loss(&negated, &state).map_err(fail)?;
    // Disjoint supports: even entries in the history, odd entries now.
    let split = |v: &Vec<f64>, parity: usize| -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(i, &x)| if i % 2 == parity { x } else { 0.0 })
            .collect()
    };
    let sizes2 = [8, 6, 4, 2, 10, 12];
    let base: Vec<Vec<f64>> = sizes2
        .iter()
        .map(|&n| random_vec(n, 1.0, &mut rng))
        .collect();
    let mut orth_state = state_for(&sizes2);
    orth_state
        .update(&base.iter().map(|v| split(v, 0)).collect::<Vec<_>>())
        .map_err(fail)?;
    let ortho = gradient_loss(
        &base.iter().map(|v| split(v, 1)).collect::<Vec<_>>(),
        &orth_state,
    )
    .map_err(fail)?;

    let mut worst_avg = 0.0f64;
    for _ in 0..10 {
        let sizes = [16, 3, 25];
        let seq: Vec<Vec<Vec<f64>>> = (0..AVERAGE_STEPS)
            .map(|_| {
                sizes
                    .iter()
                    .map(|&n| random_vec(n, 5.0, &mut rng))
                    .collect()
            })
            .collect();
        let mut st = state_for(&sizes);
        for g in &seq {
            st.update(g).map_err(fail)?;
        }
        for (layer, avg) in st.averages.iter().enumerate() {
            for (i, a) in avg.iter().enumerate() {
                let direct = seq.iter().map(|g| g[layer][i]).sum::<f64>() / AVERAGE_STEPS as f64;
                worst_avg = worst_avg.max((a - direct).abs());
            }
        }
        if st.k != AVERAGE_STEPS as u64 {
            return Err(format!("k = {} after {AVERAGE_STEPS} updates", st.k));
        }
    }

    check(
        lo >= -1.0
            && hi <= 1.0
            && oracle_err <= COSINE_ORACLE_TOL
            && identical == -1.0
            && anti == 1.0
            && ortho == 0.0
            && worst_avg <= AVERAGE_TOL,
        format!(
            "L_grad over {COSINE_STATES} states in [{lo:.4}, {hi:.4}], oracle err {oracle_err:.1e}; \
             identical {identical}, anti-aligned {anti}, orthogonal {}; \
             running mean err {worst_avg:.1e} over {AVERAGE_STEPS} steps (tol {AVERAGE_TOL:e})",
            ortho + 0.0
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec::new(kind).with_filters(vec![2, 2, 3, 3, 3], 1)
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        train_count: 20,
        val_count: 8,
        test_normal: 6,
        test_abnormal: 6,
        ..SynthConfig::default()
    }
}

fn tiny_training(seed: u64) -> TrainingConfig {
    TrainingConfig {
        epochs: 2,
        batch_size: 8,
        seed,
        ..TrainingConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let split = generate_synthetic(&tiny_synth(), 4);

    // β = 1: β-VAE and VAE share weights, loss and gradients bit for bit,
    // per step and over a whole training run.
    let vae = Model::<f32>::new(&tiny_spec(ModelKind::Vae), 9).map_err(fail)?;
    let bvae = Model::<f32>::new(&tiny_spec(ModelKind::BetaVae), 9).map_err(fail)?;
    let x = bvad_core::trainer::samples_to_tensor::<f32>(&split.train[..4]);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let eps: Tensor<f32> = Tensor::from_vec(
        [1, 4, 8, 8],
        (0..256).map(|_| StandardNormal.sample(&mut rng)).collect(),
    );
    let state = vae.empty_gradient_state();
    let a = compute_step(&vae, &x, Some(&eps), 1.0, 0.03, &state, 1e-3).map_err(fail)?;
    let b = compute_step(&bvae, &x, Some(&eps), 1.0, 0.03, &state, 1e-3).map_err(fail)?;
    let step_bitwise = a.loss.elbo_loss.to_bits() == b.loss.elbo_loss.to_bits()
        && a.loss.total_j.to_bits() == b.loss.total_j.to_bits()
        && a.grads == b.grads;
    let cfg1 = TrainingConfig {
        beta: 1.0,
        ..tiny_training(5)
    };
    let tv = train(&split, &tiny_spec(ModelKind::Vae), &cfg1).map_err(fail)?;
    let tb = train(&split, &tiny_spec(ModelKind::BetaVae), &cfg1).map_err(fail)?;
    let run_bitwise = tv.model.params() == tb.model.params()
        && tv
            .log
            .iter()
            .zip(&tb.log)
            .all(|(p, q)| p.total_j.to_bits() == q.total_j.to_bits());

    // γ = 0: GradCon collapses to the reconstruction score exactly.
    let sc = ScoringConfig {
        gamma: 0.0,
        ..ScoringConfig::default()
    };
    let scorer = Scorer::new(&tb.model, Some(&tb.gradient_state), &sc).map_err(fail)?;
    let recon = scorer.score(ScoreKind::Recon, &split.test).map_err(fail)?;
    let gradcon = scorer
        .score(ScoreKind::Gradcon, &split.test)
        .map_err(fail)?;
    let gamma_zero = recon
        .iter()
        .zip(&gradcon)
        .all(|(r, g)| r.to_bits() == g.to_bits());

    // α = 0: the history is still accumulated once per iteration, and the
    // constraint path never runs (its step size cannot matter).
    let cfg0 = TrainingConfig {
        alpha: 0.0,
        ..tiny_training(6)
    };
    let t0 = train(&split, &tiny_spec(ModelKind::BetaVae), &cfg0).map_err(fail)?;
    let t0b = train(
        &split,
        &tiny_spec(ModelKind::BetaVae),
        &TrainingConfig {
            hvp_rel_step: 0.5,
            ..cfg0.clone()
        },
    )
    .map_err(fail)?;
    let batches = split.train.len().div_ceil(cfg0.batch_size);
    let expected = (cfg0.epochs * batches) as u64;
    let k_ok = t0.gradient_state.k == expected && t0.iterations == expected;
    let untouched =
        t0.model.params() == t0b.model.params() && t0.gradient_state == t0b.gradient_state;

    check(
        step_bitwise && run_bitwise && gamma_zero && k_ok && untouched,
        format!(
            "β=1 step bitwise {step_bitwise}, training run bitwise {run_bitwise}; γ=0 GradCon == Recon {gamma_zero}; \
             α=0: k = {} for {} iterations (expected {expected}), constraint path inert {untouched}",
            t0.gradient_state.k, t0.iterations
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

const E2E_SEEDS: u64 = 5;
const E2E_EPOCHS: usize = 30;
const E2E_BETA: f64 = 3.0;
const E2E_MIN_F1: f64 = 0.85;
const E2E_SYNTH_SEED: u64 = 7;
/// Optimizer settings for the 200-image fixture. With the default batch of 64
/// an epoch is only 4 steps and lr 1e-2 overshoots into a KL blow-up it does
/// not recover from in 30 epochs (see README).
const E2E_LR: f64 = 1e-3;
const E2E_BATCH: usize = 16;

fn class_mean(scores: &[f64], split: &DatasetSplit, label: Label) -> f64 {
    let v: Vec<f64> = scores
        .iter()
        .zip(&split.test)
        .filter(|(_, s)| s.label == label)
        .map(|(x, _)| *x)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5() -> Outcome {
    let split = generate_synthetic(&SynthConfig::default(), E2E_SYNTH_SEED);
    let spec = ModelSpec::new(ModelKind::BetaVae);
    let mut sums = [(0.0, 0.0); 3];
    let mut f1s = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..E2E_SEEDS {
        let t = Instant::now();
        let cfg = TrainingConfig {
            beta: E2E_BETA,
            epochs: E2E_EPOCHS,
            lr_init: E2E_LR,
            batch_size: E2E_BATCH,
            seed,
            ..TrainingConfig::default()
        };
        let trained = train(&split, &spec, &cfg).map_err(fail)?;
        let mut seed_line = format!("seed {seed}:");
        for (i, kind) in ScoreKind::ALL.into_iter().enumerate() {
            let sc = ScoringConfig {
                score_kind: kind,
                ..ScoringConfig::default()
            };
            let scorer =
                Scorer::new(&trained.model, Some(&trained.gradient_state), &sc).map_err(fail)?;
            let (_, records) = scorer
                .evaluate(&split.validation, &split.test)
                .map_err(fail)?;
            let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
            let (n, a) = (
                class_mean(&scores, &split, Label::Normal),
                class_mean(&scores, &split, Label::Abnormal),
            );
            sums[i].0 += n;
            sums[i].1 += a;
            let m = precision_recall_f1(&confusion(&records).map_err(fail)?);
            if kind == ScoreKind::Gradcon {
                f1s.push(m.f1);
            }
            seed_line += &format!(" {kind} {n:.4}/{a:.4} F1 {:.3};", m.f1);
        }
        lines.push(format!(
            "{seed_line} best epoch {} ({:.0?})",
            trained.best_epoch,
            t.elapsed()
        ));
        eprintln!("  criterion 5 {}", lines.last().unwrap());
    }
    let separated: Vec<bool> = sums.iter().map(|(n, a)| a > n).collect();
    let mean_f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    check(
        separated.iter().all(|&s| s) && mean_f1 >= E2E_MIN_F1,
        format!(
            "abnormal mean > normal mean (recon, elbo, gradcon) = {separated:?}; GradCon F1 over {E2E_SEEDS} seeds \
             = {mean_f1:.3} (need ≥ {E2E_MIN_F1}); per seed {f1s:.3?}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn tiny_experiment(kind: ModelKind, runs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.runs = runs;
    cfg.seed = 11;
    cfg.model = tiny_spec(kind);
    cfg.data.synth = tiny_synth();
    cfg.training = tiny_training(0);
    cfg
}

fn table_has(table: &str, columns: &[&str], runs: usize) -> bool {
    let header = table
        .lines()
        .find(|l| l.starts_with("Metric"))
        .unwrap_or("");
    let mut pos = 0;
    for c in columns {
        match header[pos..].find(c) {
            Some(p) => pos += p + c.len(),
            None => return false,
        }
    }
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with("Precision") || l.starts_with("Recall") || l.starts_with("F1"))
        .collect();
    rows.len() == 3
        && rows.iter().all(|r| r.matches('±').count() == columns.len())
        && table.contains(&format!("runs per cell: {runs}"))
}

fn criterion_6() -> Outcome {
    const RUNS: usize = 2;
    let dir = tempfile::tempdir().map_err(fail)?;
    let out = dir.path();
    let mut score_dirs = Vec::new();
    for kind in [ModelKind::Cae, ModelKind::Vae, ModelKind::BetaVae] {
        let cfg = tiny_experiment(kind, RUNS);
        let trained = cmd_train(&cfg, out).map_err(fail)?;
        let scored = cmd_score(&cfg, &trained.run_dir, None, out).map_err(fail)?;
        score_dirs.push(scored.run_dir);
    }
    let eval = cmd_eval(&score_dirs, None, out).map_err(fail)?;
    let method_columns = [
        "CAE Recon",
        "CAE GradCon",
        "VAE Recon",
        "VAE ELBO",
        "VAE GradCon",
        "β-VAE Recon",
        "β-VAE ELBO",
        "β-VAE GradCon",
    ];
    let eval_ok = eval.cells.len() == 8
        && eval.cells.iter().all(|(_, a)| a.runs == RUNS)
        && table_has(&eval.table, &method_columns, RUNS)
        && csv_rows(&eval.run_dir.join("report.csv")) == 8;

    let mut sweep_cfg = tiny_experiment(ModelKind::BetaVae, RUNS);
    sweep_cfg.training.epochs = 1;
    let sweep = cmd_sweep_beta(&sweep_cfg, out).map_err(fail)?;
    let beta_columns = ["β=0.01", "β=0.1", "β=1 (VAE)", "β=3", "β=10"];
    let betas: Vec<f64> = sweep.rows.iter().map(|(b, _)| *b).collect();
    let sweep_ok = betas == [0.01, 0.1, 1.0, 3.0, 10.0]
        && sweep.rows.iter().all(|(_, a)| a.runs == RUNS)
        && table_has(&sweep.table, &beta_columns, RUNS)
        && csv_rows(&sweep.run_dir.join("report.csv")) == 5;

    check(
        eval_ok && sweep_ok,
        format!(
            "method × score grid: 8 columns × 3 metrics, {RUNS} runs each: {eval_ok}; \
             β sweep columns {beta_columns:?}: {sweep_ok}"
        ),
    )
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path)
        .map(|s| s.lines().count().saturating_sub(1))
        .unwrap_or(0)
}

// ---------------------------------------------------------------- criterion 7

const TSNE_POINTS_PER_CLUSTER: usize = 30;
const TSNE_DIM: usize = 640;
const TSNE_RESTARTS: usize = 10;
const TSNE_SEPARATION: f64 = 4.0;

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 2 * TSNE_POINTS_PER_CLUSTER;
    let mut x = Array2::<f64>::zeros((n, TSNE_DIM));
    let labels: Vec<Label> = (0..n)
        .map(|i| {
            if i < TSNE_POINTS_PER_CLUSTER {
                Label::Normal
            } else {
                Label::Abnormal
            }
        })
        .collect();
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let centre = if i < TSNE_POINTS_PER_CLUSTER {
            0.0
        } else {
            1.0
        };
        for v in row.iter_mut() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = centre + noise;
        }
    }
    let cfg = TsneConfig {
        perplexity: 5.0,
        ..TsneConfig::default()
    };
    let seed = 70;
    let emb = tsne_embed(x.view(), &labels, &cfg, TSNE_RESTARTS, seed).map_err(fail)?;

    let centroid = |range: std::ops::Range<usize>| {
        let k = range.len() as f64;
        let (sx, sy) = range.clone().fold((0.0, 0.0), |(a, b), i| {
            (a + emb.points[[i, 0]], b + emb.points[[i, 1]])
        });
        let c = (sx / k, sy / k);
        let spread = range
            .map(|i| {
                ((emb.points[[i, 0]] - c.0).powi(2) + (emb.points[[i, 1]] - c.1).powi(2)).sqrt()
            })
            .sum::<f64>()
            / k;
        (c, spread)
    };
    let (c0, s0) = centroid(0..TSNE_POINTS_PER_CLUSTER);
    let (c1, s1) = centroid(TSNE_POINTS_PER_CLUSTER..n);
    let dist = ((c0.0 - c1.0).powi(2) + (c0.1 - c1.1).powi(2)).sqrt();
    let spread = 0.5 * (s0 + s1);
    let separated = dist > TSNE_SEPARATION * spread;

    let scaled = scale_unit(emb.points.view());
    let hits = scaled.columns().into_iter().all(|c| {
        let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lo == 0.0 && hi == 1.0
    }) && scaled == emb.points;

    // Every logged restart KL reproduces, and the lowest one was selected.
    let mut reproduced = emb.restart_kls.len() == TSNE_RESTARTS;
    for (i, &kl) in emb.restart_kls.iter().enumerate() {
        let run = tsne(x.view(), &cfg, seed + i as u64).map_err(fail)?;
        reproduced &= run.kl == kl;
    }
    let argmin = emb
        .restart_kls
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let selected = emb.selected_restart == argmin && emb.tsne_kl == emb.restart_kls[argmin];

    check(
        separated && hits && reproduced && selected,
        format!(
            "centroid distance {dist:.3} vs {TSNE_SEPARATION}× spread {spread:.4}: {separated}; \
             axes scaled to exactly [0, 1]: {hits}; restart KLs reproduce: {reproduced}; \
             selected #{} is the minimum ({:.4}): {selected}",
            emb.selected_restart, emb.tsne_kl
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let cfg = tiny_experiment(ModelKind::BetaVae, 1);
    let mut csvs = Vec::new();
    for attempt in 0..2 {
        let out = dir.path().join(format!("attempt-{attempt}"));
        let trained = cmd_train(&cfg, &out).map_err(fail)?;
        let scored = cmd_score(&cfg, &trained.run_dir, None, &out).map_err(fail)?;
        let bytes = std::fs::read(&scored.csvs[0]).map_err(fail)?;
        let resolved = std::fs::read(trained.run_dir.join(bvad_cli::commands::RESOLVED_CONFIG))
            .map_err(fail)?;
        csvs.push((bytes, resolved));
    }
    let identical = csvs[0].0 == csvs[1].0;
    let config_identical = csvs[0].1 == csvs[1].1;
    let rows = String::from_utf8_lossy(&csvs[0].0)
        .lines()
        .count()
        .saturating_sub(1);
    check(
        identical && config_identical && rows > 0,
        format!("two runs with seed {}: scores CSV ({rows} rows) byte-identical {identical}, resolved config identical {config_identical}", cfg.seed),
    )
}

// ------------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("analytic objective", criterion_1),
        ("gradient correctness", criterion_2),
        ("cosine / gradient history", criterion_3),
        ("reduction identities", criterion_4),
        ("end-to-end synthetic fixture", criterion_5),
        ("table shapes", criterion_6),
        ("t-SNE", criterion_7),
        ("pipeline determinism", criterion_8),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("criterion {number} {tag} [{name}] {detail} ({elapsed:.1?})");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
