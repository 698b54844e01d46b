//! Subcommand implementations. Each returns the paths it wrote so callers
//! (and tests) can inspect results without parsing stdout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use bvad_core::checkpoint::{is_checkpoint_dir, load_trained, save_trained};
use bvad_core::evaluation::{
    aggregate_runs, beta_label, confusion, method_column_label, precision_recall_f1,
    render_beta_table, render_method_table, write_report_csv, Metrics, ReportRow, RunAggregate,
};
use bvad_core::latentviz::{
    collect_latents, reconstruct, render_recon_grid, render_scatter, tsne_embed,
    write_embedding_csv, GridEntry,
};
use bvad_core::scoring::{read_scores_csv, write_scores_csv};
use bvad_core::trainer::{train_with, write_training_log, TrainEvent};
use bvad_core::{
    DatasetSplit, GradientState, Label, Model, ModelKind, ModelSpec, ScoreKind, ScoreRecord,
    Scorer, ScoringConfig, TrainedModel, TrainingConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::rundir::create_run_dir;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const TRAINING_LOG: &str = "training_log.csv";

fn write_resolved(dir: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&path, cfg.resolved_toml())
        .with_context(|| format!("writing {}", path.display()))
}

/// Train one model into `dir`, saving the best-validation checkpoint as it
/// improves, a snapshot under `epoch-NNN/` every `every` epochs (0 disables)
/// and the final artifacts at the end.
pub fn train_one(
    split: &DatasetSplit,
    spec: &ModelSpec,
    tcfg: &TrainingConfig,
    every: usize,
    dir: &Path,
) -> anyhow::Result<TrainedModel> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let hash = tcfg.fingerprint(spec);
    let trained = train_with(split, spec, tcfg, |event| {
        let TrainEvent::Epoch {
            log,
            model,
            state,
            is_best,
        } = event;
        println!(
            "  epoch {:>3}  recon {:.5}  kl {:.3}  grad {:+.4}  J {:.5}  val {:.5}  lr {:.1e}{}",
            log.epoch,
            log.recon,
            log.kl,
            log.grad_loss,
            log.total_j,
            log.val_loss,
            log.lr,
            if is_best { "  *" } else { "" }
        );
        if is_best {
            save_trained(dir, model, state, tcfg.beta, &hash)?;
        }
        if every > 0 && log.epoch % every == 0 {
            save_trained(
                &dir.join(format!("epoch-{:03}", log.epoch)),
                model,
                state,
                tcfg.beta,
                &hash,
            )?;
        }
        Ok(())
    })?;
    save_trained(
        dir,
        &trained.model,
        &trained.gradient_state,
        tcfg.beta,
        &hash,
    )?;
    write_training_log(&dir.join(TRAINING_LOG), &trained.log)?;
    Ok(trained)
}

#[derive(Debug)]
pub struct TrainOutput {
    pub run_dir: PathBuf,
    /// One checkpoint directory per run.
    pub checkpoints: Vec<PathBuf>,
}

pub fn cmd_train(cfg: &ExperimentConfig, out_root: &Path) -> anyhow::Result<TrainOutput> {
    cfg.validate()?;
    let split = cfg.dataset()?;
    let run_dir = create_run_dir(out_root, "train")?;
    write_resolved(&run_dir, cfg)?;
    let mut checkpoints = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let tcfg = cfg.training_for_run(r);
        let dir = run_dir.join(format!("run-{r:03}"));
        println!("training {} run {r} (seed {})", cfg.model.kind, tcfg.seed);
        let t = train_one(&split, &cfg.model, &tcfg, cfg.checkpoint_every, &dir)?;
        println!(
            "  best epoch {} of {}; checkpoint {}",
            t.best_epoch,
            t.log.len(),
            dir.display()
        );
        checkpoints.push(dir);
    }
    Ok(TrainOutput {
        run_dir,
        checkpoints,
    })
}

/// Checkpoint directories at `path`: the directory itself, or its
/// checkpoint subdirectories in name order.
pub fn find_checkpoints(path: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if is_checkpoint_dir(path) {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut found: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_checkpoint_dir(p))
        .collect();
    found.sort();
    if found.is_empty() {
        bail!(bvad_core::Error::Usage(format!(
            "no checkpoint found under {}",
            path.display()
        )));
    }
    Ok(found)
}

/// Score kinds that apply to a model kind.
pub fn applicable_kinds(kind: ModelKind) -> Vec<ScoreKind> {
    if kind.is_variational() {
        ScoreKind::ALL.to_vec()
    } else {
        vec![ScoreKind::Recon, ScoreKind::Gradcon]
    }
}

/// Provenance written next to every scores CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresMeta {
    pub model_kind: ModelKind,
    pub beta: f64,
    pub checkpoint: PathBuf,
    pub fingerprint: String,
    pub scoring: ScoringConfig,
}

pub fn scores_meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

/// Score the test split with every requested kind, calibrating each threshold
/// on the validation split.
pub fn score_model(
    model: &Model<f32>,
    state: Option<&GradientState>,
    scoring: &ScoringConfig,
    split: &DatasetSplit,
    kinds: &[ScoreKind],
) -> anyhow::Result<Vec<ScoreRecord>> {
    let mut records = Vec::new();
    for &kind in kinds {
        if kind == ScoreKind::Elbo && !model.kind().is_variational() {
            bail!(CliError::Config(format!(
                "score kind elbo does not apply to {}",
                model.kind()
            )));
        }
        let sc = ScoringConfig {
            score_kind: kind,
            ..scoring.clone()
        };
        let scorer = Scorer::new(model, state, &sc)?;
        let (threshold, recs) = scorer.evaluate(&split.validation, &split.test)?;
        log::info!("{kind}: threshold {threshold:.6} ({})", sc.threshold);
        records.extend(recs);
    }
    Ok(records)
}

#[derive(Debug)]
pub struct ScoreOutput {
    pub run_dir: PathBuf,
    pub csvs: Vec<PathBuf>,
}

pub fn cmd_score(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    kinds: Option<&[ScoreKind]>,
    out_root: &Path,
) -> anyhow::Result<ScoreOutput> {
    cfg.validate()?;
    let checkpoints = find_checkpoints(checkpoint)?;
    let split = cfg.dataset()?;
    let run_dir = create_run_dir(out_root, "score")?;
    write_resolved(&run_dir, cfg)?;
    let mut csvs = Vec::new();
    for ckpt in checkpoints {
        let (model, meta, state) = load_trained(&ckpt)?;
        let kinds = kinds
            .map(<[ScoreKind]>::to_vec)
            .unwrap_or_else(|| applicable_kinds(model.kind()));
        let records = score_model(&model, state.as_ref(), &cfg.scoring, &split, &kinds)?;
        let name = ckpt
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let csv = run_dir.join(format!("scores-{name}.csv"));
        write_scores_csv(&csv, &records)?;
        let sidecar = ScoresMeta {
            model_kind: model.kind(),
            beta: meta.beta,
            checkpoint: ckpt.clone(),
            fingerprint: meta.fingerprint.clone(),
            scoring: cfg.scoring.clone(),
        };
        std::fs::write(
            scores_meta_path(&csv),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        println!(
            "scored {} with {:?} -> {}",
            ckpt.display(),
            kinds,
            csv.display()
        );
        csvs.push(csv);
    }
    Ok(ScoreOutput { run_dir, csvs })
}

/// Score CSVs named directly or found inside directories.
pub fn expand_score_inputs(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|e| e == "csv") && scores_meta_path(f).is_file()
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!(bvad_core::Error::Usage("no score files given".into()));
    }
    Ok(out)
}

fn test_set_signature(records: &[&ScoreRecord]) -> BTreeSet<(String, Option<Label>)> {
    records
        .iter()
        .map(|r| (r.id.clone(), r.ground_truth))
        .collect()
}

#[derive(Debug)]
pub struct EvalOutput {
    pub run_dir: PathBuf,
    pub table: String,
    pub cells: Vec<((ModelKind, ScoreKind), RunAggregate)>,
}

fn report_notes(runs: &BTreeSet<usize>, scoring: Option<&ScoringConfig>) -> Vec<String> {
    let mut notes = vec![
        "anomaly is the positive class; cells are mean ± sample std (n-1) over runs".to_string(),
        format!(
            "runs per cell: {}",
            runs.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(", ")
        ),
    ];
    if let Some(s) = scoring {
        notes.push(format!(
            "gamma = {}, threshold = {} on validation normals, elbo score beta = {}",
            s.gamma, s.threshold, s.beta_score
        ));
    }
    notes
}

/// Aggregate per-run score files into the method × score grid.
pub fn cmd_eval(
    inputs: &[PathBuf],
    method: Option<ModelKind>,
    out_root: &Path,
) -> anyhow::Result<EvalOutput> {
    let files = expand_score_inputs(inputs)?;
    let mut per_cell: BTreeMap<(ModelKind, ScoreKind), Vec<Metrics>> = BTreeMap::new();
    let mut reference: Option<(PathBuf, BTreeSet<(String, Option<Label>)>)> = None;
    let mut scoring: Option<ScoringConfig> = None;
    for file in &files {
        let meta: Option<ScoresMeta> = match std::fs::read_to_string(scores_meta_path(file)) {
            Ok(text) => Some(
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing sidecar of {}", file.display()))?,
            ),
            Err(_) => None,
        };
        let model_kind = match (method, &meta) {
            (Some(m), _) => m,
            (None, Some(m)) => m.model_kind,
            (None, None) => bail!(bvad_core::Error::Usage(format!(
                "{} has no metadata sidecar; pass --method",
                file.display()
            ))),
        };
        if scoring.is_none() {
            scoring = meta.map(|m| m.scoring);
        }
        let records = read_scores_csv(file)?;
        let mut by_kind: BTreeMap<ScoreKind, Vec<&ScoreRecord>> = BTreeMap::new();
        for r in &records {
            by_kind.entry(r.kind).or_default().push(r);
        }
        for (kind, recs) in by_kind {
            let sig = test_set_signature(&recs);
            match &reference {
                None => reference = Some((file.clone(), sig)),
                Some((ref_file, ref_sig)) if *ref_sig != sig => {
                    bail!(CliError::MismatchedTestSets(format!(
                        "{} ({kind}) and {} cover different samples",
                        file.display(),
                        ref_file.display()
                    )))
                }
                Some(_) => {}
            }
            let owned: Vec<ScoreRecord> = recs.into_iter().cloned().collect();
            let metrics = precision_recall_f1(&confusion(&owned)?);
            per_cell
                .entry((model_kind, kind))
                .or_default()
                .push(metrics);
        }
    }
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    let mut run_counts = BTreeSet::new();
    for (key, metrics) in &per_cell {
        let agg = aggregate_runs(metrics)?;
        run_counts.insert(agg.runs);
        rows.push(ReportRow::new(method_column_label(key.0, key.1), &agg));
        cells.push((*key, agg));
    }
    let table = render_method_table(&cells, &report_notes(&run_counts, scoring.as_ref()));
    let run_dir = create_run_dir(out_root, "eval")?;
    write_report_csv(&run_dir.join("report.csv"), &rows)?;
    std::fs::write(run_dir.join("report.txt"), &table)?;
    let list: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
    std::fs::write(run_dir.join("inputs.txt"), list.join("\n") + "\n")?;
    println!("{table}");
    Ok(EvalOutput {
        run_dir,
        table,
        cells,
    })
}

#[derive(Debug)]
pub struct SweepOutput {
    pub run_dir: PathBuf,
    pub table: String,
    pub rows: Vec<(f64, RunAggregate)>,
}

/// Train and evaluate one β-VAE per β value and run; report the configured
/// score kind.
pub fn cmd_sweep_beta(cfg: &ExperimentConfig, out_root: &Path) -> anyhow::Result<SweepOutput> {
    cfg.validate()?;
    let kind = cfg.scoring.score_kind;
    let split = cfg.dataset()?;
    let run_dir = create_run_dir(out_root, "sweep-beta")?;
    write_resolved(&run_dir, cfg)?;
    let spec = ModelSpec {
        kind: ModelKind::BetaVae,
        ..cfg.model.clone()
    };
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for &beta in &cfg.sweep_betas {
        let mut metrics = Vec::with_capacity(cfg.runs);
        for r in 0..cfg.runs {
            let tcfg = TrainingConfig {
                beta,
                ..cfg.training_for_run(r)
            };
            let dir = run_dir
                .join(format!("beta-{beta}"))
                .join(format!("run-{r:03}"));
            println!("β = {} run {r} (seed {})", beta_label(beta), tcfg.seed);
            let trained = train_one(&split, &spec, &tcfg, cfg.checkpoint_every, &dir)?;
            let records = score_model(
                &trained.model,
                Some(&trained.gradient_state),
                &cfg.scoring,
                &split,
                &[kind],
            )?;
            write_scores_csv(&dir.join("scores.csv"), &records)?;
            metrics.push(precision_recall_f1(&confusion(&records)?));
        }
        let agg = aggregate_runs(&metrics)?;
        report.push(ReportRow::new(format!("beta={}", beta_label(beta)), &agg));
        rows.push((beta, agg));
    }
    let mut notes = report_notes(&[cfg.runs].into_iter().collect(), Some(&cfg.scoring));
    notes.insert(
        0,
        format!(
            "β-VAE trained with alpha = {}; score kind {kind}",
            cfg.training.alpha
        ),
    );
    let table = render_beta_table(&rows, &notes);
    write_report_csv(&run_dir.join("report.csv"), &report)?;
    std::fs::write(run_dir.join("report.txt"), &table)?;
    println!("{table}");
    Ok(SweepOutput {
        run_dir,
        table,
        rows,
    })
}

#[derive(Debug)]
pub struct VisualizeOutput {
    pub run_dir: PathBuf,
    pub scatter: PathBuf,
    pub grid: PathBuf,
    pub embedding_csv: PathBuf,
}

#[derive(Serialize)]
struct RestartRow {
    restart: usize,
    seed: u64,
    kl: f64,
    selected: bool,
}

pub fn cmd_visualize(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_root: &Path,
) -> anyhow::Result<VisualizeOutput> {
    cfg.validate()?;
    let ckpt = find_checkpoints(checkpoint)?.remove(0);
    let (model, _, state) = load_trained(&ckpt)?;
    let state = state
        .ok_or_else(|| bvad_core::Error::Usage("checkpoint has no gradient history".into()))?;
    let split = cfg.dataset()?;
    let run_dir = create_run_dir(out_root, "visualize")?;
    write_resolved(&run_dir, cfg)?;

    let latents = collect_latents(&model, &state, &split.test)?;
    let labels: Vec<Label> = split.test.iter().map(|s| s.label).collect();
    let vis = &cfg.visualize;
    let emb = tsne_embed(latents.view(), &labels, &vis.tsne, vis.restarts, cfg.seed)?;
    let embedding_csv = run_dir.join("embedding.csv");
    let ids: Vec<String> = split.test.iter().map(|s| s.id.clone()).collect();
    write_embedding_csv(&embedding_csv, &ids, &emb)?;
    let mut w = csv::Writer::from_path(run_dir.join("tsne_restarts.csv"))?;
    for (i, &kl) in emb.restart_kls.iter().enumerate() {
        w.serialize(RestartRow {
            restart: i,
            seed: cfg.seed.wrapping_add(i as u64),
            kl,
            selected: i == emb.selected_restart,
        })?;
    }
    w.flush()?;
    let scatter = run_dir.join("latent_tsne.png");
    render_scatter(&scatter, &emb)?;

    let pick = |label| {
        split
            .test
            .iter()
            .filter(move |s| s.label == label)
            .take(vis.grid_per_class)
    };
    let chosen: Vec<_> = pick(Label::Normal)
        .chain(pick(Label::Abnormal))
        .cloned()
        .collect();
    let kind = if model.kind().is_variational() || cfg.scoring.score_kind != ScoreKind::Elbo {
        cfg.scoring.score_kind
    } else {
        ScoreKind::Recon
    };
    let sc = ScoringConfig {
        score_kind: kind,
        ..cfg.scoring.clone()
    };
    let scorer = Scorer::new(&model, Some(&state), &sc)?;
    let threshold = bvad_core::scoring::calibrate_threshold(
        &scorer.score(kind, &split.validation)?,
        sc.threshold,
    )?;
    let scores = scorer.score(kind, &chosen)?;
    let recons = reconstruct(&model, &chosen)?;
    let entries: Vec<GridEntry> = chosen
        .iter()
        .zip(&recons)
        .zip(&scores)
        .map(|((sample, reconstruction), &score)| GridEntry {
            sample,
            reconstruction,
            predicted: bvad_core::scoring::decide(score, threshold),
            score,
        })
        .collect();
    let grid = run_dir.join("reconstructions.png");
    render_recon_grid(&grid, &entries)?;
    println!(
        "t-SNE: {} restarts, selected #{} with KL {:.4}; wrote {}",
        emb.restart_kls.len(),
        emb.selected_restart,
        emb.tsne_kl,
        run_dir.display()
    );
    Ok(VisualizeOutput {
        run_dir,
        scatter,
        grid,
        embedding_csv,
    })
}

/// Materialize the synthetic fixture as an image directory tree.
pub fn cmd_synth(cfg: &ExperimentConfig, target: &Path) -> anyhow::Result<PathBuf> {
    cfg.data
        .synth
        .validate()
        .map_err(|e| CliError::Config(format!("[data.synth] {e}")))?;
    if target.exists() && std::fs::read_dir(target)?.next().is_some() {
        bail!(bvad_core::Error::Usage(format!(
            "{} exists and is not empty; refusing to overwrite",
            target.display()
        )));
    }
    bvad_core::write_synthetic(&cfg.data.synth, cfg.data.synth_seed, target)?;
    write_resolved(target, cfg)?;
    let s = &cfg.data.synth;
    println!(
        "wrote {} train, {} val, {}+{} test images to {}",
        s.train_count,
        s.val_count,
        s.test_normal,
        s.test_abnormal,
        target.display()
    );
    Ok(target.to_path_buf())
}
