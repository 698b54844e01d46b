//! Latent-space inspection: posterior means, multi-restart t-SNE embeddings,
//! unit scaling and PNG rendering.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::dataset::{ImageSample, Label, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::model::{flatten_latent, tensor_to_batch, Mode, Model};
use crate::objective::GradientState;
use crate::scoring::Verdict;
use crate::trainer::samples_to_tensor;
use crate::tsne::{tsne, TsneConfig};

pub const NORMAL_COLOR: [u8; 3] = [31, 119, 180];
pub const ABNORMAL_COLOR: [u8; 3] = [214, 39, 40];
const UNKNOWN_COLOR: [u8; 3] = [127, 127, 127];

fn label_color(label: Label) -> [u8; 3] {
    match label {
        Label::Normal => NORMAL_COLOR,
        Label::Abnormal => ABNORMAL_COLOR,
        Label::Unknown => UNKNOWN_COLOR,
    }
}

fn require_trained(model: &Model<f32>, history: &GradientState) -> Result<()> {
    if history.k == 0 {
        return Err(Error::Usage(
            "model has no training history; train it first".into(),
        ));
    }
    if !model.kind().is_variational() {
        return Err(Error::Usage(format!(
            "{} has no posterior to embed",
            model.kind()
        )));
    }
    Ok(())
}

/// Posterior means `μ` of every sample, `(n, latent_dim)`, in evaluation mode.
pub fn collect_latents(
    model: &Model<f32>,
    history: &GradientState,
    samples: &[ImageSample],
) -> Result<Array2<f64>> {
    require_trained(model, history)?;
    let mut out = Array2::zeros((0, model.latent_dim()));
    for chunk in samples.chunks(32) {
        let enc = model.encode_pass(&samples_to_tensor(chunk), Mode::Eval)?;
        let mu = flatten_latent(&enc.mu).mapv(f64::from);
        out.append(Axis(0), mu.view())
            .expect("matching latent width");
    }
    Ok(out)
}

/// Eval-mode reconstructions as `(64, 64, 3)` arrays.
pub fn reconstruct(model: &Model<f32>, samples: &[ImageSample]) -> Result<Vec<Array3<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let enc = model.encode_pass(&samples_to_tensor(chunk), Mode::Eval)?;
        let batch = tensor_to_batch(&model.decode_pass(&enc.mu, Mode::Eval).output);
        out.extend(batch.outer_iter().map(|a| a.to_owned()));
    }
    Ok(out)
}

/// Per-axis min-max scaling to `[0, 1]`; an axis without spread maps to 0.5.
pub fn scale_unit(points: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = points.to_owned();
    for mut col in out.columns_mut() {
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span > 0.0 {
            col.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
        } else {
            col.fill(0.5);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    /// `(n, 2)` points scaled to `[0, 1]`.
    pub points: Array2<f64>,
    /// Final KL of the selected restart.
    pub tsne_kl: f64,
    pub labels: Vec<Label>,
    /// Final KL of every restart, in restart order.
    pub restart_kls: Vec<f64>,
    pub selected_restart: usize,
}

/// Run `n_restarts` seeded t-SNE optimizations (seeds `seed + i`) and keep
/// the one with the lowest final KL.
pub fn tsne_embed(
    latents: ArrayView2<'_, f64>,
    labels: &[Label],
    cfg: &TsneConfig,
    n_restarts: usize,
    seed: u64,
) -> Result<Embedding2D> {
    if labels.len() != latents.nrows() {
        return Err(Error::shape("t-SNE labels", latents.nrows(), labels.len()));
    }
    if n_restarts == 0 {
        return Err(Error::Config("t-SNE needs at least one restart".into()));
    }
    cfg.validate(latents.nrows())?;
    let mut best: Option<(usize, crate::tsne::TsneRun)> = None;
    let mut restart_kls = Vec::with_capacity(n_restarts);
    for i in 0..n_restarts {
        let run = tsne(latents, cfg, seed.wrapping_add(i as u64))?;
        log::debug!("t-SNE restart {i}: KL = {:.6}", run.kl);
        restart_kls.push(run.kl);
        if best.as_ref().is_none_or(|(_, b)| run.kl < b.kl) {
            best = Some((i, run));
        }
    }
    let (selected_restart, run) = best.expect("at least one restart");
    Ok(Embedding2D {
        points: scale_unit(run.points.view()),
        tsne_kl: run.kl,
        labels: labels.to_vec(),
        restart_kls,
        selected_restart,
    })
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    id: &'a str,
    x: f64,
    y: f64,
    label: Label,
    run_kl: f64,
}

pub fn write_embedding_csv(path: &Path, ids: &[String], emb: &Embedding2D) -> Result<()> {
    if ids.len() != emb.points.nrows() {
        return Err(Error::shape("embedding ids", emb.points.nrows(), ids.len()));
    }
    let mut w = csv::Writer::from_path(path)?;
    for (i, id) in ids.iter().enumerate() {
        w.serialize(EmbeddingRow {
            id,
            x: emb.points[[i, 0]],
            y: emb.points[[i, 1]],
            label: emb.labels[i],
            run_kl: emb.tsne_kl,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Legend sidecar written next to every rendered image.
#[derive(Debug, Serialize)]
pub struct Legend {
    pub image: String,
    pub colors: Vec<LegendEntry>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tiles: Vec<TileInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<[usize; 2]>,
}

#[derive(Debug, Serialize)]
pub struct LegendEntry {
    pub meaning: String,
    pub rgb: [u8; 3],
    pub count: usize,
}

#[derive(Debug, Serialize)]
pub struct TileInfo {
    pub id: String,
    pub column: usize,
    pub predicted: Verdict,
    pub score: f64,
    pub ground_truth: Label,
}

pub fn legend_path(image: &Path) -> PathBuf {
    image.with_extension("legend.json")
}

fn write_legend(image: &Path, legend: &Legend) -> Result<()> {
    let path = legend_path(image);
    let text = serde_json::to_string_pretty(legend)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

fn fill_disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let x0 = (cx - r).floor().max(0.0) as u32;
    let y0 = (cy - r).floor().max(0.0) as u32;
    let x1 = ((cx + r).ceil() as u32).min(w - 1);
    let y1 = ((cy + r).ceil() as u32).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// Scatter plot of a scaled embedding: blue normal, red abnormal.
pub fn render_scatter(path: &Path, emb: &Embedding2D) -> Result<()> {
    const SIZE: u32 = 512;
    const MARGIN: f64 = 24.0;
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let span = SIZE as f64 - 2.0 * MARGIN;
    for (p, &label) in emb.points.rows().into_iter().zip(&emb.labels) {
        let x = MARGIN + p[0] * span;
        let y = MARGIN + (1.0 - p[1]) * span;
        fill_disc(&mut img, x, y, 5.0, label_color(label));
    }
    save_png(&img, path)?;
    let count = |l| emb.labels.iter().filter(|&&x| x == l).count();
    write_legend(
        path,
        &Legend {
            image: file_name(path),
            colors: vec![
                LegendEntry {
                    meaning: "normal".into(),
                    rgb: NORMAL_COLOR,
                    count: count(Label::Normal),
                },
                LegendEntry {
                    meaning: "abnormal".into(),
                    rgb: ABNORMAL_COLOR,
                    count: count(Label::Abnormal),
                },
            ],
            tiles: Vec::new(),
            grid: None,
        },
    )
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn to_pixel(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// One column of the reconstruction grid.
pub struct GridEntry<'a> {
    pub sample: &'a ImageSample,
    pub reconstruction: &'a Array3<f32>,
    pub predicted: Verdict,
    pub score: f64,
}

/// Two-row grid (originals on top, reconstructions below). Each column is
/// framed in the color of its predicted label; scores go to the sidecar.
pub fn render_recon_grid(path: &Path, entries: &[GridEntry<'_>]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Usage(
            "reconstruction grid needs at least one sample".into(),
        ));
    }
    const BORDER: u32 = 3;
    let tile = IMAGE_SIZE as u32 + 2 * BORDER;
    let mut img = RgbImage::from_pixel(tile * entries.len() as u32, 2 * tile, Rgb([255, 255, 255]));
    for (col, e) in entries.iter().enumerate() {
        let frame = if e.predicted.is_anomaly() {
            ABNORMAL_COLOR
        } else {
            NORMAL_COLOR
        };
        for (row, pixels) in [&e.sample.tensor, e.reconstruction].into_iter().enumerate() {
            let (ox, oy) = (col as u32 * tile, row as u32 * tile);
            for y in 0..tile {
                for x in 0..tile {
                    let inside = (BORDER..tile - BORDER).contains(&x)
                        && (BORDER..tile - BORDER).contains(&y);
                    let c = if inside {
                        let (py, px) = ((y - BORDER) as usize, (x - BORDER) as usize);
                        [0, 1, 2].map(|c| to_pixel(pixels[[py, px, c]]))
                    } else {
                        frame
                    };
                    img.put_pixel(ox + x, oy + y, Rgb(c));
                }
            }
        }
    }
    save_png(&img, path)?;
    let count = |v: Verdict| entries.iter().filter(|e| e.predicted == v).count();
    write_legend(
        path,
        &Legend {
            image: file_name(path),
            colors: vec![
                LegendEntry {
                    meaning: "predicted normal".into(),
                    rgb: NORMAL_COLOR,
                    count: count(Verdict::Normal),
                },
                LegendEntry {
                    meaning: "predicted anomaly".into(),
                    rgb: ABNORMAL_COLOR,
                    count: count(Verdict::Anomaly),
                },
            ],
            tiles: entries
                .iter()
                .enumerate()
                .map(|(column, e)| TileInfo {
                    id: e.sample.id.clone(),
                    column,
                    predicted: e.predicted,
                    score: e.score,
                    ground_truth: e.sample.label,
                })
                .collect(),
            grid: Some([2, entries.len()]),
        },
    )
}
