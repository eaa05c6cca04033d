//! Accuracy metrics, checkpoint evaluation and the results report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::artifact::{write_atomic, write_json};
use crate::backbone::{classify, rotation_logits, Backbone, BowPredictionHead, ClassifierHead, HeadKind, RotationHead};
use crate::checkpoint::{LoadedCheckpoint, Stage};
use crate::codebook::BowTargets;
use crate::dataset::{images_to_tensor, ImageRecord, NormalizationStats};
use crate::image::{rotate_image, Image, RotationLabel};
use crate::losses::{hard_cross_entropy, soft_cross_entropy};
use crate::training::MetricsRecord;
use crate::{Error, Result};

/// Fraction of positions where `predictions` equals `labels`.
pub fn top1_accuracy(predictions: &[u32], labels: &[u32]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::DimMismatch {
            what: "prediction count vs label count",
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Row-wise argmax of a `(B, M)` tensor; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<u32>> {
    let rows = logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best as u32
        })
        .collect())
}

/// Summed loss and prediction counts over an evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub loss_sum: f64,
    pub correct: usize,
    pub total: usize,
}

impl Scores {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.total.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }

    fn add_batch(&mut self, mean_loss: &Tensor, predictions: &[u32], labels: &[u32]) -> Result<()> {
        let n = labels.len();
        self.loss_sum += mean_loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * n as f64;
        self.correct += predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        self.total += n;
        Ok(())
    }
}

/// Rotation prediction over all four rotations of every image, inference mode.
pub fn rotation_scores(
    backbone: &Backbone,
    head: &RotationHead,
    images: &[&Image],
    stats: &NormalizationStats,
    batch_images: usize,
) -> Result<Scores> {
    let mut scores = Scores::default();
    for chunk in images.chunks(batch_images.max(1)) {
        let mut rotated = Vec::with_capacity(chunk.len() * 4);
        let mut labels = Vec::with_capacity(chunk.len() * 4);
        for img in chunk {
            for r in RotationLabel::ALL {
                rotated.push(rotate_image(img, r)?);
                labels.push(r.index() as u32);
            }
        }
        let x = images_to_tensor(&rotated, stats, backbone.device())?;
        let logits = rotation_logits(backbone, head, &x, false)?;
        scores.add_batch(&hard_cross_entropy(&logits, &labels)?, &argmax_rows(&logits)?, &labels)?;
    }
    Ok(scores)
}

/// 100-way classification of unaugmented images, inference mode.
pub fn classifier_scores(
    backbone: &Backbone,
    head: &ClassifierHead,
    tap: &str,
    records: &[&ImageRecord],
    stats: &NormalizationStats,
    batch_size: usize,
) -> Result<Scores> {
    let mut scores = Scores::default();
    for chunk in records.chunks(batch_size.max(1)) {
        let x = images_to_tensor(chunk.iter().map(|r| &r.image), stats, backbone.device())?;
        let labels: Vec<u32> = chunk.iter().map(|r| r.label as u32).collect();
        let logits = classify(backbone, head, &x, tap, false)?;
        scores.add_batch(&hard_cross_entropy(&logits, &labels)?, &argmax_rows(&logits)?, &labels)?;
    }
    Ok(scores)
}

/// Mean soft cross-entropy between predicted and reference histograms for
/// unperturbed images; `indices` address both `images` and `targets`.
#[allow(clippy::too_many_arguments)]
pub fn bow_scores(
    backbone: &Backbone,
    head: &BowPredictionHead,
    tap: &str,
    images: &[&Image],
    indices: &[usize],
    targets: &BowTargets,
    stats: &NormalizationStats,
    batch_size: usize,
) -> Result<Scores> {
    let mut scores = Scores::default();
    for chunk in indices.chunks(batch_size.max(1)) {
        let x = images_to_tensor(chunk.iter().map(|&i| images[i]), stats, backbone.device())?;
        let pred = head.forward(&backbone.forward_to_tap(&x, tap, false)?)?;
        let target = targets.dense_batch(chunk, backbone.device())?;
        let loss = soft_cross_entropy(&pred, &target)?;
        scores.loss_sum += loss.to_dtype(DType::F64)?.to_scalar::<f64>()? * chunk.len() as f64;
        scores.total += chunk.len();
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub experiment: String,
    pub tap: Option<String>,
    pub head_kind: Option<HeadKind>,
    pub metric: Metric,
    /// Accuracy as a fraction in `[0, 1]`, or a mean loss.
    pub value: f64,
    pub sample_count: usize,
    pub checkpoint_hash: String,
}

pub const ROTATION_EXPERIMENT: &str = "RotNet (rotation prediction)";
pub const BOW_LOSS_EXPERIMENT: &str = "BowNet (crossentropy loss)";

/// Table row label for a classifier checkpoint.
pub fn classifier_experiment(pretrained_from: Option<Stage>, tap: &str, kind: HeadKind) -> String {
    match (pretrained_from, kind) {
        (Some(Stage::Bownet), HeadKind::Linear) => format!("BowNet (pretrained, {tap}) + linear clf"),
        (Some(Stage::Bownet), HeadKind::Nonlinear) => format!("BowNet (pretrained, {tap}) + nonlinear clf"),
        (Some(_), HeadKind::Linear) => format!("RotNet (pretrained, {tap}) + linear clf"),
        (Some(_), HeadKind::Nonlinear) => "RotNet (pretrained) + nonlinear clf".to_string(),
        (None, HeadKind::Linear) => "RotNet + linear clf (supervised)".to_string(),
        (None, HeadKind::Nonlinear) => "RotNet + nonlinear clf (supervised)".to_string(),
    }
}

fn test_images(test: &[ImageRecord]) -> Result<Vec<&Image>> {
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    Ok(test.iter().map(|r| &r.image).collect())
}

/// Rotation accuracy of a checkpoint over all four rotations of `test`.
pub fn evaluate_rotation(
    ck: &LoadedCheckpoint,
    test: &[ImageRecord],
    stats: &NormalizationStats,
    batch_images: usize,
) -> Result<EvaluationResult> {
    let net = ck.network(&candle_core::Device::Cpu)?;
    let head = net
        .rotation
        .as_ref()
        .ok_or_else(|| Error::Config(format!("checkpoint {} has no rotation head", ck.path.display())))?;
    let scores = rotation_scores(&net.backbone, head, &test_images(test)?, stats, batch_images)?;
    Ok(EvaluationResult {
        experiment: ROTATION_EXPERIMENT.into(),
        tap: Some(net.backbone.config().final_tap()),
        head_kind: None,
        metric: Metric::Accuracy,
        value: scores.accuracy(),
        sample_count: scores.total,
        checkpoint_hash: ck.hash().to_string(),
    })
}

/// Top-1 accuracy of a checkpoint's classifier head on `test`.
pub fn evaluate_classifier(
    ck: &LoadedCheckpoint,
    test: &[ImageRecord],
    stats: &NormalizationStats,
    batch_size: usize,
) -> Result<EvaluationResult> {
    let net = ck.network(&candle_core::Device::Cpu)?;
    let spec = ck
        .manifest
        .heads
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Config(format!("checkpoint {} has no classifier head", ck.path.display())))?;
    let head = net.classifier.as_ref().expect("built from the same head spec");
    let records: Vec<&ImageRecord> = test.iter().collect();
    if records.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let scores = classifier_scores(&net.backbone, head, &spec.tap, &records, stats, batch_size)?;
    Ok(EvaluationResult {
        experiment: classifier_experiment(ck.manifest.pretrained_from, &spec.tap, spec.kind),
        tap: Some(spec.tap.clone()),
        head_kind: Some(spec.kind),
        metric: Metric::Accuracy,
        value: scores.accuracy(),
        sample_count: scores.total,
        checkpoint_hash: ck.hash().to_string(),
    })
}

/// Held-out BoW reconstruction loss of a BowNet checkpoint.
pub fn evaluate_bownet(
    ck: &LoadedCheckpoint,
    test: &[ImageRecord],
    targets: &BowTargets,
    stats: &NormalizationStats,
    batch_size: usize,
) -> Result<EvaluationResult> {
    let net = ck.network(&candle_core::Device::Cpu)?;
    let spec = ck
        .manifest
        .heads
        .bow
        .as_ref()
        .ok_or_else(|| Error::Config(format!("checkpoint {} has no BoW head", ck.path.display())))?;
    let head = net.bow.as_ref().expect("built from the same head spec");
    if targets.len() != test.len() {
        return Err(Error::DimMismatch {
            what: "test targets vs test images",
            expected: test.len(),
            got: targets.len(),
        });
    }
    let images = test_images(test)?;
    let indices: Vec<usize> = (0..images.len()).collect();
    let scores = bow_scores(
        &net.backbone,
        head,
        &spec.tap,
        &images,
        &indices,
        targets,
        stats,
        batch_size,
    )?;
    Ok(EvaluationResult {
        experiment: BOW_LOSS_EXPERIMENT.into(),
        tap: Some(spec.tap.clone()),
        head_kind: None,
        metric: Metric::CrossEntropy,
        value: scores.mean_loss(),
        sample_count: scores.total,
        checkpoint_hash: ck.hash().to_string(),
    })
}

/// Published reference values, in table order. Accuracies are percentages.
pub const REFERENCE_ROWS: [(&str, f64); 9] = [
    (ROTATION_EXPERIMENT, 78.53),
    ("RotNet (pretrained, resblock3_256b) + linear clf", 53.26),
    ("RotNet (pretrained, resblock2_128b) + linear clf", 55.67),
    ("RotNet (pretrained) + nonlinear clf", 57.44),
    ("RotNet + linear clf (supervised)", 60.24),
    ("RotNet + nonlinear clf (supervised)", 66.06),
    ("BowNet (pretrained, resblock3_256b) + linear clf", 47.49),
    ("BowNet (pretrained, resblock2_128b) + linear clf", 51.10),
    (BOW_LOSS_EXPERIMENT, 5.31),
];

/// Shown for context only; never compared against a measurement.
pub const ORIGINAL_BOWNET_ROW: (&str, f64) = ("BowNet original (pretrained + linear clf)", 71.5);

const DISCREPANCY_NOTE: &str = "The reference table lists 47.49% for this row; the accompanying text reports 47.20%.";

fn reference_for(experiment: &str) -> Option<(usize, f64)> {
    REFERENCE_ROWS
        .iter()
        .position(|(name, _)| *name == experiment)
        .map(|i| (i, REFERENCE_ROWS[i].1))
}

fn format_value(metric: Metric, v: f64) -> String {
    match metric {
        Metric::Accuracy => format!("{:.2}%", v * 100.0),
        Metric::CrossEntropy => format!("{v:.2}"),
    }
}

fn format_reference(metric: Metric, v: f64) -> String {
    match metric {
        Metric::Accuracy => format!("{v:.2}%"),
        Metric::CrossEntropy => format!("{v:.2}"),
    }
}

/// Results in table order; unknown experiments follow, by name.
fn ordered(results: &[EvaluationResult]) -> Vec<&EvaluationResult> {
    let mut rows: Vec<&EvaluationResult> = results.iter().collect();
    rows.sort_by(|a, b| {
        let ka = reference_for(&a.experiment).map_or(usize::MAX, |r| r.0);
        let kb = reference_for(&b.experiment).map_or(usize::MAX, |r| r.0);
        ka.cmp(&kb)
            .then_with(|| a.experiment.cmp(&b.experiment))
            .then_with(|| a.checkpoint_hash.cmp(&b.checkpoint_hash))
    });
    rows
}

/// Markdown results table with the published numbers alongside.
pub fn render_table(results: &[EvaluationResult]) -> String {
    let mut out = String::new();
    let mut footnote = false;
    out.push_str("| Experiment | Measured | Reference | Samples | Checkpoint |\n");
    out.push_str("|---|---:|---:|---:|---|\n");
    for r in ordered(results) {
        let reference = match reference_for(&r.experiment) {
            Some((_, v)) if r.experiment.starts_with("BowNet (pretrained, resblock3_256b) + linear") => {
                footnote = true;
                format!("{}[^1]", format_reference(r.metric, v))
            }
            Some((_, v)) => format_reference(r.metric, v),
            None => "n/a".into(),
        };
        let short: String = r.checkpoint_hash.chars().take(12).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | `{}` |",
            r.experiment,
            format_value(r.metric, r.value),
            reference,
            r.sample_count,
            short
        );
    }
    out.push_str("\nReference only, not a reproduction target:\n\n");
    out.push_str("| Experiment | Reference |\n|---|---:|\n");
    let _ = writeln!(out, "| {} | {:.1}% |", ORIGINAL_BOWNET_ROW.0, ORIGINAL_BOWNET_ROW.1);
    if footnote {
        let _ = writeln!(out, "\n[^1]: {DISCREPANCY_NOTE}");
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub results: Vec<EvaluationResult>,
    pub references: BTreeMap<String, f64>,
    pub reference_only: BTreeMap<String, f64>,
}

/// Files written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub table: PathBuf,
    pub summary: PathBuf,
    pub curves: Vec<PathBuf>,
}

/// Writes `results.md`, `summary.json` and one SVG of loss/accuracy curves per
/// metrics stream into `out_dir`.
pub fn emit_report(
    results: &[EvaluationResult],
    curves: &[(String, Vec<MetricsRecord>)],
    out_dir: &Path,
) -> Result<ReportFiles> {
    if results.is_empty() {
        return Err(Error::NoResults("no evaluation results to report".into()));
    }
    let table = out_dir.join("results.md");
    let mut md = String::from("# Results\n\n");
    md.push_str(&render_table(results));
    write_atomic(&table, md.as_bytes())?;

    let summary = out_dir.join("summary.json");
    write_json(
        &summary,
        &Summary {
            results: ordered(results).into_iter().cloned().collect(),
            references: REFERENCE_ROWS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            reference_only: [(ORIGINAL_BOWNET_ROW.0.to_string(), ORIGINAL_BOWNET_ROW.1)].into(),
        },
    )?;

    let mut written = Vec::new();
    for (name, records) in curves {
        if records.is_empty() {
            continue;
        }
        let path = out_dir.join("curves").join(format!("{name}.svg"));
        write_atomic(&path, curves_svg(name, records).as_bytes())?;
        written.push(path);
    }
    Ok(ReportFiles {
        table,
        summary,
        curves: written,
    })
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn chart(out: &mut String, top: f64, title: &str, series: &[Series]) {
    let (left, width, height) = (60.0, 560.0, 240.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * width;
    let sy = |y: f64| top + 30.0 + height - (y - y0) / (y1 - y0) * height;
    let _ = writeln!(
        out,
        r#"<text x="{left}" y="{:.1}" font-size="14">{title}</text>"#,
        top + 18.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left}" y="{:.1}" width="{width}" height="{height}" fill="none" stroke="#999"/>"##,
        top + 30.0
    );
    for (v, y) in [(y1, sy(y1)), (y0, sy(y0))] {
        let _ = writeln!(out, r#"<text x="4" y="{:.1}" font-size="11">{v:.3}</text>"#, y + 4.0);
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11">{v:.0}</text>"#,
            x - 4.0,
            top + 30.0 + height + 14.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            coords.join(" ")
        );
        let ly = top + 44.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{}">{}</text>"#,
            left + width - 110.0,
            s.color,
            s.label
        );
    }
}

/// Loss curves (and accuracy, when recorded) against epoch as an SVG document.
pub fn curves_svg(name: &str, records: &[MetricsRecord]) -> String {
    let epoch = |r: &MetricsRecord| r.epoch as f64;
    let losses = [
        Series {
            label: "train loss",
            color: "#1f77b4",
            points: records.iter().map(|r| (epoch(r), r.train_loss)).collect(),
        },
        Series {
            label: "eval loss",
            color: "#d62728",
            points: records.iter().map(|r| (epoch(r), r.eval_loss)).collect(),
        },
    ];
    let acc: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.eval_accuracy.map(|a| (epoch(r), a * 100.0)))
        .collect();
    let height = if acc.is_empty() { 300 } else { 600 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="640" height="{height}" viewBox="0 0 640 {height}">"#
    );
    chart(&mut out, 0.0, &format!("{name}: loss"), &losses);
    if !acc.is_empty() {
        chart(
            &mut out,
            300.0,
            &format!("{name}: eval accuracy (%)"),
            &[Series {
                label: "eval accuracy",
                color: "#2ca02c",
                points: acc,
            }],
        );
    }
    out.push_str("</svg>\n");
    out
}
