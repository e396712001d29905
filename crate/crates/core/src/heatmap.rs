//! Attention heatmap emission for one utterance: each modality's
//! reprojected temporal track at the cycle-encoder length, plus the full
//! per-channel attention maps, written as plain CSV for plotting.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use crate::checkpoint::Checkpoint;
use crate::cycle::resample_track;
use crate::error::{ensure_finite, Error, Result};
use crate::manifest::Manifest;
use crate::model::Model;
use crate::train::load_sample;

/// Where one emission landed.
#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub audio_temporal: PathBuf,
    pub visual_temporal: PathBuf,
    pub audio_weights: PathBuf,
    pub visual_weights: PathBuf,
}

fn format_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format_row(row));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::parse(
                        path.display().to_string(),
                        format!("line {}: '{cell}' is not a number", lineno + 1),
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn track_rows(track: &Array1<f64>) -> Vec<Vec<f64>> {
    vec![track.to_vec()]
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Write the four CSVs for one utterance. The utterance is resolved
/// against `manifest_override` when given, otherwise against the
/// training manifest recorded in the checkpoint.
pub fn emit_heatmap(
    ck: &Checkpoint,
    utt_id: &str,
    manifest_override: Option<&Path>,
    out_dir: &Path,
) -> Result<HeatmapFiles> {
    let model = Model::from_checkpoint(ck)?;
    let manifest_path = match manifest_override {
        Some(p) => p.to_path_buf(),
        None => {
            if model.config.train_manifest.is_empty() {
                return Err(Error::contract(
                    "checkpoint records no training manifest; pass one explicitly",
                ));
            }
            PathBuf::from(&model.config.train_manifest)
        }
    };
    let manifest = Manifest::load(&manifest_path)?;
    let entry = manifest.entry(utt_id).ok_or_else(|| {
        Error::contract(format!(
            "utterance '{utt_id}' is not in manifest {}",
            manifest_path.display()
        ))
    })?;
    let sample = load_sample(entry, 0)?;
    let (_, att_a, att_v) = model.embed_pair(&sample.audio, &sample.visual, utt_id)?;

    let track_a = resample_track(&att_a.temporal_tanh, model.config.audio_track_len)?;
    let track_v = resample_track(&att_v.temporal_tanh, model.config.visual_track_len)?;
    ensure_finite("audio temporal track", track_a.iter().copied())?;
    ensure_finite("visual temporal track", track_v.iter().copied())?;
    ensure_finite("audio attention map", att_a.weights.iter().copied())?;
    ensure_finite("visual attention map", att_v.weights.iter().copied())?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let files = HeatmapFiles {
        audio_temporal: out_dir.join("audio_temporal.csv"),
        visual_temporal: out_dir.join("visual_temporal.csv"),
        audio_weights: out_dir.join("audio_weights.csv"),
        visual_weights: out_dir.join("visual_weights.csv"),
    };
    write_csv(&files.audio_temporal, &track_rows(&track_a))?;
    write_csv(&files.visual_temporal, &track_rows(&track_v))?;
    write_csv(&files.audio_weights, &matrix_rows(&att_a.weights))?;
    write_csv(&files.visual_weights, &matrix_rows(&att_v.weights))?;
    Ok(files)
}
