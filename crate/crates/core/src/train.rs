//! Staged training driver: loads the manifest and its frame arrays,
//! builds one loss graph per utterance, and applies batch-mean SGD with
//! a halving learning-rate schedule. Each stage updates only its own
//! parameter groups, so a checkpoint can seed the next stage unchanged.

use std::path::Path;

use ndarray::Ix2;

use crate::checkpoint::{Checkpoint, HistoryEntry};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry};
use crate::model::{trainable_prefixes, Model, UttSample};
use crate::params::GradMap;
use crate::seeds::{self, Stream};
use rand::seq::SliceRandom;

/// Read one manifest entry's frame arrays into memory.
pub fn load_sample(entry: &ManifestEntry, label: usize) -> Result<UttSample> {
    let audio = crate::archive::read_array(&entry.audio_path)?
        .into_dimensionality::<Ix2>()
        .map_err(|_| {
            Error::contract(format!("audio array for {} must be rank 2", entry.utt_id))
        })?;
    let visual = crate::archive::read_array(&entry.visual_path)?;
    if visual.ndim() != 4 {
        return Err(Error::contract(format!(
            "visual array for {} must be rank 4",
            entry.utt_id
        )));
    }
    Ok(UttSample {
        utt_id: entry.utt_id.clone(),
        label,
        audio,
        visual,
    })
}

/// Read every utterance named by the manifest into memory. Labels are
/// class indices in identity first-appearance order.
pub fn load_samples(manifest: &Manifest) -> Result<Vec<UttSample>> {
    manifest
        .entries
        .iter()
        .zip(manifest.class_indices())
        .map(|(entry, label)| load_sample(entry, label))
        .collect()
}

fn learning_rate(cfg: &RunConfig, epoch: usize) -> f64 {
    let halvings = if cfg.lr_halve_every == 0 {
        0
    } else {
        epoch / cfg.lr_halve_every
    };
    cfg.lr / f64::powi(2.0, halvings as i32)
}

/// Train one stage from scratch or from a previous stage's checkpoint.
/// `on_epoch` sees each finished epoch's history entry as it lands.
pub fn run_train(
    cfg: &RunConfig,
    init: Option<&Checkpoint>,
    mut on_epoch: impl FnMut(&HistoryEntry),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.train_manifest.is_empty() {
        return Err(Error::contract("training requires a train_manifest path"));
    }
    let manifest = Manifest::load(Path::new(&cfg.train_manifest))?;
    let num_classes = manifest.identities().len();
    let samples = load_samples(&manifest)?;

    let (mut model, mut history) = match init {
        Some(ck) => {
            let prev = Model::from_checkpoint(ck)?;
            if prev.num_classes != num_classes {
                return Err(Error::contract(format!(
                    "checkpoint has {} training identities, manifest has {num_classes}",
                    prev.num_classes
                )));
            }
            let model = Model {
                config: cfg.clone(),
                num_classes,
                params: prev.params,
            };
            (model, ck.history.clone())
        }
        None => (Model::init(cfg, num_classes)?, Vec::new()),
    };

    let prefixes = trainable_prefixes(cfg.stage, cfg.freeze_backbones);
    let keep = |name: &str| prefixes.iter().any(|p| name.starts_with(p));

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeds::rng(cfg.seed, Stream::BatchShuffle, epoch as u64));

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut gm = GradMap::new();
            for &i in batch {
                let mut g = crate::autodiff::Graph::new();
                let vars = model.params.leaves(&mut g);
                let loss = model.utterance_loss_graph(&mut g, &vars, &samples[i])?;
                loss_sum += g.scalar_value(loss);
                let grads = g.backward(loss);
                gm.accumulate(&grads, &vars);
            }
            model.params.sgd_step(&gm, lr, cfg.weight_decay, keep);
        }

        let entry = HistoryEntry {
            stage: cfg.stage,
            epoch: epoch as u32,
            loss: loss_sum / samples.len() as f64,
        };
        on_epoch(&entry);
        history.push(entry);
    }

    let mut ck = Checkpoint::new(cfg.clone(), model.params);
    ck.epoch = cfg.epochs as u32;
    ck.history = history;
    Ok(ck)
}
