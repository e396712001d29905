//! Deterministic synthetic paired audio-visual corpus with identity and
//! keyframe structure.
//!
//! Every identity owns one audio and one visual prototype vector; an
//! utterance plants each prototype into a subset of frames (the
//! keyframes) and fills everything else with noise. The audio and visual
//! keyframe masks are complementary with a configurable overlap fraction,
//! so each modality carries identity evidence the other lacks at those
//! times. All artifacts are pure functions of (config, seed).

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::archive;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scoring::{Trial, TrialLabel, TrialList};
use crate::seeds::{self, Stream};

/// Attempts before giving up on the prototype separation margin.
const MAX_BANK_ATTEMPTS: u64 = 32;

/// Per-identity prototype vectors for both modalities.
#[derive(Debug, Clone)]
pub struct IdentityBank {
    pub num_identities: usize,
    pub audio_prototypes: Array2<f64>,
    /// Flattened `H x W` grey prototype per row.
    pub visual_prototypes: Array2<f64>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

/// One synthetic utterance: paired tracks plus the planted keyframe masks.
#[derive(Debug, Clone)]
pub struct UtterancePair {
    pub audio_frames: Array2<f64>,
    pub visual_frames: ArrayD<f64>,
    pub identity: usize,
    pub keyframe_mask_a: Vec<bool>,
    pub keyframe_mask_v: Vec<bool>,
}

fn min_pairwise_distance(rows: &Array2<f64>) -> f64 {
    let n = rows.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = rows
                .row(i)
                .iter()
                .zip(rows.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d < best {
                best = d;
            }
        }
    }
    best
}

fn draw_rows<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |_| rng.sample(StandardNormal))
}

/// Draw prototype banks until both modalities meet the separation margin.
pub fn generate_identity_bank(
    n: usize,
    seed: u64,
    audio_dim: usize,
    height: usize,
    width: usize,
    margin: f64,
) -> Result<IdentityBank> {
    if n < 2 {
        return Err(Error::contract(format!(
            "identity bank needs at least 2 identities, got {n}"
        )));
    }
    if audio_dim == 0 || height == 0 || width == 0 {
        return Err(Error::contract("prototype dims must be positive"));
    }
    for attempt in 0..MAX_BANK_ATTEMPTS {
        let mut rng = seeds::rng(seed, Stream::Prototypes, attempt);
        let audio = draw_rows(&mut rng, n, audio_dim);
        let visual = draw_rows(&mut rng, n, height * width);
        if min_pairwise_distance(&audio) >= margin && min_pairwise_distance(&visual) >= margin {
            return Ok(IdentityBank {
                num_identities: n,
                audio_prototypes: audio,
                visual_prototypes: visual,
                height,
                width,
                seed,
            });
        }
    }
    Err(Error::contract(format!(
        "could not separate {n} prototypes by margin {margin} in dims {audio_dim} and {height}x{width}; \
         use larger dims or a smaller margin"
    )))
}

/// Keyframe count for a track: the rounded fraction, floored at one.
fn keyframe_count(t_len: usize, frac: f64) -> usize {
    ((t_len as f64 * frac).round() as usize).clamp(1, t_len)
}

/// Pick the two masks as circular blocks on normalized time, the visual
/// block placed so that an `overlap` share of it lands on the audio block.
/// With equal track lengths and `overlap` 0 the masks are exactly disjoint
/// whenever the counts leave room. Blocks rather than scattered frames:
/// identity evidence arrives in contiguous stretches, so a narrow temporal
/// context cannot bleed it into most of the non-key frames.
fn sample_masks<R: Rng>(
    rng: &mut R,
    t_a: usize,
    t_v: usize,
    frac: f64,
    overlap: f64,
) -> (Vec<bool>, Vec<bool>) {
    let k_a = keyframe_count(t_a, frac);
    let k_v = keyframe_count(t_v, frac);

    let s_a = rng.random_range(0..t_a);
    let mut mask_a = vec![false; t_a];
    for i in 0..k_a {
        mask_a[(s_a + i) % t_a] = true;
    }

    let f_a = k_a as f64 / t_a as f64;
    let f_v = k_v as f64 / t_v as f64;
    let start = (s_a as f64 / t_a as f64 + f_a - overlap * f_v).rem_euclid(1.0);
    let s_v = ((start * t_v as f64).round() as usize) % t_v;
    let mut mask_v = vec![false; t_v];
    for j in 0..k_v {
        mask_v[(s_v + j) % t_v] = true;
    }
    (mask_a, mask_v)
}

/// Build one utterance for an identity. Keyframes carry the prototype
/// plus `noise_sigma`-scaled noise; other frames carry the noise alone.
pub fn sample_paired_sequences(
    bank: &IdentityBank,
    identity: usize,
    t_a: usize,
    t_v: usize,
    noise_sigma: f64,
    overlap: f64,
    frac: f64,
    seed: u64,
) -> Result<UtterancePair> {
    if identity >= bank.num_identities {
        return Err(Error::contract(format!(
            "identity {identity} outside bank of {}",
            bank.num_identities
        )));
    }
    if t_a == 0 || t_v == 0 {
        return Err(Error::contract("track lengths must be at least 1"));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::contract(format!(
            "keyframe overlap must sit in [0, 1], got {overlap}"
        )));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::contract(format!(
            "keyframe fraction must sit in (0, 1], got {frac}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::contract(format!(
            "noise sigma must be nonnegative, got {noise_sigma}"
        )));
    }

    let mut mask_rng = seeds::rng(seed, Stream::Keyframes, 0);
    let (mask_a, mask_v) = sample_masks(&mut mask_rng, t_a, t_v, frac, overlap);

    let mut noise_rng = seeds::rng(seed, Stream::UtteranceNoise, 0);
    let audio_dim = bank.audio_prototypes.ncols();
    let mut audio = Array2::<f64>::zeros((t_a, audio_dim));
    for t in 0..t_a {
        for d in 0..audio_dim {
            let noise: f64 = noise_rng.sample(StandardNormal);
            let base = if mask_a[t] {
                bank.audio_prototypes[[identity, d]]
            } else {
                0.0
            };
            audio[[t, d]] = base + noise_sigma * noise;
        }
    }

    let (h, w) = (bank.height, bank.width);
    let mut visual = ArrayD::<f64>::zeros(IxDyn(&[t_v, 1, h, w]));
    for t in 0..t_v {
        for i in 0..h {
            for j in 0..w {
                let noise: f64 = noise_rng.sample(StandardNormal);
                let base = if mask_v[t] {
                    bank.visual_prototypes[[identity, i * w + j]]
                } else {
                    0.0
                };
                visual[[t, 0, i, j]] = base + noise_sigma * noise;
            }
        }
    }

    Ok(UtterancePair {
        audio_frames: audio,
        visual_frames: visual,
        identity,
        keyframe_mask_a: mask_a,
        keyframe_mask_v: mask_v,
    })
}

/// Balanced verification trials over the given utterances. Sampling is
/// with replacement, so trial counts need not fit the number of distinct
/// pairs; no trial ever pairs an utterance with itself.
pub fn make_trials(
    bank: &IdentityBank,
    utterances: &[(String, usize)],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<TrialList> {
    if n_target + n_nontarget == 0 {
        return Err(Error::contract("a trial list cannot be empty"));
    }
    for (id, ident) in utterances {
        if *ident >= bank.num_identities {
            return Err(Error::contract(format!(
                "utterance {id} names identity {ident} outside bank of {}",
                bank.num_identities
            )));
        }
    }
    let mut by_identity: Vec<Vec<&str>> = vec![Vec::new(); bank.num_identities];
    for (id, ident) in utterances {
        by_identity[*ident].push(id);
    }
    let pairable: Vec<usize> = (0..bank.num_identities)
        .filter(|&i| by_identity[i].len() >= 2)
        .collect();
    if n_target > 0 && pairable.is_empty() {
        return Err(Error::contract(
            "target trials need an identity with at least two utterances",
        ));
    }
    let populated: Vec<usize> = (0..bank.num_identities)
        .filter(|&i| !by_identity[i].is_empty())
        .collect();
    if n_nontarget > 0 && populated.len() < 2 {
        return Err(Error::contract(
            "nontarget trials need utterances from at least two identities",
        ));
    }

    let mut rng = seeds::rng(seed, Stream::TrialSelection, 0);
    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for _ in 0..n_target {
        let ident = pairable[rng.random_range(0..pairable.len())];
        let utts = &by_identity[ident];
        let a = rng.random_range(0..utts.len());
        let mut b = rng.random_range(0..utts.len() - 1);
        if b >= a {
            b += 1;
        }
        trials.push(Trial {
            label: TrialLabel::Target,
            enroll: utts[a].to_string(),
            test: utts[b].to_string(),
        });
    }
    for _ in 0..n_nontarget {
        let pa = rng.random_range(0..populated.len());
        let mut pb = rng.random_range(0..populated.len() - 1);
        if pb >= pa {
            pb += 1;
        }
        let utts_a = &by_identity[populated[pa]];
        let utts_b = &by_identity[populated[pb]];
        trials.push(Trial {
            label: TrialLabel::Nontarget,
            enroll: utts_a[rng.random_range(0..utts_a.len())].to_string(),
            test: utts_b[rng.random_range(0..utts_b.len())].to_string(),
        });
    }
    Ok(TrialList { trials })
}

/// Seed for one utterance's masks and noise, stable across runs.
pub fn utterance_seed(seed: u64, utt_index: u64) -> u64 {
    seeds::derive(seed, Stream::UtteranceNoise, utt_index)
}

/// Utterance id layout used by the corpus writer.
pub fn utt_id(identity: usize, utt: usize) -> String {
    format!("id{identity:03}_u{utt:02}")
}

pub fn identity_label(identity: usize) -> String {
    format!("id{identity:03}")
}

/// Files a generated corpus consists of.
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub train_manifest: PathBuf,
    pub eval_manifest: Option<PathBuf>,
    pub trials: Option<PathBuf>,
}

/// Generate the whole corpus onto disk: frame arrays, train and held-out
/// manifests, and a trial list over the held-out utterances.
pub fn write_corpus(cfg: &RunConfig, out_dir: &Path) -> Result<CorpusPaths> {
    cfg.validate()?;
    let bank = generate_identity_bank(
        cfg.n_identities,
        cfg.seed,
        cfg.audio_in_dim,
        cfg.visual_size,
        cfg.visual_size,
        cfg.proto_margin,
    )?;
    let arrays = out_dir.join("arrays");
    std::fs::create_dir_all(&arrays).map_err(|e| Error::io(arrays.display().to_string(), e))?;

    let mut train_lines = String::new();
    let mut eval_lines = String::new();
    let mut eval_utts: Vec<(String, usize)> = Vec::new();
    for ident in 0..cfg.n_identities {
        for j in 0..cfg.utts_per_identity {
            let index = (ident * cfg.utts_per_identity + j) as u64;
            let pair = sample_paired_sequences(
                &bank,
                ident,
                cfg.audio_frames,
                cfg.visual_frames,
                cfg.noise_sigma,
                cfg.keyframe_overlap,
                cfg.keyframe_frac,
                utterance_seed(cfg.seed, index),
            )?;
            let id = utt_id(ident, j);
            let rel_a = format!("arrays/{id}_a.avjp");
            let rel_v = format!("arrays/{id}_v.avjp");
            archive::write_array(&out_dir.join(&rel_a), pair.audio_frames.view().into_dyn())?;
            archive::write_array(&out_dir.join(&rel_v), pair.visual_frames.view())?;
            let line = format!("{id} {} {rel_a} {rel_v}\n", identity_label(ident));
            if j < cfg.train_utts_per_identity {
                train_lines.push_str(&line);
            } else {
                eval_lines.push_str(&line);
                eval_utts.push((id, ident));
            }
        }
    }

    let train_manifest = out_dir.join("train_manifest.txt");
    std::fs::write(&train_manifest, train_lines)
        .map_err(|e| Error::io(train_manifest.display().to_string(), e))?;

    if eval_utts.is_empty() {
        return Ok(CorpusPaths {
            train_manifest,
            eval_manifest: None,
            trials: None,
        });
    }
    let eval_manifest = out_dir.join("eval_manifest.txt");
    std::fs::write(&eval_manifest, eval_lines)
        .map_err(|e| Error::io(eval_manifest.display().to_string(), e))?;

    let trials = make_trials(
        &bank,
        &eval_utts,
        cfg.n_target_trials,
        cfg.n_nontarget_trials,
        cfg.seed,
    )?;
    let trials_path = out_dir.join("trials.txt");
    trials.save(&trials_path)?;

    Ok(CorpusPaths {
        train_manifest,
        eval_manifest: Some(eval_manifest),
        trials: Some(trials_path),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use crate::manifest::Manifest;

    fn tiny_bank() -> IdentityBank {
        generate_identity_bank(4, 7, 12, 8, 8, 3.0).unwrap()
    }

    #[test]
    fn bank_generation_is_deterministic_and_separated() {
        let b1 = generate_identity_bank(2, 7, 12, 8, 8, 3.0).unwrap();
        let b2 = generate_identity_bank(2, 7, 12, 8, 8, 3.0).unwrap();
        assert_eq!(b1.audio_prototypes, b2.audio_prototypes);
        assert_eq!(b1.visual_prototypes, b2.visual_prototypes);
        assert!(min_pairwise_distance(&b1.audio_prototypes) >= 3.0);
        assert!(min_pairwise_distance(&b1.visual_prototypes) >= 3.0);
    }

    #[test]
    fn default_scale_bank_generates() {
        let bank = generate_identity_bank(64, 17, 24, 16, 16, 4.0).unwrap();
        assert_eq!(bank.audio_prototypes.nrows(), 64);
        assert_eq!(bank.visual_prototypes.ncols(), 256);
    }

    #[test]
    fn unachievable_separation_suggests_larger_dims() {
        let err = generate_identity_bank(40, 7, 1, 1, 1, 10.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("larger dims"), "got: {msg}");
        assert!(generate_identity_bank(1, 7, 4, 4, 4, 1.0).is_err());
    }

    #[test]
    fn noiseless_full_keyframe_utterance_repeats_the_prototype() {
        let bank = tiny_bank();
        let pair = sample_paired_sequences(&bank, 2, 5, 3, 0.0, 1.0, 1.0, 99).unwrap();
        for t in 0..5 {
            for d in 0..12 {
                assert_eq!(pair.audio_frames[[t, d]], bank.audio_prototypes[[2, d]]);
            }
        }
        for t in 0..3 {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(
                        pair.visual_frames[[t, 0, i, j]],
                        bank.visual_prototypes[[2, i * 8 + j]]
                    );
                }
            }
        }
        assert!(pair.keyframe_mask_a.iter().all(|&m| m));
        assert!(pair.keyframe_mask_v.iter().all(|&m| m));
    }

    #[test]
    fn paired_sampling_is_bit_deterministic() {
        let bank = tiny_bank();
        let p1 = sample_paired_sequences(&bank, 1, 10, 6, 0.5, 0.2, 0.3, 42).unwrap();
        let p2 = sample_paired_sequences(&bank, 1, 10, 6, 0.5, 0.2, 0.3, 42).unwrap();
        assert_eq!(p1.audio_frames, p2.audio_frames);
        assert_eq!(p1.visual_frames, p2.visual_frames);
        assert_eq!(p1.keyframe_mask_a, p2.keyframe_mask_a);
        assert_eq!(p1.keyframe_mask_v, p2.keyframe_mask_v);
    }

    #[test]
    fn zero_overlap_equal_lengths_gives_disjoint_masks() {
        let bank = tiny_bank();
        for seed in 0..20 {
            let pair = sample_paired_sequences(&bank, 0, 10, 10, 0.1, 0.0, 0.3, seed).unwrap();
            for t in 0..10 {
                assert!(
                    !(pair.keyframe_mask_a[t] && pair.keyframe_mask_v[t]),
                    "seed {seed}: overlap at frame {t}"
                );
            }
            assert!(pair.keyframe_mask_a.iter().any(|&m| m));
            assert!(pair.keyframe_mask_v.iter().any(|&m| m));
        }
    }

    #[test]
    fn full_overlap_puts_visual_keys_on_audio_keys() {
        let bank = tiny_bank();
        for seed in 0..20 {
            let pair = sample_paired_sequences(&bank, 0, 12, 12, 0.1, 1.0, 0.25, seed).unwrap();
            for t in 0..12 {
                if pair.keyframe_mask_v[t] {
                    assert!(pair.keyframe_mask_a[t], "seed {seed}: stray visual key {t}");
                }
            }
        }
    }

    #[test]
    fn every_track_gets_at_least_one_keyframe() {
        let bank = tiny_bank();
        // fraction small enough to round to zero keyframes without the floor
        let pair = sample_paired_sequences(&bank, 3, 2, 1, 0.5, 0.0, 0.05, 5).unwrap();
        assert!(pair.keyframe_mask_a.iter().any(|&m| m));
        assert!(pair.keyframe_mask_v.iter().any(|&m| m));
    }

    #[test]
    fn sampling_contract_violations_are_rejected() {
        let bank = tiny_bank();
        assert!(sample_paired_sequences(&bank, 9, 5, 3, 0.5, 0.0, 0.3, 1).is_err());
        assert!(sample_paired_sequences(&bank, 0, 0, 3, 0.5, 0.0, 0.3, 1).is_err());
        assert!(sample_paired_sequences(&bank, 0, 5, 3, 0.5, 1.5, 0.3, 1).is_err());
        assert!(sample_paired_sequences(&bank, 0, 5, 3, 0.5, 0.0, 0.0, 1).is_err());
        assert!(sample_paired_sequences(&bank, 0, 5, 3, -0.1, 0.0, 0.3, 1).is_err());
    }

    #[test]
    fn nearest_prototype_classifies_noiseless_keyframe_means_perfectly() {
        let bank = generate_identity_bank(8, 11, 12, 8, 8, 3.0).unwrap();
        for ident in 0..8 {
            let pair = sample_paired_sequences(&bank, ident, 10, 6, 0.0, 0.0, 0.3, ident as u64)
                .unwrap();
            let mut mean = Array1::<f64>::zeros(12);
            let mut count = 0.0;
            for t in 0..10 {
                if pair.keyframe_mask_a[t] {
                    mean = mean + pair.audio_frames.row(t).to_owned();
                    count += 1.0;
                }
            }
            mean.mapv_inplace(|v| v / count);
            let nearest = (0..8)
                .min_by(|&a, &b| {
                    let da: f64 = (&mean - &bank.audio_prototypes.row(a))
                        .mapv(|v| v * v)
                        .sum();
                    let db: f64 = (&mean - &bank.audio_prototypes.row(b))
                        .mapv(|v| v * v)
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(nearest, ident);
        }
    }

    #[test]
    fn trial_construction_is_balanced_and_self_free() {
        let bank = tiny_bank();
        let utts: Vec<(String, usize)> = (0..4)
            .flat_map(|i| (0..3).map(move |j| (utt_id(i, j), i)))
            .collect();
        let list = make_trials(&bank, &utts, 20, 30, 5).unwrap();
        assert_eq!(list.trials.len(), 50);
        let ident_of = |u: &str| utts.iter().find(|(id, _)| id == u).unwrap().1;
        let mut targets = 0;
        for t in &list.trials {
            assert_ne!(t.enroll, t.test);
            match t.label {
                TrialLabel::Target => {
                    targets += 1;
                    assert_eq!(ident_of(&t.enroll), ident_of(&t.test));
                }
                TrialLabel::Nontarget => assert_ne!(ident_of(&t.enroll), ident_of(&t.test)),
            }
        }
        assert_eq!(targets, 20);

        let rerun = make_trials(&bank, &utts, 20, 30, 5).unwrap();
        assert_eq!(rerun.to_text(), list.to_text());
    }

    #[test]
    fn trial_construction_contract_violations() {
        let bank = tiny_bank();
        let utts = vec![(utt_id(0, 0), 0), (utt_id(1, 0), 1)];
        assert!(make_trials(&bank, &utts, 0, 0, 1).is_err());
        // no identity has two utterances
        assert!(make_trials(&bank, &utts, 1, 0, 1).is_err());
        // only one identity populated
        let solo = vec![(utt_id(0, 0), 0), (utt_id(0, 1), 0)];
        assert!(make_trials(&bank, &solo, 0, 1, 1).is_err());
        assert!(make_trials(&bank, &solo, 2, 0, 1).is_ok());
    }

    #[test]
    fn corpus_writer_emits_loadable_manifests_and_trials() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.n_identities = 3;
        cfg.utts_per_identity = 4;
        cfg.train_utts_per_identity = 2;
        cfg.audio_frames = 6;
        cfg.visual_frames = 4;
        cfg.audio_in_dim = 10;
        cfg.visual_size = 8;
        cfg.proto_margin = 3.0;
        cfg.n_target_trials = 3;
        cfg.n_nontarget_trials = 3;
        let paths = write_corpus(&cfg, dir.path()).unwrap();

        let train = Manifest::load(&paths.train_manifest).unwrap();
        assert_eq!(train.entries.len(), 6);
        assert_eq!(train.identities().len(), 3);
        let eval = Manifest::load(paths.eval_manifest.as_ref().unwrap()).unwrap();
        assert_eq!(eval.entries.len(), 6);

        for e in train.entries.iter().chain(eval.entries.iter()) {
            let a = archive::read_array(&e.audio_path).unwrap();
            assert_eq!(a.shape(), &[6, 10]);
            let v = archive::read_array(&e.visual_path).unwrap();
            assert_eq!(v.shape(), &[4, 1, 8, 8]);
        }

        let trials = TrialList::load(paths.trials.as_ref().unwrap()).unwrap();
        assert_eq!(trials.trials.len(), 6);
        for t in &trials.trials {
            assert!(eval.entry(&t.enroll).is_some());
            assert!(eval.entry(&t.test).is_some());
        }
    }

    #[test]
    fn corpus_writer_is_byte_deterministic() {
        let run = |dir: &Path| {
            let mut cfg = RunConfig::default();
            cfg.n_identities = 2;
            cfg.utts_per_identity = 4;
            cfg.train_utts_per_identity = 2;
            cfg.audio_frames = 5;
            cfg.visual_frames = 3;
            cfg.audio_in_dim = 8;
            cfg.visual_size = 8;
            cfg.proto_margin = 2.0;
            cfg.n_target_trials = 2;
            cfg.n_nontarget_trials = 2;
            write_corpus(&cfg, dir).unwrap();
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run(d1.path());
        run(d2.path());
        for rel in [
            "train_manifest.txt",
            "eval_manifest.txt",
            "trials.txt",
            "arrays/id000_u00_a.avjp",
            "arrays/id001_u02_v.avjp",
        ] {
            let b1 = std::fs::read(d1.path().join(rel)).unwrap();
            let b2 = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(b1, b2, "file {rel} differs between runs");
        }
    }
}
