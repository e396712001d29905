//! Evaluation driver: extracts embeddings for every manifest utterance,
//! scores a trial list on the requested system, and reports EER and
//! minDCF. Score normalization draws its cohort from per-identity mean
//! embeddings over the training manifest recorded in the checkpoint, so
//! an evaluation needs nothing beyond the checkpoint and the eval data.
//!
//! The ensemble system always works on normalized branch scores; mixing
//! raw and normalized scales across branches would let one branch's
//! score range dominate the average.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array1;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::UtteranceEmbedding;
use crate::manifest::Manifest;
use crate::model::Model;
use crate::scoring::{
    adaptive_snorm, compute_eer, compute_mindcf, cosine_score, ensemble_scores, CohortStats,
    ScoreSet, ScoredTrial, Trial, TrialLabel, TrialList,
};
use crate::train::load_samples;
use crate::Modality;

/// Which scores an evaluation reports: one branch, or the average of all
/// three branches after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMode {
    Single(Modality),
    Ensemble,
}

impl ScoreMode {
    pub fn parse(name: &str) -> Result<ScoreMode> {
        match name {
            "audio" => Ok(ScoreMode::Single(Modality::Audio)),
            "visual" => Ok(ScoreMode::Single(Modality::Visual)),
            "fused" => Ok(ScoreMode::Single(Modality::Fused)),
            "ensemble" => Ok(ScoreMode::Ensemble),
            other => Err(Error::contract(format!(
                "unknown modality '{other}'; expected audio, visual, fused, or ensemble"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreMode::Single(m) => m.name(),
            ScoreMode::Ensemble => "ensemble",
        }
    }
}

/// One utterance's three scoring embeddings.
#[derive(Debug, Clone)]
pub struct BranchEmbeddings {
    pub audio: UtteranceEmbedding,
    pub visual: UtteranceEmbedding,
    pub fused: UtteranceEmbedding,
}

impl BranchEmbeddings {
    pub fn branch(&self, m: Modality) -> &UtteranceEmbedding {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::Fused => &self.fused,
        }
    }
}

/// Evaluation result: per-trial scores in trial-list order plus the
/// operating-point summary.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub mode: ScoreMode,
    pub snorm: bool,
    pub scored: Vec<ScoredTrial>,
    pub score_set: ScoreSet,
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
}

fn wrap(values: Array1<f64>, m: Modality, utt_id: &str, identity: Option<String>) -> Result<UtteranceEmbedding> {
    UtteranceEmbedding::new(values, m, utt_id, identity)
}

/// Embeddings for every utterance in a manifest, in manifest order.
pub fn manifest_embeddings(
    model: &Model,
    manifest: &Manifest,
) -> Result<Vec<BranchEmbeddings>> {
    let samples = load_samples(manifest)?;
    let mut out = Vec::with_capacity(samples.len());
    for (sample, entry) in samples.iter().zip(&manifest.entries) {
        let (set, _, _) = model.embed_pair(&sample.audio, &sample.visual, &sample.utt_id)?;
        let ident = Some(entry.identity.clone());
        out.push(BranchEmbeddings {
            audio: wrap(set.u_a, Modality::Audio, &sample.utt_id, ident.clone())?,
            visual: wrap(set.u_v, Modality::Visual, &sample.utt_id, ident.clone())?,
            fused: wrap(set.fused, Modality::Fused, &sample.utt_id, ident)?,
        });
    }
    Ok(out)
}

/// Per-branch normalization cohorts: one mean embedding per training
/// identity, computed from the manifest recorded in the checkpoint.
pub struct Cohorts {
    pub audio: CohortStats,
    pub visual: CohortStats,
    pub fused: CohortStats,
}

impl Cohorts {
    pub fn branch(&self, m: Modality) -> &CohortStats {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::Fused => &self.fused,
        }
    }
}

pub fn training_cohorts(model: &Model) -> Result<Cohorts> {
    if model.config.train_manifest.is_empty() {
        return Err(Error::contract(
            "score normalization needs the training manifest recorded in the checkpoint",
        ));
    }
    let manifest = Manifest::load(Path::new(&model.config.train_manifest))?;
    let identities = manifest.identities();
    let embeddings = manifest_embeddings(model, &manifest)?;

    let cohort = |m: Modality| -> Result<CohortStats> {
        let mut means = Vec::with_capacity(identities.len());
        for ident in &identities {
            let members: Vec<&Array1<f64>> = embeddings
                .iter()
                .zip(&manifest.entries)
                .filter(|(_, e)| &e.identity == ident)
                .map(|(b, _)| &b.branch(m).values)
                .collect();
            let dim = members[0].len();
            let mut mean = Array1::<f64>::zeros(dim);
            for v in &members {
                mean += *v;
            }
            mean /= members.len() as f64;
            means.push(wrap(mean, m, ident, Some(ident.clone()))?);
        }
        let top_k = model.config.top_k.min(means.len());
        CohortStats::new(means, top_k)
    };

    Ok(Cohorts {
        audio: cohort(Modality::Audio)?,
        visual: cohort(Modality::Visual)?,
        fused: cohort(Modality::Fused)?,
    })
}

fn embedding_index(embeddings: &[BranchEmbeddings]) -> HashMap<&str, &BranchEmbeddings> {
    embeddings
        .iter()
        .map(|b| (b.audio.utt_id.as_str(), b))
        .collect()
}

fn check_trial_coverage(
    trials: &[Trial],
    index: &HashMap<&str, &BranchEmbeddings>,
) -> Result<()> {
    let mut missing: Vec<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .filter(|id| !index.contains_key(id))
        .collect();
    missing.sort_unstable();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "trial list names utterances absent from the manifest: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

fn branch_scores(
    trials: &[Trial],
    index: &HashMap<&str, &BranchEmbeddings>,
    m: Modality,
    cohort: Option<&CohortStats>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let e = index[t.enroll.as_str()].branch(m);
        let s = index[t.test.as_str()].branch(m);
        let raw = cosine_score(e, s)?;
        out.push(match cohort {
            Some(c) => adaptive_snorm(raw, e, s, c)?,
            None => raw,
        });
    }
    Ok(out)
}

/// Score a trial list against a checkpoint and summarize the operating
/// points. The ensemble mode normalizes each branch regardless of the
/// `snorm` flag.
pub fn run_eval(
    ck: &Checkpoint,
    manifest_path: &Path,
    trials_path: &Path,
    mode: ScoreMode,
    snorm: bool,
) -> Result<EvalOutcome> {
    let model = Model::from_checkpoint(ck)?;
    let manifest = Manifest::load(manifest_path)?;
    let trial_list = TrialList::load(trials_path)?;
    let embeddings = manifest_embeddings(&model, &manifest)?;
    let index = embedding_index(&embeddings);
    check_trial_coverage(&trial_list.trials, &index)?;

    let needs_cohort = snorm || mode == ScoreMode::Ensemble;
    let cohorts = if needs_cohort {
        Some(training_cohorts(&model)?)
    } else {
        None
    };

    let scores = match mode {
        ScoreMode::Single(m) => branch_scores(
            &trial_list.trials,
            &index,
            m,
            cohorts.as_ref().map(|c| c.branch(m)),
        )?,
        ScoreMode::Ensemble => {
            let c = cohorts.as_ref().unwrap();
            let systems = [Modality::Audio, Modality::Visual, Modality::Fused]
                .into_iter()
                .map(|m| branch_scores(&trial_list.trials, &index, m, Some(c.branch(m))))
                .collect::<Result<Vec<_>>>()?;
            ensemble_scores(&systems, None)?
        }
    };

    let mut target = Vec::new();
    let mut nontarget = Vec::new();
    for (t, &s) in trial_list.trials.iter().zip(&scores) {
        match t.label {
            TrialLabel::Target => target.push(s),
            TrialLabel::Nontarget => nontarget.push(s),
        }
    }
    let score_set = ScoreSet::new(target, nontarget)?;
    let (eer, eer_threshold) = compute_eer(&score_set)?;
    let min_dcf = compute_mindcf(
        &score_set,
        ck.config.p_target,
        ck.config.c_miss,
        ck.config.c_fa,
    )?;

    let scored = trial_list
        .trials
        .iter()
        .zip(&scores)
        .map(|(t, &score)| ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score,
        })
        .collect();

    Ok(EvalOutcome {
        mode,
        snorm,
        scored,
        score_set,
        eer,
        eer_threshold,
        min_dcf,
    })
}
