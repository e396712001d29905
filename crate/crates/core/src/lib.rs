//! Audio-visual person verification at desk scale.
//!
//! The crate implements the full processing chain behind the `avjp` tool:
//! frame encoders produce per-frame features, attentive statistics pooling
//! with a tanh reprojection of the temporal weight track condenses them to
//! utterance embeddings, cycle-consistent weight encoders tie the audio and
//! visual attention tracks together, a gated unit fuses the two modality
//! embeddings, and an additive-angular-margin head with adversarial and
//! cycle terms trains the whole stack. Scoring covers cosine trials,
//! adaptive score normalization, EER and minDCF, and score-level ensembling.
//! A deterministic synthetic corpus generator provides the data.

pub mod archive;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cycle;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod heatmap;
pub mod manifest;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pooling;
pub mod scoring;
pub mod seeds;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};

/// Which branch of the model an embedding or score came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Visual,
    Fused,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::Fused => "fused",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
