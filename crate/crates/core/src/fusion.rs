//! Gated fusion of the two modality embeddings, plus the orthogonality
//! penalty on the branch projections.
//!
//! Each pooled `2C` statistics vector is projected to the shared embedding
//! width `D`; a sigmoid gate computed from the concatenated projections
//! blends them elementwise, and one output map produces the fused
//! embedding. The branch projections `u_a`, `u_v` double as the unimodal
//! utterance embeddings used for scoring and classification.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::cycle::COS_EPS;
use crate::error::{ensure_finite, Error, Result};
use crate::params::{xavier, ParamSet, ParamVars};
use crate::Modality;

/// One utterance-level embedding vector with its provenance.
#[derive(Debug, Clone)]
pub struct UtteranceEmbedding {
    pub values: Array1<f64>,
    pub modality: Modality,
    pub utt_id: String,
    pub identity_id: Option<String>,
}

impl UtteranceEmbedding {
    pub fn new(
        values: Array1<f64>,
        modality: Modality,
        utt_id: impl Into<String>,
        identity_id: Option<String>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("utterance embedding is empty"));
        }
        ensure_finite("utterance embedding", values.iter().copied())?;
        Ok(UtteranceEmbedding {
            values,
            modality,
            utt_id: utt_id.into(),
            identity_id,
        })
    }
}

/// The four affine maps of the fusion block.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub proj_a_w: Array2<f64>,
    pub proj_a_b: Array1<f64>,
    pub proj_v_w: Array2<f64>,
    pub proj_v_b: Array1<f64>,
    pub gate_w: Array2<f64>,
    pub gate_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl FusionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        proj_a_w: Array2<f64>,
        proj_a_b: Array1<f64>,
        proj_v_w: Array2<f64>,
        proj_v_b: Array1<f64>,
        gate_w: Array2<f64>,
        gate_b: Array1<f64>,
        out_w: Array2<f64>,
        out_b: Array1<f64>,
    ) -> Result<Self> {
        let d = proj_a_w.nrows();
        if proj_v_w.nrows() != d
            || proj_a_b.len() != d
            || proj_v_b.len() != d
            || gate_w.nrows() != d
            || gate_w.ncols() != 2 * d
            || gate_b.len() != d
            || out_w.nrows() != d
            || out_w.ncols() != d
            || out_b.len() != d
        {
            return Err(Error::contract(
                "fusion maps do not compose: projections, gate, and output must share D",
            ));
        }
        let p = FusionParams {
            proj_a_w,
            proj_a_b,
            proj_v_w,
            proj_v_b,
            gate_w,
            gate_b,
            out_w,
            out_b,
        };
        ensure_finite(
            "fusion params",
            p.proj_a_w
                .iter()
                .chain(p.proj_a_b.iter())
                .chain(p.proj_v_w.iter())
                .chain(p.proj_v_b.iter())
                .chain(p.gate_w.iter())
                .chain(p.gate_b.iter())
                .chain(p.out_w.iter())
                .chain(p.out_b.iter())
                .copied(),
        )?;
        Ok(p)
    }

    pub fn embed_dim(&self) -> usize {
        self.proj_a_w.nrows()
    }

    pub fn audio_in_dim(&self) -> usize {
        self.proj_a_w.ncols()
    }

    pub fn visual_in_dim(&self) -> usize {
        self.proj_v_w.ncols()
    }

    /// Random init; gate starts at 0.5 everywhere via zero gate weights.
    pub fn init<R: Rng>(audio_in: usize, visual_in: usize, d: usize, rng: &mut R) -> Self {
        let d2 = |rng: &mut R, a: usize, b: usize| {
            xavier(rng, &[a, b], b, a)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        FusionParams {
            proj_a_w: d2(rng, d, audio_in),
            proj_a_b: Array1::zeros(d),
            proj_v_w: d2(rng, d, visual_in),
            proj_v_b: Array1::zeros(d),
            gate_w: d2(rng, d, 2 * d),
            gate_b: Array1::zeros(d),
            out_w: d2(rng, d, d),
            out_b: Array1::zeros(d),
        }
    }

    pub fn register(&self, ps: &mut ParamSet, prefix: &str) {
        ps.insert(&format!("{prefix}.proj_a.w"), self.proj_a_w.clone().into_dyn());
        ps.insert(&format!("{prefix}.proj_a.b"), self.proj_a_b.clone().into_dyn());
        ps.insert(&format!("{prefix}.proj_v.w"), self.proj_v_w.clone().into_dyn());
        ps.insert(&format!("{prefix}.proj_v.b"), self.proj_v_b.clone().into_dyn());
        ps.insert(&format!("{prefix}.gate.w"), self.gate_w.clone().into_dyn());
        ps.insert(&format!("{prefix}.gate.b"), self.gate_b.clone().into_dyn());
        ps.insert(&format!("{prefix}.out.w"), self.out_w.clone().into_dyn());
        ps.insert(&format!("{prefix}.out.b"), self.out_b.clone().into_dyn());
    }

    pub fn from_params(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let get2 = |n: &str| -> Result<Array2<f64>> {
            ps.try_get(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::contract(format!("missing parameter {prefix}.{n}")))?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::contract(format!("{prefix}.{n} is not a matrix")))
        };
        let get1 = |n: &str| -> Result<Array1<f64>> {
            ps.try_get(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::contract(format!("missing parameter {prefix}.{n}")))?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::contract(format!("{prefix}.{n} is not a vector")))
        };
        FusionParams::new(
            get2("proj_a.w")?,
            get1("proj_a.b")?,
            get2("proj_v.w")?,
            get1("proj_v.b")?,
            get2("gate.w")?,
            get1("gate.b")?,
            get2("out.w")?,
            get1("out.b")?,
        )
    }

    pub fn project_audio(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.audio_in_dim() {
            return Err(Error::contract(format!(
                "audio projection expects length {}, got {}",
                self.audio_in_dim(),
                x.len()
            )));
        }
        Ok(self.proj_a_w.dot(x) + &self.proj_a_b)
    }

    pub fn project_visual(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.visual_in_dim() {
            return Err(Error::contract(format!(
                "visual projection expects length {}, got {}",
                self.visual_in_dim(),
                x.len()
            )));
        }
        Ok(self.proj_v_w.dot(x) + &self.proj_v_b)
    }
}

/// Everything the fusion block computes for one utterance pair.
#[derive(Debug, Clone)]
pub struct FusedOutput {
    pub u_a: Array1<f64>,
    pub u_v: Array1<f64>,
    pub gate: Array1<f64>,
    pub fused: Array1<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projects both pooled vectors, gates them, and emits the fused
/// embedding together with the branch projections.
pub fn gated_fuse(
    x_a: &UtteranceEmbedding,
    x_v: &UtteranceEmbedding,
    p: &FusionParams,
) -> Result<FusedOutput> {
    if x_a.modality != Modality::Audio || x_v.modality != Modality::Visual {
        return Err(Error::contract(
            "gated fusion expects an (audio, visual) embedding pair in that order",
        ));
    }
    let u_a = p.project_audio(&x_a.values)?;
    let u_v = p.project_visual(&x_v.values)?;
    let cat = Array1::from_iter(u_a.iter().chain(u_v.iter()).copied());
    let gate = (self::affine(&p.gate_w, &p.gate_b, &cat)).mapv(sigmoid);
    let mix = &gate * &u_a + &(gate.mapv(|g| 1.0 - g)) * &u_v;
    let fused = self::affine(&p.out_w, &p.out_b, &mix);
    Ok(FusedOutput { u_a, u_v, gate, fused })
}

fn affine(w: &Array2<f64>, b: &Array1<f64>, x: &Array1<f64>) -> Array1<f64> {
    w.dot(x) + b
}

fn cos_guarded(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let nx = x.dot(x).sqrt();
    let ny = y.dot(y).sqrt();
    if nx < COS_EPS || ny < COS_EPS {
        return 0.0;
    }
    x.dot(y) / (nx * ny)
}

/// Mean squared cosine between index-paired branch embeddings.
pub fn orthogonality_penalty(
    batch_a: &[UtteranceEmbedding],
    batch_v: &[UtteranceEmbedding],
) -> Result<f64> {
    if batch_a.len() != batch_v.len() {
        return Err(Error::contract(format!(
            "orthogonality penalty needs equal batch sizes, got {} and {}",
            batch_a.len(),
            batch_v.len()
        )));
    }
    if batch_a.is_empty() {
        return Err(Error::contract("orthogonality penalty over an empty batch"));
    }
    let mut acc = 0.0;
    for (a, v) in batch_a.iter().zip(batch_v.iter()) {
        let c = cos_guarded(&a.values, &v.values);
        acc += c * c;
    }
    Ok(acc / batch_a.len() as f64)
}

/// Graph leaves for the fusion block.
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub proj_a_w: Var,
    pub proj_a_b: Var,
    pub proj_v_w: Var,
    pub proj_v_b: Var,
    pub gate_w: Var,
    pub gate_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl FusionVars {
    pub fn from_param_vars(vars: &ParamVars, prefix: &str) -> Self {
        FusionVars {
            proj_a_w: vars.var(&format!("{prefix}.proj_a.w")),
            proj_a_b: vars.var(&format!("{prefix}.proj_a.b")),
            proj_v_w: vars.var(&format!("{prefix}.proj_v.w")),
            proj_v_b: vars.var(&format!("{prefix}.proj_v.b")),
            gate_w: vars.var(&format!("{prefix}.gate.w")),
            gate_b: vars.var(&format!("{prefix}.gate.b")),
            out_w: vars.var(&format!("{prefix}.out.w")),
            out_b: vars.var(&format!("{prefix}.out.b")),
        }
    }
}

/// Tape handles for the fusion outputs.
pub struct FusionNodes {
    pub u_a: Var,
    pub u_v: Var,
    pub gate: Var,
    pub fused: Var,
}

/// Tape version of [`gated_fuse`] on pooled vectors `x_a`, `x_v`.
pub fn gated_fuse_graph(g: &mut Graph, x_a: Var, x_v: Var, p: FusionVars) -> FusionNodes {
    let ua_lin = g.matvec(p.proj_a_w, x_a);
    let u_a = g.add(ua_lin, p.proj_a_b);
    let uv_lin = g.matvec(p.proj_v_w, x_v);
    let u_v = g.add(uv_lin, p.proj_v_b);
    let cat = g.concat(u_a, u_v);
    let gate_lin = g.matvec(p.gate_w, cat);
    let gate_aff = g.add(gate_lin, p.gate_b);
    let gate = g.sigmoid(gate_aff);
    let ga = g.mul(gate, u_a);
    let neg_gate = g.neg(gate);
    let inv_gate = g.add_const(neg_gate, 1.0);
    let gv = g.mul(inv_gate, u_v);
    let mix = g.add(ga, gv);
    let out_lin = g.matvec(p.out_w, mix);
    let fused = g.add(out_lin, p.out_b);
    FusionNodes { u_a, u_v, gate, fused }
}

/// Tape version of one squared-cosine penalty term.
pub fn ortho_pair_graph(g: &mut Graph, u_a: Var, u_v: Var) -> Var {
    let c = g.cosine(u_a, u_v);
    g.mul(c, c)
}
