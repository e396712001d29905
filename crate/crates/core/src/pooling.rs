//! Attentive statistics pooling with a tanh reprojection of the temporal
//! attention track.
//!
//! The chain: per-frame attention logits from a bottleneck projection, a
//! temporal track obtained by collapsing the channel axis, a tanh
//! reprojection of that track about its own mean, a rescale of the logit
//! map by the reprojection ratio, a channel-wise softmax over time, and
//! weighted mean/std pooling into a `2C` embedding.
//!
//! Every step exists twice: a pure function on `ndarray` values (the unit
//! the contracts and oracle tests bind to) and a tape builder used during
//! training. A sync test keeps the two in lockstep.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{ensure_finite, Error, Result};
use crate::params::{xavier, ParamSet};
use crate::Modality;

/// Threshold under which the temporal std counts as degenerate and the
/// reprojection becomes the identity.
pub const STD_EPS: f64 = 1e-8;
/// Threshold under which a temporal entry is treated as zero and its
/// rescale ratio pinned to 1.
pub const RATIO_EPS: f64 = 1e-8;

/// Frame-level activations for one utterance, time along rows.
#[derive(Debug, Clone)]
pub struct FrameFeatures {
    pub values: Array2<f64>,
    pub modality: Modality,
    pub utt_id: String,
}

impl FrameFeatures {
    pub fn new(values: Array2<f64>, modality: Modality, utt_id: impl Into<String>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::contract(format!(
                "frame features need T >= 1 and C >= 1, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        ensure_finite("frame features", values.iter().cloned())?;
        Ok(FrameFeatures {
            values,
            modality,
            utt_id: utt_id.into(),
        })
    }
}

/// The four learned pooling tensors: bottleneck projection `w`/`b`, then
/// per-attention-channel readout rows `v` and biases `k`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array2<f64>,
    pub k: Array1<f64>,
}

impl AttentionParams {
    pub fn new(w: Array2<f64>, b: Array1<f64>, v: Array2<f64>, k: Array1<f64>) -> Result<Self> {
        if w.nrows() == 0 || v.nrows() == 0 {
            return Err(Error::contract("attention params need R >= 1 and A >= 1"));
        }
        if b.len() != w.nrows() {
            return Err(Error::contract(format!(
                "attention bias has {} entries but the projection has R={} rows",
                b.len(),
                w.nrows()
            )));
        }
        if v.ncols() != w.nrows() {
            return Err(Error::contract(format!(
                "attention readout has {} columns but the projection has R={} rows",
                v.ncols(),
                w.nrows()
            )));
        }
        if k.len() != v.nrows() {
            return Err(Error::contract(format!(
                "attention offsets have {} entries but the readout has A={} rows",
                k.len(),
                v.nrows()
            )));
        }
        ensure_finite(
            "attention params",
            w.iter().chain(b.iter()).chain(v.iter()).chain(k.iter()).cloned(),
        )?;
        Ok(AttentionParams { w, b, v, k })
    }

    pub fn channels(&self) -> usize {
        self.v.nrows()
    }

    /// Bias pulling each bottleneck pair apart; sets the width of the even
    /// response bump in the projection value.
    const PAIR_BIAS: f64 = 1.0;
    /// Column-sum carried by each paired readout column.
    const PAIR_GAIN: f64 = 2.0;
    /// Shrink on the random readout part so the paired structure dominates
    /// the temporal sum at the start.
    const READOUT_JITTER: f64 = 0.15;
    /// Initial offset per readout channel. Their sum bounds how far the
    /// paired columns can pull the temporal sum down, so it is sized to keep
    /// initial temporal sums positive.
    const OFFSET: f64 = 2.0;

    /// Random init with paired structure. Bottleneck rows 2i and 2i+1 share
    /// a direction and split their biases into +-PAIR_BIAS; the matching
    /// readout columns carry -+PAIR_GAIN/A on top of damped noise. Summed
    /// over channels, each pair contributes an even bump in the projection
    /// value, so frames with large activations start with large temporal
    /// logits instead of waiting for that preference to be learned from
    /// scratch. The offsets start at OFFSET so initial temporal sums sit
    /// well away from zero and the reprojection has a positive mean to
    /// preserve.
    pub fn init<R: Rng>(channels: usize, bottleneck: usize, rng: &mut R) -> Result<Self> {
        let mut w = xavier(rng, &[bottleneck, channels], channels, bottleneck)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut b = Array1::zeros(bottleneck);
        let mut v = xavier(rng, &[channels, bottleneck], bottleneck, channels)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        v *= Self::READOUT_JITTER;
        let shift = Self::PAIR_GAIN / channels as f64;
        for pair in 0..bottleneck / 2 {
            let (lo, hi) = (2 * pair, 2 * pair + 1);
            let dir = w.row(lo).to_owned();
            w.row_mut(hi).assign(&dir);
            b[lo] = Self::PAIR_BIAS;
            b[hi] = -Self::PAIR_BIAS;
            for c in 0..channels {
                v[[c, lo]] -= shift;
                v[[c, hi]] += shift;
            }
        }
        AttentionParams::new(w, b, v, Array1::from_elem(channels, Self::OFFSET))
    }

    pub fn register(&self, ps: &mut ParamSet, prefix: &str) {
        ps.insert(&format!("{prefix}.w"), self.w.clone().into_dyn());
        ps.insert(&format!("{prefix}.b"), self.b.clone().into_dyn());
        ps.insert(&format!("{prefix}.v"), self.v.clone().into_dyn());
        ps.insert(&format!("{prefix}.k"), self.k.clone().into_dyn());
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
        AttentionParams::new(get2("w")?, get1("b")?, get2("v")?, get1("k")?)
    }
}

/// Intermediate attention quantities, kept for heatmaps and the cycle
/// encoders.
#[derive(Debug, Clone)]
pub struct AttentionState {
    pub logits: Array2<f64>,
    pub temporal: Array1<f64>,
    pub temporal_tanh: Array1<f64>,
    pub logits_tanh: Array2<f64>,
    pub weights: Array2<f64>,
}

/// Weighted first/second-order statistics and their concatenation.
#[derive(Debug, Clone)]
pub struct PooledStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub embedding: Array1<f64>,
}

/// Attention logits for all frames: `e[t,c] = v_c . tanh(W h_t + b) + k_c`.
pub fn compute_attention_logits(h: &FrameFeatures, p: &AttentionParams) -> Result<Array2<f64>> {
    if p.w.ncols() != h.values.ncols() {
        return Err(Error::contract(format!(
            "attention projection expects C={} input channels, frames have C={}",
            p.w.ncols(),
            h.values.ncols()
        )));
    }
    let hidden = (h.values.dot(&p.w.t()) + &p.b).mapv(f64::tanh);
    Ok(hidden.dot(&p.v.t()) + &p.k)
}

/// Collapses the channel axis into the temporal track and reprojects it:
/// `lam_tanh = mu * tanh((lam - mu)/std) + mu`, population std, identity
/// when the track is (near-)constant.
pub fn tanh_reproject_temporal(logits: &Array2<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    ensure_finite("attention logits", logits.iter().cloned())?;
    let temporal = logits.sum_axis(Axis(1));
    let t = temporal.len() as f64;
    let mu = temporal.sum() / t;
    let var = temporal.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / t;
    let std = var.max(0.0).sqrt();
    let temporal_tanh = if std < STD_EPS {
        temporal.clone()
    } else {
        temporal.mapv(|x| mu * ((x - mu) / std).tanh() + mu)
    };
    Ok((temporal, temporal_tanh))
}

/// Scales logit row `t` by `temporal_tanh[t]/temporal[t]`, ratio pinned to
/// 1 where the denominator vanishes.
pub fn rescale_attention_map(
    logits: &Array2<f64>,
    temporal: &Array1<f64>,
    temporal_tanh: &Array1<f64>,
) -> Result<Array2<f64>> {
    if logits.nrows() != temporal.len() || temporal.len() != temporal_tanh.len() {
        return Err(Error::contract(format!(
            "rescale: logits have T={} rows, tracks have {} and {} entries",
            logits.nrows(),
            temporal.len(),
            temporal_tanh.len()
        )));
    }
    let mut out = logits.clone();
    for (ti, mut row) in out.rows_mut().into_iter().enumerate() {
        let lam = temporal[ti];
        let ratio = if lam.abs() >= RATIO_EPS {
            temporal_tanh[ti] / lam
        } else {
            1.0
        };
        row.mapv_inplace(|x| x * ratio);
    }
    Ok(out)
}

/// Per-column softmax over time, max-subtracted.
pub fn channelwise_softmax(logits_tanh: &Array2<f64>) -> Result<Array2<f64>> {
    ensure_finite("rescaled logits", logits_tanh.iter().cloned())?;
    let mut out = logits_tanh.clone();
    for mut col in out.columns_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|x| (x - max).exp());
        let denom = col.sum();
        col.mapv_inplace(|x| x / denom);
    }
    Ok(out)
}

/// Weighted mean and std per channel; needs the attention map to share the
/// frame channel count.
pub fn weighted_mean_std(h: &FrameFeatures, weights: &Array2<f64>) -> Result<PooledStats> {
    if weights.dim() != h.values.dim() {
        return Err(Error::contract(format!(
            "pooling weights are {}x{} but frames are {}x{} (attention channels must equal feature channels)",
            weights.nrows(),
            weights.ncols(),
            h.values.nrows(),
            h.values.ncols()
        )));
    }
    let c = h.values.ncols();
    let mut mean = Array1::<f64>::zeros(c);
    let mut second = Array1::<f64>::zeros(c);
    for t in 0..h.values.nrows() {
        for ci in 0..c {
            let a = weights[[t, ci]];
            let x = h.values[[t, ci]];
            mean[ci] += a * x;
            second[ci] += a * x * x;
        }
    }
    let std = Array1::from_iter(
        second
            .iter()
            .zip(mean.iter())
            .map(|(&s, &m)| (s - m * m).max(0.0).sqrt()),
    );
    let embedding = Array1::from_iter(mean.iter().chain(std.iter()).cloned());
    Ok(PooledStats { mean, std, embedding })
}

/// Full pooling chain from frames to the `2C` embedding.
pub fn attentive_pool(h: &FrameFeatures, p: &AttentionParams) -> Result<(PooledStats, AttentionState)> {
    let logits = compute_attention_logits(h, p)?;
    let (temporal, temporal_tanh) = tanh_reproject_temporal(&logits)?;
    let logits_tanh = rescale_attention_map(&logits, &temporal, &temporal_tanh)?;
    let weights = channelwise_softmax(&logits_tanh)?;
    let stats = weighted_mean_std(h, &weights)?;
    Ok((
        stats,
        AttentionState {
            logits,
            temporal,
            temporal_tanh,
            logits_tanh,
            weights,
        },
    ))
}

/// Tape handles for the pooling chain outputs.
pub struct PoolNodes {
    pub embedding: Var,
    pub mean: Var,
    pub std: Var,
    pub temporal: Var,
    pub temporal_tanh: Var,
    pub weights: Var,
}

/// Builds the pooling chain on the tape. `h` is a `[T, C]` node; `w`, `b`,
/// `v`, `k` are the parameter leaves. Mirrors [`attentive_pool`] exactly,
/// including both degeneracy guards.
pub fn attentive_pool_graph(g: &mut Graph, h: Var, w: Var, b: Var, v: Var, k: Var) -> PoolNodes {
    let wt = g.transpose(w);
    let pre = g.matmul(h, wt);
    let pre_b = g.add_row(pre, b);
    let hidden = g.tanh(pre_b);
    let vt = g.transpose(v);
    let read = g.matmul(hidden, vt);
    let logits = g.add_row(read, k);

    let temporal = g.sum_axis1(logits);
    let (mu, std) = g.mean_pop_std(temporal);
    let temporal_tanh = if g.scalar_value(std) < STD_EPS {
        temporal
    } else {
        let centered = g.sub_scalar(temporal, mu);
        let z = g.div_scalar(centered, std);
        let tz = g.tanh(z);
        let scaled = g.mul_scalar(tz, mu);
        g.add_scalar(scaled, mu)
    };

    let ratio = g.safe_ratio(temporal_tanh, temporal);
    let logits_tanh = g.mul_col_vec(logits, ratio);
    let weights = g.softmax_cols(logits_tanh);

    let weighted = g.mul(weights, h);
    let mean = g.sum_axis0(weighted);
    let h_sq = g.mul(h, h);
    let weighted_sq = g.mul(weights, h_sq);
    let second = g.sum_axis0(weighted_sq);
    let mean_sq = g.mul(mean, mean);
    let var = g.sub(second, mean_sq);
    let std_vec = g.clamped_sqrt(var);
    let embedding = g.concat(mean, std_vec);

    PoolNodes {
        embedding,
        mean,
        std: std_vec,
        temporal,
        temporal_tanh,
        weights,
    }
}
