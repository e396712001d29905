//! Tiny trainable frame-level encoders standing in for the full audio and
//! visual backbones.
//!
//! The audio encoder is a short stack of same-padded temporal convolutions
//! with tanh nonlinearities, mapping `[T_a x in_dim]` feature tracks to
//! `[T_a x C]` frame activations. The visual encoder applies a small
//! strided 2-D convolution stack per grey frame, averages spatially, and
//! projects to `C` channels, mapping `[T_v x 1 x H x W]` to `[T_v x C]`.
//! Both are deliberately minimal: just enough capacity to learn frame
//! features the pooling layer can attend over.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Ix3};
use rand::Rng;

use crate::autodiff::{Graph, Pad, Var};
use crate::error::{ensure_finite, Error, Result};
use crate::params::{xavier, ParamSet, ParamVars};
use crate::pooling::FrameFeatures;
use crate::Modality;

/// Shape recipe for the temporal convolution stack.
#[derive(Debug, Clone)]
pub struct AudioEncoderConfig {
    pub in_dim: usize,
    pub channels: usize,
    /// One odd kernel width per layer; the stack depth is this list's length.
    pub context_widths: Vec<usize>,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        AudioEncoderConfig {
            in_dim: 24,
            channels: 16,
            context_widths: vec![5, 3],
        }
    }
}

impl AudioEncoderConfig {
    pub fn depth(&self) -> usize {
        self.context_widths.len()
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.channels == 0 {
            return Err(Error::contract(
                "audio encoder needs in_dim >= 1 and channels >= 1",
            ));
        }
        if self.context_widths.is_empty() {
            return Err(Error::contract("audio encoder needs at least one layer"));
        }
        for &w in &self.context_widths {
            if w % 2 == 0 {
                return Err(Error::contract(format!(
                    "context width {w} is even; odd widths keep T fixed under symmetric padding"
                )));
            }
        }
        Ok(())
    }
}

/// Shape recipe for the per-frame visual stack.
#[derive(Debug, Clone)]
pub struct VisualEncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of stride-2 convolution stages before the channel projection.
    pub depth: usize,
}

impl Default for VisualEncoderConfig {
    fn default() -> Self {
        VisualEncoderConfig {
            height: 16,
            width: 16,
            channels: 16,
            depth: 2,
        }
    }
}

impl VisualEncoderConfig {
    /// Channel count of stage `i` of the convolution stack. The last
    /// stage feeds the per-frame projection after spatial pooling, so it
    /// bounds how much of the frame survives into the features.
    fn stage_channels(i: usize) -> usize {
        8 << i
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 {
            return Err(Error::contract(
                "visual encoder needs channels >= 1 and depth >= 1",
            ));
        }
        let (mut h, mut w) = (self.height, self.width);
        for stage in 0..self.depth {
            if h < 3 || w < 3 {
                return Err(Error::contract(format!(
                    "visual input {}x{} is too small for {} stride-2 stages (stage {stage} sees {h}x{w})",
                    self.height, self.width, self.depth
                )));
            }
            h = (h - 3) / 2 + 1;
            w = (w - 3) / 2 + 1;
        }
        Ok(())
    }
}

fn conv1d_pure(x: &Array2<f64>, w: &Array3<f64>, b: &Array1<f64>, pad: Pad) -> Array2<f64> {
    let (t_len, c_in) = (x.nrows(), x.ncols());
    let (c_out, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let half = (k - 1) / 2;
    let mut out = Array2::<f64>::zeros((t_len, c_out));
    for t in 0..t_len {
        for o in 0..c_out {
            let mut acc = b[o];
            for dk in 0..k {
                let s = t as isize + dk as isize - half as isize;
                let s = match pad {
                    Pad::Zero => {
                        if s < 0 || s >= t_len as isize {
                            continue;
                        }
                        s as usize
                    }
                    Pad::Circular => s.rem_euclid(t_len as isize) as usize,
                };
                for ci in 0..c_in {
                    acc += w[[o, ci, dk]] * x[[s, ci]];
                }
            }
            out[[t, o]] = acc;
        }
    }
    out
}

fn conv2d_pure(x: &ArrayD<f64>, w: &Array4<f64>, b: &Array1<f64>, stride: usize) -> ArrayD<f64> {
    let xv = x.view().into_dimensionality::<Ix3>().unwrap();
    let (c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h - kh) / stride + 1;
    let ow = (wd - kw) / stride + 1;
    let mut out = ArrayD::<f64>::zeros(ndarray::IxDyn(&[c_out, oh, ow]));
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[o];
                for ci in 0..c_in {
                    for a in 0..kh {
                        for bb in 0..kw {
                            acc += w[[o, ci, a, bb]] * xv[[ci, i * stride + a, j * stride + bb]];
                        }
                    }
                }
                out[[o, i, j]] = acc;
            }
        }
    }
    out
}

/// Temporal convolution stack with tanh after every layer.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub layers: Vec<(Array3<f64>, Array1<f64>)>,
    pub pad: Pad,
}

impl AudioEncoder {
    pub fn new(layers: Vec<(Array3<f64>, Array1<f64>)>, pad: Pad) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("audio encoder needs at least one layer"));
        }
        let mut prev = layers[0].0.shape()[1];
        for (i, (w, b)) in layers.iter().enumerate() {
            let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            if c_in != prev {
                return Err(Error::contract(format!(
                    "audio encoder layer {i} expects {prev} input channels, got {c_in}"
                )));
            }
            if b.len() != c_out {
                return Err(Error::contract(format!(
                    "audio encoder layer {i} bias length {} does not match {c_out} output channels",
                    b.len()
                )));
            }
            if k % 2 == 0 {
                return Err(Error::contract(format!(
                    "audio encoder layer {i} kernel width {k} is even"
                )));
            }
            prev = c_out;
        }
        Ok(AudioEncoder { layers, pad })
    }

    /// Delta init: all mass on the centre tap, context taps start at zero.
    /// Frame t of the output then depends only on frame t of the input until
    /// training fills the context in, which keeps per-frame structure visible
    /// to the pooling layers from the first step.
    pub fn init<R: Rng>(cfg: &AudioEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.depth());
        let mut c_in = cfg.in_dim;
        for &k in &cfg.context_widths {
            let c_out = cfg.channels;
            let centre = xavier(rng, &[c_out, c_in], c_in, c_out)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            let mut w = Array3::<f64>::zeros((c_out, c_in, k));
            for o in 0..c_out {
                for ci in 0..c_in {
                    w[[o, ci, k / 2]] = centre[[o, ci]];
                }
            }
            layers.push((w, Array1::zeros(c_out)));
            c_in = c_out;
        }
        AudioEncoder::new(layers, Pad::Zero)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.layers.last().unwrap().0.shape()[0]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn encode(&self, frames: &Array2<f64>, utt_id: &str) -> Result<FrameFeatures> {
        if frames.nrows() == 0 {
            return Err(Error::contract("audio track has no frames"));
        }
        if frames.ncols() != self.in_dim() {
            return Err(Error::contract(format!(
                "audio frames have dim {}, encoder expects {}",
                frames.ncols(),
                self.in_dim()
            )));
        }
        ensure_finite("audio frames", frames.iter().copied())?;
        let mut h = frames.clone();
        for (w, b) in &self.layers {
            h = conv1d_pure(&h, w, b, self.pad).mapv(f64::tanh);
        }
        FrameFeatures::new(h, Modality::Audio, utt_id)
    }

    pub fn register(&self, ps: &mut ParamSet, prefix: &str) {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            ps.insert(&format!("{prefix}.conv{i}.w"), w.clone().into_dyn());
            ps.insert(&format!("{prefix}.conv{i}.b"), b.clone().into_dyn());
        }
    }

    pub fn from_params(ps: &ParamSet, prefix: &str, pad: Pad) -> Result<Self> {
        let mut layers = Vec::new();
        let mut i = 0;
        while let Some(w) = ps.try_get(&format!("{prefix}.conv{i}.w")) {
            let w = w
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::contract(format!("{prefix}.conv{i}.w is not rank 3")))?;
            let b = ps
                .try_get(&format!("{prefix}.conv{i}.b"))
                .ok_or_else(|| Error::contract(format!("missing parameter {prefix}.conv{i}.b")))?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::contract(format!("{prefix}.conv{i}.b is not a vector")))?;
            layers.push((w, b));
            i += 1;
        }
        if layers.is_empty() {
            return Err(Error::contract(format!(
                "no audio encoder layers under prefix {prefix}"
            )));
        }
        AudioEncoder::new(layers, pad)
    }
}

/// Per-frame strided convolution stack, spatial mean, channel projection.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub convs: Vec<(Array4<f64>, Array1<f64>)>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl VisualEncoder {
    pub fn new(
        convs: Vec<(Array4<f64>, Array1<f64>)>,
        out_w: Array2<f64>,
        out_b: Array1<f64>,
    ) -> Result<Self> {
        if convs.is_empty() {
            return Err(Error::contract("visual encoder needs at least one stage"));
        }
        let mut prev = convs[0].0.shape()[1];
        for (i, (w, b)) in convs.iter().enumerate() {
            let c_out = w.shape()[0];
            if w.shape()[1] != prev {
                return Err(Error::contract(format!(
                    "visual stage {i} expects {prev} input channels, got {}",
                    w.shape()[1]
                )));
            }
            if b.len() != c_out {
                return Err(Error::contract(format!(
                    "visual stage {i} bias length {} does not match {c_out} output channels",
                    b.len()
                )));
            }
            prev = c_out;
        }
        if out_w.ncols() != 2 * prev {
            return Err(Error::contract(format!(
                "visual projection expects {} columns for the pooled mean and std of the last stage, got {}",
                2 * prev,
                out_w.ncols()
            )));
        }
        if out_b.len() != out_w.nrows() {
            return Err(Error::contract(format!(
                "visual projection bias length {} does not match {} rows",
                out_b.len(),
                out_w.nrows()
            )));
        }
        Ok(VisualEncoder {
            convs,
            out_w,
            out_b,
        })
    }

    pub fn init<R: Rng>(cfg: &VisualEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.depth);
        let mut c_in = 1;
        for stage in 0..cfg.depth {
            let c_out = VisualEncoderConfig::stage_channels(stage);
            let w = xavier(rng, &[c_out, c_in, 3, 3], c_in * 9, c_out * 9)
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            convs.push((w, Array1::zeros(c_out)));
            c_in = c_out;
        }
        let out_w = xavier(rng, &[cfg.channels, 2 * c_in], 2 * c_in, cfg.channels)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        VisualEncoder::new(convs, out_w, Array1::zeros(cfg.channels))
    }

    pub fn channels(&self) -> usize {
        self.out_w.nrows()
    }

    pub fn depth(&self) -> usize {
        self.convs.len()
    }

    fn check_frames(&self, frames: &ArrayD<f64>) -> Result<(usize, usize, usize)> {
        if frames.ndim() != 4 {
            return Err(Error::contract(format!(
                "visual track must be rank 4 [T x 1 x H x W], got rank {}",
                frames.ndim()
            )));
        }
        let (t_len, chans, h, w) = (
            frames.shape()[0],
            frames.shape()[1],
            frames.shape()[2],
            frames.shape()[3],
        );
        if t_len == 0 {
            return Err(Error::contract("visual track has no frames"));
        }
        if chans != 1 {
            return Err(Error::contract(format!(
                "visual frames must be single-channel grey, got {chans} channels"
            )));
        }
        let (mut ch, mut cw) = (h, w);
        for stage in 0..self.depth() {
            if ch < 3 || cw < 3 {
                return Err(Error::contract(format!(
                    "visual frame {h}x{w} is too small for stage {stage} of the convolution stack"
                )));
            }
            ch = (ch - 3) / 2 + 1;
            cw = (cw - 3) / 2 + 1;
        }
        Ok((t_len, h, w))
    }

    /// Spatial mean and population std per channel, concatenated. The std
    /// half keeps frame activity visible after zero-mean conv responses
    /// cancel in the plain average.
    fn encode_frame(&self, frame: ArrayD<f64>) -> Array1<f64> {
        let mut x = frame;
        for (w, b) in &self.convs {
            x = conv2d_pure(&x, w, b, 2).mapv(f64::tanh);
        }
        let xv = x.view().into_dimensionality::<Ix3>().unwrap();
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = (h * w) as f64;
        let mut pooled = Array1::<f64>::zeros(2 * c);
        for ci in 0..c {
            let (mut acc, mut acc2) = (0.0, 0.0);
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[ci, i, j]];
                    acc += v;
                    acc2 += v * v;
                }
            }
            let mean = acc / n;
            pooled[ci] = mean;
            pooled[c + ci] = (acc2 / n - mean * mean).max(0.0).sqrt();
        }
        self.out_w.dot(&pooled) + &self.out_b
    }

    pub fn encode(&self, frames: &ArrayD<f64>, utt_id: &str) -> Result<FrameFeatures> {
        let (t_len, _, _) = self.check_frames(frames)?;
        ensure_finite("visual frames", frames.iter().copied())?;
        let mut out = Array2::<f64>::zeros((t_len, self.channels()));
        for t in 0..t_len {
            let frame = frames
                .index_axis(ndarray::Axis(0), t)
                .to_owned()
                .into_dyn();
            out.row_mut(t).assign(&self.encode_frame(frame));
        }
        FrameFeatures::new(out, Modality::Visual, utt_id)
    }

    pub fn register(&self, ps: &mut ParamSet, prefix: &str) {
        for (i, (w, b)) in self.convs.iter().enumerate() {
            ps.insert(&format!("{prefix}.conv{i}.w"), w.clone().into_dyn());
            ps.insert(&format!("{prefix}.conv{i}.b"), b.clone().into_dyn());
        }
        ps.insert(&format!("{prefix}.out.w"), self.out_w.clone().into_dyn());
        ps.insert(&format!("{prefix}.out.b"), self.out_b.clone().into_dyn());
    }

    pub fn from_params(ps: &ParamSet, prefix: &str) -> Result<Self> {
        let mut convs = Vec::new();
        let mut i = 0;
        while let Some(w) = ps.try_get(&format!("{prefix}.conv{i}.w")) {
            let w = w
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::contract(format!("{prefix}.conv{i}.w is not rank 4")))?;
            let b = ps
                .try_get(&format!("{prefix}.conv{i}.b"))
                .ok_or_else(|| Error::contract(format!("missing parameter {prefix}.conv{i}.b")))?
                .clone()
                .into_dimensionality()
                .map_err(|_| Error::contract(format!("{prefix}.conv{i}.b is not a vector")))?;
            convs.push((w, b));
            i += 1;
        }
        let get = |n: &str| {
            ps.try_get(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::contract(format!("missing parameter {prefix}.{n}")))
        };
        let out_w = get("out.w")?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::contract(format!("{prefix}.out.w is not a matrix")))?;
        let out_b = get("out.b")?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::contract(format!("{prefix}.out.b is not a vector")))?;
        VisualEncoder::new(convs, out_w, out_b)
    }
}

// ── Tape versions ───────────────────────────────────────────────────────

pub struct AudioEncoderVars {
    pub layers: Vec<(Var, Var)>,
    pub pad: Pad,
}

impl AudioEncoderVars {
    pub fn leaves(g: &mut Graph, enc: &AudioEncoder) -> Self {
        let layers = enc
            .layers
            .iter()
            .map(|(w, b)| (g.leaf(w.clone().into_dyn()), g.leaf1(b.clone())))
            .collect();
        AudioEncoderVars {
            layers,
            pad: enc.pad,
        }
    }

    pub fn from_param_vars(vars: &ParamVars, prefix: &str, depth: usize, pad: Pad) -> Self {
        let layers = (0..depth)
            .map(|i| {
                (
                    vars.var(&format!("{prefix}.conv{i}.w")),
                    vars.var(&format!("{prefix}.conv{i}.b")),
                )
            })
            .collect();
        AudioEncoderVars { layers, pad }
    }
}

/// Tape version of [`AudioEncoder::encode`]; `x` is the `[T x in_dim]` track.
pub fn encode_audio_graph(g: &mut Graph, enc: &AudioEncoderVars, x: Var) -> Var {
    let mut h = x;
    for &(w, b) in &enc.layers {
        let c = g.conv1d_same(h, w, b, enc.pad);
        h = g.tanh(c);
    }
    h
}

pub struct VisualEncoderVars {
    pub convs: Vec<(Var, Var)>,
    pub out_w: Var,
    pub out_b: Var,
}

impl VisualEncoderVars {
    pub fn leaves(g: &mut Graph, enc: &VisualEncoder) -> Self {
        let convs = enc
            .convs
            .iter()
            .map(|(w, b)| (g.leaf(w.clone().into_dyn()), g.leaf1(b.clone())))
            .collect();
        VisualEncoderVars {
            convs,
            out_w: g.leaf2(enc.out_w.clone()),
            out_b: g.leaf1(enc.out_b.clone()),
        }
    }

    pub fn from_param_vars(vars: &ParamVars, prefix: &str, depth: usize) -> Self {
        let convs = (0..depth)
            .map(|i| {
                (
                    vars.var(&format!("{prefix}.conv{i}.w")),
                    vars.var(&format!("{prefix}.conv{i}.b")),
                )
            })
            .collect();
        VisualEncoderVars {
            convs,
            out_w: vars.var(&format!("{prefix}.out.w")),
            out_b: vars.var(&format!("{prefix}.out.b")),
        }
    }
}

/// Tape version of [`VisualEncoder::encode`]. Frames enter as constants,
/// one leaf per frame; gradients flow to the parameters only.
pub fn encode_visual_graph(g: &mut Graph, enc: &VisualEncoderVars, frames: &ArrayD<f64>) -> Var {
    assert_eq!(frames.ndim(), 4, "visual track must be rank 4");
    let t_len = frames.shape()[0];
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let frame = frames
            .index_axis(ndarray::Axis(0), t)
            .to_owned()
            .into_dyn();
        let mut x = g.leaf(frame);
        for &(w, b) in &enc.convs {
            let c = g.conv2d_valid(x, w, b, 2);
            x = g.tanh(c);
        }
        let mean = g.mean_spatial(x);
        let sq = g.mul(x, x);
        let mean_sq = g.mean_spatial(sq);
        let mean2 = g.mul(mean, mean);
        let var = g.sub(mean_sq, mean2);
        let std = g.clamped_sqrt(var);
        let pooled = g.concat(mean, std);
        let proj = g.matvec(enc.out_w, pooled);
        rows.push(g.add(proj, enc.out_b));
    }
    g.stack_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_audio_cfg() -> AudioEncoderConfig {
        AudioEncoderConfig {
            in_dim: 3,
            channels: 4,
            context_widths: vec![3, 3],
        }
    }

    fn small_visual_cfg() -> VisualEncoderConfig {
        VisualEncoderConfig {
            height: 8,
            width: 8,
            channels: 3,
            depth: 2,
        }
    }

    fn random_audio(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, d), |_| rng.random_range(-1.5..1.5))
    }

    fn random_visual(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[t, 1, h, w]), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters_produce_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let audio = AudioEncoder::new(
            vec![
                (ndarray::Array3::zeros((4, 3, 3)), Array1::zeros(4)),
                (ndarray::Array3::zeros((4, 4, 3)), Array1::zeros(4)),
            ],
            Pad::Zero,
        )
        .unwrap();
        let feats = audio.encode(&random_audio(&mut rng, 6, 3), "u0").unwrap();
        assert!(feats.values.iter().all(|&v| v == 0.0));

        let visual = VisualEncoder::new(
            vec![
                (ndarray::Array4::zeros((4, 1, 3, 3)), Array1::zeros(4)),
                (ndarray::Array4::zeros((8, 4, 3, 3)), Array1::zeros(8)),
            ],
            Array2::zeros((3, 16)),
            Array1::zeros(3),
        )
        .unwrap();
        let feats = visual
            .encode(&random_visual(&mut rng, 4, 8, 8), "u0")
            .unwrap();
        assert!(feats.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_input_yields_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let audio = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
        let feats = audio.encode(&random_audio(&mut rng, 1, 3), "u1").unwrap();
        assert_eq!(feats.values.nrows(), 1);
        assert_eq!(feats.values.ncols(), 4);

        let visual = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
        let feats = visual
            .encode(&random_visual(&mut rng, 1, 8, 8), "u1")
            .unwrap();
        assert_eq!(feats.values.nrows(), 1);
        assert_eq!(feats.values.ncols(), 3);
    }

    #[test]
    fn seeded_init_is_bit_reproducible() {
        let frames_rng = &mut ChaCha8Rng::seed_from_u64(103);
        let audio_frames = random_audio(frames_rng, 5, 3);
        let visual_frames = random_visual(frames_rng, 3, 8, 8);

        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
            let v = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
            (
                a.encode(&audio_frames, "u").unwrap().values,
                v.encode(&visual_frames, "u").unwrap().values,
            )
        };
        let (a1, v1) = run(7);
        let (a2, v2) = run(7);
        assert_eq!(a1, a2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let audio = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
        assert!(audio.encode(&random_audio(&mut rng, 4, 5), "u").is_err());
        assert!(audio.encode(&Array2::zeros((0, 3)), "u").is_err());

        let visual = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
        let rgb = ArrayD::zeros(IxDyn(&[2, 3, 8, 8]));
        assert!(visual.encode(&rgb, "u").is_err());
        let tiny = ArrayD::zeros(IxDyn(&[2, 1, 4, 4]));
        assert!(visual.encode(&tiny, "u").is_err());
        let rank3 = ArrayD::zeros(IxDyn(&[2, 8, 8]));
        assert!(visual.encode(&rank3, "u").is_err());
    }

    #[test]
    fn even_context_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let cfg = AudioEncoderConfig {
            context_widths: vec![4],
            ..small_audio_cfg()
        };
        assert!(AudioEncoder::init(&cfg, &mut rng).is_err());
    }

    #[test]
    fn circular_padding_makes_audio_encoder_shift_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let mut enc = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
        enc.pad = Pad::Circular;
        let t = 7;
        let frames = random_audio(&mut rng, t, 3);
        let base = enc.encode(&frames, "u").unwrap().values;

        let shift = 3;
        let mut shifted = Array2::zeros(frames.raw_dim());
        for i in 0..t {
            shifted.row_mut((i + shift) % t).assign(&frames.row(i));
        }
        let out = enc.encode(&shifted, "u").unwrap().values;
        for i in 0..t {
            for c in 0..4 {
                let diff = (out[[(i + shift) % t, c]] - base[[i, c]]).abs();
                assert!(diff < 1e-12, "row {i} channel {c} off by {diff}");
            }
        }
    }

    #[test]
    fn visual_encoder_is_frame_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let enc = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
        let frames = random_visual(&mut rng, 4, 8, 8);
        let base = enc.encode(&frames, "u").unwrap().values;

        let perm = [2usize, 0, 3, 1];
        let mut permuted = ArrayD::zeros(frames.raw_dim());
        for (dst, &src) in perm.iter().enumerate() {
            permuted
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&frames.index_axis(ndarray::Axis(0), src));
        }
        let out = enc.encode(&permuted, "u").unwrap().values;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(out.row(dst), base.row(src));
        }
    }

    #[test]
    fn graph_forward_matches_pure_encoders() {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let audio = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
        let visual = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
        let audio_frames = random_audio(&mut rng, 5, 3);
        let visual_frames = random_visual(&mut rng, 3, 8, 8);

        let mut g = Graph::new();
        let av = AudioEncoderVars::leaves(&mut g, &audio);
        let x = g.leaf2(audio_frames.clone());
        let a_out = encode_audio_graph(&mut g, &av, x);
        let vv = VisualEncoderVars::leaves(&mut g, &visual);
        let v_out = encode_visual_graph(&mut g, &vv, &visual_frames);

        let a_pure = audio.encode(&audio_frames, "u").unwrap().values;
        let v_pure = visual.encode(&visual_frames, "u").unwrap().values;
        for (got, want) in g.value2(a_out).iter().zip(a_pure.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
        for (got, want) in g.value2(v_out).iter().zip(v_pure.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_through_param_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let audio = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
        let visual = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
        let mut ps = ParamSet::new();
        audio.register(&mut ps, "audio_enc");
        visual.register(&mut ps, "visual_enc");

        let audio2 = AudioEncoder::from_params(&ps, "audio_enc", Pad::Zero).unwrap();
        let visual2 = VisualEncoder::from_params(&ps, "visual_enc").unwrap();
        let frames = random_audio(&mut rng, 4, 3);
        assert_eq!(
            audio.encode(&frames, "u").unwrap().values,
            audio2.encode(&frames, "u").unwrap().values
        );
        let vframes = random_visual(&mut rng, 2, 8, 8);
        assert_eq!(
            visual.encode(&vframes, "u").unwrap().values,
            visual2.encode(&vframes, "u").unwrap().values
        );

        assert!(AudioEncoder::from_params(&ps, "nope", Pad::Zero).is_err());
        assert!(VisualEncoder::from_params(&ps, "nope").is_err());
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        use crate::autodiff::finite_diff::{central_grad, max_rel_err};

        let mut rng = ChaCha8Rng::seed_from_u64(110);
        let audio = AudioEncoder::init(&small_audio_cfg(), &mut rng).unwrap();
        let visual = VisualEncoder::init(&small_visual_cfg(), &mut rng).unwrap();
        let audio_frames = random_audio(&mut rng, 4, 3);
        let visual_frames = random_visual(&mut rng, 2, 8, 8);
        // fixed readout weights turn the feature maps into one scalar
        let ra = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let rv = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));

        let mut ps = ParamSet::new();
        audio.register(&mut ps, "audio_enc");
        visual.register(&mut ps, "visual_enc");
        let layout: Vec<(String, Vec<usize>)> = ps
            .iter()
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .collect();
        let mut point: Vec<f64> = Vec::new();
        for (_, v) in ps.iter() {
            point.extend(v.iter());
        }

        let eval = |flat: &[f64]| -> (Graph, Vec<Var>, Var) {
            let mut graph = Graph::new();
            let mut off = 0;
            let mut vars = Vec::new();
            let mut by_name = std::collections::HashMap::new();
            for (name, shape) in &layout {
                let n: usize = shape.iter().product();
                let leaf = graph.leaf(
                    ndarray::ArrayD::from_shape_vec(IxDyn(shape), flat[off..off + n].to_vec())
                        .unwrap(),
                );
                off += n;
                vars.push(leaf);
                by_name.insert(name.clone(), leaf);
            }
            let av = AudioEncoderVars {
                layers: vec![
                    (by_name["audio_enc.conv0.w"], by_name["audio_enc.conv0.b"]),
                    (by_name["audio_enc.conv1.w"], by_name["audio_enc.conv1.b"]),
                ],
                pad: Pad::Zero,
            };
            let vv = VisualEncoderVars {
                convs: vec![
                    (by_name["visual_enc.conv0.w"], by_name["visual_enc.conv0.b"]),
                    (by_name["visual_enc.conv1.w"], by_name["visual_enc.conv1.b"]),
                ],
                out_w: by_name["visual_enc.out.w"],
                out_b: by_name["visual_enc.out.b"],
            };
            let x = graph.leaf2(audio_frames.clone());
            let a_out = encode_audio_graph(&mut graph, &av, x);
            let v_out = encode_visual_graph(&mut graph, &vv, &visual_frames);
            let ra_leaf = graph.leaf2(ra.clone());
            let rv_leaf = graph.leaf2(rv.clone());
            let wa = graph.mul(a_out, ra_leaf);
            let wv = graph.mul(v_out, rv_leaf);
            let sa = graph.sum_all(wa);
            let sv = graph.sum_all(wv);
            let out = graph.add(sa, sv);
            (graph, vars, out)
        };

        let numeric = central_grad(
            |flat| {
                let (g, _, out) = eval(flat);
                g.scalar_value(out)
            },
            &point,
            1e-5,
        );
        let (graph, vars, out) = eval(&point);
        let grads = graph.backward(out);
        let mut analytic = Vec::new();
        for (v, (_, shape)) in vars.iter().zip(layout.iter()) {
            let n: usize = shape.iter().product();
            match grads.get(*v) {
                Some(gr) => analytic.extend(gr.iter()),
                None => analytic.extend(std::iter::repeat(0.0).take(n)),
            }
        }
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "encoder gradient mismatch: {err}");
    }
}
