//! Cycle consistency over temporal attention tracks.
//!
//! Two small MLPs tie the modalities together: `f` maps an audio attention
//! track to a visual-length one, `g` maps back. The adversarial loss pulls
//! each encoder's output toward the other modality's actual track, the
//! cycle loss asks the round trip to return to the start; both are cosine
//! based and bounded by [0, 4]. Tracks of unequal native length are
//! aligned to the configured lengths by linear interpolation first.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{interp_taps, Graph, Var};
use crate::error::{ensure_finite, Error, Result};
use crate::params::{xavier, ParamSet, ParamVars};
use crate::Modality;

/// Norm floor below which a cosine is defined as 0.
pub const COS_EPS: f64 = 1e-12;

/// Which modality an encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AudioToVisual,
    VisualToAudio,
}

impl Direction {
    pub fn source(self) -> Modality {
        match self {
            Direction::AudioToVisual => Modality::Audio,
            Direction::VisualToAudio => Modality::Visual,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Direction::AudioToVisual => Modality::Visual,
            Direction::VisualToAudio => Modality::Audio,
        }
    }
}

/// Hidden-layer nonlinearity of a weight encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// One temporal attention track at its configured fixed length.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub values: Array1<f64>,
    pub modality: Modality,
}

impl TemporalAttention {
    pub fn new(values: Array1<f64>, modality: Modality) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("temporal attention track is empty"));
        }
        if modality == Modality::Fused {
            return Err(Error::contract(
                "temporal attention belongs to a single modality",
            ));
        }
        ensure_finite("temporal attention", values.iter().copied())?;
        Ok(TemporalAttention { values, modality })
    }
}

/// Resamples a track to `dst_len` by linear interpolation of normalized
/// positions; identity when lengths match.
pub fn resample_track(track: &Array1<f64>, dst_len: usize) -> Result<Array1<f64>> {
    if track.is_empty() || dst_len == 0 {
        return Err(Error::contract("resample needs non-empty source and target"));
    }
    let taps = interp_taps(track.len(), dst_len);
    Ok(Array1::from_iter(
        taps.iter()
            .map(|t| t.w0 * track[t.i0] + t.w1 * track[t.i1]),
    ))
}

/// Three affine layers with the configured activation between them and a
/// linear output.
#[derive(Debug, Clone)]
pub struct WeightEncoder {
    pub direction: Direction,
    pub activation: Activation,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl WeightEncoder {
    pub fn new(
        direction: Direction,
        activation: Activation,
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        w3: Array2<f64>,
        b3: Array1<f64>,
    ) -> Result<Self> {
        let hidden = w1.nrows();
        if b1.len() != hidden
            || w2.nrows() != hidden
            || w2.ncols() != hidden
            || b2.len() != hidden
            || w3.ncols() != hidden
            || b3.len() != w3.nrows()
        {
            return Err(Error::contract(
                "weight encoder layer shapes do not compose",
            ));
        }
        let enc = WeightEncoder {
            direction,
            activation,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
        };
        ensure_finite("weight encoder", enc.param_iter())?;
        Ok(enc)
    }

    fn param_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .chain(self.w3.iter())
            .chain(self.b3.iter())
            .copied()
    }

    pub fn input_len(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_len(&self) -> usize {
        self.w3.nrows()
    }

    /// Random initialization with the standard hidden width
    /// `max(input_len, output_len)`.
    pub fn init<R: Rng>(
        direction: Direction,
        input_len: usize,
        output_len: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = input_len.max(output_len);
        let mut d2 = |a: usize, b: usize| {
            xavier(rng, &[a, b], b, a)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        WeightEncoder {
            direction,
            activation: Activation::Tanh,
            w1: d2(hidden, input_len),
            b1: Array1::zeros(hidden),
            w2: d2(hidden, hidden),
            b2: Array1::zeros(hidden),
            w3: d2(output_len, hidden),
            b3: Array1::zeros(output_len),
        }
    }

    /// Square identity encoder (linear activation), useful as a fixture.
    pub fn identity(direction: Direction, len: usize) -> Self {
        WeightEncoder {
            direction,
            activation: Activation::Linear,
            w1: Array2::eye(len),
            b1: Array1::zeros(len),
            w2: Array2::eye(len),
            b2: Array1::zeros(len),
            w3: Array2::eye(len),
            b3: Array1::zeros(len),
        }
    }

    /// Registers the six tensors under `prefix.` names.
    pub fn register(&self, ps: &mut ParamSet, prefix: &str) {
        ps.insert(&format!("{prefix}.w1"), self.w1.clone().into_dyn());
        ps.insert(&format!("{prefix}.b1"), self.b1.clone().into_dyn());
        ps.insert(&format!("{prefix}.w2"), self.w2.clone().into_dyn());
        ps.insert(&format!("{prefix}.b2"), self.b2.clone().into_dyn());
        ps.insert(&format!("{prefix}.w3"), self.w3.clone().into_dyn());
        ps.insert(&format!("{prefix}.b3"), self.b3.clone().into_dyn());
    }

    /// Rebuilds the encoder from a parameter store.
    pub fn from_params(
        ps: &ParamSet,
        prefix: &str,
        direction: Direction,
        activation: Activation,
    ) -> Result<Self> {
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
        WeightEncoder::new(
            direction,
            activation,
            get2("w1")?,
            get1("b1")?,
            get2("w2")?,
            get1("b2")?,
            get2("w3")?,
            get1("b3")?,
        )
    }

    fn activate(&self, x: Array1<f64>) -> Array1<f64> {
        match self.activation {
            Activation::Tanh => x.mapv(f64::tanh),
            Activation::Linear => x,
        }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let h1 = self.activate(self.w1.dot(x) + &self.b1);
        let h2 = self.activate(self.w2.dot(&h1) + &self.b2);
        self.w3.dot(&h2) + &self.b3
    }
}

/// Runs an encoder on a track of its source modality.
pub fn encode(enc: &WeightEncoder, x: &TemporalAttention) -> Result<TemporalAttention> {
    if x.modality != enc.direction.source() {
        return Err(Error::contract(format!(
            "encoder consumes {} tracks, got {}",
            enc.direction.source(),
            x.modality
        )));
    }
    if x.values.len() != enc.input_len() {
        return Err(Error::contract(format!(
            "encoder expects length {}, track has {}",
            enc.input_len(),
            x.values.len()
        )));
    }
    TemporalAttention::new(enc.forward(&x.values), enc.direction.target())
}

fn cos_guarded(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let nx = x.dot(x).sqrt();
    let ny = y.dot(y).sqrt();
    if nx < COS_EPS || ny < COS_EPS {
        return 0.0;
    }
    x.dot(y) / (nx * ny)
}

fn check_pair(
    a: &TemporalAttention,
    v: &TemporalAttention,
    f: &WeightEncoder,
    g: &WeightEncoder,
) -> Result<()> {
    if a.modality != Modality::Audio || v.modality != Modality::Visual {
        return Err(Error::contract(
            "loss expects an (audio, visual) track pair in that order",
        ));
    }
    if f.direction != Direction::AudioToVisual || g.direction != Direction::VisualToAudio {
        return Err(Error::contract(
            "loss expects f: audio to visual and g: visual to audio",
        ));
    }
    if a.values.len() != f.input_len() || v.values.len() != g.input_len() {
        return Err(Error::contract(format!(
            "track lengths ({}, {}) do not match encoder inputs ({}, {})",
            a.values.len(),
            v.values.len(),
            f.input_len(),
            g.input_len()
        )));
    }
    if f.output_len() != g.input_len() || g.output_len() != f.input_len() {
        return Err(Error::contract(
            "encoders do not compose: output lengths must swap the input lengths",
        ));
    }
    Ok(())
}

/// `2 - cos(a, g(v)) - cos(v, f(a))`.
pub fn adversarial_loss(
    a: &TemporalAttention,
    v: &TemporalAttention,
    f: &WeightEncoder,
    g: &WeightEncoder,
) -> Result<f64> {
    check_pair(a, v, f, g)?;
    let fa = f.forward(&a.values);
    let gv = g.forward(&v.values);
    Ok(2.0 - cos_guarded(&a.values, &gv) - cos_guarded(&v.values, &fa))
}

/// `2 - cos(v, f(g(v))) - cos(a, g(f(a)))`.
pub fn cycle_loss(
    a: &TemporalAttention,
    v: &TemporalAttention,
    f: &WeightEncoder,
    g: &WeightEncoder,
) -> Result<f64> {
    check_pair(a, v, f, g)?;
    let round_v = f.forward(&g.forward(&v.values));
    let round_a = g.forward(&f.forward(&a.values));
    Ok(2.0 - cos_guarded(&v.values, &round_v) - cos_guarded(&a.values, &round_a))
}

/// Graph leaves for one encoder's six tensors.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
    pub activation: Activation,
}

impl EncoderVars {
    /// Fresh leaves from an encoder's current values.
    pub fn leaves(g: &mut Graph, enc: &WeightEncoder) -> Self {
        EncoderVars {
            w1: g.leaf2(enc.w1.clone()),
            b1: g.leaf1(enc.b1.clone()),
            w2: g.leaf2(enc.w2.clone()),
            b2: g.leaf1(enc.b2.clone()),
            w3: g.leaf2(enc.w3.clone()),
            b3: g.leaf1(enc.b3.clone()),
            activation: enc.activation,
        }
    }

    /// Handles resolved from a parameter store's leaf map.
    pub fn from_param_vars(vars: &ParamVars, prefix: &str, activation: Activation) -> Self {
        EncoderVars {
            w1: vars.var(&format!("{prefix}.w1")),
            b1: vars.var(&format!("{prefix}.b1")),
            w2: vars.var(&format!("{prefix}.w2")),
            b2: vars.var(&format!("{prefix}.b2")),
            w3: vars.var(&format!("{prefix}.w3")),
            b3: vars.var(&format!("{prefix}.b3")),
            activation,
        }
    }
}

fn act_graph(g: &mut Graph, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Tanh => g.tanh(x),
        Activation::Linear => x,
    }
}

/// Tape version of the encoder forward pass.
pub fn encode_graph(g: &mut Graph, enc: EncoderVars, x: Var) -> Var {
    let l1 = g.matvec(enc.w1, x);
    let l1b = g.add(l1, enc.b1);
    let h1 = act_graph(g, l1b, enc.activation);
    let l2 = g.matvec(enc.w2, h1);
    let l2b = g.add(l2, enc.b2);
    let h2 = act_graph(g, l2b, enc.activation);
    let l3 = g.matvec(enc.w3, h2);
    g.add(l3, enc.b3)
}

/// Tape version of [`adversarial_loss`].
pub fn adversarial_loss_graph(g: &mut Graph, a: Var, v: Var, f: EncoderVars, ge: EncoderVars) -> Var {
    let fa = encode_graph(g, f, a);
    let gv = encode_graph(g, ge, v);
    let c1 = g.cosine(a, gv);
    let c2 = g.cosine(v, fa);
    let two = g.scalar(2.0);
    let d = g.sub(two, c1);
    g.sub(d, c2)
}

/// Tape version of [`cycle_loss`].
pub fn cycle_loss_graph(g: &mut Graph, a: Var, v: Var, f: EncoderVars, ge: EncoderVars) -> Var {
    let gv = encode_graph(g, ge, v);
    let round_v = encode_graph(g, f, gv);
    let fa = encode_graph(g, f, a);
    let round_a = encode_graph(g, ge, fa);
    let c1 = g.cosine(v, round_v);
    let c2 = g.cosine(a, round_a);
    let two = g.scalar(2.0);
    let d = g.sub(two, c1);
    g.sub(d, c2)
}

/// Trains `f` and `g` on fixed track pairs by full-batch gradient descent
/// on the sum of both losses; returns the mean cycle loss after each step.
pub fn fit_cycle_encoders(
    pairs: &[(TemporalAttention, TemporalAttention)],
    f: &mut WeightEncoder,
    g_enc: &mut WeightEncoder,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::contract("cycle fitting needs at least one pair"));
    }
    for (a, v) in pairs {
        check_pair(a, v, f, g_enc)?;
    }
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut ps = ParamSet::new();
        f.register(&mut ps, "f");
        g_enc.register(&mut ps, "g");
        let mut graph = Graph::new();
        let vars = ps.leaves(&mut graph);
        let fv = EncoderVars::from_param_vars(&vars, "f", f.activation);
        let gv = EncoderVars::from_param_vars(&vars, "g", g_enc.activation);

        let mut total = graph.scalar(0.0);
        let mut cycle_sum = 0.0;
        for (a, v) in pairs {
            let av = graph.leaf1(a.values.clone());
            let vv = graph.leaf1(v.values.clone());
            let adv = adversarial_loss_graph(&mut graph, av, vv, fv, gv);
            let cyc = cycle_loss_graph(&mut graph, av, vv, fv, gv);
            cycle_sum += graph.scalar_value(cyc);
            let s = graph.add(adv, cyc);
            total = graph.add(total, s);
        }
        let mean = graph.scale(total, 1.0 / pairs.len() as f64);
        let grads = graph.backward(mean);

        let mut gm = crate::params::GradMap::new();
        gm.accumulate(&grads, &vars);
        ps.sgd_step(&gm, lr, 0.0, |_| true);

        *f = WeightEncoder::from_params(&ps, "f", f.direction, f.activation)?;
        *g_enc = WeightEncoder::from_params(&ps, "g", g_enc.direction, g_enc.activation)?;
        history.push(cycle_sum / pairs.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn audio(values: &[f64]) -> TemporalAttention {
        TemporalAttention::new(arr1(values), Modality::Audio).unwrap()
    }

    fn visual(values: &[f64]) -> TemporalAttention {
        TemporalAttention::new(arr1(values), Modality::Visual).unwrap()
    }

    fn zero_encoder(direction: Direction, input: usize, output: usize) -> WeightEncoder {
        let hidden = input.max(output);
        WeightEncoder::new(
            direction,
            Activation::Tanh,
            Array2::zeros((hidden, input)),
            Array1::zeros(hidden),
            Array2::zeros((hidden, hidden)),
            Array1::zeros(hidden),
            Array2::zeros((output, hidden)),
            Array1::zeros(output),
        )
        .unwrap()
    }

    #[test]
    fn zero_encoder_maps_to_zero() {
        let f = zero_encoder(Direction::AudioToVisual, 4, 3);
        let out = encode(&f, &audio(&[1.0, -2.0, 0.5, 3.0])).unwrap();
        assert_eq!(out.modality, Modality::Visual);
        assert_eq!(out.values, arr1(&[0.0, 0.0, 0.0]));
    }

    #[test]
    fn identity_encoder_is_identity() {
        let f = WeightEncoder::identity(Direction::AudioToVisual, 4);
        let x = audio(&[0.3, -1.0, 2.0, 0.7]);
        let out = encode(&f, &x).unwrap();
        assert_eq!(out.values, x.values);
    }

    #[test]
    fn encode_is_deterministic_per_seed() {
        let mut r1 = crate::seeds::rng(9, crate::seeds::Stream::ParamInit, 0);
        let mut r2 = crate::seeds::rng(9, crate::seeds::Stream::ParamInit, 0);
        let e1 = WeightEncoder::init(Direction::AudioToVisual, 5, 3, &mut r1);
        let e2 = WeightEncoder::init(Direction::AudioToVisual, 5, 3, &mut r2);
        let x = audio(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let o1 = encode(&e1, &x).unwrap();
        let o2 = encode(&e2, &x).unwrap();
        assert_eq!(o1.values, o2.values);
    }

    #[test]
    fn encode_rejects_wrong_modality_and_length() {
        let f = zero_encoder(Direction::AudioToVisual, 3, 3);
        assert!(encode(&f, &visual(&[1.0, 2.0, 3.0])).is_err());
        assert!(encode(&f, &audio(&[1.0, 2.0])).is_err());
    }

    /// Builds f whose forward equals a fixed linear map `m` (and g likewise),
    /// via identity hidden layers with linear activation.
    fn linear_encoder(direction: Direction, m: &Array2<f64>) -> WeightEncoder {
        let hidden = m.ncols().max(m.nrows());
        let mut w1 = Array2::zeros((hidden, m.ncols()));
        for i in 0..m.ncols() {
            w1[[i, i]] = 1.0;
        }
        let mut w3 = Array2::zeros((m.nrows(), hidden));
        for i in 0..m.nrows().min(hidden) {
            for j in 0..hidden.min(m.ncols()) {
                w3[[i, j]] = m[[i, j]];
            }
        }
        WeightEncoder::new(
            direction,
            Activation::Linear,
            w1,
            Array1::zeros(hidden),
            Array2::eye(hidden),
            Array1::zeros(hidden),
            w3,
            Array1::zeros(m.nrows()),
        )
        .unwrap()
    }

    #[test]
    fn adversarial_loss_hits_its_three_landmarks() {
        let a = audio(&[1.0, 0.0]);
        let v = visual(&[0.0, 2.0]);
        // f(a) = 2v, g(v) = 3a: aligned up to positive scale
        let f = linear_encoder(
            Direction::AudioToVisual,
            &ndarray::arr2(&[[0.0, 0.0], [4.0, 0.0]]),
        );
        let g = linear_encoder(
            Direction::VisualToAudio,
            &ndarray::arr2(&[[0.0, 1.5], [0.0, 0.0]]),
        );
        let l = adversarial_loss(&a, &v, &f, &g).unwrap();
        assert!(l.abs() < 1e-12, "aligned case: {l}");

        // f(a) ⟂ v, g(v) ⟂ a
        let f = linear_encoder(
            Direction::AudioToVisual,
            &ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0]]),
        );
        let g = linear_encoder(
            Direction::VisualToAudio,
            &ndarray::arr2(&[[0.0, 0.0], [0.0, 1.0]]),
        );
        let l = adversarial_loss(&a, &v, &f, &g).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "orthogonal case: {l}");

        // f(a) = −v, g(v) = −a
        let f = linear_encoder(
            Direction::AudioToVisual,
            &ndarray::arr2(&[[0.0, 0.0], [-2.0, 0.0]]),
        );
        let g = linear_encoder(
            Direction::VisualToAudio,
            &ndarray::arr2(&[[0.0, -0.5], [0.0, 0.0]]),
        );
        let l = adversarial_loss(&a, &v, &f, &g).unwrap();
        assert!((l - 4.0).abs() < 1e-12, "anti-aligned case: {l}");
    }

    #[test]
    fn cycle_loss_zero_for_identity_encoders() {
        let f = WeightEncoder::identity(Direction::AudioToVisual, 3);
        let g = WeightEncoder::identity(Direction::VisualToAudio, 3);
        let a = audio(&[0.2, -0.4, 1.0]);
        let v = visual(&[1.0, 2.0, 3.0]);
        let l = cycle_loss(&a, &v, &f, &g).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn cycle_loss_two_for_orthogonal_round_trip() {
        // f swaps the two coordinates while g is the identity, so both round
        // trips land orthogonal to their starting tracks
        let a = audio(&[1.0, 0.0]);
        let v = visual(&[1.0, 0.0]);
        let swap = ndarray::arr2(&[[0.0, 1.0], [1.0, 0.0]]);
        let f = linear_encoder(Direction::AudioToVisual, &swap);
        let g_id = linear_encoder(Direction::VisualToAudio, &Array2::eye(2));
        let l = cycle_loss(&a, &v, &f, &g_id).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "got {l}");
    }

    #[test]
    fn losses_are_bounded_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let la = rng.random_range(2..8);
            let lv = rng.random_range(2..8);
            let f = WeightEncoder::init(Direction::AudioToVisual, la, lv, &mut rng);
            let g = WeightEncoder::init(Direction::VisualToAudio, lv, la, &mut rng);
            let a_vals: Vec<f64> = (0..la).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v_vals: Vec<f64> = (0..lv).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = audio(&a_vals);
            let v = visual(&v_vals);
            let adv = adversarial_loss(&a, &v, &f, &g).unwrap();
            let cyc = cycle_loss(&a, &v, &f, &g).unwrap();
            assert!((0.0..=4.0).contains(&adv));
            assert!((0.0..=4.0).contains(&cyc));

            let scale = rng.random_range(0.1..5.0);
            let a_s = TemporalAttention::new(a.values.mapv(|x| x * scale), Modality::Audio).unwrap();
            let v_s =
                TemporalAttention::new(v.values.mapv(|x| x * scale), Modality::Visual).unwrap();
            // tanh hidden layers see scaled inputs, so only exact scale
            // invariance of the cosine terms on the *inputs* is tested with
            // linear encoders
            let f_lin = WeightEncoder::identity(Direction::AudioToVisual, la);
            let g_lin = WeightEncoder::identity(Direction::VisualToAudio, la);
            if la == lv {
                let l1 = adversarial_loss(&a, &v, &f_lin, &g_lin).unwrap();
                let l2 = adversarial_loss(&a_s, &v_s, &f_lin, &g_lin).unwrap();
                assert!((l1 - l2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_track_uses_zero_cosine_convention() {
        let f = zero_encoder(Direction::AudioToVisual, 2, 2);
        let g = zero_encoder(Direction::VisualToAudio, 2, 2);
        let a = audio(&[1.0, 1.0]);
        let v = visual(&[1.0, -1.0]);
        // both encoder outputs are zero vectors: each cosine term is 0
        let l = adversarial_loss(&a, &v, &f, &g).unwrap();
        assert_eq!(l, 2.0);
    }

    #[test]
    fn resample_identity_midpoint_broadcast() {
        let track = arr1(&[1.0, 2.0, 4.0]);
        assert_eq!(resample_track(&track, 3).unwrap(), track);
        let mid = resample_track(&track, 1).unwrap();
        assert_eq!(mid, arr1(&[2.0]));
        let up = resample_track(&arr1(&[3.0]), 4).unwrap();
        assert_eq!(up, arr1(&[3.0, 3.0, 3.0, 3.0]));
        let two = resample_track(&arr1(&[0.0, 3.0]), 4).unwrap();
        assert_eq!(two, arr1(&[0.0, 1.0, 2.0, 3.0]));
    }

    #[test]
    fn graph_losses_track_pure_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..10 {
            let la = rng.random_range(2..6);
            let lv = rng.random_range(2..6);
            let f = WeightEncoder::init(Direction::AudioToVisual, la, lv, &mut rng);
            let g_enc = WeightEncoder::init(Direction::VisualToAudio, lv, la, &mut rng);
            let a_vals: Vec<f64> = (0..la).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v_vals: Vec<f64> = (0..lv).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = audio(&a_vals);
            let v = visual(&v_vals);

            let mut graph = Graph::new();
            let av = graph.leaf1(a.values.clone());
            let vv = graph.leaf1(v.values.clone());
            let fv = EncoderVars::leaves(&mut graph, &f);
            let gv = EncoderVars::leaves(&mut graph, &g_enc);
            let adv = adversarial_loss_graph(&mut graph, av, vv, fv, gv);
            let cyc = cycle_loss_graph(&mut graph, av, vv, fv, gv);

            let adv_pure = adversarial_loss(&a, &v, &f, &g_enc).unwrap();
            let cyc_pure = cycle_loss(&a, &v, &f, &g_enc).unwrap();
            assert!((graph.scalar_value(adv) - adv_pure).abs() < 1e-12);
            assert!((graph.scalar_value(cyc) - cyc_pure).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        use crate::autodiff::finite_diff::{central_grad, max_rel_err};

        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (la, lv) = (4, 3);
        let f = WeightEncoder::init(Direction::AudioToVisual, la, lv, &mut rng);
        let g_enc = WeightEncoder::init(Direction::VisualToAudio, lv, la, &mut rng);
        let a_vals: Vec<f64> = (0..la).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v_vals: Vec<f64> = (0..lv).map(|_| rng.random_range(-2.0..2.0)).collect();

        let mut ps = ParamSet::new();
        f.register(&mut ps, "f");
        g_enc.register(&mut ps, "g");
        let mut point: Vec<f64> = Vec::new();
        point.extend(a_vals.iter());
        point.extend(v_vals.iter());
        let layout: Vec<(String, Vec<usize>)> = ps
            .iter()
            .map(|(n, v)| (n.to_string(), v.shape().to_vec()))
            .collect();
        for (_, v) in ps.iter() {
            point.extend(v.iter());
        }

        let eval = |flat: &[f64]| -> (Graph, Vec<Var>, Var) {
            let mut graph = Graph::new();
            let av = graph.leaf1(Array1::from_vec(flat[..la].to_vec()));
            let vv = graph.leaf1(Array1::from_vec(flat[la..la + lv].to_vec()));
            let mut off = la + lv;
            let mut vars = vec![av, vv];
            let mut by_name = std::collections::HashMap::new();
            for (name, shape) in &layout {
                let n: usize = shape.iter().product();
                let leaf = graph.leaf(
                    ndarray::ArrayD::from_shape_vec(
                        ndarray::IxDyn(shape),
                        flat[off..off + n].to_vec(),
                    )
                    .unwrap(),
                );
                off += n;
                vars.push(leaf);
                by_name.insert(name.clone(), leaf);
            }
            let pick = |s: &str| by_name[s];
            let fv = EncoderVars {
                w1: pick("f.w1"),
                b1: pick("f.b1"),
                w2: pick("f.w2"),
                b2: pick("f.b2"),
                w3: pick("f.w3"),
                b3: pick("f.b3"),
                activation: Activation::Tanh,
            };
            let gv = EncoderVars {
                w1: pick("g.w1"),
                b1: pick("g.b1"),
                w2: pick("g.w2"),
                b2: pick("g.b2"),
                w3: pick("g.w3"),
                b3: pick("g.b3"),
                activation: Activation::Tanh,
            };
            let adv = adversarial_loss_graph(&mut graph, av, vv, fv, gv);
            let cyc = cycle_loss_graph(&mut graph, av, vv, fv, gv);
            let out = graph.add(adv, cyc);
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
        let mut sizes = vec![la, lv];
        sizes.extend(layout.iter().map(|(_, s)| s.iter().product::<usize>()));
        for (v, &n) in vars.iter().zip(sizes.iter()) {
            match grads.get(*v) {
                Some(gr) => analytic.extend(gr.iter()),
                None => analytic.extend(std::iter::repeat(0.0).take(n)),
            }
        }
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "cycle gradient mismatch: {err}");
    }

    #[test]
    fn fitting_drives_cycle_loss_down_on_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let (la, lv) = (6, 6);
        // visual tracks are a fixed linear image of the audio tracks
        let map = Array2::from_shape_fn((lv, la), |_| rng.random_range(-0.6..0.6));
        let pairs: Vec<(TemporalAttention, TemporalAttention)> = (0..8)
            .map(|_| {
                let a_vals: Vec<f64> = (0..la).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = Array1::from_vec(a_vals);
                let v = map.dot(&a);
                (
                    TemporalAttention::new(a, Modality::Audio).unwrap(),
                    TemporalAttention::new(v, Modality::Visual).unwrap(),
                )
            })
            .collect();
        let mut f = WeightEncoder::init(Direction::AudioToVisual, la, lv, &mut rng);
        let mut g_enc = WeightEncoder::init(Direction::VisualToAudio, lv, la, &mut rng);
        let history = fit_cycle_encoders(&pairs, &mut f, &mut g_enc, 400, 0.2).unwrap();
        let last = *history.last().unwrap();
        assert!(
            last < 0.5,
            "cycle loss should fall well below its starting value, got {last}"
        );
        assert!(history[0] > last);
    }
}
