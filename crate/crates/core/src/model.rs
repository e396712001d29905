//! The assembled verification model: one parameter store covering both
//! encoders, both pooling blocks, the cycle encoders, the fusion block,
//! and the three classifier heads, plus the per-utterance loss graphs
//! each training stage optimizes.
//!
//! The branch projections inside the fusion block double as the unimodal
//! utterance embeddings, so the unimodal stages train their projection
//! alongside encoder, pooling, and head; the joint stage trains
//! everything and adds the cycle and orthogonality terms.

use ndarray::{Array1, Array2, ArrayD};

use crate::autodiff::{interp_taps, Graph, Pad, Var};
use crate::config::{RunConfig, Stage};
use crate::cycle::{Activation, Direction, EncoderVars, WeightEncoder};
use crate::encoders::{
    encode_audio_graph, encode_visual_graph, AudioEncoder, AudioEncoderConfig, AudioEncoderVars,
    VisualEncoder, VisualEncoderConfig, VisualEncoderVars,
};
use crate::error::{Error, Result};
use crate::fusion::{
    gated_fuse, gated_fuse_graph, ortho_pair_graph, FusedOutput, FusionParams, FusionVars,
    UtteranceEmbedding,
};
use crate::objectives::{aam_softmax_loss_graph, ClassifierHead};
use crate::params::{ParamSet, ParamVars};
use crate::pooling::{attentive_pool, AttentionParams, AttentionState, FrameFeatures};
use crate::seeds::{self, Stream};
use crate::{checkpoint::Checkpoint, Modality};

/// Kernel widths of the audio stand-in encoder, one per layer. One narrow
/// context layer, then a pointwise layer: enough temporal mixing capacity to
/// learn without drowning per-frame structure in context.
pub const AUDIO_CONTEXT_WIDTHS: [usize; 2] = [3, 1];
/// Stride-2 stages in the visual stand-in encoder.
pub const VISUAL_DEPTH: usize = 2;
/// Circular temporal padding keeps a time-constant utterance time-constant
/// through the audio stack, so flat input earns flat attention.
pub const AUDIO_PAD: Pad = Pad::Circular;

fn audio_encoder_config(cfg: &RunConfig) -> AudioEncoderConfig {
    AudioEncoderConfig {
        in_dim: cfg.audio_in_dim,
        channels: cfg.channels,
        context_widths: AUDIO_CONTEXT_WIDTHS.to_vec(),
    }
}

fn visual_encoder_config(cfg: &RunConfig) -> VisualEncoderConfig {
    VisualEncoderConfig {
        height: cfg.visual_size,
        width: cfg.visual_size,
        channels: cfg.channels,
        depth: VISUAL_DEPTH,
    }
}

/// One loaded training example.
#[derive(Debug, Clone)]
pub struct UttSample {
    pub utt_id: String,
    pub label: usize,
    pub audio: Array2<f64>,
    pub visual: ArrayD<f64>,
}

/// All three utterance embeddings plus the fusion gate.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub u_a: Array1<f64>,
    pub u_v: Array1<f64>,
    pub fused: Array1<f64>,
    pub gate: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub num_classes: usize,
    pub params: ParamSet,
}

/// Parameter-name prefixes a training stage may update.
pub fn trainable_prefixes(stage: Stage, freeze_backbones: bool) -> Vec<&'static str> {
    match stage {
        Stage::UnimodalAudio => vec!["audio_enc.", "pool_a.", "fusion.proj_a.", "head_a."],
        Stage::UnimodalVisual => vec!["visual_enc.", "pool_v.", "fusion.proj_v.", "head_v."],
        Stage::Joint => {
            let mut p = vec![
                "cycle_f.", "cycle_g.", "fusion.", "head_a.", "head_v.", "head_f.",
            ];
            if !freeze_backbones {
                p.extend(["audio_enc.", "visual_enc.", "pool_a.", "pool_v."]);
            }
            p
        }
    }
}

impl Model {
    /// Fresh parameters for every block, in one fixed registration order.
    /// Deterministic given (config, class count).
    pub fn init(cfg: &RunConfig, num_classes: usize) -> Result<Model> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(Error::contract(format!(
                "classification needs at least 2 identities, got {num_classes}"
            )));
        }
        let mut rng = seeds::rng(cfg.seed, Stream::ParamInit, 0);
        let audio_enc = AudioEncoder::init(&audio_encoder_config(cfg), &mut rng)?;
        let visual_enc = VisualEncoder::init(&visual_encoder_config(cfg), &mut rng)?;
        let pool_a = AttentionParams::init(cfg.channels, cfg.bottleneck, &mut rng)?;
        let pool_v = AttentionParams::init(cfg.channels, cfg.bottleneck, &mut rng)?;
        let cycle_f = WeightEncoder::init(
            Direction::AudioToVisual,
            cfg.audio_track_len,
            cfg.visual_track_len,
            &mut rng,
        );
        let cycle_g = WeightEncoder::init(
            Direction::VisualToAudio,
            cfg.visual_track_len,
            cfg.audio_track_len,
            &mut rng,
        );
        let fusion = FusionParams::init(
            2 * cfg.channels,
            2 * cfg.channels,
            cfg.embed_dim,
            &mut rng,
        );
        let head_a = ClassifierHead::init(num_classes, cfg.embed_dim, cfg.margin, cfg.scale, &mut rng)?;
        let head_v = ClassifierHead::init(num_classes, cfg.embed_dim, cfg.margin, cfg.scale, &mut rng)?;
        let head_f = ClassifierHead::init(num_classes, cfg.embed_dim, cfg.margin, cfg.scale, &mut rng)?;

        let mut params = ParamSet::new();
        audio_enc.register(&mut params, "audio_enc");
        visual_enc.register(&mut params, "visual_enc");
        pool_a.register(&mut params, "pool_a");
        pool_v.register(&mut params, "pool_v");
        cycle_f.register(&mut params, "cycle_f");
        cycle_g.register(&mut params, "cycle_g");
        fusion.register(&mut params, "fusion");
        head_a.register(&mut params, "head_a");
        head_v.register(&mut params, "head_v");
        head_f.register(&mut params, "head_f");

        Ok(Model {
            config: cfg.clone(),
            num_classes,
            params,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let head = ck
            .params
            .try_get("head_a.w")
            .ok_or_else(|| Error::contract("checkpoint is missing head_a.w"))?;
        if head.ndim() != 2 {
            return Err(Error::contract("head_a.w is not a matrix"));
        }
        Ok(Model {
            config: ck.config.clone(),
            num_classes: head.shape()[0],
            params: ck.params.clone(),
        })
    }

    pub fn audio_encoder(&self) -> Result<AudioEncoder> {
        AudioEncoder::from_params(&self.params, "audio_enc", AUDIO_PAD)
    }

    pub fn visual_encoder(&self) -> Result<VisualEncoder> {
        VisualEncoder::from_params(&self.params, "visual_enc")
    }

    pub fn pool(&self, modality: Modality) -> Result<AttentionParams> {
        match modality {
            Modality::Audio => AttentionParams::from_params(&self.params, "pool_a"),
            Modality::Visual => AttentionParams::from_params(&self.params, "pool_v"),
            Modality::Fused => Err(Error::contract("no pooling block for the fused system")),
        }
    }

    pub fn cycle_encoders(&self) -> Result<(WeightEncoder, WeightEncoder)> {
        let f = WeightEncoder::from_params(
            &self.params,
            "cycle_f",
            Direction::AudioToVisual,
            Activation::Tanh,
        )?;
        let g = WeightEncoder::from_params(
            &self.params,
            "cycle_g",
            Direction::VisualToAudio,
            Activation::Tanh,
        )?;
        Ok((f, g))
    }

    pub fn fusion_params(&self) -> Result<FusionParams> {
        FusionParams::from_params(&self.params, "fusion")
    }

    pub fn head(&self, modality: Modality) -> Result<ClassifierHead> {
        let prefix = match modality {
            Modality::Audio => "head_a",
            Modality::Visual => "head_v",
            Modality::Fused => "head_f",
        };
        ClassifierHead::from_params(&self.params, prefix, self.config.margin, self.config.scale)
    }

    fn check_sample_shapes(&self, audio: &Array2<f64>, visual: &ArrayD<f64>) -> Result<()> {
        if audio.ncols() != self.config.audio_in_dim {
            return Err(Error::contract(format!(
                "audio frames have dim {}, config says {}",
                audio.ncols(),
                self.config.audio_in_dim
            )));
        }
        if audio.nrows() == 0 {
            return Err(Error::contract("audio track has no frames"));
        }
        let vs = visual.shape();
        if visual.ndim() != 4 || vs[1] != 1 || vs[2] != self.config.visual_size || vs[3] != self.config.visual_size
        {
            return Err(Error::contract(format!(
                "visual track must be [T x 1 x {0} x {0}], got {vs:?}",
                self.config.visual_size
            )));
        }
        if vs[0] == 0 {
            return Err(Error::contract("visual track has no frames"));
        }
        Ok(())
    }

    /// Pure forward pass to all three embeddings, keeping the attention
    /// states for heatmaps and track extraction.
    pub fn embed_pair(
        &self,
        audio: &Array2<f64>,
        visual: &ArrayD<f64>,
        utt_id: &str,
    ) -> Result<(EmbeddingSet, AttentionState, AttentionState)> {
        self.check_sample_shapes(audio, visual)?;
        let feats_a = self.audio_encoder()?.encode(audio, utt_id)?;
        let feats_v = self.visual_encoder()?.encode(visual, utt_id)?;
        let (stats_a, att_a) = attentive_pool(&feats_a, &self.pool(Modality::Audio)?)?;
        let (stats_v, att_v) = attentive_pool(&feats_v, &self.pool(Modality::Visual)?)?;
        let x_a = UtteranceEmbedding::new(stats_a.embedding, Modality::Audio, utt_id, None)?;
        let x_v = UtteranceEmbedding::new(stats_v.embedding, Modality::Visual, utt_id, None)?;
        let FusedOutput { u_a, u_v, gate, fused } = gated_fuse(&x_a, &x_v, &self.fusion_params()?)?;
        Ok((
            EmbeddingSet { u_a, u_v, fused, gate },
            att_a,
            att_v,
        ))
    }

    /// Frame features for one modality, for attention inspection.
    pub fn frame_features(
        &self,
        audio: &Array2<f64>,
        visual: &ArrayD<f64>,
        utt_id: &str,
    ) -> Result<(FrameFeatures, FrameFeatures)> {
        self.check_sample_shapes(audio, visual)?;
        Ok((
            self.audio_encoder()?.encode(audio, utt_id)?,
            self.visual_encoder()?.encode(visual, utt_id)?,
        ))
    }

    fn audio_branch_graph(&self, g: &mut Graph, vars: &ParamVars, sample: &UttSample) -> (Var, Var) {
        let x = g.leaf2(sample.audio.clone());
        let enc = AudioEncoderVars::from_param_vars(
            vars,
            "audio_enc",
            AUDIO_CONTEXT_WIDTHS.len(),
            AUDIO_PAD,
        );
        let h = encode_audio_graph(g, &enc, x);
        let pool = crate::pooling::attentive_pool_graph(
            g,
            h,
            vars.var("pool_a.w"),
            vars.var("pool_a.b"),
            vars.var("pool_a.v"),
            vars.var("pool_a.k"),
        );
        (pool.embedding, pool.temporal_tanh)
    }

    fn visual_branch_graph(&self, g: &mut Graph, vars: &ParamVars, sample: &UttSample) -> (Var, Var) {
        let enc = VisualEncoderVars::from_param_vars(vars, "visual_enc", VISUAL_DEPTH);
        let h = encode_visual_graph(g, &enc, &sample.visual);
        let pool = crate::pooling::attentive_pool_graph(
            g,
            h,
            vars.var("pool_v.w"),
            vars.var("pool_v.b"),
            vars.var("pool_v.v"),
            vars.var("pool_v.k"),
        );
        (pool.embedding, pool.temporal_tanh)
    }

    fn project_graph(&self, g: &mut Graph, vars: &ParamVars, pooled: Var, side: &str) -> Var {
        let lin = g.matvec(vars.var(&format!("fusion.proj_{side}.w")), pooled);
        g.add(lin, vars.var(&format!("fusion.proj_{side}.b")))
    }

    /// Stage-dependent loss for one utterance, as a scalar node.
    pub fn utterance_loss_graph(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        sample: &UttSample,
    ) -> Result<Var> {
        self.check_sample_shapes(&sample.audio, &sample.visual)?;
        if sample.label >= self.num_classes {
            return Err(Error::contract(format!(
                "label {} outside the {} training identities",
                sample.label, self.num_classes
            )));
        }
        let cfg = &self.config;
        match cfg.stage {
            Stage::UnimodalAudio => {
                let (pooled, _) = self.audio_branch_graph(g, vars, sample);
                let u_a = self.project_graph(g, vars, pooled, "a");
                Ok(aam_softmax_loss_graph(
                    g,
                    u_a,
                    sample.label,
                    vars.var("head_a.w"),
                    cfg.margin,
                    cfg.scale,
                ))
            }
            Stage::UnimodalVisual => {
                let (pooled, _) = self.visual_branch_graph(g, vars, sample);
                let u_v = self.project_graph(g, vars, pooled, "v");
                Ok(aam_softmax_loss_graph(
                    g,
                    u_v,
                    sample.label,
                    vars.var("head_v.w"),
                    cfg.margin,
                    cfg.scale,
                ))
            }
            Stage::Joint => {
                let (pooled_a, track_a) = self.audio_branch_graph(g, vars, sample);
                let (pooled_v, track_v) = self.visual_branch_graph(g, vars, sample);
                let fused = gated_fuse_graph(
                    g,
                    pooled_a,
                    pooled_v,
                    FusionVars::from_param_vars(vars, "fusion"),
                );

                let l_a = aam_softmax_loss_graph(
                    g,
                    fused.u_a,
                    sample.label,
                    vars.var("head_a.w"),
                    cfg.margin,
                    cfg.scale,
                );
                let l_v = aam_softmax_loss_graph(
                    g,
                    fused.u_v,
                    sample.label,
                    vars.var("head_v.w"),
                    cfg.margin,
                    cfg.scale,
                );
                let l_f = aam_softmax_loss_graph(
                    g,
                    fused.fused,
                    sample.label,
                    vars.var("head_f.w"),
                    cfg.margin,
                    cfg.scale,
                );
                let aam2 = g.add(l_a, l_v);
                let l_aam = g.add(aam2, l_f);

                let taps_a = interp_taps(sample.audio.nrows(), cfg.audio_track_len);
                let taps_v = interp_taps(sample.visual.shape()[0], cfg.visual_track_len);
                let cyc_in_a = g.interp(track_a, taps_a);
                let cyc_in_v = g.interp(track_v, taps_v);
                let f_vars = EncoderVars::from_param_vars(vars, "cycle_f", Activation::Tanh);
                let g_vars = EncoderVars::from_param_vars(vars, "cycle_g", Activation::Tanh);
                let l_adv =
                    crate::cycle::adversarial_loss_graph(g, cyc_in_a, cyc_in_v, f_vars, g_vars);
                let l_cyc = crate::cycle::cycle_loss_graph(g, cyc_in_a, cyc_in_v, f_vars, g_vars);
                let l_ortho = ortho_pair_graph(g, fused.u_a, fused.u_v);

                let adv_w = g.scale(l_adv, cfg.beta);
                let cyc_w = g.scale(l_cyc, cfg.gamma);
                let ortho_w = g.scale(l_ortho, cfg.ortho_weight);
                let s1 = g.add(l_aam, adv_w);
                let s2 = g.add(s1, cyc_w);
                Ok(g.add(s2, ortho_w))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycle::{adversarial_loss, cycle_loss, resample_track, TemporalAttention};
    use crate::objectives::aam_softmax_loss;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.channels = 4;
        cfg.bottleneck = 3;
        cfg.embed_dim = 6;
        cfg.audio_in_dim = 5;
        cfg.visual_size = 8;
        cfg.audio_track_len = 6;
        cfg.visual_track_len = 4;
        cfg.audio_frames = 6;
        cfg.visual_frames = 4;
        cfg
    }

    fn sample(cfg: &RunConfig, seed: u64, label: usize) -> UttSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        UttSample {
            utt_id: format!("u{seed}"),
            label,
            audio: Array2::from_shape_fn((cfg.audio_frames, cfg.audio_in_dim), |_| {
                rng.random_range(-1.0..1.0)
            }),
            visual: ArrayD::from_shape_fn(
                IxDyn(&[cfg.visual_frames, 1, cfg.visual_size, cfg.visual_size]),
                |_| rng.random_range(-1.0..1.0),
            ),
        }
    }

    #[test]
    fn init_is_deterministic_with_fixed_layout() {
        let cfg = tiny_config();
        let m1 = Model::init(&cfg, 3).unwrap();
        let m2 = Model::init(&cfg, 3).unwrap();
        assert_eq!(m1.params.len(), m2.params.len());
        for ((n1, v1), (n2, v2)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
        let names: Vec<&str> = m1.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "audio_enc.conv0.w");
        assert!(names.last().unwrap().starts_with("head_f."));
        for group in [
            "audio_enc.", "visual_enc.", "pool_a.", "pool_v.", "cycle_f.", "cycle_g.", "fusion.",
            "head_a.", "head_v.", "head_f.",
        ] {
            assert!(
                names.iter().any(|n| n.starts_with(group)),
                "missing group {group}"
            );
        }
        assert!(Model::init(&cfg, 1).is_err());
    }

    #[test]
    fn stage_prefix_sets_cover_the_right_groups() {
        let ua = trainable_prefixes(Stage::UnimodalAudio, false);
        assert!(ua.contains(&"audio_enc.") && ua.contains(&"fusion.proj_a."));
        assert!(!ua.contains(&"visual_enc.") && !ua.contains(&"head_f."));

        let joint = trainable_prefixes(Stage::Joint, false);
        assert_eq!(joint.len(), 10);
        let frozen = trainable_prefixes(Stage::Joint, true);
        assert!(!frozen.contains(&"audio_enc.") && !frozen.contains(&"pool_v."));
        assert!(frozen.contains(&"fusion.") && frozen.contains(&"cycle_f."));
    }

    #[test]
    fn unimodal_loss_reaches_only_its_parameter_groups() {
        let mut cfg = tiny_config();
        cfg.stage = Stage::UnimodalAudio;
        let model = Model::init(&cfg, 3).unwrap();
        let s = sample(&cfg, 1, 2);

        let mut g = Graph::new();
        let vars = model.params.leaves(&mut g);
        let loss = model.utterance_loss_graph(&mut g, &vars, &s).unwrap();
        let grads = g.backward(loss);

        let allowed = trainable_prefixes(Stage::UnimodalAudio, false);
        for (name, _) in model.params.iter() {
            let has_grad = grads.get(vars.var(name)).is_some();
            let expected = allowed.iter().any(|p| name.starts_with(p));
            assert_eq!(has_grad, expected, "parameter {name}");
        }
    }

    #[test]
    fn joint_loss_reaches_every_parameter_group() {
        let mut cfg = tiny_config();
        cfg.stage = Stage::Joint;
        let model = Model::init(&cfg, 3).unwrap();
        let s = sample(&cfg, 2, 0);

        let mut g = Graph::new();
        let vars = model.params.leaves(&mut g);
        let loss = model.utterance_loss_graph(&mut g, &vars, &s).unwrap();
        let grads = g.backward(loss);
        for (name, _) in model.params.iter() {
            assert!(
                grads.get(vars.var(name)).is_some(),
                "no gradient for {name}"
            );
        }
    }

    #[test]
    fn joint_graph_loss_matches_pure_composition() {
        let mut cfg = tiny_config();
        cfg.stage = Stage::Joint;
        let model = Model::init(&cfg, 3).unwrap();
        let s = sample(&cfg, 3, 1);

        let mut g = Graph::new();
        let vars = model.params.leaves(&mut g);
        let loss = model.utterance_loss_graph(&mut g, &vars, &s).unwrap();
        let got = g.scalar_value(loss);

        let (emb, att_a, att_v) = model.embed_pair(&s.audio, &s.visual, &s.utt_id).unwrap();
        let l_a = aam_softmax_loss(&emb.u_a, s.label, &model.head(Modality::Audio).unwrap()).unwrap();
        let l_v =
            aam_softmax_loss(&emb.u_v, s.label, &model.head(Modality::Visual).unwrap()).unwrap();
        let l_f =
            aam_softmax_loss(&emb.fused, s.label, &model.head(Modality::Fused).unwrap()).unwrap();
        let track_a = TemporalAttention::new(
            resample_track(&att_a.temporal_tanh, cfg.audio_track_len).unwrap(),
            Modality::Audio,
        )
        .unwrap();
        let track_v = TemporalAttention::new(
            resample_track(&att_v.temporal_tanh, cfg.visual_track_len).unwrap(),
            Modality::Visual,
        )
        .unwrap();
        let (f, ge) = model.cycle_encoders().unwrap();
        let l_adv = adversarial_loss(&track_a, &track_v, &f, &ge).unwrap();
        let l_cyc = cycle_loss(&track_a, &track_v, &f, &ge).unwrap();
        let cos = emb.u_a.dot(&emb.u_v)
            / (emb.u_a.dot(&emb.u_a).sqrt() * emb.u_v.dot(&emb.u_v).sqrt());
        let want = l_a + l_v + l_f + cfg.beta * l_adv + cfg.gamma * l_cyc
            + cfg.ortho_weight * cos * cos;
        assert!((got - want).abs() < 1e-12, "graph {got} vs pure {want}");
    }

    #[test]
    fn bad_samples_are_rejected() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 3).unwrap();
        let good = sample(&cfg, 4, 0);

        let mut bad_label = good.clone();
        bad_label.label = 3;
        let mut g = Graph::new();
        let vars = model.params.leaves(&mut g);
        assert!(model.utterance_loss_graph(&mut g, &vars, &bad_label).is_err());

        let mut bad_audio = good.clone();
        bad_audio.audio = Array2::zeros((4, cfg.audio_in_dim + 1));
        assert!(model.embed_pair(&bad_audio.audio, &bad_audio.visual, "u").is_err());

        let mut bad_visual = good;
        bad_visual.visual = ArrayD::zeros(IxDyn(&[2, 3, cfg.visual_size, cfg.visual_size]));
        assert!(model.embed_pair(&bad_visual.audio, &bad_visual.visual, "u").is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_the_model() {
        let cfg = tiny_config();
        let model = Model::init(&cfg, 3).unwrap();
        let ck = Checkpoint::new(cfg.clone(), model.params.clone());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.avck");
        ck.save(&path).unwrap();
        let back = Model::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.num_classes, 3);

        let s = sample(&cfg, 5, 0);
        let (e1, _, _) = model.embed_pair(&s.audio, &s.visual, &s.utt_id).unwrap();
        let (e2, _, _) = back.embed_pair(&s.audio, &s.visual, &s.utt_id).unwrap();
        assert_eq!(e1.fused, e2.fused);
        assert_eq!(e1.u_a, e2.u_a);
        assert_eq!(e1.u_v, e2.u_v);
    }
}
