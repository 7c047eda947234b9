//! The toy generator and the bundle of every network used in training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaat::{adaat_apply, squash_params};
use crate::diffcore::{Graph, Reduce, Tensor, Var};
use crate::error::{Error, Result};
use crate::lossstack::{signal_features, Discriminator, FeatureExtractor, SyncNet, SIGNAL_BINS};
use crate::nn::{Bound, Conv, InitKind, Mlp, ParamSet};
use crate::synthdata::{FrameSample, CHANNELS, MASK_ROW, REFERENCES, SIZE, WINDOW};
use crate::uncertainty::UncertaintyNet;

/// Channels of the reference and deformation features (one affine transform each).
pub const FEATURE_CHANNELS: usize = 16;
const AUDIO_DIM: usize = 16;
const SOURCE_CHANNELS: usize = 8;
const ID_CHANNELS: usize = 8;
const DECODER_CHANNELS: usize = 8;

/// Inputs of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorInput<'a> {
    pub source: &'a Tensor,
    pub references: &'a [Tensor],
    pub window: &'a Tensor,
}

impl<'a> From<&'a FrameSample> for GeneratorInput<'a> {
    fn from(s: &'a FrameSample) -> Self {
        GeneratorInput { source: &s.source, references: &s.references, window: &s.signal_window }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    audio_encoder: Mlp,
    source_encoder: Conv,
    reference_encoder: Conv,
    id_encoder: Conv,
    param_encoder: Mlp,
    deform_encoder: Conv,
    deform_decoder: Conv,
    face_decoder: [Conv; 2],
}

impl Generator {
    pub fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Self {
        let c = FEATURE_CHANNELS;
        Generator {
            audio_encoder: Mlp::new(ps, "audio_encoder", WINDOW * SIGNAL_BINS, 32, AUDIO_DIM, InitKind::He, rng),
            source_encoder: Conv::new(ps, "source_encoder", CHANNELS, SOURCE_CHANNELS, 3, 1, InitKind::He, rng),
            reference_encoder: Conv::new(ps, "reference_encoder", CHANNELS * REFERENCES, c, 3, 1, InitKind::He, rng),
            id_encoder: Conv::new(ps, "id_encoder", SOURCE_CHANNELS + c, ID_CHANNELS, 3, 1, InitKind::He, rng),
            // Zero-initialised output so training starts from identity warps.
            param_encoder: Mlp::new(ps, "param_encoder", ID_CHANNELS + AUDIO_DIM, 32, 4 * c, InitKind::Zero, rng),
            deform_encoder: Conv::new(ps, "deform_encoder", c, c, 1, 1, InitKind::He, rng),
            deform_decoder: Conv::new(ps, "deform_decoder", c, DECODER_CHANNELS, 3, 1, InitKind::He, rng),
            face_decoder: [
                Conv::new(ps, "face_decoder.0", DECODER_CHANNELS + SOURCE_CHANNELS, 8, 3, 1, InitKind::He, rng),
                Conv::new(ps, "face_decoder.1", 8, CHANNELS, 3, 1, InitKind::He, rng),
            ],
        }
    }

    /// Generated image `[3,32,32]` in `(0,1)`.
    pub fn forward(&self, g: &Graph, p: &Bound, input: GeneratorInput<'_>) -> Result<Var> {
        let want = [CHANNELS, SIZE, SIZE];
        if input.source.shape() != want {
            return Err(Error::shape(format!("source {:?}, expected {want:?}", input.source.shape())));
        }
        if input.references.len() != REFERENCES || input.references.iter().any(|r| r.shape() != want) {
            return Err(Error::shape(format!("expected {REFERENCES} references of shape {want:?}")));
        }
        let window = signal_features(g, g.constant(input.window.clone()))?;
        let f_a = self.audio_encoder.forward(g, p, window).map_err(|e| e.in_stage("audio_encoder"))?;

        let source = g.constant(input.source.clone());
        let f_s = g.silu(self.source_encoder.forward(g, p, source)?);

        let refs: Vec<Var> = input.references.iter().map(|r| g.constant(r.clone())).collect();
        let refs = g.avg_pool2(g.concat(&refs, 0)?)?;
        let f_r = g.silu(self.reference_encoder.forward(g, p, refs)?);

        let id_in = g.concat(&[g.avg_pool2(f_s)?, f_r], 0)?;
        let f_i = g.silu(self.id_encoder.forward(g, p, id_in).map_err(|e| e.in_stage("id_encoder"))?);

        let half = SIZE / 2;
        let pooled = g.reduce(Reduce::Mean, g.reshape(f_i, &[ID_CHANNELS, half * half])?, Some(1))?;
        let code = g.concat(&[pooled, g.reshape(f_a, &[AUDIO_DIM])?], 0)?;
        let raw = self.param_encoder.forward(g, p, code).map_err(|e| e.in_stage("param_encoder"))?;
        let params = squash_params(g, g.reshape(raw, &[FEATURE_CHANNELS, 4])?)?;

        let deform_in = g.silu(self.deform_encoder.forward(g, p, f_r)?);
        let warped = adaat_apply(g, deform_in, &params).map_err(|e| e.in_stage("adaat"))?;
        let f_d = g.upsample2(g.silu(self.deform_decoder.forward(g, p, warped)?))?;

        let x = g.concat(&[f_d, f_s], 0)?;
        let x = g.silu(self.face_decoder[0].forward(g, p, x)?);
        let x = self.face_decoder[1].forward(g, p, x).map_err(|e| e.in_stage("face_decoder"))?;
        Ok(g.sigmoid(x))
    }
}

/// Every network of the training setup with its parameters.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub generator: Generator,
    pub gen_params: ParamSet,
    pub discriminator: Discriminator,
    pub disc_params: ParamSet,
    pub uncertainty: UncertaintyNet,
    pub unc_params: ParamSet,
    pub sync: SyncNet,
    pub sync_params: ParamSet,
    pub features: FeatureExtractor,
}

impl ModelBundle {
    pub fn new(seed: u64) -> Self {
        // One stream per network, so resizing one leaves the others' initialisation unchanged.
        let rng = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let mut gen_params = ParamSet::new();
        let generator = Generator::new(&mut gen_params, &mut rng(10));
        let mut disc_params = ParamSet::new();
        let discriminator = Discriminator::new(&mut disc_params, "disc", CHANNELS, &mut rng(11));
        let mut unc_params = ParamSet::new();
        let uncertainty = UncertaintyNet::new(&mut unc_params, "unc", CHANNELS, 16, &mut rng(12));
        let mut sync_params = ParamSet::new();
        let sync = SyncNet::new(&mut sync_params, "sync", WINDOW, [CHANNELS, SIZE - MASK_ROW, SIZE], &mut rng(13));
        let features = FeatureExtractor::new(seed ^ 0x5eed_f00d, CHANNELS);
        ModelBundle {
            generator,
            gen_params,
            discriminator,
            disc_params,
            uncertainty,
            unc_params,
            sync,
            sync_params,
            features,
        }
    }

    /// Trainable parameter sets with their checkpoint prefixes.
    pub fn param_sets(&self) -> [(&'static str, &ParamSet); 4] {
        [("gen", &self.gen_params), ("disc", &self.disc_params), ("unc", &self.unc_params), ("sync", &self.sync_params)]
    }

    pub fn param_sets_mut(&mut self) -> [(&'static str, &mut ParamSet); 4] {
        [
            ("gen", &mut self.gen_params),
            ("disc", &mut self.disc_params),
            ("unc", &mut self.unc_params),
            ("sync", &mut self.sync_params),
        ]
    }

    pub fn scalar_count(&self) -> usize {
        self.param_sets().iter().map(|(_, p)| p.scalar_count()).sum()
    }
}

/// Generator output for one sample with the generator's parameters as constants.
pub fn generator_forward(g: &Graph, bundle: &ModelBundle, sample: &FrameSample) -> Result<Var> {
    let p = bundle.gen_params.bind(g, false);
    bundle.generator.forward(g, &p, sample.into())
}
