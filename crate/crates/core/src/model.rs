//! The full conditional diffusion model: encoders, noise-prediction U-Net,
//! schedule and loss weights, with per-example objective assembly and
//! ancestral sampling.

use crate::ccam::{init_unet, UnetConfig};
use crate::corpus::{MarkupDoc, RenderedImage};
use crate::diffusion::{
    ddpm_sample, image_to_signal, make_positive, sample_negatives, total_loss, LossBundle, LossVars, LossWeights,
    NoiseSchedule, ObjectiveInputs,
};
use crate::encoders::{align_pair, encode_markup, init_encoders, EncoderConfig};
use crate::error::ModelError;
use crate::numerics::{Binding, DenseArray, ParamStore, Purpose, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub unet: UnetConfig,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weights: LossWeights,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            unet: UnetConfig::default(),
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            weights: LossWeights::default(),
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub schedule: NoiseSchedule,
}

/// Everything random about one anchor's contribution to a training step.
pub struct TrainingItem<'a> {
    pub doc: &'a MarkupDoc,
    pub image: &'a RenderedImage,
    pub positive: RenderedImage,
    pub negatives: Vec<&'a RenderedImage>,
    pub t: usize,
    pub eps: DenseArray,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.encoder.validate()?;
        config.unet.validate()?;
        config.weights.validate()?;
        let (e, u) = (&config.encoder, &config.unet);
        if u.markup_dim != e.d_model {
            return Err(ModelError::Config(format!("U-Net markup width {} differs from d_model {}", u.markup_dim, e.d_model)));
        }
        if (u.image_height, u.image_width) != (e.image_height, e.image_width) {
            return Err(ModelError::Config("encoder and U-Net image extents differ".into()));
        }
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        Ok(Self { config, schedule })
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.config.encoder.image_height, self.config.encoder.image_width)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore, ModelError> {
        let mut store = ParamStore::new();
        init_encoders(&mut store, seed, &self.config.encoder)?;
        init_unet(&mut store, seed, &self.config.unet)?;
        Ok(store)
    }

    fn check_image(&self, img: &RenderedImage) -> Result<(), ModelError> {
        if (img.height, img.width) != self.image_dims() {
            return Err(ModelError::Shape(format!(
                "image is {}×{}, model expects {}×{}",
                img.height,
                img.width,
                self.image_dims().0,
                self.image_dims().1
            )));
        }
        Ok(())
    }

    /// Draws timestep, noise, positive view and negatives for anchor
    /// `anchor` of `corpus` at training step `step`. Every draw is keyed by
    /// `(seed, step, anchor)`.
    pub fn draw_item<'a>(
        &self,
        corpus: &'a [(MarkupDoc, RenderedImage)],
        anchor: usize,
        seed: u64,
        step: u64,
    ) -> Result<TrainingItem<'a>, ModelError> {
        let (doc, image) = corpus.get(anchor).map(|(d, i)| (d, i)).ok_or_else(|| {
            ModelError::Config(format!("anchor {anchor} outside corpus of {}", corpus.len()))
        })?;
        self.check_image(image)?;
        let key = |p| RngStream::keyed(seed, p, step, anchor as u64);
        let t = 1 + key(Purpose::Timestep).below(self.schedule.steps());
        let (h, w) = self.image_dims();
        let eps = DenseArray::new(vec![1, h, w], key(Purpose::Noise).normals(h * w))?;
        let positive = make_positive(image, &mut key(Purpose::Augment));
        let picks = sample_negatives(corpus.len(), anchor, self.config.weights.num_negatives, &mut key(Purpose::Negatives))?;
        let negatives = picks.into_iter().map(|i| &corpus[i].1).collect();
        Ok(TrainingItem { doc, image, positive, negatives, t, eps })
    }

    /// Builds the combined objective for one anchor on `b`.
    pub fn example_loss(&self, b: &mut Binding, item: &TrainingItem) -> Result<(LossVars, LossBundle), ModelError> {
        for img in item.negatives.iter().copied().chain([&item.positive]) {
            self.check_image(img)?;
        }
        let aligned = align_pair(b, &self.config.encoder, item.doc, item.image)?;
        let anchor = image_to_signal(item.image);
        let positive = image_to_signal(&item.positive);
        let negatives: Vec<DenseArray> = item.negatives.iter().map(|n| image_to_signal(n)).collect();
        let inputs = ObjectiveInputs {
            cond: aligned.t,
            l_fa: aligned.l_fa,
            anchor: &anchor,
            positive: &positive,
            negatives: &negatives,
            t: item.t,
            eps: &item.eps,
        };
        total_loss(b, &self.config.unet, &self.schedule, &self.config.weights, &inputs)
    }

    /// Markup condition rows for `doc` under the current parameters.
    pub fn condition(&self, store: &ParamStore, doc: &MarkupDoc) -> Result<DenseArray, ModelError> {
        let mut b = Binding::frozen(store);
        let t = encode_markup(&mut b, doc)?;
        Ok(b.tape.value(t).clone())
    }

    /// Generates an image for `doc` with draws from `(seed, Sampling, index)`.
    pub fn sample(&self, store: &ParamStore, doc: &MarkupDoc, seed: u64, index: u64) -> Result<RenderedImage, ModelError> {
        let cond = self.condition(store, doc)?;
        let (h, w) = self.image_dims();
        let mut rng = RngStream::new(seed, Purpose::Sampling, index);
        ddpm_sample(store, &self.config.unet, &self.schedule, &cond, h, w, &mut rng)
    }
}
