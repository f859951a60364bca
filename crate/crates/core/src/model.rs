//! The assembled model: frozen encoders, trainable projector, perceivers,
//! latent queries and generator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datastore::MultimodalSample;
use crate::encoders::{EncodedContext, EncoderConfig, Encoders, Projector, EOS_ID};
use crate::error::{Error, Result};
use crate::generator::{Decoding, Generator, GeneratorConfig};
use crate::perceiver::{Ablation, ContextPrefix, Perceiver, PerceiverConfig};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub perceiver: PerceiverConfig,
    pub generator: GeneratorConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            perceiver: PerceiverConfig::default(),
            generator: GeneratorConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.perceiver.validate()?;
        self.generator.validate()?;
        let d = self.encoder.d;
        if self.perceiver.d != d || self.generator.d != d {
            return Err(Error::Config(format!(
                "token widths disagree: encoder {d}, perceiver {}, generator {}",
                self.perceiver.d, self.generator.d
            )));
        }
        if self.generator.vocab != self.encoder.vocab {
            return Err(Error::Config(format!(
                "generator vocab {} differs from tokenizer vocab {}",
                self.generator.vocab, self.encoder.vocab
            )));
        }
        Ok(())
    }
}

/// Where the generator's context prefix comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixMode {
    Retrieved,
    /// Control: `M` zero rows in place of the fused contexts.
    Zeros,
}

#[derive(Debug, Clone)]
pub struct CammlModel {
    pub config: ModelConfig,
    pub encoders: Encoders,
    /// Trainable parameters only; frozen encoder weights live in `encoders`.
    pub store: ParamStore,
    pub projector: Projector,
    pub perceiver: Perceiver,
    pub generator: Generator,
}

impl CammlModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoders = Encoders::new(&config.encoder)?;
        let mut store = ParamStore::new();
        let generator = Generator::new(&mut store, &config.generator)?;
        let d = config.encoder.d;
        let projector = Projector::new(&mut store, d, config.encoder.projector_hidden, d, config.generator.seed)?;
        let perceiver = Perceiver::new(&mut store, &config.perceiver)?;
        Ok(Self {
            config: config.clone(),
            encoders,
            store,
            projector,
            perceiver,
            generator,
        })
    }

    /// Every parameter the optimizer may update, by name.
    pub fn trainable_parameters(&self) -> Vec<(String, ParamId)> {
        self.store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| (p.name.clone(), id))
            .collect()
    }

    pub fn projector_params(&self) -> Vec<ParamId> {
        [self.projector.fc1.params(), self.projector.fc2.params()].concat()
    }

    pub fn frozen_fingerprint(&self) -> String {
        self.encoders.fingerprint()
    }

    pub fn encode_context(&self, sample: &MultimodalSample) -> Result<EncodedContext> {
        Ok(self.encoders.encode_context(sample)?)
    }

    /// Frozen vision-encoder tokens of the query image, before projection.
    pub fn query_image_tokens(&self, query: &MultimodalSample) -> Result<Option<Tensor>> {
        query
            .image
            .as_ref()
            .map(|img| self.encoders.vision.encode(img))
            .transpose()
            .map_err(Error::from)
    }

    pub fn query_ids(&self, query: &MultimodalSample) -> Vec<u32> {
        self.encoders.tokenizer.tokenize(&query.text).ids
    }

    pub fn target_ids(&self, answer: &str) -> Vec<u32> {
        let mut ids = self.encoders.tokenizer.content_ids(answer);
        ids.push(EOS_ID);
        ids
    }

    pub fn prefix(&self, g: &mut Graph, contexts: &[EncodedContext], mode: PrefixMode) -> Result<ContextPrefix> {
        match mode {
            PrefixMode::Retrieved => Ok(self.perceiver.fuse_contexts(g, &self.store, contexts, self.config.ablation)?),
            PrefixMode::Zeros => {
                let m = self.config.perceiver.m;
                Ok(ContextPrefix {
                    tokens: Some(g.input(Tensor::zeros(&[m, self.config.encoder.d]))),
                    rows: m,
                    provenance: Vec::new(),
                    variable_length: false,
                })
            }
        }
    }

    fn projected_image(&self, g: &mut Graph, image_tokens: Option<&Tensor>) -> Result<Option<Var>> {
        match image_tokens {
            Some(t) if t.rows() > 0 => {
                let v = g.input(t.clone());
                Ok(Some(self.projector.forward(g, &self.store, v)?))
            }
            _ => Ok(None),
        }
    }

    /// Answer-token loss for one example on `g`.
    pub fn example_loss(
        &self,
        g: &mut Graph,
        query: &MultimodalSample,
        image_tokens: Option<&Tensor>,
        contexts: &[EncodedContext],
        mode: PrefixMode,
    ) -> Result<Var> {
        let answer = query
            .answer
            .as_deref()
            .ok_or_else(|| Error::Config(format!("training example {} has no answer", query.id)))?;
        let prefix = self.prefix(g, contexts, mode)?;
        let image = self.projected_image(g, image_tokens)?;
        let assembled = self.generator.assemble(
            g,
            &self.store,
            prefix.tokens,
            image,
            &self.query_ids(query),
            &self.target_ids(answer),
        )?;
        Ok(self.generator.target_loss(g, &self.store, &assembled)?)
    }

    /// Generated token ids (including a final EOS when produced).
    pub fn answer(
        &self,
        query: &MultimodalSample,
        image_tokens: Option<&Tensor>,
        contexts: &[EncodedContext],
        mode: PrefixMode,
        decoding: Decoding<'_>,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let prefix = self.prefix(&mut g, contexts, mode)?;
        let prefix = prefix.tokens.map(|v| g.value(v).clone());
        let image = self.projected_image(&mut g, image_tokens)?.map(|v| g.value(v).clone());
        Ok(self.generator.generate(
            &self.store,
            prefix.as_ref(),
            image.as_ref(),
            &self.query_ids(query),
            max_new,
            decoding,
        )?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save_store(&self.store, path, |_| true)?)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        Ok(checkpoint::load_store(&mut self.store, path, |_| true)?)
    }
}
