//! Inference loop: generate text, translate each description into image
//! candidates, rerank, and answer with text and images.

use serde::{Deserialize, Serialize};

use crate::classifier::ShapeClassifier;
use crate::codec::VqModel;
use crate::data::{DialogueContext, ImageRef, Utterance};
use crate::error::Result;
use crate::generator::{generate_response, GenSegment, GenerateOptions, GeneratedResponse};
use crate::image::ImageTensor;
use crate::scorer::MatchScorer;
use crate::seq::SeqParams;
use crate::tokenizer::Vocab;
use crate::translator::{
    generate_image_tokens, rerank, StreamLayout, DEFAULT_N_SAMPLES, DEFAULT_TEMPERATURE,
};

pub const USER: &str = "A";
pub const AGENT: &str = "B";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RespondOptions {
    pub pure_text: bool,
    pub beam: usize,
    pub n_samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_new: usize,
}

impl Default for RespondOptions {
    fn default() -> Self {
        Self {
            pure_text: false,
            beam: 5,
            n_samples: DEFAULT_N_SAMPLES,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            max_new: GenerateOptions::default().max_new,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub description: String,
    /// Candidates in rerank order; the first is the answer.
    pub ranked: Vec<ImageTensor>,
    pub scores: Vec<f64>,
}

impl GeneratedImage {
    pub fn top(&self) -> &ImageTensor {
        &self.ranked[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResponseSegment {
    Text(String),
    Image(GeneratedImage),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentResponse {
    pub generated: GeneratedResponse,
    pub segments: Vec<ResponseSegment>,
}

impl AgentResponse {
    pub fn images(&self) -> impl Iterator<Item = &GeneratedImage> {
        self.segments.iter().filter_map(|s| match s {
            ResponseSegment::Image(g) => Some(g),
            ResponseSegment::Text(_) => None,
        })
    }
}

/// Everything needed to answer: both sequence models, the codec and a
/// reranking scorer. Read-only once built.
pub struct Agent {
    pub vocab: Vocab,
    pub generator: SeqParams<f32>,
    pub translator: SeqParams<f32>,
    pub codec: VqModel<f32>,
    pub layout: StreamLayout,
    pub scorer: Box<dyn MatchScorer>,
    pub classifier: Option<ShapeClassifier>,
}

impl Agent {
    /// Translates one description into reranked image candidates.
    pub fn draw(&self, description: &str, n_samples: usize, temperature: f64, seed: u64) -> Result<GeneratedImage> {
        let c = self.vocab.encode(description);
        let samples = generate_image_tokens(&self.translator, &self.layout, &c, n_samples, temperature, seed)?;
        let images = samples
            .iter()
            .map(|s| self.codec.tokens_to_image(s))
            .collect::<Result<Vec<_>>>()?;
        let ranked = rerank(self.scorer.as_ref(), description, &images)?;
        Ok(GeneratedImage {
            description: description.to_string(),
            scores: ranked.iter().map(|r| r.1).collect(),
            ranked: ranked.iter().map(|r| images[r.0].clone()).collect(),
        })
    }

    /// Generates a response; only segments the generator marked as
    /// descriptions are turned into images.
    pub fn respond(&self, ctx: &DialogueContext, opts: &RespondOptions) -> Result<AgentResponse> {
        let generated = generate_response(
            &self.generator,
            ctx,
            &self.vocab,
            &GenerateOptions {
                beam: opts.beam,
                pure_text: opts.pure_text,
                max_new: opts.max_new,
            },
        )?;
        let mut segments = Vec::with_capacity(generated.parsed.segments.len());
        let mut n_images = 0u64;
        for seg in &generated.parsed.segments {
            match seg {
                GenSegment::Text(t) => segments.push(ResponseSegment::Text(t.clone())),
                GenSegment::Description(d) => {
                    let seed = opts.seed.wrapping_add(n_images);
                    segments.push(ResponseSegment::Image(self.draw(d, opts.n_samples, opts.temperature, seed)?));
                    n_images += 1;
                }
            }
        }
        Ok(AgentResponse { generated, segments })
    }
}

/// A running conversation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Session {
    pub context: DialogueContext,
}

impl Session {
    /// Appends the user's message, answers, and appends the answer's turns.
    pub fn chat(&mut self, agent: &Agent, message: &str, opts: &RespondOptions) -> Result<AgentResponse> {
        self.context.turns.push(Utterance::text(USER, message));
        self.reply(agent, opts)
    }

    /// Appends an image the user shared, then answers.
    pub fn share_image(&mut self, agent: &Agent, image: ImageRef, opts: &RespondOptions) -> Result<AgentResponse> {
        self.context.turns.push(Utterance::image(USER, image));
        self.reply(agent, opts)
    }

    fn reply(&mut self, agent: &Agent, opts: &RespondOptions) -> Result<AgentResponse> {
        let resp = agent.respond(&self.context, opts)?;
        for seg in &resp.segments {
            let turn = match seg {
                ResponseSegment::Text(t) if t.is_empty() => continue,
                ResponseSegment::Text(t) => Utterance::text(AGENT, t.clone()),
                ResponseSegment::Image(g) => Utterance::image(AGENT, ImageRef::described(g.description.clone())),
            };
            self.context.turns.push(turn);
        }
        Ok(resp)
    }
}
