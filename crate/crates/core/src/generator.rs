//! Textual response generator: flattening contexts, `[DST]` target
//! construction, segment parsing, loss and decoding.
//!
//! Model input layout: `[EOS] context [SEP] target`, where the leading
//! `EOS` doubles as a start token and only target positions are scored.

use serde::{Deserialize, Serialize};

use crate::data::{DialogueContext, MultimodalResponse, Segment, UtteranceContent};
use crate::error::{Error, Result};
use crate::seq::{DecodeOptions, SeqExample, SeqParams};
use crate::tensor::Scalar;
use crate::tokenizer::{TokenId, Vocab, DST, EOS, PAD, SEP};

/// Start-of-sequence id for both models.
pub const BOS: TokenId = EOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Text,
    Description,
    End,
}

/// Half-open token range `[start, end)` of one target segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub kind: SpanKind,
    pub start: usize,
    pub end: usize,
}

/// Target token sequence plus its segment map. Spans tile `tokens`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorTarget {
    pub tokens: Vec<TokenId>,
    pub spans: Vec<SegmentSpan>,
}

/// A segment of a generated (or parsed) response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum GenSegment {
    Text(String),
    Description(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedResponse {
    pub segments: Vec<GenSegment>,
    /// A `[DST]` was still open when the sequence ended.
    pub unterminated: bool,
}

impl ParsedResponse {
    pub fn has_description(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, GenSegment::Description(_)))
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            GenSegment::Description(d) => Some(d.as_str()),
            GenSegment::Text(_) => None,
        })
    }

    /// All text segments joined by a space.
    pub fn text(&self) -> String {
        self.segments
            .iter()
            .filter_map(|s| match s {
                GenSegment::Text(t) => Some(t.as_str()),
                GenSegment::Description(_) => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn turn_tokens(content: &UtteranceContent, v: &Vocab) -> Result<Vec<TokenId>> {
    match content {
        UtteranceContent::Text(t) => Ok(v.encode(t)),
        UtteranceContent::Image(r) if r.description.trim().is_empty() => Err(Error::Dialogue(
            "image turn without a description".into(),
        )),
        UtteranceContent::Image(r) => Ok(v.encode(&r.description)),
    }
}

/// Joins turns with `[SEP]`, images replaced by their descriptions.
/// Whole oldest turns are dropped until the result fits `max_len`; a
/// single remaining turn that is still too long keeps its last tokens.
pub fn flatten_context(ctx: &DialogueContext, v: &Vocab, max_len: usize) -> Result<Vec<TokenId>> {
    if ctx.turns.is_empty() {
        return Err(Error::Dialogue("empty context".into()));
    }
    let turns = ctx
        .turns
        .iter()
        .map(|u| turn_tokens(&u.content, v))
        .collect::<Result<Vec<_>>>()?;
    let mut first = turns.len() - 1;
    let mut total = turns[first].len();
    while first > 0 && total + 1 + turns[first - 1].len() <= max_len {
        first -= 1;
        total += 1 + turns[first].len();
    }
    let mut out = Vec::with_capacity(total);
    for (i, t) in turns[first..].iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        out.extend_from_slice(t);
    }
    if out.len() > max_len {
        out.drain(..out.len() - max_len);
    }
    Ok(out)
}

/// Text segments verbatim, each image as `[DST] description [SEP]`, a
/// `[SEP]` between a text segment and whatever follows it, then `[EOS]`.
pub fn build_target(resp: &MultimodalResponse, v: &Vocab) -> Result<GeneratorTarget> {
    if resp.segments.is_empty() {
        return Err(Error::Dialogue("empty response".into()));
    }
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let n = resp.segments.len();
    for (i, seg) in resp.segments.iter().enumerate() {
        let start = tokens.len();
        let kind = match seg {
            Segment::Text(t) => {
                tokens.extend(v.encode(t));
                if i + 1 < n {
                    tokens.push(SEP);
                }
                SpanKind::Text
            }
            Segment::Image(r) => {
                if r.description.trim().is_empty() {
                    return Err(Error::Dialogue("image segment without a description".into()));
                }
                tokens.push(DST);
                tokens.extend(v.encode(&r.description));
                tokens.push(SEP);
                SpanKind::Description
            }
        };
        spans.push(SegmentSpan {
            kind,
            start,
            end: tokens.len(),
        });
    }
    spans.push(SegmentSpan {
        kind: SpanKind::End,
        start: tokens.len(),
        end: tokens.len() + 1,
    });
    tokens.push(EOS);
    Ok(GeneratorTarget { tokens, spans })
}

/// Text-only target for a plain string response.
pub fn text_target(text: &str, v: &Vocab) -> GeneratorTarget {
    build_target(
        &MultimodalResponse {
            speaker: String::new(),
            segments: vec![Segment::Text(text.to_string())],
        },
        v,
    )
    .expect("one segment")
}

/// Splits a decoded id sequence at `[DST]`/`[SEP]` boundaries. Never fails:
/// a description still open at the end (or at a nested `[DST]`) is closed
/// implicitly and flagged. Empty text pieces are dropped; `PAD` is ignored.
pub fn parse_segments(ids: &[TokenId], v: &Vocab) -> Result<ParsedResponse> {
    let mut out = ParsedResponse::default();
    let mut buf: Vec<TokenId> = Vec::new();
    let mut in_desc = false;
    let flush = |buf: &mut Vec<TokenId>, desc: bool, out: &mut ParsedResponse| -> Result<()> {
        if desc {
            out.segments.push(GenSegment::Description(v.decode(buf)?));
        } else if !buf.is_empty() {
            out.segments.push(GenSegment::Text(v.decode(buf)?));
        }
        buf.clear();
        Ok(())
    };
    for &id in ids {
        match id {
            EOS => break,
            PAD => {}
            SEP => {
                flush(&mut buf, in_desc, &mut out)?;
                in_desc = false;
            }
            DST => {
                if in_desc {
                    out.unterminated = true;
                }
                flush(&mut buf, in_desc, &mut out)?;
                in_desc = true;
            }
            _ => buf.push(id),
        }
    }
    if in_desc {
        out.unterminated = true;
    }
    flush(&mut buf, in_desc, &mut out)?;
    Ok(out)
}

/// `[BOS] context [SEP] target`, scoring only the target.
pub fn g_example(context: &[TokenId], target: &[TokenId]) -> SeqExample {
    let mut tokens = Vec::with_capacity(context.len() + target.len() + 2);
    tokens.push(BOS);
    tokens.extend_from_slice(context);
    tokens.push(SEP);
    let prefix = tokens.len();
    tokens.extend_from_slice(target);
    let mask = (0..tokens.len()).map(|i| i >= prefix).collect();
    SeqExample { tokens, mask }
}

/// Builds a training example, fitting the context into whatever room the
/// target leaves.
pub fn g_example_for(
    ctx: &DialogueContext,
    target: &GeneratorTarget,
    v: &Vocab,
    max_len: usize,
) -> Result<SeqExample> {
    let room = max_len
        .checked_sub(target.tokens.len() + 2)
        .filter(|&r| r > 0)
        .ok_or(Error::Overlength {
            len: target.tokens.len() + 3,
            max_len,
        })?;
    let c = flatten_context(ctx, v, room)?;
    Ok(g_example(&c, &target.tokens))
}

/// Mean NLL of the target given the flattened context.
pub fn loss_g<T: Scalar>(params: &SeqParams<T>, context: &[TokenId], target: &GeneratorTarget) -> Result<f64> {
    let ex = g_example(context, &target.tokens);
    params.nll_loss(&ex.tokens, &ex.mask)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateOptions {
    pub beam: usize,
    pub pure_text: bool,
    pub max_new: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            pure_text: false,
            max_new: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedResponse {
    pub tokens: Vec<TokenId>,
    pub parsed: ParsedResponse,
    /// No non-special token was produced.
    pub degenerate: bool,
    pub score: f64,
}

impl GeneratedResponse {
    /// The predicted intent: did the generator open a description.
    pub fn shares_image(&self) -> bool {
        self.parsed.has_description()
    }
}

/// Beam-decodes a response until `[EOS]`. With `pure_text` the `[DST]` id
/// is blocked, so no description can appear.
pub fn generate_response<T: Scalar>(
    params: &SeqParams<T>,
    ctx: &DialogueContext,
    v: &Vocab,
    opts: &GenerateOptions,
) -> Result<GeneratedResponse> {
    let max_len = params.config.max_len;
    let room = max_len
        .checked_sub(opts.max_new + 2)
        .filter(|&r| r > 0)
        .ok_or_else(|| Error::Config(format!("max_new {} leaves no room for context", opts.max_new)))?;
    let context = flatten_context(ctx, v, room)?;
    let mut prefix = Vec::with_capacity(context.len() + 2);
    prefix.push(BOS);
    prefix.extend_from_slice(&context);
    prefix.push(SEP);
    let mut blocked = vec![PAD];
    if opts.pure_text {
        blocked.push(DST);
    }
    let decoded = params.decode(
        &prefix,
        &DecodeOptions {
            beam: opts.beam,
            stop_id: EOS,
            max_new: opts.max_new,
            blocked,
        },
    )?;
    let mut parsed = parse_segments(&decoded.tokens, v)?;
    let degenerate = !decoded
        .tokens
        .iter()
        .any(|&t| !crate::tokenizer::is_special(t));
    if degenerate && parsed.segments.is_empty() {
        parsed.segments.push(GenSegment::Text(String::new()));
    }
    Ok(GeneratedResponse {
        tokens: decoded.tokens,
        parsed,
        degenerate,
        score: decoded.score,
    })
}
