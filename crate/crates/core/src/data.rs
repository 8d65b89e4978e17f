//! Dialogue and image-pair corpora: data model, JSONL I/O, and a
//! deterministic synthetic "shapes" world.
//!
//! Dialogue JSONL, one object per line:
//!
//! ```json
//! {"id": "ds-00001",
//!  "turns": [{"speaker": "A", "text": "hi"},
//!            {"speaker": "B", "image": {"description": "...", "image_path": "images/x.png"}}],
//!  "response": {"speaker": "B",
//!               "segments": [{"text": "sure"}, {"image": {"description": "...", "image_path": "..."}}]}}
//! ```
//!
//! `image_path` is optional and relative to the JSONL file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Prefix of every pair description.
pub const DESCRIPTION_PREFIX: &str = "Objects in the photo:";

/// An image attached to a turn: its description plus an optional file.
#[derive(Clone, Debug, Default)]
pub struct ImageRef {
    pub description: String,
    pub image_path: Option<String>,
    /// Decoded pixels, when already in memory.
    pub pixels: Option<Arc<ImageTensor>>,
}

impl PartialEq for ImageRef {
    fn eq(&self, other: &Self) -> bool {
        self.description == other.description && self.image_path == other.image_path
    }
}

impl ImageRef {
    pub fn described(description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            ..Self::default()
        }
    }

    /// In-memory pixels, else the file relative to `base`.
    pub fn resolve(&self, base: &Path) -> Result<ImageTensor> {
        if let Some(px) = &self.pixels {
            return Ok((**px).clone());
        }
        match &self.image_path {
            Some(p) => ImageTensor::load_png(&base.join(p)),
            None => Err(Error::Image(format!(
                "image `{}` has neither pixels nor a path",
                self.description
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum UtteranceContent {
    Text(String),
    Image(ImageRef),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub content: UtteranceContent,
}

impl Utterance {
    pub fn text(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            speaker: speaker.into(),
            content: UtteranceContent::Text(text.into()),
        }
    }

    pub fn image(speaker: impl Into<String>, image: ImageRef) -> Self {
        Self {
            speaker: speaker.into(),
            content: UtteranceContent::Image(image),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogueContext {
    pub turns: Vec<Utterance>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    Text(String),
    Image(ImageRef),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultimodalResponse {
    pub speaker: String,
    pub segments: Vec<Segment>,
}

impl MultimodalResponse {
    pub fn has_image(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Image(_)))
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Image(r) => Some(r),
            Segment::Text(_) => None,
        })
    }
}

/// A dialogue whose images all carry descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDialogue {
    pub id: String,
    pub context: DialogueContext,
    pub response: MultimodalResponse,
}

/// Text-only dialogue; the last turn is the response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextDialogue {
    pub id: String,
    pub turns: Vec<String>,
}

impl TextDialogue {
    pub fn new(id: impl Into<String>, turns: Vec<String>) -> Result<Self> {
        if turns.len() < 2 {
            return Err(Error::Dialogue("a text dialogue needs at least two turns".into()));
        }
        Ok(Self {
            id: id.into(),
            turns,
        })
    }

    pub fn context(&self) -> &[String] {
        &self.turns[..self.turns.len() - 1]
    }

    pub fn response(&self) -> &str {
        &self.turns[self.turns.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptionImagePair {
    pub id: String,
    pub description: String,
    pub image: ImageTensor,
}

/// True iff the gold response shares an image.
pub fn intent_label(dialogue: &MultimodalDialogue) -> bool {
    dialogue.response.has_image()
}

// ---------------------------------------------------------------------------
// JSONL

fn schema_err(path: &Path, line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        schema_err(self.path, self.line, field, msg)
    }

    fn string(&self, obj: &Map<String, Value>, key: &str, field: &str) -> Result<String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.err(field, "expected a string")),
            None => Err(self.err(field, "missing")),
        }
    }

    fn image(&self, v: &Value, field: &str) -> Result<ImageRef> {
        let obj = v.as_object().ok_or_else(|| self.err(field, "expected an object"))?;
        let description = self.string(obj, "description", &format!("{field}.description"))?;
        if description.trim().is_empty() {
            return Err(self.err(&format!("{field}.description"), "must be non-empty"));
        }
        let image_path = match obj.get("image_path") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(self.err(&format!("{field}.image_path"), "expected a string")),
        };
        Ok(ImageRef {
            description,
            image_path,
            pixels: None,
        })
    }

    fn utterance(&self, v: &Value, field: &str) -> Result<Utterance> {
        let obj = v.as_object().ok_or_else(|| self.err(field, "expected an object"))?;
        let speaker = self.string(obj, "speaker", &format!("{field}.speaker"))?;
        let content = match (obj.get("text"), obj.get("image")) {
            (Some(Value::String(t)), None) => UtteranceContent::Text(t.clone()),
            (Some(_), None) => return Err(self.err(&format!("{field}.text"), "expected a string")),
            (None, Some(img)) => UtteranceContent::Image(self.image(img, &format!("{field}.image"))?),
            (Some(_), Some(_)) => {
                return Err(self.err(field, "exactly one of `text` and `image` is allowed"))
            }
            (None, None) => return Err(self.err(field, "needs `text` or `image`")),
        };
        Ok(Utterance { speaker, content })
    }

    fn segment(&self, v: &Value, field: &str) -> Result<Segment> {
        let obj = v.as_object().ok_or_else(|| self.err(field, "expected an object"))?;
        match (obj.get("text"), obj.get("image")) {
            (Some(Value::String(t)), None) => Ok(Segment::Text(t.clone())),
            (None, Some(img)) => Ok(Segment::Image(self.image(img, &format!("{field}.image"))?)),
            _ => Err(self.err(field, "expected exactly one of `text` (string) or `image`")),
        }
    }

    fn context<'v>(&self, v: &'v Value) -> Result<(String, DialogueContext, &'v Map<String, Value>)> {
        let obj = v.as_object().ok_or_else(|| self.err("", "expected a JSON object"))?;
        let id = self.string(obj, "id", "id")?;
        let turns = obj
            .get("turns")
            .ok_or_else(|| self.err("turns", "missing"))?
            .as_array()
            .ok_or_else(|| self.err("turns", "expected an array"))?;
        if turns.is_empty() {
            return Err(self.err("turns", "context must be non-empty"));
        }
        let turns = turns
            .iter()
            .enumerate()
            .map(|(i, t)| self.utterance(t, &format!("turns[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok((id, DialogueContext { turns }, obj))
    }

    fn dialogue(&self, v: &Value) -> Result<MultimodalDialogue> {
        let (id, context, obj) = self.context(v)?;
        let resp = obj
            .get("response")
            .ok_or_else(|| self.err("response", "missing"))?
            .as_object()
            .ok_or_else(|| self.err("response", "expected an object"))?;
        let speaker = self.string(resp, "speaker", "response.speaker")?;
        let segs = resp
            .get("segments")
            .ok_or_else(|| self.err("response.segments", "missing"))?
            .as_array()
            .ok_or_else(|| self.err("response.segments", "expected an array"))?;
        if segs.is_empty() {
            return Err(self.err("response.segments", "must be non-empty"));
        }
        let segments = segs
            .iter()
            .enumerate()
            .map(|(i, s)| self.segment(s, &format!("response.segments[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultimodalDialogue {
            id,
            context,
            response: MultimodalResponse { speaker, segments },
        })
    }
}

fn image_json(r: &ImageRef) -> Value {
    let mut m = Map::new();
    m.insert("description".into(), Value::String(r.description.clone()));
    if let Some(p) = &r.image_path {
        m.insert("image_path".into(), Value::String(p.clone()));
    }
    Value::Object(m)
}

pub fn dialogue_to_json(d: &MultimodalDialogue) -> Value {
    let turns: Vec<Value> = d
        .context
        .turns
        .iter()
        .map(|u| match &u.content {
            UtteranceContent::Text(t) => json!({"speaker": u.speaker, "text": t}),
            UtteranceContent::Image(r) => json!({"speaker": u.speaker, "image": image_json(r)}),
        })
        .collect();
    let segments: Vec<Value> = d
        .response
        .segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => json!({"text": t}),
            Segment::Image(r) => json!({"image": image_json(r)}),
        })
        .collect();
    json!({
        "id": d.id,
        "turns": turns,
        "response": {"speaker": d.response.speaker, "segments": segments},
    })
}

/// Parses one JSONL line; `path` and `line` only label errors.
pub fn parse_dialogue_line(text: &str, path: &Path, line: usize) -> Result<MultimodalDialogue> {
    let ctx = LineCtx { path, line };
    let v: Value = serde_json::from_str(text).map_err(|e| ctx.err("", format!("invalid JSON: {e}")))?;
    ctx.dialogue(&v)
}

/// Loads a dialogue JSONL file. Blank lines are skipped; line numbers are 1-based.
pub fn load_photochat_format(path: &Path) -> Result<Vec<MultimodalDialogue>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_dialogue_line(l, path, i + 1))
        .collect()
}

/// Loads `{"id", "turns"}` lines, the dialogue format without a required
/// response. A `response` field, if present, is ignored.
pub fn load_contexts(path: &Path) -> Result<Vec<(String, DialogueContext)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let ctx = LineCtx { path, line: i + 1 };
            let v: Value = serde_json::from_str(l).map_err(|e| ctx.err("", format!("invalid JSON: {e}")))?;
            let (id, c, _) = ctx.context(&v)?;
            Ok((id, c))
        })
        .collect()
}

pub fn write_photochat_format(path: &Path, dialogues: &[MultimodalDialogue]) -> Result<()> {
    let mut out = Vec::new();
    for d in dialogues {
        serde_json::to_writer(&mut out, &dialogue_to_json(d))?;
        out.push(b'\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_text_dialogues(path: &Path) -> Result<Vec<TextDialogue>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let d: TextDialogue = serde_json::from_str(l)
            .map_err(|e| schema_err(path, i + 1, "", format!("invalid dialogue: {e}")))?;
        if d.turns.len() < 2 {
            return Err(schema_err(path, i + 1, "turns", "needs at least two turns"));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn write_text_dialogues(path: &Path, dialogues: &[TextDialogue]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in dialogues {
        serde_json::to_writer(&mut f, d)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    id: String,
    description: String,
    image_path: String,
}

/// Writes pairs as JSONL plus one PNG per pair under `images/`.
pub fn write_pairs(dir: &Path, name: &str, pairs: &[DescriptionImagePair]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
    for p in pairs {
        let rel = format!("images/{}.png", p.id);
        p.image.save_png(&dir.join(&rel))?;
        let rec = PairRecord {
            id: p.id.clone(),
            description: p.description.clone(),
            image_path: rel,
        };
        serde_json::to_writer(&mut f, &rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<DescriptionImagePair>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if l.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(l)
            .map_err(|e| schema_err(path, i + 1, "", format!("invalid pair: {e}")))?;
        if rec.description.trim().is_empty() {
            return Err(schema_err(path, i + 1, "description", "must be non-empty"));
        }
        out.push(DescriptionImagePair {
            id: rec.id,
            description: rec.description,
            image: ImageTensor::load_png(&base.join(&rec.image_path))?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Splits<T> {
    fn default() -> Self {
        Self {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        }
    }
}

impl<T> Splits<T> {
    /// 80/10/10 split of already shuffled items.
    pub fn from_items(items: Vec<T>) -> Self {
        let n = items.len();
        let n_test = n / 10;
        let n_dev = n / 10;
        let n_train = n - n_dev - n_test;
        let mut it = items.into_iter();
        let train = it.by_ref().take(n_train).collect();
        let dev = it.by_ref().take(n_dev).collect();
        let test = it.collect();
        Self { train, dev, test }
    }

    pub fn all(&self) -> impl Iterator<Item = &T> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Ids per split for each corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub corpora: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl SplitManifest {
    pub fn add<T>(&mut self, corpus: &str, splits: &Splits<T>, id: impl Fn(&T) -> String) {
        let mut m = BTreeMap::new();
        m.insert("train".into(), splits.train.iter().map(&id).collect());
        m.insert("dev".into(), splits.dev.iter().map(&id).collect());
        m.insert("test".into(), splits.test.iter().map(&id).collect());
        self.corpora.insert(corpus.into(), m);
    }
}

// ---------------------------------------------------------------------------
// Synthetic shapes world

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Size {
    Small,
    Big,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    /// Exact 8-bit colors, so PNG storage is lossless.
    pub fn rgb(self) -> [f32; 3] {
        let c = match self {
            Color::Red => [230, 26, 26],
            Color::Green => [26, 204, 51],
            Color::Blue => [38, 64, 242],
            Color::Yellow => [242, 217, 26],
        };
        c.map(|v: u8| v as f32 / 255.0)
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Big];

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Big => "big",
        }
    }
}

/// One object: everything needed to render its image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub size: Size,
    pub color: Color,
    pub shape: Shape,
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.size.name(), self.color.name(), self.shape.name())
    }
}

impl ShapeSpec {
    pub fn all() -> Vec<ShapeSpec> {
        let mut out = Vec::new();
        for shape in Shape::ALL {
            for color in Color::ALL {
                for size in Size::ALL {
                    out.push(ShapeSpec { size, color, shape });
                }
            }
        }
        out
    }

    pub fn description(&self) -> String {
        format!("{DESCRIPTION_PREFIX} {self}")
    }

    /// Inverse of [`ShapeSpec::description`]; also accepts the bare phrase.
    pub fn parse(text: &str) -> Option<ShapeSpec> {
        let rest = text.trim().strip_prefix(DESCRIPTION_PREFIX).unwrap_or(text).trim();
        let words: Vec<&str> = rest.split_whitespace().collect();
        let [s, c, sh] = words.as_slice() else {
            return None;
        };
        Some(ShapeSpec {
            size: *Size::ALL.iter().find(|x| x.name() == *s)?,
            color: *Color::ALL.iter().find(|x| x.name() == *c)?,
            shape: *Shape::ALL.iter().find(|x| x.name() == *sh)?,
        })
    }

    /// Shape class named anywhere in `text`, if exactly one is.
    pub fn shape_in(text: &str) -> Option<Shape> {
        let found: Vec<Shape> = Shape::ALL
            .into_iter()
            .filter(|s| text.split_whitespace().any(|w| w == s.name()))
            .collect();
        match found.as_slice() {
            [s] => Some(*s),
            _ => None,
        }
    }

    /// Renders the object centered on a dark background.
    pub fn render(&self, size: usize) -> ImageTensor {
        let mut img = ImageTensor::filled(size, size, BACKGROUND);
        let n = size as f32;
        let c = n / 2.0;
        let r = match self.size {
            Size::Small => 0.22 * n,
            Size::Big => 0.40 * n,
        };
        let rgb = self.color.rgb();
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5 - c, y as f32 + 0.5 - c);
                let inside = match self.shape {
                    Shape::Circle => px * px + py * py <= r * r,
                    Shape::Square => px.abs() <= 0.8 * r && py.abs() <= 0.8 * r,
                    Shape::Triangle => {
                        // apex up, base at the bottom
                        let t = (py + r) / (2.0 * r);
                        (0.0..=1.0).contains(&t) && px.abs() <= r * t
                    }
                };
                if inside {
                    img.set_pixel(y, x, rgb);
                }
            }
        }
        img
    }
}

pub const BACKGROUND: [f32; 3] = [13.0 / 255.0, 13.0 / 255.0, 13.0 / 255.0];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldConfig {
    pub seed: u64,
    /// Multimodal dialogues (the small corpus).
    pub n_dialogues: usize,
    /// Text-only dialogues (the large corpus).
    pub n_text_dialogues: usize,
    /// Description-image pairs.
    pub n_pairs: usize,
    pub image_size: usize,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_dialogues: 400,
            n_text_dialogues: 2000,
            n_pairs: 960,
            image_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub text_dialogues: Splits<TextDialogue>,
    pub pairs: Splits<DescriptionImagePair>,
    pub dialogues: Splits<MultimodalDialogue>,
}

const OPENERS: [&str; 4] = [
    "hi , how was your weekend ?",
    "hey , what did you do today ?",
    "hello , anything new with you ?",
    "good morning , how are you ?",
];

const MENTIONS: [&str; 4] = [
    "i made a {obj} out of clay",
    "my sister gave me a {obj}",
    "i bought a {obj} at the market",
    "i painted a {obj} on a card",
];

/// Follow-ups asking for a photo, with the photo-sharing reply.
const PHOTO_ASKS: [(&str, &str, &str); 3] = [
    ("can you show me a photo of it ?", "sure , here it is", ""),
    ("wow , send me a picture !", "", "what do you think ?"),
    ("i would love to see it , do you have a photo ?", "yes , here you go", "i hope you like it"),
];

/// Follow-ups answered in text.
const TEXT_ASKS: [(&str, &str); 4] = [
    ("that sounds fun", "thanks , it was a lot of fun"),
    ("why did you pick {color} ?", "{color} is my favorite color"),
    ("where will you keep it ?", "i will keep it on my desk"),
    ("how long did it take ?", "it took about two hours"),
];

/// Small talk only seen in the text-only corpus.
const SMALL_TALK: [(&str, &str); 3] = [
    ("what is your favorite color ?", "i like {color} the most"),
    ("do you like shapes ?", "yes , a {shape} is my favorite shape"),
    ("are you busy today ?", "not really , i am just relaxing"),
];

fn fill(template: &str, spec: &ShapeSpec) -> String {
    template
        .replace("{obj}", &spec.to_string())
        .replace("{color}", spec.color.name())
        .replace("{shape}", spec.shape.name())
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn random_spec(rng: &mut ChaCha8Rng) -> ShapeSpec {
    ShapeSpec {
        size: *pick(rng, &Size::ALL),
        color: *pick(rng, &Color::ALL),
        shape: *pick(rng, &Shape::ALL),
    }
}

struct World {
    image_size: usize,
    cache: BTreeMap<ShapeSpec, Arc<ImageTensor>>,
}

impl World {
    fn image(&mut self, spec: &ShapeSpec) -> ImageRef {
        let size = self.image_size;
        let px = self
            .cache
            .entry(*spec)
            .or_insert_with(|| Arc::new(spec.render(size)))
            .clone();
        ImageRef {
            description: spec.description(),
            image_path: Some(format!("images/{}.png", spec.to_string().replace(' ', "_"))),
            pixels: Some(px),
        }
    }
}

fn photo_segments(world: &mut World, spec: &ShapeSpec, before: &str, after: &str) -> Vec<Segment> {
    let mut segs = Vec::new();
    if !before.is_empty() {
        segs.push(Segment::Text(before.to_string()));
    }
    segs.push(Segment::Image(world.image(spec)));
    if !after.is_empty() {
        segs.push(Segment::Text(after.to_string()));
    }
    segs
}

fn multimodal_dialogue(world: &mut World, rng: &mut ChaCha8Rng, id: String) -> MultimodalDialogue {
    let spec = random_spec(rng);
    let share_photo = rng.random_bool(0.5);
    // a quarter of dialogues open with the user sharing a photo
    let (turns, segments) = if rng.random_bool(0.25) {
        let turns = vec![
            Utterance::image("A", world.image(&spec)),
            Utterance::text("B", fill("oh , a {color} {shape} ! where did you get it ?", &spec)),
        ];
        if share_photo {
            let mut turns = turns;
            turns.push(Utterance::text("A", "i got it at the market , do you have one ?"));
            (turns, photo_segments(world, &spec, "yes , here is mine", ""))
        } else {
            let mut turns = turns;
            turns.push(Utterance::text("A", "i got it at the market , do you like it ?"));
            (turns, vec![Segment::Text(fill("yes , i really like {color}", &spec))])
        }
    } else {
        let mut turns = vec![
            Utterance::text("A", *pick(rng, &OPENERS)),
            Utterance::text("B", fill(pick(rng, &MENTIONS), &spec)),
        ];
        if share_photo {
            let (ask, before, after) = *pick(rng, &PHOTO_ASKS);
            turns.push(Utterance::text("A", ask));
            (turns, photo_segments(world, &spec, before, after))
        } else {
            let (ask, answer) = *pick(rng, &TEXT_ASKS);
            turns.push(Utterance::text("A", fill(ask, &spec)));
            (turns, vec![Segment::Text(fill(answer, &spec))])
        }
    };
    MultimodalDialogue {
        id,
        context: DialogueContext { turns },
        response: MultimodalResponse {
            speaker: "B".into(),
            segments,
        },
    }
}

fn text_dialogue(rng: &mut ChaCha8Rng, id: String) -> TextDialogue {
    let spec = random_spec(rng);
    let turns = if rng.random_bool(0.3) {
        let (ask, answer) = *pick(rng, &SMALL_TALK);
        vec![
            pick(rng, &OPENERS).to_string(),
            fill(ask, &spec),
            fill(answer, &spec),
        ]
    } else {
        let (ask, answer) = *pick(rng, &TEXT_ASKS);
        vec![
            pick(rng, &OPENERS).to_string(),
            fill(pick(rng, &MENTIONS), &spec),
            fill(ask, &spec),
            fill(answer, &spec),
        ]
    };
    TextDialogue { id, turns }
}

/// Builds all three corpora deterministically from `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<Corpora> {
    generate_synthetic_for(cfg, cfg.image_size)
}

/// As [`generate_synthetic`], rejecting an image size other than `codec_size`.
pub fn generate_synthetic_for(cfg: &SyntheticWorldConfig, codec_size: usize) -> Result<Corpora> {
    if cfg.image_size != codec_size {
        return Err(Error::Config(format!(
            "synthetic image size {} does not match codec image size {codec_size}",
            cfg.image_size
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::Config("synthetic image size must be at least 8".into()));
    }
    let mut world = World {
        image_size: cfg.image_size,
        cache: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut text: Vec<TextDialogue> = (0..cfg.n_text_dialogues)
        .map(|i| text_dialogue(&mut rng, format!("dc-{i:06}")))
        .collect();
    text.shuffle(&mut rng);

    // cycle through every object so classes stay balanced
    let specs = ShapeSpec::all();
    let mut order: Vec<ShapeSpec> = Vec::new();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for i in 0..cfg.n_pairs {
        if order.is_empty() {
            order = specs.clone();
            order.shuffle(&mut rng);
        }
        let spec = order.pop().unwrap();
        let r = world.image(&spec);
        pairs.push(DescriptionImagePair {
            id: format!("dp-{i:06}"),
            description: r.description,
            image: (*r.pixels.unwrap()).clone(),
        });
    }
    pairs.shuffle(&mut rng);

    let mut dialogues: Vec<MultimodalDialogue> = (0..cfg.n_dialogues)
        .map(|i| multimodal_dialogue(&mut world, &mut rng, format!("ds-{i:06}")))
        .collect();
    dialogues.shuffle(&mut rng);

    Ok(Corpora {
        text_dialogues: Splits::from_items(text),
        pairs: Splits::from_items(pairs),
        dialogues: Splits::from_items(dialogues),
    })
}

impl Corpora {
    pub fn manifest(&self) -> SplitManifest {
        let mut m = SplitManifest::default();
        m.add("text_dialogues", &self.text_dialogues, |d| d.id.clone());
        m.add("pairs", &self.pairs, |p| p.id.clone());
        m.add("dialogues", &self.dialogues, |d| d.id.clone());
        m
    }

    /// Writes the corpus tree under `dir`:
    /// `dialogues.{split}.jsonl`, `text_dialogues.{split}.jsonl`,
    /// `pairs.{split}.jsonl`, `images/`, and `splits.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        for (name, split) in split_names(&self.dialogues) {
            write_photochat_format(&dir.join(format!("dialogues.{name}.jsonl")), split)?;
            for d in split {
                for r in dialogue_images(d) {
                    if let (Some(p), Some(px)) = (&r.image_path, &r.pixels) {
                        let path = dir.join(p);
                        if !path.exists() {
                            px.save_png(&path)?;
                        }
                    }
                }
            }
        }
        for (name, split) in split_names(&self.text_dialogues) {
            write_text_dialogues(&dir.join(format!("text_dialogues.{name}.jsonl")), split)?;
        }
        for (name, split) in split_names(&self.pairs) {
            write_pairs(dir, &format!("pairs.{name}.jsonl"), split)?;
        }
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(dir.join("splits.json"), manifest + "\n")?;
        Ok(())
    }

    /// Reads a tree written by [`Corpora::write`]. Dialogue images
    /// are resolved eagerly.
    pub fn read(dir: &Path) -> Result<Self> {
        let need = |p: PathBuf| -> Result<PathBuf> {
            if p.exists() {
                Ok(p)
            } else {
                Err(Error::MissingCorpus(p.display().to_string()))
            }
        };
        let mut dialogues = Splits::default();
        let mut text_dialogues = Splits::default();
        let mut pairs = Splits::default();
        for name in ["train", "dev", "test"] {
            let mut ds = load_photochat_format(&need(dir.join(format!("dialogues.{name}.jsonl")))?)?;
            for d in &mut ds {
                attach_pixels(d, dir)?;
            }
            let tds = load_text_dialogues(&need(dir.join(format!("text_dialogues.{name}.jsonl")))?)?;
            let ps = load_pairs(&need(dir.join(format!("pairs.{name}.jsonl")))?)?;
            match name {
                "train" => (dialogues.train, text_dialogues.train, pairs.train) = (ds, tds, ps),
                "dev" => (dialogues.dev, text_dialogues.dev, pairs.dev) = (ds, tds, ps),
                _ => (dialogues.test, text_dialogues.test, pairs.test) = (ds, tds, ps),
            }
        }
        Ok(Self {
            text_dialogues,
            pairs,
            dialogues,
        })
    }
}

fn split_names<T>(s: &Splits<T>) -> [(&'static str, &Vec<T>); 3] {
    [("train", &s.train), ("dev", &s.dev), ("test", &s.test)]
}

fn dialogue_images(d: &MultimodalDialogue) -> impl Iterator<Item = &ImageRef> {
    d.context
        .turns
        .iter()
        .filter_map(|u| match &u.content {
            UtteranceContent::Image(r) => Some(r),
            UtteranceContent::Text(_) => None,
        })
        .chain(d.response.images())
}

/// Loads every response image of `d` from disk into memory.
pub fn attach_pixels(d: &mut MultimodalDialogue, base: &Path) -> Result<()> {
    for seg in &mut d.response.segments {
        if let Segment::Image(r) = seg {
            if r.pixels.is_none() && r.image_path.is_some() {
                r.pixels = Some(Arc::new(r.resolve(base)?));
            }
        }
    }
    Ok(())
}
