//! Synthetic narrated world used in place of real egocentric video.
//!
//! Each scene owns a set of `verb the noun` events. Some events also occur
//! with a postfix (`... with the left hand`). Streams walk a per-scene Markov
//! chain and every clip is a handful of noisy frame embeddings around the
//! narration's embedding, so the correct answer to every instruction sample
//! is known by construction.
//!
//! The world also defines the text encoder for its vocabulary
//! ([`WorldEncoder`]): an event embedding leans towards its scene embedding
//! and a clip embedding leans towards its postfix embedding, which gives the
//! scene -> prefix -> postfix chain something to find. Texts the world does
//! not know fall back to the stub encoder.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embed::{
    load_matrix, load_matrix_bound, mean_pool, normalized, save_matrix, stub_encode_text, EmbedError, EmbeddingMatrix,
    TextEncoder, VocabMatrices, UNBOUND,
};
use crate::npe::{encode, normalize_corpus, NormalizeConfig, RawNarration};
use crate::vocab::{EntryKind, VocabError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 11 streams to split 10:1, got {0}")]
    TooFewStreams(usize),
    #[error("dataset file {file}: {reason}")]
    Format { file: String, reason: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatagenError {
    pub fn code(&self) -> &'static str {
        match self {
            DatagenError::InvalidSpec(_) => "datagen.invalid_spec",
            DatagenError::TooFewStreams(_) => "datagen.too_few_streams",
            DatagenError::Format { .. } => "datagen.format",
            DatagenError::Vocab(e) => e.code(),
            DatagenError::Embed(e) => e.code(),
            DatagenError::Io(_) => "datagen.io",
        }
    }
}

const VERBS: [&str; 30] = [
    "cut", "wash", "open", "close", "pick", "hold", "move", "turn", "clean", "fold", "drop", "lift", "push", "pull",
    "wipe", "fill", "empty", "check", "carry", "place", "shake", "stir", "pour", "grab", "hang", "press", "roll",
    "sort", "rinse", "scrub",
];

const NOUNS: [&str; 50] = [
    "potato", "tomato", "door", "drawer", "cup", "plate", "knife", "towel", "bottle", "box", "bag", "book", "phone",
    "shirt", "lid", "bowl", "pan", "spoon", "brush", "bucket", "hose", "rake", "shovel", "ladder", "wrench", "tire",
    "screw", "board", "paper", "pen", "laptop", "chair", "table", "pillow", "blanket", "sock", "shoe", "broom", "mop",
    "sponge", "jar", "basket", "rope", "bike", "ball", "cable", "lamp", "mirror", "window", "key",
];

const SCENE_NAMES: [&str; 24] = [
    "kitchen", "garden", "garage", "bathroom", "office", "workshop", "laundry room", "living room", "bedroom",
    "supermarket", "park", "gym", "classroom", "street", "farm", "beach", "library", "restaurant", "bakery", "studio",
    "parking lot", "playground", "attic", "basement",
];

pub const QUERY_CURRENT: &str = "what is happening?";
pub const QUERY_NEXT: &str = "what's the next action?";
pub const QUERY_BEFORE: &str = "what happened before?";
pub const QUERY_SCENE: &str = "what's the overall activity in this video?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Current,
    Next,
    Before,
    Scene,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Current, Relation::Next, Relation::Before, Relation::Scene];

    pub fn query(self) -> &'static str {
        match self {
            Relation::Current => QUERY_CURRENT,
            Relation::Next => QUERY_NEXT,
            Relation::Before => QUERY_BEFORE,
            Relation::Scene => QUERY_SCENE,
        }
    }

    pub fn target_kind(self) -> EntryKind {
        match self {
            Relation::Scene => EntryKind::Scene,
            _ => EntryKind::Prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_scenes: usize,
    pub events_per_scene: usize,
    pub postfix_pool: Vec<String>,
    /// Probability that an event also occurs with a postfix.
    pub extension_prob: f64,
    /// Non-zero entries per transition row.
    pub successors_per_event: usize,
    /// Mass on each event's primary successor.
    pub primary_transition_prob: f64,
    /// Per-coordinate standard deviation of frame noise.
    pub frame_noise: f64,
    pub frames_per_clip: usize,
    pub dim: usize,
    pub seed: u64,
    /// Weight of the scene direction inside an event embedding.
    pub scene_affinity: f64,
    /// Weight of the postfix direction inside a clip embedding.
    pub postfix_affinity: f64,
    /// Fraction of events left out of the vocabulary (they still occur in streams).
    pub hidden_fraction: f64,
    pub n_streams: usize,
    pub stream_len: (usize, usize),
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_scenes: 20,
            events_per_scene: 20,
            postfix_pool: ["with the left hand", "with the right hand", "on the table", "slowly", "again", "with both hands"]
                .map(String::from)
                .to_vec(),
            extension_prob: 0.3,
            successors_per_event: 3,
            primary_transition_prob: 0.85,
            frame_noise: 0.1,
            frames_per_clip: 8,
            dim: 64,
            seed: 0,
            scene_affinity: 0.5,
            postfix_affinity: 0.5,
            hidden_fraction: 0.0,
            n_streams: 440,
            stream_len: (4, 8),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidSpec(m.to_string()));
        if self.n_scenes == 0 || self.events_per_scene == 0 {
            return bad("need at least one scene and one event per scene");
        }
        if self.n_scenes * self.events_per_scene > VERBS.len() * NOUNS.len() {
            return bad("too many events for the narration templates");
        }
        for p in [self.extension_prob, self.primary_transition_prob, self.hidden_fraction] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if !(self.frame_noise >= 0.0) {
            return bad("frame noise must be non-negative");
        }
        if self.successors_per_event == 0 || self.successors_per_event > self.events_per_scene {
            return bad("successors_per_event must be in 1..=events_per_scene");
        }
        if self.frames_per_clip == 0 || self.dim < 8 {
            return bad("frames_per_clip >= 1 and dim >= 8 required");
        }
        if self.stream_len.0 < 2 || self.stream_len.0 > self.stream_len.1 {
            return bad("stream lengths must satisfy 2 <= min <= max");
        }
        if self.extension_prob > 0.0 && self.postfix_pool.iter().all(|p| p.trim().is_empty()) {
            return bad("extensions need a non-empty postfix pool");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub scene: usize,
    pub base: String,
    pub suffix: Option<String>,
    pub hidden: bool,
}

impl Event {
    pub fn extended_text(&self) -> Option<String> {
        self.suffix.as_ref().map(|s| format!("{} {s}", self.base))
    }
}

/// Per-scene transition row: (successor event id, probability), summing to 1.
pub type TransitionRow = Vec<(usize, f64)>;

/// Generator state for one world.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub scene_labels: Vec<String>,
    pub events: Vec<Event>,
    pub scene_events: Vec<Vec<usize>>,
    /// Indexed by global event id.
    pub transitions: Vec<TransitionRow>,
    pub vocab: Arc<Vocabulary>,
    pub encoder: WorldEncoder,
}

pub fn make_world(spec: &WorldSpec) -> Result<(Arc<Vocabulary>, World), DatagenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let scene_labels: Vec<String> = (0..spec.n_scenes)
        .map(|i| {
            let name = SCENE_NAMES[i % SCENE_NAMES.len()];
            match i / SCENE_NAMES.len() {
                0 => name.to_string(),
                round => format!("{name} {}", round + 1),
            }
        })
        .collect();

    let mut grid: Vec<(usize, usize)> = (0..VERBS.len()).flat_map(|v| (0..NOUNS.len()).map(move |n| (v, n))).collect();
    grid.shuffle(&mut rng);
    let pool: Vec<String> = spec.postfix_pool.iter().map(|p| crate::npe::normalize_text(p)).filter(|p| !p.is_empty()).collect();

    let mut events = Vec::new();
    let mut scene_events = vec![Vec::new(); spec.n_scenes];
    for scene in 0..spec.n_scenes {
        for _ in 0..spec.events_per_scene {
            let id = events.len();
            let (v, n) = grid[id];
            let suffix = (rng.random::<f64>() < spec.extension_prob).then(|| pool[rng.random_range(0..pool.len())].clone());
            events.push(Event { id, scene, base: format!("{} the {}", VERBS[v], NOUNS[n]), suffix, hidden: false });
            scene_events[scene].push(id);
        }
    }

    let n_hidden = (spec.hidden_fraction * events.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(&mut rng);
    let mut visible = vec![spec.events_per_scene; spec.n_scenes];
    let mut hidden = 0;
    for id in order {
        if hidden == n_hidden {
            break;
        }
        let scene = events[id].scene;
        if visible[scene] > 1 {
            events[id].hidden = true;
            visible[scene] -= 1;
            hidden += 1;
        }
    }

    let mut transitions = vec![Vec::new(); events.len()];
    for ids in &scene_events {
        let mut cycle = ids.clone();
        cycle.shuffle(&mut rng);
        for (i, &e) in cycle.iter().enumerate() {
            let primary = cycle[(i + 1) % cycle.len()];
            let mut others: Vec<usize> = ids.iter().copied().filter(|&o| o != primary).collect();
            others.shuffle(&mut rng);
            others.truncate(spec.successors_per_event - 1);
            let mut row = vec![(primary, if others.is_empty() { 1.0 } else { spec.primary_transition_prob })];
            let rest = (1.0 - spec.primary_transition_prob) / others.len().max(1) as f64;
            row.extend(others.into_iter().map(|o| (o, rest)));
            transitions[e] = row;
        }
    }

    let encoder = WorldEncoder::new(spec, &scene_labels, &events);
    let mut corpus = Vec::new();
    for e in events.iter().filter(|e| !e.hidden) {
        let scene = Some(scene_labels[e.scene].clone());
        corpus.push(RawNarration { text: e.base.clone(), source_id: None, scene: scene.clone() });
        if let Some(text) = e.extended_text() {
            corpus.push(RawNarration { text, source_id: None, scene });
        }
    }
    let corpus = normalize_corpus(&corpus, &NormalizeConfig::default());
    let vocab = Arc::new(Vocabulary::from_npe(&encode(&corpus.narrations), &corpus.scene_labels)?);

    let world = World { spec: spec.clone(), scene_labels, events, scene_events, transitions, vocab: vocab.clone(), encoder };
    Ok((vocab, world))
}

/// Text encoder that knows the world's semantics.
#[derive(Debug, Clone)]
pub struct WorldEncoder {
    dim: usize,
    known: HashMap<String, Vec<f32>>,
}

impl WorldEncoder {
    fn new(spec: &WorldSpec, scene_labels: &[String], events: &[Event]) -> Self {
        let dim = spec.dim;
        let mut known = HashMap::new();
        let scene_vecs: Vec<Vec<f32>> = scene_labels.iter().map(|l| stub_encode_text(l, dim)).collect();
        for (l, v) in scene_labels.iter().zip(&scene_vecs) {
            known.insert(l.clone(), v.clone());
        }
        for e in events {
            let sem = combine(&stub_encode_text(&e.base, dim), &scene_vecs[e.scene], spec.scene_affinity);
            if let Some(text) = e.extended_text() {
                let suffix = stub_encode_text(e.suffix.as_deref().unwrap_or_default(), dim);
                known.insert(text, combine(&sem, &suffix, spec.postfix_affinity));
            }
            known.insert(e.base.clone(), sem);
        }
        WorldEncoder { dim, known }
    }

    fn vector(&self, text: &str) -> Vec<f32> {
        self.known.get(text).cloned().unwrap_or_else(|| stub_encode_text(text, self.dim))
    }
}

/// normalize(a + w * b)
fn combine(a: &[f32], b: &[f32], w: f64) -> Vec<f32> {
    let sum: Vec<f32> = a.iter().zip(b).map(|(x, y)| (*x as f64 + w * *y as f64) as f32).collect();
    normalized(&sum).unwrap_or_else(|| a.to_vec())
}

impl TextEncoder for WorldEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        Ok(self.vector(&crate::npe::normalize_text(text)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Vec<f32>>,
    pub narration: String,
    pub event: usize,
    /// `None` when the event is hidden from the vocabulary.
    pub prefix_id: Option<u32>,
    pub postfix_id: Option<u32>,
}

impl Clip {
    pub fn pooled(&self) -> Vec<f32> {
        mean_pool(&self.frames).expect("generated clips have non-degenerate frames")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub id: usize,
    pub scene: usize,
    pub clips: Vec<Clip>,
}

impl World {
    pub fn scene_entry_id(&self, scene: usize) -> Option<u32> {
        self.vocab.find(EntryKind::Scene, &self.scene_labels[scene])
    }

    /// Ground-truth clip centre for an event realized with or without its postfix.
    pub fn clip_center(&self, event: usize, with_suffix: bool) -> Vec<f32> {
        let e = &self.events[event];
        let sem = self.encoder.vector(&e.base);
        let suffix = if with_suffix { e.suffix.as_deref().unwrap_or("") } else { "" };
        combine(&sem, &stub_encode_text(suffix, self.spec.dim), self.spec.postfix_affinity)
    }

    /// A clip of `event`, with frame noise `noise` (the world default when `None`).
    pub fn make_clip<R: Rng>(&self, event: usize, with_suffix: bool, noise: Option<f64>, rng: &mut R) -> Clip {
        let e = &self.events[event];
        let with_suffix = with_suffix && e.suffix.is_some();
        let center = self.clip_center(event, with_suffix);
        let sigma = noise.unwrap_or(self.spec.frame_noise);
        let frames = (0..self.spec.frames_per_clip)
            .map(|_| {
                if sigma == 0.0 {
                    center.clone()
                } else {
                    let noisy: Vec<f32> = center
                        .iter()
                        .map(|&c| c + (sigma * Distribution::<f64>::sample(&StandardNormal, rng)) as f32)
                        .collect();
                    normalized(&noisy).unwrap_or_else(|| center.clone())
                }
            })
            .collect();
        let narration = if with_suffix { e.extended_text().expect("has suffix") } else { e.base.clone() };
        let prefix_id = self.vocab.find(EntryKind::Prefix, &e.base);
        let postfix_id = prefix_id.and_then(|_| {
            let suffix = if with_suffix { e.suffix.as_deref().unwrap_or("") } else { "" };
            self.vocab.find(EntryKind::Postfix, suffix)
        });
        Clip { frames, narration, event, prefix_id, postfix_id }
    }

    fn step<R: Rng>(&self, event: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.transitions[event];
        let mut acc = 0.0;
        for &(next, p) in row {
            acc += p;
            if u < acc {
                return next;
            }
        }
        row.last().expect("non-empty row").0
    }

    /// Event sequence of `len` steps in `scene`, starting uniformly.
    pub fn sample_events<R: Rng>(&self, scene: usize, len: usize, rng: &mut R) -> Vec<usize> {
        let ids = &self.scene_events[scene];
        let mut e = ids[rng.random_range(0..ids.len())];
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            if i > 0 {
                e = self.step(e, rng);
            }
            out.push(e);
        }
        out
    }
}

/// Streams with lengths drawn from `len_range` (inclusive). Stream `i` uses
/// its own ChaCha stream, so streams can be generated independently.
pub fn gen_streams(world: &World, n_streams: usize, len_range: (usize, usize)) -> Vec<Stream> {
    assert!(len_range.0 >= 2 && len_range.0 <= len_range.1, "streams need at least two clips");
    (0..n_streams)
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed);
            rng.set_stream(id as u64 + 1);
            let scene = rng.random_range(0..world.spec.n_scenes);
            let len = rng.random_range(len_range.0..=len_range.1);
            let clips = world
                .sample_events(scene, len, &mut rng)
                .into_iter()
                .map(|e| {
                    let with_suffix = rng.random::<bool>();
                    world.make_clip(e, with_suffix, None, &mut rng)
                })
                .collect();
            Stream { id, scene, clips }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub stream_id: usize,
    /// Half-open clip range `[start, end)`.
    pub clip_span: (usize, usize),
    pub relation: Relation,
    pub query_text: String,
    /// Prefix entry, or scene entry for [`Relation::Scene`].
    pub target_id: u32,
    pub target_postfix_id: Option<u32>,
}

/// current / next / before samples per clip and one scene sample per stream.
/// Samples whose target is hidden from the vocabulary are skipped.
pub fn make_instructions(streams: &[Stream], world: &World) -> Vec<InstructionSample> {
    let mut out = Vec::new();
    for s in streams {
        let n = s.clips.len();
        let mut push = |span: (usize, usize), relation: Relation, clip: Option<&Clip>| {
            let (target, postfix) = match clip {
                Some(c) => match c.prefix_id {
                    Some(p) => (p, c.postfix_id),
                    None => return,
                },
                None => match world.scene_entry_id(s.scene) {
                    Some(id) => (id, None),
                    None => return,
                },
            };
            out.push(InstructionSample {
                stream_id: s.id,
                clip_span: span,
                relation,
                query_text: relation.query().to_string(),
                target_id: target,
                target_postfix_id: postfix,
            });
        };
        for i in 0..n {
            push((i, i + 1), Relation::Current, Some(&s.clips[i]));
            if i > 0 {
                push((0, i), Relation::Next, Some(&s.clips[i]));
                push((i, n), Relation::Before, Some(&s.clips[i - 1]));
            }
        }
        push((0, n), Relation::Scene, None);
    }
    out
}

/// Split by stream at 10:1. No stream contributes to both sides.
pub fn split(samples: &[InstructionSample], seed: u64) -> Result<(Vec<InstructionSample>, Vec<InstructionSample>), DatagenError> {
    let streams: BTreeSet<usize> = samples.iter().map(|s| s.stream_id).collect();
    if streams.len() < 11 {
        return Err(DatagenError::TooFewStreams(streams.len()));
    }
    let mut ids: Vec<usize> = streams.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((ids.len() as f64) / 11.0).round().max(1.0) as usize;
    let eval_ids: BTreeSet<usize> = ids[..n_eval].iter().copied().collect();
    let (eval, train): (Vec<_>, Vec<_>) = samples.iter().cloned().partition(|s| eval_ids.contains(&s.stream_id));
    Ok((train, eval))
}

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub vocab: Arc<Vocabulary>,
    pub matrices: VocabMatrices,
    pub streams: Vec<Stream>,
    pub train: Vec<InstructionSample>,
    pub eval: Vec<InstructionSample>,
}

impl Dataset {
    pub fn generate(spec: &WorldSpec) -> Result<(World, Dataset), DatagenError> {
        let (vocab, world) = make_world(spec)?;
        let matrices = VocabMatrices::build(&vocab, &world.encoder)?;
        let streams = gen_streams(&world, spec.n_streams, spec.stream_len);
        let samples = make_instructions(&streams, &world);
        let (train, eval) = split(&samples, spec.seed)?;
        Ok((world, Dataset { spec: spec.clone(), vocab, matrices, streams, train, eval }))
    }

    pub fn stream(&self, id: usize) -> &Stream {
        &self.streams[id]
    }

    /// Pooled clip vectors of a sample's span.
    pub fn span_clips(&self, s: &InstructionSample) -> Vec<Vec<f32>> {
        self.streams[s.stream_id].clips[s.clip_span.0..s.clip_span.1].iter().map(Clip::pooled).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), DatagenError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("world.json"), serde_json::to_vec_pretty(&self.spec).expect("spec serializes"))?;
        self.vocab.save(&dir.join("vocab.jsonl"))?;
        let hash = self.vocab.content_hash();
        for kind in EntryKind::ALL {
            save_matrix(&dir.join(format!("{}.nvem", kind.as_str())), self.matrices.get(kind), &hash)?;
        }

        let mut frames: Vec<f32> = Vec::new();
        let mut rows = Vec::new();
        let dim = self.spec.dim;
        let mut w = BufWriter::new(File::create(dir.join("streams.jsonl"))?);
        for s in &self.streams {
            let start = frames.len() / dim;
            let clips: Vec<StoredClip> = s
                .clips
                .iter()
                .map(|c| {
                    for f in &c.frames {
                        frames.extend_from_slice(f);
                    }
                    StoredClip {
                        narration: c.narration.clone(),
                        event: c.event,
                        prefix_id: c.prefix_id,
                        postfix_id: c.postfix_id,
                        frames: c.frames.len(),
                    }
                })
                .collect();
            rows.push(start);
            let rec = StoredStream { stream_id: s.id, scene: s.scene, frame_row_start: start, clips };
            serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        save_matrix(&dir.join("frames.nvem"), &EmbeddingMatrix::new(dim, frames)?, &UNBOUND)?;

        let fpc = self.spec.frames_per_clip;
        for (name, samples) in [("train.jsonl", &self.train), ("eval.jsonl", &self.eval)] {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            for s in samples {
                let base = rows[s.stream_id];
                let rec = StoredSample {
                    sample: s.clone(),
                    frame_rows: (base + s.clip_span.0 * fpc, base + s.clip_span.1 * fpc),
                };
                serde_json::to_writer(&mut w, &rec).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset, DatagenError> {
        let spec: WorldSpec = serde_json::from_slice(&fs::read(dir.join("world.json"))?)
            .map_err(|e| DatagenError::Format { file: "world.json".into(), reason: e.to_string() })?;
        let vocab = Arc::new(Vocabulary::load(&dir.join("vocab.jsonl"))?);
        let hash = vocab.content_hash();
        let m = |kind: EntryKind| load_matrix_bound(&dir.join(format!("{}.nvem", kind.as_str())), &hash);
        let matrices = VocabMatrices { scene: m(EntryKind::Scene)?, prefix: m(EntryKind::Prefix)?, postfix: m(EntryKind::Postfix)? };
        let (frames, _) = load_matrix(&dir.join("frames.nvem"))?;

        let mut streams = Vec::new();
        for (i, line) in BufReader::new(File::open(dir.join("streams.jsonl"))?).lines().enumerate() {
            let bad = |reason: String| DatagenError::Format { file: "streams.jsonl".into(), reason: format!("line {}: {reason}", i + 1) };
            let rec: StoredStream = serde_json::from_str(&line?).map_err(|e| bad(e.to_string()))?;
            if rec.stream_id != streams.len() {
                return Err(bad("stream ids must be dense and ordered".into()));
            }
            let mut row = rec.frame_row_start;
            let mut clips = Vec::new();
            for c in rec.clips {
                if row + c.frames > frames.count() {
                    return Err(bad("frame rows out of range".into()));
                }
                let fr = (row..row + c.frames).map(|r| frames.row(r).to_vec()).collect();
                row += c.frames;
                clips.push(Clip { frames: fr, narration: c.narration, event: c.event, prefix_id: c.prefix_id, postfix_id: c.postfix_id });
            }
            streams.push(Stream { id: rec.stream_id, scene: rec.scene, clips });
        }

        let read_samples = |name: &str| -> Result<Vec<InstructionSample>, DatagenError> {
            let mut out = Vec::new();
            for (i, line) in BufReader::new(File::open(dir.join(name))?).lines().enumerate() {
                let bad = |reason: String| DatagenError::Format { file: name.into(), reason: format!("line {}: {reason}", i + 1) };
                let rec: StoredSample = serde_json::from_str(&line?).map_err(|e| bad(e.to_string()))?;
                let s = rec.sample;
                let stream = streams.get(s.stream_id).ok_or_else(|| bad("unknown stream".into()))?;
                if s.clip_span.0 >= s.clip_span.1 || s.clip_span.1 > stream.clips.len() {
                    return Err(bad("clip span out of range".into()));
                }
                if vocab.entry(s.target_id).map(|e| e.kind) != Some(s.relation.target_kind()) {
                    return Err(bad("target id does not match relation".into()));
                }
                out.push(s);
            }
            Ok(out)
        };
        let train = read_samples("train.jsonl")?;
        let eval = read_samples("eval.jsonl")?;
        Ok(Dataset { spec, vocab, matrices, streams, train, eval })
    }
}

#[derive(Serialize, Deserialize)]
struct StoredClip {
    narration: String,
    event: usize,
    prefix_id: Option<u32>,
    postfix_id: Option<u32>,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredStream {
    stream_id: usize,
    scene: usize,
    frame_row_start: usize,
    clips: Vec<StoredClip>,
}

#[derive(Serialize, Deserialize)]
struct StoredSample {
    #[serde(flatten)]
    sample: InstructionSample,
    frame_rows: (usize, usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_scenes: usize, events: usize, p_ext: f64) -> WorldSpec {
        WorldSpec { n_scenes, events_per_scene: events, extension_prob: p_ext, n_streams: 22, ..Default::default() }
    }

    #[test]
    fn no_extensions_means_only_empty_postfix() {
        let (v, _) = make_world(&spec(2, 3, 0.0)).unwrap();
        assert_eq!(v.count(EntryKind::Prefix), 6);
        assert_eq!(v.count(EntryKind::Postfix), 1);
        assert_eq!(v.count(EntryKind::Scene), 2);
    }

    #[test]
    fn same_seed_same_world() {
        let s = WorldSpec { seed: 7, ..spec(3, 4, 0.5) };
        let (a, wa) = make_world(&s).unwrap();
        let (b, wb) = make_world(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa.events, wb.events);
        assert_eq!(gen_streams(&wa, 5, (2, 6)), gen_streams(&wb, 5, (2, 6)));
    }

    #[test]
    fn extension_counts() {
        let mut s = spec(4, 5, 0.5);
        s.postfix_pool = ["slowly", "again", "on the table", "with the left hand"].map(String::from).to_vec();
        let (v, w) = make_world(&s).unwrap();
        assert!(v.count(EntryKind::Postfix) <= 5);
        assert_eq!(v.count(EntryKind::Prefix), 20);
        let distinct: BTreeSet<_> = w.events.iter().filter_map(|e| e.suffix.clone()).collect();
        assert_eq!(v.count(EntryKind::Postfix), distinct.len() + 1);
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let (_, w) = make_world(&spec(3, 6, 0.0)).unwrap();
        for row in &w.transitions {
            let total: f64 = row.iter().map(|x| x.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            let scene = w.events[row[0].0].scene;
            assert!(row.iter().all(|&(e, _)| w.events[e].scene == scene));
        }
    }

    #[test]
    fn noiseless_frames_equal_center() {
        let s = WorldSpec { frame_noise: 0.0, ..spec(2, 3, 0.0) };
        let (_, w) = make_world(&s).unwrap();
        for st in gen_streams(&w, 4, (2, 5)) {
            assert!((2..=5).contains(&st.clips.len()));
            for c in &st.clips {
                let center = w.clip_center(c.event, false);
                assert!(c.frames.iter().all(|f| *f == center));
            }
        }
    }

    #[test]
    fn markov_frequencies_converge() {
        let (_, w) = make_world(&spec(1, 10, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = w.sample_events(0, 100_000, &mut rng);
        let n = w.events.len();
        let mut counts = vec![vec![0usize; n]; n];
        for p in seq.windows(2) {
            counts[p[0]][p[1]] += 1;
        }
        for (from, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            assert!(total > 0);
            let mut expected = vec![0.0; n];
            for &(to, p) in &w.transitions[from] {
                expected[to] += p;
            }
            let tv: f64 = row.iter().zip(&expected).map(|(&c, &p)| (c as f64 / total as f64 - p).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.05, "row {from}: tv {tv}");
        }
    }

    #[test]
    fn instruction_counts_and_targets() {
        let (_, w) = make_world(&spec(2, 3, 0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clips = vec![w.make_clip(0, false, None, &mut rng), w.make_clip(1, false, None, &mut rng)];
        let stream = Stream { id: 0, scene: 0, clips };
        let samples = make_instructions(std::slice::from_ref(&stream), &w);
        assert_eq!(samples.len(), 5);
        let next = samples.iter().find(|s| s.relation == Relation::Next).unwrap();
        assert_eq!(next.clip_span, (0, 1));
        assert_eq!(Some(next.target_id), stream.clips[1].prefix_id);
        let before = samples.iter().find(|s| s.relation == Relation::Before).unwrap();
        assert_eq!(before.clip_span, (1, 2));
        assert_eq!(Some(before.target_id), stream.clips[0].prefix_id);
        let scene = samples.iter().find(|s| s.relation == Relation::Scene).unwrap();
        assert_eq!(w.vocab.entry(scene.target_id).unwrap().kind, EntryKind::Scene);
        assert_eq!(scene.query_text, QUERY_SCENE);
    }

    fn fake_samples(n_streams: usize) -> Vec<InstructionSample> {
        (0..n_streams)
            .flat_map(|s| {
                (0..3).map(move |i| InstructionSample {
                    stream_id: s,
                    clip_span: (i, i + 1),
                    relation: Relation::Current,
                    query_text: QUERY_CURRENT.into(),
                    target_id: 0,
                    target_postfix_id: None,
                })
            })
            .collect()
    }

    #[test]
    fn split_by_stream() {
        let samples = fake_samples(110);
        let (train, eval) = split(&samples, 3).unwrap();
        let ts: BTreeSet<_> = train.iter().map(|s| s.stream_id).collect();
        let es: BTreeSet<_> = eval.iter().map(|s| s.stream_id).collect();
        assert_eq!((ts.len(), es.len()), (100, 10));
        assert!(ts.is_disjoint(&es));
        assert_eq!(split(&samples, 3).unwrap(), (train, eval));
        assert!(matches!(split(&fake_samples(5), 0), Err(DatagenError::TooFewStreams(5))));
    }

    #[test]
    fn hidden_events_stay_out_of_vocab() {
        let s = WorldSpec { hidden_fraction: 0.1, ..spec(4, 10, 0.0) };
        let (v, w) = make_world(&s).unwrap();
        let hidden: Vec<_> = w.events.iter().filter(|e| e.hidden).collect();
        assert_eq!(hidden.len(), 4);
        assert_eq!(v.count(EntryKind::Prefix), 36);
        assert!(hidden.iter().all(|e| v.find(EntryKind::Prefix, &e.base).is_none()));
    }

    #[test]
    fn dataset_round_trip() {
        let s = WorldSpec { n_streams: 12, stream_len: (2, 3), ..spec(2, 4, 0.5) };
        let (_, d) = Dataset::generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.spec, d.spec);
        assert_eq!(back.vocab, d.vocab);
        assert_eq!(back.matrices, d.matrices);
        assert_eq!(back.streams, d.streams);
        assert_eq!((back.train, back.eval), (d.train, d.eval));
    }

    #[test]
    fn invalid_specs() {
        assert!(make_world(&WorldSpec { frame_noise: -1.0, ..Default::default() }).is_err());
        assert!(make_world(&WorldSpec { extension_prob: 1.5, ..Default::default() }).is_err());
        assert!(make_world(&WorldSpec { stream_len: (1, 3), ..Default::default() }).is_err());
    }
}
