//! Wall-clock benchmarks: the encode / decode / upgrade cost decomposition,
//! hierarchical versus brute-force prefix search, and narration retrieval
//! versus token-by-token generation.
//!
//! Every measurement runs on the calling thread.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::{make_world, DatagenError, WorldSpec, QUERY_CURRENT};
use crate::embed::{normalized, EmbedError, EmbeddingMatrix, VocabMatrices};
use crate::genret::{retrieve_narration, GenRetModel, GenerativeModel, GenretError, ModelConfig, RetInit, WordVocab};
use crate::index::{retrieve_chain_pooled, topk, ChainOptions, HierIndex, IndexError};
use crate::oov::{OovError, Snapshot, SnapshotStore, StubDescriber, StubProposer, UpgradeConfig};
use crate::vocab::{EntryKind, Origin, VocabEntry, VocabError, Vocabulary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("runs are not comparable: {baseline} vs {candidate} queries")]
    MismatchedRuns { baseline: usize, candidate: usize },
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Genret(#[from] GenretError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Oov(#[from] OovError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    pub fn code(&self) -> &'static str {
        match self {
            BenchError::MismatchedRuns { .. } => "bench.mismatched_runs",
            BenchError::InvalidConfig(_) => "bench.invalid_config",
            BenchError::Genret(e) => e.code(),
            BenchError::Index(e) => e.code(),
            BenchError::Embed(e) => e.code(),
            BenchError::Vocab(e) => e.code(),
            BenchError::Datagen(e) => e.code(),
            BenchError::Oov(e) => e.code(),
            BenchError::Io(_) => "bench.io",
            BenchError::Json(_) => "bench.json",
            BenchError::Csv(_) => "bench.csv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Generative,
    RetrievalBruteforce,
    RetrievalHier,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Generative => "generative",
            Mode::RetrievalBruteforce => "retrieval-bruteforce",
            Mode::RetrievalHier => "retrieval-hier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    /// Untimed decode calls before the first trial.
    pub warmup: usize,
    /// Timed passes over the query set; the median is reported.
    pub trials: usize,
    /// Timed encoding runs; the median is reported. With more than one, an
    /// extra untimed run comes first.
    pub encode_trials: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { warmup: 3, trials: 5, encode_trials: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub n_queries: usize,
    pub vocab_size: usize,
    pub encoding_s: f64,
    /// Median over trials of one pass over all queries.
    pub decoding_s: f64,
    pub upgrading_s: f64,
    pub total_s: f64,
    /// Number of vocabulary upgrades performed.
    pub upgrades: usize,
    pub decode_trials_s: Vec<f64>,
}

impl TimingReport {
    pub fn zero(mode: Mode, vocab_size: usize) -> Self {
        TimingReport {
            schema_version: SCHEMA_VERSION,
            mode,
            n_queries: 0,
            vocab_size,
            encoding_s: 0.0,
            decoding_s: 0.0,
            upgrading_s: 0.0,
            total_s: 0.0,
            upgrades: 0,
            decode_trials_s: Vec::new(),
        }
    }

    pub fn per_query_s(&self) -> f64 {
        if self.n_queries == 0 {
            0.0
        } else {
            self.decoding_s / self.n_queries as f64
        }
    }

    pub fn add_encoding(&mut self, seconds: f64) {
        self.encoding_s += seconds;
        self.update_total();
    }

    pub fn set_upgrading(&mut self, seconds: f64, upgrades: usize) {
        self.upgrading_s = seconds;
        self.upgrades = upgrades;
        self.update_total();
    }

    fn update_total(&mut self) {
        self.total_s = self.encoding_s + self.decoding_s + self.upgrading_s;
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Coefficient of variation (population standard deviation over mean).
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Times `encode` (the one-time vocabulary cost) and then `decode` over every
/// query. An empty query set produces an all-zero report without running
/// anything.
pub fn time_decomposition<R, Q>(
    mode: Mode,
    vocab_size: usize,
    mut encode: impl FnMut() -> R,
    queries: &[Q],
    mut decode: impl FnMut(&R, &Q),
    opts: &BenchOptions,
) -> TimingReport {
    let mut report = TimingReport::zero(mode, vocab_size);
    if queries.is_empty() {
        return report;
    }
    let mut enc = Vec::new();
    let mut engine = None;
    if opts.encode_trials > 1 {
        drop(encode());
    }
    for _ in 0..opts.encode_trials.max(1) {
        drop(engine.take());
        let t = Instant::now();
        engine = Some(encode());
        enc.push(t.elapsed().as_secs_f64());
    }
    let engine = engine.expect("at least one encoding run");
    for q in queries.iter().cycle().take(opts.warmup) {
        decode(&engine, q);
    }
    let trials: Vec<f64> = (0..opts.trials.max(1))
        .map(|_| {
            let t = Instant::now();
            for q in queries {
                decode(&engine, q);
            }
            t.elapsed().as_secs_f64()
        })
        .collect();
    report.n_queries = queries.len();
    report.encoding_s = median(&enc);
    report.decoding_s = median(&trials);
    report.decode_trials_s = trials;
    report.update_total();
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub schema_version: u32,
    pub baseline: Mode,
    pub candidate: Mode,
    pub n_queries: usize,
    pub baseline_decoding_s: f64,
    pub candidate_decoding_s: f64,
    /// Baseline decode time over candidate decode time.
    pub ratio: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Decode-time ratio of `baseline` over `candidate`, checked against `threshold`.
pub fn compare(baseline: &TimingReport, candidate: &TimingReport, threshold: f64) -> Result<SpeedupReport, BenchError> {
    if baseline.n_queries != candidate.n_queries || baseline.n_queries == 0 {
        return Err(BenchError::MismatchedRuns { baseline: baseline.n_queries, candidate: candidate.n_queries });
    }
    let ratio = baseline.decoding_s / candidate.decoding_s.max(f64::MIN_POSITIVE);
    Ok(SpeedupReport {
        schema_version: SCHEMA_VERSION,
        baseline: baseline.mode,
        candidate: candidate.mode,
        n_queries: baseline.n_queries,
        baseline_decoding_s: baseline.decoding_s,
        candidate_decoding_s: candidate.decoding_s,
        ratio,
        threshold,
        pass: ratio >= threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`. `None` for fewer than
/// two points or constant `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LinearFit { slope, intercept, r2 })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    schema_version: u32,
    mode: &'a str,
    n_queries: usize,
    vocab_size: usize,
    encoding_s: f64,
    decoding_s: f64,
    upgrading_s: f64,
    total_s: f64,
    upgrades: usize,
}

/// One CSV line per report, with a header.
pub fn to_csv(reports: &[TimingReport]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            schema_version: r.schema_version,
            mode: r.mode.as_str(),
            n_queries: r.n_queries,
            vocab_size: r.vocab_size,
            encoding_s: r.encoding_s,
            decoding_s: r.decoding_s,
            upgrading_s: r.upgrading_s,
            total_s: r.total_s,
            upgrades: r.upgrades,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| Distribution::<f32>::sample(&StandardNormal, rng)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, dim: usize) -> EmbeddingMatrix {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend(random_unit(rng, dim));
    }
    EmbeddingMatrix::new(dim, data).expect("unit rows")
}

/// Vocabulary of `n_scenes` scenes with `n_prefixes` prefixes dealt round
/// robin over them, plus the empty postfix and `n_postfixes - 1` others.
pub fn synthetic_vocabulary(n_scenes: usize, n_prefixes: usize, n_postfixes: usize) -> Result<Vocabulary, VocabError> {
    let mut entries = Vec::with_capacity(n_scenes + n_prefixes + n_postfixes);
    let mut push = |text: String, kind, scene_ids| {
        let id = entries.len() as u32;
        entries.push(VocabEntry { id, text, kind, scene_ids, origin: Origin::Corpus });
    };
    for s in 0..n_scenes {
        push(format!("scene {s}"), EntryKind::Scene, Vec::new());
    }
    for p in 0..n_prefixes {
        push(format!("prefix {p}"), EntryKind::Prefix, vec![(p % n_scenes.max(1)) as u32]);
    }
    push(String::new(), EntryKind::Postfix, Vec::new());
    for f in 1..n_postfixes.max(1) {
        push(format!("postfix {f}"), EntryKind::Postfix, Vec::new());
    }
    Vocabulary::from_entries(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierBenchConfig {
    pub n_prefixes: usize,
    pub n_scenes: usize,
    pub n_postfixes: usize,
    pub dim: usize,
    pub n_queries: usize,
    pub seed: u64,
    pub threshold: f64,
    pub options: BenchOptions,
}

impl Default for HierBenchConfig {
    fn default() -> Self {
        HierBenchConfig {
            n_prefixes: 800_000,
            n_scenes: 100,
            n_postfixes: 8,
            dim: 64,
            n_queries: 100,
            seed: 0,
            threshold: 10.0,
            options: BenchOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierBenchReport {
    pub schema_version: u32,
    pub config: HierBenchConfig,
    pub bruteforce: TimingReport,
    pub hier: TimingReport,
    pub speedup: SpeedupReport,
}

/// Brute-force prefix scan versus the scene -> prefix -> postfix chain over
/// random unit embeddings. Queries are noisy copies of random prefix rows.
pub fn hier_vs_bruteforce(cfg: &HierBenchConfig) -> Result<HierBenchReport, BenchError> {
    if cfg.n_scenes == 0 || cfg.n_prefixes < cfg.n_scenes || cfg.dim == 0 {
        return Err(BenchError::InvalidConfig("need dim > 0 and at least one prefix per scene".into()));
    }
    let vocab = std::sync::Arc::new(synthetic_vocabulary(cfg.n_scenes, cfg.n_prefixes, cfg.n_postfixes)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = Instant::now();
    let matrices = VocabMatrices {
        scene: random_matrix(&mut rng, cfg.n_scenes, cfg.dim),
        prefix: random_matrix(&mut rng, cfg.n_prefixes, cfg.dim),
        postfix: random_matrix(&mut rng, cfg.n_postfixes.max(1), cfg.dim),
    };
    let embed_s = t.elapsed().as_secs_f64();
    let queries: Vec<Vec<f32>> = (0..cfg.n_queries)
        .map(|_| {
            let row = matrices.prefix.row(rng.random_range(0..cfg.n_prefixes));
            let noisy: Vec<f32> = row.iter().zip(random_unit(&mut rng, cfg.dim)).map(|(a, b)| a + 0.3 * b).collect();
            normalized(&noisy).expect("non-zero")
        })
        .collect();

    let mut brute = time_decomposition(
        Mode::RetrievalBruteforce,
        vocab.len(),
        || (),
        &queries,
        |_, q| {
            std::hint::black_box((topk(q, &matrices.prefix, 1), topk(q, &matrices.postfix, 1)));
        },
        &cfg.options,
    );
    brute.add_encoding(embed_s);
    let opts = ChainOptions { beam: 1, k: 1 };
    let mut hier = time_decomposition(
        Mode::RetrievalHier,
        vocab.len(),
        || HierIndex::build(vocab.clone(), &matrices),
        &queries,
        |idx, q| {
            let idx = idx.as_ref().expect("index builds");
            std::hint::black_box(retrieve_chain_pooled(idx, q, opts).expect("query dim"));
        },
        &cfg.options,
    );
    hier.add_encoding(embed_s);
    let speedup = compare(&brute, &hier, cfg.threshold)?;
    Ok(HierBenchReport { schema_version: SCHEMA_VERSION, config: *cfg, bruteforce: brute, hier, speedup })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenVsRetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Tokens emitted per generated narration.
    pub gen_tokens: usize,
    /// Token caps for the per-token cost fit.
    pub caps: Vec<usize>,
    pub n_queries: usize,
    pub seed: u64,
    pub threshold: f64,
    pub min_r2: f64,
    pub world: WorldSpec,
    pub options: BenchOptions,
}

impl Default for GenVsRetConfig {
    fn default() -> Self {
        GenVsRetConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            gen_tokens: 16,
            caps: vec![4, 8, 16, 32],
            n_queries: 50,
            seed: 0,
            threshold: 5.0,
            min_r2: 0.95,
            world: WorldSpec::default(),
            options: BenchOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapTiming {
    pub cap: usize,
    pub per_query_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenVsRetReport {
    pub schema_version: u32,
    pub config: GenVsRetConfig,
    pub generative: TimingReport,
    pub retrieval: TimingReport,
    pub speedup: SpeedupReport,
    /// The same decoding with a key/value cache, for reference.
    pub generative_cached: TimingReport,
    pub cached_speedup: f64,
    pub per_token: Vec<CapTiming>,
    pub per_token_fit: Option<LinearFit>,
    pub fit_pass: bool,
}

/// Retrieval of a full narration (two passes through the chain) versus
/// greedy decoding of `gen_tokens` tokens, with identical backbones and
/// untrained weights. Generation ignores EOS so every query emits exactly
/// the requested number of tokens.
pub fn gen_vs_ret(cfg: &GenVsRetConfig) -> Result<GenVsRetReport, BenchError> {
    let (vocab, world) = make_world(&cfg.world)?;
    let words = WordVocab::for_vocabulary(&vocab);
    let model_cfg = ModelConfig {
        d_model: cfg.d_model,
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        d_embed: cfg.world.dim,
        query_vocab_size: words.len(),
        max_seq_len: cfg.max_seq_len,
        ret_init: RetInit::Pool,
        seed: cfg.seed,
        ..Default::default()
    };
    let ret_model = GenRetModel::<f32>::new(&model_cfg)?;
    let gen_model = GenerativeModel::<f32>::new(&model_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let query = words.tokenize(QUERY_CURRENT);
    let clips: Vec<Vec<Vec<f32>>> = (0..cfg.n_queries)
        .map(|_| {
            let e = rng.random_range(0..world.events.len());
            vec![world.make_clip(e, rng.random(), None, &mut rng).pooled()]
        })
        .collect();

    let opts = ChainOptions { beam: 1, k: 1 };
    let encoder = world.encoder.clone();
    let retrieval = time_decomposition(
        Mode::RetrievalHier,
        vocab.len(),
        || {
            let m = VocabMatrices::build(&vocab, &encoder).expect("world texts encode");
            HierIndex::build(vocab.clone(), &m).expect("world vocabulary indexes")
        },
        &clips,
        |idx, visual| {
            std::hint::black_box(retrieve_narration(&ret_model, &words, idx, visual, &query, opts).expect("fits the model"));
        },
        &cfg.options,
    );
    let run_gen = |cap: usize, cached: bool| -> Result<TimingReport, BenchError> {
        let decode = |visual: &[Vec<f32>]| {
            if cached {
                gen_model.decode_cached(visual, &query, cap, true)
            } else {
                gen_model.decode(visual, &query, cap, true)
            }
        };
        if let Some(v) = clips.first() {
            decode(v)?;
        }
        Ok(time_decomposition(
            Mode::Generative,
            words.len(),
            || (),
            &clips,
            |_, visual| {
                std::hint::black_box(decode(visual).expect("checked above"));
            },
            &cfg.options,
        ))
    };
    let generative = run_gen(cfg.gen_tokens, false)?;
    let speedup = compare(&generative, &retrieval, cfg.threshold)?;
    let generative_cached = run_gen(cfg.gen_tokens, true)?;
    let cached_speedup = generative_cached.per_query_s() / retrieval.per_query_s();
    let mut per_token = Vec::new();
    for &cap in &cfg.caps {
        let r = if cap == cfg.gen_tokens { generative.clone() } else { run_gen(cap, false)? };
        per_token.push(CapTiming { cap, per_query_s: r.per_query_s() });
    }
    let xs: Vec<f64> = per_token.iter().map(|c| c.cap as f64).collect();
    let ys: Vec<f64> = per_token.iter().map(|c| c.per_query_s).collect();
    let per_token_fit = linear_fit(&xs, &ys);
    let fit_pass = per_token_fit.is_some_and(|f| f.r2 > cfg.min_r2 && f.slope > 0.0);
    Ok(GenVsRetReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        generative,
        retrieval,
        speedup,
        generative_cached,
        cached_speedup,
        per_token,
        per_token_fit,
        fit_pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecompConfig {
    pub query_counts: Vec<usize>,
    pub world: WorldSpec,
    pub upgrade: UpgradeConfig,
    pub seed: u64,
    pub options: BenchOptions,
}

impl Default for DecompConfig {
    fn default() -> Self {
        DecompConfig {
            query_counts: vec![100, 1_000, 10_000],
            world: WorldSpec { dim: 256, hidden_fraction: 0.1, ..Default::default() },
            upgrade: UpgradeConfig { max_new_per_event: 20, ..Default::default() },
            seed: 0,
            options: BenchOptions { encode_trials: 9, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompReport {
    pub schema_version: u32,
    pub config: DecompConfig,
    pub rows: Vec<TimingReport>,
    /// (max - min) / mean of encoding_s across rows.
    pub encoding_spread: f64,
    /// Coefficient of variation of decoding_s / N across rows.
    pub per_query_cv: f64,
}

/// Encode / decode / upgrade decomposition of pooled-clip retrieval on a
/// synthetic world with hidden events. Decoding runs on the initial
/// snapshot; the upgrade phase then pushes one noiseless clip of every
/// hidden event through detection and, when it fires, the stub upgrade.
pub fn decomposition(cfg: &DecompConfig) -> Result<DecompReport, BenchError> {
    let (vocab, world) = make_world(&cfg.world)?;
    let encoder = world.encoder.clone();
    let (describer, proposer) = (StubDescriber::from_world(&world), StubProposer::from_world(&world));
    let max_n = cfg.query_counts.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let visible: Vec<usize> = world.events.iter().filter(|e| !e.hidden).map(|e| e.id).collect();
    let pool: Vec<Vec<f32>> = (0..max_n)
        .map(|_| {
            let e = visible[rng.random_range(0..visible.len())];
            world.make_clip(e, rng.random(), None, &mut rng).pooled()
        })
        .collect();
    let hidden_clips: Vec<Vec<f32>> =
        world.events.iter().filter(|e| e.hidden).map(|e| world.clip_center(e.id, false)).collect();

    let mut rows = Vec::new();
    for &n in &cfg.query_counts {
        let mut report = time_decomposition(
            Mode::RetrievalHier,
            vocab.len(),
            || {
                let m = VocabMatrices::build(&vocab, &encoder).expect("world texts encode");
                Snapshot::new(vocab.clone(), m).expect("world vocabulary indexes")
            },
            &pool[..n],
            |snap, q| {
                std::hint::black_box(snap.retrieve(q, cfg.upgrade.chain).expect("query dim"));
            },
            &cfg.options,
        );
        if n > 0 {
            let store = SnapshotStore::new(Snapshot::new(vocab.clone(), VocabMatrices::build(&vocab, &encoder)?)?);
            let t = Instant::now();
            let mut upgrades = 0;
            for clip in &hidden_clips {
                let out = store.process_clip(clip, &encoder, &describer, &proposer, &cfg.upgrade)?;
                upgrades += out.upgrade.is_some() as usize;
            }
            report.set_upgrading(t.elapsed().as_secs_f64(), upgrades);
        }
        rows.push(report);
    }
    let enc: Vec<f64> = rows.iter().filter(|r| r.n_queries > 0).map(|r| r.encoding_s).collect();
    let encoding_spread = if enc.is_empty() {
        0.0
    } else {
        let mean = enc.iter().sum::<f64>() / enc.len() as f64;
        let (lo, hi) = enc.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if mean > 0.0 { (hi - lo) / mean } else { 0.0 }
    };
    let per_query: Vec<f64> = rows.iter().filter(|r| r.n_queries > 0).map(TimingReport::per_query_s).collect();
    Ok(DecompReport {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        per_query_cv: coefficient_of_variation(&per_query),
        encoding_spread,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(mode: Mode, n: usize, decoding_s: f64) -> TimingReport {
        TimingReport { n_queries: n, decoding_s, ..TimingReport::zero(mode, 10) }
    }

    #[test]
    fn empty_query_set_is_all_zero() {
        let mut calls = 0;
        let r = time_decomposition(Mode::RetrievalHier, 5, || calls += 1, &Vec::<u32>::new(), |_, _| {}, &BenchOptions::default());
        assert_eq!(calls, 0);
        assert_eq!((r.encoding_s, r.decoding_s, r.upgrading_s, r.total_s, r.per_query_s()), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn decode_runs_warmup_plus_trials() {
        let mut calls = 0;
        let opts = BenchOptions { warmup: 3, trials: 5, encode_trials: 2 };
        let mut encodes = 0;
        let r = time_decomposition(Mode::Generative, 1, || encodes += 1, &[1, 2, 3, 4], |_, _| calls += 1, &opts);
        assert_eq!(encodes, 3);
        assert_eq!(calls, 3 + 5 * 4);
        assert_eq!(r.decode_trials_s.len(), 5);
        assert!((r.total_s - (r.encoding_s + r.decoding_s + r.upgrading_s)).abs() < 1e-12);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }

    #[test]
    fn compare_identical_is_one() {
        let a = report(Mode::RetrievalHier, 10, 0.5);
        let s = compare(&a, &a.clone(), 1.0).unwrap();
        assert_eq!(s.ratio, 1.0);
        assert!(s.pass);
    }

    #[test]
    fn compare_ratio_and_threshold() {
        let s = compare(&report(Mode::RetrievalBruteforce, 10, 2.0), &report(Mode::RetrievalHier, 10, 0.1), 10.0).unwrap();
        assert!((s.ratio - 20.0).abs() < 1e-9);
        assert!(s.pass);
        let s = compare(&report(Mode::Generative, 10, 0.3), &report(Mode::RetrievalHier, 10, 0.1), 5.0).unwrap();
        assert!(!s.pass);
    }

    #[test]
    fn compare_rejects_mismatched_runs() {
        let e = compare(&report(Mode::Generative, 10, 1.0), &report(Mode::RetrievalHier, 11, 1.0), 1.0).unwrap_err();
        assert_eq!(e.code(), "bench.mismatched_runs");
        assert!(compare(&report(Mode::Generative, 0, 0.0), &report(Mode::RetrievalHier, 0, 0.0), 1.0).is_err());
    }

    #[test]
    fn linear_fit_exact_line() {
        let f = linear_fit(&[4.0, 8.0, 16.0, 32.0], &[1.0 + 8.0, 1.0 + 16.0, 1.0 + 32.0, 1.0 + 64.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
        assert!(linear_fit(&[2.0, 2.0], &[1.0, 3.0]).is_none());
    }

    #[test]
    fn linear_fit_r2_oracle() {
        // Hand-computed: y = 0.7x + 0.5, ss_res = 0.3, ss_tot = 2.75.
        let f = linear_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 3.0]).unwrap();
        assert!((f.slope - 0.7).abs() < 1e-12);
        assert!((f.intercept - 0.5).abs() < 1e-12);
        assert!((f.r2 - (1.0 - 0.3 / 2.75)).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = to_csv(&[report(Mode::RetrievalHier, 3, 0.25), report(Mode::Generative, 3, 1.0)]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "schema_version,mode,n_queries,vocab_size,encoding_s,decoding_s,upgrading_s,total_s,upgrades");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,retrieval-hier,3,10,0.0,0.25,"));
    }

    #[test]
    fn report_json_round_trip() {
        let r = report(Mode::RetrievalBruteforce, 4, 0.5);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"mode\":\"retrieval-bruteforce\""));
        assert_eq!(serde_json::from_str::<TimingReport>(&json).unwrap(), r);
    }

    #[test]
    fn synthetic_vocabulary_partitions_prefixes() {
        let v = synthetic_vocabulary(4, 10, 3).unwrap();
        assert_eq!((v.count(EntryKind::Scene), v.count(EntryKind::Prefix), v.count(EntryKind::Postfix)), (4, 10, 3));
        let sizes: Vec<usize> = v.prefixes_by_scene().values().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn small_hier_bench_runs() {
        let cfg = HierBenchConfig {
            n_prefixes: 2_000,
            n_scenes: 10,
            n_queries: 5,
            threshold: 0.0,
            options: BenchOptions { warmup: 1, trials: 1, encode_trials: 1 },
            ..Default::default()
        };
        let r = hier_vs_bruteforce(&cfg).unwrap();
        assert_eq!(r.hier.n_queries, 5);
        assert!(r.hier.encoding_s > 0.0 && r.speedup.ratio > 0.0);
    }

    #[test]
    fn small_decomposition_runs() {
        let cfg = DecompConfig {
            query_counts: vec![0, 5, 20],
            world: WorldSpec { dim: 256, hidden_fraction: 0.1, n_scenes: 3, events_per_scene: 10, ..Default::default() },
            options: BenchOptions { warmup: 1, trials: 1, encode_trials: 1 },
            ..Default::default()
        };
        let r = decomposition(&cfg).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0].total_s, 0.0);
        assert!(r.rows[1].upgrades >= 1 && r.rows[1].upgrading_s > 0.0);
        for row in &r.rows {
            assert!((row.total_s - (row.encoding_s + row.decoding_s + row.upgrading_s)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn median_is_an_order_statistic(xs in proptest::collection::vec(0.0f64..100.0, 1..20)) {
            let m = median(&xs);
            let below = xs.iter().filter(|&&x| x <= m).count();
            let above = xs.iter().filter(|&&x| x >= m).count();
            prop_assert!(below * 2 >= xs.len() && above * 2 >= xs.len());
        }

        #[test]
        fn fit_recovers_lines(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let xs = [1.0, 2.0, 5.0, 9.0];
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let f = linear_fit(&xs, &ys).unwrap();
            prop_assert!((f.slope - a).abs() < 1e-9 && (f.intercept - b).abs() < 1e-9);
        }
    }
}
