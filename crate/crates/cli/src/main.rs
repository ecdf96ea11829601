mod bundle;
mod config;
mod error;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use narravoc::bench::{self, DecompConfig, GenVsRetConfig, HierBenchConfig, TimingReport};
use narravoc::datagen::{Dataset, InstructionSample, WorldSpec};
use narravoc::embed::{load_matrix, VocabMatrices};
use narravoc::genret::{
    evaluate_baseline, evaluate_genret, load_checkpoint, train, GenRetModel, HeadKind, ModelConfig, RetInit, TrainConfig, Track,
    WordVocab,
};
use narravoc::index::{retrieve_chain_pooled, retrieve_chain_text, ChainOptions, ChainResult, HierIndex};
use narravoc::npe::{encode, normalize_corpus, NormalizeConfig, RawNarration};
use narravoc::oov::{ScenePolicy, Snapshot, SnapshotStore, StubDescriber, StubProposer, TransportClient, UpgradeConfig};
use narravoc::transport::Endpoint;
use narravoc::vocab::Vocabulary;
use serde::Serialize;
use serde_json::{json, Value};

use bundle::{make_encoder, vocab_file, Bundle, EncoderSpec};
use config::{read_structured, require, EngineConfig};
use error::{CliResult, Failure};

#[derive(Parser)]
#[command(name = "narravoc", version, about = "Narration vocabulary, hierarchical retrieval and generative retrieval")]
struct Cli {
    /// Engine config (TOML, or JSON by extension). Defaults to $NARRAVOC_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a prefix/postfix/scene vocabulary from a narration corpus.
    BuildVocab(BuildVocabArgs),
    /// Embed every vocabulary entry into NVEM matrices.
    Embed(EmbedArgs),
    /// Validate embeddings and write an index bundle.
    Index(IndexArgs),
    /// Generate a synthetic world and its instruction dataset.
    Datagen(DatagenArgs),
    /// Train the retrieval-token model.
    Train(TrainArgs),
    /// Score a checkpoint and the mean-pool baseline on a dataset split.
    Eval(EvalArgs),
    /// Retrieve scene, prefix and postfix for a query.
    Retrieve(RetrieveArgs),
    /// Detect out-of-vocabulary clips and upgrade the vocabulary.
    Upgrade(UpgradeArgs),
    /// Run a benchmark and write a JSON report with a CSV mirror.
    Bench(BenchArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Text file (one narration per line) or JSONL with {text, source_id?, scene?}.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scene label for records without one.
    #[arg(long, default_value = "default")]
    default_scene: String,
    /// Regex stripped from every narration; replaces the built-in tag patterns.
    #[arg(long = "strip")]
    strip: Vec<String>,
}

#[derive(Args)]
struct EmbedArgs {
    /// Vocabulary JSONL, or a directory containing vocab.jsonl.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `stub`, `cmd:<program> <args>`, or an http(s) URL.
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    timeout_s: f64,
}

#[derive(Args)]
struct IndexArgs {
    /// Directory with vocab.jsonl and the three matrices.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DatagenArgs {
    /// World spec JSON; absent fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `datagen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ret_init: Option<RetInit>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Eval samples scored after each epoch; 0 disables.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Per-epoch log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrackArg {
    Naive,
    Casual,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    track: TrackArg,
    #[arg(long, value_enum, default_value = "eval")]
    split: SplitArg,
    /// Score at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("query").required(true).multiple(false)))]
struct RetrieveArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    /// NVEM file; every row is one query.
    #[arg(long, group = "query")]
    query_vec: Option<PathBuf>,
    /// Narration text, encoded with the bundle's encoder.
    #[arg(long, group = "query")]
    text: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    timeout_s: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    TopScene,
    Global,
}

#[derive(Args)]
struct UpgradeArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    /// NVEM file of pooled clip embeddings, one clip per row.
    #[arg(long)]
    clips: PathBuf,
    /// Directory for the upgraded bundle and report.json.
    #[arg(long)]
    out: PathBuf,
    /// Use the world-keyed stub describer and proposer (needs world.json in the bundle).
    #[arg(long, conflicts_with_all = ["describer", "proposer"])]
    stub: bool,
    #[arg(long, requires = "proposer")]
    describer: Option<String>,
    #[arg(long, requires = "describer")]
    proposer: Option<String>,
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long, value_enum, default_value = "top-scene")]
    scene_policy: PolicyArg,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long, default_value_t = 10.0)]
    timeout_s: f64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum BenchMode {
    Decomp,
    Hier,
    GenVsRet,
    Compare,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum)]
    mode: BenchMode,
    /// Report path; a CSV mirror is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Mode-specific settings (JSON or TOML); absent fields take defaults.
    #[arg(long)]
    bench_config: Option<PathBuf>,
    /// Compare mode: timing report of the slower method.
    #[arg(long, required_if_eq("mode", "compare"))]
    baseline: Option<PathBuf>,
    /// Compare mode: timing report of the faster method.
    #[arg(long, required_if_eq("mode", "compare"))]
    candidate: Option<PathBuf>,
    /// Compare mode: minimum speedup to pass.
    #[arg(long, default_value_t = 10.0)]
    threshold: f64,
}

fn log(msg: impl AsRef<str>) {
    eprintln!("narravoc: {}", msg.as_ref());
}

/// JSON on stdout with `--json`, a short line otherwise.
fn emit<T: Serialize>(json_mode: bool, value: &T, human: impl FnOnce() -> String) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    if json_mode {
        serde_json::to_writer(&mut out, value)?;
    } else {
        out.write_all(human().as_bytes())?;
    }
    writeln!(out)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_corpus(path: &Path, default_scene: &str) -> CliResult<Vec<RawNarration>> {
    let file = fs::File::open(path).map_err(|e| Failure::domain("cli.io", format!("{}: {e}", path.display())))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let mut rec = if jsonl {
            if line.trim().is_empty() {
                continue;
            }
            serde_json::from_str::<RawNarration>(&line)
                .map_err(|e| Failure::domain("cli.corpus", format!("{} line {}: {e}", path.display(), i + 1)))?
        } else {
            RawNarration::text(line)
        };
        if rec.scene.as_deref().is_none_or(|s| s.trim().is_empty()) {
            rec.scene = Some(default_scene.to_string());
        }
        out.push(rec);
    }
    Ok(out)
}

fn build_vocab(a: BuildVocabArgs, json_mode: bool) -> CliResult<()> {
    let norm = if a.strip.is_empty() { NormalizeConfig::default() } else { NormalizeConfig::with_patterns(&a.strip)? };
    let raw = read_corpus(&a.input, &a.default_scene)?;
    let corpus = normalize_corpus(&raw, &norm);
    let npe = encode(&corpus.narrations);
    let vocab = Vocabulary::from_npe(&npe, &corpus.scene_labels)?;
    let report = npe.report(&corpus.report);
    fs::create_dir_all(&a.out)?;
    vocab.save(&a.out.join("vocab.jsonl"))?;
    write_json(&a.out.join("report.json"), &report)?;
    write_json(&a.out.join("npe.json"), &npe)?;
    log(format!("wrote {} entries to {}", vocab.len(), a.out.display()));
    emit(json_mode, &report, || {
        format!(
            "{} narrations, {} unique: {} prefixes, {} postfixes, {} extensions",
            report.input_count, report.dedup_count, report.prefix_count, report.postfix_count, report.extension_count
        )
    })
}

fn embed(a: EmbedArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let vocab_path = require(a.vocab, cfg.paths.vocab.clone(), "vocab")?;
    let dim = a.dim.or(cfg.dim).unwrap_or(64);
    let spec = EncoderSpec::parse(a.encoder.as_deref().or(cfg.encoder.as_deref()).unwrap_or("stub"), dim)?;
    let vocab = Arc::new(Vocabulary::load(&vocab_file(&vocab_path))?);
    let encoder = make_encoder(&spec, Duration::from_secs_f64(a.timeout_s), None)?;
    let t = Instant::now();
    let matrices = VocabMatrices::build(&vocab, encoder.as_ref())?;
    let b = Bundle { vocab, matrices, encoder: Some(spec), world: None };
    b.save(&a.out)?;
    log(format!("embedded {} entries in {:.2}s", b.vocab.len(), t.elapsed().as_secs_f64()));
    let m = b.manifest();
    emit(json_mode, &m, || format!("{} entries at dim {} -> {}", b.vocab.len(), m.dim, a.out.display()))
}

#[derive(Serialize)]
struct IndexReport {
    manifest: bundle::Manifest,
    prefixes_per_scene: Vec<(String, usize)>,
    build_s: f64,
}

fn index(a: IndexArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let input = require(a.input, cfg.paths.matrices.clone(), "in")?;
    let b = Bundle::load(&input)?;
    let t = Instant::now();
    let idx = HierIndex::build(b.vocab.clone(), &b.matrices)?;
    let build_s = t.elapsed().as_secs_f64();
    b.save(&a.out)?;
    let prefixes_per_scene = b
        .vocab
        .prefixes_by_scene()
        .keys()
        .map(|&s| (b.vocab.text(s).to_string(), idx.scene_prefixes(s).map_or(0, |p| p.len())))
        .collect();
    let report = IndexReport { manifest: b.manifest(), prefixes_per_scene, build_s };
    write_json(&a.out.join("index.json"), &report)?;
    emit(json_mode, &report, || {
        format!("indexed {} scenes, {} prefixes -> {}", report.manifest.counts.scene, report.manifest.counts.prefix, a.out.display())
    })
}

#[derive(Serialize)]
struct DatagenReport {
    streams: usize,
    train_samples: usize,
    eval_samples: usize,
    vocab_size: usize,
    dim: usize,
}

fn datagen(a: DatagenArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let mut spec: WorldSpec = match &a.spec {
        Some(p) => read_structured(p)?,
        None => WorldSpec::default(),
    };
    if let Some(seed) = a.seed.or(cfg.seed) {
        spec.seed = seed;
    }
    let (_, ds) = Dataset::generate(&spec)?;
    ds.save(&a.out)?;
    let report = DatagenReport {
        streams: ds.streams.len(),
        train_samples: ds.train.len(),
        eval_samples: ds.eval.len(),
        vocab_size: ds.vocab.len(),
        dim: spec.dim,
    };
    emit(json_mode, &report, || {
        format!("{} streams, {} train / {} eval samples -> {}", report.streams, report.train_samples, report.eval_samples, a.out.display())
    })
}

fn train_cmd(a: TrainArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let data = require(a.data, cfg.paths.data.clone(), "data")?;
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let tdef = TrainConfig::default();
    let tcfg = TrainConfig {
        lr: a.lr.or(cfg.lr).unwrap_or(tdef.lr),
        batch_size: a.batch_size.or(cfg.batch_size).unwrap_or(tdef.batch_size),
        epochs: a.epochs.or(cfg.epochs).unwrap_or(tdef.epochs),
        seed,
        eval_limit: a.eval_limit.unwrap_or(tdef.eval_limit),
        checkpoint: Some(a.out.clone()),
        verbose: true,
        ..tdef
    };
    let ds = Dataset::load(&data)?;
    let words = WordVocab::for_vocabulary(&ds.vocab);
    let mdef = ModelConfig::default();
    let mcfg = ModelConfig {
        d_model: a.d_model.unwrap_or(mdef.d_model),
        n_layers: a.layers.unwrap_or(mdef.n_layers),
        n_heads: a.heads.unwrap_or(mdef.n_heads),
        d_embed: ds.matrices.dim(),
        query_vocab_size: words.len(),
        max_seq_len: a.max_seq_len.unwrap_or(mdef.max_seq_len),
        ret_init: a.ret_init.or(cfg.ret_init).unwrap_or(mdef.ret_init),
        temperature: a.temperature.or(cfg.temperature).unwrap_or(mdef.temperature),
        seed,
        ..mdef
    };
    mcfg.validate()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (_, log_) = train(GenRetModel::new(&mcfg)?, &words, &ds, &tcfg)?;
    let report = json!({ "checkpoint": a.out, "model": mcfg, "train": tcfg, "log": log_ });
    if let Some(p) = &a.log {
        write_json(p, &report)?;
    }
    emit(json_mode, &report, || {
        format!("trained {} epochs, final loss {:.4} -> {}", log_.epochs.len(), log_.final_loss().unwrap_or(f64::NAN), a.out.display())
    })
}

fn eval_cmd(a: EvalArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let model_path = require(a.model, cfg.paths.checkpoint.clone(), "model")?;
    let data = require(a.data, cfg.paths.data.clone(), "data")?;
    let ds = Dataset::load(&data)?;
    let (net, words) = load_checkpoint(&model_path)?;
    if net.head != HeadKind::Retrieval {
        return Err(Failure::domain("genret.checkpoint", "checkpoint is not a retrieval model"));
    }
    let model = GenRetModel { net };
    let split: &[InstructionSample] = match a.split {
        SplitArg::Train => &ds.train,
        SplitArg::Eval => &ds.eval,
    };
    let samples = &split[..a.limit.unwrap_or(split.len()).min(split.len())];
    let genret = evaluate_genret(&model, &words, &ds, samples)?;
    let tracks: &[Track] = match a.track {
        TrackArg::Naive => &[Track::Naive],
        TrackArg::Casual => &[Track::Casual],
        TrackArg::Both => &[Track::Naive, Track::Casual],
    };
    let mut baselines = serde_json::Map::new();
    for &t in tracks {
        baselines.insert(t.as_str().into(), serde_json::to_value(evaluate_baseline(&ds, samples, t)?)?);
    }
    let report = json!({ "samples": samples.len(), "genret": genret, "baseline": baselines });
    emit(json_mode, &report, || {
        use narravoc::datagen::Relation;
        let mut s = format!("{} samples\n", samples.len());
        s += &format!("genret      R@1 {:.3}", genret.result.pooled_recall_at_1(&Relation::ALL));
        for (name, v) in &baselines {
            let r: narravoc::metrics::EvalResult = serde_json::from_value(v.clone()).expect("round trip");
            s += &format!("\nbaseline {name:<6} R@1 {:.3}", r.pooled_recall_at_1(&Relation::ALL));
        }
        s
    })
}

fn chain_options(beam: Option<usize>, k: Option<usize>, cfg: &EngineConfig) -> CliResult<ChainOptions> {
    let d = ChainOptions::default();
    let opts = ChainOptions { beam: beam.or(cfg.beam).unwrap_or(d.beam), k: k.or(cfg.k).unwrap_or(d.k) };
    if opts.beam == 0 || opts.k == 0 {
        return Err(Failure::Usage("--beam and --k must be positive".into()));
    }
    Ok(opts)
}

fn print_chain(json_mode: bool, r: &ChainResult) -> CliResult<()> {
    emit(json_mode, r, || {
        format!("{}\t{}\t[{} | {} | {:.4}]", r.full_text, r.scene_text, r.prefix_text, r.postfix_text, r.prefix.score)
    })
}

fn retrieve(a: RetrieveArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let opts = chain_options(a.beam, a.k, cfg)?;
    let dir = require(a.index, cfg.paths.index.clone(), "index")?;
    let b = Bundle::load(&dir)?;
    let idx = HierIndex::build(b.vocab.clone(), &b.matrices)?;
    if let Some(text) = &a.text {
        let enc = b.text_encoder(Duration::from_secs_f64(a.timeout_s))?;
        let r = retrieve_chain_text::<Failure>(&idx, enc.as_ref(), text, opts)?;
        return print_chain(json_mode, &r);
    }
    let path = a.query_vec.expect("clap enforces one query source");
    let (queries, _) = load_matrix(&path)?;
    for q in queries.rows() {
        print_chain(json_mode, &retrieve_chain_pooled(&idx, q, opts)?)?;
    }
    Ok(())
}

fn upgrade(a: UpgradeArgs, cfg: &EngineConfig, json_mode: bool) -> CliResult<()> {
    let dir = require(a.index, cfg.paths.index.clone(), "index")?;
    if !a.stub && a.describer.is_none() {
        return Err(Failure::Usage("pass --stub or both --describer and --proposer".into()));
    }
    let endpoint = |s: &str| Endpoint::parse(s).ok_or_else(|| Failure::Usage(format!("bad endpoint {s:?}")));
    let ucfg = UpgradeConfig {
        threshold: a.threshold.or(cfg.threshold).unwrap_or(UpgradeConfig::default().threshold),
        max_new_per_event: a.max_new.unwrap_or(UpgradeConfig::default().max_new_per_event),
        scene_policy: match a.scene_policy {
            PolicyArg::TopScene => ScenePolicy::TopScene,
            PolicyArg::Global => ScenePolicy::Global,
        },
        describer: a.describer.as_deref().map(endpoint).transpose()?,
        proposer: a.proposer.as_deref().map(endpoint).transpose()?,
        timeout_s: a.timeout_s,
        chain: chain_options(a.beam, None, cfg)?,
    };
    ucfg.validate()?;

    let b = Bundle::load(&dir)?;
    let encoder = b.text_encoder(ucfg.timeout())?;
    let (clips, _) = load_matrix(&a.clips)?;
    let clients: (Box<dyn narravoc::oov::CompletionClient>, Box<dyn narravoc::oov::CompletionClient>) = if a.stub {
        let world = b.world()?;
        (Box::new(StubDescriber::from_world(&world)), Box::new(StubProposer::from_world(&world)))
    } else {
        let (d, p): (TransportClient, TransportClient) = ucfg.transport_clients()?;
        (Box::new(d), Box::new(p))
    };
    let store = SnapshotStore::new(Snapshot::new(b.vocab.clone(), b.matrices.clone())?);
    let mut outcomes = Vec::new();
    for clip in clips.rows() {
        outcomes.push(store.process_clip(clip, encoder.as_ref(), clients.0.as_ref(), clients.1.as_ref(), &ucfg)?);
    }
    let snap = store.current();
    let out = Bundle { vocab: snap.vocab.clone(), matrices: (*snap.matrices).clone(), encoder: b.encoder.clone(), world: b.world.clone() };
    out.save(&a.out)?;
    let oov = outcomes.iter().filter(|o| o.oov).count();
    let added: usize = outcomes.iter().filter_map(|o| o.upgrade.as_ref()).map(|u| u.accepted_count).sum();
    let report = json!({
        "clips": outcomes.len(),
        "oov": oov,
        "accepted": added,
        "vocab_size_before": b.vocab.len(),
        "vocab_size_after": snap.vocab.len(),
        "snapshot_id": snap.id,
        "outcomes": outcomes,
    });
    write_json(&a.out.join("report.json"), &report)?;
    emit(json_mode, &report, || {
        format!("{oov}/{} clips out of vocabulary, {added} prefixes added ({} -> {} entries)", outcomes.len(), b.vocab.len(), snap.vocab.len())
    })
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_structured)
}

fn bench_cmd(a: BenchArgs, json_mode: bool) -> CliResult<()> {
    let csv_path = a.out.with_extension("csv");
    let cfg_path = a.bench_config.as_deref();
    let (report, timings): (Value, Vec<TimingReport>) = match a.mode {
        BenchMode::Hier => {
            let r = bench::hier_vs_bruteforce(&load_or_default::<HierBenchConfig>(cfg_path)?)?;
            log(format!("hierarchical speedup {:.1}x (pass: {})", r.speedup.ratio, r.speedup.pass));
            (serde_json::to_value(&r)?, vec![r.bruteforce, r.hier])
        }
        BenchMode::GenVsRet => {
            let r = bench::gen_vs_ret(&load_or_default::<GenVsRetConfig>(cfg_path)?)?;
            log(format!("retrieval speedup {:.1}x (pass: {}), per-token fit pass: {}", r.speedup.ratio, r.speedup.pass, r.fit_pass));
            (serde_json::to_value(&r)?, vec![r.generative, r.retrieval])
        }
        BenchMode::Decomp => {
            let r = bench::decomposition(&load_or_default::<DecompConfig>(cfg_path)?)?;
            log(format!("encoding spread {:.3}, per-query cv {:.3}", r.encoding_spread, r.per_query_cv));
            (serde_json::to_value(&r)?, r.rows)
        }
        BenchMode::Compare => {
            let load = |p: &Option<PathBuf>| -> CliResult<TimingReport> {
                Ok(serde_json::from_slice(&fs::read(p.as_ref().expect("clap requires it"))?)?)
            };
            let (base, cand) = (load(&a.baseline)?, load(&a.candidate)?);
            let r = bench::compare(&base, &cand, a.threshold)?;
            (serde_json::to_value(&r)?, vec![base, cand])
        }
    };
    write_json(&a.out, &report)?;
    fs::write(&csv_path, bench::to_csv(&timings)?)?;
    emit(json_mode, &report, || format!("wrote {} and {}", a.out.display(), csv_path.display()))
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = EngineConfig::load(cli.config.as_deref())?;
    let j = cli.json;
    match cli.command {
        Command::BuildVocab(a) => build_vocab(a, j),
        Command::Embed(a) => embed(a, &cfg, j),
        Command::Index(a) => index(a, &cfg, j),
        Command::Datagen(a) => datagen(a, &cfg, j),
        Command::Train(a) => train_cmd(a, &cfg, j),
        Command::Eval(a) => eval_cmd(a, &cfg, j),
        Command::Retrieve(a) => retrieve(a, &cfg, j),
        Command::Upgrade(a) => upgrade(a, &cfg, j),
        Command::Bench(a) => bench_cmd(a, j),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let json_mode = cli.json;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            if json_mode {
                println!("{}", json!({ "error": { "code": f.code(), "message": f.message() } }));
            }
            ExitCode::from(f.exit_code())
        }
    }
}
