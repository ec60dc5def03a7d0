//! Batch pipeline driver: synthesize corpora, build vocabularies, train,
//! encode, index, mine, rescore, evaluate, and emit reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use bitext_core::corpus::{
    build_vocab, corpus_from_sides, generate_synthetic_bitext, parse_gold_map, parse_mono_ids,
    write_gold_map, write_mono_ids, TokenizerConfig,
};
use bitext_core::encoder::{encode_corpus, EncoderConfig, Model};
use bitext_core::index::{
    load_embeddings, save_embeddings, ApproxIndex, ExactIndex, NnIndex,
};
use bitext_core::metrics::{
    cosine_separation, optimize_threshold, pr_curve_ap, precision_at_n, rank_candidates,
    EvalReport, GoldMap,
};
use bitext_core::miner::{
    filter_threshold, margin_rescore, mutual_nn_filter, read_candidates, retrieve_pairs,
    second_stage_rescore, write_candidates, CandidatePair, Direction, MiningConfig,
    ProcessScorer, RescoreVariant,
};
use bitext_core::trainer::{train, Checkpoint, TrainConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            msg: msg.into(),
        }
    }

    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<bitext_core::Error> for CliError {
    fn from(e: bitext_core::Error) -> Self {
        CliError::data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "bitext",
    about = "Parallel-corpus mining pipeline: train a dual encoder, index embeddings, mine and evaluate sentence pairs",
    version
)]
struct Cli {
    /// Reserved worker count; execution is currently single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Force fully deterministic execution (already the default behavior).
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seed-fixed synthetic cipher bitext.
    Synth(SynthArgs),
    /// Build a frequency vocabulary from text files.
    BuildVocab(BuildVocabArgs),
    /// Train the dual encoder on an aligned corpus.
    Train(TrainArgs),
    /// Encode a mono-ids file into an embedding matrix.
    Encode(EncodeArgs),
    /// Build a nearest-neighbor index over saved embeddings.
    Index(IndexArgs),
    /// Retrieve and filter candidate pairs from two embedding sides.
    Mine(MineArgs),
    /// Rescore candidates with neighborhood margins or an external scorer.
    Rescore(RescoreArgs),
    /// Score candidate pairs against a gold map.
    Eval(EvalArgs),
    /// Emit report files (report.tsv, pr_curve.csv, margin_sweep.csv) for a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 100)]
    vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    #[arg(long, default_value_t = 12)]
    len_max: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Mono-ids input files (id<TAB>text).
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum EncoderPreset {
    Desk,
    DeskTransformer,
    Paper,
}

#[derive(Copy, Clone, ValueEnum)]
enum TokenizerPreset {
    Desk,
    Paper,
}

#[derive(Args)]
struct TrainArgs {
    /// Source-side mono-ids file, aligned row-by-row with --target.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Gold map (src_id<TAB>tgt_id); defaults to row alignment.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// TOML run config; CLI flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EncoderPreset::Desk)]
    encoder_preset: EncoderPreset,
    #[arg(long, value_enum, default_value_t = TokenizerPreset::Desk)]
    tokenizer_preset: TokenizerPreset,
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Train the one-directional variant (forward loss only).
    #[arg(long)]
    unidirectional: bool,
    #[arg(long)]
    hard_negatives: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// Trained checkpoint (checkpoint.json).
    #[arg(long)]
    model: PathBuf,
    /// Mono-ids input file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value = "embeddings.bin")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Build an exact index instead of the clustered one.
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 64)]
    clusters: usize,
    #[arg(long)]
    probe: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    source_emb: PathBuf,
    #[arg(long)]
    target_emb: PathBuf,
    /// Optional prebuilt index over the target side; exact search otherwise.
    #[arg(long)]
    target_index: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    /// Keep only mutual top-1 neighbors.
    #[arg(long)]
    mutual: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, ValueEnum)]
enum VariantArg {
    Bidirectional,
    OneDirectional,
}

#[derive(Args)]
struct RescoreArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    source_emb: Option<PathBuf>,
    #[arg(long)]
    target_emb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = VariantArg::Bidirectional)]
    variant: VariantArg,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// External scorer command (line protocol on stdin/stdout); switches to
    /// second-stage rescoring and requires --source/--target text files.
    #[arg(long)]
    command: Option<String>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Candidate pairs file.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    /// Comma-separated ranks for P@N.
    #[arg(long, default_value = "1")]
    p_at: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory with candidates.tsv and gold.tsv; margin sweep
    /// subdirectories named margin_<value> contribute margin_sweep.csv rows.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    tokenizer: Option<TokenizerConfig>,
    encoder: Option<EncoderConfig>,
    train: Option<TrainConfig>,
    mining: Option<MiningConfig>,
}

fn load_run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| CliError::data(format!("config {}: {e}", p.display())))
        }
    }
}

fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::data(format!("missing input file: {}", p.display())))
    }
}

fn ensure_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p)?;
    Ok(())
}

/// Writes the effective configuration of a subcommand into its output
/// directory.
fn echo_config(out: &Path, sections: &[(&str, toml::Value)]) -> CliResult<()> {
    let mut table = toml::Table::new();
    for (name, v) in sections {
        table.insert(name.to_string(), v.clone());
    }
    fs::write(out.join("config.toml"), toml::to_string_pretty(&table).map_err(
        |e| CliError::data(format!("config serialization: {e}")),
    )?)?;
    Ok(())
}

fn to_toml<T: Serialize>(v: &T) -> CliResult<toml::Value> {
    toml::Value::try_from(v).map_err(|e| CliError::data(format!("config serialization: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through the same path
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("--threads must be >= 1");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::BuildVocab(a) => cmd_build_vocab(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Index(a) => cmd_index(a),
        Cmd::Mine(a) => cmd_mine(a),
        Cmd::Rescore(a) => cmd_rescore(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let corpus = generate_synthetic_bitext(
        a.seed,
        a.pairs,
        a.vocab_size,
        (a.len_min, a.len_max),
        a.noise,
    )?;
    ensure_dir(&a.out)?;
    let mut buf = Vec::new();
    write_mono_ids(&mut buf, &corpus.source_side())?;
    fs::write(a.out.join("source.tsv"), &buf)?;
    buf.clear();
    write_mono_ids(&mut buf, &corpus.target_side())?;
    fs::write(a.out.join("target.tsv"), &buf)?;
    buf.clear();
    write_gold_map(&mut buf, &corpus.gold)?;
    fs::write(a.out.join("gold.tsv"), &buf)?;
    let cfg = toml::Value::try_from(BTreeMap::from([
        ("seed".to_string(), toml::Value::Integer(a.seed as i64)),
        ("pairs".to_string(), toml::Value::Integer(a.pairs as i64)),
        (
            "vocab_size".to_string(),
            toml::Value::Integer(a.vocab_size as i64),
        ),
        ("len_min".to_string(), toml::Value::Integer(a.len_min as i64)),
        ("len_max".to_string(), toml::Value::Integer(a.len_max as i64)),
        ("noise".to_string(), toml::Value::Float(a.noise)),
    ]))
    .unwrap();
    echo_config(&a.out, &[("synth", cfg)])?;
    println!("wrote {} pairs to {}", a.pairs, a.out.display());
    Ok(())
}

fn cmd_build_vocab(a: BuildVocabArgs) -> CliResult<()> {
    let run = load_run_config(a.config.as_deref())?;
    let tok = run.tokenizer.unwrap_or_default();
    let mut texts = Vec::new();
    for f in &a.input {
        require_file(f)?;
        for (_, text) in parse_mono_ids(f)? {
            texts.push(text);
        }
    }
    let vocab = build_vocab(texts.iter().map(String::as_str), a.size, &tok)?;
    ensure_dir(&a.out)?;
    let json = serde_json::to_string(&vocab)
        .map_err(|e| CliError::data(format!("vocab serialization: {e}")))?;
    fs::write(a.out.join("vocab.json"), json)?;
    echo_config(&a.out, &[("tokenizer", to_toml(&tok)?)])?;
    println!("vocabulary of {} words", vocab.size());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let run = load_run_config(a.config.as_deref())?;
    let tok = run.tokenizer.unwrap_or_else(|| match a.tokenizer_preset {
        TokenizerPreset::Desk => TokenizerConfig::desk(),
        TokenizerPreset::Paper => TokenizerConfig::paper(),
    });
    let enc = run.encoder.unwrap_or_else(|| match a.encoder_preset {
        EncoderPreset::Desk => EncoderConfig::desk(),
        EncoderPreset::DeskTransformer => EncoderConfig::desk_transformer(),
        EncoderPreset::Paper => EncoderConfig::paper(),
    });
    let mut tcfg = run.train.unwrap_or_else(TrainConfig::desk);
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    if let Some(s) = a.max_steps {
        tcfg.max_steps = s;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(m) = a.margin {
        tcfg.margin.m = m;
    }
    if a.unidirectional {
        tcfg.margin.bidirectional = false;
    }
    if let Some(h) = a.hard_negatives {
        tcfg.hard_negatives = h;
    }
    if let Some(lr) = a.lr {
        tcfg.lr_schedule = vec![(0, lr)];
    }

    require_file(&a.source)?;
    require_file(&a.target)?;
    let src = parse_mono_ids(&a.source)?;
    let tgt = parse_mono_ids(&a.target)?;
    let gold = match &a.gold {
        Some(g) => {
            require_file(g)?;
            parse_gold_map(g)?
        }
        None => src
            .iter()
            .zip(&tgt)
            .map(|((s, _), (t, _))| (s.clone(), t.clone()))
            .collect(),
    };
    let corpus = corpus_from_sides(src, tgt, gold)?;

    let texts: Vec<String> = corpus
        .pairs
        .iter()
        .flat_map(|p| [p.src_text.clone(), p.tgt_text.clone()])
        .collect();
    let vocab = build_vocab(texts.iter().map(String::as_str), a.vocab_size, &tok)?;
    let model = Model::init(tok.clone(), enc.clone(), vocab, tcfg.seed)?;

    let ckpt = train(&corpus, model, &tcfg)?;

    ensure_dir(&a.out)?;
    ckpt.save(&a.out.join("checkpoint.json"))?;
    let mut log = String::from("step\tloss\tdev_p1\n");
    for h in &ckpt.history {
        let dev = h
            .dev_p1
            .map(|v| v.to_string())
            .unwrap_or_else(|| "NA".into());
        log.push_str(&format!("{}\t{}\t{}\n", h.step, h.loss, dev));
    }
    fs::write(a.out.join("train_log.tsv"), log)?;
    echo_config(
        &a.out,
        &[
            ("tokenizer", to_toml(&tok)?),
            ("encoder", to_toml(&enc)?),
            ("train", to_toml(&tcfg)?),
        ],
    )?;
    let last = ckpt.history.last();
    println!(
        "trained {} steps, final loss {}",
        ckpt.step,
        last.map(|h| h.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> CliResult<()> {
    require_file(&a.model)?;
    require_file(&a.input)?;
    let ckpt = Checkpoint::load(&a.model)?;
    let sentences = parse_mono_ids(&a.input)?;
    let emb = encode_corpus(&sentences, &ckpt.model, a.batch_size)?;
    ensure_dir(&a.out)?;
    save_embeddings(&emb, &a.out.join(&a.name))?;
    let cfg = toml::Value::try_from(BTreeMap::from([
        (
            "model".to_string(),
            toml::Value::String(a.model.display().to_string()),
        ),
        (
            "input".to_string(),
            toml::Value::String(a.input.display().to_string()),
        ),
        (
            "batch_size".to_string(),
            toml::Value::Integer(a.batch_size as i64),
        ),
    ]))
    .unwrap();
    echo_config(&a.out, &[("encode", cfg)])?;
    println!("encoded {} sentences", emb.ids.len());
    Ok(())
}

fn cmd_index(a: IndexArgs) -> CliResult<()> {
    require_file(&a.embeddings)?;
    let emb = load_embeddings(&a.embeddings)?;
    ensure_dir(&a.out)?;
    let path = a.out.join("index.bin");
    if a.exact {
        ExactIndex::build(&emb)?.save(&path)?;
    } else {
        let mut idx = ApproxIndex::build(&emb, a.clusters, a.seed)?;
        if let Some(p) = a.probe {
            idx.set_probe_count(p)?;
        }
        idx.save(&path)?;
    }
    let cfg = toml::Value::try_from(BTreeMap::from([
        ("exact".to_string(), toml::Value::Boolean(a.exact)),
        (
            "clusters".to_string(),
            toml::Value::Integer(a.clusters as i64),
        ),
        (
            "probe".to_string(),
            toml::Value::Integer(a.probe.unwrap_or(0) as i64),
        ),
        ("seed".to_string(), toml::Value::Integer(a.seed as i64)),
    ]))
    .unwrap();
    echo_config(&a.out, &[("index", cfg)])?;
    println!("index over {} vectors at {}", emb.ids.len(), path.display());
    Ok(())
}

fn cmd_mine(a: MineArgs) -> CliResult<()> {
    let run = load_run_config(a.config.as_deref())?;
    let mut mcfg = run.mining.unwrap_or_default();
    if let Some(k) = a.k {
        mcfg.k = k;
    }
    if let Some(t) = a.threshold {
        mcfg.threshold = t;
    }
    mcfg.validate()?;

    require_file(&a.source_emb)?;
    require_file(&a.target_emb)?;
    let src = load_embeddings(&a.source_emb)?;
    let tgt = load_embeddings(&a.target_emb)?;

    let loaded_index: Option<ApproxIndex> = match &a.target_index {
        Some(p) => {
            require_file(p)?;
            Some(ApproxIndex::load(p)?)
        }
        None => None,
    };
    let exact_tgt;
    let tgt_index: &dyn NnIndex = match &loaded_index {
        Some(i) => i,
        None => {
            exact_tgt = ExactIndex::build(&tgt)?;
            &exact_tgt
        }
    };

    let forward = retrieve_pairs(&src, tgt_index, mcfg.k, Direction::Forward);
    let mined = if a.mutual {
        let src_index = ExactIndex::build(&src)?;
        let backward = retrieve_pairs(&tgt, &src_index, mcfg.k, Direction::Backward);
        mutual_nn_filter(&forward, &backward)
    } else {
        forward
    };
    let kept = filter_threshold(&mined, mcfg.threshold);

    ensure_dir(&a.out)?;
    let mut buf = Vec::new();
    write_candidates(&mut buf, &kept)?;
    fs::write(a.out.join("candidates.tsv"), buf)?;
    let mut cfg = to_toml(&mcfg)?;
    if let Some(t) = cfg.as_table_mut() {
        t.insert("mutual".into(), toml::Value::Boolean(a.mutual));
    }
    echo_config(&a.out, &[("mining", cfg)])?;
    println!("mined {} pairs", kept.len());
    Ok(())
}

fn cmd_rescore(a: RescoreArgs) -> CliResult<()> {
    require_file(&a.candidates)?;
    let pairs = read_candidates(&a.candidates)?;
    let rescored: Vec<CandidatePair> = if let Some(cmd) = &a.command {
        let (src_path, tgt_path) = match (&a.source, &a.target) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(CliError::usage(
                    "--command requires --source and --target text files",
                ))
            }
        };
        require_file(src_path)?;
        require_file(tgt_path)?;
        let mut texts: BTreeMap<String, String> = BTreeMap::new();
        for (id, text) in parse_mono_ids(src_path)?.into_iter() {
            texts.insert(id, text);
        }
        for (id, text) in parse_mono_ids(tgt_path)?.into_iter() {
            texts.insert(id, text);
        }
        let lookup = |id: &str| texts.get(id).cloned();
        let mut scorer = ProcessScorer::new(cmd.clone());
        second_stage_rescore(&pairs, &lookup, &mut scorer)?
    } else {
        let (src_path, tgt_path) = match (&a.source_emb, &a.target_emb) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(CliError::usage(
                    "margin rescoring requires --source-emb and --target-emb",
                ))
            }
        };
        require_file(src_path)?;
        require_file(tgt_path)?;
        let src = load_embeddings(src_path)?;
        let tgt = load_embeddings(tgt_path)?;
        let tgt_index = ExactIndex::build(&tgt)?;
        let src_index = ExactIndex::build(&src)?;
        let variant = match a.variant {
            VariantArg::Bidirectional => RescoreVariant::Bidirectional,
            VariantArg::OneDirectional => RescoreVariant::OneDirectional,
        };
        margin_rescore(
            &pairs,
            &src,
            &tgt,
            Some(&src_index),
            &tgt_index,
            variant,
            a.k,
        )?
    };

    ensure_dir(&a.out)?;
    let mut buf = Vec::new();
    write_candidates(&mut buf, &rescored)?;
    fs::write(a.out.join("candidates.tsv"), buf)?;
    let cfg = toml::Value::try_from(BTreeMap::from([
        ("k".to_string(), toml::Value::Integer(a.k as i64)),
        (
            "mode".to_string(),
            toml::Value::String(if a.command.is_some() {
                "second-stage".into()
            } else {
                match a.variant {
                    VariantArg::Bidirectional => "bidirectional".to_string(),
                    VariantArg::OneDirectional => "one-directional".to_string(),
                }
            }),
        ),
    ]))
    .unwrap();
    echo_config(&a.out, &[("rescore", cfg)])?;
    println!("rescored {} pairs", rescored.len());
    Ok(())
}

/// Report over candidates + gold; empty candidate sets yield a zero report
/// instead of an error.
fn build_report(pairs: &[CandidatePair], gold: &GoldMap, p_at: &[usize]) -> CliResult<EvalReport> {
    let mut rep = EvalReport::default();
    if pairs.is_empty() {
        rep.precision = 1.0;
        for &n in p_at {
            rep.p_at.insert(n, 0.0);
        }
        return Ok(rep);
    }
    let ranked = rank_candidates(pairs);
    let covered: BTreeMap<String, Vec<String>> = ranked
        .into_iter()
        .filter(|(q, _)| gold.contains_key(q))
        .collect();
    for &n in p_at {
        let v = if covered.is_empty() {
            0.0
        } else {
            precision_at_n(&covered, gold, n)?
        };
        rep.p_at.insert(n, v);
    }
    let (tau, p, r, f) = optimize_threshold(pairs, gold)?;
    rep.best_threshold = tau;
    rep.precision = p;
    rep.recall = r;
    rep.f1 = f;
    let (points, ap) = pr_curve_ap(pairs, gold)?;
    rep.pr_points = points;
    rep.average_precision = ap;
    if let Ok((pos, neg)) = cosine_separation(pairs, gold) {
        rep.mean_positive_cosine = pos;
        rep.mean_negative_cosine = neg;
    }
    Ok(rep)
}

fn parse_p_at(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| CliError::usage(format!("bad --p-at value {v:?}")))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    require_file(&a.pairs)?;
    require_file(&a.gold)?;
    let pairs = read_candidates(&a.pairs)?;
    let gold: GoldMap = parse_gold_map(&a.gold)?.into_iter().collect();
    let p_at = parse_p_at(&a.p_at)?;
    let rep = build_report(&pairs, &gold, &p_at)?;
    let mut out = Vec::new();
    rep.write_tsv(&mut out)?;
    print!("{}", String::from_utf8_lossy(&out));
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        fs::write(dir.join("report.tsv"), &out)?;
        let mut csv = Vec::new();
        rep.write_pr_csv(&mut csv)?;
        fs::write(dir.join("pr_curve.csv"), csv)?;
        let cfg = toml::Value::try_from(BTreeMap::from([(
            "p_at".to_string(),
            toml::Value::String(a.p_at.clone()),
        )]))
        .unwrap();
        echo_config(dir, &[("eval", cfg)])?;
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let cand_path = a.dir.join("candidates.tsv");
    let gold_path = a.dir.join("gold.tsv");
    require_file(&cand_path)?;
    require_file(&gold_path)?;
    let pairs = read_candidates(&cand_path)?;
    let gold: GoldMap = parse_gold_map(&gold_path)?.into_iter().collect();
    let rep = build_report(&pairs, &gold, &[1])?;
    let mut tsv = Vec::new();
    rep.write_tsv(&mut tsv)?;
    fs::write(a.dir.join("report.tsv"), tsv)?;
    let mut csv = Vec::new();
    rep.write_pr_csv(&mut csv)?;
    fs::write(a.dir.join("pr_curve.csv"), csv)?;

    // margin sweep rows come from margin_<value>/candidates.tsv subdirectories
    let mut sweep: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(&a.dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for sub in entries {
        let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(mval) = name.strip_prefix("margin_") else {
            continue;
        };
        let Ok(m) = mval.parse::<f64>() else {
            return Err(CliError::data(format!(
                "bad margin directory name: {name}"
            )));
        };
        let sub_cands = sub.join("candidates.tsv");
        require_file(&sub_cands)?;
        let sub_pairs = read_candidates(&sub_cands)?;
        let sub_rep = build_report(&sub_pairs, &gold, &[1])?;
        sweep.push((
            m,
            sub_rep.f1,
            sub_rep.mean_positive_cosine,
            sub_rep.mean_negative_cosine,
        ));
    }
    if !sweep.is_empty() {
        sweep.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut csv = String::from("margin,f1,mean_pos,mean_neg\n");
        for (m, f1, pos, neg) in sweep {
            csv.push_str(&format!("{m},{f1},{pos},{neg}\n"));
        }
        fs::write(a.dir.join("margin_sweep.csv"), csv)?;
    }
    println!("report written to {}", a.dir.display());
    Ok(())
}
