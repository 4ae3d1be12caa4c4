//! `knn-tts` command-line front end.
//!
//! Exit status is 0 on success, 1 on I/O failure and 2 on invalid input or
//! arguments. A failure prints one line to stderr:
//!
//! ```text
//! error: kind=<snake_case_kind> message=<human readable text>
//! ```
//!
//! Every command writes a run manifest next to its main output recording the
//! tool version, the fully resolved arguments, the seeds used and the
//! SHA-256 of every input file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use knn_tts::eval::{
    ablation_run, aggregate_ci, cell_means, centroid_embedding, lambda_sweep_with, proxy_secs,
    similarity_matrix, write_ablation_csv, AblationConfig, EmbeddingSet, ExternalScores,
    SplitPolicy, PROXY_SECS_METRIC,
};
use knn_tts::features::DatabaseManifest;
use knn_tts::index::DEFAULT_BLOCK_SIZE;
use knn_tts::retrieval::{check_lambda, DEFAULT_K, DEFAULT_LAMBDA};
use knn_tts::synth::{generate, SynthConfig};
use knn_tts::{
    build_index, convert_with, load_database, load_features, save_database, save_features,
    subset_database, ConversionSpec, Error, FeatureSequence, SubsetSpec, UnitDatabase,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

type Result<T> = knn_tts::Result<T>;

#[derive(Parser, Debug)]
#[command(
    name = "knn-tts",
    version,
    about = "kNN unit selection and evaluation over SSL speech features"
)]
pub struct Cli {
    /// Maximum worker threads. 0 uses one per available core. Outputs do not
    /// depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Consolidate the KNNF files of a manifest into one unit database.
    BuildDb(BuildDbArgs),
    /// Replace every source frame with the mean of its k nearest database units.
    Convert(ConvertArgs),
    /// Convert one source at several interpolation weights.
    Sweep(SweepArgs),
    /// Mean pairwise SECS between embedding groups.
    SecsMatrix(SecsMatrixArgs),
    /// Proxy SECS as a function of reference database duration.
    Ablate(AblateArgs),
    /// Draw a seeded random subset of a database by duration.
    SubsetDb(SubsetDbArgs),
    /// Write a synthetic multi-speaker feature corpus with known labels.
    GenSynth(GenSynthArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct BuildDbArgs {
    /// Database manifest: {"speaker_id": ..., "files": [...]}.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest (.json); the unit file is written beside it as .knnf.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ConvertArgs {
    /// Source features (KNNF).
    #[arg(long)]
    pub source: PathBuf,
    /// Target database: a manifest (.json) or a single KNNF file.
    #[arg(long)]
    pub db: PathBuf,
    /// Output KNNF path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Weight of the selected units; 0 returns the source unchanged.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Also write the chosen neighbors as CSV `t,rank,db_row,distance`.
    #[arg(long)]
    pub emit_neighbors: Option<PathBuf>,
    /// Database rows per scan block (speed only).
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub db: PathBuf,
    /// Output directory for `lambda_<λ>.knnf` files and `sweep.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
    pub block_size: usize,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
pub enum PolicyArg {
    #[value(name = "half_AB")]
    #[serde(rename = "half_AB")]
    HalfAb,
    #[value(name = "full")]
    #[serde(rename = "full")]
    Full,
}

#[derive(Args, Debug, Serialize)]
pub struct SecsMatrixArgs {
    /// Embedding set JSON files, one per group, in matrix order.
    #[arg(long = "set", required = true, num_args = 1..)]
    pub sets: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyArg::HalfAb)]
    pub policy: PolicyArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    /// Source utterances: KNNF files or database manifests.
    #[arg(long = "source", required = true, num_args = 1..)]
    pub sources: Vec<PathBuf>,
    /// Full target database.
    #[arg(long)]
    pub db: PathBuf,
    /// Reference durations in seconds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub durations: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Per-utterance external scores, CSV `utterance_id,metric_name,value`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output CSV `duration_s,seed,utterance_id,metric_name,value`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SubsetDbArgs {
    #[arg(long)]
    pub db: PathBuf,
    #[arg(long)]
    pub duration: f64,
    #[arg(long)]
    pub seed: u64,
    /// Output manifest (.json).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub seed: u64,
    /// Generator settings as JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    command: &'a str,
    args: Value,
    seeds: Vec<u64>,
    input_hashes: BTreeMap<String, String>,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                // --help and --version
                return EXIT_OK;
            }
            let first = e.to_string().lines().next().unwrap_or_default().to_owned();
            let message = first.strip_prefix("error: ").unwrap_or(&first).to_owned();
            eprintln!("error: kind=usage message={message}");
            return EXIT_INVALID;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

pub fn error_line(e: &Error) -> String {
    let message = e.to_string().replace('\n', " ");
    format!("error: kind={} message={message}", e.kind())
}

pub fn run(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::BuildDb(a) => build_db(a, cli.threads),
        Command::Convert(a) => convert_cmd(a, cli.threads),
        Command::Sweep(a) => sweep(a, cli.threads),
        Command::SecsMatrix(a) => secs_matrix(a, cli.threads),
        Command::Ablate(a) => ablate(a, cli.threads),
        Command::SubsetDb(a) => subset_db(a, cli.threads),
        Command::GenSynth(a) => gen_synth(a, cli.threads),
    })
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The file itself plus, for a database manifest, every file it lists.
fn input_files(path: &Path) -> Vec<PathBuf> {
    let mut out = vec![path.to_owned()];
    if is_json(path) {
        if let Ok(m) = DatabaseManifest::load(path) {
            out.extend(m.resolved_files(path));
        }
    }
    out
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for p in paths {
        for f in input_files(p) {
            let h = sha256_file(&f)?;
            hashes.insert(f.display().to_string(), h);
        }
    }
    Ok(hashes)
}

fn is_json(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// `out.knnf` -> `out.run.json`; a directory gets `run.json` inside it.
fn run_manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        out.with_extension("run.json")
    }
}

fn write_run_manifest<A: Serialize>(
    path: &Path,
    command: &str,
    args: &A,
    threads: usize,
    seeds: Vec<u64>,
    input_hashes: BTreeMap<String, String>,
) -> Result<()> {
    let mut args = serde_json::to_value(args).expect("arguments serialize");
    if let Value::Object(map) = &mut args {
        map.insert("threads".into(), threads.into());
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command,
        args,
        seeds,
        input_hashes,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(path, &text)
}

fn require_json_out(out: &Path) -> Result<()> {
    if is_json(out) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "database output must be a .json manifest path, got {}",
            out.display()
        )))
    }
}

fn check_block_size(bs: usize) -> Result<()> {
    if bs == 0 {
        Err(Error::InvalidBlockSize(bs))
    } else {
        Ok(())
    }
}

fn describe(db: &UnitDatabase) -> String {
    format!(
        "N={} D={} duration_s={}",
        db.len(),
        db.dim(),
        db.duration_seconds()
    )
}

/// Loads utterances from a KNNF file, or every utterance of a database
/// manifest in database order.
fn load_sequences(path: &Path) -> Result<Vec<FeatureSequence>> {
    if !is_json(path) {
        return Ok(vec![load_features(path)?]);
    }
    let db = load_database(path)?;
    db.utterances()
        .iter()
        .map(|u| {
            let values = db.as_slice()[u.start * db.dim()..(u.start + u.len) * db.dim()].to_vec();
            FeatureSequence::new(values, db.dim(), db.frame_rate_hz(), u.source_id.clone())
        })
        .collect()
}

fn build_db(a: &BuildDbArgs, threads: usize) -> Result<()> {
    require_json_out(&a.out)?;
    let db = load_database(&a.manifest)?;
    save_database(&db, &a.out)?;
    let hashes = hash_inputs(&[&a.manifest])?;
    write_run_manifest(
        &run_manifest_path(&a.out, false),
        "build-db",
        a,
        threads,
        vec![],
        hashes,
    )?;
    println!("{}", describe(&db));
    Ok(())
}

fn convert_cmd(a: &ConvertArgs, threads: usize) -> Result<()> {
    let spec = ConversionSpec::new(a.k, a.lambda)?;
    check_block_size(a.block_size)?;
    let source = load_features(&a.source)?;
    let db = load_database(&a.db)?;
    let index = build_index(&db, a.block_size)?;
    let result = convert_with(&source, &db, &index, &spec)?;
    save_features(&result.converted, &a.out)?;
    if let Some(path) = &a.emit_neighbors {
        let mut csv = String::from("t,rank,db_row,distance\n");
        for t in 0..result.neighbors.len() {
            let rows = result.neighbors.rows(t);
            let dists = result.neighbors.distances(t);
            for (rank, (r, d)) in rows.iter().zip(dists).enumerate() {
                writeln!(csv, "{t},{rank},{r},{d}").expect("string write");
            }
        }
        write_text(path, &csv)?;
    }
    let hashes = hash_inputs(&[&a.source, &a.db])?;
    write_run_manifest(
        &run_manifest_path(&a.out, false),
        "convert",
        a,
        threads,
        vec![],
        hashes,
    )?;
    println!(
        "T={} D={} k={} lambda={}",
        source.len(),
        source.dim(),
        spec.k,
        spec.lambda
    );
    Ok(())
}

fn sweep(a: &SweepArgs, threads: usize) -> Result<()> {
    if a.lambdas.is_empty() {
        return Err(Error::Empty("no lambdas"));
    }
    for &l in &a.lambdas {
        check_lambda(l)?;
    }
    ConversionSpec::new(a.k, DEFAULT_LAMBDA)?;
    check_block_size(a.block_size)?;
    let source = load_features(&a.source)?;
    let db = load_database(&a.db)?;
    let index = build_index(&db, a.block_size)?;
    let results = lambda_sweep_with(&source, &db, &index, a.k, &a.lambdas)?;
    let target = centroid_embedding(&db);
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    let mut csv = String::from("lambda,proxy_secs\n");
    for (l, r) in &results {
        save_features(&r.converted, a.out_dir.join(format!("lambda_{l}.knnf")))?;
        let s = proxy_secs(&r.converted, &target)?;
        writeln!(csv, "{l},{s}").expect("string write");
        println!("lambda={l} proxy_secs={s}");
    }
    write_text(&a.out_dir.join("sweep.csv"), &csv)?;
    let hashes = hash_inputs(&[&a.source, &a.db])?;
    write_run_manifest(
        &run_manifest_path(&a.out_dir, true),
        "sweep",
        a,
        threads,
        vec![],
        hashes,
    )
}

fn secs_matrix(a: &SecsMatrixArgs, threads: usize) -> Result<()> {
    let policy = match a.policy {
        PolicyArg::HalfAb => SplitPolicy::HalfAB,
        PolicyArg::Full => SplitPolicy::Full,
    };
    let groups = a
        .sets
        .iter()
        .map(EmbeddingSet::load)
        .collect::<Result<Vec<_>>>()?;
    let report = similarity_matrix(&groups, policy)?;
    report.save(&a.out)?;
    for (label, row) in report.labels.iter().zip(&report.matrix) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{label}\t{}", cells.join("\t"));
    }
    let inputs: Vec<&Path> = a.sets.iter().map(PathBuf::as_path).collect();
    let hashes = hash_inputs(&inputs)?;
    write_run_manifest(
        &run_manifest_path(&a.out, false),
        "secs-matrix",
        a,
        threads,
        vec![],
        hashes,
    )
}

fn ablate(a: &AblateArgs, threads: usize) -> Result<()> {
    ConversionSpec::new(a.k, a.lambda)?;
    if a.durations.is_empty() || a.seeds.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    for &d in &a.durations {
        SubsetSpec::new(d, 0)?;
    }
    let mut sources = Vec::new();
    for p in &a.sources {
        sources.extend(load_sequences(p)?);
    }
    let db = load_database(&a.db)?;
    let scores = a.scores.as_ref().map(ExternalScores::load).transpose()?;
    let config = AblationConfig {
        durations: a.durations.clone(),
        seeds: a.seeds.clone(),
        k: a.k,
        lambda: a.lambda,
    };
    let rows = ablation_run(&sources, &db, &config, scores.as_ref())?;
    let mut bytes = Vec::new();
    write_ablation_csv(&rows, &mut bytes)?;
    fs::write(&a.out, bytes).map_err(|e| io_err(&a.out, e))?;

    // per-duration summary over seeds
    let means = cell_means(&rows, PROXY_SECS_METRIC);
    for &d in &a.durations {
        let per_seed: Vec<f64> = a
            .seeds
            .iter()
            .filter_map(|s| means.get(&(d.to_bits(), *s)).copied())
            .collect();
        let ci = aggregate_ci(&per_seed)?;
        println!(
            "duration_s={d} proxy_secs={:.6} ci95=±{:.6} n={}",
            ci.mean, ci.halfwidth, ci.n
        );
    }

    let mut inputs: Vec<&Path> = a.sources.iter().map(PathBuf::as_path).collect();
    inputs.push(&a.db);
    if let Some(s) = &a.scores {
        inputs.push(s);
    }
    let hashes = hash_inputs(&inputs)?;
    write_run_manifest(
        &run_manifest_path(&a.out, false),
        "ablate",
        a,
        threads,
        a.seeds.clone(),
        hashes,
    )
}

fn subset_db(a: &SubsetDbArgs, threads: usize) -> Result<()> {
    let spec = SubsetSpec::new(a.duration, a.seed)?;
    require_json_out(&a.out)?;
    let db = load_database(&a.db)?;
    let sub = subset_database(&db, &spec)?;
    save_database(&sub, &a.out)?;
    let hashes = hash_inputs(&[&a.db])?;
    write_run_manifest(
        &run_manifest_path(&a.out, false),
        "subset-db",
        a,
        threads,
        vec![a.seed],
        hashes,
    )?;
    println!("{}", describe(&sub));
    Ok(())
}

fn gen_synth(a: &GenSynthArgs, threads: usize) -> Result<()> {
    let mut config: SynthConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                what: "synthetic config",
                path: p.clone(),
                message: e.to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    config.seed = a.seed;
    config.validate()?;
    let data = generate(&config)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    for (s, utts) in data.speakers.iter().enumerate() {
        let speaker = format!("spk{s:02}");
        let dir = a.out_dir.join(&speaker);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let mut files = Vec::with_capacity(utts.len());
        for u in utts {
            let name = format!("{}.knnf", u.source_id());
            save_features(u, dir.join(&name))?;
            files.push(format!("{speaker}/{name}"));
        }
        let manifest = DatabaseManifest {
            speaker_id: speaker.clone(),
            files,
            utterances: None,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_text(&a.out_dir.join(format!("{speaker}.json")), &text)?;
    }
    let truth = serde_json::to_string(&data.truth).expect("truth serializes") + "\n";
    write_text(&a.out_dir.join("truth.json"), &truth)?;
    let cfg = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
    write_text(&a.out_dir.join("config.json"), &cfg)?;
    let hashes = match &a.config {
        Some(p) => hash_inputs(&[p])?,
        None => BTreeMap::new(),
    };
    write_run_manifest(
        &run_manifest_path(&a.out_dir, true),
        "gen-synth",
        a,
        threads,
        vec![a.seed],
        hashes,
    )?;
    println!(
        "speakers={} utterances_per_speaker={} frames_per_utterance={} dim={}",
        config.n_speakers, config.utterances_per_speaker, config.frames_per_utterance, config.dim
    );
    Ok(())
}
