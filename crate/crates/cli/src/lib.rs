// SPDX-License-Identifier: Apache-2.0

//! The `easa` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
//! Errors print a single diagnostic line to standard error.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use easa_core::augment::{sample_field, warp};
use easa_core::embedding::{init_codebook, PositionTable, DEFAULT_MAX_LEN};
use easa_core::entropy::build_entropy_table_with;
use easa_core::experiment::gradcheck_suite;
use easa_core::ids::{format_tree, ingest_ids_table, parse_ids_open, serialize_ids, RadicalTree, RadicalVocab};
use easa_core::image::GrayImage;
use easa_core::matching::rank_fused;
use easa_core::parallel::{configure, threads_from_env, Parallelism};
use easa_core::structure::build_codebook;
use easa_core::synth::{emit_dataset, load_dataset, synthesize, AugmentSpec, Dataset, SplitKind, SynthSpec};
use easa_core::train::{
    encode_image, evaluate, fewshot_unseen, fused_codebook, k_sweep, k_sweep_table, load_checkpoint, loss_csv,
    save_checkpoint, train, Dictionary, EncoderKind, LossConfig, Model, ModelMeta, TrainConfig, K_SWEEP,
};

use crate::config::Config;

/// Rejection threshold of the finite-difference check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "easa", version, about = "Entropy-aware structural alignment pipelines")]
pub struct Cli {
    /// key = value configuration file
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output file or directory
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the annotated radical tree of an IDS string
    Parse { ids: String },
    /// Read an IDS table and write `label<TAB>ids` for every parsed record
    Ingest { table: PathBuf },
    /// Write the radical entropy CSV of an IDS table or dataset directory
    Entropy { input: PathBuf },
    /// Write the prototype codebook of an IDS table or dataset directory
    BuildDict(BuildDictArgs),
    /// Emit a synthetic dataset directory
    Synth(SynthArgs),
    /// Elastically warp one PGM image
    Augment(AugmentArgs),
    /// Train on the seen split of a dataset
    Train(TrainArgs),
    /// Evaluate a trained model on one split
    Eval(EvalArgs),
    /// Few-shot evaluation on the unseen split
    Fewshot(FewshotArgs),
    /// Rank the classes of a dataset for one image
    Match(MatchArgs),
    /// Finite-difference gradient check
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct BuildDictArgs {
    pub input: PathBuf,
    /// Also write the JSON-lines dump here
    #[arg(long, value_name = "PATH")]
    pub jsonl: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Samples per class
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    /// Glyph side in pixels
    #[arg(long, default_value_t = 32)]
    pub canvas: usize,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Control-point offset std in pixels; defaults to the configured sigma
    #[arg(long)]
    pub sigma: Option<f64>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelOptions {
    /// Mini-batch size
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Attention heads
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Patch encoder variant
    #[arg(long, default_value_t = EncoderKind::default())]
    pub encoder: EncoderKind,
    /// Feed GateFusion with the structure code only
    #[arg(long)]
    pub code_only: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelOptions,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Seen,
    Unseen,
}

impl From<SplitArg> for SplitKind {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Seen => SplitKind::Seen,
            SplitArg::Unseen => SplitKind::Unseen,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Unseen)]
    pub split: SplitArg,
    /// Write the unseen accuracy table over K = 1, 2, 3, 5, 7 instead
    #[arg(long)]
    pub k_sweep: bool,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    pub dataset: PathBuf,
    pub model: PathBuf,
    /// Support samples per unseen class
    #[arg(long, default_value_t = 1)]
    pub support: usize,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    pub image: PathBuf,
    /// Trained model directory
    #[arg(long, value_name = "DIR")]
    pub model: PathBuf,
    /// Dataset directory providing the class dictionary
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Restrict candidates to one split
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Embedding dimension of the checked model
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Check(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Check(m) => m,
        }
    }
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Output streams of one invocation.
pub struct Streams<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

/// Parses `argv` (program name first) and runs one subcommand against the
/// process streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    run_with(
        argv,
        &mut Streams {
            out: &mut out,
            err: &mut err,
        },
    )
}

pub fn run_with<I, T>(argv: I, io: &mut Streams) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let sink = if e.use_stderr() { &mut io.err } else { &mut io.out };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let code = match execute(cli, io) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(io.err, "easa: {}", f.message());
            f.code()
        }
    };
    let _ = io.out.flush();
    code
}

pub fn execute(cli: Cli, io: &mut Streams) -> Outcome {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let par = configure(threads_from_env());
    let out = cli.out.as_deref();
    match cli.command {
        Command::Parse { ids } => cmd_parse(&ids, out, io),
        Command::Ingest { table } => cmd_ingest(&table, out, io),
        Command::Entropy { input } => cmd_entropy(&input, out, par, io),
        Command::BuildDict(a) => cmd_build_dict(&a, &cfg, out, par, io),
        Command::Synth(a) => cmd_synth(&a, &cfg, out, par, io),
        Command::Augment(a) => cmd_augment(&a, &cfg),
        Command::Train(a) => cmd_train(&a, &cfg, out, par, io),
        Command::Eval(a) => cmd_eval(&a, &cfg, out, par, io),
        Command::Fewshot(a) => cmd_fewshot(&a, &cfg, out, par, io),
        Command::Match(a) => cmd_match(&a, &cfg, out, par, io),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &cfg, io),
    }
}

/// Writes to `out` when given, else to the output stream.
fn emit(out: Option<&Path>, body: &str, io: &mut Streams) -> Outcome {
    match out {
        Some(p) => fs::write(p, body).map_err(|e| Failure::Data(format!("cannot write {}: {e}", p.display()))),
        None => Ok(io.out.write_all(body.as_bytes())?),
    }
}

fn cmd_parse(ids: &str, out: Option<&Path>, io: &mut Streams) -> Outcome {
    let mut vocab = RadicalVocab::new();
    let tree = parse_ids_open(ids, &mut vocab)?;
    emit(out, &format_tree(&tree), io)
}

fn cmd_ingest(table: &Path, out: Option<&Path>, io: &mut Streams) -> Outcome {
    let t = ingest_ids_table(table, None)?;
    for r in &t.rejected {
        writeln!(io.err, "line {}: {} {}: {}", r.line, r.label, r.ids, r.error)?;
    }
    writeln!(io.err, "{} records, {} rejected", t.records.len(), t.rejected.len())?;
    let mut body = String::new();
    for r in &t.records {
        body.push_str(&format!("{}\t{}\n", r.label, serialize_ids(&r.tree)));
    }
    emit(out, &body, io)
}

/// Labelled trees and vocabulary of a dataset directory or IDS table.
fn load_corpus(input: &Path) -> Result<(Vec<(String, RadicalTree)>, RadicalVocab), Failure> {
    if input.is_dir() {
        let ds = load_dataset(input)?;
        return Ok((ds.classes, ds.vocab));
    }
    let t = ingest_ids_table(input, None)?;
    if let Some(r) = t.rejected.first() {
        return Err(Failure::Data(format!(
            "{} line {}: {}",
            input.display(),
            r.line,
            r.error
        )));
    }
    Ok((t.records.into_iter().map(|r| (r.label, r.tree)).collect(), t.vocab))
}

fn cmd_entropy(input: &Path, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let (corpus, _) = load_corpus(input)?;
    let trees: Vec<RadicalTree> = corpus.into_iter().map(|(_, t)| t).collect();
    let table = build_entropy_table_with(&trees, par)?;
    emit(out, &table.to_csv(), io)
}

fn cmd_build_dict(a: &BuildDictArgs, cfg: &Config, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let (corpus, vocab) = load_corpus(&a.input)?;
    let trees: Vec<RadicalTree> = corpus.iter().map(|(_, t)| t.clone()).collect();
    let etable = build_entropy_table_with(&trees, par)?;
    let embeddings = init_codebook(&vocab, cfg.dim, cfg.seed)?;
    let ptable = PositionTable::init(DEFAULT_MAX_LEN, cfg.dim, cfg.seed);
    let book = build_codebook(&corpus, &embeddings, &ptable, &etable, par)?;
    let path = out.unwrap_or(Path::new("codebook.easa"));
    book.save(path)?;
    if let Some(j) = &a.jsonl {
        let body = book.to_container().to_jsonl();
        fs::write(j, body).map_err(|e| Failure::Data(format!("cannot write {}: {e}", j.display())))?;
    }
    writeln!(io.err, "{} prototypes, dim {}", book.len(), book.dim())?;
    Ok(())
}

fn augment_spec(cfg: &Config) -> AugmentSpec {
    AugmentSpec {
        grid_w: cfg.grid_w,
        grid_h: cfg.grid_h,
        sigma: cfg.sigma,
        ..AugmentSpec::default()
    }
}

fn cmd_synth(a: &SynthArgs, cfg: &Config, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let spec = SynthSpec {
        n_radicals: cfg.n_radicals,
        n_classes: cfg.n_classes,
        zipf_exponent: cfg.zipf_exponent,
        canvas: a.canvas,
        seed: cfg.seed,
        ..SynthSpec::default()
    };
    let ds = synthesize(&spec, cfg.seen_fraction, a.per_class, &augment_spec(cfg), par)?;
    let dir = out.unwrap_or(Path::new("dataset"));
    emit_dataset(&ds, dir)?;
    writeln!(
        io.err,
        "{} classes ({} seen, {} unseen), {} samples in {}",
        ds.classes.len(),
        ds.split.seen.len(),
        ds.split.unseen.len(),
        ds.samples.len(),
        dir.display()
    )?;
    Ok(())
}

fn cmd_augment(a: &AugmentArgs, cfg: &Config) -> Outcome {
    let sigma = a.sigma.unwrap_or(cfg.sigma);
    let img = GrayImage::load_pgm(&a.input)?;
    let field = sample_field(cfg.grid_w, cfg.grid_h, sigma, cfg.seed)?;
    warp(&img, &field)?.save_pgm(&a.output)?;
    Ok(())
}

fn train_config(cfg: &Config, m: &ModelOptions) -> TrainConfig {
    TrainConfig {
        dim: cfg.dim,
        heads: m.heads,
        epochs: cfg.epochs,
        batch: m.batch,
        lr: cfg.lr,
        tau: cfg.tau,
        k: cfg.k,
        metric: cfg.metric,
        seed: cfg.seed,
        code_only: m.code_only,
        encoder: m.encoder,
    }
}

fn cmd_train(a: &TrainArgs, cfg: &Config, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let tcfg = train_config(cfg, &a.model);
    tcfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = load_dataset(&a.dataset)?;
    let dict = Dictionary::from_dataset(&ds, tcfg.dim, tcfg.seed)?;
    let result = train(&ds, &dict, &tcfg, par)?;
    let dir = out.unwrap_or(Path::new("model"));
    save_checkpoint(&result.model, &ModelMeta::of(&result.model, &tcfg), dir)?;
    let csv = dir.join("loss.csv");
    fs::write(&csv, loss_csv(&result.losses))
        .map_err(|e| Failure::Data(format!("cannot write {}: {e}", csv.display())))?;
    if let (Some(first), Some(last)) = (result.losses.first(), result.losses.last()) {
        writeln!(io.err, "loss {:.6} -> {:.6} over {} epochs", first.1, last.1, last.0)?;
    }
    Ok(())
}

/// Dataset, its dictionary and a trained model.
fn load_run(dataset: &Path, model: &Path) -> Result<(Dataset, Dictionary, Model), Failure> {
    let ds = load_dataset(dataset)?;
    let (model, meta) = load_checkpoint(model)?;
    let dict = Dictionary::from_dataset(&ds, meta.dim, meta.seed)?;
    Ok((ds, dict, model))
}

fn loss_config(cfg: &Config) -> LossConfig {
    LossConfig {
        k: cfg.k,
        metric: cfg.metric,
        tau: cfg.tau,
    }
}

fn cmd_eval(a: &EvalArgs, cfg: &Config, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let (ds, dict, model) = load_run(&a.dataset, &a.model)?;
    if a.k_sweep {
        let rows = k_sweep(&model, &ds, &dict, &K_SWEEP, cfg.metric, cfg.tau, par)?;
        return emit(out, &k_sweep_table(&rows), io);
    }
    let report = evaluate(&model, &ds, &dict, a.split.into(), &loss_config(cfg), par)?;
    writeln!(
        io.err,
        "top1 {:.4} top5 {:.4} over {} samples",
        report.top1, report.top5, report.samples
    )?;
    emit(out, &report.to_json(), io)
}

fn cmd_fewshot(a: &FewshotArgs, cfg: &Config, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let (ds, dict, model) = load_run(&a.dataset, &a.model)?;
    let report = fewshot_unseen(
        &model,
        &ds,
        &dict,
        a.support,
        cfg.lambda_fewshot,
        &loss_config(cfg),
        par,
    )?;
    writeln!(
        io.err,
        "top1 {:.4} top5 {:.4} over {} queries",
        report.top1, report.top5, report.samples
    )?;
    emit(out, &report.to_json(), io)
}

fn cmd_match(a: &MatchArgs, cfg: &Config, out: Option<&Path>, par: Parallelism, io: &mut Streams) -> Outcome {
    let (ds, dict, model) = load_run(&a.dataset, &a.model)?;
    let labels: Vec<String> = match a.split {
        Some(SplitArg::Seen) => ds.split.seen.clone(),
        Some(SplitArg::Unseen) => ds.split.unseen.clone(),
        None => ds.classes.iter().map(|(l, _)| l.clone()).collect(),
    };
    let img = GrayImage::load_pgm(&a.image)?;
    let visual = encode_image(&img, &model.encoder)?;
    let candidates = fused_codebook(&model, &dict, &labels, par)?;
    let result = rank_fused(&visual, &candidates, &model.head.attention, cfg.k, cfg.metric)?;
    let mut body = String::from("rank\tlabel\tcoarse\trefined\tfinal\n");
    for (i, r) in result.ranked.iter().take(10).enumerate() {
        let refined = r.refined.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        body.push_str(&format!(
            "{}\t{}\t{:.6}\t{refined}\t{:.6}\n",
            i + 1,
            r.label,
            r.coarse,
            r.score
        ));
    }
    emit(out, &body, io)
}

fn cmd_gradcheck(a: &GradcheckArgs, cfg: &Config, io: &mut Streams) -> Outcome {
    let report = gradcheck_suite(a.dim, cfg.seed)?;
    for t in &report.tensors {
        writeln!(io.out, "{}\t{}\t{:.3e}", t.tensor, t.checked, t.max_rel_err)?;
    }
    if report.max_rel_err < GRADCHECK_TOLERANCE {
        writeln!(io.out, "max_rel_err {:.3e} < 1e-4", report.max_rel_err)?;
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max_rel_err {:.3e} >= 1e-4",
            report.max_rel_err
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let argv = std::iter::once("easa").chain(args.iter().copied());
        let code = run_with(
            argv,
            &mut Streams {
                out: &mut out,
                err: &mut err,
            },
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn parse_prints_five_nodes() {
        let (code, out, _) = call(&["parse", "⿰氵⿱穴木"]);
        assert_eq!(code, 0);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(
            lines,
            [
                "⿰ LeftRight depth=0 pos=0",
                "  氵 Radical depth=1 pos=1",
                "  ⿱ AboveBelow depth=1 pos=2",
                "    穴 Radical depth=2 pos=1",
                "    木 Radical depth=2 pos=2",
            ]
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(call(&["parse", "⿰氵"]).0, 2);
        assert_eq!(call(&["frobnicate"]).0, 1);
        assert_eq!(call(&["parse", "木", "--bogus"]).0, 1);
        assert_eq!(call(&["--help"]).0, 0);
        let (code, _, err) = call(&["entropy", "/nonexistent/table.tsv"]);
        assert_eq!(code, 2);
        assert_eq!(err.lines().count(), 1);
    }

    #[test]
    fn help_lists_every_flag() {
        let expect: [(&str, &[&str]); 5] = [
            ("synth", &["--per-class", "--canvas", "--config", "--seed", "--out"]),
            ("augment", &["--sigma"]),
            ("train", &["--batch", "--heads", "--encoder", "--code-only"]),
            ("eval", &["--split", "--k-sweep"]),
            ("match", &["--model", "--dataset", "--split"]),
        ];
        for (cmd, flags) in expect {
            let (code, out, _) = call(&[cmd, "--help"]);
            assert_eq!(code, 0);
            for f in flags {
                assert!(out.contains(f), "{cmd} --help lacks {f}");
            }
        }
    }

    #[test]
    fn config_file_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.cfg");
        fs::write(&bad, "dim = 8\nwidth = 3\n").unwrap();
        let (code, _, err) = call(&["--config", bad.to_str().unwrap(), "parse", "木"]);
        assert_eq!(code, 1);
        assert!(err.contains("width"));
    }

    #[test]
    fn augment_zero_sigma_copies() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        let mut img = GrayImage::new(32, 32);
        for i in 4..28 {
            img.set(i, 15, 255);
        }
        img.save_pgm(&a).unwrap();
        let (code, _, _) = call(&["augment", "--sigma", "0", a.to_str().unwrap(), b.to_str().unwrap()]);
        assert_eq!(code, 0);
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn gradcheck_passes_at_dim_8() {
        let (code, out, _) = call(&["gradcheck", "--dim", "8", "--seed", "42"]);
        assert_eq!(code, 0);
        assert!(out.lines().last().unwrap().ends_with("< 1e-4"));
    }
}
