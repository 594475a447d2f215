//! Command-line entry point: prepare, train, ablate, summarize, baseline,
//! evaluate, evaluate-bws, evaluate-support, grad-check. Every run writes a
//! RunManifest next to its outputs. Exit codes: 0 success, 1 runtime
//! failure, 2 usage error.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::corpus::{self, FilterOptions, SourceGroup, Vocabulary};
use crate::generate::{GenerationMode, SummarizeOptions, Summarizer};
use crate::metrics;
use crate::model::{Ablation, Checkpoint};
use crate::objective::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "copycat",
    version,
    about = "Unsupervised abstractive opinion summarization over review groups"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize, filter, and index a raw review corpus.
    Prepare {
        /// Raw groups as JSON Lines.
        #[arg(long)]
        input: PathBuf,
        /// Directory for groups.jsonl and vocab.txt.
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_reviews: usize,
        /// Minimum review length in tokens, exclusive bounds applied inclusively.
        #[arg(long, default_value_t = 20)]
        min_len: usize,
        #[arg(long, default_value_t = 70)]
        max_len: usize,
        /// Popularity percentile above which groups are dropped.
        #[arg(long, default_value_t = 90.0)]
        pop_pct: f64,
        #[arg(long, default_value_t = 50_000)]
        vocab_size: usize,
        #[arg(long, default_value_t = 30_000)]
        max_extended: usize,
    },
    /// Train the full model.
    Train {
        /// TOML training config.
        #[arg(long)]
        config: PathBuf,
        /// Prepared groups as JSON Lines.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        /// Optional prepared vocabulary; built from the data when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Train an ablated variant.
    Ablate {
        #[arg(long)]
        variant: Ablation,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Generate consensus summaries from a checkpoint.
    Summarize {
        #[arg(long)]
        model: PathBuf,
        /// Groups to summarize as JSON Lines.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "mean")]
        mode: GenerationMode,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 80)]
        max_len: usize,
        /// Required when --mode sample.
        #[arg(long, required_if_eq("mode", "sample"))]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an extractive baseline.
    Baseline {
        #[arg(long)]
        method: BaselineMethod,
        #[arg(long)]
        input: PathBuf,
        /// References as JSON Lines (oracle only).
        #[arg(long)]
        refs: Option<PathBuf>,
        /// Required for --method random.
        #[arg(long, required_if_eq("method", "random"))]
        seed: Option<u64>,
        /// LexRank token budget; defaults to the group's mean review length.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0.85)]
        damping: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score candidate summaries against references with ROUGE.
    Evaluate {
        /// JSON Lines: {"group_id", "system", "summary"}.
        #[arg(long)]
        candidates: PathBuf,
        /// JSON Lines: {"group_id", "references": [...]}.
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate best-worst-scaling judgments.
    EvaluateBws {
        /// JSON Lines: {"item_id", "systems", "best", "worst"}.
        #[arg(long)]
        judgments: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate content-support labels.
    EvaluateSupport {
        /// One label per line: full, partial, or no.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check model gradients against central finite differences.
    GradCheck {
        /// Use the built-in tiny configuration (the only mode).
        #[arg(long, default_value_t = true)]
        tiny: bool,
        /// Central-difference step; the default sits in the window where
        /// neither truncation nor f64 cancellation dominates.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum BaselineMethod {
    Clustroid,
    Lead,
    Random,
    Oracle,
    Lexrank,
}

impl BaselineMethod {
    fn name(self) -> &'static str {
        match self {
            BaselineMethod::Clustroid => "clustroid",
            BaselineMethod::Lead => "lead",
            BaselineMethod::Random => "random",
            BaselineMethod::Oracle => "oracle",
            BaselineMethod::Lexrank => "lexrank",
        }
    }
}

impl clap::ValueEnum for GenerationMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[GenerationMode::Mean, GenerationMode::Sample]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            GenerationMode::Mean => "mean",
            GenerationMode::Sample => "sample",
        }))
    }
}

impl clap::ValueEnum for Ablation {
    fn value_variants<'a>() -> &'a [Self] {
        &[Ablation::Full, Ablation::NoAttention, Ablation::NoC, Ablation::NoZ]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            Ablation::Full => "full",
            Ablation::NoAttention => "no_attention",
            Ablation::NoC => "no_c",
            Ablation::NoZ => "no_z",
        }))
    }
}

/// Reproducibility record written next to every run's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub checkpoint_version: u32,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub precision: String,
    pub unix_timestamp: u64,
}

impl RunManifest {
    fn new(args: &[String], subcommand: &str, config: serde_json::Value) -> Self {
        RunManifest {
            command: args.join(" "),
            subcommand: subcommand.to_string(),
            config,
            seed: None,
            checkpoint_version: Checkpoint::version(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            precision: "f64".to_string(),
            unix_timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    fn seeded(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// Writes manifest.json inside `dir` (created if needed).
    fn write_in_dir(mut self, dir: &Path, started: Instant) -> Result<()> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        std::fs::create_dir_all(dir)?;
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }

    /// Writes `<file>.manifest.json` next to a single output file.
    fn write_beside(mut self, file: &Path, started: Instant) -> Result<()> {
        self.wall_clock_seconds = started.elapsed().as_secs_f64();
        let name = format!(
            "{}.manifest.json",
            file.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
        );
        let path = file.with_file_name(name);
        std::fs::write(&path, serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }
}

/// Entry point for the binary.
pub fn run() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    ExitCode::from(dispatch(&args))
}

/// Informational line on stdout unless COPYCAT_LOG=quiet. Result payloads
/// (CSV tables, grad-check verdicts) ignore this and always print.
fn status(message: std::fmt::Arguments<'_>) {
    if std::env::var("COPYCAT_LOG").map(|v| v == "quiet").unwrap_or(false) {
        return;
    }
    println!("{message}");
}

/// Parses and executes; returns the process exit code.
pub fn dispatch(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli.command, args) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn execute(command: Command, args: &[String]) -> Result<u8> {
    let started = Instant::now();
    match command {
        Command::Prepare {
            input,
            output,
            min_reviews,
            min_len,
            max_len,
            pop_pct,
            vocab_size,
            max_extended,
        } => {
            let raw = corpus::read_groups_file(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let records = corpus::tokenize_groups(&raw);
            let opts = FilterOptions {
                min_reviews,
                min_len,
                max_len,
                popularity_pct: pop_pct,
            };
            let kept = corpus::filter_groups(records, &opts);
            if kept.is_empty() {
                bail!("no groups survive filtering");
            }
            let token_seqs: Vec<&[String]> = kept
                .iter()
                .flat_map(|g| g.reviews.iter().map(|r| r.tokens.as_slice()))
                .collect();
            let distinct: std::collections::BTreeSet<&str> = token_seqs
                .iter()
                .flat_map(|seq| seq.iter().map(String::as_str))
                .collect();
            let size = vocab_size
                .min(distinct.len() + corpus::SPECIAL_TOKENS.len())
                .max(corpus::SPECIAL_TOKENS.len());
            let vocab = Vocabulary::build(token_seqs.iter().copied(), size, max_extended)?;
            std::fs::create_dir_all(&output)?;
            let groups_path = output.join("groups.jsonl");
            let vocab_path = output.join("vocab.txt");
            let file = std::fs::File::create(&groups_path)?;
            corpus::write_groups_jsonl(std::io::BufWriter::new(file), &corpus::to_source_groups(&kept))?;
            vocab.save(&vocab_path)?;
            status(format_args!(
                "prepared {} groups, vocabulary size {}",
                kept.len(),
                vocab.size()
            ));
            RunManifest::new(
                args,
                "prepare",
                serde_json::json!({
                    "min_reviews": min_reviews,
                    "min_len": min_len,
                    "max_len": max_len,
                    "pop_pct": pop_pct,
                    "vocab_size": vocab_size,
                    "max_extended": max_extended,
                }),
            )
            .input(&input)
            .output(&groups_path)
            .output(&vocab_path)
            .write_in_dir(&output, started)?;
            Ok(0)
        }
        Command::Train { config, data, out, vocab } => {
            train_command(args, "train", &config, &data, &out, vocab.as_deref(), None, started)
        }
        Command::Ablate { variant, config, data, out, vocab } => train_command(
            args,
            "ablate",
            &config,
            &data,
            &out,
            vocab.as_deref(),
            Some(variant),
            started,
        ),
        Command::Summarize { model, input, mode, beam, max_len, seed, out } => {
            let summarizer = Summarizer::from_path(&model)
                .with_context(|| format!("loading checkpoint {}", model.display()))?;
            let raw = corpus::read_groups_file(&input)?;
            let records = corpus::tokenize_groups(&raw);
            let opts = SummarizeOptions {
                mode,
                seed: seed.unwrap_or(0),
                beam_width: beam.max(1),
                max_len: max_len.max(1),
            };
            let file = std::fs::File::create(&out)?;
            let mut writer = std::io::BufWriter::new(file);
            for record in &records {
                let result = summarizer
                    .summarize(record, &opts)
                    .with_context(|| format!("summarizing group {}", record.group_id))?;
                serde_json::to_writer(&mut writer, &result)?;
                writer.write_all(b"\n")?;
            }
            writer.flush()?;
            status(format_args!("summarized {} groups -> {}", records.len(), out.display()));
            RunManifest::new(
                args,
                "summarize",
                serde_json::json!({
                    "mode": mode.to_string(),
                    "beam": beam,
                    "max_len": max_len,
                    "model": model.display().to_string(),
                }),
            )
            .seeded(seed)
            .input(&model)
            .input(&input)
            .output(&out)
            .write_beside(&out, started)?;
            Ok(0)
        }
        Command::Baseline { method, input, refs, seed, budget, damping, out } => {
            let groups = corpus::read_groups_file(&input)?;
            let references = refs
                .as_deref()
                .map(read_references)
                .transpose()?;
            if method == BaselineMethod::Oracle && references.is_none() {
                bail!("--method oracle requires --refs");
            }
            let file = std::fs::File::create(&out)?;
            let mut writer = std::io::BufWriter::new(file);
            for (index, group) in groups.iter().enumerate() {
                let summary = run_baseline(
                    method,
                    group,
                    references.as_ref(),
                    seed.map(|s| s.wrapping_add(index as u64)),
                    budget,
                    damping,
                )?;
                let line = CandidateLine {
                    group_id: group.group_id.clone(),
                    system: method.name().to_string(),
                    summary,
                };
                serde_json::to_writer(&mut writer, &line)?;
                writer.write_all(b"\n")?;
            }
            writer.flush()?;
            status(format_args!(
                "{} baseline over {} groups -> {}",
                method.name(),
                groups.len(),
                out.display()
            ));
            let mut manifest = RunManifest::new(
                args,
                "baseline",
                serde_json::json!({
                    "method": method.name(),
                    "budget": budget,
                    "damping": damping,
                }),
            )
            .seeded(seed)
            .input(&input)
            .output(&out);
            if let Some(refs) = refs.as_deref() {
                manifest = manifest.input(refs);
            }
            manifest.write_beside(&out, started)?;
            Ok(0)
        }
        Command::Evaluate { candidates, references, out } => {
            let cands = read_candidates(&candidates)?;
            let refs = read_references(&references)?;
            let table = rouge_table(&cands, &refs)?;
            let mut csv = String::from("system,rouge1_f1,rouge2_f1,rougeL_f1\n");
            for (system, [r1, r2, rl]) in &table {
                csv.push_str(&format!("{system},{r1},{r2},{rl}\n"));
            }
            std::fs::write(&out, &csv)?;
            print!("{csv}");
            RunManifest::new(args, "evaluate", serde_json::json!({}))
                .input(&candidates)
                .input(&references)
                .output(&out)
                .write_beside(&out, started)?;
            Ok(0)
        }
        Command::EvaluateBws { judgments, out } => {
            let lines = read_jsonl::<metrics::BwsJudgment>(&judgments)?;
            let scores = metrics::bws_scores(&lines)?;
            let mut csv = String::from("system,score\n");
            for (system, score) in &scores {
                csv.push_str(&format!("{system},{score}\n"));
            }
            print!("{csv}");
            if let Some(out) = out {
                std::fs::write(&out, &csv)?;
                RunManifest::new(args, "evaluate-bws", serde_json::json!({}))
                    .input(&judgments)
                    .output(&out)
                    .write_beside(&out, started)?;
            }
            Ok(0)
        }
        Command::EvaluateSupport { labels, out } => {
            let text = std::fs::read_to_string(&labels)?;
            let parsed: Vec<metrics::SupportLabel> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| l.parse().map_err(|e: String| anyhow!(e)))
                .collect::<Result<_>>()?;
            let breakdown = metrics::content_support_aggregate(&parsed)?;
            let csv = format!(
                "full_pct,partial_pct,no_pct\n{},{},{}\n",
                breakdown.full_pct, breakdown.partial_pct, breakdown.no_pct
            );
            print!("{csv}");
            if let Some(out) = out {
                std::fs::write(&out, &csv)?;
                RunManifest::new(args, "evaluate-support", serde_json::json!({}))
                    .input(&labels)
                    .output(&out)
                    .write_beside(&out, started)?;
            }
            Ok(0)
        }
        Command::GradCheck { tiny: _, eps } => {
            let report = tiny_grad_check(eps)?;
            println!(
                "max relative error {:e} at {}[{}] over {} coordinates",
                report.max_rel_error,
                report.worst_param,
                report.worst_index,
                report.coordinates_checked
            );
            Ok(u8::from(report.max_rel_error >= 1e-4))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn train_command(
    args: &[String],
    subcommand: &str,
    config_path: &Path,
    data: &Path,
    out: &Path,
    vocab_path: Option<&Path>,
    variant: Option<Ablation>,
    started: Instant,
) -> Result<u8> {
    let mut config = TrainConfig::load(config_path).map_err(|e| anyhow!(e))?;
    if let Some(variant) = variant {
        config.ablation = variant;
    }
    let raw = corpus::read_groups_file(data)?;
    let records = corpus::tokenize_groups(&raw);
    if records.is_empty() {
        bail!("{} contains no groups", data.display());
    }
    let vocab = match vocab_path {
        Some(path) => Vocabulary::load(path, config.max_extended)?,
        None => {
            let token_seqs: Vec<&[String]> = records
                .iter()
                .flat_map(|g| g.reviews.iter().map(|r| r.tokens.as_slice()))
                .collect();
            let distinct: std::collections::BTreeSet<&str> = token_seqs
                .iter()
                .flat_map(|seq| seq.iter().map(String::as_str))
                .collect();
            let size = config
                .vocab_size
                .min(distinct.len() + corpus::SPECIAL_TOKENS.len())
                .max(corpus::SPECIAL_TOKENS.len());
            Vocabulary::build(token_seqs.iter().copied(), size, config.max_extended)?
        }
    };
    let mut resolved = config.clone();
    resolved.vocab_size = vocab.size();
    let outcome = objective::train(&records, &vocab, &resolved, out)?;
    status(format_args!(
        "trained {} steps; final total {:.4}; checkpoint {}",
        outcome.steps_run,
        outcome.final_loss.total,
        outcome.checkpoint_path.display()
    ));
    let mut manifest = RunManifest::new(args, subcommand, serde_json::to_value(&resolved)?)
        .seeded(Some(resolved.seed))
        .input(data)
        .output(&outcome.checkpoint_path)
        .output(&outcome.log_path);
    if let Some(path) = vocab_path {
        manifest = manifest.input(path);
    }
    manifest.write_in_dir(out, started)?;
    Ok(0)
}

fn run_baseline(
    method: BaselineMethod,
    group: &SourceGroup,
    references: Option<&std::collections::BTreeMap<String, Vec<String>>>,
    seed: Option<u64>,
    budget: Option<usize>,
    damping: f64,
) -> Result<String> {
    let text_of = |idx: usize| group.reviews[idx].text.clone();
    let summary = match method {
        BaselineMethod::Clustroid => text_of(baselines::clustroid(group)?),
        BaselineMethod::Lead => baselines::lead(group)?,
        BaselineMethod::Random => {
            let seed = seed.ok_or_else(|| anyhow!("--method random requires --seed"))?;
            text_of(baselines::random_review(group, seed)?)
        }
        BaselineMethod::Oracle => {
            let refs = references
                .and_then(|map| map.get(&group.group_id))
                .ok_or_else(|| anyhow!("no references for group {}", group.group_id))?;
            text_of(baselines::oracle(group, refs)?)
        }
        BaselineMethod::Lexrank => {
            let budget = budget.unwrap_or_else(|| baselines::default_budget(group));
            baselines::lexrank(group, damping, budget)?
        }
    };
    Ok(summary)
}

/// One candidate summary as exchanged between summarize/baseline/evaluate.
#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateLine {
    pub group_id: String,
    pub system: String,
    pub summary: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReferenceLine {
    group_id: String,
    references: Vec<String>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (number, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), number + 1))?;
        out.push(value);
    }
    Ok(out)
}

fn read_candidates(path: &Path) -> Result<Vec<CandidateLine>> {
    read_jsonl(path)
}

fn read_references(path: &Path) -> Result<std::collections::BTreeMap<String, Vec<String>>> {
    let lines: Vec<ReferenceLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.group_id, l.references)).collect())
}

/// Mean R1/R2/RL F1 per system over its candidate groups.
fn rouge_table(
    candidates: &[CandidateLine],
    references: &std::collections::BTreeMap<String, Vec<String>>,
) -> Result<std::collections::BTreeMap<String, [f64; 3]>> {
    let mut sums: std::collections::BTreeMap<String, ([f64; 3], usize)> =
        std::collections::BTreeMap::new();
    for candidate in candidates {
        let refs = references
            .get(&candidate.group_id)
            .ok_or_else(|| anyhow!("no references for group {}", candidate.group_id))?;
        if refs.is_empty() {
            bail!("empty reference list for group {}", candidate.group_id);
        }
        let cand_tokens = corpus::tokenize(&candidate.summary);
        let ref_tokens: Vec<Vec<String>> = refs.iter().map(|r| corpus::tokenize(r)).collect();
        let r1 = metrics::rouge_n_multi(&cand_tokens, &ref_tokens, 1).f1;
        let r2 = metrics::rouge_n_multi(&cand_tokens, &ref_tokens, 2).f1;
        let rl = metrics::rouge_l_multi(&cand_tokens, &ref_tokens).f1;
        let entry = sums.entry(candidate.system.clone()).or_insert(([0.0; 3], 0));
        entry.0[0] += r1;
        entry.0[1] += r2;
        entry.0[2] += rl;
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(system, (totals, count))| {
            (system, [totals[0] / count as f64, totals[1] / count as f64, totals[2] / count as f64])
        })
        .collect())
}

/// The built-in gradient fidelity check: a tiny full model on one frozen
/// group with frozen noise.
pub fn tiny_grad_check(eps: f64) -> Result<crate::ndiff::GradCheckReport> {
    use crate::corpus::{GroupRecord, ReviewRecord};
    use crate::model::ModelConfig;
    use crate::ndiff::Tape;
    use crate::objective::{elbo, ElboNoise};
    use rand::SeedableRng;

    let dims = crate::model::ModelDims {
        vocab: 20,
        embed: 4,
        hidden: 8,
        latent: 6,
        alpha_hidden: 4,
        attn_hidden: 4,
        copy_hidden: 4,
    };
    let model_config = ModelConfig { dims, ablation: Ablation::Full, max_extended: 10 };
    let mut tokens: Vec<String> =
        corpus::SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for word in [
        "the", "food", "was", "great", "service", "slow", "nice", "staff", "room", "clean",
        "pool", "bar", "loud", "cheap", "cozy", "fresh",
    ] {
        tokens.push(word.into());
    }
    let vocab = Vocabulary::from_tokens(tokens, 10)?;
    let review = |id: &str, words: &[&str]| ReviewRecord {
        review_id: id.into(),
        tokens: words.iter().map(|w| w.to_string()).collect(),
    };
    let record = GroupRecord {
        group_id: "tiny".into(),
        reviews: vec![
            review("a", &["the", "food", "was", "great"]),
            review("b", &["nice", "staff", "but", "slow", "service"]),
            review("c", &["clean", "room", "cheap", "bar"]),
        ],
    };
    let (group, oov) = corpus::make_eval_group(&record, &vocab);
    let ext_size = vocab.size() + oov.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let noise = ElboNoise::draw(&mut rng, group.reviews.len(), dims.latent);
    let mut store = crate::model::init_parameters(&dims, Ablation::Full, 42);
    // Damp the random init so finite differences stay well conditioned.
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        for v in store.value_mut(name).data_mut() {
            *v *= 0.5;
        }
    }
    let report = crate::ndiff::grad_check(&mut store, eps, |store| {
        let mut tape = Tape::new();
        let vars = crate::model::bind(&mut tape, store, &model_config);
        let graph = elbo(&mut tape, &vars, &model_config, &group, ext_size, &noise, 0.6, 0.3);
        (tape, graph.total)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dispatch_args(argv: &[&str]) -> u8 {
        let args: Vec<String> = argv.iter().map(|s| s.to_string()).collect();
        dispatch(&args)
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("copycat-cli-{tag}"));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_groups(path: &Path, groups: &[(&str, &[&str])]) {
        let mut lines = String::new();
        for (group_id, texts) in groups {
            let reviews: Vec<serde_json::Value> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| serde_json::json!({"review_id": format!("{group_id}-{i}"), "text": t}))
                .collect();
            let line = serde_json::json!({"group_id": group_id, "reviews": reviews});
            lines.push_str(&serde_json::to_string(&line).unwrap());
            lines.push('\n');
        }
        std::fs::write(path, lines).unwrap();
    }

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(dispatch_args(&["copycat", "--help"]), 0);
        assert_eq!(dispatch_args(&["copycat", "no-such-command"]), 2);
        assert_eq!(dispatch_args(&["copycat", "train"]), 2);
        assert_eq!(dispatch_args(&["copycat", "summarize", "--model", "x", "--input", "y", "--out", "z", "--badflag"]), 2);
    }

    #[test]
    fn sample_mode_requires_a_seed() {
        let code = dispatch_args(&[
            "copycat", "summarize", "--model", "m.ckpt", "--input", "in.jsonl", "--out",
            "out.jsonl", "--mode", "sample",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn random_baseline_requires_a_seed() {
        let code = dispatch_args(&[
            "copycat", "baseline", "--method", "random", "--input", "in.jsonl", "--out",
            "out.jsonl",
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn missing_input_file_is_a_runtime_error() {
        let dir = temp_dir("missing");
        let out = dir.join("out.jsonl");
        let code = dispatch_args(&[
            "copycat",
            "baseline",
            "--method",
            "lead",
            "--input",
            "/nonexistent/in.jsonl",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn lead_baseline_round_trip() {
        let dir = temp_dir("lead");
        let input = dir.join("groups.jsonl");
        write_groups(
            &input,
            &[("g1", &["First one. Second one.", "Only sentence here."])],
        );
        let out = dir.join("lead.jsonl");
        let code = dispatch_args(&[
            "copycat",
            "baseline",
            "--method",
            "lead",
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&out).unwrap();
        let line: CandidateLine = serde_json::from_str(body.lines().next().unwrap()).unwrap();
        assert_eq!(line.system, "lead");
        assert_eq!(line.summary, "First one. Only sentence here.");
        assert!(dir.join("lead.jsonl.manifest.json").exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn evaluate_round_trip_with_perfect_candidate() {
        let dir = temp_dir("evaluate");
        let cands = dir.join("cands.jsonl");
        let refs = dir.join("refs.jsonl");
        std::fs::write(
            &cands,
            concat!(
                "{\"group_id\":\"g\",\"system\":\"copy\",\"summary\":\"great food\"}\n",
                "{\"group_id\":\"g\",\"system\":\"other\",\"summary\":\"nothing shared\"}\n"
            ),
        )
        .unwrap();
        std::fs::write(&refs, "{\"group_id\":\"g\",\"references\":[\"great food\"]}\n").unwrap();
        let out = dir.join("rouge.csv");
        let code = dispatch_args(&[
            "copycat",
            "evaluate",
            "--candidates",
            cands.to_str().unwrap(),
            "--references",
            refs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&out).unwrap();
        let mut lines = body.lines();
        assert_eq!(lines.next().unwrap(), "system,rouge1_f1,rouge2_f1,rougeL_f1");
        assert_eq!(lines.next().unwrap(), "copy,1,1,1");
        assert_eq!(lines.next().unwrap(), "other,0,0,0");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bws_and_support_aggregation() {
        let dir = temp_dir("bws");
        let judgments = dir.join("judgments.jsonl");
        std::fs::write(
            &judgments,
            concat!(
                "{\"item_id\":\"i1\",\"systems\":[\"a\",\"b\"],\"best\":\"a\",\"worst\":\"b\"}\n",
                "{\"item_id\":\"i2\",\"systems\":[\"a\",\"b\"],\"best\":\"a\",\"worst\":\"b\"}\n"
            ),
        )
        .unwrap();
        let code = dispatch_args(&[
            "copycat",
            "evaluate-bws",
            "--judgments",
            judgments.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);

        let labels = dir.join("labels.txt");
        std::fs::write(&labels, "full\npartial\nno\nfull\n").unwrap();
        let out = dir.join("support.csv");
        let code = dispatch_args(&[
            "copycat",
            "evaluate-support",
            "--labels",
            labels.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&out).unwrap();
        assert!(body.starts_with("full_pct,partial_pct,no_pct\n50,25,25\n"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn prepare_writes_groups_and_vocabulary() {
        let dir = temp_dir("prepare");
        let input = dir.join("raw.jsonl");
        let texts: Vec<String> = (0..12)
            .map(|i| format!("the food was great and the service was fine today number {i}."))
            .collect();
        let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        write_groups(&input, &[("g1", &text_refs)]);
        let out = dir.join("prepared");
        let code = dispatch_args(&[
            "copycat",
            "prepare",
            "--input",
            input.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--min-reviews",
            "10",
            "--min-len",
            "5",
            "--max-len",
            "70",
            "--pop-pct",
            "100",
            "--vocab-size",
            "100",
        ]);
        assert_eq!(code, 0);
        assert!(out.join("groups.jsonl").exists());
        assert!(out.join("vocab.txt").exists());
        assert!(out.join("manifest.json").exists());
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.subcommand, "prepare");
        assert_eq!(manifest.precision, "f64");
        assert_eq!(manifest.outputs.len(), 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn train_and_summarize_round_trip() {
        let dir = temp_dir("train-roundtrip");
        let data = dir.join("data.jsonl");
        write_groups(
            &data,
            &[
                ("g1", &["the food was great", "great food here", "food was great"]),
                ("g2", &["the pool was cold", "cold pool water", "pool was cold"]),
            ],
        );
        let config_path = dir.join("config.toml");
        std::fs::write(
            &config_path,
            concat!(
                "steps = 2\nembed_dim = 3\nhidden_dim = 4\nlatent_dim = 2\n",
                "alpha_hidden = 2\nattn_hidden = 2\ncopy_hidden = 2\ngroup_size = 3\n",
                "vocab_size = 40\nmax_extended = 10\nseed = 3\n"
            ),
        )
        .unwrap();
        let out = dir.join("run");
        let code = dispatch_args(&[
            "copycat",
            "train",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let ckpt = out.join("model.ckpt");
        assert!(ckpt.exists());
        assert!(out.join("train_log.csv").exists());
        assert!(out.join("manifest.json").exists());

        let summaries = dir.join("summaries.jsonl");
        let code = dispatch_args(&[
            "copycat",
            "summarize",
            "--model",
            ckpt.to_str().unwrap(),
            "--input",
            data.to_str().unwrap(),
            "--beam",
            "2",
            "--max-len",
            "6",
            "--out",
            summaries.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let body = std::fs::read_to_string(&summaries).unwrap();
        assert_eq!(body.lines().count(), 2);
        let first: serde_json::Value = serde_json::from_str(body.lines().next().unwrap()).unwrap();
        assert_eq!(first["group_id"], "g1");
        assert_eq!(first["mode"], "mean");
        assert!(first["copied"].is_array());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn ablate_overrides_the_config_variant() {
        let dir = temp_dir("ablate");
        let data = dir.join("data.jsonl");
        write_groups(&data, &[("g1", &["good food here", "food was good", "really good food"])]);
        let config_path = dir.join("config.toml");
        std::fs::write(
            &config_path,
            concat!(
                "steps = 1\nembed_dim = 3\nhidden_dim = 4\nlatent_dim = 2\n",
                "alpha_hidden = 2\nattn_hidden = 2\ncopy_hidden = 2\ngroup_size = 3\n",
                "vocab_size = 40\nmax_extended = 10\n"
            ),
        )
        .unwrap();
        let out = dir.join("run");
        let code = dispatch_args(&[
            "copycat",
            "ablate",
            "--variant",
            "no_c",
            "--config",
            config_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let checkpoint = Checkpoint::load(&out.join("model.ckpt")).unwrap();
        assert_eq!(checkpoint.config.ablation, Ablation::NoC);
        let manifest: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest.subcommand, "ablate");
        assert_eq!(manifest.config["ablation"], "no_c");
        std::fs::remove_dir_all(&dir).ok();
    }
}
