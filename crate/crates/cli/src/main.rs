//! `mentra` command-line interface.
//!
//! Every subcommand runs offline against deterministic mocks unless `--live`
//! is given, in which case the OpenAI-compatible gateway from the config file
//! is used with the credential from `MENTRA_API_KEY`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mentra_core::config::EngineConfig;
use mentra_core::eval::{
    agreement_report, compute_metric, load_predictions, load_rubric, render_agreement_table,
};
use mentra_core::format::{validate_text, RawTrajectory};
use mentra_core::gateway::{ChatBackend, ChatClient};
use mentra_core::reward::{
    compute_reward_with, AlwaysConsistent, ConclusionAgreementJudge, ConsistencyJudge,
    JudgePointMatcher, LlmConsistencyJudge, PointMatcher, SubstringMatcher,
};
use mentra_core::rtg::{
    difficulty_filter, search_all, AnswerVerifier, FirstOptionSolver, GoldVerifier, LlmGenerator,
    LlmSolver, LlmVerifier, MockGenerator, SearchOutcome, StepGenerator, TrajectoryRecord,
    ZeroShotSolver,
};
use mentra_core::synthetic::CopyTask;
use mentra_core::task::{load_tasks, MetricKind, TaskSpec};
use mentra_core::trainer::{StepRecord, TrainLog, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Jsonl,
    Table,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "mentra", version, about = "Structured reasoning trajectories: validation, reward, search, training and evaluation")]
struct Cli {
    /// Engine configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "jsonl")]
    format: OutputFormat,
    /// Use the chat gateway instead of offline mocks.
    #[arg(long, global = true)]
    live: bool,
    /// Overrides `gateway.base_url`.
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate trajectory files against the structured format.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Exit 1 if any file fails validation.
        #[arg(long)]
        strict: bool,
    },
    /// Score trajectories (JSONL of `{problem_id, text}`) against a dataset.
    Score {
        #[arg(long)]
        dataset: PathBuf,
        trajectories: PathBuf,
        /// Offline consistency judge.
        #[arg(long, value_enum, default_value = "conclusion")]
        judge: MockJudge,
    },
    /// Generate structured trajectories for a dataset.
    Rtg {
        #[arg(long)]
        dataset: PathBuf,
        /// Keep only problems the zero-shot solver gets wrong.
        #[arg(long)]
        filter: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy policy on the synthetic copy task.
    TrainToy {
        #[arg(long, default_value_t = 300)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 4)]
        labels: usize,
        /// Directory for checkpoints and the train log.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print every n-th step record.
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Compute a benchmark metric over a prediction file.
    Eval {
        #[arg(long, value_enum)]
        metric: MetricArg,
        predictions: PathBuf,
    },
    /// Rubric scores and inter-annotator agreement from rubric sheets.
    Agreement { rubric: PathBuf },
    /// Summarize a training log as a table, CSV, or a plot-ready series.
    Report {
        log: PathBuf,
        /// Emit `step value` pairs for one field instead of the full table.
        #[arg(long)]
        series: Option<String>,
        /// Trailing-mean window applied to the series.
        #[arg(long, default_value_t = 1)]
        window: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MockJudge {
    Conclusion,
    Always,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    MicroF1,
    MacroF1,
    Jaccard,
    PointRecall,
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::MicroF1 => MetricKind::MicroF1,
            MetricArg::MacroF1 => MetricKind::MacroF1,
            MetricArg::Jaccard => MetricKind::Jaccard,
            MetricArg::PointRecall => MetricKind::PointRecall,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(url) = &cli.base_url {
        cfg.gateway.base_url = url.clone();
    }
    if cli.format == OutputFormat::Csv && !matches!(cli.command, Command::Report { .. }) {
        eprintln!("error: --format csv is only supported by `report`");
        return Ok(ExitCode::from(2));
    }
    let out = std::io::stdout();
    let mut out = out.lock();
    match cli.command {
        Command::Validate { files, strict } => validate_cmd(&cfg, &files, strict, cli.format, &mut out),
        Command::Score { dataset, trajectories, judge } => {
            score_cmd(&cfg, &dataset, &trajectories, judge, cli.live, cli.format, &mut out)
        }
        Command::Rtg { dataset, filter, seed, out: path } => {
            rtg_cmd(&cfg, &dataset, filter, seed, path.as_deref(), cli.live, &mut out)
        }
        Command::TrainToy { steps, seed, lr, labels, out: dir, resume, log_every } => {
            let args = ToyArgs { steps, seed, lr, labels, dir, resume, log_every };
            train_cmd(&cfg, args, cli.format, &mut out)
        }
        Command::Eval { metric, predictions } => eval_cmd(metric.into(), &predictions, cli.format, &mut out),
        Command::Agreement { rubric } => agreement_cmd(&rubric, cli.format, &mut out),
        Command::Report { log, series, window } => report_cmd(&log, series.as_deref(), window, cli.format, &mut out),
    }
}

fn emit(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn validate_cmd(cfg: &EngineConfig, files: &[PathBuf], strict: bool, fmt: OutputFormat, out: &mut impl Write) -> Result<ExitCode> {
    let mut all_ok = true;
    for f in files {
        let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let (_, report) = validate_text(&RawTrajectory(text), &cfg.format, None);
        all_ok &= report.is_valid();
        match fmt {
            OutputFormat::Table => {
                let codes: Vec<String> = report.violations.iter().map(|v| format!("{:?}", v.code)).collect();
                writeln!(
                    out,
                    "{:<40} {:<7} tokens={:<6} {}",
                    f.display(),
                    if report.is_valid() { "ok" } else { "invalid" },
                    report.token_count.map_or("-".into(), |n| n.to_string()),
                    codes.join(",")
                )?;
            }
            _ => emit(out, &json!({ "file": f.display().to_string(), "report": report }))?,
        }
    }
    Ok(if strict && !all_ok { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn live_client(cfg: &EngineConfig) -> ChatClient {
    ChatClient::from_env(cfg.gateway.base_url.clone(), cfg.gateway.policy())
}

#[derive(Debug, Deserialize)]
struct TrajectoryLine {
    #[serde(alias = "id")]
    problem_id: String,
    text: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(rows)
}

fn score_cmd(
    cfg: &EngineConfig,
    dataset: &Path,
    trajectories: &Path,
    mock: MockJudge,
    live: bool,
    fmt: OutputFormat,
    out: &mut impl Write,
) -> Result<ExitCode> {
    let tasks = load_tasks(dataset)?;
    let rows: Vec<TrajectoryLine> = read_jsonl(trajectories)?;
    let client = live.then(|| live_client(cfg));
    let judge: Box<dyn ConsistencyJudge + '_> = match (&client, mock) {
        (Some(c), _) => Box::new(LlmConsistencyJudge { backend: c, model: cfg.gateway.judge_model.clone() }),
        (None, MockJudge::Conclusion) => Box::new(ConclusionAgreementJudge { format: cfg.format.clone() }),
        (None, MockJudge::Always) => Box::new(AlwaysConsistent),
    };
    let matcher: Box<dyn PointMatcher + '_> = match &client {
        Some(c) => Box::new(JudgePointMatcher { backend: c as &dyn ChatBackend, model: cfg.gateway.judge_model.clone() }),
        None => Box::new(SubstringMatcher),
    };
    for row in rows {
        let task = tasks
            .iter()
            .find(|t| t.id == row.problem_id)
            .with_context(|| format!("problem {:?} is not in the dataset", row.problem_id))?;
        let b = compute_reward_with(&RawTrajectory(row.text), None, task, &cfg.format, judge.as_ref(), matcher.as_ref())?;
        match fmt {
            OutputFormat::Table => writeln!(
                out,
                "{:<24} reward={:.4} format={} length={} consistency={} quality={}",
                row.problem_id,
                b.reward,
                b.format_gate,
                gate(b.length_gate),
                gate(b.consistency_gate),
                b.quality.map_or("-".into(), |q| format!("{q:.4}"))
            )?,
            _ => emit(out, &json!({ "problem_id": row.problem_id, "breakdown": b }))?,
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gate(g: Option<u8>) -> String {
    g.map_or("-".into(), |v| v.to_string())
}

fn rtg_cmd(
    cfg: &EngineConfig,
    dataset: &Path,
    filter: bool,
    seed: u64,
    path: Option<&Path>,
    live: bool,
    out: &mut impl Write,
) -> Result<ExitCode> {
    let mut problems: Vec<TaskSpec> = load_tasks(dataset)?;
    let client = live.then(|| live_client(cfg));
    let prefix = cfg.format.answer_prefix.clone();
    let (generator, verifier, solver): (Box<dyn StepGenerator + '_>, Box<dyn AnswerVerifier + '_>, Box<dyn ZeroShotSolver + '_>) =
        match &client {
            Some(c) => (
                Box::new(LlmGenerator {
                    backend: c,
                    model: cfg.gateway.generator_model.clone(),
                    temperature: 0.7,
                    answer_prefix: prefix.clone(),
                    live_rewrite: true,
                }),
                Box::new(LlmVerifier { backend: c, model: cfg.gateway.verifier_model.clone() }),
                Box::new(LlmSolver { backend: c, model: cfg.gateway.solver_model.clone(), answer_prefix: prefix }),
            ),
            None => (Box::new(MockGenerator { seed }), Box::new(GoldVerifier::default()), Box::new(FirstOptionSolver)),
        };
    let total = problems.len();
    if filter {
        problems = difficulty_filter(&problems, solver.as_ref(), &SubstringMatcher)?;
    }
    let mut search = cfg.search;
    search.strategy_seed ^= seed;
    let outcomes = search_all(&problems, generator.as_ref(), verifier.as_ref(), &search, &cfg.format);

    let mut sink: Box<dyn Write> = match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(&mut *out),
    };
    let (mut accepted, mut discarded) = (0usize, 0usize);
    for o in outcomes {
        let o = o?;
        match (&o, TrajectoryRecord::from_outcome(&o)) {
            (SearchOutcome::Accepted(..), Some(rec)) => {
                accepted += 1;
                writeln!(sink, "{}", serde_json::to_string(&rec)?)?;
            }
            _ => discarded += 1,
        }
    }
    sink.flush()?;
    eprintln!("rtg: {total} problems, {} searched, {accepted} accepted, {discarded} discarded", problems.len());
    Ok(ExitCode::SUCCESS)
}

struct ToyArgs {
    steps: u64,
    seed: u64,
    lr: f64,
    labels: usize,
    dir: Option<PathBuf>,
    resume: Option<PathBuf>,
    log_every: u64,
}

fn print_record(out: &mut impl Write, r: &StepRecord, fmt: OutputFormat) -> Result<()> {
    match fmt {
        OutputFormat::Table => writeln!(
            out,
            "step {:>6}  mu {:.4}  sft {:.6}  grpo {:+.6}  total {:+.6}  reward {:.4}",
            r.step, r.mu, r.sft_loss, r.grpo_loss, r.total_loss, r.mean_reward
        )?,
        _ => emit(out, r)?,
    }
    Ok(())
}

fn train_cmd(cfg: &EngineConfig, a: ToyArgs, fmt: OutputFormat, out: &mut impl Write) -> Result<ExitCode> {
    if a.log_every == 0 {
        bail!("--log-every must be >= 1");
    }
    let task = CopyTask::new(a.labels);
    let policy = task.policy();
    let sft = task.sft_examples(&policy)?;
    let judge = ConclusionAgreementJudge { format: cfg.format.clone() };
    let mut settings = cfg.train_settings();
    settings.trainer.total_steps = a.steps;
    settings.trainer.seed = a.seed;
    settings.optimizer.learning_rate = a.lr;
    let trainer = Trainer::new(settings, &policy, &judge, &sft, &task.tasks, a.dir.clone());
    let outcome = match &a.resume {
        Some(ckpt) => trainer.resume(ckpt)?,
        None => trainer.run()?,
    };
    let log = &outcome.log;
    for r in log.records.iter().filter(|r| r.step % a.log_every == 0) {
        print_record(out, r, fmt)?;
    }
    if let Some(last) = log.records.last() {
        let avg10 = log.trailing_mean_reward(log.records.len() - 1, 10);
        match fmt {
            OutputFormat::Table => writeln!(
                out,
                "final step {} total_loss {:+.9} mean_reward {:.4} trailing10 {:.4}",
                last.step, last.total_loss, last.mean_reward, avg10
            )?,
            _ => emit(
                out,
                &json!({
                    "final_step": last.step,
                    "final_total_loss": last.total_loss,
                    "final_mean_reward": last.mean_reward,
                    "trailing_mean_reward_10": avg10,
                    "checkpoints": outcome.checkpoints.len(),
                }),
            )?,
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(metric: MetricKind, path: &Path, fmt: OutputFormat, out: &mut impl Write) -> Result<ExitCode> {
    let preds = load_predictions(path)?;
    let report = compute_metric(metric, &preds)?;
    match fmt {
        OutputFormat::Table => {
            writeln!(out, "{:?}: {:.4} (n = {})", report.metric, report.value, report.support)?;
            for c in &report.per_class {
                writeln!(out, "  {:<16} tp {:>4} fp {:>4} fn {:>4} f1 {:.4}", c.label, c.tp, c.fp, c.fn_, c.f1)?;
            }
        }
        _ => emit(out, &report)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn agreement_cmd(path: &Path, fmt: OutputFormat, out: &mut impl Write) -> Result<ExitCode> {
    let sheets = load_rubric(path)?;
    let report = agreement_report(&sheets)?;
    match fmt {
        OutputFormat::Table => write!(out, "{}", render_agreement_table(&report))?,
        _ => emit(out, &report)?,
    }
    Ok(ExitCode::SUCCESS)
}

const REPORT_FIELDS: [&str; 9] = [
    "step", "mu", "sft_loss", "grpo_loss", "total_loss", "mean_reward", "b_rl", "rl_completions", "generator_calls",
];

fn field(r: &StepRecord, name: &str) -> Option<f64> {
    Some(match name {
        "step" => r.step as f64,
        "mu" => r.mu,
        "sft_loss" => r.sft_loss,
        "grpo_loss" => r.grpo_loss,
        "total_loss" => r.total_loss,
        "mean_reward" => r.mean_reward,
        "b_rl" => r.b_rl as f64,
        "rl_completions" => r.rl_completions as f64,
        "generator_calls" => r.generator_calls as f64,
        _ => return None,
    })
}

fn report_cmd(path: &Path, series: Option<&str>, window: usize, fmt: OutputFormat, out: &mut impl Write) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let log = TrainLog::from_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(name) = series {
        if window == 0 {
            bail!("--window must be >= 1");
        }
        let values: Vec<f64> = log
            .records
            .iter()
            .map(|r| field(r, name))
            .collect::<Option<_>>()
            .with_context(|| format!("unknown field {name:?}; known: {}", REPORT_FIELDS.join(", ")))?;
        for (i, r) in log.records.iter().enumerate() {
            let lo = (i + 1).saturating_sub(window);
            let mean = values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            match fmt {
                OutputFormat::Jsonl => emit(out, &json!({ "step": r.step, name: mean }))?,
                OutputFormat::Csv => writeln!(out, "{},{}", r.step, mean)?,
                OutputFormat::Table => writeln!(out, "{} {}", r.step, mean)?,
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    match fmt {
        OutputFormat::Jsonl => {
            for r in &log.records {
                emit(out, r)?;
            }
        }
        OutputFormat::Csv => {
            writeln!(out, "{}", REPORT_FIELDS.join(","))?;
            for r in &log.records {
                let row: Vec<String> = REPORT_FIELDS.iter().map(|f| field(r, f).unwrap_or(f64::NAN).to_string()).collect();
                writeln!(out, "{}", row.join(","))?;
            }
        }
        OutputFormat::Table => {
            writeln!(out, "{:>7} {:>7} {:>10} {:>10} {:>10} {:>8}", "step", "mu", "sft", "grpo", "total", "reward")?;
            for r in &log.records {
                writeln!(
                    out,
                    "{:>7} {:>7.4} {:>10.6} {:>+10.6} {:>+10.6} {:>8.4}",
                    r.step, r.mu, r.sft_loss, r.grpo_loss, r.total_loss, r.mean_reward
                )?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
