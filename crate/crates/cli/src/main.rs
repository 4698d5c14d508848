//! Scenario-driven command-line front end.
//!
//! `run` plays a scenario and writes per-episode records (JSON lines), a
//! summary table (CSV), and a resolved scenario echo (JSON) that reproduces
//! the run with no other inputs. `analyze` prints the closed-form
//! predictions for a parameter set without simulating. `compare` runs the
//! scenario and writes an agreement report between closed forms and the
//! Monte Carlo estimates. All outputs are deterministic: rerunning a
//! command with the same inputs produces byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use probegame::analytics::{
    compare_with_workers, exact_expected_error_rate, expected_trials, naive_attack_error_rate,
    naive_attack_error_rate_inclusive, required_r, stochastic_asymptote, targeted_rate_approx,
    AnalyticReport,
};
use probegame::engine::{monte_carlo_with_workers, MonteCarloSummary, ScenarioConfig};
use probegame::metrics::Metrics;
use probegame::seed::SeedSpec;
use probegame::world::WorldModel;

#[derive(Parser)]
#[command(
    name = "probegame",
    version,
    about = "Simulate repeated-query attacks on classifiers and check them against closed forms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write episode records, a summary, and a scenario echo.
    Run(RunArgs),
    /// Print closed-form predictions only; no simulation.
    Analyze(AnalyzeArgs),
    /// Run a scenario and write an agreement report against its closed forms.
    Compare(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Worker threads for episode parallelism (0 = all available cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Output directory (default: runs/<scenario name or file stem>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which result files to write.
    #[arg(long, value_enum, default_value_t = OutputFormat::All)]
    format: OutputFormat,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Scenario file to read r, m_test, and the class count from.
    #[arg(long, conflicts_with_all = ["rate", "m_test", "classes"])]
    scenario: Option<PathBuf>,
    /// Mistake rate r for direct analysis without a scenario file.
    #[arg(long)]
    rate: Option<f64>,
    /// Episode length for direct analysis.
    #[arg(long)]
    m_test: Option<usize>,
    /// Class count for the targeted-attack approximation.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Error-rate ceiling used for the required-r line.
    #[arg(long, default_value_t = 0.05)]
    target: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    /// Episode records, summary table, and scenario echo.
    All,
    /// Episode records and scenario echo only.
    Jsonl,
    /// Summary table and scenario echo only.
    Csv,
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Run(args) => run(&args),
        Command::Analyze(args) => analyze(&args),
        Command::Compare(args) => compare(&args),
    }
}

/// Load, apply overrides, and validate a scenario file.
fn load_scenario(
    path: &Path,
    seed: Option<u64>,
    episodes: Option<usize>,
) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read scenario file `{}`", path.display()))?;
    let mut config: ScenarioConfig = serde_json::from_str(&text)
        .with_context(|| format!("invalid scenario file `{}`", path.display()))?;
    if let Some(seed) = seed {
        config.seed = SeedSpec(seed);
    }
    if let Some(episodes) = episodes {
        config.episodes = episodes;
    }
    config
        .validate()
        .with_context(|| format!("invalid scenario `{}`", path.display()))?;
    Ok(config)
}

fn out_dir_for(args: &RunArgs, config: &ScenarioConfig) -> PathBuf {
    if let Some(dir) = &args.out {
        return dir.clone();
    }
    let leaf = if config.name.is_empty() {
        args.scenario
            .file_stem()
            .map(|stem| stem.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".to_string())
    } else {
        config.name.clone()
    };
    PathBuf::from("runs").join(leaf)
}

fn run(args: &RunArgs) -> Result<()> {
    let config = load_scenario(&args.scenario, args.seed, args.episodes)?;
    let summary = monte_carlo_with_workers(&config, args.workers)?;
    let out_dir = out_dir_for(args, &config);
    let written = write_run_outputs(&out_dir, &config, &summary, args.format)?;
    print!("{}", render_summary(&config, &summary));
    println!("wrote {}", written.join(", "));
    Ok(())
}

fn compare(args: &RunArgs) -> Result<()> {
    let config = load_scenario(&args.scenario, args.seed, args.episodes)?;
    let report = compare_with_workers(&config, args.workers)?;
    let out_dir = out_dir_for(args, &config);
    let mut written = write_run_outputs(&out_dir, &config, &report.summary, args.format)?;

    let text = report.render_text();
    write_file(&out_dir.join("report.txt"), &text)?;
    write_file(&out_dir.join("report.csv"), &report_csv(&report))?;
    written.push(display_path(&out_dir.join("report.txt")));
    written.push(display_path(&out_dir.join("report.csv")));

    print!("{text}");
    let disagreements = report.rows.iter().filter(|row| !row.agrees).count();
    if disagreements == 0 {
        println!("agreement: all {} rows agree", report.rows.len());
    } else {
        println!(
            "agreement: {disagreements} of {} rows disagree",
            report.rows.len()
        );
    }
    println!("wrote {}", written.join(", "));
    Ok(())
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let (r, m_test, classes, world) = match (&args.scenario, args.rate, args.m_test) {
        (Some(path), None, None) => {
            let config = load_scenario(path, None, None)?;
            let world = config.build_scenario_world(0)?;
            (
                world.natural_error_rate(),
                config.m_test,
                world.class_count(),
                Some(world),
            )
        }
        (None, Some(rate), Some(m_test)) => (rate, m_test, args.classes, None),
        _ => bail!("pass either --scenario, or both --rate and --m-test"),
    };

    println!("replay-attack analytics (r = {r}, m_test = {m_test}, k = {classes})");
    if let Some(world) = &world {
        println!("{:<38} {}", "  population points", world.len());
        println!(
            "{:<38} {}",
            "  argmax mistake points",
            world.mistake_point_count()
        );
        if matches!(world_profile(world), ProfileStyle::Stochastic) {
            println!(
                "{:<38} {}",
                "  stochastic error-rate asymptote",
                stochastic_asymptote(world)
            );
            println!(
                "{:<38} {}",
                "  mean mistake mass",
                world.mean_mistake_mass()
            );
        }
    }
    if r > 0.0 {
        let trials = expected_trials(r).context("invalid mistake rate")?;
        println!("{:<38} {}", "  expected probes to first mistake", trials);
        println!(
            "{:<38} {}",
            "  replay error rate, naive",
            naive_attack_error_rate(r, m_test)
        );
        println!(
            "{:<38} {}",
            "  replay error rate, inclusive",
            naive_attack_error_rate_inclusive(r, m_test)
        );
        println!(
            "{:<38} {}",
            "  replay error rate, exact",
            exact_expected_error_rate(r, m_test)
        );
        println!(
            "{:<38} {}",
            "  targeted fresh-probe rate, r/k",
            targeted_rate_approx(r, classes)
        );
    } else {
        println!("  no argmax mistakes: replay attack formulas are all zero");
    }
    let required = required_r(args.target, m_test)
        .with_context(|| format!("invalid --target {}", args.target))?;
    println!(
        "{:<38} {}",
        format!("  required r for a {} ceiling", args.target),
        required
    );
    Ok(())
}

/// Which profile style a built world uses (worlds do not retain their
/// originating `WorldSpec`).
enum ProfileStyle {
    Deterministic,
    Stochastic,
}

fn world_profile(world: &WorldModel) -> ProfileStyle {
    // Deterministic worlds carry one-hot profiles only: every point's top
    // class has the whole mass.
    let one_hot = world
        .points()
        .all(|p| (p.profile.max_class_prob() - 1.0).abs() < 1e-12);
    if one_hot {
        ProfileStyle::Deterministic
    } else {
        ProfileStyle::Stochastic
    }
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    episode: usize,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

/// Write the scenario echo plus whichever result files the format selects;
/// returns the paths written, for the closing status line.
fn write_run_outputs(
    out_dir: &Path,
    config: &ScenarioConfig,
    summary: &MonteCarloSummary,
    format: OutputFormat,
) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory `{}`", out_dir.display()))?;
    let mut written = Vec::new();

    // The echo always goes out: it is the reproduction recipe.
    let echo_path = out_dir.join("scenario.json");
    let mut echo = serde_json::to_string_pretty(config)?;
    echo.push('\n');
    write_file(&echo_path, &echo)?;
    written.push(display_path(&echo_path));

    if matches!(format, OutputFormat::All | OutputFormat::Jsonl) {
        let path = out_dir.join("episodes.jsonl");
        let mut lines = String::new();
        for (episode, metrics) in summary.per_episode.iter().enumerate() {
            lines.push_str(&serde_json::to_string(&EpisodeRow { episode, metrics })?);
            lines.push('\n');
        }
        write_file(&path, &lines)?;
        written.push(display_path(&path));
    }
    if matches!(format, OutputFormat::All | OutputFormat::Csv) {
        let path = out_dir.join("summary.csv");
        write_file(&path, &summary_csv(summary))?;
        written.push(display_path(&path));
    }
    Ok(written)
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).with_context(|| format!("cannot write `{}`", path.display()))
}

fn display_path(path: &Path) -> String {
    path.display().to_string()
}

fn summary_csv(summary: &MonteCarloSummary) -> String {
    let mut out = String::from("metric,mean,std_dev,ci95_half_width,n\n");
    let mut stat_row = |name: &str, stat: &probegame::engine::SummaryStat| {
        out.push_str(&format!(
            "{name},{},{},{},{}\n",
            stat.mean, stat.std_dev, stat.ci95_half_width, stat.n
        ));
    };
    stat_row("error_rate", &summary.error_rate);
    stat_row("abstention_rate", &summary.abstention_rate);
    stat_row("targeted_rate", &summary.targeted_rate);
    if let Some(stat) = &summary.first_mistake_index {
        stat_row("first_mistake_index", stat);
    }
    out.push_str(&format!("episodes,{},,,\n", summary.episodes));
    out.push_str(&format!(
        "episodes_without_mistake,{},,,\n",
        summary.episodes_without_mistake
    ));
    out
}

fn report_csv(report: &AnalyticReport) -> String {
    let mut out = String::from(
        "quantity,closed_form,oracle,mc_estimate,mc_ci95_half_width,agrees,tolerance\n",
    );
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&row.quantity),
            opt(row.closed_form),
            opt(row.oracle),
            opt(row.mc_estimate),
            opt(row.mc_ci95_half_width),
            row.agrees,
            csv_field(&row.tolerance),
        ));
    }
    out
}

/// Quote a CSV field when it holds a delimiter, quote, or newline.
fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn render_summary(config: &ScenarioConfig, summary: &MonteCarloSummary) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let name = if config.name.is_empty() {
        "(unnamed)"
    } else {
        &config.name
    };
    let _ = writeln!(
        out,
        "scenario {name}: {} episodes x {} queries, seed {}",
        summary.episodes, config.m_test, config.seed.0
    );
    let mut stat_line = |label: &str, stat: &probegame::engine::SummaryStat| {
        let _ = writeln!(
            out,
            "  {label:<18} mean {:.6}  sd {:.6}  ci95 ±{:.6}",
            stat.mean, stat.std_dev, stat.ci95_half_width
        );
    };
    stat_line("error rate", &summary.error_rate);
    stat_line("abstention rate", &summary.abstention_rate);
    stat_line("targeted rate", &summary.targeted_rate);
    match &summary.first_mistake_index {
        Some(stat) => {
            let _ = writeln!(
                out,
                "  first mistake      mean index {:.2} (mean trials {:.2}) over {} episodes; {} without a mistake",
                stat.mean,
                stat.mean + 1.0,
                stat.n,
                summary.episodes_without_mistake
            );
        }
        None => {
            let _ = writeln!(out, "  first mistake      none in any episode");
        }
    }
    out
}
