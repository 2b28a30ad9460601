//! `hyperedit` batch command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use hyperedit::config::RunConfig;
use hyperedit::io::write_atomic;
use hyperedit::metrics::validate_case_json;
use hyperedit::model::ToyModel;
use hyperedit::pipeline::*;
use hyperedit::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hyperedit", version, about = "Hyperbolic graph guided rank-1 editing of a toy associative model")]
struct Cli {
    /// TOML run configuration; relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out_dir` for reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark (triples, requests, chains) to the output directory.
    Generate,
    /// Build the hyperbolic graph and write its dump and summary.
    BuildGraph,
    /// Fit the toy model on the triples and save the checkpoint to `paths.model`.
    Fit,
    /// Apply every request in order and save the edited checkpoint.
    Edit,
    /// Score the edited checkpoint against the original.
    Evaluate,
    /// Run fit, edit and evaluate for each value of one hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1.., allow_hyphen_values = true)]
        values: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Curvature,
    Tau,
}

/// Every report carries the resolved config next to its payload.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    seed: u64,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_report<T: Serialize>(cfg: &RunConfig, path: &Path, body: T) -> Result<()> {
    let text = to_json_pretty(&Report { seed: cfg.seed, config: cfg, body })?;
    write_atomic(path, text.as_bytes())
}

fn ensure_dir(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Schema { .. } => 1,
        e if e.is_numeric() => 3,
        Error::Domain(_) => 3,
        _ => 2,
    }
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let data = BenchData::generate(cfg)?;
    data.write(&cfg.paths.out_dir)?;
    eprintln!(
        "wrote {} triples, {} requests, {} chains to {}",
        data.triples.len(),
        data.requests.len(),
        data.chains.len(),
        cfg.paths.out_dir.display()
    );
    Ok(())
}

fn build(cfg: &RunConfig) -> Result<()> {
    let data = BenchData::load(cfg)?;
    let graph = build_graph(cfg, &data.triples)?;
    let dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("graph.json"), to_json_pretty(&graph.dump())?.as_bytes())?;
    let summary = graph.summary();
    write_report(cfg, &dir.join("graph_summary.json"), &summary)?;
    eprintln!(
        "graph: {} nodes, {} edges ({} triple edges, {} self-loops)",
        summary.nodes, summary.edges, summary.triple_edges, summary.self_loops
    );
    Ok(())
}

fn fit(cfg: &RunConfig) -> Result<()> {
    let data = BenchData::load(cfg)?;
    let (model, report) = fit_model(cfg, &data.triples)?;
    ensure_dir(&cfg.paths.model)?;
    model.save(&cfg.paths.model)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    write_report(cfg, &cfg.paths.out_dir.join("fit.json"), &report)?;
    eprintln!("fit: accuracy {:.4}, final loss {:.4}", report.accuracy, report.final_loss);
    Ok(())
}

fn edit(cfg: &RunConfig) -> Result<()> {
    let data = BenchData::load(cfg)?;
    let model = ToyModel::load(&cfg.paths.model)?;
    let graph = build_graph(cfg, &data.triples)?;
    let started = Instant::now();
    let batch = edit_batch(cfg, &model, &graph, &data.triples, &data.requests, |r| match (&r.outcome, &r.error) {
        (Some(o), _) => eprintln!("case {}: ok, {} cycles, loss {:.4}", r.case_id, o.cycles, o.final_loss),
        (None, e) => eprintln!("case {}: error: {}", r.case_id, e.as_deref().unwrap_or("unknown")),
    })?;
    ensure_dir(&cfg.paths.edited_model)?;
    batch.model.save(&cfg.paths.edited_model)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    let mut log = String::new();
    for r in &batch.records {
        log.push_str(&to_json_line(r)?);
    }
    write_atomic(&cfg.paths.out_dir.join("edits.jsonl"), log.as_bytes())?;
    let failed = batch.records.iter().filter(|r| r.status == Status::Error).count();
    eprintln!("{} edits, {failed} failed, {:.1}s", batch.records.len(), started.elapsed().as_secs_f64());
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<EditRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    std::fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let data = BenchData::load(cfg)?;
    let original = ToyModel::load(&cfg.paths.model)?;
    let edited = ToyModel::load(&cfg.paths.edited_model)?;
    let dir = &cfg.paths.out_dir;
    let records = read_records(&dir.join("edits.jsonl"))?;
    let ev = evaluate(cfg, &edited, Some(&original), &data, &records)?;

    let mut cases = String::new();
    for c in &ev.cases {
        let value = serde_json::to_value(c)?;
        validate_case_json(&value).map_err(|message| Error::Schema { case_id: c.case_id, message })?;
        cases.push_str(&to_json_line(c)?);
    }
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("cases.jsonl"), cases.as_bytes())?;
    write_atomic(&dir.join("aggregate.json"), to_json_pretty(&ev.aggregate)?.as_bytes())?;
    write_atomic(&dir.join("rates.csv"), rates_csv(&ev.rates)?.as_bytes())?;
    let a = &ev.aggregate;
    eprintln!("Eff {:.2}  Gen {:.2}  Spec {:.2}  Port {:.2}  EDS {:.2}", a.eff, a.gen, a.spec, a.port, a.eds);
    Ok(())
}

fn sweep_cmd(cfg: &RunConfig, axis: Axis, values: &[f64]) -> Result<()> {
    let data = BenchData::load(cfg)?;
    let (axis, name) = match axis {
        Axis::Curvature => (SweepAxis::Curvature, "curvature"),
        Axis::Tau => (SweepAxis::Tau, "tau"),
    };
    let rows = sweep(cfg, axis, values, &data)?;
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    write_atomic(&cfg.paths.out_dir.join(format!("sweep_{name}.csv")), sweep_csv(&rows)?.as_bytes())?;
    write_report(cfg, &cfg.paths.out_dir.join(format!("sweep_{name}.json")), serde_json::json!({ "rows": rows }))?;
    for r in &rows {
        match r.eds {
            Some(e) => eprintln!("{name} = {}: EDS {e:.3}", r.value),
            None => eprintln!("{name} = {}: error: {}", r.value, r.error.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let Some(path) = cli.config else {
        Cli::command().error(ErrorKind::MissingRequiredArgument, "--config <CONFIG> is required").exit()
    };
    let mut cfg = RunConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.paths.out_dir = out;
    }
    match cli.command {
        Command::Generate => generate(&cfg),
        Command::BuildGraph => build(&cfg),
        Command::Fit => fit(&cfg),
        Command::Edit => edit(&cfg),
        Command::Evaluate => evaluate_cmd(&cfg),
        Command::Sweep { axis, values } => sweep_cmd(&cfg, axis, &values),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
