use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use apb_core::compressor::Scorer;
use apb_core::harness::{
    emit_report, render_reports, run_experiment, save_config, sweep_presets, NeedleSpec, ReportFormat,
    RunConfig,
};
use apb_core::simnet::Schedule;
use apb_core::strategies::StrategyKind;
use apb_core::{ApbError, Result};

/// Simulate sequence-parallel long-context prefill on a toy transformer.
///
/// Flags override values read from --config.
#[derive(Debug, Parser)]
#[command(name = "apb", version)]
struct Cli {
    /// full | ring | ulysses | star | apb
    #[arg(long, value_parser = parse::<StrategyKind>)]
    strategy: Option<StrategyKind>,
    /// Number of simulated hosts (H)
    #[arg(long)]
    hosts: Option<usize>,
    /// Anchor length l_a (defaults to a quarter block)
    #[arg(long)]
    anchor_len: Option<usize>,
    /// Passing length l_p (required for apb)
    #[arg(long)]
    passing_len: Option<usize>,
    /// retain | random | oracle
    #[arg(long, value_parser = parse::<Scorer>)]
    scorer: Option<Scorer>,
    /// Embed the query in anchors (default on)
    #[arg(long, overrides_with = "no_embed_query")]
    embed_query: bool,
    /// Leave the query out of anchors
    #[arg(long)]
    no_embed_query: bool,
    /// Disable anchor blocks
    #[arg(long)]
    no_anchor: bool,
    /// Disable passing blocks
    #[arg(long)]
    no_passing: bool,
    /// Total input length n (document plus query)
    #[arg(long)]
    seq_len: Option<usize>,
    /// Query length l_q taken off the end of the input
    #[arg(long)]
    query_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weights file; seeded weights are used otherwise
    #[arg(long)]
    weights: Option<PathBuf>,
    /// 32K | 64K | 128K | 256K | 512K
    #[arg(long)]
    preset: Option<String>,
    /// Compare final hidden states against single-host prefill
    #[arg(long)]
    compare_reference: bool,
    /// json | csv
    #[arg(long, value_parser = parse::<ReportFormat>)]
    report: Option<ReportFormat>,
    /// Report path; standard output otherwise
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Needle span start inside the document
    #[arg(long, requires = "needle_len")]
    needle_start: Option<usize>,
    #[arg(long, requires = "needle_start")]
    needle_len: Option<usize>,
    /// forward | reverse | parallel
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<Schedule>,
    /// Read a `key = value` configuration file first
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the resolved configuration here and exit
    #[arg(long)]
    write_config: Option<PathBuf>,
    /// Emit formula FLOPs for every preset instead of running
    #[arg(long)]
    sweep: bool,
}

fn parse<T: std::str::FromStr<Err = ApbError>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: ApbError| e.to_string())
}

fn parse_schedule(s: &str) -> std::result::Result<Schedule, String> {
    RunConfig::parse(&format!("schedule = {s}"))
        .map(|c| c.schedule)
        .map_err(|e| e.to_string())
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path).map_err(|source| ApbError::Io {
            path: path.display().to_string(),
            source,
        })?)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &cli.preset {
        cfg.apply_preset(p)?;
    }
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = cli.$flag.clone() { cfg.$field = v; })*
        };
    }
    set!(strategy => strategy, hosts => hosts, scorer => scorer, seq_len => seq_len,
         query_len => query_len, seed => seed, report => report, max_new_tokens => max_new_tokens,
         schedule => schedule);
    if cli.anchor_len.is_some() {
        cfg.anchor_len = cli.anchor_len;
    }
    if cli.passing_len.is_some() {
        cfg.passing_len = cli.passing_len;
    }
    if cli.weights.is_some() {
        cfg.weights = cli.weights.clone();
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if let (Some(start), Some(len)) = (cli.needle_start, cli.needle_len) {
        cfg.needle = Some(NeedleSpec { start, len });
    }
    if cli.embed_query {
        cfg.embed_query = true;
    }
    if cli.no_embed_query {
        cfg.embed_query = false;
    }
    if cli.no_anchor {
        cfg.use_anchor = false;
    }
    if cli.no_passing {
        cfg.use_passing = false;
    }
    if cli.compare_reference {
        cfg.compare_reference = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    // A sweep only evaluates formulas at the preset lengths.
    if !cli.sweep {
        cfg.validate()?;
    }
    if let Some(path) = &cli.write_config {
        return save_config(&cfg, path);
    }
    let reports = if cli.sweep {
        sweep_presets(cfg.strategy)
    } else {
        vec![run_experiment(&cfg)?.report]
    };
    match &cfg.out {
        Some(path) => emit_report(&reports, cfg.report, path),
        None => {
            print!("{}", render_reports(&reports, cfg.report, true)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("apb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
