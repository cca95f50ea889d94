//! Run configuration, synthetic workloads, the experiment runner and report
//! emission.
//!
//! Configuration files are line oriented: `key = value`, `#` starts a
//! comment, keys are the long CLI flag names without the leading dashes.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compressor::Scorer;
use crate::costmodel::{flops_apb, flops_full, flops_star, speed_metric, CostParams, CostReport};
use crate::error::{config, ApbError, Result};
use crate::layout::{block_ranges, containing_host, split_document_query};
use crate::model::{reference_prefill, ModelConfig, ModelWeights, DEFAULT_RETAINING_INTERMEDIATE};
use crate::simnet::Schedule;
use crate::strategies::{generate_from, run_prefill, Generation, PrefillResult, StrategyConfig, StrategyKind};

/// Number of distinguished ids at the top of the vocabulary reserved for
/// needle patterns; filler tokens never use them.
pub const NEEDLE_IDS: usize = 4;

/// A sequence-length preset with its anchor and passing lengths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub n: usize,
    pub hosts: usize,
    pub anchor_len: usize,
    pub passing_len: usize,
}

impl Preset {
    pub fn block_len(&self) -> usize {
        self.n / self.hosts
    }

    pub fn cost_params(&self) -> CostParams {
        CostParams {
            hosts: self.hosts as u64,
            anchor_len: self.anchor_len as u64,
            passing_len: self.passing_len as u64,
            ..CostParams::llama_8b(self.n as u64)
        }
    }
}

const K: usize = 1024;

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "32K",
        n: 32 * K,
        hosts: 8,
        anchor_len: K,
        passing_len: K / 2,
    },
    Preset {
        name: "64K",
        n: 64 * K,
        hosts: 8,
        anchor_len: 2 * K,
        passing_len: K,
    },
    Preset {
        name: "128K",
        n: 128 * K,
        hosts: 8,
        anchor_len: 4 * K,
        passing_len: 2 * K,
    },
    Preset {
        name: "256K",
        n: 256 * K,
        hosts: 8,
        anchor_len: 8 * K,
        passing_len: 4 * K,
    },
    Preset {
        name: "512K",
        n: 512 * K,
        hosts: 8,
        anchor_len: 8 * K,
        passing_len: 8 * K,
    },
];

pub fn preset(name: &str) -> Result<Preset> {
    PRESETS
        .iter()
        .find(|p| p.name.eq_ignore_ascii_case(name))
        .copied()
        .ok_or_else(|| config(format!("preset: unknown preset {name:?} (32K|64K|128K|256K|512K)")))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = ApbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(config(format!("report: unknown format {other:?} (json|csv)"))),
        }
    }
}

impl std::fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

/// Needle span inside the document.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeedleSpec {
    pub start: usize,
    pub len: usize,
}

impl NeedleSpec {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub strategy: StrategyKind,
    pub hosts: usize,
    pub anchor_len: Option<usize>,
    pub passing_len: Option<usize>,
    pub scorer: Scorer,
    pub embed_query: bool,
    pub use_anchor: bool,
    pub use_passing: bool,
    pub seq_len: usize,
    pub query_len: usize,
    pub seed: u64,
    pub weights: Option<PathBuf>,
    pub preset: Option<String>,
    pub compare_reference: bool,
    pub report: ReportFormat,
    pub out: Option<PathBuf>,
    pub max_new_tokens: usize,
    pub needle: Option<NeedleSpec>,
    pub schedule: Schedule,
    pub model: ModelConfig,
    pub retaining_intermediate: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Full,
            hosts: 1,
            anchor_len: None,
            passing_len: None,
            scorer: Scorer::Retain,
            embed_query: true,
            use_anchor: true,
            use_passing: true,
            seq_len: 256,
            query_len: 16,
            seed: 0,
            weights: None,
            preset: None,
            compare_reference: false,
            report: ReportFormat::Json,
            out: None,
            max_new_tokens: 1,
            needle: None,
            schedule: Schedule::Forward,
            model: ModelConfig::toy(),
            retaining_intermediate: DEFAULT_RETAINING_INTERMEDIATE,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config(format!("{key}: invalid value {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn parse_schedule(value: &str) -> Result<Schedule> {
    match value {
        "forward" => Ok(Schedule::Forward),
        "reverse" => Ok(Schedule::Reverse),
        "parallel" => Ok(Schedule::Parallel),
        other => Err(config(format!(
            "schedule: unknown schedule {other:?} (forward|reverse|parallel)"
        ))),
    }
}

pub fn schedule_name(s: Schedule) -> &'static str {
    match s {
        Schedule::Forward => "forward",
        Schedule::Reverse => "reverse",
        Schedule::Parallel => "parallel",
    }
}

impl RunConfig {
    /// Apply a preset: 8 hosts, its sequence length and anchor/passing lengths.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let p = preset(name)?;
        self.preset = Some(p.name.to_string());
        self.seq_len = p.n;
        self.hosts = p.hosts;
        self.anchor_len = Some(p.anchor_len);
        self.passing_len = Some(p.passing_len);
        Ok(())
    }

    /// Strict parse of the configuration text. A `preset` line is applied
    /// first; every other line overrides it. Does not validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(&str, &str)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(config(format!("{key}: duplicate key")));
            }
            entries.push((key, value));
        }

        let mut cfg = RunConfig::default();
        if let Some((_, name)) = entries.iter().find(|(k, _)| *k == "preset") {
            cfg.apply_preset(name)?;
        }
        let mut m = [
            cfg.model.layers,
            cfg.model.hidden,
            cfg.model.heads,
            cfg.model.kv_heads,
            cfg.model.intermediate,
            cfg.model.vocab,
        ];
        let mut theta = cfg.model.rope_theta;
        let (mut needle_start, mut needle_len) = (None, None);
        for (key, value) in entries {
            match key {
                "preset" => {}
                "strategy" => cfg.strategy = value.parse()?,
                "hosts" => cfg.hosts = parse_value(key, value)?,
                "anchor-len" => cfg.anchor_len = Some(parse_value(key, value)?),
                "passing-len" => cfg.passing_len = Some(parse_value(key, value)?),
                "scorer" => cfg.scorer = value.parse()?,
                "embed-query" => cfg.embed_query = parse_bool(key, value)?,
                "anchor" => cfg.use_anchor = parse_bool(key, value)?,
                "passing" => cfg.use_passing = parse_bool(key, value)?,
                "seq-len" => cfg.seq_len = parse_value(key, value)?,
                "query-len" => cfg.query_len = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "weights" => cfg.weights = Some(PathBuf::from(value)),
                "compare-reference" => cfg.compare_reference = parse_bool(key, value)?,
                "report" => cfg.report = value.parse()?,
                "out" => cfg.out = Some(PathBuf::from(value)),
                "max-new-tokens" => cfg.max_new_tokens = parse_value(key, value)?,
                "needle-start" => needle_start = Some(parse_value(key, value)?),
                "needle-len" => needle_len = Some(parse_value(key, value)?),
                "schedule" => cfg.schedule = parse_schedule(value)?,
                "layers" => m[0] = parse_value(key, value)?,
                "hidden" => m[1] = parse_value(key, value)?,
                "heads" => m[2] = parse_value(key, value)?,
                "kv-heads" => m[3] = parse_value(key, value)?,
                "intermediate" => m[4] = parse_value(key, value)?,
                "vocab" => m[5] = parse_value(key, value)?,
                "rope-theta" => theta = parse_value(key, value)?,
                "retaining-intermediate" => cfg.retaining_intermediate = parse_value(key, value)?,
                other => return Err(config(format!("{other}: unknown key"))),
            }
        }
        cfg.model = ModelConfig::new(m[0], m[1], m[2], m[3], m[4], m[5], theta)?;
        cfg.needle = match (needle_start, needle_len) {
            (Some(start), Some(len)) => Some(NeedleSpec { start, len }),
            (None, None) => None,
            _ => return Err(config("needle-start: needle-start and needle-len must be given together")),
        };
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# apb run configuration\n");
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(p) = &self.preset {
            put("preset", p);
        }
        put("strategy", &self.strategy);
        put("hosts", &self.hosts);
        if let Some(a) = self.anchor_len {
            put("anchor-len", &a);
        }
        if let Some(p) = self.passing_len {
            put("passing-len", &p);
        }
        put("scorer", &self.scorer);
        put("embed-query", &self.embed_query);
        put("anchor", &self.use_anchor);
        put("passing", &self.use_passing);
        put("seq-len", &self.seq_len);
        put("query-len", &self.query_len);
        put("seed", &self.seed);
        if let Some(w) = &self.weights {
            put("weights", &w.display());
        }
        put("compare-reference", &self.compare_reference);
        put("report", &self.report);
        if let Some(o) = &self.out {
            put("out", &o.display());
        }
        put("max-new-tokens", &self.max_new_tokens);
        if let Some(n) = self.needle {
            put("needle-start", &n.start);
            put("needle-len", &n.len);
        }
        put("schedule", &schedule_name(self.schedule));
        put("layers", &self.model.layers);
        put("hidden", &self.model.hidden);
        put("heads", &self.model.heads);
        put("kv-heads", &self.model.kv_heads);
        put("intermediate", &self.model.intermediate);
        put("vocab", &self.model.vocab);
        put("rope-theta", &self.model.rope_theta);
        put("retaining-intermediate", &self.retaining_intermediate);
        s
    }

    pub fn doc_len(&self) -> usize {
        self.seq_len.saturating_sub(self.query_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(config("seq-len: must be at least 1"));
        }
        if self.query_len >= self.seq_len {
            return Err(config(format!(
                "query-len: {} leaves no document in seq-len {}",
                self.query_len, self.seq_len
            )));
        }
        if self.hosts == 0 || self.hosts > self.doc_len() {
            return Err(config(format!(
                "hosts: {} hosts for a {}-token document",
                self.hosts,
                self.doc_len()
            )));
        }
        match self.strategy {
            StrategyKind::Full if self.hosts != 1 => {
                return Err(config("hosts: strategy full runs on exactly 1 host"));
            }
            StrategyKind::Apb if self.use_passing && self.passing_len.is_none() => {
                return Err(config("passing-len: required for strategy apb"));
            }
            StrategyKind::Star if self.passing_len.is_some_and(|p| p > 0) => {
                return Err(config("passing-len: strategy star has no passing blocks"));
            }
            StrategyKind::Ulysses if self.hosts > self.model.heads || !self.model.heads.is_multiple_of(self.hosts) => {
                return Err(config(format!(
                    "hosts: ulysses needs heads {} divisible by {} hosts",
                    self.model.heads, self.hosts
                )));
            }
            _ => {}
        }
        if let Some(a) = self.anchor_len {
            if a > self.doc_len() {
                return Err(config(format!("anchor-len: {a} exceeds document length {}", self.doc_len())));
            }
        }
        if let Some(n) = self.needle {
            if n.len == 0 || n.start + n.len > self.doc_len() {
                return Err(config(format!(
                    "needle-start: span {}..{} outside document of {} tokens",
                    n.start,
                    n.start + n.len,
                    self.doc_len()
                )));
            }
        }
        if self.model.vocab <= NEEDLE_IDS {
            return Err(config(format!("vocab: must exceed {NEEDLE_IDS}")));
        }
        Ok(())
    }

    /// Anchor length actually used: the configured one, or a quarter block.
    pub fn effective_anchor_len(&self) -> usize {
        self.anchor_len.unwrap_or_else(|| {
            block_ranges(self.doc_len(), self.hosts)
                .map(|r| r[0].len() / 4)
                .unwrap_or(0)
        })
    }

    pub fn strategy_config(&self) -> Result<StrategyConfig> {
        let base = match self.strategy {
            StrategyKind::Star => StrategyConfig::star(self.hosts, self.doc_len())?,
            StrategyKind::Apb => StrategyConfig {
                anchor_len: self.effective_anchor_len(),
                passing_len: if self.use_passing { self.passing_len.unwrap_or(0) } else { 0 },
                embed_query: self.embed_query,
                use_anchor: self.use_anchor,
                use_passing: self.use_passing,
                ..StrategyConfig::new(StrategyKind::Apb, self.hosts)
            },
            kind => StrategyConfig::new(kind, self.hosts),
        };
        Ok(StrategyConfig {
            scorer: self.scorer,
            seed: self.seed,
            needle: self.needle.map(|n| n.range()),
            schedule: self.schedule,
            ..base
        })
    }
}

/// Parse and validate a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|source| ApbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cfg = RunConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, cfg.to_text()).map_err(|source| ApbError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Token `i` of the repeating needle pattern.
pub fn needle_token(vocab: usize, i: usize) -> u32 {
    (vocab - NEEDLE_IDS + i % NEEDLE_IDS) as u32
}

/// Seeded uniform filler tokens below the needle ids, with the needle span
/// overwritten by the repeating needle pattern.
pub fn make_workload(n: usize, query_len: usize, seed: u64, vocab: usize, needle: Option<NeedleSpec>) -> Result<Vec<u32>> {
    if vocab <= NEEDLE_IDS {
        return Err(config(format!("vocab: must exceed {NEEDLE_IDS}")));
    }
    if query_len >= n {
        return Err(config(format!("query-len: {query_len} leaves no document in {n} tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler = (vocab - NEEDLE_IDS) as u32;
    let mut tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..filler)).collect();
    if let Some(spec) = needle {
        if spec.start + spec.len > n - query_len {
            return Err(config("needle-start: needle span outside the document"));
        }
        for (i, t) in tokens[spec.range()].iter_mut().enumerate() {
            *t = needle_token(vocab, i);
        }
    }
    Ok(tokens)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: CostReport,
    pub prefill: PrefillResult,
    pub generation: Option<Generation>,
}

fn formula_flops(c: &ModelConfig, doc_len: usize, strategy: &StrategyConfig, anchor_rows: usize) -> f64 {
    let p = CostParams {
        layers: c.layers as u64,
        n: doc_len as u64,
        hidden: c.hidden as u64,
        intermediate: c.intermediate as u64,
        group: c.group as u64,
        hosts: strategy.hosts as u64,
        anchor_len: anchor_rows as u64,
        passing_len: strategy.passing_len as u64,
    };
    match strategy.kind {
        StrategyKind::Full | StrategyKind::Ring | StrategyKind::Ulysses => flops_full(&p),
        StrategyKind::Star => flops_star(&p),
        StrategyKind::Apb => flops_apb(&p),
    }
}

/// Whether every host after the needle's host carries the whole needle in
/// its passing block at every layer.
fn needle_passed(prefill: &PrefillResult, needle: NeedleSpec, doc_len: usize) -> Result<Option<bool>> {
    if prefill.selections.is_empty() {
        return Ok(None);
    }
    let host = containing_host(doc_len, prefill.hosts(), needle.start + needle.len - 1)?;
    let ok = (0..prefill.selections.len()).all(|layer| {
        (host..prefill.hosts()).all(|h| {
            let sources = prefill.passing_sources(layer, h);
            needle.range().all(|i| sources.contains(&i))
        })
    });
    Ok(Some(ok))
}

/// Execute one configured run: build or load weights, generate the
/// workload, prefill, decode and assemble the report.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let weights = match &cfg.weights {
        Some(path) => ModelWeights::load(path)?,
        None => ModelWeights::seeded_with_retaining(cfg.model.clone(), cfg.seed, cfg.retaining_intermediate),
    };
    let c = weights.config().clone();
    let tokens = make_workload(cfg.seq_len, cfg.query_len, cfg.seed.wrapping_add(1), c.vocab, cfg.needle)?;
    let input = split_document_query(&tokens, cfg.query_len)?;
    let strategy = cfg.strategy_config()?;

    let t0 = Instant::now();
    let prefill = run_prefill(&input, &weights, &strategy)?;
    let prefill_s = t0.elapsed().as_secs_f64();

    let max_abs_err = if cfg.compare_reference {
        let reference = reference_prefill(&input.document, &weights)?;
        Some(prefill.hidden().max_abs_diff(&reference.hidden))
    } else {
        None
    };
    let needle = match cfg.needle {
        Some(n) => needle_passed(&prefill, n, input.document.len())?,
        None => None,
    };
    let anchor_rows = prefill.anchor_hidden.iter().map(|m| m.rows()).max().unwrap_or(0);

    let mut report = CostReport {
        strategy: strategy.kind.to_string(),
        n: input.document.len(),
        hosts: strategy.hosts,
        l_a: if strategy.use_anchor { strategy.anchor_len } else { 0 },
        l_p: strategy.passing_len,
        scorer: strategy.scorer.to_string(),
        formula_flops: formula_flops(&c, input.document.len(), &strategy, anchor_rows),
        measured_flops: prefill.measured_flops(),
        comm_elements: prefill.trace.volume(),
        prefill_s,
        decode_s: 0.0,
        speed: 0.0,
        checksum: prefill.checksum(),
        max_abs_err,
        anchor_rows: prefill.anchor_rows(),
        selected_digest: prefill.selection_digest(),
        needle_passed: needle,
        generated: String::new(),
    };

    let (prefill, generation) = if cfg.max_new_tokens > 0 {
        let t1 = Instant::now();
        let g = generate_from(prefill, &input.query, &weights, cfg.schedule, cfg.max_new_tokens, None)?;
        report.decode_s = t1.elapsed().as_secs_f64();
        report.generated = g.tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        (g.prefill.clone(), Some(g))
    } else {
        (prefill, None)
    };
    let produced = generation.as_ref().map_or(0, |g| g.tokens.len());
    let total = report.prefill_s + report.decode_s;
    // A clock too coarse to register the run is treated as one second.
    report.speed = if total > 0.0 {
        speed_metric(cfg.seq_len as u64, produced as u64, report.prefill_s, report.decode_s)?
    } else {
        speed_metric(cfg.seq_len as u64, produced as u64, 1.0, 0.0)?
    };
    Ok(ExperimentOutput {
        report,
        prefill,
        generation,
    })
}

/// Formula-only rows for every preset under `strategy`.
pub fn sweep_presets(strategy: StrategyKind) -> Vec<CostReport> {
    PRESETS
        .iter()
        .map(|p| {
            let params = p.cost_params();
            let (formula, l_a, l_p) = match strategy {
                StrategyKind::Apb => (flops_apb(&params), p.anchor_len, p.passing_len),
                StrategyKind::Star => (flops_star(&params), p.block_len(), 0),
                _ => (flops_full(&params), 0, 0),
            };
            CostReport {
                strategy: strategy.to_string(),
                n: p.n,
                hosts: if strategy == StrategyKind::Full { 1 } else { p.hosts },
                l_a,
                l_p,
                scorer: String::new(),
                formula_flops: formula,
                measured_flops: 0.0,
                comm_elements: 0,
                prefill_s: 0.0,
                decode_s: 0.0,
                speed: 0.0,
                checksum: String::new(),
                max_abs_err: None,
                anchor_rows: 0,
                selected_digest: String::new(),
                needle_passed: None,
                generated: String::new(),
            }
        })
        .collect()
}

const CSV_FIELDS: [&str; 14] = [
    "strategy",
    "n",
    "H",
    "l_a",
    "l_p",
    "scorer",
    "formula_flops",
    "measured_flops",
    "comm_elements",
    "prefill_s",
    "decode_s",
    "speed",
    "checksum",
    "max_abs_err",
];

fn csv_record(r: &CostReport) -> [String; 14] {
    [
        r.strategy.clone(),
        r.n.to_string(),
        r.hosts.to_string(),
        r.l_a.to_string(),
        r.l_p.to_string(),
        r.scorer.clone(),
        r.formula_flops.to_string(),
        r.measured_flops.to_string(),
        r.comm_elements.to_string(),
        r.prefill_s.to_string(),
        r.decode_s.to_string(),
        r.speed.to_string(),
        r.checksum.clone(),
        r.max_abs_err.map(|e| e.to_string()).unwrap_or_default(),
    ]
}

/// Render reports: a JSON object (array for several) or CSV rows with a
/// header when `header` is set.
pub fn render_reports(reports: &[CostReport], format: ReportFormat, header: bool) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let text = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(reports)
            };
            text.map(|t| t + "\n").map_err(|e| config(format!("report: {e}")))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| config(format!("report: {e}"));
            if header {
                w.write_record(CSV_FIELDS).map_err(io)?;
            }
            for r in reports {
                w.write_record(csv_record(r)).map_err(io)?;
            }
            let bytes = w.into_inner().map_err(|e| config(format!("report: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
    }
}

/// Write reports to `path`. JSON replaces the file; CSV appends rows and
/// writes the header only into an empty or new file.
pub fn emit_report(reports: &[CostReport], format: ReportFormat, path: &Path) -> Result<()> {
    let io = |source| ApbError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        ReportFormat::Json => fs::write(path, render_reports(reports, format, true)?).map_err(io),
        ReportFormat::Csv => {
            let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
            let text = render_reports(reports, format, fresh)?;
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            f.write_all(text.as_bytes()).map_err(io)
        }
    }
}
