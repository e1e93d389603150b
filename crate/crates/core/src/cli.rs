//! Command-line driver.
//!
//! Every subcommand writes one JSON document `{ "manifest": .., "result": .. }`
//! to `--out` (or stdout when `--out` is absent). With `--out`, a copy of the
//! manifest goes to `<stem>.manifest.json` and tabular data to
//! `<stem>.<table>.csv` next to it. `synth` and `convert` write a data file
//! to `--out` and its manifest to `<file>.manifest.json`.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error. Errors are printed to
//! stderr as `error[Code]: message`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    ambiguous_select, compare_bases, kmeans_select, random_select, BasisMethod, ComparisonTable,
    Histogram, Summary, Space, HISTOGRAM_BINS,
};
use crate::error::{Error, Result};
use crate::feature_model::{validate, GroupKey, Hyperparams, PairedFeatureSet, ValidationReport};
use crate::io::{read_feature_set, write_feature_set, Precision, RunConfigFile};
use crate::pgm::generate_all_groups;
use crate::rdm::{
    group_operators, project_all, robust_weights, total_loss, AdaptationMap, LossValues,
    ProjectionMode,
};
use crate::sim::{report_metrics, run_distillation, synth_generate, SimConfig, SimReport, SimTrace};
use crate::VERSION;

#[derive(Debug, Parser)]
#[command(name = "tsproto", version, about = "Prototype selection and projection-based distillation losses over paired feature sets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input feature set (`.csv` or PFS1) or, for `report`, a `simulate` output.
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    /// Primary JSON output (or the data file for `synth` / `convert`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restricts the run to one `class:level` group.
    #[arg(long, global = true)]
    group: Option<String>,
    /// Prototypes per group.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Cross-space consistency weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Basis method for `select`.
    #[arg(long, global = true)]
    method: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a feature set against every invariant.
    Validate,
    /// Prototype (or baseline basis) indices per group.
    Select,
    /// Per-instance projection coefficients in both spaces.
    Project,
    /// Per-instance robustness weights.
    Weights,
    /// Global, local-feature and response losses with an identity adaptation map.
    Losses,
    /// Relation discrepancy of prototypes against the baseline bases.
    CompareBases,
    /// Run the distillation loop on the input set or a synthetic fixture.
    Simulate,
    /// Metrics from a `simulate` output.
    Report {
        /// Feature set the simulation ran on; defaults to its recorded source.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write the synthetic fixture to `--out`.
    Synth {
        /// Store 32-bit floats in PFS1 output.
        #[arg(long)]
        f32: bool,
    },
    /// Re-encode `--in` as `--out` (CSV or PFS1 by extension).
    Convert {
        /// Store 32-bit floats in PFS1 output.
        #[arg(long)]
        f32: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Select => "select",
            Command::Project => "project",
            Command::Weights => "weights",
            Command::Losses => "losses",
            Command::CompareBases => "compare-bases",
            Command::Simulate => "simulate",
            Command::Report { .. } => "report",
            Command::Synth { .. } => "synth",
            Command::Convert { .. } => "convert",
        }
    }
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e.root() {
            Error::InvalidConfig(_) | Error::Toml(_) => Failure::Usage(format!("[{}]: {e}", e.code())),
            _ => Failure::Data(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(format!("[Usage]: {}", msg.into())))
}

/// Effective configuration recorded with every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seeds: Vec<u64>,
    pub hyper: Hyperparams,
    pub sim: SimConfig,
    pub input: Option<String>,
    pub group: Option<GroupKey>,
    pub method: Option<BasisMethod>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub manifest: Manifest,
    pub result: T,
}

struct Ctx {
    manifest: Manifest,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn hyper(&self) -> &Hyperparams {
        &self.manifest.hyper
    }

    fn seed(&self) -> u64 {
        self.manifest.seeds.first().copied().unwrap_or(0)
    }

    fn input(&self) -> CliResult<&Path> {
        match &self.input {
            Some(p) => Ok(p),
            None => usage(format!("`{}` needs --in", self.manifest.subcommand)),
        }
    }

    fn out(&self) -> CliResult<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => usage(format!("`{}` needs --out", self.manifest.subcommand)),
        }
    }

    /// Input set, restricted to `--group` when given.
    fn load_set(&self) -> CliResult<PairedFeatureSet> {
        let set = read_feature_set(self.input()?)?;
        set.ensure_valid()?;
        match self.manifest.group {
            None => Ok(set),
            Some(g) => {
                let records: Vec<_> = set.records.into_iter().filter(|r| r.group == g).collect();
                if records.is_empty() {
                    return usage(format!("group {g} has no records"));
                }
                Ok(PairedFeatureSet::new(set.dim_t, set.dim_s, records))
            }
        }
    }

    /// `<stem>.<suffix>` beside a JSON output, `<file>.<suffix>` beside any
    /// other output so that data files sharing a stem do not collide.
    fn sibling(&self, suffix: &str) -> Option<PathBuf> {
        let out = self.out.as_ref()?;
        let is_json = out.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let base = if is_json { out.file_stem() } else { out.file_name() };
        let base = base.map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Some(out.with_file_name(format!("{base}.{suffix}")))
    }

    fn write_manifest(&self) -> CliResult<()> {
        if let Some(path) = self.sibling("manifest.json") {
            write_json(&path, &self.manifest)?;
        }
        Ok(())
    }

    fn emit<T: Serialize>(&self, result: T) -> CliResult<()> {
        let env = Envelope {
            manifest: self.manifest.clone(),
            result,
        };
        match &self.out {
            Some(path) => write_json(path, &env)?,
            None => println!("{}", to_json(&env)?),
        }
        self.write_manifest()
    }

    fn table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        if let Some(path) = self.sibling(&format!("{name}.csv")) {
            let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
            w.write_record(header).map_err(Error::from)?;
            for row in rows {
                w.write_record(row).map_err(Error::from)?;
            }
            w.flush().map_err(Error::from)?;
        }
        Ok(())
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = to_json(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn histogram_rows(label: &str, h: &Histogram) -> Vec<Vec<String>> {
    h.counts
        .iter()
        .enumerate()
        .map(|(b, c)| vec![label.to_string(), num(h.edges[b]), num(h.edges[b + 1]), c.to_string()])
        .collect()
}

fn build_ctx(cli: &Cli) -> CliResult<Ctx> {
    let c = &cli.common;
    let file = match &c.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let mut hyper = file.hyper;
    if let Some(k) = c.k {
        hyper.k = k;
    }
    if let Some(l) = c.lambda {
        hyper.lambda = l;
    }
    hyper.check()?;
    let mut seeds = file.seeds.clone();
    if let Some(s) = c.seed {
        seeds = vec![s];
    }
    if seeds.is_empty() {
        return usage("at least one seed is required");
    }
    let mut sim = file.sim.clone();
    if let Some(s) = c.seed {
        sim = sim.with_seed(s);
    }
    sim.check()?;
    let group = c.group.as_deref().map(str::parse).transpose()?;
    let method = c.method.as_deref().map(str::parse).transpose()?;
    let input = c.input.clone().or(file.input);
    let out = c.out.clone().or(file.output);
    Ok(Ctx {
        manifest: Manifest {
            tool: "tsproto".into(),
            version: VERSION.into(),
            subcommand: cli.command.name().into(),
            seeds,
            hyper,
            sim,
            input: input.as_ref().map(|p| p.display().to_string()),
            group,
            method,
        },
        input,
        out,
    })
}

#[derive(Serialize)]
struct GroupCount {
    group: GroupKey,
    records: usize,
}

#[derive(Serialize)]
struct ValidateResult {
    valid: bool,
    records: usize,
    dim_t: usize,
    dim_s: usize,
    num_logits: Option<usize>,
    ambiguous_flags: bool,
    groups: Vec<GroupCount>,
    report: ValidationReport,
}

fn cmd_validate(ctx: &Ctx) -> CliResult<()> {
    let set = read_feature_set(ctx.input()?)?;
    let report = validate(&set);
    let valid = report.is_valid();
    let groups = set
        .members_by_group()
        .into_iter()
        .map(|(group, m)| GroupCount {
            group,
            records: m.len(),
        })
        .collect();
    ctx.emit(ValidateResult {
        valid,
        records: set.len(),
        dim_t: set.dim_t,
        dim_s: set.dim_s,
        num_logits: set.num_logits(),
        ambiguous_flags: set.has_ambiguous_flags(),
        groups,
        report: report.clone(),
    })?;
    if valid {
        Ok(())
    } else {
        Err(Failure::Data(Error::Invalid(report)))
    }
}

#[derive(Serialize)]
struct SelectedGroup {
    group: GroupKey,
    indices: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    objectives: Option<Vec<f64>>,
    capped: bool,
}

#[derive(Serialize)]
struct SelectResult {
    method: BasisMethod,
    k: usize,
    lambda: f64,
    groups: Vec<SelectedGroup>,
}

fn cmd_select(ctx: &Ctx) -> CliResult<()> {
    let set = ctx.load_set()?;
    let hyper = ctx.hyper();
    let method = ctx.manifest.method.unwrap_or(BasisMethod::Prototypes);
    let groups = if method == BasisMethod::Prototypes {
        generate_all_groups(&set, hyper)?
            .into_values()
            .map(|p| SelectedGroup {
                group: p.group,
                indices: p.indices,
                initial_objective: Some(p.initial_objective),
                objectives: Some(p.objectives),
                capped: p.capped,
            })
            .collect::<Vec<_>>()
    } else {
        let seed = ctx.seed();
        set.members_by_group()
            .into_iter()
            .map(|(g, members)| {
                let k = hyper.k.min(members.len());
                let sel = match method {
                    BasisMethod::KmeansTeacher => kmeans_select(&set, g, Space::Teacher, k, seed),
                    BasisMethod::KmeansStudent => kmeans_select(&set, g, Space::Student, k, seed),
                    BasisMethod::Random => random_select(&set, g, k, seed),
                    _ => ambiguous_select(&set, g, k),
                }
                .map_err(|e| e.in_group(g))?;
                Ok(SelectedGroup {
                    group: g,
                    indices: sel.indices,
                    initial_objective: None,
                    objectives: None,
                    capped: k < hyper.k,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    let rows: Vec<Vec<String>> = groups
        .iter()
        .flat_map(|g| {
            g.indices.iter().enumerate().map(move |(rank, id)| {
                vec![
                    g.group.class_id.to_string(),
                    g.group.level_id.to_string(),
                    rank.to_string(),
                    id.to_string(),
                ]
            })
        })
        .collect();
    ctx.table("indices", &["class_id", "level_id", "rank", "instance_id"], &rows)?;
    ctx.emit(SelectResult {
        method,
        k: hyper.k,
        lambda: hyper.lambda,
        groups,
    })
}

#[derive(Serialize)]
struct InstanceProjection {
    instance_id: u64,
    group: GroupKey,
    lambda_t: Vec<f64>,
    lambda_s: Vec<f64>,
    discrepancy: f64,
    sigma: f64,
}

#[derive(Serialize)]
struct ProjectResult {
    lambda: f64,
    projection: ProjectionMode,
    instances: Vec<InstanceProjection>,
}

fn projections(ctx: &Ctx, set: &PairedFeatureSet) -> CliResult<Vec<InstanceProjection>> {
    let hyper = ctx.hyper();
    let protos = generate_all_groups(set, hyper)?;
    let ops = group_operators(set, &protos, hyper.lambda, hyper.projection)?;
    let pairs = project_all(set, &ops)?;
    let sigma = robust_weights(&pairs, hyper.robust_weighting);
    Ok(set
        .records
        .iter()
        .zip(pairs)
        .zip(sigma)
        .map(|((r, p), sigma)| InstanceProjection {
            instance_id: r.instance_id,
            group: r.group,
            discrepancy: p.discrepancy(),
            lambda_t: p.lambda_t,
            lambda_s: p.lambda_s,
            sigma,
        })
        .collect())
}

fn instance_rows(items: &[InstanceProjection]) -> Vec<Vec<String>> {
    items
        .iter()
        .map(|p| {
            vec![
                p.instance_id.to_string(),
                p.group.class_id.to_string(),
                p.group.level_id.to_string(),
                num(p.discrepancy),
                num(p.sigma),
            ]
        })
        .collect()
}

const INSTANCE_HEADER: [&str; 5] = ["instance_id", "class_id", "level_id", "discrepancy", "sigma"];

fn cmd_project(ctx: &Ctx) -> CliResult<()> {
    let set = ctx.load_set()?;
    let instances = projections(ctx, &set)?;
    ctx.table("instances", &INSTANCE_HEADER, &instance_rows(&instances))?;
    ctx.emit(ProjectResult {
        lambda: ctx.hyper().lambda,
        projection: ctx.hyper().projection,
        instances,
    })
}

#[derive(Serialize)]
struct WeightRow {
    instance_id: u64,
    group: GroupKey,
    discrepancy: f64,
    sigma: f64,
}

#[derive(Serialize)]
struct WeightsResult {
    robust_weighting: bool,
    summary: Summary,
    histogram: Histogram,
    instances: Vec<WeightRow>,
}

fn cmd_weights(ctx: &Ctx) -> CliResult<()> {
    let set = ctx.load_set()?;
    let items = projections(ctx, &set)?;
    let sigma: Vec<f64> = items.iter().map(|p| p.sigma).collect();
    let histogram = Histogram::build(&sigma, 0.0, 1.0, HISTOGRAM_BINS);
    ctx.table("instances", &INSTANCE_HEADER, &instance_rows(&items))?;
    ctx.table(
        "histogram",
        &["series", "bin_lo", "bin_hi", "count"],
        &histogram_rows("sigma", &histogram),
    )?;
    ctx.emit(WeightsResult {
        robust_weighting: ctx.hyper().robust_weighting,
        summary: Summary::of(&sigma),
        histogram,
        instances: items
            .into_iter()
            .map(|p| WeightRow {
                instance_id: p.instance_id,
                group: p.group,
                discrepancy: p.discrepancy,
                sigma: p.sigma,
            })
            .collect(),
    })
}

#[derive(Serialize)]
struct LossesResult {
    losses: LossValues,
    alphas: [f64; 3],
    sigma: Summary,
    discrepancy: Summary,
}

fn cmd_losses(ctx: &Ctx) -> CliResult<()> {
    let set = ctx.load_set()?;
    let hyper = ctx.hyper();
    let protos = generate_all_groups(&set, hyper)?;
    let adapt = AdaptationMap::identity(set.dim_t, set.dim_s, false);
    let br = total_loss(&set, &protos, &adapt, hyper)?;
    ctx.emit(LossesResult {
        losses: br.values(),
        alphas: br.alphas,
        sigma: Summary::of(&br.sigma),
        discrepancy: Summary::of(&br.discrepancy),
    })
}

fn cmd_compare(ctx: &Ctx) -> CliResult<()> {
    let set = ctx.load_set()?;
    let table: ComparisonTable = compare_bases(&set, ctx.hyper(), &ctx.manifest.seeds)?;
    let mut hist = Vec::new();
    let mut summary = Vec::new();
    for row in &table.rows {
        hist.extend(histogram_rows(row.method.as_str(), &row.histogram));
        let s = &row.summary;
        summary.push(vec![
            row.method.to_string(),
            s.count.to_string(),
            num(s.mean),
            num(s.median),
            num(s.min),
            num(s.max),
        ]);
    }
    ctx.table("histogram", &["series", "bin_lo", "bin_hi", "count"], &hist)?;
    ctx.table("summary", &["method", "count", "mean", "median", "min", "max"], &summary)?;
    ctx.emit(table)
}

/// Where a simulation's feature set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub source: DataSource,
    pub report: SimReport,
    pub trace: SimTrace,
}

fn loss_rows(trace: &SimTrace) -> Vec<Vec<String>> {
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    trace
        .epochs
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                u8::from(e.refreshed).to_string(),
                num(e.loss.global),
                num(e.loss.local_feat),
                num(e.loss.local_resp),
                num(e.loss.total),
                num(e.mean_discrepancy),
                opt(e.sigma_mean_clean),
                opt(e.sigma_mean_ambiguous),
            ]
        })
        .collect()
}

const LOSS_HEADER: [&str; 9] = [
    "epoch",
    "refreshed",
    "global",
    "local_feat",
    "local_resp",
    "total",
    "mean_discrepancy",
    "sigma_mean_clean",
    "sigma_mean_ambiguous",
];

fn cmd_simulate(ctx: &Ctx) -> CliResult<()> {
    let (set, source) = match &ctx.input {
        Some(path) => (ctx.load_set()?, DataSource::File(path.display().to_string())),
        None => (synth_generate(&ctx.manifest.sim)?, DataSource::Synthetic),
    };
    let trace = run_distillation(&set, ctx.hyper(), &ctx.manifest.sim)?;
    let report = report_metrics(&trace, &set)?;
    ctx.table("losses", &LOSS_HEADER, &loss_rows(&trace))?;
    ctx.emit(SimulateOutput {
        source,
        report,
        trace,
    })
}

fn cmd_report(ctx: &Ctx, data: Option<&Path>) -> CliResult<()> {
    let sim: Envelope<SimulateOutput> = read_json(ctx.input()?)?;
    let trace = sim.result.trace;
    let set = match (data, &sim.result.source) {
        (Some(p), _) => read_feature_set(p)?,
        (None, DataSource::File(p)) => read_feature_set(Path::new(p))?,
        (None, DataSource::Synthetic) => synth_generate(&trace.config)?,
    };
    let set = match sim.manifest.group {
        Some(g) => PairedFeatureSet::new(
            set.dim_t,
            set.dim_s,
            set.records.into_iter().filter(|r| r.group == g).collect(),
        ),
        None => set,
    };
    let report = report_metrics(&trace, &set)?;
    ctx.table("losses", &LOSS_HEADER, &loss_rows(&trace))?;
    ctx.emit(report)
}

#[derive(Serialize)]
struct DataResult {
    path: String,
    records: usize,
    dim_t: usize,
    dim_s: usize,
    precision: Precision,
}

fn precision(f32: bool) -> Precision {
    if f32 {
        Precision::F32
    } else {
        Precision::F64
    }
}

fn data_written(ctx: &Ctx, set: &PairedFeatureSet, path: &Path, precision: Precision) -> CliResult<()> {
    let result = DataResult {
        path: path.display().to_string(),
        records: set.len(),
        dim_t: set.dim_t,
        dim_s: set.dim_s,
        precision,
    };
    ctx.write_manifest()?;
    println!(
        "{}",
        to_json(&Envelope {
            manifest: ctx.manifest.clone(),
            result,
        })?
    );
    Ok(())
}

fn cmd_synth(ctx: &Ctx, f32: bool) -> CliResult<()> {
    let out = ctx.out()?;
    let set = synth_generate(&ctx.manifest.sim)?;
    write_feature_set(out, &set, precision(f32))?;
    data_written(ctx, &set, out, precision(f32))
}

fn cmd_convert(ctx: &Ctx, f32: bool) -> CliResult<()> {
    let out = ctx.out()?;
    let set = ctx.load_set()?;
    write_feature_set(out, &set, precision(f32))?;
    data_written(ctx, &set, out, precision(f32))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let ctx = build_ctx(cli)?;
    match &cli.command {
        Command::Validate => cmd_validate(&ctx),
        Command::Select => cmd_select(&ctx),
        Command::Project => cmd_project(&ctx),
        Command::Weights => cmd_weights(&ctx),
        Command::Losses => cmd_losses(&ctx),
        Command::CompareBases => cmd_compare(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Report { data } => cmd_report(&ctx, data.as_deref()),
        Command::Synth { f32 } => cmd_synth(&ctx, *f32),
        Command::Convert { f32 } => cmd_convert(&ctx, *f32),
    }
}

fn report_error(e: &Error) {
    eprintln!("error[{}]: {e}", e.code());
    if let Error::Invalid(report) = e.root() {
        for v in report.violations.iter().take(20) {
            match v.record {
                Some(i) => eprintln!("  record {i}: {}", v.reason),
                None => eprintln!("  {}", v.reason),
            }
        }
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error{msg}");
            eprintln!("run `tsproto --help` for usage");
            2
        }
        Err(Failure::Data(e)) => {
            report_error(&e);
            1
        }
    }
}
