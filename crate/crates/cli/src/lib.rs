//! Command-line front end for the fusemap mapper.
//!
//! Subcommands:
//! - `map`      — pruned dynamic-programming search for the optimal mapping
//! - `oracle`   — exhaustive enumeration of the same mapspace (small instances)
//! - `baseline` — reference heuristics (random, simulated annealing, genetic)
//! - `ablate`   — re-run the search with pruning stages disabled and compare
//! - `scaling`  — per-join cost across chain lengths, as a CSV series
//!
//! Reports are JSON and embed the workload and accelerator documents, so a
//! report alone is enough to reproduce the run. Given the same inputs and
//! seed, reports are byte-identical; only the `scaling` CSV contains measured
//! times and is exempt.

pub mod report;
pub mod tables;

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fusemap_core::baselines::{self, BaselineError, GaParams, Schedule};
use fusemap_core::ffm::{self, FfmError, SearchConfig};
use fusemap_core::{ArchSpec, Objective, Workload};

#[derive(Parser)]
#[command(
    name = "fusemap",
    version,
    about = "Fusion-aware optimal mapper for tensor-algebra cascades",
    propagate_version = true
)]
pub struct Cli {
    /// Worker threads for enumeration and joining. Overrides the
    /// FUSEMAP_THREADS environment variable; default: all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Find the optimal mapping by pruned dynamic-programming search
    Map(MapArgs),
    /// Exhaustively enumerate the mapspace and report the true optimum
    Oracle(OracleArgs),
    /// Run a reference search heuristic over the same mapspace
    Baseline(BaselineArgs),
    /// Re-run the search with pruning stages disabled and compare statistics
    Ablate(AblateArgs),
    /// Map matmul chains of several lengths and record per-join statistics
    Scaling(ScalingArgs),
}

/// Objective selector shared by every subcommand.
#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Energy,
    Latency,
    Edp,
}

impl ObjectiveArg {
    fn core(self) -> Objective {
        match self {
            ObjectiveArg::Energy => Objective::Energy,
            ObjectiveArg::Latency => Objective::Latency,
            ObjectiveArg::Edp => Objective::Edp,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ObjectiveArg::Energy => "energy",
            ObjectiveArg::Latency => "latency",
            ObjectiveArg::Edp => "edp",
        }
    }
}

/// Inputs and search limits shared by every search subcommand.
#[derive(Args)]
pub struct InputArgs {
    /// Workload description (JSON)
    #[arg(long)]
    pub workload: PathBuf,

    /// Accelerator description (JSON)
    #[arg(long)]
    pub arch: PathBuf,

    /// Optimization objective
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Energy)]
    pub objective: ObjectiveArg,

    /// Tiling loops allowed per rank above each memory level
    #[arg(long, default_value_t = 1)]
    pub max_loops_per_rank_per_level: usize,

    /// Keep the canonical loop order instead of exploring permutations
    #[arg(long)]
    pub no_permutations: bool,

    /// Abort if any Einsum enumerates more candidates than this
    #[arg(long)]
    pub max_candidates_per_einsum: Option<usize>,
}

impl InputArgs {
    fn load(&self) -> Result<(Workload, ArchSpec)> {
        let wtext = fs::read_to_string(&self.workload)
            .with_context(|| format!("reading workload file {}", self.workload.display()))?;
        let w = Workload::from_json(&wtext)
            .with_context(|| format!("parsing workload file {}", self.workload.display()))?;
        let atext = fs::read_to_string(&self.arch)
            .with_context(|| format!("reading accelerator file {}", self.arch.display()))?;
        let a = ArchSpec::from_json(&atext)
            .with_context(|| format!("parsing accelerator file {}", self.arch.display()))?;
        Ok((w, a))
    }

    fn config(&self, verify: bool) -> SearchConfig {
        SearchConfig {
            objective: self.objective.core(),
            max_loops_per_rank_per_level: self.max_loops_per_rank_per_level,
            explore_permutations: !self.no_permutations,
            max_candidates_per_einsum: self.max_candidates_per_einsum,
            skip_incompatible_joins: true,
            consolidate_reservations: true,
            verify_incremental_profiles: verify,
        }
    }
}

#[derive(Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Where to write the JSON report
    #[arg(long)]
    pub out: PathBuf,

    /// Search an explicit candidate table (JSON) instead of enumerating
    #[arg(long)]
    pub candidates: Option<PathBuf>,

    /// Write the buffer-usage timeline of the best mapping as CSV
    #[arg(long)]
    pub timeline: Option<PathBuf>,

    /// Recompute every incremental profile from the joined tree and fail
    /// loudly on any mismatch
    #[arg(long)]
    pub verify: bool,
}

#[derive(Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Where to write the JSON report
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct BaselineArgs {
    #[command(subcommand)]
    pub which: BaselineCmd,
}

#[derive(Subcommand)]
pub enum BaselineCmd {
    /// Uniform random sampling of compatible candidate combinations
    Random(RandomArgs),
    /// Simulated annealing with geometric cooling
    Sa(SaArgs),
    /// Genetic algorithm with crossover, mutation, and elitism
    Ga(GaArgs),
}

#[derive(Args)]
pub struct RandomArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Number of sampled mappings
    #[arg(long)]
    pub budget: usize,

    /// RNG seed; identical seeds reproduce the run exactly
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Where to write the JSON report
    #[arg(long)]
    pub out: PathBuf,

    /// Write the best-so-far curve as CSV (evaluations, best_objective)
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args)]
pub struct SaArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Number of proposed moves
    #[arg(long)]
    pub budget: usize,

    /// RNG seed; identical seeds reproduce the run exactly
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Where to write the JSON report
    #[arg(long)]
    pub out: PathBuf,

    /// Write the best-so-far curve as CSV (evaluations, best_objective)
    #[arg(long)]
    pub trace: Option<PathBuf>,

    /// Initial temperature; defaults to the seed mapping's objective value
    #[arg(long)]
    pub t0: Option<f64>,

    /// Geometric cooling factor applied after every move
    #[arg(long, default_value_t = 0.98)]
    pub cooling: f64,
}

#[derive(Args)]
pub struct GaArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Number of generations
    #[arg(long)]
    pub budget: usize,

    /// RNG seed; identical seeds reproduce the run exactly
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Where to write the JSON report
    #[arg(long)]
    pub out: PathBuf,

    /// Write the best-so-far curve as CSV (evaluations, best_objective)
    #[arg(long)]
    pub trace: Option<PathBuf>,

    /// Individuals per generation
    #[arg(long, default_value_t = 104)]
    pub population: usize,

    /// Probability of single-point crossover per offspring
    #[arg(long, default_value_t = 0.7)]
    pub crossover_rate: f64,

    /// Probability of mutating each gene of an offspring
    #[arg(long, default_value_t = 0.2)]
    pub mutation_rate: f64,

    /// Best individuals copied unchanged into the next generation
    #[arg(long, default_value_t = 1)]
    pub elitism: usize,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub input: InputArgs,

    /// Where to write the per-step comparison CSV
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ScalingArgs {
    /// Chain lengths to map, e.g. 2,4,8,16
    #[arg(long, value_delimiter = ',', required = true)]
    pub einsums: Vec<usize>,

    /// Shared row extent M of every stage
    #[arg(long, default_value_t = 4)]
    pub m: u64,

    /// Contraction extent K of every stage
    #[arg(long, default_value_t = 4)]
    pub k: u64,

    /// Output-column extent N of every stage
    #[arg(long, default_value_t = 4)]
    pub n: u64,

    /// Accelerator description (JSON); defaults to a two-level machine
    /// with a 1 KiB buffer
    #[arg(long)]
    pub arch: Option<PathBuf>,

    /// Optimization objective
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Energy)]
    pub objective: ObjectiveArg,

    /// Where to write the per-join CSV series
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses the command line, runs the selected command, and returns the
/// process exit code: 0 on success, 2 when no feasible mapping exists,
/// 1 on invalid input or any other failure.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match &cli.cmd {
        Cmd::Map(args) => cmd_map(args),
        Cmd::Oracle(args) => cmd_oracle(args),
        Cmd::Baseline(args) => cmd_baseline(&args.which),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Scaling(args) => cmd_scaling(args),
    }
}

/// Maps error causes to exit codes. An empty mapspace or an exhausted
/// search is exit 2; anything else (bad input, oversized oracle, zero
/// budgets) is exit 1.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<FfmError>() {
            if matches!(e, FfmError::NoFeasibleMapping) {
                return 2;
            }
        }
        if let Some(e) = cause.downcast_ref::<BaselineError>() {
            if matches!(
                e,
                BaselineError::NoFeasibleSample | BaselineError::SeedingFailed(_)
            ) {
                return 2;
            }
        }
    }
    1
}

/// Applies `--threads`, falling back to FUSEMAP_THREADS, falling back to
/// the rayon default (all cores). The global pool can only be built once;
/// a second initialization at the same size is harmless and ignored.
fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FUSEMAP_THREADS") {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .with_context(|| format!("FUSEMAP_THREADS must be a thread count, got `{s}`"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker pool")?;
    }
    Ok(())
}

fn cmd_map(args: &MapArgs) -> Result<()> {
    let (w, a) = args.input.load()?;
    let cfg = args.input.config(args.verify);
    let mut table_doc = None;
    let result = match &args.candidates {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading candidate table {}", path.display()))?;
            let pools = tables::load_pools(&w, &a, &text)
                .with_context(|| format!("candidate table {}", path.display()))?;
            table_doc = Some(
                serde_json::from_str(&text)
                    .with_context(|| format!("candidate table {}", path.display()))?,
            );
            ffm::map_candidates(&w, &a, &cfg, &pools)?
        }
        None => ffm::map(&w, &a, &cfg)?,
    };
    let rep = report::Report {
        steps: Some(report::step_reports(&w, &result.steps)),
        candidate_table: table_doc,
        ..report::base_report(
            "map",
            &w,
            &a,
            &cfg,
            args.input.objective.name(),
            None,
            report::best_from_mapping(&w, &a, &result),
        )
    };
    report::write_json(&args.out, &rep)?;
    if let Some(path) = &args.timeline {
        report::write_timeline(path, &result.tree, &w, &a)?;
    }
    println!(
        "best {} = {} ({})",
        args.input.objective.name(),
        rep.best.objective_value.exact,
        rep.best.objective_value.value
    );
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let (w, a) = args.input.load()?;
    let cfg = args.input.config(false);
    let (best, stats) = baselines::oracle(&w, &a, &cfg)?;
    let rep = report::Report {
        oracle: Some(report::OracleReport {
            mapspace_bound: stats.mapspace_bound.to_string(),
            complete: stats.complete,
            feasible: stats.feasible,
        }),
        ..report::base_report(
            "oracle",
            &w,
            &a,
            &cfg,
            args.input.objective.name(),
            None,
            report::best_from_baseline(&w, &a, &best),
        )
    };
    report::write_json(&args.out, &rep)?;
    println!(
        "exhausted {} combinations: {} complete, {} feasible",
        stats.mapspace_bound, stats.complete, stats.feasible
    );
    println!(
        "best {} = {} ({})",
        args.input.objective.name(),
        rep.best.objective_value.exact,
        rep.best.objective_value.value
    );
    println!("report written to {}", args.out.display());
    Ok(())
}

fn cmd_baseline(which: &BaselineCmd) -> Result<()> {
    let (input, out, trace_path, budget, seed) = match which {
        BaselineCmd::Random(a) => (&a.input, &a.out, &a.trace, a.budget, a.seed),
        BaselineCmd::Sa(a) => (&a.input, &a.out, &a.trace, a.budget, a.seed),
        BaselineCmd::Ga(a) => (&a.input, &a.out, &a.trace, a.budget, a.seed),
    };
    let (w, a) = input.load()?;
    let cfg = input.config(false);
    let (algorithm, result, trace, evals_per_point, search) = match which {
        BaselineCmd::Random(_) => {
            let (res, tr) = baselines::random_search(&w, &a, &cfg, budget, seed)?;
            let search = report::SearchReport {
                algorithm: "random".into(),
                budget,
                seed,
                genome: res.genome.clone(),
                schedule: None,
                ga: None,
            };
            ("random", res, tr, 1, search)
        }
        BaselineCmd::Sa(sa) => {
            let sched = Schedule {
                t0: sa.t0,
                rate: sa.cooling,
            };
            let (res, tr) = baselines::simulated_annealing(&w, &a, &cfg, budget, seed, &sched)?;
            let search = report::SearchReport {
                algorithm: "sa".into(),
                budget,
                seed,
                genome: res.genome.clone(),
                schedule: Some(report::ScheduleEcho {
                    t0: sa.t0,
                    cooling: sa.cooling,
                }),
                ga: None,
            };
            ("sa", res, tr, 1, search)
        }
        BaselineCmd::Ga(ga) => {
            let params = GaParams {
                population: ga.population,
                crossover_rate: ga.crossover_rate,
                mutation_rate: ga.mutation_rate,
                elitism: ga.elitism,
            };
            let (res, tr) = baselines::genetic_algorithm(&w, &a, &cfg, budget, seed, &params)?;
            let search = report::SearchReport {
                algorithm: "ga".into(),
                budget,
                seed,
                genome: res.genome.clone(),
                schedule: None,
                ga: Some(report::GaEcho {
                    population: ga.population,
                    crossover_rate: ga.crossover_rate,
                    mutation_rate: ga.mutation_rate,
                    elitism: ga.elitism,
                }),
            };
            ("ga", res, tr, ga.population, search)
        }
    };
    let command = format!("baseline {algorithm}");
    let rep = report::Report {
        search: Some(search),
        ..report::base_report(
            &command,
            &w,
            &a,
            &cfg,
            input.objective.name(),
            Some(seed),
            report::best_from_baseline(&w, &a, &result),
        )
    };
    report::write_json(out, &rep)?;
    if let Some(path) = trace_path {
        report::write_trace(path, &trace, evals_per_point)?;
        println!("trace written to {}", path.display());
    }
    println!(
        "best {} = {} ({})",
        input.objective.name(),
        rep.best.objective_value.exact,
        rep.best.objective_value.value
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let (w, a) = args.input.load()?;
    let cfg = args.input.config(false);
    let base = ffm::map(&w, &a, &cfg)?;
    let no_skip = ffm::map_ablated(&w, &a, &cfg, true, false)?;
    let no_cons = ffm::map_ablated(&w, &a, &cfg, false, true)?;
    if no_skip.render != base.render || no_cons.render != base.render {
        bail!("ablated searches disagree with the pruned search on the best mapping");
    }
    let mut csv = String::from(
        "einsum,candidates,joins_attempted,joins_attempted_no_skip,joins_skipped,\
         frontier,frontier_no_consolidation\n",
    );
    for ((s, ns), nc) in base.steps.iter().zip(&no_skip.steps).zip(&no_cons.steps) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            w.einsums[s.einsum].name,
            s.candidates,
            s.joins_attempted,
            ns.joins_attempted,
            s.joins_skipped,
            s.frontier_size,
            nc.frontier_size,
        ));
    }
    fs::write(&args.out, csv)
        .with_context(|| format!("writing ablation CSV {}", args.out.display()))?;
    println!(
        "ablations agree: best {} = {}",
        args.input.objective.name(),
        fusemap_core::rat_to_string(&base.objective_value)
    );
    println!("ablation CSV written to {}", args.out.display());
    Ok(())
}

fn cmd_scaling(args: &ScalingArgs) -> Result<()> {
    let arch = match &args.arch {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading accelerator file {}", path.display()))?;
            ArchSpec::from_json(&text)
                .with_context(|| format!("parsing accelerator file {}", path.display()))?
        }
        None => ArchSpec::two_level(1024),
    };
    let cfg = SearchConfig {
        objective: args.objective.core(),
        ..SearchConfig::default()
    };
    let mut csv = String::from(
        "num_einsums,einsum,candidates,groups,frontier_size,joins_attempted,\
         joins_skipped,join_time_us\n",
    );
    let mut rows = 0usize;
    for &len in &args.einsums {
        let w = Workload::make_chain(len, args.m, &[(args.k, args.n)])
            .with_context(|| format!("building a chain of {len} stages"))?;
        let result = ffm::map(&w, &arch, &cfg)?;
        for s in &result.steps {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}\n",
                len,
                w.einsums[s.einsum].name,
                s.candidates,
                s.groups,
                s.frontier_size,
                s.joins_attempted,
                s.joins_skipped,
                s.elapsed.as_secs_f64() * 1e6,
            ));
            rows += 1;
        }
    }
    fs::write(&args.out, csv)
        .with_context(|| format!("writing scaling CSV {}", args.out.display()))?;
    println!(
        "wrote {rows} join records for chain lengths {:?} to {}",
        args.einsums,
        args.out.display()
    );
    Ok(())
}
