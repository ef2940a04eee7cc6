//! Command-line front end: configuration, subcommand dispatch and output.
//!
//! Every command prints a JSON header line (schema name and version,
//! command, seed) followed by a one-line JSON summary, and writes CSV/JSON
//! artifacts into the output directory. Exit codes: 0 success, 1 runtime
//! or invariant failure, 2 usage error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::acceptance::{self, Profile};
use crate::er;
use crate::error::Error;
use crate::graph::{
    fluctuation_ensemble, run_ensemble, write_trajectory_csv, AssignmentMode, EnsembleConfig, GraphState,
    TypeAssignment,
};
use crate::linalg::max_abs;
use crate::mbp::{
    borel_total_size, critical_time, dual_measure, operator_norm, sample_root_type, simulate_mbp,
    survival_probability, total_size_distribution, BranchingSpec, MbpOutcome, DEFAULT_NODE_CAP,
};
use crate::model::{ModelConfig, ModelSpec};
use crate::mst::{default_tmax, limit_constant, mst_clt_experiment, sigma_infinity, time_tail_bound, write_replicas_csv, DenseModel};
use crate::ode::{macroscopic_limits, solve_densities, DEFAULT_STEP};
use crate::rng::replica_rng;
use crate::sde::{
    build_coefficients, check_critical_window, covariance_closed_form, covariance_lyapunov, initial_mean,
    mean_closed_form, mean_field, simulate_ensemble, write_matrix_csv, write_vector_series_csv,
    CoefficientOptions, PsiMode,
};
use crate::stats;
use crate::types::TypeSlice;

pub const SCHEMA: &str = "irglab-output";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "irglab", version, about = "Inhomogeneous random graph numerical lab")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Model configuration (TOML); Erdos-Renyi when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for CSV/JSON artifacts.
    #[arg(long, global = true, default_value = "irglab-out")]
    out: PathBuf,
    /// Base seed; required by stochastic commands unless the config has one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `strict` runs full Monte Carlo sizes; `default` is a quarter-size
    /// smoke run with correspondingly wider statistical tolerances.
    #[arg(long, global = true, value_enum, default_value_t = ToleranceProfile::Strict)]
    tolerance_profile: ToleranceProfile,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ToleranceProfile {
    Strict,
    Default,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PsiModeArg {
    Iid,
    Deterministic,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Iid,
    Proportional,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the limit density ODE and export pi(l, t).
    Ode {
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long)]
        horizon: Option<f64>,
        /// Spacing of the exported times.
        #[arg(long, default_value_t = 0.1)]
        every: f64,
    },
    /// Simulate the limit fluctuation SDE by Euler-Maruyama.
    SdeSim {
        #[arg(long, default_value_t = 1000)]
        paths: usize,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, value_enum, default_value_t = PsiModeArg::Deterministic)]
        psi_mode: PsiModeArg,
        /// Record every this many steps.
        #[arg(long, default_value_t = 100)]
        record_every: usize,
    },
    /// Means and covariances: ODE, closed form and Lyapunov.
    Moments {
        /// Times for the exported covariance matrices.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        /// Half-width of the excluded window around the critical time, as a
        /// fraction of it.
        #[arg(long, default_value_t = 0.05)]
        window: f64,
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
    },
    /// Simulate the random multigraph and export densities.
    GraphSim {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Fluctuations of densities and macroscopic functionals.
    MacroClt {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Erdos-Renyi closed forms.
    Er {
        #[arg(long, value_delimiter = ',', default_value = "2.0")]
        t: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        janson_cap: usize,
    },
    /// Branching process: norm, critical time, survival, dual, sizes.
    Mbp {
        #[arg(long)]
        t: Option<f64>,
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
        #[arg(long)]
        kmax: Option<usize>,
        /// Monte Carlo trees (needs a seed).
        #[arg(long, default_value_t = 0)]
        samples: usize,
    },
    /// MST weight experiment on dense graphs.
    Mst {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        replicas: usize,
        /// 0: complete graph with exponential weights; 1: Bernoulli edges.
        #[arg(long, default_value = "0")]
        model: String,
    },
    /// Asymptotic MST variance from the two-time covariance.
    SigmaInfinity {
        #[arg(long)]
        truncation: Option<usize>,
        #[arg(long)]
        tmax: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        grid_step: f64,
    },
    /// Run the acceptance suite.
    Validate,
}

/// Optional `[simulation]` table next to the model keys.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n: Option<usize>,
    pub replicas: Option<usize>,
    pub mode: Option<String>,
    pub snapshot_times: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub simulation: SimulationConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> crate::error::Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let simulation = match table.remove("simulation") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?,
            None => SimulationConfig::default(),
        };
        let model: ModelConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(RunConfig {
            spec: model.into_spec()?,
            simulation,
        })
    }

    pub fn from_path(path: &Path) -> crate::error::Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    fn erdos_renyi() -> Self {
        RunConfig {
            spec: ModelSpec::erdos_renyi(10, 1.0),
            simulation: SimulationConfig::default(),
        }
    }
}

/// Parse `argv` (program name first), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    seed: Option<u64>,
    profile: Profile,
}

impl Context {
    fn require_seed(&self, command: &str) -> CliResult<u64> {
        self.seed
            .ok_or_else(|| CliError::Usage(format!("{command} is stochastic: pass --seed or set seed in the config")))
    }

    fn file(&self, name: &str) -> CliResult<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name)).map_err(Error::from)?))
    }

    fn emit(&self, command: &str, seed: Option<u64>, result: Value) -> CliResult<()> {
        let header = json!({ "schema": SCHEMA, "version": SCHEMA_VERSION, "command": command, "seed": seed });
        println!("{header}");
        println!("{result}");
        let mut f = self.file(&format!("{}_summary.json", command.replace('-', "_")))?;
        let doc = json!({ "header": header, "result": result });
        writeln!(f, "{doc}").map_err(Error::from)?;
        Ok(())
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Some(threads) = g.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let config = match &g.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::erdos_renyi(),
    };
    fs::create_dir_all(&g.out).map_err(Error::from)?;
    let ctx = Context {
        seed: g.seed.or(config.spec.seed),
        config,
        out: g.out.clone(),
        profile: match g.tolerance_profile {
            ToleranceProfile::Strict => Profile::Strict,
            ToleranceProfile::Default => Profile::Quick,
        },
    };
    match &cli.command {
        Command::Ode { step, horizon, every } => cmd_ode(&ctx, *step, *horizon, *every),
        Command::SdeSim {
            paths,
            dt,
            psi_mode,
            record_every,
        } => cmd_sde_sim(&ctx, *paths, *dt, *psi_mode, *record_every),
        Command::Moments { times, window, fd_step } => cmd_moments(&ctx, times, *window, *fd_step),
        Command::GraphSim { n, replicas, times, mode } => cmd_graph_sim(&ctx, *n, *replicas, times, *mode),
        Command::MacroClt { n, replicas, times, mode } => cmd_macro_clt(&ctx, *n, *replicas, times, *mode),
        Command::Er { t, janson_cap } => cmd_er(&ctx, t, *janson_cap),
        Command::Mbp { t, tol, kmax, samples } => cmd_mbp(&ctx, *t, *tol, *kmax, *samples),
        Command::Mst { n, replicas, model } => cmd_mst(&ctx, *n, *replicas, model),
        Command::SigmaInfinity {
            truncation,
            tmax,
            grid_step,
        } => cmd_sigma_infinity(&ctx, *truncation, *tmax, *grid_step),
        Command::Validate => cmd_validate(&ctx),
    }
}

/// Multiples of `every` in `[0, horizon]`.
fn grid_times(horizon: f64, every: f64) -> CliResult<Vec<f64>> {
    if !(every > 0.0) {
        return Err(CliError::Usage(format!("time spacing {every} must be positive")));
    }
    let count = (horizon / every + 1e-9).floor() as usize;
    Ok((0..=count).map(|i| (i as f64 * every * 1e9).round() / 1e9).collect())
}

fn cmd_ode(ctx: &Context, step: f64, horizon: Option<f64>, every: f64) -> CliResult<()> {
    let spec = &ctx.config.spec;
    let horizon = horizon.unwrap_or(spec.horizon);
    let field = solve_densities(spec, step, horizon)?;
    let times = grid_times(horizon, every)?;
    field.write_csv(&times, ctx.file("densities.csv")?)?;
    let last = field.len() - 1;
    let limits = macroscopic_limits(&field, field.times()[last])?;
    ctx.emit(
        "ode",
        None,
        json!({
            "types": spec.types(),
            "truncation": spec.truncation,
            "ranks": field.slice().len(),
            "step": field.step(),
            "horizon": horizon,
            "critical_time": critical_time(&spec.kernel, &spec.measure).ok(),
            "components": limits.components,
            "giant": limits.giant,
            "surplus": limits.surplus,
            "vertex_mass": field.vertex_mass(last),
        }),
    )
}

fn psi_mode(arg: PsiModeArg) -> PsiMode {
    match arg {
        PsiModeArg::Iid => PsiMode::Iid,
        PsiModeArg::Deterministic => PsiMode::Deterministic,
        PsiModeArg::Zero => PsiMode::Zero,
    }
}

fn cmd_sde_sim(ctx: &Context, paths: usize, dt: f64, mode: PsiModeArg, record_every: usize) -> CliResult<()> {
    let seed = ctx.require_seed("sde-sim")?;
    if paths < 2 {
        return Err(CliError::Usage("--paths must be at least 2".into()));
    }
    let spec = &ctx.config.spec;
    let field = solve_densities(spec, DEFAULT_STEP, spec.horizon)?;
    let coeffs = build_coefficients(&field, spec, CoefficientOptions::default())?;
    let report = coeffs.check_invariants();
    if !report.holds() {
        return Err(Error::Invariant(format!("coefficient invariants violated: {report:?}")).into());
    }
    let ensemble = simulate_ensemble(&coeffs, psi_mode(mode), dt, spec.horizon, record_every, paths, seed)?;
    let mut f = ctx.file("sde_paths.csv")?;
    writeln!(f, "path,t,rank,value").map_err(Error::from)?;
    for (p, path) in ensemble.iter().enumerate() {
        for (t, v) in path.times.iter().zip(&path.values) {
            for (r, x) in v.iter().enumerate() {
                writeln!(f, "{p},{t},{r},{x:e}").map_err(Error::from)?;
            }
        }
    }
    let w = field.slice().len();
    let last = ensemble[0].values.len() - 1;
    let column = |r: usize| -> Vec<f64> { ensemble.iter().map(|p| p.values[last][r]).collect() };
    let mean: Vec<f64> = (0..w).map(|r| stats::mean(&column(r))).collect();
    let variance: Vec<f64> = (0..w).map(|r| stats::variance(&column(r))).collect();
    ctx.emit(
        "sde-sim",
        Some(seed),
        json!({
            "paths": paths,
            "dt": dt,
            "t": ensemble[0].times[last],
            "mean": mean,
            "variance": variance,
            "gamma_upper": report.gamma_upper,
            "phi_min_eigenvalue": report.phi_min_eigenvalue,
            "root_residual": report.root_residual,
        }),
    )
}

fn cmd_moments(ctx: &Context, times: &[f64], window: f64, fd_step: f64) -> CliResult<()> {
    let spec = &ctx.config.spec;
    // the transport step is twice the density step
    let horizon = (spec.horizon / (2.0 * DEFAULT_STEP)).floor() * 2.0 * DEFAULT_STEP;
    let tc = critical_time(&spec.kernel, &spec.measure)?;
    let times = if times.is_empty() { vec![horizon] } else { times.to_vec() };
    let mut checked = times.clone();
    checked.push(horizon);
    check_critical_window(&checked, tc, window * tc).map_err(|e| CliError::Usage(e.to_string()))?;
    if horizon > tc {
        check_critical_window(&[tc], tc, window * tc).map_err(|_| {
            CliError::Usage(format!(
                "horizon {horizon} crosses the critical time {tc}; stay below {}",
                (1.0 - window) * tc
            ))
        })?;
    }
    let field = solve_densities(spec, DEFAULT_STEP, horizon)?;
    let coeffs = build_coefficients(&field, spec, CoefficientOptions { stride: 1, square_roots: false })?;
    let mean = mean_field(&coeffs, &initial_mean(field.slice(), &spec.psi))?;
    let fd = mean_closed_form(spec, DEFAULT_STEP, horizon, &mean.times, fd_step)?;
    let lyap = covariance_lyapunov(&coeffs, None)?;
    let mean_vectors: Vec<_> = mean.values.iter().map(|m| m.column(0).into_owned()).collect();
    write_vector_series_csv(field.slice(), &mean.times, &mean_vectors, ctx.file("mean_ode.csv")?)?;
    write_vector_series_csv(field.slice(), &mean.times, &fd, ctx.file("mean_closed_form.csv")?)?;

    let mut lyap_gap: f64 = 0.0;
    let mut diagonals = Vec::new();
    for (t, s) in lyap.times.iter().zip(&lyap.values) {
        let closed = covariance_closed_form(&field, *t)?;
        lyap_gap = lyap_gap.max(max_abs(&(s - &closed)));
        diagonals.push(closed.diagonal());
    }
    write_vector_series_csv(field.slice(), &lyap.times, &diagonals, ctx.file("covariance_diagonal.csv")?)?;
    for &t in &times {
        let closed = covariance_closed_form(&field, t)?;
        write_matrix_csv(&closed, ctx.file(&format!("covariance_t{t}.csv"))?)?;
    }
    let scale = mean.values.iter().map(max_abs).fold(0.0, f64::max);
    let mean_gap = mean
        .values
        .iter()
        .zip(&fd)
        .map(|(a, b)| (a.column(0) - b).amax())
        .fold(0.0, f64::max);
    ctx.emit(
        "moments",
        None,
        json!({
            "horizon": horizon,
            "critical_time": tc,
            "times": times,
            "max_lyapunov_vs_closed_form": lyap_gap,
            "mean_relative_gap": if scale > 0.0 { mean_gap / scale } else { mean_gap },
        }),
    )
}

fn assignment_mode(arg: Option<ModeArg>, config: &SimulationConfig) -> CliResult<AssignmentMode> {
    match (arg, &config.mode) {
        (Some(ModeArg::Iid), _) => Ok(AssignmentMode::Iid),
        (Some(ModeArg::Proportional), _) => Ok(AssignmentMode::Proportional),
        (None, Some(m)) => Ok(m.parse()?),
        (None, None) => Ok(AssignmentMode::Iid),
    }
}

fn ensemble_config(
    ctx: &Context,
    seed: u64,
    n: Option<usize>,
    replicas: Option<usize>,
    times: &[f64],
    mode: Option<ModeArg>,
    default_replicas: usize,
) -> CliResult<EnsembleConfig> {
    let sim = &ctx.config.simulation;
    let times = if !times.is_empty() {
        times.to_vec()
    } else {
        sim.snapshot_times.clone().unwrap_or_else(|| vec![ctx.config.spec.horizon])
    };
    let n = n.or(sim.n).unwrap_or(1000);
    if n < 2 {
        return Err(CliError::Usage(format!("n = {n}: need at least 2 vertices")));
    }
    Ok(EnsembleConfig {
        n,
        replicas: replicas.or(sim.replicas).unwrap_or(default_replicas),
        times,
        truncation: ctx.config.spec.truncation,
        mode: assignment_mode(mode, sim)?,
        seed,
    })
}

fn cmd_graph_sim(
    ctx: &Context,
    n: Option<usize>,
    replicas: Option<usize>,
    times: &[f64],
    mode: Option<ModeArg>,
) -> CliResult<()> {
    let seed = ctx.require_seed("graph-sim")?;
    let spec = &ctx.config.spec;
    let config = ensemble_config(ctx, seed, n, replicas, times, mode, 1)?;
    let records = run_ensemble(spec, &config)?;
    let slice = TypeSlice::new(spec.types(), config.truncation)?;

    let mut f = ctx.file("snapshots.csv")?;
    let labels: Vec<String> = (1..=spec.types()).map(|j| format!("l{j}")).collect();
    writeln!(f, "replica,t,rank,{},pi_n", labels.join(",")).map_err(Error::from)?;
    let mut m = ctx.file("macroscopic.csv")?;
    writeln!(m, "replica,t,components,largest,surplus,overflow_components").map_err(Error::from)?;
    for (r, rec) in records.iter().enumerate() {
        for (snap, mac) in rec.snapshots.iter().zip(&rec.macroscopic) {
            for (rank, p) in snap.densities.iter().enumerate() {
                let counts: Vec<String> = slice.vector(rank).counts().iter().map(|c| c.to_string()).collect();
                writeln!(f, "{r},{},{rank},{},{p:e}", snap.t, counts.join(",")).map_err(Error::from)?;
            }
            writeln!(
                m,
                "{r},{},{},{},{},{}",
                snap.t, mac.components, mac.largest, mac.surplus, snap.overflow_components
            )
            .map_err(Error::from)?;
        }
    }

    // replica 0 again, event by event; same stream, same events
    let mut rng = replica_rng(seed, 0);
    let assignment = TypeAssignment::draw(config.n, spec.measure.mass(), config.mode, &mut rng)?;
    let mut g = GraphState::with_assignment(assignment, &crate::graph::finite_kernel(spec, config.n)?)?;
    let mut rows = Vec::new();
    for &t in &config.times {
        g.advance_recording(t, &mut rng, &mut rows)?;
    }
    g.check_invariants()?;
    write_trajectory_csv(&rows, ctx.file("trajectory.csv")?)?;

    let first = &records[0];
    ctx.emit(
        "graph-sim",
        Some(seed),
        json!({
            "n": config.n,
            "replicas": config.replicas,
            "times": config.times,
            "events_replica0": rows.len(),
            "psi_n_replica0": first.psi_n,
            "components_replica0": first.macroscopic.iter().map(|m| m.components).collect::<Vec<_>>(),
            "largest_replica0": first.macroscopic.iter().map(|m| m.largest).collect::<Vec<_>>(),
        }),
    )
}

fn cmd_macro_clt(
    ctx: &Context,
    n: Option<usize>,
    replicas: Option<usize>,
    times: &[f64],
    mode: Option<ModeArg>,
) -> CliResult<()> {
    let seed = ctx.require_seed("macro-clt")?;
    let spec = &ctx.config.spec;
    let config = ensemble_config(ctx, seed, n, replicas, times, mode, 200)?;
    if config.replicas < 2 {
        return Err(CliError::Usage("macro-clt needs at least 2 replicas".into()));
    }
    let summary = fluctuation_ensemble(spec, &config)?;
    let is_er = spec.types() == 1 && spec.kernel.get(0, 0) == 1.0;
    let er_reference: Vec<Option<[[f64; 3]; 3]>> = config
        .times
        .iter()
        .map(|&t| if is_er { er::covariance(t).ok() } else { None })
        .collect();
    let mut f = ctx.file("fluctuations.csv")?;
    writeln!(f, "t,rank,mean,variance").map_err(Error::from)?;
    for (i, t) in summary.times.iter().enumerate() {
        for r in 0..summary.mean[i].len() {
            writeln!(f, "{t},{r},{:e},{:e}", summary.mean[i][r], summary.covariance[i][(r, r)]).map_err(Error::from)?;
        }
    }
    ctx.emit(
        "macro-clt",
        Some(seed),
        json!({
            "n": config.n,
            "replicas": summary.replicas,
            "times": summary.times,
            "macro_mean": summary.macro_mean,
            "macro_covariance": summary.macro_covariance,
            "er_reference_covariance": er_reference,
        }),
    )
}

fn cmd_er(ctx: &Context, ts: &[f64], cap: usize) -> CliResult<()> {
    let curves: Vec<Value> = ts
        .iter()
        .map(|&t| {
            let c = er::curves(t);
            json!({ "t": t, "rho": c.rho, "eta": c.eta, "giant": c.giant, "surplus": c.surplus, "covariance": c.sigma })
        })
        .collect();
    let janson = er::janson_sigma2(cap);
    ctx.emit(
        "er",
        None,
        json!({
            "curves": curves,
            "janson_sigma2": janson.value,
            "janson_error_bound": janson.error_bound,
            "janson_cap": cap,
        }),
    )
}

fn cmd_mbp(ctx: &Context, t: Option<f64>, tol: f64, kmax: Option<usize>, samples: usize) -> CliResult<()> {
    let spec = &ctx.config.spec;
    let t = t.unwrap_or(spec.horizon);
    let bs = BranchingSpec::new(spec.kernel.clone(), spec.measure.clone(), t)?;
    let norm = operator_norm(&spec.kernel, &spec.measure)?;
    let survival = survival_probability(&bs, tol)?;
    let dual = dual_measure(&bs, tol)?;
    let kmax = kmax.unwrap_or(spec.truncation);
    let sizes = total_size_distribution(&bs, kmax)?;
    let borel = (spec.types() == 1).then(|| borel_total_size(t * spec.kernel.get(0, 0), kmax));
    let mut monte_carlo = Value::Null;
    let mut seed_used = None;
    if samples > 0 {
        let seed = ctx.require_seed("mbp with --samples")?;
        seed_used = Some(seed);
        let mut rng = replica_rng(seed, 0);
        let mut overflow = 0usize;
        let mut hist = vec![0usize; kmax];
        for _ in 0..samples {
            let root = sample_root_type(&spec.measure, &mut rng);
            match simulate_mbp(&bs, root, &mut rng, DEFAULT_NODE_CAP)? {
                MbpOutcome::Overflow { .. } => overflow += 1,
                MbpOutcome::Finite(tree) if tree.size() <= kmax => hist[tree.size() - 1] += 1,
                MbpOutcome::Finite(_) => {}
            }
        }
        monte_carlo = json!({
            "samples": samples,
            "overflow_fraction": overflow as f64 / samples as f64,
            "size_frequencies": hist.iter().map(|&c| c as f64 / samples as f64).collect::<Vec<_>>(),
        });
    }
    let mut f = ctx.file("total_size.csv")?;
    writeln!(f, "k,p_ode,p_borel").map_err(Error::from)?;
    for (i, p) in sizes.iter().enumerate() {
        let b = borel.as_ref().map(|b| format!("{:e}", b[i])).unwrap_or_default();
        writeln!(f, "{},{p:e},{b}", i + 1).map_err(Error::from)?;
    }
    ctx.emit(
        "mbp",
        seed_used,
        json!({
            "t": t,
            "operator_norm": norm,
            "critical_time": 1.0 / norm,
            "survival": survival.rho,
            "iterations": survival.iterations,
            "residual": survival.residual,
            "dual_measure": dual.measure.mass(),
            "dual_norm": dual.dual_norm,
            "total_size": sizes,
            "monte_carlo": monte_carlo,
        }),
    )
}

fn cmd_mst(ctx: &Context, n: usize, replicas: usize, model: &str) -> CliResult<()> {
    let seed = ctx.require_seed("mst")?;
    let model: DenseModel = model.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    if replicas < 2 || n < 2 {
        return Err(CliError::Usage("mst needs n >= 2 and at least 2 replicas".into()));
    }
    let spec = &ctx.config.spec;
    let exp = mst_clt_experiment(spec, n, replicas, model, seed)?;
    write_replicas_csv(&exp, ctx.file("mst_replicas.csv")?)?;
    let kmax = if spec.types() == 1 { 60 } else { spec.truncation };
    let mut tmax = 10.0;
    while time_tail_bound(&spec.kernel, tmax) > 1e-8 && tmax < 400.0 {
        tmax += 10.0;
    }
    let constant = limit_constant(&spec.kernel, spec.measure.mass(), kmax, tmax, 1e-8);
    let is_er = spec.types() == 1 && spec.kernel.get(0, 0) == 1.0;
    ctx.emit(
        "mst",
        Some(seed),
        json!({
            "n": n,
            "model": model,
            "replicas": replicas,
            "discarded": exp.discarded,
            "mean": exp.mean,
            "mean_std_error": exp.mean_std_error,
            "scaled_variance": exp.scaled_variance,
            "skewness": exp.skewness,
            "excess_kurtosis": exp.excess_kurtosis,
            "max_identity_residual": exp.max_identity_residual,
            "limit_constant": constant.as_ref().ok().map(|c| c.value),
            "limit_constant_error": constant.as_ref().err().map(|e| e.to_string()),
            "janson_sigma2": is_er.then(|| er::janson_sigma2(200).value),
        }),
    )
}

fn cmd_sigma_infinity(ctx: &Context, truncation: Option<usize>, tmax: Option<f64>, grid_step: f64) -> CliResult<()> {
    let spec = &ctx.config.spec;
    let tc = critical_time(&spec.kernel, &spec.measure)?;
    let truncation = truncation.unwrap_or(spec.truncation);
    let tmax = match tmax {
        Some(t) => t,
        None => {
            let t = default_tmax(&spec.kernel, tc);
            (t / grid_step).ceil() * grid_step
        }
    };
    let s = sigma_infinity(&spec.kernel, spec.measure.mass(), truncation, tmax, grid_step)?;
    ctx.emit("sigma-infinity", None, serde_json::to_value(&s).map_err(|e| Error::Config(e.to_string()))?)
}

fn cmd_validate(ctx: &Context) -> CliResult<()> {
    let seed = ctx.seed.unwrap_or(acceptance::DEFAULT_SEED);
    let results = acceptance::run_all(ctx.profile, seed);
    let mut failed = Vec::new();
    for r in &results {
        eprintln!("{r}");
        if !r.passed {
            failed.push(r.id);
        }
    }
    let lines: Vec<Value> = results
        .iter()
        .map(|r| json!({ "id": r.id, "name": r.name, "passed": r.passed, "detail": r.detail, "seconds": r.seconds }))
        .collect();
    ctx.emit("validate", Some(seed), json!({ "criteria": lines, "failed": failed }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("acceptance criteria failed: {failed:?}")).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("irglab").chain(list.iter().copied()).map(String::from).collect()
    }

    #[test]
    fn run_config_with_simulation_table() {
        let c = RunConfig::from_toml_str(
            "kernel = [[1.0]]\nmeasure = [1.0]\ntruncation = 3\nhorizon = 1.0\n[simulation]\nn = 500\nmode = \"proportional\"\nsnapshot_times = [0.5, 1.0]\n",
        )
        .unwrap();
        assert_eq!(c.simulation.n, Some(500));
        assert!(RunConfig::from_toml_str("kernel = [[1.0]]\nmeasure = [1.0]\ntruncation = 3\nhorizon = 1.0\n[simulation]\nfoo = 1\n").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(args(&["bogus"])), 2);
        assert_eq!(run(args(&["ode", "--nope"])), 2);
        assert_eq!(run(args(&["graph-sim", "--out", out])), 2);
        assert_eq!(run(args(&["mst", "--out", out, "--seed", "1", "--model", "7"])), 2);
    }

    #[test]
    fn ode_csv_matches_closed_form() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(args(&["ode", "--out", out, "--horizon", "2.0", "--every", "0.5"])), 0);
        let text = fs::read_to_string(dir.path().join("densities.csv")).unwrap();
        let mut seen = 0;
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols[1] == "1" {
                let t: f64 = cols[0].parse().unwrap();
                let p: f64 = cols[3].parse().unwrap();
                assert!((p - (-t).exp()).abs() < 1e-8);
                seen += 1;
            }
        }
        assert_eq!(seen, 5);
        assert!(dir.path().join("ode_summary.json").exists());
    }

    #[test]
    fn missing_config_file_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(args(&["er", "--out", out, "--config", "/nonexistent/x.toml"])), 1);
    }
}
