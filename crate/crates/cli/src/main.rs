//! `ivqr`: IVQR estimation, gradient wild bootstrap tests, test-inversion
//! confidence sets, simulation tables, and spectral clustering of networks.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure during computation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ivqr_core::alt_inference::{self, TStdCritical};
use ivqr_core::bootstrap::{self, ArConfig, ArWeighting, Method, TestMode, WaldConfig, WaldWeighting};
use ivqr_core::clustering::{self, EigenOrder, Network};
use ivqr_core::dgp::{self, AdjacencyOp, DgpChoice, Dgp1Config, Dgp2Config, Hypothesis, McConfig};
use ivqr_core::error::Error;
use ivqr_core::estimator::{A1Choice, ProfileGrid};
use ivqr_core::instruments::{BandwidthOverrides, InstrumentMethod, InstrumentRecipe};
use ivqr_core::{io, ClusteredDataset};

#[derive(Parser)]
#[command(name = "ivqr", version, about = "IVQR inference with few large clusters")]
struct Cli {
    /// JSON configuration file supplying defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: IVQR_THREADS or all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct InstrumentArgs {
    /// Instrument recipe: parametric | np-full | np-cluster.
    #[arg(long = "instrument-method")]
    instrument_method: Option<String>,
    /// Bandwidth overrides for the smoothed moment matrices.
    #[arg(long)]
    h1: Option<f64>,
    #[arg(long)]
    h2: Option<f64>,
    #[arg(long)]
    h3: Option<f64>,
    #[arg(long)]
    h4: Option<f64>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input dataset CSV with header cluster,y,x,w_1..,z_1..[,v].
    #[arg(long)]
    data: PathBuf,
    /// Do not prepend an intercept column to the controls.
    #[arg(long)]
    no_intercept: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate beta(tau) by the profiled grid search.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        /// Quantile indices (repeatable).
        #[arg(long, required = true)]
        tau: Vec<f64>,
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        grid_min: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        grid_max: f64,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        #[command(flatten)]
        instrument: InstrumentArgs,
        /// Write the profile norms, plot-ready, to this CSV.
        #[arg(long)]
        profile_csv: Option<PathBuf>,
        /// Output JSON path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test H0: beta(tau) = beta0.
    Test {
        #[command(flatten)]
        data: DataArgs,
        /// t | t-cr | ar | ar-cr | t-std | im | crs.
        #[arg(long)]
        method: String,
        #[arg(long, allow_negative_numbers = true)]
        beta0: f64,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        alpha: Option<f64>,
        /// enumerate | sample | auto.
        #[arg(long, default_value = "auto")]
        mode: String,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        grid_min: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        grid_max: f64,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        #[command(flatten)]
        instrument: InstrumentArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Confidence set by test inversion over a grid of null values.
    Ci {
        #[command(flatten)]
        data: DataArgs,
        /// t | t-cr | ar | ar-cr (repeatable).
        #[arg(long, required = true)]
        method: Vec<String>,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        alpha: Option<f64>,
        /// Inversion grid.
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        grid_min: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        grid_max: f64,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        /// Estimation grid for the profile searches (defaults to the
        /// inversion grid).
        #[arg(long, allow_negative_numbers = true)]
        est_grid_min: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        est_grid_max: Option<f64>,
        #[arg(long)]
        est_grid_step: Option<f64>,
        #[arg(long, default_value = "auto")]
        mode: String,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        instrument: InstrumentArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo rejection tables for the built-in designs.
    Simulate {
        /// 1 (clustered, Toeplitz) or 2 (network).
        #[arg(long)]
        dgp: u8,
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Design 1: number of clusters.
        #[arg(long, default_value_t = 9)]
        j: usize,
        /// Design 1: number of instruments.
        #[arg(long, default_value_t = 1)]
        dz: usize,
        /// Design 1: base first-stage strength.
        #[arg(long, default_value_t = 1.0)]
        pi: f64,
        /// Design 1: cluster-size heterogeneity exponent.
        #[arg(long, default_value_t = 4.0)]
        r: f64,
        /// Design 2: k-means cluster count.
        #[arg(long, default_value_t = 10)]
        l: usize,
        /// Design 2: largest | smallest Laplacian eigenvalues.
        #[arg(long, default_value = "largest")]
        eigens: String,
        /// Design 2: le | as-written distance comparison.
        #[arg(long, default_value = "le")]
        adjacency_op: String,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        /// Quantile indices (repeatable; default 0.1 0.25 0.5 0.75 0.9).
        #[arg(long)]
        tau: Vec<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Methods (repeatable; default t-cr t ar t-std im crs).
        #[arg(long)]
        method: Vec<String>,
        /// H0 (size) or H1 (power).
        #[arg(long, default_value = "H0")]
        hypothesis: String,
        #[arg(long, default_value_t = 0.01)]
        grid_step: f64,
        #[arg(long, default_value_t = 2.0)]
        grid_halfwidth: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        instrument: InstrumentArgs,
        /// Output table CSV path (stdout if omitted); a config echo is
        /// written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export every generated replication as CSV into this directory.
        #[arg(long)]
        dump_data: Option<PathBuf>,
    },
    /// Spectral clustering of an edge-list network.
    Cluster {
        /// Two-column edge list CSV (a header row is skipped if present).
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        l: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "largest")]
        eigens: String,
        /// Output node,label CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Optional configuration file; every field is a fallback for a flag the
/// user did not pass.
#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    instrument: Option<FileInstrument>,
    alpha: Option<f64>,
    draws: Option<usize>,
    seed: Option<u64>,
    replications: Option<usize>,
}

#[derive(Debug, Clone, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileInstrument {
    method: Option<String>,
    h1: Option<f64>,
    h2: Option<f64>,
    h3: Option<f64>,
    h4: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let file_cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<FileConfig>(&text)
                .map_err(|e| Error::InvalidConfig(format!("config file: {e}")))?
        }
        None => FileConfig::default(),
    };

    let threads = cli
        .threads
        .or_else(|| std::env::var("IVQR_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(k) = threads {
        // ignore the error when a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }

    match cli.command {
        Command::Fit {
            data,
            tau,
            grid_min,
            grid_max,
            grid_step,
            instrument,
            profile_csv,
            out,
        } => cmd_fit(
            &file_cfg, data, tau, grid_min, grid_max, grid_step, instrument, profile_csv, out,
        ),
        Command::Test {
            data,
            method,
            beta0,
            tau,
            alpha,
            mode,
            draws,
            seed,
            grid_min,
            grid_max,
            grid_step,
            instrument,
            out,
        } => cmd_test(
            &file_cfg, data, method, beta0, tau, alpha, mode, draws, seed, grid_min, grid_max,
            grid_step, instrument, out,
        ),
        Command::Ci {
            data,
            method,
            tau,
            alpha,
            grid_min,
            grid_max,
            step,
            est_grid_min,
            est_grid_max,
            est_grid_step,
            mode,
            draws,
            seed,
            instrument,
            out,
        } => cmd_ci(
            &file_cfg, data, method, tau, alpha, grid_min, grid_max, step, est_grid_min,
            est_grid_max, est_grid_step, mode, draws, seed, instrument, out,
        ),
        Command::Simulate {
            dgp,
            n,
            j,
            dz,
            pi,
            r,
            l,
            eigens,
            adjacency_op,
            reps,
            draws,
            tau,
            alpha,
            method,
            hypothesis,
            grid_step,
            grid_halfwidth,
            seed,
            instrument,
            out,
            dump_data,
        } => cmd_simulate(
            &file_cfg, dgp, n, j, dz, pi, r, l, eigens, adjacency_op, reps, draws, tau, alpha,
            method, hypothesis, grid_step, grid_halfwidth, seed, instrument, out, dump_data,
        ),
        Command::Cluster {
            edges,
            l,
            seed,
            eigens,
            out,
        } => cmd_cluster(edges, l, seed.unwrap_or(0), &eigens, out),
    }
}

fn recipe_from(args: &InstrumentArgs, file_cfg: &FileConfig) -> Result<InstrumentRecipe, Error> {
    let file_inst = file_cfg.instrument.clone().unwrap_or_default();
    let method_str = args
        .instrument_method
        .clone()
        .or(file_inst.method)
        .unwrap_or_else(|| "np-full".into());
    let mut recipe = InstrumentRecipe::new(InstrumentMethod::parse(&method_str)?);
    recipe.bandwidths = BandwidthOverrides {
        h1: args.h1.or(file_inst.h1),
        h2: args.h2.or(file_inst.h2),
        h3: args.h3.or(file_inst.h3),
        h4: args.h4.or(file_inst.h4),
    };
    Ok(recipe)
}

fn parse_mode(mode: &str, draws: usize) -> Result<TestMode, Error> {
    match mode {
        "auto" => Ok(TestMode::Auto),
        "enumerate" => Ok(TestMode::Enumerate),
        "sample" => Ok(TestMode::Sample { draws }),
        other => Err(Error::InvalidConfig(format!(
            "unknown mode `{other}` (expected auto | enumerate | sample)"
        ))),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load(data: &DataArgs) -> Result<ClusteredDataset, Error> {
    io::load_csv_path(&data.data, !data.no_intercept)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    file_cfg: &FileConfig,
    data: DataArgs,
    taus: Vec<f64>,
    grid_min: f64,
    grid_max: f64,
    grid_step: f64,
    instrument: InstrumentArgs,
    profile_csv: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let ds = load(&data)?;
    let recipe = recipe_from(&instrument, file_cfg)?;
    let grid = ProfileGrid::new(grid_min, grid_max, grid_step)?;
    let (inst, fit) =
        ivqr_core::estimator::fit_with_preliminary(&ds, &recipe, &taus, &grid, &A1Choice::Identity)?;

    if let Some(path) = profile_csv {
        let mut text = String::from("tau,b,profile_norm\n");
        for f in &fit.fits {
            for (b, norm) in &f.profile_norms {
                text.push_str(&format!(
                    "{},{},{}\n",
                    io::render_float(f.tau),
                    io::render_float(*b),
                    io::render_float(*norm)
                ));
            }
        }
        std::fs::write(path, text)?;
    }

    let config = serde_json::json!({
        "data": data.data,
        "taus": taus,
        "grid": {"min": grid_min, "max": grid_max, "step": grid_step},
        "instrument": inst.recipe,
        "intercept_prepended": !data.no_intercept,
    });
    let fits: Vec<serde_json::Value> = fit
        .fits
        .iter()
        .map(|f| {
            serde_json::json!({
                "tau": f.tau,
                "beta": f.beta,
                "gamma": f.gamma.as_slice(),
                "theta": f.theta.as_slice(),
                "boundary_hit": f.boundary_hit,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "schema": "ivqr-fit/1",
        "config": config,
        "warnings": fit.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
        "fits": fits,
    });
    emit(out.as_deref(), &serde_json::to_string_pretty(&doc).unwrap())
}

#[allow(clippy::too_many_arguments)]
fn cmd_test(
    file_cfg: &FileConfig,
    data: DataArgs,
    method: String,
    beta0: f64,
    tau: f64,
    alpha: Option<f64>,
    mode: String,
    draws: Option<usize>,
    seed: Option<u64>,
    grid_min: f64,
    grid_max: f64,
    grid_step: f64,
    instrument: InstrumentArgs,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let ds = load(&data)?;
    let method = Method::parse(&method)?;
    let recipe = recipe_from(&instrument, file_cfg)?;
    let alpha = alpha.or(file_cfg.alpha).unwrap_or(0.10);
    let draws = draws
        .or(file_cfg.draws)
        .unwrap_or(bootstrap::DEFAULT_DRAWS);
    let seed = seed.or(file_cfg.seed).unwrap_or(0);
    let mode = parse_mode(&mode, draws)?;
    let grid = ProfileGrid::new(grid_min, grid_max, grid_step)?;

    let inst = ivqr_core::instruments::build(&ds, &recipe, &[tau], &[beta0])?;
    let mut wald_cfg = WaldConfig::new(grid.clone());
    wald_cfg.alpha = alpha;
    wald_cfg.mode = mode;
    wald_cfg.seed = seed;
    let mut ar_cfg = ArConfig::new();
    ar_cfg.alpha = alpha;
    ar_cfg.mode = mode;
    ar_cfg.seed = seed;

    let result = match method {
        Method::T => bootstrap::wald_test(&ds, &inst, &[beta0], &wald_cfg, WaldWeighting::Deterministic)?,
        Method::TCr => bootstrap::wald_test(&ds, &inst, &[beta0], &wald_cfg, WaldWeighting::Crve)?,
        Method::Ar => bootstrap::ar_test(&ds, &inst, &[beta0], &ar_cfg, ArWeighting::Deterministic)?,
        Method::ArCr => bootstrap::ar_test(&ds, &inst, &[beta0], &ar_cfg, ArWeighting::NullCrve)?,
        Method::TStd => alt_inference::t_std_test(&ds, &inst, &[beta0], &wald_cfg, TStdCritical::StudentT)?,
        Method::Im | Method::Crs => {
            let group = alt_inference::group_estimates(&ds, &recipe, &grid, &A1Choice::Identity, tau, beta0);
            if method == Method::Im {
                alt_inference::im_test(&group, beta0, alpha)?
            } else {
                alt_inference::crs_test(&group, beta0, alpha)?
            }
        }
    };

    let config = serde_json::json!({
        "data": data.data,
        "method": method.as_str(),
        "tau": tau,
        "beta0": beta0,
        "alpha": alpha,
        "mode": result.mode,
        "draws": draws,
        "seed": seed,
        "grid": {"min": grid_min, "max": grid_max, "step": grid_step},
        "instrument": recipe,
        "intercept_prepended": !data.no_intercept,
    });
    let doc = io::results_to_json(&[result], config);
    emit(out.as_deref(), &serde_json::to_string_pretty(&doc).unwrap())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ci(
    file_cfg: &FileConfig,
    data: DataArgs,
    methods: Vec<String>,
    tau: f64,
    alpha: Option<f64>,
    grid_min: f64,
    grid_max: f64,
    step: f64,
    est_grid_min: Option<f64>,
    est_grid_max: Option<f64>,
    est_grid_step: Option<f64>,
    mode: String,
    draws: Option<usize>,
    seed: Option<u64>,
    instrument: InstrumentArgs,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let ds = load(&data)?;
    let methods = methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>, _>>()?;
    let recipe = recipe_from(&instrument, file_cfg)?;
    let alpha = alpha.or(file_cfg.alpha).unwrap_or(0.10);
    let draws = draws
        .or(file_cfg.draws)
        .unwrap_or(bootstrap::DEFAULT_DRAWS);
    let seed = seed.or(file_cfg.seed).unwrap_or(0);
    let mode = parse_mode(&mode, draws)?;
    let ci_grid = ProfileGrid::new(grid_min, grid_max, step)?;
    let est_grid = ProfileGrid::new(
        est_grid_min.unwrap_or(grid_min),
        est_grid_max.unwrap_or(grid_max),
        est_grid_step.unwrap_or(step),
    )?;

    let mut wald_cfg = WaldConfig::new(est_grid);
    wald_cfg.alpha = alpha;
    wald_cfg.mode = mode;
    wald_cfg.seed = seed;
    let mut ar_cfg = ArConfig::new();
    ar_cfg.alpha = alpha;
    ar_cfg.mode = mode;
    ar_cfg.seed = seed;

    let sets = bootstrap::confidence_sets(&ds, &recipe, &methods, tau, &ci_grid, &wald_cfg, &ar_cfg)?;
    let config = serde_json::json!({
        "data": data.data,
        "methods": methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "tau": tau,
        "alpha": alpha,
        "ci_grid": {"min": grid_min, "max": grid_max, "step": step},
        "draws": draws,
        "seed": seed,
        "instrument": recipe,
    });
    let doc = serde_json::json!({
        "schema": "ivqr-confidence-sets/1",
        "config": config,
        "sets": sets,
    });
    emit(out.as_deref(), &serde_json::to_string_pretty(&doc).unwrap())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    file_cfg: &FileConfig,
    dgp: u8,
    n: usize,
    j: usize,
    dz: usize,
    pi: f64,
    r: f64,
    l: usize,
    eigens: String,
    adjacency_op: String,
    reps: Option<usize>,
    draws: Option<usize>,
    taus: Vec<f64>,
    alpha: Option<f64>,
    methods: Vec<String>,
    hypothesis: String,
    grid_step: f64,
    grid_halfwidth: f64,
    seed: Option<u64>,
    instrument: InstrumentArgs,
    out: Option<PathBuf>,
    dump_data: Option<PathBuf>,
) -> Result<(), Error> {
    let seed = seed.or(file_cfg.seed).unwrap_or(0);
    let dgp = match dgp {
        1 => DgpChoice::One(Dgp1Config {
            n,
            j,
            d_z: dz,
            pi,
            r,
            seed,
        }),
        2 => DgpChoice::Two(Dgp2Config {
            n,
            l,
            seed,
            eigens: EigenOrder::parse(&eigens)?,
            adjacency_op: AdjacencyOp::parse(&adjacency_op)?,
        }),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown design {other} (expected 1 or 2)"
            )))
        }
    };
    let methods = if methods.is_empty() {
        vec![Method::TCr, Method::T, Method::Ar, Method::TStd, Method::Im, Method::Crs]
    } else {
        methods
            .iter()
            .map(|m| Method::parse(m))
            .collect::<Result<Vec<_>, _>>()?
    };
    let hypothesis = match hypothesis.as_str() {
        "H0" => Hypothesis::H0,
        "H1" => Hypothesis::H1,
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown hypothesis `{other}` (expected H0 | H1)"
            )))
        }
    };
    let mc = McConfig {
        replications: reps.or(file_cfg.replications).unwrap_or(500),
        bootstrap_draws: draws.or(file_cfg.draws).unwrap_or(300),
        taus: if taus.is_empty() {
            vec![0.1, 0.25, 0.5, 0.75, 0.9]
        } else {
            taus
        },
        alpha: alpha.or(file_cfg.alpha).unwrap_or(0.10),
        methods,
        hypothesis,
        grid_halfwidth,
        grid_step,
        instrument: recipe_from(&instrument, file_cfg)?,
    };

    if let Some(dir) = &dump_data {
        std::fs::create_dir_all(dir)?;
        for rep in 0..mc.replications as u64 {
            let ds = match &dgp {
                DgpChoice::One(cfg) => dgp::Dgp1Sampler::new(cfg.clone())?.generate(rep),
                DgpChoice::Two(cfg) => cfg.generate(rep)?.dataset,
            };
            let file = std::fs::File::create(dir.join(format!("rep_{rep:05}.csv")))?;
            io::save_csv(&ds, std::io::BufWriter::new(file), true)?;
        }
    }

    let table = dgp::monte_carlo(&dgp, &mc)?;
    let config = serde_json::json!({"dgp": dgp, "mc": mc});
    match &out {
        Some(path) => {
            std::fs::write(path, io::mc_table_to_csv(&table))?;
            let cfg_path = path.with_extension("config.json");
            std::fs::write(
                cfg_path,
                serde_json::to_string_pretty(&config).unwrap(),
            )?;
        }
        None => {
            println!("{}", io::mc_table_to_csv(&table));
        }
    }
    Ok(())
}

fn cmd_cluster(
    edges_path: PathBuf,
    l: usize,
    seed: u64,
    eigens: &str,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let text = std::fs::read_to_string(&edges_path)?;
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut max_node = 0u32;
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(|p| p.trim()).collect();
        if parts.len() != 2 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "expected two comma-separated columns".into(),
            });
        }
        match (parts[0].parse::<u32>(), parts[1].parse::<u32>()) {
            (Ok(a), Ok(b)) => {
                max_node = max_node.max(a).max(b);
                edges.push((a, b));
            }
            _ if idx == 0 => continue, // header row
            _ => {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("cannot parse edge `{line}`"),
                })
            }
        }
    }
    let net = Network::new(max_node as usize + 1, &edges)?;
    let partition = clustering::spectral_partition(&net, l, seed, EigenOrder::parse(eigens)?)?;
    let mut text = String::from("node,label\n");
    for (node, label) in partition.labeled_nodes() {
        text.push_str(&format!("{node},{label}\n"));
    }
    emit(out.as_deref(), &text)
}
