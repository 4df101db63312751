// SPDX-License-Identifier: MIT OR Apache-2.0

//! `cpx`: command-line front end for the changepoint inference engine.
//!
//! Subcommands cover the full pipeline: `simulate` → `filter` / `map` /
//! `sample` / `marginals` / `entropy` → `em` / `loglik-grid` → `credible` /
//! `importance`. All outputs are plain CSV or JSON; every randomized command
//! accepts `--seed` (one is generated and printed otherwise), so runs are
//! byte-reproducible. `CPX_THREADS` caps internal parallelism.
//!
//! Exit codes: 0 success, 1 usage error, 2 numeric failure.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpx_core::credible::{
    default_alpha_grid, export_ilp, greedy_ladder, importance, region_for_alpha, SampleSet,
};
use cpx_core::em::{em_run, EmConfig, EmTarget};
use cpx_core::forward::{filter_auto, filter_pruned, log_marginal_likelihood, ForwardResult};
use cpx_core::model::{LengthPrior, ModelConfig, ObservationFamily, PruneConfig, TimeSeries};
use cpx_core::pointwise::marginal_report;
use cpx_core::posterior::{
    backward_weights, entropy, map_segmentation, sample_many, BackwardTable,
};
use cpx_core::simulate::{gen_piecewise, preset_emstudy, preset_intro, SimSpec};
use cpx_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "cpx", version, about = "Exact Bayesian changepoint inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataModelArgs {
    /// Input series CSV (one value per line; `-` or omitted: stdin).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model configuration JSON.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Forward filtering: marginal loglikelihood and particle diagnostics.
    Filter {
        #[command(flatten)]
        dm: DataModelArgs,
        /// Override pruning as `T,Tprime` (e.g. `200,1e-15`).
        #[arg(long)]
        prune: Option<String>,
        /// Output JSON path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the run-length density table (CSV: i, j, c_ji).
        #[arg(long)]
        density_csv: Option<PathBuf>,
    },
    /// Maximum a-posteriori segmentation.
    Map {
        #[command(flatten)]
        dm: DataModelArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact posterior samples of the changepoint configuration.
    Sample {
        #[command(flatten)]
        dm: DataModelArgs,
        /// Number of draws (must be ≥ 1).
        #[arg(long)]
        draws: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV: one sorted comma-joined changepoint list per line.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pointwise marginals, moment trajectories, and summary bands.
    Marginals {
        #[command(flatten)]
        dm: DataModelArgs,
        /// Output CSV: i, q_tilde, mean, sd, skew, band_lo, band_hi.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entropy of the changepoint-configuration posterior.
    Entropy {
        #[command(flatten)]
        dm: DataModelArgs,
    },
    /// EM parameter estimation.
    Em {
        #[command(flatten)]
        dm: DataModelArgs,
        /// Comma-separated subset of q,tau,sigma.
        #[arg(long)]
        targets: String,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        /// Trace JSON path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Marginal loglikelihood over a parameter grid (CSV: param, loglik,
    /// map_count).
    LoglikGrid {
        #[command(flatten)]
        dm: DataModelArgs,
        /// Parameter to sweep: q, tau, or sigma.
        #[arg(long)]
        param: String,
        /// Inclusive grid `start:end:steps`.
        #[arg(long)]
        range: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simultaneous credible regions from a sample CSV.
    Credible {
        /// Sample CSV (one comma-joined changepoint list per line).
        #[arg(long)]
        samples: PathBuf,
        /// Number of timepoints (default: largest sampled changepoint).
        #[arg(long)]
        n: Option<usize>,
        /// Ladder CSV: coverage followed by the comma-joined region.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export the exact problem as a CPLEX-LP file instead.
        #[arg(long)]
        ilp: Option<PathBuf>,
        /// Coverage level for the ILP export.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Importance of a timepoint window under the credible-region ladder.
    Importance {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Inclusive window `lo:hi`.
        #[arg(long)]
        window: String,
    },
    /// Generate synthetic data with known ground truth.
    Simulate {
        /// Preset design: `emstudy` or `intro`.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Series CSV output (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ground-truth JSON output.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Robust location summary (median and MAD) for setting the height
    /// center parameter.
    Location {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    configure_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .downcast_ref::<CoreError>()
                .map(|c| matches!(c, CoreError::Numeric(_)))
                .unwrap_or(false);
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("CPX_THREADS") {
        if let Ok(k) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Filter {
            dm,
            prune,
            out,
            density_csv,
        } => {
            let data = read_series(dm.data.as_deref())?;
            let mut model = read_model(&dm.model)?;
            if let Some(spec) = prune {
                model.prune = Some(parse_prune(&spec)?);
            }
            let res = filter_auto(&data, &model)?;
            let n = res.n();
            let counts: Vec<usize> = (1..=n).map(|i| res.grid.particle_count(i)).collect();
            let summary = serde_json::json!({
                "loglik": log_marginal_likelihood(&res),
                "log_z": res.grid.log_z(),
                "particle_counts": counts,
                "total_particles": res.grid.total_particles(),
                "clamped_steps": res.clamped_steps,
            });
            write_out(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
            if let Some(path) = density_csv {
                let mut csv = String::from("i,j,c_ji\n");
                for i in 1..=n {
                    for &(j, c) in res.grid.col(i) {
                        csv.push_str(&format!("{i},{j},{c}\n"));
                    }
                }
                std::fs::write(path, csv)?;
            }
            Ok(())
        }
        Command::Map { dm, out } => {
            let (data, model) = load(&dm)?;
            let bt = backward(&data, &model)?;
            let map = map_segmentation(&bt);
            let score = cpx_core::posterior::config_log_likelihood(&bt, &map);
            let body = serde_json::json!({
                "changepoints": map.taus(),
                "log_posterior": score.log_likelihood,
            });
            write_out(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&body)?))
        }
        Command::Sample {
            dm,
            draws,
            seed,
            out,
        } => {
            if draws == 0 {
                anyhow::bail!("--draws must be at least 1");
            }
            let (data, model) = load(&dm)?;
            let bt = backward(&data, &model)?;
            let seed = resolve_seed(seed);
            let samples = sample_many(&bt, draws, seed);
            let mut csv = String::new();
            for s in &samples {
                csv.push_str(&join(s.taus()));
                csv.push('\n');
            }
            write_out(out.as_deref(), &csv)
        }
        Command::Marginals { dm, out } => {
            let (data, model) = load(&dm)?;
            let bt = backward(&data, &model)?;
            let rep = marginal_report(&bt, &data, &model)?;
            let mut csv = String::from("i,q_tilde,mean,sd,skew,band_lo,band_hi\n");
            for i in 0..data.len() {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    i + 1,
                    rep.q_tilde[i],
                    rep.bands.mean[i],
                    rep.bands.sd[i],
                    rep.bands.skew[i],
                    rep.bands.band_lo[i],
                    rep.bands.band_hi[i],
                ));
            }
            write_out(out.as_deref(), &csv)
        }
        Command::Entropy { dm } => {
            let (data, model) = load(&dm)?;
            let bt = backward(&data, &model)?;
            println!("{}", serde_json::json!({ "entropy": entropy(&bt) }));
            Ok(())
        }
        Command::Em {
            dm,
            targets,
            tol,
            max_iter,
            out,
        } => {
            let (data, model) = load(&dm)?;
            let targets = parse_targets(&targets)?;
            let config = EmConfig {
                tol,
                max_iter,
                ..EmConfig::default()
            };
            let (trace, final_model) = em_run(&data, &model, &targets, &config)?;
            let body = serde_json::json!({
                "trace": trace,
                "final_model": final_model,
            });
            write_out(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&body)?))
        }
        Command::LoglikGrid {
            dm,
            param,
            range,
            out,
        } => {
            let (data, model) = load(&dm)?;
            let grid = parse_range(&range)?;
            let mut csv = String::from("param,loglik,map_count\n");
            for v in grid {
                let mut m = model.clone();
                set_param(&mut m, &param, v)?;
                m.validate()?;
                let res = filter_auto(&data, &m)?;
                let bt = backward_weights(&res, &res.hazard)?;
                let map = map_segmentation(&bt);
                csv.push_str(&format!(
                    "{v},{},{}\n",
                    log_marginal_likelihood(&res),
                    map.len()
                ));
            }
            write_out(out.as_deref(), &csv)
        }
        Command::Credible {
            samples,
            n,
            out,
            ilp,
            alpha,
        } => {
            let set = read_samples(&samples, n)?;
            if let Some(path) = ilp {
                export_ilp(&set, alpha, &path)?;
                return Ok(());
            }
            let ladder = greedy_ladder(&set);
            let mut csv = String::new();
            for alpha in default_alpha_grid() {
                let region = region_for_alpha(&ladder, alpha);
                csv.push_str(&format!("{},{}\n", 1.0 - alpha, join(region)));
            }
            write_out(out.as_deref(), &csv)
        }
        Command::Importance { samples, n, window } => {
            let set = read_samples(&samples, n)?;
            let (lo, hi) = parse_window(&window)?;
            let win: Vec<usize> = (lo..=hi).collect();
            let ladder = greedy_ladder(&set);
            let alpha_hat = importance(&ladder, &win)?;
            println!("{}", serde_json::json!({ "alpha_hat": alpha_hat }));
            Ok(())
        }
        Command::Simulate {
            preset,
            seed,
            out,
            truth,
        } => {
            let spec: SimSpec = match preset.as_str() {
                "emstudy" => preset_emstudy(),
                "intro" => preset_intro(),
                other => anyhow::bail!("unknown preset `{other}` (expected emstudy or intro)"),
            };
            let seed = resolve_seed(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sim = gen_piecewise(&spec, &mut rng)?;
            let mut csv = String::from("value\n");
            for &v in sim.data.values() {
                csv.push_str(&format!("{v}\n"));
            }
            write_out(out.as_deref(), &csv)?;
            if let Some(path) = truth {
                let body = serde_json::json!({
                    "seed": seed,
                    "changepoints": sim.truth.taus(),
                    "heights": sim.heights,
                });
                std::fs::write(path, format!("{}\n", serde_json::to_string_pretty(&body)?))?;
            }
            Ok(())
        }
        Command::Location { data } => {
            let series = read_series(data.as_deref())?;
            let med = median(series.values());
            let deviations: Vec<f64> = series.values().iter().map(|v| (v - med).abs()).collect();
            let mad = median(&deviations);
            println!("{}", serde_json::json!({ "median": med, "mad": mad }));
            Ok(())
        }
    }
}

fn load(dm: &DataModelArgs) -> anyhow::Result<(TimeSeries, ModelConfig)> {
    Ok((read_series(dm.data.as_deref())?, read_model(&dm.model)?))
}

fn backward(data: &TimeSeries, model: &ModelConfig) -> anyhow::Result<BackwardTable> {
    let res: ForwardResult = filter_auto(data, model)?;
    Ok(backward_weights(&res, &res.hazard)?)
}

/// Parses a series CSV: one numeric value per line, optional single header
/// line; non-finite entries are rejected with their line number.
fn parse_series(text: &str) -> anyhow::Result<TimeSeries> {
    let mut values = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            Ok(_) => anyhow::bail!("non-finite value at line {}", lineno + 1),
            Err(_) if lineno == 0 && values.is_empty() => {} // header
            Err(_) => anyhow::bail!("unparseable value at line {}", lineno + 1),
        }
    }
    Ok(TimeSeries::new(values)?)
}

fn read_series(path: Option<&Path>) -> anyhow::Result<TimeSeries> {
    let text = match path {
        Some(p) if p.as_os_str() != "-" => std::fs::read_to_string(p)
            .map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?,
        _ => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    parse_series(&text)
}

fn read_model(path: &Path) -> anyhow::Result<ModelConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(ModelConfig::from_json(&text)?)
}

fn read_samples(path: &Path, n: Option<usize>) -> anyhow::Result<SampleSet> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let mut s = Vec::new();
        if !line.is_empty() {
            for tok in line.split(',') {
                let t: usize = tok.trim().parse().map_err(|_| {
                    anyhow::anyhow!("bad changepoint `{tok}` at line {}", lineno + 1)
                })?;
                s.push(t);
            }
        }
        samples.push(s);
    }
    let n = n.unwrap_or_else(|| {
        samples
            .iter()
            .flat_map(|s| s.iter().copied())
            .max()
            .unwrap_or(1)
    });
    Ok(SampleSet::new(samples, n)?)
}

fn write_out(path: Option<&Path>, content: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, content)
            .map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display())),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::thread_rng().gen();
            eprintln!("seed: {s}");
            s
        }
    }
}

fn parse_prune(spec: &str) -> anyhow::Result<PruneConfig> {
    let (t, tp) = spec
        .split_once(',')
        .ok_or_else(|| anyhow::anyhow!("expected --prune T,Tprime"))?;
    let cfg = PruneConfig {
        t: t.trim().parse()?,
        t_prime: tp.trim().parse()?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_targets(spec: &str) -> anyhow::Result<Vec<EmTarget>> {
    let mut targets = Vec::new();
    for tok in spec.split(',') {
        targets.push(match tok.trim() {
            "q" => EmTarget::Q,
            "tau" => EmTarget::Tau,
            "sigma" => EmTarget::Sigma,
            other => anyhow::bail!("unknown EM target `{other}`"),
        });
    }
    Ok(targets)
}

fn parse_range(spec: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        anyhow::bail!("expected --range start:end:steps");
    }
    let (a, b): (f64, f64) = (parts[0].parse()?, parts[1].parse()?);
    let steps: usize = parts[2].parse()?;
    if steps < 1 {
        anyhow::bail!("need at least one grid step");
    }
    if steps == 1 {
        return Ok(vec![a]);
    }
    Ok((0..steps)
        .map(|k| a + (b - a) * k as f64 / (steps - 1) as f64)
        .collect())
}

fn parse_window(spec: &str) -> anyhow::Result<(usize, usize)> {
    let (lo, hi) = spec
        .split_once(':')
        .ok_or_else(|| anyhow::anyhow!("expected --window lo:hi"))?;
    let (lo, hi): (usize, usize) = (lo.trim().parse()?, hi.trim().parse()?);
    if lo == 0 || hi < lo {
        anyhow::bail!("window must satisfy 1 ≤ lo ≤ hi");
    }
    Ok((lo, hi))
}

fn set_param(model: &mut ModelConfig, param: &str, v: f64) -> anyhow::Result<()> {
    match param {
        "q" => match model.length_prior {
            LengthPrior::Geometric { ref mut q } => *q = v,
            LengthPrior::NegativeBinomial { ref mut q, .. } => *q = v,
        },
        "tau" => match model.observation {
            ObservationFamily::LaplaceMedian { ref mut tau, .. } => *tau = v,
            _ => anyhow::bail!("tau applies to the Laplace kernel only"),
        },
        "sigma" => match model.observation {
            ObservationFamily::LaplaceMedian { ref mut sigma, .. } => *sigma = v,
            ObservationFamily::GaussianMeanKnownVar { ref mut sigma, .. } => *sigma = v,
            ObservationFamily::GaussianVarKnownMean { .. } => {
                anyhow::bail!("sigma does not apply to the variance-change kernel")
            }
        },
        other => anyhow::bail!("unknown parameter `{other}` (expected q, tau, or sigma)"),
    }
    Ok(())
}

fn join(taus: &[usize]) -> String {
    taus.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

// Keep the pruned entry point linked even though `filter_auto` covers it:
// `--prune` overrides route through the model configuration.
#[allow(dead_code)]
fn _pruned_alias(
    data: &TimeSeries,
    model: &ModelConfig,
    t: usize,
    tp: f64,
) -> cpx_core::Result<ForwardResult> {
    filter_pruned(data, model, t, tp)
}
