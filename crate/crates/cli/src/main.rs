//! Experiment runner: single training runs, depth x variance grids,
//! signal-propagation probes, and analytic-moment validation.

mod svg;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use ssbnn::bnn::PredictFrom;
use ssbnn::config::{ExperimentConfig, GridConfig};
use ssbnn::metrics::METRICS_CSV_HEADER;
use ssbnn::numerics::Rng;
use ssbnn::priors::PriorStrategy;
use ssbnn::signalprop::{
    mc_moments, mean_prop, second_moment, variance_prop_full, LayerMomentParams, MomentState,
};
use ssbnn::train::{build_datasets, train_run_on, write_run_dir, RunLog};
use ssbnn::{Error, Result};

#[derive(Parser)]
#[command(name = "ssbnn", about = "Bayesian neural networks with self-stabilising priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictFromArg {
    Qtilde,
    Q,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for parallel cells/seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sample test-time predictions from the product posterior or from q.
    #[arg(long, value_enum)]
    predict_from: Option<PredictFromArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration across its seed list.
    Train(RunArgs),
    /// Train every (depth, variance, strategy) grid cell.
    Grid(RunArgs),
    /// Train while recording per-layer signal-variance probes.
    Probe {
        #[command(flatten)]
        run: RunArgs,
        /// Force posterior means and biases to zero.
        #[arg(long)]
        controlled: bool,
    },
    /// Validate the analytic moment equations against Monte Carlo.
    Moments {
        /// Units per Monte Carlo pass.
        #[arg(long, default_value_t = 4096)]
        width: usize,
        /// Number of passes; total samples = width * passes.
        #[arg(long, default_value_t = 25)]
        passes: usize,
        #[arg(long, default_value = "runs/moments")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => prepared(&args).and_then(|(cfg, out)| cmd_train(&cfg, &out, args.jobs)),
        Command::Grid(args) => prepared(&args).and_then(|(cfg, out)| cmd_grid(&cfg, &out, args.jobs)),
        Command::Probe { run, controlled } => {
            prepared(&run).and_then(|(cfg, out)| cmd_probe(&cfg, &out, controlled))
        }
        Command::Moments { width, passes, out } => cmd_moments(width, passes, &out),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn prepared(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(pf) = args.predict_from {
        cfg.model.predict_from = match pf {
            PredictFromArg::Qtilde => PredictFrom::QTilde,
            PredictFromArg::Q => PredictFrom::Q,
        };
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    Ok((cfg, out))
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Seed-averaged metrics over runs that reached each (epoch, split).
fn aggregate_metrics(logs: &[RunLog]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for split in ["train", "test"] {
        let evals = |log: &RunLog| -> Vec<(usize, ssbnn::metrics::EvalReport)> {
            if split == "train" {
                log.train_evals.clone()
            } else {
                log.test_evals.clone()
            }
        };
        let epochs: BTreeSet<usize> = logs
            .iter()
            .flat_map(|l| evals(l).into_iter().map(|(e, _)| e))
            .collect();
        for epoch in epochs {
            let reports: Vec<_> = logs
                .iter()
                .filter_map(|l| {
                    evals(l)
                        .into_iter()
                        .find(|(e, _)| *e == epoch)
                        .map(|(_, r)| r)
                })
                .collect();
            if reports.is_empty() {
                continue;
            }
            let n = reports.len() as f64;
            let mean = |f: &dyn Fn(&ssbnn::metrics::EvalReport) -> f64| {
                reports.iter().map(|r| f(r)).sum::<f64>() / n
            };
            let mean_opt = |f: &dyn Fn(&ssbnn::metrics::EvalReport) -> Option<f64>| {
                let vals: Vec<f64> = reports.iter().filter_map(|r| f(r)).collect();
                if vals.is_empty() {
                    String::new()
                } else {
                    (vals.iter().sum::<f64>() / vals.len() as f64).to_string()
                }
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                epoch,
                split,
                mean(&|r| r.accuracy),
                mean(&|r| r.brier),
                mean_opt(&|r| r.acc50),
                mean(&|r| r.cov50),
                mean_opt(&|r| r.acc90),
                mean(&|r| r.cov90),
                mean(&|r| r.nll),
            ));
        }
    }
    out
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<u8> {
    let (train, test) = build_datasets(&cfg.dataset)?;
    let seeds = cfg.train.seeds.clone();
    let logs: Vec<RunLog> = pool(jobs).install(|| {
        seeds
            .par_iter()
            .map(|&seed| -> Result<RunLog> {
                let (log, net) = train_run_on(cfg, &train, &test, seed, false)?;
                write_run_dir(&out.join(format!("run_seed{seed}")), cfg, &log, &net)?;
                Ok(log)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_text(&out.join("metrics_mean.csv"), &aggregate_metrics(&logs))?;
    Ok(0)
}

fn strategy_label(s: &PriorStrategy) -> &'static str {
    match s {
        PriorStrategy::FixedGaussian { .. } => "fixed_gaussian",
        PriorStrategy::EmpiricalBayes => "empirical_bayes",
        PriorStrategy::SelfStabilising => "self_stabilising",
        PriorStrategy::Combined { .. } => "combined",
    }
}

struct GridCell {
    depth_idx: usize,
    var_idx: usize,
    strat_idx: usize,
    mean_accuracy: f64,
    diverged_fraction: f64,
}

fn cmd_grid(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<u8> {
    let grid: GridConfig = cfg.grid.clone().unwrap_or_default();
    let (train, test) = build_datasets(&cfg.dataset)?;
    let chance = 1.0 / train.num_classes().unwrap_or(2) as f64;

    let mut cells = Vec::new();
    for (di, _) in grid.depths.iter().enumerate() {
        for (vi, _) in grid.variances.iter().enumerate() {
            for (si, _) in grid.strategies.iter().enumerate() {
                cells.push((di, vi, si));
            }
        }
    }
    let mut results: Vec<GridCell> = pool(jobs).install(|| {
        cells
            .par_iter()
            .map(|&(di, vi, si)| -> Result<GridCell> {
                let mut cell_cfg = cfg.clone();
                cell_cfg.model.depth = grid.depths[di];
                cell_cfg.model.init_variance = grid.variances[vi];
                cell_cfg.prior = grid.strategies[si].clone();
                let mut accs = Vec::new();
                let mut diverged = 0usize;
                for &seed in &cfg.train.seeds {
                    let (log, _) = train_run_on(&cell_cfg, &train, &test, seed, false)?;
                    if log.diverged {
                        diverged += 1;
                        accs.push(chance);
                    } else {
                        accs.push(log.final_test_accuracy().unwrap_or(chance));
                    }
                }
                Ok(GridCell {
                    depth_idx: di,
                    var_idx: vi,
                    strat_idx: si,
                    mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                    diverged_fraction: diverged as f64 / cfg.train.seeds.len() as f64,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    results.sort_by_key(|c| (c.depth_idx, c.var_idx, c.strat_idx));

    let mut csv = String::from("depth,variance,strategy,mean_accuracy,diverged_fraction\n");
    for c in &results {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            grid.depths[c.depth_idx],
            grid.variances[c.var_idx],
            strategy_label(&grid.strategies[c.strat_idx]),
            c.mean_accuracy,
            c.diverged_fraction
        ));
    }
    write_text(&out.join("grid.csv"), &csv)?;

    for (si, strategy) in grid.strategies.iter().enumerate() {
        let values: Vec<Vec<Option<f64>>> = grid
            .depths
            .iter()
            .enumerate()
            .map(|(di, _)| {
                grid.variances
                    .iter()
                    .enumerate()
                    .map(|(vi, _)| {
                        results
                            .iter()
                            .find(|c| {
                                c.depth_idx == di && c.var_idx == vi && c.strat_idx == si
                            })
                            .map(|c| c.mean_accuracy)
                    })
                    .collect()
            })
            .collect();
        let svg = svg::heatmap(
            &format!("mean test accuracy — {}", strategy_label(strategy)),
            "initial variance",
            "depth",
            &grid.variances.iter().map(|v| format!("{v}")).collect::<Vec<_>>(),
            &grid.depths.iter().map(|d| format!("{d}")).collect::<Vec<_>>(),
            &values,
            0.0,
            1.0,
        );
        write_text(
            &out.join(format!("heatmap_{si}_{}.svg", strategy_label(strategy))),
            &svg,
        )?;
    }
    Ok(0)
}

fn cmd_probe(cfg: &ExperimentConfig, out: &Path, controlled: bool) -> Result<u8> {
    let (train, test) = build_datasets(&cfg.dataset)?;
    let seed = cfg.train.seeds[0];
    let (log, net) = train_run_on(cfg, &train, &test, seed, controlled)?;
    write_run_dir(&out.join(format!("run_seed{seed}")), cfg, &log, &net)?;
    write_text(&out.join("trace.csv"), &log.trace.to_csv())?;

    // Up to four probes, evenly spaced, each with its analytic overlay.
    let n = log.trace.entries.len();
    let picks: Vec<usize> = if n <= 4 {
        (0..n).collect()
    } else {
        vec![0, n / 3, 2 * n / 3, n - 1]
    };
    let mut series = Vec::new();
    for &i in &picks {
        let entry = &log.trace.entries[i];
        let to_points = |vals: &[f64]| {
            vals.iter()
                .enumerate()
                .map(|(l, v)| (l as f64 + 1.0, v.max(1e-300).log10()))
                .collect::<Vec<_>>()
        };
        series.push(svg::Series {
            label: format!("step {}", entry.step),
            points: to_points(&entry.empirical_var),
            dashed: false,
        });
        series.push(svg::Series {
            label: format!("analytic @{}", entry.step),
            points: to_points(&entry.analytic_var),
            dashed: true,
        });
    }
    let svg = svg::line_chart(
        "pre-activation variance by layer",
        "layer",
        "log10 variance",
        &series,
    );
    write_text(&out.join("trace.svg"), &svg)?;
    Ok(0)
}

fn cmd_moments(width: usize, passes: usize, out: &Path) -> Result<u8> {
    let n_samples = width * passes;
    let mut rng = Rng::new(0x0a0b_0c0d);
    let mut csv = String::from("width,tau,nu,mu_tilde,var_tilde,moment,analytic,mc,se,var_ratio,pass\n");
    let mut all_pass = true;
    println!(
        "{:>6} {:>5} {:>5} {:>8} {:>9} {:>8} {:>12} {:>12} {:>10} {:>9} {:>5}",
        "width", "tau", "nu", "mu", "var", "moment", "analytic", "mc", "se", "ratio", "pass"
    );
    // tau = 0 rows first (the fixed-point row is mu=0, var=2, nu=1), then
    // nonzero-mean and nonzero-tau rows.
    let sweep: [(f64, f64, f64, f64); 8] = [
        (0.0, 1.0, 0.0, 2.0),
        (0.0, 2.0, 0.0, 0.5),
        (0.0, 1.0, 0.5, 1.5),
        (0.0, 2.5, -0.8, 0.4),
        (0.0, 0.5, 1.0, 1.0),
        (0.8, 1.2, 0.6, 0.9),
        (-0.5, 2.0, 1.1, 0.2),
        (1.5, 0.7, -0.4, 1.3),
    ];
    for (tau, nu, mu, var) in sweep {
        let state = MomentState::new(tau, nu);
        let p = LayerMomentParams::new(mu, var, 0.0, 0.0);
        let mc = mc_moments(&state, &p, n_samples, &mut rng);
        let rows = [
            ("mean", mean_prop(&state, &p), mc.mean, mc.se_mean, f64::NAN),
            (
                "second",
                second_moment(&state, &p),
                mc.second,
                mc.se_second,
                f64::NAN,
            ),
            (
                "variance",
                variance_prop_full(&state, &p),
                mc.variance,
                mc.se_variance,
                variance_prop_full(&state, &p) / nu,
            ),
        ];
        for (name, analytic, sampled, se, ratio) in rows {
            let ok = (analytic - sampled).abs() < 3.0 * se;
            all_pass &= ok;
            let ratio_str = if ratio.is_nan() {
                String::new()
            } else {
                format!("{ratio:.3}")
            };
            println!(
                "{width:>6} {tau:>5.2} {nu:>5.2} {mu:>8.2} {var:>9.2} {name:>8} {analytic:>12.6} {sampled:>12.6} {se:>10.2e} {ratio_str:>9} {:>5}",
                if ok { "ok" } else { "FAIL" }
            );
            csv.push_str(&format!(
                "{width},{tau},{nu},{mu},{var},{name},{analytic},{sampled},{se},{ratio_str},{}\n",
                if ok { "ok" } else { "fail" }
            ));
        }
    }
    write_text(&out.join("moments.csv"), &csv)?;
    Ok(if all_pass { 0 } else { 1 })
}
