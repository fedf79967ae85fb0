//! Optimisers, the training loop, and run logging/serialisation.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bnn::{Likelihood, Network};
use crate::config::{DatasetConfig, ExperimentConfig, OptimizerKind, TrainConfig};
use crate::data::{
    batches, gen_synthetic_images, gen_two_moons, load_csv, load_idx, Dataset,
};
use crate::distributions::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::gradengine::{forward_and_backward, ParamRole, ParamSet};
use crate::metrics::{EvalReport, METRICS_CSV_HEADER};
use crate::numerics::{softplus_inv, Matrix, Rng, Vector};
use crate::signalprop::{depth_profile, empirical_probe, SignalTrace, TraceEntry};

/// Optimiser with per-parameter moment buffers (used by Adam only).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(cfg: &TrainConfig, params: &ParamSet) -> Self {
        let buffers: Vec<Matrix> = params
            .entries
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect();
        OptimizerState {
            kind: cfg.optimizer,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps_adam,
            step: 0,
            m: buffers.clone(),
            v: buffers,
        }
    }

    /// One descent step on the minimised objective using the gradients held
    /// in `params`. Non-finite gradients are an error, never clipped.
    pub fn apply(&mut self, params: &mut ParamSet) -> Result<()> {
        for (idx, entry) in params.entries.iter().enumerate() {
            if !entry.grad.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: format!("gradient for layer {} {:?}", entry.layer, entry.role),
                    phase: "optimizer",
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for entry in params.entries.iter_mut() {
                    for (p, g) in entry.value.data_mut().iter_mut().zip(entry.grad.data()) {
                        *p -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, entry) in params.entries.iter_mut().enumerate() {
                    for ((p, g), (m, v)) in entry
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(entry.grad.data())
                        .zip(self.m[i].data_mut().iter_mut().zip(self.v[i].data_mut()))
                    {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        // Keep posterior sigmas above the floor.
        let rho_floor = softplus_inv(SIGMA_FLOOR);
        for entry in params.entries.iter_mut() {
            if entry.role == ParamRole::WeightRho {
                for p in entry.value.data_mut() {
                    if *p < rho_floor {
                        *p = rho_floor;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything one training run produces besides the final checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub config_hash: u64,
    /// (step, single-sample ELBO) per gradient step.
    pub elbo: Vec<(usize, f64)>,
    /// (epoch, report) pairs; epoch 0 is the pre-training evaluation.
    pub train_evals: Vec<(usize, EvalReport)>,
    pub test_evals: Vec<(usize, EvalReport)>,
    pub trace: SignalTrace,
    pub epoch_seconds: Vec<f64>,
    pub diverged: bool,
}

impl RunLog {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.test_evals.last().map(|(_, r)| r.accuracy)
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for (epoch, report) in &self.train_evals {
            out.push_str(&report.csv_row(*epoch, "train"));
            out.push('\n');
        }
        for (epoch, report) in &self.test_evals {
            out.push_str(&report.csv_row(*epoch, "test"));
            out.push('\n');
        }
        out
    }

    pub fn elbo_csv(&self) -> String {
        let mut out = String::from("step,elbo\n");
        for (step, value) in &self.elbo {
            out.push_str(&format!("{step},{value}\n"));
        }
        out
    }
}

/// Materialises the train/test splits described by the config. Generated
/// datasets use fixed internal seeds so every run and grid cell sees the
/// same data.
pub fn build_datasets(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match cfg {
        DatasetConfig::SyntheticImages { n_train, n_test, noise } => {
            let mut rng = Rng::new(0x00da_7a01);
            let train = gen_synthetic_images(*n_train, *noise, &mut rng);
            let mut rng = Rng::new(0x00da_7a02);
            let mut test = gen_synthetic_images(*n_test, *noise, &mut rng);
            test.split = "test".into();
            Ok((train, test))
        }
        DatasetConfig::TwoMoons { n_train, n_test, noise } => {
            let mut rng = Rng::new(0x00da_7a03);
            let train = gen_two_moons(*n_train, *noise, &mut rng);
            let mut rng = Rng::new(0x00da_7a04);
            let mut test = gen_two_moons(*n_test, *noise, &mut rng);
            test.split = "test".into();
            Ok((train, test))
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_train,
            n_test,
        } => {
            let mut train = load_idx(Path::new(train_images), Path::new(train_labels))?;
            let mut test = load_idx(Path::new(test_images), Path::new(test_labels))?;
            if *n_train > 0 {
                train = train.take(*n_train);
            }
            if *n_test > 0 {
                test = test.take(*n_test);
            }
            test.split = "test".into();
            Ok((train, test))
        }
        DatasetConfig::Csv { train_path, test_path } => {
            let train = load_csv(Path::new(train_path))?;
            let mut test = load_csv(Path::new(test_path))?;
            test.split = "test".into();
            Ok((train, test))
        }
    }
}

fn evaluate(net: &Network, ds: &Dataset, rng: &mut Rng, samples: usize) -> Result<EvalReport> {
    let labels = ds.targets.class_labels().ok_or_else(|| Error::Config {
        field: "dataset".into(),
        reason: "evaluation requires class targets".into(),
    })?;
    let probs = net.predict(&ds.inputs, rng, samples)?;
    EvalReport::from_probs(&probs, labels)
}

fn probe_entry(
    net: &Network,
    x0: &Matrix,
    step: usize,
    rng: &mut Rng,
) -> Result<TraceEntry> {
    let (_, record) = net.forward_rt(x0, rng)?;
    let empirical = empirical_probe(&record);
    let analytic = depth_profile(net, &Vector::from_vec(x0.row(0).to_vec()))?;
    Ok(TraceEntry {
        step,
        empirical_var: empirical,
        analytic_var: analytic,
        flagged_units: record.flagged_units.clone(),
    })
}

/// Builds the network for a config and seed. `controlled` forces posterior
/// means and biases to zero for the signal-propagation experiments.
pub fn build_network(
    cfg: &ExperimentConfig,
    train: &Dataset,
    seed: u64,
    controlled: bool,
) -> Result<Network> {
    let output_dim = train.num_classes().ok_or_else(|| Error::Config {
        field: "dataset".into(),
        reason: "training requires class targets".into(),
    })?;
    let dims = cfg.dims(train.num_features(), output_dim);
    let mut init_rng = Rng::derived(seed, 0);
    let mut net = Network::new(
        &dims,
        cfg.model.estimator,
        cfg.prior.clone(),
        Likelihood::Categorical,
        cfg.model.predict_from,
        cfg.model.init_variance,
        &mut init_rng,
    )?;
    if controlled {
        net.zero_means_and_biases();
    }
    Ok(net)
}

/// Runs one seed of the configured experiment: per step the prior is
/// refreshed from the current posterior, the ELBO tape is built and
/// differentiated, and the optimiser updates the posterior. A non-finite
/// objective or gradient marks the run diverged and stops it; the log is
/// still returned.
pub fn train_run(
    cfg: &ExperimentConfig,
    seed: u64,
    controlled: bool,
) -> Result<(RunLog, Network)> {
    cfg.validate()?;
    let (train, test) = build_datasets(&cfg.dataset)?;
    train_run_on(cfg, &train, &test, seed, controlled)
}

/// As `train_run` but with pre-built datasets (shared across grid cells).
pub fn train_run_on(
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    controlled: bool,
) -> Result<(RunLog, Network)> {
    let mut net = build_network(cfg, train, seed, controlled)?;
    let mut params = net.param_set();
    let mut opt = OptimizerState::new(&cfg.train, &params);

    let mut shuffle_rng = Rng::derived(seed, 1);
    let mut noise_rng = Rng::derived(seed, 2);
    let mut probe_rng = Rng::derived(seed, 3);
    let mut eval_rng = Rng::derived(seed, 4);

    let probe_x = Matrix::from_vec(1, test.num_features(), test.inputs.row(0).to_vec())?;
    let samples = cfg.model.predict_samples;

    let mut log = RunLog {
        seed,
        config_hash: cfg.hash(),
        elbo: Vec::new(),
        train_evals: Vec::new(),
        test_evals: Vec::new(),
        trace: SignalTrace::new(),
        epoch_seconds: Vec::new(),
        diverged: false,
    };

    log.trace.push(probe_entry(&net, &probe_x, 0, &mut probe_rng)?);
    // The initial evaluation is skipped when only the final state is
    // being measured (eval_every = 0 with a nonzero epoch budget).
    if cfg.train.eval_every > 0 || cfg.train.epochs == 0 {
        if cfg.train.eval_train {
            log.train_evals
                .push((0, evaluate(&net, train, &mut eval_rng, samples)?));
        }
        log.test_evals
            .push((0, evaluate(&net, test, &mut eval_rng, samples)?));
    }

    let mut step = 0usize;
    'epochs: for epoch in 1..=cfg.train.epochs {
        let started = Instant::now();
        for (x, targets) in batches(train, cfg.train.batch_size, &mut shuffle_rng, true) {
            step += 1;
            let outcome = (|| -> Result<f64> {
                let snapshot = net.prior_snapshot()?;
                let noise = net.draw_noise(x.rows(), &mut noise_rng);
                let built = net.build_objective(&x, &targets, train.len(), &noise, &snapshot)?;
                let loss = forward_and_backward(&built.objective, &mut params)?;
                opt.apply(&mut params)?;
                net.set_params(&params);
                Ok(-loss)
            })();
            match outcome {
                Ok(elbo) if elbo.is_finite() => log.elbo.push((step, elbo)),
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    log.diverged = true;
                    log.epoch_seconds.push(started.elapsed().as_secs_f64());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            if step % cfg.train.probe_every == 0 {
                log.trace
                    .push(probe_entry(&net, &probe_x, step, &mut probe_rng)?);
            }
        }
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
        let is_last = epoch == cfg.train.epochs;
        let due = cfg.train.eval_every > 0 && epoch % cfg.train.eval_every == 0;
        if due || is_last {
            if cfg.train.eval_train {
                log.train_evals
                    .push((epoch, evaluate(&net, train, &mut eval_rng, samples)?));
            }
            log.test_evals
                .push((epoch, evaluate(&net, test, &mut eval_rng, samples)?));
        }
    }
    if step > 0 && !log.diverged && step % cfg.train.probe_every != 0 {
        log.trace
            .push(probe_entry(&net, &probe_x, step, &mut probe_rng)?);
    }
    Ok((log, net))
}

/// Serialises a run as a directory: config copy, metrics.csv, elbo.csv,
/// trace.csv, run.json, checkpoint.json.
pub fn write_run_dir(
    dir: &Path,
    cfg: &ExperimentConfig,
    log: &RunLog,
    net: &Network,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(path.display().to_string(), e))
    };
    write("config.toml", cfg.to_toml())?;
    write("metrics.csv", log.metrics_csv())?;
    write("elbo.csv", log.elbo_csv())?;
    write("trace.csv", log.trace.to_csv())?;
    write(
        "run.json",
        serde_json::to_string_pretty(log).map_err(|e| Error::Checkpoint(e.to_string()))?,
    )?;
    net.save_checkpoint(&dir.join("checkpoint.json"))
}
