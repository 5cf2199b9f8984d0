use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fieldcraft::config::Config;
use fieldcraft::dynamics::{compare_binned, mean_periodogram, response_spectrum, simulate_stochastic_field, Excitation};
use fieldcraft::infer::{
    advi_mfa, bin_information, map_estimate, mgvi, spectrum_bands, summarize, truth_metrics, wiener_filter, MetricOptions, PosteriorApprox,
    TruthMetrics,
};
use fieldcraft::likelihood::{Dataset, ModelLikelihood, NoiseModel};
use fieldcraft::model::{GenerativeModel, LatentVector, LinearModelOperator};
use fieldcraft::validation::{validate_model, ValidationReport};
use fieldcraft::{io, rng, Error, Method};
use log::info;
use serde::Serialize;

use crate::rundir::RunDir;
use crate::{Failure, RunArgs};

/// Stream purpose of the simulated truth, its noise and the initial point.
const PURPOSE_RUN: u32 = 9;

fn config_err(e: impl Display) -> Failure {
    Failure::Config(e.to_string())
}

fn numeric_err(e: Error) -> Failure {
    Failure::Numeric(e.to_string())
}

fn load(args: &RunArgs) -> Result<(Config, u64), Failure> {
    let config = Config::load(&args.config).map_err(config_err)?;
    let seed = args.seed.unwrap_or(config.seed);
    Ok((config, seed))
}

fn out_dir(args: &RunArgs, command: &str) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("fieldcraft-{command}")))
}

fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<(), Failure> {
    let text = toml::to_string(value).map_err(config_err)?;
    std::fs::write(path, text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn finish(run: RunDir) -> Result<(), Failure> {
    let (dir, files) = run.finish().map_err(Failure::Config)?;
    println!("wrote {}", dir.display());
    for f in files {
        println!("  {f}");
    }
    Ok(())
}

fn io_err(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

#[derive(Serialize)]
struct SimulateDiagnostics {
    command: &'static str,
    seed: u64,
    grid_shape: Vec<usize>,
    latent_dim: usize,
    data_dim: usize,
    noise_sigma: f64,
    zero_noise: bool,
}

pub fn simulate(args: &RunArgs) -> Result<(), Failure> {
    let (config, seed) = load(args)?;
    let model: GenerativeModel<f64> = config.model().map_err(config_err)?;
    let noise = config.noise().map_err(config_err)?;
    let truth = model.sample_latent(seed, rng::stream_id(PURPOSE_RUN, 0, 0));
    let pass = model.forward(&truth).map_err(numeric_err)?;
    let sigma = noise.sigma_for(&pass.d_prime).map_err(config_err)?;
    let d: Vec<f64> = if noise.zero_noise {
        pass.d_prime.clone()
    } else {
        let mut r = rng::stream(seed, rng::stream_id(PURPOSE_RUN, 1, 0));
        let n: Vec<f64> = rng::standard_normal_vec(&mut r, pass.d_prime.len());
        pass.d_prime.iter().zip(&n).map(|(a, b)| a + sigma * b).collect()
    };
    let dataset = Dataset::new(d, NoiseModel::white(sigma, pass.d_prime.len()).map_err(config_err)?).map_err(config_err)?;

    let grid = model.grid();
    let mut run = RunDir::create(&out_dir(args, "simulate")).map_err(Failure::Config)?;
    io::write_vector(run.pair("truth_latent"), "truth_latent", "latent", &truth.to_flat()).map_err(io_err)?;
    io::write_field(run.pair("truth_phi"), "truth_phi", "phi", grid, pass.phi.values()).map_err(io_err)?;
    io::write_field(run.pair("truth_s"), "truth_s", "s", grid, pass.s.values()).map_err(io_err)?;
    io::write_vector(run.pair("data_noiseless"), "data_noiseless", "d_prime", &pass.d_prime).map_err(io_err)?;
    io::write_dataset(run.pair("data"), "data", &dataset).map_err(io_err)?;
    let kappa = model.binning().kappa_of_bin();
    io::write_csv(
        &run.file("truth_spectrum.csv"),
        &["kappa", "psi"],
        kappa.iter().zip(&pass.psi).map(|(&k, &p)| vec![k, p]),
    )
    .map_err(io_err)?;
    io::write_pgm(&run.file("truth_phi.pgm"), grid, pass.phi.values()).map_err(io_err)?;
    io::write_pgm(&run.file("truth_s.pgm"), grid, pass.s.values()).map_err(io_err)?;
    write_toml(
        &run.file("diagnostics.toml"),
        &SimulateDiagnostics {
            command: "simulate",
            seed,
            grid_shape: grid.shape().to_vec(),
            latent_dim: model.latent_dim(),
            data_dim: model.data_dim(),
            noise_sigma: sigma,
            zero_noise: noise.zero_noise,
        },
    )?;
    finish(run)
}

struct Inputs {
    config: Config,
    seed: u64,
    model: GenerativeModel<f64>,
    data: Dataset<f64>,
    truth: Option<(Vec<f64>, Vec<f64>)>,
}

/// Loads model and data; every failure here is a configuration error.
fn load_inputs(args: &RunArgs) -> Result<Inputs, Failure> {
    let (config, seed) = load(args)?;
    let model: GenerativeModel<f64> = config.model().map_err(config_err)?;
    let dir = config.data_dir().map_err(config_err)?.to_path_buf();
    let data = io::read_dataset(&dir, "data").map_err(io_err)?;
    if data.len() != model.data_dim() {
        return Err(Failure::Config(format!(
            "data has {} values but the response produces {}",
            data.len(),
            model.data_dim()
        )));
    }
    let truth = read_truth(&dir, &model)?;
    Ok(Inputs {
        config,
        seed,
        model,
        data,
        truth,
    })
}

/// Ground truth written by `simulate`, when present next to the data.
fn read_truth(dir: &Path, model: &GenerativeModel<f64>) -> Result<Option<(Vec<f64>, Vec<f64>)>, Failure> {
    if !dir.join("truth_s.toml").exists() || !dir.join("truth_latent.toml").exists() {
        return Ok(None);
    }
    let (grid, _, fields) = io::read_field_stack(dir, "truth_s").map_err(io_err)?;
    if &grid != model.grid() || fields.len() != 1 {
        return Err(Failure::Config("truth_s does not match the configured grid".into()));
    }
    let (_, latent) = io::read_vector(dir, "truth_latent").map_err(io_err)?;
    let z = LatentVector::from_flat(model.layout(), &latent).map_err(config_err)?;
    let psi = model.spectrum_forward(&z.eta).map_err(numeric_err)?;
    Ok(Some((fields.into_iter().next().expect("one field"), psi)))
}

#[derive(Serialize, Default)]
struct InferDiagnostics {
    command: &'static str,
    method: &'static str,
    seed: u64,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    latent_dim: usize,
    data_dim: usize,
    converged: bool,
    iterations: usize,
    samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<TruthMetrics>,
}

pub fn infer(args: &RunArgs) -> Result<(), Failure> {
    let Inputs {
        config,
        seed,
        model,
        data,
        truth,
    } = load_inputs(args)?;
    let method = args.method.unwrap_or(config.inference.method);
    let problem = ModelLikelihood::new(&model, &data).map_err(config_err)?;
    let mut run = RunDir::create(&out_dir(args, "infer")).map_err(Failure::Config)?;

    let dim = model.latent_dim();
    let mut r = rng::stream(seed, rng::stream_id(PURPOSE_RUN, 2, 0));
    let init: Vec<f64> = rng::standard_normal_vec::<f64, _>(&mut r, dim)
        .into_iter()
        .map(|x| x * config.inference.init_scale)
        .collect();
    let mut diag = InferDiagnostics {
        command: "infer",
        method: method.name(),
        seed,
        status: "ok",
        latent_dim: dim,
        data_dim: model.data_dim(),
        ..InferDiagnostics::default()
    };

    let start = Instant::now();
    let result = match method {
        Method::Map => map_estimate(&problem, &init, &config.map_options()).map(|m| PosteriorApprox {
            method: Method::Map,
            theta: m.theta,
            mfa_log_std: None,
            samples: Vec::new(),
            kl_history: m.value_history,
            inner_history: Vec::new(),
            converged: m.converged,
            iterations: m.iterations,
        }),
        Method::Advi => advi_mfa(&problem, &init, &config.advi_options(seed)),
        Method::Mgvi => mgvi(&problem, &init, &config.mgvi_options(seed, dim)),
    };
    let approx = match result {
        Ok(a) => a,
        Err(e) => {
            diag.status = "failed";
            diag.error = Some(e.to_string());
            write_toml(&run.file("diagnostics.toml"), &diag)?;
            finish(run)?;
            return Err(numeric_err(e));
        }
    };
    eprintln!(
        "{} finished in {:.1} s ({} iterations, converged: {})",
        method.name(),
        start.elapsed().as_secs_f64(),
        approx.iterations,
        approx.converged
    );

    let summary = summarize(&model, &approx).map_err(numeric_err)?;
    let bands = spectrum_bands(&model, &summary.sample_psi);
    let grid = model.grid();
    io::write_vector(run.pair("theta_latent"), "theta_latent", "latent", &approx.theta).map_err(io_err)?;
    io::write_field(run.pair("theta_s"), "theta_s", "s", grid, summary.theta_pass.s.values()).map_err(io_err)?;
    io::write_field(run.pair("theta_phi"), "theta_phi", "phi", grid, summary.theta_pass.phi.values()).map_err(io_err)?;
    io::write_field(run.pair("mean_s"), "mean_s", "s", grid, &summary.mean_s).map_err(io_err)?;
    io::write_field(run.pair("std_s"), "std_s", "s_std", grid, &summary.std_s).map_err(io_err)?;
    if !approx.samples.is_empty() {
        let n = config.inference.posterior_samples.min(summary.sample_s.len());
        io::write_field_stack(run.pair("samples_s"), "samples_s", "s", grid, &summary.sample_s[..n]).map_err(io_err)?;
    }
    let information = bin_information(&model, &summary.theta_pass, data.noise());
    io::write_csv(
        &run.file("spectrum_quantiles.csv"),
        &["kappa", "mean_psi", "q16", "q84", "information"],
        bands
            .iter()
            .zip(&information)
            .map(|(b, &i)| vec![b.kappa, b.mean, b.q16, b.q84, i]),
    )
    .map_err(io_err)?;
    io::write_csv(
        &run.file("kl_history.csv"),
        &["iteration", "kl"],
        approx.kl_history.iter().enumerate().map(|(i, &k)| vec![i as f64, k]),
    )
    .map_err(io_err)?;
    if !approx.inner_history.is_empty() {
        io::write_csv(
            &run.file("inner_history.csv"),
            &["outer", "step", "kl"],
            approx
                .inner_history
                .iter()
                .enumerate()
                .flat_map(|(o, h)| h.iter().enumerate().map(move |(s, &k)| vec![o as f64, s as f64, k])),
        )
        .map_err(io_err)?;
    }
    io::write_pgm(&run.file("mean_s.pgm"), grid, &summary.mean_s).map_err(io_err)?;
    io::write_pgm(&run.file("std_s.pgm"), grid, &summary.std_s).map_err(io_err)?;

    if let Some((truth_s, truth_psi)) = &truth {
        let m = truth_metrics(&model, data.noise(), &summary, &bands, truth_s, truth_psi, MetricOptions::default())
            .map_err(numeric_err)?;
        info!("truth metrics: {m:?}");
        diag.metrics = Some(m);
    }
    diag.converged = approx.converged;
    diag.iterations = approx.iterations;
    diag.samples = approx.samples.len();
    diag.final_objective = approx.kl_history.last().copied();
    write_toml(&run.file("diagnostics.toml"), &diag)?;
    finish(run)
}

#[derive(Serialize)]
struct WienerDiagnostics {
    command: &'static str,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    latent_dim: usize,
    data_dim: usize,
    cg_iterations: usize,
}

pub fn wiener(args: &RunArgs) -> Result<(), Failure> {
    let Inputs { config, model, data, .. } = load_inputs(args)?;
    if !model.is_linear() {
        return Err(Failure::Config(
            "the Wiener filter needs the identity nonlinearity and a fixed spectrum (kernel_amplitude = 0)".into(),
        ));
    }
    let dim = model.latent_dim();
    let op = LinearModelOperator::new(model.clone()).map_err(config_err)?;
    let cg = config.inference.cg.build::<f64>(dim, 1e-10);
    let mut run = RunDir::create(&out_dir(args, "wiener")).map_err(Failure::Config)?;
    let mut diag = WienerDiagnostics {
        command: "wiener",
        status: "ok",
        error: None,
        latent_dim: dim,
        data_dim: model.data_dim(),
        cg_iterations: 0,
    };
    let solution = match wiener_filter(Arc::new(op), data.noise(), data.d(), &cg) {
        Ok(s) => s,
        Err(e) => {
            diag.status = "failed";
            diag.error = Some(e.to_string());
            write_toml(&run.file("diagnostics.toml"), &diag)?;
            finish(run)?;
            return Err(numeric_err(e));
        }
    };
    let mean = LatentVector::from_flat(model.layout(), &solution.mean).map_err(numeric_err)?;
    let pass = model.forward(&mean).map_err(numeric_err)?;
    let grid = model.grid();
    io::write_vector(run.pair("theta_latent"), "theta_latent", "latent", &solution.mean).map_err(io_err)?;
    io::write_field(run.pair("theta_s"), "theta_s", "s", grid, pass.s.values()).map_err(io_err)?;
    io::write_csv(
        &run.file("cg_residuals.csv"),
        &["iteration", "relative_residual"],
        solution
            .cg_residual_history
            .iter()
            .enumerate()
            .map(|(i, &r)| vec![i as f64, r]),
    )
    .map_err(io_err)?;
    io::write_pgm(&run.file("theta_s.pgm"), grid, pass.s.values()).map_err(io_err)?;
    diag.cg_iterations = solution.cg_iterations;
    write_toml(&run.file("diagnostics.toml"), &diag)?;
    finish(run)
}

#[derive(Serialize)]
struct ValidationFile<'a> {
    command: &'static str,
    seed: u64,
    all_passed: bool,
    report: &'a ValidationReport,
}

pub fn validate(args: &RunArgs) -> Result<(), Failure> {
    let (config, seed) = load(args)?;
    let model: GenerativeModel<f64> = config.model().map_err(config_err)?;
    let report = validate_model(&model, &config.validation, seed).map_err(numeric_err)?;
    print!("{report}");
    if let Some(out) = &args.out {
        let mut run = RunDir::create(out).map_err(Failure::Config)?;
        write_toml(
            &run.file("validation.toml"),
            &ValidationFile {
                command: "validate",
                seed,
                all_passed: report.all_passed(),
                report: &report,
            },
        )?;
        finish(run)?;
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("failed checks: {}", failed.join(", "))))
    }
}

#[derive(Serialize)]
struct DynamicsDiagnostics {
    command: &'static str,
    seed: u64,
    realizations: u32,
    zero_mode_excluded: bool,
    judged_bins: usize,
    worst_bin_deviation: f64,
    tolerance: f64,
    within_tolerance: bool,
}

pub fn dynamics(args: &RunArgs) -> Result<(), Failure> {
    let (config, seed) = load(args)?;
    let dyn_cfg = config.dynamics().map_err(config_err)?;
    let st = dyn_cfg.space_time_grid().map_err(config_err)?;
    let kernel = dyn_cfg.kernel(&st).map_err(config_err)?;
    let response = response_spectrum::<f64>(&kernel, &st).map_err(numeric_err)?;
    let analytic: Vec<f64> = response.values.iter().map(|g| g.norm_sqr()).collect();
    let empirical = mean_periodogram::<f64>(&kernel, &st, seed, dyn_cfg.realizations).map_err(numeric_err)?;
    let bins = compare_binned(&st, &empirical, &analytic, dyn_cfg.omega_bins, dyn_cfg.k_bins).map_err(numeric_err)?;
    let field = simulate_stochastic_field::<f64>(&kernel, &st, Excitation::White { seed, realization: 0 })
        .map_err(numeric_err)?;

    let judged: Vec<_> = bins.iter().filter(|b| b.modes >= dyn_cfg.min_bin_modes).collect();
    let worst = judged.iter().map(|b| (b.mean_ratio - 1.0).abs()).fold(0.0, f64::max);
    let grid = st.grid();
    let mut run = RunDir::create(&out_dir(args, "dynamics")).map_err(Failure::Config)?;
    io::write_field(run.pair("realization"), "realization", "phi", grid, field.values()).map_err(io_err)?;
    io::write_pgm(&run.file("realization.pgm"), grid, field.values()).map_err(io_err)?;
    io::write_csv(
        &run.file("spectrum.csv"),
        &["k", "omega", "analytic", "empirical"],
        (0..grid.size()).map(|m| {
            let (w, k) = st.frequencies(m);
            vec![k, w, analytic[m], empirical[m]]
        }),
    )
    .map_err(io_err)?;
    io::write_csv(
        &run.file("binned_spectrum.csv"),
        &["omega_lo", "omega_hi", "k_lo", "k_hi", "modes", "mean_ratio"],
        bins.iter().map(|b| {
            vec![
                b.omega_range.0,
                b.omega_range.1,
                b.k_range.0,
                b.k_range.1,
                b.modes as f64,
                b.mean_ratio,
            ]
        }),
    )
    .map_err(io_err)?;
    write_toml(
        &run.file("diagnostics.toml"),
        &DynamicsDiagnostics {
            command: "dynamics",
            seed,
            realizations: dyn_cfg.realizations,
            zero_mode_excluded: response.zero_mode_excluded,
            judged_bins: judged.len(),
            worst_bin_deviation: worst,
            tolerance: dyn_cfg.tolerance,
            within_tolerance: worst <= dyn_cfg.tolerance,
        },
    )?;
    finish(run)
}
