//! The four subcommands and the files they write.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gpdyn::dataio::{generate as simulate, write_atomic, Dataset, GenerateConfig, Sampling};
use gpdyn::dynamics::{blackhole_initial_state, ensemble_predict, ParameterSource, SystemSpec};
use gpdyn::experiment::{
    blackhole_config, blackhole_fit, case_a, case_b, fd_linreg, logistic_config,
    lotka_volterra_dictionaries, network_fit, point_eps1, quadratic_dictionaries, shared_param,
    split_theta, BLACKHOLE_T_END, LOGISTIC_T_END, LOGISTIC_X0,
};
use gpdyn::gp::GpStateModel;
use gpdyn::linear::{Dictionary, GaussianPosterior, PosteriorRecord};
use gpdyn::mcmc::{ChainConfig, SampleChain};
use gpdyn::network::{posterior_f_band, NetShape, NetworkSamplerConfig};
use gpdyn::ode::{uniform_grid, Method};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Scenario, SystemKind};
use crate::manifest::{self, Seeds};
use crate::{CliError, Context};

/// Lotka–Volterra benchmark parameters `(α, β, δ, γ)`.
pub const LV_PARAMS: [f64; 4] = [1.5, 1.0, 1.0, 3.0];
/// Orbit benchmark parameters `(e, p)`.
pub const BH_PARAMS: [f64; 2] = [0.5, 100.0];

const PREDICT_METHOD: Method = Method::AdaptiveRk {
    rtol: 1e-8,
    atol: 1e-10,
};

/// The inference model of a system/scenario pair.
struct Model {
    spec: SystemSpec,
    /// Per-equation libraries of the affine scenarios.
    dictionaries: Vec<Dictionary>,
}

fn model(system: SystemKind, scenario: Scenario, hidden: usize) -> Result<Model, CliError> {
    let lv = || SystemSpec::lotka_volterra(LV_PARAMS[0], LV_PARAMS[1], LV_PARAMS[2], LV_PARAMS[3]);
    let m = match (system, scenario) {
        (SystemKind::LotkaVolterra, Scenario::CaseB) => Model {
            spec: SystemSpec::lotka_volterra_library(
                LV_PARAMS[0],
                LV_PARAMS[1],
                LV_PARAMS[2],
                LV_PARAMS[3],
            ),
            dictionaries: quadratic_dictionaries(),
        },
        (SystemKind::LotkaVolterra, _) => Model {
            spec: lv(),
            dictionaries: lotka_volterra_dictionaries(),
        },
        (SystemKind::Logistic, Scenario::CaseB) => {
            let names = ["1", "x1", "x1^2", "x1^3"];
            let dict = Dictionary::monomials(1, &names).expect("valid monomials");
            let spec = SystemSpec::affine(
                "logistic-library",
                vec![dict.clone()],
                Some(vec![0.0, 1.0, -1.0, 0.0]),
            )
            .expect("consistent shapes");
            Model {
                spec,
                dictionaries: vec![dict],
            }
        }
        (SystemKind::Logistic, Scenario::NnMcmc) => Model {
            spec: SystemSpec::network(NetShape::new(1, hidden))
                .context(|| "network model".into())?,
            dictionaries: Vec::new(),
        },
        (SystemKind::Logistic, _) => Model {
            spec: SystemSpec::logistic(),
            dictionaries: vec![Dictionary::monomials(1, &["x1", "x1^2"]).expect("valid monomials")],
        },
        (SystemKind::BlackHole, _) => Model {
            spec: SystemSpec::black_hole(BH_PARAMS[0], BH_PARAMS[1]),
            dictionaries: Vec::new(),
        },
    };
    Ok(m)
}

/// The simulated ground truth of a system.
fn truth_system(system: SystemKind) -> (SystemSpec, Vec<f64>) {
    match system {
        SystemKind::LotkaVolterra => {
            let s =
                SystemSpec::lotka_volterra(LV_PARAMS[0], LV_PARAMS[1], LV_PARAMS[2], LV_PARAMS[3]);
            let t = s.truth.clone().expect("truth");
            (s, t)
        }
        SystemKind::Logistic => {
            let s = SystemSpec::logistic();
            let t = s.truth.clone().expect("truth");
            (s, t)
        }
        SystemKind::BlackHole => (
            SystemSpec::black_hole(BH_PARAMS[0], BH_PARAMS[1]),
            BH_PARAMS.to_vec(),
        ),
    }
}

fn default_ic(system: SystemKind) -> Vec<f64> {
    match system {
        SystemKind::LotkaVolterra => vec![1.0, 1.0],
        SystemKind::Logistic => vec![LOGISTIC_X0],
        SystemKind::BlackHole => blackhole_initial_state().to_vec(),
    }
}

fn default_horizon(system: SystemKind) -> (f64, f64) {
    match system {
        SystemKind::LotkaVolterra => (20.0, 0.01),
        SystemKind::Logistic => (LOGISTIC_T_END, 0.01),
        SystemKind::BlackHole => (BLACKHOLE_T_END, 10.0),
    }
}

fn generate_config(cfg: &ExperimentConfig, system: SystemKind, seed: u64) -> GenerateConfig {
    let noise = cfg.data.noise_level;
    let mut g = match system {
        SystemKind::LotkaVolterra => {
            GenerateConfig::lotka_volterra(cfg.data.density.unwrap_or(0.1), noise, seed)
        }
        SystemKind::Logistic => logistic_config(
            cfg.data.points.unwrap_or(10),
            cfg.data.train_fraction.unwrap_or(0.5),
            noise,
            seed,
        ),
        SystemKind::BlackHole => blackhole_config(cfg.data.points.unwrap_or(500), noise, seed),
    };
    if let Some(n) = cfg.data.points {
        g.sampling = Sampling::Count(n);
    } else if let Some(d) = cfg.data.density {
        g.sampling = Sampling::Density(d);
    }
    if let Some(f) = cfg.data.train_fraction {
        g.train_fraction = f;
    }
    g
}

fn cell_label(cfg: &ExperimentConfig) -> String {
    let system = cfg.system.map_or_else(|| "?".into(), |s| s.to_string());
    let mut s = format!("{system}/{}", cfg.scenario);
    if let Some(d) = cfg.data.density {
        let _ = write!(s, " density={d}");
    }
    if let Some(p) = cfg.data.points {
        let _ = write!(s, " points={p}");
    }
    let _ = write!(s, " noise={} seed={}", cfg.data.noise_level, cfg.seed);
    s
}

/// Training and test sets, one pair per initial condition. Trajectory `j`
/// draws its samples and noise from `seed + j`.
fn simulate_all(cfg: &ExperimentConfig) -> Result<Vec<(Dataset, Dataset)>, CliError> {
    let system = cfg.system()?;
    let (spec, truth) = truth_system(system);
    let seeds = Seeds::from_root(cfg.seed);
    let ics = cfg
        .data
        .initial_conditions
        .clone()
        .unwrap_or_else(|| vec![default_ic(system)]);
    ics.iter()
        .enumerate()
        .map(|(j, ic)| {
            let g = generate_config(cfg, system, seeds.data.wrapping_add(j as u64));
            simulate(&spec, &truth, ic, &g).context(|| format!("generating {}", cell_label(cfg)))
        })
        .collect()
}

fn suffix(j: usize, n: usize) -> String {
    if n == 1 {
        String::new()
    } else {
        format!("_{}", j + 1)
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(gpdyn::Error::from)
        .context(|| format!("creating {}", dir.display()))
}

fn put(dir: &Path, name: &str, text: &str, written: &mut Vec<String>) -> Result<(), CliError> {
    write_atomic(&dir.join(name), text.as_bytes()).context(|| format!("writing {name}"))?;
    written.push(name.to_string());
    Ok(())
}

fn put_dataset(
    dir: &Path,
    name: &str,
    data: &Dataset,
    written: &mut Vec<String>,
) -> Result<(), CliError> {
    let path = dir.join(name);
    data.write(&path).context(|| format!("writing {name}"))?;
    written.push(name.to_string());
    let side = Dataset::sidecar_path(&path);
    written.push(
        side.file_name()
            .expect("file name")
            .to_string_lossy()
            .into_owned(),
    );
    Ok(())
}

pub fn generate(cfg: &ExperimentConfig, out: &Path, argv: &[String]) -> Result<(), CliError> {
    let sets = simulate_all(cfg)?;
    create_dir(out)?;
    let mut written = Vec::new();
    for (j, (train, test)) in sets.iter().enumerate() {
        let sfx = suffix(j, sets.len());
        put_dataset(out, &format!("train{sfx}.csv"), train, &mut written)?;
        put_dataset(out, &format!("test{sfx}.csv"), test, &mut written)?;
        eprintln!(
            "trajectory {}: {} training points, {} test points",
            j + 1,
            train.len(),
            test.len()
        );
    }
    manifest::write(out, "generate", argv, cfg, &[], &written)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Where the fitted parameters live.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Parameters {
    /// Exact Gaussian posteriors, one per block of the flat parameter vector.
    Gaussian { posteriors: Vec<PosteriorRecord> },
    /// Chain files next to the artifact.
    Chain { csv: String, json: String },
}

/// `posterior.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub system: SystemKind,
    pub scenario: Scenario,
    pub seed: u64,
    /// Hidden width for network right-hand sides.
    pub hidden: Option<usize>,
    pub theta_names: Vec<String>,
    pub truth: Option<Vec<f64>>,
    pub parameters: Parameters,
}

/// `metrics.json`: what a single fit or a benchmark cell reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub system: SystemKind,
    pub scenario: Scenario,
    pub seed: u64,
    pub density: Vec<f64>,
    pub noise_level: f64,
    pub points: Vec<usize>,
    pub theta_names: Vec<String>,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    /// `ε₁` of finite differences plus least squares on the same data.
    pub fd_linreg_eps1: Option<f64>,
    pub active_sets: Option<Vec<Vec<usize>>>,
    pub acceptance_rate: Option<f64>,
}

/// Directory of a posterior artifact given its path or its run directory.
pub fn artifact_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }
}

fn artifact_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("posterior.json")
    } else {
        path.to_path_buf()
    }
}

fn gp_log(models: &[Vec<GpStateModel>], chi_d_init: Option<f64>) -> String {
    let mut log = String::new();
    for (j, traj) in models.iter().enumerate() {
        for (i, m) in traj.iter().enumerate() {
            let base = chi_d_init.unwrap_or(m.chi_u());
            let steps = (m.chi_d() / base).log10().round() as i64;
            let _ = writeln!(
                log,
                "trajectory {} state {}: variance {:.6e} lengthscale {:.6e} chi_u {:.6e} chi_d {:.6e} \
                 ({} escalation step(s) from {:.3e}) condition {:.3e}",
                j + 1,
                i + 1,
                m.kernel().variance(),
                m.kernel().lengthscale(),
                m.chi_u(),
                m.chi_d(),
                steps,
                base,
                m.precision().condition,
            );
        }
    }
    log
}

fn gp_states_csv(models: &[GpStateModel]) -> String {
    let mut s = String::from("t");
    for i in 1..=models.len() {
        let _ = write!(s, ",x{i}_hat,x{i}_dot_hat");
    }
    s.push('\n');
    let times = models[0].derivative_times();
    for (k, t) in times.iter().enumerate() {
        let _ = write!(s, "{t}");
        for m in models {
            let _ = write!(
                s,
                ",{},{}",
                m.smooth_states()[k],
                m.estimate_derivatives()[k]
            );
        }
        s.push('\n');
    }
    s
}

fn summary_csv(m: &Metrics) -> String {
    let mut head = String::from("system,scenario,seed,density,noise_level,points");
    for n in &m.theta_names {
        let _ = write!(head, ",mean[{n}]");
    }
    for n in &m.theta_names {
        let _ = write!(head, ",sd[{n}]");
    }
    head.push_str(",eps1,eps2,fd_linreg_eps1\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let density: Vec<String> = m.density.iter().map(|d| d.to_string()).collect();
    let points: Vec<String> = m.points.iter().map(|d| d.to_string()).collect();
    let mut row = format!(
        "{},{},{},{},{},{}",
        m.system,
        m.scenario,
        m.seed,
        density.join(";"),
        m.noise_level,
        points.join(";")
    );
    for v in m.posterior_mean.iter().chain(&m.posterior_sd) {
        let _ = write!(row, ",{v}");
    }
    let _ = writeln!(
        row,
        ",{},{},{}",
        opt(m.eps1),
        opt(m.eps2),
        opt(m.fd_linreg_eps1)
    );
    head + &row
}

/// Gaussian density curves per term over `μ ± 5σ`, for histogram-style plots.
fn density_csv(posteriors: &[GaussianPosterior]) -> String {
    let mut s = String::from("equation,term,theta,density\n");
    for (e, p) in posteriors.iter().enumerate() {
        for (j, (name, sd)) in p.term_names.iter().zip(p.std_devs()).enumerate() {
            let mu = p.mean[j];
            for k in 0..=200 {
                let x = mu + sd * (-5.0 + 10.0 * k as f64 / 200.0);
                let dens = if sd > 0.0 {
                    let z = (x - mu) / sd;
                    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
                } else {
                    f64::INFINITY
                };
                let _ = writeln!(s, "{},{name},{x},{dens}", e + 1);
                if sd <= 0.0 {
                    break;
                }
            }
        }
    }
    s
}

fn chain_eps(chain: &SampleChain, truth: &[f64]) -> (Option<f64>, Option<f64>) {
    let norm: f64 = truth.iter().map(|x| x * x).sum::<f64>();
    if norm == 0.0 {
        return (None, None);
    }
    let mean = chain.mean();
    let sd = chain.std_devs();
    let err: f64 = mean.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    let var: f64 = sd.iter().map(|s| s * s).sum();
    (
        Some(100.0 * (err / norm).sqrt()),
        Some(100.0 * (var / norm).sqrt()),
    )
}

fn lambda_for(cfg: &ExperimentConfig) -> f64 {
    cfg.inference.lambda.unwrap_or(match cfg.scenario {
        Scenario::NnMcmc => 0.01,
        _ => 0.0,
    })
}

/// Fit one experiment cell and write its artifacts into `out`.
pub fn fit(
    cfg: &ExperimentConfig,
    data: &[PathBuf],
    out: &Path,
    argv: &[String],
) -> Result<Metrics, CliError> {
    let system = cfg.system()?;
    let label = cell_label(cfg);
    let seeds = Seeds::from_root(cfg.seed);
    create_dir(out)?;
    let mut written = Vec::new();

    let trains: Vec<Dataset> = if data.is_empty() {
        let sets = simulate_all(cfg)?;
        let n = sets.len();
        let mut trains = Vec::with_capacity(n);
        for (j, (train, _)) in sets.into_iter().enumerate() {
            put_dataset(
                out,
                &format!("train{}.csv", suffix(j, n)),
                &train,
                &mut written,
            )?;
            trains.push(train);
        }
        trains
    } else {
        if data.len() > 1 && cfg.scenario != Scenario::SharedParam {
            return Err(CliError::Usage(
                "several datasets need the shared-param scenario".into(),
            ));
        }
        data.iter()
            .map(|p| Dataset::read(p).context(|| format!("reading {}", p.display())))
            .collect::<Result<_, _>>()?
    };
    if trains.iter().any(|d| d.state_dim() != cfg.state_dim()) {
        return Err(CliError::Core {
            context: label,
            source: gpdyn::Error::ShapeMismatch {
                expected: cfg.state_dim(),
                got: trains[0].state_dim(),
            },
        });
    }

    let hidden = cfg.inference.hidden;
    let Model { spec, dictionaries } = model(system, cfg.scenario, hidden)?;
    let gp = cfg.gp.to_gp(seeds.gp);
    let lambda = lambda_for(cfg);
    let chain_cfg = ChainConfig {
        seed: seeds.inference,
        ..cfg.inference.chain.clone()
    };
    let start = Instant::now();

    let mut metrics = Metrics {
        system,
        scenario: cfg.scenario,
        seed: cfg.seed,
        density: trains.iter().map(|d| d.density).collect(),
        noise_level: trains[0].noise_level,
        points: trains.iter().map(Dataset::len).collect(),
        theta_names: Vec::new(),
        posterior_mean: Vec::new(),
        posterior_sd: Vec::new(),
        eps1: None,
        eps2: None,
        fd_linreg_eps1: None,
        active_sets: None,
        acceptance_rate: None,
    };
    let truth = spec.truth.clone();
    let models: Vec<Vec<GpStateModel>>;
    let parameters;
    let mut extra: Vec<(String, String)> = Vec::new();

    match (system, cfg.scenario) {
        (_, Scenario::CaseA | Scenario::CaseB) => {
            let fit = if cfg.scenario == Scenario::CaseA {
                case_a(&trains[0], &dictionaries, lambda, &gp)
            } else {
                case_b(&trains[0], &dictionaries, &cfg.inference.sparse, &gp)
            }
            .context(|| label.clone())?;
            if let Some(t) = &truth {
                let (e1, e2) = fit.eps(&spec, t).context(|| label.clone())?;
                metrics.eps1 = Some(e1);
                metrics.eps2 = Some(e2);
                let smooth = trains[0].noise_level > 0.0;
                match fd_linreg(&trains[0], &dictionaries, smooth)
                    .and_then(|est| point_eps1(&est, &split_theta(&spec, t)))
                {
                    Ok(e) => metrics.fd_linreg_eps1 = Some(e),
                    Err(e) => eprintln!("{label}: FD+LinReg baseline failed: {e}"),
                }
            }
            for p in &fit.posteriors {
                metrics.posterior_mean.extend(&p.mean);
                metrics.posterior_sd.extend(p.std_devs());
            }
            metrics.theta_names = equation_names(&fit.posteriors);
            metrics.active_sets = fit.active_sets.clone();
            if cfg.scenario == Scenario::CaseB {
                extra.push(("posterior_density.csv".into(), density_csv(&fit.posteriors)));
            }
            parameters = Parameters::Gaussian {
                posteriors: fit.posteriors.iter().map(|p| p.to_record(None)).collect(),
            };
            models = vec![fit.models];
        }
        (SystemKind::BlackHole, Scenario::SharedParam) => {
            let fit = blackhole_fit(&trains[0], &gp, &chain_cfg).context(|| label.clone())?;
            fill_chain_metrics(
                &mut metrics,
                &fit.chain,
                &["e".into(), "p".into()],
                truth.as_deref(),
            );
            write_chain(out, &fit.chain, &mut written, &label)?;
            parameters = chain_parameters();
            models = vec![fit.models];
        }
        (_, Scenario::SharedParam) => {
            let fit = shared_param(&trains, &spec, &dictionaries, lambda, &gp)
                .context(|| label.clone())?;
            if let Some(t) = &truth {
                let (e1, e2) = fit.eps(t).context(|| label.clone())?;
                metrics.eps1 = Some(e1);
                metrics.eps2 = Some(e2);
            }
            metrics.theta_names = fit.posterior.term_names.clone();
            metrics.posterior_mean = fit.posterior.mean.clone();
            metrics.posterior_sd = fit.posterior.std_devs();
            parameters = Parameters::Gaussian {
                posteriors: vec![fit.posterior.to_record(None)],
            };
            models = fit.models;
        }
        (_, Scenario::NnMcmc) => {
            let shape = NetShape::new(1, hidden);
            let sampler = NetworkSamplerConfig {
                prior_draws: cfg.inference.prior_draws,
                map_iterations: cfg.inference.map_iterations,
                chain: chain_cfg.clone(),
            };
            let fit =
                network_fit(&trains[0], shape, lambda, &gp, &sampler).context(|| label.clone())?;
            let names: Vec<String> = (1..=shape.param_len()).map(|i| format!("w{i}")).collect();
            fill_chain_metrics(&mut metrics, &fit.chain, &names, None);
            write_chain(out, &fit.chain, &mut written, &label)?;
            extra.push(("f_band.csv".into(), f_band_csv(&fit.chain, shape)));
            parameters = chain_parameters();
            models = vec![vec![fit.model]];
        }
    }
    let elapsed = start.elapsed().as_secs_f64();

    let artifact = Artifact {
        system,
        scenario: cfg.scenario,
        seed: cfg.seed,
        hidden: (cfg.scenario == Scenario::NnMcmc).then_some(hidden),
        theta_names: metrics.theta_names.clone(),
        truth,
        parameters,
    };
    put(out, "posterior.json", &to_json(&artifact), &mut written)?;
    put(out, "metrics.json", &to_json(&metrics), &mut written)?;
    put(out, "summary.csv", &summary_csv(&metrics), &mut written)?;
    put(
        out,
        "run.log",
        &gp_log(&models, cfg.gp.chi_d_init),
        &mut written,
    )?;
    for (j, m) in models.iter().enumerate() {
        put(
            out,
            &format!("gp_states{}.csv", suffix(j, models.len())),
            &gp_states_csv(m),
            &mut written,
        )?;
    }
    for (name, text) in &extra {
        put(out, name, text, &mut written)?;
    }
    let timing = serde_json::json!({ "fit_seconds": elapsed });
    write_atomic(&out.join("timing.json"), to_json(&timing).as_bytes())
        .context(|| "writing timing.json".into())?;
    let inputs: Vec<&Path> = data.iter().map(PathBuf::as_path).collect();
    manifest::write(out, "fit", argv, cfg, &inputs, &written)?;
    eprintln!(
        "{label}: eps1 {} eps2 {} in {elapsed:.1}s -> {}",
        fmt_opt(metrics.eps1),
        fmt_opt(metrics.eps2),
        out.display()
    );
    Ok(metrics)
}

fn equation_names(posteriors: &[GaussianPosterior]) -> Vec<String> {
    posteriors
        .iter()
        .enumerate()
        .flat_map(|(e, p)| p.term_names.iter().map(move |n| format!("eq{}:{n}", e + 1)))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}%"))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn chain_parameters() -> Parameters {
    Parameters::Chain {
        csv: "chain.csv".into(),
        json: "chain.json".into(),
    }
}

fn write_chain(
    out: &Path,
    chain: &SampleChain,
    written: &mut Vec<String>,
    label: &str,
) -> Result<(), CliError> {
    chain
        .write(&out.join("chain.csv"), &out.join("chain.json"))
        .context(|| format!("{label}: writing chain"))?;
    written.push("chain.csv".into());
    written.push("chain.json".into());
    Ok(())
}

fn fill_chain_metrics(
    m: &mut Metrics,
    chain: &SampleChain,
    names: &[String],
    truth: Option<&[f64]>,
) {
    m.theta_names = names.to_vec();
    m.posterior_mean = chain.mean();
    m.posterior_sd = chain.std_devs();
    m.acceptance_rate = Some(chain.acceptance_rate);
    if let Some(t) = truth {
        let (e1, e2) = chain_eps(chain, t);
        m.eps1 = e1;
        m.eps2 = e2;
    }
}

/// Posterior band of the learned right-hand side against the logistic
/// truth `x − x²`.
fn f_band_csv(chain: &SampleChain, shape: NetShape) -> String {
    let xs: Vec<f64> = (0..=110).map(|k| k as f64 * 0.01).collect();
    let query: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let (mean, sd) = posterior_f_band(chain, shape, &query);
    let mut s = String::from("x,f_mean,f_sd,f_true\n");
    for (k, x) in xs.iter().enumerate() {
        let _ = writeln!(s, "{x},{},{},{}", mean[k], sd[k], x - x * x);
    }
    s
}

/// Band summary written next to `band.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandInfo {
    pub system: SystemKind,
    pub scenario: Scenario,
    pub initial_condition: Vec<f64>,
    pub t_end: f64,
    pub dt: f64,
    pub draws: usize,
    pub draws_used: usize,
    pub divergent_draws: usize,
    pub seed: u64,
}

/// Without an explicit seed the prediction stage derives from the fit's root seed.
pub fn predict(
    cfg: &ExperimentConfig,
    explicit_seed: bool,
    posterior: &Path,
    out: &Path,
    argv: &[String],
) -> Result<(), CliError> {
    let path = artifact_path(posterior);
    let dir = artifact_dir(posterior);
    let text = std::fs::read_to_string(&path)
        .map_err(gpdyn::Error::from)
        .context(|| format!("reading {}", path.display()))?;
    let artifact: Artifact = serde_json::from_str(&text)
        .map_err(gpdyn::Error::from)
        .context(|| format!("parsing {}", path.display()))?;
    if cfg.system.is_some_and(|s| s != artifact.system) {
        return Err(CliError::Usage(format!(
            "--system disagrees with the artifact ({})",
            artifact.system
        )));
    }
    let mut cfg = cfg.clone();
    cfg.system = Some(artifact.system);
    cfg.scenario = artifact.scenario;
    if !explicit_seed {
        cfg.seed = artifact.seed;
    }
    let Model { spec, .. } = model(
        artifact.system,
        artifact.scenario,
        artifact.hidden.unwrap_or(cfg.inference.hidden),
    )?;
    let source = match &artifact.parameters {
        Parameters::Gaussian { posteriors } => {
            let posts = posteriors
                .iter()
                .map(GaussianPosterior::from_record)
                .collect::<gpdyn::Result<Vec<_>>>()
                .context(|| format!("decoding {}", path.display()))?;
            ParameterSource::from_posteriors(&posts)
        }
        Parameters::Chain { csv, json } => ParameterSource::Chain(
            SampleChain::read(&dir.join(csv), &dir.join(json))
                .context(|| "reading chain".into())?,
        ),
    };
    let (t_default, dt_default) = default_horizon(artifact.system);
    let t_end = cfg.prediction.t_end.unwrap_or(t_default);
    let dt = cfg.prediction.dt.unwrap_or(dt_default);
    if !(t_end > 0.0 && dt > 0.0 && dt.is_finite() && t_end.is_finite()) {
        return Err(CliError::Usage("t_end and dt must be positive".into()));
    }
    let ic = cfg
        .prediction
        .initial_condition
        .clone()
        .unwrap_or_else(|| default_ic(artifact.system));
    if ic.len() != spec.state_dim {
        return Err(CliError::Usage(format!(
            "initial condition needs {} values, got {}",
            spec.state_dim,
            ic.len()
        )));
    }
    let seed = Seeds::from_root(cfg.seed).prediction;
    let outputs = uniform_grid(0.0, t_end, dt);
    let label = format!("predicting {}/{}", artifact.system, artifact.scenario);
    let band = ensemble_predict(
        &spec,
        &source,
        &ic,
        0.0,
        &outputs,
        PREDICT_METHOD,
        cfg.prediction.draws,
        seed,
    )
    .context(|| label.clone())?;
    create_dir(out)?;
    let mut written = Vec::new();
    put(out, "band.csv", &band.to_csv(), &mut written)?;
    let info = BandInfo {
        system: artifact.system,
        scenario: artifact.scenario,
        initial_condition: ic,
        t_end,
        dt,
        draws: cfg.prediction.draws,
        draws_used: band.draws_used,
        divergent_draws: band.divergent_draws,
        seed,
    };
    put(out, "band.json", &to_json(&info), &mut written)?;
    manifest::write(out, "predict", argv, &cfg, &[path.as_path()], &written)?;
    eprintln!(
        "{label}: {} of {} draws used -> {}",
        band.draws_used,
        cfg.prediction.draws,
        out.display()
    );
    Ok(())
}

/// One `(density, noise, seed)` run of a sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRun {
    pub density: f64,
    pub noise_level: f64,
    pub seed: u64,
    pub dir: String,
    pub status: String,
    pub metrics: Option<Metrics>,
}

/// Seed-aggregated statistics of one grid cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellSummary {
    pub density: f64,
    pub noise_level: f64,
    pub completed: usize,
    pub failed: usize,
    pub eps1: (f64, f64),
    pub eps2: (f64, f64),
    pub fd_linreg_eps1: (f64, f64),
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

pub fn benchmark(cfg: &ExperimentConfig, out: &Path, argv: &[String]) -> Result<(), CliError> {
    let b = &cfg.benchmark;
    if b.densities.is_empty() || b.noise_levels.is_empty() || b.seeds.is_empty() {
        return Err(CliError::Usage("benchmark grid is empty".into()));
    }
    if cfg.scenario == Scenario::NnMcmc || cfg.system == Some(SystemKind::BlackHole) {
        return Err(CliError::Usage(
            "benchmark compares affine scenarios against FD+LinReg".into(),
        ));
    }
    for &d in &b.densities {
        if !(d > 0.0 && d <= 1.0) {
            return Err(CliError::Usage(format!(
                "density must be in (0, 1], got {d}"
            )));
        }
    }
    create_dir(out)?;
    let mut jobs = Vec::new();
    for &d in &b.densities {
        for &n in &b.noise_levels {
            for &s in &b.seeds {
                jobs.push((d, n, s));
            }
        }
    }
    let runs: Vec<CellRun> = jobs
        .par_iter()
        .map(|&(d, n, s)| {
            let dir = format!("cell_d{d}_n{n}/seed{s}");
            let mut c = cfg.clone();
            c.data.density = Some(d);
            c.data.points = None;
            c.data.noise_level = n;
            c.seed = s;
            c.out = Some(out.join(&dir));
            let result = fit(&c, &[], &out.join(&dir), argv);
            let (status, metrics) = match result {
                Ok(m) => ("ok".to_string(), Some(m)),
                Err(e) => (format!("failed: {e}"), None),
            };
            CellRun {
                density: d,
                noise_level: n,
                seed: s,
                dir,
                status,
                metrics,
            }
        })
        .collect();

    let mut report = String::from("density,noise_level,seed,status,eps1,eps2,fd_linreg_eps1\n");
    for r in &runs {
        let m = r.metrics.as_ref();
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let _ = writeln!(
            report,
            "{},{},{},{},{},{},{}",
            r.density,
            r.noise_level,
            r.seed,
            r.status.replace(',', ";"),
            f(m.and_then(|m| m.eps1)),
            f(m.and_then(|m| m.eps2)),
            f(m.and_then(|m| m.fd_linreg_eps1)),
        );
    }
    let mut summaries = Vec::new();
    for &d in &b.densities {
        for &n in &b.noise_levels {
            let cell: Vec<&CellRun> = runs
                .iter()
                .filter(|r| r.density == d && r.noise_level == n)
                .collect();
            let ok: Vec<&Metrics> = cell.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let pick = |f: fn(&Metrics) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|m| f(m)).collect()
            };
            summaries.push(CellSummary {
                density: d,
                noise_level: n,
                completed: ok.len(),
                failed: cell.len() - ok.len(),
                eps1: mean_sd(&pick(|m| m.eps1)),
                eps2: mean_sd(&pick(|m| m.eps2)),
                fd_linreg_eps1: mean_sd(&pick(|m| m.fd_linreg_eps1)),
            });
        }
    }
    let mut table = String::from(
        "density,noise_level,completed,failed,eps1_mean,eps1_sd,eps2_mean,eps2_sd,fd_linreg_eps1_mean,fd_linreg_eps1_sd\n",
    );
    for s in &summaries {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{},{},{}",
            s.density,
            s.noise_level,
            s.completed,
            s.failed,
            s.eps1.0,
            s.eps1.1,
            s.eps2.0,
            s.eps2.1,
            s.fd_linreg_eps1.0,
            s.fd_linreg_eps1.1
        );
    }
    let mut written = Vec::new();
    put(out, "report.csv", &report, &mut written)?;
    put(out, "table.csv", &table, &mut written)?;
    let json = serde_json::json!({ "runs": runs, "cells": summaries });
    put(out, "report.json", &to_json(&json), &mut written)?;
    manifest::write(out, "benchmark", argv, cfg, &[], &written)?;
    let failed = runs.iter().filter(|r| r.metrics.is_none()).count();
    eprintln!(
        "benchmark: {} runs, {failed} failed -> {}",
        runs.len(),
        out.display()
    );
    Ok(())
}
