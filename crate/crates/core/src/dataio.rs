//! Benchmark data generation, baseline derivative estimates and dataset files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use faer::Mat;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemSpec;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize, Factor};
use crate::ode::{uniform_grid, Method};

/// Default Savitzky–Golay frame length.
pub const SG_WINDOW: usize = 11;
/// Default Savitzky–Golay polynomial order.
pub const SG_ORDER: usize = 3;

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// How many training points to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// A fraction of the pool.
    Density(f64),
    /// An exact count drawn from the pool.
    Count(usize),
}

/// Settings for [`generate`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub t_end: f64,
    /// Spacing of the dense solution grid.
    pub dt: f64,
    pub method: Method,
    /// Training window is `[0, train_fraction · t_end]`.
    pub train_fraction: f64,
    /// Fraction of the window's grid points forming the base pool.
    pub pool_fraction: f64,
    pub pool_seed: u64,
    pub sampling: Sampling,
    pub noise_level: f64,
    /// Seeds the draw from the pool and the noise.
    pub seed: u64,
}

impl GenerateConfig {
    /// Lotka–Volterra defaults: implicit Euler at `dt = 0.001` on `[0, 20]`,
    /// training on `[0, 8]`, a 25 % pool.
    pub fn lotka_volterra(density: f64, noise_level: f64, seed: u64) -> Self {
        Self {
            t_end: 20.0,
            dt: 0.001,
            method: Method::ImplicitEuler { dt: 0.001 },
            train_fraction: 0.4,
            pool_fraction: 0.25,
            pool_seed: 0,
            sampling: Sampling::Density(density),
            noise_level,
            seed,
        }
    }
}

/// Observed samples of one trajectory.
///
/// The clean values travel with the noisy ones for error reporting; the
/// inference pipelines only read [`times`](Self::times) and
/// [`values`](Self::values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub system: String,
    pub ic: Vec<f64>,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    clean_values: Vec<Vec<f64>>,
    pub noise_level: f64,
    /// Retained fraction of the pool.
    pub density: f64,
    pub seed: u64,
    pub window: (f64, f64),
    /// Per-component noise standard deviation actually applied.
    pub noise_sd: Vec<f64>,
}

/// Sidecar metadata written next to a dataset CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMetadata {
    pub system: String,
    pub ic: Vec<f64>,
    pub seed: u64,
    pub noise_level: f64,
    pub density: f64,
    pub window: (f64, f64),
    pub noise_sd: Vec<f64>,
    pub points: usize,
}

impl Dataset {
    pub fn new(
        system: &str,
        ic: Vec<f64>,
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
        clean_values: Vec<Vec<f64>>,
        window: (f64, f64),
    ) -> Result<Self> {
        crate::kernels::check_increasing(&times)?;
        for rows in [&values, &clean_values] {
            if rows.len() != times.len() {
                return Err(Error::ShapeMismatch {
                    expected: times.len(),
                    got: rows.len(),
                });
            }
            if let Some(r) = rows.iter().find(|r| r.len() != ic.len()) {
                return Err(Error::ShapeMismatch {
                    expected: ic.len(),
                    got: r.len(),
                });
            }
        }
        Ok(Self {
            system: system.to_string(),
            noise_sd: vec![0.0; ic.len()],
            ic,
            times,
            values,
            clean_values,
            noise_level: 0.0,
            density: 1.0,
            seed: 0,
            window,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.ic.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Observed (possibly noisy) states, one row per time.
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    /// Observed series of component `i`.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[i]).collect()
    }

    /// Noise-free states, for error reporting only.
    pub fn clean_values(&self) -> &[Vec<f64>] {
        &self.clean_values
    }

    pub fn metadata(&self) -> DatasetMetadata {
        DatasetMetadata {
            system: self.system.clone(),
            ic: self.ic.clone(),
            seed: self.seed,
            noise_level: self.noise_level,
            density: self.density,
            window: self.window,
            noise_sd: self.noise_sd.clone(),
            points: self.len(),
        }
    }

    /// CSV columns `t, x1, …, xN, x1_clean, …, xN_clean`.
    pub fn to_csv(&self) -> String {
        let n = self.state_dim();
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",x{i}_clean"));
        }
        out.push('\n');
        for k in 0..self.len() {
            out.push_str(&format!("{:e}", self.times[k]));
            for v in self.values[k].iter().chain(&self.clean_values[k]) {
                out.push_str(&format!(",{v:e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Path of the JSON sidecar for a dataset CSV.
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        write_atomic(
            &Self::sidecar_path(csv_path),
            serde_json::to_string_pretty(&self.metadata())?.as_bytes(),
        )
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta: DatasetMetadata =
            serde_json::from_str(&fs::read_to_string(Self::sidecar_path(csv_path))?)?;
        let text = fs::read_to_string(csv_path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = meta.ic.len();
        let with_clean = match cols.len() {
            c if c == 1 + 2 * n => true,
            c if c == 1 + n => false,
            c => {
                return Err(Error::Format(format!(
                    "expected {} or {} columns, found {c}",
                    1 + n,
                    1 + 2 * n
                )))
            }
        };
        if cols[0] != "t" {
            return Err(Error::Format("first column must be `t`".into()));
        }
        let (mut times, mut values, mut clean) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("row {}: {e}", i + 2)))?;
            if row.len() != cols.len() {
                return Err(Error::Format(format!(
                    "row {} has {} columns",
                    i + 2,
                    row.len()
                )));
            }
            times.push(row[0]);
            values.push(row[1..=n].to_vec());
            clean.push(if with_clean {
                row[n + 1..].to_vec()
            } else {
                row[1..=n].to_vec()
            });
        }
        let mut ds = Dataset::new(
            &meta.system,
            meta.ic.clone(),
            times,
            values,
            clean,
            meta.window,
        )?;
        ds.noise_level = meta.noise_level;
        ds.density = meta.density;
        ds.seed = meta.seed;
        ds.noise_sd = meta.noise_sd;
        Ok(ds)
    }
}

/// Solve densely, draw training points from the window and add noise.
///
/// The pool is a fixed subset of the window's grid drawn with `pool_seed`;
/// training points are a fresh draw from the pool with `seed`, so datasets at
/// different densities are not nested. The noise standard deviation of
/// component `i` is `noise_level · mean(clean training values of i)`. The
/// test set holds every clean grid point after the window.
pub fn generate(
    spec: &SystemSpec,
    theta: &[f64],
    ic: &[f64],
    config: &GenerateConfig,
) -> Result<(Dataset, Dataset)> {
    if !(config.noise_level >= 0.0 && config.noise_level.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise level must be ≥ 0, got {}",
            config.noise_level
        )));
    }
    if !(config.pool_fraction > 0.0 && config.pool_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pool fraction must lie in (0, 1], got {}",
            config.pool_fraction
        )));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1], got {}",
            config.train_fraction
        )));
    }
    let grid = uniform_grid(0.0, config.t_end, config.dt);
    let dense = spec.integrate(theta, ic, 0.0, &grid, config.method)?;
    let t_train = config.train_fraction * config.t_end;
    let n_window = grid
        .iter()
        .take_while(|&&t| t <= t_train + 1e-9 * config.dt)
        .count();

    let pool_size = ((config.pool_fraction * n_window as f64) + 1e-9).floor() as usize;
    let mut pool: Vec<usize> = if pool_size >= n_window {
        (0..n_window).collect()
    } else {
        sample(
            &mut ChaCha8Rng::seed_from_u64(config.pool_seed),
            n_window,
            pool_size,
        )
        .into_vec()
    };
    pool.sort_unstable();

    let (count, density) = match config.sampling {
        Sampling::Density(d) => {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "density must lie in (0, 1], got {d}"
                )));
            }
            (((d * pool.len() as f64) + 1e-9).round() as usize, d)
        }
        Sampling::Count(c) => (c, c as f64 / pool.len().max(1) as f64),
    };
    if count == 0 || count > pool.len() {
        return Err(Error::EmptyTrainingSet {
            available: pool.len(),
            fraction: density,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut picked: Vec<usize> = if count == pool.len() {
        pool.clone()
    } else {
        sample(&mut rng, pool.len(), count)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    };
    picked.sort_unstable();

    let n = ic.len();
    let times: Vec<f64> = picked.iter().map(|&k| grid[k]).collect();
    let clean: Vec<Vec<f64>> = picked.iter().map(|&k| dense.states[k].clone()).collect();
    let noise_sd: Vec<f64> = (0..n)
        .map(|i| config.noise_level * clean.iter().map(|r| r[i]).sum::<f64>() / clean.len() as f64)
        .collect();
    let values: Vec<Vec<f64>> = if config.noise_level == 0.0 {
        clean.clone()
    } else {
        clean
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&noise_sd)
                    .map(|(v, sd)| v + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };

    let mut train = Dataset::new(
        &spec.name,
        ic.to_vec(),
        times,
        values,
        clean,
        (0.0, t_train),
    )?;
    train.noise_level = config.noise_level;
    train.density = density;
    train.seed = config.seed;
    train.noise_sd = noise_sd;

    let test_times: Vec<f64> = grid[n_window..].to_vec();
    let test_states: Vec<Vec<f64>> = dense.states[n_window..].to_vec();
    let mut test = Dataset::new(
        &spec.name,
        ic.to_vec(),
        test_times,
        test_states.clone(),
        test_states,
        (t_train, config.t_end),
    )?;
    test.seed = config.seed;
    Ok((train, test))
}

/// Second-order finite differences on a possibly non-uniform grid: central
/// in the interior, one-sided three-point at the ends.
pub fn finite_difference_derivatives(times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let k = times.len();
    if k < 3 || values.len() != k {
        return Err(Error::InvalidArgument(format!(
            "finite differences need at least 3 matching samples, got {k} times and {} values",
            values.len()
        )));
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::DegenerateGrid { index: i + 1 });
    }
    let mut d = vec![0.0; k];
    for i in 1..k - 1 {
        let (h1, h2) = (times[i] - times[i - 1], times[i + 1] - times[i]);
        d[i] = -h2 / (h1 * (h1 + h2)) * values[i - 1]
            + (h2 - h1) / (h1 * h2) * values[i]
            + h1 / (h2 * (h1 + h2)) * values[i + 1];
    }
    let (h1, h2) = (times[1] - times[0], times[2] - times[1]);
    d[0] = -(2.0 * h1 + h2) / (h1 * (h1 + h2)) * values[0] + (h1 + h2) / (h1 * h2) * values[1]
        - h1 / (h2 * (h1 + h2)) * values[2];
    let (h1, h2) = (times[k - 2] - times[k - 3], times[k - 1] - times[k - 2]);
    d[k - 1] = (2.0 * h2 + h1) / (h2 * (h1 + h2)) * values[k - 1]
        - (h1 + h2) / (h1 * h2) * values[k - 2]
        + h2 / (h1 * (h1 + h2)) * values[k - 3];
    Ok(d)
}

/// Savitzky–Golay smoothing treating samples as equally spaced.
///
/// Each output is the value at its own position of the least-squares
/// polynomial over a `window`-point frame, centred where possible and
/// shifted inward at the ends.
pub fn savitzky_golay(values: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    let k = values.len();
    if window.is_multiple_of(2) || window <= order || k < window {
        return Err(Error::WindowTooLarge {
            window,
            order,
            len: k,
        });
    }
    let half = window / 2;
    let scale = half.max(1) as f64;
    // Smoothing weights depend only on the position within the frame.
    let weights: Vec<Vec<f64>> = (0..window)
        .map(|pos| sg_weights(window, order, pos, scale))
        .collect::<Result<_>>()?;
    Ok((0..k)
        .map(|i| {
            let start = i.saturating_sub(half).min(k - window);
            let w = &weights[i - start];
            (0..window).map(|j| w[j] * values[start + j]).sum()
        })
        .collect())
}

/// As [`savitzky_golay`] after checking the grid is uniform.
pub fn savitzky_golay_on_grid(
    times: &[f64],
    values: &[f64],
    window: usize,
    order: usize,
) -> Result<Vec<f64>> {
    if times.len() != values.len() {
        return Err(Error::ShapeMismatch {
            expected: times.len(),
            got: values.len(),
        });
    }
    if times.len() >= 2 {
        let h = times[1] - times[0];
        if !(h > 0.0) {
            return Err(Error::DegenerateGrid { index: 1 });
        }
        if let Some(i) = times
            .windows(2)
            .position(|w| ((w[1] - w[0]) - h).abs() > 1e-8 * h.abs().max(w[1].abs()))
        {
            return Err(Error::NonUniformGrid { index: i + 1 });
        }
    }
    savitzky_golay(values, window, order)
}

/// Weights `a` with `p(pos) = Σ_j a_j y_j` for the least-squares polynomial
/// through the frame.
fn sg_weights(window: usize, order: usize, pos: usize, scale: f64) -> Result<Vec<f64>> {
    let m = order + 1;
    let x = |j: usize| (j as f64 - pos as f64) / scale;
    let v = Mat::from_fn(window, m, |j, c| x(j).powi(c as i32));
    let mut vtv = v.transpose() * &v;
    symmetrize(&mut vtv);
    let f = cholesky(vtv.as_ref()).ok_or(Error::SingularSystem)?;
    // p(pos) is the constant coefficient: e₀ᵀ (VᵀV)⁻¹ Vᵀ y.
    let mut e0 = vec![0.0; m];
    e0[0] = 1.0;
    let c = f.solve_vec(&e0);
    Ok((0..window)
        .map(|j| (0..m).map(|q| c[q] * v[(j, q)]).sum())
        .collect())
}

/// Ordinary least squares `argmin ‖Gθ − d‖²`.
pub fn baseline_linreg(g: faer::MatRef<'_, f64>, d: &[f64]) -> Result<Vec<f64>> {
    if g.nrows() != d.len() {
        return Err(Error::ShapeMismatch {
            expected: g.nrows(),
            got: d.len(),
        });
    }
    let p = g.ncols();
    let mut gtg = g.transpose() * g;
    symmetrize(&mut gtg);
    let gtd = crate::linalg::mat_vec(g.transpose(), d);
    let s: Vec<f64> = (0..p).map(|j| gtg[(j, j)].sqrt()).collect();
    if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::SingularSystem);
    }
    let scaled = Mat::from_fn(p, p, |i, j| gtg[(i, j)] / (s[i] * s[j]));
    let f: Factor = cholesky(scaled.as_ref()).ok_or(Error::SingularSystem)?;
    if f.condition_estimate() > 1e14 {
        return Err(Error::SingularSystem);
    }
    let rhs: Vec<f64> = gtd.iter().zip(&s).map(|(v, si)| v / si).collect();
    Ok(f.solve_vec(&rhs)
        .iter()
        .zip(&s)
        .map(|(v, si)| v / si)
        .collect())
}
