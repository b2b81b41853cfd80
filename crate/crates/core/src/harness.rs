//! Verification experiments: the continuum oracle behind position-attention,
//! Monte-Carlo convergence, zero-shot resolution sweeps, timing and λ reports.

use std::num::NonZeroUsize;
use std::time::Instant;

use gauss_quad::GaussLegendre;
use rand::Rng;

use crate::attention::{pos_att, HeadWeights};
use crate::autodiff::Tape;
use crate::data::{Split, TaskSpec};
use crate::error::{PitError, Result};
use crate::geometry::{pairwise_sq_dist, Mesh};
use crate::model::{HeadRadius, PiTModel};
use crate::rng::{indexed, stream, Stream};
use crate::tensor::Tensor2;
use crate::training::{evaluate, median, Metric};

/// Minimum ratio of fine quadrature points to evaluated mesh points.
pub const ORACLE_FACTOR: usize = 16;

/// Tensor-product Gauss-Legendre rule on `[0, 1]^dim` evaluating
/// `F(x) = ∫ κ(x - y) v(y) dy W^V / ∫ κ(x - y) dy` with `κ(r) = exp(-λ |r|²)`
/// under the uniform measure.
#[derive(Clone, Debug)]
pub struct QuadratureOracle {
    dim: usize,
    points: Tensor2,
    weights: Vec<f64>,
    lambda: f64,
    w_v: Tensor2,
}

impl QuadratureOracle {
    pub fn new(dim: usize, per_axis: usize, lambda: f64, w_v: Tensor2) -> Result<Self> {
        let n = NonZeroUsize::new(per_axis)
            .ok_or_else(|| PitError::InvalidArgument("quadrature needs at least one node".into()))?;
        if dim == 0 || !(lambda >= 0.0) {
            return Err(PitError::InvalidArgument(format!(
                "oracle needs dim >= 1 and λ >= 0, got dim {dim}, λ {lambda}"
            )));
        }
        let rule = GaussLegendre::new(n);
        let nodes: Vec<(f64, f64)> = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
            .collect();
        let total = per_axis.pow(dim as u32);
        let mut points = Tensor2::zeros(total, dim);
        let mut weights = vec![1.0; total];
        for (i, w) in weights.iter_mut().enumerate() {
            let mut rem = i;
            for k in (0..dim).rev() {
                let (x, wk) = nodes[rem % per_axis];
                points.set(i, k, x);
                *w *= wk;
                rem /= per_axis;
            }
        }
        Ok(Self {
            dim,
            points,
            weights,
            lambda,
            w_v,
        })
    }

    /// The smallest rule with at least `ORACLE_FACTOR * n` nodes.
    pub fn for_mesh_size(dim: usize, n: usize, lambda: f64, w_v: Tensor2) -> Result<Self> {
        let target = (ORACLE_FACTOR * n) as f64;
        let mut per_axis = target.powf(1.0 / dim as f64).floor().max(1.0) as usize;
        while per_axis.pow(dim as u32) < ORACLE_FACTOR * n {
            per_axis += 1;
        }
        Self::new(dim, per_axis, lambda, w_v)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn points(&self) -> &Tensor2 {
        &self.points
    }

    /// `v` at every quadrature node, one row per node.
    pub fn sample(&self, v: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<Tensor2> {
        let rows: Vec<Vec<f64>> = (0..self.len()).map(|i| v(self.points.row(i))).collect();
        let t = Tensor2::from_rows(&rows)?;
        if t.cols() != self.w_v.rows() {
            return Err(PitError::InvalidArgument(format!(
                "v has {} channels but W^V expects {}",
                t.cols(),
                self.w_v.rows()
            )));
        }
        Ok(t)
    }

    /// `F(x)` for `v` sampled at the nodes by [`Self::sample`].
    pub fn integral(&self, x: &[f64], v_nodes: &Tensor2) -> Result<Vec<f64>> {
        if x.len() != self.dim || v_nodes.rows() != self.len() {
            return Err(PitError::InvalidArgument(
                "oracle point or samples have the wrong shape".into(),
            ));
        }
        let sq: Vec<f64> = (0..self.len())
            .map(|j| self.points.row(j).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let shift = sq.iter().copied().fold(f64::INFINITY, f64::min);
        let mut acc = vec![0.0; v_nodes.cols()];
        let mut den = 0.0;
        for j in 0..self.len() {
            let k = self.weights[j] * (-self.lambda * (sq[j] - shift)).exp();
            den += k;
            for (a, &v) in acc.iter_mut().zip(v_nodes.row(j)) {
                *a += k * v;
            }
        }
        let avg = Tensor2::from_vec(1, acc.len(), acc.iter().map(|a| a / den).collect())?;
        Ok(avg.matmul(&self.w_v)?.into_data())
    }
}

/// `F(x)` for a function `v`, integrated on `oracle`'s nodes.
pub fn oracle_integral(x: &[f64], v: &dyn Fn(&[f64]) -> Vec<f64>, oracle: &QuadratureOracle) -> Result<Vec<f64>> {
    oracle.integral(x, &oracle.sample(v)?)
}

#[derive(Clone, Debug)]
pub struct Theorem1Config {
    pub dim: usize,
    pub lambda: f64,
    pub w_v: Tensor2,
    pub n_list: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Row {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    pub lambda: f64,
    pub rows: Vec<Theorem1Row>,
    /// Least-squares slope of log median deviation against log n.
    pub slope: f64,
}

impl Theorem1Report {
    pub fn medians_decrease(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].median < w[0].median)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,lambda,mean,std,median,min,max\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.n, self.lambda, r.mean, r.std, r.median, r.min, r.max
            ));
        }
        s
    }
}

/// Mean over rows of the Euclidean row deviation `(1/n) Σ_i ‖a_i - b_i‖`.
pub fn mean_row_deviation(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(PitError::InvalidArgument(
            "row deviation needs equal, non-empty shapes".into(),
        ));
    }
    let total: f64 = (0..a.rows())
        .map(|i| {
            a.row(i)
                .iter()
                .zip(b.row(i))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.rows() as f64)
}

/// Draws uniform meshes of each size, applies global position-attention to the
/// samples of `v` and measures the deviation from the continuum operator.
pub fn theorem1_experiment(cfg: &Theorem1Config, v: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<Theorem1Report> {
    if cfg.n_list.len() < 2 || cfg.repetitions == 0 {
        return Err(PitError::InvalidArgument(
            "need at least two sizes and one repetition".into(),
        ));
    }
    if cfg.n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PitError::InvalidArgument(
            "mesh sizes must be strictly increasing".into(),
        ));
    }
    let head = HeadWeights::positional(cfg.lambda, cfg.w_v.clone());
    let mut rows = Vec::with_capacity(cfg.n_list.len());
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let oracle = QuadratureOracle::for_mesh_size(cfg.dim, n, cfg.lambda, cfg.w_v.clone())?;
        let v_nodes = oracle.sample(v)?;
        let mut devs = Vec::with_capacity(cfg.repetitions);
        for r in 0..cfg.repetitions {
            let mut rng = indexed(cfg.seed, (ni * cfg.repetitions + r) as u64);
            let pts = Tensor2::from_fn(n, cfg.dim, |_, _| rng.random::<f64>());
            let mesh = Mesh::point_cloud(pts)?;
            let samples: Vec<Vec<f64>> = (0..n).map(|i| v(mesh.point(i))).collect();
            let u = Tensor2::from_rows(&samples)?;
            let approx = pos_att(&u, &pairwise_sq_dist(&mesh, &mesh)?, &head)?;
            let exact: Vec<Vec<f64>> = (0..n)
                .map(|i| oracle.integral(mesh.point(i), &v_nodes))
                .collect::<Result<_>>()?;
            devs.push(mean_row_deviation(&approx, &Tensor2::from_rows(&exact)?)?);
        }
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        let var = devs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / devs.len() as f64;
        rows.push(Theorem1Row {
            n,
            mean,
            std: var.sqrt(),
            median: median(&devs),
            min: devs.iter().copied().fold(f64::INFINITY, f64::min),
            max: devs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.median.ln()).collect();
    Ok(Theorem1Report {
        lambda: cfg.lambda,
        slope: linear_fit(&xs, &ys)?.slope,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(PitError::InvalidArgument(
            "a fit needs at least two paired points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(PitError::InvalidArgument("fit abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub trained_at: usize,
    pub resolutions: Vec<usize>,
    pub errors: Vec<f64>,
    pub metric: Metric,
}

impl ConvergenceReport {
    pub fn error_at(&self, resolution: usize) -> Option<f64> {
        self.resolutions
            .iter()
            .position(|&r| r == resolution)
            .map(|i| self.errors[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("resolution,{},trained_at\n", self.metric.name());
        for (r, e) in self.resolutions.iter().zip(&self.errors) {
            s.push_str(&format!("{r},{e:.16e},{}\n", self.trained_at));
        }
        s
    }
}

/// Evaluates a trained model on the task's test functions resampled at each
/// resolution (input and output grids alike), against the task's references.
pub fn super_resolution_sweep(
    model: &PiTModel,
    task: &TaskSpec,
    resolutions: &[usize],
    metric: Metric,
) -> Result<ConvergenceReport> {
    if resolutions.is_empty() || resolutions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PitError::InvalidArgument(
            "resolutions must be non-empty and strictly increasing".into(),
        ));
    }
    let errors = resolutions
        .iter()
        .map(|&r| evaluate(model, &task.generate_at(Split::Test, r, r)?, metric))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport {
        trained_at: task.resolution,
        resolutions: resolutions.to_vec(),
        errors,
        metric,
    })
}

#[derive(Clone, Debug)]
pub struct ScalingConfig {
    pub n_list: Vec<usize>,
    /// Samples per timed forward pass.
    pub batch: usize,
    /// Timed runs per size; the median is reported.
    pub runs: usize,
    /// Forward passes per timed run.
    pub inner: usize,
    pub backward: bool,
    pub seed: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            n_list: vec![1024, 2048, 4096],
            batch: 1,
            runs: 5,
            inner: 1,
            backward: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub n_list: Vec<usize>,
    /// Median seconds per forward pass.
    pub seconds: Vec<f64>,
    pub fit: LinearFit,
}

impl ScalingReport {
    /// Time at the largest size over time at the smallest.
    pub fn end_ratio(&self) -> f64 {
        self.seconds[self.seconds.len() - 1] / self.seconds[0]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n_a,seconds\n");
        for (n, t) in self.n_list.iter().zip(&self.seconds) {
            s.push_str(&format!("{n},{t:.16e}\n"));
        }
        s
    }
}

/// Times a model built from `config` on periodic 1-D (or square 2-D) grids of
/// each size, keeping the latent mesh shape and width fixed. One warm-up pass per
/// size is discarded.
pub fn scaling_benchmark(config: &crate::model::PiTConfig, cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.n_list.len() < 2 || cfg.runs == 0 || cfg.inner == 0 || cfg.batch == 0 {
        return Err(PitError::InvalidArgument(
            "scaling needs two sizes and positive run counts".into(),
        ));
    }
    let mut seconds = Vec::with_capacity(cfg.n_list.len());
    let mut data_rng = stream(cfg.seed, Stream::Benchmark);
    for &n in &cfg.n_list {
        let mesh = match config.dim {
            1 => Mesh::periodic_unit_grid(&[n])?,
            2 => {
                let side = (n as f64).sqrt().round() as usize;
                if side * side != n {
                    return Err(PitError::InvalidArgument(format!("{n} is not a square grid size")));
                }
                Mesh::periodic_unit_grid(&[side, side])?
            }
            d => {
                return Err(PitError::InvalidArgument(format!(
                    "no benchmark grid for dimension {d}"
                )))
            }
        };
        let model = PiTModel::build_for(config.clone(), &mesh, cfg.seed)?;
        let input = Tensor2::from_fn(cfg.batch * n, config.input_channels, |_, _| {
            data_rng.random_range(-1.0..1.0)
        });
        let pass = || -> Result<()> {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let y = model.forward(&mut tape, x, cfg.batch, &mesh, &mesh)?;
            if cfg.backward {
                let s = tape.sum(y)?;
                tape.backward(s)?;
            }
            Ok(())
        };
        pass()?;
        let mut times = Vec::with_capacity(cfg.runs);
        for _ in 0..cfg.runs {
            let start = Instant::now();
            for _ in 0..cfg.inner {
                pass()?;
            }
            times.push(start.elapsed().as_secs_f64() / cfg.inner as f64);
        }
        seconds.push(median(&times));
    }
    let xs: Vec<f64> = cfg.n_list.iter().map(|&n| n as f64).collect();
    Ok(ScalingReport {
        fit: linear_fit(&xs, &seconds)?,
        n_list: cfg.n_list.clone(),
        seconds,
    })
}

/// `1/sqrt(λ_eff)` per layer and head as CSV.
pub fn lambda_report_csv(report: &[HeadRadius]) -> String {
    let mut s = String::from("layer,head,lambda,radius\n");
    for r in report {
        s.push_str(&format!("{},{},{:.16e},{:.16e}\n", r.layer, r.head, r.lambda, r.radius));
    }
    s
}

/// Human-readable table, layers as rows and heads as columns.
pub fn lambda_report_table(report: &[HeadRadius]) -> String {
    let heads = report.iter().map(|r| r.head + 1).max().unwrap_or(0);
    let mut s = format!("{:<24}", "layer");
    for h in 0..heads {
        s.push_str(&format!("{:>14}", format!("head {h}")));
    }
    s.push('\n');
    let mut layers: Vec<&str> = Vec::new();
    for r in report {
        if !layers.contains(&r.layer.as_str()) {
            layers.push(&r.layer);
        }
    }
    for layer in layers {
        s.push_str(&format!("{layer:<24}"));
        for h in 0..heads {
            match report.iter().find(|r| r.layer == layer && r.head == h) {
                Some(r) => s.push_str(&format!("{:>14.6}", r.radius)),
                None => s.push_str(&format!("{:>14}", "-")),
            }
        }
        s.push('\n');
    }
    s
}
