//! Synthetic operator-learning tasks.
//!
//! * `Smoothing`: periodic Gaussian blur `u(x) = ∫ G_w(x - y) a(y) dy` on `[0, 1)`,
//!   evaluated by normalised quadrature on a fine grid.
//! * `Advection`: exact periodic shift `u(x) = a(x - sT)`.
//! * `Darcy`: `-div(a grad u) = f` on the unit square with a thresholded-field
//!   coefficient, solved by finite differences.
//!
//! Train and test inputs come from different random streams of the task seed, and every
//! input is a stored random-field draw, so the same functions can be regenerated on any
//! mesh for super-resolution experiments.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use super::darcy::{solve_darcy, threshold_coefficient};
use super::grf::{GrfSample, GrfSpec};
use super::{OperatorDataset, Split};
use crate::error::{PitError, Result};
use crate::geometry::Mesh;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Smoothing,
    Advection,
    Darcy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Smoothing => "smoothing",
            TaskKind::Advection => "advection",
            TaskKind::Darcy => "darcy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "smoothing" => Some(TaskKind::Smoothing),
            "advection" => Some(TaskKind::Advection),
            "darcy" => Some(TaskKind::Darcy),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn dim(self) -> usize {
        match self {
            TaskKind::Darcy => 2,
            _ => 1,
        }
    }
}

/// Residual bound every Darcy solve must meet.
pub const DARCY_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Input grid points per axis.
    pub resolution: usize,
    /// Output grid points per axis (Darcy uses `resolution` for both).
    pub output_resolution: usize,
    pub grf: GrfSpec,
    /// Standard deviation of the smoothing kernel.
    pub kernel_width: f64,
    /// Advection displacement `sT`.
    pub shift: f64,
    pub darcy_low: f64,
    pub darcy_high: f64,
    pub forcing: f64,
    /// Fine quadrature points per output point for the smoothing task.
    pub quad_factor: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Smoothing,
            n_train: 256,
            n_test: 64,
            resolution: 64,
            output_resolution: 64,
            grf: GrfSpec::default(),
            kernel_width: 0.05,
            shift: 0.25,
            darcy_low: 3.0,
            darcy_high: 12.0,
            forcing: 1.0,
            quad_factor: 16,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PitError::InvalidConfig(m));
        if self.resolution == 0 || self.output_resolution == 0 {
            return bad("resolutions must be positive".into());
        }
        if self.kind == TaskKind::Darcy && self.resolution < 3 {
            return bad("darcy needs at least 3 grid points per side".into());
        }
        if self.kind == TaskKind::Darcy && self.resolution > 64 {
            return bad(format!(
                "darcy grids are limited to 64 per side, got {}",
                self.resolution
            ));
        }
        if !(self.kernel_width > 0.0) {
            return bad("kernel_width must be positive".into());
        }
        if !(self.grf.length_scale > 0.0) || !(self.grf.variance >= 0.0) {
            return bad("random-field length scale must be positive and variance non-negative".into());
        }
        if !(self.darcy_low > 0.0 && self.darcy_high > 0.0) {
            return bad("darcy coefficients must be positive".into());
        }
        if self.quad_factor == 0 {
            return bad("quad_factor must be positive".into());
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }

    fn rng(&self, split: Split) -> ChaCha8Rng {
        stream(
            self.seed,
            match split {
                Split::Train => Stream::TrainData,
                Split::Test => Stream::TestData,
            },
        )
    }

    /// The random-field draws behind every sample of `split`.
    pub fn draws(&self, split: Split) -> Result<Vec<GrfSample>> {
        self.validate()?;
        let mut rng = self.rng(split);
        let dim = self.kind.dim();
        (0..self.count(split))
            .map(|_| GrfSample::draw(&self.grf, dim, &mut rng))
            .collect()
    }

    /// Default meshes: periodic grids for the 1-D tasks, closed grids for Darcy.
    pub fn meshes(&self, resolution: usize, output_resolution: usize) -> Result<(Mesh, Mesh)> {
        match self.kind {
            TaskKind::Darcy => {
                let m = Mesh::closed_unit_grid(&[resolution, resolution])?;
                Ok((m.clone(), m))
            }
            _ => Ok((
                Mesh::periodic_unit_grid(&[resolution])?,
                Mesh::periodic_unit_grid(&[output_resolution])?,
            )),
        }
    }

    fn meta(&self) -> Vec<(String, f64)> {
        vec![
            ("task".into(), self.kind.code() as f64),
            ("seed".into(), self.seed as f64),
            ("length_scale".into(), self.grf.length_scale),
            ("variance".into(), self.grf.variance),
            ("kernel_width".into(), self.kernel_width),
            ("shift".into(), self.shift),
        ]
    }

    /// The dataset at the configured resolutions.
    pub fn generate(&self, split: Split) -> Result<OperatorDataset> {
        self.generate_at(split, self.resolution, self.output_resolution)
    }

    /// The same functions sampled at other grid resolutions.
    pub fn generate_at(&self, split: Split, resolution: usize, output_resolution: usize) -> Result<OperatorDataset> {
        let (xa, xu) = self.meshes(resolution, output_resolution)?;
        self.generate_on(split, &xa, &xu)
    }

    /// The same functions sampled on arbitrary meshes. Darcy needs one closed square grid
    /// for both.
    pub fn generate_on(&self, split: Split, input_mesh: &Mesh, output_mesh: &Mesh) -> Result<OperatorDataset> {
        let draws = self.draws(split)?;
        let (inputs, outputs) = match self.kind {
            TaskKind::Smoothing => {
                let blur = SmoothingQuadrature::new(output_mesh, self.kernel_width, self.quad_factor)?;
                let mut ins = Vec::with_capacity(draws.len());
                let mut outs = Vec::with_capacity(draws.len());
                for g in &draws {
                    ins.push(column(g.eval_mesh(input_mesh)?));
                    outs.push(column(blur.apply(g)));
                }
                (ins, outs)
            }
            TaskKind::Advection => {
                let mut ins = Vec::with_capacity(draws.len());
                let mut outs = Vec::with_capacity(draws.len());
                for g in &draws {
                    ins.push(column(g.eval_mesh(input_mesh)?));
                    outs.push(column(advect(|x| g.eval(&[x]), output_mesh, self.shift)?));
                }
                (ins, outs)
            }
            TaskKind::Darcy => {
                let n = match input_mesh.grid_shape() {
                    Some(&[a, b]) if a == b && input_mesh == output_mesh => a,
                    _ => return Err(PitError::InvalidArgument("darcy data lives on one square grid".into())),
                };
                let f = vec![self.forcing; n * n];
                let mut ins = Vec::with_capacity(draws.len());
                let mut outs = Vec::with_capacity(draws.len());
                for g in &draws {
                    let a = threshold_coefficient(&g.eval_mesh(input_mesh)?, self.darcy_low, self.darcy_high);
                    let sol = solve_darcy(n, &a, &f)?;
                    if !(sol.residual < DARCY_RESIDUAL_TOL) {
                        return Err(PitError::InvalidArgument(format!(
                            "darcy solve residual {} exceeds {DARCY_RESIDUAL_TOL}",
                            sol.residual
                        )));
                    }
                    ins.push(column(a));
                    outs.push(column(sol.u));
                }
                (ins, outs)
            }
        };
        let mut ds = OperatorDataset::new(input_mesh.clone(), output_mesh.clone(), inputs, outputs, split)?;
        ds.meta = self.meta();
        Ok(ds)
    }
}

fn column(v: Vec<f64>) -> Tensor2 {
    let n = v.len();
    Tensor2::from_vec(n, 1, v).expect("length matches")
}

/// Exact solution operator of `v_t + s v_x = 0` on the unit circle: `u(x) = a(x - sT)`.
pub fn advect(a: impl Fn(f64) -> f64, mesh: &Mesh, shift: f64) -> Result<Vec<f64>> {
    if mesh.dim() != 1 {
        return Err(PitError::InvalidArgument("advection is one-dimensional".into()));
    }
    Ok((0..mesh.len())
        .map(|i| a((mesh.point(i)[0] - shift).rem_euclid(1.0)))
        .collect())
}

/// Normalised periodic Gaussian blur evaluated by a uniform-grid quadrature rule on
/// `[0, 1)`. Row weights depend only on the meshes, so they are built once and reused.
#[derive(Clone, Debug)]
pub struct SmoothingQuadrature {
    fine: Vec<f64>,
    /// `N_u x M`, rows sum to one.
    weights: Tensor2,
}

impl SmoothingQuadrature {
    pub fn new(targets: &Mesh, width: f64, quad_factor: usize) -> Result<Self> {
        let m = (quad_factor * targets.len()).max((8.0 / width).ceil() as usize);
        Self::with_points(targets, width, m)
    }

    /// Quadrature on exactly `m` uniformly spaced points.
    pub fn with_points(targets: &Mesh, width: f64, m: usize) -> Result<Self> {
        if targets.dim() != 1 {
            return Err(PitError::InvalidArgument("smoothing is one-dimensional".into()));
        }
        if !(width > 0.0) || m == 0 {
            return Err(PitError::InvalidArgument("invalid quadrature parameters".into()));
        }
        let fine: Vec<f64> = (0..m).map(|j| j as f64 / m as f64).collect();
        let inv = 1.0 / (2.0 * width * width);
        let weights = Tensor2::from_fn(targets.len(), m, |i, j| {
            periodic_gaussian(targets.point(i)[0] - fine[j], inv)
        });
        let mut weights = weights;
        for i in 0..weights.rows() {
            let row = weights.row_mut(i);
            let s: f64 = row.iter().sum();
            for w in row.iter_mut() {
                *w /= s;
            }
        }
        Ok(Self { fine, weights })
    }

    pub fn apply(&self, g: &GrfSample) -> Vec<f64> {
        let a: Vec<f64> = self.fine.iter().map(|&y| g.eval(&[y])).collect();
        self.apply_values(&a)
    }

    /// Blurs values given on the fine grid.
    pub fn apply_values(&self, a: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|i| self.weights.row(i).iter().zip(a).map(|(w, v)| w * v).sum())
            .collect()
    }

    pub fn fine_points(&self) -> &[f64] {
        &self.fine
    }
}

fn periodic_gaussian(d: f64, inv_two_var: f64) -> f64 {
    let r = d - d.round();
    (-1..=1)
        .map(|n| {
            let x = r - n as f64;
            (-x * x * inv_two_var).exp()
        })
        .sum()
}

/// Fourier multiplier of the unit-period Gaussian blur of standard deviation `width`.
pub fn blur_multiplier(k: &[i64], width: f64) -> f64 {
    let k2: f64 = k.iter().map(|&k| (k * k) as f64).sum();
    (-2.0 * PI * PI * k2 * width * width).exp()
}
