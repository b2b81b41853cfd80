//! Operator-learning datasets: synthetic generators, the `PITD` container, and
//! resolution changes for super-resolution protocols.

pub mod container;
pub mod darcy;
pub mod grf;
pub mod tasks;

use crate::error::{PitError, Result};
use crate::geometry::{pool_grid_indexed, Mesh, MeshKind};
use crate::tensor::Tensor2;

pub use container::Container;
pub use tasks::{TaskKind, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// A set of input/output function pairs sharing one input and one output mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorDataset {
    pub input_mesh: Mesh,
    pub output_mesh: Mesh,
    /// `N_a x d_a` per sample.
    pub inputs: Vec<Tensor2>,
    /// `N_u x d_u` per sample.
    pub outputs: Vec<Tensor2>,
    pub split: Split,
    /// Generator parameters as `(name, value)` pairs, echoed into saved files.
    pub meta: Vec<(String, f64)>,
}

impl OperatorDataset {
    pub fn new(
        input_mesh: Mesh,
        output_mesh: Mesh,
        inputs: Vec<Tensor2>,
        outputs: Vec<Tensor2>,
        split: Split,
    ) -> Result<Self> {
        let ds = Self {
            input_mesh,
            output_mesh,
            inputs,
            outputs,
            split,
            meta: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.outputs.len() {
            return Err(PitError::InvalidArgument(format!(
                "{} inputs but {} outputs",
                self.inputs.len(),
                self.outputs.len()
            )));
        }
        let (da, du) = match (self.inputs.first(), self.outputs.first()) {
            (Some(a), Some(u)) => (a.cols(), u.cols()),
            _ => return Ok(()),
        };
        for (a, u) in self.inputs.iter().zip(&self.outputs) {
            if a.shape() != (self.input_mesh.len(), da) || u.shape() != (self.output_mesh.len(), du) {
                return Err(PitError::InvalidArgument(
                    "sample shapes do not match the dataset meshes".into(),
                ));
            }
            if !a.is_finite() || !u.is_finite() {
                return Err(PitError::NonFinite("dataset sample"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_channels(&self) -> usize {
        self.inputs.first().map_or(0, Tensor2::cols)
    }

    pub fn output_channels(&self) -> usize {
        self.outputs.first().map_or(0, Tensor2::cols)
    }

    /// Rows of the given samples stacked into `(B*N_a) x d_a` and `(B*N_u) x d_u`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor2, Tensor2)> {
        let a: Vec<&Tensor2> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let u: Vec<&Tensor2> = idx.iter().map(|&i| &self.outputs[i]).collect();
        Ok((Tensor2::concat_rows(&a)?, Tensor2::concat_rows(&u)?))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        push_mesh(&mut c, "input_mesh", &self.input_mesh)?;
        push_mesh(&mut c, "output_mesh", &self.output_mesh)?;
        let stack = |xs: &[Tensor2], rows: usize, cols: usize| -> (Vec<u64>, Vec<f64>) {
            let dims = vec![xs.len() as u64, rows as u64, cols as u64];
            (dims, xs.iter().flat_map(|t| t.data().iter().copied()).collect())
        };
        let (d, v) = stack(&self.inputs, self.input_mesh.len(), self.input_channels());
        c.push("inputs", d, v)?;
        let (d, v) = stack(&self.outputs, self.output_mesh.len(), self.output_channels());
        c.push("outputs", d, v)?;
        c.push_scalar("meta.split", self.split.code() as f64)?;
        for (k, v) in &self.meta {
            c.push_scalar(format!("meta.{k}"), *v)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let input_mesh = read_mesh(c, "input_mesh")?;
        let output_mesh = read_mesh(c, "output_mesh")?;
        let unstack = |name: &str| -> Result<Vec<Tensor2>> {
            let a = c
                .get(name)
                .ok_or_else(|| PitError::Format(format!("missing array `{name}`")))?;
            let [s, r, k] = a.dims[..] else {
                return Err(PitError::Format(format!("`{name}` must be three-dimensional")));
            };
            let per = (r * k) as usize;
            (0..s as usize)
                .map(|i| Tensor2::from_vec(r as usize, k as usize, a.values[i * per..(i + 1) * per].to_vec()))
                .collect()
        };
        let split = Split::from_code(c.scalar("meta.split")? as u8)
            .ok_or_else(|| PitError::Format("unknown split code".into()))?;
        let meta = c
            .arrays()
            .iter()
            .filter_map(|a| {
                let k = a.name.strip_prefix("meta.")?;
                (k != "split" && a.values.len() == 1).then(|| (k.to_string(), a.values[0]))
            })
            .collect();
        let mut ds = Self::new(input_mesh, output_mesh, unstack("inputs")?, unstack("outputs")?, split)?;
        ds.meta = meta;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub(crate) fn push_mesh(c: &mut Container, name: &str, m: &Mesh) -> Result<()> {
    c.push_tensor(format!("{name}.points"), m.points())?;
    if let Some(shape) = m.grid_shape() {
        c.push(
            format!("{name}.shape"),
            vec![shape.len() as u64],
            shape.iter().map(|&s| s as f64).collect(),
        )?;
    }
    Ok(())
}

pub(crate) fn read_mesh(c: &Container, name: &str) -> Result<Mesh> {
    let points = c.tensor(&format!("{name}.points"))?;
    match c.get(&format!("{name}.shape")) {
        None => Mesh::point_cloud(points),
        Some(a) => {
            let shape: Vec<usize> = a.values.iter().map(|&v| v as usize).collect();
            Mesh::from_grid_points(points, shape)
        }
    }
}

/// Strided restriction of both meshes and all samples (every `factor`-th grid index
/// along each axis, starting at 0).
pub fn downsample_dataset(ds: &OperatorDataset, factor: usize) -> Result<OperatorDataset> {
    let restrict = |mesh: &Mesh| -> Result<(Mesh, Vec<usize>)> {
        match mesh.kind() {
            MeshKind::Grid { shape } => pool_grid_indexed(mesh, &vec![factor; shape.len()]),
            MeshKind::PointCloud => Err(PitError::InvalidArgument("downsampling needs grid meshes".into())),
        }
    };
    let (input_mesh, ia) = restrict(&ds.input_mesh)?;
    let (output_mesh, iu) = restrict(&ds.output_mesh)?;
    let mut out = OperatorDataset::new(
        input_mesh,
        output_mesh,
        ds.inputs.iter().map(|a| a.select_rows(&ia)).collect(),
        ds.outputs.iter().map(|u| u.select_rows(&iu)).collect(),
        ds.split,
    )?;
    out.meta = ds.meta.clone();
    Ok(out)
}
