//! The Encoder-Processor-Decoder model and its ablation variants.
//!
//! ```text
//! Encoder   : LINEAR -> GELU -> LocPosAtt(input -> latent) -> GELU
//! Processor : L x { h = GELU(PosAtt(U)); U = GELU(MLP(h) + LINEAR(U)) }
//! Decoder   : LocPosAtt(latent -> query) -> GELU [-> block on query mesh] -> MLP
//! ```
//!
//! When `coord_features` is set, the mesh coordinates are appended to the input
//! channels before lifting.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::attention::{interpretable_radius, AttentionGeometry, AttentionKind, AttentionLayer, LambdaMode};
use crate::autodiff::{Tape, Var};
use crate::data::{push_mesh, read_mesh, Container};
use crate::error::{shape_err, PitError, Result};
use crate::geometry::{farthest_point_sample, pairwise_sq_dist, pool_grid, pool_grid_to_shape, Mesh};
use crate::nn::{Linear, Mlp};
use crate::params::ParamStore;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor2;

/// Which attention the layers use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Position-attention everywhere.
    PosAtt,
    /// Every attention layer replaced by self-attention.
    SelfAttA,
    /// Only the processor attention replaced by self-attention.
    SelfAttB,
    /// Processor attention uses combined positional and content logits.
    SelfPosAtt,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::PosAtt => "posatt",
            Variant::SelfAttA => "selfatt_a",
            Variant::SelfAttB => "selfatt_b",
            Variant::SelfPosAtt => "selfposatt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Variant::PosAtt,
            Variant::SelfAttA,
            Variant::SelfAttB,
            Variant::SelfPosAtt,
        ]
        .into_iter()
        .find(|v| v.name() == s)
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [
            Variant::PosAtt,
            Variant::SelfAttA,
            Variant::SelfAttB,
            Variant::SelfPosAtt,
        ]
        .into_iter()
        .find(|v| v.code() == c)
    }

    fn encoder_kind(self) -> AttentionKind {
        match self {
            Variant::SelfAttA => AttentionKind::SelfAtt,
            _ => AttentionKind::LocPosAtt,
        }
    }

    /// The optional decoder block keeps position-attention except when every layer is
    /// replaced.
    fn decoder_block_kind(self) -> AttentionKind {
        match self {
            Variant::SelfAttA => AttentionKind::SelfAtt,
            _ => AttentionKind::PosAtt,
        }
    }

    fn processor_kind(self) -> AttentionKind {
        match self {
            Variant::PosAtt => AttentionKind::PosAtt,
            Variant::SelfAttA | Variant::SelfAttB => AttentionKind::SelfAtt,
            Variant::SelfPosAtt => AttentionKind::SelfPosAtt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiTConfig {
    /// Spatial dimension of the meshes.
    pub dim: usize,
    pub input_channels: usize,
    pub output_channels: usize,
    /// Append mesh coordinates to the input channels.
    pub coord_features: bool,
    pub encoding_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub quantile_in: f64,
    pub quantile_out: f64,
    pub mlp_hidden: usize,
    /// Latent grid shape (grids are pooled to it; point clouds use its product as the
    /// farthest-point sample size).
    pub latent_shape: Vec<usize>,
    pub lambda_mode: LambdaMode,
    pub variant: Variant,
    /// Extra processor-style block on the query mesh before the output MLP.
    pub decoder_block: bool,
}

impl Default for PiTConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            input_channels: 1,
            output_channels: 1,
            coord_features: true,
            encoding_dim: 32,
            depth: 4,
            heads: 2,
            quantile_in: 0.1,
            quantile_out: 0.1,
            mlp_hidden: 32,
            latent_shape: vec![32],
            lambda_mode: LambdaMode::Tan,
            variant: Variant::PosAtt,
            decoder_block: false,
        }
    }
}

impl PiTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PitError::InvalidConfig(m));
        if self.dim == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return bad("dimension and channel counts must be positive".into());
        }
        if self.encoding_dim == 0 || self.mlp_hidden == 0 {
            return bad("encoding_dim and mlp_hidden must be positive".into());
        }
        if self.depth == 0 {
            return bad("processor depth must be at least 1".into());
        }
        if self.heads == 0 || !self.encoding_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "encoding_dim {} is not divisible by {} heads",
                self.encoding_dim, self.heads
            ));
        }
        for (name, q) in [("quantile_in", self.quantile_in), ("quantile_out", self.quantile_out)] {
            if !(q > 0.0 && q <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {q}"));
            }
        }
        if self.latent_shape.is_empty() || self.latent_shape.contains(&0) {
            return bad("latent_shape needs positive entries".into());
        }
        Ok(())
    }

    pub fn lifted_width(&self) -> usize {
        self.input_channels + if self.coord_features { self.dim } else { 0 }
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (dv, h, dh) = (self.encoding_dim, self.heads, self.encoding_dim / self.heads);
        let linear = |i: usize, o: usize| i * o + o;
        let attention = |kind: AttentionKind| {
            let lam = usize::from(kind.uses_lambda());
            let qk = if kind.uses_query_key() { 2 * dv * dh } else { 0 };
            h * (dv * dh + lam + qk)
        };
        let mlp = linear(dv, self.mlp_hidden) + linear(self.mlp_hidden, dv);
        let block = |kind| attention(kind) + mlp + linear(dv, dv);
        linear(self.lifted_width(), dv)
            + attention(self.variant.encoder_kind())
            + self.depth * block(self.variant.processor_kind())
            + attention(self.variant.encoder_kind())
            + if self.decoder_block {
                block(self.variant.decoder_block_kind())
            } else {
                0
            }
            + linear(dv, self.mlp_hidden)
            + linear(self.mlp_hidden, self.output_channels)
    }

    /// Latent mesh for data living on `input_mesh`: strided pooling when every axis
    /// divides evenly, evenly spaced index selection otherwise, and farthest point
    /// sampling for point clouds.
    pub fn latent_mesh(&self, input_mesh: &Mesh) -> Result<Mesh> {
        if let Some(shape) = input_mesh.grid_shape() {
            let strided = shape.len() == self.latent_shape.len()
                && shape.iter().zip(&self.latent_shape).all(|(&n, &m)| n % m == 0);
            if strided {
                let factors: Vec<usize> = shape.iter().zip(&self.latent_shape).map(|(n, m)| n / m).collect();
                pool_grid(input_mesh, &factors)
            } else {
                pool_grid_to_shape(input_mesh, &self.latent_shape)
            }
        } else {
            let n: usize = self.latent_shape.iter().product();
            Ok(farthest_point_sample(input_mesh, n, 0)?.0)
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    att: AttentionLayer,
    mlp: Mlp,
    res: Linear,
}

impl Block {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: AttentionKind,
        cfg: &PiTConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let dv = cfg.encoding_dim;
        Ok(Self {
            att: AttentionLayer::new(
                store,
                &format!("{name}.att"),
                kind,
                dv,
                dv,
                cfg.heads,
                cfg.lambda_mode,
                rng,
            )?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dv, cfg.mlp_hidden, dv, rng),
            res: Linear::new(store, &format!("{name}.res"), dv, dv, rng),
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        geom: &AttentionGeometry,
        batch: usize,
    ) -> Result<Var> {
        let h = self.att.forward(tape, store, u, geom, batch)?;
        let h = tape.gelu(h)?;
        let m = self.mlp.forward(tape, store, h)?;
        let r = self.res.forward(tape, store, u)?;
        let s = tape.add(m, r)?;
        tape.gelu(s)
    }
}

/// Cap on cached geometries; the cache is cleared when it grows past this.
const CACHE_LIMIT: usize = 32;

type GeometryKey = (u64, u64, u64);

#[derive(Debug, Default)]
struct GeometryCache {
    map: Mutex<HashMap<GeometryKey, Arc<AttentionGeometry>>>,
}

impl GeometryCache {
    fn get(&self, source: &Mesh, query: &Mesh, quantile: Option<f64>) -> Result<Arc<AttentionGeometry>> {
        let key = (
            source.fingerprint(),
            query.fingerprint(),
            quantile.map_or(u64::MAX, f64::to_bits),
        );
        if let Some(g) = self.map.lock().expect("cache lock").get(&key) {
            return Ok(g.clone());
        }
        let d = pairwise_sq_dist(source, query)?;
        let g = Arc::new(match quantile {
            Some(q) => AttentionGeometry::local(d, q)?,
            None => AttentionGeometry::global(d),
        });
        let mut map = self.map.lock().expect("cache lock");
        if map.len() >= CACHE_LIMIT {
            map.clear();
        }
        map.insert(key, g.clone());
        Ok(g)
    }
}

/// One row of [`PiTModel::lambda_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadRadius {
    pub layer: String,
    pub head: usize,
    pub lambda: f64,
    pub radius: f64,
}

#[derive(Debug)]
pub struct PiTModel {
    pub config: PiTConfig,
    pub store: ParamStore,
    latent: Mesh,
    lift: Linear,
    encoder: AttentionLayer,
    blocks: Vec<Block>,
    decoder: AttentionLayer,
    decoder_block: Option<Block>,
    head: Mlp,
    cache: GeometryCache,
}

impl Clone for PiTModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            latent: self.latent.clone(),
            lift: self.lift.clone(),
            encoder: self.encoder.clone(),
            blocks: self.blocks.clone(),
            decoder: self.decoder.clone(),
            decoder_block: self.decoder_block.clone(),
            head: self.head.clone(),
            cache: GeometryCache::default(),
        }
    }
}

impl PiTModel {
    /// Builds a freshly initialised model; parameters are drawn from the `Init` stream
    /// of `seed`.
    pub fn build(config: PiTConfig, latent: Mesh, seed: u64) -> Result<Self> {
        config.validate()?;
        if latent.dim() != config.dim {
            return Err(PitError::InvalidConfig(format!(
                "latent mesh is {}-D but the model is {}-D",
                latent.dim(),
                config.dim
            )));
        }
        let mut rng = stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        let c = &config;
        let dv = c.encoding_dim;
        let lift = Linear::new(&mut store, "lift", c.lifted_width(), dv, &mut rng);
        let encoder = AttentionLayer::new(
            &mut store,
            "encoder.att",
            c.variant.encoder_kind(),
            dv,
            dv,
            c.heads,
            c.lambda_mode,
            &mut rng,
        )?;
        let blocks = (0..c.depth)
            .map(|l| {
                Block::new(
                    &mut store,
                    &format!("processor.{l}"),
                    c.variant.processor_kind(),
                    c,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = AttentionLayer::new(
            &mut store,
            "decoder.att",
            c.variant.encoder_kind(),
            dv,
            dv,
            c.heads,
            c.lambda_mode,
            &mut rng,
        )?;
        let decoder_block = if c.decoder_block {
            Some(Block::new(
                &mut store,
                "decoder.block",
                c.variant.decoder_block_kind(),
                c,
                &mut rng,
            )?)
        } else {
            None
        };
        let head = Mlp::new(&mut store, "head", dv, c.mlp_hidden, c.output_channels, &mut rng);
        Ok(Self {
            config,
            store,
            latent,
            lift,
            encoder,
            blocks,
            decoder,
            decoder_block,
            head,
            cache: GeometryCache::default(),
        })
    }

    /// Builds a model whose latent mesh is derived from `input_mesh` per the config.
    pub fn build_for(config: PiTConfig, input_mesh: &Mesh, seed: u64) -> Result<Self> {
        let latent = config.latent_mesh(input_mesh)?;
        Self::build(config, latent, seed)
    }

    pub fn latent_mesh(&self) -> &Mesh {
        &self.latent
    }

    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// All attention layers with their parameter-name prefixes, in forward order.
    pub fn attention_layers(&self) -> Vec<(String, &AttentionLayer)> {
        let mut out = vec![("encoder".to_string(), &self.encoder)];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("processor.{l}"), &b.att));
        }
        out.push(("decoder".to_string(), &self.decoder));
        if let Some(b) = &self.decoder_block {
            out.push(("decoder.block".to_string(), &b.att));
        }
        out
    }

    /// The final output layer, exposed for tests and custom initialisation.
    pub fn output_layer(&self) -> &Linear {
        &self.head.second
    }

    /// Batched forward pass. `input` stacks `batch` samples of `input_mesh.len()` rows;
    /// the result stacks `batch` blocks of `query_mesh.len()` rows with
    /// `output_channels` columns.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        batch: usize,
        input_mesh: &Mesh,
        query_mesh: &Mesh,
    ) -> Result<Var> {
        let c = &self.config;
        let iv = tape.value(input);
        if batch == 0 || iv.rows() != batch * input_mesh.len() || iv.cols() != c.input_channels {
            return Err(shape_err(
                "forward",
                format!(
                    "input {:?} for batch {batch} on {} points with {} channels",
                    iv.shape(),
                    input_mesh.len(),
                    c.input_channels
                ),
            ));
        }
        for (name, m) in [("input", input_mesh), ("query", query_mesh)] {
            if m.dim() != c.dim {
                return Err(PitError::InvalidArgument(format!(
                    "{name} mesh is {}-D but the model is {}-D",
                    m.dim(),
                    c.dim
                )));
            }
        }
        let store = &self.store;
        let x = if c.coord_features {
            let coords = tile_rows(input_mesh.points(), batch);
            let coords = tape.constant(coords);
            tape.concat_cols(&[input, coords])?
        } else {
            input
        };
        let enc_geom = self.cache.get(input_mesh, &self.latent, Some(c.quantile_in))?;
        let lat_geom = self.cache.get(&self.latent, &self.latent, None)?;
        let dec_geom = self.cache.get(&self.latent, query_mesh, Some(c.quantile_out))?;

        let u = self.lift.forward(tape, store, x)?;
        let u = tape.gelu(u)?;
        let u = self.encoder.forward(tape, store, u, &enc_geom, batch)?;
        let mut u = tape.gelu(u)?;
        for b in &self.blocks {
            u = b.forward(tape, store, u, &lat_geom, batch)?;
        }
        let u = self.decoder.forward(tape, store, u, &dec_geom, batch)?;
        let mut u = tape.gelu(u)?;
        if let Some(b) = &self.decoder_block {
            let q_geom = self.cache.get(query_mesh, query_mesh, None)?;
            u = b.forward(tape, store, u, &q_geom, batch)?;
        }
        self.head.forward(tape, store, u)
    }

    /// Inference without gradients. `input` may stack several samples.
    pub fn predict(&self, input: &Tensor2, input_mesh: &Mesh, query_mesh: &Mesh) -> Result<Tensor2> {
        if input_mesh.is_empty() || !input.rows().is_multiple_of(input_mesh.len()) {
            return Err(shape_err(
                "predict",
                format!("{} rows for a mesh of {} points", input.rows(), input_mesh.len()),
            ));
        }
        let batch = input.rows() / input_mesh.len();
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, x, batch, input_mesh, query_mesh)?;
        Ok(tape.value(y).clone())
    }

    /// `1/sqrt(λ)` for every head of every position-attention layer.
    pub fn lambda_report(&self) -> Vec<HeadRadius> {
        let mut rows = Vec::new();
        for (name, layer) in self.attention_layers() {
            for (h, head) in layer.heads.iter().enumerate() {
                if let Some(l) = &head.lambda {
                    let lambda = l.effective(&self.store);
                    rows.push(HeadRadius {
                        layer: name.clone(),
                        head: h,
                        lambda,
                        radius: interpretable_radius(lambda),
                    });
                }
            }
        }
        rows
    }

    pub fn to_checkpoint(&self) -> Result<Container> {
        let c = &self.config;
        let mut out = Container::new();
        let echo: [(&str, f64); 13] = [
            ("dim", c.dim as f64),
            ("input_channels", c.input_channels as f64),
            ("output_channels", c.output_channels as f64),
            ("coord_features", f64::from(u8::from(c.coord_features))),
            ("encoding_dim", c.encoding_dim as f64),
            ("depth", c.depth as f64),
            ("heads", c.heads as f64),
            ("quantile_in", c.quantile_in),
            ("quantile_out", c.quantile_out),
            ("mlp_hidden", c.mlp_hidden as f64),
            ("lambda_mode", f64::from(c.lambda_mode.code())),
            ("variant", f64::from(c.variant.code())),
            ("decoder_block", f64::from(u8::from(c.decoder_block))),
        ];
        for (k, v) in echo {
            out.push_scalar(format!("config.{k}"), v)?;
        }
        out.push(
            "config.latent_shape",
            vec![c.latent_shape.len() as u64],
            c.latent_shape.iter().map(|&s| s as f64).collect(),
        )?;
        push_mesh(&mut out, "latent", &self.latent)?;
        for (_, p) in self.store.iter() {
            out.push_tensor(format!("param.{}", p.name), &p.value)?;
        }
        Ok(out)
    }

    pub fn from_checkpoint(ckpt: &Container) -> Result<Self> {
        let get = |k: &str| ckpt.scalar(&format!("config.{k}"));
        let count = |k: &str| -> Result<usize> {
            let v = get(k)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(PitError::Format(format!("config.{k} is not a count: {v}")));
            }
            Ok(v as usize)
        };
        let config = PiTConfig {
            dim: count("dim")?,
            input_channels: count("input_channels")?,
            output_channels: count("output_channels")?,
            coord_features: get("coord_features")? != 0.0,
            encoding_dim: count("encoding_dim")?,
            depth: count("depth")?,
            heads: count("heads")?,
            quantile_in: get("quantile_in")?,
            quantile_out: get("quantile_out")?,
            mlp_hidden: count("mlp_hidden")?,
            latent_shape: ckpt
                .values("config.latent_shape")?
                .iter()
                .map(|&v| v as usize)
                .collect(),
            lambda_mode: LambdaMode::from_code(count("lambda_mode")? as u8)
                .ok_or_else(|| PitError::Format("unknown lambda mode".into()))?,
            variant: Variant::from_code(count("variant")? as u8)
                .ok_or_else(|| PitError::Format("unknown variant".into()))?,
            decoder_block: get("decoder_block")? != 0.0,
        };
        let latent = read_mesh(ckpt, "latent")?;
        let mut model = Self::build(config, latent, 0)?;
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = format!("param.{}", model.store.get(id).name);
            model.store.set_value(id, ckpt.tensor(&name)?)?;
        }
        let expected = model.store.len();
        let stored = ckpt.arrays().iter().filter(|a| a.name.starts_with("param.")).count();
        if stored != expected {
            return Err(PitError::Format(format!(
                "checkpoint holds {stored} parameters, model has {expected}"
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path)?)
    }
}

fn tile_rows(t: &Tensor2, times: usize) -> Tensor2 {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor2::from_vec(t.rows() * times, t.cols(), data).expect("tiled shape")
}
