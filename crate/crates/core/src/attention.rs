//! Position-attention kernels and the self-attention variants used for ablations.
//!
//! Two entry points exist for every kernel. The free functions ([`pos_att`],
//! [`loc_pos_att`], ...) evaluate a single head directly on plain tensors and serve as
//! readable references. [`AttentionLayer::forward`] is the taped, batched, multi-head
//! version the model trains through.

use std::f64::consts::FRAC_PI_2;
use std::sync::{Arc, OnceLock};

use rand::Rng;

use crate::autodiff::{softmax_rows_masked, Tape, Var};
use crate::error::{shape_err, PitError, Result};
use crate::geometry::{quantile_radii, Neighborhoods, PairwiseDistances, ReceptiveField};
use crate::nn::fan_in_uniform;
use crate::params::{Constraint, ParamId, ParamStore};
use crate::tensor::Tensor2;

/// Upper end of the raw-λ interval in tan mode.
pub const TAN_RAW_MAX: f64 = FRAC_PI_2 - 1e-4;

/// Range the effective λ is drawn from at initialisation.
pub const LAMBDA_INIT_RANGE: (f64, f64) = (0.1, 1.0);

/// How a raw trainable scalar is mapped to a non-negative λ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LambdaMode {
    /// `λ = raw²`.
    Square,
    /// `λ = tan(raw)` with `raw` projected onto `[0, π/2 - 1e-4]` after every step.
    Tan,
}

impl LambdaMode {
    pub fn effective(self, raw: f64) -> f64 {
        match self {
            LambdaMode::Square => raw * raw,
            LambdaMode::Tan => raw.clamp(0.0, TAN_RAW_MAX).tan(),
        }
    }

    /// A raw value whose effective λ equals `lambda` (which must be `>= 0`).
    pub fn raw_for(self, lambda: f64) -> f64 {
        match self {
            LambdaMode::Square => lambda.sqrt(),
            LambdaMode::Tan => lambda.atan().min(TAN_RAW_MAX),
        }
    }

    pub fn constraint(self) -> Constraint {
        match self {
            LambdaMode::Square => Constraint::Free,
            LambdaMode::Tan => Constraint::Interval {
                lo: 0.0,
                hi: TAN_RAW_MAX,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LambdaMode::Square => "square",
            LambdaMode::Tan => "tan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LambdaMode::Square, LambdaMode::Tan]
            .into_iter()
            .find(|m| m.name() == s)
    }

    pub fn code(self) -> u8 {
        match self {
            LambdaMode::Square => 0,
            LambdaMode::Tan => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LambdaMode::Square),
            1 => Some(LambdaMode::Tan),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LambdaParam {
    pub raw: ParamId,
    pub mode: LambdaMode,
}

impl LambdaParam {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, mode: LambdaMode, rng: &mut R) -> Self {
        let (lo, hi) = LAMBDA_INIT_RANGE;
        let raw = mode.raw_for(rng.random_range(lo..hi));
        let raw = store.add_constrained(name, Tensor2::scalar(raw), mode.constraint());
        Self { raw, mode }
    }

    pub fn effective(&self, store: &ParamStore) -> f64 {
        self.mode.effective(store.value(self.raw).data()[0])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let raw = tape.param(store, self.raw);
        match self.mode {
            LambdaMode::Square => tape.square(raw),
            LambdaMode::Tan => tape.tan(raw),
        }
    }
}

/// Length scale `1/sqrt(λ)` beyond which a head's attention weight has decayed by at
/// least `e^-1` relative to the closest point. A flat kernel (`λ = 0`) reports
/// `f64::INFINITY`.
pub fn interpretable_radius(lambda_eff: f64) -> f64 {
    if lambda_eff <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / lambda_eff.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Global position-attention on one mesh.
    PosAtt,
    /// Global position-attention from a source mesh onto a query mesh.
    CroPosAtt,
    /// Position-attention restricted to quantile receptive fields.
    LocPosAtt,
    /// Content-only scaled dot-product attention.
    SelfAtt,
    /// Sum of positional and content logits.
    SelfPosAtt,
}

impl AttentionKind {
    pub fn uses_lambda(self) -> bool {
        !matches!(self, AttentionKind::SelfAtt)
    }

    pub fn uses_query_key(self) -> bool {
        matches!(self, AttentionKind::SelfAtt | AttentionKind::SelfPosAtt)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub lambda: Option<LambdaParam>,
    pub w_v: ParamId,
    pub w_q: Option<ParamId>,
    pub w_k: Option<ParamId>,
}

impl AttentionHead {
    /// Plain-value snapshot of this head for use with the reference kernels.
    pub fn weights(&self, store: &ParamStore) -> HeadWeights {
        HeadWeights {
            lambda: self.lambda.as_ref().map_or(0.0, |l| l.effective(store)),
            w_v: store.value(self.w_v).clone(),
            w_q: self.w_q.map(|id| store.value(id).clone()),
            w_k: self.w_k.map(|id| store.value(id).clone()),
        }
    }
}

/// Distances plus the optional receptive field a layer attends over.
#[derive(Clone, Debug)]
pub struct AttentionGeometry {
    pub dist: PairwiseDistances,
    pub field: Option<ReceptiveField>,
    /// Nearest source point of every query point.
    pub nearest: Arc<Vec<usize>>,
    dense: OnceLock<Arc<Neighborhoods>>,
    within_field: OnceLock<Arc<Neighborhoods>>,
}

impl AttentionGeometry {
    pub fn global(dist: PairwiseDistances) -> Self {
        let nearest = Arc::new(dist.nearest_source());
        Self {
            dist,
            field: None,
            nearest,
            dense: OnceLock::new(),
            within_field: OnceLock::new(),
        }
    }

    pub fn local(dist: PairwiseDistances, quantile: f64) -> Result<Self> {
        let field = quantile_radii(&dist, quantile)?;
        let mut g = Self::global(dist);
        g.field = Some(field);
        Ok(g)
    }

    pub fn query_len(&self) -> usize {
        self.dist.query_len()
    }

    pub fn source_len(&self) -> usize {
        self.dist.source_len()
    }

    /// Sparse pattern for positional attention, built on first use. `local` selects
    /// the receptive field instead of every source point.
    pub fn neighborhoods(&self, local: bool) -> Result<Arc<Neighborhoods>> {
        if !local {
            return Ok(self
                .dense
                .get_or_init(|| Arc::new(Neighborhoods::dense(&self.dist)))
                .clone());
        }
        let field = self
            .field
            .as_ref()
            .ok_or_else(|| PitError::InvalidArgument("local attention needs a receptive field".into()))?;
        if let Some(nb) = self.within_field.get() {
            return Ok(nb.clone());
        }
        let nb = Arc::new(Neighborhoods::local(&self.dist, field)?);
        Ok(self.within_field.get_or_init(|| nb).clone())
    }
}

/// One multi-head attention layer. Per-head outputs are concatenated along features.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub kind: AttentionKind,
    pub heads: Vec<AttentionHead>,
    pub d_in: usize,
    pub d_out: usize,
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: AttentionKind,
        d_in: usize,
        d_out: usize,
        n_heads: usize,
        mode: LambdaMode,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_out.is_multiple_of(n_heads) {
            return Err(PitError::InvalidConfig(format!(
                "output width {d_out} is not divisible by {n_heads} heads"
            )));
        }
        let dh = d_out / n_heads;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let prefix = format!("{name}.head{h}");
            let lambda = kind
                .uses_lambda()
                .then(|| LambdaParam::new(store, &format!("{prefix}.lambda"), mode, rng));
            let w_v = store.add(format!("{prefix}.w_v"), fan_in_uniform(rng, d_in, d_in, dh));
            let (w_q, w_k) = if kind.uses_query_key() {
                (
                    Some(store.add(format!("{prefix}.w_q"), fan_in_uniform(rng, d_in, d_in, dh))),
                    Some(store.add(format!("{prefix}.w_k"), fan_in_uniform(rng, d_in, d_in, dh))),
                )
            } else {
                (None, None)
            };
            heads.push(AttentionHead { lambda, w_v, w_q, w_k });
        }
        Ok(Self {
            kind,
            heads,
            d_in,
            d_out,
        })
    }

    pub fn head_width(&self) -> usize {
        self.d_out / self.heads.len()
    }

    pub fn num_scalars(&self) -> usize {
        let dh = self.head_width();
        let per_head = self.d_in * dh
            + if self.kind.uses_lambda() { 1 } else { 0 }
            + if self.kind.uses_query_key() {
                2 * self.d_in * dh
            } else {
                0
            };
        per_head * self.heads.len()
    }

    /// Batched forward pass. `u` stacks `batch` samples of `geom.source_len()` rows each;
    /// the result stacks `batch` blocks of `geom.query_len()` rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        geom: &AttentionGeometry,
        batch: usize,
    ) -> Result<Var> {
        let ns = geom.source_len();
        let uv = tape.value(u);
        if batch == 0 || uv.rows() != batch * ns || uv.cols() != self.d_in {
            return Err(shape_err(
                "attention",
                format!(
                    "input {:?} for batch {batch} of {ns} points x {} features",
                    uv.shape(),
                    self.d_in
                ),
            ));
        }
        let local = self.kind == AttentionKind::LocPosAtt;
        if local && geom.field.is_none() {
            return Err(PitError::InvalidArgument(
                "local attention needs a receptive field".into(),
            ));
        }
        if !self.kind.uses_query_key() {
            let nb = geom.neighborhoods(local)?;
            let mut outs = Vec::with_capacity(self.heads.len());
            for head in &self.heads {
                let w_v = tape.param(store, head.w_v);
                let values = tape.matmul(u, w_v)?;
                let lam = head
                    .lambda
                    .as_ref()
                    .expect("positional kinds carry a lambda")
                    .forward(tape, store)?;
                outs.push(tape.position_attend(lam, nb.clone(), values, batch)?);
            }
            return if outs.len() == 1 {
                Ok(outs[0])
            } else {
                tape.concat_cols(&outs)
            };
        }
        let neg_d = self
            .kind
            .uses_lambda()
            .then(|| tape.constant(geom.dist.matrix().scale(-1.0)));
        // Query-side features for content attention. On a cross-mesh layer every query
        // point borrows the features of its nearest source point.
        let u_query = if geom.dist.is_self() {
            u
        } else {
            let idx: Vec<usize> = (0..batch)
                .flat_map(|b| geom.nearest.iter().map(move |&j| b * ns + j))
                .collect();
            tape.gather_rows(u, Arc::new(idx))?
        };

        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (Some(q_id), Some(k_id)) = (head.w_q, head.w_k) else {
                return Err(PitError::InvalidArgument(
                    "content attention needs query and key weights".into(),
                ));
            };
            let w_v = tape.param(store, head.w_v);
            let values = tape.matmul(u, w_v)?;
            let w_q = tape.param(store, q_id);
            let w_k = tape.param(store, k_id);
            let q = tape.matmul(u_query, w_q)?;
            let k = tape.matmul(u, w_k)?;
            let scale = 1.0 / (self.head_width() as f64).sqrt();
            let mut logits = tape.scores(q, k, batch, scale)?;
            if let (Some(l), Some(neg_d)) = (&head.lambda, neg_d) {
                let lam = l.forward(tape, store)?;
                let p = tape.scalar_mul(lam, neg_d)?;
                logits = tape.add_tiled(logits, p)?;
            }
            let w = tape.softmax_rows(logits)?;
            outs.push(tape.attend_batched(w, values, batch)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }

    /// Untaped single-sample evaluation.
    pub fn eval(&self, store: &ParamStore, u: &Tensor2, geom: &AttentionGeometry) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let uv = tape.constant(u.clone());
        let out = self.forward(&mut tape, store, uv, geom, 1)?;
        Ok(tape.value(out).clone())
    }
}

/// Plain-value head parameters for the reference kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    /// Effective (non-negative) λ.
    pub lambda: f64,
    pub w_v: Tensor2,
    pub w_q: Option<Tensor2>,
    pub w_k: Option<Tensor2>,
}

impl HeadWeights {
    pub fn positional(lambda: f64, w_v: Tensor2) -> Self {
        Self {
            lambda,
            w_v,
            w_q: None,
            w_k: None,
        }
    }
}

fn check_value_shapes(op: &'static str, u: &Tensor2, source_len: usize, w_v: &Tensor2) -> Result<()> {
    if u.rows() != source_len || u.cols() != w_v.rows() {
        return Err(shape_err(
            op,
            format!(
                "features {:?} against {source_len} source points and W^V {:?}",
                u.shape(),
                w_v.shape()
            ),
        ));
    }
    Ok(())
}

/// Row-stochastic weights `Softmax(-λ D)`, restricted to `field` when given.
pub fn position_weights(d: &PairwiseDistances, lambda: f64, field: Option<&ReceptiveField>) -> Result<Tensor2> {
    let logits = d.matrix().scale(-lambda);
    match field {
        Some(f) => {
            if f.rows() != d.query_len() {
                return Err(shape_err("position_weights", "field does not match distances"));
            }
            softmax_rows_masked(&logits, Some(&f.mask()))
        }
        None => softmax_rows_masked(&logits, None),
    }
}

/// Global position-attention on a single mesh.
pub fn pos_att(u: &Tensor2, d: &PairwiseDistances, head: &HeadWeights) -> Result<Tensor2> {
    if d.query_len() != d.source_len() {
        return Err(shape_err("pos_att", "distance matrix must be square"));
    }
    cro_pos_att(u, d, head)
}

/// Position-attention from the source mesh (columns of `d`) onto the query mesh (rows).
pub fn cro_pos_att(u: &Tensor2, d: &PairwiseDistances, head: &HeadWeights) -> Result<Tensor2> {
    check_value_shapes("cro_pos_att", u, d.source_len(), &head.w_v)?;
    position_weights(d, head.lambda, None)?.matmul(&u.matmul(&head.w_v)?)
}

/// Position-attention renormalised over each query's receptive field.
pub fn loc_pos_att(u: &Tensor2, field: &ReceptiveField, d: &PairwiseDistances, head: &HeadWeights) -> Result<Tensor2> {
    check_value_shapes("loc_pos_att", u, d.source_len(), &head.w_v)?;
    position_weights(d, head.lambda, Some(field))?.matmul(&u.matmul(&head.w_v)?)
}

fn content_logits(u: &Tensor2, head: &HeadWeights) -> Result<Tensor2> {
    let (Some(w_q), Some(w_k)) = (&head.w_q, &head.w_k) else {
        return Err(PitError::InvalidArgument(
            "content attention needs query and key weights".into(),
        ));
    };
    let q = u.matmul(w_q)?;
    let k = u.matmul(w_k)?;
    let scale = 1.0 / (w_q.cols() as f64).sqrt();
    Ok(q.matmul(&k.transpose())?.scale(scale))
}

/// Scaled dot-product self-attention `Softmax(Q Kᵀ / sqrt(d_head)) V`.
pub fn self_att(u: &Tensor2, head: &HeadWeights) -> Result<Tensor2> {
    check_value_shapes("self_att", u, u.rows(), &head.w_v)?;
    let w = softmax_rows_masked(&content_logits(u, head)?, None)?;
    w.matmul(&u.matmul(&head.w_v)?)
}

/// Combined attention `Softmax(-λ D + Q Kᵀ / sqrt(d_head)) V`.
pub fn self_pos_att(u: &Tensor2, d: &PairwiseDistances, head: &HeadWeights) -> Result<Tensor2> {
    if d.query_len() != d.source_len() {
        return Err(shape_err("self_pos_att", "distance matrix must be square"));
    }
    check_value_shapes("self_pos_att", u, d.source_len(), &head.w_v)?;
    let logits = content_logits(u, head)?.sub(&d.matrix().scale(head.lambda))?;
    softmax_rows_masked(&logits, None)?.matmul(&u.matmul(&head.w_v)?)
}

/// Applies `kernel` per head and concatenates the outputs along features.
pub fn multi_head(heads: &[HeadWeights], mut kernel: impl FnMut(&HeadWeights) -> Result<Tensor2>) -> Result<Tensor2> {
    if heads.is_empty() {
        return Err(PitError::InvalidArgument("at least one head is required".into()));
    }
    let outs = heads.iter().map(&mut kernel).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor2> = outs.iter().collect();
    Tensor2::concat_cols(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pairwise_sq_dist, Mesh};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> Mesh {
        Mesh::grid(&[xs.to_vec()]).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Direct evaluation of one output row: sum_j exp(-λ d_ij) v_j / sum_j exp(-λ d_ij).
    fn brute_row(xq: &[f64], xs: &[Vec<f64>], lambda: f64, v: &[Vec<f64>], keep: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut num = vec![0.0; v[0].len()];
        let mut den = 0.0;
        for (j, x) in xs.iter().enumerate() {
            if !keep(j) {
                continue;
            }
            let d2: f64 = x.iter().zip(xq).map(|(a, b)| (a - b) * (a - b)).sum();
            let w = (-lambda * d2).exp();
            den += w;
            for (n, vj) in num.iter_mut().zip(&v[j]) {
                *n += w * vj;
            }
        }
        num.iter().map(|n| n / den).collect()
    }

    #[test]
    fn flat_kernel_averages_columns() {
        let m = line(&[0.0, 0.3, 1.1, 2.0]);
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let u = Tensor2::from_fn(4, 2, |i, j| (i * 3 + j) as f64);
        let out = pos_att(&u, &d, &HeadWeights::positional(0.0, Tensor2::identity(2))).unwrap();
        for i in 0..4 {
            assert!((out.get(i, 0) - 4.5).abs() < 1e-14);
            assert!((out.get(i, 1) - 5.5).abs() < 1e-14);
        }
    }

    #[test]
    fn single_point_is_a_projection() {
        let m = line(&[0.7]);
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let u = Tensor2::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let w = Tensor2::from_rows(&[vec![1.0, 0.5, 2.0], vec![3.0, -1.0, 0.0]]).unwrap();
        let out = pos_att(&u, &d, &HeadWeights::positional(3.0, w.clone())).unwrap();
        assert_eq!(out, u.matmul(&w).unwrap());
    }

    #[test]
    fn three_collinear_points_match_direct_sum() {
        let xs = [0.0, 1.0, 2.0];
        let m = line(&xs);
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let u = Tensor2::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let out = pos_att(&u, &d, &HeadWeights::positional(1.0, Tensor2::identity(1))).unwrap();
        let src: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let vals: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![3.0]];
        for i in 0..3 {
            let want = brute_row(&[xs[i]], &src, 1.0, &vals, |_| true);
            assert!((out.get(i, 0) - want[0]).abs() < 1e-14);
        }
        // Middle row is symmetric, so it is exactly the middle value.
        assert!((out.get(1, 0) - 2.0).abs() < 1e-15);
        // Closed form for row 0: (1 + 2/e + 3/e^4) / (1 + 1/e + 1/e^4).
        let e = std::f64::consts::E;
        let row0 = (1.0 + 2.0 / e + 3.0 / e.powi(4)) / (1.0 + 1.0 / e + 1.0 / e.powi(4));
        assert!((out.get(0, 0) - row0).abs() < 1e-14);
    }

    #[test]
    fn cross_attention_cases() {
        let src = line(&[0.0, 1.0, 2.0, 3.0]);
        let d_self = pairwise_sq_dist(&src, &src).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random(&mut rng, 4, 3);
        let head = HeadWeights::positional(0.7, random(&mut rng, 3, 2));
        assert_eq!(
            cro_pos_att(&u, &d_self, &head).unwrap(),
            pos_att(&u, &d_self, &head).unwrap()
        );

        // A target equidistant from all sources: two sources at ±1 around it.
        let src2 = line(&[-1.0, 1.0]);
        let tgt = line(&[0.0]);
        let d = pairwise_sq_dist(&src2, &tgt).unwrap();
        let u2 = random(&mut rng, 2, 3);
        let out = cro_pos_att(&u2, &d, &head).unwrap();
        let uv = u2.matmul(&head.w_v).unwrap();
        for j in 0..2 {
            assert!((out.get(0, j) - 0.5 * (uv.get(0, j) + uv.get(1, j))).abs() < 1e-15);
        }

        let xs: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let xq: Vec<Vec<f64>> = (0..2).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let s = Mesh::point_cloud(Tensor2::from_rows(&xs).unwrap()).unwrap();
        let q = Mesh::point_cloud(Tensor2::from_rows(&xq).unwrap()).unwrap();
        let d = pairwise_sq_dist(&s, &q).unwrap();
        let out = cro_pos_att(&u, &d, &head).unwrap();
        let uv = u.matmul(&head.w_v).unwrap();
        let vrows: Vec<Vec<f64>> = (0..4).map(|i| uv.row(i).to_vec()).collect();
        for (i, x) in xq.iter().enumerate() {
            let want = brute_row(x, &xs, 0.7, &vrows, |_| true);
            for (j, w) in want.iter().enumerate() {
                assert!((out.get(i, j) - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn local_attention_cases() {
        let xs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let m = line(&xs);
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random(&mut rng, 5, 2);
        let head = HeadWeights::positional(2.5, random(&mut rng, 2, 2));

        let full = quantile_radii(&d, 1.0).unwrap();
        let a = loc_pos_att(&u, &full, &d, &head).unwrap();
        assert!(a.max_abs_diff(&pos_att(&u, &d, &head).unwrap()) <= 1e-12);

        let tiny = quantile_radii(&d, 1e-9).unwrap();
        let id = HeadWeights::positional(2.5, Tensor2::identity(2));
        assert_eq!(loc_pos_att(&u, &tiny, &d, &id).unwrap(), u);

        let half = quantile_radii(&d, 0.5).unwrap();
        let out = loc_pos_att(&u, &half, &d, &head).unwrap();
        let uv = u.matmul(&head.w_v).unwrap();
        let vrows: Vec<Vec<f64>> = (0..5).map(|i| uv.row(i).to_vec()).collect();
        let src: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        for i in 0..5 {
            // Independent median of the row: 5 values, position 2 of the sorted list.
            let mut row: Vec<f64> = xs.iter().map(|&x| (x - xs[i]) * (x - xs[i])).collect();
            row.sort_by(f64::total_cmp);
            let r2 = row[2];
            let want = brute_row(&[xs[i]], &src, 2.5, &vrows, |j| (xs[j] - xs[i]).powi(2) <= r2);
            for (j, w) in want.iter().enumerate() {
                assert!((out.get(i, j) - w).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn self_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let one = random(&mut rng, 1, 2);
        let head = HeadWeights {
            lambda: 0.0,
            w_v: random(&mut rng, 2, 2),
            w_q: Some(random(&mut rng, 2, 2)),
            w_k: Some(random(&mut rng, 2, 2)),
        };
        assert_eq!(self_att(&one, &head).unwrap(), one.matmul(&head.w_v).unwrap());

        let u = random(&mut rng, 3, 2);
        let zero_q = HeadWeights {
            w_q: Some(Tensor2::zeros(2, 2)),
            ..head.clone()
        };
        let out = self_att(&u, &zero_q).unwrap();
        let uv = u.matmul(&head.w_v).unwrap();
        for j in 0..2 {
            let mean = (uv.get(0, j) + uv.get(1, j) + uv.get(2, j)) / 3.0;
            for i in 0..3 {
                assert!((out.get(i, j) - mean).abs() < 1e-15);
            }
        }

        // Direct evaluation with explicit loops.
        let out = self_att(&u, &head).unwrap();
        let (wq, wk) = (head.w_q.as_ref().unwrap(), head.w_k.as_ref().unwrap());
        let proj = |w: &Tensor2, i: usize, c: usize| (0..2).map(|k| u.get(i, k) * w.get(k, c)).sum::<f64>();
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..2).map(|c| proj(wq, i, c) * proj(wk, j, c)).sum::<f64>() / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| s[j].exp() / z * proj(&head.w_v, j, c)).sum();
                assert!((out.get(i, c) - want).abs() < 1e-14);
            }
        }
        assert!(self_att(&u, &HeadWeights::positional(1.0, Tensor2::identity(2))).is_err());
    }

    #[test]
    fn combined_attention_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = Mesh::point_cloud(random(&mut rng, 4, 2)).unwrap();
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let u = random(&mut rng, 4, 3);
        let head = HeadWeights {
            lambda: 1.3,
            w_v: random(&mut rng, 3, 2),
            w_q: Some(random(&mut rng, 3, 2)),
            w_k: Some(random(&mut rng, 3, 2)),
        };
        let zeroed = HeadWeights {
            w_q: Some(Tensor2::zeros(3, 2)),
            w_k: Some(Tensor2::zeros(3, 2)),
            ..head.clone()
        };
        let a = self_pos_att(&u, &d, &zeroed).unwrap();
        assert!(a.max_abs_diff(&pos_att(&u, &d, &head).unwrap()) <= 1e-12);
        let flat = HeadWeights {
            lambda: 0.0,
            ..head.clone()
        };
        let b = self_pos_att(&u, &d, &flat).unwrap();
        assert!(b.max_abs_diff(&self_att(&u, &head).unwrap()) <= 1e-12);

        let out = self_pos_att(&u, &d, &head).unwrap();
        let q = u.matmul(head.w_q.as_ref().unwrap()).unwrap();
        let k = u.matmul(head.w_k.as_ref().unwrap()).unwrap();
        let v = u.matmul(&head.w_v).unwrap();
        for i in 0..4 {
            let s: Vec<f64> = (0..4)
                .map(|j| {
                    let qk: f64 = (0..2).map(|c| q.get(i, c) * k.get(j, c)).sum();
                    let d2: f64 = (0..2).map(|c| (m.point(i)[c] - m.point(j)[c]).powi(2)).sum();
                    -1.3 * d2 + qk / 2f64.sqrt()
                })
                .collect();
            let z: f64 = s.iter().map(|x| x.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..4).map(|j| s[j].exp() / z * v.get(j, c)).sum();
                assert!((out.get(i, c) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn multi_head_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Mesh::point_cloud(random(&mut rng, 5, 2)).unwrap();
        let d = pairwise_sq_dist(&m, &m).unwrap();
        let u = random(&mut rng, 5, 4);
        let h = HeadWeights::positional(0.9, random(&mut rng, 4, 2));
        let single = pos_att(&u, &d, &h).unwrap();
        assert_eq!(multi_head(std::slice::from_ref(&h), |w| pos_att(&u, &d, w)).unwrap(), single);

        let twin = multi_head(&[h.clone(), h.clone()], |w| pos_att(&u, &d, w)).unwrap();
        for i in 0..5 {
            assert_eq!(&twin.row(i)[..2], single.row(i));
            assert_eq!(&twin.row(i)[2..], single.row(i));
        }

        let h2 = HeadWeights::positional(4.0, random(&mut rng, 4, 2));
        let both = multi_head(&[h.clone(), h2.clone()], |w| pos_att(&u, &d, w)).unwrap();
        let second = pos_att(&u, &d, &h2).unwrap();
        for i in 0..5 {
            assert_eq!(&both.row(i)[2..], second.row(i));
        }
    }

    #[test]
    fn radius_values() {
        assert_eq!(interpretable_radius(4.0), 0.5);
        assert_eq!(interpretable_radius(1.0), 1.0);
        assert!(interpretable_radius(0.0).is_infinite());
        // Trained encoder head 1 in tan mode: 1/sqrt(tan(raw)) = 0.0483.
        let lam = 0.0483f64.powi(-2);
        let raw = LambdaMode::Tan.raw_for(lam);
        let r = interpretable_radius(LambdaMode::Tan.effective(raw));
        assert!((r - 0.0483).abs() < 1e-12);
    }

    #[test]
    fn lambda_modes() {
        assert_eq!(LambdaMode::Square.effective(-2.0), 4.0);
        assert!(LambdaMode::Tan.effective(10.0).is_finite());
        assert_eq!(LambdaMode::Tan.effective(-1.0), 0.0);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [LambdaMode::Square, LambdaMode::Tan] {
            for i in 0..50 {
                let l = LambdaParam::new(&mut store, &format!("l{i}"), mode, &mut rng);
                let e = l.effective(&store);
                assert!((0.1..=1.0).contains(&e), "{e}");
            }
        }
    }

    fn layer_with(
        kind: AttentionKind,
        mode: LambdaMode,
        d_in: usize,
        d_out: usize,
        heads: usize,
        seed: u64,
    ) -> (AttentionLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = AttentionLayer::new(&mut store, "att", kind, d_in, d_out, heads, mode, &mut rng).unwrap();
        (layer, store)
    }

    #[test]
    fn taped_layer_matches_reference_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = Mesh::point_cloud(random(&mut rng, 6, 2)).unwrap();
        let q = Mesh::point_cloud(random(&mut rng, 4, 2)).unwrap();
        let u = random(&mut rng, 6, 4);
        let self_geom = AttentionGeometry::local(pairwise_sq_dist(&m, &m).unwrap(), 0.5).unwrap();
        let cross_geom = AttentionGeometry::local(pairwise_sq_dist(&m, &q).unwrap(), 0.5).unwrap();
        for kind in [
            AttentionKind::PosAtt,
            AttentionKind::CroPosAtt,
            AttentionKind::LocPosAtt,
            AttentionKind::SelfAtt,
            AttentionKind::SelfPosAtt,
        ] {
            let (layer, store) = layer_with(kind, LambdaMode::Tan, 4, 6, 2, 9);
            let heads: Vec<HeadWeights> = layer.heads.iter().map(|h| h.weights(&store)).collect();
            let (geom, want) = match kind {
                AttentionKind::PosAtt => (&self_geom, multi_head(&heads, |h| pos_att(&u, &self_geom.dist, h))),
                AttentionKind::CroPosAtt => (
                    &cross_geom,
                    multi_head(&heads, |h| cro_pos_att(&u, &cross_geom.dist, h)),
                ),
                AttentionKind::LocPosAtt => (
                    &cross_geom,
                    multi_head(&heads, |h| {
                        loc_pos_att(&u, cross_geom.field.as_ref().unwrap(), &cross_geom.dist, h)
                    }),
                ),
                AttentionKind::SelfAtt => (&self_geom, multi_head(&heads, |h| self_att(&u, h))),
                AttentionKind::SelfPosAtt => (&self_geom, multi_head(&heads, |h| self_pos_att(&u, &self_geom.dist, h))),
            };
            let got = layer.eval(&store, &u, geom).unwrap();
            assert!(got.max_abs_diff(&want.unwrap()) < 1e-13, "{kind:?}");
        }
    }

    #[test]
    fn batched_forward_equals_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let m = Mesh::point_cloud(random(&mut rng, 5, 2)).unwrap();
        let q = Mesh::point_cloud(random(&mut rng, 3, 2)).unwrap();
        let geom = AttentionGeometry::local(pairwise_sq_dist(&m, &q).unwrap(), 0.6).unwrap();
        let self_geom = AttentionGeometry::global(pairwise_sq_dist(&m, &m).unwrap());
        let u = random(&mut rng, 15, 2);
        for (kind, g) in [
            (AttentionKind::LocPosAtt, &geom),
            (AttentionKind::SelfAtt, &geom),
            (AttentionKind::SelfPosAtt, &self_geom),
        ] {
            let (layer, store) = layer_with(kind, LambdaMode::Square, 2, 4, 2, 1);
            let mut tape = Tape::new();
            let uv = tape.constant(u.clone());
            let out = layer.forward(&mut tape, &store, uv, g, 3).unwrap();
            let nq = g.query_len();
            for b in 0..3 {
                let one = layer.eval(&store, &u.slice_rows(b * 5, 5), g).unwrap();
                let block = tape.value(out).slice_rows(b * nq, nq);
                assert!(block.max_abs_diff(&one) < 1e-14, "{kind:?}");
            }
        }
    }

    #[test]
    fn layer_rejects_bad_head_split_and_counts_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionLayer::new(
            &mut store,
            "x",
            AttentionKind::PosAtt,
            4,
            5,
            2,
            LambdaMode::Tan,
            &mut rng
        )
        .is_err());
        for kind in [AttentionKind::PosAtt, AttentionKind::SelfAtt, AttentionKind::SelfPosAtt] {
            let mut store = ParamStore::new();
            let layer = AttentionLayer::new(&mut store, "x", kind, 6, 4, 2, LambdaMode::Tan, &mut rng).unwrap();
            assert_eq!(layer.num_scalars(), store.num_scalars());
        }
    }
}
