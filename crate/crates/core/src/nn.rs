//! Row-wise dense layers.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor2;

/// Uniform fan-in initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Tensor2 {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// `m W + b` with the bias broadcast over rows.
pub fn linear(tape: &mut Tape, m: Var, w: Var, b: Var) -> Result<Var> {
    if tape.value(m).cols() != tape.value(w).rows() {
        return Err(shape_err(
            "linear",
            format!(
                "input has {} features, weight expects {}",
                tape.value(m).cols(),
                tape.value(w).rows()
            ),
        ));
    }
    let mw = tape.matmul(m, w)?;
    tape.add_row(mw, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(rng, d_in, d_in, d_out));
        let bias = store.add(format!("{name}.bias"), fan_in_uniform(rng, d_in, 1, d_out));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        linear(tape, x, w, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// Two stacked linear layers, the first followed by GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let first = Linear::new(store, &format!("{name}.0"), d_in, hidden, rng);
        let second = Linear::new(store, &format!("{name}.1"), hidden, d_out, rng);
        Self { first, second }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.second.forward(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_bias_rows() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor2::from_fn(3, 2, |i, j| (i + j) as f64));
        let w = tape.constant(Tensor2::zeros(2, 4));
        let b = tape.constant(Tensor2::from_rows(&[vec![1.0, -2.0, 0.5, 3.0]]).unwrap());
        let out = linear(&mut tape, m, w, b).unwrap();
        for i in 0..3 {
            assert_eq!(tape.value(out).row(i), &[1.0, -2.0, 0.5, 3.0]);
        }
    }

    #[test]
    fn identity_weights_pass_through() {
        let x = Tensor2::from_fn(4, 3, |i, j| i as f64 - 0.5 * j as f64);
        let mut tape = Tape::new();
        let m = tape.constant(x.clone());
        let w = tape.constant(Tensor2::identity(3));
        let b = tape.constant(Tensor2::zeros(1, 3));
        let out = linear(&mut tape, m, w, b).unwrap();
        assert_eq!(tape.value(out), &x);
    }

    #[test]
    fn linear_matches_matmul_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = fan_in_uniform(&mut rng, 1, 5, 3);
        let w = fan_in_uniform(&mut rng, 1, 3, 2);
        let b = fan_in_uniform(&mut rng, 1, 1, 2);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let out = linear(&mut tape, xv, wv, bv).unwrap();
        let xw = x.matmul(&w).unwrap();
        let want = Tensor2::from_fn(5, 2, |i, j| xw.get(i, j) + b.get(0, j));
        assert!(tape.value(out).max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor2::zeros(2, 3));
        let w = tape.constant(Tensor2::zeros(2, 3));
        let b = tape.constant(Tensor2::zeros(1, 3));
        assert!(linear(&mut tape, m, w, b).is_err());
    }
}
