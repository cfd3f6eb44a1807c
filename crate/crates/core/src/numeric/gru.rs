//! GRU cell:
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;

use super::matrix::{sigmoid, Matrix};
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{dim_err, Result};

/// Handles to the nine tensors of one GRU cell inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruCellParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruCellParams {
    /// Registers a cell with scaled-uniform weights and zero biases.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        let w_z = store.add_glorot(format!("{prefix}.w_z"), d_h, d_in, rng);
        let w_r = store.add_glorot(format!("{prefix}.w_r"), d_h, d_in, rng);
        let w_h = store.add_glorot(format!("{prefix}.w_h"), d_h, d_in, rng);
        let u_z = store.add_glorot(format!("{prefix}.u_z"), d_h, d_h, rng);
        let u_r = store.add_glorot(format!("{prefix}.u_r"), d_h, d_h, rng);
        let u_h = store.add_glorot(format!("{prefix}.u_h"), d_h, d_h, rng);
        let b_z = store.add_zeros(format!("{prefix}.b_z"), d_h, 1);
        let b_r = store.add_zeros(format!("{prefix}.b_r"), d_h, 1);
        let b_h = store.add_zeros(format!("{prefix}.b_h"), d_h, 1);
        Self { d_in, d_h, w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h }
    }

    /// Looks the cell up by name prefix, validating every shape.
    pub fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |s: &str| {
            store
                .find(&format!("{prefix}.{s}"))
                .ok_or_else(|| crate::Error::Format(format!("missing parameter {prefix}.{s}")))
        };
        let w_z = get("w_z")?;
        let (d_h, d_in) = store.value(w_z).shape();
        let cell = Self {
            d_in,
            d_h,
            w_z,
            w_r: get("w_r")?,
            w_h: get("w_h")?,
            u_z: get("u_z")?,
            u_r: get("u_r")?,
            u_h: get("u_h")?,
            b_z: get("b_z")?,
            b_r: get("b_r")?,
            b_h: get("b_h")?,
        };
        cell.validate(store)?;
        Ok(cell)
    }

    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        let (di, dh) = (self.d_in, self.d_h);
        for (id, shape) in [
            (self.w_z, (dh, di)),
            (self.w_r, (dh, di)),
            (self.w_h, (dh, di)),
            (self.u_z, (dh, dh)),
            (self.u_r, (dh, dh)),
            (self.u_h, (dh, dh)),
            (self.b_z, (dh, 1)),
            (self.b_r, (dh, 1)),
            (self.b_h, (dh, 1)),
        ] {
            if store.value(id).shape() != shape {
                return dim_err(format!(
                    "{} has shape {:?}, expected {shape:?}",
                    store.name(id),
                    store.value(id).shape()
                ));
            }
        }
        Ok(())
    }

    /// Forward step on plain vectors.
    pub fn step(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in || h.len() != self.d_h {
            return dim_err(format!(
                "gru step with x of length {} and h of length {}; cell is {}→{}",
                x.len(),
                h.len(),
                self.d_in,
                self.d_h
            ));
        }
        let gate = |w: ParamId, u: ParamId, b: ParamId, hv: &[f64]| {
            let mut a = store.value(b).data().to_vec();
            store.value(w).matvec_acc(x, &mut a);
            store.value(u).matvec_acc(hv, &mut a);
            a
        };
        let z: Vec<f64> = gate(self.w_z, self.u_z, self.b_z, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = gate(self.w_r, self.u_r, self.b_r, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        let cand = gate(self.w_h, self.u_h, self.b_h, &rh);
        Ok(h.iter()
            .zip(&z)
            .zip(&cand)
            .map(|((hi, zi), ci)| (1.0 - zi) * hi + zi * ci.tanh())
            .collect())
    }

    /// Forward step recorded on a tape.
    pub fn step_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let za = tape.linear(store, &[(self.w_z, x), (self.u_z, h)], Some(self.b_z))?;
        let z = tape.sigmoid(za);
        let ra = tape.linear(store, &[(self.w_r, x), (self.u_r, h)], Some(self.b_r))?;
        let r = tape.sigmoid(ra);
        let rh = tape.mul(r, h)?;
        let ca = tape.linear(store, &[(self.w_h, x), (self.u_h, rh)], Some(self.b_h))?;
        let cand = tape.tanh(ca);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, h)?;
        let b = tape.mul(z, cand)?;
        tape.add(a, b)
    }

    /// Runs the cell over `inputs` from `h_0 = 0`, returning the last state.
    pub fn run(&self, store: &ParamStore, inputs: impl IntoIterator<Item = Vec<f64>>) -> Result<Vec<f64>> {
        let mut h = vec![0.0; self.d_h];
        for x in inputs {
            h = self.step(store, &x, &h)?;
        }
        Ok(h)
    }

    /// Owned copy of the nine tensors, in `[w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h]` order.
    pub fn tensors(&self, store: &ParamStore) -> [Matrix; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
        .map(|id| store.value(id).clone())
    }
}

/// Free-function form of [`GruCellParams::step`].
pub fn gru_step(store: &ParamStore, params: &GruCellParams, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    params.step(store, x, h)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(d_in: usize, d_h: usize) -> (ParamStore, GruCellParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCellParams::register(&mut store, "g", d_in, d_h, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        (store, cell)
    }

    #[test]
    fn zero_weights_halve_state() {
        let (store, cell) = zero_cell(2, 1);
        let h = gru_step(&store, &cell, &[0.3, -0.7], &[1.0]).unwrap();
        assert_eq!(h, vec![0.5]);
    }

    #[test]
    fn zero_state_is_fixed_point_of_zero_cell() {
        let (store, cell) = zero_cell(3, 2);
        let h = gru_step(&store, &cell, &[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn matches_scalar_recomputation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = GruCellParams::register(&mut store, "g", 3, 2, &mut rng);
        for id in [cell.b_z, cell.b_r, cell.b_h] {
            let v: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            store.set_value(id, Matrix::column(v)).unwrap();
        }
        let x = [0.4, -1.2, 0.9];
        let h = [0.25, -0.6];
        let got = gru_step(&store, &cell, &x, &h).unwrap();

        let w = |id: ParamId, i: usize, j: usize| store.value(id).get(i, j);
        let b = |id: ParamId, i: usize| store.value(id).get(i, 0);
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = [0.0; 2];
        let mut r = [0.0; 2];
        for i in 0..2 {
            let mut az = b(cell.b_z, i);
            let mut ar = b(cell.b_r, i);
            for j in 0..3 {
                az += w(cell.w_z, i, j) * x[j];
                ar += w(cell.w_r, i, j) * x[j];
            }
            for j in 0..2 {
                az += w(cell.u_z, i, j) * h[j];
                ar += w(cell.u_r, i, j) * h[j];
            }
            z[i] = sig(az);
            r[i] = sig(ar);
        }
        for i in 0..2 {
            let mut ac = b(cell.b_h, i);
            for j in 0..3 {
                ac += w(cell.w_h, i, j) * x[j];
            }
            for j in 0..2 {
                ac += w(cell.u_h, i, j) * r[j] * h[j];
            }
            let expected = (1.0 - z[i]) * h[i] + z[i] * ac.tanh();
            assert!((got[i] - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn tape_and_plain_paths_agree() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = GruCellParams::register(&mut store, "g", 4, 3, &mut rng);
        let x = vec![0.1, -0.2, 0.3, 0.9];
        let h = vec![0.5, -0.5, 0.2];
        let plain = cell.step(&store, &x, &h).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let hv = tape.input(h);
        let out = cell.step_tape(&mut tape, &store, xv, hv).unwrap();
        assert_eq!(tape.value(out), plain.as_slice());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let (store, cell) = zero_cell(2, 2);
        assert!(matches!(
            gru_step(&store, &cell, &[1.0], &[0.0, 0.0]),
            Err(crate::Error::Dimension(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn bounded_state_stays_bounded(
            seed in 0u64..1000,
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            h in proptest::collection::vec(-0.999f64..0.999, 4),
            big in proptest::collection::vec(-1e6f64..1e6, 3),
        ) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cell = GruCellParams::register(&mut store, "g", 3, 4, &mut rng);
            let out = cell.step(&store, &x, &h).unwrap();
            for v in out {
                proptest::prop_assert!(v.is_finite() && v > -1.0 && v < 1.0);
            }
            // Saturated gates may round to ±1 but never leave the closed interval.
            let out = cell.step(&store, &big, &h).unwrap();
            for v in out {
                proptest::prop_assert!(v.is_finite() && (-1.0..=1.0).contains(&v));
            }
        }
    }
}
