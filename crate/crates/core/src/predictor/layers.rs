//! Small building blocks shared by both predictor variants.

use crate::numerics::{Axis, NumericsError, ParamStore, SplitRng, Tape, Tensor, Var};

/// Dense layer `x W + b` with parameters `<name>.w` and `<name>.b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SplitRng,
    ) -> Result<Self, NumericsError> {
        let w = store.insert_glorot(&format!("{name}.w"), fan_in, fan_out, rng)?;
        let b = if bias { Some(store.insert_zeros(&format!("{name}.b"), 1, fan_out)?) } else { None };
        Ok(Self { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// GRU cell with update gate `z`, reset gate `r` and candidate `n`:
/// `h' = n + z * (h - n)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GruCell {
    wx: usize,
    wh_zr: usize,
    wh_n: usize,
    b: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut SplitRng,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            wx: store.insert_glorot(&format!("{name}.wx"), input, 3 * hidden, rng)?,
            wh_zr: store.insert_glorot(&format!("{name}.wh_zr"), hidden, 2 * hidden, rng)?,
            wh_n: store.insert_glorot(&format!("{name}.wh_n"), hidden, hidden, rng)?,
            b: store.insert_zeros(&format!("{name}.b"), 1, 3 * hidden)?,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var, NumericsError> {
        let c = self.hidden;
        let wx = tape.param(store, self.wx);
        let b = tape.param(store, self.b);
        let gx = tape.matmul(x, wx)?;
        let gx = tape.add(gx, b)?;
        let wh_zr = tape.param(store, self.wh_zr);
        let gh = tape.matmul(h, wh_zr)?;

        let gx_z = tape.slice(gx, Axis::Cols, 0, c)?;
        let gh_z = tape.slice(gh, Axis::Cols, 0, c)?;
        let z = tape.add(gx_z, gh_z)?;
        let z = tape.sigmoid(z)?;

        let gx_r = tape.slice(gx, Axis::Cols, c, 2 * c)?;
        let gh_r = tape.slice(gh, Axis::Cols, c, 2 * c)?;
        let r = tape.add(gx_r, gh_r)?;
        let r = tape.sigmoid(r)?;

        let rh = tape.mul(r, h)?;
        let wh_n = tape.param(store, self.wh_n);
        let gh_n = tape.matmul(rh, wh_n)?;
        let gx_n = tape.slice(gx, Axis::Cols, 2 * c, 3 * c)?;
        let n = tape.add(gx_n, gh_n)?;
        let n = tape.tanh(n)?;

        let diff = tape.sub(h, n)?;
        let gated = tape.mul(z, diff)?;
        tape.add(n, gated)
    }
}

/// Learned `steps x width` table indexed by diffusion step.
///
/// Initialised with sinusoids of the normalised step `k / steps` so that
/// neighbouring steps start out close; training then moves rows freely.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepEmbedding {
    table: usize,
    steps: usize,
}

impl StepEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, steps: usize, width: usize) -> Result<Self, NumericsError> {
        let half = width.div_ceil(2);
        let mut data = vec![0.0; steps * width];
        for k in 0..steps {
            let t = k as f64 / steps as f64;
            for i in 0..width {
                let freq = 30f64.powf((i / 2) as f64 / half.max(2).saturating_sub(1) as f64);
                let phase = t * freq * std::f64::consts::PI;
                data[k * width + i] = if i % 2 == 0 { phase.sin() } else { phase.cos() };
            }
        }
        let table = store.insert(name, Tensor::matrix(steps, width, data)?)?;
        Ok(Self { table, steps })
    }

    /// One row per entry of `steps`, via a one-hot matmul so the table
    /// receives gradients through the ordinary matmul rule.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, steps: &[usize]) -> Result<Var, NumericsError> {
        let mut onehot = Tensor::zeros(&[steps.len(), self.steps]);
        for (row, &k) in steps.iter().enumerate() {
            onehot.data_mut()[row * self.steps + k] = 1.0;
        }
        let onehot = tape.constant(onehot);
        let table = tape.param(store, self.table);
        tape.matmul(onehot, table)
    }
}
