use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::init::glorot_uniform;
use super::{c_order, check_finite, logistic, NnError, Parameters, Result};

/// One LSTM layer. Gate rows are stacked `[input, forget, candidate, output]`,
/// each `hidden` rows tall.
///
/// ```text
/// i = σ(W_i x + U_i h + b_i)    f = σ(W_f x + U_f h + b_f)
/// g = tanh(W_g x + U_g h + b_g) o = σ(W_o x + U_o h + b_o)
/// c' = f ⊙ c + i ⊙ g            h' = o ⊙ tanh(c')
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// 4H x D
    pub w: Array2<f64>,
    /// 4H x H
    pub u: Array2<f64>,
    /// 4H
    pub b: Array1<f64>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    x: Array3<f64>,
    h0: Array2<f64>,
    c0: Array2<f64>,
    /// B x L x 4H post-activation gates
    gates: Array3<f64>,
    /// B x L x H cell states
    c: Array3<f64>,
    /// B x L x H tanh of cell states
    tanh_c: Array3<f64>,
    /// B x L x H hidden states
    h: Array3<f64>,
}

impl LstmCache {
    pub fn hidden(&self) -> &Array3<f64> {
        &self.h
    }
}

impl LstmLayer {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmLayer {
            w: Array2::zeros((4 * hidden, input_dim)),
            u: Array2::zeros((4 * hidden, hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let w = glorot_uniform(4 * hidden, input_dim, rng);
        let u = glorot_uniform(4 * hidden, hidden, rng);
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmLayer { w, u, b }
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden())
    }

    fn check(&self) -> Result<()> {
        let h = self.hidden();
        if self.u.nrows() != 4 * h || self.w.nrows() != 4 * h || self.b.len() != 4 * h {
            return Err(NnError::ShapeMismatch(format!(
                "lstm params w {:?} u {:?} b {}",
                self.w.dim(),
                self.u.dim(),
                self.b.len()
            )));
        }
        Ok(())
    }

    /// Runs the layer over `x` (B x L x D) from optional initial states (default zero).
    /// Returns the full hidden sequence (B x L x H) inside the cache.
    pub fn forward(
        &self,
        x: &Array3<f64>,
        h0: Option<&Array2<f64>>,
        c0: Option<&Array2<f64>>,
    ) -> Result<LstmCache> {
        self.check()?;
        let (bsz, len, d) = x.dim();
        let hd = self.hidden();
        if d != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input feature dim {d}, layer expects {}",
                self.input_dim()
            )));
        }
        let h0 = state_or_zeros(h0, bsz, hd, "h0")?;
        let c0 = state_or_zeros(c0, bsz, hd, "c0")?;

        let x_std = x.as_standard_layout();
        let flat = x_std
            .view()
            .into_shape((bsz * len, d))
            .expect("standard layout");
        let xw = flat.dot(&self.w.t());
        let xw = c_order(xw).into_shape((bsz, len, 4 * hd)).expect("row count preserved");

        let mut gates = Array3::zeros((bsz, len, 4 * hd));
        let mut c_all = Array3::zeros((bsz, len, hd));
        let mut tc_all = Array3::zeros((bsz, len, hd));
        let mut h_all = Array3::zeros((bsz, len, hd));
        let mut h_prev = h0.clone();
        let mut c_prev = c0.clone();

        for t in 0..len {
            let mut z = h_prev.dot(&self.u.t());
            z += &xw.slice(s![.., t, ..]);
            z += &self.b;
            for mut row in z.rows_mut() {
                row.slice_mut(s![..2 * hd]).mapv_inplace(logistic);
                row.slice_mut(s![2 * hd..3 * hd]).mapv_inplace(f64::tanh);
                row.slice_mut(s![3 * hd..]).mapv_inplace(logistic);
            }
            let mut c_t = Array2::<f64>::zeros((bsz, hd));
            let mut tc_t = Array2::<f64>::zeros((bsz, hd));
            let mut h_t = Array2::<f64>::zeros((bsz, hd));
            for b in 0..bsz {
                for j in 0..hd {
                    let (i, f) = (z[[b, j]], z[[b, hd + j]]);
                    let (g, o) = (z[[b, 2 * hd + j]], z[[b, 3 * hd + j]]);
                    let c = f * c_prev[[b, j]] + i * g;
                    let tc = c.tanh();
                    c_t[[b, j]] = c;
                    tc_t[[b, j]] = tc;
                    h_t[[b, j]] = o * tc;
                }
            }
            gates.slice_mut(s![.., t, ..]).assign(&z);
            c_all.slice_mut(s![.., t, ..]).assign(&c_t);
            tc_all.slice_mut(s![.., t, ..]).assign(&tc_t);
            h_all.slice_mut(s![.., t, ..]).assign(&h_t);
            h_prev = h_t;
            c_prev = c_t;
        }
        check_finite("lstm forward", h_all.iter());

        Ok(LstmCache {
            x: x_std.into_owned(),
            h0,
            c0,
            gates,
            c: c_all,
            tanh_c: tc_all,
            h: h_all,
        })
    }

    /// Backpropagation through time.
    ///
    /// `grad_h` is dLoss/dh for every time step (B x L x H). Returns parameter
    /// gradients and, when `want_input_grad` is set, dLoss/dx (B x L x D).
    pub fn backward(
        &self,
        cache: &LstmCache,
        grad_h: &Array3<f64>,
        want_input_grad: bool,
    ) -> Result<(LstmLayer, Option<Array3<f64>>)> {
        let (bsz, len, d) = cache.x.dim();
        let hd = self.hidden();
        if grad_h.dim() != (bsz, len, hd) {
            return Err(NnError::ShapeMismatch(format!(
                "grad_h {:?}, expected {:?}",
                grad_h.dim(),
                (bsz, len, hd)
            )));
        }
        let mut grads = self.zeros_like();
        let mut dz_all = Array3::<f64>::zeros((bsz, len, 4 * hd));
        let mut dh_next = Array2::<f64>::zeros((bsz, hd));
        let mut dc_next = Array2::<f64>::zeros((bsz, hd));

        for t in (0..len).rev() {
            let (h_prev, c_prev): (ArrayView2<f64>, ArrayView2<f64>) = if t == 0 {
                (cache.h0.view(), cache.c0.view())
            } else {
                (cache.h.slice(s![.., t - 1, ..]), cache.c.slice(s![.., t - 1, ..]))
            };
            let gates = cache.gates.slice(s![.., t, ..]);
            let tc = cache.tanh_c.slice(s![.., t, ..]);
            let mut dh = grad_h.slice(s![.., t, ..]).to_owned();
            dh += &dh_next;

            let mut dz = dz_all.slice_mut(s![.., t, ..]);
            let mut dc_prev = Array2::<f64>::zeros((bsz, hd));
            for b in 0..bsz {
                for j in 0..hd {
                    let i = gates[[b, j]];
                    let f = gates[[b, hd + j]];
                    let g = gates[[b, 2 * hd + j]];
                    let o = gates[[b, 3 * hd + j]];
                    let tcv = tc[[b, j]];
                    let dhv = dh[[b, j]];
                    let dc = dc_next[[b, j]] + dhv * o * (1.0 - tcv * tcv);
                    dz[[b, j]] = dc * g * i * (1.0 - i);
                    dz[[b, hd + j]] = dc * c_prev[[b, j]] * f * (1.0 - f);
                    dz[[b, 2 * hd + j]] = dc * i * (1.0 - g * g);
                    dz[[b, 3 * hd + j]] = dhv * tcv * o * (1.0 - o);
                    dc_prev[[b, j]] = dc * f;
                }
            }
            grads.u += &dz.t().dot(&h_prev);
            dh_next = dz.dot(&self.u);
            dc_next = dc_prev;
        }

        let dz_flat = dz_all
            .view()
            .into_shape((bsz * len, 4 * hd))
            .expect("standard layout");
        let x_flat = cache
            .x
            .view()
            .into_shape((bsz * len, d))
            .expect("standard layout");
        grads.w = c_order(dz_flat.t().dot(&x_flat));
        grads.b = dz_flat.sum_axis(Axis(0));
        check_finite("lstm backward", grads.slices().into_iter().flatten());

        let dx = want_input_grad.then(|| {
            c_order(dz_flat.dot(&self.w))
                .into_shape((bsz, len, d))
                .expect("row count preserved")
        });
        Ok((grads, dx))
    }
}

fn state_or_zeros(s: Option<&Array2<f64>>, b: usize, h: usize, name: &str) -> Result<Array2<f64>> {
    match s {
        None => Ok(Array2::zeros((b, h))),
        Some(a) if a.dim() == (b, h) => Ok(a.clone()),
        Some(a) => Err(NnError::ShapeMismatch(format!(
            "{name} {:?}, expected {:?}",
            a.dim(),
            (b, h)
        ))),
    }
}

impl Parameters for LstmLayer {
    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w.as_slice().expect("contiguous"),
            self.u.as_slice().expect("contiguous"),
            self.b.as_slice().expect("contiguous"),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().expect("contiguous"),
            self.u.as_slice_mut().expect("contiguous"),
            self.b.as_slice_mut().expect("contiguous"),
        ]
    }
}
