use ndarray::{s, Array2, Array3};

use crate::nn::{rng_from_seed, Dense, DenseCache, LstmCache, LstmLayer, NnError, Parameters};

use super::{ModelError, Result};

/// One LSTM stack per branch feeding a shared dense head.
///
/// Branch `k` only ever sees its own input; the head maps the concatenated
/// final hidden states (`n_branches * hidden`) to `outputs` values. The
/// per-stop baseline is the one-branch, one-output special case.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBranchLstm {
    pub branches: Vec<Vec<LstmLayer>>,
    pub head: Dense,
}

pub struct ForwardCache {
    branches: Vec<Vec<LstmCache>>,
    head: DenseCache,
}

impl MultiBranchLstm {
    /// Deterministic initialization: branches in order, layers bottom-up, then the head.
    pub fn new(
        n_branches: usize,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_branches == 0 || input_dim == 0 || hidden == 0 || layers == 0 || outputs == 0 {
            return Err(ModelError::InvalidHyperParams(format!(
                "branches={n_branches} input={input_dim} hidden={hidden} layers={layers} outputs={outputs}"
            )));
        }
        let mut rng = rng_from_seed(seed);
        let branches = (0..n_branches)
            .map(|_| {
                (0..layers)
                    .map(|l| LstmLayer::init(if l == 0 { input_dim } else { hidden }, hidden, &mut rng))
                    .collect()
            })
            .collect();
        let head = Dense::init(n_branches * hidden, outputs, &mut rng);
        Ok(MultiBranchLstm { branches, head })
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn hidden(&self) -> usize {
        self.branches[0][0].hidden()
    }

    pub fn n_layers(&self) -> usize {
        self.branches[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.branches[0][0].input_dim()
    }

    pub fn outputs(&self) -> usize {
        self.head.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        MultiBranchLstm {
            branches: self
                .branches
                .iter()
                .map(|b| b.iter().map(LstmLayer::zeros_like).collect())
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    fn check_inputs(&self, inputs: &[Array3<f64>]) -> Result<usize> {
        if inputs.len() != self.n_branches() {
            return Err(ModelError::Nn(NnError::ShapeMismatch(format!(
                "{} branch inputs for {} branches",
                inputs.len(),
                self.n_branches()
            ))));
        }
        let (bsz, len, _) = inputs[0].dim();
        if inputs.iter().any(|x| x.dim().0 != bsz || x.dim().1 != len) {
            return Err(ModelError::MisalignedBatches);
        }
        Ok(bsz)
    }

    /// Final top-layer hidden state of one branch (B x H).
    pub fn branch_state(&self, k: usize, x: &Array3<f64>) -> Result<Array2<f64>> {
        let mut input = x.clone();
        for layer in &self.branches[k] {
            input = layer.forward(&input, None, None)?.hidden().clone();
        }
        let last = input.dim().1 - 1;
        Ok(input.slice(s![.., last, ..]).to_owned())
    }

    pub fn forward_cached(&self, inputs: &[Array3<f64>]) -> Result<(Array2<f64>, ForwardCache)> {
        let bsz = self.check_inputs(inputs)?;
        let h = self.hidden();
        let mut concat = Array2::zeros((bsz, self.n_branches() * h));
        let mut caches = Vec::with_capacity(self.n_branches());
        for (k, (stack, x)) in self.branches.iter().zip(inputs).enumerate() {
            let mut layer_caches: Vec<LstmCache> = Vec::with_capacity(stack.len());
            for layer in stack {
                let cache = match layer_caches.last() {
                    None => layer.forward(x, None, None)?,
                    Some(prev) => layer.forward(prev.hidden(), None, None)?,
                };
                layer_caches.push(cache);
            }
            let top = layer_caches.last().expect("at least one layer").hidden();
            let last = top.dim().1 - 1;
            concat
                .slice_mut(s![.., k * h..(k + 1) * h])
                .assign(&top.slice(s![.., last, ..]));
            caches.push(layer_caches);
        }
        let (y, head) = self.head.forward(&concat)?;
        Ok((
            y,
            ForwardCache {
                branches: caches,
                head,
            },
        ))
    }

    /// B x outputs predictions in scaled units.
    pub fn forward(&self, inputs: &[Array3<f64>]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.0)
    }

    /// Gradients of a scalar loss given dLoss/dpredictions.
    pub fn backward(&self, cache: &ForwardCache, grad_y: &Array2<f64>) -> Result<MultiBranchLstm> {
        let (head_grad, d_concat) = self.head.backward(&cache.head, grad_y)?;
        let h = self.hidden();
        let mut branches = Vec::with_capacity(self.n_branches());
        for (k, (stack, caches)) in self.branches.iter().zip(&cache.branches).enumerate() {
            let (bsz, len, _) = caches[0].hidden().dim();
            let mut grad_h = Array3::zeros((bsz, len, h));
            grad_h
                .slice_mut(s![.., len - 1, ..])
                .assign(&d_concat.slice(s![.., k * h..(k + 1) * h]));
            let mut layer_grads = vec![None; stack.len()];
            for l in (0..stack.len()).rev() {
                let (g, dx) = stack[l].backward(&caches[l], &grad_h, l > 0)?;
                layer_grads[l] = Some(g);
                if let Some(dx) = dx {
                    grad_h = dx;
                }
            }
            branches.push(layer_grads.into_iter().map(|g| g.expect("filled above")).collect());
        }
        Ok(MultiBranchLstm {
            branches,
            head: head_grad,
        })
    }
}

impl Parameters for MultiBranchLstm {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.branches.iter().flatten().flat_map(|l| l.slices()).collect();
        out.extend(self.head.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .branches
            .iter_mut()
            .flatten()
            .flat_map(|l| l.slices_mut())
            .collect();
        out.extend(self.head.slices_mut());
        out
    }
}
