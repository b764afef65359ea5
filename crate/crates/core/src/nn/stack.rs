//! Stacked recurrent network with the raw input re-fed to every layer.
//!
//! Layer 1 reads the raw window `x`; every later layer reads its
//! predecessor's output sequence concatenated with `x` at each step. The last
//! hidden state of the top layer, optionally joined with extra per-window
//! inputs, goes through a linear head.

use ndarray::{concatenate, s, Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::cell::{Cell, CellKind, StepCache};
use super::{check_batch, mse_grad, Dense, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct StackedNet {
    pub kind: CellKind,
    pub input: usize,
    pub extra: usize,
    pub layers: Vec<Cell>,
    pub head: Dense,
}

struct Trace {
    /// Per-layer step caches.
    caches: Vec<Vec<StepCache>>,
    head_in: Array2<f64>,
    y: Array2<f64>,
}

impl StackedNet {
    /// Input width of layer `l` given the raw width and hidden sizes.
    pub fn layer_input(input: usize, hidden: &[usize], l: usize) -> usize {
        if l == 0 {
            input
        } else {
            hidden[l - 1] + input
        }
    }

    pub fn zeros(kind: CellKind, input: usize, hidden: &[usize], extra: usize, output: usize) -> Result<Self> {
        Self::build(kind, input, hidden, extra, output, |i, h| Cell::zeros(kind, i, h), Dense::zeros)
    }

    pub fn init<R: Rng>(
        kind: CellKind,
        input: usize,
        hidden: &[usize],
        extra: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len());
        for l in 0..hidden.len() {
            layers.push(Cell::init(kind, Self::layer_input(input, hidden, l), hidden[l], rng));
        }
        let head = Dense::init(hidden.last().copied().unwrap_or(0) + extra, output, rng);
        Self::validate(Self {
            kind,
            input,
            extra,
            layers,
            head,
        })
    }

    fn build(
        kind: CellKind,
        input: usize,
        hidden: &[usize],
        extra: usize,
        output: usize,
        cell: impl Fn(usize, usize) -> Cell,
        dense: impl Fn(usize, usize) -> Dense,
    ) -> Result<Self> {
        let layers = (0..hidden.len())
            .map(|l| cell(Self::layer_input(input, hidden, l), hidden[l]))
            .collect();
        let head = dense(hidden.last().copied().unwrap_or(0) + extra, output);
        Self::validate(Self {
            kind,
            input,
            extra,
            layers,
            head,
        })
    }

    fn validate(net: Self) -> Result<Self> {
        if net.layers.is_empty() || net.layers.iter().any(|c| c.hidden() == 0) || net.input == 0 {
            return Err(Error::param("stacked network needs at least one non-empty layer and input"));
        }
        net.check_shapes()?;
        Ok(net)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let hidden = self.hidden_sizes();
        for (l, cell) in self.layers.iter().enumerate() {
            cell.check_shapes()?;
            if cell.kind != self.kind || cell.input() != Self::layer_input(self.input, &hidden, l) {
                return Err(Error::shape(format!("layer {l} input width {} is inconsistent", cell.input())));
            }
        }
        if self.head.input() != hidden[hidden.len() - 1] + self.extra || self.head.b.len() != self.head.output() {
            return Err(Error::shape("head width inconsistent with top layer"));
        }
        Ok(())
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Cell::hidden).collect()
    }

    pub fn output(&self) -> usize {
        self.head.output()
    }

    fn run(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<Trace> {
        check_batch(&x, &extra, None, self.input, self.extra)?;
        let raw: Vec<Array2<f64>> = x.axis_iter(Axis(1)).map(|v| v.to_owned()).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut seq = raw.clone();
        for (l, cell) in self.layers.iter().enumerate() {
            if l > 0 {
                seq = seq
                    .iter()
                    .zip(&raw)
                    .map(|(h, x)| concatenate![Axis(1), *h, *x])
                    .collect();
            }
            let (hs, cache) = cell.forward_seq(&seq)?;
            caches.push(cache);
            seq = hs;
        }
        let last = seq.pop().expect("non-empty sequence");
        let head_in = concatenate![Axis(1), last, extra];
        let y = self.head.forward(head_in.view());
        Ok(Trace { caches, head_in, y })
    }

    /// Top-layer final hidden state (the extracted features) and prediction.
    pub fn forward(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let tr = self.run(x, extra)?;
        let h = self.layers.last().expect("validated").hidden();
        Ok((tr.head_in.slice(s![.., ..h]).to_owned(), tr.y))
    }
}

impl Network for StackedNet {
    fn predict(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.run(x, extra)?.y)
    }

    fn loss_grad(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Self)> {
        let tr = self.run(x, extra)?;
        let (loss, dy) = mse_grad(&tr.y, target)?;
        let mut grad = self.zeros_like();
        let d_head_in = self.head.backward(tr.head_in.view(), &dy, &mut grad.head);

        let steps = x.dim().1;
        let batch = x.dim().0;
        let top = self.layers.len() - 1;
        let h_top = self.layers[top].hidden();
        let mut dhs: Vec<Array2<f64>> = (0..steps).map(|_| Array2::zeros((batch, h_top))).collect();
        dhs[steps - 1].assign(&d_head_in.slice(s![.., ..h_top]));
        for l in (0..self.layers.len()).rev() {
            let dxs = self.layers[l].backward_seq(&tr.caches[l], &dhs, &mut grad.layers[l]);
            if l > 0 {
                let h_below = self.layers[l - 1].hidden();
                dhs = dxs.iter().map(|d| d.slice(s![.., ..h_below]).to_owned()).collect();
            }
        }
        Ok((loss, grad))
    }

    fn zeros_like(&self) -> Self {
        Self {
            kind: self.kind,
            input: self.input,
            extra: self.extra,
            layers: self
                .layers
                .iter()
                .map(|c| Cell::zeros(c.kind, c.input(), c.hidden()))
                .collect(),
            head: Dense::zeros(self.head.input(), self.head.output()),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.layers.iter().flat_map(|c| c.params()).collect();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.layers.iter_mut().flat_map(|c| c.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::sigmoid;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weight_gru_outputs_head_bias() {
        let mut net = StackedNet::zeros(CellKind::Gru, 5, &[4, 4, 4], 2, 3).unwrap();
        net.head.b = array![0.25, -1.5, 3.0];
        let x = Array3::from_shape_fn((2, 3, 5), |(i, j, k)| (i + j * k) as f64 * 0.3 - 1.0);
        let (f, y) = net.forward(x.view(), Array2::ones((2, 2)).view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
        for row in y.rows() {
            assert_eq!(row, net.head.b);
        }
    }

    #[test]
    fn shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = StackedNet::init(CellKind::Gru, 120, &[64, 64, 64], 0, 100, &mut rng).unwrap();
        let (f, y) = net
            .forward(Array3::zeros((1, 3, 120)).view(), Array2::zeros((1, 0)).view())
            .unwrap();
        assert_eq!((f.ncols(), y.ncols()), (64, 100));
        let widths: Vec<_> = net.layers.iter().map(Cell::input).collect();
        assert_eq!(widths, [120, 184, 184]);
        let wider = StackedNet::init(CellKind::Gru, 127, &[64, 64, 64], 0, 100, &mut rng).unwrap();
        let widths: Vec<_> = wider.layers.iter().map(Cell::input).collect();
        assert_eq!(widths, [127, 191, 191]);
    }

    #[test]
    fn scalar_rnn_stack_trace() {
        // One unit per layer, every weight 1 and bias 0, head w = [2], b = 0.5.
        let mut net = StackedNet::zeros(CellKind::SimpleRnn, 1, &[1, 1, 1], 0, 1).unwrap();
        for p in net.params_mut() {
            p.fill(1.0);
        }
        for c in &mut net.layers {
            c.b.fill(0.0);
        }
        net.head.w.fill(2.0);
        net.head.b.fill(0.5);
        let xs = [0.5, -1.0];
        let layer = |inputs: &[f64], with_prev: Option<&[f64]>| {
            let mut h = 0.0;
            let mut out = vec![];
            for (t, &x) in inputs.iter().enumerate() {
                let below = with_prev.map_or(0.0, |p| p[t]);
                h = sigmoid(below + x + h);
                out.push(h);
            }
            out
        };
        let l1 = layer(&xs, None);
        let l2 = layer(&xs, Some(&l1));
        let l3 = layer(&xs, Some(&l2));
        let x = Array3::from_shape_vec((1, 2, 1), xs.to_vec()).unwrap();
        let y = net.predict(x.view(), Array2::zeros((1, 0)).view()).unwrap();
        assert!((y[[0, 0]] - (2.0 * l3[1] + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn head_bias_gradient_is_twice_mean_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = StackedNet::init(CellKind::Lstm, 3, &[4, 4], 1, 2, &mut rng).unwrap();
        let x = Array3::from_shape_fn((5, 2, 3), |(i, j, k)| ((i * 7 + j * 3 + k) % 5) as f64 / 5.0);
        let e = Array2::from_shape_fn((5, 1), |(i, _)| i as f64 / 4.0);
        let target = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64 * 0.1);
        let y = net.predict(x.view(), e.view()).unwrap();
        let (_, g) = net.loss_grad(x.view(), e.view(), target.view()).unwrap();
        let resid = (&y - &target).sum_axis(Axis(0)) * (2.0 / 10.0);
        for (a, b) in g.head.b.iter().zip(resid.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = StackedNet::init(CellKind::Gru, 3, &[4, 4, 4], 0, 2, &mut rng).unwrap();
        let x = Array3::from_elem((3, 2, 3), 0.3);
        let e = Array2::zeros((3, 0));
        let y = net.predict(x.view(), e.view()).unwrap();
        let (loss, g) = net.loss_grad(x.view(), e.view(), y.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.params().iter().all(|p| p.iter().all(|&v| v == 0.0)));
    }
}
