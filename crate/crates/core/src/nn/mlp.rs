//! Dense sigmoid network over the flattened input window.

use ndarray::{concatenate, Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use super::{check_batch, mse_grad, sigmoid, Dense, Network};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub steps: usize,
    pub input: usize,
    pub extra: usize,
    pub layers: Vec<Dense>,
    pub head: Dense,
}

impl DenseNet {
    pub fn zeros(steps: usize, input: usize, hidden: &[usize], extra: usize, output: usize) -> Result<Self> {
        Self::build(steps, input, hidden, extra, output, &mut |i, o| Dense::zeros(i, o))
    }

    pub fn init<R: Rng>(
        steps: usize,
        input: usize,
        hidden: &[usize],
        extra: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(steps, input, hidden, extra, output, &mut |i, o| Dense::init(i, o, rng))
    }

    fn build(
        steps: usize,
        input: usize,
        hidden: &[usize],
        extra: usize,
        output: usize,
        dense: &mut dyn FnMut(usize, usize) -> Dense,
    ) -> Result<Self> {
        if steps == 0 || input == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::param("dense network needs steps, input and non-empty layers"));
        }
        let mut width = steps * input;
        let mut layers = Vec::with_capacity(hidden.len());
        for &h in hidden {
            layers.push(dense(width, h));
            width = h;
        }
        let head = dense(width + extra, output);
        Ok(Self {
            steps,
            input,
            extra,
            layers,
            head,
        })
    }

    fn run(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<(Vec<Array2<f64>>, Array2<f64>, Array2<f64>)> {
        let b = check_batch(&x, &extra, Some(self.steps), self.input, self.extra)?;
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b, self.steps * self.input))
            .map_err(|e| Error::shape(e.to_string()))?;
        let mut acts = vec![flat];
        for layer in &self.layers {
            let a = layer.forward(acts.last().expect("non-empty").view()).mapv(sigmoid);
            acts.push(a);
        }
        let head_in = concatenate![Axis(1), *acts.last().expect("non-empty"), extra];
        let y = self.head.forward(head_in.view());
        Ok((acts, head_in, y))
    }
}

impl Network for DenseNet {
    fn predict(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.run(x, extra)?.2)
    }

    fn loss_grad(&self, x: ArrayView3<f64>, extra: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Self)> {
        let (acts, head_in, y) = self.run(x, extra)?;
        let (loss, dy) = mse_grad(&y, target)?;
        let mut grad = self.zeros_like();
        let d_in = self.head.backward(head_in.view(), &dy, &mut grad.head);
        let top = self.layers.last().expect("non-empty").output();
        let mut da = d_in.slice(ndarray::s![.., ..top]).to_owned();
        for l in (0..self.layers.len()).rev() {
            let a = &acts[l + 1];
            ndarray::Zip::from(&mut da).and(a).for_each(|d, &a| *d *= a * (1.0 - a));
            da = self.layers[l].backward(acts[l].view(), &da, &mut grad.layers[l]);
        }
        Ok((loss, grad))
    }

    fn zeros_like(&self) -> Self {
        Self {
            steps: self.steps,
            input: self.input,
            extra: self.extra,
            layers: self.layers.iter().map(|d| Dense::zeros(d.input(), d.output())).collect(),
            head: Dense::zeros(self.head.input(), self.head.output()),
        }
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.layers.iter().flat_map(|d| d.params()).collect();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.layers.iter_mut().flat_map(|d| d.params_mut()).collect();
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn zero_weights_output_bias() {
        let mut net = DenseNet::zeros(3, 4, &[8, 8, 8], 2, 2).unwrap();
        net.head.b = array![1.25, -0.5];
        let y = net
            .predict(Array3::from_elem((4, 3, 4), 0.7).view(), Array2::ones((4, 2)).view())
            .unwrap();
        assert!(y.rows().into_iter().all(|r| r == net.head.b));
    }

    #[test]
    fn wrong_steps_rejected() {
        let net = DenseNet::zeros(3, 4, &[8], 0, 2).unwrap();
        assert!(net.predict(Array3::zeros((1, 2, 4)).view(), Array2::zeros((1, 0)).view()).is_err());
    }
}
