//! Simple-RNN, LSTM and GRU cells with batched forward and backward passes.
//!
//! Gate weights are stacked row-wise: `w` is `(gates * hidden) x input`, `u`
//! is `(gates * hidden) x hidden` and `b` has `gates * hidden` entries. The
//! gate order is `[f, i, g, o]` for the LSTM and `[z, r, n]` for the GRU.

use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{glorot, sigmoid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellKind {
    SimpleRnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::SimpleRnn, CellKind::Lstm, CellKind::Gru];

    pub fn gates(self) -> usize {
        match self {
            CellKind::SimpleRnn => 1,
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CellKind::SimpleRnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "simple_rnn" | "simplernn" => Ok(CellKind::SimpleRnn),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Parse(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub kind: CellKind,
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

/// Recurrent state carried between steps; `c` is only used by the LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub h: Array2<f64>,
    pub c: Option<Array2<f64>>,
}

/// Values recorded by a forward step and consumed by its backward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Option<Array2<f64>>,
    /// Activated gates, `batch x (gates * hidden)`.
    act: Array2<f64>,
    tanh_c: Option<Array2<f64>>,
}

impl StepCache {
    /// Activated gates, `batch x (gates * hidden)`, in the cell's gate order.
    pub fn activations(&self) -> &Array2<f64> {
        &self.act
    }
}

impl Cell {
    pub fn zeros(kind: CellKind, input: usize, hidden: usize) -> Self {
        let g = kind.gates() * hidden;
        Self {
            kind,
            w: Array2::zeros((g, input)),
            u: Array2::zeros((g, hidden)),
            b: Array1::zeros(g),
        }
    }

    /// Glorot-uniform weights, zero biases except an LSTM forget bias of 1.
    pub fn init<R: Rng>(kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut cell = Self::zeros(kind, input, hidden);
        for k in 0..kind.gates() {
            let rows = s![k * hidden..(k + 1) * hidden, ..];
            cell.w.slice_mut(rows).assign(&glorot(hidden, input, rng));
            cell.u.slice_mut(rows).assign(&glorot(hidden, hidden, rng));
        }
        if kind == CellKind::Lstm {
            cell.b.slice_mut(s![..hidden]).fill(1.0);
        }
        cell
    }

    pub fn input(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.u.ncols()
    }

    pub fn zero_state(&self, batch: usize) -> State {
        let h = Array2::zeros((batch, self.hidden()));
        let c = (self.kind == CellKind::Lstm).then(|| h.clone());
        State { h, c }
    }

    pub fn check_shapes(&self) -> Result<()> {
        let g = self.kind.gates() * self.hidden();
        if self.w.nrows() != g || self.u.nrows() != g || self.b.len() != g {
            return Err(Error::shape(format!(
                "{} cell with hidden {} needs {g} gate rows",
                self.kind,
                self.hidden()
            )));
        }
        Ok(())
    }

    /// One step on a batch: `x` is `batch x input`.
    pub fn step(&self, x: ArrayView2<f64>, state: &State) -> Result<(State, StepCache)> {
        if x.ncols() != self.input() || state.h.ncols() != self.hidden() || x.nrows() != state.h.nrows() {
            return Err(Error::shape(format!(
                "cell expects input {} / hidden {}, got x {:?} h {:?}",
                self.input(),
                self.hidden(),
                x.dim(),
                state.h.dim()
            )));
        }
        let hd = self.hidden();
        let h_prev = &state.h;
        let mut act = x.dot(&self.w.t()) + &self.b;
        let (h, c, tanh_c) = match self.kind {
            CellKind::SimpleRnn => {
                general_mat_mul(1.0, h_prev, &self.u.t(), 1.0, &mut act);
                act.mapv_inplace(sigmoid);
                (act.clone(), None, None)
            }
            CellKind::Lstm => {
                general_mat_mul(1.0, h_prev, &self.u.t(), 1.0, &mut act);
                act.slice_mut(s![.., ..2 * hd]).mapv_inplace(sigmoid);
                act.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(f64::tanh);
                act.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
                let c_prev = state.c.as_ref().ok_or_else(|| Error::shape("LSTM state without memory"))?;
                let mut c = Array2::zeros(h_prev.raw_dim());
                Zip::from(&mut c)
                    .and(act.slice(s![.., ..hd]))
                    .and(act.slice(s![.., hd..2 * hd]))
                    .and(act.slice(s![.., 2 * hd..3 * hd]))
                    .and(c_prev)
                    .for_each(|c, &f, &i, &g, &cp| *c = f * cp + i * g);
                let tc = c.mapv(f64::tanh);
                let h = &act.slice(s![.., 3 * hd..]) * &tc;
                (h, Some(c), Some(tc))
            }
            CellKind::Gru => {
                {
                    let mut zr = act.slice_mut(s![.., ..2 * hd]);
                    general_mat_mul(1.0, h_prev, &self.u.slice(s![..2 * hd, ..]).t(), 1.0, &mut zr);
                    zr.mapv_inplace(sigmoid);
                }
                let rh = &act.slice(s![.., hd..2 * hd]) * h_prev;
                let mut n = act.slice_mut(s![.., 2 * hd..]);
                general_mat_mul(1.0, &rh, &self.u.slice(s![2 * hd.., ..]).t(), 1.0, &mut n);
                n.mapv_inplace(f64::tanh);
                let mut h = Array2::zeros(h_prev.raw_dim());
                Zip::from(&mut h)
                    .and(act.slice(s![.., ..hd]))
                    .and(act.slice(s![.., 2 * hd..]))
                    .and(h_prev)
                    .for_each(|h, &z, &n, &hp| *h = (1.0 - z) * hp + z * n);
                (h, None, None)
            }
        };
        let cache = StepCache {
            x: x.to_owned(),
            h_prev: h_prev.clone(),
            c_prev: state.c.clone(),
            act,
            tanh_c,
        };
        Ok((State { h, c }, cache))
    }

    /// Backward through one step. `dh` and `dc` are the loss gradients with
    /// respect to this step's outputs; gradients of the weights are added to
    /// `grad`. Returns the gradients for `x`, `h_prev` and `c_prev`.
    pub fn backward_step(
        &self,
        cache: &StepCache,
        dh: &Array2<f64>,
        dc: Option<&Array2<f64>>,
        grad: &mut Cell,
    ) -> (Array2<f64>, Array2<f64>, Option<Array2<f64>>) {
        let hd = self.hidden();
        let act = &cache.act;
        let h_prev = &cache.h_prev;
        let (da, mut dh_prev, dc_prev) = match self.kind {
            CellKind::SimpleRnn => {
                let mut da = dh.clone();
                Zip::from(&mut da).and(act).for_each(|d, &h| *d *= h * (1.0 - h));
                (da, None, None)
            }
            CellKind::Lstm => {
                let tc = cache.tanh_c.as_ref().expect("LSTM cache");
                let c_prev = cache.c_prev.as_ref().expect("LSTM cache");
                let mut dc_tot = match dc {
                    Some(d) => d.clone(),
                    None => Array2::zeros(dh.raw_dim()),
                };
                let o = act.slice(s![.., 3 * hd..]);
                Zip::from(&mut dc_tot)
                    .and(dh)
                    .and(&o)
                    .and(tc)
                    .for_each(|d, &dh, &o, &tc| *d += dh * o * (1.0 - tc * tc));
                let mut da = Array2::zeros(act.raw_dim());
                let (f, i, g) = (
                    act.slice(s![.., ..hd]),
                    act.slice(s![.., hd..2 * hd]),
                    act.slice(s![.., 2 * hd..3 * hd]),
                );
                Zip::from(da.slice_mut(s![.., ..hd]))
                    .and(&dc_tot)
                    .and(c_prev)
                    .and(&f)
                    .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                Zip::from(da.slice_mut(s![.., hd..2 * hd]))
                    .and(&dc_tot)
                    .and(&g)
                    .and(&i)
                    .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
                Zip::from(da.slice_mut(s![.., 2 * hd..3 * hd]))
                    .and(&dc_tot)
                    .and(&i)
                    .and(&g)
                    .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                Zip::from(da.slice_mut(s![.., 3 * hd..]))
                    .and(dh)
                    .and(tc)
                    .and(&o)
                    .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));
                let dc_prev = &dc_tot * &f;
                (da, None, Some(dc_prev))
            }
            CellKind::Gru => {
                let (z, r, n) = (
                    act.slice(s![.., ..hd]),
                    act.slice(s![.., hd..2 * hd]),
                    act.slice(s![.., 2 * hd..]),
                );
                let mut da = Array2::zeros(act.raw_dim());
                Zip::from(da.slice_mut(s![.., 2 * hd..]))
                    .and(dh)
                    .and(&z)
                    .and(&n)
                    .for_each(|d, &dh, &z, &n| *d = dh * z * (1.0 - n * n));
                let mut dhp = dh * &z.mapv(|z| 1.0 - z);
                let drh = da.slice(s![.., 2 * hd..]).dot(&self.u.slice(s![2 * hd.., ..]));
                Zip::from(&mut dhp).and(&drh).and(&r).for_each(|d, &drh, &r| *d += drh * r);
                Zip::from(da.slice_mut(s![.., ..hd]))
                    .and(dh)
                    .and(&n)
                    .and(h_prev)
                    .and(&z)
                    .for_each(|d, &dh, &n, &hp, &z| *d = dh * (n - hp) * z * (1.0 - z));
                Zip::from(da.slice_mut(s![.., hd..2 * hd]))
                    .and(&drh)
                    .and(h_prev)
                    .and(&r)
                    .for_each(|d, &drh, &hp, &r| *d = drh * hp * r * (1.0 - r));
                (da, Some(dhp), None)
            }
        };

        general_mat_mul(1.0, &da.t(), &cache.x, 1.0, &mut grad.w);
        grad.b += &da.sum_axis(Axis(0));
        let dx = da.dot(&self.w);
        match self.kind {
            CellKind::Gru => {
                let dzr = da.slice(s![.., ..2 * hd]);
                let mut gu = grad.u.slice_mut(s![..2 * hd, ..]);
                general_mat_mul(1.0, &dzr.t(), h_prev, 1.0, &mut gu);
                let rh = &act.slice(s![.., hd..2 * hd]) * h_prev;
                let mut gu = grad.u.slice_mut(s![2 * hd.., ..]);
                general_mat_mul(1.0, &da.slice(s![.., 2 * hd..]).t(), &rh, 1.0, &mut gu);
                let dhp = dh_prev.as_mut().expect("set above");
                general_mat_mul(1.0, &dzr, &self.u.slice(s![..2 * hd, ..]), 1.0, dhp);
            }
            _ => {
                general_mat_mul(1.0, &da.t(), h_prev, 1.0, &mut grad.u);
                dh_prev = Some(da.dot(&self.u));
            }
        }
        (dx, dh_prev.expect("set above"), dc_prev)
    }

    /// Runs the cell over a sequence from the zero state.
    pub fn forward_seq(&self, xs: &[Array2<f64>]) -> Result<(Vec<Array2<f64>>, Vec<StepCache>)> {
        let batch = xs.first().map_or(0, |x| x.nrows());
        let mut state = self.zero_state(batch);
        let mut hs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let (next, cache) = self.step(x.view(), &state)?;
            hs.push(next.h.clone());
            caches.push(cache);
            state = next;
        }
        Ok((hs, caches))
    }

    /// Backpropagation through time. `dhs[t]` is the external gradient on the
    /// output at step `t`; returns the input gradients per step.
    pub fn backward_seq(&self, caches: &[StepCache], dhs: &[Array2<f64>], grad: &mut Cell) -> Vec<Array2<f64>> {
        let mut dxs = vec![Array2::zeros((0, 0)); caches.len()];
        let mut dh_next: Option<Array2<f64>> = None;
        let mut dc_next: Option<Array2<f64>> = None;
        for t in (0..caches.len()).rev() {
            let dh = match dh_next.take() {
                Some(d) => d + &dhs[t],
                None => dhs[t].clone(),
            };
            let (dx, dhp, dcp) = self.backward_step(&caches[t], &dh, dc_next.as_ref(), grad);
            dxs[t] = dx;
            dh_next = Some(dhp);
            dc_next = dcp;
        }
        dxs
    }

    pub fn params(&self) -> [&[f64]; 3] {
        [
            self.w.as_slice().expect("standard layout"),
            self.u.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w.as_slice_mut().expect("standard layout"),
            self.u.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}
