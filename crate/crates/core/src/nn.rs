//! Parameter storage, initialization, optimizer and the small layer
//! building blocks shared by every model in the crate.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Independently updated parameter groups. Names double as checkpoint file stems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Encoder,
    Selector,
    Generator,
    Gqd,
    VaeQ,
    VaeR,
    RdQ,
    RdR,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::Selector,
        Family::Encoder,
        Family::Generator,
        Family::Gqd,
        Family::VaeQ,
        Family::VaeR,
        Family::RdQ,
        Family::RdR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Encoder => "encoder",
            Family::Selector => "selector",
            Family::Generator => "generator",
            Family::Gqd => "gqd",
            Family::VaeQ => "vae_q",
            Family::VaeR => "vae_r",
            Family::RdQ => "rd_q",
            Family::RdR => "rd_r",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named tensors belonging to one [`Family`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    family: Family,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    family: Family,
    params: Vec<NamedArray>,
}

impl ParamSet {
    pub fn new(family: Family) -> Self {
        ParamSet {
            family,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamFile {
            family: self.family,
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| NamedArray {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Overwrites the values of this set from a file written by [`ParamSet::save`].
    /// Names and shapes must match exactly.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let file: ParamFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.family != self.family {
            return Err(Error::Checkpoint(format!(
                "{}: expected family {}, found {}",
                path.display(),
                self.family,
                file.family
            )));
        }
        if file.params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} arrays, found {}",
                path.display(),
                self.tensors.len(),
                file.params.len()
            )));
        }
        for (i, arr) in file.params.into_iter().enumerate() {
            let t = &self.tensors[i];
            if arr.name != self.names[i] || arr.rows != t.rows() || arr.cols != t.cols() {
                return Err(Error::Checkpoint(format!(
                    "{}: array {} ({}x{}) does not match {} ({}x{})",
                    path.display(),
                    arr.name,
                    arr.rows,
                    arr.cols,
                    self.names[i],
                    t.rows(),
                    t.cols()
                )));
            }
            if arr.data.len() != arr.rows * arr.cols {
                return Err(Error::Checkpoint(format!("{}: truncated array {}", path.display(), arr.name)));
            }
            self.tensors[i] = Tensor::from_vec(arr.rows, arr.cols, arr.data);
        }
        Ok(())
    }
}

/// Uniform Xavier/Glorot initialization for an `fan_in x fan_out` weight.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

/// Adam with bias correction and per-family global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(set: &ParamSet, lr: f64, clip_norm: Option<f64>) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            t: 0,
            m: set.tensors().iter().map(zeros).collect(),
            v: set.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.tensors().len(), "gradient count mismatch");
        let mut scale = 1.0;
        if let Some(max_norm) = self.clip_norm {
            let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, g) in grads.iter().enumerate() {
            let p = params.get_mut(k).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Stack of affine layers with `tanh` between them and a linear final layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    layers: Vec<(usize, usize)>,
    widths: Vec<usize>,
}

impl FeedForward {
    /// `widths[0]` is the input width; each further entry adds one affine layer.
    pub fn new(set: &mut ParamSet, prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "need an input width and at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wi = set.add(format!("{prefix}.{i}.weight"), xavier_uniform(w[0], w[1], rng));
                let bi = set.add(format!("{prefix}.{i}.bias"), Tensor::zeros(1, w[1]));
                (wi, bi)
            })
            .collect();
        FeedForward {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_indices(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph, set: &ParamSet, x: Var) -> Var {
        let mut h = x;
        for (i, &(wi, bi)) in self.layers.iter().enumerate() {
            let w = g.param(set, wi);
            let b = g.param(set, bi);
            let z = g.matmul(h, w);
            h = g.add_row(z, b);
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        h
    }
}

/// Gated recurrent unit with fused gate weights (update, reset, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    wx: usize,
    wh: usize,
    bx: usize,
    bh: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(set: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = set.add(format!("{prefix}.wx"), xavier_uniform(input, 3 * hidden, rng));
        let wh = set.add(format!("{prefix}.wh"), xavier_uniform(hidden, 3 * hidden, rng));
        let bx = set.add(format!("{prefix}.bx"), Tensor::zeros(1, 3 * hidden));
        let bh = set.add(format!("{prefix}.bh"), Tensor::zeros(1, 3 * hidden));
        GruCell { wx, wh, bx, bh, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Runs the cell over the rows of `inputs` (`m x input`), in reverse when
    /// `reverse` is set. Returned states are in token order either way.
    pub fn run(&self, g: &mut Graph, set: &ParamSet, inputs: Var, reverse: bool) -> Vec<Var> {
        let m = g.value(inputs).rows();
        let h_dim = self.hidden;
        let wx = g.param(set, self.wx);
        let wh = g.param(set, self.wh);
        let bx = g.param(set, self.bx);
        let bh = g.param(set, self.bh);
        let xw = g.matmul(inputs, wx);
        let xw = g.add_row(xw, bx);
        let mut h = g.input(Tensor::zeros(1, h_dim));
        let mut states = vec![h; m];
        let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
        for t in order {
            let xt = g.row(xw, t);
            let hw = g.matmul(h, wh);
            let hw = g.add_row(hw, bh);
            let xz = g.slice_cols(xt, 0, h_dim);
            let xr = g.slice_cols(xt, h_dim, h_dim);
            let xn = g.slice_cols(xt, 2 * h_dim, h_dim);
            let hz = g.slice_cols(hw, 0, h_dim);
            let hr = g.slice_cols(hw, h_dim, h_dim);
            let hn = g.slice_cols(hw, 2 * h_dim, h_dim);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            // h' = n + z * (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            states[t] = h;
        }
        states
    }
}

/// LSTM cell with fused gate weights (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    wx: usize,
    wh: usize,
    b: usize,
    hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmCell {
    pub fn new(set: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = set.add(format!("{prefix}.wx"), xavier_uniform(input, 4 * hidden, rng));
        let wh = set.add(format!("{prefix}.wh"), xavier_uniform(hidden, 4 * hidden, rng));
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = set.add(format!("{prefix}.b"), bias);
        LstmCell { wx, wh, b, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        let h = g.input(Tensor::zeros(1, self.hidden));
        let c = g.input(Tensor::zeros(1, self.hidden));
        LstmState { h, c }
    }

    /// Input projection for a whole sequence at once (`m x 4h`).
    pub fn project_inputs(&self, g: &mut Graph, set: &ParamSet, inputs: Var) -> Var {
        let wx = g.param(set, self.wx);
        let b = g.param(set, self.b);
        let xw = g.matmul(inputs, wx);
        g.add_row(xw, b)
    }

    /// One step given a pre-projected input row (`1 x 4h`, bias included).
    pub fn step(&self, g: &mut Graph, set: &ParamSet, x_proj: Var, state: LstmState) -> LstmState {
        let hd = self.hidden;
        let wh = g.param(set, self.wh);
        let hw = g.matmul(state.h, wh);
        let gates = g.add(x_proj, hw);
        let i = g.slice_cols(gates, 0, hd);
        let f = g.slice_cols(gates, hd, hd);
        let c_new = g.slice_cols(gates, 2 * hd, hd);
        let o = g.slice_cols(gates, 3 * hd, hd);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let c_new = g.tanh(c_new);
        let o = g.sigmoid(o);
        let fc = g.mul(f, state.c);
        let ic = g.mul(i, c_new);
        let c = g.add(fc, ic);
        let tc = g.tanh(c);
        let h = g.mul(o, tc);
        LstmState { h, c }
    }
}
