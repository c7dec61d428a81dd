//! Feed-forward encoder mapping a context to a Cholesky shape.
//!
//! Output `o` has `d(d+1)/2` entries filling the lower triangle row by row
//! (`(0,0), (1,0), (1,1), (2,0), ...`); diagonal positions pass through `exp`,
//! and the result is rescaled so that `trace(L L^T) = d`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_shape, CholeskyShape, ShapeGradient, DEFAULT_DIAG_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub widths: Vec<usize>,
    /// `weights[l]` is `widths[l+1] x widths[l]`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub trace_normalize: bool,
}

/// Gradient with the same layout as the encoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderJson {
    widths: Vec<usize>,
    trace_normalize: bool,
    /// Row-major per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Dimension `d` with `d(d+1)/2 = m`.
pub fn dim_for_outputs(m: usize) -> Option<usize> {
    let d = ((((8 * m + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (tri_len(d) == m).then_some(d)
}

struct Activations {
    /// Inputs to each layer (post-activation of the previous one).
    inputs: Vec<DVector<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DVector<f64>>,
}

impl MlpEncoder {
    /// He-uniform hidden layers and a zero output layer.
    pub fn new<R: Rng>(widths: &[usize], trace_normalize: bool, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|w| *w == 0) {
            return Err(Error::Config { key: "contextual.widths".into(), msg: "need at least two positive widths".into() });
        }
        if dim_for_outputs(*widths.last().expect("nonempty")).is_none() {
            return Err(Error::Config {
                key: "contextual.widths".into(),
                msg: "output width must be a triangular number d(d+1)/2".into(),
            });
        }
        let nl = widths.len() - 1;
        let mut weights = Vec::with_capacity(nl);
        let mut biases = Vec::with_capacity(nl);
        for l in 0..nl {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let w = if l + 1 == nl {
                DMatrix::zeros(fan_out, fan_in)
            } else {
                let a = (6.0 / fan_in as f64).sqrt();
                DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..a))
            };
            weights.push(w);
            biases.push(DVector::zeros(fan_out));
        }
        Ok(Self { widths: widths.to_vec(), weights, biases, trace_normalize })
    }

    pub fn out_dim(&self) -> usize {
        dim_for_outputs(*self.widths.last().expect("nonempty")).expect("validated at construction")
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Sets the output bias to the packed lower triangle of `l` (log on the
    /// diagonal), so zero final-layer weights reproduce `l`.
    pub fn set_output_bias_from(&mut self, l: &CholeskyShape) -> Result<()> {
        let d = self.out_dim();
        if l.dim() != d {
            return Err(Error::Dimension(format!("shape dim {} for encoder output dim {d}", l.dim())));
        }
        let b = self.biases.last_mut().expect("nonempty");
        let m = l.matrix();
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                b[k] = if i == j { m[(i, i)].ln() } else { m[(i, j)] };
                k += 1;
            }
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> (DVector<f64>, Activations) {
        assert_eq!(x.len(), self.widths[0], "feature length must match the input width");
        let nl = self.weights.len();
        let mut h = DVector::from_column_slice(x);
        let mut acts = Activations { inputs: Vec::with_capacity(nl), pre: Vec::with_capacity(nl) };
        for l in 0..nl {
            let z = &self.weights[l] * &h + &self.biases[l];
            acts.inputs.push(h);
            h = if l + 1 < nl { z.map(|v| v.max(0.0)) } else { z.clone() };
            acts.pre.push(z);
        }
        (h, acts)
    }

    fn unpack(&self, o: &DVector<f64>) -> DMatrix<f64> {
        let d = self.out_dim();
        let mut m = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                m[(i, j)] = if i == j { o[k].exp() } else { o[k] };
                k += 1;
            }
        }
        m
    }

    fn normalization(&self, m: &DMatrix<f64>) -> f64 {
        if self.trace_normalize {
            (self.out_dim() as f64).sqrt() / m.norm()
        } else {
            1.0
        }
    }

    pub fn forward(&self, x: &[f64]) -> CholeskyShape {
        let (o, _) = self.run(x);
        let m = self.unpack(&o);
        let c = self.normalization(&m);
        project_shape(&(m * c), DEFAULT_DIAG_FLOOR, false)
    }

    /// Gradient of `<G, L(x)>` with respect to all parameters.
    pub fn backward(&self, x: &[f64], upstream: &ShapeGradient) -> MlpGrad {
        let (o, acts) = self.run(x);
        let m = self.unpack(&o);
        let g = upstream.matrix();
        let d = self.out_dim();
        // dL/dM for L = c M with c = sqrt(d) / ||M||_F
        let dm = if self.trace_normalize {
            let n = m.norm();
            let s = (d as f64).sqrt();
            let gm = g.dot(&m);
            g * (s / n) - &m * (s * gm / (n * n * n))
        } else {
            g.clone()
        };
        let mut delta = DVector::zeros(o.len());
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                delta[k] = if i == j { dm[(i, i)] * m[(i, i)] } else { dm[(i, j)] };
                k += 1;
            }
        }
        let nl = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); nl];
        let mut gb = vec![DVector::zeros(0); nl];
        for l in (0..nl).rev() {
            if l + 1 < nl {
                for (dv, z) in delta.iter_mut().zip(acts.pre[l].iter()) {
                    if *z <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            gw[l] = &delta * acts.inputs[l].transpose();
            gb[l] = delta.clone();
            if l > 0 {
                delta = self.weights[l].tr_mul(&delta);
            }
        }
        MlpGrad { weights: gw, biases: gb }
    }

    pub fn to_json(&self) -> Result<String> {
        let j = EncoderJson {
            widths: self.widths.clone(),
            trace_normalize: self.trace_normalize,
            weights: self
                .weights
                .iter()
                .map(|w| (0..w.nrows()).flat_map(|i| (0..w.ncols()).map(move |k| w[(i, k)])).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: EncoderJson = serde_json::from_str(text)?;
        let nl = j.widths.len().saturating_sub(1);
        if nl == 0 || j.weights.len() != nl || j.biases.len() != nl || dim_for_outputs(j.widths[nl]).is_none() {
            return Err(Error::Dimension("encoder layer counts do not match widths".into()));
        }
        let mut weights = Vec::with_capacity(nl);
        let mut biases = Vec::with_capacity(nl);
        for l in 0..nl {
            let (r, c) = (j.widths[l + 1], j.widths[l]);
            if j.weights[l].len() != r * c || j.biases[l].len() != r {
                return Err(Error::Dimension(format!("layer {l} has the wrong parameter count")));
            }
            weights.push(DMatrix::from_row_slice(r, c, &j.weights[l]));
            biases.push(DVector::from_column_slice(&j.biases[l]));
        }
        Ok(Self { widths: j.widths, weights, biases, trace_normalize: j.trace_normalize })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl MlpGrad {
    pub fn zeros_like(enc: &MlpEncoder) -> Self {
        Self {
            weights: enc.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: enc.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrad, c: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b * c;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b * c;
        }
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.biases.iter().map(|b| b.norm_squared()).sum::<f64>();
        s.sqrt()
    }

    /// Rescales to `max_norm` when larger; returns the norm before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            let c = max_norm / n;
            self.weights.iter_mut().for_each(|w| *w *= c);
            self.biases.iter_mut().for_each(|b| *b *= c);
        }
        n
    }
}

/// Adam optimizer state over encoder parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: MlpGrad,
    v: MlpGrad,
}

impl Adam {
    pub fn new(enc: &MlpEncoder, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: MlpGrad::zeros_like(enc), v: MlpGrad::zeros_like(enc) }
    }

    pub fn step(&mut self, enc: &mut MlpEncoder, g: &MlpGrad) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let upd = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        };
        for l in 0..enc.weights.len() {
            upd(
                enc.weights[l].as_mut_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
                g.weights[l].as_slice(),
            );
            upd(
                enc.biases[l].as_mut_slice(),
                self.m.biases[l].as_mut_slice(),
                self.v.biases[l].as_mut_slice(),
                g.biases[l].as_slice(),
            );
        }
    }
}
