//! Kolmogorov-Arnold layers over a fixed grid of reflectional-switch bases.
//!
//! Each edge `i -> k` carries `sum_j w[k,i,j] * b_j(x_i) + v[k,i] * x_i`,
//! with `b_j(x) = 1 - tanh^2((x - g_j) / h)` on a uniform grid `g` over
//! `[-c, c]` and `h` equal to the grid spacing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{xavier, Network, OptimizerConfig};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KanParams {
    /// Hidden layer widths; empty gives a single layer.
    pub hidden: Vec<usize>,
    pub grid_size: usize,
    pub grid_range: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for KanParams {
    fn default() -> Self {
        Self {
            hidden: vec![8],
            grid_size: 8,
            grid_range: 3.0,
            learning_rate: 1e-3,
            batch_size: 128,
        }
    }
}

impl KanParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(LabError::Config("kan: hidden widths must be positive".into()));
        }
        if self.grid_size < 2 {
            return Err(LabError::Config("kan: grid_size must be at least 2".into()));
        }
        if !(self.grid_range > 0.0 && self.grid_range.is_finite()) {
            return Err(LabError::Config("kan: grid_range must be positive".into()));
        }
        self.optimizer().validate("kan")
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }
}

/// `1 - tanh^2((x - center) / width)`: equals 1 at the center and decays to
/// 0 in both tails.
pub fn switch_basis(x: f64, center: f64, width: f64) -> f64 {
    let t = ((x - center) / width).tanh();
    1.0 - t * t
}

/// Layer `l` stores `w` (`out x in x G`), then `v` (`out x in`), then `out`
/// biases; blocks are concatenated in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanNet {
    pub sizes: Vec<usize>,
    pub grid: Vec<f64>,
    pub width: f64,
    pub params: Vec<f64>,
}

impl KanNet {
    pub fn uniform_grid(size: usize, range: f64) -> Vec<f64> {
        let step = 2.0 * range / (size - 1) as f64;
        (0..size).map(|j| -range + j as f64 * step).collect()
    }

    fn layer_len(n_in: usize, n_out: usize, g: usize) -> usize {
        n_out * n_in * g + n_out * n_in + n_out
    }

    pub fn n_params(sizes: &[usize], grid_size: usize) -> usize {
        sizes.windows(2).map(|s| Self::layer_len(s[0], s[1], grid_size)).sum()
    }

    fn shape(grid_size: usize, range: f64) -> (Vec<f64>, f64) {
        let grid = Self::uniform_grid(grid_size, range);
        let width = 2.0 * range / (grid_size - 1) as f64;
        (grid, width)
    }

    pub fn new(n_inputs: usize, p: &KanParams, rng: &mut ChaCha8Rng) -> Self {
        let mut sizes = vec![n_inputs];
        sizes.extend_from_slice(&p.hidden);
        sizes.push(1);
        let g = p.grid_size;
        let (grid, width) = Self::shape(g, p.grid_range);
        let mut params = Vec::with_capacity(Self::n_params(&sizes, g));
        for s in sizes.windows(2) {
            let (n_in, n_out) = (s[0], s[1]);
            let wb = xavier(n_in * g, n_out);
            params.extend((0..n_out * n_in * g).map(|_| rng.random_range(-wb..wb)));
            let vb = xavier(n_in, n_out);
            params.extend((0..n_out * n_in).map(|_| rng.random_range(-vb..vb)));
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Self {
            sizes,
            grid,
            width,
            params,
        }
    }

    pub fn builder(p: &KanParams) -> impl Fn(usize, &mut ChaCha8Rng) -> KanNet + '_ {
        move |n, rng| KanNet::new(n, p, rng)
    }

    /// Random net over the given layer sizes, for gradient checks.
    pub fn random(sizes: &[usize], grid_size: usize, range: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (grid, width) = Self::shape(grid_size, range);
        let params = (0..Self::n_params(sizes, grid_size))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Self {
            sizes: sizes.to_vec(),
            grid,
            width,
            params,
        }
    }

    /// Basis values and their input derivatives for one input value.
    fn basis(&self, x: f64, values: &mut [f64], slopes: &mut [f64]) {
        for (j, &c) in self.grid.iter().enumerate() {
            let t = ((x - c) / self.width).tanh();
            let b = 1.0 - t * t;
            values[j] = b;
            slopes[j] = -2.0 * t * b / self.width;
        }
    }

    /// Returns per-layer inputs plus the final output vector, and per-layer
    /// basis values and slopes (`in x G`, flattened).
    #[allow(clippy::type_complexity)]
    fn run(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<(Vec<f64>, Vec<f64>)>) {
        let g = self.grid.len();
        let mut acts = vec![x.to_vec()];
        let mut bases = Vec::with_capacity(self.sizes.len() - 1);
        let mut off = 0;
        for s in self.sizes.windows(2) {
            let (n_in, n_out) = (s[0], s[1]);
            let a = acts.last().unwrap();
            let mut vals = vec![0.0; n_in * g];
            let mut slopes = vec![0.0; n_in * g];
            for i in 0..n_in {
                self.basis(a[i], &mut vals[i * g..(i + 1) * g], &mut slopes[i * g..(i + 1) * g]);
            }
            let w = &self.params[off..off + n_out * n_in * g];
            let v = &self.params[off + n_out * n_in * g..off + n_out * n_in * (g + 1)];
            let b = &self.params[off + n_out * n_in * (g + 1)..off + Self::layer_len(n_in, n_out, g)];
            let out: Vec<f64> = (0..n_out)
                .map(|k| {
                    let wk = &w[k * n_in * g..(k + 1) * n_in * g];
                    let spline: f64 = wk.iter().zip(&vals).map(|(p, q)| p * q).sum();
                    let linear: f64 = v[k * n_in..(k + 1) * n_in].iter().zip(a).map(|(p, q)| p * q).sum();
                    spline + linear + b[k]
                })
                .collect();
            acts.push(out);
            bases.push((vals, slopes));
            off += Self::layer_len(n_in, n_out, g);
        }
        (acts, bases)
    }
}

impl Network for KanNet {
    const NAME: &'static str = "kan";

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &[f64]) -> f64 {
        self.run(x).0.last().unwrap()[0]
    }

    fn backward(&self, x: &[f64], upstream: &mut dyn FnMut(f64) -> f64, grad: &mut [f64]) -> f64 {
        let g = self.grid.len();
        let (acts, bases) = self.run(x);
        let out = acts.last().unwrap()[0];
        let mut delta = vec![upstream(out)];
        let mut offsets: Vec<usize> = self
            .sizes
            .windows(2)
            .scan(0, |off, s| {
                let o = *off;
                *off += Self::layer_len(s[0], s[1], g);
                Some(o)
            })
            .collect();
        for l in (0..self.sizes.len() - 1).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets.pop().unwrap();
            let a = &acts[l];
            let (vals, slopes) = &bases[l];
            let w_off = off;
            let v_off = off + n_out * n_in * g;
            let b_off = v_off + n_out * n_in;
            for k in 0..n_out {
                let d = delta[k];
                for (gw, b) in grad[w_off + k * n_in * g..w_off + (k + 1) * n_in * g].iter_mut().zip(vals) {
                    *gw += d * b;
                }
                for (gv, ai) in grad[v_off + k * n_in..v_off + (k + 1) * n_in].iter_mut().zip(a) {
                    *gv += d * ai;
                }
                grad[b_off + k] += d;
            }
            if l > 0 {
                let w = &self.params[w_off..v_off];
                let v = &self.params[v_off..b_off];
                delta = (0..n_in)
                    .map(|i| {
                        (0..n_out)
                            .map(|k| {
                                let wki = &w[(k * n_in + i) * g..(k * n_in + i + 1) * g];
                                let spline: f64 =
                                    wki.iter().zip(&slopes[i * g..(i + 1) * g]).map(|(p, q)| p * q).sum();
                                delta[k] * (spline + v[k * n_in + i])
                            })
                            .sum()
                    })
                    .collect();
            }
        }
        out
    }
}
