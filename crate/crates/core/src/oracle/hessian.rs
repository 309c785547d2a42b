use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::net64::{self, L64, T64};
use super::{fd_step, taylor_increase};
use crate::error::{dim_err, Error, Result};
use crate::model::Layer;
use crate::tensor::Tensor;

/// Largest combined parameter count for a dense Hessian block.
pub const DENSE_BUDGET: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        Self { rows, cols, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        let mut d = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                d[j * self.rows + i] = self.get(i, j);
            }
        }
        Matrix::new(self.cols, self.rows, d)
    }

    /// `‖A − B‖_F / max(‖A‖_F, ‖B‖_F)`, zero when both vanish.
    pub fn relative_distance(&self, other: &Matrix) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = self.frobenius().max(other.frobenius());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

#[derive(Debug, Clone)]
pub enum Loss64 {
    CrossEntropy(Vec<usize>),
    /// `mean_n ½ Σ_j (y_nj − t_nj)²`.
    SquaredError(T64),
}

/// A network with a loss; its parameters are the conv/linear weights
/// (biases excluded), indexed by layer ordinal.
#[derive(Debug, Clone)]
pub struct LossNet {
    pub layers: Vec<L64>,
    pub x: T64,
    pub loss: Loss64,
    affine: Vec<usize>,
}

impl LossNet {
    pub fn new(layers: Vec<L64>, x: T64, loss: Loss64) -> Result<Self> {
        let affine: Vec<usize> = layers.iter().enumerate().filter(|(_, l)| l.is_affine()).map(|(i, _)| i).collect();
        if affine.is_empty() {
            return Err(Error::Structure("loss network has no conv or linear layer".into()));
        }
        let n = x.batch();
        let ok = match &loss {
            Loss64::CrossEntropy(l) => l.len() == n,
            Loss64::SquaredError(t) => t.batch() == n,
        };
        if !ok {
            return Err(dim_err("loss network", "loss targets do not match the batch"));
        }
        Ok(Self { layers, x, loss, affine })
    }

    pub fn from_f32(layers: &[Layer], x: &Tensor, labels: &[usize]) -> Result<Self> {
        Self::new(net64::convert(layers, false)?, T64::from_f32(x), Loss64::CrossEntropy(labels.to_vec()))
    }

    pub fn layer_count(&self) -> usize {
        self.affine.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.affine.iter().map(|&i| self.layers[i].weights().expect("affine").len()).collect()
    }

    pub fn weights(&self, ord: usize) -> &[f64] {
        self.layers[self.affine[ord]].weights().expect("affine")
    }

    pub fn weights_mut(&mut self, ord: usize) -> &mut Vec<f64> {
        let i = self.affine[ord];
        self.layers[i].weights_mut().expect("affine")
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        (0..self.layer_count()).flat_map(|o| self.weights(o).to_vec()).collect()
    }

    pub fn set_flat_weights(&mut self, w: &[f64]) {
        let mut off = 0;
        for o in 0..self.layer_count() {
            let dst = self.weights_mut(o);
            let n = dst.len();
            dst.copy_from_slice(&w[off..off + n]);
            off += n;
        }
    }

    fn loss_and_grad_out(&self, y: &T64) -> (f64, T64) {
        match &self.loss {
            Loss64::CrossEntropy(l) => net64::cross_entropy(y, l),
            Loss64::SquaredError(t) => {
                let n = y.batch() as f64;
                let d: Vec<f64> = y.data.iter().zip(&t.data).map(|(a, b)| a - b).collect();
                let loss = 0.5 * d.iter().map(|v| v * v).sum::<f64>() / n;
                (loss, T64::new(y.shape.clone(), d.into_iter().map(|v| v / n).collect()))
            }
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss_and_grad_out(&net64::forward(&self.layers, &self.x)).0
    }

    /// Analytic weight gradient per layer ordinal.
    pub fn grad(&self) -> Result<Vec<Vec<f64>>> {
        let acts = net64::forward_all(&self.layers, &self.x);
        let (_, g) = self.loss_and_grad_out(acts.last().expect("output"));
        let (wg, _) = net64::backward(&self.layers, &acts, g)?;
        Ok(self.affine.iter().map(|&i| wg[i].clone()).collect())
    }

    pub fn flat_grad(&self) -> Result<Vec<f64>> {
        Ok(self.grad()?.concat())
    }
}

/// Columns `H[:, b]` for every weight `b` of layer `j`, each split per layer.
/// Central differences at `h` and `h/2` are combined by Richardson
/// extrapolation, leaving an `O(h⁴)` truncation error.
fn fd_columns(net: &LossNet, j: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let n = net.weights(j).len();
    (0..n)
        .into_par_iter()
        .map(|b| {
            let mut p = net.clone();
            let w0 = p.weights(j)[b];
            let mut central = |h: f64| -> Result<Vec<Vec<f64>>> {
                p.weights_mut(j)[b] = w0 + h;
                let up = p.grad()?;
                p.weights_mut(j)[b] = w0 - h;
                let down = p.grad()?;
                p.weights_mut(j)[b] = w0;
                Ok(up
                    .iter()
                    .zip(&down)
                    .map(|(u, d)| u.iter().zip(d).map(|(a, c)| (a - c) / (2.0 * h)).collect())
                    .collect())
            };
            let h = fd_step(w0);
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            Ok(fine
                .iter()
                .zip(&coarse)
                .map(|(f, c)| f.iter().zip(c).map(|(a, b)| (4.0 * a - b) / 3.0).collect())
                .collect())
        })
        .collect()
}

/// `H^{(i,j)} = ∂²L/∂w_i∂w_j` by central differences of the analytic gradient.
pub fn hessian_fd(net: &LossNet, i: usize, j: usize) -> Result<Matrix> {
    let sizes = net.sizes();
    if i >= sizes.len() || j >= sizes.len() {
        return Err(Error::Parameter(format!("layer pair ({i}, {j}) outside {} layers", sizes.len())));
    }
    let total = if i == j { sizes[i] } else { sizes[i] + sizes[j] };
    if total > DENSE_BUDGET {
        return Err(Error::Size {
            what: "hessian block parameters",
            actual: total,
            limit: DENSE_BUDGET,
        });
    }
    let cols = fd_columns(net, j)?;
    let (r, c) = (sizes[i], sizes[j]);
    let mut m = vec![0.0; r * c];
    for (b, col) in cols.iter().enumerate() {
        for a in 0..r {
            m[a * c + b] = col[i][a];
        }
    }
    Ok(Matrix::new(r, c, m))
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianBlocks {
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
    #[serde(skip)]
    pub blocks: BTreeMap<(usize, usize), Matrix>,
}

impl HessianBlocks {
    /// Relative asymmetry `‖H^{(i,j)} − H^{(j,i)ᵀ}‖ / ‖H^{(i,j)}‖` per computed pair.
    pub fn asymmetry(&self) -> Vec<((usize, usize), f64)> {
        self.blocks
            .iter()
            .filter_map(|(&(i, j), m)| {
                self.blocks
                    .get(&(j, i))
                    .map(|t| ((i, j), m.relative_distance(&t.transpose())))
            })
            .collect()
    }
}

/// Every block of a network whose total weight count fits the dense budget.
pub fn hessian_blocks(net: &LossNet) -> Result<HessianBlocks> {
    let sizes = net.sizes();
    let total: usize = sizes.iter().sum();
    if total > DENSE_BUDGET {
        return Err(Error::Size {
            what: "hessian parameters",
            actual: total,
            limit: DENSE_BUDGET,
        });
    }
    let mut offsets = vec![0];
    for s in &sizes {
        offsets.push(offsets.last().expect("nonempty") + s);
    }
    offsets.pop();
    let mut blocks = BTreeMap::new();
    for j in 0..sizes.len() {
        let cols = fd_columns(net, j)?;
        for (i, &r) in sizes.iter().enumerate() {
            let c = sizes[j];
            let mut m = vec![0.0; r * c];
            for (b, col) in cols.iter().enumerate() {
                for a in 0..r {
                    m[a * c + b] = col[i][a];
                }
            }
            blocks.insert((i, j), Matrix::new(r, c, m));
        }
    }
    Ok(HessianBlocks { sizes, offsets, blocks })
}

/// Dense Hessian over all weights, assembled from the blocks.
pub fn full_hessian(blocks: &HessianBlocks) -> Result<Matrix> {
    let n: usize = blocks.sizes.iter().sum();
    let mut m = vec![0.0; n * n];
    for i in 0..blocks.sizes.len() {
        for j in 0..blocks.sizes.len() {
            let b = blocks
                .blocks
                .get(&(i, j))
                .ok_or_else(|| Error::Structure(format!("missing hessian block ({i}, {j})")))?;
            for a in 0..b.rows {
                for c in 0..b.cols {
                    m[(blocks.offsets[i] + a) * n + blocks.offsets[j] + c] = b.get(a, c);
                }
            }
        }
    }
    Ok(Matrix::new(n, n, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MassRow {
    pub distance: usize,
    pub blocks: usize,
    pub mean_frobenius: f64,
}

/// Mean `‖H^{(i,j)}‖_F` grouped by `|i − j|`.
pub fn tridiagonal_mass(blocks: &HessianBlocks) -> Result<Vec<MassRow>> {
    let l = blocks.sizes.len();
    let mut rows = Vec::with_capacity(l);
    for d in 0..l {
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..l {
            for j in 0..l {
                if i.abs_diff(j) != d {
                    continue;
                }
                let b = blocks
                    .blocks
                    .get(&(i, j))
                    .ok_or_else(|| Error::Structure(format!("missing hessian block ({i}, {j})")))?;
                sum += b.frobenius();
                count += 1;
            }
        }
        rows.push(MassRow {
            distance: d,
            blocks: count,
            mean_frobenius: sum / count as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorPoint {
    pub scale: f64,
    pub actual: f64,
    pub predicted: f64,
    pub abs_error: f64,
}

/// Actual loss change versus the second-order prediction along `s·Δw`.
pub fn taylor_curve(net: &LossNet, hessian: &Matrix, dw: &[f64], scales: &[f64]) -> Result<Vec<TaylorPoint>> {
    let w0 = net.flat_weights();
    if dw.len() != w0.len() {
        return Err(dim_err("taylor_curve", format!("Δw has {} entries, network {}", dw.len(), w0.len())));
    }
    let g = net.flat_grad()?;
    let base = net.loss();
    let mut p = net.clone();
    scales
        .iter()
        .map(|&s| {
            let step: Vec<f64> = dw.iter().map(|v| v * s).collect();
            let w: Vec<f64> = w0.iter().zip(&step).map(|(a, b)| a + b).collect();
            p.set_flat_weights(&w);
            let actual = p.loss() - base;
            let predicted = taylor_increase(&step, &g, hessian)?;
            Ok(TaylorPoint {
                scale: s,
                actual,
                predicted,
                abs_error: (actual - predicted).abs(),
            })
        })
        .collect()
}
