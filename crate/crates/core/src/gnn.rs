//! Two-layer graph convolutional network with hand-written backpropagation.
//!
//! ```text
//! H_pre = Â X W1 + b1      H = relu(H_pre)
//! Z     = Â H W2 + b2      P = softmax_rows(Z)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{load_matrix, save_matrix, EmbeddingMatrix, NormalizedAdjacency};

/// Weights and biases of both layers. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl GcnParams {
    pub fn zeros(d: usize, h: usize, c: usize) -> Self {
        GcnParams {
            w1: Array2::zeros((d, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, c)),
            b2: Array1::zeros(c),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(d: usize, h: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
        };
        let w1 = glorot(d, h);
        let w2 = glorot(h, c);
        GcnParams {
            w1,
            b1: Array1::zeros(h),
            w2,
            b2: Array1::zeros(c),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.ncols()
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened view in the order w1, b1, w2, b2 (row-major).
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }

    pub fn from_flat(d: usize, h: usize, c: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(d, h, c);
        if flat.len() != p.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                p.len(),
                flat.len()
            )));
        }
        for (dst, src) in p.iter_mut().zip(flat) {
            *dst = *src;
        }
        Ok(p)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &GcnParams) {
        self.w1.scaled_add(alpha, &other.w1);
        self.b1.scaled_add(alpha, &other.b1);
        self.w2.scaled_add(alpha, &other.w2);
        self.b2.scaled_add(alpha, &other.b2);
    }

    pub fn norm_l2(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Writes `w1.txt`, `b1.txt`, `w2.txt`, `b2.txt` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_matrix(&self.w1, &dir.join("w1.txt"))?;
        save_matrix(&self.b1.clone().insert_axis(Axis(0)), &dir.join("b1.txt"))?;
        save_matrix(&self.w2, &dir.join("w2.txt"))?;
        save_matrix(&self.b2.clone().insert_axis(Axis(0)), &dir.join("b2.txt"))?;
        let manifest = ParamManifest {
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
            num_classes: self.num_classes(),
            seed,
            tensors: vec![
                TensorEntry::new("w1", "w1.txt", self.w1.dim()),
                TensorEntry::new("b1", "b1.txt", (1, self.b1.len())),
                TensorEntry::new("w2", "w2.txt", self.w2.dim()),
                TensorEntry::new("b2", "b2.txt", (1, self.b2.len())),
            ],
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, u64)> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ParamManifest = serde_json::from_str(&text)?;
        let row = |name: &str| -> Result<Array1<f64>> {
            let m = load_matrix(&dir.join(name))?;
            Ok(m.index_axis(Axis(0), 0).to_owned())
        };
        let p = GcnParams {
            w1: load_matrix(&dir.join("w1.txt"))?,
            b1: row("b1.txt")?,
            w2: load_matrix(&dir.join("w2.txt"))?,
            b2: row("b2.txt")?,
        };
        let (d, h, c) = (manifest.input_dim, manifest.hidden_dim, manifest.num_classes);
        if p.w1.dim() != (d, h) || p.b1.len() != h || p.w2.dim() != (h, c) || p.b2.len() != c {
            return Err(Error::Shape(format!(
                "{}: tensors disagree with manifest shape ({d}, {h}, {c})",
                dir.display()
            )));
        }
        Ok((p, manifest.seed))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamManifest {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

impl TensorEntry {
    fn new(name: &str, file: &str, (r, c): (usize, usize)) -> Self {
        TensorEntry {
            name: name.into(),
            file: file.into(),
            shape: [r, c],
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub h_pre: Array2<f64>,
    pub h: Array2<f64>,
    pub z: Array2<f64>,
    pub p: Array2<f64>,
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row(z: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let s = softmax_row(row.view());
        row.assign(&s);
    }
    p
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A GCN bound to one graph and feature matrix. `Â·X` is computed once.
#[derive(Debug, Clone)]
pub struct Gcn {
    a_hat: NormalizedAdjacency,
    ax: Array2<f64>,
}

impl Gcn {
    pub fn new(a_hat: NormalizedAdjacency, x: &EmbeddingMatrix) -> Result<Self> {
        let ax = a_hat.matmul(x.data())?;
        Ok(Gcn { a_hat, ax })
    }

    pub fn num_nodes(&self) -> usize {
        self.a_hat.n()
    }

    pub fn input_dim(&self) -> usize {
        self.ax.ncols()
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.a_hat
    }

    /// The propagated features `Â·X`.
    pub fn propagated_features(&self) -> &Array2<f64> {
        &self.ax
    }

    fn check(&self, params: &GcnParams) -> Result<()> {
        if params.input_dim() != self.ax.ncols()
            || params.b1.len() != params.hidden_dim()
            || params.w2.nrows() != params.hidden_dim()
            || params.b2.len() != params.num_classes()
        {
            return Err(Error::Shape(format!(
                "parameters (w1 {:?}, b1 {}, w2 {:?}, b2 {}) do not fit {}-dimensional features",
                params.w1.dim(),
                params.b1.len(),
                params.w2.dim(),
                params.b2.len(),
                self.ax.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &GcnParams) -> Result<ForwardTrace> {
        self.check(params)?;
        let h_pre = self.ax.dot(&params.w1) + &params.b1;
        let h = h_pre.mapv(|v| v.max(0.0));
        let z = self.a_hat.matmul(&h.dot(&params.w2))? + &params.b2;
        let p = softmax_rows(&z);
        Ok(ForwardTrace { h_pre, h, z, p })
    }

    /// Logits only.
    pub fn logits(&self, params: &GcnParams) -> Result<Array2<f64>> {
        Ok(self.forward(params)?.z)
    }

    /// Parameter gradients of any scalar whose gradient with respect to `Z` is `dz`.
    pub fn backward(
        &self,
        params: &GcnParams,
        trace: &ForwardTrace,
        dz: &Array2<f64>,
    ) -> Result<GcnParams> {
        self.check(params)?;
        let n = self.num_nodes();
        if dz.dim() != (n, params.num_classes()) || trace.h.dim() != (n, params.hidden_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} / trace {:?} do not match {n} nodes",
                dz.dim(),
                trace.h.dim()
            )));
        }
        let a_dz = self.a_hat.matmul(dz)?;
        let w2 = trace.h.t().dot(&a_dz);
        let b2 = dz.sum_axis(Axis(0));
        let mut dh = a_dz.dot(&params.w2.t());
        Zip::from(&mut dh).and(&trace.h_pre).for_each(|g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = self.ax.t().dot(&dh);
        let b1 = dh.sum_axis(Axis(0));
        Ok(GcnParams { w1, b1, w2, b2 })
    }
}
