//! Rotational versus non-rotational weight change via orthogonal Procrustes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SilqError};
use crate::tensor::Tensor;

const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SilqError::dim(
                "mat",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 2 {
            return Err(SilqError::dim("mat", format!("expected a matrix, got {:?}", t.shape())));
        }
        Mat::new(t.rows(), t.cols(), t.data().iter().map(|&v| f64::from(v)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("matrix data matches its shape")
    }

    /// Gaussian entries.
    pub fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(SilqError::dim(
                "mat matmul",
                format!("{}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[k * other.cols..(k + 1) * other.cols];
                row.iter_mut().zip(b).for_each(|(o, &b)| *o += a * b);
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(SilqError::dim("mat sub", "shape mismatch"));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Mat { data, ..*self })
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    fn from_columns(cols: &[Vec<f64>]) -> Mat {
        let rows = cols.first().map_or(0, Vec::len);
        let mut m = Mat::zeros(rows, cols.len());
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Determinant by LU with partial pivoting.
    pub fn det(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(SilqError::dim("det", "matrix is not square"));
        }
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let pivot = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap_or(k);
            if a[pivot * n + k] == 0.0 {
                return Ok(0.0);
            }
            if pivot != k {
                for j in 0..n {
                    a.swap(k * n + j, pivot * n + j);
                }
                det = -det;
            }
            let d = a[k * n + k];
            det *= d;
            for i in k + 1..n {
                let f = a[i * n + k] / d;
                if f != 0.0 {
                    for j in k..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                }
            }
        }
        Ok(det)
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `M = U·diag(sigma)·Vᵀ` with singular values in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

/// Modified Gram-Schmidt over `cols`, replacing vectors that vanish with the
/// standard basis vector least represented by the ones already kept.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    let n = cols.first().map_or(0, Vec::len);
    for j in 0..cols.len() {
        for _ in 0..2 {
            for k in 0..j {
                let proj = dot(&cols[j], &cols[k]);
                let (head, tail) = cols.split_at_mut(j);
                tail[0].iter_mut().zip(&head[k]).for_each(|(x, &y)| *x -= proj * y);
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        if norm > 1e-8 {
            cols[j].iter_mut().for_each(|x| *x /= norm);
            continue;
        }
        let best = (0..n)
            .map(|e| (e, 1.0 - (0..j).map(|k| cols[k][e] * cols[k][e]).sum::<f64>()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(e, _)| e);
        let mut v = vec![0.0; n];
        v[best] = 1.0;
        for _ in 0..2 {
            for k in 0..j {
                let proj = dot(&v, &cols[k]);
                v.iter_mut().zip(&cols[k]).for_each(|(x, &y)| *x -= proj * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        cols[j] = v;
    }
}

/// One-sided Jacobi SVD of a square matrix.
pub fn svd(m: &Mat) -> Result<Svd> {
    if m.rows != m.cols {
        return Err(SilqError::dim(
            "svd",
            format!("expected square, got {}x{}", m.rows, m.cols),
        ));
    }
    let n = m.rows;
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut norms: Vec<f64> = g.iter().map(|c| dot(c, c)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                let gamma = dot(&g[p], &g[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut g, &mut v] {
                    let (head, tail) = cols.split_at_mut(q);
                    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
                        let (a, b) = (*x, *y);
                        *x = c * a - s * b;
                        *y = s * a + c * b;
                    }
                }
                norms[p] = dot(&g[p], &g[p]);
                norms[q] = dot(&g[q], &g[q]);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let sigma: Vec<f64> = order.iter().map(|&j| norms[j].sqrt()).collect();
    let top = sigma.first().copied().unwrap_or(0.0);
    let mut u_cols: Vec<Vec<f64>> = order
        .iter()
        .zip(&sigma)
        .map(|(&j, &s)| {
            if s > top * 1e-12 && s > 0.0 {
                g[j].iter().map(|x| x / s).collect()
            } else {
                vec![0.0; n]
            }
        })
        .collect();
    orthonormalize(&mut u_cols);
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    Ok(Svd {
        u: Mat::from_columns(&u_cols),
        sigma,
        v: Mat::from_columns(&v_cols),
    })
}

/// Which side the orthogonal factor multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// `min ‖R·A − B‖`
    Left,
    /// `min ‖A·R − B‖`
    Right,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ProcrustesSolution {
    pub rotation: Mat,
    /// `‖R·A − B‖_F` or `‖A·R − B‖_F`.
    pub residual: f64,
    pub side: Side,
}

/// Orthogonal factor closest to aligning `a` with `b`. With `special` the
/// factor is a proper rotation (det +1), otherwise reflections are allowed.
pub fn procrustes(a: &Mat, b: &Mat, side: Side, special: bool) -> Result<ProcrustesSolution> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(SilqError::Input(format!(
            "procrustes operands differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let cross = match side {
        Side::Left => b.matmul(&a.transpose())?,
        Side::Right => a.transpose().matmul(b)?,
    };
    let Svd { mut u, v, .. } = svd(&cross)?;
    if special && u.det()? * v.det()? < 0.0 {
        let last = u.cols - 1;
        for i in 0..u.rows {
            u[(i, last)] = -u[(i, last)];
        }
    }
    let rotation = u.matmul(&v.transpose())?;
    let aligned = match side {
        Side::Left => rotation.matmul(a)?,
        Side::Right => a.matmul(&rotation)?,
    };
    Ok(ProcrustesSolution {
        residual: aligned.sub(b)?.frobenius(),
        rotation,
        side,
    })
}

/// Haar-distributed rotation (det +1) from a Gaussian QR.
pub fn random_rotation(n: usize, rng: &mut impl Rng) -> Mat {
    let g = Mat::randn(n, n, rng);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| g.column(j)).collect();
    orthonormalize(&mut cols);
    let mut q = Mat::from_columns(&cols);
    if q.det().unwrap_or(1.0) < 0.0 {
        for i in 0..n {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}

/// Decomposition of one layer's weight change, normalized by `‖W₀‖_F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationEntry {
    pub layer: String,
    pub side: Side,
    /// `(d_f − d_p) / ‖W₀‖_F`
    pub rotational: f64,
    /// `d_p / ‖W₀‖_F`
    pub non_rotational: f64,
}

/// Splits `w0 → w1` into the part a rotation explains and the rest, taking
/// whichever side leaves the smaller residual. Returns `None` (with a
/// warning) when `w0` is all zeros.
pub fn decompose(layer: &str, w0: &Tensor, w1: &Tensor, special: bool) -> Result<Option<RotationEntry>> {
    if w0.shape() != w1.shape() {
        return Err(SilqError::Input(format!(
            "`{layer}` changed shape: {:?} vs {:?}",
            w0.shape(),
            w1.shape()
        )));
    }
    let (a, b) = (Mat::from_tensor(w0)?, Mat::from_tensor(w1)?);
    let norm = a.frobenius();
    if norm == 0.0 {
        warn!("skipping `{layer}`: original weight has zero norm");
        return Ok(None);
    }
    let d_f = b.sub(&a)?.frobenius();
    let left = procrustes(&a, &b, Side::Left, special)?;
    let right = procrustes(&a, &b, Side::Right, special)?;
    let best = if right.residual < left.residual { right } else { left };
    // R = I is feasible, so any excess over d_f is rounding
    let d_p = best.residual.min(d_f);
    Ok(Some(RotationEntry {
        layer: layer.to_string(),
        side: best.side,
        rotational: (d_f - d_p) / norm,
        non_rotational: d_p / norm,
    }))
}

/// Layer types whose weights can be rotated from both sides by
/// computationally invariant transforms.
pub const BOTH_SIDE_TYPES: [&str; 2] = ["wv", "wo"];

/// Layer type of a parameter name: its last dotted component.
pub fn layer_type_of(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeAverage {
    pub rotational: f64,
    pub non_rotational: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RotationReport {
    pub entries: Vec<RotationEntry>,
    pub averages: BTreeMap<String, TypeAverage>,
    /// Entries with no layer type in the map.
    pub unmapped: Vec<String>,
}

/// Per-type means of `entries`. With `exclude_both_side`, types in
/// [`BOTH_SIDE_TYPES`] are left out of the averages.
pub fn aggregate_report(
    entries: Vec<RotationEntry>,
    layer_types: &BTreeMap<String, String>,
    exclude_both_side: bool,
) -> Result<RotationReport> {
    if entries.is_empty() {
        return Err(SilqError::Input("no layers to aggregate".into()));
    }
    let mut sums: BTreeMap<String, TypeAverage> = BTreeMap::new();
    let mut unmapped = Vec::new();
    for e in &entries {
        let Some(kind) = layer_types.get(&e.layer) else {
            unmapped.push(e.layer.clone());
            continue;
        };
        if exclude_both_side && BOTH_SIDE_TYPES.contains(&kind.as_str()) {
            continue;
        }
        let acc = sums.entry(kind.clone()).or_default();
        acc.rotational += e.rotational;
        acc.non_rotational += e.non_rotational;
        acc.count += 1;
    }
    for avg in sums.values_mut() {
        avg.rotational /= avg.count as f64;
        avg.non_rotational /= avg.count as f64;
    }
    Ok(RotationReport {
        entries,
        averages: sums,
        unmapped,
    })
}

impl RotationReport {
    /// Tab-separated rows `layer type side rot non_rot`, then one
    /// `average` row per type.
    pub fn to_tsv(&self, layer_types: &BTreeMap<String, String>) -> String {
        let mut out = String::from("layer\ttype\tside\trot\tnon_rot\n");
        for e in &self.entries {
            let kind = layer_types.get(&e.layer).map_or("unmapped", String::as_str);
            let _ = writeln!(
                out,
                "{}\t{kind}\t{}\t{:.9e}\t{:.9e}",
                e.layer, e.side, e.rotational, e.non_rotational
            );
        }
        for (kind, avg) in &self.averages {
            let _ = writeln!(
                out,
                "average\t{kind}\t-\t{:.9e}\t{:.9e}",
                avg.rotational, avg.non_rotational
            );
        }
        out
    }
}
