//! Sparse matrices and preconditioned conjugate gradients.

use rayon::prelude::*;

use crate::error::{Error, Result};

const PAR_ROWS: usize = 16_384;

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicate entries are summed.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        let row = |i: usize| self.row(i).map(|(c, v)| v * x[c]).sum::<f64>();
        if self.n >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, o)| *o = row(i));
        } else {
            y.iter_mut().enumerate().for_each(|(i, o)| *o = row(i));
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.mul_into(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).find(|(c, _)| *c == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map_or(0.0, |(_, v)| v)
    }

    /// `max |a_ij − a_ji|` relative to `max |a_ij|`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst / scale
    }

    pub fn quadratic(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul(x))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Work in the mean-zero subspace (singular periodic systems).
    pub project_mean: bool,
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative true residual `‖b − A x‖ / ‖b‖`.
    pub residual: f64,
}

/// Jacobi-preconditioned CG. The reported residual is always recomputed
/// from `b − A x`.
pub fn pcg(a: &CsrMatrix, b: &[f64], opts: CgOptions) -> Result<CgResult> {
    let n = a.n;
    let mut rhs = b.to_vec();
    if opts.project_mean {
        remove_mean(&mut rhs);
    }
    let bnorm = norm(&rhs);
    if bnorm == 0.0 {
        return Ok(CgResult {
            x: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |r: &[f64], z: &mut [f64]| {
        for i in 0..n {
            z[i] = inv_diag[i] * r[i];
        }
        if opts.project_mean {
            remove_mean(z);
        }
    };

    let mut x = vec![0.0; n];
    let mut r = rhs.clone();
    let mut z = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut iterations = 0;
    // A restart re-derives r from x; it guards against drift of the
    // recursive residual at tight tolerances.
    for _restart in 0..4 {
        precond(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        while iterations < opts.max_iter {
            if norm(&r) <= 0.5 * opts.tol * bnorm {
                break;
            }
            a.mul_into(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(Error::NotSpd(format!("CG curvature p·Ap = {pap:e}")));
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            precond(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
            iterations += 1;
        }
        if opts.project_mean {
            remove_mean(&mut x);
        }
        a.mul_into(&x, &mut ap);
        for i in 0..n {
            r[i] = rhs[i] - ap[i];
        }
        if opts.project_mean {
            remove_mean(&mut r);
        }
        let res = norm(&r) / bnorm;
        if res <= opts.tol {
            return Ok(CgResult {
                x,
                iterations,
                residual: res,
            });
        }
        if iterations >= opts.max_iter {
            return Err(Error::NotConverged {
                residual: res,
                iterations,
            });
        }
    }
    let res = norm(&r) / bnorm;
    Err(Error::NotConverged {
        residual: res,
        iterations,
    })
}
