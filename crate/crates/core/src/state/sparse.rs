use super::{CMatrix, CVector, C64};

/// Compressed-row view of an operator.
///
/// Oscillator operators in the Fock basis are banded, so conjugating a
/// density matrix costs `O(n² · nnz/n)` instead of `O(n³)`.
#[derive(Clone, Debug)]
pub struct SparseOp {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl SparseOp {
    pub fn from_dense(m: &CMatrix) -> Self {
        Self::from_dense_tol(m, 0.0)
    }

    /// Drops entries with modulus `<= tol`.
    pub fn from_dense_tol(m: &CMatrix, tol: f64) -> Self {
        let dim = m.nrows();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..dim {
            for j in 0..dim {
                let v = m[(i, j)];
                if v.norm() > tol {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { dim, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn to_dense(&self) -> CMatrix {
        let mut m = CMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                m[(i, self.cols[idx])] += self.vals[idx];
            }
        }
        m
    }

    /// `a·self + b·other` on the union of the sparsity patterns.
    pub fn linear_combination(&self, a: C64, other: &SparseOp, b: C64) -> SparseOp {
        let dense = self.to_dense() * a + other.to_dense() * b;
        SparseOp::from_dense(&dense)
    }

    pub fn matvec(&self, v: &CVector) -> CVector {
        let mut out = CVector::zeros(self.dim);
        for i in 0..self.dim {
            let mut acc = C64::new(0.0, 0.0);
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[idx] * v[self.cols[idx]];
            }
            out[i] = acc;
        }
        out
    }

    /// Writes `M ρ M†` into `out`, where `M = self + Σ c_k B_k` over `extra`.
    ///
    /// `work` is scratch space of the same shape as `rho`.
    pub fn sandwich_with(&self, extra: &[(&SparseOp, C64)], rho: &CMatrix, work: &mut CMatrix, out: &mut CMatrix) {
        let mut ops = vec![self];
        ops.extend(extra.iter().map(|(b, _)| *b));
        let sum = SparseSum::new(&ops);
        let mut coeffs = vec![C64::new(1.0, 0.0)];
        coeffs.extend(extra.iter().map(|(_, c)| *c));
        let mut vals = Vec::new();
        sum.combine_into(&coeffs, &mut vals);
        sandwich_raw(&sum.pattern, &vals, rho, work, out, false);
    }

    /// `Tr[ρ A]` with `A = self`.
    pub fn trace_with(&self, rho: &CMatrix) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..self.dim {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[idx] * rho[(self.cols[idx], i)];
            }
        }
        acc
    }
}

/// Several operators on one shared sparsity pattern, so that a linear
/// combination costs `O(nnz)` to form.
#[derive(Clone, Debug)]
pub struct SparseSum {
    pattern: SparseOp,
    terms: Vec<Vec<C64>>,
}

impl SparseSum {
    pub fn new(ops: &[&SparseOp]) -> Self {
        let dim = ops.first().map_or(0, |o| o.dim);
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        for i in 0..dim {
            let mut row: Vec<usize> =
                ops.iter().flat_map(|o| o.cols[o.row_ptr[i]..o.row_ptr[i + 1]].iter().copied()).collect();
            row.sort_unstable();
            row.dedup();
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        let terms = ops
            .iter()
            .map(|o| {
                let mut v = vec![C64::new(0.0, 0.0); cols.len()];
                for i in 0..dim {
                    let slots = &cols[row_ptr[i]..row_ptr[i + 1]];
                    for idx in o.row_ptr[i]..o.row_ptr[i + 1] {
                        let pos = slots.binary_search(&o.cols[idx]).expect("column in union pattern");
                        v[row_ptr[i] + pos] += o.vals[idx];
                    }
                }
                v
            })
            .collect();
        let vals = vec![C64::new(0.0, 0.0); cols.len()];
        Self { pattern: SparseOp { dim, row_ptr, cols, vals }, terms }
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim
    }

    /// `vals = Σ_k coeffs[k] · term_k` on the shared pattern.
    pub fn combine_into(&self, coeffs: &[C64], vals: &mut Vec<C64>) {
        vals.clear();
        vals.resize(self.pattern.cols.len(), C64::new(0.0, 0.0));
        for (t, &c) in self.terms.iter().zip(coeffs) {
            if c == C64::new(0.0, 0.0) {
                continue;
            }
            for (v, x) in vals.iter_mut().zip(t) {
                *v += c * x;
            }
        }
    }

    /// `M ρ M†` for Hermitian `ρ`, with `M` given by `vals` from [`SparseSum::combine_into`].
    /// Only the upper triangle is computed; the result is exactly Hermitian.
    pub fn sandwich_hermitian(&self, vals: &[C64], rho: &CMatrix, work: &mut CMatrix, out: &mut CMatrix) {
        sandwich_raw(&self.pattern, vals, rho, work, out, true);
    }
}

fn sandwich_raw(p: &SparseOp, vals: &[C64], rho: &CMatrix, work: &mut CMatrix, out: &mut CMatrix, hermitian: bool) {
    let n = p.dim;
    let zero = C64::new(0.0, 0.0);
    let r = rho.as_slice();
    // work = ρ M†: column j = Σ_k conj(M_jk) ρ[:, k]
    {
        let w = work.as_mut_slice();
        w.fill(zero);
        for j in 0..n {
            let dst = &mut w[j * n..(j + 1) * n];
            for idx in p.row_ptr[j]..p.row_ptr[j + 1] {
                let c = vals[idx].conj();
                let src = &r[p.cols[idx] * n..(p.cols[idx] + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
    }
    // out = M work
    let w = work.as_slice();
    let o = out.as_mut_slice();
    for j in 0..n {
        let src = &w[j * n..(j + 1) * n];
        let rows = if hermitian { j + 1 } else { n };
        for i in 0..rows {
            let mut acc = zero;
            for idx in p.row_ptr[i]..p.row_ptr[i + 1] {
                acc += vals[idx] * src[p.cols[idx]];
            }
            o[j * n + i] = acc;
        }
    }
    if hermitian {
        for j in 0..n {
            o[j * n + j].im = 0.0;
            for i in 0..j {
                o[i * n + j] = o[j * n + i].conj();
            }
        }
    }
}
