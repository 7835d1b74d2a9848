//! Compressed sparse row matrices and a quasi-definite LDLᵀ solver for KKT
//! systems
//!
//! ```text
//!     [ H + D_p   Aᵀ   ] [dx]   [r1]
//!     [ A        -D_d  ] [dy] = [r2]
//! ```
//!
//! The factorization is an up-looking sparse LDLᵀ without pivoting, driven by
//! the elimination tree of the permuted upper triangle. Quasi-definiteness is
//! kept by a small diagonal shift that escalates when a pivot collapses.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Default diagonal shift for KKT factorizations.
pub const DEFAULT_SHIFT: f64 = 1e-12;
/// Pivots smaller than this in magnitude trigger a shift escalation.
pub const PIVOT_TOL: f64 = 1e-13;
const SHIFT_ESCALATIONS: usize = 2;
const SHIFT_GROWTH: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::identity(d.len());
        m.values.copy_from_slice(d);
        m
    }

    /// Assemble from `(row, col, value)` triplets; duplicates are summed.
    /// Explicit zeros are kept so that sparsity patterns stay stable.
    pub fn from_triplets(rows: usize, cols: usize, trip: &[(usize, usize, f64)]) -> Result<Self> {
        let mut counts = vec![0usize; rows + 1];
        for &(r, c, _) in trip {
            if r >= rows || c >= cols {
                return Err(Error::DimensionMismatch {
                    expected: rows.max(cols),
                    got: r.max(c),
                });
            }
            counts[r + 1] += 1;
        }
        for r in 0..rows {
            counts[r + 1] += counts[r];
        }
        let mut next = counts.clone();
        let mut entries = vec![(0usize, 0.0f64); trip.len()];
        for &(r, c, v) in trip {
            entries[next[r]] = (c, v);
            next[r] += 1;
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(trip.len());
        let mut values = Vec::with_capacity(trip.len());
        row_ptr.push(0);
        for r in 0..rows {
            let row = &mut entries[counts[r]..counts[r + 1]];
            row.sort_by_key(|e| e.0);
            for &(c, v) in row.iter() {
                if col_idx.len() > row_ptr[r] && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Self {
        let mut trip = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let v = data[r * cols + c];
                if v != 0.0 {
                    trip.push((r, c, v));
                }
            }
        }
        Self::from_triplets(rows, cols, &trip).expect("indices in range")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn nnz(&self) -> usize {
        self.values.len()
    }
    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }
    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterate `(row, col, value)` over stored entries.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (r, self.col_idx[p], self.values[p]))
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]];
        match row.binary_search(&c) {
            Ok(k) => self.values[self.row_ptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|p| self.values[p] * x[self.col_idx[p]])
                    .sum()
            })
            .collect())
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                got: x.len(),
            });
        }
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[p]] += self.values[p] * x[r];
            }
        }
        Ok(y)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.rows * self.cols];
        for (r, c, v) in self.iter() {
            d[r * self.cols + c] += v;
        }
        d
    }
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Natural order with each multiplier placed right after the last primal
/// variable of its constraint row.
fn default_ordering(a: &SparseMatrix, n: usize) -> Vec<usize> {
    let m = a.rows();
    let mut after: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut empty = Vec::new();
    for r in 0..m {
        let row = &a.col_idx()[a.row_ptr()[r]..a.row_ptr()[r + 1]];
        match row.last() {
            Some(&c) => after[c].push(n + r),
            None => empty.push(n + r),
        }
    }
    let mut order = Vec::with_capacity(n + m);
    for i in 0..n {
        order.push(i);
        order.extend_from_slice(&after[i]);
    }
    order.extend(empty);
    order
}

/// Reusable symbolic + numeric LDLᵀ factorization of a KKT matrix with a
/// fixed sparsity pattern.
#[derive(Debug, Clone)]
pub struct KktSolver {
    n: usize,
    m: usize,
    perm: Vec<usize>,
    // Upper triangle of the permuted matrix, compressed by column.
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    vals: Vec<f64>,
    h_slot: Vec<usize>,
    a_slot: Vec<usize>,
    diag_slot: Vec<usize>,
    etree: Vec<usize>,
    l_ptr: Vec<usize>,
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d_inv: Vec<f64>,
    shift_used: f64,
    h_pattern: (Vec<usize>, Vec<usize>),
    a_pattern: (Vec<usize>, Vec<usize>),
}

impl KktSolver {
    /// Symbolic analysis for `H` (n×n, upper triangle used) and `A` (m×n).
    /// `ordering` lists KKT indices (`0..n` primal, `n..n+m` dual) in
    /// elimination order.
    pub fn new(h: &SparseMatrix, a: &SparseMatrix, ordering: Option<Vec<usize>>) -> Result<Self> {
        let n = h.rows();
        if h.cols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: h.cols(),
            });
        }
        if a.cols() != n && a.rows() > 0 {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.cols(),
            });
        }
        let m = a.rows();
        let total = n + m;
        let perm = ordering.unwrap_or_else(|| default_ordering(a, n));
        if perm.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: perm.len(),
            });
        }
        let mut iperm = vec![NONE; total];
        for (new, &old) in perm.iter().enumerate() {
            if old >= total || iperm[old] != NONE {
                return Err(Error::InvalidParameter("ordering is not a permutation".into()));
            }
            iperm[old] = new;
        }

        // Collect the (row, col) of every contribution in permuted upper form.
        let mut entries: Vec<(usize, usize)> = Vec::with_capacity(h.nnz() + a.nnz() + total);
        let mut h_src = Vec::with_capacity(h.nnz());
        for (r, c, _) in h.iter() {
            if r > c {
                h_src.push(NONE);
                continue;
            }
            let (pr, pc) = (iperm[r], iperm[c]);
            h_src.push(entries.len());
            entries.push((pr.min(pc), pr.max(pc)));
        }
        let mut a_src = Vec::with_capacity(a.nnz());
        for (r, c, _) in a.iter() {
            let (pr, pc) = (iperm[n + r], iperm[c]);
            a_src.push(entries.len());
            entries.push((pr.min(pc), pr.max(pc)));
        }
        let mut d_src = Vec::with_capacity(total);
        for k in 0..total {
            d_src.push(entries.len());
            entries.push((iperm[k], iperm[k]));
        }

        // Deduplicate into CSC; map every contribution to its slot.
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&e| (entries[e].1, entries[e].0));
        let mut slot_of = vec![0usize; entries.len()];
        let mut col_ptr = vec![0usize; total + 1];
        let mut row_idx = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &e in &order {
            if last != Some(entries[e]) {
                row_idx.push(entries[e].0);
                col_ptr[entries[e].1 + 1] += 1;
                last = Some(entries[e]);
            }
            slot_of[e] = row_idx.len() - 1;
        }
        for j in 0..total {
            col_ptr[j + 1] += col_ptr[j];
        }
        let map = |src: &[usize]| -> Vec<usize> {
            src.iter()
                .map(|&s| if s == NONE { NONE } else { slot_of[s] })
                .collect()
        };
        let h_slot = map(&h_src);
        let a_slot = map(&a_src);
        let diag_slot = map(&d_src);

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; total];
        let mut lnz = vec![0usize; total];
        let mut flag = vec![NONE; total];
        for j in 0..total {
            flag[j] = j;
            for p in col_ptr[j]..col_ptr[j + 1] {
                let mut i = row_idx[p];
                while i < j && flag[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    flag[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut l_ptr = vec![0usize; total + 1];
        for i in 0..total {
            l_ptr[i + 1] = l_ptr[i] + lnz[i];
        }
        let nnz_l = l_ptr[total];
        let nslots = row_idx.len();
        Ok(Self {
            n,
            m,
            perm,
            col_ptr,
            row_idx,
            vals: vec![0.0; nslots],
            h_slot,
            a_slot,
            diag_slot,
            etree,
            l_ptr,
            l_idx: vec![0; nnz_l],
            l_val: vec![0.0; nnz_l],
            d_inv: vec![0.0; total],
            shift_used: 0.0,
            h_pattern: (h.row_ptr.clone(), h.col_idx.clone()),
            a_pattern: (a.row_ptr.clone(), a.col_idx.clone()),
        })
    }

    /// Whether `h` and `a` have the sparsity patterns this solver was built for.
    pub fn matches(&self, h: &SparseMatrix, a: &SparseMatrix) -> bool {
        h.row_ptr == self.h_pattern.0
            && h.col_idx == self.h_pattern.1
            && a.row_ptr == self.a_pattern.0
            && a.col_idx == self.a_pattern.1
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn nnz_l(&self) -> usize {
        self.l_idx.len()
    }

    /// Shift that the last successful factorization used.
    pub fn shift_used(&self) -> f64 {
        self.shift_used
    }

    /// Factor `[H + diag(primal_diag) + s I, Aᵀ; A, -(dual_diag + s) I]`,
    /// starting at `s = shift` and escalating on pivot collapse. `H` and `A`
    /// must have the patterns given to [`KktSolver::new`].
    pub fn factor(
        &mut self,
        h: &SparseMatrix,
        a: &SparseMatrix,
        primal_diag: Option<&[f64]>,
        dual_diag: f64,
        shift: f64,
    ) -> Result<f64> {
        debug_assert_eq!(h.nnz(), self.h_slot.len());
        debug_assert_eq!(a.nnz(), self.a_slot.len());
        let mut s = shift;
        let mut attempt = 0;
        loop {
            self.fill(h, a, primal_diag, dual_diag, s);
            match self.numeric() {
                Ok(()) => {
                    self.shift_used = s;
                    return Ok(s);
                }
                Err((column, pivot)) => {
                    if attempt == SHIFT_ESCALATIONS {
                        return Err(Error::SingularKkt {
                            column,
                            pivot,
                            shift: s,
                        });
                    }
                    attempt += 1;
                    s *= SHIFT_GROWTH;
                }
            }
        }
    }

    fn fill(&mut self, h: &SparseMatrix, a: &SparseMatrix, pd: Option<&[f64]>, dd: f64, s: f64) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
        for (p, &v) in h.values().iter().enumerate() {
            let slot = self.h_slot[p];
            if slot != NONE {
                self.vals[slot] += v;
            }
        }
        for (p, &v) in a.values().iter().enumerate() {
            self.vals[self.a_slot[p]] += v;
        }
        for i in 0..self.n {
            let extra = pd.map_or(0.0, |d| d[i]);
            self.vals[self.diag_slot[i]] += extra + s;
        }
        for r in 0..self.m {
            self.vals[self.diag_slot[self.n + r]] -= dd + s;
        }
    }

    fn numeric(&mut self) -> std::result::Result<(), (usize, f64)> {
        let total = self.n + self.m;
        let mut y = vec![0.0; total];
        let mut marked = vec![false; total];
        let mut pattern = Vec::with_capacity(total);
        let mut stack = Vec::with_capacity(total);
        let mut next = self.l_ptr[..total].to_vec();
        for k in 0..total {
            pattern.clear();
            let mut diag = 0.0;
            for p in self.col_ptr[k]..self.col_ptr[k + 1] {
                let i = self.row_idx[p];
                if i == k {
                    diag += self.vals[p];
                    continue;
                }
                y[i] += self.vals[p];
                let mut j = i;
                stack.clear();
                while j != NONE && j < k && !marked[j] {
                    marked[j] = true;
                    stack.push(j);
                    j = self.etree[j];
                }
                while let Some(t) = stack.pop() {
                    pattern.push(t);
                }
            }
            for &c in pattern.iter().rev() {
                let yc = y[c];
                for q in self.l_ptr[c]..next[c] {
                    y[self.l_idx[q]] -= self.l_val[q] * yc;
                }
                let lkc = yc * self.d_inv[c];
                self.l_idx[next[c]] = k;
                self.l_val[next[c]] = lkc;
                next[c] += 1;
                diag -= yc * lkc;
                y[c] = 0.0;
                marked[c] = false;
            }
            if !(diag.abs() >= PIVOT_TOL) {
                return Err((k, diag));
            }
            self.d_inv[k] = 1.0 / diag;
        }
        Ok(())
    }

    /// Solve with the current factorization; `rhs = [r1; r2]` in original
    /// ordering is overwritten with `[dx; dy]`.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let total = self.n + self.m;
        let mut x: Vec<f64> = self.perm.iter().map(|&o| rhs[o]).collect();
        for i in 0..total {
            let xi = x[i];
            for q in self.l_ptr[i]..self.l_ptr[i + 1] {
                x[self.l_idx[q]] -= self.l_val[q] * xi;
            }
        }
        for i in 0..total {
            x[i] *= self.d_inv[i];
        }
        for i in (0..total).rev() {
            let mut xi = x[i];
            for q in self.l_ptr[i]..self.l_ptr[i + 1] {
                xi -= self.l_val[q] * x[self.l_idx[q]];
            }
            x[i] = xi;
        }
        for (new, &old) in self.perm.iter().enumerate() {
            rhs[old] = x[new];
        }
    }
}

/// One-shot solve of `[H + s I, Aᵀ; A, -s I] (dx, dy) = (r1, r2)`.
///
/// The shift escalates ×100 (at most twice) if a pivot collapses; the
/// returned shift is the one actually used.
pub fn kkt_solve(
    h: &SparseMatrix,
    a: &SparseMatrix,
    r1: &[f64],
    r2: &[f64],
    diag_shift: f64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = h.rows();
    let m = a.rows();
    if r1.len() != n || r2.len() != m {
        return Err(Error::DimensionMismatch {
            expected: n + m,
            got: r1.len() + r2.len(),
        });
    }
    let mut solver = KktSolver::new(h, a, None)?;
    let s = solver.factor(h, a, None, 0.0, diag_shift)?;
    let mut rhs = [r1, r2].concat();
    solver.solve_in_place(&mut rhs);
    let dy = rhs.split_off(n);
    Ok((rhs, dy, s))
}

/// Residual `‖K z − r‖∞` of the shifted KKT system.
pub fn kkt_residual(
    h: &SparseMatrix,
    a: &SparseMatrix,
    shift: f64,
    dx: &[f64],
    dy: &[f64],
    r1: &[f64],
    r2: &[f64],
) -> f64 {
    let hx = h.matvec(dx).unwrap();
    let aty = if a.rows() > 0 {
        a.tr_matvec(dy).unwrap()
    } else {
        vec![0.0; dx.len()]
    };
    let ax = if a.rows() > 0 {
        a.matvec(dx).unwrap()
    } else {
        Vec::new()
    };
    let mut res: f64 = 0.0;
    for i in 0..dx.len() {
        res = res.max((hx[i] + shift * dx[i] + aty[i] - r1[i]).abs());
    }
    for r in 0..dy.len() {
        res = res.max((ax[r] - shift * dy[r] - r2[r]).abs());
    }
    res
}
