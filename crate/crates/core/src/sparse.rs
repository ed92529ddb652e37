//! Sparse symmetric linear algebra used by the interior-point solver.
//!
//! The solver repeatedly factors symmetric quasi-definite KKT matrices whose
//! sparsity pattern is fixed for the lifetime of one NLP solve. The types here
//! split the work accordingly: [`CscUpper`] stores the upper triangle once,
//! [`LdlFactor`] keeps the symbolic analysis (elimination tree, column counts)
//! and refactors numerically in place on every iteration.
//!
//! No fill-reducing permutation is applied. Collocation KKT systems arrive
//! nearly banded when variables are ordered node by node, so natural order
//! keeps fill acceptable while making factorization deterministic.

/// Upper-triangular part of a symmetric matrix in compressed sparse column
/// form. Every diagonal entry must be present (it may hold the value zero);
/// the factorization reads the diagonal unconditionally.
#[derive(Debug, Clone)]
pub struct CscUpper {
    n: usize,
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    values: Vec<f64>,
}

impl CscUpper {
    /// Builds the pattern from strictly-upper plus diagonal entries given as
    /// (row, col) pairs. Duplicates are merged; their value slots accumulate.
    ///
    /// Returns the matrix (values all zero) together with a scatter map: entry
    /// `k` of the input lands in `values[map[k]]`. Missing diagonal entries
    /// are inserted automatically and appended to the matrix only.
    pub fn from_pattern(n: usize, entries: &[(usize, usize)]) -> (Self, Vec<usize>) {
        for &(r, c) in entries {
            assert!(r <= c && c < n, "entry ({r}, {c}) is not upper-triangular in dim {n}");
        }
        // Sort entry indices column-major, then row; stable so duplicates stay adjacent.
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_by_key(|&k| (entries[k].1, entries[k].0));

        let mut colptr = vec![0usize; n + 1];
        let mut rowind = Vec::new();
        let mut map = vec![0usize; entries.len()];
        let mut have_diag = vec![false; n];

        let mut pos = 0usize;
        for col in 0..n {
            // Consume all entries of this column, merging duplicates.
            let mut last_row = usize::MAX;
            while pos < order.len() && entries[order[pos]].1 == col {
                let (r, _) = entries[order[pos]];
                if r != last_row {
                    rowind.push(r);
                    last_row = r;
                    if r == col {
                        have_diag[col] = true;
                    }
                }
                map[order[pos]] = rowind.len() - 1;
                pos += 1;
            }
            if !have_diag[col] {
                // Diagonal must exist for LDL^T even when structurally zero.
                rowind.push(col);
            }
            colptr[col + 1] = rowind.len();
        }
        let values = vec![0.0; rowind.len()];
        (Self { n, colptr, rowind, values }, map)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.rowind.len()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Sets every stored value to zero, keeping the pattern.
    pub fn clear_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Value slot of the diagonal entry of `col`.
    pub fn diag_index(&self, col: usize) -> usize {
        // The diagonal is the last entry of its column: rows are sorted and
        // r <= col for every stored row.
        let idx = self.colptr[col + 1] - 1;
        debug_assert_eq!(self.rowind[idx], col);
        idx
    }

    /// y += A x treating the stored upper triangle as a full symmetric matrix.
    pub fn sym_gemv(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        for col in 0..self.n {
            for idx in self.colptr[col]..self.colptr[col + 1] {
                let row = self.rowind[idx];
                let v = self.values[idx];
                y[row] += v * x[col];
                if row != col {
                    y[col] += v * x[row];
                }
            }
        }
    }
}

/// Outcome of a numeric refactorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorStatus {
    /// Factorization completed; inertia is available.
    Done,
    /// A pivot fell below the zero threshold; the matrix is numerically
    /// singular under this regularization.
    ZeroPivot { col: usize },
}

/// LDL^T factorization of a symmetric quasi-definite matrix, up-looking with
/// an elimination tree, no pivoting. Symbolic analysis is performed once per
/// pattern; [`LdlFactor::refactor`] reuses it.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    parent: Vec<usize>,
    l_colptr: Vec<usize>,
    l_rowind: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // Workspaces sized once; refactor must not allocate.
    work_y: Vec<f64>,
    work_pattern: Vec<usize>,
    work_flag: Vec<usize>,
    work_next: Vec<usize>,
    n_positive: usize,
    n_negative: usize,
}

const NONE: usize = usize::MAX;

impl LdlFactor {
    /// Symbolic analysis of the pattern of `a`. The values of `a` are ignored.
    pub fn symbolic(a: &CscUpper) -> Self {
        let n = a.n;
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];

        for col in 0..n {
            flag[col] = col;
            for idx in a.colptr[col]..a.colptr[col + 1] {
                let mut i = a.rowind[idx];
                if i >= col {
                    continue;
                }
                // Walk up the tree from i, marking the path and counting the
                // entries it contributes to column i of L.
                while flag[i] != col {
                    if parent[i] == NONE {
                        parent[i] = col;
                    }
                    lnz[i] += 1;
                    flag[i] = col;
                    i = parent[i];
                }
            }
        }

        let mut l_colptr = vec![0usize; n + 1];
        for col in 0..n {
            l_colptr[col + 1] = l_colptr[col] + lnz[col];
        }
        let nnz_l = l_colptr[n];

        Self {
            n,
            parent,
            l_colptr,
            l_rowind: vec![0; nnz_l],
            l_values: vec![0.0; nnz_l],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            work_y: vec![0.0; n],
            work_pattern: vec![0; n],
            work_flag: vec![NONE; n],
            work_next: vec![0; n],
            n_positive: 0,
            n_negative: 0,
        }
    }

    /// Numeric factorization of `a`, which must share the pattern passed to
    /// [`LdlFactor::symbolic`]. Pivots with |d| <= `zero_pivot` abort early.
    pub fn refactor(&mut self, a: &CscUpper, zero_pivot: f64) -> FactorStatus {
        assert_eq!(a.n, self.n);
        let n = self.n;
        self.n_positive = 0;
        self.n_negative = 0;
        self.work_flag.iter_mut().for_each(|f| *f = NONE);
        self.work_y.iter_mut().for_each(|y| *y = 0.0);
        // work_next tracks the fill position of each L column during the sweep.
        self.work_next.copy_from_slice(&self.l_colptr[..n]);

        for col in 0..n {
            // Scatter column `col` of A (rows <= col) into the dense workspace
            // and collect the nonzero pattern of row `col` of L by walking the
            // elimination tree from each entry toward the root.
            let mut top = n;
            self.work_flag[col] = col;
            let mut d_col = 0.0;
            for idx in a.colptr[col]..a.colptr[col + 1] {
                let row = a.rowind[idx];
                if row == col {
                    d_col += a.values[idx];
                    continue;
                }
                self.work_y[row] += a.values[idx];
                let mut len = 0usize;
                let mut i = row;
                while self.work_flag[i] != col {
                    self.work_pattern[len] = i;
                    len += 1;
                    self.work_flag[i] = col;
                    i = self.parent[i];
                }
                // Push the path in reverse so work_pattern[top..] ends up
                // topologically ordered (ancestors last).
                while len > 0 {
                    top -= 1;
                    len -= 1;
                    self.work_pattern[top] = self.work_pattern[len];
                }
            }

            // Up-looking elimination along the collected pattern: forward
            // solve L w = a restricted to the pattern, then row `col` of L is
            // w scaled by 1/d and d_col picks up the quadratic correction.
            for t in top..n {
                let i = self.work_pattern[t];
                let yi = self.work_y[i];
                self.work_y[i] = 0.0;
                let lki = yi * self.dinv[i];
                d_col -= yi * lki;
                // Append to column i of L; sweep order guarantees rows arrive
                // in increasing order within each column.
                for idx in self.l_colptr[i]..self.work_next[i] {
                    self.work_y[self.l_rowind[idx]] -= self.l_values[idx] * yi;
                }
                let slot = self.work_next[i];
                self.l_rowind[slot] = col;
                self.l_values[slot] = lki;
                self.work_next[i] = slot + 1;
            }

            if d_col.abs() <= zero_pivot {
                return FactorStatus::ZeroPivot { col };
            }
            if d_col > 0.0 {
                self.n_positive += 1;
            } else {
                self.n_negative += 1;
            }
            self.d[col] = d_col;
            self.dinv[col] = 1.0 / d_col;
        }
        FactorStatus::Done
    }

    /// (positive, negative) pivot counts of the last successful refactor.
    pub fn inertia(&self) -> (usize, usize) {
        (self.n_positive, self.n_negative)
    }

    /// Solves A x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        // L z = b
        for col in 0..self.n {
            let bc = b[col];
            for idx in self.l_colptr[col]..self.l_colptr[col + 1] {
                b[self.l_rowind[idx]] -= self.l_values[idx] * bc;
            }
        }
        // D y = z
        for i in 0..self.n {
            b[i] *= self.dinv[i];
        }
        // L^T x = y
        for col in (0..self.n).rev() {
            let mut acc = b[col];
            for idx in self.l_colptr[col]..self.l_colptr[col + 1] {
                acc -= self.l_values[idx] * b[self.l_rowind[idx]];
            }
            b[col] = acc;
        }
    }
}
