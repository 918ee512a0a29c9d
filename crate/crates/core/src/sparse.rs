//! Compressed sparse column matrices and an unsymmetric sparse LU factorization.
//!
//! The factorization is a left-looking Gilbert-Peierls LU: every column is
//! obtained from a sparse triangular solve against the columns already
//! factored, followed by threshold partial pivoting. Fill is controlled by a
//! column permutation supplied by the caller, typically from
//! [`nested_dissection`] on the grid coordinates of the unknowns.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Sparse matrix in compressed-column storage with sorted row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let slot = next[c];
            rows[slot] = r;
            vals[slot] = v;
            next[c] += 1;
        }

        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowind = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        colptr.push(0);
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend((counts[c]..counts[c + 1]).map(|p| (rows[p], vals[p])));
            scratch.sort_unstable_by_key(|e| e.0);
            for &(r, v) in &scratch {
                if rowind.len() > colptr[c] && *rowind.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    rowind.push(r);
                    values.push(v);
                }
            }
            colptr.push(rowind.len());
        }
        Self { nrows, ncols, colptr, rowind, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.rowind.len()
    }

    /// Row indices and values of column `c`.
    pub fn column(&self, c: usize) -> (&[usize], &[f64]) {
        let range = self.colptr[c]..self.colptr[c + 1];
        (&self.rowind[range.clone()], &self.values[range])
    }

    /// Entry `(r, c)`, zero when not stored.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (rows, vals) = self.column(c);
        match rows.binary_search(&r) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                y[r] += v * xc;
            }
        }
        y
    }

    /// `Aᵀ y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows);
        (0..self.ncols)
            .map(|c| {
                let (rows, vals) = self.column(c);
                rows.iter().zip(vals).map(|(&r, &v)| v * y[r]).sum()
            })
            .collect()
    }

    /// Dense copy, row-major. Intended for tests and small systems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for c in 0..self.ncols {
            let (rows, vals) = self.column(c);
            for (&r, &v) in rows.iter().zip(vals) {
                d[r][c] = v;
            }
        }
        d
    }
}

/// Undirected graph in adjacency-list form, used for computing orderings.
#[derive(Debug, Clone)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Graph {
    /// Graph on the columns of a square matrix whose rows are paired with
    /// columns by `row_to_col`: columns `c` and `d` are adjacent when the row
    /// paired with `c` has an entry in column `d`. The result is symmetrized.
    pub fn from_paired_pattern(a: &CscMatrix, row_to_col: &[usize]) -> Self {
        assert_eq!(row_to_col.len(), a.nrows());
        let n = a.ncols();
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(2 * a.nnz());
        for d in 0..n {
            let (rows, _) = a.column(d);
            for &r in rows {
                let c = row_to_col[r];
                if c != d && c != NONE {
                    edges.push((c, d));
                    edges.push((d, c));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut offsets = vec![0usize; n + 1];
        for &(u, _) in &edges {
            offsets[u + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let neighbors = edges.into_iter().map(|e| e.1).collect();
        Self { offsets, neighbors }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// Nested-dissection ordering driven by integer grid coordinates.
///
/// Vertices with `None` coordinates are ordered last, in index order. Each
/// subset is split at the median coordinate of its longer bounding-box axis;
/// vertices on the median line form the separator, and any vertex that still
/// has a neighbor across the cut is moved into the separator.
pub fn nested_dissection(graph: &Graph, coords: &[Option<[i64; 2]>], leaf_size: usize) -> Vec<usize> {
    assert_eq!(graph.len(), coords.len());
    let n = graph.len();
    let mut order = Vec::with_capacity(n);
    let mut side = vec![0u8; n];
    let placed: Vec<usize> = (0..n).filter(|&v| coords[v].is_some()).collect();
    dissect(graph, coords, placed, leaf_size.max(1), &mut side, &mut order);
    order.extend((0..n).filter(|&v| coords[v].is_none()));
    order
}

fn dissect(
    graph: &Graph,
    coords: &[Option<[i64; 2]>],
    set: Vec<usize>,
    leaf_size: usize,
    side: &mut [u8],
    order: &mut Vec<usize>,
) {
    if set.len() <= leaf_size {
        order.extend(set);
        return;
    }
    let mut lo = [i64::MAX; 2];
    let mut hi = [i64::MIN; 2];
    for &v in &set {
        let c = coords[v].unwrap();
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    let axis = if hi[0] - lo[0] >= hi[1] - lo[1] { 0 } else { 1 };
    let mut keys: Vec<i64> = set.iter().map(|&v| coords[v].unwrap()[axis]).collect();
    let mid = keys.len() / 2;
    let (_, &mut cut, _) = keys.select_nth_unstable(mid);

    const LEFT: u8 = 1;
    const RIGHT: u8 = 2;
    const SEP: u8 = 3;
    for &v in &set {
        let k = coords[v].unwrap()[axis];
        side[v] = match k.cmp(&cut) {
            std::cmp::Ordering::Less => LEFT,
            std::cmp::Ordering::Greater => RIGHT,
            std::cmp::Ordering::Equal => SEP,
        };
    }
    for &v in &set {
        if side[v] == LEFT && graph.neighbors(v).iter().any(|&w| side[w] == RIGHT) {
            side[v] = SEP;
        }
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut sep = Vec::new();
    for &v in &set {
        match side[v] {
            LEFT => left.push(v),
            RIGHT => right.push(v),
            _ => sep.push(v),
        }
        side[v] = 0;
    }
    if left.is_empty() || right.is_empty() {
        // Degenerate split (a single line of vertices).
        order.extend(set);
        return;
    }
    dissect(graph, coords, left, leaf_size, side, order);
    dissect(graph, coords, right, leaf_size, side, order);
    order.extend(sep);
}

/// Options controlling [`SparseLu::factor`].
#[derive(Debug, Clone, Default)]
pub struct LuOptions {
    /// Column elimination order; natural order when absent.
    pub col_order: Option<Vec<usize>>,
    /// For each column, the row that should become its pivot when it is
    /// numerically acceptable.
    pub preferred_rows: Option<Vec<usize>>,
    /// Relative threshold for accepting the preferred pivot; `0.1` if zero.
    pub pivot_tolerance: f64,
}

/// LU factors `P A Q = L U` with unit lower-triangular `L`.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    lp: Vec<usize>,
    li: Vec<u32>,
    lx: Vec<f64>,
    up: Vec<usize>,
    ui: Vec<u32>,
    ux: Vec<f64>,
    /// Row `i` of `A` is pivot row `pinv[i]`.
    pinv: Vec<usize>,
    /// Column `k` of the factors is column `q[k]` of `A`.
    q: Vec<usize>,
}

impl SparseLu {
    pub fn factor(a: &CscMatrix, opts: &LuOptions) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension(format!(
                "LU needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.ncols();
        let q: Vec<usize> = match &opts.col_order {
            Some(q) => {
                assert_eq!(q.len(), n);
                q.clone()
            }
            None => (0..n).collect(),
        };
        let tol = if opts.pivot_tolerance > 0.0 { opts.pivot_tolerance } else { 0.1 };

        let guess = 4 * a.nnz() + n;
        let mut lu = SparseLu {
            n,
            lp: Vec::with_capacity(n + 1),
            li: Vec::with_capacity(guess),
            lx: Vec::with_capacity(guess),
            up: Vec::with_capacity(n + 1),
            ui: Vec::with_capacity(guess),
            ux: Vec::with_capacity(guess),
            pinv: vec![NONE; n],
            q,
        };

        let mut x = vec![0.0; n];
        let mut xi = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut pos = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];

        for k in 0..n {
            lu.lp.push(lu.li.len());
            lu.up.push(lu.ui.len());
            let col = lu.q[k];
            let top = lu.reach(a, col, k, &mut xi, &mut stack, &mut pos, &mut mark);

            let (rows, vals) = a.column(col);
            for (&r, &v) in rows.iter().zip(vals) {
                x[r] = v;
            }
            for &j in &xi[top..] {
                let jp = lu.pinv[j];
                if jp == NONE {
                    continue;
                }
                let xj = x[j];
                if xj == 0.0 {
                    continue;
                }
                // Diagonal of L is stored first and equals one.
                for p in lu.lp[jp] + 1..lu.lp[jp + 1] {
                    x[lu.li[p] as usize] -= lu.lx[p] * xj;
                }
            }

            let mut ipiv = NONE;
            let mut amax = -1.0f64;
            for &i in &xi[top..] {
                if lu.pinv[i] == NONE {
                    let t = x[i].abs();
                    if t > amax {
                        amax = t;
                        ipiv = i;
                    }
                } else {
                    lu.ui.push(lu.pinv[i] as u32);
                    lu.ux.push(x[i]);
                }
            }
            if ipiv == NONE || !(amax > 0.0) || !amax.is_finite() {
                return Err(Error::SingularMatrix { column: col });
            }
            if let Some(pref) = &opts.preferred_rows {
                let r = pref[col];
                if r != NONE && lu.pinv[r] == NONE && mark[r] == k && x[r].abs() >= tol * amax {
                    ipiv = r;
                }
            }
            let pivot = x[ipiv];
            lu.ui.push(k as u32);
            lu.ux.push(pivot);
            lu.pinv[ipiv] = k;
            lu.li.push(ipiv as u32);
            lu.lx.push(1.0);
            for &i in &xi[top..] {
                if lu.pinv[i] == NONE {
                    lu.li.push(i as u32);
                    lu.lx.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        lu.lp.push(lu.li.len());
        lu.up.push(lu.ui.len());
        for r in lu.li.iter_mut() {
            *r = lu.pinv[*r as usize] as u32;
        }
        Ok(lu)
    }

    /// Nonzero pattern of `L⁻¹ A(:, col)` in topological order, written to
    /// `xi[top..]`. Rows are visited through the columns of `L` built so far.
    #[allow(clippy::too_many_arguments)]
    fn reach(
        &self,
        a: &CscMatrix,
        col: usize,
        stamp: usize,
        xi: &mut [usize],
        stack: &mut [usize],
        pos: &mut [usize],
        mark: &mut [usize],
    ) -> usize {
        let mut top = self.n;
        let (rows, _) = a.column(col);
        for &start in rows {
            if mark[start] == stamp {
                continue;
            }
            let mut head = 0usize;
            stack[0] = start;
            loop {
                let j = stack[head];
                let jp = self.pinv[j];
                if mark[j] != stamp {
                    mark[j] = stamp;
                    pos[j] = if jp == NONE { 0 } else { self.lp[jp] + 1 };
                }
                let end = if jp == NONE { 0 } else { self.lp[jp + 1] };
                let mut descended = false;
                while pos[j] < end {
                    let i = self.li[pos[j]] as usize;
                    pos[j] += 1;
                    if mark[i] != stamp {
                        head += 1;
                        stack[head] = i;
                        descended = true;
                        break;
                    }
                }
                if !descended {
                    top -= 1;
                    xi[top] = j;
                    if head == 0 {
                        break;
                    }
                    head -= 1;
                }
            }
        }
        top
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of `L` and `U`.
    pub fn fill(&self) -> usize {
        self.li.len() + self.ui.len()
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y = vec![0.0; self.n];
        for (i, &bi) in b.iter().enumerate() {
            y[self.pinv[i]] = bi;
        }
        for j in 0..self.n {
            let yj = y[j];
            if yj == 0.0 {
                continue;
            }
            for p in self.lp[j] + 1..self.lp[j + 1] {
                y[self.li[p] as usize] -= self.lx[p] * yj;
            }
        }
        for j in (0..self.n).rev() {
            // Diagonal of U is stored last in each column.
            let last = self.up[j + 1] - 1;
            y[j] /= self.ux[last];
            let yj = y[j];
            if yj == 0.0 {
                continue;
            }
            for p in self.up[j]..last {
                y[self.ui[p] as usize] -= self.ux[p] * yj;
            }
        }
        let mut x = vec![0.0; self.n];
        for (k, &c) in self.q.iter().enumerate() {
            x[c] = y[k];
        }
        x
    }
}

/// Factors `a` with a nested-dissection column order and diagonal pairing
/// taken from `row_to_col`, which maps every row to the column it is
/// associated with (e.g. a collocation point and the basis function centered
/// there). `coords` gives grid coordinates per column; `None` entries are
/// eliminated last.
pub fn factor_paired(
    a: &CscMatrix,
    row_to_col: &[usize],
    coords: &[Option<[i64; 2]>],
) -> Result<SparseLu> {
    let graph = Graph::from_paired_pattern(a, row_to_col);
    let order = nested_dissection(&graph, coords, 64);
    let mut preferred = vec![NONE; a.ncols()];
    for (r, &c) in row_to_col.iter().enumerate() {
        if c != NONE {
            preferred[c] = r;
        }
    }
    SparseLu::factor(
        a,
        &LuOptions { col_order: Some(order), preferred_rows: Some(preferred), pivot_tolerance: 0.1 },
    )
}
