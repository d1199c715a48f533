//! Infeasible-start primal-dual path following with HKM directions and a
//! Mehrotra predictor-corrector step.
//!
//! Internally the problem is brought to the standard conic form
//!
//! ```text
//! min <C, X> + c_lp . x + c_f . u
//! s.t. <A_i, X> + a_i . x + f_i . u = b_i     i = 1..m
//!      X >= 0 (blockwise), x >= 0, u free
//! ```
//!
//! where `x` collects nonnegative scalars plus one slack per `<=` row and
//! `u` collects the free scalars. The Schur complement
//! `M_ij = <A_i, X A_j S^-1>` (plus the diagonal `x/s` term for the
//! nonnegative part) is dense, symmetric positive definite and factored with
//! Cholesky once per iteration; free variables are eliminated through the
//! augmented system `[M F; F' 0]`.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{
    IterStats, LinExpr, ScalarKind, SdpProblem, SdpSolution, Sense, SolveStatus, SolverOptions,
};

/// Symmetric sparse coefficients: entry `(r, c, v)` with `r <= c` means the
/// full matrix holds `v` at both `(r, c)` and `(c, r)`.
#[derive(Debug, Clone, Default)]
struct SymCoeffs {
    entries: Vec<(usize, usize, f64)>,
}

impl SymCoeffs {
    fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(r, c, v)| if r == c { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }

    /// `<A, B>` for a dense, possibly unsymmetric `B`.
    fn inner(&self, b: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        for &(r, c, v) in &self.entries {
            if r == c {
                acc += v * b[(r, r)];
            } else {
                acc += v * (b[(r, c)] + b[(c, r)]);
            }
        }
        acc
    }

    /// `dense += w * A`.
    fn add_to(&self, dense: &mut DMatrix<f64>, w: f64) {
        for &(r, c, v) in &self.entries {
            dense[(r, c)] += w * v;
            if r != c {
                dense[(c, r)] += w * v;
            }
        }
    }

    /// Row indices carrying nonzeros.
    fn touched_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .entries
            .iter()
            .flat_map(|&(r, c, _)| [r, c])
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

#[derive(Debug, Clone, Default)]
struct Row {
    blocks: Vec<(usize, SymCoeffs)>,
    lp: Vec<(usize, f64)>,
    free: Vec<(usize, f64)>,
    b: f64,
}

impl Row {
    fn norm(&self) -> f64 {
        let blk: f64 = self.blocks.iter().map(|(_, s)| s.norm().powi(2)).sum();
        let lp: f64 = self.lp.iter().map(|&(_, v)| v * v).sum();
        let fr: f64 = self.free.iter().map(|&(_, v)| v * v).sum();
        (blk + lp + fr).sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
enum ScalarLoc {
    Lp(usize),
    Free(usize),
}

struct StdForm {
    dims: Vec<usize>,
    n_lp: usize,
    n_free: usize,
    rows: Vec<Row>,
    c_blocks: Vec<SymCoeffs>,
    c_lp: Vec<f64>,
    c_free: Vec<f64>,
    obj_const: f64,
    scalar_loc: Vec<ScalarLoc>,
    /// Constraint indices touching each block, ascending.
    block_rows: Vec<Vec<usize>>,
    /// `(row, coeff)` pairs per LP variable.
    lp_rows: Vec<Vec<(usize, f64)>>,
}

fn canonicalize(
    expr: &LinExpr,
    scalar_loc: &[ScalarLoc],
    n_blocks: usize,
) -> (Vec<(usize, SymCoeffs)>, Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let mut by_block: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    for &(b, r, c, v) in &expr.block_terms {
        debug_assert!(b.0 < n_blocks);
        let (lo, hi) = if r <= c { (r, c) } else { (c, r) };
        let w = if r == c { v } else { v * 0.5 };
        *by_block.entry(b.0).or_default().entry((lo, hi)).or_insert(0.0) += w;
    }
    let blocks = by_block
        .into_iter()
        .map(|(b, m)| {
            let entries = m
                .into_iter()
                .filter(|&(_, v)| v != 0.0)
                .map(|((r, c), v)| (r, c, v))
                .collect();
            (b, SymCoeffs { entries })
        })
        .collect();
    let mut lp: BTreeMap<usize, f64> = BTreeMap::new();
    let mut free: BTreeMap<usize, f64> = BTreeMap::new();
    for &(s, v) in &expr.scalar_terms {
        match scalar_loc[s.0] {
            ScalarLoc::Lp(i) => *lp.entry(i).or_insert(0.0) += v,
            ScalarLoc::Free(i) => *free.entry(i).or_insert(0.0) += v,
        }
    }
    (
        blocks,
        lp.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        free.into_iter().filter(|&(_, v)| v != 0.0).collect(),
    )
}

impl StdForm {
    fn build(problem: &SdpProblem) -> StdForm {
        let n_nonneg = problem
            .scalar_kinds
            .iter()
            .filter(|k| **k == ScalarKind::Nonneg)
            .count();
        let n_slack = problem
            .constraints
            .iter()
            .filter(|(_, s, _)| *s == Sense::Le)
            .count();
        let mut scalar_loc = Vec::with_capacity(problem.scalar_kinds.len());
        let mut lp_i = 0;
        let mut free_i = 0;
        for kind in &problem.scalar_kinds {
            match kind {
                ScalarKind::Nonneg => {
                    scalar_loc.push(ScalarLoc::Lp(lp_i));
                    lp_i += 1;
                }
                ScalarKind::Free => {
                    scalar_loc.push(ScalarLoc::Free(free_i));
                    free_i += 1;
                }
            }
        }
        let n_lp = n_nonneg + n_slack;
        let n_free = free_i;

        let mut rows = Vec::with_capacity(problem.constraints.len());
        let mut slack = n_nonneg;
        for (expr, sense, rhs) in &problem.constraints {
            let (blocks, mut lp, free) = canonicalize(expr, &scalar_loc, problem.block_dims.len());
            if *sense == Sense::Le {
                lp.push((slack, 1.0));
                slack += 1;
            }
            rows.push(Row { blocks, lp, free, b: rhs - expr.constant });
        }

        let (c_blocks_sparse, c_lp_sparse, c_free_sparse) =
            canonicalize(&problem.objective, &scalar_loc, problem.block_dims.len());
        let mut c_blocks: Vec<SymCoeffs> = vec![SymCoeffs::default(); problem.block_dims.len()];
        for (b, coeffs) in c_blocks_sparse {
            c_blocks[b] = coeffs;
        }
        let mut c_lp = vec![0.0; n_lp];
        for (i, v) in c_lp_sparse {
            c_lp[i] = v;
        }
        let mut c_free = vec![0.0; n_free];
        for (i, v) in c_free_sparse {
            c_free[i] = v;
        }

        let mut block_rows = vec![Vec::new(); problem.block_dims.len()];
        let mut lp_rows = vec![Vec::new(); n_lp];
        for (i, row) in rows.iter().enumerate() {
            for (b, _) in &row.blocks {
                block_rows[*b].push(i);
            }
            for &(d, v) in &row.lp {
                lp_rows[d].push((i, v));
            }
        }

        StdForm {
            dims: problem.block_dims.clone(),
            n_lp,
            n_free,
            rows,
            c_blocks,
            c_lp,
            c_free,
            obj_const: problem.objective.constant,
            scalar_loc,
            block_rows,
            lp_rows,
        }
    }

    fn cone_dim(&self) -> f64 {
        (self.dims.iter().sum::<usize>() + self.n_lp) as f64
    }
}

struct State {
    x: Vec<DMatrix<f64>>,
    s: Vec<DMatrix<f64>>,
    x_lp: DVector<f64>,
    s_lp: DVector<f64>,
    y: DVector<f64>,
    u: DVector<f64>,
}

struct Directions {
    dx: Vec<DMatrix<f64>>,
    ds: Vec<DMatrix<f64>>,
    dx_lp: DVector<f64>,
    ds_lp: DVector<f64>,
    dy: DVector<f64>,
    du: DVector<f64>,
}

struct Residuals {
    rp: DVector<f64>,
    rd: Vec<DMatrix<f64>>,
    rd_lp: DVector<f64>,
    rg: DVector<f64>,
}

fn adjoint(std: &StdForm, dy: &DVector<f64>, block: usize, dim: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(dim, dim);
    for &i in &std.block_rows[block] {
        let w = dy[i];
        if w != 0.0 {
            if let Some((_, coeffs)) = std.rows[i].blocks.iter().find(|(b, _)| *b == block) {
                coeffs.add_to(&mut acc, w);
            }
        }
    }
    acc
}

fn residuals(std: &StdForm, st: &State) -> Residuals {
    let m = std.rows.len();
    let mut rp = DVector::zeros(m);
    for (i, row) in std.rows.iter().enumerate() {
        let mut v = row.b;
        for (b, coeffs) in &row.blocks {
            v -= coeffs.inner(&st.x[*b]);
        }
        for &(d, w) in &row.lp {
            v -= w * st.x_lp[d];
        }
        for &(f, w) in &row.free {
            v -= w * st.u[f];
        }
        rp[i] = v;
    }
    let mut rd = Vec::with_capacity(std.dims.len());
    for (b, &dim) in std.dims.iter().enumerate() {
        let mut m_b = DMatrix::zeros(dim, dim);
        std.c_blocks[b].add_to(&mut m_b, 1.0);
        m_b -= adjoint(std, &st.y, b, dim);
        m_b -= &st.s[b];
        rd.push(m_b);
    }
    let mut rd_lp = DVector::zeros(std.n_lp);
    for d in 0..std.n_lp {
        let mut v = std.c_lp[d] - st.s_lp[d];
        for &(i, w) in &std.lp_rows[d] {
            v -= w * st.y[i];
        }
        rd_lp[d] = v;
    }
    let mut rg = DVector::zeros(std.n_free);
    for (i, row) in std.rows.iter().enumerate() {
        for &(f, w) in &row.free {
            rg[f] -= w * st.y[i];
        }
    }
    for f in 0..std.n_free {
        rg[f] += std.c_free[f];
    }
    Residuals { rp, rd, rd_lp, rg }
}

fn primal_objective(std: &StdForm, st: &State) -> f64 {
    let mut v = std.obj_const;
    for (b, coeffs) in std.c_blocks.iter().enumerate() {
        v += coeffs.inner(&st.x[b]);
    }
    for d in 0..std.n_lp {
        v += std.c_lp[d] * st.x_lp[d];
    }
    for f in 0..std.n_free {
        v += std.c_free[f] * st.u[f];
    }
    v
}

fn dual_objective(std: &StdForm, st: &State) -> f64 {
    let mut v = std.obj_const;
    for (i, row) in std.rows.iter().enumerate() {
        v += row.b * st.y[i];
    }
    v
}

fn mu(std: &StdForm, st: &State) -> f64 {
    let mut acc = 0.0;
    for b in 0..std.dims.len() {
        acc += st.x[b].dot(&st.s[b]);
    }
    acc += st.x_lp.dot(&st.s_lp);
    acc / std.cone_dim().max(1.0)
}

/// `V = X * (A_i * Sinv)` using the sparsity of `A_i`.
fn x_a_sinv(x: &DMatrix<f64>, sinv: &DMatrix<f64>, a: &SymCoeffs) -> DMatrix<f64> {
    let n = x.nrows();
    let rows = a.touched_rows();
    // T[p, :] for touched rows only.
    let mut t = DMatrix::zeros(rows.len(), n);
    let pos = |p: usize| rows.binary_search(&p).unwrap();
    for &(r, c, v) in &a.entries {
        // A[r,c] contributes v * Sinv[c,:] to T[r,:] and (r != c) the mirror.
        let pr = pos(r);
        for k in 0..n {
            t[(pr, k)] += v * sinv[(c, k)];
        }
        if r != c {
            let pc = pos(c);
            for k in 0..n {
                t[(pc, k)] += v * sinv[(r, k)];
            }
        }
    }
    let mut out = DMatrix::zeros(n, n);
    for (pi, &p) in rows.iter().enumerate() {
        let col = x.column(p);
        let row = t.row(pi);
        out.ger(1.0, &col, &row.transpose(), 1.0);
    }
    out
}

/// Largest step `alpha` with `X + alpha dX` staying positive semidefinite.
fn max_step_psd(x: &DMatrix<f64>, dx: &DMatrix<f64>) -> Option<f64> {
    let n = x.nrows();
    let chol = Cholesky::new(x.clone()).or_else(|| {
        let bump = 1e-12 * (x.trace().abs() / n as f64 + 1.0);
        Cholesky::new(x + DMatrix::identity(n, n) * bump)
    })?;
    let l = chol.l();
    // W = L^-1 dX L^-T
    let w0 = l.solve_lower_triangular(dx)?;
    let w1t = l.solve_lower_triangular(&w0.transpose())?;
    let w = (w1t.transpose() + w1t) * 0.5;
    let min_eig = w
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig >= -1e-14 {
        Some(f64::INFINITY)
    } else {
        Some(-1.0 / min_eig)
    }
}

fn max_step_lp(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            alpha = alpha.min(-x[i] / dx[i]);
        }
    }
    alpha
}

struct Kkt {
    chol: Cholesky<f64, nalgebra::Dyn>,
    /// `M^-1 F` and the Cholesky of `F^T M^-1 F` when free variables exist.
    g: Option<(DMatrix<f64>, Cholesky<f64, nalgebra::Dyn>)>,
    f_mat: DMatrix<f64>,
}

fn build_kkt(std: &StdForm, st: &State, sinv: &[DMatrix<f64>]) -> Option<Kkt> {
    let m = std.rows.len();
    let mut m_mat: DMatrix<f64> = DMatrix::zeros(m, m);
    for (b, &_dim) in std.dims.iter().enumerate() {
        let rows = &std.block_rows[b];
        for (ii, &i) in rows.iter().enumerate() {
            let a_i = &std.rows[i].blocks.iter().find(|(bb, _)| *bb == b).unwrap().1;
            let v = x_a_sinv(&st.x[b], &sinv[b], a_i);
            for &j in rows.iter().take(ii + 1) {
                let a_j = &std.rows[j].blocks.iter().find(|(bb, _)| *bb == b).unwrap().1;
                let add = a_j.inner(&v);
                m_mat[(i, j)] += add;
                if i != j {
                    m_mat[(j, i)] += add;
                }
            }
        }
    }
    for d in 0..std.n_lp {
        let w = st.x_lp[d] / st.s_lp[d];
        let touch = &std.lp_rows[d];
        for (ii, &(i, ai)) in touch.iter().enumerate() {
            for &(j, aj) in touch.iter().take(ii + 1) {
                let add = ai * aj * w;
                m_mat[(i, j)] += add;
                if i != j {
                    m_mat[(j, i)] += add;
                }
            }
        }
    }

    let mut f_mat = DMatrix::zeros(m, std.n_free);
    for (i, row) in std.rows.iter().enumerate() {
        for &(f, w) in &row.free {
            f_mat[(i, f)] = w;
        }
    }

    let scale = m_mat.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    let chol = loop {
        let mut trial = m_mat.clone();
        if reg > 0.0 {
            for i in 0..m {
                trial[(i, i)] += reg;
            }
        }
        match Cholesky::new(trial) {
            Some(c) => break c,
            None => {
                reg = if reg == 0.0 { 1e-13 * scale } else { reg * 100.0 };
                if reg > 1e-5 * scale {
                    return None;
                }
            }
        }
    };

    let g = if std.n_free > 0 {
        let minv_f = chol.solve(&f_mat);
        let h = f_mat.transpose() * &minv_f;
        let h = (&h + h.transpose()) * 0.5;
        let mut reg_h = 0.0;
        let h_scale = h.diagonal().amax().max(1e-300);
        let h_chol = loop {
            let mut trial = h.clone();
            if reg_h > 0.0 {
                for i in 0..std.n_free {
                    trial[(i, i)] += reg_h;
                }
            }
            match Cholesky::new(trial) {
                Some(c) => break c,
                None => {
                    reg_h = if reg_h == 0.0 { 1e-13 * h_scale } else { reg_h * 100.0 };
                    if reg_h > 1e-5 * h_scale {
                        return None;
                    }
                }
            }
        };
        Some((minv_f, h_chol))
    } else {
        None
    };

    Some(Kkt { chol, g, f_mat })
}

/// One Newton solve against the factored KKT system. `nu` is the
/// centrality target and `corr` the optional Mehrotra second-order term.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    std: &StdForm,
    st: &State,
    res: &Residuals,
    sinv: &[DMatrix<f64>],
    kkt: &Kkt,
    nu: f64,
    corr_psd: Option<&[DMatrix<f64>]>,
    corr_lp: Option<&DVector<f64>>,
) -> Directions {
    // Z per block and z per LP entry.
    let mut z_blocks = Vec::with_capacity(std.dims.len());
    for b in 0..std.dims.len() {
        let mut num = &st.x[b] * &res.rd[b];
        if let Some(corr) = corr_psd {
            num += &corr[b];
        }
        let mut z = -(&num * &sinv[b]) - &st.x[b];
        if nu != 0.0 {
            z += &sinv[b] * nu;
        }
        z_blocks.push(z);
    }
    let mut z_lp = DVector::zeros(std.n_lp);
    for d in 0..std.n_lp {
        let mut num = st.x_lp[d] * res.rd_lp[d];
        if let Some(corr) = corr_lp {
            num += corr[d];
        }
        z_lp[d] = (nu - num) / st.s_lp[d] - st.x_lp[d];
    }

    let mut rhs = res.rp.clone();
    for (i, row) in std.rows.iter().enumerate() {
        let mut v = 0.0;
        for (b, coeffs) in &row.blocks {
            v += coeffs.inner(&z_blocks[*b]);
        }
        for &(d, w) in &row.lp {
            v += w * z_lp[d];
        }
        rhs[i] -= v;
    }

    let w1 = kkt.chol.solve(&rhs);
    let (dy, du) = match &kkt.g {
        Some((minv_f, h_chol)) => {
            let mut rhs_u = kkt.f_mat.transpose() * &w1;
            rhs_u -= &res.rg;
            let du = h_chol.solve(&rhs_u);
            let dy = w1 - minv_f * &du;
            (dy, du)
        }
        None => (w1, DVector::zeros(0)),
    };

    let mut dx = Vec::with_capacity(std.dims.len());
    let mut ds = Vec::with_capacity(std.dims.len());
    for (b, &dim) in std.dims.iter().enumerate() {
        let astar = adjoint(std, &dy, b, dim);
        let ds_b = &res.rd[b] - &astar;
        let dx_b = &z_blocks[b] + &st.x[b] * &astar * &sinv[b];
        let dx_b = (&dx_b + dx_b.transpose()) * 0.5;
        dx.push(dx_b);
        ds.push(ds_b);
    }
    let mut dx_lp = DVector::zeros(std.n_lp);
    let mut ds_lp = DVector::zeros(std.n_lp);
    for d in 0..std.n_lp {
        let mut aty = 0.0;
        for &(i, w) in &std.lp_rows[d] {
            aty += w * dy[i];
        }
        ds_lp[d] = res.rd_lp[d] - aty;
        dx_lp[d] = z_lp[d] + st.x_lp[d] * aty / st.s_lp[d];
    }

    Directions { dx, ds, dx_lp, ds_lp, dy, du }
}

fn step_lengths(std: &StdForm, st: &State, dir: &Directions) -> Option<(f64, f64)> {
    let mut ap = f64::INFINITY;
    let mut ad = f64::INFINITY;
    for b in 0..std.dims.len() {
        ap = ap.min(max_step_psd(&st.x[b], &dir.dx[b])?);
        ad = ad.min(max_step_psd(&st.s[b], &dir.ds[b])?);
    }
    ap = ap.min(max_step_lp(&st.x_lp, &dir.dx_lp));
    ad = ad.min(max_step_lp(&st.s_lp, &dir.ds_lp));
    Some((ap, ad))
}

pub(super) fn run(problem: &SdpProblem, options: &SolverOptions) -> SdpSolution {
    let std = StdForm::build(problem);
    let m = std.rows.len();

    // Norm-aware interior start.
    let mut max_ratio: f64 = 1.0;
    for row in &std.rows {
        max_ratio = max_ratio.max(row.b.abs() / (1.0 + row.norm()));
    }
    let c_norm = {
        let blk: f64 = std.c_blocks.iter().map(|c| c.norm().powi(2)).sum();
        let lp: f64 = std.c_lp.iter().map(|v| v * v).sum();
        let fr: f64 = std.c_free.iter().map(|v| v * v).sum();
        (blk + lp + fr).sqrt()
    };
    let tau_p = 10.0 * max_ratio.max(1.0);
    let tau_d = 10.0 * (1.0 + c_norm / (std.cone_dim().sqrt().max(1.0))).max(1.0);

    let mut st = State {
        x: std.dims.iter().map(|&d| DMatrix::identity(d, d) * tau_p).collect(),
        s: std.dims.iter().map(|&d| DMatrix::identity(d, d) * tau_d).collect(),
        x_lp: DVector::from_element(std.n_lp, tau_p),
        s_lp: DVector::from_element(std.n_lp, tau_d),
        y: DVector::zeros(m),
        u: DVector::zeros(std.n_free),
    };

    let b_norm = {
        let v: f64 = std.rows.iter().map(|r| r.b * r.b).sum();
        v.sqrt()
    };

    let mut iter_log = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut last_alpha_p = 1.0;
    let mut stall_count = 0;

    for iter in 0..options.max_iter {
        let res = residuals(&std, &st);
        let pobj = primal_objective(&std, &st);
        let dobj = dual_objective(&std, &st);
        let mu_now = mu(&std, &st);

        let prim_infeas = res.rp.norm() / (1.0 + b_norm);
        let dual_infeas = {
            let blk: f64 = res.rd.iter().map(|r| r.norm_squared()).sum();
            (blk + res.rd_lp.norm_squared() + res.rg.norm_squared()).sqrt() / (1.0 + c_norm)
        };
        // Objective gap and complementarity gap agree on clean solves; near
        // degenerate optima the objective gap is inflated by residual terms
        // scaled by large multipliers, while <X, S> stays honest.
        let scale = 1.0 + pobj.abs() + dobj.abs();
        let rel_gap_objs = (pobj - dobj).abs() / scale;
        let rel_gap_compl = (mu_now * std.cone_dim()).abs() / scale;
        let rel_gap = rel_gap_objs.min(rel_gap_compl);

        iter_log.push(IterStats {
            primal_objective: pobj,
            dual_objective: dobj,
            primal_infeasibility: prim_infeas,
            dual_infeasibility: dual_infeas,
            mu: mu_now,
            step_primal: 0.0,
            step_dual: 0.0,
            sigma: 0.0,
        });

        if prim_infeas <= options.feas_tol && dual_infeas <= options.feas_tol && rel_gap <= options.gap_tol
        {
            // Interior iterates are positive definite by construction;
            // guard the reported contract anyway.
            let min_eig = st
                .x
                .iter()
                .flat_map(|b| b.clone().symmetric_eigenvalues().iter().cloned().collect::<Vec<_>>())
                .chain(st.x_lp.iter().cloned())
                .fold(0.0f64, f64::min);
            if min_eig >= -options.psd_tol {
                status = SolveStatus::Optimal;
                break;
            }
        }
        if dobj > options.infeasibility_bound && last_alpha_p < 1e-3 {
            status = SolveStatus::Infeasible;
            break;
        }
        if pobj < -options.infeasibility_bound {
            status = SolveStatus::NumericalFailure;
            break;
        }

        iterations = iter + 1;

        let sinv: Option<Vec<DMatrix<f64>>> = std
            .dims
            .iter()
            .enumerate()
            .map(|(b, &dim)| {
                Cholesky::new(st.s[b].clone())
                    .or_else(|| {
                        let bump = 1e-13 * (st.s[b].trace().abs() / dim as f64 + 1.0);
                        Cholesky::new(&st.s[b] + DMatrix::identity(dim, dim) * bump)
                    })
                    .map(|c| c.inverse())
            })
            .collect();
        let Some(sinv) = sinv else {
            status = SolveStatus::NumericalFailure;
            break;
        };

        let Some(kkt) = build_kkt(&std, &st, &sinv) else {
            status = SolveStatus::NumericalFailure;
            break;
        };

        // Predictor (affine scaling direction).
        let aff = newton_direction(&std, &st, &res, &sinv, &kkt, 0.0, None, None);
        let Some((ap_aff, ad_aff)) = step_lengths(&std, &st, &aff) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let ap_aff = ap_aff.min(1.0);
        let ad_aff = ad_aff.min(1.0);

        let mut gap_aff = 0.0;
        for b in 0..std.dims.len() {
            let xa = &st.x[b] + &aff.dx[b] * ap_aff;
            let sa = &st.s[b] + &aff.ds[b] * ad_aff;
            gap_aff += xa.dot(&sa);
        }
        for d in 0..std.n_lp {
            gap_aff += (st.x_lp[d] + ap_aff * aff.dx_lp[d]) * (st.s_lp[d] + ad_aff * aff.ds_lp[d]);
        }
        let mu_aff = gap_aff / std.cone_dim().max(1.0);
        let sigma = (mu_aff / mu_now).powi(3).clamp(1e-10, 1.0);

        // Corrector with second-order term.
        let corr_psd: Vec<DMatrix<f64>> = (0..std.dims.len())
            .map(|b| &aff.dx[b] * &aff.ds[b])
            .collect();
        let corr_lp = DVector::from_fn(std.n_lp, |d, _| aff.dx_lp[d] * aff.ds_lp[d]);
        let dir = newton_direction(
            &std,
            &st,
            &res,
            &sinv,
            &kkt,
            sigma * mu_now,
            Some(&corr_psd),
            Some(&corr_lp),
        );
        let Some((ap_max, ad_max)) = step_lengths(&std, &st, &dir) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        // Back off from the boundary harder when steps are short; pushing
        // the full configured fraction there stalls the iteration against
        // the cone.
        let gamma = (0.9 + 0.09 * ap_max.min(ad_max).min(1.0)).min(options.step_fraction);
        let ap = (gamma * ap_max).min(1.0);
        let ad = (gamma * ad_max).min(1.0);

        for b in 0..std.dims.len() {
            st.x[b] += &dir.dx[b] * ap;
            st.s[b] += &dir.ds[b] * ad;
            // Symmetrize against drift.
            st.x[b] = (&st.x[b] + st.x[b].transpose()) * 0.5;
            st.s[b] = (&st.s[b] + st.s[b].transpose()) * 0.5;
        }
        st.x_lp += &dir.dx_lp * ap;
        st.s_lp += &dir.ds_lp * ad;
        st.y += &dir.dy * ad;
        st.u += &dir.du * ap;

        if let Some(last) = iter_log.last_mut() {
            last.step_primal = ap;
            last.step_dual = ad;
            last.sigma = sigma;
        }
        last_alpha_p = ap;
        if ap < 1e-10 && ad < 1e-10 {
            stall_count += 1;
            if stall_count >= 3 {
                status = SolveStatus::NumericalFailure;
                break;
            }
        } else {
            stall_count = 0;
        }
    }

    // Final stats from the live state; the loop may have stepped past the
    // last logged iterate (max_iter exhaustion).
    let res = residuals(&std, &st);
    let pobj = primal_objective(&std, &st);
    let dobj = dual_objective(&std, &st);
    if iter_log.len() <= iterations {
        let dual_infeas = {
            let blk: f64 = res.rd.iter().map(|r| r.norm_squared()).sum();
            (blk + res.rd_lp.norm_squared() + res.rg.norm_squared()).sqrt() / (1.0 + c_norm)
        };
        iter_log.push(IterStats {
            primal_objective: pobj,
            dual_objective: dobj,
            primal_infeasibility: res.rp.norm() / (1.0 + b_norm),
            dual_infeasibility: dual_infeas,
            mu: mu(&std, &st),
            step_primal: 0.0,
            step_dual: 0.0,
            sigma: 0.0,
        });
    }

    let scalars = std
        .scalar_loc
        .iter()
        .map(|loc| match loc {
            ScalarLoc::Lp(i) => st.x_lp[*i],
            ScalarLoc::Free(i) => st.u[*i],
        })
        .collect();

    SdpSolution {
        blocks: st.x,
        scalars,
        duals: st.y.iter().cloned().collect(),
        primal_objective: pobj,
        dual_objective: dobj,
        status,
        iterations,
        iter_log,
    }
}
