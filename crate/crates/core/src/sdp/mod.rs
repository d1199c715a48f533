//! Small dense semidefinite programs with block matrix variables and scalar
//! variables.
//!
//! A problem holds symmetric matrix blocks `X_b >= 0`, scalar variables
//! (free or nonnegative), a linear objective and linear `=` / `<=`
//! constraints. [`solve`] runs a primal-dual path-following interior-point
//! method with a Mehrotra-style predictor-corrector step and HKM search
//! directions; everything is dense, which is the right trade at the block
//! sizes this crate produces (tens of rows).
//!
//! A term `(block, r, c, v)` in a [`LinExpr`] contributes `v * X[r][c]`;
//! since blocks are symmetric, off-diagonal terms are canonicalized to the
//! averaged coefficient pair internally.

pub mod eig;
pub mod hermitian;
mod solver;

pub use eig::max_eigpair;
pub use hermitian::HermitianEmbedding;

use nalgebra::DMatrix;
use thiserror::Error;

/// Index of a symmetric matrix block variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockId(pub(crate) usize);

/// Index of a scalar variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScalarId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    Free,
    Nonneg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Eq,
    Le,
}

/// A linear functional over the problem variables plus a constant.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub block_terms: Vec<(BlockId, usize, usize, f64)>,
    pub scalar_terms: Vec<(ScalarId, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn new() -> LinExpr {
        LinExpr::default()
    }

    pub fn block(mut self, b: BlockId, r: usize, c: usize, v: f64) -> LinExpr {
        self.add_block(b, r, c, v);
        self
    }

    pub fn scalar(mut self, s: ScalarId, v: f64) -> LinExpr {
        self.add_scalar(s, v);
        self
    }

    pub fn add_block(&mut self, b: BlockId, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.block_terms.push((b, r, c, v));
        }
    }

    pub fn add_scalar(&mut self, s: ScalarId, v: f64) {
        if v != 0.0 {
            self.scalar_terms.push((s, v));
        }
    }

    pub fn add_constant(&mut self, v: f64) {
        self.constant += v;
    }

    /// Append every term of `other` scaled by `w`.
    pub fn add_scaled(&mut self, other: &LinExpr, w: f64) {
        for &(b, r, c, v) in &other.block_terms {
            self.add_block(b, r, c, w * v);
        }
        for &(s, v) in &other.scalar_terms {
            self.add_scalar(s, w * v);
        }
        self.constant += w * other.constant;
    }

    /// Evaluate against concrete block and scalar values.
    pub fn eval(&self, blocks: &[DMatrix<f64>], scalars: &[f64]) -> f64 {
        let mut acc = self.constant;
        for &(b, r, c, v) in &self.block_terms {
            acc += v * blocks[b.0][(r, c)];
        }
        for &(s, v) in &self.scalar_terms {
            acc += v * scalars[s.0];
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    NumericalFailure,
}

/// Per-iteration log entry; used to audit weak duality and convergence.
#[derive(Debug, Clone)]
pub struct IterStats {
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub mu: f64,
    /// Primal/dual step fractions and centering weight taken FROM this
    /// iterate (zero on the final logged state).
    pub step_primal: f64,
    pub step_dual: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    /// Values of the user matrix blocks.
    pub blocks: Vec<DMatrix<f64>>,
    /// Values of the user scalar variables.
    pub scalars: Vec<f64>,
    /// Dual multiplier per constraint, in the order constraints were added.
    pub duals: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub iter_log: Vec<IterStats>,
}

impl SdpSolution {
    /// Smallest eigenvalue over all blocks (0 when there are none).
    pub fn min_block_eigenvalue(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                b.clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Relative duality gap below which the iterate is declared optimal.
    pub gap_tol: f64,
    /// Relative primal/dual feasibility tolerance.
    pub feas_tol: f64,
    /// Allowed negative slack on block eigenvalues of a reported solution.
    pub psd_tol: f64,
    pub max_iter: usize,
    /// Fraction of the step to the cone boundary taken each iteration.
    pub step_fraction: f64,
    /// Dual objective beyond this bound flags primal infeasibility.
    pub infeasibility_bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            gap_tol: 1e-7,
            feas_tol: 1e-7,
            psd_tol: 1e-8,
            max_iter: 100,
            step_fraction: 0.98,
            infeasibility_bound: 1e12,
        }
    }
}

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("solver option {0} out of range")]
    BadOption(&'static str),
    #[error("block {0} referenced but only {1} blocks declared")]
    BadBlock(usize, usize),
    #[error("scalar {0} referenced but only {1} scalars declared")]
    BadScalar(usize, usize),
    #[error("block {block}: entry ({r},{c}) outside dimension {dim}")]
    BadEntry { block: usize, r: usize, c: usize, dim: usize },
    #[error("block dimension must be >= 1")]
    ZeroDim,
    #[error("non-finite coefficient in {0}")]
    NonFinite(&'static str),
    #[error("eigen error: {0}")]
    Eig(#[from] eig::EigError),
}

/// A semidefinite program under construction.
#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    pub(crate) block_dims: Vec<usize>,
    pub(crate) scalar_kinds: Vec<ScalarKind>,
    pub(crate) objective: LinExpr,
    pub(crate) constraints: Vec<(LinExpr, Sense, f64)>,
}

impl SdpProblem {
    pub fn new() -> SdpProblem {
        SdpProblem::default()
    }

    pub fn add_block(&mut self, dim: usize) -> BlockId {
        self.block_dims.push(dim);
        BlockId(self.block_dims.len() - 1)
    }

    pub fn add_scalar(&mut self, kind: ScalarKind) -> ScalarId {
        self.scalar_kinds.push(kind);
        ScalarId(self.scalar_kinds.len() - 1)
    }

    pub fn set_objective(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    pub fn objective(&self) -> &LinExpr {
        &self.objective
    }

    /// Add `expr (= | <=) rhs`; any constant inside `expr` is folded into
    /// the right-hand side. Returns the constraint index.
    pub fn add_constraint(&mut self, expr: LinExpr, sense: Sense, rhs: f64) -> usize {
        self.constraints.push((expr, sense, rhs));
        self.constraints.len() - 1
    }

    pub fn n_blocks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.scalar_kinds.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn block_dim(&self, b: BlockId) -> usize {
        self.block_dims[b.0]
    }

    pub fn validate(&self) -> Result<(), SdpError> {
        if self.block_dims.contains(&0) {
            return Err(SdpError::ZeroDim);
        }
        let check = |expr: &LinExpr, what: &'static str| -> Result<(), SdpError> {
            for &(b, r, c, v) in &expr.block_terms {
                if b.0 >= self.block_dims.len() {
                    return Err(SdpError::BadBlock(b.0, self.block_dims.len()));
                }
                let dim = self.block_dims[b.0];
                if r >= dim || c >= dim {
                    return Err(SdpError::BadEntry { block: b.0, r, c, dim });
                }
                if !v.is_finite() {
                    return Err(SdpError::NonFinite(what));
                }
            }
            for &(s, v) in &expr.scalar_terms {
                if s.0 >= self.scalar_kinds.len() {
                    return Err(SdpError::BadScalar(s.0, self.scalar_kinds.len()));
                }
                if !v.is_finite() {
                    return Err(SdpError::NonFinite(what));
                }
            }
            if !expr.constant.is_finite() {
                return Err(SdpError::NonFinite(what));
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for (expr, _, rhs) in &self.constraints {
            check(expr, "constraint")?;
            if !rhs.is_finite() {
                return Err(SdpError::NonFinite("constraint rhs"));
            }
        }
        Ok(())
    }

    /// Plain-text sparse dump for cross-checking against external solvers.
    ///
    /// Line format: `<constraint> <block> <row> <col> <value>`, where
    /// constraint `0` is the objective, positive indices are 1-based
    /// constraints, block `0` addresses scalar variables (`row` = `col` =
    /// 1-based scalar index) and positive block indices are 1-based matrix
    /// blocks. A header records dimensions, senses and right-hand sides.
    pub fn dump_sparse(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "blocks {}\n",
            self.block_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        ));
        out.push_str(&format!(
            "scalars {}\n",
            self.scalar_kinds
                .iter()
                .map(|k| match k {
                    ScalarKind::Free => "free",
                    ScalarKind::Nonneg => "nonneg",
                })
                .collect::<Vec<_>>()
                .join(" ")
        ));
        let mut rhs_line = String::from("rhs");
        for (expr, sense, rhs) in &self.constraints {
            let s = match sense {
                Sense::Eq => "=",
                Sense::Le => "<=",
            };
            rhs_line.push_str(&format!(" {}{}", s, rhs - expr.constant));
        }
        out.push_str(&rhs_line);
        out.push('\n');
        let emit = |idx: usize, expr: &LinExpr, out: &mut String| {
            for &(b, r, c, v) in &expr.block_terms {
                out.push_str(&format!("{} {} {} {} {}\n", idx, b.0 + 1, r + 1, c + 1, v));
            }
            for &(s, v) in &expr.scalar_terms {
                out.push_str(&format!("{} 0 {} {} {}\n", idx, s.0 + 1, s.0 + 1, v));
            }
        };
        emit(0, &self.objective, &mut out);
        for (i, (expr, _, _)) in self.constraints.iter().enumerate() {
            emit(i + 1, expr, &mut out);
        }
        out
    }
}

/// Solve `problem` to the tolerances in `options`.
pub fn solve(problem: &SdpProblem, options: &SolverOptions) -> Result<SdpSolution, SdpError> {
    if !(options.gap_tol > 0.0) {
        return Err(SdpError::BadOption("gap_tol"));
    }
    if !(options.feas_tol > 0.0) {
        return Err(SdpError::BadOption("feas_tol"));
    }
    if !(options.psd_tol > 0.0) {
        return Err(SdpError::BadOption("psd_tol"));
    }
    if !(options.step_fraction > 0.0 && options.step_fraction < 1.0) {
        return Err(SdpError::BadOption("step_fraction"));
    }
    problem.validate()?;
    Ok(solver::run(problem, options))
}
