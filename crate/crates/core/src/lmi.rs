//! Lyapunov-Krasovskii LMI assembly, certificate verification, and the
//! functional / cost-bound evaluations.
//!
//! The stability conditions for the two-mode closed loop are linear matrix
//! inequalities in ten unknown blocks: `P1, S1, S2` (symmetric positive
//! definite), the Moon-inequality slacks `W1, W2, W3, M1, M2`, and the free
//! multipliers `P2, P3`. Everything here is affine in those unknowns, so
//! constraints are represented by [`AffineMat`]: a constant matrix plus one
//! coefficient matrix per scalar decision variable.
//!
//! Certificates returned by a solver are never trusted: [`verify_assignment`]
//! re-checks every constraint with a symmetric eigensolver and explicit
//! margins, and the solve layer refuses to report feasibility unless that
//! check passes.

use crate::error::{Error, Result};
use crate::model::ClosedLoopMatrices;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Matrix-valued expression affine in the scalar decision variables of a
/// [`VarLayout`]: `F(x) = constant + sum_v x[v] * coeffs[v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMat {
    pub nrows: usize,
    pub ncols: usize,
    pub constant: DMatrix<f64>,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl AffineMat {
    pub fn zeros(nrows: usize, ncols: usize, num_vars: usize) -> Self {
        Self {
            nrows,
            ncols,
            constant: DMatrix::zeros(nrows, ncols),
            coeffs: vec![DMatrix::zeros(nrows, ncols); num_vars],
        }
    }

    pub fn from_const(constant: DMatrix<f64>, num_vars: usize) -> Self {
        let (nrows, ncols) = constant.shape();
        Self {
            nrows,
            ncols,
            coeffs: vec![DMatrix::zeros(nrows, ncols); num_vars],
            constant,
        }
    }

    fn assert_same_shape(&self, other: &Self) {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        assert_eq!(self.coeffs.len(), other.coeffs.len());
    }

    pub fn add(&self, other: &Self) -> Self {
        self.assert_same_shape(other);
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            constant: &self.constant + &other.constant,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.assert_same_shape(other);
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            constant: &self.constant - &other.constant,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            constant: &self.constant * s,
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            constant: self.constant.transpose(),
            coeffs: self.coeffs.iter().map(|c| c.transpose()).collect(),
        }
    }

    /// Left multiply by a constant matrix: `C * F(x)`.
    pub fn left_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(c.ncols(), self.nrows);
        Self {
            nrows: c.nrows(),
            ncols: self.ncols,
            constant: c * &self.constant,
            coeffs: self.coeffs.iter().map(|f| c * f).collect(),
        }
    }

    /// Right multiply by a constant matrix: `F(x) * C`.
    pub fn right_mul(&self, c: &DMatrix<f64>) -> Self {
        assert_eq!(self.ncols, c.nrows());
        Self {
            nrows: self.nrows,
            ncols: c.ncols(),
            constant: &self.constant * c,
            coeffs: self.coeffs.iter().map(|f| f * c).collect(),
        }
    }

    /// Places this expression as a block of a larger zero expression.
    pub fn embed(&self, nrows: usize, ncols: usize, row: usize, col: usize) -> Self {
        assert!(row + self.nrows <= nrows && col + self.ncols <= ncols);
        let place = |m: &DMatrix<f64>| {
            let mut big = DMatrix::zeros(nrows, ncols);
            big.view_mut((row, col), (self.nrows, self.ncols)).copy_from(m);
            big
        };
        Self {
            nrows,
            ncols,
            constant: place(&self.constant),
            coeffs: self.coeffs.iter().map(place).collect(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        assert_eq!(x.len(), self.coeffs.len());
        let mut out = self.constant.clone();
        for (xv, f) in x.iter().zip(&self.coeffs) {
            if *xv != 0.0 {
                out += f * *xv;
            }
        }
        out
    }
}

/// One unknown matrix block in a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct VarBlock {
    pub name: String,
    pub dim: usize,
    pub symmetric: bool,
    pub offset: usize,
}

impl VarBlock {
    pub fn len(&self) -> usize {
        if self.symmetric {
            self.dim * (self.dim + 1) / 2
        } else {
            self.dim * self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps named matrix unknowns onto a flat vector of scalar decision
/// variables. Symmetric blocks store their lower triangle row-major;
/// general blocks store all entries row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct VarLayout {
    pub blocks: Vec<VarBlock>,
    num_vars: usize,
}

/// Block names of the stability certificate, in layout order.
pub const CLKF_BLOCKS: [(&str, bool); 10] = [
    ("P1", true),
    ("S1", true),
    ("S2", true),
    ("W1", true),
    ("W2", false),
    ("W3", true),
    ("M1", false),
    ("M2", false),
    ("P2", false),
    ("P3", false),
];

impl VarLayout {
    pub fn new(blocks: Vec<(&str, usize, bool)>) -> Self {
        let mut out = Vec::with_capacity(blocks.len());
        let mut offset = 0;
        for (name, dim, symmetric) in blocks {
            let b = VarBlock {
                name: name.to_string(),
                dim,
                symmetric,
                offset,
            };
            offset += b.len();
            out.push(b);
        }
        Self {
            blocks: out,
            num_vars: offset,
        }
    }

    /// Standard certificate layout for stacked dimension `n`.
    pub fn clkf(n: usize) -> Self {
        Self::new(CLKF_BLOCKS.iter().map(|&(name, sym)| (name, n, sym)).collect())
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn block(&self, name: &str) -> Result<&VarBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::MalformedSystem(format!("unknown block {name}")))
    }

    /// Affine expression equal to the named unknown matrix.
    pub fn var(&self, name: &str) -> Result<AffineMat> {
        let b = self.block(name)?;
        let mut m = AffineMat::zeros(b.dim, b.dim, self.num_vars);
        if b.symmetric {
            let mut idx = b.offset;
            for i in 0..b.dim {
                for j in 0..=i {
                    m.coeffs[idx][(i, j)] = 1.0;
                    if i != j {
                        m.coeffs[idx][(j, i)] = 1.0;
                    }
                    idx += 1;
                }
            }
        } else {
            for i in 0..b.dim {
                for j in 0..b.dim {
                    m.coeffs[b.offset + i * b.dim + j][(i, j)] = 1.0;
                }
            }
        }
        Ok(m)
    }

    /// Writes a concrete matrix value for the named block into `x`.
    pub fn pack(&self, name: &str, value: &DMatrix<f64>, x: &mut [f64]) -> Result<()> {
        let b = self.block(name)?;
        if value.shape() != (b.dim, b.dim) {
            return Err(Error::DimensionMismatch(format!(
                "block {name} expects {0}x{0}, got {1}x{2}",
                b.dim,
                value.nrows(),
                value.ncols()
            )));
        }
        if x.len() != self.num_vars {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} variables, layout has {}",
                x.len(),
                self.num_vars
            )));
        }
        if b.symmetric {
            let mut idx = b.offset;
            for i in 0..b.dim {
                for j in 0..=i {
                    x[idx] = value[(i, j)];
                    idx += 1;
                }
            }
        } else {
            for i in 0..b.dim {
                for j in 0..b.dim {
                    x[b.offset + i * b.dim + j] = value[(i, j)];
                }
            }
        }
        Ok(())
    }

    /// Reads the named block out of a flat assignment.
    pub fn unpack(&self, name: &str, x: &[f64]) -> Result<DMatrix<f64>> {
        let b = self.block(name)?;
        if x.len() != self.num_vars {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} variables, layout has {}",
                x.len(),
                self.num_vars
            )));
        }
        let mut m = DMatrix::zeros(b.dim, b.dim);
        if b.symmetric {
            let mut idx = b.offset;
            for i in 0..b.dim {
                for j in 0..=i {
                    m[(i, j)] = x[idx];
                    m[(j, i)] = x[idx];
                    idx += 1;
                }
            }
        } else {
            for i in 0..b.dim {
                for j in 0..b.dim {
                    m[(i, j)] = x[b.offset + i * b.dim + j];
                }
            }
        }
        Ok(m)
    }
}

mod matjson {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct MatrixJson {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixJson {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let raw = MatrixJson::deserialize(d)?;
        if raw.data.len() != raw.rows * raw.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix payload has {} entries, header says {}x{}",
                raw.data.len(),
                raw.rows,
                raw.cols
            )));
        }
        Ok(DMatrix::from_row_slice(raw.rows, raw.cols, &raw.data))
    }
}

/// Concrete stability certificate: one value per unknown block, plus the
/// dimensions it was built for. Serializes to JSON with row-major matrices
/// and explicit dimension headers so saved certificates can be re-verified
/// standalone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClkfCertificate {
    pub n: usize,
    pub h: usize,
    #[serde(with = "matjson")]
    pub p1: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub p2: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub p3: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub s1: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub s2: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub w1: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub w2: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub w3: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub m1: DMatrix<f64>,
    #[serde(with = "matjson")]
    pub m2: DMatrix<f64>,
}

impl ClkfCertificate {
    pub fn from_assignment(layout: &VarLayout, x: &[f64], n: usize, h: usize) -> Result<Self> {
        Ok(Self {
            n,
            h,
            p1: layout.unpack("P1", x)?,
            p2: layout.unpack("P2", x)?,
            p3: layout.unpack("P3", x)?,
            s1: layout.unpack("S1", x)?,
            s2: layout.unpack("S2", x)?,
            w1: layout.unpack("W1", x)?,
            w2: layout.unpack("W2", x)?,
            w3: layout.unpack("W3", x)?,
            m1: layout.unpack("M1", x)?,
            m2: layout.unpack("M2", x)?,
        })
    }

    pub fn to_assignment(&self, layout: &VarLayout) -> Result<Vec<f64>> {
        let mut x = vec![0.0; layout.num_vars()];
        layout.pack("P1", &self.p1, &mut x)?;
        layout.pack("P2", &self.p2, &mut x)?;
        layout.pack("P3", &self.p3, &mut x)?;
        layout.pack("S1", &self.s1, &mut x)?;
        layout.pack("S2", &self.s2, &mut x)?;
        layout.pack("W1", &self.w1, &mut x)?;
        layout.pack("W2", &self.w2, &mut x)?;
        layout.pack("W3", &self.w3, &mut x)?;
        layout.pack("M1", &self.m1, &mut x)?;
        layout.pack("M2", &self.m2, &mut x)?;
        Ok(x)
    }

    /// Block lower-triangular multiplier `P = [[P1, 0], [P2, P3]]`.
    pub fn assembled_p(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut p = DMatrix::zeros(2 * n, 2 * n);
        p.view_mut((0, 0), (n, n)).copy_from(&self.p1);
        p.view_mut((n, 0), (n, n)).copy_from(&self.p2);
        p.view_mut((n, n), (n, n)).copy_from(&self.p3);
        p
    }

    /// Moon slack `W = [[W1, W2], [W2^T, W3]]`.
    pub fn assembled_w(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut w = DMatrix::zeros(2 * n, 2 * n);
        w.view_mut((0, 0), (n, n)).copy_from(&self.w1);
        w.view_mut((0, n), (n, n)).copy_from(&self.w2);
        w.view_mut((n, 0), (n, n)).copy_from(&self.w2.transpose());
        w.view_mut((n, n), (n, n)).copy_from(&self.w3);
        w
    }

    /// Moon slack `M = [M1; M2]`.
    pub fn assembled_m(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(2 * n, n);
        m.view_mut((0, 0), (n, n)).copy_from(&self.m1);
        m.view_mut((n, 0), (n, n)).copy_from(&self.m2);
        m
    }
}

/// Required sign of a constraint, relative to its right-hand offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    /// `expr < rhs` (negative definite difference).
    NegDef,
    /// `expr > rhs` (positive definite difference).
    PosDef,
    /// `expr >= rhs` (positive semidefinite difference).
    PosSemiDef,
}

/// One affine matrix constraint `expr SENSE rhs`.
#[derive(Clone, Debug)]
pub struct LmiConstraint {
    pub name: String,
    pub expr: AffineMat,
    pub sense: Sense,
    pub rhs: DMatrix<f64>,
}

impl LmiConstraint {
    pub fn new(name: &str, expr: AffineMat, sense: Sense, rhs: DMatrix<f64>) -> Self {
        assert_eq!((expr.nrows, expr.ncols), rhs.shape());
        Self {
            name: name.to_string(),
            expr,
            sense,
            rhs,
        }
    }

    pub fn zero_rhs(name: &str, expr: AffineMat, sense: Sense) -> Self {
        let rhs = DMatrix::zeros(expr.nrows, expr.ncols);
        Self::new(name, expr, sense, rhs)
    }

    /// Constant part of `expr - rhs`.
    pub fn constant_offset(&self) -> DMatrix<f64> {
        &self.expr.constant - &self.rhs
    }

    /// Margin for strict constraints: `base * (1 + ||constant term||_F)`.
    pub fn strict_epsilon(&self, base: f64) -> f64 {
        base * (1.0 + self.constant_offset().norm())
    }

    /// Evaluates `expr(x) - rhs`.
    pub fn shifted_eval(&self, x: &[f64]) -> DMatrix<f64> {
        self.expr.eval(x) - &self.rhs
    }
}

/// A set of affine constraints over one variable layout, with an optional
/// linear objective (coefficients per scalar variable).
#[derive(Clone, Debug)]
pub struct LmiSystem {
    pub layout: VarLayout,
    pub constraints: Vec<LmiConstraint>,
    pub objective: Option<Vec<f64>>,
    /// True when scaling a feasible assignment by `t >= 1` preserves
    /// feasibility (homogeneous constraints, or PSD right-hand offsets).
    pub scale_invariant: bool,
}

impl LmiSystem {
    /// Stacked dimension the system was built for, when CLKF-shaped.
    pub fn clkf_dim(&self) -> Option<usize> {
        self.layout.block("P1").ok().map(|b| b.dim)
    }
}

/// Margins used when checking certificates.
#[derive(Clone, Copy, Debug)]
pub struct VerificationPolicy {
    /// Base for strict margins: strict constraints must clear
    /// `base * (1 + ||constant term||_F)`.
    pub strict_base: f64,
    /// Relative tolerance for semidefinite constraints.
    pub psd_tol: f64,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        Self {
            strict_base: 1e-8,
            psd_tol: 1e-9,
        }
    }
}

/// Eigenvalue extremes of one checked constraint.
#[derive(Clone, Debug, Serialize)]
pub struct ConstraintCheck {
    pub name: String,
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Threshold the binding eigenvalue was compared against.
    pub threshold: f64,
    pub satisfied: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<ConstraintCheck>,
    pub passed: bool,
}

/// Independently re-checks every constraint of `system` at `x` using a
/// symmetric eigensolver. Strict constraints must clear their margin;
/// semidefinite ones may dip `psd_tol * (1 + ||X||_F)` below zero.
pub fn verify_assignment(
    system: &LmiSystem,
    x: &[f64],
    policy: &VerificationPolicy,
) -> Result<VerificationReport> {
    if x.len() != system.layout.num_vars() {
        return Err(Error::DimensionMismatch(format!(
            "assignment has {} variables, system layout has {}",
            x.len(),
            system.layout.num_vars()
        )));
    }
    let mut checks = Vec::with_capacity(system.constraints.len());
    let mut passed = true;
    for c in &system.constraints {
        let m = c.shifted_eval(x);
        let sym = (&m + m.transpose()) * 0.5;
        let eigs = sym.symmetric_eigenvalues();
        let lambda_min = eigs.min();
        let lambda_max = eigs.max();
        let (threshold, satisfied) = match c.sense {
            Sense::NegDef => {
                let eps = c.strict_epsilon(policy.strict_base);
                (-eps, lambda_max <= -eps)
            }
            Sense::PosDef => {
                let eps = c.strict_epsilon(policy.strict_base);
                (eps, lambda_min >= eps)
            }
            Sense::PosSemiDef => {
                let eps = policy.psd_tol * (1.0 + m.norm());
                (-eps, lambda_min >= -eps)
            }
        };
        passed &= satisfied;
        checks.push(ConstraintCheck {
            name: c.name.clone(),
            lambda_min,
            lambda_max,
            threshold,
            satisfied,
        });
    }
    Ok(VerificationReport { checks, passed })
}

/// Convenience wrapper checking a structured certificate against a
/// CLKF-shaped system.
pub fn verify_certificate(
    system: &LmiSystem,
    cert: &ClkfCertificate,
    policy: &VerificationPolicy,
) -> Result<VerificationReport> {
    let x = cert.to_assignment(&system.layout)?;
    verify_assignment(system, &x, policy)
}

/// Design weights for the cost `J = sum z^T Q z`, with `Q` acting on the
/// stacked state (current augmented state first, oldest last).
#[derive(Clone, Debug, PartialEq)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
}

impl CostWeights {
    /// `Q = diag(alpha, beta, 0, ..., 0)`: `alpha` weighs the current state,
    /// `beta` the current integral coordinate.
    pub fn diagonal(alpha: f64, beta: f64, n: usize) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::InvalidWeights(format!(
                "diagonal weights must be nonnegative, got alpha={alpha}, beta={beta}"
            )));
        }
        let mut q = DMatrix::zeros(n, n);
        q[(0, 0)] = alpha;
        q[(1, 1)] = beta;
        Ok(Self { q })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            q: DMatrix::zeros(n, n),
        }
    }

    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::InvalidWeights("Q must be square".into()));
        }
        if (&q - q.transpose()).norm() > 1e-12 * (1.0 + q.norm()) {
            return Err(Error::InvalidWeights("Q must be symmetric".into()));
        }
        let min_eig = q.symmetric_eigenvalues().min();
        if min_eig < -1e-10 * (1.0 + q.norm()) {
            return Err(Error::InvalidWeights(format!(
                "Q must be positive semidefinite, min eigenvalue {min_eig}"
            )));
        }
        Ok(Self { q })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// `3n x 3n` embedding with `Q` in the leading block.
    pub fn qbar(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut qb = DMatrix::zeros(3 * n, 3 * n);
        qb.view_mut((0, 0), (n, n)).copy_from(&self.q);
        qb
    }
}

fn assembled_w_var(layout: &VarLayout, n: usize) -> Result<AffineMat> {
    let w1 = layout.var("W1")?;
    let w2 = layout.var("W2")?;
    let w3 = layout.var("W3")?;
    let d = 2 * n;
    Ok(w1
        .embed(d, d, 0, 0)
        .add(&w2.embed(d, d, 0, n))
        .add(&w2.transpose().embed(d, d, n, 0))
        .add(&w3.embed(d, d, n, n)))
}

fn assembled_m_var(layout: &VarLayout, n: usize) -> Result<AffineMat> {
    let m1 = layout.var("M1")?;
    let m2 = layout.var("M2")?;
    Ok(m1.embed(2 * n, n, 0, 0).add(&m2.embed(2 * n, n, n, 0)))
}

fn assembled_p_var(layout: &VarLayout, n: usize) -> Result<AffineMat> {
    let p1 = layout.var("P1")?;
    let p2 = layout.var("P2")?;
    let p3 = layout.var("P3")?;
    let d = 2 * n;
    Ok(p1
        .embed(d, d, 0, 0)
        .add(&p2.embed(d, d, n, 0))
        .add(&p3.embed(d, d, n, n)))
}

/// Descriptor matrix `G = [[0, I], [A1t - Apt - I, -I]]` tying the state and
/// its increment through the mode-1 recursion.
fn descriptor_g(cl: &ClosedLoopMatrices) -> DMatrix<f64> {
    let n = cl.n;
    let eye = DMatrix::<f64>::identity(n, n);
    let x = &cl.a1t - &cl.apt - &eye;
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    g.view_mut((0, n), (n, n)).copy_from(&eye);
    g.view_mut((n, 0), (n, n)).copy_from(&x);
    g.view_mut((n, n), (n, n)).copy_from(&(-&eye));
    g
}

/// `Psi = h W + diag(S2, P1 + h S1) + [M 0] + [M 0]^T + P^T G + G^T P`.
pub fn build_psi(cl: &ClosedLoopMatrices, layout: &VarLayout) -> Result<AffineMat> {
    let n = cl.n;
    let d = 2 * n;
    let h = cl.h as f64;
    let w = assembled_w_var(layout, n)?;
    let m = assembled_m_var(layout, n)?;
    let p = assembled_p_var(layout, n)?;
    let g = descriptor_g(cl);

    let diag = layout
        .var("S2")?
        .embed(d, d, 0, 0)
        .add(&layout.var("P1")?.add(&layout.var("S1")?.scale(h)).embed(d, d, n, n));
    let m_ext = m.embed(d, d, 0, 0);
    Ok(w.scale(h)
        .add(&diag)
        .add(&m_ext)
        .add(&m_ext.transpose())
        .add(&p.transpose().right_mul(&g))
        .add(&p.left_mul(&g.transpose())))
}

/// `Lambda = [[Psi, P^T [0; Apt] - M], [(P^T [0; Apt] - M)^T, -S2]]`.
pub fn build_lambda(cl: &ClosedLoopMatrices, layout: &VarLayout) -> Result<AffineMat> {
    let n = cl.n;
    let psi = build_psi(cl, layout)?;
    let p = assembled_p_var(layout, n)?;
    let m = assembled_m_var(layout, n)?;
    let mut dp = DMatrix::zeros(2 * n, n);
    dp.view_mut((n, 0), (n, n)).copy_from(&cl.apt);
    let off = p.transpose().right_mul(&dp).sub(&m);
    let d = 3 * n;
    Ok(psi
        .embed(d, d, 0, 0)
        .add(&off.embed(d, d, 0, 2 * n))
        .add(&off.transpose().embed(d, d, 2 * n, 0))
        .add(&layout.var("S2")?.scale(-1.0).embed(d, d, 2 * n, 2 * n)))
}

/// Discrete Lyapunov difference for the short-delay mode:
/// `A2t^T P1 A2t - P1`.
pub fn build_schur_lmi(cl: &ClosedLoopMatrices, layout: &VarLayout) -> Result<AffineMat> {
    let p1 = layout.var("P1")?;
    Ok(p1
        .left_mul(&cl.a2t.transpose())
        .right_mul(&cl.a2t)
        .sub(&p1))
}

/// Moon-inequality slack block `[[W, M], [M^T, S1]]`.
pub fn build_moon_block(cl: &ClosedLoopMatrices, layout: &VarLayout) -> Result<AffineMat> {
    let n = cl.n;
    let d = 3 * n;
    let w = assembled_w_var(layout, n)?;
    let m = assembled_m_var(layout, n)?;
    Ok(w.embed(d, d, 0, 0)
        .add(&m.embed(d, d, 0, 2 * n))
        .add(&m.transpose().embed(d, d, 2 * n, 0))
        .add(&layout.var("S1")?.embed(d, d, 2 * n, 2 * n)))
}

/// Feasibility system certifying asymptotic stability under arbitrary
/// direction switching.
pub fn assemble_prop1(cl: &ClosedLoopMatrices) -> Result<LmiSystem> {
    let layout = VarLayout::clkf(cl.n);
    let constraints = vec![
        LmiConstraint::zero_rhs("P1_pos", layout.var("P1")?, Sense::PosDef),
        LmiConstraint::zero_rhs("S1_pos", layout.var("S1")?, Sense::PosDef),
        LmiConstraint::zero_rhs("S2_pos", layout.var("S2")?, Sense::PosDef),
        LmiConstraint::zero_rhs("lambda_neg", build_lambda(cl, &layout)?, Sense::NegDef),
        LmiConstraint::zero_rhs("schur_neg", build_schur_lmi(cl, &layout)?, Sense::NegDef),
        LmiConstraint::zero_rhs("moon_psd", build_moon_block(cl, &layout)?, Sense::PosSemiDef),
    ];
    Ok(LmiSystem {
        layout,
        constraints,
        objective: None,
        scale_invariant: true,
    })
}

/// Cost-bounded system: the feasibility constraints strengthened by the
/// weight embedding, with objective `trace(P1 + h S2)`.
pub fn assemble_prop2(cl: &ClosedLoopMatrices, weights: &CostWeights) -> Result<LmiSystem> {
    if weights.n() != cl.n {
        return Err(Error::DimensionMismatch(format!(
            "weights are {}x{0}, closed loop needs {1}x{1}",
            weights.n(),
            cl.n
        )));
    }
    let layout = VarLayout::clkf(cl.n);
    let constraints = vec![
        LmiConstraint::zero_rhs("P1_pos", layout.var("P1")?, Sense::PosDef),
        LmiConstraint::zero_rhs("S1_pos", layout.var("S1")?, Sense::PosDef),
        LmiConstraint::zero_rhs("S2_pos", layout.var("S2")?, Sense::PosDef),
        LmiConstraint::new(
            "lambda_neg",
            build_lambda(cl, &layout)?,
            Sense::NegDef,
            -weights.qbar(),
        ),
        LmiConstraint::new(
            "schur_neg",
            build_schur_lmi(cl, &layout)?,
            Sense::NegDef,
            -weights.q.clone(),
        ),
        LmiConstraint::zero_rhs("moon_psd", build_moon_block(cl, &layout)?, Sense::PosSemiDef),
    ];
    // trace(P1) + h * trace(S2)
    let mut objective = vec![0.0; layout.num_vars()];
    for (name, weight) in [("P1", 1.0), ("S2", cl.h as f64)] {
        let b = layout.block(name)?;
        let mut idx = b.offset;
        for i in 0..b.dim {
            for j in 0..=i {
                if i == j {
                    objective[idx] = weight;
                }
                idx += 1;
            }
        }
    }
    Ok(LmiSystem {
        layout,
        constraints,
        objective: Some(objective),
        scale_invariant: true,
    })
}

/// Value of the Lyapunov-Krasovskii functional at the newest state of a
/// window.
///
/// `z_window` holds `z[k-h] ..= z[k]` (length `h + 1`), `w_window` holds the
/// increments `w[k-h] ..= w[k-1]` (length `h`). The double sum over
/// increment history collapses to weights `1..=h` on the window, newest
/// increment weighted `h`.
pub fn lkf_value(
    cert: &ClkfCertificate,
    z_window: &[DVector<f64>],
    w_window: &[DVector<f64>],
) -> Result<f64> {
    let h = cert.h;
    if z_window.len() != h + 1 {
        return Err(Error::ShortWindow {
            required: h + 1,
            got: z_window.len(),
        });
    }
    if w_window.len() != h {
        return Err(Error::ShortWindow {
            required: h,
            got: w_window.len(),
        });
    }
    for v in z_window.iter().chain(w_window.iter()) {
        if v.len() != cert.n {
            return Err(Error::DimensionMismatch(format!(
                "window entry has dimension {}, certificate expects {}",
                v.len(),
                cert.n
            )));
        }
    }
    let zk = &z_window[h];
    let mut v = (zk.transpose() * &cert.p1 * zk)[(0, 0)];
    for (j, w) in w_window.iter().enumerate() {
        v += (j + 1) as f64 * (w.transpose() * &cert.s1 * w)[(0, 0)];
    }
    for z in z_window.iter().take(h) {
        v += (z.transpose() * &cert.s2 * z)[(0, 0)];
    }
    Ok(v)
}

/// Upper bound on the regulated cost from a quiescent start:
/// `z0^T (P1 + h S2) z0`.
pub fn cost_bound(
    cert: &ClkfCertificate,
    cl: &ClosedLoopMatrices,
    z0: &DVector<f64>,
) -> Result<f64> {
    if cert.n != cl.n || cert.h != cl.h {
        return Err(Error::DimensionMismatch(format!(
            "certificate is for (n={}, h={}), closed loop has (n={}, h={})",
            cert.n, cert.h, cl.n, cl.h
        )));
    }
    if z0.len() != cl.n {
        return Err(Error::DimensionMismatch(format!(
            "z0 has dimension {}, expected {}",
            z0.len(),
            cl.n
        )));
    }
    let m = &cert.p1 + cert.h as f64 * &cert.s2;
    Ok((z0.transpose() * m * z0)[(0, 0)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_closed_loop, PIGains};
    use crate::test_util::{pilot_model, random_stable_model, rng, uniform};
    use approx::assert_relative_eq;
    use rand_chacha::ChaCha8Rng;

    fn random_assignment(layout: &VarLayout, r: &mut ChaCha8Rng) -> Vec<f64> {
        (0..layout.num_vars()).map(|_| uniform(r)).collect()
    }

    /// Literal transcription of the printed 12x12 blocks for d2 = 1: all
    /// four Lambda blocks written out with plain matrix algebra, no reuse of
    /// the affine builders.
    fn literal_lambda_d2_1(
        cl: &ClosedLoopMatrices,
        x: &[f64],
        layout: &VarLayout,
    ) -> DMatrix<f64> {
        assert_eq!(cl.n, 4);
        let n = 4;
        let get = |name: &str| layout.unpack(name, x).unwrap();
        let (p1, p2, p3) = (get("P1"), get("P2"), get("P3"));
        let (s1, s2) = (get("S1"), get("S2"));
        let (w1, w2, w3) = (get("W1"), get("W2"), get("W3"));
        let (m1, m2) = (get("M1"), get("M2"));
        let h = cl.h as f64;
        let i4 = DMatrix::<f64>::identity(n, n);

        let mut w = DMatrix::zeros(8, 8);
        w.view_mut((0, 0), (n, n)).copy_from(&w1);
        w.view_mut((0, 4), (n, n)).copy_from(&w2);
        w.view_mut((4, 0), (n, n)).copy_from(&w2.transpose());
        w.view_mut((4, 4), (n, n)).copy_from(&w3);
        let mut m = DMatrix::zeros(8, 4);
        m.view_mut((0, 0), (n, n)).copy_from(&m1);
        m.view_mut((4, 0), (n, n)).copy_from(&m2);
        let mut p = DMatrix::zeros(8, 8);
        p.view_mut((0, 0), (n, n)).copy_from(&p1);
        p.view_mut((4, 0), (n, n)).copy_from(&p2);
        p.view_mut((4, 4), (n, n)).copy_from(&p3);

        let mut diag = DMatrix::zeros(8, 8);
        diag.view_mut((0, 0), (n, n)).copy_from(&s2);
        diag.view_mut((4, 4), (n, n)).copy_from(&(&p1 + h * &s1));
        let mut m_ext = DMatrix::zeros(8, 8);
        m_ext.view_mut((0, 0), (8, 4)).copy_from(&m);
        let mut g = DMatrix::zeros(8, 8);
        g.view_mut((0, 4), (n, n)).copy_from(&i4);
        g.view_mut((4, 0), (n, n)).copy_from(&(&cl.a1t - &cl.apt - &i4));
        g.view_mut((4, 4), (n, n)).copy_from(&(-&i4));

        let psi = h * &w + diag + &m_ext + m_ext.transpose() + p.transpose() * &g
            + g.transpose() * &p;

        let mut dp = DMatrix::zeros(8, 4);
        dp.view_mut((4, 0), (n, n)).copy_from(&cl.apt);
        let off = p.transpose() * dp - &m;

        let mut lam = DMatrix::zeros(12, 12);
        lam.view_mut((0, 0), (8, 8)).copy_from(&psi);
        lam.view_mut((0, 8), (8, 4)).copy_from(&off);
        lam.view_mut((8, 0), (4, 8)).copy_from(&off.transpose());
        lam.view_mut((8, 8), (4, 4)).copy_from(&(-&s2));
        lam
    }

    #[test]
    fn clkf_layout_has_130_scalar_unknowns() {
        // Enumeration: 5 symmetric 4x4 blocks (10 entries each) plus 5
        // general 4x4 blocks (16 entries each).
        let layout = VarLayout::clkf(4);
        let expected: usize = layout.blocks.iter().map(|b| b.len()).sum();
        assert_eq!(expected, 5 * 10 + 5 * 16);
        assert_eq!(layout.num_vars(), 130);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let layout = VarLayout::clkf(3);
        let mut r = rng(3);
        let mut x = vec![0.0; layout.num_vars()];
        let sym = {
            let a = DMatrix::from_fn(3, 3, |_, _| uniform(&mut r));
            (&a + a.transpose()) * 0.5
        };
        let gen = DMatrix::from_fn(3, 3, |_, _| uniform(&mut r));
        layout.pack("S1", &sym, &mut x).unwrap();
        layout.pack("P2", &gen, &mut x).unwrap();
        assert_eq!(layout.unpack("S1", &x).unwrap(), sym);
        assert_eq!(layout.unpack("P2", &x).unwrap(), gen);
        // var() expressions evaluate to the packed values.
        assert_eq!(layout.var("S1").unwrap().eval(&x), sym);
        assert_eq!(layout.var("P2").unwrap().eval(&x), gen);
    }

    #[test]
    fn psi_is_8x8_for_unit_short_delay() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let layout = VarLayout::clkf(cl.n);
        let psi = build_psi(&cl, &layout).unwrap();
        assert_eq!((psi.nrows, psi.ncols), (8, 8));
        let lam = build_lambda(&cl, &layout).unwrap();
        assert_eq!((lam.nrows, lam.ncols), (12, 12));
    }

    #[test]
    fn assembled_matrices_are_symmetric_under_random_assignments() {
        let mut r = rng(17);
        for seed_model in 0..5 {
            let m = random_stable_model(&mut r, 3);
            let cl = build_closed_loop(&m, PIGains::new(uniform(&mut r), uniform(&mut r)));
            let layout = VarLayout::clkf(cl.n);
            let exprs = [
                build_psi(&cl, &layout).unwrap(),
                build_lambda(&cl, &layout).unwrap(),
                build_schur_lmi(&cl, &layout).unwrap(),
                build_moon_block(&cl, &layout).unwrap(),
            ];
            for _ in 0..4 {
                let x = random_assignment(&layout, &mut r);
                for e in &exprs {
                    let v = e.eval(&x);
                    assert_eq!((&v - v.transpose()).norm(), 0.0, "model seed {seed_model}");
                }
            }
        }
    }

    #[test]
    fn psi_collapses_when_gap_and_slacks_vanish() {
        // h = 0 with W = M = 0 and P = I leaves diag(S2, P1) + G + G^T.
        let m = crate::model::PiecewiseModel::new(0.8, 0.7, 0.3, 0.4, 0.0, 0.0, 2, 2, 1.0).unwrap();
        let cl = build_closed_loop(&m, PIGains::new(0.5, 0.1));
        assert_eq!(cl.h, 0);
        let n = cl.n;
        let layout = VarLayout::clkf(n);
        let mut r = rng(5);
        let mut x = vec![0.0; layout.num_vars()];
        let rand_sym = |r: &mut ChaCha8Rng| {
            let a = DMatrix::from_fn(n, n, |_, _| uniform(r));
            (&a + a.transpose()) * 0.5
        };
        let s1 = rand_sym(&mut r);
        let s2 = rand_sym(&mut r);
        let eye = DMatrix::<f64>::identity(n, n);
        layout.pack("P1", &eye, &mut x).unwrap();
        layout.pack("P3", &eye, &mut x).unwrap();
        layout.pack("S1", &s1, &mut x).unwrap();
        layout.pack("S2", &s2, &mut x).unwrap();
        let psi = build_psi(&cl, &layout).unwrap().eval(&x);

        let g = descriptor_g(&cl);
        let mut expected = DMatrix::zeros(2 * n, 2 * n);
        expected.view_mut((0, 0), (n, n)).copy_from(&s2);
        expected.view_mut((n, n), (n, n)).copy_from(&eye);
        expected += &g + g.transpose();
        assert_relative_eq!(psi, expected, epsilon = 1e-14);
    }

    #[test]
    fn lambda_off_diagonal_vanishes_with_zero_gains_and_slacks() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(0.0, 0.0));
        let layout = VarLayout::clkf(cl.n);
        let lam = build_lambda(&cl, &layout).unwrap();
        let mut r = rng(9);
        let mut x = random_assignment(&layout, &mut r);
        // zero the Moon slacks
        let zero = DMatrix::zeros(cl.n, cl.n);
        layout.pack("M1", &zero, &mut x).unwrap();
        layout.pack("M2", &zero, &mut x).unwrap();
        let v = lam.eval(&x);
        let off = v.view((0, 2 * cl.n), (2 * cl.n, cl.n));
        assert_eq!(off.norm(), 0.0);
    }

    #[test]
    fn lambda_matches_literal_transcription_for_unit_short_delay() {
        // Five random models/gains with d2 = 1: the general-dimension
        // builder must agree with a hand-written 12x12 transcription, both
        // in coefficients (exactly) and in evaluation.
        let mut r = rng(41);
        for _ in 0..5 {
            let mut m = random_stable_model(&mut r, 1);
            m.d1 = m.d2 + r.random_range(0..=10);
            let m = crate::model::PiecewiseModel::new(
                m.a1, m.a2, m.b1, m.b2, 0.0, 0.0, m.d1, m.d2, 1.0,
            )
            .unwrap();
            let cl = build_closed_loop(&m, PIGains::new(uniform(&mut r), uniform(&mut r)));
            let layout = VarLayout::clkf(cl.n);
            let lam = build_lambda(&cl, &layout).unwrap();

            // Constant part: the literal route at the zero assignment.
            let zero = vec![0.0; layout.num_vars()];
            let lit0 = literal_lambda_d2_1(&cl, &zero, &layout);
            assert_eq!(lam.constant, lit0);

            // Coefficients: one-hot probes of the literal route.
            for v in 0..layout.num_vars() {
                let mut one = zero.clone();
                one[v] = 1.0;
                let lit_v = literal_lambda_d2_1(&cl, &one, &layout) - &lit0;
                assert_eq!(lam.coeffs[v], lit_v, "coefficient of variable {v}");
            }

            // Random evaluation sanity.
            let x = random_assignment(&layout, &mut r);
            let built = lam.eval(&x);
            let lit = literal_lambda_d2_1(&cl, &x, &layout);
            assert_relative_eq!(built, lit, epsilon = 1e-13, max_relative = 1e-13);
        }
        use rand::Rng;
    }

    #[test]
    fn schur_lmi_examples() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let layout = VarLayout::clkf(cl.n);
        let n = cl.n;
        // A2t = 0: the constraint is -P1, so P1 = I certifies it.
        let mut cl0 = cl.clone();
        cl0.a2t = DMatrix::zeros(n, n);
        let expr = build_schur_lmi(&cl0, &layout).unwrap();
        let mut x = vec![0.0; layout.num_vars()];
        layout.pack("P1", &DMatrix::identity(n, n), &mut x).unwrap();
        let v = expr.eval(&x);
        assert_eq!(v, -DMatrix::<f64>::identity(n, n));

        // A2t = I: identically zero, never negative definite.
        let mut cl1 = cl.clone();
        cl1.a2t = DMatrix::identity(n, n);
        let expr = build_schur_lmi(&cl1, &layout).unwrap();
        let mut r = rng(2);
        for _ in 0..5 {
            let x = random_assignment(&layout, &mut r);
            assert_eq!(expr.eval(&x).norm(), 0.0);
        }

        // Zero gains put an eigenvalue at 1, so no P1 can work: the quadratic
        // form along the eigenvector is exactly zero.
        let cl_zero = build_closed_loop(&pilot_model(), PIGains::new(0.0, 0.0));
        assert!(cl_zero.spectral_radius_a2() >= 1.0 - 1e-12);
    }

    #[test]
    fn prop1_constraint_set_shape() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let sys = assemble_prop1(&cl).unwrap();
        let names: Vec<&str> = sys.constraints.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            ["P1_pos", "S1_pos", "S2_pos", "lambda_neg", "schur_neg", "moon_psd"]
        );
        assert!(sys.objective.is_none());
        let dims: Vec<usize> = sys.constraints.iter().map(|c| c.expr.nrows).collect();
        assert_eq!(dims, [4, 4, 4, 12, 4, 12]);
    }

    #[test]
    fn prop2_with_zero_weights_matches_prop1_constraints() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let sys1 = assemble_prop1(&cl).unwrap();
        let sys2 = assemble_prop2(&cl, &CostWeights::zero(cl.n)).unwrap();
        let mut r = rng(31);
        for (c1, c2) in sys1.constraints.iter().zip(&sys2.constraints) {
            assert_eq!(c1.name, c2.name);
            assert_eq!(c1.sense, c2.sense);
            assert_eq!(c1.rhs, c2.rhs);
            let x = random_assignment(&sys1.layout, &mut r);
            assert_eq!(c1.shifted_eval(&x), c2.shifted_eval(&x));
        }
        assert!(sys2.objective.is_some());
    }

    #[test]
    fn prop2_objective_is_trace_p1_plus_h_s2() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let weights = CostWeights::diagonal(40.0, 40.0, cl.n).unwrap();
        let sys = assemble_prop2(&cl, &weights).unwrap();
        let q = sys.objective.as_ref().unwrap();
        let mut r = rng(13);
        let x = random_assignment(&sys.layout, &mut r);
        let p1 = sys.layout.unpack("P1", &x).unwrap();
        let s2 = sys.layout.unpack("S2", &x).unwrap();
        let via_obj: f64 = q.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_relative_eq!(
            via_obj,
            p1.trace() + cl.h as f64 * s2.trace(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn verification_examples() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let sys = assemble_prop1(&cl).unwrap();
        let policy = VerificationPolicy::default();
        // P1 = I passes its own positivity check with unit margin.
        let mut x = vec![0.0; sys.layout.num_vars()];
        sys.layout
            .pack("P1", &DMatrix::identity(cl.n, cl.n), &mut x)
            .unwrap();
        let report = verify_assignment(&sys, &x, &policy).unwrap();
        let p1_check = &report.checks[0];
        assert!(p1_check.satisfied);
        assert_relative_eq!(p1_check.lambda_min, 1.0, epsilon = 1e-12);
        // The zero certificate fails positivity.
        let zero = vec![0.0; sys.layout.num_vars()];
        let report = verify_assignment(&sys, &zero, &policy).unwrap();
        assert!(!report.passed);
        assert!(!report.checks[0].satisfied);
        // Dimension mismatch is an error.
        assert!(verify_assignment(&sys, &[1.0], &policy).is_err());
    }

    #[test]
    fn lkf_value_trivial_cases() {
        let n = 4;
        let cert = ClkfCertificate {
            n,
            h: 3,
            p1: DMatrix::identity(n, n),
            p2: DMatrix::zeros(n, n),
            p3: DMatrix::zeros(n, n),
            s1: DMatrix::identity(n, n),
            s2: DMatrix::identity(n, n),
            w1: DMatrix::zeros(n, n),
            w2: DMatrix::zeros(n, n),
            w3: DMatrix::zeros(n, n),
            m1: DMatrix::zeros(n, n),
            m2: DMatrix::zeros(n, n),
        };
        let zs = vec![DVector::zeros(n); 4];
        let ws = vec![DVector::zeros(n); 3];
        assert_eq!(lkf_value(&cert, &zs, &ws).unwrap(), 0.0);
        // h = 0: only the quadratic term.
        let mut cert0 = cert.clone();
        cert0.h = 0;
        let z = DVector::from_element(n, 2.0);
        assert_eq!(lkf_value(&cert0, &[z.clone()], &[]).unwrap(), 16.0);
        // Short windows error out.
        assert!(matches!(
            lkf_value(&cert, &zs[..2], &ws),
            Err(Error::ShortWindow { required: 4, got: 2 })
        ));
    }

    #[test]
    fn lkf_value_matches_triple_loop_oracle() {
        // Literal transcription of the double-sum definition, evaluated with
        // absolute indices.
        let n = 4;
        let h = 2usize;
        let mut r = rng(19);
        let rand_spd = |r: &mut ChaCha8Rng| {
            let a = DMatrix::from_fn(n, n, |_, _| uniform(r));
            &a * a.transpose() + DMatrix::<f64>::identity(n, n) * 0.1
        };
        let cert = ClkfCertificate {
            n,
            h,
            p1: rand_spd(&mut r),
            p2: DMatrix::zeros(n, n),
            p3: DMatrix::zeros(n, n),
            s1: rand_spd(&mut r),
            s2: rand_spd(&mut r),
            w1: DMatrix::zeros(n, n),
            w2: DMatrix::zeros(n, n),
            w3: DMatrix::zeros(n, n),
            m1: DMatrix::zeros(n, n),
            m2: DMatrix::zeros(n, n),
        };
        // Window for k = h: states z[0..=h], increments w[0..=h-1].
        let zs: Vec<DVector<f64>> = (0..=h).map(|_| DVector::from_fn(n, |_, _| uniform(&mut r))).collect();
        let ws: Vec<DVector<f64>> = (0..h).map(|_| DVector::from_fn(n, |_, _| uniform(&mut r))).collect();
        let got = lkf_value(&cert, &zs, &ws).unwrap();

        let k = h as isize;
        let quad = |m: &DMatrix<f64>, v: &DVector<f64>| (v.transpose() * m * v)[(0, 0)];
        let mut expected = quad(&cert.p1, &zs[h]);
        for theta in (1 - h as isize)..=0 {
            let mut l = k - 1 + theta;
            while l <= k - 1 {
                expected += quad(&cert.s1, &ws[l as usize]);
                l += 1;
            }
        }
        for l in (k - h as isize)..=(k - 1) {
            expected += quad(&cert.s2, &zs[l as usize]);
        }
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }

    #[test]
    fn cost_bound_examples() {
        let cl = build_closed_loop(&pilot_model(), PIGains::new(1.0, 0.01));
        let n = cl.n;
        let cert = ClkfCertificate {
            n,
            h: cl.h,
            p1: DMatrix::identity(n, n),
            p2: DMatrix::zeros(n, n),
            p3: DMatrix::zeros(n, n),
            s1: DMatrix::identity(n, n),
            s2: DMatrix::identity(n, n),
            w1: DMatrix::zeros(n, n),
            w2: DMatrix::zeros(n, n),
            w3: DMatrix::zeros(n, n),
            m1: DMatrix::zeros(n, n),
            m2: DMatrix::zeros(n, n),
        };
        assert_eq!(cost_bound(&cert, &cl, &DVector::zeros(n)).unwrap(), 0.0);
        let mut e1 = DVector::zeros(n);
        e1[0] = 1.0;
        assert_eq!(cost_bound(&cert, &cl, &e1).unwrap(), 50.0);
    }

    #[test]
    fn certificate_json_round_trip() {
        let mut r = rng(29);
        let n = 4;
        let rand_mat = |r: &mut ChaCha8Rng| DMatrix::from_fn(n, n, |_, _| uniform(r));
        let cert = ClkfCertificate {
            n,
            h: 49,
            p1: rand_mat(&mut r),
            p2: rand_mat(&mut r),
            p3: rand_mat(&mut r),
            s1: rand_mat(&mut r),
            s2: rand_mat(&mut r),
            w1: rand_mat(&mut r),
            w2: rand_mat(&mut r),
            w3: rand_mat(&mut r),
            m1: rand_mat(&mut r),
            m2: rand_mat(&mut r),
        };
        let json = serde_json::to_string_pretty(&cert).unwrap();
        let back: ClkfCertificate = serde_json::from_str(&json).unwrap();
        assert_eq!(cert, back);
    }

    #[test]
    fn cost_weights_validation() {
        let w = CostWeights::diagonal(40.0, 40.0, 4).unwrap();
        assert_eq!(w.q[(0, 0)], 40.0);
        assert_eq!(w.q[(1, 1)], 40.0);
        assert_eq!(w.qbar().shape(), (12, 12));
        assert_eq!(w.qbar().view((0, 0), (4, 4)).clone_owned(), w.q);
        assert!(CostWeights::diagonal(-1.0, 0.0, 4).is_err());
        let mut q = DMatrix::zeros(4, 4);
        q[(0, 0)] = -5.0;
        assert!(CostWeights::new(q).is_err());
    }
}
