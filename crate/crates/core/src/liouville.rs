//! Hilbert-space bookkeeping, operators and superoperators on joint emitter
//! spaces.
//!
//! Density matrices are vectorized by stacking columns, so a superoperator
//! `ρ ↦ a ρ b†` has the matrix `conj(b) ⊗ a`. `nalgebra` stores matrices
//! column-major, which makes `vec(ρ)` the raw storage slice of `ρ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Result, ZpgError};
use crate::zpg::SourceSpec;

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub(crate) const ZERO: C64 = C64::new(0.0, 0.0);
pub(crate) const ONE: C64 = C64::new(1.0, 0.0);
pub(crate) const I: C64 = C64::new(0.0, 1.0);

/// Tensor-product space of the sources, leftmost slot first.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HilbertSpace {
    dims: Vec<usize>,
    total_dim: usize,
}

impl HilbertSpace {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(ZpgError::InvalidArgument("a Hilbert space needs at least one slot".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(ZpgError::InvalidArgument(format!("slot {pos} has dimension 0")));
        }
        let total_dim = dims.iter().product();
        Ok(Self { dims, total_dim })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn num_slots(&self) -> usize {
        self.dims.len()
    }

    /// Dimension of vectorized operators, `total_dim²`.
    pub fn liouville_dim(&self) -> usize {
        self.total_dim * self.total_dim
    }
}

/// A square operator on a [`HilbertSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    space: HilbertSpace,
    entries: CMatrix,
}

impl OperatorMatrix {
    pub fn new(space: HilbertSpace, entries: CMatrix) -> Result<Self> {
        let d = space.total_dim();
        if entries.nrows() != d || entries.ncols() != d {
            return Err(ZpgError::Shape(format!(
                "operator is {}x{}, space dimension is {d}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self { space, entries })
    }

    pub fn identity(space: &HilbertSpace) -> Self {
        let d = space.total_dim();
        Self { space: space.clone(), entries: CMatrix::identity(d, d) }
    }

    pub fn zeros(space: &HilbertSpace) -> Self {
        let d = space.total_dim();
        Self { space: space.clone(), entries: CMatrix::zeros(d, d) }
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn adjoint(&self) -> Self {
        Self { space: self.space.clone(), entries: self.entries.adjoint() }
    }

    pub fn scaled(&self, k: C64) -> Self {
        Self { space: self.space.clone(), entries: &self.entries * k }
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        is_hermitian(&self.entries, tol)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        same_space(&self.space, &other.space)?;
        Ok(Self { space: self.space.clone(), entries: &self.entries * &other.entries })
    }
}

/// Linear map on column-vectorized operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    space: HilbertSpace,
    action: CMatrix,
}

impl Superoperator {
    pub fn new(space: HilbertSpace, action: CMatrix) -> Result<Self> {
        let n = space.liouville_dim();
        if action.nrows() != n || action.ncols() != n {
            return Err(ZpgError::Shape(format!(
                "superoperator is {}x{}, expected {n}x{n}",
                action.nrows(),
                action.ncols()
            )));
        }
        Ok(Self { space, action })
    }

    pub fn zeros(space: &HilbertSpace) -> Self {
        let n = space.liouville_dim();
        Self { space: space.clone(), action: CMatrix::zeros(n, n) }
    }

    pub fn identity(space: &HilbertSpace) -> Self {
        let n = space.liouville_dim();
        Self { space: space.clone(), action: CMatrix::identity(n, n) }
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn action(&self) -> &CMatrix {
        &self.action
    }

    /// Applies the map to a `total_dim × total_dim` matrix.
    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        let d = self.space.total_dim();
        if rho.nrows() != d || rho.ncols() != d {
            return Err(ZpgError::Shape(format!("operand is {}x{}, space dimension is {d}", rho.nrows(), rho.ncols())));
        }
        Ok(unvectorize(&(&self.action * vectorize(rho)), d))
    }

    pub fn scaled(&self, k: C64) -> Self {
        Self { space: self.space.clone(), action: &self.action * k }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_space(&self.space, &other.space)?;
        Ok(Self { space: self.space.clone(), action: &self.action + &other.action })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_space(&self.space, &other.space)?;
        Ok(Self { space: self.space.clone(), action: &self.action - &other.action })
    }

    pub(crate) fn add_scaled_in_place(&mut self, other: &Self, k: C64) {
        self.action.zip_apply(&other.action, |a, b| *a += b * k);
    }

    /// Composition `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        same_space(&self.space, &other.space)?;
        Ok(Self { space: self.space.clone(), action: &self.action * &other.action })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (&self.action - &other.action).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// A real scalar function of time with its known discontinuities.
#[derive(Clone)]
pub struct Coefficient {
    func: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    breakpoints: Vec<f64>,
    constant: Option<f64>,
}

impl Coefficient {
    pub fn constant(value: f64) -> Self {
        Self { func: Arc::new(move |_| value), breakpoints: Vec::new(), constant: Some(value) }
    }

    /// `breakpoints` lists times where `f` or its derivatives jump; the
    /// integrator never steps across them.
    pub fn from_fn<F>(f: F, breakpoints: Vec<f64>) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let mut breakpoints = breakpoints;
        breakpoints.sort_by(f64::total_cmp);
        breakpoints.dedup();
        Self { func: Arc::new(f), breakpoints, constant: None }
    }

    pub fn value(&self, t: f64) -> f64 {
        (self.func)(t)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn as_constant(&self) -> Option<f64> {
        self.constant
    }

    pub fn scaled(&self, k: f64) -> Self {
        if let Some(c) = self.constant {
            return Self::constant(c * k);
        }
        let f = Arc::clone(&self.func);
        Self { func: Arc::new(move |t| k * f(t)), breakpoints: self.breakpoints.clone(), constant: None }
    }

    /// Pointwise product with a smooth function `g`.
    pub fn modulated<G>(&self, g: G) -> Self
    where
        G: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let f = Arc::clone(&self.func);
        Self { func: Arc::new(move |t| f(t) * g(t)), breakpoints: self.breakpoints.clone(), constant: None }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficient")
            .field("constant", &self.constant)
            .field("breakpoints", &self.breakpoints)
            .finish_non_exhaustive()
    }
}

/// `𝓛(t) = constant_part + Σ_k coeff_k(t) · part_k`.
#[derive(Debug, Clone)]
pub struct TimeDependentGenerator {
    constant_part: Superoperator,
    driven_parts: Vec<(Superoperator, Coefficient)>,
}

impl TimeDependentGenerator {
    pub fn new(constant_part: Superoperator, driven_parts: Vec<(Superoperator, Coefficient)>) -> Result<Self> {
        for (part, _) in &driven_parts {
            same_space(constant_part.space(), part.space())?;
        }
        Ok(Self { constant_part, driven_parts })
    }

    pub fn constant(part: Superoperator) -> Self {
        Self { constant_part: part, driven_parts: Vec::new() }
    }

    pub fn space(&self) -> &HilbertSpace {
        self.constant_part.space()
    }

    pub fn constant_part(&self) -> &Superoperator {
        &self.constant_part
    }

    pub fn driven_parts(&self) -> &[(Superoperator, Coefficient)] {
        &self.driven_parts
    }

    pub fn is_time_independent(&self) -> bool {
        self.driven_parts.is_empty()
    }

    pub fn evaluate(&self, t: f64) -> Superoperator {
        let mut out = self.constant_part.clone();
        for (part, coeff) in &self.driven_parts {
            let c = coeff.value(t);
            if c != 0.0 {
                out.add_scaled_in_place(part, C64::new(c, 0.0));
            }
        }
        out
    }

    /// Sorted, deduplicated discontinuity times of all coefficients.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.driven_parts.iter().flat_map(|(_, c)| c.breakpoints().iter().copied()).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// Adds a time-independent superoperator to the constant part.
    pub fn add_constant(&mut self, extra: &Superoperator, k: C64) -> Result<()> {
        same_space(self.constant_part.space(), extra.space())?;
        self.constant_part.add_scaled_in_place(extra, k);
        Ok(())
    }
}

/// Built-in two-level operators in the basis `{|g⟩, |e⟩}`.
pub mod two_level {
    use super::{CMatrix, C64, I, ONE, ZERO};

    /// Lowering operator `σ = |g⟩⟨e|`.
    pub fn sigma() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ZERO, ZERO])
    }

    pub fn sigma_dag() -> CMatrix {
        sigma().adjoint()
    }

    /// `σ + σ†`
    pub fn sigma_x() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
    }

    /// `i(σ − σ†)`
    pub fn sigma_y() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, I, -I, ZERO])
    }

    /// `|e⟩⟨e| − |g⟩⟨g|`
    pub fn sigma_z() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[-ONE, ZERO, ZERO, ONE])
    }

    pub fn ground() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ONE, ZERO, ZERO, ZERO])
    }

    pub fn excited() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[ZERO, ZERO, ZERO, ONE])
    }

    /// Pure state `cos(θ/2)|g⟩ + e^{iφ} sin(θ/2)|e⟩` as a density matrix.
    pub fn bloch_state(theta: f64, phi: f64) -> CMatrix {
        let psi = [C64::new((theta / 2.0).cos(), 0.0), C64::from_polar((theta / 2.0).sin(), phi)];
        CMatrix::from_fn(2, 2, |i, j| psi[i] * psi[j].conj())
    }
}

pub fn vectorize(rho: &CMatrix) -> CVector {
    CVector::from_column_slice(rho.as_slice())
}

pub fn unvectorize(v: &CVector, d: usize) -> CMatrix {
    CMatrix::from_column_slice(d, d, v.as_slice())
}

/// Row vector `vec(I)ᵀ` with `vec(I)ᵀ vec(ρ) = Tr ρ`.
pub fn trace_functional(d: usize) -> CVector {
    vectorize(&CMatrix::identity(d, d))
}

pub fn is_hermitian(m: &CMatrix, tol: f64) -> bool {
    m.nrows() == m.ncols()
        && (0..m.nrows()).all(|i| (i..m.ncols()).all(|j| (m[(i, j)] - m[(j, i)].conj()).norm() <= tol))
}

fn same_space(a: &HilbertSpace, b: &HilbertSpace) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(ZpgError::Shape(format!("space {:?} does not match {:?}", a.dims(), b.dims())))
    }
}

/// `I ⊗ … ⊗ local_op ⊗ … ⊗ I` with `local_op` at `slot`.
pub fn embed_operator(local_op: &CMatrix, slot: usize, space: &HilbertSpace) -> Result<OperatorMatrix> {
    let dims = space.dims();
    if slot >= dims.len() {
        return Err(ZpgError::Shape(format!("slot {slot} out of range for {} sources", dims.len())));
    }
    if local_op.nrows() != dims[slot] || local_op.ncols() != dims[slot] {
        return Err(ZpgError::Shape(format!(
            "local operator is {}x{}, slot {slot} has dimension {}",
            local_op.nrows(),
            local_op.ncols(),
            dims[slot]
        )));
    }
    let left: usize = dims[..slot].iter().product();
    let right: usize = dims[slot + 1..].iter().product();
    let entries = CMatrix::identity(left, left).kronecker(local_op).kronecker(&CMatrix::identity(right, right));
    OperatorMatrix::new(space.clone(), entries)
}

/// `ρ ↦ −i(Hρ − ρH)`.
pub fn commutator_superop(h: &OperatorMatrix) -> Superoperator {
    if !h.is_hermitian(1e-10) {
        log::warn!("commutator_superop: Hamiltonian is not Hermitian to 1e-10");
    }
    let d = h.space().total_dim();
    let id = CMatrix::identity(d, d);
    let left = id.kronecker(h.entries());
    let right = h.entries().transpose().kronecker(&id);
    Superoperator { space: h.space().clone(), action: (left - right) * (-I) }
}

/// `ρ ↦ cρc† − ½{c†c, ρ}`.
pub fn dissipator_superop(c: &OperatorMatrix) -> Superoperator {
    let d = c.space().total_dim();
    let id = CMatrix::identity(d, d);
    let cdc = c.entries().adjoint() * c.entries();
    let jump = c.entries().conjugate().kronecker(c.entries());
    let anti = id.kronecker(&cdc) + cdc.transpose().kronecker(&id);
    Superoperator { space: c.space().clone(), action: jump - anti * C64::new(0.5, 0.0) }
}

/// `ρ ↦ aρb†`.
pub fn sandwich_superop(a: &OperatorMatrix, b: &OperatorMatrix) -> Result<Superoperator> {
    same_space(a.space(), b.space())?;
    Ok(Superoperator { space: a.space().clone(), action: b.entries().conjugate().kronecker(a.entries()) })
}

/// Total Lindbladian `Σ_i [−i𝓗_i(t) + γ_i 𝒟_{c_i} + Σ_k γ_ik 𝒟_{c_ik}]`.
///
/// Each source's collection channel is part of its own Lindbladian; the
/// extra dissipation channels are emission or dephasing that no detector
/// sees.
pub fn lindbladian(sources: &[SourceSpec], space: &HilbertSpace) -> Result<TimeDependentGenerator> {
    if sources.len() != space.num_slots() {
        return Err(ZpgError::Shape(format!("{} sources for a space with {} slots", sources.len(), space.num_slots())));
    }
    let mut constant = Superoperator::zeros(space);
    let mut driven = Vec::new();
    for (slot, src) in sources.iter().enumerate() {
        if src.dim() != space.dims()[slot] {
            return Err(ZpgError::Shape(format!(
                "source {slot} has dimension {}, slot has {}",
                src.dim(),
                space.dims()[slot]
            )));
        }
        for (op, coeff) in src.hamiltonian_terms() {
            let h = embed_operator(op, slot, space)?;
            let comm = commutator_superop(&h);
            match coeff.as_constant() {
                Some(c) => constant.add_scaled_in_place(&comm, C64::new(c, 0.0)),
                None => driven.push((comm, coeff.clone())),
            }
        }
        let channels = std::iter::once((src.collection_op(), src.collection_rate()))
            .chain(src.dissipation_channels().iter().map(|(op, r)| (op, *r)));
        for (op, rate) in channels {
            if rate < 0.0 || !rate.is_finite() {
                return Err(ZpgError::InvalidArgument(format!("source {slot} has rate {rate}")));
            }
            if rate == 0.0 {
                continue;
            }
            let c = embed_operator(op, slot, space)?;
            constant.add_scaled_in_place(&dissipator_superop(&c), C64::new(rate, 0.0));
        }
    }
    TimeDependentGenerator::new(constant, driven)
}
