//! Zero-photon generators (ZPGs) and virtual detector grids.
//!
//! A detector with complex efficiency `η = 1 − z⁻¹` behind the circuit `U`
//! conditions the joint source state on "no click". The resulting generator
//! is `𝓛 − Σ_ij η′_ij √(γ_i γ_j) (ρ ↦ c_j ρ c_i†)` with `η′ = U† diag(η) U`.

use std::f64::consts::PI;

use nalgebra::SymmetricEigen;

use crate::dynamics::PulseShape;
use crate::error::{Result, ZpgError};
use crate::liouville::{
    embed_operator, is_hermitian, lindbladian, sandwich_superop, two_level, CMatrix, Coefficient, HilbertSpace,
    OperatorMatrix, Superoperator, TimeDependentGenerator, C64, ONE, ZERO,
};

/// One emitter: local Hamiltonian, dissipation, collection channel, initial state.
#[derive(Debug, Clone)]
pub struct SourceSpec {
    pub(crate) dim: usize,
    pub(crate) hamiltonian_terms: Vec<(CMatrix, Coefficient)>,
    pub(crate) dissipation_channels: Vec<(CMatrix, f64)>,
    pub(crate) collection_op: CMatrix,
    pub(crate) collection_rate: f64,
    pub(crate) initial_state: CMatrix,
}

impl SourceSpec {
    /// Validating constructor for explicit matrices.
    pub fn new(
        hamiltonian_terms: Vec<(CMatrix, Coefficient)>,
        dissipation_channels: Vec<(CMatrix, f64)>,
        collection_op: CMatrix,
        collection_rate: f64,
        initial_state: CMatrix,
    ) -> Result<Self> {
        let spec = Self {
            dim: initial_state.nrows(),
            hamiltonian_terms,
            dissipation_channels,
            collection_op,
            collection_rate,
            initial_state,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Undriven two-level emitter starting in `|e⟩`, fully collected at rate `gamma`.
    pub fn two_level_decay(gamma: f64) -> Self {
        Self {
            dim: 2,
            hamiltonian_terms: Vec::new(),
            dissipation_channels: Vec::new(),
            collection_op: two_level::sigma(),
            collection_rate: gamma,
            initial_state: two_level::excited(),
        }
    }

    /// Builder for a two-level emitter starting in `|g⟩`.
    pub fn two_level(gamma: f64) -> TwoLevelEmitter {
        TwoLevelEmitter::new(gamma)
    }

    /// A one-dimensional placeholder that never emits.
    pub fn vacuum() -> Self {
        Self {
            dim: 1,
            hamiltonian_terms: Vec::new(),
            dissipation_channels: Vec::new(),
            collection_op: CMatrix::zeros(1, 1),
            collection_rate: 0.0,
            initial_state: CMatrix::identity(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hamiltonian_terms(&self) -> &[(CMatrix, Coefficient)] {
        &self.hamiltonian_terms
    }

    pub fn dissipation_channels(&self) -> &[(CMatrix, f64)] {
        &self.dissipation_channels
    }

    pub fn collection_op(&self) -> &CMatrix {
        &self.collection_op
    }

    pub fn collection_rate(&self) -> f64 {
        self.collection_rate
    }

    pub fn initial_state(&self) -> &CMatrix {
        &self.initial_state
    }

    /// Latest discontinuity among the drive coefficients, if any.
    pub fn drive_end(&self) -> Option<f64> {
        self.hamiltonian_terms
            .iter()
            .flat_map(|(_, c)| c.breakpoints().iter().copied())
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim;
        if d == 0 {
            return Err(ZpgError::InvalidArgument("source dimension must be positive".into()));
        }
        let square = |m: &CMatrix, what: &str| -> Result<()> {
            if m.nrows() != d || m.ncols() != d {
                return Err(ZpgError::Shape(format!("{what} is {}x{}, source dimension is {d}", m.nrows(), m.ncols())));
            }
            Ok(())
        };
        square(&self.initial_state, "initial state")?;
        square(&self.collection_op, "collection operator")?;
        for (op, _) in &self.hamiltonian_terms {
            square(op, "Hamiltonian term")?;
        }
        for (op, rate) in &self.dissipation_channels {
            square(op, "dissipation channel")?;
            if !(rate.is_finite() && *rate >= 0.0) {
                return Err(ZpgError::InvalidArgument(format!("dissipation rate {rate} must be finite and >= 0")));
            }
        }
        if !(self.collection_rate.is_finite() && self.collection_rate >= 0.0) {
            return Err(ZpgError::InvalidArgument(format!(
                "collection rate {} must be finite and >= 0",
                self.collection_rate
            )));
        }
        validate_density(&self.initial_state, 1e-10)
    }

    pub(crate) fn is_hermiticity_preserving(&self) -> bool {
        self.hamiltonian_terms.iter().all(|(h, _)| is_hermitian(h, 1e-10))
    }
}

/// Checks Hermiticity, unit trace and positivity of a density matrix.
pub fn validate_density(rho: &CMatrix, tol: f64) -> Result<()> {
    if !is_hermitian(rho, tol) {
        return Err(ZpgError::InvalidArgument("initial state is not Hermitian".into()));
    }
    let tr = rho.trace();
    if (tr - ONE).norm() > tol {
        return Err(ZpgError::InvalidArgument(format!("initial state has trace {tr}")));
    }
    let min_eig = min_eigenvalue(rho);
    if min_eig < -tol {
        return Err(ZpgError::InvalidArgument(format!("initial state has eigenvalue {min_eig:.3e}")));
    }
    Ok(())
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    SymmetricEigen::new(herm).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Parameters of a catalog two-level emitter.
///
/// The drive is resonant with the emitter; `detuning` shifts the emitter
/// (and its drive) relative to the common rotating frame, which changes the
/// frequency of the emitted photon.
#[derive(Debug, Clone)]
pub struct TwoLevelEmitter {
    pub gamma: f64,
    pub pulse: Option<PulseShape>,
    pub detuning: f64,
    pub dephasing: f64,
    pub initial_state: CMatrix,
}

impl TwoLevelEmitter {
    pub fn new(gamma: f64) -> Self {
        Self { gamma, pulse: None, detuning: 0.0, dephasing: 0.0, initial_state: two_level::ground() }
    }

    pub fn with_pulse(mut self, pulse: &PulseShape) -> Self {
        self.pulse = Some(pulse.clone());
        self
    }

    pub fn with_detuning(mut self, detuning: f64) -> Self {
        self.detuning = detuning;
        self
    }

    /// Pure dephasing channel `rate · 𝒟_{σ†σ}` (coherences decay at `rate/2`).
    pub fn with_dephasing(mut self, rate: f64) -> Self {
        self.dephasing = rate;
        self
    }

    pub fn with_initial_state(mut self, rho: CMatrix) -> Self {
        self.initial_state = rho;
        self
    }

    pub fn build(&self) -> Result<SourceSpec> {
        let mut terms = Vec::new();
        if self.detuning != 0.0 {
            terms.push((two_level::excited(), Coefficient::constant(self.detuning)));
        }
        if let Some(pulse) = &self.pulse {
            let half = pulse.envelope().scaled(0.5);
            if self.detuning == 0.0 {
                terms.push((two_level::sigma_x(), half));
            } else {
                let delta = self.detuning;
                terms.push((two_level::sigma_x(), half.modulated(move |t| (delta * t).cos())));
                terms.push((two_level::sigma_y(), half.modulated(move |t| (delta * t).sin())));
            }
        }
        let mut channels = Vec::new();
        if self.dephasing > 0.0 {
            channels.push((two_level::excited(), self.dephasing));
        }
        SourceSpec::new(terms, channels, two_level::sigma(), self.gamma, self.initial_state.clone())
    }
}

/// `M` sources feeding an `M × M` interferometer with one detector per output.
#[derive(Debug, Clone)]
pub struct EmitterNetwork {
    sources: Vec<SourceSpec>,
    unitary: CMatrix,
    space: HilbertSpace,
    joint_initial_state: CMatrix,
}

impl EmitterNetwork {
    pub fn new(sources: Vec<SourceSpec>, unitary: CMatrix) -> Result<Self> {
        let m = sources.len();
        if m == 0 {
            return Err(ZpgError::InvalidArgument("network needs at least one source".into()));
        }
        if unitary.nrows() != m || unitary.ncols() != m {
            return Err(ZpgError::Shape(format!("unitary is {}x{} for {m} sources", unitary.nrows(), unitary.ncols())));
        }
        let defect =
            (unitary.adjoint() * &unitary - CMatrix::identity(m, m)).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if defect > 1e-10 {
            return Err(ZpgError::InvalidArgument(format!("circuit is not unitary (|U†U − I| = {defect:.2e})")));
        }
        for s in &sources {
            s.validate()?;
        }
        let space = HilbertSpace::new(sources.iter().map(SourceSpec::dim).collect())?;
        let joint_initial_state =
            sources.iter().skip(1).fold(sources[0].initial_state().clone(), |acc, s| acc.kronecker(s.initial_state()));
        Ok(Self { sources, unitary, space, joint_initial_state })
    }

    /// One source and one detector.
    pub fn single(source: SourceSpec) -> Result<Self> {
        Self::new(vec![source], CMatrix::identity(1, 1))
    }

    pub fn num_modes(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn unitary(&self) -> &CMatrix {
        &self.unitary
    }

    pub fn space(&self) -> &HilbertSpace {
        &self.space
    }

    pub fn joint_initial_state(&self) -> &CMatrix {
        &self.joint_initial_state
    }

    pub fn lindbladian(&self) -> Result<TimeDependentGenerator> {
        lindbladian(&self.sources, &self.space)
    }

    /// Smallest nonzero collection rate (1 when nothing emits).
    pub fn min_rate(&self) -> f64 {
        self.sources
            .iter()
            .map(SourceSpec::collection_rate)
            .filter(|&g| g > 0.0)
            .fold(None, |acc: Option<f64>, g| Some(acc.map_or(g, |a| a.min(g))))
            .unwrap_or(1.0)
    }

    pub fn drive_end(&self) -> Option<f64> {
        self.sources
            .iter()
            .filter_map(SourceSpec::drive_end)
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
    }

    pub fn is_hermiticity_preserving(&self) -> bool {
        self.sources.iter().all(SourceSpec::is_hermiticity_preserving)
    }

    /// Output mode operator seen by detector `j`: `Σ_i U_ji √γ_i c_i`.
    pub fn detector_operator(&self, j: usize) -> Result<OperatorMatrix> {
        if j >= self.num_modes() {
            return Err(ZpgError::Shape(format!("detector {j} out of range")));
        }
        let mut acc = OperatorMatrix::zeros(&self.space);
        for (i, src) in self.sources.iter().enumerate() {
            if src.collection_rate() == 0.0 {
                continue;
            }
            let c = embed_operator(src.collection_op(), i, &self.space)?;
            let k = self.unitary[(j, i)] * src.collection_rate().sqrt();
            acc = OperatorMatrix::new(self.space.clone(), acc.entries() + c.entries() * k)?;
        }
        Ok(acc)
    }

    /// Jump superoperator `𝒥_j ρ = d_j ρ d_j†` of detector `j`.
    pub fn detector_jump(&self, j: usize) -> Result<Superoperator> {
        let d = self.detector_operator(j)?;
        sandwich_superop(&d, &d)
    }
}

/// A complex virtual detector parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VirtualZ {
    Finite(C64),
    /// `z = ∞`, i.e. a lossless detector (`η = 1`).
    Lossless,
}

/// One vector `z` of virtual detector parameters, stored as `z⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualDetectorConfig {
    z_inv: Vec<C64>,
}

impl VirtualDetectorConfig {
    pub fn from_z(z: &[VirtualZ]) -> Result<Self> {
        let z_inv = z
            .iter()
            .map(|v| match *v {
                VirtualZ::Lossless => Ok(ZERO),
                VirtualZ::Finite(z) if z == ZERO || !z.is_finite() => {
                    Err(ZpgError::InvalidArgument(format!("virtual parameter z = {z} is not allowed")))
                }
                VirtualZ::Finite(z) => Ok(z.inv()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { z_inv })
    }

    /// Configuration with the given efficiencies, `z⁻¹ = 1 − η`.
    pub fn from_eta(eta: &[C64]) -> Result<Self> {
        if let Some(e) = eta.iter().find(|e| !e.is_finite()) {
            return Err(ZpgError::InvalidArgument(format!("efficiency {e} is not finite")));
        }
        Ok(Self { z_inv: eta.iter().map(|e| ONE - e).collect() })
    }

    pub fn from_real_eta(eta: &[f64]) -> Result<Self> {
        Self::from_eta(&eta.iter().map(|&e| C64::new(e, 0.0)).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.z_inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_inv.is_empty()
    }

    pub fn z_inv(&self) -> &[C64] {
        &self.z_inv
    }

    pub fn z(&self) -> Vec<VirtualZ> {
        self.z_inv.iter().map(|&zi| if zi == ZERO { VirtualZ::Lossless } else { VirtualZ::Finite(zi.inv()) }).collect()
    }

    /// `η_j = 1 − z_j⁻¹`.
    pub fn eta(&self) -> Vec<C64> {
        self.z_inv.iter().map(|zi| ONE - zi).collect()
    }

    pub fn conjugate(&self) -> Self {
        Self { z_inv: self.z_inv.iter().map(C64::conj).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Fourier,
    ThresholdCorners,
    Custom,
}

/// Ordered set of virtual configurations.
#[derive(Debug, Clone)]
pub struct VirtualGrid {
    truncations: Vec<usize>,
    configs: Vec<VirtualDetectorConfig>,
    kind: GridKind,
}

impl VirtualGrid {
    pub fn custom(configs: Vec<VirtualDetectorConfig>) -> Result<Self> {
        let m = configs.first().map(VirtualDetectorConfig::len).unwrap_or(0);
        if m == 0 || configs.iter().any(|c| c.len() != m) {
            return Err(ZpgError::Shape("custom grid configs must be non-empty and of equal length".into()));
        }
        Ok(Self { truncations: vec![1; m], configs, kind: GridKind::Custom })
    }

    pub fn truncations(&self) -> &[usize] {
        &self.truncations
    }

    pub fn configs(&self) -> &[VirtualDetectorConfig] {
        &self.configs
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn num_modes(&self) -> usize {
        self.truncations.len()
    }

    /// Index of the configuration with conjugated `z`, when the grid contains it.
    pub fn conjugate_index(&self, index: usize) -> Option<usize> {
        match self.kind {
            GridKind::ThresholdCorners => Some(index),
            GridKind::Fourier => {
                let k = unravel(index, &self.truncations);
                let kc: Vec<usize> = k.iter().zip(&self.truncations).map(|(&k, &n)| (n - k) % n).collect();
                Some(ravel(&kc, &self.truncations))
            }
            GridKind::Custom => {
                let conj = self.configs[index].conjugate();
                self.configs.iter().position(|c| *c == conj)
            }
        }
    }
}

/// Row-major multi-index of a flat index (last axis fastest).
pub fn unravel(mut index: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for (slot, &n) in out.iter_mut().zip(shape).rev() {
        *slot = index % n;
        index /= n;
    }
    out
}

pub fn ravel(multi: &[usize], shape: &[usize]) -> usize {
    multi.iter().zip(shape).fold(0, |acc, (&k, &n)| acc * n + k)
}

/// `η′ = U† diag(η) U`.
pub fn effective_efficiency_matrix(network: &EmitterNetwork, config: &VirtualDetectorConfig) -> Result<CMatrix> {
    let m = network.num_modes();
    if config.len() != m {
        return Err(ZpgError::Shape(format!("config has {} entries for {m} detectors", config.len())));
    }
    let u = network.unitary();
    let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(config.eta()));
    Ok(u.adjoint() * diag * u)
}

/// Builds ZPGs for many configurations of one network, reusing the
/// Lindbladian and the two-body jump blocks.
#[derive(Debug, Clone)]
pub struct ZpgFactory {
    lindbladian: TimeDependentGenerator,
    /// `(i, j, ρ ↦ √(γ_i γ_j) c_j ρ c_i†)` for emitting sources `i, j`.
    blocks: Vec<(usize, usize, Superoperator)>,
    unitary: CMatrix,
}

impl ZpgFactory {
    pub fn new(network: &EmitterNetwork) -> Result<Self> {
        let space = network.space();
        let emitting: Vec<(usize, OperatorMatrix, f64)> = network
            .sources()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.collection_rate() > 0.0)
            .map(|(i, s)| Ok((i, embed_operator(s.collection_op(), i, space)?, s.collection_rate())))
            .collect::<Result<_>>()?;
        let mut blocks = Vec::with_capacity(emitting.len() * emitting.len());
        for (i, ci, gi) in &emitting {
            for (j, cj, gj) in &emitting {
                let s = sandwich_superop(cj, ci)?.scaled(C64::new((gi * gj).sqrt(), 0.0));
                blocks.push((*i, *j, s));
            }
        }
        Ok(Self { lindbladian: network.lindbladian()?, blocks, unitary: network.unitary().clone() })
    }

    pub fn lindbladian(&self) -> &TimeDependentGenerator {
        &self.lindbladian
    }

    /// Detection term `Σ_ij η′_ij √(γ_i γ_j)(ρ ↦ c_j ρ c_i†)`.
    pub fn coupling(&self, eta_prime: &CMatrix) -> Superoperator {
        let mut out = Superoperator::zeros(self.lindbladian.space());
        for (i, j, block) in &self.blocks {
            let k = eta_prime[(*i, *j)];
            if k != ZERO {
                out.add_scaled_in_place(block, k);
            }
        }
        out
    }

    pub fn generator(&self, config: &VirtualDetectorConfig) -> Result<TimeDependentGenerator> {
        let m = self.unitary.nrows();
        if config.len() != m {
            return Err(ZpgError::Shape(format!("config has {} entries for {m} detectors", config.len())));
        }
        let diag = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(config.eta()));
        let eta_prime = self.unitary.adjoint() * diag * &self.unitary;
        let mut gen = self.lindbladian.clone();
        gen.add_constant(&self.coupling(&eta_prime), -ONE)?;
        Ok(gen)
    }
}

/// `𝓛_z = 𝓛 − 𝓙⁺ · η′(z) · 𝓙⁻`.
pub fn build_zpg(network: &EmitterNetwork, config: &VirtualDetectorConfig) -> Result<TimeDependentGenerator> {
    ZpgFactory::new(network)?.generator(config)
}

/// Tensor grid of roots of unity, `z_j⁻¹ = exp(2πi k_j / N_j)`, row-major in `k`.
pub fn fourier_grid(truncations: &[usize]) -> Result<VirtualGrid> {
    if truncations.is_empty() || truncations.contains(&0) {
        return Err(ZpgError::InvalidArgument(format!("truncations {truncations:?} must be non-empty and >= 1")));
    }
    let total: usize = truncations.iter().product();
    let configs = (0..total)
        .map(|idx| {
            let k = unravel(idx, truncations);
            let z_inv = k.iter().zip(truncations).map(|(&k, &n)| root_of_unity(k, n)).collect();
            VirtualDetectorConfig { z_inv }
        })
        .collect();
    Ok(VirtualGrid { truncations: truncations.to_vec(), configs, kind: GridKind::Fourier })
}

/// `exp(2πi k / n)` with exact values on the real and imaginary axes.
pub(crate) fn root_of_unity(k: usize, n: usize) -> C64 {
    let k = k % n;
    if (4 * k).is_multiple_of(n) {
        return match 4 * k / n {
            0 => ONE,
            1 => C64::new(0.0, 1.0),
            2 => C64::new(-1.0, 0.0),
            _ => C64::new(0.0, -1.0),
        };
    }
    C64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64)
}

/// The `2^M` configurations with `η_i = 1 − L_i`, `L ∈ {0,1}^M`, in the
/// integer order of `L` read as binary with `L_1` the most significant bit.
pub fn threshold_corner_grid(m: usize) -> Result<VirtualGrid> {
    if m == 0 {
        return Err(ZpgError::InvalidArgument("threshold grid needs at least one detector".into()));
    }
    if m >= usize::BITS as usize {
        return Err(ZpgError::InvalidArgument(format!("{m} detectors is too many for a corner grid")));
    }
    let configs = (0..1usize << m)
        .map(|bits| {
            let z_inv = (0..m).map(|i| if corner_bit(bits, i, m) { ONE } else { ZERO }).collect();
            VirtualDetectorConfig { z_inv }
        })
        .collect();
    Ok(VirtualGrid { truncations: vec![2; m], configs, kind: GridKind::ThresholdCorners })
}

/// `L_i` of corner `bits` (detector 0 is the most significant bit).
pub(crate) fn corner_bit(bits: usize, i: usize, m: usize) -> bool {
    (bits >> (m - 1 - i)) & 1 == 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::square_pulse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn real(x: f64) -> C64 {
        C64::new(x, 0.0)
    }

    fn splitter() -> CMatrix {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        CMatrix::from_row_slice(2, 2, &[real(s), real(s), real(s), real(-s)])
    }

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn pair(u: CMatrix) -> EmitterNetwork {
        let pulse = square_pulse(std::f64::consts::PI, 0.3, 0.0).unwrap();
        let a = SourceSpec::two_level(1.0).with_pulse(&pulse).build().unwrap();
        let b = SourceSpec::two_level(0.8).with_pulse(&pulse).with_detuning(0.5).build().unwrap();
        EmitterNetwork::new(vec![a, b], u).unwrap()
    }

    #[test]
    fn network_rejects_non_unitary() {
        let u = CMatrix::from_row_slice(2, 2, &[ONE, ONE, ZERO, ONE]);
        let s = SourceSpec::two_level_decay(1.0);
        assert!(EmitterNetwork::new(vec![s.clone(), s.clone()], u).is_err());
        assert!(EmitterNetwork::new(vec![s.clone()], CMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn source_rejects_bad_initial_state() {
        let bad = two_level::excited() * real(2.0);
        assert!(SourceSpec::two_level(1.0).with_initial_state(bad).build().is_err());
        let neg = CMatrix::from_row_slice(2, 2, &[real(1.5), ZERO, ZERO, real(-0.5)]);
        assert!(SourceSpec::two_level(1.0).with_initial_state(neg).build().is_err());
    }

    #[test]
    fn eta_from_z() {
        let c = VirtualDetectorConfig::from_z(&[VirtualZ::Finite(real(2.0)), VirtualZ::Lossless]).unwrap();
        assert_eq!(c.eta(), vec![real(0.5), ONE]);
        assert_eq!(c.z()[1], VirtualZ::Lossless);
        assert!(VirtualDetectorConfig::from_z(&[VirtualZ::Finite(ZERO)]).is_err());
        let d = VirtualDetectorConfig::from_real_eta(&[1.0]).unwrap();
        assert_eq!(d.z(), vec![VirtualZ::Lossless]);
    }

    #[test]
    fn efficiency_matrix_cases() {
        let net = EmitterNetwork::new(
            vec![SourceSpec::two_level_decay(1.0), SourceSpec::two_level_decay(1.0)],
            CMatrix::identity(2, 2),
        )
        .unwrap();
        let cfg = VirtualDetectorConfig::from_real_eta(&[0.3, 0.9]).unwrap();
        let e = effective_efficiency_matrix(&net, &cfg).unwrap();
        assert!(max_abs(&(e - CMatrix::from_row_slice(2, 2, &[real(0.3), ZERO, ZERO, real(0.9)]))) < 1e-15);

        let net = pair(splitter());
        let ones = VirtualDetectorConfig::from_real_eta(&[1.0, 1.0]).unwrap();
        assert!(max_abs(&(effective_efficiency_matrix(&net, &ones).unwrap() - CMatrix::identity(2, 2))) < 1e-15);

        let corner = VirtualDetectorConfig::from_real_eta(&[1.0, 0.0]).unwrap();
        let e = effective_efficiency_matrix(&net, &corner).unwrap();
        assert!(max_abs(&(e - CMatrix::from_element(2, 2, real(0.5)))) < 1e-15);
    }

    #[test]
    fn efficiency_similarity_preserves_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..5 {
            let u = crate::oracle::haar_unitary(3, seed);
            let sources = vec![SourceSpec::two_level_decay(1.0); 3];
            let net = EmitterNetwork::new(sources, u).unwrap();
            let eta: Vec<C64> = (0..3).map(|_| C64::new(rng.gen(), rng.gen())).collect();
            let cfg = VirtualDetectorConfig::from_eta(&eta).unwrap();
            let e = effective_efficiency_matrix(&net, &cfg).unwrap();
            let sum: C64 = eta.iter().sum();
            assert!((e.trace() - sum).norm() < 1e-12);
        }
    }

    #[test]
    fn zpg_at_zero_efficiency_is_lindbladian() {
        let net = pair(splitter());
        let gen = build_zpg(&net, &VirtualDetectorConfig::from_real_eta(&[0.0, 0.0]).unwrap()).unwrap();
        let l = net.lindbladian().unwrap();
        assert_eq!(gen.constant_part(), l.constant_part());
        for t in [0.0, 0.1, 0.2, 1.0] {
            assert_eq!(gen.evaluate(t), l.evaluate(t));
        }
    }

    #[test]
    fn single_mode_lossless_zpg_subtracts_jump() {
        let pulse = square_pulse(10.0 * std::f64::consts::PI, 2.0, 0.0).unwrap();
        let gamma = 1.3;
        let src = SourceSpec::two_level(gamma).with_pulse(&pulse).build().unwrap();
        let net = EmitterNetwork::single(src).unwrap();
        let gen = build_zpg(&net, &VirtualDetectorConfig::from_z(&[VirtualZ::Lossless]).unwrap()).unwrap();
        let s = net.space().clone();
        let sig = OperatorMatrix::new(s, two_level::sigma()).unwrap();
        let jump = sandwich_superop(&sig, &sig).unwrap().scaled(real(gamma));
        for t in [0.5, 3.0] {
            let expected = net.lindbladian().unwrap().evaluate(t).sub(&jump).unwrap();
            assert!(gen.evaluate(t).max_abs_diff(&expected) < 1e-14);
        }
    }

    #[test]
    fn identity_circuit_zpg_acts_locally_on_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = pair(CMatrix::identity(2, 2));
        let eta = [C64::new(0.4, 0.7), C64::new(1.3, -0.2)];
        let gen = build_zpg(&net, &VirtualDetectorConfig::from_eta(&eta).unwrap()).unwrap();
        let singles: Vec<_> = (0..2)
            .map(|k| {
                let n = EmitterNetwork::single(net.sources()[k].clone()).unwrap();
                build_zpg(&n, &VirtualDetectorConfig::from_eta(&eta[k..k + 1]).unwrap()).unwrap()
            })
            .collect();
        for t in [0.1, 0.9] {
            let r1 = crate::liouville::two_level::bloch_state(rng.gen_range(0.0..3.0), rng.gen_range(0.0..6.0));
            let r2 = crate::liouville::two_level::bloch_state(rng.gen_range(0.0..3.0), rng.gen_range(0.0..6.0));
            let a = singles[0].evaluate(t).apply(&r1).unwrap();
            let b = singles[1].evaluate(t).apply(&r2).unwrap();
            let expected = a.kronecker(&r2) + r1.kronecker(&b);
            let got = gen.evaluate(t).apply(&r1.kronecker(&r2)).unwrap();
            assert!(max_abs(&(got - expected)) < 1e-13);
        }
    }

    #[test]
    fn two_body_coupling_structure() {
        let net = pair(splitter());
        let eta = [0.35, 0.8];
        let cfg = VirtualDetectorConfig::from_real_eta(&eta).unwrap();
        let ep = effective_efficiency_matrix(&net, &cfg).unwrap();
        let s = net.space();
        let g = [1.0f64, 0.8];
        let c: Vec<_> = (0..2).map(|i| embed_operator(&two_level::sigma(), i, s).unwrap()).collect();
        let id = OperatorMatrix::identity(s);
        // 𝒥⁻_i ρ = √γ_i c_i ρ, 𝒥⁺_i ρ = √γ_i ρ c_i†
        let jm = |i: usize| sandwich_superop(&c[i], &id).unwrap().scaled(real(g[i].sqrt()));
        let jp = |i: usize| sandwich_superop(&id, &c[i]).unwrap().scaled(real(g[i].sqrt()));

        let zpg = build_zpg(&net, &cfg).unwrap().evaluate(0.1);
        let l = net.lindbladian().unwrap().evaluate(0.1);
        let mut local = l.clone();
        for i in 0..2 {
            local = local.sub(&jp(i).compose(&jm(i)).unwrap().scaled(ep[(i, i)])).unwrap();
        }
        let coupling = local.sub(&zpg).unwrap();
        let expected = jp(0)
            .compose(&jm(1))
            .unwrap()
            .scaled(ep[(0, 1)])
            .add(&jm(0).compose(&jp(1)).unwrap().scaled(ep[(1, 0)]))
            .unwrap();
        assert!(coupling.max_abs_diff(&expected) < 1e-14);
        assert!(ep[(0, 1)].norm() > 0.1);
    }

    #[test]
    fn fourier_grid_layout() {
        let g = fourier_grid(&[2]).unwrap();
        let eta: Vec<C64> = g.configs().iter().map(|c| c.eta()[0]).collect();
        assert_eq!(eta, vec![ZERO, real(2.0)]);

        let g = fourier_grid(&[1]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.configs()[0].eta(), vec![ZERO]);

        let g = fourier_grid(&[2, 2]).unwrap();
        let zi: Vec<Vec<C64>> = g.configs().iter().map(|c| c.z_inv().to_vec()).collect();
        let m1 = real(-1.0);
        assert_eq!(zi, vec![vec![ONE, ONE], vec![ONE, m1], vec![m1, ONE], vec![m1, m1]]);
        assert!(fourier_grid(&[3, 0]).is_err());
    }

    #[test]
    fn fourier_grid_conjugate_pairs() {
        let g = fourier_grid(&[5, 4]).unwrap();
        for i in 0..g.len() {
            let j = g.conjugate_index(i).unwrap();
            let a = g.configs()[i].conjugate();
            for (x, y) in a.z_inv().iter().zip(g.configs()[j].z_inv()) {
                assert!((x - y).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn threshold_grid_layout() {
        let g = threshold_corner_grid(1).unwrap();
        let eta: Vec<C64> = g.configs().iter().map(|c| c.eta()[0]).collect();
        assert_eq!(eta, vec![ONE, ZERO]);
        let g = threshold_corner_grid(2).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.configs()[1].eta(), vec![ONE, ZERO]);
        assert_eq!(g.configs()[2].eta(), vec![ZERO, ONE]);
        assert!(threshold_corner_grid(0).is_err());
    }

    #[test]
    fn ravel_roundtrip() {
        let shape = [3, 1, 4];
        for i in 0..12 {
            assert_eq!(ravel(&unravel(i, &shape), &shape), i);
        }
        assert_eq!(unravel(5, &shape), vec![1, 0, 1]);
    }
}
