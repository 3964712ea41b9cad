//! Inversion of generating tables into photon-counting statistics.
//!
//! A Fourier grid samples `Σ_n p(n) Π_j z_j^{−n_j}` at `z_j⁻¹ = e^{2πi k_j/N_j}`,
//! so `p(n) = (1/D) Σ_k T(k) e^{−2πi k·n/N}`, a forward DFT along every
//! detector axis scaled by `1/Π N_j`.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use rustfft::FftPlanner;
use serde::Serialize;

use crate::dynamics::{batch_generating_solutions, GeneratingTable, PropagationSettings};
use crate::error::{Result, ZpgError};
use crate::liouville::{CMatrix, Superoperator, C64, ZERO};
use crate::zpg::{
    corner_bit, fourier_grid, threshold_corner_grid, unravel, EmitterNetwork, GridKind, SourceSpec,
    VirtualDetectorConfig, VirtualGrid,
};

/// Imaginary residue above which an inversion is treated as aliased.
pub const ALIASING_LIMIT: f64 = 1e-4;
/// Negative probabilities down to this value are roundoff and clamped to zero.
pub const CLAMP_LIMIT: f64 = 1e-9;

/// Anything that assigns probabilities to integer outcome vectors.
pub trait OutcomeDistribution {
    fn outcomes(&self) -> BTreeMap<Vec<usize>, f64>;
}

/// `p(n)` on the box `0 ≤ n_j < N_j`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhotonNumberDistribution {
    truncations: Vec<usize>,
    probs: Vec<f64>,
    residue: f64,
    tail_mass: f64,
}

impl PhotonNumberDistribution {
    /// Wraps explicit probabilities; `probs.len()` must equal `Π truncations`.
    pub fn from_probs(truncations: Vec<usize>, probs: Vec<f64>, residue: f64) -> Result<Self> {
        if truncations.is_empty() || truncations.contains(&0) {
            return Err(ZpgError::InvalidArgument(format!("bad truncations {truncations:?}")));
        }
        if truncations.iter().product::<usize>() != probs.len() {
            return Err(ZpgError::Shape(format!("{} probabilities for truncations {truncations:?}", probs.len())));
        }
        let tail_mass = tail_mass(&truncations, &probs);
        Ok(Self { truncations, probs, residue, tail_mass })
    }

    pub fn truncations(&self) -> &[usize] {
        &self.truncations
    }

    pub fn num_modes(&self) -> usize {
        self.truncations.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn residue(&self) -> f64 {
        self.residue
    }

    /// `Σ p(n)` over outcomes with some `n_j = N_j − 1`.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// `p(n)`, zero outside the truncation box.
    pub fn get(&self, n: &[usize]) -> f64 {
        if n.len() != self.truncations.len() || n.iter().zip(&self.truncations).any(|(a, b)| a >= b) {
            return 0.0;
        }
        self.probs[crate::zpg::ravel(n, &self.truncations)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        self.probs.iter().enumerate().map(|(i, &p)| (unravel(i, &self.truncations), p))
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Mean total photon number `Σ_n |n| p(n)`.
    pub fn mean(&self) -> f64 {
        self.iter().map(|(n, p)| n.iter().sum::<usize>() as f64 * p).sum()
    }

    /// `Σ n(n−1) p(n) / μ²` of the total photon number.
    pub fn g2(&self) -> f64 {
        let mu = self.mean();
        let second: f64 = self
            .iter()
            .map(|(n, p)| {
                let k = n.iter().sum::<usize>() as f64;
                k * (k - 1.0) * p
            })
            .sum();
        second / (mu * mu)
    }

    /// `Σ (−1)^{|n|} p(n)`.
    pub fn parity(&self) -> f64 {
        self.iter().map(|(n, p)| if n.iter().sum::<usize>() % 2 == 0 { p } else { -p }).sum()
    }

    /// Threshold statistics implied by these counts: `m_j = [n_j > 0]`.
    pub fn to_threshold(&self) -> ThresholdDistribution {
        let m = self.num_modes();
        let mut probs = vec![0.0; 1 << m];
        for (n, p) in self.iter() {
            let bits = n.iter().fold(0usize, |acc, &k| (acc << 1) | usize::from(k > 0));
            probs[bits] += p;
        }
        ThresholdDistribution { num_detectors: m, probs }
    }
}

impl OutcomeDistribution for PhotonNumberDistribution {
    fn outcomes(&self) -> BTreeMap<Vec<usize>, f64> {
        self.iter().collect()
    }
}

fn tail_mass(truncations: &[usize], probs: &[f64]) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|(i, _)| unravel(*i, truncations).iter().zip(truncations).any(|(&n, &t)| n + 1 == t))
        .map(|(_, p)| p)
        .sum()
}

/// Conditional states `ρ^(n)` (and optionally maps `𝒫^(n)`), row-major in `n`.
#[derive(Debug, Clone)]
pub struct ConditionalStateSet {
    pub truncations: Vec<usize>,
    pub states: Vec<CMatrix>,
    pub maps: Option<Vec<Superoperator>>,
    /// Largest `‖ρ − ρ†‖_max / 2` removed by the Hermitian cleanup.
    pub hermitian_deviation: f64,
}

impl ConditionalStateSet {
    pub fn state(&self, n: &[usize]) -> Option<&CMatrix> {
        if n.len() != self.truncations.len() || n.iter().zip(&self.truncations).any(|(a, b)| a >= b) {
            return None;
        }
        self.states.get(crate::zpg::ravel(n, &self.truncations))
    }

    pub fn map(&self, n: &[usize]) -> Option<&Superoperator> {
        let maps = self.maps.as_ref()?;
        if n.len() != self.truncations.len() || n.iter().zip(&self.truncations).any(|(a, b)| a >= b) {
            return None;
        }
        maps.get(crate::zpg::ravel(n, &self.truncations))
    }
}

/// Click statistics `β(m)` over `m ∈ {0,1}^M`, indexed with `m_1` as the most significant bit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdDistribution {
    num_detectors: usize,
    probs: Vec<f64>,
}

impl ThresholdDistribution {
    pub fn num_detectors(&self) -> usize {
        self.num_detectors
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, m: &[bool]) -> f64 {
        assert_eq!(m.len(), self.num_detectors, "click pattern length");
        let bits = m.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b));
        self.probs[bits]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Single-detector click probability `β = 1 − p⁰`.
    pub fn brightness(&self) -> Option<f64> {
        (self.num_detectors == 1).then(|| self.probs[1])
    }
}

impl OutcomeDistribution for ThresholdDistribution {
    fn outcomes(&self) -> BTreeMap<Vec<usize>, f64> {
        let m = self.num_detectors;
        self.probs
            .iter()
            .enumerate()
            .map(|(bits, &p)| ((0..m).map(|i| usize::from(corner_bit(bits, i, m))).collect(), p))
            .collect()
    }
}

/// Forward DFT along every axis of a row-major array, scaled by `1/len`.
fn inverse_z_transform(values: &mut [C64], shape: &[usize], planner: &mut FftPlanner<f64>) {
    let total: usize = shape.iter().product();
    debug_assert_eq!(values.len(), total);
    let mut stride = total;
    for &n in shape {
        stride /= n;
        if n == 1 {
            continue;
        }
        let fft = planner.plan_fft_forward(n);
        let mut line = vec![ZERO; n];
        let block = n * stride;
        for outer in (0..total).step_by(block) {
            for inner in 0..stride {
                let base = outer + inner;
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = values[base + k * stride];
                }
                fft.process(&mut line);
                for (k, v) in line.iter().enumerate() {
                    values[base + k * stride] = *v;
                }
            }
        }
    }
    let scale = 1.0 / total as f64;
    for v in values.iter_mut() {
        *v *= scale;
    }
}

fn require_fourier(grid: &VirtualGrid) -> Result<()> {
    if grid.kind() != GridKind::Fourier {
        return Err(ZpgError::InvalidArgument(format!("expected a fourier grid, got {:?}", grid.kind())));
    }
    Ok(())
}

/// Photon-number distribution from the generating traces of a Fourier grid.
pub fn invert_distribution(table: &GeneratingTable) -> Result<PhotonNumberDistribution> {
    require_fourier(&table.grid)?;
    let shape = table.grid.truncations().to_vec();
    let mut values = table.traces.clone();
    inverse_z_transform(&mut values, &shape, &mut FftPlanner::new());
    let mut residue = values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if !(residue <= ALIASING_LIMIT) {
        return Err(ZpgError::Aliasing { residue, limit: ALIASING_LIMIT });
    }
    let mut clamped = 0.0f64;
    let probs: Vec<f64> = values
        .iter()
        .map(|v| {
            if v.re < 0.0 && v.re >= -CLAMP_LIMIT {
                clamped = clamped.max(-v.re);
                0.0
            } else {
                v.re
            }
        })
        .collect();
    residue += clamped;
    PhotonNumberDistribution::from_probs(shape, probs, residue)
}

/// Conditional states (and maps, when present) from a Fourier-grid table.
pub fn invert_states(table: &GeneratingTable) -> Result<ConditionalStateSet> {
    require_fourier(&table.grid)?;
    let shape = table.grid.truncations().to_vec();
    let states =
        table.final_states.as_ref().ok_or_else(|| ZpgError::InvalidArgument("table has no final states".into()))?;
    let mut planner = FftPlanner::new();
    let inverted = invert_matrices(states, &shape, &mut planner);
    let mut deviation = 0.0f64;
    let states = inverted
        .into_iter()
        .map(|rho| {
            let anti = (&rho - rho.adjoint()) * C64::new(0.5, 0.0);
            deviation = deviation.max(anti.iter().map(|z| z.norm()).fold(0.0, f64::max));
            (&rho + rho.adjoint()) * C64::new(0.5, 0.0)
        })
        .collect();
    let maps = match &table.final_maps {
        Some(maps) => {
            let space = maps[0].space().clone();
            let actions: Vec<CMatrix> = maps.iter().map(|m| m.action().clone()).collect();
            Some(
                invert_matrices(&actions, &shape, &mut planner)
                    .into_iter()
                    .map(|a| Superoperator::new(space.clone(), a))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    if deviation > ALIASING_LIMIT {
        return Err(ZpgError::Aliasing { residue: deviation, limit: ALIASING_LIMIT });
    }
    Ok(ConditionalStateSet { truncations: shape, states, maps, hermitian_deviation: deviation })
}

fn invert_matrices(mats: &[CMatrix], shape: &[usize], planner: &mut FftPlanner<f64>) -> Vec<CMatrix> {
    let (r, c) = mats[0].shape();
    let mut out: Vec<CMatrix> = vec![CMatrix::zeros(r, c); mats.len()];
    let mut line = vec![ZERO; mats.len()];
    for e in 0..r * c {
        for (slot, m) in line.iter_mut().zip(mats) {
            *slot = m.as_slice()[e];
        }
        inverse_z_transform(&mut line, shape, planner);
        for (o, v) in out.iter_mut().zip(&line) {
            o.as_mut_slice()[e] = *v;
        }
    }
    out
}

/// `β(m) = Σ_L T(L) Π_i (−1)^{m_i+L_i} (1−L_i)^{1−m_i}` over the threshold corners.
pub fn threshold_distribution(table: &GeneratingTable) -> Result<ThresholdDistribution> {
    if table.grid.kind() != GridKind::ThresholdCorners {
        return Err(ZpgError::InvalidArgument(format!("expected threshold corners, got {:?}", table.grid.kind())));
    }
    let m = table.grid.num_modes();
    if table.traces.len() != 1 << m {
        return Err(ZpgError::Shape(format!("{} corner traces for {m} detectors", table.traces.len())));
    }
    let probs = (0..1usize << m)
        .map(|mb| {
            // terms with m_i = 0 and L_i = 1 vanish: L ranges over subsets of m
            let mut acc = 0.0;
            let mut sub = mb;
            loop {
                let flips = (mb ^ sub).count_ones();
                let sign = if flips % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * table.traces[sub].re;
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & mb;
            }
            acc
        })
        .collect();
    Ok(ThresholdDistribution { num_detectors: m, probs })
}

/// Fourier-grid solve plus inversion.
pub fn photon_number_distribution(
    network: &EmitterNetwork,
    truncations: &[usize],
    settings: &PropagationSettings,
) -> Result<PhotonNumberDistribution> {
    let grid = fourier_grid(truncations)?;
    invert_distribution(&batch_generating_solutions(network, &grid, settings, false, false)?)
}

/// Doubles every truncation until the tail mass is below `tolerance`.
pub fn auto_photon_number_distribution(
    network: &EmitterNetwork,
    initial: &[usize],
    settings: &PropagationSettings,
    tolerance: f64,
    max_doublings: usize,
) -> Result<PhotonNumberDistribution> {
    let mut truncations = initial.to_vec();
    let mut dist = photon_number_distribution(network, &truncations, settings);
    for _ in 0..max_doublings {
        match &dist {
            Ok(d) if d.tail_mass() < tolerance => break,
            Ok(_) | Err(ZpgError::Aliasing { .. }) => {}
            Err(_) => break,
        }
        truncations.iter_mut().for_each(|n| *n *= 2);
        dist = photon_number_distribution(network, &truncations, settings);
    }
    dist
}

/// Threshold statistics from the `2^M` corner solves.
pub fn threshold_statistics(network: &EmitterNetwork, settings: &PropagationSettings) -> Result<ThresholdDistribution> {
    let grid = threshold_corner_grid(network.num_modes())?;
    threshold_distribution(&batch_generating_solutions(network, &grid, settings, false, false)?)
}

/// Zero-photon probabilities `Re Tr[𝒢_η ρ₀]` of a single-detector network.
pub fn zero_photon_probabilities(
    network: &EmitterNetwork,
    etas: &[f64],
    settings: &PropagationSettings,
) -> Result<Vec<f64>> {
    if network.num_modes() != 1 {
        return Err(ZpgError::InvalidArgument(format!(
            "expected a single detector, network has {}",
            network.num_modes()
        )));
    }
    let configs = etas.iter().map(|&e| VirtualDetectorConfig::from_real_eta(&[e])).collect::<Result<Vec<_>>>()?;
    let grid = VirtualGrid::custom(configs)?;
    let table = batch_generating_solutions(network, &grid, settings, false, false)?;
    Ok(table.traces.iter().map(|t| t.re).collect())
}

/// A finite-difference estimate after one Richardson step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDifferenceEstimate {
    pub value: f64,
    /// Raw estimates at the step and at half the step.
    pub raw: [f64; 2],
    /// `|raw[0] − raw[1]|`.
    pub error_gauge: f64,
}

/// `μ(η) = lim_{η′→0} (1 − p⁰_{η′η}) / η′`.
pub fn mean_photon_number(
    network: &EmitterNetwork,
    eta_real: f64,
    eta_step: f64,
    settings: &PropagationSettings,
) -> Result<FiniteDifferenceEstimate> {
    if !(eta_step > 0.0) {
        return Err(ZpgError::InvalidArgument(format!("eta_step must be positive, got {eta_step}")));
    }
    let steps = [eta_step, eta_step / 2.0];
    let p0 = zero_photon_probabilities(network, &[steps[0] * eta_real, steps[1] * eta_real], settings)?;
    let raw = [(1.0 - p0[0]) / steps[0], (1.0 - p0[1]) / steps[1]];
    Ok(FiniteDifferenceEstimate { value: 2.0 * raw[1] - raw[0], raw, error_gauge: (raw[0] - raw[1]).abs() })
}

/// `g² = (4/μ²) lim_{η→0} (1 − 2p⁰_{η/2} + p⁰_η) / η²`, Richardson-extrapolated.
pub fn g2(network: &EmitterNetwork, eta_step: f64, settings: &PropagationSettings) -> Result<FiniteDifferenceEstimate> {
    if !(eta_step > 0.0) {
        return Err(ZpgError::InvalidArgument(format!("eta_step must be positive, got {eta_step}")));
    }
    let e = eta_step;
    let p = zero_photon_probabilities(network, &[e, e / 2.0, e / 4.0], settings)?;
    let m = |p0: f64, x: f64| (1.0 - p0) / x;
    let mu_a = 2.0 * m(p[1], e / 2.0) - m(p[0], e);
    let mu_b = 2.0 * m(p[2], e / 4.0) - m(p[1], e / 2.0);
    let mu = mu_a.max(mu_b);
    if !(mu.abs() >= 1e-12) {
        return Err(ZpgError::UndefinedG2 { mu });
    }
    let second = |lo: f64, hi: f64, x: f64| (1.0 - 2.0 * lo + hi) / (x * x);
    let ga = 4.0 * second(p[1], p[0], e) / (mu_a * mu_a);
    let gb = 4.0 * second(p[2], p[1], e / 2.0) / (mu_b * mu_b);
    Ok(FiniteDifferenceEstimate { value: 2.0 * gb - ga, raw: [ga, gb], error_gauge: (ga - gb).abs() })
}

/// Balanced splitter `[[1, 1], [1, −1]] / √2`.
pub fn balanced_splitter() -> CMatrix {
    let s = C64::new(FRAC_1_SQRT_2, 0.0);
    CMatrix::from_row_slice(2, 2, &[s, s, s, -s])
}

/// Coincidence probability `β(1,1)` after two-photon interference of
/// `source` and `twin` (a copy of `source` when `None`) on a balanced splitter.
pub fn hom_coincidence(
    source: &SourceSpec,
    twin: Option<&SourceSpec>,
    settings: Option<&PropagationSettings>,
) -> Result<f64> {
    let twin = twin.unwrap_or(source).clone();
    let network = EmitterNetwork::new(vec![source.clone(), twin], balanced_splitter())?;
    let settings = settings.cloned().unwrap_or_else(|| PropagationSettings::for_network(&network));
    Ok(threshold_statistics(&network, &settings)?.get(&[true, true]))
}

/// Raw HOM coincidence next to a distinguishable reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HomReport {
    pub coincidence: f64,
    pub reference_coincidence: f64,
    /// `coincidence / reference_coincidence`.
    pub ratio: f64,
}

pub fn hom_report(
    source: &SourceSpec,
    distinguishable_twin: &SourceSpec,
    settings: Option<&PropagationSettings>,
) -> Result<HomReport> {
    let coincidence = hom_coincidence(source, None, settings)?;
    let reference_coincidence = hom_coincidence(source, Some(distinguishable_twin), settings)?;
    Ok(HomReport { coincidence, reference_coincidence, ratio: coincidence / reference_coincidence })
}

/// `Σ_n (−1)ⁿ p(n)`, the real part of the generating trace at `z = −1`.
pub fn parity(network: &EmitterNetwork, settings: &PropagationSettings) -> Result<f64> {
    Ok(zero_photon_probabilities(network, &[2.0], settings)?[0])
}

/// Total variation distance `½ Σ |P − Q|` over the union of supports.
pub fn tvd<P: OutcomeDistribution + ?Sized, Q: OutcomeDistribution + ?Sized>(p: &P, q: &Q) -> f64 {
    let a = p.outcomes();
    let b = q.outcomes();
    let mut sum = 0.0;
    for (k, pa) in &a {
        sum += (pa - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, pb) in &b {
        if !a.contains_key(k) {
            sum += pb.abs();
        }
    }
    0.5 * sum
}
