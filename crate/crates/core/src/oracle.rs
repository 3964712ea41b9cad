//! Independent references for validating the generating-function pipeline.
//!
//! Everything here is single-threaded and written for clarity over speed.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decomposition::PhotonNumberDistribution;
use crate::dynamics::{propagate_map_compiled, CompiledGenerator, PropagationSettings};
use crate::error::{Result, ZpgError};
use crate::liouville::{trace_functional, vectorize, CMatrix, C64, ONE, ZERO};
use crate::zpg::{ravel, unravel, EmitterNetwork};

/// Largest number of leaf evaluations the recursive oracle will attempt.
pub const EVALUATION_GUARD: f64 = 1e8;

/// Mesh and integrator settings for [`recursive_pn`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSettings {
    /// Mesh points per lifetime of the fastest emitter.
    pub points_per_lifetime: usize,
    /// Combine meshes `h` and `h/2` as `(4 I_{h/2} − I_h) / 3`.
    pub richardson: bool,
    /// Horizon and tolerances for the mesh propagators.
    pub propagation: PropagationSettings,
}

impl QuadratureSettings {
    pub fn new(points_per_lifetime: usize, propagation: PropagationSettings) -> Self {
        Self { points_per_lifetime, richardson: false, propagation }
    }

    pub fn with_richardson(mut self, on: bool) -> Self {
        self.richardson = on;
        self
    }

    fn intervals(&self, network: &EmitterNetwork) -> usize {
        let fastest =
            network.sources().iter().map(|s| s.collection_rate()).fold(0.0f64, f64::max).max(network.min_rate());
        let span = self.propagation.t1 - self.propagation.t0;
        ((span * fastest * self.points_per_lifetime as f64).round() as usize).max(1)
    }
}

/// Output of [`recursive_pn`].
#[derive(Debug, Clone)]
pub struct RecursiveResult {
    /// `p(n)` for `|n| ≤ n_max`; entries of higher total order are zero.
    pub distribution: PhotonNumberDistribution,
    pub n_max: usize,
    /// Mesh points of the finest mesh used.
    pub mesh_points: usize,
    /// Leaf evaluations `⟨ℓ_j, σ⟩` performed.
    pub evaluations: u64,
}

/// Photon-number probabilities up to total order `n_max` by nested
/// composite-trapezoid integration over ordered jump times.
pub fn recursive_pn(network: &EmitterNetwork, n_max: usize, quad: &QuadratureSettings) -> Result<RecursiveResult> {
    if quad.points_per_lifetime == 0 {
        return Err(ZpgError::InvalidArgument("points_per_lifetime must be positive".into()));
    }
    quad.propagation.validate()?;
    let coarse = quad.intervals(network);
    let finest = if quad.richardson { 2 * coarse } else { coarse };
    let points = finest + 1;
    let estimated = (points as f64).powi(n_max as i32);
    if estimated > EVALUATION_GUARD {
        return Err(ZpgError::GuardRefused { estimated, limit: EVALUATION_GUARD });
    }
    let sweep = Sweep::new(network)?;
    let fine = sweep.run(n_max, finest, &quad.propagation)?;
    let (probs, evaluations) = if quad.richardson {
        let rough = sweep.run(n_max, coarse, &quad.propagation)?;
        let p = fine.probs.iter().zip(&rough.probs).map(|(f, r)| (4.0 * f - r) / 3.0).collect();
        (p, fine.evaluations + rough.evaluations)
    } else {
        (fine.probs, fine.evaluations)
    };
    let truncations = vec![n_max + 1; network.num_modes()];
    Ok(RecursiveResult {
        distribution: PhotonNumberDistribution::from_probs(truncations, probs, 0.0)?,
        n_max,
        mesh_points: points,
        evaluations,
    })
}

struct SweepOutput {
    probs: Vec<f64>,
    evaluations: u64,
}

struct Sweep {
    modes: usize,
    no_click: CompiledGenerator,
    jumps: Vec<DMatrix<C64>>,
    rho0: Vec<C64>,
    trace: Vec<C64>,
}

impl Sweep {
    fn new(network: &EmitterNetwork) -> Result<Self> {
        let mut gen = network.lindbladian()?;
        let jumps = (0..network.num_modes()).map(|j| network.detector_jump(j)).collect::<Result<Vec<_>>>()?;
        for j in &jumps {
            gen.add_constant(j, -ONE)?;
        }
        let d = network.space().total_dim();
        Ok(Self {
            modes: network.num_modes(),
            no_click: CompiledGenerator::new(&gen),
            jumps: jumps.into_iter().map(|j| j.action().clone()).collect(),
            rho0: vectorize(network.joint_initial_state()).as_slice().to_vec(),
            trace: trace_functional(d).as_slice().to_vec(),
        })
    }

    fn run(&self, n_max: usize, intervals: usize, settings: &PropagationSettings) -> Result<SweepOutput> {
        let h = (settings.t1 - settings.t0) / intervals as f64;
        let mesh: Vec<DMatrix<C64>> = (0..intervals)
            .map(|k| {
                let a = settings.t0 + k as f64 * h;
                let b = if k + 1 == intervals { settings.t1 } else { a + h };
                propagate_map_compiled(&self.no_click, a, b, settings)
            })
            .collect::<Result<_>>()?;
        // ℓ_k = vec(I)ᵀ E_{K−1} ⋯ E_k, stored as rows
        let mut left = vec![self.trace.clone(); intervals + 1];
        for k in (0..intervals).rev() {
            left[k] = row_times(&left[k + 1], &mesh[k]);
        }
        let left_jump: Vec<Vec<Vec<C64>>> =
            left.iter().map(|l| self.jumps.iter().map(|jm| row_times(l, jm)).collect()).collect();
        let mut walk = Walk {
            sweep: self,
            mesh: &mesh,
            left_jump: &left_jump,
            h,
            n_max,
            truncations: vec![n_max + 1; self.modes],
            probs: vec![0.0; (n_max + 1).pow(self.modes as u32)],
            counts: vec![0; self.modes],
            evaluations: 0,
        };
        walk.probs[0] = dot(&left[0], &self.rho0).re;
        walk.evaluations += 1;
        if n_max > 0 {
            walk.descend(0, &self.rho0, 0);
        }
        Ok(SweepOutput { probs: walk.probs, evaluations: walk.evaluations })
    }
}

struct Walk<'a> {
    sweep: &'a Sweep,
    mesh: &'a [DMatrix<C64>],
    /// `ℓ_jᵀ 𝒥_label`, indexed `[j][label]`.
    left_jump: &'a [Vec<Vec<C64>>],
    h: f64,
    n_max: usize,
    truncations: Vec<usize>,
    probs: Vec<f64>,
    counts: Vec<usize>,
    evaluations: u64,
}

impl Walk<'_> {
    /// Integrates one more jump over `[t_u, T]` starting from `σ` at mesh point `u`.
    fn descend(&mut self, u: usize, sigma: &[C64], depth: usize) {
        let last = self.mesh.len();
        if u == last {
            return;
        }
        let mut here = sigma.to_vec();
        for j in u..=last {
            if j > u {
                here = mat_times(&self.mesh[j - 1], &here);
            }
            let w = if j == u || j == last { 0.5 * self.h } else { self.h };
            for label in 0..self.sweep.modes {
                self.counts[label] += 1;
                let idx = ravel(&self.counts, &self.truncations);
                self.probs[idx] += w * dot(&self.left_jump[j][label], &here).re;
                self.evaluations += 1;
                if depth + 1 < self.n_max {
                    let mut child = mat_times(&self.sweep.jumps[label], &here);
                    child.iter_mut().for_each(|z| *z *= w);
                    self.descend(j, &child, depth + 1);
                }
                self.counts[label] -= 1;
            }
        }
    }
}

fn mat_times(m: &DMatrix<C64>, v: &[C64]) -> Vec<C64> {
    let n = m.nrows();
    let mut out = vec![ZERO; n];
    for (c, &x) in v.iter().enumerate() {
        if x == ZERO {
            continue;
        }
        for (o, a) in out.iter_mut().zip(m.column(c).iter()) {
            *o += a * x;
        }
    }
    out
}

fn row_times(row: &[C64], m: &DMatrix<C64>) -> Vec<C64> {
    (0..m.ncols()).map(|c| m.column(c).iter().zip(row).map(|(a, r)| a * r).sum()).collect()
}

fn dot(row: &[C64], v: &[C64]) -> C64 {
    row.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `e^{−γt} + (1−η)(1−e^{−γt})`: no-click probability of a decaying emitter.
pub fn decay_reference(gamma: f64, eta: f64, t: f64) -> f64 {
    let survive = (-gamma * t).exp();
    survive + (1.0 - eta) * (1.0 - survive)
}

/// Permanent by Ryser's formula with Gray-code updates.
pub fn permanent(m: &CMatrix) -> C64 {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "permanent needs a square matrix");
    if n == 0 {
        return ONE;
    }
    let mut row_sums = vec![ZERO; n];
    let mut total = ZERO;
    let mut gray = 0usize;
    for k in 1..(1usize << n) {
        let next = k ^ (k >> 1);
        let flipped = (gray ^ next).trailing_zeros() as usize;
        let sign = if next & (1 << flipped) != 0 { 1.0 } else { -1.0 };
        for (r, s) in row_sums.iter_mut().enumerate() {
            *s += m[(r, flipped)] * sign;
        }
        gray = next;
        let prod: C64 = row_sums.iter().product();
        let parity = if (n - next.count_ones() as usize).is_multiple_of(2) { 1.0 } else { -1.0 };
        total += prod * parity;
    }
    total
}

/// Output statistics of ideal indistinguishable single photons injected at
/// the inputs marked in `occupied`, through the circuit `unitary`.
pub fn ideal_interference_distribution(unitary: &CMatrix, occupied: &[bool]) -> Result<PhotonNumberDistribution> {
    let m = unitary.nrows();
    if m != unitary.ncols() || occupied.len() != m {
        return Err(ZpgError::Shape(format!(
            "unitary is {}x{}, occupation has {} entries",
            unitary.nrows(),
            unitary.ncols(),
            occupied.len()
        )));
    }
    if m > 6 {
        return Err(ZpgError::InvalidArgument(format!("permanent oracle supports at most 6 modes, got {m}")));
    }
    let inputs: Vec<usize> = (0..m).filter(|&i| occupied[i]).collect();
    let photons = inputs.len();
    let truncations = vec![photons + 1; m];
    let size = (photons + 1).pow(m as u32);
    let mut probs = vec![0.0; size];
    for (idx, p) in probs.iter_mut().enumerate() {
        let n = unravel(idx, &truncations);
        if n.iter().sum::<usize>() != photons {
            continue;
        }
        let rows: Vec<usize> = n.iter().enumerate().flat_map(|(j, &k)| std::iter::repeat_n(j, k)).collect();
        let sub = CMatrix::from_fn(photons, photons, |a, b| unitary[(rows[a], inputs[b])]);
        let norm: f64 = n.iter().map(|&k| (1..=k).product::<usize>() as f64).product();
        *p = permanent(&sub).norm_sqr() / norm;
    }
    PhotonNumberDistribution::from_probs(truncations, probs, 0.0)
}

/// Haar-random `size × size` unitary, deterministic in `seed`.
pub fn haar_unitary(size: usize, seed: u64) -> CMatrix {
    assert!(size >= 1, "unitary size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let z = CMatrix::from_fn(size, size, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        C64::new(re * scale, im * scale)
    });
    let qr = z.qr();
    let (mut q, r) = qr.unpack();
    for c in 0..size {
        let d = r[(c, c)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for x in q.column_mut(c).iter_mut() {
            *x *= phase;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::square_pulse;
    use crate::zpg::SourceSpec;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

    fn unitary_error(u: &CMatrix) -> f64 {
        let n = u.nrows();
        (u.adjoint() * u - CMatrix::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn decay_reference_examples() {
        assert!(decay_reference(1.0, 1.0, 60.0).abs() < 1e-20);
        for t in [0.0, 0.3, 5.0] {
            assert_eq!(decay_reference(2.0, 0.0, t), 1.0);
        }
        assert!((decay_reference(1.0, 1.0, LN_2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn permanent_small_cases() {
        let m = CMatrix::from_row_slice(2, 2, &[ONE, ONE * 2.0, ONE * 3.0, ONE * 4.0]);
        assert!((permanent(&m) - ONE * 10.0).norm() < 1e-14);
        let ones = CMatrix::from_element(4, 4, ONE);
        assert!((permanent(&ones) - ONE * 24.0).norm() < 1e-12);
        assert_eq!(permanent(&CMatrix::identity(3, 3)), ONE);
    }

    proptest! {
        #[test]
        fn permanent_matches_expansion(seed in 0u64..200, n in 1usize..5) {
            let m = haar_unitary(n, seed);
            let mut expect = ZERO;
            for perm in permutations(n) {
                expect += perm.iter().enumerate().map(|(r, &c)| m[(r, c)]).product::<C64>();
            }
            prop_assert!((permanent(&m) - expect).norm() < 1e-12);
        }

        #[test]
        fn haar_is_unitary_and_seeded(seed in 0u64..1000, n in 1usize..7) {
            let u = haar_unitary(n, seed);
            prop_assert!(unitary_error(&u) < 1e-12);
            prop_assert_eq!(u.clone(), haar_unitary(n, seed));
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn haar_single_mode_is_phase() {
        let u = haar_unitary(1, 9);
        assert!((u[(0, 0)].norm() - 1.0).abs() < 1e-14);
        assert_ne!(haar_unitary(3, 1), haar_unitary(3, 2));
    }

    #[test]
    fn interference_examples() {
        let s = C64::new(FRAC_1_SQRT_2, 0.0);
        let bs = CMatrix::from_row_slice(2, 2, &[s, s, s, -s]);
        let d = ideal_interference_distribution(&bs, &[true, true]).unwrap();
        assert!((d.get(&[2, 0]) - 0.5).abs() < 1e-15);
        assert!((d.get(&[0, 2]) - 0.5).abs() < 1e-15);
        assert!(d.get(&[1, 1]).abs() < 1e-15);
        let id = ideal_interference_distribution(&CMatrix::identity(2, 2), &[true, false]).unwrap();
        assert_eq!(id.get(&[1, 0]), 1.0);
        let h = ideal_interference_distribution(&haar_unitary(3, 4), &[true, true, true]).unwrap();
        assert!((h.total() - 1.0).abs() < 1e-12);
        assert!(ideal_interference_distribution(&CMatrix::identity(7, 7), &[false; 7]).is_err());
    }

    fn decay_settings(t1: f64) -> QuadratureSettings {
        QuadratureSettings::new(400, PropagationSettings::default().with_horizon(0.0, t1))
    }

    #[test]
    fn recursive_decay_half_life() {
        let net = EmitterNetwork::single(SourceSpec::two_level_decay(1.0)).unwrap();
        let r = recursive_pn(&net, 1, &decay_settings(LN_2)).unwrap();
        assert!((r.distribution.get(&[0]) - 0.5).abs() < 1e-12);
        assert!((r.distribution.get(&[1]) - 0.5).abs() < 1e-6);
        let r = recursive_pn(&net, 1, &decay_settings(LN_2).with_richardson(true)).unwrap();
        assert!((r.distribution.get(&[1]) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn recursive_ground_state_emits_nothing() {
        let net = EmitterNetwork::single(SourceSpec::two_level(1.0).build().unwrap()).unwrap();
        for n_max in 0..3 {
            let r = recursive_pn(&net, n_max, &QuadratureSettings::new(20, PropagationSettings::default())).unwrap();
            assert!((r.distribution.get(&[0]) - 1.0).abs() < 1e-12);
            assert!(r.distribution.probs()[1..].iter().all(|p| p.abs() < 1e-14));
        }
    }

    #[test]
    fn recursive_guard_refuses() {
        let net = EmitterNetwork::single(SourceSpec::two_level_decay(1.0)).unwrap();
        let q = QuadratureSettings::new(1000, PropagationSettings::default().with_horizon(0.0, 50.0));
        assert!(matches!(recursive_pn(&net, 3, &q), Err(ZpgError::GuardRefused { .. })));
    }

    #[test]
    fn recursive_cost_grows_with_order() {
        let pulse = square_pulse(PI, 0.5, 0.0).unwrap();
        let net = EmitterNetwork::single(SourceSpec::two_level(1.0).with_pulse(&pulse).build().unwrap()).unwrap();
        let q = |p| QuadratureSettings::new(p, PropagationSettings::default().with_horizon(0.0, 4.0));
        let e = |p, n| recursive_pn(&net, n, &q(p)).unwrap().evaluations as f64;
        // doubling the mesh multiplies order-2 cost by about 4
        let ratio = e(20, 2) / e(10, 2);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
        let ratio = e(20, 3) / e(10, 3);
        assert!((7.0..9.0).contains(&ratio), "{ratio}");
    }
}
