//! Propagation of effective master equations.
//!
//! The stepper is an embedded Dormand–Prince 5(4) pair with local
//! extrapolation. Coefficient discontinuities (pulse edges) are mandatory
//! step boundaries, and coefficients are sampled from inside the current
//! segment so a stage at an edge sees the value on the correct side.

use rayon::prelude::*;

use crate::error::{Result, ZpgError};
use crate::liouville::{
    trace_functional, unvectorize, vectorize, CMatrix, Coefficient, Superoperator, TimeDependentGenerator, C64, ZERO,
};
use crate::zpg::{EmitterNetwork, GridKind, VirtualGrid, ZpgFactory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PulseKind {
    Square,
    Custom,
}

/// Drive envelope `Ω(t)` with area `theta` on `[t_start, t_start + tau]`.
#[derive(Debug, Clone)]
pub struct PulseShape {
    kind: PulseKind,
    theta: f64,
    tau: f64,
    t_start: f64,
    envelope: Coefficient,
}

impl PulseShape {
    pub fn kind(&self) -> PulseKind {
        self.kind
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn support(&self) -> (f64, f64) {
        (self.t_start, self.t_start + self.tau)
    }

    pub fn end(&self) -> f64 {
        self.t_start + self.tau
    }

    pub fn envelope(&self) -> Coefficient {
        self.envelope.clone()
    }

    pub fn envelope_value(&self, t: f64) -> f64 {
        self.envelope.value(t)
    }
}

/// Square pulse of area `theta` and width `tau`: `Ω = θ/τ` on `[t_start, t_start + τ)`.
pub fn square_pulse(theta: f64, tau: f64, t_start: f64) -> Result<PulseShape> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ZpgError::InvalidArgument(format!("pulse width must be positive, got {tau}")));
    }
    if !theta.is_finite() || !t_start.is_finite() {
        return Err(ZpgError::InvalidArgument("pulse area and start must be finite".into()));
    }
    let rabi = theta / tau;
    let end = t_start + tau;
    let envelope = Coefficient::from_fn(move |t| if t >= t_start && t < end { rabi } else { 0.0 }, vec![t_start, end]);
    Ok(PulseShape { kind: PulseKind::Square, theta, tau, t_start, envelope })
}

/// Arbitrary envelope supported on `[t_start, t_start + tau]`; the area is
/// computed by composite Simpson quadrature.
pub fn custom_pulse<F>(envelope: F, tau: f64, t_start: f64) -> Result<PulseShape>
where
    F: Fn(f64) -> f64 + Send + Sync + 'static,
{
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ZpgError::InvalidArgument(format!("pulse width must be positive, got {tau}")));
    }
    let end = t_start + tau;
    let envelope =
        Coefficient::from_fn(move |t| if t >= t_start && t <= end { envelope(t) } else { 0.0 }, vec![t_start, end]);
    let n = 4000;
    let h = tau / n as f64;
    let theta = (0..=n)
        .map(|k| {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * envelope.value(t_start + k as f64 * h)
        })
        .sum::<f64>()
        * h
        / 3.0;
    Ok(PulseShape { kind: PulseKind::Custom, theta, tau, t_start, envelope })
}

/// Horizon and tolerances for one propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationSettings {
    pub t0: f64,
    pub t1: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    /// Solve only one of each `z, z̄` pair and fill the other by conjugation.
    pub conjugate_shortcut: bool,
    /// Worker threads for batches; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl Default for PropagationSettings {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t1: 15.0,
            rtol: 1e-10,
            atol: 1e-12,
            max_step: f64::INFINITY,
            conjugate_shortcut: true,
            workers: None,
        }
    }
}

impl PropagationSettings {
    /// Default horizon: end of the last drive plus 15 lifetimes of the slowest emitter.
    pub fn for_network(network: &EmitterNetwork) -> Self {
        let t0 = 0.0;
        let end = network.drive_end().unwrap_or(t0).max(t0);
        Self { t0, t1: end + 15.0 / network.min_rate(), ..Self::default() }
    }

    pub fn with_horizon(mut self, t0: f64, t1: f64) -> Self {
        self.t0 = t0;
        self.t1 = t1;
        self
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > self.t0) || !self.t0.is_finite() || !self.t1.is_finite() {
            return Err(ZpgError::InvalidArgument(format!("need t1 > t0, got [{}, {}]", self.t0, self.t1)));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(ZpgError::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(ZpgError::InvalidArgument("max_step must be positive".into()));
        }
        Ok(())
    }
}

/// Compressed sparse rows of a superoperator matrix.
#[derive(Debug, Clone)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Csr {
    fn from_dense(m: &CMatrix) -> Self {
        let mut row_ptr = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != ZERO {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { row_ptr, cols, vals }
    }

    /// `out += k · A x`
    fn mul_add(&self, k: C64, x: &[C64], out: &mut [C64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = ZERO;
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            *o += k * acc;
        }
    }
}

/// A generator prepared for repeated application.
#[derive(Debug, Clone)]
pub(crate) struct CompiledGenerator {
    dim: usize,
    constant: Csr,
    driven: Vec<(Csr, Coefficient)>,
    breakpoints: Vec<f64>,
}

impl CompiledGenerator {
    pub(crate) fn new(gen: &TimeDependentGenerator) -> Self {
        Self {
            dim: gen.space().liouville_dim(),
            constant: Csr::from_dense(gen.constant_part().action()),
            driven: gen.driven_parts().iter().map(|(s, c)| (Csr::from_dense(s.action()), c.clone())).collect(),
            breakpoints: gen.breakpoints(),
        }
    }

    /// `out = 𝓛(t) y` for each of the `y.len() / dim` stacked columns.
    fn apply(&self, t: f64, y: &[C64], out: &mut [C64]) {
        out.fill(ZERO);
        for (yc, oc) in y.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
            self.constant.mul_add(C64::new(1.0, 0.0), yc, oc);
        }
        for (csr, c) in &self.driven {
            let k = c.value(t);
            if k == 0.0 {
                continue;
            }
            for (yc, oc) in y.chunks_exact(self.dim).zip(out.chunks_exact_mut(self.dim)) {
                csr.mul_add(C64::new(k, 0.0), yc, oc);
            }
        }
    }
}

/// Work counters of one integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evaluations: usize,
}

impl IntegrationStats {
    fn absorb(&mut self, other: IntegrationStats) {
        self.accepted_steps += other.accepted_steps;
        self.rejected_steps += other.rejected_steps;
        self.rhs_evaluations += other.rhs_evaluations;
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Workspace {
    k: [Vec<C64>; 7],
    tmp: Vec<C64>,
    y_new: Vec<C64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self { k: std::array::from_fn(|_| vec![ZERO; n]), tmp: vec![ZERO; n], y_new: vec![ZERO; n] }
    }
}

fn combine(out: &mut [C64], y: &[C64], h: f64, terms: &[(f64, &[C64])]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = ZERO;
        for (c, k) in terms {
            acc += k[i] * *c;
        }
        *o = y[i] + acc * h;
    }
}

fn error_norm(err: &[C64], y: &[C64], y_new: &[C64], rtol: f64, atol: f64) -> f64 {
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.norm().max(b.norm());
            (e.norm() / sc).powi(2)
        })
        .sum();
    (sum / err.len() as f64).sqrt()
}

/// Integrates `dy/dt = 𝓛(t) y` in place from `settings.t0` to `settings.t1`.
pub(crate) fn integrate(
    gen: &CompiledGenerator,
    y: &mut [C64],
    t0: f64,
    t1: f64,
    settings: &PropagationSettings,
) -> Result<IntegrationStats> {
    let mut stops: Vec<f64> = gen.breakpoints.iter().copied().filter(|&b| b > t0 && b < t1).collect();
    stops.push(t1);
    let mut stats = IntegrationStats::default();
    let mut ws = Workspace::new(y.len());
    let mut a = t0;
    let mut h_guess = None;
    for b in stops {
        let (s, h_last) = integrate_segment(gen, y, a, b, settings, &mut ws, h_guess)?;
        stats.absorb(s);
        h_guess = Some(h_last);
        a = b;
    }
    Ok(stats)
}

fn integrate_segment(
    gen: &CompiledGenerator,
    y: &mut [C64],
    a: f64,
    b: f64,
    settings: &PropagationSettings,
    ws: &mut Workspace,
    h_guess: Option<f64>,
) -> Result<(IntegrationStats, f64)> {
    let span = b - a;
    let delta = 1e-13 * a.abs().max(b.abs()).max(1.0);
    let (lo, hi) = if span > 4.0 * delta { (a + delta, b - delta) } else { (a, b) };
    let rhs = |t: f64, y: &[C64], out: &mut [C64]| gen.apply(t.clamp(lo, hi), y, out);
    let (rtol, atol) = (settings.rtol, settings.atol);
    let max_step = settings.max_step.min(span);
    let mut stats = IntegrationStats::default();

    let Workspace { k, tmp, y_new } = ws;
    rhs(a, y, &mut k[0]);
    stats.rhs_evaluations += 1;

    let mut h = match h_guess {
        Some(h) => h.min(max_step),
        None => initial_step(&rhs, y, &k[0], a, rtol, atol, tmp, y_new, &mut stats).min(max_step),
    };
    let mut t = a;
    let h_min = 1e-14 * a.abs().max(b.abs()).max(1.0);
    let mut h_last = h;
    while t < b {
        if b - t <= h * (1.0 + 1e-12) {
            h = b - t;
        }
        if h < h_min && b - t > h_min {
            return Err(ZpgError::Integration { time: t, reason: format!("step size underflow (h = {h:.3e})") });
        }
        {
            let (k0, rest) = k.split_at_mut(1);
            combine(tmp, y, h, &[(A21, &k0[0])]);
            rhs(t + C2 * h, tmp, &mut rest[0]);
        }
        combine(tmp, y, h, &[(A31, &k[0]), (A32, &k[1])]);
        rhs(t + C3 * h, tmp, &mut k[2]);
        combine(tmp, y, h, &[(A41, &k[0]), (A42, &k[1]), (A43, &k[2])]);
        rhs(t + C4 * h, tmp, &mut k[3]);
        combine(tmp, y, h, &[(A51, &k[0]), (A52, &k[1]), (A53, &k[2]), (A54, &k[3])]);
        rhs(t + C5 * h, tmp, &mut k[4]);
        combine(tmp, y, h, &[(A61, &k[0]), (A62, &k[1]), (A63, &k[2]), (A64, &k[3]), (A65, &k[4])]);
        rhs(t + h, tmp, &mut k[5]);
        combine(y_new, y, h, &[(B1, &k[0]), (B3, &k[2]), (B4, &k[3]), (B5, &k[4]), (B6, &k[5])]);
        rhs(t + h, y_new, &mut k[6]);
        stats.rhs_evaluations += 6;

        for i in 0..tmp.len() {
            tmp[i] = (k[0][i] * E1 + k[2][i] * E3 + k[3][i] * E4 + k[4][i] * E5 + k[5][i] * E6 + k[6][i] * E7) * h;
        }
        let err = error_norm(tmp, y, y_new, rtol, atol);
        if !err.is_finite() {
            return Err(ZpgError::Integration { time: t, reason: "non-finite state".into() });
        }
        if err <= 1.0 {
            t = if h == b - t { b } else { t + h };
            y.copy_from_slice(y_new);
            let (first, last) = k.split_at_mut(6);
            std::mem::swap(&mut first[0], &mut last[0]);
            stats.accepted_steps += 1;
            h_last = h;
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(max_step);
        } else {
            stats.rejected_steps += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok((stats, h_last))
}

#[allow(clippy::too_many_arguments)]
fn initial_step<F: Fn(f64, &[C64], &mut [C64])>(
    rhs: &F,
    y: &[C64],
    f0: &[C64],
    t: f64,
    rtol: f64,
    atol: f64,
    tmp: &mut [C64],
    f1: &mut [C64],
    stats: &mut IntegrationStats,
) -> f64 {
    let scale = |v: &[C64]| -> f64 {
        let s: f64 = v.iter().zip(y).map(|(x, yi)| (x.norm() / (atol + rtol * yi.norm())).powi(2)).sum();
        (s / v.len() as f64).sqrt()
    };
    let d0 = scale(y);
    let d1 = scale(f0);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    combine(tmp, y, h0, &[(1.0, f0)]);
    rhs(t + h0, tmp, f1);
    stats.rhs_evaluations += 1;
    let diff: Vec<C64> = f1.iter().zip(f0).map(|(a, b)| (a - b) / h0).collect();
    let d2 = scale(&diff);
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1)
}

/// Solves `dρ/dt = 𝓛(t)ρ` from `t0` to `t1`; `state` need not be Hermitian.
pub fn propagate(gen: &TimeDependentGenerator, state: &CMatrix, settings: &PropagationSettings) -> Result<CMatrix> {
    propagate_with_stats(gen, state, settings).map(|(s, _)| s)
}

pub fn propagate_with_stats(
    gen: &TimeDependentGenerator,
    state: &CMatrix,
    settings: &PropagationSettings,
) -> Result<(CMatrix, IntegrationStats)> {
    settings.validate()?;
    let d = gen.space().total_dim();
    if state.nrows() != d || state.ncols() != d {
        return Err(ZpgError::Shape(format!(
            "state is {}x{}, generator dimension is {d}",
            state.nrows(),
            state.ncols()
        )));
    }
    let compiled = CompiledGenerator::new(gen);
    let mut y = vectorize(state);
    let stats = integrate(&compiled, y.as_mut_slice(), settings.t0, settings.t1, settings)?;
    Ok((unvectorize(&y, d), stats))
}

/// Full propagator over `[t0, t1]`, one column per basis operator.
pub fn propagate_map(gen: &TimeDependentGenerator, settings: &PropagationSettings) -> Result<Superoperator> {
    settings.validate()?;
    let compiled = CompiledGenerator::new(gen);
    let map = propagate_map_compiled(&compiled, settings.t0, settings.t1, settings)?;
    Superoperator::new(gen.space().clone(), map)
}

pub(crate) fn propagate_map_compiled(
    gen: &CompiledGenerator,
    t0: f64,
    t1: f64,
    settings: &PropagationSettings,
) -> Result<CMatrix> {
    let n = gen.dim;
    let mut y = CMatrix::identity(n, n);
    integrate(gen, y.as_mut_slice(), t0, t1, settings)?;
    Ok(y)
}

/// Generating traces (and optionally states and maps) for every grid configuration.
#[derive(Debug, Clone)]
pub struct GeneratingTable {
    pub grid: VirtualGrid,
    pub traces: Vec<C64>,
    pub final_states: Option<Vec<CMatrix>>,
    pub final_maps: Option<Vec<Superoperator>>,
    pub t0: f64,
    pub t1: f64,
    pub stats: IntegrationStats,
    /// Number of configurations actually integrated.
    pub solves: usize,
}

struct Solved {
    state: CMatrix,
    map: Option<CMatrix>,
    stats: IntegrationStats,
}

fn run_in_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k.max(1))
                .build()
                .map_err(|e| ZpgError::InvalidArgument(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(job))
        }
        None => Ok(job()),
    }
}

/// Solves the ZPG of `network` for every configuration of `grid`.
///
/// Results are stored by grid index, so the table does not depend on the
/// number of workers.
pub fn batch_generating_solutions(
    network: &EmitterNetwork,
    grid: &VirtualGrid,
    settings: &PropagationSettings,
    want_states: bool,
    want_maps: bool,
) -> Result<GeneratingTable> {
    settings.validate()?;
    if grid.num_modes() != network.num_modes() {
        return Err(ZpgError::Shape(format!(
            "grid has {} detectors, network has {}",
            grid.num_modes(),
            network.num_modes()
        )));
    }
    let factory = ZpgFactory::new(network)?;
    let d = network.space().total_dim();
    let rho0 = vectorize(network.joint_initial_state());

    let use_conj = settings.conjugate_shortcut && network.is_hermiticity_preserving();
    let partner: Vec<Option<usize>> =
        (0..grid.len()).map(|i| if use_conj { grid.conjugate_index(i) } else { None }).collect();
    let canonical: Vec<usize> = (0..grid.len()).filter(|&i| partner[i].is_none_or(|p| p >= i)).collect();

    let solve = |i: usize| -> Result<Solved> {
        let gen = factory.generator(&grid.configs()[i])?;
        let compiled = CompiledGenerator::new(&gen);
        let mut y = rho0.clone();
        let mut stats = integrate(&compiled, y.as_mut_slice(), settings.t0, settings.t1, settings)?;
        let map = if want_maps {
            let n = compiled.dim;
            let mut m = CMatrix::identity(n, n);
            stats.absorb(integrate(&compiled, m.as_mut_slice(), settings.t0, settings.t1, settings)?);
            Some(m)
        } else {
            None
        };
        Ok(Solved { state: unvectorize(&y, d), map, stats })
    };

    let solved: Vec<Result<Solved>> =
        run_in_pool(settings.workers, || canonical.par_iter().map(|&i| solve(i)).collect())?;

    let mut slots: Vec<Option<Solved>> = (0..grid.len()).map(|_| None).collect();
    let mut stats = IntegrationStats::default();
    for (&i, res) in canonical.iter().zip(solved) {
        let s = res.map_err(|e| ZpgError::BatchConfig { index: i, source: Box::new(e) })?;
        stats.absorb(s.stats);
        slots[i] = Some(s);
    }
    for i in 0..grid.len() {
        if slots[i].is_none() {
            let p = partner[i].expect("non-canonical index has a partner");
            let src = slots[p].as_ref().expect("partner solved");
            slots[i] = Some(Solved {
                state: src.state.adjoint(),
                map: src.map.as_ref().map(|m| conjugate_map(m, d)),
                stats: IntegrationStats::default(),
            });
        }
    }

    let tr = trace_functional(d);
    let solved: Vec<Solved> = slots.into_iter().map(|s| s.expect("all slots filled")).collect();
    let traces = solved.iter().map(|s| tr.dot(&vectorize(&s.state))).collect();
    let final_maps = if want_maps {
        Some(
            solved
                .iter()
                .map(|s| Superoperator::new(network.space().clone(), s.map.clone().expect("map requested")))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let final_states = want_states.then(|| solved.into_iter().map(|s| s.state).collect());
    if grid.kind() == GridKind::Custom && use_conj {
        log::debug!("custom grid: conjugate pairs detected by exact match only");
    }
    Ok(GeneratingTable {
        grid: grid.clone(),
        traces,
        final_states,
        final_maps,
        t0: settings.t0,
        t1: settings.t1,
        stats,
        solves: canonical.len(),
    })
}

/// `X ↦ (G(X†))†` as a matrix: entry `(r, c)` is `conj(G[τr, τc])` where
/// `τ` swaps the row and column of the vectorized index.
fn conjugate_map(g: &CMatrix, d: usize) -> CMatrix {
    let swap = |idx: usize| (idx % d) * d + idx / d;
    CMatrix::from_fn(g.nrows(), g.ncols(), |r, c| g[(swap(r), swap(c))].conj())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liouville::{two_level, HilbertSpace};
    use crate::oracle::decay_reference;
    use crate::zpg::{fourier_grid, SourceSpec, VirtualDetectorConfig};
    use std::f64::consts::{LN_2, PI};

    fn decay_net(gamma: f64) -> EmitterNetwork {
        EmitterNetwork::single(SourceSpec::two_level_decay(gamma)).unwrap()
    }

    fn fig2_net() -> EmitterNetwork {
        let pulse = square_pulse(10.0 * PI, 2.0, 0.0).unwrap();
        EmitterNetwork::single(SourceSpec::two_level(1.0).with_pulse(&pulse).build().unwrap()).unwrap()
    }

    fn max_abs(m: &CMatrix) -> f64 {
        m.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn square_pulse_examples() {
        let p = square_pulse(PI, 1.0, 0.0).unwrap();
        assert_eq!(p.envelope_value(0.5), PI);
        assert_eq!(p.envelope_value(1.5), 0.0);
        let p = square_pulse(10.0 * PI, 2.0, 0.0).unwrap();
        assert!((p.envelope_value(1.0) - 5.0 * PI).abs() < 1e-15);
        let p = square_pulse(0.0, 1.0, 0.0).unwrap();
        assert_eq!(p.envelope_value(0.5), 0.0);
        assert!(square_pulse(PI, 0.0, 0.0).is_err());
        assert!(square_pulse(PI, -1.0, 0.0).is_err());
    }

    #[test]
    fn square_pulse_area_by_quadrature() {
        let p = square_pulse(3.7, 0.8, 0.25).unwrap();
        // midpoint rule on a mesh aligned with the support is exact for a constant
        let n = 1000;
        let h = p.tau() / n as f64;
        let area: f64 = (0..n).map(|k| p.envelope_value(0.25 + (k as f64 + 0.5) * h) * h).sum();
        assert!((area - 3.7).abs() < 1e-10);
        let c = custom_pulse(|t| (PI * t).sin() * PI / 2.0, 1.0, 0.0).unwrap();
        assert!((c.theta() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn decay_trace_at_ln2() {
        let net = decay_net(1.0);
        let gen = crate::zpg::build_zpg(&net, &VirtualDetectorConfig::from_real_eta(&[1.0]).unwrap()).unwrap();
        let settings = PropagationSettings::default().with_horizon(0.0, LN_2);
        let out = propagate(&gen, &two_level::excited(), &settings).unwrap();
        assert!((out.trace().re - 0.5).abs() < 1e-10);
    }

    #[test]
    fn trace_preserved_at_zero_efficiency() {
        let net = fig2_net();
        let gen = net.lindbladian().unwrap();
        for t1 in [0.7, 2.0, 5.0, 12.0] {
            let s = PropagationSettings::default().with_horizon(0.0, t1);
            let out = propagate(&gen, net.joint_initial_state(), &s).unwrap();
            assert!((out.trace() - C64::new(1.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_generator_is_identity() {
        let s = HilbertSpace::new(vec![3]).unwrap();
        let gen = TimeDependentGenerator::constant(Superoperator::zeros(&s));
        let rho = CMatrix::from_fn(3, 3, |i, j| C64::new(i as f64, j as f64));
        let out = propagate(&gen, &rho, &PropagationSettings::default()).unwrap();
        assert_eq!(out, rho);
    }

    #[test]
    fn rejects_bad_settings_and_shapes() {
        let net = decay_net(1.0);
        let gen = net.lindbladian().unwrap();
        let bad = PropagationSettings::default().with_horizon(1.0, 1.0);
        assert!(propagate(&gen, &two_level::excited(), &bad).is_err());
        assert!(propagate(&gen, &CMatrix::identity(3, 3), &PropagationSettings::default()).is_err());
    }

    #[test]
    fn step_underflow_reports_time() {
        // a generator with a huge real eigenvalue and an absurd tolerance
        let s = HilbertSpace::new(vec![1]).unwrap();
        let gen = TimeDependentGenerator::constant(Superoperator::identity(&s).scaled(C64::new(800.0, 0.0)));
        let settings = PropagationSettings::default().with_horizon(0.0, 10.0).with_tolerances(1e-300, 1e-300);
        match propagate(&gen, &CMatrix::identity(1, 1), &settings) {
            Err(ZpgError::Integration { time, .. }) => assert!((0.0..10.0).contains(&time)),
            other => panic!("expected integration failure, got {other:?}"),
        }
    }

    #[test]
    fn pulse_edges_are_step_boundaries() {
        // Rabi flip by a π pulse without decay: exact only if the edges are respected.
        let pulse = square_pulse(PI, 0.37, 0.11).unwrap();
        let src = SourceSpec::two_level(0.0).with_pulse(&pulse).build().unwrap();
        let net = EmitterNetwork::single(src).unwrap();
        let gen = net.lindbladian().unwrap();
        let s = PropagationSettings::default().with_horizon(0.0, 1.0);
        let out = propagate(&gen, &two_level::ground(), &s).unwrap();
        assert!((out[(1, 1)].re - 1.0).abs() < 1e-10);
    }

    #[test]
    fn semigroup_consistency() {
        let net = decay_net(1.0);
        let gen =
            crate::zpg::build_zpg(&net, &VirtualDetectorConfig::from_eta(&[C64::new(0.3, 0.4)]).unwrap()).unwrap();
        let rho = two_level::bloch_state(1.1, 0.4);
        let base = PropagationSettings::default();
        let mid = propagate(&gen, &rho, &base.clone().with_horizon(0.0, 1.3)).unwrap();
        let two = propagate(&gen, &mid, &base.clone().with_horizon(1.3, 3.0)).unwrap();
        let one = propagate(&gen, &rho, &base.clone().with_horizon(0.0, 3.0)).unwrap();
        let tol = 2.0 * (base.rtol + base.atol);
        assert!(max_abs(&(two - one)) < tol);
    }

    #[test]
    fn hermiticity_preserved_by_lindbladian() {
        let net = fig2_net();
        let gen = net.lindbladian().unwrap();
        for t1 in [0.01, 0.05, 1.0] {
            let s = PropagationSettings::default().with_horizon(0.0, t1);
            let rho = two_level::bloch_state(0.9, 2.0);
            let out = propagate(&gen, &rho, &s).unwrap();
            assert!(max_abs(&(&out - out.adjoint())) < 1e-10);
        }
    }

    #[test]
    fn batch_trivial_grid() {
        let net = fig2_net();
        let s = PropagationSettings::for_network(&net);
        let t = batch_generating_solutions(&net, &fourier_grid(&[1]).unwrap(), &s, false, false).unwrap();
        assert_eq!(t.traces.len(), 1);
        assert!((t.traces[0] - C64::new(1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn batch_decay_two_point_grid() {
        let net = decay_net(1.0);
        let s = PropagationSettings::default().with_horizon(0.0, 1.7);
        let t = batch_generating_solutions(&net, &fourier_grid(&[2]).unwrap(), &s, false, false).unwrap();
        let e = (-1.7f64).exp();
        assert!((t.traces[0].re - 1.0).abs() < 1e-10);
        assert!((t.traces[1].re - (2.0 * e - 1.0)).abs() < 1e-10);
        assert!((t.traces[1].re - decay_reference(1.0, 2.0, 1.7)).abs() < 1e-10);
    }

    #[test]
    fn batch_maps_reproduce_states() {
        let net = fig2_net();
        let s = PropagationSettings::for_network(&net);
        let grid = fourier_grid(&[5]).unwrap();
        let t = batch_generating_solutions(&net, &grid, &s, true, true).unwrap();
        let states = t.final_states.as_ref().unwrap();
        for (map, st) in t.final_maps.as_ref().unwrap().iter().zip(states) {
            let via_map = map.apply(net.joint_initial_state()).unwrap();
            assert!(max_abs(&(via_map - st)) < 1e-10);
        }
    }

    #[test]
    fn conjugation_symmetry_without_shortcut() {
        let net = fig2_net();
        let mut s = PropagationSettings::for_network(&net);
        s.conjugate_shortcut = false;
        let grid = fourier_grid(&[6]).unwrap();
        let full = batch_generating_solutions(&net, &grid, &s, true, true).unwrap();
        assert_eq!(full.solves, 6);
        for i in 0..grid.len() {
            let j = grid.conjugate_index(i).unwrap();
            assert!((full.traces[j] - full.traces[i].conj()).norm() < 1e-10);
        }
        s.conjugate_shortcut = true;
        let half = batch_generating_solutions(&net, &grid, &s, true, true).unwrap();
        assert_eq!(half.solves, 4);
        let fm = full.final_maps.as_ref().unwrap();
        let hm = half.final_maps.as_ref().unwrap();
        for i in 0..grid.len() {
            assert!((full.traces[i] - half.traces[i]).norm() < 1e-10);
            assert!(fm[i].max_abs_diff(&hm[i]) < 1e-9);
        }
    }

    #[test]
    fn batch_is_independent_of_worker_count() {
        let net = fig2_net();
        let grid = fourier_grid(&[7]).unwrap();
        let mut s = PropagationSettings::for_network(&net);
        s.workers = Some(1);
        let a = batch_generating_solutions(&net, &grid, &s, true, false).unwrap();
        s.workers = Some(4);
        let b = batch_generating_solutions(&net, &grid, &s, true, false).unwrap();
        assert_eq!(a.traces, b.traces);
        assert_eq!(a.final_states, b.final_states);
    }

    #[test]
    fn batch_rejects_mismatched_grid() {
        let net = decay_net(1.0);
        let grid = fourier_grid(&[2, 2]).unwrap();
        assert!(batch_generating_solutions(&net, &grid, &PropagationSettings::default(), false, false).is_err());
    }

    #[test]
    fn batch_failure_names_config() {
        let net = decay_net(1.0);
        let grid = fourier_grid(&[3]).unwrap();
        let s = PropagationSettings { max_step: 1e-20, ..PropagationSettings::default() };
        match batch_generating_solutions(&net, &grid, &s, false, false) {
            Err(ZpgError::BatchConfig { index, .. }) => assert_eq!(index, 0),
            other => panic!("expected batch failure, got {other:?}"),
        }
    }
}
