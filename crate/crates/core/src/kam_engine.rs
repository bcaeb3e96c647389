//! KAM iteration on a Galerkin truncation, torus extraction and ODE validation.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::hamiltonian_algebra::{
    bracket_pruned, bracket_with, truncate_r, Mono, var_is_conj, var_slot, ModeTable, PhasePoint, Series, TruncationShape, WeightedDomain, C64, I,
};
use crate::homological_solver::{HomologicalSolver, SmallDivisorReport, SolverError};
use crate::lattice_resonance::{Site, TangentialSet};
use crate::normal_form::{generator_mixed_coefficient, NormalForm, NormalFormBuild, SiteKind, SymplecticRotation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KamError {
    #[error("small divisors at step {nu}: {} flagged", reports.len())]
    SmallDivisor { nu: usize, reports: Vec<SmallDivisorReport> },
    #[error(transparent)]
    Solver(SolverError),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("integrator unstable at t = {t}: relative energy error {err:e}")]
    Unstable { t: f64, err: f64 },
}

impl From<SolverError> for KamError {
    fn from(e: SolverError) -> Self {
        KamError::Solver(e)
    }
}

/// Initial data of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleBase {
    pub r0: f64,
    pub s0: f64,
    pub eps0: f64,
    pub k0: u32,
    pub gamma: f64,
    pub tau: f64,
    /// Exponent in `K^{1+3ε_exp}·ρ = 1`.
    pub eps_exp: f64,
    /// Constant `c` of the target recursion.
    pub c_const: f64,
    /// Exponent of `(r_ν − r_{ν+1})^{−c}`.
    pub c_exp: f64,
    pub l0: f64,
}

impl ScheduleBase {
    pub fn new(r0: f64, s0: f64, eps0: f64, k0: u32, gamma: f64, tau: f64) -> Self {
        ScheduleBase { r0, s0, eps0, k0, gamma, tau, eps_exp: 0.05, c_const: 1.0, c_exp: 1.0, l0: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub nu: usize,
    pub r: f64,
    pub s: f64,
    pub eps: f64,
    #[serde(rename = "K")]
    pub k: u32,
    pub rho: f64,
    #[serde(rename = "Delta")]
    pub delta: u64,
    #[serde(rename = "L")]
    pub l: f64,
}

pub fn r_at(r0: f64, nu: usize) -> f64 {
    let mut sum = 0.0;
    for i in 2..=(nu + 1) {
        sum += 0.5f64.powi(i as i32);
    }
    r0 * (1.0 - sum)
}

pub fn rho_for(k: u32, eps_exp: f64) -> f64 {
    (k as f64).powf(-(1.0 + 3.0 * eps_exp))
}

/// Parameters after one step from `cur`, with `eps_measured` the norm reached at `cur`.
pub fn schedule_next(cur: &ScheduleParams, base: &ScheduleBase, eps_measured: f64, eps_next: f64) -> ScheduleParams {
    let k = cur.k * 3;
    ScheduleParams {
        nu: cur.nu + 1,
        r: r_at(base.r0, cur.nu + 1),
        s: 0.25 * cur.s * eps_measured.cbrt(),
        eps: eps_next,
        k,
        rho: rho_for(k, base.eps_exp),
        delta: (cur.k as u64).pow(3),
        l: cur.l + eps_measured,
    }
}

/// Target recursion `ε_{ν+1} = c γ⁻⁵ K_ν^{5(τ+1)} (r_ν − r_{ν+1})^{−c} ε_ν^{4/3}`.
pub fn eps_target_next(cur: &ScheduleParams, base: &ScheduleBase) -> f64 {
    let dr = cur.r - r_at(base.r0, cur.nu + 1);
    base.c_const * base.gamma.powi(-5) * (cur.k as f64).powf(5.0 * (base.tau + 1.0)) * dr.powf(-base.c_exp) * cur.eps.powf(4.0 / 3.0)
}

/// `(r_ν, s_ν, ε_ν, K_ν, ρ_ν, Δ_ν, L_ν)` from the exact recursions driven by the targets.
pub fn schedule(nu: usize, base: &ScheduleBase) -> ScheduleParams {
    let mut cur = ScheduleParams {
        nu: 0,
        r: base.r0,
        s: base.s0,
        eps: base.eps0,
        k: base.k0,
        rho: rho_for(base.k0, base.eps_exp),
        delta: (base.k0 as u64).pow(3),
        l: base.l0,
    };
    for _ in 0..nu {
        let next = eps_target_next(&cur, base);
        cur = schedule_next(&cur, base, cur.eps, next);
    }
    cur
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KamConfig {
    pub lie_order: usize,
    /// Stop when `ε` grows by this factor in one step.
    pub divergence_factor: f64,
    /// Products of the Lie series below `prune_rel · ε_ν` in vector-field mass are dropped.
    pub prune_rel: f64,
}

impl Default for KamConfig {
    fn default() -> Self {
        KamConfig { lie_order: 3, divergence_factor: 1.0, prune_rel: 1e-14 }
    }
}

#[derive(Clone, Debug)]
pub struct KamState {
    pub params: ScheduleParams,
    pub base: ScheduleBase,
    pub normal: NormalForm,
    pub p: Series,
    pub energy: f64,
    pub pruned_mass: f64,
    pub shape: TruncationShape,
    /// Generators `F_0, F_1, …` of the applied time-1 maps.
    pub generators: Vec<Series>,
    pub tangential: TangentialSet,
    pub rotation: SymplecticRotation,
    pub birkhoff: Series,
    pub q_modes: Arc<ModeTable>,
    pub xi: Vec<f64>,
    pub eps_scale: f64,
}

impl KamState {
    pub fn domain(&self) -> WeightedDomain {
        WeightedDomain::new(self.params.r, self.params.s, self.params.rho)
    }

    /// State at `ν = 0` with `ε₀` measured as the vector-field norm of `P` on `D(r₀, s₀)`.
    pub fn new(build: &NormalFormBuild, r0: f64, s0: f64, k0: u32, gamma: f64, tau: f64) -> Result<Self, KamError> {
        if !(r0 > 0.0 && s0 > 0.0 && k0 > 0 && gamma >= 0.0 && tau >= 0.0) {
            return Err(KamError::Invalid(format!("r={r0}, s={s0}, K={k0}, gamma={gamma}, tau={tau}")));
        }
        let mut base = ScheduleBase::new(r0, s0, 0.0, k0, gamma, tau);
        let rho = rho_for(k0, base.eps_exp);
        let eps0 = build.p.vector_field_norm(&WeightedDomain::new(r0, s0, rho));
        base.eps0 = eps0;
        let mut shape = TruncationShape::default();
        for (slot, info) in build.state.slots.iter().enumerate() {
            if info.kind == SiteKind::L2 {
                shape.l2_slots.insert(slot);
            }
        }
        Ok(KamState {
            params: schedule(0, &base),
            base,
            normal: build.normal.clone(),
            p: build.p.clone(),
            energy: 0.0,
            pruned_mass: 0.0,
            shape,
            generators: Vec::new(),
            tangential: build.tangential.clone(),
            rotation: build.state.rotation.clone(),
            birkhoff: build.birkhoff.clone(),
            q_modes: build.q_modes.clone(),
            xi: build.state.params.xi.clone(),
            eps_scale: build.state.params.eps,
        })
    }

    pub fn floor(&self) -> f64 {
        self.base.gamma / (self.params.k as f64).powf(self.base.tau)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub nu: usize,
    #[serde(rename = "K")]
    pub k: u32,
    pub eps_before: f64,
    pub eps_after: f64,
    pub divisor_flags: usize,
    #[serde(rename = "F_norm")]
    pub f_norm: f64,
    pub remainder_norm: f64,
    pub contraction_exponent_estimate: f64,
    /// `max_a |ω⁺_a − ω_a|`.
    pub omega_shift: f64,
    pub omega_ok: bool,
    /// Largest `|ΔP^{011}_{ij}| e^{|i−j|ρ}`.
    pub p011_weighted: f64,
    pub p011_ok: bool,
    pub smallest_divisor: f64,
    /// Upper bound on the vector-field mass of all pruned products, included in `eps_after`.
    pub pruned_mass: f64,
    pub r_terms: usize,
    pub f_terms: usize,
    pub p_terms: usize,
}

/// Products below `tol` in weighted vector-field mass on `d` are dropped and tallied.
struct Pruner<'a> {
    weights: &'a Series,
    d: WeightedDomain,
    tol: f64,
    dropped: f64,
}

impl Pruner<'_> {
    fn keep(&mut self, m: &Mono, c: C64, scale: f64) -> bool {
        if 2 * m.l_norm() as usize + m.w.len() < 2 {
            return true;
        }
        let mass = c.norm() * self.weights.vf_weight(m, &self.d) * scale;
        if mass < self.tol {
            self.dropped += mass;
            false
        } else {
            true
        }
    }
}

/// `L(X) = {X, F}` applied `order` times with weights `1/(j + shift)!`.
fn lie_tail(x: &Series, f: &Series, order: usize, shift: usize, pruner: &mut Pruner) -> (Series, f64, Series) {
    let mut total = x.like();
    let mut cur = x.clone();
    let mut fact: f64 = (1..=shift).map(|v| v as f64).product();
    for j in 1..=order {
        fact *= (j + shift) as f64;
        let scale = 1.0 / fact;
        cur = bracket_pruned(&cur, f, &x.bounds, |m, c| pruner.keep(m, c, scale));
        total.add_scaled(&cur, C64::new(scale, 0.0));
        if cur.is_empty() {
            break;
        }
    }
    (total, fact * (order + shift + 1) as f64, cur)
}

/// One KAM step: truncate, solve, update `N`, transform `P`.
pub fn kam_step(state: &KamState, cfg: &KamConfig) -> Result<(KamState, StepReport), KamError> {
    let d = state.domain();
    let eps = state.params.eps;
    let r = truncate_r(&state.p, state.params.k, &state.shape);
    let solver = HomologicalSolver::new(&state.normal)?;
    let sol = match solver.solve(&r, state.floor()) {
        Ok(s) => s,
        Err(SolverError::SmallDivisor(reports)) => return Err(KamError::SmallDivisor { nu: state.params.nu, reports }),
        Err(e) => return Err(e.into()),
    };
    let modes = state.normal.modes.clone();
    let mut normal = state.normal.clone();
    let mut energy = state.energy;
    let mut omega_shift: f64 = 0.0;
    let mut p011: f64 = 0.0;
    let mut kept_quad = sol.kept.like();
    for (m, c) in &sol.kept.terms {
        if m.w.is_empty() && m.l_norm() == 0 {
            energy += c.re;
        } else if m.w.is_empty() {
            let a = m.l.iter().position(|&x| x == 1).unwrap();
            normal.omega_rest[a] += c.re;
            omega_shift = omega_shift.max(c.norm());
        } else {
            kept_quad.terms.insert(m.clone(), *c);
            let (na, nb) = (modes.site(var_slot(m.w[0])), modes.site(var_slot(m.w[1])));
            let dist = if var_is_conj(m.w[0]) == var_is_conj(m.w[1]) { na + nb } else { na - nb }.norm();
            p011 = p011.max(c.norm() * (dist * d.rho).exp());
        }
    }
    normal.quad_rest.add_assign(&kept_quad);
    normal.quad_rest.terms.retain(|_, c| c.norm() > 0.0);

    // P₊ = (P − R) + Σ L^j(P)/j! + Σ L^j([R] − R)/(j+1)!
    let f = &sol.f;
    let mut next = schedule_next(&state.params, &state.base, eps, 0.0);
    let nd = WeightedDomain::new(next.r, next.s, next.rho);
    let mut pruner = Pruner { weights: &state.p, d: nd, tol: cfg.prune_rel * eps, dropped: 0.0 };
    let mut p_new = state.p.sub(&r);
    let (tail_p, fact_p, last_p) = lie_tail(&state.p, f, cfg.lie_order, 0, &mut pruner);
    p_new.add_assign(&tail_p);
    let kr = sol.kept.sub(&r);
    let (tail_r, _, _) = lie_tail(&kr, f, cfg.lie_order, 1, &mut pruner);
    p_new.add_assign(&tail_r);
    p_new.terms.retain(|_, c| c.norm() > 0.0);
    p_new.prune();
    let remainder = bracket_with(&last_p, f, &state.p.bounds).majorant_norm(&d) / fact_p;

    // Earlier pruned mass may grow by at most e^{deg·|n|_max·ρ} when s, r, ρ shrink.
    let growth = (state.p.bounds.degree_bound as f64 * max_site_norm(&state.p) * state.params.rho).exp();
    let pruned_mass = state.pruned_mass * growth + pruner.dropped;
    let eps_after = p_new.vector_field_norm(&nd) + pruned_mass;
    next.eps = eps_after;
    let report = StepReport {
        nu: state.params.nu,
        k: state.params.k,
        eps_before: eps,
        eps_after,
        divisor_flags: sol.skipped,
        f_norm: f.vector_field_norm(&d),
        remainder_norm: remainder,
        contraction_exponent_estimate: eps_after.ln() / eps.ln(),
        omega_shift,
        omega_ok: omega_shift < eps,
        p011_weighted: p011,
        p011_ok: p011 < eps,
        smallest_divisor: sol.smallest_divisor,
        pruned_mass,
        r_terms: r.len(),
        f_terms: f.len(),
        p_terms: p_new.len(),
    };
    let mut generators = state.generators.clone();
    generators.push(f.clone());
    let new_state = KamState { params: next, normal, p: p_new, energy, generators, pruned_mass, ..state.clone() };
    Ok((new_state, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub steps: Vec<StepReport>,
    /// Least-squares slope of `ln ε_{ν+1}` against `ln ε_ν`.
    pub fitted_exponent: Option<f64>,
    pub diverged: bool,
    pub aborted: Option<String>,
}

fn max_site_norm(p: &Series) -> f64 {
    p.modes.sites().iter().map(|s| s.norm()).fold(0.0, f64::max)
}

pub fn fit_exponent(steps: &[StepReport]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = steps.iter().filter(|s| s.eps_before > 0.0 && s.eps_after > 0.0).map(|s| (s.eps_before.ln(), s.eps_after.ln())).collect();
    match pts.len() {
        0 => None,
        1 => Some(pts[0].1 / pts[0].0),
        n => {
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            if sxx == 0.0 {
                None
            } else {
                Some(sxy / sxx)
            }
        }
    }
}

/// Repeated [`kam_step`]; stops on divergence or small-divisor flags.
pub fn run_iteration(state0: &KamState, steps: usize, cfg: &KamConfig) -> (IterationReport, KamState) {
    let mut state = state0.clone();
    let mut reports = Vec::new();
    let mut diverged = false;
    let mut aborted = None;
    for _ in 0..steps {
        match kam_step(&state, cfg) {
            Ok((next, rep)) => {
                let grew = rep.eps_after > cfg.divergence_factor * rep.eps_before;
                reports.push(rep);
                state = next;
                if grew {
                    diverged = true;
                    break;
                }
            }
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
    }
    let fitted_exponent = fit_exponent(&reports);
    (IterationReport { steps: reports, fitted_exponent, diverged, aborted }, state)
}

/// Time-1 map of the Hamiltonian flow of `f`, by RK4.
pub fn flow_time_one(f: &Series, x: &PhasePoint, steps: usize) -> PhasePoint {
    let h = 1.0 / steps as f64;
    let mut y = x.clone();
    for _ in 0..steps {
        let k1 = f.flow_field(&y);
        let k2 = f.flow_field(&y.axpy(0.5 * h, &k1));
        let k3 = f.flow_field(&y.axpy(0.5 * h, &k2));
        let k4 = f.flow_field(&y.axpy(h, &k3));
        y = y.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4);
    }
    y
}

#[derive(Clone, Debug)]
pub struct TorusApproximation {
    pub xi: Vec<f64>,
    pub eps: f64,
    /// Final tangential frequencies in scaled units.
    pub omega_infty: Vec<f64>,
    /// The same in physical time: `|i_a|² + ε³·rest`.
    pub omega_physical: Vec<f64>,
    pub tangential: TangentialSet,
    pub q_modes: Arc<ModeTable>,
    pub normal_modes: Arc<ModeTable>,
    pub generators: Vec<Series>,
    pub rotation: SymplecticRotation,
    pub birkhoff: Series,
    pub flow_steps: usize,
}

pub fn extract_torus(state: &KamState) -> TorusApproximation {
    let e3 = state.eps_scale.powi(3);
    TorusApproximation {
        xi: state.xi.clone(),
        eps: state.eps_scale,
        omega_infty: state.normal.omega(),
        omega_physical: state.normal.omega_lin.iter().zip(&state.normal.omega_rest).map(|(l, r)| *l as f64 + e3 * r).collect(),
        tangential: state.tangential.clone(),
        q_modes: state.q_modes.clone(),
        normal_modes: state.normal.modes.clone(),
        generators: state.generators.clone(),
        rotation: state.rotation.clone(),
        birkhoff: state.birkhoff.clone(),
        flow_steps: 16,
    }
}

impl TorusApproximation {
    /// Maps a point in the final scaled coordinates back to physical Birkhoff-frame `q`.
    pub fn to_birkhoff_q(&self, y: &PhasePoint) -> Vec<C64> {
        let mut x = y.clone();
        for f in self.generators.iter().rev() {
            x = flow_time_one(f, &x, self.flow_steps);
        }
        let b = self.tangential.b();
        let modes = &self.normal_modes;
        // z = S u on pairs
        let mut u = x.z.clone();
        for p in &self.rotation.pairs {
            let (Some(sn), Some(sm)) = (modes.slot(p.n), modes.slot(p.m)) else { continue };
            let s = p.s_matrix;
            let (zn, zm) = (x.z[2 * sn], x.z[2 * sm]);
            let (zbn, zbm) = (x.z[2 * sn + 1], x.z[2 * sm + 1]);
            // u = S̄ᵀ z, ū = Sᵀ z̄
            u[2 * sn] = s[0][0].conj() * zn + s[1][0].conj() * zm;
            u[2 * sm] = s[0][1].conj() * zn + s[1][1].conj() * zm;
            u[2 * sn + 1] = s[0][0] * zbn + s[1][0] * zbm;
            u[2 * sm + 1] = s[0][1] * zbn + s[1][1] * zbm;
        }
        let mut action = x.action.clone();
        let mut w = u.clone();
        for (site, k) in &self.rotation.k_vectors {
            let Some(slot) = modes.slot(*site) else { continue };
            let phase: C64 = k.iter().zip(&x.theta).map(|(a, t)| *t * *a as f64).sum();
            let e = (-I * phase).exp();
            w[2 * slot] = u[2 * slot] * e;
            w[2 * slot + 1] = u[2 * slot + 1] / e;
            let uu = u[2 * slot] * u[2 * slot + 1];
            for a in 0..b {
                action[a] -= uu * k[a] as f64;
            }
        }
        let eps = self.eps;
        let mut q = vec![C64::default(); 2 * self.q_modes.len()];
        for (a, &site) in self.tangential.sites.iter().enumerate() {
            let slot = self.q_modes.slot(site).unwrap();
            let amp = (C64::new(eps.powi(3) * self.xi[a], 0.0) + action[a] * eps.powi(5)).sqrt();
            q[2 * slot] = amp * (-I * x.theta[a]).exp();
            q[2 * slot + 1] = amp * (I * x.theta[a]).exp();
        }
        let scale = eps.powf(2.5);
        for slot in 0..modes.len() {
            let qs = self.q_modes.slot(modes.site(slot)).unwrap();
            q[2 * qs] = w[2 * slot] * scale;
            q[2 * qs + 1] = w[2 * slot + 1] * scale;
        }
        q
    }

    /// Physical mode amplitudes `q_n` on the torus at angle `θ`.
    pub fn embed(&self, theta: &[f64]) -> Vec<C64> {
        let b = self.tangential.b();
        let mut y = PhasePoint::zeros(b, 2 * self.normal_modes.len());
        for a in 0..b {
            y.theta[a] = C64::new(theta[a], 0.0);
        }
        let qb = self.to_birkhoff_q(&y);
        let pb = PhasePoint { theta: Vec::new(), action: Vec::new(), z: qb };
        flow_time_one(&self.birkhoff, &pb, self.flow_steps).z
    }
}

/// Galerkin-truncated `q̇ = i(|n|² q + ∂G/∂q̄)` on the disk `|n| ≤ mode_bound`, via FFT.
pub struct GalerkinOde {
    pub sites: Vec<Site>,
    pub lambda: Vec<f64>,
    grid: usize,
    index: Vec<usize>,
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
}

impl GalerkinOde {
    pub fn new(mode_bound: i64) -> Self {
        let sites = crate::normal_form::galerkin_modes(mode_bound);
        let grid = (4 * mode_bound as usize + 2).max(4);
        let mut planner = rustfft::FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid);
        let inv = planner.plan_fft_inverse(grid);
        let g = grid as i64;
        let index = sites.iter().map(|s| (s.n1.rem_euclid(g) * g + s.n2.rem_euclid(g)) as usize).collect();
        let lambda = sites.iter().map(|s| s.norm_sq() as f64).collect();
        GalerkinOde { sites, lambda, grid, index, fwd, inv }
    }

    fn fft2(&self, data: &mut [C64], inverse: bool) {
        let n = self.grid;
        let plan = if inverse { &self.inv } else { &self.fwd };
        for row in data.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![C64::default(); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            plan.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
    }

    fn to_grid(&self, q: &[C64]) -> Vec<C64> {
        let mut g = vec![C64::default(); self.grid * self.grid];
        for (&idx, &v) in self.index.iter().zip(q) {
            g[idx] = v;
        }
        self.fft2(&mut g, true);
        g
    }

    /// `∂G/∂q̄_n = (|u|²u)_n / 4π²`.
    pub fn grad_g(&self, q: &[C64]) -> Vec<C64> {
        let mut u = self.to_grid(q);
        for v in u.iter_mut() {
            *v *= v.norm_sqr();
        }
        self.fft2(&mut u, false);
        let norm = (self.grid * self.grid) as f64 * 4.0 * PI * PI;
        self.index.iter().map(|&i| u[i] / norm).collect()
    }

    pub fn g_value(&self, q: &[C64]) -> f64 {
        let u = self.to_grid(q);
        let s: f64 = u.iter().map(|v| v.norm_sqr().powi(2)).sum();
        s / ((self.grid * self.grid) as f64 * 8.0 * PI * PI)
    }

    pub fn energy(&self, q: &[C64]) -> f64 {
        let lin: f64 = q.iter().zip(&self.lambda).map(|(v, l)| v.norm_sqr() * l).sum();
        lin + self.g_value(q)
    }

    fn linear(&self, q: &mut [C64], h: f64) {
        for (v, l) in q.iter_mut().zip(&self.lambda) {
            *v *= (I * l * h).exp();
        }
    }

    /// Implicit midpoint for the quartic part.
    fn nonlinear(&self, q: &mut [C64], h: f64) {
        let q0 = q.to_vec();
        let mut next = q0.clone();
        for _ in 0..50 {
            let mid: Vec<C64> = q0.iter().zip(&next).map(|(a, b)| (a + b) * 0.5).collect();
            let g = self.grad_g(&mid);
            let cand: Vec<C64> = q0.iter().zip(&g).map(|(a, gv)| a + I * gv * h).collect();
            let diff = cand.iter().zip(&next).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            let scale = cand.iter().map(|a| a.norm()).fold(0.0, f64::max);
            next = cand;
            if diff <= 1e-16 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        q.copy_from_slice(&next);
    }

    fn strang(&self, q: &mut [C64], h: f64) {
        self.linear(q, 0.5 * h);
        self.nonlinear(q, h);
        self.linear(q, 0.5 * h);
    }

    /// Fourth-order symmetric (Yoshida) composition of Strang steps.
    pub fn step(&self, q: &mut [C64], h: f64) {
        let c = 2f64.cbrt();
        let w1 = 1.0 / (2.0 - c);
        let w0 = -c / (2.0 - c);
        self.strang(q, w1 * h);
        self.strang(q, w0 * h);
        self.strang(q, w1 * h);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeReport {
    pub t_final: f64,
    pub dt: f64,
    pub steps: usize,
    pub relative_energy_drift: f64,
    /// Max relative drift of `Σ e^{2|n|ρ}|q_n|²`.
    pub weighted_norm_drift: f64,
    /// Peak frequency per tangential site, from the FFT.
    pub fft_peaks: Vec<f64>,
    /// Refined by phase regression around the peak.
    pub refined_frequencies: Vec<f64>,
    pub unperturbed: Vec<f64>,
    pub omega_infty_physical: Vec<f64>,
    /// `ε³ max_a ξ_a`.
    pub xi_physical: f64,
}

/// Integrates from the torus at `θ = 0` and compares tangential frequencies.
pub fn ode_validate(torus: &TorusApproximation, mode_bound: i64, t_final: f64, dt: f64) -> Result<OdeReport, KamError> {
    if !(t_final > 0.0 && dt > 0.0) {
        return Err(KamError::Invalid(format!("T={t_final}, dt={dt}")));
    }
    let ode = GalerkinOde::new(mode_bound);
    let q_embed = torus.embed(&vec![0.0; torus.tangential.b()]);
    let mut q: Vec<C64> = ode.sites.iter().map(|s| torus.q_modes.slot(*s).map_or(C64::default(), |sl| q_embed[2 * sl])).collect();
    let steps = (t_final / dt).round() as usize;
    let tang_idx: Vec<usize> = torus.tangential.sites.iter().map(|s| ode.sites.iter().position(|x| x == s).unwrap()).collect();
    let rho = 0.1;
    let weights: Vec<f64> = ode.sites.iter().map(|s| (2.0 * s.norm() * rho).exp()).collect();
    let wnorm = |q: &[C64]| q.iter().zip(&weights).map(|(v, w)| v.norm_sqr() * w).sum::<f64>();
    let e0 = ode.energy(&q);
    let n0 = wnorm(&q);
    let mut samples: Vec<Vec<C64>> = vec![Vec::with_capacity(steps + 1); tang_idx.len()];
    for (a, &ix) in tang_idx.iter().enumerate() {
        samples[a].push(q[ix]);
    }
    let mut drift: f64 = 0.0;
    let mut ndrift: f64 = 0.0;
    for st in 1..=steps {
        ode.step(&mut q, dt);
        for (a, &ix) in tang_idx.iter().enumerate() {
            samples[a].push(q[ix]);
        }
        if st % 16 == 0 || st == steps {
            let e = ode.energy(&q);
            let rel = ((e - e0) / e0).abs();
            if !rel.is_finite() || rel > 1e-2 {
                return Err(KamError::Unstable { t: st as f64 * dt, err: rel });
            }
            drift = drift.max(rel);
            ndrift = ndrift.max(((wnorm(&q) - n0) / n0).abs());
        }
    }
    let mut peaks = Vec::new();
    let mut refined = Vec::new();
    for s in &samples {
        let (p, r) = dominant_frequency(s, dt);
        peaks.push(p);
        refined.push(r);
    }
    Ok(OdeReport {
        t_final: steps as f64 * dt,
        dt,
        steps,
        relative_energy_drift: drift,
        weighted_norm_drift: ndrift,
        fft_peaks: peaks,
        refined_frequencies: refined,
        unperturbed: torus.tangential.sites.iter().map(|s| s.norm_sq() as f64).collect(),
        omega_infty_physical: torus.omega_physical.clone(),
        xi_physical: torus.eps.powi(3) * torus.xi.iter().copied().fold(0.0, f64::max),
    })
}

/// FFT peak (Hann window, with `x(t) ~ e^{iωt}` giving a peak at `+ω`) and its
/// refinement by a linear fit of the unwrapped demodulated phase.
pub fn dominant_frequency(x: &[C64], dt: f64) -> (f64, f64) {
    let n = x.len();
    if n < 4 {
        return (0.0, 0.0);
    }
    let mut buf: Vec<C64> = x
        .iter()
        .enumerate()
        .map(|(j, v)| v * (0.5 - 0.5 * (2.0 * PI * j as f64 / (n - 1) as f64).cos()))
        .collect();
    let mut planner = rustfft::FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let (best, _) = buf.iter().enumerate().fold((0usize, 0.0f64), |acc, (i, v)| if v.norm() > acc.1 { (i, v.norm()) } else { acc });
    let bin = if best > n / 2 { best as f64 - n as f64 } else { best as f64 };
    let peak = 2.0 * PI * bin / (n as f64 * dt);
    // Demodulate and fit the phase.
    let mut prev = 0.0;
    let mut offset = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (j, v) in x.iter().enumerate() {
        let t = j as f64 * dt;
        let d = v * (-I * peak * t).exp();
        let mut ph = d.arg() + offset;
        while ph - prev > PI {
            ph -= 2.0 * PI;
            offset -= 2.0 * PI;
        }
        while ph - prev < -PI {
            ph += 2.0 * PI;
            offset += 2.0 * PI;
        }
        prev = ph;
        sx += t;
        sy += ph;
        sxx += t * t;
        sxy += t * ph;
    }
    let nf = n as f64;
    let slope = (nf * sxy - sx * sy) / (nf * sxx - sx * sx);
    (peak, peak + slope)
}

/// A sampled line `n + tc`, `m + tc`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzLine {
    pub n: Site,
    pub m: Site,
    pub c: Site,
}

impl ToeplitzLine {
    pub fn orthogonal(&self) -> bool {
        (self.n - self.m).dot(self.c) == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzLineReport {
    pub line: ToeplitzLine,
    pub limit: C64,
    /// `sup_{K≤|t|≤100K} |t|·|M(t) − M(∞)|`.
    pub sup_scaled: f64,
    /// Same sup over the upper decade only.
    pub sup_tail: f64,
    pub constant_along_line: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToeplitzReport {
    pub lines: Vec<ToeplitzLineReport>,
    pub worst_constant: f64,
    pub vacuous: bool,
}

/// Evaluates `M(t) = ∂²/∂w_{n+tc}∂w̄_{m+tc}` along each line for `K ≤ |t| ≤ 100K`.
/// The limit is `2M(2T) − M(T)` with `T = 10⁶` for lines with `⟨n−m,c⟩ ≠ 0` and `M(0)` otherwise.
pub fn toeplitz_check(second: &dyn Fn(Site, Site) -> C64, lines: &[ToeplitzLine], k: i64) -> ToeplitzReport {
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    let mut vacuous = true;
    for &line in lines {
        let at = |t: i64| second(line.n + line.c.scale(t), line.m + line.c.scale(t));
        let limit = if line.orthogonal() { at(0) } else { at(2_000_000) * 2.0 - at(1_000_000) };
        let mut sup: f64 = 0.0;
        let mut tail: f64 = 0.0;
        let mut constant = true;
        let base = at(k);
        for sign in [1i64, -1] {
            for t in k..=100 * k {
                let v = at(sign * t);
                if v != base {
                    constant = false;
                }
                if v != C64::default() {
                    vacuous = false;
                }
                let s = t as f64 * (v - limit).norm();
                sup = sup.max(s);
                if t >= 10 * k {
                    tail = tail.max(s);
                }
            }
        }
        worst = worst.max(sup);
        reports.push(ToeplitzLineReport { line, limit, sup_scaled: sup, sup_tail: tail, constant_along_line: constant });
    }
    ToeplitzReport { lines: reports, worst_constant: worst, vacuous }
}

/// Lines on which the Birkhoff generator has a nonzero mixed coefficient:
/// `m = n + i − j` for a tangential pair, `|n| ≤ radius`, `|c| ≤ 3`.
pub fn sample_lines(s: &TangentialSet, count: usize, orthogonal: bool, radius: i64, seed: u64) -> Vec<ToeplitzLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let sset: FxHashSet<Site> = s.sites.iter().copied().collect();
    let mut guard = 0;
    while out.len() < count && guard < 1_000_000 {
        guard += 1;
        let n = Site::new(rng.random_range(-radius..=radius), rng.random_range(-radius..=radius));
        let a = rng.random_range(0..s.b());
        let b = rng.random_range(0..s.b());
        if a == b || sset.contains(&n) {
            continue;
        }
        let m = n + s.sites[a] - s.sites[b];
        if sset.contains(&m) {
            continue;
        }
        let d = n - m;
        let c = if orthogonal {
            let g = num_integer::gcd(d.n1, d.n2).max(1);
            Site::new(-d.n2 / g, d.n1 / g).scale(rng.random_range(1..=3))
        } else {
            let c = Site::new(rng.random_range(-3..=3), rng.random_range(-3..=3));
            if d.dot(c) == 0 {
                continue;
            }
            c
        };
        out.push(ToeplitzLine { n, m, c });
    }
    out
}

/// `∂²F/∂w_n∂w̄_m` of the Birkhoff generator on the unperturbed torus, for any sites.
pub fn birkhoff_second_derivative(s: &TangentialSet, xi: &[f64]) -> impl Fn(Site, Site) -> C64 {
    let owned = s.clone();
    let xi = xi.to_vec();
    move |n, m| {
        if owned.contains(n) || owned.contains(m) {
            return C64::default();
        }
        generator_mixed_coefficient(&owned, &xi, n, m)
    }
}

/// Uniform bound `4 b(b−1) max ξ / 8π²` on `|t|·|M(t)|` once `|t|` exceeds the line's
/// initial frequency mismatch.
pub fn toeplitz_constant(xi: &[f64]) -> f64 {
    let b = xi.len() as f64;
    4.0 * b * (b - 1.0) * xi.iter().copied().fold(0.0, f64::max) / (8.0 * PI * PI)
}

/// Random points near the torus for symplecticity checks.
pub fn random_point(b: usize, nvars: usize, amp: f64, rng: &mut ChaCha8Rng) -> PhasePoint {
    let mut x = PhasePoint::zeros(b, nvars);
    for a in 0..b {
        x.theta[a] = C64::new(rng.random_range(0.0..2.0 * PI), 0.0);
        x.action[a] = C64::new(rng.random_range(-amp..amp), 0.0);
    }
    for v in 0..nvars / 2 {
        let z = C64::new(rng.random_range(-amp..amp), rng.random_range(-amp..amp));
        x.z[2 * v] = z;
        x.z[2 * v + 1] = z.conj();
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let base = ScheduleBase::new(1.0, 0.5, 1e-4, 5, 0.1, 1.0);
        let p1 = schedule(1, &base);
        assert!((p1.r - 0.75).abs() < 1e-15);
        assert!((p1.s - 0.25 * 0.5 * 1e-4f64.cbrt()).abs() < 1e-15);
        assert_eq!(schedule(2, &base).k, 45);
        assert_eq!(p1.delta, 125);
        let p0 = schedule(0, &base);
        assert!(((p0.k as f64).powf(1.15) * p0.rho - 1.0).abs() < 1e-12);
        assert!((schedule(2, &base).r - (1.0 - 0.25 - 0.125)).abs() < 1e-15);
    }

    #[test]
    fn fft_frequency_of_pure_tone() {
        let dt = 0.01;
        let w = 5.123;
        let x: Vec<C64> = (0..20000).map(|j| (I * w * j as f64 * dt).exp()).collect();
        let (p, r) = dominant_frequency(&x, dt);
        assert!((p - w).abs() < 2.0 * PI / (20000.0 * dt));
        assert!((r - w).abs() < 1e-9);
    }

    #[test]
    fn ode_zero_amplitude_is_linear() {
        let ode = GalerkinOde::new(2);
        let mut q = vec![C64::default(); ode.sites.len()];
        let idx = ode.sites.iter().position(|s| *s == Site::new(1, 1)).unwrap();
        q[idx] = C64::new(1e-8, 0.0);
        for _ in 0..100 {
            ode.step(&mut q, 0.01);
        }
        let expect = (I * 2.0).exp() * 1e-8;
        assert!((q[idx] - expect).norm() < 1e-20);
    }

    #[test]
    fn ode_gradient_matches_direct_sum() {
        let ode = GalerkinOde::new(2);
        let n = ode.sites.len();
        let q: Vec<C64> = (0..n).map(|j| C64::new((j as f64 * 0.37).sin(), (j as f64 * 0.11).cos()) * 0.1).collect();
        let g = ode.grad_g(&q);
        let slot = |s: Site| ode.sites.iter().position(|x| *x == s);
        let mut direct = vec![C64::default(); n];
        for a in 0..n {
            for c in 0..n {
                for d in 0..n {
                    if let Some(t) = slot(ode.sites[a] + ode.sites[c] - ode.sites[d]) {
                        direct[t] += q[a] * q[c] * q[d].conj() / (4.0 * PI * PI);
                    }
                }
            }
        }
        for t in 0..n {
            assert!((g[t] - direct[t]).norm() < 1e-14);
        }
        let mut gsum = 0.0;
        for a in 0..n {
            for bq in 0..n {
                for c in 0..n {
                    if let Some(d) = slot(ode.sites[a] - ode.sites[bq] + ode.sites[c]) {
                        gsum += (q[a] * q[bq].conj() * q[c] * q[d].conj()).re / (8.0 * PI * PI);
                    }
                }
            }
        }
        assert!((ode.g_value(&q) - gsum).abs() < 1e-14);
    }
}
