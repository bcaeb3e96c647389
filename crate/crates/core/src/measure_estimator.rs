//! Monte-Carlo estimates of the excluded parameter sets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::hamiltonian_algebra::C64;
use crate::lattice_resonance::{classify_site, Site, TangentialSet};
use crate::normal_form::{
    classify_sites, eig2_real, galerkin_modes, l2_block_matrix, normal_frequencies, tangential_split, NormalFormError, PairMaps, Parameters,
    SiteKind, SplitFreq,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeasureError {
    #[error(transparent)]
    NormalForm(#[from] NormalFormError),
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("all fractions are zero; increase K or samples")]
    AllZero,
    #[error("need at least 4 gamma values spanning 3 decades")]
    TooFewGammas,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SetClass {
    /// `|⟨k,ω⟩|`.
    Rk,
    /// `|⟨k,ω⟩ + Ω_n|`, or `|det(⟨k,ω⟩I + 𝒜_n)|` for a second-type block.
    RkBlock,
    /// `|⟨k,ω⟩ + Ω_n ± Ω_m|` for scalar sites.
    RkBlockBlock,
    /// `|det(⟨k,ω⟩I + 𝒜_n ⊗ I ± I ⊗ 𝒜_{n′})|` with at least one block.
    Cknn,
}

impl SetClass {
    /// Threshold exponent as a fraction of `τ`.
    pub fn tau_fraction(self) -> f64 {
        match self {
            SetClass::Rk | SetClass::RkBlock => 1.0,
            SetClass::RkBlockBlock => 0.2,
            SetClass::Cknn => 0.05,
        }
    }
}

/// What a normal factor contributes to a divisor, independent of `ξ`-value bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Factor {
    /// A scalar site, represented by one site with the same frequency law.
    Scalar(Site),
    /// A second-type block, keyed by its smaller site.
    Block(Site),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResonantSetSpec {
    pub class: SetClass,
    pub k: Vec<i64>,
    pub factors: Vec<Factor>,
    /// Sign of the second factor.
    pub sign: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub gamma: f64,
    #[serde(rename = "K")]
    pub k: u32,
    pub tau: f64,
    pub fraction: f64,
    pub ci95: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Sites, pair maps and the `ξ`-independent enumeration of divisors whose `ε⁻³` part vanishes.
#[derive(Clone, Debug)]
pub struct MeasureContext {
    pub s: TangentialSet,
    pub eps: f64,
    pub xi_box: (f64, f64),
    pub k_bound: u32,
    pub sites: Vec<Site>,
    pub maps: PairMaps,
    pub specs: Vec<ResonantSetSpec>,
    reps: Vec<Site>,
}

/// Stands for every plain site: they share one frequency law.
const PLAIN: Site = Site { n1: i64::MIN, n2: 0 };

fn factor_key(n: Site, kind: SiteKind, maps: &PairMaps) -> Factor {
    match kind {
        SiteKind::Plain => Factor::Scalar(PLAIN),
        SiteKind::L2 => {
            let p = maps.l2[&n];
            Factor::Block(n.min(p.m))
        }
        _ => Factor::Scalar(n),
    }
}

fn k_vectors(b: usize, k_bound: u32) -> Vec<Vec<i64>> {
    let kb = k_bound as i64;
    let mut out = vec![Vec::new()];
    for _ in 0..b {
        let mut next = Vec::new();
        for v in &out {
            let used: i64 = v.iter().map(|x: &i64| x.abs()).sum();
            for c in -(kb - used)..=(kb - used) {
                let mut w = v.clone();
                w.push(c);
                next.push(w);
            }
        }
        out = next;
    }
    out.retain(|k| k.iter().any(|&x| x != 0));
    out
}

fn dot(k: &[i64], v: &[f64]) -> f64 {
    k.iter().zip(v).map(|(a, b)| *a as f64 * b).sum()
}

impl MeasureContext {
    /// Enumerates all divisor classes over normal sites `|n| ≤ mode_bound` and `0 < |k| ≤ K`.
    pub fn new(s: &TangentialSet, eps: f64, xi_box: (f64, f64), mode_bound: i64, k_bound: u32) -> Result<Self, MeasureError> {
        if !(eps > 0.0 && xi_box.0 > 0.0 && xi_box.1 > xi_box.0) {
            return Err(MeasureError::Invalid(format!("eps={eps}, box={xi_box:?}")));
        }
        let sites: Vec<Site> = galerkin_modes(mode_bound).into_iter().filter(|n| !s.contains(*n)).collect();
        let maps = classify_sites(s, &sites)?;
        let probe = Parameters::new(vec![xi_box.0; s.b()], eps, xi_box);
        let fm = normal_frequencies(&probe, s, &sites, &maps)?;
        let lin_t: Vec<i64> = s.sites.iter().map(|x| x.norm_sq()).collect();
        // (factor, lin) per distinct normal factor; blocks enter once.
        let mut factors: Vec<(Factor, i64)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut reps = Vec::new();
        for e in &fm.big_omega {
            let f = factor_key(e.site, e.kind, &maps);
            let lin = match f {
                Factor::Block(n) => n.norm_sq() - maps.l2[&n].i.norm_sq(),
                Factor::Scalar(_) => e.lin,
            };
            if e.kind == SiteKind::Plain && !seen.iter().any(|(g, _)| *g == f) {
                reps.push(e.site);
            }
            if !seen.insert((f, lin)) {
                continue;
            }
            factors.push((f, lin));
        }
        let mut by_lin: FxHashMap<i64, Vec<Factor>> = FxHashMap::default();
        for (f, lin) in &factors {
            by_lin.entry(*lin).or_default().push(*f);
        }
        let mut specs = std::collections::BTreeSet::new();
        for k in k_vectors(s.b(), k_bound) {
            let l: i64 = k.iter().zip(&lin_t).map(|(a, b)| a * b).sum();
            if l == 0 {
                specs.insert(ResonantSetSpec { class: SetClass::Rk, k: k.clone(), factors: vec![], sign: 1 });
            }
            if let Some(list) = by_lin.get(&(-l)) {
                for f in list {
                    specs.insert(ResonantSetSpec { class: SetClass::RkBlock, k: k.clone(), factors: vec![*f], sign: 1 });
                }
            }
            for (f, lf) in &factors {
                for sign in [1i64, -1] {
                    let need = sign * (-l - lf);
                    let Some(list) = by_lin.get(&need) else { continue };
                    for g in list {
                        let block = matches!(f, Factor::Block(_)) || matches!(g, Factor::Block(_));
                        let class = if block { SetClass::Cknn } else { SetClass::RkBlockBlock };
                        let (a, b) = if sign > 0 && g < f { (*g, *f) } else { (*f, *g) };
                        specs.insert(ResonantSetSpec { class, k: k.clone(), factors: vec![a, b], sign: sign as i8 });
                    }
                }
            }
        }
        for f in &factors {
            match f.0 {
                Factor::Scalar(n) | Factor::Block(n) => {
                    if n != PLAIN && !reps.contains(&n) {
                        reps.push(n);
                    }
                }
            }
        }
        for n in reps.clone() {
            if let Some(p) = maps.l1.get(&n).or(maps.l2.get(&n)) {
                if !reps.contains(&p.m) {
                    reps.push(p.m);
                }
            }
        }
        reps.sort();
        Ok(MeasureContext { s: s.clone(), eps, xi_box, k_bound, sites, maps, specs: specs.into_iter().collect(), reps })
    }

    pub fn parameters(&self, xi: &[f64]) -> Parameters {
        Parameters::new(xi.to_vec(), self.eps, self.xi_box)
    }

    /// `|D|` for every spec at `ξ`.
    pub fn divisor_values(&self, xi: &[f64]) -> Result<Vec<f64>, MeasureError> {
        let p = self.parameters(xi);
        let sub = restrict(&self.maps, &self.reps);
        let fm = normal_frequencies(&p, &self.s, &self.reps, &sub)?;
        let omega_rest: Vec<f64> = fm.omega_split.iter().map(|f| f.rest).collect();
        let mut scalar: BTreeMap<Site, f64> = BTreeMap::new();
        let mut block: BTreeMap<Site, [C64; 2]> = BTreeMap::new();
        for e in &fm.big_omega {
            match factor_key(e.site, e.kind, &self.maps) {
                Factor::Scalar(rep) => {
                    scalar.insert(rep, e.rest);
                }
                Factor::Block(n) => {
                    if !block.contains_key(&n) {
                        let m = l2_block_matrix(&p, &self.maps.l2[&n], &fm, &self.s)?;
                        block.insert(n, eig2_real(m.rest_entries));
                    }
                }
            }
        }
        let eigs = |f: &Factor| -> Vec<C64> {
            match f {
                Factor::Scalar(n) => vec![C64::new(scalar[n], 0.0)],
                Factor::Block(n) => block[n].to_vec(),
            }
        };
        Ok(self
            .specs
            .iter()
            .map(|sp| {
                let x = C64::new(dot(&sp.k, &omega_rest), 0.0);
                match sp.factors.len() {
                    0 => x.norm(),
                    1 => eigs(&sp.factors[0]).iter().map(|a| x + a).product::<C64>().norm(),
                    _ => {
                        let (ea, eb) = (eigs(&sp.factors[0]), eigs(&sp.factors[1]));
                        let sg = sp.sign as f64;
                        let mut prod = C64::new(1.0, 0.0);
                        for a in &ea {
                            for b in &eb {
                                prod *= x + a + b * sg;
                            }
                        }
                        prod.norm()
                    }
                }
            })
            .collect())
    }

    /// `min_spec |D| K^{τ_class}`: `ξ` is excluded at `γ` iff this is `< γ`.
    pub fn critical_gamma(&self, xi: &[f64], tau: f64) -> Result<f64, MeasureError> {
        let vals = self.divisor_values(xi)?;
        let kk = self.k_bound.max(1) as f64;
        Ok(self
            .specs
            .iter()
            .zip(vals)
            .map(|(sp, v)| v * kk.powf(tau * sp.class.tau_fraction()))
            .fold(f64::INFINITY, f64::min))
    }

    pub fn sample_xi(&self, samples: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..samples)
            .map(|_| (0..self.s.b()).map(|_| rng.random_range(self.xi_box.0..self.xi_box.1)).collect())
            .collect()
    }
}

fn restrict(maps: &PairMaps, reps: &[Site]) -> PairMaps {
    let keep = |n: &Site| reps.binary_search(n).is_ok();
    PairMaps {
        l1: maps.l1.iter().filter(|(n, _)| keep(n)).map(|(n, p)| (*n, *p)).collect(),
        l2: maps.l2.iter().filter(|(n, _)| keep(n)).map(|(n, p)| (*n, *p)).collect(),
    }
}

/// Membership (`true` = inside the excluded set) of `ξ` in each spec at threshold `γ/K^{τ_class}`.
pub fn divisor_pass(ctx: &MeasureContext, xi: &[f64], gamma: f64, tau: f64) -> Result<Vec<bool>, MeasureError> {
    let vals = ctx.divisor_values(xi)?;
    let kk = ctx.k_bound.max(1) as f64;
    Ok(ctx.specs.iter().zip(vals).map(|(sp, v)| v < gamma / kk.powf(tau * sp.class.tau_fraction())).collect())
}

/// Wilson score half-width at 95%.
pub fn ci95(fraction: f64, samples: usize) -> f64 {
    let n = samples as f64;
    let z = 1.959963984540054;
    let denom = 1.0 + z * z / n;
    z * (fraction * (1.0 - fraction) / n + z * z / (4.0 * n * n)).sqrt() / denom
}

/// Fractions for several `γ` from one sample set.
pub fn excluded_measures(ctx: &MeasureContext, gammas: &[f64], tau: f64, samples: usize, seed: u64) -> Result<Vec<MeasureEstimate>, MeasureError> {
    if samples < 1000 {
        return Err(MeasureError::Invalid(format!("samples = {samples} < 1000")));
    }
    if let Some(g) = gammas.iter().find(|g| !(**g >= 0.0)) {
        return Err(MeasureError::Invalid(format!("gamma = {g}")));
    }
    let xs = ctx.sample_xi(samples, seed);
    let crit: Vec<f64> = xs.par_iter().map(|x| ctx.critical_gamma(x, tau)).collect::<Result<_, _>>()?;
    Ok(gammas
        .iter()
        .map(|&g| {
            let count = crit.iter().filter(|&&c| c < g).count();
            let fraction = count as f64 / samples as f64;
            MeasureEstimate { gamma: g, k: ctx.k_bound, tau, fraction, ci95: ci95(fraction, samples), samples, seed }
        })
        .collect())
}

pub fn excluded_measure(ctx: &MeasureContext, gamma: f64, tau: f64, samples: usize, seed: u64) -> Result<MeasureEstimate, MeasureError> {
    Ok(excluded_measures(ctx, &[gamma], tau, samples, seed)?.remove(0))
}

/// Log-log least squares of fraction against `γ`, skipping zero fractions.
pub fn gamma_scaling_fit(estimates: &[MeasureEstimate], gammas: &[f64]) -> Result<(f64, f64), MeasureError> {
    let pos: Vec<f64> = gammas.iter().copied().filter(|g| *g > 0.0).collect();
    if gammas.len() < 4 || pos.is_empty() {
        return Err(MeasureError::TooFewGammas);
    }
    let (lo, hi) = pos.iter().fold((f64::INFINITY, 0.0f64), |(a, b), g| (a.min(*g), b.max(*g)));
    if hi / lo < 1e3 * (1.0 - 1e-12) {
        return Err(MeasureError::TooFewGammas);
    }
    let pts: Vec<(f64, f64)> = estimates
        .iter()
        .zip(gammas)
        .filter(|(e, g)| e.fraction > 0.0 && **g > 0.0)
        .map(|(e, g)| (g.ln(), e.fraction.ln()))
        .collect();
    if pts.is_empty() {
        return Err(MeasureError::AllZero);
    }
    if pts.len() == 1 {
        return Err(MeasureError::Invalid("only one nonzero fraction".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, (my - slope * mx).exp()))
}

/// Frequency law of a single site, including far sites outside any window.
pub fn site_frequency(p: &Parameters, s: &TangentialSet, n: Site) -> Result<SplitFreq, MeasureError> {
    let mut sites = vec![n];
    if let Some(pair) = classify_site(n, s).map_err(NormalFormError::Lattice)? {
        sites.push(pair.m);
    }
    let maps = classify_sites(s, &sites)?;
    let fm = normal_frequencies(p, s, &sites, &maps)?;
    let e = fm
        .entry(n)
        .ok_or_else(|| MeasureError::Invalid(format!("{n} is tangential")))?;
    Ok(SplitFreq { lin: e.lin, rest: e.rest })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LimitDivisor {
    /// `M(t) → limit` with `|M(t) − limit| ≤ rate_constant / |t|` on the sampled range.
    Converges { limit: f64, rate_constant: f64, constant: bool },
    /// `⟨n₀−n₀′, c⟩ ≠ 0`: the `ε⁻³` part grows linearly in `t`.
    LargeDivisor { value_at_t_max: f64 },
}

/// `M(t) = ⟨k,ω⟩ + Ω_{n₀+tc} − Ω_{n₀′+tc}` for `1 ≤ t ≤ t_max`.
pub fn limit_divisor(
    p: &Parameters,
    s: &TangentialSet,
    k: &[i64],
    n0: Site,
    n0_prime: Site,
    c: Site,
    t_max: i64,
) -> Result<LimitDivisor, MeasureError> {
    if t_max < 2 || k.len() != s.b() {
        return Err(MeasureError::Invalid(format!("t_max = {t_max}, |k| = {}", k.len())));
    }
    let split = tangential_split(p, s)?;
    let k_lin: i64 = split.iter().zip(k).map(|(f, &a)| a * f.lin).sum();
    let k_rest: f64 = split.iter().zip(k).map(|(f, &a)| a as f64 * f.rest).sum();
    let e3 = 1.0 / p.eps.powi(3);
    let m_at = |t: i64| -> Result<f64, MeasureError> {
        let a = site_frequency(p, s, n0 + c.scale(t))?;
        let b = site_frequency(p, s, n0_prime + c.scale(t))?;
        Ok((k_lin + a.lin - b.lin) as f64 * e3 + (k_rest + a.rest - b.rest))
    };
    if (n0 - n0_prime).dot(c) != 0 {
        return Ok(LimitDivisor::LargeDivisor { value_at_t_max: m_at(t_max)?.abs() });
    }
    let vals: Vec<f64> = (1..=t_max).map(m_at).collect::<Result<_, _>>()?;
    let limit = *vals.last().unwrap();
    let constant = vals.iter().all(|v| *v == limit);
    let rate_constant = vals.iter().enumerate().map(|(i, v)| (i + 1) as f64 * (v - limit).abs()).fold(0.0, f64::max);
    Ok(LimitDivisor::Converges { limit, rate_constant, constant })
}

/// Signed `D(ξ)` for specs without second-type blocks.
pub fn signed_divisor(ctx: &MeasureContext, spec: &ResonantSetSpec, xi: &[f64]) -> Result<Option<f64>, MeasureError> {
    if spec.factors.iter().any(|f| matches!(f, Factor::Block(_))) {
        return Ok(None);
    }
    let p = ctx.parameters(xi);
    let sub = restrict(&ctx.maps, &ctx.reps);
    let fm = normal_frequencies(&p, &ctx.s, &ctx.reps, &sub)?;
    let mut v: f64 = spec.k.iter().zip(&fm.omega_split).map(|(a, f)| *a as f64 * f.rest).sum();
    for (idx, f) in spec.factors.iter().enumerate() {
        let Factor::Scalar(n) = f else { unreachable!() };
        let rest = fm
            .big_omega
            .iter()
            .find(|e| factor_key(e.site, e.kind, &ctx.maps) == *f)
            .map(|e| e.rest)
            .ok_or_else(|| MeasureError::Invalid(format!("no site for {n}")))?;
        v += if idx == 1 { spec.sign as f64 * rest } else { rest };
    }
    Ok(Some(v))
}

/// A zero of the signed divisor of `spec` inside the box, by a grid scan along each
/// coordinate through `base` followed by bisection.
pub fn engineered_resonant_xi(ctx: &MeasureContext, spec: &ResonantSetSpec, base: &[f64]) -> Option<Vec<f64>> {
    let f = |x: &[f64]| signed_divisor(ctx, spec, x).ok().flatten();
    let (lo, hi) = ctx.xi_box;
    for a in 0..base.len() {
        let at = |t: f64| {
            let mut x = base.to_vec();
            x[a] = t;
            x
        };
        let grid = 64;
        let mut prev_t = lo + 1e-9 * (hi - lo);
        let mut prev = f(&at(prev_t))?;
        for g in 1..=grid {
            let t = lo + (hi - lo) * g as f64 / grid as f64 * (1.0 - 1e-9);
            let v = f(&at(t))?;
            if prev == 0.0 {
                return Some(at(prev_t));
            }
            if prev.signum() != v.signum() {
                let (mut l, mut r, mut fl) = (prev_t, t, prev);
                for _ in 0..200 {
                    let m = 0.5 * (l + r);
                    let fm = f(&at(m))?;
                    if fm == 0.0 || m == l || m == r {
                        return Some(at(m));
                    }
                    if fm.signum() == fl.signum() {
                        l = m;
                        fl = fm;
                    } else {
                        r = m;
                    }
                }
                return Some(at(0.5 * (l + r)));
            }
            prev_t = t;
            prev = v;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> MeasureContext {
        let s = TangentialSet::new(vec![Site::new(1, 2), Site::new(3, 1)]).unwrap();
        MeasureContext::new(&s, 1e-2, (1.0, 2.0), 4, 6).unwrap()
    }

    #[test]
    fn zero_gamma_excludes_nothing() {
        let c = ctx();
        let m = excluded_measure(&c, 0.0, 1.0, 1000, 3).unwrap();
        assert_eq!(m.fraction, 0.0);
        let bits = divisor_pass(&c, &[1.3, 1.7], 0.0, 1.0).unwrap();
        assert!(bits.iter().all(|b| !b));
    }

    #[test]
    fn monotone_in_gamma() {
        let c = ctx();
        let gs = [1e-6, 1e-4, 1e-2, 1e-1, 1.0];
        let est = excluded_measures(&c, &gs, 1.0, 2000, 11).unwrap();
        for w in est.windows(2) {
            assert!(w[0].fraction <= w[1].fraction);
        }
    }

    #[test]
    fn engineered_point_is_flagged() {
        let c = ctx();
        let base = [1.4, 1.5];
        let (idx, x) = c
            .specs
            .iter()
            .enumerate()
            .find_map(|(i, sp)| engineered_resonant_xi(&c, sp, &base).map(|x| (i, x)))
            .expect("some scalar class crosses zero in the box");
        let d = signed_divisor(&c, &c.specs[idx], &x).unwrap().unwrap();
        assert!(d.abs() < 1e-12);
        let bits = divisor_pass(&c, &x, 1e-9, 1.0).unwrap();
        assert!(bits[idx]);
        let far = divisor_pass(&c, &base, 0.0, 1.0).unwrap();
        assert!(far.iter().all(|b| !b));
    }

    #[test]
    fn fit_recovers_generator() {
        let gs = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
        for (c, e) in [(0.7, 0.25), (3.0, 1.0)] {
            let est: Vec<MeasureEstimate> = gs
                .iter()
                .map(|g| MeasureEstimate { gamma: *g, k: 10, tau: 1.0, fraction: c * g.powf(e), ci95: 0.0, samples: 1000, seed: 0 })
                .collect();
            let (slope, cst) = gamma_scaling_fit(&est, &gs).unwrap();
            assert!((slope - e).abs() < 1e-12);
            assert!((cst - c).abs() < 1e-10);
        }
    }

    #[test]
    fn orthogonal_line_is_constant() {
        let s = TangentialSet::new(vec![Site::new(1, 2), Site::new(3, 1)]).unwrap();
        let p = Parameters::new(vec![1.3, 1.7], 1e-2, (1.0, 2.0));
        let r = limit_divisor(&p, &s, &[1, 0], Site::new(40, 3), Site::new(41, 5), Site::new(2, -1), 50).unwrap();
        assert!(matches!(r, LimitDivisor::Converges { constant: true, rate_constant, .. } if rate_constant == 0.0));
        let g = limit_divisor(&p, &s, &[1, 0], Site::new(40, 3), Site::new(41, 5), Site::new(1, 0), 50).unwrap();
        assert!(matches!(g, LimitDivisor::LargeDivisor { value_at_t_max } if value_at_t_max > 1.0));
    }
}
