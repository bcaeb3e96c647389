//! Sparse Fourier–Taylor series in `(θ, I, z, z̄)`.
//!
//! A term is `c · e^{i⟨k,θ⟩} I^l Π z_v`, where the normal variables are
//! addressed by `var = 2·slot + conj` into a shared [`ModeTable`]. The bracket is
//!
//! `{F,G} = ⟨F_I,G_θ⟩ − ⟨F_θ,G_I⟩ + i(⟨F_z,G_z̄⟩ − ⟨F_z̄,G_z⟩)`,
//!
//! and the flow of `F` is `ẋ = {x, F}`, so `H∘φ¹_F = Σ ad^j(H)/j!` with `ad(X) = {X,F}`.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::lattice_resonance::Site;

pub type C64 = Complex64;
pub const I: C64 = C64::new(0.0, 1.0);

/// Normal sites with a dense slot index.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeTable {
    sites: Vec<Site>,
    norms: Vec<f64>,
    index: FxHashMap<Site, u16>,
}

impl ModeTable {
    pub fn new(sites: Vec<Site>) -> Self {
        assert!(sites.len() < u16::MAX as usize / 2, "too many modes");
        let norms = sites.iter().map(|s| s.norm()).collect();
        let index = sites.iter().enumerate().map(|(k, s)| (*s, k as u16)).collect();
        ModeTable { sites, norms, index }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, slot: usize) -> Site {
        self.sites[slot]
    }

    pub fn slot(&self, n: Site) -> Option<usize> {
        self.index.get(&n).map(|&k| k as usize)
    }

    pub fn norm(&self, slot: usize) -> f64 {
        self.norms[slot]
    }

    pub fn z(&self, n: Site) -> Option<Var> {
        self.slot(n).map(|s| (2 * s) as Var)
    }

    pub fn zbar(&self, n: Site) -> Option<Var> {
        self.slot(n).map(|s| (2 * s + 1) as Var)
    }
}

pub type Var = u16;

pub fn var_slot(v: Var) -> usize {
    (v >> 1) as usize
}

pub fn var_is_conj(v: Var) -> bool {
    v & 1 == 1
}

pub fn conj_var(v: Var) -> Var {
    v ^ 1
}

pub type KVec = SmallVec<[i16; 4]>;
pub type LVec = SmallVec<[u8; 4]>;
pub type WVec = SmallVec<[Var; 8]>;

/// Multi-index `(k, l, α, β)`; `w` is the sorted multiset of normal variables.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mono {
    pub k: KVec,
    pub l: LVec,
    pub w: WVec,
}

impl Mono {
    pub fn one(b: usize) -> Self {
        Mono { k: SmallVec::from_elem(0, b), l: SmallVec::from_elem(0, b), w: SmallVec::new() }
    }

    pub fn new(k: &[i16], l: &[u8], w: &[Var]) -> Self {
        let mut w: WVec = w.iter().copied().collect();
        w.sort_unstable();
        Mono { k: k.iter().copied().collect(), l: l.iter().copied().collect(), w }
    }

    pub fn k_norm(&self) -> u32 {
        self.k.iter().map(|x| x.unsigned_abs() as u32).sum()
    }

    pub fn l_norm(&self) -> u32 {
        self.l.iter().map(|&x| x as u32).sum()
    }

    /// `2|l| + |α| + |β|`.
    pub fn degree(&self) -> u32 {
        2 * self.l_norm() + self.w.len() as u32
    }

    pub fn normal_degree(&self) -> usize {
        self.w.len()
    }

    /// Multiplicity of `v` in `w`.
    pub fn mult(&self, v: Var) -> u32 {
        self.w.iter().filter(|&&x| x == v).count() as u32
    }

    /// `(|α|, |β|)`.
    pub fn alpha_beta(&self) -> (usize, usize) {
        let beta = self.w.iter().filter(|&&v| var_is_conj(v)).count();
        (self.w.len() - beta, beta)
    }

    pub fn mul(&self, o: &Mono) -> Mono {
        let k = self.k.iter().zip(&o.k).map(|(a, b)| a + b).collect();
        let l = self.l.iter().zip(&o.l).map(|(a, b)| a + b).collect();
        let mut w = WVec::with_capacity(self.w.len() + o.w.len());
        merge_into(&self.w, &o.w, None, None, &mut w);
        Mono { k, l, w }
    }

    /// Monomial with conjugate variables exchanged and `k → −k`.
    pub fn conjugate(&self) -> Mono {
        let mut w: WVec = self.w.iter().map(|&v| conj_var(v)).collect();
        w.sort_unstable();
        Mono { k: self.k.iter().map(|x| -x).collect(), l: self.l.clone(), w }
    }
}

/// Merges two sorted lists, removing one copy of `skip_a` from `a` and one of `skip_b` from `b`.
fn merge_into(a: &[Var], b: &[Var], skip_a: Option<Var>, skip_b: Option<Var>, out: &mut WVec) {
    let (mut sa, mut sb) = (skip_a, skip_b);
    let mut ia = a.iter().copied().filter(move |&v| {
        if Some(v) == sa {
            sa = None;
            false
        } else {
            true
        }
    });
    let mut ib = b.iter().copied().filter(move |&v| {
        if Some(v) == sb {
            sb = None;
            false
        } else {
            true
        }
    });
    let (mut x, mut y) = (ia.next(), ib.next());
    loop {
        match (x, y) {
            (Some(p), Some(q)) => {
                if p <= q {
                    out.push(p);
                    x = ia.next();
                } else {
                    out.push(q);
                    y = ib.next();
                }
            }
            (Some(p), None) => {
                out.push(p);
                x = ia.next();
            }
            (None, Some(q)) => {
                out.push(q);
                y = ib.next();
            }
            (None, None) => break,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    /// Upper bound on `2|l| + |α| + |β|`.
    pub degree_bound: u32,
    /// Upper bound on `|k|` (ℓ¹).
    pub k_bound: u32,
    /// Terms with `|c| < drop_tol · max|c|` are pruned.
    pub drop_tol: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { degree_bound: 4, k_bound: 64, drop_tol: 1e-16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedDomain {
    pub r: f64,
    pub s: f64,
    pub rho: f64,
}

impl WeightedDomain {
    pub fn new(r: f64, s: f64, rho: f64) -> Self {
        assert!(r > 0.0 && s > 0.0 && rho > 0.0, "domain parameters must be positive");
        WeightedDomain { r, s, rho }
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub b: usize,
    pub modes: Arc<ModeTable>,
    pub bounds: Bounds,
    pub terms: FxHashMap<Mono, C64>,
}

impl PartialEq for Series {
    fn eq(&self, o: &Self) -> bool {
        self.b == o.b && self.terms == o.terms
    }
}

impl Series {
    pub fn zero(b: usize, modes: Arc<ModeTable>, bounds: Bounds) -> Self {
        Series { b, modes, bounds, terms: FxHashMap::default() }
    }

    pub fn like(&self) -> Self {
        Series::zero(self.b, self.modes.clone(), self.bounds)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn within_bounds(&self, m: &Mono) -> bool {
        m.degree() <= self.bounds.degree_bound && m.k_norm() <= self.bounds.k_bound
    }

    /// Adds `c · m`; out-of-bound monomials are dropped.
    pub fn add_term(&mut self, m: Mono, c: C64) {
        debug_assert_eq!(m.k.len(), self.b);
        if c == C64::new(0.0, 0.0) || !self.within_bounds(&m) {
            return;
        }
        *self.terms.entry(m).or_insert(C64::new(0.0, 0.0)) += c;
    }

    pub fn coeff(&self, m: &Mono) -> C64 {
        self.terms.get(m).copied().unwrap_or_default()
    }

    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Drops exact zeros and terms below `drop_tol · max|c|`.
    pub fn prune(&mut self) {
        let thr = self.bounds.drop_tol * self.max_abs();
        self.terms.retain(|_, c| c.norm() > thr && c.norm() > 0.0);
    }

    pub fn add_assign(&mut self, o: &Series) {
        self.add_scaled(o, C64::new(1.0, 0.0));
    }

    pub fn add_scaled(&mut self, o: &Series, a: C64) {
        for (m, c) in &o.terms {
            self.add_term(m.clone(), c * a);
        }
    }

    pub fn sub(&self, o: &Series) -> Series {
        let mut out = self.clone();
        out.add_scaled(o, C64::new(-1.0, 0.0));
        out.terms.retain(|_, c| c.norm() > 0.0);
        out
    }

    pub fn scaled(&self, a: C64) -> Series {
        let mut out = self.clone();
        for c in out.terms.values_mut() {
            *c *= a;
        }
        out
    }

    pub fn filter(&self, keep: impl Fn(&Mono, C64) -> bool) -> Series {
        let mut out = self.like();
        out.terms = self.terms.iter().filter(|(m, c)| keep(m, **c)).map(|(m, c)| (m.clone(), *c)).collect();
        out
    }

    /// Product, truncated to bounds.
    pub fn mul(&self, o: &Series) -> Series {
        let mut out = self.like();
        for (m1, c1) in &self.terms {
            for (m2, c2) in &o.terms {
                if m1.degree() + m2.degree() > self.bounds.degree_bound {
                    continue;
                }
                out.add_term(m1.mul(m2), c1 * c2);
            }
        }
        out
    }

    /// Terms sorted by monomial, for deterministic iteration.
    pub fn sorted_terms(&self) -> Vec<(&Mono, &C64)> {
        let mut v: Vec<_> = self.terms.iter().collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    }

    /// Largest coefficient deviation from `o`.
    pub fn max_diff(&self, o: &Series) -> f64 {
        let mut worst: f64 = 0.0;
        for (m, c) in &self.terms {
            worst = worst.max((c - o.coeff(m)).norm());
        }
        for (m, c) in &o.terms {
            if !self.terms.contains_key(m) {
                worst = worst.max(c.norm());
            }
        }
        worst
    }

    /// `F̄`, the complex conjugate function; real Hamiltonians satisfy `F̄ = F`.
    pub fn conjugate(&self) -> Series {
        let mut out = self.like();
        for (m, c) in &self.terms {
            out.terms.insert(m.conjugate(), c.conj());
        }
        out
    }

    /// `(F + F̄)/2`.
    pub fn real_part(&self) -> Series {
        let mut out = self.scaled(C64::new(0.5, 0.0));
        out.add_scaled(&self.conjugate(), C64::new(0.5, 0.0));
        out.terms.retain(|_, c| c.norm() > 0.0);
        out
    }

    fn weight(&self, m: &Mono, d: &WeightedDomain) -> f64 {
        let mut w = (m.k_norm() as f64 * d.r).exp() * d.s.powi(2 * m.l_norm() as i32);
        for &v in &m.w {
            w *= d.s * (-self.modes.norm(var_slot(v)) * d.rho).exp();
        }
        w
    }

    /// Term-wise majorant of the sup norm over `D_ρ(r,s)`.
    pub fn majorant_norm(&self, d: &WeightedDomain) -> f64 {
        self.sorted_terms().iter().fold(0.0, |acc, (m, c)| acc + c.norm() * self.weight(m, d))
    }

    /// Weighted norm of the Hamiltonian vector field,
    /// `‖F_I‖ + s⁻²‖F_θ‖ + s⁻¹ Σ_n (‖F_{w_n}‖ + ‖F_{w̄_n}‖) e^{|n|ρ}`.
    pub fn vector_field_norm(&self, d: &WeightedDomain) -> f64 {
        let mut total = 0.0;
        for (m, c) in self.sorted_terms() {
            total += c.norm() * self.vf_weight(m, d);
        }
        total
    }

    /// Contribution of a unit-coefficient monomial to [`Self::vector_field_norm`].
    pub fn vf_weight(&self, m: &Mono, d: &WeightedDomain) -> f64 {
        let base = self.weight(m, d);
        let s2 = d.s * d.s;
        let mut f = (m.l_norm() as f64) / s2 + (m.k_norm() as f64) / s2;
        let mut last: Option<Var> = None;
        for &v in &m.w {
            if last == Some(v) {
                continue;
            }
            last = Some(v);
            let e = (self.modes.norm(var_slot(v)) * d.rho).exp();
            f += m.mult(v) as f64 * e * e / s2;
        }
        base * f
    }

    /// `{F, G}`, truncated to `self.bounds`.
    pub fn bracket(&self, g: &Series) -> Series {
        bracket_with(self, g, &self.bounds)
    }

    /// `∂F/∂θ_a`.
    pub fn d_theta(&self, a: usize) -> Series {
        let mut out = self.like();
        for (m, c) in &self.terms {
            if m.k[a] != 0 {
                out.terms.insert(m.clone(), c * I * m.k[a] as f64);
            }
        }
        out
    }

    /// `∂F/∂I_a`.
    pub fn d_action(&self, a: usize) -> Series {
        let mut out = self.like();
        for (m, c) in &self.terms {
            if m.l[a] > 0 {
                let mut m2 = m.clone();
                m2.l[a] -= 1;
                *out.terms.entry(m2).or_default() += c * m.l[a] as f64;
            }
        }
        out
    }

    /// `∂F/∂z_v` for a normal variable `v`.
    pub fn d_var(&self, v: Var) -> Series {
        let mut out = self.like();
        for (m, c) in &self.terms {
            let p = m.mult(v);
            if p > 0 {
                let pos = m.w.iter().position(|&x| x == v).unwrap();
                let mut m2 = m.clone();
                m2.w.remove(pos);
                *out.terms.entry(m2).or_default() += c * p as f64;
            }
        }
        out
    }

    /// Value at a complexified point.
    pub fn eval(&self, x: &PhasePoint) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for (m, c) in self.sorted_terms() {
            acc += c * x.mono_value(m);
        }
        acc
    }

    /// Value and full gradient `(∂θ, ∂I, ∂z_v)` at `x`.
    pub fn eval_grad(&self, x: &PhasePoint) -> (C64, PhasePoint) {
        let mut g = PhasePoint::zeros(self.b, x.z.len());
        let mut acc = C64::new(0.0, 0.0);
        for (m, c) in self.sorted_terms() {
            let e = (I * m.k.iter().zip(&x.theta).map(|(k, t)| *t * *k as f64).sum::<C64>()).exp();
            let mut ip = C64::new(1.0, 0.0);
            for (a, &la) in m.l.iter().enumerate() {
                ip *= x.action[a].powu(la as u32);
            }
            let mut wp = C64::new(1.0, 0.0);
            for &v in &m.w {
                wp *= x.z[v as usize];
            }
            let val = c * e * ip * wp;
            acc += val;
            for a in 0..self.b {
                if m.k[a] != 0 {
                    g.theta[a] += val * I * m.k[a] as f64;
                }
                if m.l[a] > 0 {
                    let mut ipa = C64::new(1.0, 0.0);
                    for (q, &lq) in m.l.iter().enumerate() {
                        let p = if q == a { lq - 1 } else { lq };
                        ipa *= x.action[q].powu(p as u32);
                    }
                    g.action[a] += c * e * ipa * wp * m.l[a] as f64;
                }
            }
            for (pos, &v) in m.w.iter().enumerate() {
                if pos > 0 && m.w[pos - 1] == v {
                    continue;
                }
                let mut rest = C64::new(1.0, 0.0);
                let mut skipped = false;
                for &u in &m.w {
                    if u == v && !skipped {
                        skipped = true;
                        continue;
                    }
                    rest *= x.z[u as usize];
                }
                g.z[v as usize] += c * e * ip * rest * m.mult(v) as f64;
            }
        }
        (acc, g)
    }

    /// Hamiltonian vector field `ẋ = {x, F}` at `x`.
    pub fn flow_field(&self, x: &PhasePoint) -> PhasePoint {
        let (_, g) = self.eval_grad(x);
        let mut out = PhasePoint::zeros(self.b, x.z.len());
        for a in 0..self.b {
            out.theta[a] = -g.action[a];
            out.action[a] = g.theta[a];
        }
        for v in 0..x.z.len() {
            out.z[v] = if v % 2 == 0 { I * g.z[v + 1] } else { -I * g.z[v - 1] };
        }
        out
    }
}

/// Bracket with explicit output bounds.
pub fn bracket_with(f: &Series, g: &Series, bounds: &Bounds) -> Series {
    bracket_filtered(f, g, bounds, |_, _| true, |_| true)
}

/// Bracket restricted to term pairs accepted by `pair_ok` and outputs whose normal
/// part is accepted by `out_ok`.
pub fn bracket_filtered(
    f: &Series,
    g: &Series,
    bounds: &Bounds,
    pair_ok: impl Fn(&Mono, &Mono) -> bool,
    out_ok: impl Fn(&WVec) -> bool,
) -> Series {
    bracket_core(f, g, bounds, pair_ok, out_ok, |_, _| true)
}

/// Bracket in which each product `(m, c)` is accumulated only if `keep(m, c)`.
pub fn bracket_pruned(f: &Series, g: &Series, bounds: &Bounds, keep: impl FnMut(&Mono, C64) -> bool) -> Series {
    bracket_core(f, g, bounds, |_, _| true, |_| true, keep)
}

fn bracket_core(
    f: &Series,
    g: &Series,
    bounds: &Bounds,
    pair_ok: impl Fn(&Mono, &Mono) -> bool,
    out_ok: impl Fn(&WVec) -> bool,
    mut keep: impl FnMut(&Mono, C64) -> bool,
) -> Series {
    let b = f.b;
    let mut out = Series::zero(b, f.modes.clone(), *bounds);
    if f.is_empty() || g.is_empty() {
        return out;
    }
    let gterms: Vec<(&Mono, C64)> = {
        let mut v: Vec<_> = g.terms.iter().map(|(m, c)| (m, *c)).collect();
        v.sort_by(|a, b| a.0.cmp(b.0));
        v
    };
    let gdeg: Vec<u32> = gterms.iter().map(|(m, _)| m.degree()).collect();
    let gk: Vec<u32> = gterms.iter().map(|(m, _)| m.k_norm()).collect();
    let mut by_var: FxHashMap<Var, Vec<u32>> = FxHashMap::default();
    let mut by_l: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut by_k: Vec<Vec<u32>> = vec![Vec::new(); b];
    for (idx, (m, _)) in gterms.iter().enumerate() {
        let mut last = None;
        for &v in &m.w {
            if last != Some(v) {
                by_var.entry(v).or_default().push(idx as u32);
                last = Some(v);
            }
        }
        for a in 0..b {
            if m.l[a] > 0 {
                by_l[a].push(idx as u32);
            }
            if m.k[a] != 0 {
                by_k[a].push(idx as u32);
            }
        }
    }
    let thr = bounds.drop_tol * f.max_abs() * g.max_abs();
    let dmax = bounds.degree_bound;
    let kmax = bounds.k_bound;
    let fterms = f.sorted_terms();
    let mut acc: FxHashMap<Mono, C64> = FxHashMap::default();
    let mut push = |m: Mono, c: C64| {
        if keep(&m, c) {
            *acc.entry(m).or_default() += c;
        }
    };
    for (fm, &fc) in fterms {
        let fd = fm.degree();
        let fkn = fm.k_norm();
        let fa = fc.norm();
        if fa == 0.0 {
            continue;
        }
        let ok = |gi: usize| fd + gdeg[gi] <= dmax + 2 && fkn.abs_diff(gk[gi]) <= kmax && fa * gterms[gi].1.norm() > thr;
        let combine_k = |gm: &Mono| -> Option<KVec> {
            let k: KVec = fm.k.iter().zip(&gm.k).map(|(a, b)| a + b).collect();
            if k.iter().map(|x| x.unsigned_abs() as u32).sum::<u32>() <= kmax {
                Some(k)
            } else {
                None
            }
        };
        // Normal part: i(F_z G_z̄ − F_z̄ G_z).
        let mut last = None;
        for &v in &fm.w {
            if last == Some(v) {
                continue;
            }
            last = Some(v);
            let pv = fm.mult(v) as f64;
            let cv = conj_var(v);
            let sign = if var_is_conj(v) { -1.0 } else { 1.0 };
            if let Some(list) = by_var.get(&cv) {
                for &gi in list {
                    let gi = gi as usize;
                    if !ok(gi) {
                        continue;
                    }
                    let (gm, gc) = gterms[gi];
                    if !pair_ok(fm, gm) {
                        continue;
                    }
                    let Some(k) = combine_k(gm) else { continue };
                    let pg = gm.mult(cv) as f64;
                    let l = fm.l.iter().zip(&gm.l).map(|(a, b)| a + b).collect();
                    let mut w = WVec::with_capacity(fm.w.len() + gm.w.len());
                    merge_into(&fm.w, &gm.w, Some(v), Some(cv), &mut w);
                    if !out_ok(&w) {
                        continue;
                    }
                    push(Mono { k, l, w }, I * sign * pv * pg * fc * gc);
                }
            }
        }
        // Tangential part: F_I G_θ − F_θ G_I.
        for a in 0..b {
            if fm.l[a] > 0 {
                for &gi in &by_k[a] {
                    let gi = gi as usize;
                    if !ok(gi) {
                        continue;
                    }
                    let (gm, gc) = gterms[gi];
                    if !pair_ok(fm, gm) {
                        continue;
                    }
                    let Some(k) = combine_k(gm) else { continue };
                    let mut l: LVec = fm.l.iter().zip(&gm.l).map(|(x, y)| x + y).collect();
                    l[a] -= 1;
                    let mut w = WVec::with_capacity(fm.w.len() + gm.w.len());
                    merge_into(&fm.w, &gm.w, None, None, &mut w);
                    if !out_ok(&w) {
                        continue;
                    }
                    push(Mono { k, l, w }, fc * gc * (fm.l[a] as f64) * I * gm.k[a] as f64);
                }
            }
            if fm.k[a] != 0 {
                for &gi in &by_l[a] {
                    let gi = gi as usize;
                    if !ok(gi) {
                        continue;
                    }
                    let (gm, gc) = gterms[gi];
                    if !pair_ok(fm, gm) {
                        continue;
                    }
                    let Some(k) = combine_k(gm) else { continue };
                    let mut l: LVec = fm.l.iter().zip(&gm.l).map(|(x, y)| x + y).collect();
                    l[a] -= 1;
                    let mut w = WVec::with_capacity(fm.w.len() + gm.w.len());
                    merge_into(&fm.w, &gm.w, None, None, &mut w);
                    if !out_ok(&w) {
                        continue;
                    }
                    push(Mono { k, l, w }, -fc * gc * I * (fm.k[a] as f64) * gm.l[a] as f64);
                }
            }
        }
    }
    for (m, c) in acc {
        out.add_term(m, c);
    }
    out.terms.retain(|_, c| c.norm() > 0.0);
    out.prune();
    out
}

/// Result of a truncated Lie series.
#[derive(Clone, Debug)]
pub struct LieResult {
    pub series: Series,
    /// Majorant norm of the first omitted term `ad^{order+1}(H)/(order+1)!`.
    pub remainder_estimate: f64,
}

/// `Σ_{j=0}^{order} ad_F^j(H)/j!` with `ad_F(X) = {X, F}`.
pub fn lie_transform(h: &Series, f: &Series, order: usize, d: &WeightedDomain) -> LieResult {
    let mut total = h.clone();
    let mut cur = h.clone();
    let mut fact = 1.0;
    for j in 1..=order {
        cur = cur.bracket(f);
        fact *= j as f64;
        total.add_scaled(&cur, C64::new(1.0 / fact, 0.0));
        if cur.is_empty() {
            break;
        }
    }
    let next = cur.bracket(f);
    let remainder_estimate = next.majorant_norm(d) / (fact * (order + 1) as f64);
    total.terms.retain(|_, c| c.norm() > 0.0);
    LieResult { series: total, remainder_estimate }
}

/// A point of the complexified phase space; `z[v]` holds the value of variable `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub theta: Vec<C64>,
    pub action: Vec<C64>,
    pub z: Vec<C64>,
}

impl PhasePoint {
    pub fn zeros(b: usize, nvars: usize) -> Self {
        PhasePoint {
            theta: vec![C64::default(); b],
            action: vec![C64::default(); b],
            z: vec![C64::default(); nvars],
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.theta.len() + self.z.len()
    }

    /// Flat coordinates `(θ, I, z)`.
    pub fn to_vec(&self) -> Vec<C64> {
        let mut v = self.theta.clone();
        v.extend_from_slice(&self.action);
        v.extend_from_slice(&self.z);
        v
    }

    pub fn from_vec(b: usize, v: &[C64]) -> Self {
        PhasePoint { theta: v[..b].to_vec(), action: v[b..2 * b].to_vec(), z: v[2 * b..].to_vec() }
    }

    pub fn axpy(&self, a: f64, o: &PhasePoint) -> PhasePoint {
        let f = |x: &[C64], y: &[C64]| x.iter().zip(y).map(|(p, q)| p + q * a).collect::<Vec<_>>();
        PhasePoint { theta: f(&self.theta, &o.theta), action: f(&self.action, &o.action), z: f(&self.z, &o.z) }
    }

    pub fn mono_value(&self, m: &Mono) -> C64 {
        let phase: C64 = m.k.iter().zip(&self.theta).map(|(k, t)| *t * *k as f64).sum();
        let mut v = (I * phase).exp();
        for (a, &la) in m.l.iter().enumerate() {
            if la > 0 {
                v *= self.action[a].powu(la as u32);
            }
        }
        for &u in &m.w {
            v *= self.z[u as usize];
        }
        v
    }
}

/// Poisson matrix `Π_{xy} = {x, y}` in the flat coordinates of [`PhasePoint::to_vec`].
pub fn poisson_matrix(b: usize, nvars: usize) -> Vec<Vec<C64>> {
    let n = 2 * b + nvars;
    let mut p = vec![vec![C64::default(); n]; n];
    for a in 0..b {
        // {θ_a, I_a} = −1, {I_a, θ_a} = 1
        p[a][b + a] = C64::new(-1.0, 0.0);
        p[b + a][a] = C64::new(1.0, 0.0);
    }
    for s in 0..nvars / 2 {
        let (z, zb) = (2 * b + 2 * s, 2 * b + 2 * s + 1);
        p[z][zb] = I;
        p[zb][z] = -I;
    }
    p
}

/// Integrates `ẋ = {x, F}` for unit time with RK4 and returns the endpoint and its Jacobian.
pub fn flow_with_jacobian(f: &Series, x0: &PhasePoint, steps: usize) -> (PhasePoint, Vec<Vec<C64>>) {
    let n = x0.dim();
    let b = f.b;
    let grads: Vec<Series> = (0..n).map(|c| partial(f, b, c)).collect();
    let field_at = |x: &PhasePoint| f.flow_field(x);
    let jac_field = |x: &PhasePoint| -> Vec<Vec<C64>> {
        // J_{ij} = ∂(ẋ_i)/∂x_j, ẋ = Π ∇F
        let pi = poisson_matrix(b, n - 2 * b);
        let mut hess = vec![vec![C64::default(); n]; n];
        for (c, gc) in grads.iter().enumerate() {
            let (_, g) = gc.eval_grad(x);
            let gv = g.to_vec();
            for j in 0..n {
                hess[c][j] = gv[j];
            }
        }
        let mut j = vec![vec![C64::default(); n]; n];
        for i in 0..n {
            for (c, row) in hess.iter().enumerate() {
                let pic = pi[i][c];
                if pic == C64::default() {
                    continue;
                }
                for q in 0..n {
                    j[i][q] += pic * row[q];
                }
            }
        }
        j
    };
    let mut x = x0.clone();
    let mut m: Vec<Vec<C64>> = (0..n).map(|i| (0..n).map(|j| C64::new((i == j) as u8 as f64, 0.0)).collect()).collect();
    let h = 1.0 / steps as f64;
    let matmul = |a: &Vec<Vec<C64>>, b: &Vec<Vec<C64>>| -> Vec<Vec<C64>> {
        let mut c = vec![vec![C64::default(); n]; n];
        for i in 0..n {
            for k in 0..n {
                let aik = a[i][k];
                if aik == C64::default() {
                    continue;
                }
                for j in 0..n {
                    c[i][j] += aik * b[k][j];
                }
            }
        }
        c
    };
    let madd = |a: &Vec<Vec<C64>>, b: &Vec<Vec<C64>>, s: f64| -> Vec<Vec<C64>> {
        a.iter().zip(b).map(|(r, q)| r.iter().zip(q).map(|(x, y)| x + y * s).collect()).collect()
    };
    for _ in 0..steps {
        let k1 = field_at(&x);
        let j1 = matmul(&jac_field(&x), &m);
        let x2 = x.axpy(h / 2.0, &k1);
        let m2 = madd(&m, &j1, h / 2.0);
        let k2 = field_at(&x2);
        let j2 = matmul(&jac_field(&x2), &m2);
        let x3 = x.axpy(h / 2.0, &k2);
        let m3 = madd(&m, &j2, h / 2.0);
        let k3 = field_at(&x3);
        let j3 = matmul(&jac_field(&x3), &m3);
        let x4 = x.axpy(h, &k3);
        let m4 = madd(&m, &j3, h);
        let k4 = field_at(&x4);
        let j4 = matmul(&jac_field(&x4), &m4);
        x = x.axpy(h / 6.0, &k1).axpy(h / 3.0, &k2).axpy(h / 3.0, &k3).axpy(h / 6.0, &k4);
        m = madd(&madd(&madd(&madd(&m, &j1, h / 6.0), &j2, h / 3.0), &j3, h / 3.0), &j4, h / 6.0);
    }
    (x, m)
}

/// `∂F/∂x_c` for flat coordinate index `c`.
fn partial(f: &Series, b: usize, c: usize) -> Series {
    if c < b {
        f.d_theta(c)
    } else if c < 2 * b {
        f.d_action(c - b)
    } else {
        f.d_var((c - 2 * b) as Var)
    }
}

/// Largest entry of `M Π Mᵀ − Π`.
pub fn symplectic_defect(m: &[Vec<C64>], b: usize) -> f64 {
    let n = m.len();
    let pi = poisson_matrix(b, n - 2 * b);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut acc = C64::default();
            for p in 0..n {
                if m[i][p] == C64::default() {
                    continue;
                }
                for q in 0..n {
                    acc += m[i][p] * pi[p][q] * m[j][q];
                }
            }
            worst = worst.max((acc - pi[i][j]).norm());
        }
    }
    worst
}

/// One serialized term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermRecord {
    pub k: Vec<i64>,
    pub l: Vec<u32>,
    pub alpha: BTreeMap<String, u32>,
    pub beta: BTreeMap<String, u32>,
    pub re: f64,
    pub im: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum SeriesError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("site {0} is not in the mode table")]
    UnknownSite(String),
}

impl Series {
    pub fn to_records(&self) -> Vec<TermRecord> {
        self.sorted_terms()
            .into_iter()
            .map(|(m, c)| {
                let mut alpha = BTreeMap::new();
                let mut beta = BTreeMap::new();
                for &v in &m.w {
                    let key = self.modes.site(var_slot(v)).key();
                    let map = if var_is_conj(v) { &mut beta } else { &mut alpha };
                    *map.entry(key).or_insert(0) += 1;
                }
                TermRecord {
                    k: m.k.iter().map(|&x| x as i64).collect(),
                    l: m.l.iter().map(|&x| x as u32).collect(),
                    alpha,
                    beta,
                    re: c.re,
                    im: c.im,
                }
            })
            .collect()
    }

    /// JSON lines, one term per line, sorted by monomial.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in self.to_records() {
            s.push_str(&serde_json::to_string(&r).expect("term serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_json_lines(text: &str, b: usize, modes: Arc<ModeTable>, bounds: Bounds) -> Result<Series, SeriesError> {
        let mut out = Series::zero(b, modes.clone(), bounds);
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: TermRecord =
                serde_json::from_str(line).map_err(|e| SeriesError::Parse { line: ln + 1, msg: e.to_string() })?;
            if r.k.len() != b || r.l.len() != b {
                return Err(SeriesError::Parse { line: ln + 1, msg: format!("expected {b} tangential components") });
            }
            let mut w = WVec::new();
            for (map, conj) in [(&r.alpha, 0u16), (&r.beta, 1u16)] {
                for (key, &p) in map {
                    let site = Site::parse_key(key).ok_or_else(|| SeriesError::UnknownSite(key.clone()))?;
                    let slot = modes.slot(site).ok_or_else(|| SeriesError::UnknownSite(key.clone()))?;
                    for _ in 0..p {
                        w.push((2 * slot) as Var + conj);
                    }
                }
            }
            w.sort_unstable();
            let m = Mono {
                k: r.k.iter().map(|&x| x as i16).collect(),
                l: r.l.iter().map(|&x| x as u8).collect(),
                w,
            };
            out.add_term(m, C64::new(r.re, r.im));
        }
        Ok(out)
    }
}

/// Which quadratic and linear terms enter `R`.
#[derive(Clone, Debug, Default)]
pub struct TruncationShape {
    /// Slots of normal sites belonging to second-type pairs; no `|n ± m|` cutoff applies to them.
    pub l2_slots: rustc_hash::FxHashSet<usize>,
}

/// `R = R₀ + R₁ + R₂`: `|k| ≤ K`, and either `|l| ≤ 1` with no normal variable,
/// or `l = 0` with one or two normal variables. Quadratic terms between plain sites
/// obey `|n+m| ≤ K` (`zz`, `z̄z̄`) and `|n−m| ≤ K` (`zz̄`).
pub fn truncate_r(p: &Series, k_cut: u32, shape: &TruncationShape) -> Series {
    let modes = p.modes.clone();
    p.filter(|m, _| {
        if m.k_norm() > k_cut {
            return false;
        }
        match m.w.len() {
            0 => m.l_norm() <= 1,
            1 => m.l_norm() == 0,
            2 => {
                if m.l_norm() != 0 {
                    return false;
                }
                let (sa, sb) = (var_slot(m.w[0]), var_slot(m.w[1]));
                if shape.l2_slots.contains(&sa) || shape.l2_slots.contains(&sb) {
                    return true;
                }
                let (na, nb) = (modes.site(sa), modes.site(sb));
                let same = var_is_conj(m.w[0]) == var_is_conj(m.w[1]);
                let d = if same { na + nb } else { na - nb };
                (d.norm_sq() as f64) <= (k_cut as f64).powi(2)
            }
            _ => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize) -> Arc<ModeTable> {
        Arc::new(ModeTable::new((0..n as i64).map(|k| Site::new(k + 1, 2 * k)).collect()))
    }

    #[test]
    fn z_zbar_bracket_is_i() {
        let t = table(1);
        let mut z = Series::zero(0, t.clone(), Bounds::default());
        z.add_term(Mono::new(&[], &[], &[0]), C64::new(1.0, 0.0));
        let mut zb = Series::zero(0, t, Bounds::default());
        zb.add_term(Mono::new(&[], &[], &[1]), C64::new(1.0, 0.0));
        let br = z.bracket(&zb);
        assert_eq!(br.len(), 1);
        assert_eq!(br.coeff(&Mono::one(0)), I);
    }

    #[test]
    fn action_angle_bracket() {
        let t = table(0);
        let mut f = Series::zero(1, t.clone(), Bounds::default());
        f.add_term(Mono::new(&[0], &[1], &[]), C64::new(1.0, 0.0));
        let mut g = Series::zero(1, t, Bounds::default());
        g.add_term(Mono::new(&[1], &[0], &[]), C64::new(1.0, 0.0));
        let br = f.bracket(&g);
        assert_eq!(br.coeff(&Mono::new(&[1], &[0], &[])), I);
    }

    #[test]
    fn linear_frequency_bracket() {
        let t = table(0);
        let om = [2.0, -0.5, 3.25];
        let mut h = Series::zero(3, t.clone(), Bounds::default());
        for (a, w) in om.iter().enumerate() {
            let mut l = [0u8; 3];
            l[a] = 1;
            h.add_term(Mono::new(&[0, 0, 0], &l, &[]), C64::new(*w, 0.0));
        }
        let k = [1i16, 2, -1];
        let mut f = Series::zero(3, t, Bounds::default());
        let c = C64::new(0.3, -0.7);
        f.add_term(Mono::new(&k, &[0, 0, 0], &[]), c);
        let kw: f64 = k.iter().zip(om).map(|(a, b)| *a as f64 * b).sum();
        let br = h.bracket(&f);
        assert!((br.coeff(&Mono::new(&k, &[0, 0, 0], &[])) - I * kw * c).norm() < 1e-15);
    }

    #[test]
    fn norm_fixtures() {
        let t = table(3);
        let d = WeightedDomain::new(0.3, 0.1, 0.2);
        let mut f = Series::zero(1, t.clone(), Bounds::default());
        f.add_term(Mono::new(&[2], &[0], &[]), C64::new(3.0, 4.0));
        assert!((f.majorant_norm(&d) - 5.0 * (0.6f64).exp()).abs() < 1e-14);
        let mut g = Series::zero(1, t.clone(), Bounds::default());
        g.add_term(Mono::new(&[0], &[0], &[2]), C64::new(1.0, 0.0));
        let n = t.norm(1);
        assert!((g.majorant_norm(&d) - 0.1 * (-n * 0.2).exp()).abs() < 1e-15);
        let mut a = Series::zero(1, t.clone(), Bounds::default());
        a.add_term(Mono::new(&[0], &[1], &[]), C64::new(1.0, 0.0));
        assert!((a.majorant_norm(&d) - 0.01).abs() < 1e-16);
        assert!((a.vector_field_norm(&d) - 1.0).abs() < 1e-14);
        let mut ww = Series::zero(1, t, Bounds::default());
        ww.add_term(Mono::new(&[0], &[0], &[2, 3]), C64::new(1.0, 0.0));
        assert!((ww.vector_field_norm(&d) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn json_lines_round_trip() {
        let t = table(3);
        let mut f = Series::zero(2, t.clone(), Bounds::default());
        f.add_term(Mono::new(&[1, -2], &[0, 1], &[0, 3, 3]), C64::new(0.25, -1.5));
        f.add_term(Mono::new(&[0, 0], &[0, 0], &[4]), C64::new(1e-3, 0.0));
        let text = f.to_json_lines();
        let g = Series::from_json_lines(&text, 2, t, Bounds::default()).unwrap();
        assert_eq!(f, g);
        assert!(text.lines().next().unwrap().contains("\"alpha\""));
    }

    #[test]
    fn truncation_cutoffs() {
        let t = Arc::new(ModeTable::new(vec![Site::new(0, 3), Site::new(0, -3), Site::new(1, 0)]));
        let mut p = Series::zero(1, t, Bounds::default());
        let one = C64::new(1.0, 0.0);
        p.add_term(Mono::new(&[3], &[0], &[]), one);
        p.add_term(Mono::new(&[1], &[0], &[0, 3]), one); // z_(0,3) z̄_(0,-3): |n−m| = 6
        p.add_term(Mono::new(&[1], &[0], &[0, 2]), one); // z_(0,3) z_(0,-3): |n+m| = 0
        p.add_term(Mono::new(&[0], &[0], &[0, 1, 4]), one);
        let r = truncate_r(&p, 2, &TruncationShape::default());
        assert_eq!(r.len(), 1);
        assert!(r.terms.contains_key(&Mono::new(&[1], &[0], &[0, 2])));
    }
}
