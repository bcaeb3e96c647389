//! Exact integer geometry of resonances on the lattice Z².
//!
//! First-type loci are lines through `j` perpendicular to `j - i`, second-type
//! loci are Thales circles on the diameter `ij`. Both are stored as integer
//! conics `A|n|² + ⟨L, n⟩ + C = 0`, so every intersection is decided in exact
//! integer arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_integer::Integer;
use num_rational::Ratio;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A lattice point `(n1, n2)`. Serialized as a JSON array `[n1, n2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i64; 2]", into = "[i64; 2]")]
pub struct Site {
    pub n1: i64,
    pub n2: i64,
}

impl From<[i64; 2]> for Site {
    fn from(a: [i64; 2]) -> Self {
        Site { n1: a[0], n2: a[1] }
    }
}

impl From<Site> for [i64; 2] {
    fn from(s: Site) -> Self {
        [s.n1, s.n2]
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.n1, self.n2)
    }
}

impl Site {
    pub const fn new(n1: i64, n2: i64) -> Self {
        Site { n1, n2 }
    }

    pub fn norm_sq(self) -> i64 {
        self.n1 * self.n1 + self.n2 * self.n2
    }

    pub fn norm(self) -> f64 {
        (self.norm_sq() as f64).sqrt()
    }

    pub fn dot(self, o: Site) -> i64 {
        self.n1 * o.n1 + self.n2 * o.n2
    }

    pub fn scale(self, t: i64) -> Site {
        Site::new(self.n1 * t, self.n2 * t)
    }

    /// The key used in series serialization, `"n1,n2"`.
    pub fn key(self) -> String {
        format!("{},{}", self.n1, self.n2)
    }

    pub fn parse_key(s: &str) -> Option<Site> {
        let (a, b) = s.split_once(',')?;
        Some(Site::new(a.trim().parse().ok()?, b.trim().parse().ok()?))
    }
}

impl std::ops::Add for Site {
    type Output = Site;
    fn add(self, o: Site) -> Site {
        Site::new(self.n1 + o.n1, self.n2 + o.n2)
    }
}

impl std::ops::Sub for Site {
    type Output = Site;
    fn sub(self, o: Site) -> Site {
        Site::new(self.n1 - o.n1, self.n2 - o.n2)
    }
}

impl std::ops::Neg for Site {
    type Output = Site;
    fn neg(self) -> Site {
        Site::new(-self.n1, -self.n2)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatticeError {
    #[error("points are not pairwise distinct: {0:?}")]
    DuplicatePoints(Vec<Site>),
    #[error("resonance locus needs i != j, got {0}")]
    EqualSites(Site),
    #[error("tangential set needs at least 2 distinct sites, got {0}")]
    TooFewSites(usize),
    #[error("site {0} belongs to the tangential set")]
    SiteInSet(Site),
    #[error("site {n} carries {} distinct resonant triplets", .triplets.len())]
    MultipleTriplets { n: Site, triplets: Vec<ResonantPair> },
    #[error("no admissible set found after {attempts} attempts")]
    Exhausted { attempts: usize },
    #[error("candidate pool of {pool} sites cannot hold {b} distinct sites")]
    PoolTooSmall { pool: usize, b: usize },
    #[error("|n - n'|² = {dist_sq} exceeds K² = {k_sq}")]
    TooFar { dist_sq: i64, k_sq: i64 },
}

/// The ordered tangential sites `S = {i_1, ..., i_b}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TangentialSet {
    pub sites: Vec<Site>,
}

impl TangentialSet {
    pub fn new(sites: Vec<Site>) -> Result<Self, LatticeError> {
        if sites.len() < 2 {
            return Err(LatticeError::TooFewSites(sites.len()));
        }
        let uniq: BTreeSet<Site> = sites.iter().copied().collect();
        if uniq.len() != sites.len() {
            return Err(LatticeError::DuplicatePoints(sites));
        }
        Ok(TangentialSet { sites })
    }

    pub fn b(&self) -> usize {
        self.sites.len()
    }

    pub fn contains(&self, n: Site) -> bool {
        self.sites.contains(&n)
    }

    pub fn index_of(&self, n: Site) -> Option<usize> {
        self.sites.iter().position(|&s| s == n)
    }

    pub fn max_norm(&self) -> f64 {
        self.sites.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResonantKind {
    FirstType,
    SecondType,
}

/// A resonant quadruple: `n, m` normal, `i, j` tangential.
///
/// FirstType: `n - m + i - j = 0`, `|n|² - |m|² + |i|² - |j|² = 0`.
/// SecondType: `n + m - i - j = 0`, `|n|² + |m|² - |i|² - |j|² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResonantPair {
    pub kind: ResonantKind,
    pub n: Site,
    pub m: Site,
    pub i: Site,
    pub j: Site,
}

impl ResonantPair {
    /// Re-checks the two defining equations in integer arithmetic.
    pub fn satisfies_equations(&self) -> bool {
        let (n, m, i, j) = (self.n, self.m, self.i, self.j);
        match self.kind {
            ResonantKind::FirstType => {
                n - m + i - j == Site::new(0, 0)
                    && n.norm_sq() - m.norm_sq() + i.norm_sq() - j.norm_sq() == 0
            }
            ResonantKind::SecondType => {
                n + m - i - j == Site::new(0, 0)
                    && n.norm_sq() + m.norm_sq() - i.norm_sq() - j.norm_sq() == 0
            }
        }
    }

    /// The same pair seen from the partner site.
    pub fn flipped(&self) -> ResonantPair {
        ResonantPair { kind: self.kind, n: self.m, m: self.n, i: self.j, j: self.i }
    }
}

/// Resonance locus in exact arithmetic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResonanceLocus {
    /// `a n1 + b n2 = c`, normalized with gcd 1 and a positive leading coefficient.
    Line { a: i64, b: i64, c: i64 },
    Circle {
        center: (Ratio<i64>, Ratio<i64>),
        r2: Ratio<i64>,
    },
}

impl ResonanceLocus {
    pub fn contains(&self, n: Site) -> bool {
        match self {
            ResonanceLocus::Line { a, b, c } => a * n.n1 + b * n.n2 == *c,
            ResonanceLocus::Circle { center, r2 } => {
                let dx = Ratio::from_integer(n.n1) - center.0;
                let dy = Ratio::from_integer(n.n2) - center.1;
                dx * dx + dy * dy == *r2
            }
        }
    }
}

/// Integer conic `a2 |n|² + l1 n1 + l2 n2 + c0 = 0` with `a2 ∈ {0, 1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Conic {
    a2: i64,
    l1: i64,
    l2: i64,
    c0: i64,
}

impl Conic {
    fn eval(&self, n: Site) -> i64 {
        self.a2 * n.norm_sq() + self.l1 * n.n1 + self.l2 * n.n2 + self.c0
    }
}

/// First-type locus of `(i, j)`: `⟨n - j, j - i⟩ = 0`.
fn first_type_conic(i: Site, j: Site) -> Conic {
    let d = j - i;
    Conic {
        a2: 0,
        l1: d.n1,
        l2: d.n2,
        c0: -j.dot(d),
    }
}

/// Second-type locus of `{i, j}`: `⟨n - i, n - j⟩ = 0`.
fn second_type_conic(i: Site, j: Site) -> Conic {
    let s = i + j;
    Conic {
        a2: 1,
        l1: -s.n1,
        l2: -s.n2,
        c0: i.dot(j),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Meet {
    Points(Vec<Site>),
    Coincident,
}

fn ext_gcd(a: i128, b: i128) -> (i128, i128, i128) {
    if b == 0 {
        (a.signum() * a, a.signum(), 0)
    } else {
        let (g, x, y) = ext_gcd(b, a.rem_euclid(b));
        // b*x + (a mod b)*y = g, a mod b = a - b*floor(a/b)
        (g, y, x - a.div_euclid(b) * y)
    }
}

pub(crate) fn isqrt_i128(v: i128) -> Option<i128> {
    if v < 0 {
        return None;
    }
    let mut r = (v as f64).sqrt() as i128;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    Some(r)
}

fn line_line(p: Conic, q: Conic) -> Meet {
    // l1 x + l2 y = -c0
    let (a1, b1, c1) = (p.l1 as i128, p.l2 as i128, -(p.c0 as i128));
    let (a2, b2, c2) = (q.l1 as i128, q.l2 as i128, -(q.c0 as i128));
    let det = a1 * b2 - a2 * b1;
    if det == 0 {
        if a1 * c2 == a2 * c1 && b1 * c2 == b2 * c1 {
            return Meet::Coincident;
        }
        return Meet::Points(vec![]);
    }
    let xn = c1 * b2 - c2 * b1;
    let yn = a1 * c2 - a2 * c1;
    if xn % det != 0 || yn % det != 0 {
        return Meet::Points(vec![]);
    }
    Meet::Points(vec![Site::new((xn / det) as i64, (yn / det) as i64)])
}

fn line_circle(line: Conic, circ: Conic) -> Vec<Site> {
    let (a, b, c) = (line.l1 as i128, line.l2 as i128, -(line.c0 as i128));
    if a == 0 && b == 0 {
        return vec![];
    }
    let (g, u, v) = ext_gcd(a, b);
    if c % g != 0 {
        return vec![];
    }
    let (mut x0, mut y0) = (u * (c / g), v * (c / g));
    let (d1, d2) = (b / g, -a / g);
    let dd = d1 * d1 + d2 * d2;
    let shift = -(x0 * d1 + y0 * d2).div_euclid(dd);
    x0 += shift * d1;
    y0 += shift * d2;
    let (l1, l2, c0) = (circ.l1 as i128, circ.l2 as i128, circ.c0 as i128);
    let qa = dd;
    let qb = 2 * (x0 * d1 + y0 * d2) + l1 * d1 + l2 * d2;
    let qc = x0 * x0 + y0 * y0 + l1 * x0 + l2 * y0 + c0;
    let disc = qb * qb - 4 * qa * qc;
    let Some(s) = isqrt_i128(disc) else {
        return vec![];
    };
    if s * s != disc {
        return vec![];
    }
    let mut out = Vec::new();
    for num in [-qb - s, -qb + s] {
        if num % (2 * qa) == 0 {
            let t = num / (2 * qa);
            let p = Site::new((x0 + t * d1) as i64, (y0 + t * d2) as i64);
            if !out.contains(&p) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn meet(p: Conic, q: Conic) -> Meet {
    match (p.a2, q.a2) {
        (0, 0) => line_line(p, q),
        (0, _) => Meet::Points(line_circle(p, q)),
        (_, 0) => Meet::Points(line_circle(q, p)),
        _ => {
            let radical = Conic {
                a2: 0,
                l1: p.l1 - q.l1,
                l2: p.l2 - q.l2,
                c0: p.c0 - q.c0,
            };
            if radical.l1 == 0 && radical.l2 == 0 {
                if radical.c0 == 0 {
                    Meet::Coincident
                } else {
                    Meet::Points(vec![])
                }
            } else {
                Meet::Points(line_circle(radical, p))
            }
        }
    }
}

/// All `(m1, m2) ∈ Z²` with `m1² + m2² = r2`, sorted lexicographically.
pub fn circle_sites(r2: u64) -> Vec<Site> {
    let r2 = r2 as i128;
    let bound = isqrt_i128(r2).unwrap_or(0);
    let mut out = Vec::new();
    for m1 in -bound..=bound {
        let rest = r2 - m1 * m1;
        if let Some(s) = isqrt_i128(rest) {
            if s * s == rest {
                out.push(Site::new(m1 as i64, -(s as i64)));
                if s != 0 {
                    out.push(Site::new(m1 as i64, s as i64));
                }
            }
        }
    }
    out.sort();
    out
}

/// True iff some vertex sees the other two at a right angle.
pub fn right_angle_triple(a: Site, b: Site, c: Site) -> Result<bool, LatticeError> {
    if a == b || b == c || a == c {
        return Err(LatticeError::DuplicatePoints(vec![a, b, c]));
    }
    Ok((a - b).dot(c - b) == 0 || (b - a).dot(c - a) == 0 || (a - c).dot(b - c) == 0)
}

pub fn resonance_locus(i: Site, j: Site, kind: ResonantKind) -> Result<ResonanceLocus, LatticeError> {
    if i == j {
        return Err(LatticeError::EqualSites(i));
    }
    Ok(match kind {
        ResonantKind::FirstType => {
            let d = i - j;
            let (mut a, mut b) = (-2 * d.n1, -2 * d.n2);
            let mut c = d.norm_sq() - i.norm_sq() + j.norm_sq();
            let g = a.gcd(&b).gcd(&c);
            a /= g;
            b /= g;
            c /= g;
            if a < 0 || (a == 0 && b < 0) {
                a = -a;
                b = -b;
                c = -c;
            }
            ResonanceLocus::Line { a, b, c }
        }
        ResonantKind::SecondType => {
            let s = i + j;
            ResonanceLocus::Circle {
                center: (Ratio::new(s.n1, 2), Ratio::new(s.n2, 2)),
                r2: Ratio::new((i - j).norm_sq(), 4),
            }
        }
    })
}

/// Partner `m` of `n` on the locus of `(i, j)`.
pub fn partner(n: Site, i: Site, j: Site, kind: ResonantKind) -> Site {
    match kind {
        ResonantKind::FirstType => n + i - j,
        ResonantKind::SecondType => i + j - n,
    }
}

/// All triplets of `n` with partner outside `S`, one per distinct (kind, partner).
fn triplets_of(n: Site, s: &TangentialSet) -> Vec<ResonantPair> {
    let mut seen: BTreeMap<(ResonantKind, Site), ResonantPair> = BTreeMap::new();
    let sites = &s.sites;
    for (a, &i) in sites.iter().enumerate() {
        for (c, &j) in sites.iter().enumerate() {
            if a == c {
                continue;
            }
            let m = n + i - j;
            if !s.contains(m) && first_type_conic(i, j).eval(n) == 0 {
                let p = ResonantPair { kind: ResonantKind::FirstType, n, m, i, j };
                seen.entry((p.kind, m)).or_insert(p);
            }
            if a < c {
                let m = i + j - n;
                if !s.contains(m) && second_type_conic(i, j).eval(n) == 0 {
                    let p = ResonantPair { kind: ResonantKind::SecondType, n, m, i, j };
                    seen.entry((p.kind, m)).or_insert(p);
                }
            }
        }
    }
    seen.into_values().collect()
}

/// The unique resonant pair through `n`, if any.
pub fn classify_site(n: Site, s: &TangentialSet) -> Result<Option<ResonantPair>, LatticeError> {
    if s.contains(n) {
        return Err(LatticeError::SiteInSet(n));
    }
    let t = triplets_of(n, s);
    match t.len() {
        0 => Ok(None),
        1 => Ok(Some(t[0])),
        _ => Err(LatticeError::MultipleTriplets { n, triplets: t }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Admissible,
    Violation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Witness {
    /// Violated condition, 1 to 4.
    pub condition: u8,
    /// Violating normal site; absent for condition 1 and for coincident loci.
    pub n: Option<Site>,
    /// Tangential sites involved.
    pub sites: Vec<Site>,
    pub triplets: Vec<ResonantPair>,
    /// Two distinct pairs share a whole locus.
    pub coincident: bool,
}

impl Witness {
    /// Re-checks the witness against the defining equations.
    pub fn recheck(&self, s: &TangentialSet) -> bool {
        match self.condition {
            1 => {
                self.sites.len() == 3
                    && self.sites.iter().all(|x| s.contains(*x))
                    && right_angle_triple(self.sites[0], self.sites[1], self.sites[2]).unwrap_or(false)
            }
            2..=4 => {
                if self.triplets.len() < 2 || !self.triplets.iter().all(|t| t.satisfies_equations()) {
                    return false;
                }
                let kinds: BTreeSet<ResonantKind> = self.triplets.iter().map(|t| t.kind).collect();
                let n_ok = self.triplets.iter().all(|t| !s.contains(t.n) && !s.contains(t.m));
                let kind_ok = match self.condition {
                    2 => kinds == BTreeSet::from([ResonantKind::FirstType]),
                    3 => kinds == BTreeSet::from([ResonantKind::SecondType]),
                    _ => kinds.len() == 2,
                };
                let same_n = self.triplets.iter().all(|t| t.n == self.triplets[0].n);
                n_ok && kind_ok && (same_n || self.coincident)
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub verdict: Verdict,
    pub witness: Option<Witness>,
    #[serde(rename = "bound")]
    pub search_bound_used: i64,
    /// Every violated condition found by the exact reduction.
    pub violated: Vec<u8>,
    /// Lowest violated condition found by the bounded brute-force scan.
    pub brute_force_condition: Option<u8>,
    pub brute_force_agrees: bool,
}

fn condition1(s: &TangentialSet) -> Option<Witness> {
    let v = &s.sites;
    for a in 0..v.len() {
        for b in a + 1..v.len() {
            for c in b + 1..v.len() {
                if right_angle_triple(v[a], v[b], v[c]).unwrap_or(false) {
                    return Some(Witness {
                        condition: 1,
                        n: None,
                        sites: vec![v[a], v[b], v[c]],
                        triplets: vec![],
                        coincident: false,
                    });
                }
            }
        }
    }
    None
}

struct Locus {
    kind: ResonantKind,
    i: Site,
    j: Site,
    conic: Conic,
}

fn loci(s: &TangentialSet) -> Vec<Locus> {
    let mut out = Vec::new();
    let v = &s.sites;
    for a in 0..v.len() {
        for c in 0..v.len() {
            if a != c {
                out.push(Locus {
                    kind: ResonantKind::FirstType,
                    i: v[a],
                    j: v[c],
                    conic: first_type_conic(v[a], v[c]),
                });
            }
        }
    }
    for a in 0..v.len() {
        for c in a + 1..v.len() {
            out.push(Locus {
                kind: ResonantKind::SecondType,
                i: v[a],
                j: v[c],
                conic: second_type_conic(v[a], v[c]),
            });
        }
    }
    out
}

fn condition_of(p: ResonantKind, q: ResonantKind) -> u8 {
    match (p, q) {
        (ResonantKind::FirstType, ResonantKind::FirstType) => 2,
        (ResonantKind::SecondType, ResonantKind::SecondType) => 3,
        _ => 4,
    }
}

/// Exact verification of conditions 1-4 through pairwise locus intersections.
fn exact_violations(s: &TangentialSet) -> BTreeMap<u8, Witness> {
    let mut found: BTreeMap<u8, Witness> = BTreeMap::new();
    if let Some(w) = condition1(s) {
        found.insert(1, w);
    }
    let ls = loci(s);
    for p in 0..ls.len() {
        for q in p + 1..ls.len() {
            let (lp, lq) = (&ls[p], &ls[q]);
            let cond = condition_of(lp.kind, lq.kind);
            if found.contains_key(&cond) {
                continue;
            }
            match meet(lp.conic, lq.conic) {
                Meet::Coincident => {
                    // Coincident loci give distinct triplets only when the partners differ.
                    let probe = lp.j;
                    let mp = partner(probe, lp.i, lp.j, lp.kind);
                    let mq = partner(probe, lq.i, lq.j, lq.kind);
                    if mp != mq {
                        let tp = ResonantPair { kind: lp.kind, n: probe, m: mp, i: lp.i, j: lp.j };
                        let tq = ResonantPair { kind: lq.kind, n: probe, m: mq, i: lq.i, j: lq.j };
                        found.insert(
                            cond,
                            Witness {
                                condition: cond,
                                n: None,
                                sites: vec![lp.i, lp.j, lq.i, lq.j],
                                triplets: vec![tp, tq],
                                coincident: true,
                            },
                        );
                    }
                }
                Meet::Points(pts) => {
                    for n in pts {
                        if s.contains(n) {
                            continue;
                        }
                        let mp = partner(n, lp.i, lp.j, lp.kind);
                        let mq = partner(n, lq.i, lq.j, lq.kind);
                        if s.contains(mp) || s.contains(mq) {
                            continue;
                        }
                        if lp.kind == lq.kind && mp == mq {
                            continue;
                        }
                        let tp = ResonantPair { kind: lp.kind, n, m: mp, i: lp.i, j: lp.j };
                        let tq = ResonantPair { kind: lq.kind, n, m: mq, i: lq.i, j: lq.j };
                        found.insert(
                            cond,
                            Witness {
                                condition: cond,
                                n: Some(n),
                                sites: vec![lp.i, lp.j, lq.i, lq.j],
                                triplets: vec![tp, tq],
                                coincident: false,
                            },
                        );
                        break;
                    }
                }
            }
        }
    }
    found
}

/// Violated conditions found by scanning every `n` with `|n| <= bound`.
pub fn brute_force_violations(s: &TangentialSet, bound: i64) -> BTreeMap<u8, Witness> {
    let mut found: BTreeMap<u8, Witness> = BTreeMap::new();
    if let Some(w) = condition1(s) {
        found.insert(1, w);
    }
    let b2 = bound * bound;
    for n1 in -bound..=bound {
        for n2 in -bound..=bound {
            let n = Site::new(n1, n2);
            if n.norm_sq() > b2 || s.contains(n) {
                continue;
            }
            let t = triplets_of(n, s);
            if t.len() < 2 {
                continue;
            }
            let first: Vec<_> = t.iter().filter(|p| p.kind == ResonantKind::FirstType).copied().collect();
            let second: Vec<_> = t.iter().filter(|p| p.kind == ResonantKind::SecondType).copied().collect();
            let mut record = |cond: u8, trip: Vec<ResonantPair>| {
                found.entry(cond).or_insert_with(|| Witness {
                    condition: cond,
                    n: Some(n),
                    sites: trip.iter().flat_map(|p| [p.i, p.j]).collect(),
                    triplets: trip,
                    coincident: false,
                });
            };
            if first.len() >= 2 {
                record(2, first[..2].to_vec());
            }
            if second.len() >= 2 {
                record(3, second[..2].to_vec());
            }
            if !first.is_empty() && !second.is_empty() {
                record(4, vec![first[0], second[0]]);
            }
        }
    }
    found
}

/// Decides conditions 1-4 exactly and cross-checks with a scan over `|n| <= check_bound`.
pub fn verify_admissible(s: &TangentialSet, check_bound: i64) -> Result<AdmissibilityReport, LatticeError> {
    if s.b() < 2 {
        return Err(LatticeError::TooFewSites(s.b()));
    }
    let exact = exact_violations(s);
    let brute = brute_force_violations(s, check_bound);
    let witness = exact.values().next().cloned();
    let brute_first = brute.keys().next().copied();
    let exact_first = witness.as_ref().map(|w| w.condition);
    Ok(AdmissibilityReport {
        verdict: if witness.is_some() { Verdict::Violation } else { Verdict::Admissible },
        witness,
        search_bound_used: check_bound,
        violated: exact.keys().copied().collect(),
        brute_force_condition: brute_first,
        brute_force_agrees: brute_first == exact_first,
    })
}

/// Configuration for [`search_admissible_with`].
#[derive(Clone, Copy, Debug)]
pub struct SearchConfig {
    pub max_attempts: usize,
    pub check_bound: i64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_attempts: 10_000, check_bound: 60 }
    }
}

/// Sites with `|n| <= bound`, sorted.
pub fn disk_sites(bound: i64) -> Vec<Site> {
    let mut out = Vec::new();
    for n1 in -bound..=bound {
        for n2 in -bound..=bound {
            let n = Site::new(n1, n2);
            if n.norm_sq() <= bound * bound {
                out.push(n);
            }
        }
    }
    out
}

/// Uniformly random set of `b` distinct sites with `|site| <= site_bound`.
pub fn random_candidate(b: usize, site_bound: i64, rng: &mut ChaCha8Rng) -> Result<TangentialSet, LatticeError> {
    let pool = disk_sites(site_bound);
    if pool.len() < b {
        return Err(LatticeError::PoolTooSmall { pool: pool.len(), b });
    }
    let idx = sample(rng, pool.len(), b);
    TangentialSet::new(idx.iter().map(|k| pool[k]).collect())
}

pub fn search_admissible(b: usize, site_bound: i64, seed: u64) -> Result<(TangentialSet, AdmissibilityReport), LatticeError> {
    search_admissible_with(b, site_bound, seed, SearchConfig::default())
}

/// Random search for an admissible set, deterministic in `seed`.
pub fn search_admissible_with(
    b: usize,
    site_bound: i64,
    seed: u64,
    cfg: SearchConfig,
) -> Result<(TangentialSet, AdmissibilityReport), LatticeError> {
    if b < 2 {
        return Err(LatticeError::TooFewSites(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let s = random_candidate(b, site_bound, &mut rng)?;
        let rep = verify_admissible(&s, cfg.check_bound.max(site_bound))?;
        if rep.verdict == Verdict::Admissible {
            return Ok((s, rep));
        }
    }
    Err(LatticeError::Exhausted { attempts: cfg.max_attempts })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub norm_sq: i64,
    pub members: Vec<Site>,
}

/// Transitive closure of `|a|² = |b|²`, `|a - b| <= delta`.
pub fn block_partition(sites: &[Site], delta: i64) -> Vec<Block> {
    let uniq: Vec<Site> = sites.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut by_norm: BTreeMap<i64, Vec<Site>> = BTreeMap::new();
    for s in &uniq {
        by_norm.entry(s.norm_sq()).or_default().push(*s);
    }
    let mut out = Vec::new();
    let d2 = delta * delta;
    for (norm_sq, group) in by_norm {
        let mut parent: Vec<usize> = (0..group.len()).collect();
        fn find(p: &mut Vec<usize>, x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let nx = p[y];
                p[y] = r;
                y = nx;
            }
            r
        }
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                if (group[a] - group[b]).norm_sq() <= d2 {
                    let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
            }
        }
        let mut classes: BTreeMap<usize, Vec<Site>> = BTreeMap::new();
        for a in 0..group.len() {
            let r = find(&mut parent, a);
            classes.entry(r).or_default().push(group[a]);
        }
        for (_, members) in classes {
            out.push(Block { norm_sq, members });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub delta: i64,
    pub scan_bound: i64,
    /// `Δ^{1/3}`.
    pub radius: f64,
    /// Largest `#{b : |b| = |a|, |a - b| <= Δ^{1/3}}` over `Δ < |a| <= scan_bound` (b = a counted).
    pub max_near_cluster: usize,
    pub counterexample: Option<(Site, Vec<Site>)>,
    pub sites_scanned: u64,
    /// Largest number of lattice points on one circle `|a|² = N` with `|a| <= Δ`.
    pub max_circle_count: usize,
    /// Circles `|a| >= threshold` whose point count exceeds `e^{log R / log log R}`.
    pub circle_bound_exceedances: usize,
    pub circle_bound_threshold: f64,
}

/// Offsets `d ≠ 0` with `|d| <= radius`.
fn offsets_within(radius: f64) -> Vec<Site> {
    let r = radius.floor() as i64;
    let mut out = Vec::new();
    for d1 in -r..=r {
        for d2 in -r..=r {
            let d = Site::new(d1, d2);
            if d != Site::new(0, 0) && (d.norm_sq() as f64) <= radius * radius + 1e-9 {
                out.push(d);
            }
        }
    }
    out
}

/// Counts equal-norm neighbours of every `a` with `Δ < |a| <= scan_bound`.
///
/// For a row `a1`, `|a + d| = |a|` reads `2 a2 d2 = -(|d|² + 2 a1 d1)`, so each offset
/// selects at most one `a2` (or the whole row when `d2 = 0`). Every site of the disk is
/// covered exactly.
pub fn cluster_cardinalities(delta: i64, scan_bound: i64) -> ClusterReport {
    cluster_cardinalities_with(delta, scan_bound, 1e3)
}

pub fn cluster_cardinalities_with(delta: i64, scan_bound: i64, circle_threshold: f64) -> ClusterReport {
    let radius = (delta as f64).cbrt();
    let offs = offsets_within(radius);
    let (lo2, hi2) = (delta * delta, scan_bound * scan_bound);
    let mut max_near = 1usize;
    let mut counter: Option<(Site, Vec<Site>)> = None;
    let mut scanned = 0u64;
    let mut hits: BTreeMap<i64, Vec<Site>> = BTreeMap::new();
    for a1 in -scan_bound..=scan_bound {
        let rem = hi2 - a1 * a1;
        let a2max = isqrt_i128(rem as i128).unwrap_or(0) as i64;
        let row_len = 2 * a2max + 1;
        let inner = lo2 - a1 * a1;
        let excluded = if inner >= 0 { 2 * (isqrt_i128(inner as i128).unwrap_or(0) as i64) + 1 } else { 0 };
        scanned += (row_len - excluded).max(0) as u64;
        hits.clear();
        let mut whole_row: Vec<Site> = Vec::new();
        for &d in &offs {
            let rhs = -(d.norm_sq() + 2 * a1 * d.n1);
            if d.n2 == 0 {
                if rhs == 0 {
                    whole_row.push(d);
                }
            } else if rhs % (2 * d.n2) == 0 {
                let a2 = rhs / (2 * d.n2);
                hits.entry(a2).or_default().push(d);
            }
        }
        let consider = |a2: i64, ds: &mut Vec<Site>, max_near: &mut usize, counter: &mut Option<(Site, Vec<Site>)>| {
            let a = Site::new(a1, a2);
            let n2 = a.norm_sq();
            if n2 <= lo2 || n2 > hi2 {
                return;
            }
            let size = 1 + ds.len();
            if size > *max_near {
                *max_near = size;
            }
            if size > 2 && counter.is_none() {
                *counter = Some((a, ds.iter().map(|&d| a + d).collect()));
            }
        };
        if whole_row.is_empty() {
            let keys: Vec<i64> = hits.keys().copied().collect();
            for a2 in keys {
                let mut ds = hits[&a2].clone();
                consider(a2, &mut ds, &mut max_near, &mut counter);
            }
        } else {
            for a2 in -a2max..=a2max {
                let mut ds = whole_row.clone();
                if let Some(h) = hits.get(&a2) {
                    ds.extend(h.iter().copied());
                }
                consider(a2, &mut ds, &mut max_near, &mut counter);
            }
        }
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for a1 in -delta..=delta {
        for a2 in -delta..=delta {
            let n = a1 * a1 + a2 * a2;
            if n <= lo2 {
                *counts.entry(n).or_default() += 1;
            }
        }
    }
    let max_circle_count = counts.values().copied().max().unwrap_or(0);
    let exceed = counts
        .iter()
        .filter(|(&n, &c)| {
            let r = (n as f64).sqrt();
            r >= circle_threshold && r > std::f64::consts::E && (c as f64) > (r.ln() / r.ln().ln()).exp()
        })
        .count();
    ClusterReport {
        delta,
        scan_bound,
        radius,
        max_near_cluster: max_near,
        counterexample: counter,
        sites_scanned: scanned,
        max_circle_count,
        circle_bound_exceedances: exceed,
        circle_bound_threshold: circle_threshold,
    }
}

/// Direct per-site count for `Δ < |a| <= scan_bound`; used to cross-check the row solver.
pub fn cluster_cardinalities_naive(delta: i64, scan_bound: i64) -> usize {
    let offs = offsets_within((delta as f64).cbrt());
    let (lo2, hi2) = (delta * delta, scan_bound * scan_bound);
    let mut best = 1;
    for a1 in -scan_bound..=scan_bound {
        for a2 in -scan_bound..=scan_bound {
            let a = Site::new(a1, a2);
            let n = a.norm_sq();
            if n <= lo2 || n > hi2 {
                continue;
            }
            let c = 1 + offs.iter().filter(|&&d| (a + d).norm_sq() == n).count();
            best = best.max(c);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LineDecomposition {
    LargeDivisor,
    Decomposed { n0: Site, n0_prime: Site, c: Site, t: i64 },
}

/// Writes `n = n0 + t c`, `n' = n0' + t c` with `c ⊥ n - n'` and small `n0, n0'`.
pub fn line_decomposition(n: Site, n_prime: Site, k: i64) -> Result<LineDecomposition, LatticeError> {
    let d = n - n_prime;
    if d.norm_sq() > k * k {
        return Err(LatticeError::TooFar { dist_sq: d.norm_sq(), k_sq: k * k });
    }
    if d == Site::new(0, 0) {
        return Ok(LineDecomposition::Decomposed { n0: n, n0_prime: n_prime, c: Site::new(1, 0), t: 0 });
    }
    if d.dot(n_prime).abs() > k * k {
        return Ok(LineDecomposition::LargeDivisor);
    }
    let c = Site::new(-d.n2, d.n1);
    let t = n_prime.dot(c).div_euclid(c.norm_sq());
    let n0_prime = n_prime - c.scale(t);
    Ok(LineDecomposition::Decomposed { n0: n0_prime + d, n0_prime, c, t })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[(i64, i64)]) -> TangentialSet {
        TangentialSet::new(v.iter().map(|&(a, b)| Site::new(a, b)).collect()).unwrap()
    }

    #[test]
    fn circle_examples() {
        assert_eq!(circle_sites(0), vec![Site::new(0, 0)]);
        assert!(circle_sites(3).is_empty());
        let c = circle_sites(25);
        assert_eq!(c.len(), 12);
        for p in [(3, 4), (-3, 4), (4, -3), (5, 0), (0, -5)] {
            assert!(c.contains(&Site::new(p.0, p.1)));
        }
        let mut sorted = c.clone();
        sorted.sort();
        assert_eq!(sorted, c);
    }

    #[test]
    fn right_angle_examples() {
        let p = |a, b| Site::new(a, b);
        assert!(right_angle_triple(p(0, 0), p(1, 0), p(0, 1)).unwrap());
        assert!(!right_angle_triple(p(0, 0), p(1, 0), p(2, 0)).unwrap());
        assert!(right_angle_triple(p(0, 0), p(2, 1), p(1, 3)).unwrap());
        assert!(right_angle_triple(p(0, 0), p(0, 0), p(1, 3)).is_err());
    }

    #[test]
    fn locus_examples() {
        let (i, j) = (Site::new(1, 0), Site::new(0, 1));
        let line = resonance_locus(i, j, ResonantKind::FirstType).unwrap();
        assert!(line.contains(Site::new(0, 1)));
        assert!(line.contains(Site::new(-1, 0)));
        assert!(!line.contains(Site::new(0, 0)));
        let circ = resonance_locus(i, j, ResonantKind::SecondType).unwrap();
        let half = Ratio::new(1, 2);
        assert_eq!(circ, ResonanceLocus::Circle { center: (half, half), r2: half });
        for p in [(0, 0), (1, 1), (1, 0), (0, 1)] {
            assert!(circ.contains(Site::new(p.0, p.1)));
        }
        let sym = resonance_locus(Site::new(1, 0), Site::new(-1, 0), ResonantKind::SecondType).unwrap();
        assert_eq!(sym, ResonanceLocus::Circle { center: (Ratio::from_integer(0), Ratio::from_integer(0)), r2: Ratio::from_integer(1) });
        assert!(resonance_locus(i, i, ResonantKind::FirstType).is_err());
    }

    #[test]
    fn classify_examples() {
        let set = s(&[(1, 0), (0, 1), (5, 7)]);
        let p = classify_site(Site::new(0, 0), &set).unwrap().unwrap();
        assert_eq!(p.kind, ResonantKind::SecondType);
        assert_eq!(p.m, Site::new(1, 1));
        assert!(p.satisfies_equations());
        assert_eq!(classify_site(Site::new(40, -31), &s(&[(1, 2), (3, 1)])).unwrap(), None);
        assert!(classify_site(Site::new(1, 0), &set).is_err());
    }

    #[test]
    fn multiple_triplets_reported() {
        // Two first-type lines through n = (2, 2) from different pairs.
        let set = s(&[(1, 2), (3, 1), (0, -3)]);
        let mut found = None;
        for n in disk_sites(20) {
            if set.contains(n) {
                continue;
            }
            if let Err(LatticeError::MultipleTriplets { n, triplets }) = classify_site(n, &set) {
                found = Some((n, triplets));
                break;
            }
        }
        let (n, triplets) = found.expect("crossing loci give an integer point");
        assert!(triplets.len() >= 2);
        assert!(triplets.iter().all(|t| t.n == n && t.satisfies_equations()));
    }

    #[test]
    fn admissibility_examples() {
        let rep = verify_admissible(&s(&[(0, 0), (1, 0), (0, 1)]), 10).unwrap();
        assert_eq!(rep.verdict, Verdict::Violation);
        assert_eq!(rep.witness.as_ref().unwrap().condition, 1);
        let set = s(&[(0, 0), (1, 0)]);
        let rep = verify_admissible(&set, 30).unwrap();
        assert!(rep.brute_force_agrees);
        if let Some(w) = &rep.witness {
            assert!(w.recheck(&set));
        }
        let (found, rep) = search_admissible(4, 10, 7).unwrap();
        assert_eq!(rep.verdict, Verdict::Admissible);
        assert_eq!(verify_admissible(&found, 60).unwrap().verdict, Verdict::Admissible);
        assert!(brute_force_violations(&found, 60).is_empty());
        let (pair, _) = search_admissible(2, 5, 1).unwrap();
        assert_eq!(pair.b(), 2);
        assert_eq!(search_admissible(4, 10, 7).unwrap().0, found);
        assert!(matches!(
            search_admissible_with(3, 1, 0, SearchConfig { max_attempts: 50, check_bound: 5 }),
            Err(LatticeError::Exhausted { attempts: 50 })
        ));
    }

    #[test]
    fn block_examples() {
        let p = |a, b| Site::new(a, b);
        let sites = vec![p(3, 4), p(4, 3), p(5, 0)];
        assert_eq!(block_partition(&sites, 0).len(), 3);
        let blocks = block_partition(&sites, 2);
        assert_eq!(blocks.len(), 2);
        assert!(blocks.iter().any(|b| b.members == vec![p(3, 4), p(4, 3)]));
        assert!(blocks.iter().any(|b| b.members == vec![p(5, 0)]));
        let four = block_partition(&[p(3, 4), p(4, 3), p(5, 0), p(0, 5)], 4);
        // (4,3)-(5,0) is √10 ≤ 4 and (3,4)-(0,5) is √10 ≤ 4: one chain.
        assert_eq!(four.len(), 1);
        assert_eq!(four[0].members.len(), 4);
    }

    #[test]
    fn cluster_small_scan() {
        let r = cluster_cardinalities(10, 100);
        assert!(r.max_near_cluster <= 2);
        assert!(r.counterexample.is_none());
        assert_eq!(cluster_cardinalities(0, 20).max_near_cluster, 1);
    }

    #[test]
    fn line_decomposition_examples() {
        let p = |a, b| Site::new(a, b);
        assert_eq!(
            line_decomposition(p(100, 0), p(100, 1), 1).unwrap(),
            LineDecomposition::Decomposed { n0: p(0, 0), n0_prime: p(0, 1), c: p(1, 0), t: 100 }
        );
        assert_eq!(
            line_decomposition(p(5, 5), p(5, 5), 1).unwrap(),
            LineDecomposition::Decomposed { n0: p(5, 5), n0_prime: p(5, 5), c: p(1, 0), t: 0 }
        );
        assert_eq!(line_decomposition(p(3, 0), p(2, 0), 1).unwrap(), LineDecomposition::LargeDivisor);
        assert!(line_decomposition(p(0, 0), p(3, 0), 2).is_err());
    }
}
