use std::sync::Arc;

use kamdesk::hamiltonian_algebra::{Bounds, Mono, ModeTable, Series, C64};
use kamdesk::homological_solver::{kron_det_identity, kron_sum};
use kamdesk::lattice_resonance::{
    block_partition, line_decomposition, resonance_locus, LineDecomposition, ResonanceLocus, ResonantKind, Site,
};
use proptest::prelude::*;

fn table() -> Arc<ModeTable> {
    Arc::new(ModeTable::new(vec![Site::new(2, 0), Site::new(0, 3)]))
}

fn bounds() -> Bounds {
    Bounds { degree_bound: 12, k_bound: 12, drop_tol: 0.0 }
}

fn mono() -> impl Strategy<Value = Mono> {
    (
        prop::collection::vec(-2i16..=2, 2),
        prop::collection::vec(0u8..=1, 2),
        prop::collection::vec(0u16..4, 0..=2),
    )
        .prop_map(|(k, l, mut w)| {
            w.sort();
            Mono::new(&k, &l, &w)
        })
}

fn series() -> impl Strategy<Value = Series> {
    prop::collection::vec((mono(), -1.0f64..1.0, -1.0f64..1.0), 1..5).prop_map(|ts| {
        let mut s = Series::zero(2, table(), bounds());
        for (m, a, b) in ts {
            s.add_term(m, C64::new(a, b));
        }
        s
    })
}

fn site() -> impl Strategy<Value = Site> {
    (-30i64..=30, -30i64..=30).prop_map(|(a, b)| Site::new(a, b))
}

fn c2() -> impl Strategy<Value = [[C64; 2]; 2]> {
    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 4)
        .prop_map(|v| [[C64::new(v[0].0, v[0].1), C64::new(v[1].0, v[1].1)], [C64::new(v[2].0, v[2].1), C64::new(v[3].0, v[3].1)]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bracket_antisymmetric(f in series(), g in series()) {
        let fg = f.bracket(&g);
        let gf = g.bracket(&f);
        prop_assert!(fg.max_diff(&gf.scaled(C64::new(-1.0, 0.0))) <= 1e-12);
    }

    #[test]
    fn bracket_jacobi(f in series(), g in series(), h in series()) {
        let mut j = f.bracket(&g.bracket(&h));
        j.add_assign(&g.bracket(&h.bracket(&f)));
        j.add_assign(&h.bracket(&f.bracket(&g)));
        prop_assert!(j.max_abs() <= 1e-11);
    }

    #[test]
    fn bracket_leibniz(f in series(), g in series(), h in series()) {
        let lhs = f.bracket(&g.mul(&h));
        let mut rhs = f.bracket(&g).mul(&h);
        rhs.add_assign(&g.mul(&f.bracket(&h)));
        prop_assert!(lhs.max_diff(&rhs) <= 1e-11);
    }

    #[test]
    fn locus_points_resonate(i in site(), j in site(), n in site()) {
        prop_assume!(i != j);
        for kind in [ResonantKind::FirstType, ResonantKind::SecondType] {
            let locus = resonance_locus(i, j, kind).unwrap();
            if locus.contains(n) {
                let m = match kind {
                    ResonantKind::FirstType => n + i - j,
                    ResonantKind::SecondType => i + j - n,
                };
                let d = match kind {
                    ResonantKind::FirstType => n.norm_sq() - m.norm_sq() + i.norm_sq() - j.norm_sq(),
                    ResonantKind::SecondType => n.norm_sq() + m.norm_sq() - i.norm_sq() - j.norm_sq(),
                };
                prop_assert_eq!(d, 0);
            }
            if let ResonanceLocus::Line { a, b, .. } = locus {
                prop_assert!(a > 0 || (a == 0 && b > 0));
            }
        }
    }

    #[test]
    fn blocks_partition_idempotent(pts in prop::collection::vec(site(), 0..30), delta in 0i64..20) {
        let blocks = block_partition(&pts, delta);
        let mut all: Vec<Site> = blocks.iter().flat_map(|b| b.members.clone()).collect();
        all.sort();
        let mut uniq = pts.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(&all, &uniq);
        for b in &blocks {
            prop_assert!(b.members.iter().all(|s| s.norm_sq() == b.norm_sq));
            prop_assert_eq!(block_partition(&b.members, delta).len(), 1);
        }
    }

    #[test]
    fn line_decomposition_reconstructs(n in site(), d in (-3i64..=3, -3i64..=3)) {
        let np = n - Site::new(d.0, d.1);
        let k = 5;
        if let LineDecomposition::Decomposed { n0, n0_prime, c, t } = line_decomposition(n, np, k).unwrap() {
            prop_assert_eq!(n0 + c.scale(t), n);
            prop_assert_eq!(n0_prime + c.scale(t), np);
            prop_assert_eq!(c.dot(n - np), 0);
        }
    }

    #[test]
    fn kron_det_matches_dense(a in c2(), b in c2(), plus in any::<bool>()) {
        let sign = if plus { 1.0 } else { -1.0 };
        let closed = kron_det_identity(a, b, sign);
        let dense = kron_sum(a, b, sign).determinant();
        prop_assert!((closed - dense).norm() <= 1e-10 * (1.0 + dense.norm()));
    }
}
