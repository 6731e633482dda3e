use obliq_core::lattice::{solve_reflected, LatticeModel, LatticeSpec};
use obliq_core::penalty::solve_penalized;
use obliq_core::*;
use proptest::prelude::*;

/// Costs satisfying the triangle inequality: metric closure of random
/// nonnegative entries plus a constant offset.
fn costs(m: usize) -> impl Strategy<Value = SwitchingStructure> {
    (prop::collection::vec(0.0f64..2.0, m * m), 0.0f64..0.3).prop_map(move |(raw, base)| {
        let mut k = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    k[i][j] = raw[i * m + j];
                }
            }
        }
        for l in 0..m {
            for i in 0..m {
                for j in 0..m {
                    if k[i][l] + k[l][j] < k[i][j] {
                        k[i][j] = k[i][l] + k[l][j];
                    }
                }
            }
        }
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v += base;
                }
            }
        }
        SwitchingStructure::new(k).unwrap()
    })
}

fn with_point(m: usize) -> impl Strategy<Value = (SwitchingStructure, Vec<f64>)> {
    (costs(m), prop::collection::vec(-3.0f64..3.0, m))
}

fn any_case() -> impl Strategy<Value = (SwitchingStructure, Vec<f64>)> {
    (2usize..=4).prop_flat_map(with_point)
}

/// Minimum over every simple chain starting at `i` of the chain cost plus the
/// value at its end.
fn chain_minimum(s: &SwitchingStructure, y: &[f64], i: usize) -> f64 {
    fn walk(s: &SwitchingStructure, y: &[f64], at: usize, cost: f64, seen: &mut Vec<bool>, best: &mut f64) {
        *best = best.min(y[at] + cost);
        for next in 0..y.len() {
            if !seen[next] {
                seen[next] = true;
                walk(s, y, next, cost + s.cost(at, next), seen, best);
                seen[next] = false;
            }
        }
    }
    let mut seen = vec![false; y.len()];
    seen[i] = true;
    let mut best = f64::INFINITY;
    walk(s, y, i, 0.0, &mut seen, &mut best);
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn projection_matches_chain_minimum((s, y) in any_case()) {
        let p = s.projected(&y).unwrap();
        for i in 0..y.len() {
            prop_assert!((p[i] - chain_minimum(&s, &y, i)).abs() <= 1e-12);
        }
    }

    #[test]
    fn projection_is_idempotent((s, y) in any_case()) {
        let p = s.projected(&y).unwrap();
        prop_assert_eq!(s.projected(&p).unwrap(), p.clone());
        prop_assert!(s.in_closure(&p, 0.0).0);
        prop_assert!(p.iter().zip(&y).all(|(a, b)| a <= b));
    }

    #[test]
    fn projection_fixes_exactly_the_domain((s, y) in any_case()) {
        let p = s.projected(&y).unwrap();
        prop_assert_eq!(p == y, s.in_closure(&y, 0.0).0);
    }

    #[test]
    fn projection_is_monotone((s, y) in any_case(), bump in prop::collection::vec(0.0f64..1.0, 4)) {
        let z: Vec<f64> = y.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let py = s.projected(&y).unwrap();
        let pz = s.projected(&z).unwrap();
        prop_assert!(py.iter().zip(&pz).all(|(a, b)| a <= b));
    }

    #[test]
    fn separation_is_a_lower_bound_on_face_distances(
        s in (2usize..=3).prop_flat_map(costs),
        weights in prop::collection::vec(0.01f64..1.0, 64),
    ) {
        prop_assume!(s.is_strict());
        let geom = DomainGeometry::new(&s).unwrap();
        let Separation::Separated(c) = geom.separation_constant() else {
            return Err(TestCaseError::fail("strict costs must be separated"));
        };
        let m = s.m();
        let sample = |face: &[Vec<f64>], w: &[f64]| -> Vec<f64> {
            let wt = |q: usize| w[q % w.len()];
            let total: f64 = (0..face.len()).map(wt).sum();
            (0..m)
                .map(|k| face.iter().enumerate().map(|(q, v)| wt(q) * v[k]).sum::<f64>() / total)
                .collect()
        };
        let mut sampled = f64::INFINITY;
        for i in 0..m {
            for j in (0..m).filter(|j| *j != i) {
                for l in (0..m).filter(|l| *l != j) {
                    let a = geom.face_vertices(i, j);
                    let b = geom.face_vertices(j, l);
                    for chunk in weights.chunks(8) {
                        let pa = sample(&a, chunk);
                        let pb = sample(&b, &chunk[chunk.len() / 2..]);
                        let d = pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                        sampled = sampled.min(d);
                    }
                    for p in &a {
                        for q in &b {
                            let d = p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                            sampled = sampled.min(d);
                        }
                    }
                }
            }
        }
        prop_assert!(c > 0.0);
        prop_assert!(sampled >= c - 1e-12, "sampled {} below constant {}", sampled, c);
    }

    #[test]
    fn reflected_and_penalized_stay_ordered(
        s in costs(2),
        c0 in -2.0f64..2.0,
        c1 in -2.0f64..2.0,
        n in 1.0f64..200.0,
    ) {
        let p = ProblemSpec {
            costs: s,
            generator: GeneratorSpec::Constant { c: vec![c0, c1] },
            terminal: TerminalSpec::Constant { values: vec![0.0, 0.0] },
            state: None,
            horizon: 1.0,
            dim: 1,
        }
        .build()
        .unwrap();
        let lat = LatticeModel::new(&LatticeSpec::new(1.0, 8, 1)).unwrap();
        let refl = solve_reflected(&p, &lat).unwrap();
        prop_assert!(refl.max_violation() <= 0.0);
        prop_assert_eq!(refl.skorokhod_residual(), 0.0);
        let lo = solve_penalized(&p, &lat, n).unwrap();
        let hi = solve_penalized(&p, &lat, 2.0 * n).unwrap();
        for ((a, b), r) in lo.y.iter().flatten().zip(hi.y.iter().flatten()).zip(refl.y.iter().flatten()) {
            prop_assert!(a - b >= -1e-9);
            prop_assert!(b - r >= -1e-9);
        }
    }
}

#[test]
fn two_mode_separation_is_exact() {
    let s = SwitchingStructure::new(vec![vec![0.0, 0.3], vec![0.5, 0.0]]).unwrap();
    let c = separation_constant(&s).unwrap().value().unwrap();
    assert!((c - 2f64.sqrt() * 0.4).abs() < 1e-12);
}
