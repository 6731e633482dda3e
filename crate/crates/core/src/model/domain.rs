//! Geometry of the closed domain `{y : y_i <= y_j + k(i,j)}`.
//!
//! The domain is invariant under translation along `(1, ..., 1)`, and its
//! section by the hyperplane `sum(y) = 0` is a bounded polytope. Faces
//! `B_{i,j} = {y_i = y_j + k(i,j)}` are faces of that polytope, so distances
//! between them are computed exactly from vertex lists: the distance between
//! two polytopes is the norm of the minimum-norm point of the convex hull of
//! pairwise vertex differences.

use serde::{Deserialize, Serialize};

use super::costs::SwitchingStructure;
use crate::error::{Result, SolverError};
use crate::numeric::dense_solve;

const VERTEX_TOL: f64 = 1e-10;
/// Vertex enumeration is combinatorial in the number of modes.
pub const MAX_GEOMETRY_MODES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Separation {
    /// Minimum distance between `B_{i,j}` and `B_{j,l}` over `i != j`, `j != l`.
    Separated(f64),
    NotStrictlySeparated,
}

impl Separation {
    pub fn value(&self) -> Option<f64> {
        match self {
            Separation::Separated(c) => Some(*c),
            Separation::NotStrictlySeparated => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DomainGeometry {
    structure: SwitchingStructure,
    /// Vertices of the zero-sum section, each of length `m`.
    vertices: Vec<Vec<f64>>,
}

impl DomainGeometry {
    pub fn new(structure: &SwitchingStructure) -> Result<Self> {
        let m = structure.m();
        if m > MAX_GEOMETRY_MODES {
            return Err(SolverError::Capacity {
                what: "domain vertex enumeration (modes)".into(),
                needed: m as u128,
                cap: MAX_GEOMETRY_MODES as u128,
            });
        }
        let vertices = if m == 1 { vec![vec![0.0]] } else { enumerate_vertices(structure) };
        Ok(Self { structure: structure.clone(), vertices })
    }

    pub fn structure(&self) -> &SwitchingStructure {
        &self.structure
    }

    pub fn contains(&self, y: &[f64], tol: f64) -> bool {
        self.structure.in_closure(y, tol).0
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    /// Vertices of the face `B_{i,j}` in the zero-sum section.
    pub fn face_vertices(&self, i: usize, j: usize) -> Vec<Vec<f64>> {
        let k = self.structure.cost(i, j);
        self.vertices
            .iter()
            .filter(|v| (v[i] - v[j] - k).abs() <= VERTEX_TOL * (1.0 + k.abs()))
            .cloned()
            .collect()
    }

    /// Euclidean distance between faces `B_{i,j}` and `B_{j2,l}`.
    pub fn face_distance(&self, (i, j): (usize, usize), (j2, l): (usize, usize)) -> f64 {
        let a = self.face_vertices(i, j);
        let b = self.face_vertices(j2, l);
        polytope_distance(&a, &b)
    }

    /// Separation constant `c = min dist(B_{i,j}, B_{j,l})`. Requires the strict
    /// triangle inequality; with one mode there are no faces and `c = inf`.
    pub fn separation_constant(&self) -> Separation {
        if !self.structure.is_strict() {
            return Separation::NotStrictlySeparated;
        }
        let m = self.structure.m();
        let mut best = f64::INFINITY;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                for l in 0..m {
                    if l == j {
                        continue;
                    }
                    best = best.min(self.face_distance((i, j), (j, l)));
                }
            }
        }
        if best > 0.0 {
            Separation::Separated(best)
        } else {
            Separation::NotStrictlySeparated
        }
    }
}

/// Convenience wrapper over [`DomainGeometry::separation_constant`].
pub fn separation_constant(structure: &SwitchingStructure) -> Result<Separation> {
    Ok(DomainGeometry::new(structure)?.separation_constant())
}

fn enumerate_vertices(s: &SwitchingStructure) -> Vec<Vec<f64>> {
    let m = s.m();
    let constraints: Vec<(usize, usize)> =
        (0..m).flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut pick = vec![0usize; m - 1];
    for_each_combination(constraints.len(), m - 1, &mut pick, 0, 0, &mut |chosen| {
        let mut a = vec![0.0; m * m];
        let mut b = vec![0.0; m];
        for (row, &ci) in chosen.iter().enumerate() {
            let (p, q) = constraints[ci];
            a[row * m + p] = 1.0;
            a[row * m + q] = -1.0;
            b[row] = s.cost(p, q);
        }
        for col in 0..m {
            a[(m - 1) * m + col] = 1.0;
        }
        b[m - 1] = 0.0;
        let Some(y) = dense_solve(&mut a, &mut b) else { return };
        let scale = 1.0 + y.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !s.in_closure(&y, VERTEX_TOL * scale).0 {
            return;
        }
        if out.iter().any(|v| v.iter().zip(&y).all(|(p, q)| (p - q).abs() <= VERTEX_TOL * scale)) {
            return;
        }
        out.push(y);
    });
    out
}

fn for_each_combination(
    n: usize,
    k: usize,
    pick: &mut Vec<usize>,
    start: usize,
    depth: usize,
    f: &mut dyn FnMut(&[usize]),
) {
    if depth == k {
        f(pick);
        return;
    }
    for c in start..n {
        pick[depth] = c;
        for_each_combination(n, k, pick, c + 1, depth + 1, f);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distance between `conv(a)` and `conv(b)`.
pub fn polytope_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let diffs: Vec<Vec<f64>> = a
        .iter()
        .flat_map(|p| b.iter().map(move |q| p.iter().zip(q).map(|(x, y)| x - y).collect()))
        .collect();
    min_norm_point(&diffs).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Wolfe's algorithm for the minimum-norm point of a convex hull.
pub fn min_norm_point(points: &[Vec<f64>]) -> Vec<f64> {
    assert!(!points.is_empty());
    let scale = points.iter().map(|p| dot(p, p)).fold(0.0f64, f64::max).max(1e-300);
    let eps = 1e-14;
    let first = (0..points.len())
        .min_by(|&a, &b| dot(&points[a], &points[a]).total_cmp(&dot(&points[b], &points[b])))
        .unwrap();
    let mut active = vec![first];
    let mut weights = vec![1.0];
    let mut x = points[first].clone();
    for _major in 0..10 * points.len() + 10 {
        let (best, best_val) = (0..points.len())
            .map(|i| (i, dot(&x, &points[i])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        if dot(&x, &x) - best_val <= eps * scale || active.contains(&best) {
            break;
        }
        active.push(best);
        weights.push(0.0);
        loop {
            let Some(mu) = affine_min_norm(points, &active) else {
                break;
            };
            if mu.iter().all(|&v| v > eps) {
                weights = mu;
                break;
            }
            let mut theta = 1.0f64;
            for (w, u) in weights.iter().zip(&mu) {
                if *u <= eps && w - u > 0.0 {
                    theta = theta.min(w / (w - u));
                }
            }
            for (w, u) in weights.iter_mut().zip(&mu) {
                *w += theta * (u - *w);
            }
            let mut keep_a = Vec::new();
            let mut keep_w = Vec::new();
            for (idx, w) in active.iter().zip(&weights) {
                if *w > eps {
                    keep_a.push(*idx);
                    keep_w.push(*w);
                }
            }
            active = keep_a;
            let total: f64 = keep_w.iter().sum();
            weights = keep_w.into_iter().map(|w| w / total).collect();
        }
        x = combine(points, &active, &weights);
    }
    x
}

fn combine(points: &[Vec<f64>], active: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; points[0].len()];
    for (&i, &w) in active.iter().zip(weights) {
        for (xk, pk) in x.iter_mut().zip(&points[i]) {
            *xk += w * pk;
        }
    }
    x
}

/// Affine-hull minimum-norm weights (sum to one, unconstrained sign).
fn affine_min_norm(points: &[Vec<f64>], active: &[usize]) -> Option<Vec<f64>> {
    let s = active.len();
    let n = s + 1;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for r in 0..s {
        for c in 0..s {
            a[r * n + c] = dot(&points[active[r]], &points[active[c]]);
        }
        a[r * n + s] = 1.0;
        a[s * n + r] = 1.0;
    }
    b[s] = 1.0;
    let sol = dense_solve(&mut a, &mut b)?;
    Some(sol[..s].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_mode_separation_closed_form() {
        let s = SwitchingStructure::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let c = separation_constant(&s).unwrap().value().unwrap();
        assert!((c - 2f64.sqrt()).abs() < 1e-12, "{c}");
        let s = SwitchingStructure::new(vec![vec![0.0, 0.3], vec![0.7, 0.0]]).unwrap();
        let c = separation_constant(&s).unwrap().value().unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12, "{c}");
    }

    #[test]
    fn zero_costs_not_separated() {
        let s = SwitchingStructure::new(vec![vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(separation_constant(&s).unwrap(), Separation::NotStrictlySeparated);
    }

    #[test]
    fn uniform_three_mode_value() {
        // Face pair B_{1,2}, B_{2,3} in the uniform unit-cost case: closest
        // points (1,0,0) and (1,1,0) up to translation; the mean-free
        // difference is (0,-1,0) + 1/3 (1,1,1), of norm sqrt(2/3).
        let s = SwitchingStructure::uniform(3, 1.0).unwrap();
        let c = separation_constant(&s).unwrap().value().unwrap();
        assert!((c - (2.0f64 / 3.0).sqrt()).abs() < 1e-12, "{c}");
    }

    #[test]
    fn vertices_of_two_mode_section() {
        let s = SwitchingStructure::uniform(2, 1.0).unwrap();
        let g = DomainGeometry::new(&s).unwrap();
        assert_eq!(g.vertices().len(), 2);
        for v in g.vertices() {
            assert!((v[0] + v[1]).abs() < 1e-14);
            assert!(((v[0] - v[1]).abs() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn min_norm_point_of_segment() {
        let p = min_norm_point(&[vec![1.0, -1.0], vec![1.0, 1.0]]);
        assert!((p[0] - 1.0).abs() < 1e-14 && p[1].abs() < 1e-14);
        let q = min_norm_point(&[vec![2.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]]);
        assert!((q[0] - 1.0).abs() < 1e-12 && (q[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_modes_is_capacity_error() {
        let s = SwitchingStructure::uniform(7, 1.0).unwrap();
        assert!(matches!(DomainGeometry::new(&s), Err(SolverError::Capacity { .. })));
    }
}
