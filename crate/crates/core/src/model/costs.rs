use serde::{Deserialize, Serialize};

use crate::error::{Result, SolverError};

/// Outcome of checking a switching-cost matrix against the standing
/// hypotheses. Mode indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub m: usize,
    /// Entries with `k(i,j) < 0`.
    pub negative: Vec<(usize, usize)>,
    /// Triples with `k(i,j) + k(j,l) < k(i,l)`.
    pub triangle: Vec<(usize, usize, usize)>,
    /// Triples with `i != j`, `j != l` and `k(i,j) + k(j,l) <= k(i,l)`.
    pub strict_triangle: Vec<(usize, usize, usize)>,
}

impl CostReport {
    /// Nonnegativity and the triangle inequality.
    pub fn weak_ok(&self) -> bool {
        self.negative.is_empty() && self.triangle.is_empty()
    }

    /// Nonnegativity and the strict triangle inequality.
    pub fn strict_ok(&self) -> bool {
        self.negative.is_empty() && self.strict_triangle.is_empty()
    }
}

/// Classifies a cost matrix. The input must be square with a zero diagonal.
pub fn validate_costs(costs: &[Vec<f64>]) -> Result<CostReport> {
    let m = costs.len();
    if m == 0 {
        return Err(SolverError::Structure("cost matrix is empty".into()));
    }
    for (i, row) in costs.iter().enumerate() {
        if row.len() != m {
            return Err(SolverError::Structure(format!(
                "cost matrix row {i} has {} entries, expected {m}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SolverError::Structure(format!("cost matrix row {i} is not finite")));
        }
        if row[i] != 0.0 {
            return Err(SolverError::Structure(format!(
                "diagonal entry k({i},{i}) = {} must be zero",
                row[i]
            )));
        }
    }
    let mut report = CostReport { m, negative: vec![], triangle: vec![], strict_triangle: vec![] };
    for i in 0..m {
        for j in 0..m {
            if costs[i][j] < 0.0 {
                report.negative.push((i, j));
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            for l in 0..m {
                let lhs = costs[i][j] + costs[j][l];
                let rhs = costs[i][l];
                if lhs < rhs {
                    report.triangle.push((i, j, l));
                }
                if i != j && j != l && lhs <= rhs {
                    report.strict_triangle.push((i, j, l));
                }
            }
        }
    }
    Ok(report)
}

/// Mode count and switching costs, validated against nonnegativity and the
/// triangle inequality. Strictness is recorded, not required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SwitchingStructure {
    m: usize,
    costs: Vec<f64>,
    strict: bool,
}

impl SwitchingStructure {
    pub fn new(costs: Vec<Vec<f64>>) -> Result<Self> {
        let report = validate_costs(&costs)?;
        if !report.weak_ok() {
            return Err(SolverError::Hypothesis(format!(
                "switching costs violate nonnegativity at {:?} or the triangle inequality at {:?}",
                report.negative, report.triangle
            )));
        }
        let m = report.m;
        Ok(Self { m, costs: costs.into_iter().flatten().collect(), strict: report.strict_ok() })
    }

    /// Same cost `k` for every pair of distinct modes.
    pub fn uniform(m: usize, k: f64) -> Result<Self> {
        let costs = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 0.0 } else { k }).collect())
            .collect();
        Self::new(costs)
    }

    /// Single mode, no switching.
    pub fn single() -> Self {
        Self { m: 1, costs: vec![0.0], strict: true }
    }

    #[inline]
    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn cost(&self, from: usize, to: usize) -> f64 {
        self.costs[from * self.m + to]
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn report(&self) -> CostReport {
        validate_costs(&self.rows()).expect("validated on construction")
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.costs.chunks(self.m).map(|r| r.to_vec()).collect()
    }

    /// `min_{j != i} (y_j + k(i,j))`, or `+inf` when `m == 1`.
    #[inline]
    pub fn switch_floor(&self, y: &[f64], i: usize) -> f64 {
        let mut best = f64::INFINITY;
        for (j, &yj) in y.iter().enumerate() {
            if j != i {
                let v = yj + self.cost(i, j);
                if v < best {
                    best = v;
                }
            }
        }
        best
    }

    /// Membership in the closed domain: `y_i <= y_j + k(i,j) + tol` for all
    /// `i != j`. Returns the verdict together with the worst violation
    /// `max_i (y_i - min_{j != i}(y_j + k(i,j)))`.
    pub fn in_closure(&self, y: &[f64], tol: f64) -> (bool, f64) {
        debug_assert_eq!(y.len(), self.m);
        if self.m == 1 {
            return (true, f64::NEG_INFINITY);
        }
        let worst = (0..self.m)
            .map(|i| y[i] - self.switch_floor(y, i))
            .fold(f64::NEG_INFINITY, f64::max);
        (worst <= tol, worst)
    }

    /// Oblique projection onto the closed domain: the fixed point of
    /// `y_i <- min(y_i, min_{j != i}(y_j + k(i,j)))`, swept in ascending mode
    /// order until nothing changes. Every component only decreases.
    pub fn project(&self, y: &mut [f64]) -> Result<()> {
        let m = self.m;
        if m == 1 {
            return Ok(());
        }
        for _ in 0..=m {
            let mut changed = false;
            for i in 0..m {
                let floor = self.switch_floor(y, i);
                if floor < y[i] {
                    y[i] = floor;
                    changed = true;
                }
            }
            if !changed {
                return Ok(());
            }
        }
        Err(SolverError::Internal(format!(
            "oblique projection did not reach a fixed point within {} sweeps",
            m + 1
        )))
    }

    pub fn projected(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut out = y.to_vec();
        self.project(&mut out)?;
        Ok(out)
    }
}

impl TryFrom<Vec<Vec<f64>>> for SwitchingStructure {
    type Error = SolverError;

    fn try_from(value: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<SwitchingStructure> for Vec<Vec<f64>> {
    fn from(value: SwitchingStructure) -> Self {
        value.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym2(a: f64, b: f64) -> Vec<Vec<f64>> {
        vec![vec![0.0, a], vec![b, 0.0]]
    }

    #[test]
    fn symmetric_positive_is_strict() {
        let r = validate_costs(&sym2(1.0, 1.0)).unwrap();
        assert!(r.weak_ok() && r.strict_ok());
    }

    #[test]
    fn triangle_failure_reports_triple() {
        // k(1,2)=1, k(2,3)=1, k(1,3)=3 in one-based labels.
        let k = vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        let r = validate_costs(&k).unwrap();
        assert!(!r.weak_ok());
        assert_eq!(r.triangle, vec![(0, 1, 2)]);
        assert!(r.strict_triangle.contains(&(0, 1, 2)));
    }

    #[test]
    fn uniform_three_is_strict() {
        let r = SwitchingStructure::uniform(3, 1.0).unwrap().report();
        assert!(r.weak_ok() && r.strict_ok());
    }

    #[test]
    fn zero_costs_break_strictness() {
        let r = validate_costs(&sym2(0.0, 0.0)).unwrap();
        assert!(r.weak_ok());
        assert!(!r.strict_ok());
        assert!(r.strict_triangle.contains(&(0, 1, 0)));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(validate_costs(&[]), Err(SolverError::Structure(_))));
        assert!(matches!(
            validate_costs(&[vec![0.0, 1.0]]),
            Err(SolverError::Structure(_))
        ));
        assert!(matches!(
            validate_costs(&[vec![0.5, 1.0], vec![1.0, 0.0]]),
            Err(SolverError::Structure(_))
        ));
    }

    #[test]
    fn negative_cost_rejected_by_structure() {
        assert!(matches!(
            SwitchingStructure::new(sym2(-1.0, 2.0)),
            Err(SolverError::Hypothesis(_))
        ));
    }

    #[test]
    fn membership_examples() {
        let s = SwitchingStructure::uniform(2, 1.0).unwrap();
        assert_eq!(s.in_closure(&[0.0, 0.0], 0.0), (true, -1.0));
        assert_eq!(s.in_closure(&[2.0, 0.0], 0.0), (false, 1.0));
        assert_eq!(s.in_closure(&[1.0, 0.0], 0.0), (true, 0.0));
    }

    #[test]
    fn projection_examples() {
        let s = SwitchingStructure::uniform(2, 1.0).unwrap();
        assert_eq!(s.projected(&[5.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(s.projected(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let s3 = SwitchingStructure::uniform(3, 1.0).unwrap();
        assert_eq!(s3.projected(&[10.0, 5.0, 0.0]).unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn single_mode_projection_is_identity() {
        let s = SwitchingStructure::single();
        assert_eq!(s.projected(&[3.5]).unwrap(), vec![3.5]);
        assert!(s.in_closure(&[1e300], 0.0).0);
    }

    #[test]
    fn serde_roundtrip_validates() {
        let s: SwitchingStructure = serde_json_like(&[[0.0, 0.5], [0.5, 0.0]]);
        assert_eq!(s.cost(0, 1), 0.5);
        let bad: std::result::Result<SwitchingStructure, _> =
            SwitchingStructure::try_from(vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]);
        assert!(bad.is_err());
    }

    fn serde_json_like(rows: &[[f64; 2]]) -> SwitchingStructure {
        SwitchingStructure::try_from(rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }
}
