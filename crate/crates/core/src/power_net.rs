//! Network cases, center-of-inertia coordinates and equilibrium solvers.
//!
//! Units throughout: angles in rad, frequency deviations in rad/s, power in
//! per-unit. `base_freq` (Hz) is only used to convert at the I/O boundary.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::Controller;
use crate::error::{invariant, Error, Result};

/// A line of the (Kron-reduced) network, stored once with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub b: f64,
}

/// On-disk layout of a case file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    pub n: usize,
    #[serde(rename = "M")]
    pub inertia: Vec<f64>,
    #[serde(rename = "D")]
    pub damping: Vec<f64>,
    #[serde(rename = "B")]
    pub susceptance: Vec<Vec<f64>>,
    pub p_m: Vec<f64>,
    /// Defaults to `-u_max` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_min: Option<Vec<f64>>,
    pub u_max: Vec<f64>,
    /// Per-bus resource rating the bounds were drawn from (informational).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<Vec<f64>>,
    pub base_freq: f64,
}

/// A validated swing-equation network. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub name: String,
    pub n: usize,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    /// Dense row-major susceptance matrix with a zero diagonal.
    pub susceptance: Vec<Vec<f64>>,
    pub p_m: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub rating: Option<Vec<f64>>,
    pub base_freq: f64,
    edges: Vec<Edge>,
}

impl NetworkCase {
    pub fn from_file(file: CaseFile) -> Result<Self> {
        let n = file.n;
        if n == 0 {
            return Err(invariant("n", 0, "bus count must be at least 1"));
        }
        check_len("M", &file.inertia, n)?;
        check_len("D", &file.damping, n)?;
        check_len("p_m", &file.p_m, n)?;
        check_len("u_max", &file.u_max, n)?;
        if file.susceptance.len() != n {
            return Err(invariant("B", "rows", format!("expected {n} rows, found {}", file.susceptance.len())));
        }
        for (i, row) in file.susceptance.iter().enumerate() {
            if row.len() != n {
                return Err(invariant("B", i, format!("expected {n} columns, found {}", row.len())));
            }
        }
        let u_min = match file.u_min {
            Some(v) => {
                check_len("u_min", &v, n)?;
                v
            }
            None => file.u_max.iter().map(|u| -u).collect(),
        };
        if let Some(r) = &file.rating {
            check_len("rating", r, n)?;
        }

        for i in 0..n {
            let m = file.inertia[i];
            if !(m.is_finite() && m > 0.0) {
                return Err(invariant("M", i, format!("inertia must be > 0, got {m}")));
            }
            let d = file.damping[i];
            if !(d.is_finite() && d > 0.0) {
                return Err(invariant("D", i, format!("damping must be > 0, got {d}")));
            }
            if !file.p_m[i].is_finite() {
                return Err(invariant("p_m", i, "non-finite injection"));
            }
            let (lo, hi) = (u_min[i], file.u_max[i]);
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(invariant("u_min", i, "non-finite actuation bound"));
            }
            if lo > 0.0 {
                return Err(invariant("u_min", i, format!("lower bound {lo} must be <= 0")));
            }
            if hi < 0.0 {
                return Err(invariant("u_max", i, format!("upper bound {hi} must be >= 0")));
            }
        }
        if !(file.base_freq.is_finite() && file.base_freq > 0.0) {
            return Err(invariant("base_freq", 0, "must be a positive frequency in Hz"));
        }

        let mut b = file.susceptance;
        for (i, row) in b.iter_mut().enumerate() {
            row[i] = 0.0;
        }
        for i in 0..n {
            for j in 0..n {
                let (bij, bji) = (b[i][j], b[j][i]);
                if !bij.is_finite() {
                    return Err(invariant("B", format!("{i}][{j}"), "non-finite susceptance"));
                }
                if bij < 0.0 {
                    return Err(invariant("B", format!("{i}][{j}"), format!("off-diagonal entries must be >= 0, got {bij}")));
                }
                if (bij - bji).abs() > 1e-12 * bij.abs().max(1.0) {
                    return Err(invariant("B", format!("{i}][{j}"), format!("not symmetric: {bij} vs {bji}")));
                }
            }
        }
        let mut edges = Vec::new();
        for (i, row) in b.iter().enumerate() {
            for (j, &bij) in row.iter().enumerate().skip(i + 1) {
                if bij > 0.0 {
                    edges.push(Edge { i, j, b: bij });
                }
            }
        }
        let case = NetworkCase {
            name: file.name.unwrap_or_else(|| format!("case{n}")),
            n,
            inertia: file.inertia,
            damping: file.damping,
            susceptance: b,
            p_m: file.p_m,
            u_min,
            u_max: file.u_max,
            rating: file.rating,
            base_freq: file.base_freq,
            edges,
        };
        if let Some(unreached) = case.first_unreached_bus() {
            return Err(invariant("B", unreached, "network graph is not connected"));
        }
        Ok(case)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_file(&self) -> CaseFile {
        CaseFile {
            name: Some(self.name.clone()),
            provenance: None,
            n: self.n,
            inertia: self.inertia.clone(),
            damping: self.damping.clone(),
            susceptance: self.susceptance.clone(),
            p_m: self.p_m.clone(),
            u_min: Some(self.u_min.clone()),
            u_max: self.u_max.clone(),
            rating: self.rating.clone(),
            base_freq: self.base_freq,
        }
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Copy of this case with a different injection vector.
    pub fn with_injections(&self, p_m: Vec<f64>) -> Result<Self> {
        let mut file = self.to_file();
        file.p_m = p_m;
        Self::from_file(file)
    }

    pub fn hz_to_rad(&self, hz: f64) -> f64 {
        hz * std::f64::consts::TAU
    }

    pub fn rad_to_hz(&self, rad: f64) -> f64 {
        rad / std::f64::consts::TAU
    }

    /// BFS spanning tree rooted at bus 0, as `(parent, child, edge)` in visit order.
    pub fn spanning_tree(&self) -> Vec<(usize, usize)> {
        let mut seen = vec![false; self.n];
        let mut tree = Vec::with_capacity(self.n.saturating_sub(1));
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..self.n {
                if !seen[j] && self.susceptance[i][j] > 0.0 {
                    seen[j] = true;
                    tree.push((i, j));
                    queue.push_back(j);
                }
            }
        }
        tree
    }

    fn first_unreached_bus(&self) -> Option<usize> {
        let tree = self.spanning_tree();
        let mut seen = vec![false; self.n];
        seen[0] = true;
        for (_, j) in tree {
            seen[j] = true;
        }
        seen.iter().position(|s| !s)
    }
}

fn check_len(field: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(invariant(field, "len", format!("expected {n} entries, found {}", v.len())));
    }
    Ok(())
}

/// Reads and validates a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<NetworkCase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetworkCase::from_json(&text)
}

/// Cases shipped with the crate.
pub mod bundled {
    use super::NetworkCase;

    pub const CASE3_JSON: &str = include_str!("../cases/case3.json");
    pub const CASE39KRON_JSON: &str = include_str!("../cases/case39kron.json");

    /// Hand-made 3-bus meshed case.
    pub fn case3() -> NetworkCase {
        NetworkCase::from_json(CASE3_JSON).expect("bundled case3 is valid")
    }

    /// 10-machine Kron-reduced equivalent.
    pub fn case39kron() -> NetworkCase {
        NetworkCase::from_json(CASE39KRON_JSON).expect("bundled case39kron is valid")
    }

    pub fn by_name(name: &str) -> Option<NetworkCase> {
        match name {
            "case3" => Some(case3()),
            "case39kron" => Some(case39kron()),
            _ => None,
        }
    }
}

/// Center-of-inertia coordinates: subtract the uniform mean angle.
pub fn coi_transform(theta: &[f64]) -> Vec<f64> {
    if theta.is_empty() {
        return Vec::new();
    }
    let mean = theta.iter().sum::<f64>() / theta.len() as f64;
    theta.iter().map(|t| t - mean).collect()
}

/// Synchronized equilibrium `(delta*, 1 omega*)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub omega_star: f64,
    pub delta_star: Vec<f64>,
    /// Max per-bus power-flow mismatch at the solution.
    pub residual: f64,
}

impl Equilibrium {
    /// Solves for `omega*` then `delta*` under the given controller.
    pub fn compute<C: Controller + ?Sized>(case: &NetworkCase, u: &C) -> Result<Self> {
        let omega_star = solve_omega_star(case, u)?;
        solve_delta_star(case, omega_star, u)
    }

    /// Largest `|delta_i - delta_j|` over the network edges.
    pub fn max_edge_angle(&self, case: &NetworkCase) -> f64 {
        case.edges()
            .iter()
            .map(|e| (self.delta_star[e.i] - self.delta_star[e.j]).abs())
            .fold(0.0, f64::max)
    }
}

const BISECTION_BRACKET: (f64, f64) = (-10.0, 10.0);
const BISECTION_EXPANSIONS: usize = 4;
const BISECTION_TOL: f64 = 1e-12;

/// Frequency balance `sum u_i(w) + w sum D_i - sum p_m`, strictly increasing in
/// `w` for monotone controllers.
fn frequency_balance<C: Controller + ?Sized>(case: &NetworkCase, u: &C, w: f64) -> f64 {
    let control: f64 = (0..case.n).map(|i| u.action(i, w)).sum();
    let damping: f64 = case.damping.iter().sum();
    let injection: f64 = case.p_m.iter().sum();
    control + w * damping - injection
}

/// Synchronized frequency deviation from the scalar power balance.
pub fn solve_omega_star<C: Controller + ?Sized>(case: &NetworkCase, u: &C) -> Result<f64> {
    solve_omega_star_in(case, u, BISECTION_BRACKET)
}

/// As [`solve_omega_star`], starting from a caller-chosen bracket.
pub fn solve_omega_star_in<C: Controller + ?Sized>(
    case: &NetworkCase,
    u: &C,
    bracket: (f64, f64),
) -> Result<f64> {
    let g = |w: f64| frequency_balance(case, u, w);
    let (mut lo, mut hi) = bracket;
    let mut expansions = 0;
    while !(g(lo) <= 0.0 && g(hi) >= 0.0) {
        if expansions == BISECTION_EXPANSIONS {
            return Err(Error::BracketExpansion);
        }
        lo *= 2.0;
        hi *= 2.0;
        expansions += 1;
    }
    let (mut g_lo, mut g_hi) = (g(lo), g(hi));
    for _ in 0..400 {
        if hi - lo <= BISECTION_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let g_mid = g(mid);
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if g_mid < 0.0 {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
            g_hi = g_mid;
        }
    }
    if g_lo > 0.0 || g_hi < 0.0 {
        return Err(Error::BracketExpansion);
    }
    Ok(if -g_lo <= g_hi { lo } else { hi })
}

/// Lossless flows `p_e,i = sum_j B_ij sin(delta_i - delta_j)`.
pub fn electrical_power(case: &NetworkCase, delta: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; case.n];
    for e in case.edges() {
        let f = e.b * (delta[e.i] - delta[e.j]).sin();
        p[e.i] += f;
        p[e.j] -= f;
    }
    p
}

/// Jacobian of [`electrical_power`]: `H_ij = -B_ij cos(delta_ij)`, rows sum to 0.
pub fn flow_jacobian(case: &NetworkCase, delta: &[f64]) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(case.n, case.n);
    for e in case.edges() {
        let c = e.b * (delta[e.i] - delta[e.j]).cos();
        h[(e.i, e.j)] -= c;
        h[(e.j, e.i)] -= c;
        h[(e.i, e.i)] += c;
        h[(e.j, e.j)] += c;
    }
    h
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITERS: usize = 50;

/// Equilibrium angles in COI coordinates for a given `omega*`.
pub fn solve_delta_star<C: Controller + ?Sized>(
    case: &NetworkCase,
    omega_star: f64,
    u: &C,
) -> Result<Equilibrium> {
    let n = case.n;
    let target: Vec<f64> = (0..n)
        .map(|i| case.p_m[i] - case.damping[i] * omega_star - u.action(i, omega_star))
        .collect();
    let imbalance: f64 = target.iter().sum();
    if imbalance.abs() > 1e-8 {
        return Err(Error::Infeasible(format!(
            "effective injections sum to {imbalance:.3e}, not 0; omega* is inconsistent"
        )));
    }
    for (i, t) in target.iter().enumerate() {
        let capacity: f64 = case.susceptance[i].iter().sum();
        if t.abs() > capacity {
            return Err(Error::Infeasible(format!(
                "bus {i} must export {t:.6} p.u. but its lines carry at most {capacity:.6}"
            )));
        }
    }

    let mismatch = |delta: &[f64]| -> Vec<f64> {
        electrical_power(case, delta)
            .iter()
            .zip(&target)
            .map(|(p, t)| p - t)
            .collect()
    };
    let inf_norm = |v: &[f64]| v.iter().fold(0.0_f64, |a, x| a.max(x.abs()));

    // Bus 0 is the angle reference during the iteration; its equation is
    // implied by the others since the injections balance.
    let mut delta = vec![0.0; n];
    let mut res = mismatch(&delta);
    let mut norm = inf_norm(&res);
    let mut iterations = 0;
    while norm > NEWTON_TOL {
        if iterations == NEWTON_MAX_ITERS {
            return Err(Error::NewtonDivergence { iterations, residual: norm });
        }
        iterations += 1;
        let h = flow_jacobian(case, &delta);
        let reduced = h.view((1, 1), (n - 1, n - 1)).into_owned();
        let rhs = DVector::from_iterator(n - 1, res[1..].iter().map(|r| -r));
        let step = reduced.lu().solve(&rhs).ok_or_else(|| {
            Error::Infeasible("singular power-flow Jacobian during Newton iteration".into())
        })?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let trial: Vec<f64> = std::iter::once(0.0)
                .chain(delta[1..].iter().zip(step.iter()).map(|(d, s)| d + scale * s))
                .collect();
            let trial_res = mismatch(&trial);
            let trial_norm = inf_norm(&trial_res);
            if trial_norm.is_finite() && trial_norm < norm {
                delta = trial;
                res = trial_res;
                norm = trial_norm;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDivergence { iterations, residual: norm });
        }
    }

    let delta_star = coi_transform(&delta);
    let residual = inf_norm(&mismatch(&delta_star));
    let eq = Equilibrium { omega_star, delta_star, residual };
    for e in case.edges() {
        let diff = (eq.delta_star[e.i] - eq.delta_star[e.j]).abs();
        if diff >= FRAC_PI_2 {
            return Err(Error::AngleDomain { i: e.i, j: e.j, diff });
        }
    }
    Ok(eq)
}
