//! Monotone stacked-ReLU controllers.
//!
//! Each bus carries two single-hidden-layer ReLU stacks, one active for
//! positive frequency deviations (`f+`) and one for negative (`f-`), followed
//! by a hard saturation to the actuation bounds. The trainable parameters are
//! the non-negative "hat" vectors; the raw weights and biases are derived from
//! them so that every non-negative choice yields a non-decreasing function
//! through the origin:
//!
//! ```text
//! q^1 = q̂^1,    q^l = q̂^l - q̂^(l-1)      b^1 = 0,  b^l = -(b̂^2 + ... + b̂^l)
//! z^1 = -ẑ^1,   z^l = -ẑ^l + ẑ^(l-1)     c^1 = 0,  c^l = -(ĉ^2 + ... + ĉ^l)
//! f+(w) = Σ_l q^l relu(w + b^l)          f-(w) = Σ_l z^l relu(-w + c^l)
//! u(w)  = u_max - relu(u_max - f) + relu(u_min - f),   f = f+ + f-
//! ```
//!
//! Piece `l` of `f+` has slope `q̂^l`, so evaluation here walks the pieces
//! directly (sum of non-negative, individually monotone terms). That keeps
//! monotonicity and `u(0) = 0` exact in floating point; the raw-weight form is
//! kept alongside for gradients and cross-checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invariant, Error, Result};
use crate::power_net::NetworkCase;

/// Anything that maps a bus-local frequency deviation to a power action.
pub trait Controller: Sync {
    fn action(&self, bus: usize, omega: f64) -> f64;

    /// Upper bound on the incremental gain `(u(a) - u(b)) / (a - b)`, when known.
    fn gain_bound(&self, _bus: usize) -> Option<f64> {
        None
    }
}

impl<F> Controller for F
where
    F: Fn(usize, f64) -> f64 + Sync,
{
    fn action(&self, bus: usize, omega: f64) -> f64 {
        self(bus, omega)
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `relu'` with the inactive branch at the kink.
#[inline]
fn relu_active(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Parameters of one bus controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusParams {
    pub q_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub z_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub u_min: f64,
    pub u_max: f64,
    /// Half-width of the zero-response band; 0 disables it.
    pub deadband: f64,
}

/// Raw weights and biases of the `f+`/`f-` stacks, derived from the hats.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWeights {
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    pub z: Vec<f64>,
    pub c: Vec<f64>,
}

impl BusParams {
    pub fn m(&self) -> usize {
        self.q_hat.len()
    }

    pub fn raw_weights(&self) -> RawWeights {
        let m = self.m();
        let mut q = vec![0.0; m];
        let mut z = vec![0.0; m];
        let mut b = vec![0.0; m];
        let mut c = vec![0.0; m];
        for l in 0..m {
            let prev_q = if l == 0 { 0.0 } else { self.q_hat[l - 1] };
            let prev_z = if l == 0 { 0.0 } else { self.z_hat[l - 1] };
            q[l] = self.q_hat[l] - prev_q;
            z[l] = -self.z_hat[l] + prev_z;
            if l > 0 {
                b[l] = b[l - 1] - self.b_hat[l];
                c[l] = c[l - 1] - self.c_hat[l];
            }
        }
        RawWeights { q, b, z, c }
    }

    /// Positive-side stack, evaluated piece by piece.
    pub fn fplus(&self, omega: f64) -> f64 {
        stacked_pieces(&self.q_hat, &self.b_hat, omega)
    }

    /// Negative-side stack, evaluated piece by piece.
    pub fn fminus(&self, omega: f64) -> f64 {
        -stacked_pieces(&self.z_hat, &self.c_hat, -omega)
    }

    /// `f+` computed literally from the raw weights.
    pub fn fplus_raw(&self, omega: f64) -> f64 {
        let r = self.raw_weights();
        r.q.iter().zip(&r.b).map(|(q, b)| q * relu(omega + b)).sum()
    }

    pub fn fminus_raw(&self, omega: f64) -> f64 {
        let r = self.raw_weights();
        r.z.iter().zip(&r.c).map(|(z, c)| z * relu(-omega + c)).sum()
    }

    /// Saturated controller output.
    pub fn eval(&self, omega: f64) -> f64 {
        let f = self.fplus(omega) + self.fminus(omega);
        f.max(self.u_min).min(self.u_max)
    }

    /// The saturation written with ReLUs: `u_max - relu(u_max - f) + relu(u_min - f)`.
    pub fn eval_relu_saturation(&self, omega: f64) -> f64 {
        let f = self.fplus_raw(omega) + self.fminus_raw(omega);
        self.u_max - relu(self.u_max - f) + relu(self.u_min - f)
    }

    /// Output, input slope `du/dw`, and `scale * du/dparams` accumulated into
    /// `grad` (layout `[q̂ | b̂ | ẑ | ĉ]`, length `4m`).
    pub fn eval_with_grad(&self, omega: f64, scale: f64, grad: &mut [f64]) -> (f64, f64) {
        let m = self.m();
        debug_assert_eq!(grad.len(), 4 * m);
        let r = self.raw_weights();

        let f = self.fplus(omega) + self.fminus(omega);
        let u = f.max(self.u_min).min(self.u_max);
        let du_df = relu_active(self.u_max - f) - relu_active(self.u_min - f);
        if du_df == 0.0 {
            return (u, 0.0);
        }

        let mut slope = 0.0;
        let s = scale * du_df;
        let (gq, rest) = grad.split_at_mut(m);
        let (gb, rest) = rest.split_at_mut(m);
        let (gz, gc) = rest.split_at_mut(m);

        // Positive stack: dF/dq^l = relu(a_l), dF/db^l = q^l [a_l > 0].
        let mut next_dq = 0.0;
        let mut suffix_db = 0.0;
        for l in (0..m).rev() {
            let a = omega + r.b[l];
            let dq = relu(a);
            let db = r.q[l] * relu_active(a);
            slope += db;
            gq[l] += s * (dq - next_dq);
            next_dq = dq;
            suffix_db += db;
            if l > 0 {
                gb[l] -= s * suffix_db;
            }
        }
        // Negative stack: dF/dz^l = relu(a_l), dF/dc^l = z^l [a_l > 0].
        let mut next_dz = 0.0;
        let mut suffix_dc = 0.0;
        for l in (0..m).rev() {
            let a = -omega + r.c[l];
            let dz = relu(a);
            let dc = r.z[l] * relu_active(a);
            slope -= dc;
            gz[l] += s * (next_dz - dz);
            next_dz = dz;
            suffix_dc += dc;
            if l > 0 {
                gc[l] -= s * suffix_dc;
            }
        }
        if self.deadband > 0.0 {
            gq[0] = 0.0;
            gz[0] = 0.0;
            if m > 1 {
                gb[1] = 0.0;
                gc[1] = 0.0;
            }
        }
        (u, du_df * slope)
    }

    /// Largest slope over all pieces (a Lipschitz constant of `u`).
    pub fn max_slope(&self) -> f64 {
        self.q_hat.iter().chain(&self.z_hat).fold(0.0, |a, &x| a.max(x))
    }

    pub fn validate(&self, bus: usize) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(invariant("m", bus, "need at least one hidden unit per side"));
        }
        for (name, v) in [("q_hat", &self.q_hat), ("b_hat", &self.b_hat), ("z_hat", &self.z_hat), ("c_hat", &self.c_hat)] {
            if v.len() != m {
                return Err(invariant(hat_field(name), bus, format!("expected {m} entries, found {}", v.len())));
            }
            if let Some(l) = v.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(invariant(hat_field(name), format!("{bus}][{l}"), format!("must be non-negative, got {}", v[l])));
            }
        }
        if self.b_hat[0] != 0.0 {
            return Err(invariant("b_hat", format!("{bus}][0"), "first entry must be 0"));
        }
        if self.c_hat[0] != 0.0 {
            return Err(invariant("c_hat", format!("{bus}][0"), "first entry must be 0"));
        }
        if !(self.u_min <= 0.0 && 0.0 <= self.u_max) {
            return Err(invariant("u_min", bus, format!("need u_min <= 0 <= u_max, got [{}, {}]", self.u_min, self.u_max)));
        }
        if !(self.deadband.is_finite() && self.deadband >= 0.0) {
            return Err(invariant("deadband", bus, "must be >= 0"));
        }
        if self.deadband > 0.0 {
            if m < 2 {
                return Err(invariant("deadband", bus, "a deadband needs at least two units per side"));
            }
            if self.q_hat[0] != 0.0 || self.z_hat[0] != 0.0 || self.b_hat[1] != self.deadband || self.c_hat[1] != self.deadband {
                return Err(invariant("deadband", bus, "first pieces must be flat and span exactly the deadband"));
            }
        }
        Ok(())
    }

    /// Restores the structural constraints after an unconstrained update.
    pub fn project(&mut self) {
        for v in [&mut self.q_hat, &mut self.b_hat, &mut self.z_hat, &mut self.c_hat] {
            for x in v.iter_mut() {
                if !(*x > 0.0) {
                    *x = 0.0;
                }
            }
        }
        self.b_hat[0] = 0.0;
        self.c_hat[0] = 0.0;
        if self.deadband > 0.0 && self.m() > 1 {
            self.q_hat[0] = 0.0;
            self.z_hat[0] = 0.0;
            self.b_hat[1] = self.deadband;
            self.c_hat[1] = self.deadband;
        }
    }
}

fn hat_field(name: &str) -> &'static str {
    match name {
        "q_hat" => "q_hat",
        "b_hat" => "b_hat",
        "z_hat" => "z_hat",
        _ => "c_hat",
    }
}

/// `Σ_l slope_l * clamp(x - start_l, 0, width_l)` with `start_l` the running
/// sum of `spacing[1..=l]` and the last piece unbounded.
fn stacked_pieces(slopes: &[f64], spacing: &[f64], x: f64) -> f64 {
    let m = slopes.len();
    let mut start = 0.0;
    let mut total = 0.0;
    for l in 0..m {
        let over = x - start;
        if !(over > 0.0) {
            break;
        }
        let end = if l + 1 < m { start + spacing[l + 1] } else { f64::INFINITY };
        let seg = over.min(end - start);
        total += slopes[l] * seg;
        start = end;
    }
    total
}

/// Per-bus monotone controllers sharing a hidden width `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneParams {
    m: usize,
    buses: Vec<BusParams>,
}

/// Initialization of the trainable hats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Nominal droop slope the random init approximates (p.u. per rad/s).
    pub k0: f64,
    /// Frequency span (rad/s) covered by the initial breakpoints.
    pub omega_span: f64,
    pub deadband: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { k0: 5.0, omega_span: 1.0, deadband: 0.0 }
    }
}

impl MonotoneParams {
    pub fn new(buses: Vec<BusParams>) -> Result<Self> {
        let m = buses.first().map(BusParams::m).unwrap_or(0);
        if buses.is_empty() {
            return Err(invariant("m", 0, "no buses"));
        }
        for (i, b) in buses.iter().enumerate() {
            if b.m() != m {
                return Err(invariant("q_hat", i, format!("all buses must share m = {m}")));
            }
            b.validate(i)?;
        }
        Ok(Self { m, buses })
    }

    /// Random hats: piece slopes uniform in `[0, 2 k0]` (mean `k0`, a droop-like
    /// start), breakpoint spacings uniform in `[0, span / m]`.
    pub fn random<R: Rng + ?Sized>(case: &NetworkCase, m: usize, init: InitConfig, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        let slope_hi = 2.0 * init.k0;
        let gap_hi = init.omega_span / m as f64;
        let buses = (0..case.n)
            .map(|i| {
                let mut draw = |hi: f64| -> Vec<f64> { (0..m).map(|_| rng.random::<f64>() * hi).collect() };
                let mut b = BusParams {
                    q_hat: draw(slope_hi),
                    b_hat: draw(gap_hi),
                    z_hat: draw(slope_hi),
                    c_hat: draw(gap_hi),
                    u_min: case.u_min[i],
                    u_max: case.u_max[i],
                    deadband: init.deadband,
                };
                b.project();
                b
            })
            .collect();
        Self::new(buses)
    }

    /// Linear droop `u_i = clamp(k_i w)` as the `m = 1` member of the family.
    pub fn droop(case: &NetworkCase, gains: &[f64]) -> Result<Self> {
        if gains.len() != case.n {
            return Err(Error::Config(format!("expected {} droop gains, got {}", case.n, gains.len())));
        }
        let buses = gains
            .iter()
            .enumerate()
            .map(|(i, &k)| BusParams {
                q_hat: vec![k],
                b_hat: vec![0.0],
                z_hat: vec![k],
                c_hat: vec![0.0],
                u_min: case.u_min[i],
                u_max: case.u_max[i],
                deadband: 0.0,
            })
            .collect();
        Self::new(buses)
    }

    /// The same linear droop spread over `m` pieces per side, spaced by
    /// `spacing` (rad/s): a warm start for training that evaluates like
    /// [`MonotoneParams::droop`].
    pub fn droop_embedded(case: &NetworkCase, gains: &[f64], m: usize, spacing: f64) -> Result<Self> {
        if gains.len() != case.n {
            return Err(Error::Config(format!("expected {} droop gains, got {}", case.n, gains.len())));
        }
        if m == 0 || !(spacing >= 0.0) {
            return Err(Error::Config("need m >= 1 and spacing >= 0".into()));
        }
        let gaps: Vec<f64> = (0..m).map(|l| if l == 0 { 0.0 } else { spacing }).collect();
        let buses = gains
            .iter()
            .enumerate()
            .map(|(i, &k)| BusParams {
                q_hat: vec![k; m],
                b_hat: gaps.clone(),
                z_hat: vec![k; m],
                c_hat: gaps.clone(),
                u_min: case.u_min[i],
                u_max: case.u_max[i],
                deadband: 0.0,
            })
            .collect();
        Self::new(buses)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.buses.len()
    }

    pub fn bus(&self, i: usize) -> &BusParams {
        &self.buses[i]
    }

    pub fn buses(&self) -> &[BusParams] {
        &self.buses
    }

    pub fn eval(&self, bus: usize, omega: f64) -> f64 {
        self.buses[bus].eval(omega)
    }

    /// Number of trainable scalars.
    pub fn len(&self) -> usize {
        4 * self.m * self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters per bus in the flat layout.
    pub fn stride(&self) -> usize {
        4 * self.m
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.buses {
            out.extend_from_slice(&b.q_hat);
            out.extend_from_slice(&b.b_hat);
            out.extend_from_slice(&b.z_hat);
            out.extend_from_slice(&b.c_hat);
        }
        out
    }

    /// Overwrites the hats from a flat vector, then projects.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length mismatch");
        let m = self.m;
        for (b, chunk) in self.buses.iter_mut().zip(flat.chunks_exact(4 * m)) {
            b.q_hat.copy_from_slice(&chunk[..m]);
            b.b_hat.copy_from_slice(&chunk[m..2 * m]);
            b.z_hat.copy_from_slice(&chunk[2 * m..3 * m]);
            b.c_hat.copy_from_slice(&chunk[3 * m..]);
            b.project();
        }
    }

    pub fn to_file(&self) -> ParamsFile {
        ParamsFile {
            m: self.m,
            q_hat: self.buses.iter().map(|b| b.q_hat.clone()).collect(),
            b_hat: self.buses.iter().map(|b| b.b_hat.clone()).collect(),
            z_hat: self.buses.iter().map(|b| b.z_hat.clone()).collect(),
            c_hat: self.buses.iter().map(|b| b.c_hat.clone()).collect(),
            u_min: self.buses.iter().map(|b| b.u_min).collect(),
            u_max: self.buses.iter().map(|b| b.u_max).collect(),
            deadband: self.buses.iter().map(|b| b.deadband).collect(),
        }
    }

    pub fn from_file(f: ParamsFile) -> Result<Self> {
        let n = f.q_hat.len();
        for (name, len) in [
            ("b_hat", f.b_hat.len()),
            ("z_hat", f.z_hat.len()),
            ("c_hat", f.c_hat.len()),
            ("u_min", f.u_min.len()),
            ("u_max", f.u_max.len()),
            ("deadband", f.deadband.len()),
        ] {
            if len != n {
                return Err(invariant(hat_field_or(name), "len", format!("expected {n} buses, found {len}")));
            }
        }
        let buses: Vec<BusParams> = (0..n)
            .map(|i| BusParams {
                q_hat: f.q_hat[i].clone(),
                b_hat: f.b_hat[i].clone(),
                z_hat: f.z_hat[i].clone(),
                c_hat: f.c_hat[i].clone(),
                u_min: f.u_min[i],
                u_max: f.u_max[i],
                deadband: f.deadband[i],
            })
            .collect();
        let p = Self::new(buses)?;
        if p.m != f.m {
            return Err(invariant("m", 0, format!("declared m = {} but vectors have {}", f.m, p.m)));
        }
        Ok(p)
    }
}

fn hat_field_or(name: &str) -> &'static str {
    match name {
        "u_min" => "u_min",
        "u_max" => "u_max",
        "deadband" => "deadband",
        other => hat_field(other),
    }
}

impl Controller for MonotoneParams {
    fn action(&self, bus: usize, omega: f64) -> f64 {
        self.eval(bus, omega)
    }

    fn gain_bound(&self, bus: usize) -> Option<f64> {
        Some(self.buses[bus].max_slope())
    }
}

/// Controller parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub m: usize,
    pub q_hat: Vec<Vec<f64>>,
    pub b_hat: Vec<Vec<f64>>,
    pub z_hat: Vec<Vec<f64>>,
    pub c_hat: Vec<Vec<f64>>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub deadband: Vec<f64>,
}

/// Arbitrary per-bus response sampled on a shared frequency grid, linearly
/// interpolated and held flat outside the grid. No structure is assumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabulatedController {
    /// Strictly increasing grid (rad/s).
    pub omega: Vec<f64>,
    /// `u[bus][k]` is the action at `omega[k]`.
    pub u: Vec<Vec<f64>>,
}

impl TabulatedController {
    pub fn new(omega: Vec<f64>, u: Vec<Vec<f64>>) -> Result<Self> {
        if omega.len() < 2 {
            return Err(invariant("omega", "len", "a table needs at least two grid points"));
        }
        if let Some(k) = omega.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(invariant("omega", k + 1, "grid must be strictly increasing"));
        }
        for (i, row) in u.iter().enumerate() {
            if row.len() != omega.len() {
                return Err(invariant("u", i, format!("expected {} samples, found {}", omega.len(), row.len())));
            }
        }
        Ok(Self { omega, u })
    }

    /// Samples `f` for `n` buses on `points` equispaced grid points in `[lo, hi]`.
    pub fn sample(n: usize, lo: f64, hi: f64, points: usize, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        let points = points.max(2);
        let omega: Vec<f64> = (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect();
        let u = (0..n).map(|i| omega.iter().map(|&w| f(i, w)).collect()).collect();
        Self::new(omega, u)
    }
}

impl Controller for TabulatedController {
    fn action(&self, bus: usize, omega: f64) -> f64 {
        let row = &self.u[bus];
        let last = self.omega.len() - 1;
        if omega <= self.omega[0] {
            return row[0];
        }
        if omega >= self.omega[last] {
            return row[last];
        }
        let k = self.omega.partition_point(|&x| x <= omega) - 1;
        let (x0, x1) = (self.omega[k], self.omega[k + 1]);
        let t = (omega - x0) / (x1 - x0);
        row[k] + t * (row[k + 1] - row[k])
    }

    fn gain_bound(&self, bus: usize) -> Option<f64> {
        let row = &self.u[bus];
        let g = self
            .omega
            .windows(2)
            .zip(row.windows(2))
            .map(|(x, y)| ((y[1] - y[0]) / (x[1] - x[0])).abs())
            .fold(0.0, f64::max);
        Some(g)
    }
}

/// Either controller representation, as read from a controller file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ControllerFile {
    Monotone(ParamsFile),
    Table { table: TabulatedController },
}

/// A loaded controller of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyController {
    Monotone(MonotoneParams),
    Table(TabulatedController),
}

impl AnyController {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ControllerFile = serde_json::from_str(text)?;
        match file {
            ControllerFile::Monotone(p) => Ok(Self::Monotone(MonotoneParams::from_file(p)?)),
            ControllerFile::Table { table } => Ok(Self::Table(TabulatedController::new(table.omega, table.u)?)),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Monotone(p) => p.n(),
            Self::Table(t) => t.u.len(),
        }
    }
}

impl Controller for AnyController {
    fn action(&self, bus: usize, omega: f64) -> f64 {
        match self {
            Self::Monotone(p) => p.action(bus, omega),
            Self::Table(t) => t.action(bus, omega),
        }
    }

    fn gain_bound(&self, bus: usize) -> Option<f64> {
        match self {
            Self::Monotone(p) => p.gain_bound(bus),
            Self::Table(t) => t.gain_bound(bus),
        }
    }
}

/// Result of fitting a monotone target with one bus controller.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotoneFit {
    pub params: BusParams,
    /// Grid spacing.
    pub spacing: f64,
    /// Largest secant slope between neighbouring grid samples.
    pub max_slope: f64,
    /// Sup-norm error against the target on a 10x denser grid.
    pub sup_error: f64,
    /// `max_slope * spacing`.
    pub error_bound: f64,
}

/// Interpolates a monotone target through the origin on an equispaced grid
/// over `[x_lo, x_hi]` (which must contain 0 as a grid point) and expresses
/// the interpolant exactly as a stacked-ReLU controller, saturated at the
/// endpoint values.
pub fn fit_monotone(target: impl Fn(f64) -> f64, x_lo: f64, x_hi: f64, grid_n: usize) -> Result<MonotoneFit> {
    if !(x_lo <= 0.0 && 0.0 <= x_hi && x_hi > x_lo) || grid_n == 0 {
        return Err(Error::Config(format!("need x_lo <= 0 <= x_hi, x_lo < x_hi and grid_n >= 1 (got [{x_lo}, {x_hi}], {grid_n})")));
    }
    let spacing = (x_hi - x_lo) / grid_n as f64;
    let n_pos = (x_hi / spacing).round() as usize;
    let n_neg = (-x_lo / spacing).round() as usize;
    if n_pos + n_neg != grid_n || ((x_hi / spacing) - n_pos as f64).abs() > 1e-6 {
        return Err(Error::Config("0 must be one of the grid points".into()));
    }
    let r0 = target(0.0);
    if r0.abs() > 1e-12 {
        return Err(Error::Config(format!("target must pass through the origin, r(0) = {r0}")));
    }

    let side = |dir: f64, count: usize| -> Result<Vec<f64>> {
        let mut slopes = Vec::with_capacity(count);
        let mut prev = 0.0;
        for k in 1..=count {
            let x = dir * k as f64 * spacing;
            let y = target(x);
            // Rise in the direction away from the origin: non-negative on the
            // positive side, non-positive on the negative side.
            let rise = dir * (y - prev);
            if !(rise >= 0.0) {
                return Err(Error::NonMonotoneTarget { x });
            }
            slopes.push(rise / spacing);
            prev = y;
        }
        Ok(slopes)
    };
    let pos = side(1.0, n_pos)?;
    let neg = side(-1.0, n_neg)?;
    let m = n_pos.max(n_neg).max(1);

    let pad = |slopes: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut hat = slopes.to_vec();
        let mut gaps: Vec<f64> = (0..slopes.len()).map(|l| if l == 0 { 0.0 } else { spacing }).collect();
        let last = slopes.last().copied().unwrap_or(0.0);
        while hat.len() < m {
            hat.push(last);
            gaps.push(0.0);
        }
        (hat, gaps)
    };
    let (q_hat, b_hat) = pad(&pos);
    let (z_hat, c_hat) = pad(&neg);
    let params = BusParams {
        q_hat,
        b_hat,
        z_hat,
        c_hat,
        u_min: target(x_lo).min(0.0),
        u_max: target(x_hi).max(0.0),
        deadband: 0.0,
    };
    params.validate(0)?;

    let max_slope = pos.iter().chain(&neg).fold(0.0_f64, |a, &s| a.max(s));
    let dense = 10 * grid_n;
    let sup_error = (0..=dense)
        .map(|k| {
            let x = x_lo + (x_hi - x_lo) * k as f64 / dense as f64;
            (params.eval(x) - target(x)).abs()
        })
        .fold(0.0, f64::max);
    Ok(MonotoneFit { params, spacing, max_slope, sup_error, error_bound: max_slope * spacing })
}
