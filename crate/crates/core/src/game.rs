//! Linear-quadratic two-player games with closed-form regularized dynamics.
//!
//! `F(θ, φ) = ½θᵀPθ + θᵀAφ − ½φᵀQφ`. One step updates both players
//! simultaneously: θ descends on `∇_θF + γ ∇²_θφF ∇_φF` and φ ascends on
//! `∇_φF`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::minimax::{hvp_finite_difference, BilinearObjective};

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticGame {
    pub p: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// How the mixed-derivative product is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvpMode {
    Exact,
    /// Forward difference of `∇_θF` along `∇_φF` with `h = η_G / 10`.
    FiniteDifference,
}

impl HvpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::FiniteDifference => "fd",
        }
    }
}

impl std::str::FromStr for HvpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact-hvp" => Ok(Self::Exact),
            "fd" | "fd-hvp" => Ok(Self::FiniteDifference),
            other => Err(Error::config("game.hvp", format!("expected exact or fd, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    pub eta_d: f64,
    pub eta_g: f64,
    pub gamma: f64,
}

impl StepSizes {
    pub fn new(eta_d: f64, eta_g: f64, gamma: f64) -> Self {
        Self { eta_d, eta_g, gamma }
    }

    pub fn equal(eta: f64, gamma: f64) -> Self {
        Self::new(eta, eta, gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameState {
    pub theta: DVector<f64>,
    pub phi: DVector<f64>,
}

impl GameState {
    pub fn new(theta: &[f64], phi: &[f64]) -> Self {
        Self {
            theta: DVector::from_column_slice(theta),
            phi: DVector::from_column_slice(phi),
        }
    }

    /// Euclidean norm of the stacked iterate.
    pub fn norm(&self) -> f64 {
        (self.theta.norm_squared() + self.phi.norm_squared()).sqrt()
    }
}

fn is_symmetric_psd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return false;
    }
    m.nrows() == 0 || m.clone().symmetric_eigenvalues().min() >= -1e-12 * m.amax().max(1.0)
}

impl QuadraticGame {
    pub fn new(p: DMatrix<f64>, a: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let (n, m) = a.shape();
        if p.shape() != (n, n) || q.shape() != (m, m) {
            return Err(Error::dim("quadratic game", &[p.nrows(), p.ncols(), q.nrows(), q.ncols()], &[n, n, m, m]));
        }
        if !is_symmetric_psd(&p) {
            return Err(Error::config("game.p", "must be symmetric positive semidefinite"));
        }
        if !is_symmetric_psd(&q) {
            return Err(Error::config("game.q", "must be symmetric positive semidefinite"));
        }
        Ok(Self { p, a, q })
    }

    /// `F = θᵀAφ` with no quadratic terms.
    pub fn bilinear(a: DMatrix<f64>) -> Self {
        let (n, m) = a.shape();
        Self {
            p: DMatrix::zeros(n, n),
            a,
            q: DMatrix::zeros(m, m),
        }
    }

    /// The scalar game `F = θφ`.
    pub fn scalar() -> Self {
        Self::bilinear(DMatrix::from_element(1, 1, 1.0))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.a.shape()
    }

    fn check(&self, s: &GameState) -> Result<()> {
        let (n, m) = self.dims();
        if s.theta.len() != n || s.phi.len() != m {
            return Err(Error::dim("game state", &[s.theta.len(), s.phi.len()], &[n, m]));
        }
        Ok(())
    }

    pub fn value(&self, s: &GameState) -> f64 {
        0.5 * s.theta.dot(&(&self.p * &s.theta)) + s.theta.dot(&(&self.a * &s.phi)) - 0.5 * s.phi.dot(&(&self.q * &s.phi))
    }

    pub fn grad_theta(&self, s: &GameState) -> DVector<f64> {
        &self.p * &s.theta + &self.a * &s.phi
    }

    pub fn grad_phi(&self, s: &GameState) -> DVector<f64> {
        self.a.transpose() * &s.theta - &self.q * &s.phi
    }

    fn objective(&self, s: &GameState) -> BilinearObjective {
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        BilinearObjective {
            a: row_major(&self.a),
            p: Some(row_major(&self.p)),
            q: Some(row_major(&self.q)),
            theta: s.theta.as_slice().to_vec(),
            phi: s.phi.as_slice().to_vec(),
        }
    }

    /// One simultaneous regularized update.
    pub fn step(&self, s: &GameState, eta: StepSizes, mode: HvpMode) -> Result<GameState> {
        self.check(s)?;
        let gp = self.grad_phi(s);
        let hvp = match mode {
            HvpMode::Exact => &self.a * &gp,
            HvpMode::FiniteDifference => {
                let h = eta.eta_g / 10.0;
                let mut obj = self.objective(s);
                DVector::from_vec(hvp_finite_difference(&mut obj, gp.as_slice(), h)?)
            }
        };
        let g_eff = self.grad_theta(s) + eta.gamma * hvp;
        Ok(GameState {
            theta: &s.theta - eta.eta_d * g_eff,
            phi: &s.phi + eta.eta_g * gp,
        })
    }

    /// The linear map `(θ, φ) ↦ (θ', φ')` of [`QuadraticGame::step`].
    pub fn iteration_matrix(&self, eta: StepSizes) -> DMatrix<f64> {
        let (n, m) = self.dims();
        let at = self.a.transpose();
        let mut t = DMatrix::zeros(n + m, n + m);
        let top_left = DMatrix::identity(n, n) - eta.eta_d * (&self.p + eta.gamma * &self.a * &at);
        let top_right = -eta.eta_d * (&self.a - eta.gamma * &self.a * &self.q);
        let bottom_left = eta.eta_g * &at;
        let bottom_right = DMatrix::identity(m, m) - eta.eta_g * &self.q;
        t.view_mut((0, 0), (n, n)).copy_from(&top_left);
        t.view_mut((0, n), (n, m)).copy_from(&top_right);
        t.view_mut((n, 0), (m, n)).copy_from(&bottom_left);
        t.view_mut((n, n), (m, m)).copy_from(&bottom_right);
        t
    }
}

/// Largest eigenvalue modulus of the iteration matrix.
pub fn spectral_radius_oracle(game: &QuadraticGame, eta: StepSizes) -> f64 {
    game.iteration_matrix(eta)
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub value: f64,
    /// `‖∇_φF‖`.
    pub grad_norm: f64,
}

/// Iterates of a run, starting with the initial state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DynamicsTrace {
    pub points: Vec<TracePoint>,
}

impl DynamicsTrace {
    pub fn steps(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    /// Norm of the stacked iterate after each step.
    pub fn norms(&self) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.theta.iter().chain(&p.phi).map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    /// Geometric mean per-step growth of the iterate norm over the whole run.
    pub fn growth_rate(&self) -> f64 {
        let norms = self.norms();
        match (norms.first(), norms.last()) {
            (Some(&a), Some(&b)) if self.steps() > 0 && a > 0.0 => (b / a).powf(1.0 / self.steps() as f64),
            _ => f64::NAN,
        }
    }

    /// `step,theta,phi,F,grad_norm`; vector players are `;`-joined.
    pub fn to_csv(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(";");
        let mut s = String::from("step,theta,phi,F,grad_norm\n");
        for (i, p) in self.points.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{:.12e},{:.12e}", join(&p.theta), join(&p.phi), p.value, p.grad_norm);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn point(game: &QuadraticGame, s: &GameState) -> TracePoint {
    TracePoint {
        theta: s.theta.as_slice().to_vec(),
        phi: s.phi.as_slice().to_vec(),
        value: game.value(s),
        grad_norm: game.grad_phi(s).norm(),
    }
}

pub fn simulate(game: &QuadraticGame, start: &GameState, eta: StepSizes, mode: HvpMode, steps: usize) -> Result<DynamicsTrace> {
    game.check(start)?;
    let mut s = start.clone();
    let mut points = Vec::with_capacity(steps + 1);
    points.push(point(game, &s));
    for _ in 0..steps {
        s = game.step(&s, eta, mode)?;
        points.push(point(game, &s));
    }
    Ok(DynamicsTrace { points })
}

/// True when `s` is left unchanged by one exact step.
pub fn is_fixed_point(game: &QuadraticGame, s: &GameState, eta: StepSizes) -> Result<bool> {
    let next = game.step(s, eta, HvpMode::Exact)?;
    Ok(next == *s)
}
