//! Three-level Rydberg ladder `|g⟩ ↔ |p⟩ ↔ |r⟩` with an extra ground sublevel
//! `|g′⟩` collecting decay, driven by piecewise-constant blue (`g–p`) and red
//! (`p–r`) Rabi frequencies under a Lindblad master equation.
//!
//! Density matrices are vectorized column-major, so `vec(AXB) = (Bᵀ ⊗ A) vec X`
//! and the Liouvillian is a 16×16 complex matrix. Because the generator is
//! affine in the two controls it is assembled once as `L0 + Ωb·Lb + Ωr·Lr`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_json;
use crate::linalg::{expm, expm_frechet_action, CMatrix};
use crate::pulse::Pulse;

pub const DIM: usize = 4;
pub const G: usize = 0;
pub const P: usize = 1;
pub const R: usize = 2;
pub const G_PRIME: usize = 3;

const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-9;
const POSITIVITY_TOL: f64 = 1e-9;

type CVector = DVector<Complex64>;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn outer(i: usize, j: usize) -> CMatrix {
    let mut m = CMatrix::zeros(DIM, DIM);
    m[(i, j)] = c(1.0);
    m
}

/// Physical parameters; all rates in rad/µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RydbergSystem {
    pub detuning_p: f64,
    pub detuning_r: f64,
    pub gamma: f64,
    pub gamma_dephasing: f64,
}

impl Default for RydbergSystem {
    fn default() -> Self {
        SystemConfig::default().into_system().expect("default rates are valid")
    }
}

impl RydbergSystem {
    pub fn new(detuning_p: f64, detuning_r: f64, gamma: f64, gamma_dephasing: f64) -> Result<Self> {
        for (name, v) in [
            ("detuning_p", detuning_p),
            ("detuning_r", detuning_r),
            ("gamma", gamma),
            ("gamma_dephasing", gamma_dephasing),
        ] {
            if !v.is_finite() {
                return Err(Error::validation(format!("{name} must be finite")));
            }
        }
        if gamma < 0.0 || gamma_dephasing < 0.0 {
            return Err(Error::validation("decay rates must be non-negative"));
        }
        Ok(Self { detuning_p, detuning_r, gamma, gamma_dephasing })
    }

    /// Closed system with the same detunings.
    pub fn lossless() -> Self {
        Self { detuning_p: 0.0, detuning_r: 0.0, gamma: 0.0, gamma_dephasing: 0.0 }
    }

    /// Decay rate `p → g`.
    pub fn gamma_g(&self) -> f64 {
        self.gamma / 3.0
    }

    /// Decay rate `p → g′`; the two branches sum to `gamma` exactly.
    pub fn gamma_g_prime(&self) -> f64 {
        self.gamma - self.gamma_g()
    }

    pub fn hamiltonian(&self, omega_b: f64, omega_r: f64) -> CMatrix {
        let (hb, hr) = control_hamiltonians();
        self.drift_hamiltonian() + hb * c(omega_b) + hr * c(omega_r)
    }

    fn drift_hamiltonian(&self) -> CMatrix {
        let mut h = CMatrix::zeros(DIM, DIM);
        h[(P, P)] = c(-self.detuning_p);
        h[(R, R)] = c(-self.detuning_r);
        h
    }

    pub fn jump_operators(&self) -> Vec<CMatrix> {
        vec![
            outer(G, P) * c(self.gamma_g().sqrt()),
            outer(G_PRIME, P) * c(self.gamma_g_prime().sqrt()),
            outer(R, R) * c(self.gamma_dephasing.sqrt()),
        ]
    }

    pub fn generators(&self) -> Generators {
        let (hb, hr) = control_hamiltonians();
        let mut drift = commutator_super(&self.drift_hamiltonian());
        for v in self.jump_operators() {
            drift += dissipator_super(&v);
        }
        Generators {
            drift,
            blue: commutator_super(&hb),
            red: commutator_super(&hr),
        }
    }

    pub fn liouvillian(&self, omega_b: f64, omega_r: f64) -> CMatrix {
        self.generators().at(omega_b, omega_r)
    }

    pub fn step_propagator(&self, omega_b: f64, omega_r: f64, dt: f64) -> Result<CMatrix> {
        check_dt(dt)?;
        Ok(expm(&(self.liouvillian(omega_b, omega_r) * c(dt))))
    }
}

fn check_dt(dt: f64) -> Result<()> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("time step must be positive, got {dt}")))
    }
}

fn control_hamiltonians() -> (CMatrix, CMatrix) {
    ((outer(G, P) + outer(P, G)) * c(0.5), (outer(P, R) + outer(R, P)) * c(0.5))
}

fn commutator_super(h: &CMatrix) -> CMatrix {
    let id = CMatrix::identity(DIM, DIM);
    (id.kronecker(h) - h.transpose().kronecker(&id)) * Complex64::new(0.0, -1.0)
}

fn dissipator_super(v: &CMatrix) -> CMatrix {
    let id = CMatrix::identity(DIM, DIM);
    let vdv = v.adjoint() * v;
    v.conjugate().kronecker(v) - (id.kronecker(&vdv) + vdv.transpose().kronecker(&id)) * c(0.5)
}

/// Liouvillian split into its control-independent and per-control parts.
#[derive(Debug, Clone)]
pub struct Generators {
    pub drift: CMatrix,
    pub blue: CMatrix,
    pub red: CMatrix,
}

impl Generators {
    pub fn at(&self, omega_b: f64, omega_r: f64) -> CMatrix {
        &self.drift + &self.blue * c(omega_b) + &self.red * c(omega_r)
    }
}

/// JSON system parameters. Decay rates are given in MHz and converted with
/// a factor 2π; detunings are taken in rad/µs as given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub gamma_mhz: f64,
    pub gamma_d_mhz: f64,
    pub delta_1: f64,
    pub delta_2: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self { gamma_mhz: 1.41, gamma_d_mhz: 0.043, delta_1: 0.0, delta_2: 0.0 }
    }
}

impl SystemConfig {
    pub fn into_system(self) -> Result<RydbergSystem> {
        RydbergSystem::new(
            self.delta_1,
            self.delta_2,
            2.0 * PI * self.gamma_mhz,
            2.0 * PI * self.gamma_d_mhz,
        )
    }

    pub fn load(path: &Path) -> Result<RydbergSystem> {
        read_json::<SystemConfig>(path)?.into_system()
    }
}

/// A validated 4×4 density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.shape() != (DIM, DIM) {
            return Err(Error::validation(format!(
                "density matrix must be {DIM}x{DIM}, got {:?}",
                m.shape()
            )));
        }
        if (&m - m.adjoint()).camax() > HERMITIAN_TOL {
            return Err(Error::validation("density matrix is not Hermitian"));
        }
        let tr = m.trace();
        if (tr - c(1.0)).norm() > TRACE_TOL {
            return Err(Error::validation(format!("density matrix trace is {tr}, expected 1")));
        }
        let min = min_eigenvalue(&m);
        if min < -POSITIVITY_TOL {
            return Err(Error::validation(format!(
                "density matrix has negative eigenvalue {min:e}"
            )));
        }
        Ok(Self(m))
    }

    pub fn pure(level: usize) -> Self {
        assert!(level < DIM, "level index out of range");
        Self(outer(level, level))
    }

    pub fn maximally_mixed() -> Self {
        Self(CMatrix::identity(DIM, DIM) * c(1.0 / DIM as f64))
    }

    fn from_vec_unchecked(v: &CVector) -> Self {
        Self(CMatrix::from_column_slice(DIM, DIM, v.as_slice()))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn vectorized(&self) -> CVector {
        CVector::from_column_slice(self.0.as_slice())
    }

    pub fn population(&self, level: usize) -> f64 {
        self.0[(level, level)].re
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.0)
    }

    pub fn is_pure(&self) -> bool {
        ((&self.0 * &self.0).trace().re - 1.0).abs() <= 1e-10
    }
}

fn min_eigenvalue(m: &CMatrix) -> f64 {
    let herm = (m + m.adjoint()) * c(0.5);
    herm.symmetric_eigenvalues().min()
}

/// Piecewise-constant blue and red Rabi frequencies on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSchedule {
    omega_b: Pulse,
    omega_r: Pulse,
}

impl ControlSchedule {
    pub fn new(omega_b: Pulse, omega_r: Pulse) -> Result<Self> {
        if omega_b.len() != omega_r.len() {
            return Err(Error::invalid(format!(
                "control lengths differ: blue {} vs red {}",
                omega_b.len(),
                omega_r.len()
            )));
        }
        if omega_b.dt() != omega_r.dt() {
            return Err(Error::invalid("blue and red controls must share dt"));
        }
        Ok(Self { omega_b, omega_r })
    }

    pub fn from_samples(omega_b: Vec<f64>, omega_r: Vec<f64>, dt: f64) -> Result<Self> {
        if omega_b.is_empty() || omega_r.is_empty() {
            return Err(Error::invalid("control schedule needs at least one step"));
        }
        check_dt(dt)?;
        Self::new(
            Pulse::new(omega_b, dt)?.with_label("omega_b"),
            Pulse::new(omega_r, dt)?.with_label("omega_r"),
        )
    }

    pub fn omega_b(&self) -> &Pulse {
        &self.omega_b
    }

    pub fn omega_r(&self) -> &Pulse {
        &self.omega_r
    }

    pub fn steps(&self) -> usize {
        self.omega_b.len()
    }

    pub fn dt(&self) -> f64 {
        self.omega_b.dt()
    }

    pub fn duration(&self) -> f64 {
        self.omega_b.duration()
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DensityMatrix>,
    /// Cost of the final state against the Rydberg target `|r⟩⟨r|`.
    pub final_cost: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DensityMatrix {
        self.states.last().expect("trajectory holds the initial state")
    }
}

pub fn propagate(
    sys: &RydbergSystem,
    controls: &ControlSchedule,
    rho0: &DensityMatrix,
) -> Result<Trajectory> {
    let gens = sys.generators();
    let dt = c(controls.dt());
    let mut v = rho0.vectorized();
    let mut states = Vec::with_capacity(controls.steps() + 1);
    states.push(rho0.clone());
    for (&ob, &or) in controls.omega_b().samples().iter().zip(controls.omega_r().samples()) {
        v = expm(&(gens.at(ob, or) * dt)) * v;
        states.push(DensityMatrix::from_vec_unchecked(&v));
    }
    let final_cost = cost(states.last().unwrap(), &DensityMatrix::pure(R));
    Ok(Trajectory { states, final_cost })
}

/// `1 − |Tr(ρ_target† ρ)|²`.
pub fn cost(rho: &DensityMatrix, target: &DensityMatrix) -> f64 {
    1.0 - overlap(rho, target).norm_sqr()
}

fn overlap(rho: &DensityMatrix, target: &DensityMatrix) -> Complex64 {
    target.vectorized().dotc(&rho.vectorized())
}

#[derive(Debug, Clone)]
pub struct CostGradient {
    pub cost: f64,
    pub d_omega_b: Vec<f64>,
    pub d_omega_r: Vec<f64>,
}

/// Exact gradient of the transfer cost with respect to every control sample.
///
/// Each step derivative is `λ_jᴴ L(A_j, E) ρ_{j-1}` where `L` is the Fréchet
/// derivative of the exponential at `A_j = 𝓛_j dt` in direction `E = 𝓛_k dt`,
/// `λ_j` is the target propagated backwards and `ρ_{j-1}` the forward state.
pub fn cost_gradient(
    sys: &RydbergSystem,
    controls: &ControlSchedule,
    rho0: &DensityMatrix,
    target: &DensityMatrix,
) -> Result<CostGradient> {
    let n = controls.steps();
    if n == 0 {
        return Err(Error::invalid("zero-duration control schedule"));
    }
    let gens = sys.generators();
    let dt = c(controls.dt());
    let eb = &gens.blue * dt;
    let er = &gens.red * dt;
    let ob = controls.omega_b().samples();
    let or = controls.omega_r().samples();

    let mut gens_dt = Vec::with_capacity(n);
    let mut props = Vec::with_capacity(n);
    let mut fwd = Vec::with_capacity(n + 1);
    fwd.push(rho0.vectorized());
    for j in 0..n {
        let a = gens.at(ob[j], or[j]) * dt;
        let p = expm(&a);
        let next = &p * &fwd[j];
        gens_dt.push(a);
        props.push(p);
        fwd.push(next);
    }
    let target_vec = target.vectorized();
    let f = target_vec.dotc(&fwd[n]);

    let mut d_b = vec![0.0; n];
    let mut d_r = vec![0.0; n];
    let mut lambda = target_vec;
    for j in (0..n).rev() {
        let (lb, _) = expm_frechet_action(&gens_dt[j], &eb, &fwd[j]);
        let (lr, _) = expm_frechet_action(&gens_dt[j], &er, &fwd[j]);
        d_b[j] = -2.0 * (f.conj() * lambda.dotc(&lb)).re;
        d_r[j] = -2.0 * (f.conj() * lambda.dotc(&lr)).re;
        lambda = props[j].ad_mul(&lambda);
    }
    Ok(CostGradient { cost: 1.0 - f.norm_sqr(), d_omega_b: d_b, d_omega_r: d_r })
}

/// Cost of the standard excitation `|g⟩ → |r⟩`.
pub fn excitation_cost(sys: &RydbergSystem, controls: &ControlSchedule) -> Result<f64> {
    Ok(propagate(sys, controls, &DensityMatrix::pure(G))?.final_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse::rng_from_seed;
    use rand::Rng;

    fn random_controls(steps: usize, dt: f64, max: f64, seed: u64) -> ControlSchedule {
        let mut rng = rng_from_seed(seed);
        let b = (0..steps).map(|_| rng.random_range(0.0..max)).collect();
        let r = (0..steps).map(|_| rng.random_range(0.0..max)).collect();
        ControlSchedule::from_samples(b, r, dt).unwrap()
    }

    #[test]
    fn paper_rates() {
        let s = RydbergSystem::default();
        assert!((s.gamma - 2.0 * PI * 1.41).abs() < 1e-12);
        assert!((s.gamma_dephasing - 2.0 * PI * 0.043).abs() < 1e-12);
        assert_eq!(s.gamma_g() + s.gamma_g_prime(), s.gamma);
        assert!((s.gamma_g_prime() - 2.0 * s.gamma_g()).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_examples() {
        let s = RydbergSystem::default();
        assert_eq!(s.hamiltonian(0.0, 0.0), CMatrix::zeros(DIM, DIM));
        let h = s.hamiltonian(2.0 * PI, 0.0);
        let mut expected = CMatrix::zeros(DIM, DIM);
        expected[(G, P)] = c(PI);
        expected[(P, G)] = c(PI);
        assert!((h - expected).camax() < 1e-15);
        let s = RydbergSystem::new(1.3, -0.7, 0.0, 0.0).unwrap();
        let h = s.hamiltonian(3.1, -2.2);
        assert_eq!(h, h.adjoint());
        assert_eq!(h[(P, P)], c(-1.3));
        assert_eq!(h[(R, R)], c(0.7));
        assert_eq!(h.row(G_PRIME).camax(), 0.0);
    }

    #[test]
    fn negative_rates_rejected() {
        assert!(RydbergSystem::new(0.0, 0.0, -1.0, 0.0).is_err());
        assert!(RydbergSystem::new(0.0, 0.0, 1.0, -1e-3).is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg: SystemConfig = serde_json::from_str(r#"{"gamma_mhz": 2.0}"#).unwrap();
        let s = cfg.into_system().unwrap();
        assert!((s.gamma - 4.0 * PI).abs() < 1e-12);
        assert!((s.gamma_dephasing - 2.0 * PI * 0.043).abs() < 1e-12);
        assert!(serde_json::from_str::<SystemConfig>(r#"{"gamma": 2.0}"#).is_err());
    }

    #[test]
    fn liouvillian_matches_direct_action() {
        let s = RydbergSystem::new(0.4, -0.3, 2.0, 0.5).unwrap();
        let (ob, or) = (3.0, 1.7);
        let mut rng = rng_from_seed(3);
        let x = CMatrix::from_fn(DIM, DIM, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let h = s.hamiltonian(ob, or);
        let mut direct = (&h * &x - &x * &h) * Complex64::new(0.0, -1.0);
        for v in s.jump_operators() {
            let vdv = v.adjoint() * &v;
            direct += &v * &x * v.adjoint() - (&vdv * &x + &x * &vdv) * c(0.5);
        }
        let via = s.liouvillian(ob, or) * CVector::from_column_slice(x.as_slice());
        assert!((via - CVector::from_column_slice(direct.as_slice())).camax() < 1e-12);
    }

    #[test]
    fn zero_system_has_identity_propagator() {
        let p = RydbergSystem::lossless().step_propagator(0.0, 0.0, 0.01).unwrap();
        assert!((p - CMatrix::identity(16, 16)).camax() < 1e-15);
        assert!(RydbergSystem::lossless().step_propagator(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn step_propagator_preserves_trace() {
        let s = RydbergSystem::default();
        let mut rng = rng_from_seed(5);
        for dt in [1e-4, 1e-3, 0.01] {
            let p = s
                .step_propagator(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), dt)
                .unwrap();
            // trace functional is vec(I); preservation means vec(I)ᴴ P = vec(I)ᴴ
            let tr = CVector::from_column_slice(CMatrix::identity(DIM, DIM).as_slice());
            let row = p.ad_mul(&tr);
            assert!((row - tr).camax() < 1e-12);
        }
    }

    #[test]
    fn intermediate_decay_follows_single_exponential() {
        let s = RydbergSystem::default();
        let ctrl = ControlSchedule::from_samples(vec![0.0; 100], vec![0.0; 100], 0.005).unwrap();
        let traj = propagate(&s, &ctrl, &DensityMatrix::pure(P)).unwrap();
        for (j, st) in traj.states.iter().enumerate() {
            let t = j as f64 * 0.005;
            let pp = (-s.gamma * t).exp();
            assert!((st.population(P) - pp).abs() < 1e-12);
            assert!((st.population(G) - (1.0 - pp) / 3.0).abs() < 1e-12);
            assert!((st.population(G_PRIME) - 2.0 * (1.0 - pp) / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_state_is_dark_without_drive() {
        let ctrl = ControlSchedule::from_samples(vec![0.0; 20], vec![0.0; 20], 0.01).unwrap();
        let traj = propagate(&RydbergSystem::default(), &ctrl, &DensityMatrix::pure(G)).unwrap();
        for st in &traj.states {
            assert!((st.matrix() - DensityMatrix::pure(G).matrix()).camax() < 1e-14);
        }
        assert!((traj.final_cost - 1.0).abs() < 1e-14);
    }

    #[test]
    fn resonant_rabi_oscillation() {
        let omega = 2.0 * PI * 5.0;
        let dt = 0.001;
        let ctrl = ControlSchedule::from_samples(vec![omega; 300], vec![0.0; 300], dt).unwrap();
        let traj = propagate(&RydbergSystem::lossless(), &ctrl, &DensityMatrix::pure(G)).unwrap();
        for (j, st) in traj.states.iter().enumerate() {
            let t = j as f64 * dt;
            let expected = (omega * t / 2.0).sin().powi(2);
            assert!((st.population(P) - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn trajectories_stay_physical() {
        let s = RydbergSystem::default();
        let ctrl = random_controls(100, 0.004, 2.0 * PI * 30.0, 11);
        let traj = propagate(&s, &ctrl, &DensityMatrix::pure(G)).unwrap();
        assert_eq!(traj.states.len(), 101);
        for st in &traj.states {
            assert!((st.trace() - c(1.0)).norm() < 1e-9);
            assert!(st.min_eigenvalue() >= -1e-9);
            assert!(DensityMatrix::new(st.matrix().clone()).is_ok());
        }
    }

    #[test]
    fn cost_examples() {
        let r = DensityMatrix::pure(R);
        assert_eq!(cost(&r, &r), 0.0);
        assert_eq!(cost(&DensityMatrix::pure(G), &r), 1.0);
        assert!((cost(&DensityMatrix::maximally_mixed(), &r) - 0.9375).abs() < 1e-15);
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(CMatrix::identity(DIM, DIM)).is_err());
        let mut m = outer(G, G);
        m[(G, P)] = Complex64::new(0.0, 0.1);
        assert!(DensityMatrix::new(m).is_err());
        let m = (outer(G, G) * c(1.5)) - outer(P, P) * c(0.5);
        assert!(DensityMatrix::new(m).is_err());
        assert!(DensityMatrix::pure(R).is_pure());
        assert!(!DensityMatrix::maximally_mixed().is_pure());
    }

    fn fd_check(s: &RydbergSystem, ctrl: &ControlSchedule) -> f64 {
        let rho0 = DensityMatrix::pure(G);
        let target = DensityMatrix::pure(R);
        let g = cost_gradient(s, ctrl, &rho0, &target).unwrap();
        let base = propagate(s, ctrl, &rho0).unwrap().final_cost;
        assert!((g.cost - base).abs() < 1e-12);
        let h = 1e-6;
        let mut worst = 0.0f64;
        let scale = g
            .d_omega_b
            .iter()
            .chain(&g.d_omega_r)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        for which in 0..2 {
            for j in 0..ctrl.steps() {
                let shifted = |delta: f64| {
                    let mut b = ctrl.omega_b().samples().to_vec();
                    let mut r = ctrl.omega_r().samples().to_vec();
                    if which == 0 { b[j] += delta } else { r[j] += delta }
                    let c = ControlSchedule::from_samples(b, r, ctrl.dt()).unwrap();
                    propagate(s, &c, &rho0).unwrap().final_cost
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let an = if which == 0 { g.d_omega_b[j] } else { g.d_omega_r[j] };
                worst = worst.max((fd - an).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = RydbergSystem::new(0.3, -0.2, 2.0 * PI * 1.41, 2.0 * PI * 0.043).unwrap();
        for seed in 0..3 {
            let ctrl = random_controls(8, 0.02, 2.0 * PI * 30.0, seed);
            let err = fd_check(&s, &ctrl);
            assert!(err <= 1e-5, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn gradient_vanishes_at_perfect_transfer() {
        // target equals the untouched initial state
        let ctrl = ControlSchedule::from_samples(vec![0.0; 4], vec![0.0; 4], 0.01).unwrap();
        let g = DensityMatrix::pure(G);
        let grad = cost_gradient(&RydbergSystem::default(), &ctrl, &g, &g).unwrap();
        assert_eq!(grad.cost, 0.0);
        assert!(grad.d_omega_b.iter().chain(&grad.d_omega_r).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn empty_schedule_rejected() {
        assert!(ControlSchedule::from_samples(vec![], vec![], 0.01).is_err());
        assert!(ControlSchedule::from_samples(vec![1.0], vec![1.0, 2.0], 0.01).is_err());
    }

    #[test]
    fn halving_dt_converges_at_first_order() {
        let s = RydbergSystem::default();
        let t = 0.3;
        let cost_at = |n: usize| {
            let dt = t / n as f64;
            let shape = |center: f64| -> Vec<f64> {
                (0..n)
                    .map(|j| {
                        let x = (j as f64 * dt - center) / (t / 6.0);
                        2.0 * PI * 15.0 * (-0.5 * x * x).exp()
                    })
                    .collect()
            };
            let ctrl = ControlSchedule::from_samples(shape(0.6 * t), shape(0.4 * t), dt).unwrap();
            excitation_cost(&s, &ctrl).unwrap()
        };
        let (c1, c2, c3) = (cost_at(50), cost_at(100), cost_at(200));
        let ratio = (c1 - c2) / (c2 - c3);
        assert!((1.5..=4.0).contains(&ratio), "ratio {ratio}");
    }
}
