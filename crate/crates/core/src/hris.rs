//! Preamble processing at the surface: element activation, NOMP path
//! extraction, phase-shift design and LS gain recalibration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rustfft::{FftDirection, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::channel::{array_response_upa, spatial_freqs, GammaKernel, UrPath};
use crate::ddframe::{OtfsConfig, SymbolPattern};
use crate::math::{cis, complex_normal};
use crate::{Error, Result, C64};

/// Which elements feed the RF chains in each preamble block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSchedule {
    pub nx: usize,
    pub ny: usize,
    pub n_rf: usize,
    pub n_b: usize,
}

impl ActivationSchedule {
    /// `N_B = 2 N_x / N_RF` blocks over a square `N_x x N_x` surface.
    pub fn new(nx: usize, ny: usize, n_rf: usize) -> Result<Self> {
        if nx != ny {
            return Err(Error::Config(format!("activation walk needs a square surface, got {nx}x{ny}")));
        }
        if n_rf == 0 || nx % n_rf != 0 {
            return Err(Error::Config(format!("N_RF = {n_rf} must divide N_x = {nx}")));
        }
        Ok(Self { nx, ny, n_rf, n_b: 2 * nx / n_rf })
    }

    /// 1-based element indices active in block `n_b` (1-based).
    pub fn activation_indices(&self, n_b: usize) -> Result<Vec<usize>> {
        if n_b == 0 || n_b > self.n_b {
            return Err(Error::OutOfRange { index: n_b, max: self.n_b });
        }
        let half = self.nx / self.n_rf;
        Ok((1..=self.n_rf)
            .map(|rf| {
                if n_b <= half {
                    (n_b - 1) * self.n_rf + rf
                } else {
                    ((n_b - 1) * self.n_rf - self.nx + rf - 1) * self.nx + 1
                }
            })
            .collect())
    }

    /// `(ix, iy)` array position of every observation slot `(block, rf)`,
    /// block-major.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        (1..=self.n_b)
            .flat_map(|b| self.activation_indices(b).expect("block in range"))
            .map(|r| ((r - 1) / self.ny, (r - 1) % self.ny))
            .collect()
    }
}

/// Constant-modulus training sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preamble {
    pub t: Vec<C64>,
}

impl Preamble {
    /// Zadoff-Chu sequence with root 1.
    pub fn zadoff_chu(n_t: usize) -> Self {
        let n = n_t as f64;
        let t = (0..n_t)
            .map(|i| {
                let i = i as f64;
                let e = if n_t % 2 == 0 { i * i } else { i * (i + 1.0) };
                cis(-PI * e / n)
            })
            .collect();
        Self { t }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `t_{(n - d)_{N_T}}`.
    #[inline]
    pub fn shifted(&self, n: usize, d: usize) -> C64 {
        let len = self.t.len();
        self.t[(n + len - d % len) % len]
    }
}

/// Stacked preamble observation. Entry `(n_t, slot)` sits at
/// `n_t * (N_B N_RF) + slot` with `slot = block * N_RF + rf`.
#[derive(Debug, Clone, PartialEq)]
pub struct HrisObservation {
    pub y: Vec<C64>,
    pub sigma2: f64,
    pub n_t: usize,
    pub slots: usize,
}

/// Continuous path parameters in sample units.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AtomParams {
    delay: usize,
    /// `2π ν Ts`
    nu: f64,
    wx: f64,
    wy: f64,
}

/// Precomputed index geometry shared by simulation and extraction.
struct Layout {
    n_t: usize,
    /// `(global time offset, ix, iy)` per slot
    slots: Vec<(usize, f64, f64)>,
}

impl Layout {
    fn preamble(schedule: &ActivationSchedule, n_t: usize) -> Self {
        let slots = schedule
            .positions()
            .into_iter()
            .enumerate()
            .map(|(s, (ix, iy))| ((s / schedule.n_rf) * n_t, ix as f64, iy as f64))
            .collect();
        Self { n_t, slots }
    }

    /// Elements `1..=n_rf` of the surface at a fixed time offset.
    fn short(n_rf: usize, ny: usize, n_t: usize, offset: usize) -> Self {
        let slots = (0..n_rf).map(|r| (offset, (r / ny) as f64, (r % ny) as f64)).collect();
        Self { n_t, slots }
    }

    fn len(&self) -> usize {
        self.n_t * self.slots.len()
    }

    fn atom(&self, pre: &Preamble, p: &AtomParams) -> Vec<C64> {
        let mut a = Vec::with_capacity(self.len());
        for n in 0..self.n_t {
            let t = pre.shifted(n, p.delay);
            for &(g0, ix, iy) in &self.slots {
                a.push(t * cis(p.nu * (g0 + n) as f64 - ix * p.wx - iy * p.wy));
            }
        }
        a
    }
}

fn params_of(path: &UrPath, ts: f64) -> AtomParams {
    let (wx, wy) = spatial_freqs(path.phi, path.psi);
    AtomParams { delay: path.delay_taps, nu: 2.0 * PI * path.doppler * ts, wx, wy }
}

/// `h̄ = h e^{-j2πντ}`.
fn gain_bar(path: &UrPath, ts: f64) -> C64 {
    path.gain * cis(-2.0 * PI * path.doppler * path.delay_taps as f64 * ts)
}

fn add_noise<R: Rng + ?Sized>(y: &mut [C64], sigma2: f64, rng: &mut R) {
    if sigma2 > 0.0 {
        for v in y {
            *v += complex_normal(rng, sigma2);
        }
    }
}

/// Preamble received at the active elements over all `N_B` blocks.
pub fn simulate_preamble<R: Rng + ?Sized>(
    paths: &[UrPath],
    preamble: &Preamble,
    schedule: &ActivationSchedule,
    ts: f64,
    sigma2: f64,
    rng: &mut R,
) -> HrisObservation {
    let layout = Layout::preamble(schedule, preamble.len());
    let mut y = vec![C64::new(0.0, 0.0); layout.len()];
    for path in paths {
        let hb = gain_bar(path, ts);
        for (v, a) in y.iter_mut().zip(layout.atom(preamble, &params_of(path, ts))) {
            *v += hb * a;
        }
    }
    add_noise(&mut y, sigma2, rng);
    HrisObservation { y, sigma2, n_t: preamble.len(), slots: layout.slots.len() }
}

/// Short calibration pilot seen by elements `1..=N_RF`, modelled one sample
/// after the reference time.
pub fn simulate_short_pilot<R: Rng + ?Sized>(
    paths: &[UrPath],
    preamble: &Preamble,
    n_rf: usize,
    ny: usize,
    ts: f64,
    sigma2: f64,
    rng: &mut R,
) -> HrisObservation {
    let layout = Layout::short(n_rf, ny, preamble.len(), 1);
    let mut y = vec![C64::new(0.0, 0.0); layout.len()];
    for path in paths {
        let hb = gain_bar(path, ts);
        for (v, a) in y.iter_mut().zip(layout.atom(preamble, &params_of(path, ts))) {
            *v += hb * a;
        }
    }
    add_noise(&mut y, sigma2, rng);
    HrisObservation { y, sigma2, n_t: preamble.len(), slots: n_rf }
}

/// One extracted path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    /// `h̄^UR`
    pub gain_bar: C64,
    pub delay_taps: usize,
    pub doppler: f64,
    pub phi: f64,
    pub psi: f64,
}

impl PathEstimate {
    /// `ĥ^UR = h̄^UR e^{j2πντ}`.
    pub fn gain(&self, ts: f64) -> C64 {
        self.gain_bar * cis(2.0 * PI * self.doppler * self.delay_taps as f64 * ts)
    }

    fn params(&self, ts: f64) -> AtomParams {
        let (wx, wy) = spatial_freqs(self.phi, self.psi);
        AtomParams { delay: self.delay_taps, nu: 2.0 * PI * self.doppler * ts, wx, wy }
    }

    fn from_params(p: &AtomParams, gain_bar: C64, ts: f64) -> Self {
        let ux = wrap_pi(p.wx) / PI;
        let uy = wrap_pi(p.wy) / PI;
        let s = (ux * ux + uy * uy).sqrt().min(1.0);
        Self {
            gain_bar,
            delay_taps: p.delay,
            doppler: p.nu / (2.0 * PI * ts),
            phi: s.asin(),
            psi: if s > 0.0 { ux.atan2(uy) } else { 0.0 },
        }
    }
}

fn wrap_pi(w: f64) -> f64 {
    let r = (w + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// NOMP controls.
#[derive(Debug, Clone, PartialEq)]
pub struct NompParams {
    pub max_paths: usize,
    /// Stop when the relative residual-energy reduction of a new path falls
    /// below this value.
    pub stop_threshold: f64,
    /// Newton iterations per refinement.
    pub refine_iters: usize,
    /// Cyclic refinement passes after each addition.
    pub cyclic_passes: usize,
    /// False-alarm rate of the noise-floor detection test.
    pub p_fa: f64,
    /// Largest delay tap to search.
    pub max_delay: usize,
    /// Doppler search bound in Hz.
    pub nu_max: f64,
    pub ts: f64,
    /// Restrict angles to `±window` (in spatial frequency) around these
    /// `(φ, ψ)` centres.
    pub search_window: Option<(Vec<(f64, f64)>, f64)>,
}

impl NompParams {
    pub fn new(max_paths: usize, max_delay: usize, nu_max: f64, ts: f64) -> Self {
        Self {
            max_paths,
            stop_threshold: 1e-3,
            refine_iters: 3,
            cyclic_passes: 8,
            p_fa: 1e-2,
            max_delay,
            nu_max,
            ts,
            search_window: None,
        }
    }
}

/// Extraction result with the residual energy after every addition.
#[derive(Debug, Clone, PartialEq)]
pub struct NompOutput {
    pub paths: Vec<PathEstimate>,
    pub residual_energy: Vec<f64>,
}

struct Extractor<'a> {
    layout: Layout,
    pre: &'a Preamble,
    y: &'a [C64],
}

impl Extractor<'_> {
    /// `a^H r`, gradient and Hessian of it with respect to `(ν, ωx, ωy)`.
    fn correlate(&self, r: &[C64], p: &AtomParams) -> (C64, Vector3<C64>, Matrix3<C64>) {
        let mut c = C64::new(0.0, 0.0);
        let mut g = Vector3::<C64>::zeros();
        let mut h = Matrix3::<C64>::zeros();
        let slots = self.layout.slots.len();
        for n in 0..self.layout.n_t {
            let t = self.pre.shifted(n, p.delay).conj();
            for (s, &(g0, ix, iy)) in self.layout.slots.iter().enumerate() {
                let gt = (g0 + n) as f64;
                let e = t * cis(-(p.nu * gt - ix * p.wx - iy * p.wy)) * r[n * slots + s];
                let d = Vector3::new(gt, -ix, -iy);
                c += e;
                for a in 0..3 {
                    g[a] += C64::new(0.0, -d[a]) * e;
                    for b in a..3 {
                        h[(a, b)] -= e * (d[a] * d[b]);
                    }
                }
            }
        }
        for a in 0..3 {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        (c, g, h)
    }

    fn energy(&self) -> f64 {
        self.layout.len() as f64
    }

    /// Newton ascent on `|a^H r|²` with monotone acceptance.
    fn refine(&self, r: &[C64], mut p: AtomParams, iters: usize, nu_bound: f64) -> AtomParams {
        let l = self.energy();
        let objective = |p: &AtomParams| self.correlate(r, p).0.norm_sqr() / l;
        let mut f = objective(&p);
        for _ in 0..iters {
            let (c, dc, d2c) = self.correlate(r, &p);
            let grad = Vector3::from_fn(|a, _| 2.0 * (c.conj() * dc[a]).re / l);
            let hess = Matrix3::from_fn(|a, b| 2.0 * (dc[a].conj() * dc[b] + c.conj() * d2c[(a, b)]).re / l);
            let step = match hess.try_inverse() {
                Some(inv) if hess.symmetric_eigenvalues().iter().all(|e| *e < 0.0) => -(inv * grad),
                _ => {
                    log::debug!("NOMP Newton step skipped: Hessian not negative definite");
                    break;
                }
            };
            let cand = AtomParams { nu: p.nu + step[0], wx: p.wx + step[1], wy: p.wy + step[2], ..p };
            if cand.nu.abs() > nu_bound {
                break;
            }
            let fc = objective(&cand);
            if fc >= f {
                p = cand;
                f = fc;
                if step.norm() < 1e-13 {
                    break;
                }
            } else {
                break;
            }
        }
        p
    }

    /// Coarse grid search over delay, Doppler and angle.
    fn coarse(&self, r: &[C64], prm: &NompParams, sched: &ActivationSchedule) -> (AtomParams, f64) {
        let n_t = self.layout.n_t;
        let slots = self.layout.slots.len();
        let duration = (sched.n_b * n_t) as f64;
        let nu_max = 2.0 * PI * prm.nu_max * prm.ts;
        let step = 2.0 * PI / (4.0 * duration);
        let half = (nu_max / step).ceil() as i64;
        let nx = sched.nx;
        let fft_len = 2 * nx;
        let fft = FftPlanner::new().plan_fft(fft_len, FftDirection::Inverse);
        let grid_w = |i: usize| 2.0 * PI * i as f64 / fft_len as f64;
        let allowed = |wx: f64, wy: f64| match &prm.search_window {
            None => true,
            Some((centres, win)) => centres.iter().any(|&(phi, psi)| {
                let (cx, cy) = spatial_freqs(phi, psi);
                wrap_pi(wx - cx).abs() <= *win && wrap_pi(wy - cy).abs() <= *win
            }),
        };
        let mut best = (AtomParams { delay: 0, nu: 0.0, wx: 0.0, wy: 0.0 }, -1.0);
        let mut row_buf = vec![C64::new(0.0, 0.0); fft_len];
        let mut col_buf = vec![C64::new(0.0, 0.0); fft_len];
        for d in 0..=prm.max_delay.min(n_t - 1) {
            for iv in -half..=half {
                let nu = if half > 0 { iv as f64 * nu_max / half as f64 } else { 0.0 };
                row_buf.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                col_buf.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                for (s, &(g0, ix, iy)) in self.layout.slots.iter().enumerate() {
                    let mut u = C64::new(0.0, 0.0);
                    for n in 0..n_t {
                        u += self.pre.shifted(n, d).conj() * cis(-nu * (g0 + n) as f64) * r[n * slots + s];
                    }
                    // row walk varies iy, column walk varies ix
                    if s / sched.n_rf < sched.n_b / 2 {
                        row_buf[iy as usize] += u;
                    } else {
                        col_buf[ix as usize] += u;
                    }
                }
                fft.process(&mut row_buf);
                fft.process(&mut col_buf);
                for (iy, sy) in row_buf.iter().enumerate() {
                    for (ix, sx) in col_buf.iter().enumerate() {
                        let (wx, wy) = (grid_w(ix), grid_w(iy));
                        if !allowed(wx, wy) {
                            continue;
                        }
                        let v = (sy + sx).norm_sqr();
                        if v > best.1 {
                            best = (AtomParams { delay: d, nu, wx, wy }, v);
                        }
                    }
                }
            }
        }
        let l = self.energy();
        (best.0, best.1 / l)
    }

    /// LS gains for all atoms and the resulting residual.
    fn refit(&self, params: &[AtomParams]) -> (Vec<C64>, Vec<C64>) {
        let atoms: Vec<Vec<C64>> = params.iter().map(|p| self.layout.atom(self.pre, p)).collect();
        let gains = least_squares(&atoms, self.y).unwrap_or_else(|| vec![C64::new(0.0, 0.0); params.len()]);
        let mut r = self.y.to_vec();
        for (a, g) in atoms.iter().zip(&gains) {
            for (v, x) in r.iter_mut().zip(a) {
                *v -= g * x;
            }
        }
        (gains, r)
    }
}

/// `(A^H A)^{-1} A^H y` for column set `atoms`, `None` when rank deficient.
fn least_squares(atoms: &[Vec<C64>], y: &[C64]) -> Option<Vec<C64>> {
    let rows = y.len();
    let a = DMatrix::from_fn(rows, atoms.len(), |i, j| atoms[j][i]);
    let svd = a.clone().svd(false, false);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if atoms.is_empty() || smax == 0.0 || smin <= 1e-10 * smax {
        return None;
    }
    let ah = a.adjoint();
    let gram = &ah * &a;
    let rhs = &ah * DVector::from_column_slice(y);
    gram.cholesky().map(|c| c.solve(&rhs).iter().copied().collect())
}

/// Greedy path extraction with Newton refinement and LS re-fitting.
pub fn nomp_extract(
    obs: &HrisObservation,
    preamble: &Preamble,
    schedule: &ActivationSchedule,
    prm: &NompParams,
) -> NompOutput {
    let ex = Extractor { layout: Layout::preamble(schedule, preamble.len()), pre: preamble, y: &obs.y };
    let atoms_in_dictionary = ((prm.max_delay + 1) * 4 * schedule.nx * schedule.nx) as f64;
    let tau = obs.sigma2 * (atoms_in_dictionary.ln() - (-(1.0 - prm.p_fa).ln()).ln());
    let nu_bound = 2.0 * 2.0 * PI * prm.nu_max * prm.ts;
    let mut params: Vec<AtomParams> = Vec::new();
    let mut residual = obs.y.clone();
    let mut energy = crate::math::energy(&residual);
    let mut history = Vec::new();
    let mut gains = Vec::new();
    while params.len() < prm.max_paths {
        let (cand, stat) = ex.coarse(&residual, prm, schedule);
        if stat <= tau || stat <= 0.0 {
            break;
        }
        let cand = ex.refine(&residual, cand, prm.refine_iters.max(1) * 4, nu_bound);
        let mut trial = params.clone();
        trial.push(cand);
        let (mut g, mut r) = ex.refit(&trial);
        let mut e_pass = crate::math::energy(&r);
        for _ in 0..prm.cyclic_passes {
            for i in 0..trial.len() {
                let a = ex.layout.atom(preamble, &trial[i]);
                let own: Vec<C64> = r.iter().zip(&a).map(|(v, x)| v + g[i] * x).collect();
                trial[i] = ex.refine(&own, trial[i], prm.refine_iters, nu_bound);
            }
            (g, r) = ex.refit(&trial);
            let e = crate::math::energy(&r);
            let settled = e >= e_pass * (1.0 - 1e-9);
            e_pass = e;
            if settled {
                break;
            }
        }
        let new_energy = e_pass;
        let gain = if energy > 0.0 { (energy - new_energy) / energy } else { 0.0 };
        if new_energy > energy * (1.0 + 1e-12) || gain < prm.stop_threshold {
            break;
        }
        params = trial;
        gains = g;
        residual = r;
        energy = new_energy;
        history.push(energy);
        if energy == 0.0 {
            break;
        }
    }
    let paths = params.iter().zip(&gains).map(|(p, g)| PathEstimate::from_params(p, *g, prm.ts)).collect();
    NompOutput { paths, residual_energy: history }
}

/// `|S_p|² = Σ_{(k,l) ∈ C∖C_P} Σ_q |γ(k,l,l_τ,q,k_ν,β)|²`.
pub fn interference_energy(l_tau: usize, k_nu: i64, beta_nu: f64, pattern: &SymbolPattern, cfg: &OtfsConfig) -> f64 {
    let ker = GammaKernel::new(l_tau, k_nu, beta_nu, cfg, 0.0);
    let mut total = 0.0;
    for (i, role) in pattern.roles().iter().enumerate() {
        if *role == crate::ddframe::GridRole::Pilot {
            continue;
        }
        let (row, l) = (i / cfg.m, i % cfg.m);
        for q in 0..cfg.n {
            total += ker.coeff(row, l, q).0.norm_sqr();
        }
    }
    total
}

/// Unit-modulus HRIS configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseShiftVector {
    pub omega: Vec<C64>,
}

impl PhaseShiftVector {
    pub fn new(omega: Vec<C64>) -> Result<Self> {
        if let Some(bad) = omega.iter().find(|w| (w.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::Config(format!("phase shift {bad} is not unit modulus")));
        }
        Ok(Self { omega })
    }

    /// All-zero phases.
    pub fn zero_phase(n_r: usize) -> Self {
        Self { omega: vec![C64::new(1.0, 0.0); n_r] }
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// Per-path inputs of the phase-shift design.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamPath {
    pub gain: C64,
    pub phi: f64,
    pub psi: f64,
    /// `|S_p|²`
    pub s2: f64,
}

/// Closed-form phase design: element-wise phase of
/// `Σ_p |S_p||h_p| [a_R(φ_r,ψ_r)]_n [a_R*(φ_p,ψ_p)]_n`. Zero sums get phase 0.
pub fn beamform(paths: &[BeamPath], phi_r: f64, psi_r: f64, nx: usize, ny: usize) -> PhaseShiftVector {
    let a_r = array_response_upa(phi_r, psi_r, nx, ny);
    let mut acc = vec![C64::new(0.0, 0.0); nx * ny];
    for p in paths {
        let w = p.s2.sqrt() * p.gain.norm();
        for (v, (r, a)) in acc.iter_mut().zip(a_r.iter().zip(array_response_upa(p.phi, p.psi, nx, ny))) {
            *v += w * r * a.conj();
        }
    }
    let omega = acc
        .into_iter()
        .map(|v| if v.norm() > 0.0 { v / v.norm() } else { C64::new(1.0, 0.0) })
        .collect();
    PhaseShiftVector { omega }
}

/// Phase-design objective `Σ_p |h_p|² |S_p|² |Σ_n [a_R^*(φ_r,ψ_r)]_n [a_R(φ_p,ψ_p)]_n ω_n|²`.
pub fn p2_objective(omega: &[C64], paths: &[BeamPath], phi_r: f64, psi_r: f64, nx: usize, ny: usize) -> f64 {
    let a_r = array_response_upa(phi_r, psi_r, nx, ny);
    paths
        .iter()
        .map(|p| {
            let a_p = array_response_upa(p.phi, p.psi, nx, ny);
            let c: C64 = a_r.iter().zip(&a_p).zip(omega).map(|((r, a), w)| r.conj() * a * w).sum();
            p.gain.norm_sqr() * p.s2 * c.norm_sqr()
        })
        .sum()
}

/// LS gain update from the short pilot with frozen delay, Doppler and angles.
/// Returns `ĥ^UR` per path.
pub fn ls_calibrate(
    obs_short: &HrisObservation,
    preamble: &Preamble,
    estimates: &[PathEstimate],
    ny: usize,
    ts: f64,
) -> Result<Vec<C64>> {
    let layout = Layout::short(obs_short.slots, ny, preamble.len(), 1);
    if obs_short.y.len() != layout.len() {
        return Err(Error::Dimension { expected: layout.len(), got: obs_short.y.len() });
    }
    let atoms: Vec<Vec<C64>> = estimates.iter().map(|e| layout.atom(preamble, &e.params(ts))).collect();
    let hb = least_squares(&atoms, &obs_short.y)
        .ok_or_else(|| Error::CalibrationSkipped("calibration matrix is rank deficient".into()))?;
    Ok(hb.iter().zip(estimates).map(|(h, e)| h * cis(2.0 * PI * e.doppler * e.delay_taps as f64 * ts)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::derive_rng;

    const TS: f64 = 50e-9;

    fn path(gain: C64, delay: usize, doppler: f64, phi: f64, psi: f64) -> UrPath {
        UrPath { gain, delay_taps: delay, doppler, phi, psi, prior_variance: 1.0 }
    }

    #[test]
    fn activation_walk() {
        let s = ActivationSchedule::new(64, 64, 8).unwrap();
        assert_eq!(s.n_b, 16);
        assert_eq!(s.activation_indices(1).unwrap(), (1..=8).collect::<Vec<_>>());
        assert_eq!(s.activation_indices(9).unwrap(), (0..8).map(|i| i * 64 + 1).collect::<Vec<_>>());
        assert!(s.activation_indices(17).is_err());
        let mut all: Vec<usize> = (1..=16).flat_map(|b| s.activation_indices(b).unwrap()).collect();
        assert_eq!(all.len(), 128);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 127);
        assert!(ActivationSchedule::new(8, 4, 2).is_err());
    }

    #[test]
    fn zadoff_chu_constant_modulus() {
        for n in [15, 16] {
            let p = Preamble::zadoff_chu(n);
            assert!(p.t.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
            // ideal periodic autocorrelation
            for d in 1..n {
                let c: C64 = (0..n).map(|i| p.t[i] * p.shifted(i, d).conj()).sum();
                assert!(c.norm() < 1e-9, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn trivial_preamble() {
        let s = ActivationSchedule::new(4, 4, 2).unwrap();
        let pre = Preamble::zadoff_chu(8);
        let h = C64::new(0.6, -0.2);
        let mut rng = derive_rng(0, &[]);
        let obs = simulate_preamble(&[path(h, 0, 0.0, 0.0, 0.3)], &pre, &s, TS, 0.0, &mut rng);
        for n in 0..8 {
            for slot in 0..obs.slots {
                assert!((obs.y[n * obs.slots + slot] - h * pre.t[n]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn single_on_grid_path_exact() {
        let s = ActivationSchedule::new(8, 8, 2).unwrap();
        let pre = Preamble::zadoff_chu(16);
        let (wx, wy) = (2.0 * PI * 3.0 / 16.0, 2.0 * PI * 5.0 / 16.0);
        let ux = wx / PI;
        let uy = wy / PI;
        let phi = (ux * ux + uy * uy).sqrt().asin();
        let psi = ux.atan2(uy);
        let truth = path(C64::new(0.8, 0.5), 3, 0.0, phi, psi);
        let mut rng = derive_rng(0, &[]);
        let obs = simulate_preamble(&[truth], &pre, &s, TS, 0.0, &mut rng);
        let out = nomp_extract(&obs, &pre, &s, &NompParams::new(3, 6, 5e3, TS));
        assert_eq!(out.paths.len(), 1);
        let e = out.paths[0];
        assert_eq!(e.delay_taps, 3);
        assert!(e.doppler.abs() < 1e-4);
        assert!((e.phi - phi).abs() < 1e-10 && (e.psi - psi).abs() < 1e-10);
        assert!((e.gain(TS) - truth.gain).norm() < 1e-10);
    }

    #[test]
    fn off_grid_paths_recovered() {
        let s = ActivationSchedule::new(8, 8, 2).unwrap();
        let pre = Preamble::zadoff_chu(16);
        let truth = [
            path(C64::new(1.0, 0.2), 0, 3000.0, 0.5, 0.4),
            path(C64::new(-0.4, 0.5), 2, -1500.0, 0.9, 2.3),
        ];
        let mut rng = derive_rng(2, &[]);
        let obs = simulate_preamble(&truth, &pre, &s, TS, 0.0, &mut rng);
        let out = nomp_extract(&obs, &pre, &s, &NompParams::new(4, 6, 5e3, TS));
        assert!(out.residual_energy.windows(2).all(|w| w[1] <= w[0]));
        for t in &truth {
            let e = out.paths.iter().find(|e| e.delay_taps == t.delay_taps).expect("path found");
            assert!((e.phi - t.phi).abs() < 1e-6 && (e.psi - t.psi).abs() < 1e-6);
            assert!((e.doppler - t.doppler).abs() < 1.0);
            assert!((e.gain(TS) - t.gain).norm() < 1e-6);
        }
    }

    #[test]
    fn noise_only_yields_no_paths() {
        let s = ActivationSchedule::new(8, 8, 2).unwrap();
        let pre = Preamble::zadoff_chu(16);
        let mut rng = derive_rng(5, &[]);
        let obs = simulate_preamble(&[], &pre, &s, TS, 1.0, &mut rng);
        let out = nomp_extract(&obs, &pre, &s, &NompParams::new(3, 6, 5e3, TS));
        assert!(out.paths.len() <= 1);
    }

    #[test]
    fn interference_energy_counts() {
        let cfg = OtfsConfig::new(8, 8, 1.0).unwrap();
        let pat = crate::ddframe::build_pattern(&cfg, 4, 2, crate::ddframe::PatternVariant::Proposed, 0.0).unwrap();
        let brute: f64 = (0..8)
            .flat_map(|row| (0..8).map(move |l| (row, l)))
            .filter(|&(row, l)| !(row < 4 && l < 2))
            .map(|(row, l)| {
                (0..8).map(|q| crate::channel::gamma(cfg.k_of(row), l, 1, q, 0, 0.3, &cfg).norm_sqr()).sum::<f64>()
            })
            .sum();
        assert!((interference_energy(1, 0, 0.3, &pat, &cfg) - brute).abs() < 1e-10);
        assert!((interference_energy(2, 1, 0.0, &pat, &cfg) - 56.0).abs() < 1e-10);
    }

    #[test]
    fn single_path_beam_is_coherent() {
        let bp = BeamPath { gain: C64::new(0.3, 0.1), phi: 0.7, psi: -1.0, s2: 3.0 };
        let w = beamform(&[bp], 0.4, 0.9, 4, 4);
        assert!(w.omega.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        let a_r = array_response_upa(0.4, 0.9, 4, 4);
        let a_p = array_response_upa(0.7, -1.0, 4, 4);
        let g: C64 = a_r.iter().zip(&w.omega).zip(&a_p).map(|((r, o), p)| r.conj() * o * p).sum();
        assert!((g.norm() - 16.0).abs() < 1e-10);
        let twin = beamform(&[bp, bp], 0.4, 0.9, 4, 4);
        assert!(twin.omega.iter().zip(&w.omega).all(|(a, b)| (a - b).norm() < 1e-12));
    }

    #[test]
    fn calibration_recovers_gains() {
        let pre = Preamble::zadoff_chu(16);
        let truth = [path(C64::new(1.0, 0.2), 0, 3000.0, 0.5, 0.4), path(C64::new(-0.4, 0.5), 2, -1500.0, 0.9, 2.3)];
        let est: Vec<PathEstimate> = truth
            .iter()
            .map(|t| PathEstimate { gain_bar: C64::new(0.0, 0.0), delay_taps: t.delay_taps, doppler: t.doppler, phi: t.phi, psi: t.psi })
            .collect();
        let mut rng = derive_rng(1, &[]);
        let obs = simulate_short_pilot(&truth, &pre, 4, 8, TS, 0.0, &mut rng);
        let h = ls_calibrate(&obs, &pre, &est, 8, TS).unwrap();
        for (a, t) in h.iter().zip(&truth) {
            assert!((a - t.gain).norm() < 1e-10);
        }
        let dup = vec![est[0], est[0]];
        assert!(matches!(ls_calibrate(&obs, &pre, &dup, 8, TS), Err(Error::CalibrationSkipped(_))));
    }
}
