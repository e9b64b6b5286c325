//! Geometry, steering vectors, random path draws, the cascaded
//! user-HRIS-BS channel and its delay-Doppler spreading kernel.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Mutex, OnceLock};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ddframe::{DdGrid, OtfsConfig, TimeSignal};
use crate::math::{cis, complex_normal, derive_rng, modulo};
use crate::{Error, Result, C64};

/// Element spacing over wavelength.
pub const D_OVER_LAMBDA: f64 = 0.5;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Maximum Doppler shift for a speed in km/h at carrier `fc` (Hz).
pub fn max_doppler(speed_kmh: f64, fc: f64) -> f64 {
    speed_kmh / 3.6 * fc / 3.0e8
}

/// Doppler search half-width in bins: `ceil(nu_max / resolution)`.
pub fn k_nu_max(nu_max: f64, resolution: f64) -> usize {
    (nu_max / resolution - 1e-12).ceil().max(0.0) as usize
}

/// BS placement relative to the HRIS corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub p_b: [f64; 3],
    pub s_b: [f64; 3],
    pub element_spacing: f64,
    pub wavelength: f64,
}

impl Geometry {
    pub fn new(p_b: [f64; 3], s_b: [f64; 3], fc: f64) -> Self {
        let wavelength = SPEED_OF_LIGHT / fc;
        Self { p_b, s_b, element_spacing: wavelength * D_OVER_LAMBDA, wavelength }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkAngles {
    pub theta_b: f64,
    pub phi_r: f64,
    pub psi_r: f64,
    pub d_br: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

/// BS angle of arrival and HRIS angles of departure.
pub fn geometry_angles(g: &Geometry) -> Result<LinkAngles> {
    let p = g.p_b;
    let d_br = norm3(p);
    if d_br == 0.0 || norm3(g.s_b) == 0.0 {
        return Err(Error::DegenerateGeometry("BS at the HRIS origin or zero array direction".into()));
    }
    let theta_b = (dot(g.s_b, p) / (norm3(g.s_b) * d_br)).clamp(-1.0, 1.0).acos();
    let proj = [p[0], p[1], 0.0];
    let pn = norm3(proj);
    if pn <= 1e-12 * d_br {
        return Err(Error::DegenerateGeometry("BS lies on the HRIS normal".into()));
    }
    let phi_r = (proj[0] / pn).clamp(-1.0, 1.0).acos();
    let psi_r = PI - (p[2] / d_br).clamp(-1.0, 1.0).acos();
    Ok(LinkAngles { theta_b, phi_r, psi_r, d_br })
}

/// Spatial phase increments `(ωx, ωy)` of the UPA for angles `(φ, ψ)`.
#[inline]
pub fn spatial_freqs(phi: f64, psi: f64) -> (f64, f64) {
    let s = 2.0 * PI * D_OVER_LAMBDA * phi.sin();
    (s * psi.sin(), s * psi.cos())
}

/// UPA response `a_x ⊗ a_y`, element `(n_x, n_y)` at index `n_x * ny + n_y`.
pub fn array_response_upa(phi: f64, psi: f64, nx: usize, ny: usize) -> Vec<C64> {
    let (wx, wy) = spatial_freqs(phi, psi);
    let mut out = Vec::with_capacity(nx * ny);
    for ix in 0..nx {
        for iy in 0..ny {
            out.push(cis(-(ix as f64 * wx + iy as f64 * wy)));
        }
    }
    out
}

/// BS ULA response.
pub fn array_response_ula(theta: f64, nb: usize) -> Vec<C64> {
    let w = 2.0 * PI * D_OVER_LAMBDA * theta.cos();
    (0..nb).map(|i| cis(-(i as f64) * w)).collect()
}

/// One user-to-HRIS scattering path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UrPath {
    pub gain: C64,
    /// Delay in samples.
    pub delay_taps: usize,
    pub doppler: f64,
    pub phi: f64,
    pub psi: f64,
    pub prior_variance: f64,
}

/// HRIS-to-BS line of sight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbLink {
    pub gain: C64,
    pub delay_taps: usize,
    pub theta_b: f64,
    pub phi_r: f64,
    pub psi_r: f64,
    pub prior_variance: f64,
}

impl RbLink {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, angles: &LinkAngles, prior_variance: f64) -> Self {
        Self {
            gain: complex_normal(rng, prior_variance),
            delay_taps: 0,
            theta_b: angles.theta_b,
            phi_r: angles.phi_r,
            psi_r: angles.psi_r,
            prior_variance,
        }
    }
}

/// Random path generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSampler {
    pub paths: usize,
    /// `τ_max / Ts`.
    pub tau_max_taps: usize,
    pub nu_max: f64,
    pub phi_range: (f64, f64),
    pub psi_range: (f64, f64),
    /// Power gain applied on top of the UR paths, e.g. `N_r² λ^RB` for a
    /// coherently combined cascade. The UR gains are scaled so the cascade
    /// has unit average power.
    pub cascade_gain: f64,
}

impl PathSampler {
    pub fn new(paths: usize, tau_max_taps: usize, nu_max: f64) -> Self {
        Self {
            paths,
            tau_max_taps,
            nu_max,
            phi_range: (0.0, 0.5 * PI),
            psi_range: (-PI, PI),
            cascade_gain: 1.0,
        }
    }

    /// `σ_c²` such that `cascade_gain * E[Σ_p σ_c² exp(-τ_p/τ_max)] = 1`.
    pub fn sigma_c2(&self) -> Result<f64> {
        Ok(1.0 / (self.cascade_gain * mean_profile_sum(self.paths, self.tau_max_taps)?))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<UrPath>> {
        let taps = self.tau_max_taps + 1;
        if self.paths == 0 || self.paths > taps {
            return Err(Error::Sampling(format!("{} paths need distinct taps in 0..={}", self.paths, self.tau_max_taps)));
        }
        let sigma_c2 = self.sigma_c2()?;
        let mut delays = index::sample(rng, taps, self.paths).into_vec();
        delays.sort_unstable();
        Ok(delays
            .into_iter()
            .map(|d| {
                let var = sigma_c2 * profile(d, self.tau_max_taps);
                UrPath {
                    gain: complex_normal(rng, var),
                    delay_taps: d,
                    doppler: rng.random_range(-self.nu_max..=self.nu_max),
                    phi: rng.random_range(self.phi_range.0..=self.phi_range.1),
                    psi: rng.random_range(self.psi_range.0..=self.psi_range.1),
                    prior_variance: var,
                }
            })
            .collect())
    }
}

/// Convenience wrapper with hemisphere angles and unit cascade gain.
pub fn sample_ur_paths<R: Rng + ?Sized>(
    rng: &mut R,
    paths: usize,
    tau_max_ur: f64,
    ts: f64,
    nu_max: f64,
) -> Result<Vec<UrPath>> {
    let taps = (tau_max_ur / ts).round() as usize;
    PathSampler::new(paths, taps, nu_max).sample(rng)
}

fn profile(tap: usize, tau_max_taps: usize) -> f64 {
    if tau_max_taps == 0 {
        1.0
    } else {
        (-(tap as f64) / tau_max_taps as f64).exp()
    }
}

const PROFILE_DRAWS: usize = 100_000;

/// Monte-Carlo mean of `Σ_p exp(-τ_p/τ_max)` over random distinct tap sets,
/// cached per `(paths, taps)`.
fn mean_profile_sum(paths: usize, tau_max_taps: usize) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), f64>>> = OnceLock::new();
    let taps = tau_max_taps + 1;
    if paths == 0 || paths > taps {
        return Err(Error::Sampling(format!("{paths} paths need distinct taps in 0..={tau_max_taps}")));
    }
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("profile cache poisoned").get(&(paths, tau_max_taps)) {
        return Ok(*v);
    }
    let mut rng = derive_rng(0x5167_4d43, &[paths as u64, tau_max_taps as u64]);
    let mut acc = 0.0;
    for _ in 0..PROFILE_DRAWS {
        acc += index::sample(&mut rng, taps, paths).iter().map(|d| profile(d, tau_max_taps)).sum::<f64>();
    }
    let v = acc / PROFILE_DRAWS as f64;
    cache.lock().expect("profile cache poisoned").insert((paths, tau_max_taps), v);
    Ok(v)
}

/// Integer/fractional Doppler split: `ν N T = k + β`, `β ∈ [-0.5, 0.5)`.
pub fn split_doppler(nu: f64, cfg: &OtfsConfig) -> (i64, f64) {
    let kappa = nu / cfg.doppler_resolution();
    let k = (kappa + 0.5).floor();
    let mut beta = kappa - k;
    if beta >= 0.5 {
        beta -= 1.0;
    }
    (k as i64, beta)
}

/// One delay tap of the cascaded channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub l_tau: usize,
    pub k_nu: i64,
    pub beta_nu: f64,
    pub gain: C64,
}

impl Tap {
    pub fn is_active(&self) -> bool {
        self.gain != C64::new(0.0, 0.0)
    }
}

/// Equivalent channel seen by the BS after HRIS reflection and combining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadedChannel {
    /// One entry per delay tap `0..P_max`.
    pub taps: Vec<Tap>,
    pub sigma_n2: f64,
}

impl CascadedChannel {
    /// `P_max` empty taps.
    pub fn empty(p_max: usize) -> Self {
        Self {
            taps: (0..p_max).map(|l| Tap { l_tau: l, k_nu: 0, beta_nu: 0.0, gain: C64::new(0.0, 0.0) }).collect(),
            sigma_n2: 0.0,
        }
    }

    pub fn p_max(&self) -> usize {
        self.taps.len()
    }

    pub fn gains(&self) -> Vec<C64> {
        self.taps.iter().map(|t| t.gain).collect()
    }
}

/// `h̃_p = h^RB h^UR_p a_R^H(φ_r, ψ_r) Ω a_R(φ_p, ψ_p)` per path, folded onto
/// `p_max` delay taps. Paths sharing a tap keep the last one's Doppler and add
/// their gains.
pub fn cascade(
    paths: &[UrPath],
    rb: &RbLink,
    omega: &[C64],
    nx: usize,
    ny: usize,
    p_max: usize,
    cfg: &OtfsConfig,
) -> Result<CascadedChannel> {
    if omega.len() != nx * ny {
        return Err(Error::Dimension { expected: nx * ny, got: omega.len() });
    }
    let a_r = array_response_upa(rb.phi_r, rb.psi_r, nx, ny);
    let mut ch = CascadedChannel::empty(p_max);
    for path in paths {
        let l = path.delay_taps + rb.delay_taps;
        if l >= p_max {
            return Err(Error::OutOfRange { index: l, max: p_max - 1 });
        }
        let a_p = array_response_upa(path.phi, path.psi, nx, ny);
        let bf: C64 = a_r.iter().zip(omega).zip(&a_p).map(|((r, w), p)| r.conj() * w * p).sum();
        let (k_nu, beta_nu) = split_doppler(path.doppler, cfg);
        let tap = &mut ch.taps[l];
        tap.gain += rb.gain * path.gain * bf;
        tap.k_nu = k_nu;
        tap.beta_nu = beta_nu;
    }
    Ok(ch)
}

/// Dirichlet kernel `θ(q, β) = Σ_{n<N} exp(-j2πn(N/2 - q - β)/N)`.
pub fn theta(q: usize, beta: f64, n: usize) -> C64 {
    let a = n as f64 / 2.0 - q as f64 - beta;
    let den = (PI * a / n as f64).sin();
    if den.abs() < 1e-6 {
        // near the removable singularity: direct sum
        return (0..n).map(|i| cis(-2.0 * PI * i as f64 * a / n as f64)).sum();
    }
    cis(-PI * (n as f64 - 1.0) * a / n as f64) * ((PI * a).sin() / den)
}

/// `dθ/dβ` by the term-wise derivative of the Dirichlet sum.
pub fn theta_dbeta(q: usize, beta: f64, n: usize) -> C64 {
    let a = n as f64 / 2.0 - q as f64 - beta;
    (0..n)
        .map(|i| {
            let w = 2.0 * PI * i as f64 / n as f64;
            C64::new(0.0, w) * cis(-w * a)
        })
        .sum()
}

/// `ξ(l, l_τ, k_ν, β) = exp(j2π (l - l_τ)/M (k_ν + β)/N)`.
#[inline]
pub fn xi(l: usize, l_tau: usize, k_nu: i64, beta: f64, cfg: &OtfsConfig) -> C64 {
    let dl = l as f64 - l_tau as f64;
    cis(2.0 * PI * dl * (k_nu as f64 + beta) / (cfg.m * cfg.n) as f64)
}

/// Wrap phase for `l < l_τ`, as a function of the storage row
/// `[k - k_ν + q]_N` of the contributing symbol.
///
/// With the ISFFT sign convention above, the cyclic prefix wrap carries
/// `exp(-j2π(row - N/2)/N) = -exp(-j2π row/N)`.
#[inline]
pub fn wrap_phase(x_row: usize, n: usize) -> C64 {
    -cis(-2.0 * PI * x_row as f64 / n as f64)
}

/// Storage row of the symbol reached from output row `k_row` via `(k_ν, q)`.
#[inline]
pub fn source_row(k_row: usize, k_nu: i64, q: usize, n: usize) -> usize {
    // [k - k_ν + q]_N with k = k_row - N/2
    modulo(k_row as i64 - (n / 2) as i64 - k_nu + q as i64, n)
}

/// Spreading coefficient `γ(k, l, l_τ, q, k_ν, β)` for signed Doppler index `k`.
pub fn gamma(k: i64, l: usize, l_tau: usize, q: usize, k_nu: i64, beta: f64, cfg: &OtfsConfig) -> C64 {
    let n = cfg.n;
    let base = xi(l, l_tau, k_nu, beta, cfg) * theta(q, beta, n) / n as f64;
    if l < l_tau {
        base * wrap_phase(modulo(k - k_nu + q as i64, n), n)
    } else {
        base
    }
}

/// Tabulated γ for one tap: `θ(q)/N`, `ξ(l)` and the wrap phase per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaKernel {
    pub l_tau: usize,
    pub k_nu: i64,
    pub beta: f64,
    m: usize,
    n: usize,
    theta: Vec<C64>,
    xi: Vec<C64>,
    wrap: Vec<C64>,
    /// Doppler offsets `q` whose `|θ|` is non-negligible.
    active_q: Vec<usize>,
}

impl GammaKernel {
    /// Offsets with `|θ(q)/N|² ≤ prune` are dropped from `active_q`
    /// (`prune = 0` keeps exactly the nonzero ones).
    pub fn new(l_tau: usize, k_nu: i64, beta: f64, cfg: &OtfsConfig, prune: f64) -> Self {
        let (m, n) = (cfg.m, cfg.n);
        let theta: Vec<C64> = (0..n).map(|q| theta(q, beta, n) / n as f64).collect();
        let xi = (0..m).map(|l| xi(l, l_tau, k_nu, beta, cfg)).collect();
        let wrap = (0..n).map(|r| wrap_phase(r, n)).collect();
        let floor = prune.max(1e-24);
        let active_q = (0..n).filter(|&q| theta[q].norm_sqr() > floor).collect();
        Self { l_tau, k_nu, beta, m, n, theta, xi, wrap, active_q }
    }

    pub fn from_tap(tap: &Tap, cfg: &OtfsConfig) -> Self {
        Self::new(tap.l_tau, tap.k_nu, tap.beta_nu, cfg, 0.0)
    }

    pub fn active_q(&self) -> &[usize] {
        &self.active_q
    }

    /// `(γ, source storage index)` for output `(k_row, l)` and offset `q`.
    #[inline]
    pub fn coeff(&self, k_row: usize, l: usize, q: usize) -> (C64, usize) {
        let row = source_row(k_row, self.k_nu, q, self.n);
        let col = (l + self.m - self.l_tau % self.m) % self.m;
        let mut g = self.xi[l] * self.theta[q];
        if l < self.l_tau {
            g *= self.wrap[row];
        }
        (g, row * self.m + col)
    }

    /// `Σ_q |γ|²`, independent of `(k, l)`.
    pub fn energy_per_grid(&self) -> f64 {
        self.theta.iter().map(|t| t.norm_sqr()).sum()
    }
}

/// `z_{k,l}[p] = Σ_q γ x` for every grid and tap; row-major `(grid, tap)`.
pub fn z_matrix(x: &DdGrid, ch: &CascadedChannel, cfg: &OtfsConfig) -> Vec<C64> {
    let p_max = ch.p_max();
    let kernels: Vec<GammaKernel> = ch.taps.iter().map(|t| GammaKernel::from_tap(t, cfg)).collect();
    let xs = x.values();
    let mut z = vec![C64::new(0.0, 0.0); cfg.num_grids() * p_max];
    for row in 0..cfg.n {
        for l in 0..cfg.m {
            let g = row * cfg.m + l;
            for (p, ker) in kernels.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for &q in ker.active_q() {
                    let (c, src) = ker.coeff(row, l, q);
                    acc += c * xs[src];
                }
                z[g * p_max + p] = acc;
            }
        }
    }
    z
}

/// Noiseless delay-Doppler response `Σ_p Σ_q h̃_p γ x`.
pub fn dd_response(x: &DdGrid, ch: &CascadedChannel, cfg: &OtfsConfig) -> DdGrid {
    let xs = x.values();
    let mut y = DdGrid::zeros(cfg);
    for tap in ch.taps.iter().filter(|t| t.is_active()) {
        let ker = GammaKernel::from_tap(tap, cfg);
        let out = y.values_mut();
        for row in 0..cfg.n {
            for l in 0..cfg.m {
                let mut acc = C64::new(0.0, 0.0);
                for &q in ker.active_q() {
                    let (c, src) = ker.coeff(row, l, q);
                    acc += c * xs[src];
                }
                out[row * cfg.m + l] += tap.gain * acc;
            }
        }
    }
    y
}

/// Delay-Doppler channel with optional `CN(0, σ_n²)` noise per grid.
pub fn apply_channel_dd<R: Rng + ?Sized>(
    x: &DdGrid,
    ch: &CascadedChannel,
    cfg: &OtfsConfig,
    rng: &mut R,
    noiseless: bool,
) -> DdGrid {
    let mut y = dd_response(x, ch, cfg);
    if !noiseless && ch.sigma_n2 > 0.0 {
        for v in y.values_mut() {
            *v += complex_normal(rng, ch.sigma_n2);
        }
    }
    y
}

/// HRIS and BS dimensions for the time-domain channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayDims {
    pub nx: usize,
    pub ny: usize,
    pub nb: usize,
}

impl ArrayDims {
    pub fn n_r(&self) -> usize {
        self.nx * self.ny
    }
}

/// Sample-level channel: each path delays and Doppler-rotates the block,
/// impinges on the HRIS, is phase shifted by `omega`, reflected towards the
/// BS array and combined with `r = a_B(θ_B)/N_b`.
///
/// Time zero is the first sample after the cyclic prefix. Samples that would
/// come from before the block are zero.
#[allow(clippy::too_many_arguments)]
pub fn apply_channel_time<R: Rng + ?Sized>(
    s: &TimeSignal,
    paths: &[UrPath],
    rb: &RbLink,
    omega: &[C64],
    dims: ArrayDims,
    ts: f64,
    sigma_n2: f64,
    rng: &mut R,
    noiseless: bool,
) -> Result<TimeSignal> {
    let nr = dims.n_r();
    if omega.len() != nr {
        return Err(Error::Dimension { expected: nr, got: omega.len() });
    }
    let a_b = array_response_ula(rb.theta_b, dims.nb);
    let combiner: Vec<C64> = a_b.iter().map(|a| a / dims.nb as f64).collect();
    // r^H a_B(θ_B)
    let bs_gain: C64 = combiner.iter().zip(&a_b).map(|(r, a)| r.conj() * a).sum();
    let a_dep = array_response_upa(rb.phi_r, rb.psi_r, dims.nx, dims.ny);
    let len = s.samples.len();
    let cp = s.cp_len as i64;
    let mut out = vec![C64::new(0.0, 0.0); len];
    for path in paths {
        let a_arr = array_response_upa(path.phi, path.psi, dims.nx, dims.ny);
        let delay = path.delay_taps + rb.delay_taps;
        for (i, o) in out.iter_mut().enumerate() {
            if i < delay {
                continue;
            }
            let t = (i as i64 - cp) as f64 * ts;
            let tau = delay as f64 * ts;
            let impinge = path.gain * cis(2.0 * PI * path.doppler * (t - tau)) * s.samples[i - delay];
            // element-by-element reflection
            let mut refl = C64::new(0.0, 0.0);
            for r in 0..nr {
                refl += a_dep[r].conj() * omega[r] * a_arr[r] * impinge;
            }
            *o += bs_gain * rb.gain * refl;
        }
    }
    if !noiseless && sigma_n2 > 0.0 {
        for o in &mut out {
            *o += complex_normal(rng, sigma_n2);
        }
    }
    Ok(TimeSignal { samples: out, cp_len: s.cp_len })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn steering_vectors() {
        assert!(array_response_upa(0.0, 1.3, 3, 4).iter().all(|z| close(*z, C64::new(1.0, 0.0), 1e-15)));
        assert_eq!(array_response_upa(0.4, 0.2, 1, 1), vec![C64::new(1.0, 0.0)]);
        let v = array_response_upa(PI / 2.0, PI / 2.0, 2, 1);
        assert!(close(v[1], C64::new(-1.0, 0.0), 1e-14));
        assert!(array_response_ula(PI / 2.0, 5).iter().all(|z| close(*z, C64::new(1.0, 0.0), 1e-15)));
        let u = array_response_ula(0.0, 2);
        assert!(close(u[1], C64::new(-1.0, 0.0), 1e-14));
        for z in array_response_upa(0.7, -2.1, 5, 6) {
            assert!((z.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn upa_is_kronecker() {
        let (phi, psi) = (0.6, 1.1);
        let (wx, wy) = spatial_freqs(phi, psi);
        let ax: Vec<C64> = (0..3).map(|i| cis(-(i as f64) * wx)).collect();
        let ay: Vec<C64> = (0..4).map(|i| cis(-(i as f64) * wy)).collect();
        let v = array_response_upa(phi, psi, 3, 4);
        for i in 0..3 {
            for j in 0..4 {
                assert!(close(v[i * 4 + j], ax[i] * ay[j], 1e-14));
            }
        }
    }

    #[test]
    fn angles() {
        let g = Geometry::new([10.0, 0.0, 0.0], [1.0, 0.0, 0.0], 28e9);
        let a = geometry_angles(&g).unwrap();
        assert!(a.theta_b.abs() < 1e-12 && a.phi_r.abs() < 1e-12);
        assert!((a.psi_r - PI / 2.0).abs() < 1e-12 && (a.d_br - 10.0).abs() < 1e-12);
        let g = Geometry::new([0.0, 10.0, 0.0], [0.0, 1.0, 0.0], 28e9);
        let a = geometry_angles(&g).unwrap();
        assert!(a.theta_b.abs() < 1e-12);
        assert!((a.phi_r - PI / 2.0).abs() < 1e-12 && (a.psi_r - PI / 2.0).abs() < 1e-12);
        let g = Geometry::new([0.0, 0.0, 10.0], [1.0, 0.0, 0.0], 28e9);
        assert!(matches!(geometry_angles(&g), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn doppler_bounds() {
        assert!((max_doppler(240.0, 28e9) - 6222.2).abs() < 0.1);
        let res = OtfsConfig::from_sample_rate(256, 16, 20e6).unwrap().doppler_resolution();
        assert_eq!(k_nu_max(max_doppler(480.0, 28e9), res), 3);
        let cfg = OtfsConfig::from_sample_rate(256, 16, 20e6).unwrap();
        let (k, b) = split_doppler(4882.8, &cfg);
        assert_eq!(k, 1);
        assert!(b.abs() < 1e-4);
        let (k, b) = split_doppler(-0.5 * res, &cfg);
        assert_eq!((k, b), (0, -0.5));
    }

    #[test]
    fn path_sampling() {
        let s = PathSampler::new(3, 6, 6222.0);
        let mut a = derive_rng(4, &[]);
        let mut b = derive_rng(4, &[]);
        let pa = s.sample(&mut a).unwrap();
        assert_eq!(pa, s.sample(&mut b).unwrap());
        assert_eq!(pa.len(), 3);
        assert!(pa.windows(2).all(|w| w[0].delay_taps < w[1].delay_taps));
        assert!(pa.iter().all(|p| p.delay_taps <= 6 && p.doppler.abs() <= 6222.0));
        assert!(PathSampler::new(8, 6, 1.0).sample(&mut a).is_err());
    }

    #[test]
    fn sampled_power_is_normalized() {
        let s = PathSampler::new(3, 6, 100.0);
        let mut rng = derive_rng(11, &[]);
        let n = 40_000;
        let total: f64 =
            (0..n).map(|_| s.sample(&mut rng).unwrap().iter().map(|p| p.gain.norm_sqr()).sum::<f64>()).sum();
        assert!((total / n as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn theta_values() {
        // |θ| = sin(πβ)/sin(πβ/N) at q = N/2
        let t = theta(2, 0.25, 4);
        let mag = (0.25 * PI).sin() / (0.25 * PI / 4.0).sin();
        assert!((t.norm() - mag).abs() < 1e-12);
        assert!((t.norm() - 3.6245).abs() < 1e-4);
        assert!((t.arg().to_degrees() - 33.75).abs() < 1e-9);
        assert!(close(theta(4, 0.0, 8), C64::new(8.0, 0.0), 1e-12));
        for q in [0, 1, 3, 7] {
            assert!(theta(q, 0.0, 8).norm() < 1e-12);
        }
    }

    #[test]
    fn theta_energy_is_conserved() {
        for n in [4, 8, 16] {
            for beta in [-0.5, -0.31, 0.0, 0.07, 0.4999] {
                let e: f64 = (0..n).map(|q| theta(q, beta, n).norm_sqr()).sum::<f64>() / (n * n) as f64;
                assert!((e - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn theta_derivative_matches_difference() {
        let h = 1e-6;
        for q in 0..8 {
            for beta in [-0.4, 0.0, 0.23] {
                let fd = (theta(q, beta + h, 8) - theta(q, beta - h, 8)) / (2.0 * h);
                assert!((fd - theta_dbeta(q, beta, 8)).norm() < 1e-6 * (1.0 + fd.norm()));
            }
        }
    }

    #[test]
    fn gamma_integer_doppler() {
        let cfg = OtfsConfig::new(16, 8, 1.0).unwrap();
        assert!(gamma(1, 5, 2, 3, 1, 0.0, &cfg).norm() < 1e-15);
        let g = gamma(1, 5, 2, 4, 1, 0.0, &cfg);
        assert!(close(g, cis(2.0 * PI * 3.0 / 16.0 / 8.0), 1e-14));
    }

    #[test]
    fn kernel_matches_scalar_gamma() {
        let cfg = OtfsConfig::new(16, 8, 1.0).unwrap();
        let ker = GammaKernel::new(3, -1, 0.27, &cfg, 0.0);
        for row in 0..8 {
            for l in 0..16 {
                for q in 0..8 {
                    let (c, _) = ker.coeff(row, l, q);
                    assert!(close(c, gamma(cfg.k_of(row), l, 3, q, -1, 0.27, &cfg), 1e-14));
                }
            }
        }
        assert!((ker.energy_per_grid() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_channel_is_identity() {
        let cfg = OtfsConfig::new(8, 4, 1.0).unwrap();
        let mut rng = derive_rng(1, &[]);
        let x = DdGrid::from_values(&cfg, (0..32).map(|_| complex_normal(&mut rng, 1.0)).collect()).unwrap();
        let mut ch = CascadedChannel::empty(1);
        ch.taps[0].gain = C64::new(1.0, 0.0);
        let y = apply_channel_dd(&x, &ch, &cfg, &mut rng, true);
        assert!(y.max_relative_error(&x) < 1e-14);
    }

    #[test]
    fn z_form_matches_response() {
        let cfg = OtfsConfig::new(16, 8, 1.0).unwrap();
        let mut rng = derive_rng(2, &[]);
        let x = DdGrid::from_values(&cfg, (0..128).map(|_| complex_normal(&mut rng, 1.0)).collect()).unwrap();
        let mut ch = CascadedChannel::empty(4);
        for (i, t) in ch.taps.iter_mut().enumerate() {
            t.gain = complex_normal(&mut rng, 1.0);
            t.k_nu = i as i64 - 2;
            t.beta_nu = 0.1 * i as f64 - 0.2;
        }
        let z = z_matrix(&x, &ch, &cfg);
        let y = dd_response(&x, &ch, &cfg);
        let h = ch.gains();
        for g in 0..cfg.num_grids() {
            let v: C64 = (0..4).map(|p| z[g * 4 + p] * h[p]).sum();
            assert!(close(v, y.values()[g], 1e-12));
        }
    }

    #[test]
    fn coherent_cascade() {
        let cfg = OtfsConfig::new(16, 8, 1.0).unwrap();
        let (nx, ny) = (4, 4);
        let rb = RbLink { gain: C64::new(1.0, 0.0), delay_taps: 0, theta_b: 0.3, phi_r: 0.4, psi_r: 1.2, prior_variance: 1.0 };
        let path = UrPath { gain: C64::new(0.3, -0.4), delay_taps: 2, doppler: 0.0, phi: 0.9, psi: -0.5, prior_variance: 1.0 };
        let ar = array_response_upa(rb.phi_r, rb.psi_r, nx, ny);
        let ap = array_response_upa(path.phi, path.psi, nx, ny);
        let omega: Vec<C64> = ar.iter().zip(&ap).map(|(r, p)| r * p.conj()).collect();
        let ch = cascade(&[path], &rb, &omega, nx, ny, 4, &cfg).unwrap();
        assert!((ch.taps[2].gain.norm() - 0.5 * 16.0).abs() < 1e-12);
        assert!(!ch.taps[0].is_active());
    }

    #[test]
    fn zero_gain_time_channel() {
        let s = TimeSignal { samples: vec![C64::new(1.0, 0.0); 20], cp_len: 4 };
        let rb = RbLink { gain: C64::new(0.0, 0.0), delay_taps: 0, theta_b: 0.3, phi_r: 0.4, psi_r: 1.2, prior_variance: 1.0 };
        let path = UrPath { gain: C64::new(1.0, 0.0), delay_taps: 1, doppler: 10.0, phi: 0.9, psi: -0.5, prior_variance: 1.0 };
        let dims = ArrayDims { nx: 2, ny: 2, nb: 3 };
        let mut rng = derive_rng(0, &[]);
        let out = apply_channel_time(&s, &[path], &rb, &[C64::new(1.0, 0.0); 4], dims, 1e-3, 0.0, &mut rng, true).unwrap();
        assert!(out.samples.iter().all(|z| z.norm() == 0.0));
    }
}
