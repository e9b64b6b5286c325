//! Brute-force references. Nothing here reuses the spreading kernel or the
//! message-passing code; channel responses come from the sample-level chain.

use std::f64::consts::PI;

use rand::Rng;

use crate::channel::{apply_channel_time, cascade, dd_response, ArrayDims, PathSampler, RbLink, Tap, UrPath};
use crate::ddframe::{
    build_pattern, heisenberg, isfft, map_frame, wigner_sfft, Constellation, DdGrid, FrameTruth, Modulation,
    OtfsConfig, PatternVariant, SymbolPattern, TimeSignal,
};
use crate::jcedd::Message;
use crate::math::{cis, complex_normal, derive_rng, modulo};
use crate::{Error, Result, C64};

/// Random noiseless link for comparing the two channel models.
#[derive(Debug, Clone)]
pub struct DdTimeInstance {
    pub cfg: OtfsConfig,
    pub dims: ArrayDims,
    pub p_max: usize,
    pub x: DdGrid,
    pub paths: Vec<UrPath>,
    pub rb: RbLink,
    pub omega: Vec<C64>,
}

impl DdTimeInstance {
    pub fn random(cfg: OtfsConfig, dims: ArrayDims, paths: usize, tau_max_taps: usize, seed: u64) -> Result<Self> {
        let mut rng = derive_rng(seed, &[]);
        let nu_max = 2.5 * cfg.doppler_resolution();
        let paths = PathSampler::new(paths, tau_max_taps, nu_max).sample(&mut rng)?;
        let rb = RbLink {
            gain: complex_normal(&mut rng, 1.0),
            delay_taps: 0,
            theta_b: rng.random_range(0.0..std::f64::consts::PI),
            phi_r: rng.random_range(0.0..1.5),
            psi_r: rng.random_range(-3.0..3.0),
            prior_variance: 1.0,
        };
        let omega = (0..dims.n_r()).map(|_| cis(rng.random_range(0.0..std::f64::consts::TAU))).collect();
        let x = DdGrid::from_values(&cfg, (0..cfg.num_grids()).map(|_| complex_normal(&mut rng, 1.0)).collect())?;
        Ok(Self { cfg, dims, p_max: tau_max_taps + 1, x, paths, rb, omega })
    }
}

/// Max relative grid error between the delay-Doppler kernel and the
/// sample-level chain.
pub fn oracle_dd_vs_time(inst: &DdTimeInstance) -> Result<f64> {
    let cfg = &inst.cfg;
    let ch = cascade(&inst.paths, &inst.rb, &inst.omega, inst.dims.nx, inst.dims.ny, inst.p_max, cfg)?;
    let y_dd = dd_response(&inst.x, &ch, cfg);
    let cp = inst.p_max - 1;
    let s = heisenberg(&isfft(&inst.x, cfg)?, cp, cp)?;
    let mut rng = derive_rng(0, &[]);
    let r = apply_channel_time(&s, &inst.paths, &inst.rb, &inst.omega, inst.dims, cfg.sample_period(), 0.0, &mut rng, true)?;
    let y_t = wigner_sfft(&r, cfg)?;
    Ok(y_dd.max_relative_error(&y_t))
}

/// Sample-level response of equivalent delay-Doppler taps: every tap delays
/// the CP-extended block by `l_τ` samples and rotates it by
/// `exp(j2π(k_ν+β_ν)(n - l_τ)/(MN))`.
pub fn time_domain_response(cfg: &OtfsConfig, taps: &[Tap], x: &DdGrid) -> Result<DdGrid> {
    let cp = taps.iter().map(|t| t.l_tau).max().unwrap_or(0);
    let s = heisenberg(&isfft(x, cfg)?, cp, cp)?;
    let mn = (cfg.m * cfg.n) as f64;
    let mut out = vec![C64::new(0.0, 0.0); s.samples.len()];
    for tap in taps.iter().filter(|t| t.gain != C64::new(0.0, 0.0)) {
        let nu = tap.k_nu as f64 + tap.beta_nu;
        for (i, o) in out.iter_mut().enumerate().skip(tap.l_tau) {
            let n = i as f64 - cp as f64 - tap.l_tau as f64;
            *o += tap.gain * cis(2.0 * PI * nu * n / mn) * s.samples[i - tap.l_tau];
        }
    }
    wigner_sfft(&TimeSignal { samples: out, cp_len: cp }, cfg)
}

/// Response of every unit symbol: `cols[s]` is the received grid for a one at
/// storage index `s`.
pub fn unit_responses(cfg: &OtfsConfig, taps: &[Tap]) -> Result<Vec<Vec<C64>>> {
    (0..cfg.num_grids())
        .map(|s| {
            let mut x = DdGrid::zeros(cfg);
            x.values_mut()[s] = C64::new(1.0, 0.0);
            Ok(time_domain_response(cfg, taps, &x)?.into_values())
        })
        .collect()
}

const MAX_HYPOTHESES: usize = 1 << 16;

/// Small frame for exhaustive detection.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub pattern: SymbolPattern,
    pub constellation: Constellation,
    /// Tap `p` sits at delay `p`.
    pub taps: Vec<Tap>,
    pub x: DdGrid,
    pub pilots: DdGrid,
    pub truth: FrameTruth,
}

impl TinyInstance {
    pub fn new(pattern: SymbolPattern, constellation: Constellation, taps: Vec<Tap>, truth: FrameTruth) -> Result<Self> {
        let cfg = pattern.cfg;
        if cfg.m > 8 || cfg.n > 4 {
            return Err(Error::OracleRefused(format!("{}x{} frame exceeds 8x4", cfg.m, cfg.n)));
        }
        if taps.is_empty() || taps.len() > 2 {
            return Err(Error::OracleRefused(format!("{} taps, expected 1 or 2", taps.len())));
        }
        if pattern.data_set().len() > 8 {
            return Err(Error::OracleRefused(format!("{} data symbols exceed 8", pattern.data_set().len())));
        }
        if taps.iter().enumerate().any(|(p, t)| t.l_tau != p) {
            return Err(Error::OracleRefused("tap p must sit at delay p".into()));
        }
        let x = truth.grid.clone();
        let mut pilots = DdGrid::zeros(&cfg);
        for &i in pattern.pilot_set() {
            pilots.values_mut()[i] = x.values()[i];
        }
        Ok(Self { pattern, constellation, taps, x, pilots, truth })
    }

    /// 8x4 frame, pilots on delays 0..6, eight data symbols on delays 6 and 7,
    /// two taps with random gains, integer Doppler in {-1, 0, 1} and
    /// fractional Doppler.
    pub fn random(seed: u64, modulation: Modulation, delta_db: f64) -> Result<Self> {
        let cfg = OtfsConfig::new(8, 4, 15e3)?;
        let pattern = build_pattern(&cfg, 4, 6, PatternVariant::Proposed, delta_db)?;
        let constellation = Constellation::new(modulation, pattern.sigma_d2);
        let mut rng = derive_rng(seed, &[0x7157]);
        let taps = (0..2)
            .map(|p| Tap {
                l_tau: p,
                k_nu: rng.random_range(-1..=1),
                beta_nu: rng.random_range(-0.5..0.5),
                gain: complex_normal(&mut rng, 0.5),
            })
            .collect();
        let bits: Vec<u8> =
            (0..pattern.data_set().len() * constellation.bits_per_symbol()).map(|_| rng.random_range(0..2)).collect();
        let (_, truth) = map_frame(&pattern, &constellation, &bits, &mut rng)?;
        Self::new(pattern, constellation, taps, truth)
    }

    pub fn hypotheses(&self) -> usize {
        self.constellation.len().pow(self.pattern.data_set().len() as u32)
    }

    pub fn noiseless(&self) -> Result<DdGrid> {
        time_domain_response(&self.pattern.cfg, &self.taps, &self.x)
    }

    pub fn receive<R: Rng + ?Sized>(&self, sigma_n2: f64, rng: &mut R) -> Result<DdGrid> {
        let mut y = self.noiseless()?;
        for v in y.values_mut() {
            *v += complex_normal(rng, sigma_n2);
        }
        Ok(y)
    }
}

/// Exhaustive maximum-likelihood detection with the true channel. Returns
/// constellation indices in data-set order; ties go to the hypothesis
/// enumerated first (lowest indices).
pub fn ml_detect(inst: &TinyInstance, y: &DdGrid) -> Result<Vec<usize>> {
    let cfg = inst.pattern.cfg;
    y.check_dims(&cfg)?;
    let data = inst.pattern.data_set();
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let hyps = inst.hypotheses();
    if hyps > MAX_HYPOTHESES {
        return Err(Error::OracleRefused(format!("{hyps} hypotheses exceed {MAX_HYPOTHESES}")));
    }
    let base: Vec<C64> = {
        let known = time_domain_response(&cfg, &inst.taps, &inst.pilots)?;
        y.values().iter().zip(known.values()).map(|(a, b)| a - b).collect()
    };
    let cols = unit_responses(&cfg, &inst.taps)?;
    let points = inst.constellation.points();
    let q = points.len();
    // contribution of each (data slot, symbol)
    let contrib: Vec<Vec<Vec<C64>>> =
        data.iter().map(|&s| points.iter().map(|c| cols[s].iter().map(|v| v * c).collect()).collect()).collect();
    let mut digits = vec![0usize; data.len()];
    let mut best = digits.clone();
    let mut best_d = f64::INFINITY;
    for _ in 0..hyps {
        let d: f64 = (0..base.len())
            .map(|i| {
                let mut r = base[i];
                for (slot, &sym) in digits.iter().enumerate() {
                    r -= contrib[slot][sym][i];
                }
                r.norm_sqr()
            })
            .sum();
        if d < best_d {
            best_d = d;
            best.copy_from_slice(&digits);
        }
        for dgt in digits.iter_mut().rev() {
            *dgt += 1;
            if *dgt < q {
                break;
            }
            *dgt = 0;
        }
    }
    Ok(best)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn fd_gradient<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::OracleRefused(format!("step {h} must be positive")));
    }
    Ok((f(x + h) - f(x - h)) / (2.0 * h))
}

fn ln_cn(x: C64, mean: C64, var: f64) -> f64 {
    -(x - mean).norm_sqr() / var - (PI * var).ln()
}

/// Posterior `(mean, var, activation)` of `(1-α)δ(h) + α CN(0, λ)` times the
/// given Gaussian likelihoods `CN(m_i; h, v_i)`, by numerical integration of
/// the slab over a 401x401 grid. The spike weight is exact.
pub fn quad_posterior(alpha: f64, lambda: f64, likelihoods: &[Message]) -> Result<(C64, f64, f64)> {
    if alpha <= 0.0 {
        return Ok((C64::new(0.0, 0.0), 0.0, 0.0));
    }
    let lik: Vec<&Message> = likelihoods.iter().filter(|m| m.var.is_finite()).collect();
    let mut prec = 1.0 / lambda;
    let mut acc = C64::new(0.0, 0.0);
    for m in &lik {
        prec += 1.0 / m.var;
        acc += m.mean / m.var;
    }
    let center = acc / prec;
    let sd = (0.5 / prec).sqrt();
    let log_like = |h: C64| lik.iter().map(|m| ln_cn(m.mean, h, m.var)).sum::<f64>();
    let spike = if alpha < 1.0 { (1.0 - alpha).ln() + log_like(C64::new(0.0, 0.0)) } else { f64::NEG_INFINITY };
    const PTS: usize = 401;
    let mut half = 8.0 * sd;
    for _ in 0..6 {
        let step = 2.0 * half / (PTS - 1) as f64;
        let mut logs = Vec::with_capacity(PTS * PTS);
        for i in 0..PTS {
            for j in 0..PTS {
                let h = center + C64::new(-half + i as f64 * step, -half + j as f64 * step);
                logs.push((h, alpha.ln() + ln_cn(h, C64::new(0.0, 0.0), lambda) + log_like(h)));
            }
        }
        let top = logs.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m1, mut m2, mut edge) = (0.0, C64::new(0.0, 0.0), 0.0, 0.0);
        for (idx, (h, l)) in logs.iter().enumerate() {
            let w = (l - top).exp();
            z += w;
            m1 += h * w;
            m2 += h.norm_sqr() * w;
            let (i, j) = (idx / PTS, idx % PTS);
            if i == 0 || j == 0 || i == PTS - 1 || j == PTS - 1 {
                edge += w;
            }
        }
        if edge > 1e-13 * z {
            half *= 2.0;
            continue;
        }
        let log_slab = top + (z * step * step).ln();
        let k = if spike == f64::NEG_INFINITY { 1.0 } else { 1.0 / (1.0 + (spike - log_slab).exp()) };
        let mean = m1 / z * k;
        let second = m2 / z * k;
        return Ok((mean, (second - mean.norm_sqr()).max(0.0), k));
    }
    Err(Error::OracleRefused("quadrature did not settle".into()))
}

/// Per-edge transcription of the observation-to-symbol and
/// observation-to-gain message formulas. Coefficients are read off the
/// sample-level chain one unit symbol at a time.
#[derive(Debug, Clone)]
pub struct ScalarMp {
    cfg: OtfsConfig,
    doppler: Vec<(i64, f64)>,
    /// `cols[p][s][g]`: response at grid `g` to a unit symbol at `s` through tap `p`.
    cols: Vec<Vec<Vec<C64>>>,
    y: Vec<C64>,
    sigma_n2: f64,
    prune: f64,
}

impl ScalarMp {
    /// Tap `p` sits at delay `p` with Doppler `doppler[p]`.
    pub fn new(cfg: &OtfsConfig, doppler: &[(i64, f64)], y: &[C64], sigma_n2: f64) -> Result<Self> {
        let cols = doppler
            .iter()
            .enumerate()
            .map(|(p, &(k_nu, beta_nu))| {
                unit_responses(cfg, &[Tap { l_tau: p, k_nu, beta_nu, gain: C64::new(1.0, 0.0) }])
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg: *cfg, doppler: doppler.to_vec(), cols, y: y.to_vec(), sigma_n2, prune: 1e-12 })
    }

    /// `(γ, source grid)` of edge `(g, p, q)`; pruned edges give zero.
    pub fn coeff(&self, g: usize, p: usize, q: usize) -> (C64, usize) {
        let (m, n) = (self.cfg.m, self.cfg.n);
        let (row, l) = (g / m, g % m);
        let k = row as i64 - (n / 2) as i64;
        // θ peaks at q = N/2, so [k - k_ν + q]_N is already a storage row
        let src_row = modulo(k - self.doppler[p].0 + q as i64, n);
        let src = src_row * m + modulo(l as i64 - p as i64, m);
        let c = self.cols[p][src][g];
        (if c.norm_sqr() <= self.prune { C64::new(0.0, 0.0) } else { c }, src)
    }

    /// Observation-to-symbol message on edge `(g, p, q)`. `x_msg` gives the
    /// symbol-to-observation message per edge, `h_msg` the gain message seen
    /// by grid `g` per tap. `None` when the edge carries no information.
    pub fn y_to_x<X, H>(&self, g: usize, p: usize, q: usize, x_msg: X, h_msg: H) -> Option<Message>
    where
        X: Fn(usize, usize, usize) -> Message,
        H: Fn(usize, usize) -> Message,
    {
        let n = self.cfg.n;
        let (gm, _) = self.coeff(g, p, q);
        let h = h_msg(g, p);
        if (gm * h.mean).norm() < 1e-14 {
            return None;
        }
        let (mut u, mut v) = (C64::new(0.0, 0.0), 0.0);
        for pp in 0..self.doppler.len() {
            let hp = h_msg(g, pp);
            for qq in 0..n {
                if (pp, qq) == (p, q) {
                    continue;
                }
                let (c, _) = self.coeff(g, pp, qq);
                let x = x_msg(g, pp, qq);
                u += hp.mean * c * x.mean;
                v += c.norm_sqr() * (hp.mean.norm_sqr() * x.var + hp.var * (x.var + x.mean.norm_sqr()));
            }
        }
        let mean = (self.y[g] - u) / (gm * h.mean);
        let var = (v + self.sigma_n2 + gm.norm_sqr() * mean.norm_sqr() * h.var)
            / (gm.norm_sqr() * (h.mean.norm_sqr() + h.var));
        Some(Message::new(mean, var))
    }

    /// Observation-to-gain message from grid `g` to tap `p`.
    pub fn y_to_h<X, H>(&self, g: usize, p: usize, x_msg: X, h_msg: H) -> Option<Message>
    where
        X: Fn(usize, usize, usize) -> Message,
        H: Fn(usize, usize) -> Message,
    {
        let gx: Vec<(C64, f64)> = (0..self.doppler.len())
            .map(|pp| {
                (0..self.cfg.n).fold((C64::new(0.0, 0.0), 0.0), |(mu, eta), q| {
                    let (c, _) = self.coeff(g, pp, q);
                    let x = x_msg(g, pp, q);
                    (mu + c * x.mean, eta + c.norm_sqr() * x.var)
                })
            })
            .collect();
        let (mu, eta) = gx[p];
        if mu.norm() < 1e-14 {
            return None;
        }
        let (mut u, mut v) = (C64::new(0.0, 0.0), 0.0);
        for (pp, &(m, e)) in gx.iter().enumerate().filter(|(pp, _)| *pp != p) {
            let h = h_msg(g, pp);
            u += m * h.mean;
            v += h.var * (e + m.norm_sqr()) + h.mean.norm_sqr() * e;
        }
        let mean = (self.y[g] - u) / mu;
        Some(Message::new(mean, (v + self.sigma_n2 + mean.norm_sqr() * eta) / (eta + mu.norm_sqr())))
    }
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, run: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match run() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

/// Quick cross-checks of the fast models against the references above.
pub fn run_suite() -> Vec<Check> {
    vec![
        check("dd_kernel_vs_time_chain", || {
            let cfg = OtfsConfig::from_sample_rate(32, 8, 20e6)?;
            let inst = DdTimeInstance::random(cfg, ArrayDims { nx: 4, ny: 4, nb: 4 }, 3, 6, 1)?;
            let e = oracle_dd_vs_time(&inst)?;
            Ok((e < 1e-9, format!("max relative error {e:.3e}")))
        }),
        check("tap_chain_vs_kernel", || {
            let cfg = OtfsConfig::new(16, 8, 15e3)?;
            let mut rng = derive_rng(3, &[]);
            let taps: Vec<Tap> = (0..3)
                .map(|p| Tap {
                    l_tau: p,
                    k_nu: rng.random_range(-2..=2),
                    beta_nu: rng.random_range(-0.5..0.5),
                    gain: complex_normal(&mut rng, 1.0),
                })
                .collect();
            let x = DdGrid::from_values(&cfg, (0..cfg.num_grids()).map(|_| complex_normal(&mut rng, 1.0)).collect())?;
            let a = time_domain_response(&cfg, &taps, &x)?;
            let b = dd_response(&x, &crate::channel::CascadedChannel { taps, sigma_n2: 0.0 }, &cfg);
            let e = a.max_relative_error(&b);
            Ok((e < 1e-10, format!("max relative error {e:.3e}")))
        }),
        check("ml_noiseless_exact", || {
            let inst = TinyInstance::random(0, Modulation::Qam4, 0.0)?;
            let y = inst.noiseless()?;
            let ok = ml_detect(&inst, &y)? == inst.truth.symbols;
            Ok((ok, format!("{} hypotheses", inst.hypotheses())))
        }),
        check("bg_posterior_vs_quadrature", || {
            let ext = Message::new(C64::new(0.4, -0.3), 0.2);
            let (m, v, k) = quad_posterior(0.5, 1.0, &[ext])?;
            let (m2, v2, k2) = crate::jcedd::bg_moments(0.5, 1.0, &ext);
            let e = (m - m2).norm().max((v - v2).abs()).max((k - k2).abs());
            Ok((e < 1e-8, format!("max deviation {e:.3e}")))
        }),
        check("finite_difference", || {
            let g = fd_gradient(|x| (x * x).sin(), 0.7, 1e-5)?;
            let e = (g - 1.4 * (0.49f64).cos()).abs();
            Ok((e < 1e-8, format!("error {e:.3e}")))
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddframe::GridRole;
    use crate::channel::CascadedChannel;
    use crate::jcedd::{bg_moments, BgPrior, DopplerTap, EmState, FactorGraphState, MpSettings};

    #[test]
    fn dd_matches_time() {
        let cfg = OtfsConfig::from_sample_rate(32, 8, 20e6).unwrap();
        let dims = ArrayDims { nx: 4, ny: 4, nb: 4 };
        for seed in 0..5 {
            let inst = DdTimeInstance::random(cfg, dims, 3, 6, seed).unwrap();
            let e = oracle_dd_vs_time(&inst).unwrap();
            assert!(e < 1e-9, "seed {seed}: {e}");
        }
    }

    #[test]
    fn tap_chain_matches_kernel() {
        let cfg = OtfsConfig::new(16, 8, 15e3).unwrap();
        let mut rng = derive_rng(3, &[]);
        let taps: Vec<Tap> = (0..3)
            .map(|p| Tap { l_tau: p, k_nu: rng.random_range(-2..=2), beta_nu: rng.random_range(-0.5..0.5), gain: complex_normal(&mut rng, 1.0) })
            .collect();
        let x = DdGrid::from_values(&cfg, (0..cfg.num_grids()).map(|_| complex_normal(&mut rng, 1.0)).collect()).unwrap();
        let a = time_domain_response(&cfg, &taps, &x).unwrap();
        let b = dd_response(&x, &CascadedChannel { taps, sigma_n2: 0.0 }, &cfg);
        assert!(a.max_relative_error(&b) < 1e-10);
    }

    #[test]
    fn identity_channel() {
        let cfg = OtfsConfig::new(8, 4, 15e3).unwrap();
        let mut rng = derive_rng(4, &[]);
        let x = DdGrid::from_values(&cfg, (0..32).map(|_| complex_normal(&mut rng, 1.0)).collect()).unwrap();
        let one = [Tap { l_tau: 0, k_nu: 0, beta_nu: 0.0, gain: C64::new(1.0, 0.0) }];
        assert!(time_domain_response(&cfg, &one, &x).unwrap().max_relative_error(&x) < 1e-12);
    }

    #[test]
    fn ml_noiseless_is_exact() {
        for seed in 0..3 {
            let inst = TinyInstance::random(seed, Modulation::Qam4, 0.0).unwrap();
            assert_eq!(inst.hypotheses(), 65536);
            let y = inst.noiseless().unwrap();
            assert_eq!(ml_detect(&inst, &y).unwrap(), inst.truth.symbols);
        }
    }

    #[test]
    fn ml_refuses_large_instances() {
        let inst = TinyInstance::random(0, Modulation::Qam16, 0.0).unwrap();
        let y = inst.noiseless().unwrap();
        assert!(matches!(ml_detect(&inst, &y), Err(Error::OracleRefused(_))));
        let cfg = OtfsConfig::new(16, 4, 15e3).unwrap();
        let pattern = build_pattern(&cfg, 4, 14, PatternVariant::Proposed, 0.0).unwrap();
        let c = Constellation::new(Modulation::Bpsk, 1.0);
        let bits = vec![0u8; pattern.data_set().len()];
        let (_, truth) = map_frame(&pattern, &c, &bits, &mut derive_rng(0, &[])).unwrap();
        let taps = vec![Tap { l_tau: 0, k_nu: 0, beta_nu: 0.0, gain: C64::new(1.0, 0.0) }];
        assert!(matches!(TinyInstance::new(pattern, c, taps, truth), Err(Error::OracleRefused(_))));
    }

    #[test]
    fn finite_difference() {
        assert!((fd_gradient(|x| x * x, 3.0, 1e-4).unwrap() - 6.0).abs() < 1e-8);
        assert_eq!(fd_gradient(|_| 2.5, 1.0, 1e-6).unwrap(), 0.0);
        assert!(fd_gradient(|x| x, 0.0, 0.0).is_err());
    }

    #[test]
    fn quadrature_limits() {
        let lik = [Message::new(C64::new(0.7, -0.2), 0.3), Message::new(C64::new(0.5, 0.1), 0.6)];
        let (m, v, k) = quad_posterior(1.0, 2.0, &lik).unwrap();
        let prec = 0.5 + 1.0 / 0.3 + 1.0 / 0.6;
        let mean = (lik[0].mean / 0.3 + lik[1].mean / 0.6) / prec;
        assert!((m - mean).norm() < 1e-9 && (v - 1.0 / prec).abs() < 1e-9 && k == 1.0);
        assert_eq!(quad_posterior(0.0, 2.0, &lik).unwrap(), (C64::new(0.0, 0.0), 0.0, 0.0));
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let mut rng = derive_rng(9, &[]);
        for _ in 0..5 {
            let lambda = rng.random_range(0.2..2.0);
            let ext = Message::new(complex_normal(&mut rng, 1.0), rng.random_range(0.05..1.0));
            let (m, v, k) = quad_posterior(0.5, lambda, &[ext]).unwrap();
            let (m2, v2, k2) = bg_moments(0.5, lambda, &ext);
            assert!((m - m2).norm() < 1e-8 && (v - v2).abs() < 1e-8 && (k - k2).abs() < 1e-8);
        }
    }

    #[test]
    fn scalar_transcription_matches_graph() {
        let cfg = OtfsConfig::new(16, 8, 15e3).unwrap();
        let pattern = build_pattern(&cfg, 4, 3, PatternVariant::Proposed, 6.0).unwrap();
        let c = Constellation::new(Modulation::Qam4, pattern.sigma_d2);
        let mut rng = derive_rng(21, &[]);
        let bits: Vec<u8> = (0..pattern.data_set().len() * 2).map(|_| rng.random_range(0..2)).collect();
        let (x, _) = map_frame(&pattern, &c, &bits, &mut rng).unwrap();
        let doppler = [(1i64, 0.23), (-1i64, -0.31)];
        let taps: Vec<Tap> = doppler
            .iter()
            .enumerate()
            .map(|(p, &(k, b))| Tap { l_tau: p, k_nu: k, beta_nu: b, gain: complex_normal(&mut rng, 1.0) })
            .collect();
        let sigma_n2 = 0.05;
        let mut y = time_domain_response(&cfg, &taps, &x).unwrap();
        for v in y.values_mut() {
            *v += complex_normal(&mut rng, sigma_n2);
        }
        let mut pilots = DdGrid::zeros(&cfg);
        for &i in pattern.pilot_set() {
            pilots.values_mut()[i] = x.values()[i];
        }
        let em = EmState::new(
            BgPrior::new(1.0, vec![1.0, 1.0]).unwrap(),
            doppler.iter().map(|&(k_nu, beta_nu)| DopplerTap { k_nu, beta_nu }).collect(),
            2,
        )
        .unwrap();
        let mut st = FactorGraphState::init(&y, &pattern, &pilots, &em, &c, sigma_n2, MpSettings::default()).unwrap();
        st.sweep(&em.prior);
        st.sweep(&em.prior);
        let oracle = ScalarMp::new(&cfg, &doppler, y.values(), sigma_n2).unwrap();
        let (n, pm) = (cfg.n, 2);
        let obs = st.observation_grids().to_vec();
        let mut obs_of = vec![None; cfg.num_grids()];
        for (o, &g) in obs.iter().enumerate() {
            obs_of[g] = Some(o);
        }
        let x_to_y = st.x_to_y.clone();
        let h_to_y = st.h_to_y.clone();
        let post = st.posterior.clone();
        let x_msg = |g: usize, p: usize, q: usize| x_to_y[(g * pm + p) * n + q];
        let h_msg = |g: usize, p: usize| match obs_of[g] {
            Some(o) => h_to_y[o * pm + p],
            None => Message::new(post.h_hat[p], post.lambda_breve[p]),
        };
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        for g in 0..cfg.num_grids() {
            for p in 0..pm {
                for q in 0..n {
                    let (gm, src) = st.edge_coeff(g, p, q);
                    let (gm_o, src_o) = oracle.coeff(g, p, q);
                    assert_eq!(src, src_o, "source at {g},{p},{q}");
                    assert!((gm - gm_o).norm() < 1e-10, "gamma at {g},{p},{q}: {gm} vs {gm_o}");
                }
            }
        }
        st.pass_y_to_h();
        for (o, &g) in obs.iter().enumerate() {
            for p in 0..pm {
                let want = oracle.y_to_h(g, p, x_msg, h_msg).expect("informative");
                let got = st.y_to_h[o * pm + p];
                assert!((got.mean - want.mean).norm() < 1e-8 * (1.0 + want.mean.norm()), "y->h mean at {g},{p}");
                assert!(rel(got.var, want.var) < 1e-8, "y->h var at {g},{p}: {} vs {}", got.var, want.var);
            }
        }
        st.pass_y_to_x();
        let mut checked = 0;
        for g in 0..cfg.num_grids() {
            for p in 0..pm {
                for q in 0..n {
                    let (_, src) = st.edge_coeff(g, p, q);
                    if pattern.roles()[src] != GridRole::Data {
                        continue;
                    }
                    let got = st.y_to_x[(g * pm + p) * n + q];
                    match oracle.y_to_x(g, p, q, x_msg, h_msg) {
                        Some(want) => {
                            assert!((got.mean - want.mean).norm() < 1e-7 * (1.0 + want.mean.norm()), "y->x mean at {g},{p},{q}");
                            assert!(rel(got.var, want.var) < 1e-7, "y->x var at {g},{p},{q}");
                            checked += 1;
                        }
                        None => assert!(!got.is_informative()),
                    }
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn suite_passes() {
        for c in run_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
