//! Joint channel estimation and data detection: message passing on the
//! gain/symbol factor graph interleaved with EM updates of the sparsity,
//! tap variances and per-tap Doppler.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel::{source_row, theta, theta_dbeta, wrap_phase, xi, GammaKernel};
use crate::ddframe::{Constellation, DdGrid, GridRole, OtfsConfig, SymbolPattern};
use crate::math::log_cn;
use crate::{Error, Result, C64};

/// Kernel entries with `|θ/N|²` at or below this are not graph edges.
const EDGE_PRUNE: f64 = 1e-12;
/// Denominators below this magnitude skip the message.
const DIV_FLOOR: f64 = 1e-14;
const K_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BgPrior {
    pub alpha: f64,
    pub lambdas: Vec<f64>,
}

impl BgPrior {
    pub fn new(alpha: f64, lambdas: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("sparsity {alpha} outside [0, 1]")));
        }
        if lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::Config("tap variances must be positive".into()));
        }
        Ok(Self { alpha, lambdas })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DopplerTap {
    pub k_nu: i64,
    pub beta_nu: f64,
}

/// Hyperparameters `{α, Λ, (k_ν, β_ν) per tap}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    pub prior: BgPrior,
    pub doppler: Vec<DopplerTap>,
    pub k_nu_max: usize,
    pub iteration: usize,
}

impl EmState {
    pub fn new(prior: BgPrior, doppler: Vec<DopplerTap>, k_nu_max: usize) -> Result<Self> {
        if prior.lambdas.len() != doppler.len() {
            return Err(Error::Dimension { expected: prior.lambdas.len(), got: doppler.len() });
        }
        if doppler.iter().any(|d| d.k_nu.unsigned_abs() as usize > k_nu_max) {
            return Err(Error::Config(format!("Doppler tap outside ±{k_nu_max}")));
        }
        Ok(Self { prior, doppler, k_nu_max, iteration: 0 })
    }

    pub fn p_max(&self) -> usize {
        self.doppler.len()
    }

    /// Tap `p` sits at delay `p`.
    pub fn kernels(&self, cfg: &OtfsConfig) -> Vec<GammaKernel> {
        self.doppler
            .iter()
            .enumerate()
            .map(|(p, d)| GammaKernel::new(p, d.k_nu, d.beta_nu, cfg, EDGE_PRUNE))
            .collect()
    }
}

/// Gaussian message `CN(mean, var)`; `var = ∞` means no information.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub mean: C64,
    pub var: f64,
}

impl Message {
    pub const NONE: Message = Message { mean: C64 { re: 0.0, im: 0.0 }, var: f64::INFINITY };

    pub fn new(mean: C64, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn is_informative(&self) -> bool {
        self.var.is_finite()
    }
}

/// Precision-weighted product of Gaussian messages.
pub fn combine_gaussians(msgs: &[Message]) -> Message {
    let (mut prec, mut acc) = (0.0, C64::new(0.0, 0.0));
    for m in msgs.iter().filter(|m| m.is_informative()) {
        prec += 1.0 / m.var;
        acc += m.mean / m.var;
    }
    if prec > 0.0 {
        Message::new(acc / prec, 1.0 / prec)
    } else {
        Message::NONE
    }
}

/// Running precision sums with leave-one-out extraction.
#[derive(Debug, Clone, Copy, Default)]
struct PrecisionSum {
    prec: f64,
    acc: C64,
}

impl PrecisionSum {
    fn add(&mut self, m: &Message) {
        if m.is_informative() {
            self.prec += 1.0 / m.var;
            self.acc += m.mean / m.var;
        }
    }

    fn total(&self) -> Message {
        if self.prec > 0.0 {
            Message::new(self.acc / self.prec, 1.0 / self.prec)
        } else {
            Message::NONE
        }
    }

    fn without(&self, m: &Message) -> Message {
        if !m.is_informative() {
            return self.total();
        }
        let prec = self.prec - 1.0 / m.var;
        if prec <= self.prec * 1e-12 {
            return Message::NONE;
        }
        let acc = self.acc - m.mean / m.var;
        Message::new(acc / prec, 1.0 / prec)
    }
}

/// Moments of the discrete posterior `∝ CN(c; μ, η)` over a uniform prior.
pub fn project_symbol(extrinsic: &Message, points: &[C64]) -> (C64, f64) {
    let n = points.len() as f64;
    if !extrinsic.is_informative() {
        let mean = points.iter().sum::<C64>() / n;
        let second = points.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
        return (mean, (second - mean.norm_sqr()).max(0.0));
    }
    let log_w = |c: &C64| -(c - extrinsic.mean).norm_sqr() / extrinsic.var;
    let top = points.iter().map(log_w).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, C64::new(0.0, 0.0), 0.0);
    for c in points {
        let w = (log_w(c) - top).exp();
        z += w;
        m1 += c * w;
        m2 += c.norm_sqr() * w;
    }
    let mean = m1 / z;
    (mean, (m2 / z - mean.norm_sqr()).max(0.0))
}

/// `(mean, var, K)` of `BG(α, λ) × CN(h; μ, η)` via the two-hypothesis marginal.
pub fn bg_moments(alpha: f64, lambda: f64, ext: &Message) -> (C64, f64, f64) {
    if alpha <= 0.0 {
        return (C64::new(0.0, 0.0), 0.0, 0.0);
    }
    if !ext.is_informative() {
        return (C64::new(0.0, 0.0), alpha * lambda, alpha);
    }
    let eta = ext.var.max(1e-300);
    let k = if alpha >= 1.0 {
        1.0
    } else {
        let slab = alpha.ln() + log_cn(C64::new(0.0, 0.0), ext.mean, lambda + eta);
        let spike = (1.0 - alpha).ln() + log_cn(C64::new(0.0, 0.0), ext.mean, eta);
        (1.0 / (1.0 + (spike - slab).exp())).clamp(K_CLAMP, 1.0 - K_CLAMP)
    };
    let g = ext.mean * (lambda / (lambda + eta));
    let t = lambda * eta / (lambda + eta);
    (g * k, t * k + g.norm_sqr() * (k - k * k), k)
}

/// `(π, Γ, Θ)` used by the variance and sparsity updates.
pub fn bg_stats(alpha: f64, lambda: f64, ext: &Message) -> (f64, C64, f64) {
    let (_, _, k) = bg_moments(alpha, lambda, ext);
    if !ext.is_informative() {
        return (k, C64::new(0.0, 0.0), lambda);
    }
    let eta = ext.var;
    (k, ext.mean * (lambda / (lambda + eta)), lambda * eta / (lambda + eta))
}

/// Per-tap posterior of the equivalent gains for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainPosterior {
    pub h_hat: Vec<C64>,
    pub lambda_breve: Vec<f64>,
    /// Activation probability `K_p`.
    pub pi: Vec<f64>,
    /// Full combination of the observation messages per tap.
    pub extrinsic: Vec<Message>,
}

impl GainPosterior {
    fn prior_only(prior: &BgPrior) -> Self {
        let p_max = prior.lambdas.len();
        let mut out = Self {
            h_hat: vec![C64::new(0.0, 0.0); p_max],
            lambda_breve: vec![0.0; p_max],
            pi: vec![0.0; p_max],
            extrinsic: vec![Message::NONE; p_max],
        };
        for p in 0..p_max {
            let (m, v, k) = bg_moments(prior.alpha, prior.lambdas[p], &Message::NONE);
            out.h_hat[p] = m;
            out.lambda_breve[p] = v;
            out.pi[p] = k;
        }
        out
    }

    /// `E{|h̃_p|²}`.
    pub fn second_moment(&self, p: usize) -> f64 {
        self.h_hat[p].norm_sqr() + self.lambda_breve[p]
    }
}

/// Message-passing controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpSettings {
    pub rho: f64,
    /// Taps with `K_p` below this are left out of data detection.
    pub gate: f64,
}

impl Default for MpSettings {
    fn default() -> Self {
        Self { rho: 0.7, gate: 1e-3 }
    }
}

/// Messages of the joint factor graph for one received block.
///
/// Symbol-side edges are indexed `(grid * P_max + p) * N + q`; gain-side
/// edges `o * P_max + p` for the `o`-th observation grid.
#[derive(Debug, Clone)]
pub struct FactorGraphState {
    cfg: OtfsConfig,
    p_max: usize,
    y: Vec<C64>,
    sigma_n2: f64,
    var_floor: f64,
    points: Vec<C64>,
    roles: Vec<GridRole>,
    known: Vec<C64>,
    /// Data symbol storage indices in ascending order.
    data: Vec<usize>,
    obs: Vec<usize>,
    obs_of_grid: Vec<Option<usize>>,
    gamma: Vec<C64>,
    src: Vec<usize>,
    pub x_to_y: Vec<Message>,
    pub y_to_x: Vec<Message>,
    pub h_to_y: Vec<Message>,
    pub y_to_h: Vec<Message>,
    pub posterior: GainPosterior,
    settings: MpSettings,
}

impl FactorGraphState {
    /// Messages start from the priors: gains `(0, αλ_p)`, pilots and guards
    /// at their known value with zero variance, data at the constellation
    /// moments.
    pub fn init(
        y: &DdGrid,
        pattern: &SymbolPattern,
        pilots: &DdGrid,
        em: &EmState,
        constellation: &Constellation,
        sigma_n2: f64,
        settings: MpSettings,
    ) -> Result<Self> {
        let cfg = pattern.cfg;
        y.check_dims(&cfg)?;
        pilots.check_dims(&cfg)?;
        let p_max = em.p_max();
        let points = constellation.points().to_vec();
        let (prior_mean, prior_var) = project_symbol(&Message::NONE, &points);
        let roles = pattern.roles().to_vec();
        let known: Vec<C64> = roles
            .iter()
            .zip(pilots.values())
            .map(|(r, v)| if *r == GridRole::Pilot { *v } else { C64::new(0.0, 0.0) })
            .collect();
        let obs = pattern.observation_set(p_max.saturating_sub(1));
        let mut obs_of_grid = vec![None; cfg.num_grids()];
        for (o, &g) in obs.iter().enumerate() {
            obs_of_grid[g] = Some(o);
        }
        let edges = cfg.num_grids() * p_max * cfg.n;
        let mut state = Self {
            cfg,
            p_max,
            y: y.values().to_vec(),
            sigma_n2,
            var_floor: 1e-12 * pattern.sigma_d2,
            points,
            roles,
            known,
            data: pattern.data_set().to_vec(),
            obs,
            obs_of_grid,
            gamma: vec![C64::new(0.0, 0.0); edges],
            src: vec![0; edges],
            x_to_y: vec![Message::NONE; edges],
            y_to_x: vec![Message::NONE; edges],
            h_to_y: Vec::new(),
            y_to_h: Vec::new(),
            posterior: GainPosterior::prior_only(&em.prior),
            settings,
        };
        state.set_kernels(em);
        for e in 0..edges {
            let s = state.src[e];
            state.x_to_y[e] = match state.roles[s] {
                GridRole::Data => Message::new(prior_mean, prior_var),
                _ => Message::new(state.known[s], 0.0),
            };
        }
        state.h_to_y = (0..state.obs.len() * p_max)
            .map(|i| {
                let p = i % p_max;
                Message::new(C64::new(0.0, 0.0), em.prior.alpha * em.prior.lambdas[p])
            })
            .collect();
        state.y_to_h = vec![Message::NONE; state.obs.len() * p_max];
        Ok(state)
    }

    /// Rebuilds the edge coefficients after a Doppler update.
    pub fn set_kernels(&mut self, em: &EmState) {
        let (m, n) = (self.cfg.m, self.cfg.n);
        for (p, ker) in em.kernels(&self.cfg).iter().enumerate() {
            let active: Vec<bool> = (0..n).map(|q| ker.active_q().contains(&q)).collect();
            for row in 0..n {
                for l in 0..m {
                    for q in 0..n {
                        let e = ((row * m + l) * self.p_max + p) * n + q;
                        let (g, s) = ker.coeff(row, l, q);
                        self.gamma[e] = if active[q] { g } else { C64::new(0.0, 0.0) };
                        self.src[e] = s;
                    }
                }
            }
        }
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    pub fn observation_grids(&self) -> &[usize] {
        &self.obs
    }

    #[inline]
    fn edge(&self, g: usize, p: usize, q: usize) -> usize {
        (g * self.p_max + p) * self.cfg.n + q
    }

    /// `(γ, source)` of a symbol-side edge.
    pub fn edge_coeff(&self, g: usize, p: usize, q: usize) -> (C64, usize) {
        let e = self.edge(g, p, q);
        (self.gamma[e], self.src[e])
    }

    /// `(μ^{γx}, η^{γx})` for grid `g` and tap `p` from the current
    /// symbol-to-observation messages.
    pub fn gamma_x(&self, g: usize, p: usize) -> (C64, f64) {
        let (mut mu, mut eta) = (C64::new(0.0, 0.0), 0.0);
        for q in 0..self.cfg.n {
            let e = self.edge(g, p, q);
            let gm = self.gamma[e];
            if gm.norm_sqr() == 0.0 {
                continue;
            }
            mu += gm * self.x_to_y[e].mean;
            eta += gm.norm_sqr() * self.x_to_y[e].var;
        }
        (mu, eta)
    }

    /// Observation-to-gain messages over the observation set.
    pub fn pass_y_to_h(&mut self) {
        let p_max = self.p_max;
        for o in 0..self.obs.len() {
            let g = self.obs[o];
            let gx: Vec<(C64, f64)> = (0..p_max).map(|p| self.gamma_x(g, p)).collect();
            let mut tot_u = C64::new(0.0, 0.0);
            let mut tot_v = 0.0;
            let terms: Vec<(C64, f64)> = (0..p_max)
                .map(|p| {
                    let h = self.h_to_y[o * p_max + p];
                    let (mu, eta) = gx[p];
                    let t = (mu * h.mean, h.var * (eta + mu.norm_sqr()) + h.mean.norm_sqr() * eta);
                    tot_u += t.0;
                    tot_v += t.1;
                    t
                })
                .collect();
            for p in 0..p_max {
                let (mu_gx, eta_gx) = gx[p];
                self.y_to_h[o * p_max + p] = if mu_gx.norm() < DIV_FLOOR {
                    Message::NONE
                } else {
                    let u = tot_u - terms[p].0;
                    let v = (tot_v - terms[p].1).max(0.0);
                    let mean = (self.y[g] - u) / mu_gx;
                    let num = v + self.sigma_n2 + mean.norm_sqr() * eta_gx;
                    Message::new(mean, (num / (eta_gx + mu_gx.norm_sqr())).max(self.var_floor))
                };
            }
        }
    }

    /// Leave-one-out combinations of the observation-to-gain messages.
    pub fn combine_h(&self) -> Vec<Message> {
        let p_max = self.p_max;
        let mut sums = vec![PrecisionSum::default(); p_max];
        for (i, m) in self.y_to_h.iter().enumerate() {
            sums[i % p_max].add(m);
        }
        self.y_to_h.iter().enumerate().map(|(i, m)| sums[i % p_max].without(m)).collect()
    }

    /// Gain-to-observation messages with Bernoulli-Gaussian moment matching.
    pub fn pass_h_to_y(&mut self, prior: &BgPrior) {
        let loo = self.combine_h();
        for (i, ext) in loo.iter().enumerate() {
            let p = i % self.p_max;
            let (m, v, _) = bg_moments(prior.alpha, prior.lambdas[p], ext);
            self.h_to_y[i] = Message::new(m, v.max(0.0));
        }
    }

    /// Full posterior of every tap from all observation messages.
    pub fn gain_posterior(&mut self, prior: &BgPrior) -> &GainPosterior {
        let p_max = self.p_max;
        let mut sums = vec![PrecisionSum::default(); p_max];
        for (i, m) in self.y_to_h.iter().enumerate() {
            sums[i % p_max].add(m);
        }
        for p in 0..p_max {
            let ext = sums[p].total();
            let (m, v, k) = bg_moments(prior.alpha, prior.lambdas[p], &ext);
            self.posterior.h_hat[p] = m;
            self.posterior.lambda_breve[p] = v.max(0.0);
            self.posterior.pi[p] = k;
            self.posterior.extrinsic[p] = ext;
        }
        &self.posterior
    }

    /// Gain message seen by grid `g`: leave-one-out on the observation set,
    /// the full posterior elsewhere.
    fn gain_message(&self, g: usize, p: usize) -> Message {
        match self.obs_of_grid[g] {
            Some(o) => self.h_to_y[o * self.p_max + p],
            None => Message::new(self.posterior.h_hat[p], self.posterior.lambda_breve[p]),
        }
    }

    /// Observation-to-symbol messages with interference cancellation.
    pub fn pass_y_to_x(&mut self) {
        let (n, p_max) = (self.cfg.n, self.p_max);
        let live: Vec<bool> = self.posterior.pi.iter().map(|k| *k >= self.settings.gate).collect();
        for g in 0..self.cfg.num_grids() {
            let hs: Vec<Message> = (0..p_max).map(|p| self.gain_message(g, p)).collect();
            let mut tot_u = C64::new(0.0, 0.0);
            let mut tot_v = 0.0;
            for p in (0..p_max).filter(|&p| live[p]) {
                let h = hs[p];
                for q in 0..n {
                    let e = self.edge(g, p, q);
                    let gm = self.gamma[e];
                    let x = self.x_to_y[e];
                    tot_u += h.mean * gm * x.mean;
                    tot_v += gm.norm_sqr() * (h.mean.norm_sqr() * x.var + h.var * (x.var + x.mean.norm_sqr()));
                }
            }
            for p in 0..p_max {
                let h = hs[p];
                for q in 0..n {
                    let e = self.edge(g, p, q);
                    if self.roles[self.src[e]] != GridRole::Data {
                        continue;
                    }
                    let gm = self.gamma[e];
                    let denom = gm * h.mean;
                    if !live[p] || denom.norm() < DIV_FLOOR {
                        self.y_to_x[e] = Message::NONE;
                        continue;
                    }
                    let x = self.x_to_y[e];
                    let g2 = gm.norm_sqr();
                    let u = tot_u - h.mean * gm * x.mean;
                    let v = (tot_v - g2 * (h.mean.norm_sqr() * x.var + h.var * (x.var + x.mean.norm_sqr()))).max(0.0);
                    let mean = (self.y[g] - u) / denom;
                    let num = v + self.sigma_n2 + g2 * mean.norm_sqr() * h.var;
                    let var = num / (g2 * (h.mean.norm_sqr() + h.var));
                    self.y_to_x[e] = Message::new(mean, var.max(self.var_floor));
                }
            }
        }
    }

    fn symbol_sums(&self) -> Vec<PrecisionSum> {
        let mut sums = vec![PrecisionSum::default(); self.cfg.num_grids()];
        for (e, m) in self.y_to_x.iter().enumerate() {
            if self.roles[self.src[e]] == GridRole::Data {
                sums[self.src[e]].add(m);
            }
        }
        sums
    }

    /// Leave-one-out symbol extrinsics, one per symbol-side edge
    /// (`Message::NONE` on pilot and guard edges).
    pub fn combine_x(&self) -> Vec<Message> {
        let sums = self.symbol_sums();
        self.y_to_x
            .iter()
            .enumerate()
            .map(|(e, m)| if self.roles[self.src[e]] == GridRole::Data { sums[self.src[e]].without(m) } else { Message::NONE })
            .collect()
    }

    /// Projects the extrinsics onto the constellation and damps the result
    /// into the symbol-to-observation messages.
    pub fn update_x_to_y(&mut self) {
        let ext = self.combine_x();
        let rho = self.settings.rho;
        for (e, m) in ext.iter().enumerate() {
            if self.roles[self.src[e]] != GridRole::Data {
                continue;
            }
            let (mean, var) = project_symbol(m, &self.points);
            let old = self.x_to_y[e];
            self.x_to_y[e] = Message::new(rho * mean + (1.0 - rho) * old.mean, (rho * var + (1.0 - rho) * old.var).max(0.0));
        }
    }

    /// One sweep: gain side on the observation set, then the symbol side.
    pub fn sweep(&mut self, prior: &BgPrior) {
        self.pass_y_to_h();
        self.pass_h_to_y(prior);
        self.gain_posterior(prior);
        self.pass_y_to_x();
        self.update_x_to_y();
    }

    /// Hard decisions for the data grids, in data-set order.
    pub fn detect_symbols(&self) -> Vec<usize> {
        let sums = self.symbol_sums();
        self.data
            .iter()
            .map(|&s| {
                let t = sums[s].total();
                if t.is_informative() {
                    slice_lowest(&self.points, t.mean)
                } else {
                    0
                }
            })
            .collect()
    }

    /// Grid with pilots, zero guards and the given data decisions.
    pub fn hard_grid(&self, detected: &[usize]) -> Vec<C64> {
        let mut x = self.known.clone();
        for (&s, &d) in self.data.iter().zip(detected) {
            x[s] = self.points[d];
        }
        x
    }

    pub fn observations(&self) -> &[C64] {
        &self.y
    }
}

fn slice_lowest(points: &[C64], z: C64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in points.iter().enumerate() {
        let d = (z - c).norm_sqr();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Per-block evidence for the Doppler M-step.
#[derive(Debug, Clone)]
pub struct BlockEvidence {
    pub y: Vec<C64>,
    /// Detected grid: pilots, guards and hard data decisions.
    pub x_hat: Vec<C64>,
    pub h_mean: Vec<C64>,
    pub h_second: Vec<f64>,
}

impl BlockEvidence {
    pub fn new(y: Vec<C64>, x_hat: Vec<C64>, posterior: &GainPosterior) -> Self {
        let h_second = (0..posterior.h_hat.len()).map(|p| posterior.second_moment(p)).collect();
        Self { y, x_hat, h_mean: posterior.h_hat.clone(), h_second }
    }
}

/// `g_p = Σ_q γ x̂` for every grid and, optionally, `∂g_p/∂β`.
pub fn tap_response(cfg: &OtfsConfig, l_tau: usize, k_nu: i64, beta: f64, x: &[C64], with_derivative: bool) -> (Vec<C64>, Vec<C64>) {
    let (m, n) = (cfg.m, cfg.n);
    let nf = n as f64;
    let th: Vec<C64> = (0..n).map(|q| theta(q, beta, n) / nf).collect();
    let dth: Vec<C64> = if with_derivative { (0..n).map(|q| theta_dbeta(q, beta, n) / nf).collect() } else { Vec::new() };
    let mut g = vec![C64::new(0.0, 0.0); m * n];
    let mut dg = if with_derivative { vec![C64::new(0.0, 0.0); m * n] } else { Vec::new() };
    let wraps: Vec<C64> = (0..n).map(|sr| wrap_phase(sr, n)).collect();
    for l in 0..m {
        let xl = xi(l, l_tau, k_nu, beta, cfg);
        let dxl = xl * C64::new(0.0, 2.0 * PI * (l as f64 - l_tau as f64) / (m * n) as f64);
        let col = (l + m - l_tau % m) % m;
        for row in 0..n {
            let (mut acc, mut dacc) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
            for q in 0..n {
                let sr = source_row(row, k_nu, q, n);
                let xs = x[sr * m + col];
                if xs.norm_sqr() == 0.0 {
                    continue;
                }
                let w = if l < l_tau { wraps[sr] } else { C64::new(1.0, 0.0) };
                acc += w * xl * th[q] * xs;
                if with_derivative {
                    dacc += w * (dxl * th[q] + xl * dth[q]) * xs;
                }
            }
            g[row * m + l] = acc;
            if with_derivative {
                dg[row * m + l] = dacc;
            }
        }
    }
    (g, dg)
}

/// Expected log-likelihood of one tap's Doppler across blocks, with the other
/// taps frozen at their current values.
#[derive(Debug, Clone)]
pub struct DopplerObjective {
    cfg: OtfsConfig,
    sigma_n2: f64,
    blocks: Vec<BlockEvidence>,
    /// Current `g_p` per block, row-major `(grid, tap)`.
    z: Vec<Vec<C64>>,
    /// `Σ_p g_p E{h̃_p}` per block and grid.
    total: Vec<Vec<C64>>,
    p_max: usize,
}

impl DopplerObjective {
    pub fn new(cfg: &OtfsConfig, sigma_n2: f64, blocks: Vec<BlockEvidence>, em: &EmState) -> Self {
        let p_max = em.p_max();
        let zeros = vec![C64::new(0.0, 0.0); cfg.num_grids()];
        let mut out = Self { cfg: *cfg, sigma_n2, z: Vec::new(), total: vec![zeros; blocks.len()], blocks, p_max };
        out.z = out.blocks.iter().map(|_| vec![C64::new(0.0, 0.0); cfg.num_grids() * p_max]).collect();
        for p in 0..p_max {
            out.set_tap(p, em.doppler[p]);
        }
        out
    }

    /// Refreshes the cached response of tap `p`.
    pub fn set_tap(&mut self, p: usize, d: DopplerTap) {
        for (b, blk) in self.blocks.iter().enumerate() {
            let (g, _) = tap_response(&self.cfg, p, d.k_nu, d.beta_nu, &blk.x_hat, false);
            let h = blk.h_mean[p];
            for (i, v) in g.into_iter().enumerate() {
                let old = std::mem::replace(&mut self.z[b][i * self.p_max + p], v);
                self.total[b][i] += (v - old) * h;
            }
        }
    }

    /// `Σ_b E{h̃_p}` magnitude proxy: total posterior energy of tap `p`.
    pub fn tap_energy(&self, p: usize) -> f64 {
        self.blocks.iter().map(|b| b.h_second[p]).sum()
    }

    fn eval(&self, p: usize, k_nu: i64, beta: f64, with_derivative: bool) -> (f64, f64) {
        let (mut q, mut dq) = (0.0, 0.0);
        for (b, blk) in self.blocks.iter().enumerate() {
            let (g, dg) = tap_response(&self.cfg, p, k_nu, beta, &blk.x_hat, with_derivative);
            let h = blk.h_mean[p];
            let h2 = blk.h_second[p];
            for i in 0..g.len() {
                let others = self.total[b][i] - self.z[b][i * self.p_max + p] * h;
                let y = blk.y[i];
                q += 2.0 * (y.conj() * h * g[i]).re - 2.0 * (g[i].conj() * h.conj() * others).re - g[i].norm_sqr() * h2;
                if with_derivative {
                    let d = dg[i];
                    dq += 2.0 * (y.conj() * h * d).re - 2.0 * (d.conj() * h.conj() * others).re - 2.0 * (g[i].conj() * d).re * h2;
                }
            }
        }
        (q / self.sigma_n2, dq / self.sigma_n2)
    }

    /// `Q(k_ν, β_ν)` for tap `p`, constant terms omitted.
    pub fn q(&self, p: usize, k_nu: i64, beta: f64) -> f64 {
        self.eval(p, k_nu, beta, false).0
    }

    /// Analytic `∂Q/∂β_ν` for tap `p`.
    pub fn dq_dbeta(&self, p: usize, k_nu: i64, beta: f64) -> f64 {
        self.eval(p, k_nu, beta, true).1
    }
}

/// Integer Doppler search over `{-k_max..k_max}` at frozen `β`; ties go to
/// the smaller `|k|`, then to the current value.
pub fn em_update_knu(obj: &DopplerObjective, p: usize, current: DopplerTap, k_max: usize) -> i64 {
    let mut cands: Vec<i64> = (-(k_max as i64)..=k_max as i64).collect();
    cands.sort_by_key(|k| (k.abs(), *k != current.k_nu, *k));
    let mut best = current.k_nu;
    let mut best_q = f64::NEG_INFINITY;
    for k in cands {
        let q = obj.q(p, k, current.beta_nu);
        if q > best_q {
            best_q = q;
            best = k;
        }
    }
    best
}

/// Gradient-ascent controls for the fractional Doppler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSearch {
    pub kappa0: f64,
    pub xi: f64,
    /// Stop once an accepted step changes `Q` by at most `zeta_rel · |Q|`.
    pub zeta_rel: f64,
    pub max_steps: usize,
}

impl Default for BetaSearch {
    fn default() -> Self {
        Self { kappa0: 0.05, xi: 0.5, zeta_rel: 1e-6, max_steps: 30 }
    }
}

fn clamp_beta(b: f64) -> f64 {
    b.clamp(-0.5, 0.5 - 1e-9)
}

/// Fractional Doppler by gradient ascent along the sign of `∂Q/∂β`.
pub fn em_update_beta(obj: &DopplerObjective, p: usize, k_nu: i64, beta0: f64, search: &BetaSearch) -> f64 {
    let mut beta = clamp_beta(beta0);
    let (mut q, mut grad) = obj.eval(p, k_nu, beta, true);
    let zeta = search.zeta_rel * q.abs();
    let mut kappa = search.kappa0;
    for _ in 0..search.max_steps {
        if !grad.is_finite() {
            log::warn!("non-finite Doppler gradient on tap {p}; keeping β = {beta}");
            break;
        }
        if grad == 0.0 {
            break;
        }
        let cand = clamp_beta(beta + kappa * grad.signum());
        let (qc, gc) = obj.eval(p, k_nu, cand, true);
        if qc > q {
            let dq = qc - q;
            beta = cand;
            q = qc;
            grad = gc;
            if dq <= zeta {
                break;
            }
        } else {
            kappa *= search.xi;
            if kappa < 1e-9 {
                break;
            }
        }
    }
    beta
}

/// `λ̂_p = Σ_b π_p(|Γ_p|² + Θ_p) / (α N_O)`.
pub fn em_update_lambda(posteriors: &[GainPosterior], prior: &BgPrior) -> Vec<f64> {
    if prior.alpha <= 0.0 || posteriors.is_empty() {
        return prior.lambdas.clone();
    }
    let n_o = posteriors.len() as f64;
    (0..prior.lambdas.len())
        .map(|p| {
            let s: f64 = posteriors
                .iter()
                .map(|post| {
                    let (pi, g, t) = bg_stats(prior.alpha, prior.lambdas[p], &post.extrinsic[p]);
                    pi * (g.norm_sqr() + t)
                })
                .sum();
            (s / (prior.alpha * n_o)).max(1e-12)
        })
        .collect()
}

/// `α̂ = mean of π_p over taps and blocks`.
pub fn em_update_alpha(posteriors: &[GainPosterior], prior: &BgPrior) -> f64 {
    let p_max = prior.lambdas.len();
    if posteriors.is_empty() || p_max == 0 {
        return prior.alpha;
    }
    let s: f64 = posteriors
        .iter()
        .flat_map(|post| (0..p_max).map(move |p| bg_stats(prior.alpha, prior.lambdas[p], &post.extrinsic[p]).0))
        .sum();
    s / (p_max * posteriors.len()) as f64
}

/// Outer/inner iteration budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JceddSchedule {
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub mp: MpSettings,
    pub beta: BetaSearch,
    /// Relative residual change counted as converged; 0 runs the full budget.
    pub tol: f64,
    pub update_doppler: bool,
    pub update_prior: bool,
}

impl Default for JceddSchedule {
    fn default() -> Self {
        Self {
            inner_iters: 5,
            outer_iters: 15,
            mp: MpSettings::default(),
            beta: BetaSearch::default(),
            tol: 0.0,
            update_doppler: true,
            update_prior: true,
        }
    }
}

/// State after one outer iteration, before its EM update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    pub iteration: usize,
    pub em: EmState,
    pub h_hat: Vec<Vec<C64>>,
    pub detected: Vec<Vec<usize>>,
    /// Mean squared reconstruction residual per grid.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JceddOutput {
    pub detected: Vec<Vec<usize>>,
    pub posteriors: Vec<GainPosterior>,
    pub em: EmState,
    pub history: Vec<IterationSnapshot>,
    /// Index into `history` of the returned snapshot.
    pub best: usize,
    pub diverged: bool,
}

/// Received block plus its known pilot grid.
#[derive(Debug, Clone)]
pub struct JceddBlock {
    pub y: DdGrid,
    pub pilots: DdGrid,
}

fn residual(cfg: &OtfsConfig, em: &EmState, y: &[C64], x_hat: &[C64], h: &[C64]) -> f64 {
    let mut r = y.to_vec();
    for (p, d) in em.doppler.iter().enumerate() {
        if h[p].norm_sqr() == 0.0 {
            continue;
        }
        let (g, _) = tap_response(cfg, p, d.k_nu, d.beta_nu, x_hat, false);
        for (v, gv) in r.iter_mut().zip(g) {
            *v -= h[p] * gv;
        }
    }
    crate::math::energy(&r) / y.len() as f64
}

/// Alternates message-passing sweeps over every block with EM updates of
/// `{α, Λ, k_ν, β_ν}` shared by the blocks.
///
/// Stops early when the residual rises on three consecutive outer
/// iterations and returns the best iteration seen.
pub fn run_jcedd(
    blocks: &[JceddBlock],
    pattern: &SymbolPattern,
    constellation: &Constellation,
    sigma_n2: f64,
    init: EmState,
    schedule: &JceddSchedule,
) -> Result<JceddOutput> {
    if blocks.is_empty() {
        return Err(Error::Config("no received blocks".into()));
    }
    let cfg = pattern.cfg;
    let mut em = init;
    let mut states = blocks
        .iter()
        .map(|b| FactorGraphState::init(&b.y, pattern, &b.pilots, &em, constellation, sigma_n2, schedule.mp.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut history: Vec<IterationSnapshot> = Vec::new();
    let mut best: Option<(usize, Vec<GainPosterior>)> = None;
    let mut rises = 0;
    let mut diverged = false;
    for t in 1..=schedule.outer_iters.max(1) {
        em.iteration = t;
        for st in states.iter_mut() {
            for _ in 0..schedule.inner_iters.max(1) {
                st.sweep(&em.prior);
            }
        }
        let detected: Vec<Vec<usize>> = states.iter().map(|s| s.detect_symbols()).collect();
        let x_hats: Vec<Vec<C64>> = states.iter().zip(&detected).map(|(s, d)| s.hard_grid(d)).collect();
        let res = states
            .iter()
            .zip(&x_hats)
            .map(|(s, x)| residual(&cfg, &em, &s.y, x, &s.posterior.h_hat))
            .sum::<f64>()
            / states.len() as f64;
        let posteriors: Vec<GainPosterior> = states.iter().map(|s| s.posterior.clone()).collect();
        let prev = history.last().map(|h| h.residual);
        history.push(IterationSnapshot {
            iteration: t,
            em: em.clone(),
            h_hat: posteriors.iter().map(|p| p.h_hat.clone()).collect(),
            detected: detected.clone(),
            residual: res,
        });
        if best.as_ref().map_or(true, |(i, _)| res < history[*i].residual) {
            best = Some((history.len() - 1, posteriors.clone()));
        }
        if let Some(prev) = prev {
            rises = if res > prev { rises + 1 } else { 0 };
            if rises >= 3 {
                log::warn!("JCEDD residual rose for 3 iterations; stopping at {t}");
                diverged = true;
                break;
            }
            let converged = schedule.tol > 0.0
                && (prev - res).abs() <= schedule.tol * prev.max(f64::MIN_POSITIVE)
                && history[history.len() - 2].detected == detected;
            if converged {
                break;
            }
        }
        if t == schedule.outer_iters {
            break;
        }
        if schedule.update_doppler {
            let evidence: Vec<BlockEvidence> = states
                .iter()
                .zip(x_hats)
                .map(|(s, x)| BlockEvidence::new(s.y.clone(), x, &s.posterior))
                .collect();
            let mut obj = DopplerObjective::new(&cfg, sigma_n2, evidence, &em);
            let floor = 1e-12 * obj.blocks.len() as f64;
            for p in 0..em.p_max() {
                let live = posteriors.iter().any(|post| post.pi[p] >= schedule.mp.gate);
                if !live || obj.tap_energy(p) <= floor {
                    continue;
                }
                let cur = em.doppler[p];
                let k = em_update_knu(&obj, p, cur, em.k_nu_max);
                let beta = em_update_beta(&obj, p, k, cur.beta_nu, &schedule.beta);
                em.doppler[p] = DopplerTap { k_nu: k, beta_nu: beta };
                obj.set_tap(p, em.doppler[p]);
            }
            for st in states.iter_mut() {
                st.set_kernels(&em);
            }
        }
        if schedule.update_prior {
            let lambdas = em_update_lambda(&posteriors, &em.prior);
            let alpha = em_update_alpha(&posteriors, &em.prior);
            em.prior = BgPrior { alpha: alpha.clamp(K_CLAMP, 1.0 - K_CLAMP), lambdas };
        }
    }
    let (bi, posteriors) = best.expect("at least one iteration");
    let snap = &history[bi];
    Ok(JceddOutput { detected: snap.detected.clone(), posteriors, em: snap.em.clone(), best: bi, history, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{dd_response, CascadedChannel, Tap};
    use crate::ddframe::{build_pattern, map_frame, Modulation, PatternVariant};
    use crate::math::{complex_normal, derive_rng};
    use rand::Rng;

    #[test]
    fn precision_combination() {
        let m = Message::new(C64::new(1.0, -2.0), 0.4);
        let c = combine_gaussians(&[m, m]);
        assert!((c.mean - m.mean).norm() < 1e-14 && (c.var - 0.2).abs() < 1e-14);
        assert_eq!(combine_gaussians(&[m]), m);
        assert!(!combine_gaussians(&[]).is_informative());
        let msgs = [m, Message::new(C64::new(0.3, 0.1), 1.5), Message::new(C64::new(-1.0, 0.0), 0.7)];
        let mut s = PrecisionSum::default();
        msgs.iter().for_each(|x| s.add(x));
        let loo = s.without(&msgs[1]);
        let direct = combine_gaussians(&[msgs[0], msgs[2]]);
        assert!((loo.mean - direct.mean).norm() < 1e-12 && (loo.var - direct.var).abs() < 1e-12);
        assert!((1.0 / s.total().var - (1.0 / loo.var + 1.0 / msgs[1].var)).abs() < 1e-10);
    }

    #[test]
    fn projection_limits() {
        let c = Constellation::new(Modulation::Qam4, 1.0);
        let (m, v) = project_symbol(&Message::NONE, c.points());
        assert!(m.norm() < 1e-14 && (v - 1.0).abs() < 1e-14);
        let (m, v) = project_symbol(&Message::new(c.points()[2], 1e-9), c.points());
        assert!((m - c.points()[2]).norm() < 1e-12 && v < 1e-12);
        let b = Constellation::new(Modulation::Bpsk, 1.0);
        let (m, v) = project_symbol(&Message::new(C64::new(0.5, 0.0), 1.0), b.points());
        let (wp, wm) = ((-(0.5f64).powi(2)).exp(), (-(1.5f64).powi(2)).exp());
        let want = (wp - wm) / (wp + wm);
        assert!((m.re - want).abs() < 1e-12 && (v - (1.0 - want * want)).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_gaussian_limits() {
        let ext = Message::new(C64::new(0.4, -0.2), 0.3);
        let (m, v, k) = bg_moments(1.0, 2.0, &ext);
        assert_eq!(k, 1.0);
        assert!((m - ext.mean * (2.0 / 2.3)).norm() < 1e-14 && (v - 0.6 / 2.3).abs() < 1e-14);
        assert_eq!(bg_moments(0.0, 2.0, &ext), (C64::new(0.0, 0.0), 0.0, 0.0));
        // two-hypothesis Bayes at α = 0.5, λ = 1, extrinsic (0, 1)
        let (_, _, k) = bg_moments(0.5, 1.0, &Message::new(C64::new(0.0, 0.0), 1.0));
        let slab = 1.0 / (PI * 2.0);
        let spike = 1.0 / PI;
        assert!((k - slab / (slab + spike)).abs() < 1e-12);
    }

    #[test]
    fn lambda_and_alpha_plug_in() {
        let post = GainPosterior {
            h_hat: vec![C64::new(0.0, 0.0)],
            lambda_breve: vec![0.0],
            pi: vec![1.0],
            extrinsic: vec![Message::new(C64::new(2.0, 0.0), 1e-300)],
        };
        let prior = BgPrior { alpha: 1.0, lambdas: vec![1e300] };
        let l = em_update_lambda(&[post.clone()], &prior);
        assert!((l[0] - 4.0).abs() < 1e-9);
        assert_eq!(em_update_alpha(&[post], &prior), 1.0);
        let off = GainPosterior { extrinsic: vec![Message::NONE], ..GainPosterior::prior_only(&BgPrior { alpha: 0.0, lambdas: vec![1.0] }) };
        let prior0 = BgPrior { alpha: 0.0, lambdas: vec![1.0] };
        assert_eq!(em_update_alpha(&[off.clone()], &prior0), 0.0);
        assert_eq!(em_update_lambda(&[off], &prior0), vec![1.0]);
    }

    fn setup(seed: u64, taps: &[(usize, i64, f64, C64)], sigma_n2: f64) -> (SymbolPattern, Constellation, JceddBlock, crate::ddframe::FrameTruth, CascadedChannel) {
        let cfg = OtfsConfig::new(16, 8, 15e3).unwrap();
        let pat = build_pattern(&cfg, 4, 3, PatternVariant::Proposed, 6.0).unwrap();
        let con = Constellation::new(Modulation::Qam4, 1.0);
        let mut rng = derive_rng(seed, &[]);
        let bits: Vec<u8> = (0..pat.data_set().len() * 2).map(|_| rng.random_range(0..2)).collect();
        let (_, truth) = map_frame(&pat, &con, &bits, &mut rng).unwrap();
        let mut ch = CascadedChannel::empty(4);
        for &(l, k, b, h) in taps {
            ch.taps[l] = Tap { l_tau: l, k_nu: k, beta_nu: b, gain: h };
        }
        ch.sigma_n2 = sigma_n2;
        let mut y = dd_response(&truth.grid, &ch, &cfg);
        for v in y.values_mut() {
            *v += complex_normal(&mut rng, sigma_n2);
        }
        let mut pilots = DdGrid::zeros(&cfg);
        for &s in pat.pilot_set() {
            pilots.values_mut()[s] = truth.grid.values()[s];
        }
        (pat, con, JceddBlock { y, pilots }, truth, ch)
    }

    fn true_em(ch: &CascadedChannel, alpha: f64) -> EmState {
        let doppler = ch.taps.iter().map(|t| DopplerTap { k_nu: t.k_nu, beta_nu: t.beta_nu }).collect();
        EmState::new(BgPrior { alpha, lambdas: vec![1.0; ch.p_max()] }, doppler, 3).unwrap()
    }

    #[test]
    fn noiseless_true_parameters_detect_exactly() {
        let taps = [(0, 1, 0.0, C64::new(1.0, 0.3)), (2, -1, 0.0, C64::new(-0.5, 0.4))];
        let (pat, con, blk, truth, ch) = setup(3, &taps, 1e-8);
        let sched = JceddSchedule { outer_iters: 1, inner_iters: 8, ..Default::default() };
        let out = run_jcedd(&[blk], &pat, &con, 1e-8, true_em(&ch, 0.5), &sched).unwrap();
        assert_eq!(crate::ddframe::score(&truth, &out.detected[0]).ber, 0.0);
        for (p, t) in ch.taps.iter().enumerate() {
            assert!((out.posteriors[0].h_hat[p] - t.gain).norm() < 1e-3, "tap {p}");
        }
    }

    #[test]
    fn pilot_only_gain_message_is_exact() {
        let taps = [(0, 0, 0.0, C64::new(0.7, -0.2))];
        let (pat, con, blk, _, ch) = setup(1, &taps, 0.0);
        let em = EmState::new(BgPrior { alpha: 1.0, lambdas: vec![1.0] }, vec![DopplerTap { k_nu: 0, beta_nu: 0.0 }], 3).unwrap();
        let mut st = FactorGraphState::init(&blk.y, &pat, &blk.pilots, &em, &con, 0.0, MpSettings::default()).unwrap();
        st.pass_y_to_h();
        let pilot_grid = pat.pilot_set()[0];
        let o = st.observation_grids().iter().position(|&g| g == pilot_grid).unwrap();
        let m = st.y_to_h[o];
        assert!((m.mean - ch.taps[0].gain).norm() < 1e-12);
    }

    #[test]
    fn doppler_gradient_matches_finite_difference() {
        let taps = [(0, 1, 0.2, C64::new(1.0, 0.3)), (1, -1, -0.35, C64::new(-0.5, 0.4))];
        let (pat, con, blk, truth, ch) = setup(7, &taps, 0.01);
        let cfg = pat.cfg;
        let em = true_em(&ch, 0.5);
        let st = FactorGraphState::init(&blk.y, &pat, &blk.pilots, &em, &con, 0.01, MpSettings::default()).unwrap();
        let post = GainPosterior {
            h_hat: ch.gains(),
            lambda_breve: vec![0.01; 4],
            pi: vec![1.0; 4],
            extrinsic: vec![Message::NONE; 4],
        };
        let ev = BlockEvidence::new(st.observations().to_vec(), truth.grid.values().to_vec(), &post);
        let obj = DopplerObjective::new(&cfg, 0.01, vec![ev], &em);
        for &b in &[-0.4, -0.1, 0.05, 0.33] {
            let h = 1e-6;
            let fd = (obj.q(0, 1, b + h) - obj.q(0, 1, b - h)) / (2.0 * h);
            let an = obj.dq_dbeta(0, 1, b);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "β={b}: {fd} vs {an}");
        }
    }

    #[test]
    fn doppler_m_step_recovers_truth() {
        let taps = [(0, 1, 0.3, C64::new(1.0, 0.3))];
        let (pat, con, blk, truth, ch) = setup(11, &taps, 1e-6);
        let cfg = pat.cfg;
        let mut em = true_em(&ch, 0.5);
        em.doppler[0] = DopplerTap { k_nu: 0, beta_nu: 0.0 };
        let st = FactorGraphState::init(&blk.y, &pat, &blk.pilots, &em, &con, 1e-6, MpSettings::default()).unwrap();
        let post = GainPosterior { h_hat: ch.gains(), lambda_breve: vec![0.0; 4], pi: vec![1.0; 4], extrinsic: vec![Message::NONE; 4] };
        let ev = BlockEvidence::new(st.observations().to_vec(), truth.grid.values().to_vec(), &post);
        let obj = DopplerObjective::new(&cfg, 1e-6, vec![ev], &em);
        let k = em_update_knu(&obj, 0, DopplerTap { k_nu: 0, beta_nu: 0.3 }, 3);
        assert_eq!(k, 1);
        let beta = em_update_beta(&obj, 0, 1, 0.0, &BetaSearch::default());
        assert!((beta - 0.3).abs() < 0.01, "{beta}");
        // inactive tap: flat objective keeps the current integer tap
        assert_eq!(em_update_knu(&obj, 3, DopplerTap { k_nu: 0, beta_nu: 0.0 }, 3), 0);
    }

    #[test]
    fn detection_tie_goes_to_lowest_index() {
        let con = Constellation::new(Modulation::Qam4, 1.0);
        assert_eq!(slice_lowest(con.points(), C64::new(0.0, 0.0)), 0);
    }
}
