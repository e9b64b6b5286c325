//! Monte-Carlo experiment runner: configuration, per-trial link simulation,
//! metrics, overhead accounting and result files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::channel::{
    cascade, dd_response, geometry_angles, k_nu_max, max_doppler, split_doppler, CascadedChannel, Geometry,
    PathSampler, RbLink, UrPath,
};
use crate::ddframe::{
    build_pattern, map_frame, score, Constellation, DdGrid, FrameTruth, GridRole, Modulation, OtfsConfig,
    PatternVariant, SymbolPattern,
};
use crate::hris::{
    beamform, interference_energy, ls_calibrate, nomp_extract, simulate_preamble, simulate_short_pilot,
    ActivationSchedule, BeamPath, HrisObservation, NompParams, PathEstimate, PhaseShiftVector, Preamble,
};
use crate::jcedd::{run_jcedd, BgPrior, DopplerTap, EmState, IterationSnapshot, JceddBlock, JceddSchedule};
use crate::math::{cis, complex_normal, db_to_linear, derive_rng, energy};
use crate::{Error, Result, C64};

const STREAM_CHANNEL: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(Error::Parse(format!("unknown scale `{other}`"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

/// Everything needed to reproduce a sweep. Config files use these field
/// names as keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub m: usize,
    pub n: usize,
    /// `1/Ts` in Hz.
    pub sample_rate: f64,
    /// Carrier frequency in Hz.
    pub fc: f64,
    pub n_p: usize,
    pub m_p: usize,
    pub pattern: PatternVariant,
    pub delta_db: f64,
    pub modulation: Modulation,
    /// BS antennas.
    pub nb: usize,
    pub nx: usize,
    pub ny: usize,
    pub n_rf: usize,
    /// Preamble length per activation block.
    pub n_t: usize,
    /// Scattering paths between user and HRIS.
    pub paths: usize,
    /// `τ_max / Ts`.
    pub tau_max_taps: usize,
    pub n_o_blocks: usize,
    pub snr_list: Vec<f64>,
    /// User speeds in km/h.
    pub velocities: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    pub rho: f64,
    /// Relative residual change at which JCEDD stops early; 0 runs every
    /// outer iteration.
    pub tol: f64,
    /// BS position in metres, HRIS corner at the origin.
    pub bs_position: [f64; 3],
    pub bs_direction: [f64; 3],
    pub lambda_rb: f64,
    /// OFDM pilot subcarriers, for the overhead comparison.
    pub ofdm_pilot_m: usize,
    /// OFDM symbols carrying pilots, for the overhead comparison.
    pub ofdm_pilot_n: usize,
    /// Record per-trial wall time. Off by default so outputs are
    /// byte-reproducible.
    pub timing: bool,
}

/// Config keys in declaration order.
pub const CONFIG_KEYS: [&str; 32] = [
    "scale",
    "m",
    "n",
    "sample_rate",
    "fc",
    "n_p",
    "m_p",
    "pattern",
    "delta_db",
    "modulation",
    "nb",
    "nx",
    "ny",
    "n_rf",
    "n_t",
    "paths",
    "tau_max_taps",
    "n_o_blocks",
    "snr_list",
    "velocities",
    "trials",
    "seed",
    "inner_iters",
    "outer_iters",
    "rho",
    "tol",
    "bs_position",
    "bs_direction",
    "lambda_rb",
    "ofdm_pilot_m",
    "ofdm_pilot_n",
    "timing",
];

fn field_err(field: &str, reason: impl Into<String>) -> Error {
    Error::ExperimentConfig { field: field.to_string(), reason: reason.into() }
}

fn parse_value<T: FromStr>(field: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| field_err(field, format!("cannot parse `{}`: {e}", value.trim())))
}

fn parse_list(field: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_value(field, s)).collect()
}

fn parse_vec3(field: &str, value: &str) -> Result<[f64; 3]> {
    let v = parse_list(field, value)?;
    <[f64; 3]>::try_from(v).map_err(|v| field_err(field, format!("expected 3 components, got {}", v.len())))
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            scale: Scale::Desk,
            m: 32,
            n: 8,
            sample_rate: 1.25e6,
            fc: 28e9,
            n_p: 4,
            m_p: 6,
            pattern: PatternVariant::Proposed,
            delta_db: 6.0,
            modulation: Modulation::Qam4,
            nb: 4,
            nx: 16,
            ny: 16,
            n_rf: 4,
            n_t: 16,
            paths: 3,
            tau_max_taps: 6,
            n_o_blocks: 2,
            snr_list: vec![5.0, 10.0, 15.0, 20.0],
            velocities: vec![240.0],
            trials: 20,
            seed: 1,
            inner_iters: 5,
            outer_iters: 10,
            rho: 0.7,
            tol: 1e-2,
            bs_position: [30.0, 40.0, 10.0],
            bs_direction: [0.0, 1.0, 0.0],
            lambda_rb: 1.0,
            ofdm_pilot_m: 0,
            ofdm_pilot_n: 0,
            timing: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            scale: Scale::Paper,
            m: 256,
            n: 16,
            sample_rate: 20e6,
            n_p: 8,
            nb: 8,
            nx: 64,
            ny: 64,
            n_rf: 8,
            n_o_blocks: 20,
            outer_iters: 15,
            ..Self::desk()
        }
    }

    pub fn for_scale(scale: Scale) -> Self {
        match scale {
            Scale::Desk => Self::desk(),
            Scale::Paper => Self::paper(),
        }
    }

    /// Parses `key = value` lines. `#` starts a comment. The `scale` key
    /// selects the defaults regardless of where it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| field_err(&format!("line {}", no + 1), "expected `key = value`"))?;
            let key = key.trim().to_string();
            if pairs.iter().any(|(k, _)| *k == key) {
                return Err(field_err(&key, "duplicate key"));
            }
            pairs.push((key, value.trim().to_string()));
        }
        let scale = match pairs.iter().find(|(k, _)| k == "scale") {
            Some((_, v)) => parse_value("scale", v)?,
            None => Scale::Desk,
        };
        let mut cfg = Self::for_scale(scale);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scale" => self.scale = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "n" => self.n = parse_value(key, value)?,
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "fc" => self.fc = parse_value(key, value)?,
            "n_p" => self.n_p = parse_value(key, value)?,
            "m_p" => self.m_p = parse_value(key, value)?,
            "pattern" => self.pattern = parse_value(key, value)?,
            "delta_db" => self.delta_db = parse_value(key, value)?,
            "modulation" => self.modulation = parse_value(key, value)?,
            "nb" => self.nb = parse_value(key, value)?,
            "nx" => self.nx = parse_value(key, value)?,
            "ny" => self.ny = parse_value(key, value)?,
            "n_rf" => self.n_rf = parse_value(key, value)?,
            "n_t" => self.n_t = parse_value(key, value)?,
            "paths" => self.paths = parse_value(key, value)?,
            "tau_max_taps" => self.tau_max_taps = parse_value(key, value)?,
            "n_o_blocks" => self.n_o_blocks = parse_value(key, value)?,
            "snr_list" => self.snr_list = parse_list(key, value)?,
            "velocities" => self.velocities = parse_list(key, value)?,
            "trials" => self.trials = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "inner_iters" => self.inner_iters = parse_value(key, value)?,
            "outer_iters" => self.outer_iters = parse_value(key, value)?,
            "rho" => self.rho = parse_value(key, value)?,
            "tol" => self.tol = parse_value(key, value)?,
            "bs_position" => self.bs_position = parse_vec3(key, value)?,
            "bs_direction" => self.bs_direction = parse_vec3(key, value)?,
            "lambda_rb" => self.lambda_rb = parse_value(key, value)?,
            "ofdm_pilot_m" => self.ofdm_pilot_m = parse_value(key, value)?,
            "ofdm_pilot_n" => self.ofdm_pilot_n = parse_value(key, value)?,
            "timing" => self.timing = parse_value(key, value)?,
            other => return Err(field_err(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(field_err("trials", "must be at least 1"));
        }
        if self.scale == Scale::Desk {
            for (field, v, max) in [("m", self.m, 32), ("n", self.n, 8), ("nx", self.nx, 16), ("ny", self.ny, 16)] {
                if v > max {
                    return Err(field_err(field, format!("desk scale allows at most {max}, got {v}")));
                }
            }
        }
        self.otfs().map_err(|e| field_err("m", e.to_string()))?;
        if !(self.sample_rate > 0.0 && self.fc > 0.0) {
            return Err(field_err("sample_rate", "sample rate and carrier must be positive"));
        }
        self.symbol_pattern().map_err(|e| field_err("pattern", e.to_string()))?;
        ActivationSchedule::new(self.nx, self.ny, self.n_rf).map_err(|e| field_err("n_rf", e.to_string()))?;
        if self.nb == 0 {
            return Err(field_err("nb", "must be at least 1"));
        }
        if self.n_t < self.tau_max_taps.max(1) {
            return Err(field_err("n_t", format!("preamble must cover the delay spread of {} taps", self.tau_max_taps)));
        }
        if self.paths == 0 || self.paths > self.tau_max_taps + 1 {
            return Err(field_err("paths", format!("need 1..={} distinct delay taps", self.tau_max_taps + 1)));
        }
        if self.tau_max_taps >= self.m {
            return Err(field_err("tau_max_taps", "delay spread must be shorter than M"));
        }
        if self.n_o_blocks == 0 {
            return Err(field_err("n_o_blocks", "must be at least 1"));
        }
        if self.snr_list.is_empty() || self.snr_list.iter().any(|s| !s.is_finite()) {
            return Err(field_err("snr_list", "needs at least one finite value"));
        }
        if self.velocities.is_empty() || self.velocities.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(field_err("velocities", "needs at least one non-negative value"));
        }
        if self.inner_iters == 0 {
            return Err(field_err("inner_iters", "must be at least 1"));
        }
        if self.outer_iters == 0 {
            return Err(field_err("outer_iters", "must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(field_err("rho", "damping must lie in (0, 1]"));
        }
        if !(self.tol >= 0.0) {
            return Err(field_err("tol", "must be non-negative"));
        }
        if !(self.lambda_rb > 0.0) {
            return Err(field_err("lambda_rb", "must be positive"));
        }
        geometry_angles(&Geometry::new(self.bs_position, self.bs_direction, self.fc))
            .map_err(|e| field_err("bs_position", e.to_string()))?;
        Ok(())
    }

    pub fn otfs(&self) -> Result<OtfsConfig> {
        OtfsConfig::from_sample_rate(self.m, self.n, self.sample_rate)
    }

    pub fn symbol_pattern(&self) -> Result<SymbolPattern> {
        build_pattern(&self.otfs()?, self.n_p, self.m_p, self.pattern, self.delta_db)
    }

    pub fn p_max(&self) -> usize {
        self.tau_max_taps + 1
    }

    pub fn schedule(&self) -> JceddSchedule {
        let mut s = JceddSchedule {
            inner_iters: self.inner_iters,
            outer_iters: self.outer_iters,
            tol: self.tol,
            ..Default::default()
        };
        s.mp.rho = self.rho;
        s
    }

    /// Text form accepted by [`ExperimentConfig::parse`].
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let vec3 = |v: &[f64; 3]| list(v);
        let lines = [
            ("scale", self.scale.to_string()),
            ("m", self.m.to_string()),
            ("n", self.n.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("fc", self.fc.to_string()),
            ("n_p", self.n_p.to_string()),
            ("m_p", self.m_p.to_string()),
            ("pattern", self.pattern.to_string()),
            ("delta_db", self.delta_db.to_string()),
            ("modulation", self.modulation.to_string()),
            ("nb", self.nb.to_string()),
            ("nx", self.nx.to_string()),
            ("ny", self.ny.to_string()),
            ("n_rf", self.n_rf.to_string()),
            ("n_t", self.n_t.to_string()),
            ("paths", self.paths.to_string()),
            ("tau_max_taps", self.tau_max_taps.to_string()),
            ("n_o_blocks", self.n_o_blocks.to_string()),
            ("snr_list", list(&self.snr_list)),
            ("velocities", list(&self.velocities)),
            ("trials", self.trials.to_string()),
            ("seed", self.seed.to_string()),
            ("inner_iters", self.inner_iters.to_string()),
            ("outer_iters", self.outer_iters.to_string()),
            ("rho", self.rho.to_string()),
            ("tol", self.tol.to_string()),
            ("bs_position", vec3(&self.bs_position)),
            ("bs_direction", vec3(&self.bs_direction)),
            ("lambda_rb", self.lambda_rb.to_string()),
            ("ofdm_pilot_m", self.ofdm_pilot_m.to_string()),
            ("ofdm_pilot_n", self.ofdm_pilot_n.to_string()),
            ("timing", self.timing.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parameter accuracy of the preamble stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NompMetrics {
    pub paths_found: usize,
    pub nmse_tau: f64,
    pub nmse_nu: f64,
    pub nmse_phi: f64,
    pub nmse_psi: f64,
    pub nmse_gain: f64,
}

/// Receiver accuracy after one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub nmse_h: f64,
    pub nmse_nu: f64,
    pub nmse_beta: f64,
    pub ber: f64,
    pub ser: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub snr_db: f64,
    pub velocity_kmh: f64,
    pub trial: usize,
    pub hris: NompMetrics,
    /// One entry per outer iteration; runs that stop early repeat the
    /// snapshot they return.
    pub iterations: Vec<IterationMetrics>,
    pub diverged: bool,
    pub wall_time_s: f64,
}

/// One line of `metrics.csv`: trial means at one SNR, speed and iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    #[serde(deserialize_with = "f64_or_nan")]
    pub snr_db: f64,
    pub iteration: usize,
    #[serde(deserialize_with = "f64_or_nan")]
    pub nmse_h: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub nmse_tau: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub nmse_nu: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub nmse_beta: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub ber: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub ser: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub wall_time_s: f64,
    #[serde(deserialize_with = "f64_or_nan")]
    pub velocity_kmh: f64,
}

fn f64_or_nan<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

pub const COLUMNS: [&str; 10] =
    ["snr_db", "iteration", "nmse_h", "nmse_tau", "nmse_nu", "nmse_beta", "ber", "ser", "wall_time_s", "velocity_kmh"];

/// `‖est - truth‖² / ‖truth‖²`, NaN when the truth is zero.
fn nmse_or_nan(est: &[f64], truth: &[f64]) -> f64 {
    let den: f64 = truth.iter().map(|t| t * t).sum();
    if den == 0.0 {
        return f64::NAN;
    }
    est.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / den
}

fn nmse_c_or_nan(est: &[C64], truth: &[C64]) -> f64 {
    let den = energy(truth);
    if den == 0.0 {
        return f64::NAN;
    }
    est.iter().zip(truth).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / den
}

/// Mean of the finite entries, NaN if there are none.
pub fn finite_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.into_iter().filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Pairs each true path with at most one estimate, greedily by delay gap
/// then spatial distance, and scores the matched parameters. Missed paths
/// count with zero estimates.
pub fn nomp_metrics(est: &[PathEstimate], truth: &[UrPath], ts: f64) -> NompMetrics {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, e) in est.iter().enumerate() {
            let d = (e.delay_taps as f64 - t.delay_taps as f64).abs()
                + (e.phi - t.phi).abs()
                + wrap_angle(e.psi - t.psi).abs() * t.phi.sin();
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut of_truth = vec![None; truth.len()];
    let mut used = vec![false; est.len()];
    for (_, i, j) in pairs {
        if of_truth[i].is_none() && !used[j] {
            of_truth[i] = Some(j);
            used[j] = true;
        }
    }
    let mut tau = (Vec::new(), Vec::new());
    let mut nu = (Vec::new(), Vec::new());
    let mut phi = (Vec::new(), Vec::new());
    let mut psi = (Vec::new(), Vec::new());
    let mut gain = (Vec::new(), Vec::new());
    for (t, m) in truth.iter().zip(&of_truth) {
        tau.1.push(t.delay_taps as f64);
        nu.1.push(t.doppler);
        phi.1.push(t.phi);
        psi.1.push(t.psi);
        gain.1.push(t.gain);
        match m.map(|j| est[j]) {
            Some(e) => {
                tau.0.push(e.delay_taps as f64);
                nu.0.push(e.doppler);
                phi.0.push(e.phi);
                psi.0.push(t.psi + wrap_angle(e.psi - t.psi));
                gain.0.push(e.gain(ts));
            }
            None => {
                tau.0.push(0.0);
                nu.0.push(0.0);
                phi.0.push(0.0);
                psi.0.push(0.0);
                gain.0.push(C64::new(0.0, 0.0));
            }
        }
    }
    NompMetrics {
        paths_found: est.len(),
        nmse_tau: nmse_or_nan(&tau.0, &tau.1),
        nmse_nu: nmse_or_nan(&nu.0, &nu.1),
        nmse_phi: nmse_or_nan(&phi.0, &phi.1),
        nmse_psi: nmse_or_nan(&psi.0, &psi.1),
        nmse_gain: nmse_c_or_nan(&gain.0, &gain.1),
    }
}

fn add_noise<R: Rng + ?Sized>(y: &mut [C64], sigma2: f64, rng: &mut R) {
    for v in y {
        *v += complex_normal(rng, sigma2);
    }
}

fn noisy_observation<R: Rng + ?Sized>(mut obs: HrisObservation, snr: f64, rng: &mut R) -> HrisObservation {
    let power = energy(&obs.y) / obs.y.len().max(1) as f64;
    obs.sigma2 = power / snr;
    add_noise(&mut obs.y, obs.sigma2, rng);
    obs
}

/// Randomness shared by every SNR point of one `(speed, trial)` pair.
struct Realization {
    rb: RbLink,
    /// Paths per OTFS block; gains are redrawn, everything else is fixed.
    block_paths: Vec<Vec<UrPath>>,
    frames: Vec<(DdGrid, FrameTruth)>,
}

/// Fixed objects of one configuration.
struct Setup {
    otfs: OtfsConfig,
    pattern: SymbolPattern,
    constellation: Constellation,
    activation: ActivationSchedule,
    preamble: Preamble,
}

impl Setup {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let otfs = cfg.otfs()?;
        let pattern = cfg.symbol_pattern()?;
        let constellation = Constellation::new(cfg.modulation, pattern.sigma_d2);
        Ok(Self {
            otfs,
            pattern,
            constellation,
            activation: ActivationSchedule::new(cfg.nx, cfg.ny, cfg.n_rf)?,
            preamble: Preamble::zadoff_chu(cfg.n_t),
        })
    }

    fn realize(&self, cfg: &ExperimentConfig, velocity: f64, vel_idx: usize, trial: usize) -> Result<Realization> {
        let mut rng = derive_rng(cfg.seed, &[STREAM_CHANNEL, vel_idx as u64, trial as u64]);
        let angles = geometry_angles(&Geometry::new(cfg.bs_position, cfg.bs_direction, cfg.fc))?;
        let rb = RbLink::draw(&mut rng, &angles, cfg.lambda_rb);
        let mut sampler = PathSampler::new(cfg.paths, cfg.tau_max_taps, max_doppler(velocity, cfg.fc));
        sampler.cascade_gain = ((cfg.nx * cfg.ny) as f64).powi(2) * cfg.lambda_rb;
        let first = sampler.sample(&mut rng)?;
        let mut block_paths = vec![first.clone()];
        for _ in 1..cfg.n_o_blocks {
            block_paths
                .push(first.iter().map(|p| UrPath { gain: complex_normal(&mut rng, p.prior_variance), ..*p }).collect());
        }
        let bits_per_frame = self.pattern.data_set().len() * self.constellation.bits_per_symbol();
        let frames = (0..cfg.n_o_blocks)
            .map(|_| {
                let bits: Vec<u8> = (0..bits_per_frame).map(|_| rng.random_range(0..2u8)).collect();
                map_frame(&self.pattern, &self.constellation, &bits, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Realization { rb, block_paths, frames })
    }

    fn beam(&self, cfg: &ExperimentConfig, est: &[PathEstimate], rb: &RbLink, ts: f64) -> PhaseShiftVector {
        if est.is_empty() {
            return PhaseShiftVector::zero_phase(cfg.nx * cfg.ny);
        }
        let paths: Vec<BeamPath> = est
            .iter()
            .map(|e| {
                let (k, b) = split_doppler(e.doppler, &self.otfs);
                BeamPath {
                    gain: e.gain(ts),
                    phi: e.phi,
                    psi: e.psi,
                    s2: interference_energy(e.delay_taps, k, b, &self.pattern, &self.otfs),
                }
            })
            .collect();
        beamform(&paths, rb.phi_r, rb.psi_r, cfg.nx, cfg.ny)
    }
}

/// Preamble stage only: NOMP parameter accuracy for one trial.
fn hris_trial(
    cfg: &ExperimentConfig,
    setup: &Setup,
    real: &Realization,
    velocity: f64,
    snr: f64,
    rng: &mut impl Rng,
) -> (Vec<PathEstimate>, NompMetrics) {
    let ts = setup.otfs.sample_period();
    let paths = &real.block_paths[0];
    let clean = simulate_preamble(paths, &setup.preamble, &setup.activation, ts, 0.0, rng);
    let obs = noisy_observation(clean, snr, rng);
    let prm = NompParams::new(cfg.p_max(), cfg.tau_max_taps, max_doppler(velocity, cfg.fc), ts);
    let est = nomp_extract(&obs, &setup.preamble, &setup.activation, &prm).paths;
    let metrics = nomp_metrics(&est, paths, ts);
    (est, metrics)
}

/// Initial hyperparameters from the preamble estimates and the received
/// power.
fn initial_em(cfg: &ExperimentConfig, setup: &Setup, est: &[PathEstimate], rx_power: f64, k_max: usize) -> Result<EmState> {
    let p_max = cfg.p_max();
    let mut doppler = vec![DopplerTap { k_nu: 0, beta_nu: 0.0 }; p_max];
    let mut strength = vec![0.0; p_max];
    for e in est.iter().filter(|e| e.delay_taps < p_max) {
        let s = e.gain_bar.norm_sqr();
        if s > strength[e.delay_taps] {
            let (k, b) = split_doppler(e.doppler, &setup.otfs);
            doppler[e.delay_taps] = DopplerTap { k_nu: k.clamp(-(k_max as i64), k_max as i64), beta_nu: b };
            strength[e.delay_taps] = s;
        }
    }
    let found = strength.iter().filter(|s| **s > 0.0).count().max(1);
    let alpha = found as f64 / p_max as f64;
    let pat = &setup.pattern;
    let mn = setup.otfs.num_grids() as f64;
    let sigma_x2 = (pat.pilot_set().len() as f64 * pat.sigma_p2 + pat.data_set().len() as f64 * pat.sigma_d2) / mn;
    let lambda = (rx_power / sigma_x2 / (alpha * p_max as f64)).max(1e-9);
    EmState::new(BgPrior::new(alpha, vec![lambda; p_max])?, doppler, k_max)
}

fn iteration_metrics(
    snap: &IterationSnapshot,
    truth: &[CascadedChannel],
    frames: &[(DdGrid, FrameTruth)],
) -> IterationMetrics {
    let h_true: Vec<C64> = truth.iter().flat_map(|c| c.gains()).collect();
    let h_est: Vec<C64> = snap.h_hat.iter().flatten().copied().collect();
    let active: Vec<usize> = (0..truth[0].p_max()).filter(|&p| truth.iter().any(|c| c.taps[p].is_active())).collect();
    let nu_t: Vec<f64> = active.iter().map(|&p| truth[0].taps[p].k_nu as f64 + truth[0].taps[p].beta_nu).collect();
    let nu_e: Vec<f64> = active.iter().map(|&p| snap.em.doppler[p].k_nu as f64 + snap.em.doppler[p].beta_nu).collect();
    let b_t: Vec<f64> = active.iter().map(|&p| truth[0].taps[p].beta_nu).collect();
    let b_e: Vec<f64> = active.iter().map(|&p| snap.em.doppler[p].beta_nu).collect();
    let scores: Vec<_> = frames.iter().zip(&snap.detected).map(|((_, t), d)| score(t, d)).collect();
    let n = scores.len().max(1) as f64;
    IterationMetrics {
        nmse_h: nmse_c_or_nan(&h_est, &h_true),
        nmse_nu: nmse_or_nan(&nu_e, &nu_t),
        nmse_beta: nmse_or_nan(&b_e, &b_t),
        ber: scores.iter().map(|s| s.ber).sum::<f64>() / n,
        ser: scores.iter().map(|s| s.ser).sum::<f64>() / n,
    }
}

/// Output of [`simulate_link`] for one trial, including the objects a caller
/// may want to inspect.
#[derive(Debug, Clone)]
pub struct LinkRun {
    pub result: TrialResult,
    pub truth: Vec<CascadedChannel>,
    pub sigma_n2: f64,
}

/// Full chain for one `(SNR, speed, trial)`: preamble and NOMP at the HRIS,
/// phase design, `N_O` blocks with LS recalibration between them, then
/// JCEDD at the BS.
pub fn simulate_link(cfg: &ExperimentConfig, snr_idx: usize, vel_idx: usize, trial: usize) -> Result<LinkRun> {
    let start = cfg.timing.then(Instant::now);
    let setup = Setup::new(cfg)?;
    let snr_db = cfg.snr_list[snr_idx];
    let velocity = cfg.velocities[vel_idx];
    let snr = db_to_linear(snr_db);
    let ts = setup.otfs.sample_period();
    let real = setup.realize(cfg, velocity, vel_idx, trial)?;
    let mut rng = derive_rng(cfg.seed, &[STREAM_NOISE, snr_idx as u64, vel_idx as u64, trial as u64]);
    let (mut est, hris) = hris_trial(cfg, &setup, &real, velocity, snr, &mut rng);

    let mut truth = Vec::with_capacity(cfg.n_o_blocks);
    let mut clean = Vec::with_capacity(cfg.n_o_blocks);
    for (b, paths) in real.block_paths.iter().enumerate() {
        if b > 0 && !est.is_empty() {
            let short = simulate_short_pilot(paths, &setup.preamble, cfg.n_rf, cfg.ny, ts, 0.0, &mut rng);
            let short = noisy_observation(short, snr, &mut rng);
            match ls_calibrate(&short, &setup.preamble, &est, cfg.ny, ts) {
                Ok(gains) => {
                    for (e, g) in est.iter_mut().zip(gains) {
                        e.gain_bar = g * cis(-2.0 * std::f64::consts::PI * e.doppler * e.delay_taps as f64 * ts);
                    }
                }
                Err(e) => log::debug!("block {b}: {e}"),
            }
        }
        let omega = setup.beam(cfg, &est, &real.rb, ts);
        let ch = cascade(paths, &real.rb, &omega.omega, cfg.nx, cfg.ny, cfg.p_max(), &setup.otfs)?;
        clean.push(dd_response(&real.frames[b].0, &ch, &setup.otfs));
        truth.push(ch);
    }
    let sigma_r2 = clean.iter().map(|y| y.energy()).sum::<f64>() / (cfg.n_o_blocks * setup.otfs.num_grids()) as f64;
    let sigma_n2 = (sigma_r2 / snr).max(f64::MIN_POSITIVE);
    let mut blocks = Vec::with_capacity(cfg.n_o_blocks);
    for (y, (x, _)) in clean.into_iter().zip(&real.frames) {
        let mut y = y;
        add_noise(y.values_mut(), sigma_n2, &mut rng);
        let mut pilots = DdGrid::zeros(&setup.otfs);
        for (i, r) in setup.pattern.roles().iter().enumerate() {
            if *r == GridRole::Pilot {
                pilots.values_mut()[i] = x.values()[i];
            }
        }
        blocks.push(JceddBlock { y, pilots });
    }
    let rx_power = (blocks.iter().map(|b| b.y.energy()).sum::<f64>()
        / (cfg.n_o_blocks * setup.otfs.num_grids()) as f64
        - sigma_n2)
        .max(sigma_n2 * 1e-3);
    let k_max = k_nu_max(max_doppler(velocity, cfg.fc), setup.otfs.doppler_resolution());
    let init = initial_em(cfg, &setup, &est, rx_power, k_max)?;
    let out = run_jcedd(&blocks, &setup.pattern, &setup.constellation, sigma_n2, init, &cfg.schedule())?;
    let mut iterations: Vec<IterationMetrics> =
        out.history.iter().map(|s| iteration_metrics(s, &truth, &real.frames)).collect();
    let delivered = iterations[out.best];
    iterations.resize(cfg.outer_iters, delivered);
    let result = TrialResult {
        snr_db,
        velocity_kmh: velocity,
        trial,
        hris,
        iterations,
        diverged: out.diverged,
        wall_time_s: start.map_or(0.0, |s| s.elapsed().as_secs_f64()),
    };
    Ok(LinkRun { result, truth, sigma_n2 })
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for v in 0..cfg.velocities.len() {
        for s in 0..cfg.snr_list.len() {
            for t in 0..cfg.trials {
                out.push((s, v, t));
            }
        }
    }
    out
}

#[cfg(feature = "parallel")]
fn map_jobs<T: Send, F: Fn(&(usize, usize, usize)) -> Result<T> + Sync + Send>(
    jobs: &[(usize, usize, usize)],
    f: F,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    jobs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_jobs<T, F: Fn(&(usize, usize, usize)) -> Result<T>>(jobs: &[(usize, usize, usize)], f: F) -> Result<Vec<T>> {
    jobs.iter().map(f).collect()
}

/// Every trial of the sweep, ordered by speed, SNR and trial index.
pub fn run_trials(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    cfg.validate()?;
    map_jobs(&jobs(cfg), |&(s, v, t)| simulate_link(cfg, s, v, t).map(|r| r.result))
}

/// Preamble-stage accuracy only, same ordering as [`run_trials`].
pub fn run_hris_trials(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64, NompMetrics)>> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    map_jobs(&jobs(cfg), |&(s, v, t)| {
        let real = setup.realize(cfg, cfg.velocities[v], v, t)?;
        let mut rng = derive_rng(cfg.seed, &[STREAM_NOISE, s as u64, v as u64, t as u64]);
        let (_, m) = hris_trial(cfg, &setup, &real, cfg.velocities[v], db_to_linear(cfg.snr_list[s]), &mut rng);
        Ok((cfg.snr_list[s], cfg.velocities[v], m))
    })
}

/// Trial means per `(speed, SNR, iteration)`.
pub fn summarize(cfg: &ExperimentConfig, trials: &[TrialResult]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for &vel in &cfg.velocities {
        for &snr in &cfg.snr_list {
            let group: Vec<&TrialResult> =
                trials.iter().filter(|t| t.velocity_kmh == vel && t.snr_db == snr).collect();
            if group.is_empty() {
                continue;
            }
            let wall = if cfg.timing { finite_mean(group.iter().map(|t| t.wall_time_s)) } else { 0.0 };
            let nmse_tau = finite_mean(group.iter().map(|t| t.hris.nmse_tau));
            for it in 0..cfg.outer_iters {
                let m = |f: fn(&IterationMetrics) -> f64| finite_mean(group.iter().map(|t| f(&t.iterations[it])));
                rows.push(MetricRow {
                    snr_db: snr,
                    iteration: it + 1,
                    nmse_h: m(|x| x.nmse_h),
                    nmse_tau,
                    nmse_nu: m(|x| x.nmse_nu),
                    nmse_beta: m(|x| x.nmse_beta),
                    ber: m(|x| x.ber),
                    ser: m(|x| x.ser),
                    wall_time_s: wall,
                    velocity_kmh: vel,
                });
            }
        }
    }
    rows
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    Ok(summarize(cfg, &run_trials(cfg)?))
}

/// Equivalent time cost of pilots, guards and cyclic prefixes in one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overhead {
    pub otfs_cost: usize,
    pub ofdm_cost: usize,
}

/// OTFS: pilot and guard grids plus one CP of `N_τmax` samples. OFDM: `P_M P_N`
/// pilots plus a CP of `N_τmax` per symbol.
pub fn overhead_compare(
    otfs: &OtfsConfig,
    n_p: usize,
    m_p: usize,
    variant: PatternVariant,
    n_tau_max: usize,
    p_m: usize,
    p_n: usize,
) -> Result<Overhead> {
    let pattern = build_pattern(otfs, n_p, m_p, variant, 0.0)?;
    let reserved = pattern.pilot_set().len() + pattern.guard_set().len();
    Ok(Overhead { otfs_cost: reserved + n_tau_max, ofdm_cost: p_m * p_n + n_tau_max * otfs.n })
}

impl ExperimentConfig {
    pub fn overhead(&self) -> Result<Overhead> {
        overhead_compare(
            &self.otfs()?,
            self.n_p,
            self.m_p,
            self.pattern,
            self.tau_max_taps,
            self.ofdm_pilot_m,
            self.ofdm_pilot_n,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Parse(format!("unknown output format `{other}`"))),
        }
    }
}

impl OutputFormat {
    pub fn file_name(&self) -> &'static str {
        match self {
            Self::Csv => "metrics.csv",
            Self::Json => "metrics.json",
        }
    }
}

/// Rounds to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().unwrap_or(x)
    } else {
        x
    }
}

fn fmt9(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        round9(x).to_string()
    }
}

fn rounded(r: &MetricRow) -> MetricRow {
    MetricRow {
        snr_db: round9(r.snr_db),
        iteration: r.iteration,
        nmse_h: round9(r.nmse_h),
        nmse_tau: round9(r.nmse_tau),
        nmse_nu: round9(r.nmse_nu),
        nmse_beta: round9(r.nmse_beta),
        ber: round9(r.ber),
        ser: round9(r.ser),
        wall_time_s: round9(r.wall_time_s),
        velocity_kmh: round9(r.velocity_kmh),
    }
}

/// Serialized rows. Floats carry 9 significant digits; NaN is written as
/// `NaN` in CSV and `null` in JSON.
pub fn render(rows: &[MetricRow], format: OutputFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyResult);
    }
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let map_err = |e: csv::Error| Error::Parse(e.to_string());
            w.write_record(COLUMNS).map_err(map_err)?;
            for r in rows {
                w.write_record([
                    fmt9(r.snr_db),
                    r.iteration.to_string(),
                    fmt9(r.nmse_h),
                    fmt9(r.nmse_tau),
                    fmt9(r.nmse_nu),
                    fmt9(r.nmse_beta),
                    fmt9(r.ber),
                    fmt9(r.ser),
                    fmt9(r.wall_time_s),
                    fmt9(r.velocity_kmh),
                ])
                .map_err(map_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
        }
        OutputFormat::Json => {
            let r: Vec<MetricRow> = rows.iter().map(rounded).collect();
            Ok(serde_json::to_string_pretty(&r)? + "\n")
        }
    }
}

pub fn emit(rows: &[MetricRow], format: OutputFormat, path: &Path) -> Result<()> {
    let text = render(rows, format)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn parse_rows(text: &str, format: OutputFormat) -> Result<Vec<MetricRow>> {
    match format {
        OutputFormat::Csv => {
            let mut rd = csv::Reader::from_reader(text.as_bytes());
            let headers = rd.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
            if headers.iter().ne(COLUMNS.iter().copied()) {
                return Err(Error::Parse(format!("unexpected columns {:?}", headers.iter().collect::<Vec<_>>())));
            }
            rd.deserialize::<CsvRow>()
                .map(|r| r.map(MetricRow::from).map_err(|e| Error::Parse(e.to_string())))
                .collect()
        }
        OutputFormat::Json => Ok(serde_json::from_str(text)?),
    }
}

#[derive(Deserialize)]
struct CsvRow {
    snr_db: f64,
    iteration: usize,
    nmse_h: f64,
    nmse_tau: f64,
    nmse_nu: f64,
    nmse_beta: f64,
    ber: f64,
    ser: f64,
    wall_time_s: f64,
    velocity_kmh: f64,
}

impl From<CsvRow> for MetricRow {
    fn from(r: CsvRow) -> Self {
        Self {
            snr_db: r.snr_db,
            iteration: r.iteration,
            nmse_h: r.nmse_h,
            nmse_tau: r.nmse_tau,
            nmse_nu: r.nmse_nu,
            nmse_beta: r.nmse_beta,
            ber: r.ber,
            ser: r.ser,
            wall_time_s: r.wall_time_s,
            velocity_kmh: r.velocity_kmh,
        }
    }
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    version: &'a str,
    seed: u64,
    format: OutputFormat,
    rows: usize,
    columns: &'a [&'a str],
    config: &'a ExperimentConfig,
}

/// Writes the metrics file and `meta.json` into `dir`; returns the metrics
/// path.
pub fn write_results(dir: &Path, cfg: &ExperimentConfig, rows: &[MetricRow], format: OutputFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format.file_name());
    emit(rows, format, &path)?;
    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        format,
        rows: rows.len(),
        columns: &COLUMNS,
        config: cfg,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            m: 16,
            n: 4,
            n_p: 2,
            m_p: 3,
            nx: 4,
            ny: 4,
            n_rf: 2,
            n_t: 8,
            paths: 2,
            tau_max_taps: 2,
            n_o_blocks: 2,
            snr_list: vec![10.0, 25.0],
            trials: 2,
            outer_iters: 3,
            inner_iters: 2,
            ..ExperimentConfig::desk()
        }
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let cfg = tiny();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let paper = ExperimentConfig::parse("trials = 3\nscale = paper\n").unwrap();
        assert_eq!((paper.m, paper.n, paper.trials, paper.n_o_blocks), (256, 16, 3, 20));
        let e = ExperimentConfig::parse("trails = 3").unwrap_err();
        assert!(matches!(e, Error::ExperimentConfig { ref field, .. } if field == "trails"));
        let e = ExperimentConfig::parse("trials = 0").unwrap_err();
        assert!(matches!(e, Error::ExperimentConfig { ref field, .. } if field == "trials"));
        let e = ExperimentConfig::parse("m = 64").unwrap_err();
        assert!(matches!(e, Error::ExperimentConfig { ref field, .. } if field == "m"));
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("snr_list = 1,x").is_err());
    }

    #[test]
    fn overhead_figures() {
        let paper = OtfsConfig::from_sample_rate(256, 16, 20e6).unwrap();
        assert_eq!(overhead_compare(&paper, 8, 6, PatternVariant::Proposed, 6, 0, 0).unwrap(), Overhead {
            otfs_cost: 102,
            ofdm_cost: 96
        });
        assert_eq!(overhead_compare(&paper, 4, 1, PatternVariant::OneColumnNoguard, 6, 0, 0).unwrap().otfs_cost, 10);
        let dg = PatternVariant::OneColumnDopplerGuard { k_nu_max: 3 };
        assert_eq!(overhead_compare(&paper, 4, 1, dg, 6, 0, 0).unwrap().otfs_cost, 16);
        assert_eq!(overhead_compare(&paper, 8, 6, PatternVariant::Proposed, 6, 12, 4).unwrap().ofdm_cost, 144);
    }

    #[test]
    fn nmse_conventions() {
        let t = [1.0, -2.0];
        assert_eq!(nmse_or_nan(&t, &t), 0.0);
        assert_eq!(nmse_or_nan(&[0.0, 0.0], &t), 1.0);
        assert!(nmse_or_nan(&t, &[0.0, 0.0]).is_nan());
        assert!((finite_mean([1.0, f64::NAN, 3.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(render(&a, OutputFormat::Csv).unwrap(), render(&b, OutputFormat::Csv).unwrap());
        assert_eq!(a.len(), 2 * 3);
        for w in a.windows(2).filter(|w| w[0].snr_db == w[1].snr_db) {
            assert!(w[1].iteration > w[0].iteration);
        }
    }

    #[test]
    fn emit_round_trip() {
        let rows = vec![
            MetricRow {
                snr_db: 10.0,
                iteration: 1,
                nmse_h: 0.123456789123,
                nmse_tau: 0.0,
                nmse_nu: f64::NAN,
                nmse_beta: 1e-7,
                ber: 0.25,
                ser: 0.5,
                wall_time_s: 0.0,
                velocity_kmh: 240.0,
            },
            MetricRow { iteration: 2, nmse_h: 3.0e-5, ..rounded(&MetricRow { nmse_nu: 0.5, ..Default::default() }) },
        ];
        assert!(matches!(render(&[], OutputFormat::Csv), Err(Error::EmptyResult)));
        let expect: Vec<MetricRow> = rows.iter().map(rounded).collect();
        for f in [OutputFormat::Csv, OutputFormat::Json] {
            let back = parse_rows(&render(&rows, f).unwrap(), f).unwrap();
            assert_eq!(back.len(), 2);
            for (a, b) in back.iter().zip(&expect) {
                assert_eq!(format!("{a:?}"), format!("{b:?}"));
            }
        }
        let csv = render(&rows, OutputFormat::Csv).unwrap();
        assert!(csv.starts_with("snr_db,iteration,nmse_h,nmse_tau,nmse_nu,nmse_beta,ber,ser,wall_time_s,velocity_kmh\n"));
        assert!(csv.contains("0.123456789,"));
        let dir = tempfile::tempdir().unwrap();
        let path = write_results(dir.path(), &tiny(), &rows, OutputFormat::Csv).unwrap();
        assert!(path.ends_with("metrics.csv"));
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
        assert_eq!(meta["seed"], 1);
    }
}
