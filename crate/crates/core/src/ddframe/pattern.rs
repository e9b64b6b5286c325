use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Constellation, DdGrid, OtfsConfig};
use crate::{Error, Result, C64};

/// Pilot arrangement on the delay-Doppler plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternVariant {
    /// Pilot columns plus a zeroed delay band on both sides of them.
    FullGuard,
    /// `N_P x M_P` pilots, the rest of the pilot columns are guards.
    Proposed,
    /// Pilot block only, no guards at all.
    OneColumnNoguard,
    /// Pilot block with `k_nu_max` guards above and below it in Doppler.
    OneColumnDopplerGuard { k_nu_max: usize },
}

impl PatternVariant {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FullGuard => "full-guard",
            Self::Proposed => "proposed",
            Self::OneColumnNoguard => "one-column-noguard",
            Self::OneColumnDopplerGuard { .. } => "one-column-doppler-guard",
        }
    }
}

impl fmt::Display for PatternVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::OneColumnDopplerGuard { k_nu_max } => write!(f, "{}:{k_nu_max}", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

impl FromStr for PatternVariant {
    type Err = Error;

    /// Accepts the variant names; the Doppler-guard variant takes an optional
    /// `:k` suffix (default 1).
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s.as_str(), None),
        };
        let v = match head {
            "full-guard" => Self::FullGuard,
            "proposed" => Self::Proposed,
            "one-column-noguard" => Self::OneColumnNoguard,
            "one-column-doppler-guard" => {
                let k_nu_max = match arg {
                    Some(a) => a.parse().map_err(|_| Error::Parse(format!("bad guard width `{a}`")))?,
                    None => 1,
                };
                return Ok(Self::OneColumnDopplerGuard { k_nu_max });
            }
            other => return Err(Error::Parse(format!("unknown pattern variant `{other}`"))),
        };
        if arg.is_some() {
            return Err(Error::Parse(format!("pattern `{head}` takes no argument")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridRole {
    Pilot,
    Guard,
    Data,
}

/// Partition of the frame into pilot, guard and data grids.
///
/// The index lists hold storage indices (`row * M + l`) in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolPattern {
    pub cfg: OtfsConfig,
    pub variant: PatternVariant,
    pub n_p: usize,
    pub m_p: usize,
    pub power_gap_db: f64,
    pub sigma_d2: f64,
    pub sigma_p2: f64,
    roles: Vec<GridRole>,
    pilots: Vec<usize>,
    guards: Vec<usize>,
    data: Vec<usize>,
}

impl SymbolPattern {
    pub fn role(&self, k: i64, l: usize) -> GridRole {
        self.roles[self.cfg.index(self.cfg.row_of(k), l)]
    }

    pub fn roles(&self) -> &[GridRole] {
        &self.roles
    }

    pub fn pilot_set(&self) -> &[usize] {
        &self.pilots
    }

    pub fn guard_set(&self) -> &[usize] {
        &self.guards
    }

    pub fn data_set(&self) -> &[usize] {
        &self.data
    }

    /// Received grids used for channel estimation: every Doppler row and
    /// delays `0..M_P + l_tau_max` (wrapped).
    pub fn observation_set(&self, l_tau_max: usize) -> Vec<usize> {
        let (m, n) = (self.cfg.m, self.cfg.n);
        let width = (self.m_p + l_tau_max).min(m);
        let mut out = Vec::with_capacity(n * width);
        for row in 0..n {
            for l in 0..width {
                out.push(row * m + l);
            }
        }
        out
    }

    /// `σ_P² / σ_D²`.
    pub fn power_ratio(&self) -> f64 {
        self.sigma_p2 / self.sigma_d2
    }
}

/// Builds the frame partition. Pilots occupy `k ∈ [-N/2, N_P - N/2 - 1]`,
/// `l ∈ [0, M_P - 1]` for every variant.
pub fn build_pattern(
    cfg: &OtfsConfig,
    n_p: usize,
    m_p: usize,
    variant: PatternVariant,
    delta_db: f64,
) -> Result<SymbolPattern> {
    let (m, n) = (cfg.m, cfg.n);
    if n_p == 0 || n_p > n {
        return Err(Error::InvalidPattern(format!("N_P = {n_p} outside 1..={n}")));
    }
    if m_p == 0 || m_p >= m {
        return Err(Error::InvalidPattern(format!("M_P = {m_p} outside 1..{m}")));
    }
    if !(delta_db.is_finite() && delta_db >= 0.0) {
        return Err(Error::InvalidPattern(format!("power gap must be a non-negative dB value, got {delta_db}")));
    }
    let mut roles = vec![GridRole::Data; m * n];
    for row in 0..n {
        for l in 0..m_p {
            let role = if row < n_p { GridRole::Pilot } else { GridRole::Guard };
            match variant {
                PatternVariant::FullGuard | PatternVariant::Proposed => roles[row * m + l] = role,
                _ if role == GridRole::Pilot => roles[row * m + l] = role,
                _ => {}
            }
        }
    }
    match variant {
        PatternVariant::FullGuard => {
            if m < 3 * m_p + 1 {
                return Err(Error::InvalidPattern(format!("full-guard needs M >= 3 M_P + 1, got M={m}, M_P={m_p}")));
            }
            for row in 0..n {
                for l in (m_p..2 * m_p).chain(m - m_p..m) {
                    roles[row * m + l] = GridRole::Guard;
                }
            }
        }
        PatternVariant::OneColumnDopplerGuard { k_nu_max } => {
            let spare = n - n_p;
            let below = k_nu_max.min(spare);
            let above = k_nu_max.min(spare - below);
            for l in 0..m_p {
                for i in 0..below {
                    roles[(n_p + i) * m + l] = GridRole::Guard;
                }
                for i in 0..above {
                    roles[(n - 1 - i) * m + l] = GridRole::Guard;
                }
            }
        }
        PatternVariant::Proposed | PatternVariant::OneColumnNoguard => {}
    }
    let collect = |want: GridRole| roles.iter().enumerate().filter(|(_, r)| **r == want).map(|(i, _)| i).collect();
    let sigma_d2 = 1.0;
    Ok(SymbolPattern {
        cfg: *cfg,
        variant,
        n_p,
        m_p,
        power_gap_db: delta_db,
        sigma_d2,
        sigma_p2: (10f64.powf(delta_db / 10.0)).sqrt() * sigma_d2,
        pilots: collect(GridRole::Pilot),
        guards: collect(GridRole::Guard),
        data: collect(GridRole::Data),
        roles,
    })
}

/// Transmitted frame contents kept for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    pub bits: Vec<u8>,
    /// Constellation index per data grid, in `data_set` order.
    pub symbols: Vec<usize>,
    pub bits_per_symbol: usize,
    pub grid: DdGrid,
}

/// Places Gray-mapped data, random QPSK-phase pilots of power `σ_P²` and zero
/// guards.
pub fn map_frame<R: Rng + ?Sized>(
    pattern: &SymbolPattern,
    constellation: &Constellation,
    bits: &[u8],
    rng: &mut R,
) -> Result<(DdGrid, FrameTruth)> {
    let bps = constellation.bits_per_symbol();
    let expected = pattern.data.len() * bps;
    if bits.len() != expected {
        return Err(Error::Framing(format!("expected {expected} bits, got {}", bits.len())));
    }
    let mut grid = DdGrid::zeros(&pattern.cfg);
    let amp = (pattern.sigma_p2 / 2.0).sqrt();
    for &i in &pattern.pilots {
        let re = if rng.random::<bool>() { amp } else { -amp };
        let im = if rng.random::<bool>() { amp } else { -amp };
        grid.values_mut()[i] = C64::new(re, im);
    }
    let mut symbols = Vec::with_capacity(pattern.data.len());
    for (&i, chunk) in pattern.data.iter().zip(bits.chunks(bps.max(1))) {
        let s = constellation.index_of_bits(chunk);
        grid.values_mut()[i] = constellation.points()[s];
        symbols.push(s);
    }
    let truth = FrameTruth { bits: bits.to_vec(), symbols, bits_per_symbol: bps, grid: grid.clone() };
    Ok((grid, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ber: f64,
    pub ser: f64,
}

/// Bit and symbol error rates over the data grids. `detected` holds
/// constellation indices in `data_set` order.
pub fn score(truth: &FrameTruth, detected: &[usize]) -> Score {
    let n = truth.symbols.len();
    if n == 0 {
        return Score { ber: 0.0, ser: 0.0 };
    }
    let mut bit_errors = 0u32;
    let mut sym_errors = 0usize;
    for (&t, &d) in truth.symbols.iter().zip(detected) {
        let e = (t ^ d).count_ones();
        bit_errors += e;
        sym_errors += usize::from(e > 0);
    }
    Score {
        ber: bit_errors as f64 / (n * truth.bits_per_symbol) as f64,
        ser: sym_errors as f64 / n as f64,
    }
}
