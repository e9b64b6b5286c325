//! Delay-Doppler frame construction and the OTFS modem chain.
//!
//! Doppler indices `k` run over `[-N/2, N/2 - 1]` and delay indices `l` over
//! `[0, M - 1]`. Grids store row `k + N/2` so every index is non-negative
//! internally; the public accessors take the signed Doppler index.

mod constellation;
mod modem;
mod pattern;

pub use constellation::{Constellation, Modulation};
pub use modem::{heisenberg, isfft, sfft, wigner, wigner_sfft, TfGrid, TimeSignal};
pub use pattern::{build_pattern, map_frame, score, FrameTruth, GridRole, PatternVariant, Score, SymbolPattern};

use crate::{Error, Result, C64};

/// Frame dimensions and sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtfsConfig {
    /// Number of subcarriers (delay bins).
    pub m: usize,
    /// Number of time slots (Doppler bins).
    pub n: usize,
    /// Subcarrier spacing in Hz.
    pub delta_f: f64,
}

impl OtfsConfig {
    pub fn new(m: usize, n: usize, delta_f: f64) -> Result<Self> {
        if m < 2 || n < 2 || m % 2 != 0 || n % 2 != 0 {
            return Err(Error::Config(format!("M and N must be even and >= 2, got M={m}, N={n}")));
        }
        if !(delta_f.is_finite() && delta_f > 0.0) {
            return Err(Error::Config(format!("subcarrier spacing must be positive, got {delta_f}")));
        }
        Ok(Self { m, n, delta_f })
    }

    /// Builds the configuration from the sampling rate `1/Ts`.
    pub fn from_sample_rate(m: usize, n: usize, sample_rate: f64) -> Result<Self> {
        Self::new(m, n, sample_rate / m as f64)
    }

    /// Slot duration `T = 1/Δf`.
    pub fn slot_duration(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// Sample period `Ts = 1/(M Δf)`, also the delay resolution.
    pub fn sample_period(&self) -> f64 {
        1.0 / (self.m as f64 * self.delta_f)
    }

    /// Doppler resolution `1/(N T)`.
    pub fn doppler_resolution(&self) -> f64 {
        1.0 / (self.n as f64 * self.slot_duration())
    }

    pub fn num_grids(&self) -> usize {
        self.m * self.n
    }

    /// Storage row of signed Doppler index `k`.
    #[inline]
    pub fn row_of(&self, k: i64) -> usize {
        (k + (self.n / 2) as i64) as usize
    }

    /// Signed Doppler index of storage row.
    #[inline]
    pub fn k_of(&self, row: usize) -> i64 {
        row as i64 - (self.n / 2) as i64
    }

    #[inline]
    pub fn index(&self, row: usize, l: usize) -> usize {
        row * self.m + l
    }

    pub fn k_range(&self) -> std::ops::Range<i64> {
        let h = (self.n / 2) as i64;
        -h..h
    }
}

/// Complex symbol grid on the delay-Doppler plane.
#[derive(Debug, Clone, PartialEq)]
pub struct DdGrid {
    m: usize,
    n: usize,
    values: Vec<C64>,
}

impl DdGrid {
    pub fn zeros(cfg: &OtfsConfig) -> Self {
        Self { m: cfg.m, n: cfg.n, values: vec![C64::new(0.0, 0.0); cfg.num_grids()] }
    }

    /// Wraps row-major values (row = k + N/2).
    pub fn from_values(cfg: &OtfsConfig, values: Vec<C64>) -> Result<Self> {
        if values.len() != cfg.num_grids() {
            return Err(Error::Dimension { expected: cfg.num_grids(), got: values.len() });
        }
        Ok(Self { m: cfg.m, n: cfg.n, values })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, k: i64, l: usize) -> C64 {
        self.values[self.slot(k, l)]
    }

    #[inline]
    pub fn set(&mut self, k: i64, l: usize, v: C64) {
        let i = self.slot(k, l);
        self.values[i] = v;
    }

    #[inline]
    pub fn at(&self, row: usize, l: usize) -> C64 {
        self.values[row * self.m + l]
    }

    #[inline]
    fn slot(&self, k: i64, l: usize) -> usize {
        let row = (k + (self.n / 2) as i64) as usize;
        debug_assert!(row < self.n && l < self.m);
        row * self.m + l
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn energy(&self) -> f64 {
        crate::math::energy(&self.values)
    }

    pub fn check_dims(&self, cfg: &OtfsConfig) -> Result<()> {
        if self.m != cfg.m || self.n != cfg.n {
            return Err(Error::Dimension { expected: cfg.num_grids(), got: self.values.len() });
        }
        Ok(())
    }

    /// Largest element-wise difference relative to the largest magnitude of `reference`.
    pub fn max_relative_error(&self, reference: &DdGrid) -> f64 {
        let scale = reference.values.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let diff = self.values.iter().zip(&reference.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        let cfg = OtfsConfig::from_sample_rate(256, 16, 20e6).unwrap();
        assert!((cfg.sample_period() * cfg.m as f64 * cfg.delta_f - 1.0).abs() < 1e-12);
        assert!((cfg.slot_duration() * cfg.delta_f - 1.0).abs() < 1e-12);
        assert!((cfg.sample_period() - 50e-9).abs() < 1e-18);
        // 1/(M N Ts) ~ 4.88 kHz
        assert!((cfg.doppler_resolution() - 4882.8125).abs() < 1e-6);
        assert!(OtfsConfig::new(3, 4, 1.0).is_err());
        assert!(OtfsConfig::new(4, 0, 1.0).is_err());
    }

    #[test]
    fn signed_index_roundtrip() {
        let cfg = OtfsConfig::new(8, 4, 1.0).unwrap();
        let mut g = DdGrid::zeros(&cfg);
        g.set(-2, 3, C64::new(1.0, 0.0));
        assert_eq!(g.at(0, 3), C64::new(1.0, 0.0));
        assert_eq!(cfg.k_of(cfg.row_of(-2)), -2);
        assert_eq!(cfg.k_range().collect::<Vec<_>>(), vec![-2, -1, 0, 1]);
    }
}
