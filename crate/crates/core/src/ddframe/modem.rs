//! ISFFT, Heisenberg (rectangular pulse), Wigner and SFFT transforms.

use rustfft::{FftDirection, FftPlanner};

use super::{DdGrid, OtfsConfig};
use crate::{Error, Result, C64};

/// Time-frequency grid, row-major over `(slot n, subcarrier m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfGrid {
    pub m: usize,
    pub n: usize,
    pub values: Vec<C64>,
}

/// Sampled baseband block with its cyclic prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSignal {
    pub samples: Vec<C64>,
    pub cp_len: usize,
}

impl TimeSignal {
    /// Samples after the cyclic prefix.
    pub fn body(&self) -> &[C64] {
        &self.samples[self.cp_len..]
    }
}

fn fft_rows(data: &mut [C64], rows: usize, cols: usize, dir: FftDirection) {
    let fft = FftPlanner::new().plan_fft(cols, dir);
    for r in 0..rows {
        fft.process(&mut data[r * cols..(r + 1) * cols]);
    }
}

fn fft_cols(data: &mut [C64], rows: usize, cols: usize, dir: FftDirection) {
    let fft = FftPlanner::new().plan_fft(rows, dir);
    let mut buf = vec![C64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            buf[r] = data[r * cols + c];
        }
        fft.process(&mut buf);
        for r in 0..rows {
            data[r * cols + c] = buf[r];
        }
    }
}

fn alternate_sign_rows(data: &mut [C64], rows: usize, cols: usize) {
    for r in (1..rows).step_by(2) {
        for v in &mut data[r * cols..(r + 1) * cols] {
            *v = -*v;
        }
    }
}

/// `X_tf[n,m] = 1/sqrt(NM) Σ_k Σ_l X_dd[k,l] exp(j2π(nk/N - ml/M))`, `k ∈ [-N/2, N/2)`.
pub fn isfft(x: &DdGrid, cfg: &OtfsConfig) -> Result<TfGrid> {
    x.check_dims(cfg)?;
    let (m, n) = (cfg.m, cfg.n);
    let mut data = x.values().to_vec();
    // along delay: exp(-j2π ml/M)
    fft_rows(&mut data, n, m, FftDirection::Forward);
    // along Doppler rows: exp(+j2π n row/N); the -N/2 offset gives (-1)^n
    fft_cols(&mut data, n, m, FftDirection::Inverse);
    alternate_sign_rows(&mut data, n, m);
    let s = 1.0 / ((m * n) as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= s);
    Ok(TfGrid { m, n, values: data })
}

/// Inverse of [`isfft`].
pub fn sfft(x: &TfGrid, cfg: &OtfsConfig) -> Result<DdGrid> {
    if x.m != cfg.m || x.n != cfg.n || x.values.len() != cfg.num_grids() {
        return Err(Error::Dimension { expected: cfg.num_grids(), got: x.values.len() });
    }
    let (m, n) = (cfg.m, cfg.n);
    let mut data = x.values.clone();
    alternate_sign_rows(&mut data, n, m);
    fft_cols(&mut data, n, m, FftDirection::Forward);
    fft_rows(&mut data, n, m, FftDirection::Inverse);
    let s = 1.0 / ((m * n) as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= s);
    DdGrid::from_values(cfg, data)
}

/// Rectangular-pulse Heisenberg transform: a unitary inverse DFT per slot,
/// followed by a single cyclic prefix for the whole block.
///
/// `channel_memory` is the largest delay tap the block must absorb.
pub fn heisenberg(x: &TfGrid, cp_len: usize, channel_memory: usize) -> Result<TimeSignal> {
    if cp_len < channel_memory {
        return Err(Error::Config(format!("cyclic prefix {cp_len} shorter than channel memory {channel_memory}")));
    }
    let (m, n) = (x.m, x.n);
    if cp_len > m * n {
        return Err(Error::Config(format!("cyclic prefix {cp_len} longer than the block")));
    }
    let mut body = x.values.clone();
    fft_rows(&mut body, n, m, FftDirection::Inverse);
    let s = 1.0 / (m as f64).sqrt();
    body.iter_mut().for_each(|v| *v *= s);
    let mut samples = Vec::with_capacity(cp_len + m * n);
    samples.extend_from_slice(&body[m * n - cp_len..]);
    samples.extend_from_slice(&body);
    Ok(TimeSignal { samples, cp_len })
}

/// Drops the cyclic prefix and applies a unitary DFT per slot.
pub fn wigner(r: &TimeSignal, cfg: &OtfsConfig) -> Result<TfGrid> {
    let (m, n) = (cfg.m, cfg.n);
    if r.samples.len() != r.cp_len + m * n {
        return Err(Error::Framing(format!(
            "expected {} samples after a {}-sample prefix, got {}",
            m * n,
            r.cp_len,
            r.samples.len().saturating_sub(r.cp_len)
        )));
    }
    let mut data = r.body().to_vec();
    fft_rows(&mut data, n, m, FftDirection::Forward);
    let s = 1.0 / (m as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= s);
    Ok(TfGrid { m, n, values: data })
}

/// Receiver front end: Wigner transform then SFFT.
pub fn wigner_sfft(r: &TimeSignal, cfg: &OtfsConfig) -> Result<DdGrid> {
    sfft(&wigner(r, cfg)?, cfg)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::math::{complex_normal, derive_rng};

    fn cfg() -> OtfsConfig {
        OtfsConfig::new(16, 8, 1.0).unwrap()
    }

    fn random_grid(cfg: &OtfsConfig, seed: u64) -> DdGrid {
        let mut rng = derive_rng(seed, &[]);
        DdGrid::from_values(cfg, (0..cfg.num_grids()).map(|_| complex_normal(&mut rng, 1.0)).collect()).unwrap()
    }

    #[test]
    fn isfft_matches_direct_sum() {
        let cfg = cfg();
        let x = random_grid(&cfg, 3);
        let tf = isfft(&x, &cfg).unwrap();
        let (m, n) = (cfg.m, cfg.n);
        for nn in 0..n {
            for mm in 0..m {
                let mut acc = C64::new(0.0, 0.0);
                for k in cfg.k_range() {
                    for l in 0..m {
                        let ph = 2.0 * PI * (nn as f64 * k as f64 / n as f64 - (mm * l) as f64 / m as f64);
                        acc += x.get(k, l) * C64::from_polar(1.0, ph);
                    }
                }
                acc /= ((m * n) as f64).sqrt();
                assert!((acc - tf.values[nn * m + mm]).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn impulse_gives_flat_grid() {
        let cfg = cfg();
        let mut x = DdGrid::zeros(&cfg);
        x.set(0, 0, C64::new(1.0, 0.0));
        let tf = isfft(&x, &cfg).unwrap();
        let v = 1.0 / ((cfg.m * cfg.n) as f64).sqrt();
        assert!(tf.values.iter().all(|z| (z - C64::new(v, 0.0)).norm() < 1e-14));
        let zero = isfft(&DdGrid::zeros(&cfg), &cfg).unwrap();
        assert!(zero.values.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn single_subcarrier_is_flat_slot() {
        let cfg = cfg();
        let mut tf = TfGrid { m: cfg.m, n: cfg.n, values: vec![C64::new(0.0, 0.0); cfg.num_grids()] };
        tf.values[0] = C64::new(1.0, 0.0);
        let s = heisenberg(&tf, 0, 0).unwrap();
        let a = 1.0 / (cfg.m as f64).sqrt();
        for (i, z) in s.samples.iter().enumerate() {
            let want = if i < cfg.m { a } else { 0.0 };
            assert!((z - C64::new(want, 0.0)).norm() < 1e-14);
        }
        let zero = TfGrid { m: cfg.m, n: cfg.n, values: vec![C64::new(0.0, 0.0); cfg.num_grids()] };
        assert!(heisenberg(&zero, 4, 2).unwrap().samples.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn short_prefix_rejected() {
        let cfg = cfg();
        let tf = isfft(&DdGrid::zeros(&cfg), &cfg).unwrap();
        assert!(matches!(heisenberg(&tf, 2, 3), Err(Error::Config(_))));
    }

    #[test]
    fn full_chain_roundtrip() {
        let cfg = cfg();
        let x = random_grid(&cfg, 9);
        let s = heisenberg(&isfft(&x, &cfg).unwrap(), 5, 5).unwrap();
        assert_eq!(s.samples.len(), 5 + cfg.num_grids());
        let y = wigner_sfft(&s, &cfg).unwrap();
        assert!(y.max_relative_error(&x) < 1e-12);
        let bad = TimeSignal { samples: s.samples[1..].to_vec(), cp_len: 5 };
        assert!(matches!(wigner_sfft(&bad, &cfg), Err(Error::Framing(_))));
    }
}
