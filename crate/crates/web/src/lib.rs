//! Browser bindings for a few quick views of the simulator.

use hris_otfs::channel::{array_response_upa, theta};
use hris_otfs::harness::{simulate_link, ExperimentConfig};
use hris_otfs::hris::{beamform, BeamPath};
use hris_otfs::C64;
use wasm_bindgen::prelude::*;

/// Energy `|θ(q, β)/N|²` that one tap with fractional Doppler `beta` leaks
/// into each Doppler offset `q - N/2`, for `q = 0..N`.
#[wasm_bindgen]
pub fn gamma_spread(n: usize, beta: f64) -> Vec<f64> {
    let nf = n as f64;
    (0..n).map(|q| (theta(q, beta, n) / nf).norm_sqr()).collect()
}

/// Combining gain `|a_R^H(φ_r,ψ_r) Ω a_R(φ_p,ψ)| / N_r` over `steps` azimuths
/// `ψ ∈ [-π, π)` for a surface steered towards one path at `(φ_p, ψ_p)`.
#[wasm_bindgen]
pub fn beam_pattern(nx: usize, ny: usize, phi_r: f64, psi_r: f64, phi_p: f64, psi_p: f64, steps: usize) -> Vec<f64> {
    let path = BeamPath { gain: C64::new(1.0, 0.0), phi: phi_p, psi: psi_p, s2: 1.0 };
    let omega = beamform(&[path], phi_r, psi_r, nx, ny).omega;
    let a_r = array_response_upa(phi_r, psi_r, nx, ny);
    let nr = (nx * ny) as f64;
    (0..steps)
        .map(|i| {
            let psi = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / steps.max(1) as f64;
            let a = array_response_upa(phi_p, psi, nx, ny);
            let c: C64 = a_r.iter().zip(&omega).zip(&a).map(|((r, w), p)| r.conj() * w * p).sum();
            c.norm() / nr
        })
        .collect()
}

/// One small link trial. Returns NMSE(h̃) per outer iteration followed by
/// BER per outer iteration.
pub fn demo_metrics(snr_db: f64, seed: u64, outer_iters: usize) -> hris_otfs::Result<Vec<f64>> {
    let cfg = ExperimentConfig {
        m: 16,
        n: 8,
        n_p: 4,
        m_p: 4,
        nx: 8,
        ny: 8,
        n_rf: 4,
        n_t: 8,
        paths: 3,
        tau_max_taps: 3,
        snr_list: vec![snr_db],
        trials: 1,
        seed,
        outer_iters: outer_iters.max(1),
        ..ExperimentConfig::desk()
    };
    cfg.validate()?;
    let run = simulate_link(&cfg, 0, 0, 0)?;
    let it = &run.result.iterations;
    Ok(it.iter().map(|m| m.nmse_h).chain(it.iter().map(|m| m.ber)).collect())
}

/// [`demo_metrics`] for JavaScript.
#[wasm_bindgen]
pub fn jcedd_demo(snr_db: f64, seed: u64, outer_iters: usize) -> Result<Vec<f64>, JsError> {
    demo_metrics(snr_db, seed, outer_iters).map_err(|e| JsError::new(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_doppler_does_not_spread() {
        let s = gamma_spread(8, 0.0);
        assert!((s[4] - 1.0).abs() < 1e-12);
        assert!(s.iter().enumerate().all(|(q, v)| q == 4 || *v < 1e-20));
        let f: f64 = gamma_spread(8, 0.3).iter().sum();
        assert!((f - 1.0).abs() < 1e-12);
    }
}
