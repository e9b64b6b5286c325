use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Bpsk,
    #[serde(rename = "4qam")]
    Qam4,
    #[serde(rename = "16qam")]
    Qam16,
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Self::Bpsk),
            "4qam" | "qpsk" => Ok(Self::Qam4),
            "16qam" => Ok(Self::Qam16),
            other => Err(Error::Parse(format!("unknown modulation `{other}`"))),
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bpsk => "bpsk",
            Self::Qam4 => "4qam",
            Self::Qam16 => "16qam",
        })
    }
}

/// Gray-mapped constellation. `points[i]` carries the bit label `i`
/// (most significant bit first).
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<C64>,
    bits_per_symbol: usize,
}

/// Gray-coded PAM level for a `bits`-wide label, unnormalized odd integers.
fn gray_pam(label: usize, bits: usize) -> f64 {
    // inverse Gray: position along the axis
    let mut pos = label;
    let mut shift = label >> 1;
    while shift != 0 {
        pos ^= shift;
        shift >>= 1;
    }
    let levels = 1usize << bits;
    (2 * pos) as f64 - (levels - 1) as f64
}

impl Constellation {
    pub fn new(modulation: Modulation, sigma_d2: f64) -> Self {
        let points = match modulation {
            Modulation::Bpsk => {
                let a = sigma_d2.sqrt();
                vec![C64::new(a, 0.0), C64::new(-a, 0.0)]
            }
            Modulation::Qam4 => Self::square_qam(1, sigma_d2),
            Modulation::Qam16 => Self::square_qam(2, sigma_d2),
        };
        let bits_per_symbol = points.len().trailing_zeros() as usize;
        Self { points, bits_per_symbol }
    }

    /// Square QAM with `axis_bits` bits per quadrature rail.
    fn square_qam(axis_bits: usize, sigma_d2: f64) -> Vec<C64> {
        let levels = 1usize << axis_bits;
        let raw_power = 2.0 * (levels * levels - 1) as f64 / 3.0;
        let scale = (sigma_d2 / raw_power).sqrt();
        (0..levels * levels)
            .map(|label| {
                let i_bits = label >> axis_bits;
                let q_bits = label & (levels - 1);
                // label 0 sits in the first quadrant
                let i = -gray_pam(i_bits, axis_bits);
                let q = -gray_pam(q_bits, axis_bits);
                C64::new(i * scale, q * scale)
            })
            .collect()
    }

    pub fn points(&self) -> &[C64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn mean_power(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    /// Symbol index for `bits_per_symbol` bits, MSB first.
    pub fn index_of_bits(&self, bits: &[u8]) -> usize {
        bits.iter().fold(0usize, |acc, &b| (acc << 1) | (b as usize & 1))
    }

    pub fn bits_of_index(&self, index: usize, out: &mut Vec<u8>) {
        for b in (0..self.bits_per_symbol).rev() {
            out.push(((index >> b) & 1) as u8);
        }
    }

    /// Minimum-distance hard decision; ties go to the lowest index.
    pub fn slice(&self, z: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}
