//! 12-lead ECG records, resampling and random lead masking.
//!
//! Binary record file (little-endian):
//!
//! ```text
//! "ECGR"  u32 version (=1)  u32 rate  u32 T
//! 12 × T f32 samples, row-major by lead
//! 12 mask bytes (0 = present, 1 = masked)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_exact_or_format, read_f32, read_file, read_u32, write_atomic};
use crate::nn::{Scalar, Tensor};
use crate::rng::SeededRng;

pub const N_LEADS: usize = 12;
pub const LEAD_NAMES: [&str; N_LEADS] = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];
pub const CANONICAL_RATE: u32 = 500;
pub const CANONICAL_LEN: usize = 5000;

const MAGIC: &[u8; 4] = b"ECGR";
const VERSION: u32 = 1;

/// Samples are in millivolts, stored lead-major. Masked leads are all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    samples: Vec<f32>,
    len: usize,
    rate: u32,
    mask: [bool; N_LEADS],
}

impl EcgRecord {
    pub fn new(rate: u32, rows: Vec<Vec<f32>>) -> Result<Self> {
        if rows.len() != N_LEADS {
            return Err(Error::shape(format!("expected {N_LEADS} leads, got {}", rows.len())));
        }
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape("leads have different lengths"));
        }
        Self::from_flat(rate, len, rows.concat(), [false; N_LEADS])
    }

    pub fn from_flat(rate: u32, len: usize, samples: Vec<f32>, mask: [bool; N_LEADS]) -> Result<Self> {
        if rate == 0 {
            return Err(Error::invalid("sampling rate must be positive"));
        }
        if len == 0 {
            return Err(Error::shape("record has no samples"));
        }
        if samples.len() != N_LEADS * len {
            return Err(Error::shape(format!(
                "expected {} samples for {N_LEADS}×{len}, got {}",
                N_LEADS * len,
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("record contains non-finite samples"));
        }
        let rec = Self { samples, len, rate, mask };
        for (i, &m) in mask.iter().enumerate() {
            if m && rec.lead(i).iter().any(|&v| v != 0.0) {
                return Err(Error::invalid(format!("lead {} is masked but not zero", LEAD_NAMES[i])));
            }
        }
        Ok(rec)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn mask(&self) -> &[bool; N_LEADS] {
        &self.mask
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.samples[i * self.len..(i + 1) * self.len]
    }

    pub fn is_canonical(&self) -> bool {
        self.rate == CANONICAL_RATE && self.len == CANONICAL_LEN
    }

    /// `[12 × T]` tensor of the samples.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.samples.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::new(vec![N_LEADS, self.len], data).expect("record shape is validated at construction")
    }

    /// Linear interpolation onto a uniform grid at `target_rate`, with
    /// `T′ = round(T · target_rate / rate)`. Positions past the last input
    /// sample hold the last value.
    pub fn resample(&self, target_rate: u32) -> Result<Self> {
        if target_rate == 0 {
            return Err(Error::invalid("target rate must be positive"));
        }
        if target_rate == self.rate {
            return Ok(self.clone());
        }
        let ratio = self.rate as f64 / target_rate as f64;
        let new_len = (self.len as f64 * target_rate as f64 / self.rate as f64).round() as usize;
        if new_len == 0 {
            return Err(Error::invalid("resampled record would be empty"));
        }
        let last = self.len - 1;
        let mut out = Vec::with_capacity(N_LEADS * new_len);
        for lead in 0..N_LEADS {
            let src = self.lead(lead);
            for j in 0..new_len {
                let pos = j as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let frac = if i0 == last { 0.0 } else { pos - i0 as f64 };
                let (a, b) = (src[i0] as f64, src[i1] as f64);
                // a + f·(b − a) is exact for constant segments.
                out.push((a + frac * (b - a)) as f32);
            }
        }
        Self::from_flat(target_rate, new_len, out, self.mask)
    }

    /// Mask each lead independently with probability `p`, drawing one
    /// Bernoulli per lead in lead order. Already-masked leads stay masked.
    pub fn mask_leads(&self, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("masking probability {p} outside [0, 1]")));
        }
        let mut rng = SeededRng::new(seed);
        let mut out = self.clone();
        for lead in 0..N_LEADS {
            if rng.bernoulli(p) {
                out.mask[lead] = true;
                out.samples[lead * self.len..(lead + 1) * self.len].fill(0.0);
            }
        }
        Ok(out)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.samples.len() + N_LEADS);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.rate.to_le_bytes());
        out.extend_from_slice(&(self.len as u32).to_le_bytes());
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(self.mask.iter().map(|&m| m as u8));
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_exact_or_format(r, &mut magic, "record magic")?;
        if &magic != MAGIC {
            return Err(Error::format("not an ECGR record (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported ECGR version {version}")));
        }
        let rate = read_u32(r)?;
        let len = read_u32(r)? as usize;
        let expected = N_LEADS * len * 4 + N_LEADS;
        if r.len() != expected {
            return Err(Error::format(format!("ECGR payload is {} bytes, expected {expected}", r.len())));
        }
        let samples = (0..N_LEADS * len).map(|_| read_f32(r)).collect::<Result<Vec<_>>>()?;
        let mut mask = [false; N_LEADS];
        for m in mask.iter_mut() {
            let mut b = [0u8; 1];
            read_exact_or_format(r, &mut b, "mask byte")?;
            *m = match b[0] {
                0 => false,
                1 => true,
                other => return Err(Error::format(format!("invalid mask byte {other}"))),
            };
        }
        Self::from_flat(rate, len, samples, mask).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
