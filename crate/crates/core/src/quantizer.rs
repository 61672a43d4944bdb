//! Unbiased stochastic quantization of parameter differences.
//!
//! Each component is normalized by the vector norm and rounded at random to
//! one of the neighboring points of the grid `{0, s, 2s, ..., (2^(b-1)-1)s}`.
//! On the wire a vector costs `32` bits for the norm, `32` for `s` and `b`
//! bits per component (one sign bit, `b-1` index bits).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::l2_norm;
use crate::scalar::Scalar;

pub const MAX_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    bits: u32,
    interval: f64,
}

impl QuantConfig {
    pub fn new(bits: u32, interval: f64) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::config(
                "quant.bits",
                format!("must lie in 2..={MAX_BITS}, got {bits}"),
            ));
        }
        if !(interval > 0.0 && interval.is_finite()) {
            return Err(Error::config("quant.interval", "must be a positive finite number"));
        }
        let top = max_index(bits) as f64;
        if interval * top < 1.0 - 1e-12 {
            return Err(Error::config(
                "quant.interval",
                format!("grid tops out at {} < 1 for s = {interval}, b = {bits}", interval * top),
            ));
        }
        Ok(QuantConfig { bits, interval })
    }

    /// `s = 1 / (2^(b-1) - 1)`: the tightest grid covering `[0, 1]`.
    pub fn with_default_interval(bits: u32) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::config(
                "quant.bits",
                format!("must lie in 2..={MAX_BITS}, got {bits}"),
            ));
        }
        QuantConfig::new(bits, 1.0 / max_index(bits) as f64)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn interval(&self) -> f64 {
        self.interval
    }

    pub fn max_index(&self) -> u32 {
        max_index(self.bits)
    }
}

fn max_index(bits: u32) -> u32 {
    ((1u64 << (bits - 1)) - 1) as u32
}

/// Sign and grid index of one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Code {
    pub negative: bool,
    pub index: u32,
}

/// `(Λ, s, ‖w‖)`: codes plus the 32-bit interval and norm.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedDelta {
    norm: f32,
    interval: f32,
    bits: u32,
    codes: Vec<Code>,
}

impl QuantizedDelta {
    pub fn norm(&self) -> f32 {
        self.norm
    }

    pub fn interval(&self) -> f32 {
        self.interval
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn codes(&self) -> &[Code] {
        &self.codes
    }

    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    /// `[u32 norm][u32 s][codes]`, little-endian; codes are packed
    /// least-significant-bit first in `b`-bit fields with the sign as the
    /// field's high bit.
    pub fn to_bytes(&self) -> Vec<u8> {
        let b = self.bits as usize;
        let packed_len = (b * self.codes.len()).div_ceil(8);
        let mut out = Vec::with_capacity(8 + packed_len);
        out.extend_from_slice(&self.norm.to_bits().to_le_bytes());
        out.extend_from_slice(&self.interval.to_bits().to_le_bytes());
        out.resize(8 + packed_len, 0);
        let packed = &mut out[8..];
        let mut bit = 0usize;
        for code in &self.codes {
            let field = (u64::from(code.negative) << (b - 1)) | u64::from(code.index);
            for k in 0..b {
                if (field >> k) & 1 == 1 {
                    packed[bit / 8] |= 1 << (bit % 8);
                }
                bit += 1;
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], bits: u32, dim: usize) -> Result<Self> {
        if !(2..=MAX_BITS).contains(&bits) {
            return Err(Error::config("quant.bits", format!("unsupported width {bits}")));
        }
        let b = bits as usize;
        let expected = 8 + (b * dim).div_ceil(8);
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len() as u64,
                format!("quantized message has {} bytes, expected {expected}", bytes.len()),
            ));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let norm = f32::from_bits(word(0));
        let interval = f32::from_bits(word(4));
        let packed = &bytes[8..];
        let mut codes = Vec::with_capacity(dim);
        let mut bit = 0usize;
        for _ in 0..dim {
            let mut field = 0u64;
            for k in 0..b {
                if (packed[bit / 8] >> (bit % 8)) & 1 == 1 {
                    field |= 1 << k;
                }
                bit += 1;
            }
            codes.push(Code {
                negative: (field >> (b - 1)) & 1 == 1,
                index: (field & ((1 << (b - 1)) - 1)) as u32,
            });
        }
        Ok(QuantizedDelta {
            norm,
            interval,
            bits,
            codes,
        })
    }
}

/// Stochastically quantizes `w`. The ratio `|w_v| / (s ‖w‖)` is taken against
/// the 32-bit values that travel on the wire, so decoding is unbiased except
/// where the top index clamps.
pub fn quantize<T: Scalar, R: Rng + ?Sized>(
    w: &[T],
    cfg: &QuantConfig,
    rng: &mut R,
) -> QuantizedDelta {
    let interval = cfg.interval as f32;
    let norm = (l2_norm(w).as_f64().min(f32::MAX as f64)) as f32;
    let top = cfg.max_index();
    let mut codes = vec![Code::default(); w.len()];
    if norm > 0.0 {
        let scale = interval as f64 * norm as f64;
        for (code, &v) in codes.iter_mut().zip(w) {
            let v = v.as_f64();
            let ratio = v.abs() / scale;
            let floor = ratio.floor();
            let promote: f64 = rng.random();
            let index = if floor >= top as f64 {
                top
            } else {
                let level = floor as u32;
                if promote < ratio - floor {
                    level + 1
                } else {
                    level
                }
            };
            *code = Code {
                negative: v < 0.0 && index > 0,
                index,
            };
        }
    }
    QuantizedDelta {
        norm: if norm > 0.0 { norm } else { 0.0 },
        interval,
        bits: cfg.bits,
        codes,
    }
}

/// Component `v` decodes to `sign · index · s · ‖w‖`.
pub fn dequantize<T: Scalar>(qd: &QuantizedDelta) -> Vec<T> {
    let step = qd.interval as f64;
    let norm = qd.norm as f64;
    qd.codes
        .iter()
        .map(|c| {
            let mag = c.index as f64 * step * norm;
            T::from_f64_lossy(if c.negative { -mag } else { mag })
        })
        .collect()
}

/// `64 + b·d` bits per quantized vector.
pub fn wire_size_bits(d: usize, cfg: &QuantConfig) -> u64 {
    64 + u64::from(cfg.bits) * d as u64
}

/// `32·d` bits for the same vector at full precision.
pub fn full_precision_bits(d: usize) -> u64 {
    32 * d as u64
}

/// `σ² d s² / 4`.
pub fn variance_bound(sigma: f64, d: usize, s: f64) -> f64 {
    sigma * sigma * d as f64 * s * s / 4.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Stream;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn config_invariants() {
        assert!(QuantConfig::new(1, 1.0).is_err());
        assert!(QuantConfig::new(33, 1.0).is_err());
        assert!(QuantConfig::new(3, 0.2).is_err());
        assert!(QuantConfig::new(3, 1.0 / 3.0).is_ok());
        let cfg = QuantConfig::with_default_interval(8).unwrap();
        assert_eq!(cfg.max_index(), 127);
        assert_eq!(cfg.interval(), 1.0 / 127.0);
        assert_eq!(QuantConfig::with_default_interval(32).unwrap().max_index(), (1 << 31) - 1);
    }

    #[test]
    fn three_four_example_enumerates_both_outcomes() {
        let cfg = QuantConfig::new(4, 0.25).unwrap();
        let w = [3.0f64, 4.0];
        let mut low = 0usize;
        let draws = 20_000;
        let mut rng = Stream::seed_from_u64(1);
        for _ in 0..draws {
            let qd = quantize(&w, &cfg, &mut rng);
            assert_eq!(qd.norm(), 5.0);
            let x = dequantize::<f64>(&qd)[0];
            if x == 2.5 {
                low += 1;
            } else {
                assert_eq!(x, 3.75);
            }
        }
        // outcomes 2.5 (p = 0.6) and 3.75 (p = 0.4) average to the input
        assert_eq!(0.6 * 2.5 + 0.4 * 3.75, 3.0);
        let p_low = low as f64 / draws as f64;
        assert!((p_low - 0.6).abs() < 4.0 * (0.24f64 / draws as f64).sqrt());
    }

    #[test]
    fn zero_vector_and_lattice_points() {
        let cfg = QuantConfig::with_default_interval(8).unwrap();
        let mut rng = Stream::seed_from_u64(2);
        let qd = quantize(&[0.0f64; 5], &cfg, &mut rng);
        assert_eq!(qd.norm(), 0.0);
        assert!(qd.codes().iter().all(|c| *c == Code::default()));
        assert_eq!(dequantize::<f64>(&qd), vec![0.0; 5]);

        // norm 5, s = 0.25: every |w_v| / (s‖w‖) is an integer
        let cfg = QuantConfig::new(4, 0.25).unwrap();
        let w = [0.0f64, -2.5, 2.5, 2.5, 2.5];
        for _ in 0..50 {
            let qd = quantize(&w, &cfg, &mut rng);
            assert_eq!(dequantize::<f64>(&qd), w.to_vec());
        }
    }

    #[test]
    fn dequantize_formula() {
        let qd = QuantizedDelta {
            norm: 5.0,
            interval: 0.25,
            bits: 4,
            codes: vec![
                Code { negative: false, index: 2 },
                Code { negative: true, index: 3 },
            ],
        };
        assert_eq!(dequantize::<f64>(&qd), vec![2.5, -3.75]);
    }

    #[test]
    fn wire_sizes() {
        let b8 = QuantConfig::with_default_interval(8).unwrap();
        assert_eq!(wire_size_bits(79_610, &b8), 636_944);
        assert_eq!(full_precision_bits(79_610), 2_547_520);
        assert_eq!(wire_size_bits(79_510, &b8), 64 + 8 * 79_510);
        assert_eq!(wire_size_bits(1, &QuantConfig::with_default_interval(2).unwrap()), 66);
        let b32 = QuantConfig::with_default_interval(32).unwrap();
        assert!((1..1000).all(|d| wire_size_bits(d, &b32) > full_precision_bits(d)));
    }

    #[test]
    fn variance_bound_arithmetic() {
        assert_eq!(variance_bound(5.0, 2, 0.25), 0.78125);
        assert_eq!(variance_bound(5.0, 2, 0.5), 4.0 * variance_bound(5.0, 2, 0.25));
        assert!(variance_bound(5.0, 2, 1e-9) < 1e-15);
    }

    #[test]
    fn golden_bytes() {
        let qd = QuantizedDelta {
            norm: 1.0,
            interval: 0.5,
            bits: 3,
            codes: vec![
                Code { negative: false, index: 1 },
                Code { negative: true, index: 2 },
                Code { negative: true, index: 3 },
            ],
        };
        // fields 0b001, 0b110, 0b111 -> bits 100 011 111 (LSB first) -> 0xF1, 0x01
        let bytes = qd.to_bytes();
        assert_eq!(
            bytes,
            vec![0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x3F, 0xF1, 0x01]
        );
        assert_eq!(QuantizedDelta::from_bytes(&bytes, 3, 3).unwrap(), qd);
        assert!(QuantizedDelta::from_bytes(&bytes[..9], 3, 3).is_err());
    }

    #[test]
    fn clamp_never_exceeds_top_of_grid() {
        // s = 0.4 with b = 3 covers up to 1.2; a single component hits ratio 2.5
        let cfg = QuantConfig::new(3, 0.4).unwrap();
        let mut rng = Stream::seed_from_u64(4);
        let w = [1.0f64];
        for _ in 0..100 {
            let qd = quantize(&w, &cfg, &mut rng);
            let x = dequantize::<f64>(&qd)[0];
            assert!(x.abs() <= 0.4f32 as f64 * 3.0 * 1.0 + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn codes_fit_and_pack_losslessly(
            bits in 2u32..=32,
            w in proptest::collection::vec(-1e3f64..1e3, 1..40),
            seed in any::<u64>(),
        ) {
            let cfg = QuantConfig::with_default_interval(bits).unwrap();
            let qd = quantize(&w, &cfg, &mut Stream::seed_from_u64(seed));
            prop_assert!(qd.codes().iter().all(|c| c.index <= cfg.max_index()));
            let bytes = qd.to_bytes();
            prop_assert_eq!(bytes.len() as u64 * 8, wire_size_bits(w.len(), &cfg).div_ceil(8) * 8);
            prop_assert_eq!(QuantizedDelta::from_bytes(&bytes, bits, w.len()).unwrap(), qd);
        }

        #[test]
        fn decoded_values_lie_on_grid(
            w in proptest::collection::vec(-10f64..10.0, 1..20),
            seed in any::<u64>(),
        ) {
            let cfg = QuantConfig::with_default_interval(6).unwrap();
            let qd = quantize(&w, &cfg, &mut Stream::seed_from_u64(seed));
            let step = qd.interval() as f64 * qd.norm() as f64;
            for x in dequantize::<f64>(&qd) {
                if step > 0.0 {
                    let k = x.abs() / step;
                    prop_assert!((k - k.round()).abs() < 1e-9);
                }
            }
        }
    }
}
