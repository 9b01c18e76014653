//! Element types for stored parameters.
//!
//! Every type maps a value to a fixed-width integer code and back. Codes are
//! written little-endian using exactly [`Dtype::width`] bytes.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// A binary floating-point layout with a sign bit, `exp_bits` exponent bits
/// and `man_bits` mantissa bits. The all-ones exponent encodes inf/NaN and the
/// all-zeros exponent encodes subnormals, as in IEEE-754.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MiniFloat {
    pub exp_bits: u32,
    pub man_bits: u32,
    pub bias: i32,
}

impl MiniFloat {
    pub const FP16: MiniFloat = MiniFloat { exp_bits: 5, man_bits: 10, bias: 15 };
    pub const MF16: MiniFloat = MiniFloat { exp_bits: 5, man_bits: 10, bias: 11 };
    pub const MF8: MiniFloat = MiniFloat { exp_bits: 4, man_bits: 3, bias: 7 };

    fn exp_max(&self) -> u32 {
        (1 << self.exp_bits) - 1
    }

    /// Round-to-nearest-even conversion. Overflow goes to infinity.
    pub fn encode(&self, x: f32) -> u32 {
        let m = self.man_bits;
        let sign_bit = (x.to_bits() >> 31) << (self.exp_bits + m);
        let inf_code = self.exp_max() << m;
        if x.is_nan() {
            return sign_bit | inf_code | (1 << (m - 1));
        }
        let a = (x as f64).abs();
        if a.is_infinite() {
            return sign_bit | inf_code;
        }
        if a == 0.0 {
            return sign_bit;
        }
        // f32 inputs are always normal in f64, so the raw exponent is exact.
        let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        let min_normal_exp = 1 - self.bias;
        let e_eff = e.max(min_normal_exp);
        let q = (a * pow2(m as i32 - e_eff)).round_ties_even() as u64;
        let mag = if e < min_normal_exp {
            // q == 2^m lands exactly on the smallest normal code
            q
        } else {
            (((e + self.bias) as u64) << m) + q - (1u64 << m)
        };
        if mag >= inf_code as u64 {
            sign_bit | inf_code
        } else {
            sign_bit | mag as u32
        }
    }

    pub fn decode(&self, code: u32) -> f32 {
        let m = self.man_bits;
        let sign = (code >> (self.exp_bits + m)) & 1;
        let ef = (code >> m) & self.exp_max();
        let mf = code & ((1 << m) - 1);
        let mag = if ef == self.exp_max() {
            if mf == 0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        } else if ef == 0 {
            mf as f64 * pow2(1 - self.bias - m as i32)
        } else {
            ((1u64 << m) + mf as u64) as f64 * pow2(ef as i32 - self.bias - m as i32)
        };
        let v = if sign == 1 { -mag } else { mag };
        v as f32
    }

    pub fn max_finite(&self) -> f32 {
        self.decode(((self.exp_max() - 1) << self.man_bits) | ((1 << self.man_bits) - 1))
    }
}

fn pow2(e: i32) -> f64 {
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Stored element type of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dtype {
    Fp32,
    Fp16,
    /// 16-bit float with exponent width 5 and bias 11.
    MiniFloat16,
    /// 8-bit float, 4 exponent bits, 3 mantissa bits, bias 7.
    MiniFloat8,
    /// Affine 8-bit integer: `value = (code - zero_point) * scale`.
    Int8Affine { scale: f32, zero_point: i8 },
}

impl Dtype {
    pub fn tag(&self) -> u8 {
        match self {
            Dtype::Fp32 => 0,
            Dtype::Fp16 => 1,
            Dtype::MiniFloat16 => 2,
            Dtype::MiniFloat8 => 3,
            Dtype::Int8Affine { .. } => 4,
        }
    }

    /// Bytes per element.
    pub fn width(&self) -> usize {
        match self {
            Dtype::Fp32 => 4,
            Dtype::Fp16 | Dtype::MiniFloat16 => 2,
            Dtype::MiniFloat8 | Dtype::Int8Affine { .. } => 1,
        }
    }

    pub fn code_bits(&self) -> u32 {
        self.width() as u32 * 8
    }

    pub fn minifloat(&self) -> Option<MiniFloat> {
        match self {
            Dtype::Fp16 => Some(MiniFloat::FP16),
            Dtype::MiniFloat16 => Some(MiniFloat::MF16),
            Dtype::MiniFloat8 => Some(MiniFloat::MF8),
            _ => None,
        }
    }

    pub fn encode(&self, x: f32) -> u32 {
        match self {
            Dtype::Fp32 => x.to_bits(),
            Dtype::Int8Affine { scale, zero_point } => {
                let q = if x.is_nan() || *scale == 0.0 {
                    *zero_point as f32
                } else {
                    (x / scale).round_ties_even() + *zero_point as f32
                };
                q.clamp(-128.0, 127.0) as i8 as u8 as u32
            }
            other => other.minifloat().unwrap().encode(x),
        }
    }

    pub fn decode(&self, code: u32) -> f32 {
        match self {
            Dtype::Fp32 => f32::from_bits(code),
            Dtype::Int8Affine { scale, zero_point } => {
                ((code as u8 as i8) as i32 - *zero_point as i32) as f32 * scale
            }
            other => other.minifloat().unwrap().decode(code),
        }
    }

    /// `decode(encode(x))`: the value actually representable.
    pub fn round(&self, x: f32) -> f32 {
        self.decode(self.encode(x))
    }

    pub fn read_code(&self, bytes: &[u8]) -> u32 {
        match self.width() {
            4 => u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]),
            2 => u16::from_le_bytes([bytes[0], bytes[1]]) as u32,
            _ => bytes[0] as u32,
        }
    }

    pub fn write_code(&self, code: u32, out: &mut Vec<u8>) {
        out.extend_from_slice(&code.to_le_bytes()[..self.width()]);
    }

    /// Codes ordered by the value they represent. Floats follow IEEE total
    /// order (negative NaNs first, positive NaNs last); integers follow their
    /// signed value.
    pub fn cmp_codes(&self, a: u32, b: u32) -> std::cmp::Ordering {
        match self {
            Dtype::Int8Affine { .. } => (a as u8 as i8).cmp(&(b as u8 as i8)),
            _ => self.decode(a).total_cmp(&self.decode(b)).then(a.cmp(&b)),
        }
    }

    /// Same variant, ignoring affine parameters.
    pub fn same_kind(&self, other: &Dtype) -> bool {
        self.tag() == other.tag()
    }

    pub fn from_tag(tag: u8, scale: f32, zero_point: i8) -> Option<Dtype> {
        Some(match tag {
            0 => Dtype::Fp32,
            1 => Dtype::Fp16,
            2 => Dtype::MiniFloat16,
            3 => Dtype::MiniFloat8,
            4 => Dtype::Int8Affine { scale, zero_point },
            _ => return None,
        })
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::Fp32 => write!(f, "fp32"),
            Dtype::Fp16 => write!(f, "fp16"),
            Dtype::MiniFloat16 => write!(f, "mf16"),
            Dtype::MiniFloat8 => write!(f, "mf8"),
            Dtype::Int8Affine { .. } => write!(f, "int8"),
        }
    }
}

impl FromStr for Dtype {
    type Err = String;

    /// `int8` parses with unit scale; quantizers fill in the real scale.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(Dtype::Fp32),
            "fp16" => Ok(Dtype::Fp16),
            "mf16" | "minifloat16" => Ok(Dtype::MiniFloat16),
            "mf8" | "minifloat8" => Ok(Dtype::MiniFloat8),
            "int8" => Ok(Dtype::Int8Affine { scale: 1.0, zero_point: 0 }),
            other => Err(format!("unknown dtype '{other}'")),
        }
    }
}
