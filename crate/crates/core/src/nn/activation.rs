//! Element-wise activation functions with first and second derivatives.
//!
//! The second derivative is needed by the forward-over-reverse pass that
//! differentiates a directional derivative with respect to the parameters.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// ELU slope parameter for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Elu,
    Tanh,
    Softplus,
    /// `scale * tanh(z)`, bounded in `(-scale, scale)`.
    ScaledTanh(f64),
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::ScaledTanh(s) if !(s > 0.0 && s.is_finite()) => Err(Error::Config(
                format!("scaled_tanh scale must be positive and finite, got {s}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, z: f64) -> f64 {
        match *self {
            Activation::Linear => z,
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    ELU_ALPHA * expm1_nonpos(z)
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Softplus => softplus(z),
            Activation::ScaledTanh(s) => s * z.tanh(),
        }
    }

    /// Value, first and second derivative at `z` in one evaluation.
    #[inline]
    pub fn eval2(&self, z: f64) -> (f64, f64, f64) {
        match *self {
            Activation::Linear => (z, 1.0, 0.0),
            Activation::Elu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    let m = expm1_nonpos(z);
                    (ELU_ALPHA * m, ELU_ALPHA * (m + 1.0), ELU_ALPHA * (m + 1.0))
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (t, d, -2.0 * t * d)
            }
            Activation::Softplus => {
                let s = sigmoid(z);
                (softplus(z), s, s * (1.0 - s))
            }
            Activation::ScaledTanh(c) => {
                let t = z.tanh();
                let d = 1.0 - t * t;
                (c * t, c * d, -2.0 * c * t * d)
            }
        }
    }

    /// Applies the activation to every element. Same values as
    /// [`Activation::apply`]; the ELU branch is written without calls so the
    /// loop vectorizes.
    pub fn apply_slice(&self, zs: &mut [f64]) {
        match *self {
            Activation::Linear => {}
            Activation::Elu => elu_slice(zs),
            _ => {
                for z in zs.iter_mut() {
                    *z = self.apply(*z);
                }
            }
        }
    }

    /// Value and first derivative.
    #[inline]
    pub fn eval1(&self, z: f64) -> (f64, f64) {
        match *self {
            Activation::Linear => (z, 1.0),
            Activation::Elu => {
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    let m = expm1_nonpos(z);
                    (ELU_ALPHA * m, ELU_ALPHA * (m + 1.0))
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                (t, 1.0 - t * t)
            }
            Activation::Softplus => (softplus(z), sigmoid(z)),
            Activation::ScaledTanh(c) => {
                let t = z.tanh();
                (c * t, c * (1.0 - t * t))
            }
        }
    }
}

#[inline(always)]
fn elu_slice_body(zs: &mut [f64]) {
    for z in zs.iter_mut() {
        let m = ELU_ALPHA * expm1_nonpos_body(z.min(0.0));
        *z = if *z > 0.0 { *z } else { m };
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn elu_slice_fma(zs: &mut [f64]) {
    elu_slice_body(zs)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn expm1_nonpos_fma(z: f64) -> f64 {
    expm1_nonpos_body(z)
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

fn elu_slice(zs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime
        unsafe { elu_slice_fma(zs) };
        return;
    }
    elu_slice_body(zs)
}

/// `e^z - 1` for `z <= 0`.
///
/// Uses hardware FMA when the CPU has it; the polynomial is written with
/// `mul_add` so every code path rounds identically.
#[inline]
pub fn expm1_nonpos(z: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime
        return unsafe { expm1_nonpos_fma(z) };
    }
    expm1_nonpos_body(z)
}

/// Branch-free body of [`expm1_nonpos`].
///
/// `z = n·ln2 + r` with `|r| <= ln2/2`; `e^r - 1` is a degree-13 Taylor
/// polynomial (truncation below 1e-17), then
/// `e^z - 1 = 2^n·(e^r - 1) + (2^n - 1)`. For `n = 0` the result is the
/// polynomial itself, so accuracy near zero is relative.
#[inline(always)]
fn expm1_nonpos_body(z: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_FACT: [f64; 13] = [
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
        1.0 / 6227020800.0,
        1.0 / 87178291200.0,
    ];
    // e^-700 is far below the f64 resolution of -1
    let z = z.max(-700.0);
    // round-to-nearest through the 1.5·2^52 shifter keeps this call-free
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    let shifted = z.mul_add(std::f64::consts::LOG2_E, SHIFTER);
    let n = shifted - SHIFTER;
    let r = (-n).mul_add(LN2_LO, (-n).mul_add(LN2_HI, z));
    let mut q = INV_FACT[12];
    for c in INV_FACT[..12].iter().rev() {
        q = q.mul_add(r, *c);
    }
    let p = (r * r).mul_add(q, r);
    let n_bits = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    let two_n = f64::from_bits(n_bits.wrapping_add(1023) << 52);
    two_n.mul_add(p, two_n - 1.0)
}

#[inline]
fn softplus(z: f64) -> f64 {
    // ln(1 + e^z) without overflow for large z
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => write!(f, "linear"),
            Activation::Elu => write!(f, "elu"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Softplus => write!(f, "softplus"),
            Activation::ScaledTanh(s) => write!(f, "scaled_tanh:{s}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let act = match s {
            "linear" => Activation::Linear,
            "elu" => Activation::Elu,
            "tanh" => Activation::Tanh,
            "softplus" => Activation::Softplus,
            other => {
                let scale = other
                    .strip_prefix("scaled_tanh:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown activation `{other}`")))?;
                Activation::ScaledTanh(scale)
            }
        };
        act.validate()?;
        Ok(act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm1_matches_std() {
        let mut z = 0.0f64;
        while z > -60.0 {
            let (a, b) = (expm1_nonpos(z), z.exp_m1());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs(), "{z}: {a} vs {b}");
            z -= 0.001_37;
        }
        for z in [-0.0, -1e-300, -1e-12, -0.34657, -0.34658, -745.0, -1e6] {
            let (a, b) = (expm1_nonpos(z), z.exp_m1());
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn slice_matches_scalar() {
        for act in [Activation::Elu, Activation::Softplus, Activation::ScaledTanh(0.35), Activation::Linear] {
            let mut zs: Vec<f64> = (0..97).map(|i| (i as f64 - 48.0) * 0.173).collect();
            let expected: Vec<f64> = zs.iter().map(|&z| act.apply(z)).collect();
            act.apply_slice(&mut zs);
            assert_eq!(zs, expected);
        }
    }
    use proptest::prelude::*;

    const ALL: [Activation; 5] = [
        Activation::Linear,
        Activation::Elu,
        Activation::Tanh,
        Activation::Softplus,
        Activation::ScaledTanh(0.35),
    ];

    #[test]
    fn elu_is_c1_at_zero() {
        let a = Activation::Elu;
        assert_eq!(a.apply(0.0), 0.0);
        let h = 1e-9;
        assert!((a.apply(h) - a.apply(-h)).abs() < 3.0 * h);
        assert!((a.eval1(h).1 - a.eval1(-h).1).abs() < 1e-8);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((Activation::Softplus.apply(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(Activation::Softplus.apply(800.0).is_finite());
        assert!(Activation::Softplus.apply(-800.0) >= 0.0);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for act in ALL {
            for &z in &[-2.3, -0.4, 0.3, 1.7] {
                let (_, d1, d2) = act.eval2(z);
                let fd1 = (act.apply(z + h) - act.apply(z - h)) / (2.0 * h);
                let fd2 = (act.eval1(z + h).1 - act.eval1(z - h).1) / (2.0 * h);
                assert!((d1 - fd1).abs() < 1e-8, "{act} d1 at {z}");
                assert!((d2 - fd2).abs() < 1e-8, "{act} d2 at {z}");
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for act in ALL {
            assert_eq!(act.to_string().parse::<Activation>().unwrap(), act);
        }
        assert!("scaled_tanh:-1".parse::<Activation>().is_err());
        assert!("relu".parse::<Activation>().is_err());
    }

    proptest! {
        #[test]
        fn softplus_positive(z in -700.0f64..700.0) {
            prop_assert!(Activation::Softplus.apply(z) > 0.0 || z < -700.0);
        }

        #[test]
        fn scaled_tanh_bounded(z in -1e3f64..1e3, scale in 0.01f64..10.0) {
            prop_assert!(Activation::ScaledTanh(scale).apply(z).abs() <= scale);
        }
    }
}
