//! Floating-point environment control.
//!
//! Saturated LSTM gates and decaying gradients produce subnormal values,
//! which run one to two orders of magnitude slower on x86. Training and
//! inference flush them to zero for the duration of a [`FlushDenormals`]
//! guard. The setting is per thread.

/// Sets flush-to-zero and denormals-are-zero on creation and restores the
/// previous mode on drop. A no-op on targets other than x86-64.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
mod mxcsr {
    use std::arch::asm;

    pub const FTZ: u32 = 1 << 15;
    pub const DAZ: u32 = 1 << 6;

    pub fn read() -> u32 {
        let mut v: u32 = 0;
        // SAFETY: stmxcsr stores the 32-bit control register into `v`.
        unsafe { asm!("stmxcsr [{}]", in(reg) &mut v, options(nostack)) };
        v
    }

    pub fn write(v: u32) {
        // SAFETY: only the FTZ/DAZ bits differ from a value read back from
        // the register, so no exception is unmasked.
        unsafe { asm!("ldmxcsr [{}]", in(reg) &v, options(nostack, readonly)) };
    }
}

impl FlushDenormals {
    pub fn new() -> Self {
        #[cfg(target_arch = "x86_64")]
        {
            let saved = mxcsr::read();
            mxcsr::write(saved | mxcsr::FTZ | mxcsr::DAZ);
            FlushDenormals { saved }
        }
        #[cfg(not(target_arch = "x86_64"))]
        FlushDenormals {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        mxcsr::write(self.saved);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subnormals_flush_inside_the_guard_only() {
        let tiny = std::hint::black_box(f32::MIN_POSITIVE);
        let half = std::hint::black_box(0.5f32);
        assert!((tiny * half).is_subnormal());
        {
            let _g = FlushDenormals::new();
            #[cfg(target_arch = "x86_64")]
            assert_eq!(std::hint::black_box(tiny) * half, 0.0);
        }
        assert!((tiny * half).is_subnormal());
    }
}
