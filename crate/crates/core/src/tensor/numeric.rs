//! Process-wide numeric precision switch.
//!
//! Values are stored as `f64`. In [`Precision::Single`] mode every value an
//! operation writes is rounded to the nearest `f32`, so arithmetic behaves
//! like 32-bit training while gradient checks can run in full 64-bit mode.
//!
//! The mode is held per thread. Code that fans work out to a thread pool
//! captures [`precision()`] first and re-enters it with [`with_precision`]
//! inside each worker.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::Single {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn dtype(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::Single) };
}

pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Runs `f` with `p` active on this thread and restores the previous mode.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            set_precision(self.0);
        }
    }
    let _restore = Restore(precision());
    set_precision(p);
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rounds_to_f32() {
        let x = 0.1f64;
        assert_eq!(Precision::Single.round(x), 0.1f32 as f64);
        assert_eq!(Precision::Double.round(x), x);
    }

    #[test]
    fn scoped_mode_restores() {
        assert_eq!(precision(), Precision::Single);
        with_precision(Precision::Double, || {
            assert_eq!(precision(), Precision::Double);
        });
        assert_eq!(precision(), Precision::Single);
    }
}
