//! Thin wrappers around rustfft with a per-thread plan cache.
//!
//! Conventions: `forward` computes sum_l x_l e^{-2pi i l m / N} (no scaling),
//! `inverse` computes sum_m x_m e^{+2pi i m l / N} (no scaling). Callers apply
//! whatever normalization their quadrature requires.

use num_complex::Complex64;
use rustfft::FftPlanner;
use std::cell::RefCell;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn forward(buf: &mut [Complex64]) {
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_forward(buf.len());
        fft.process(buf);
    });
}

pub fn inverse(buf: &mut [Complex64]) {
    PLANNER.with(|p| {
        let fft = p.borrow_mut().plan_fft_inverse(buf.len());
        fft.process(buf);
    });
}
