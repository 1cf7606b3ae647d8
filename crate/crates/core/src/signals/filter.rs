use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::signals::Trajectory;

/// Direct-form II transposed second-order section, normalized so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Second-order Butterworth low-pass by the bilinear transform with
/// frequency prewarping.
pub fn butterworth_lowpass(cutoff_hz: f64, sample_rate_hz: f64) -> Result<Biquad> {
    let nyquist = 0.5 * sample_rate_hz;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::Cutoff {
            cutoff_hz,
            nyquist_hz: nyquist,
        });
    }
    let k = (PI * cutoff_hz / sample_rate_hz).tan();
    let q = FRAC_1_SQRT_2;
    let norm = 1.0 / (1.0 + k / q + k * k);
    let b0 = k * k * norm;
    Ok(Biquad {
        b: [b0, 2.0 * b0, b0],
        a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
    })
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / (1.0 + self.a[0] + self.a[1])
    }

    /// Filters `x` in place starting from the steady state for `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let y0 = first * self.dc_gain();
        let mut z2 = b2 * first - a2 * y0;
        let mut z1 = b1 * first - a1 * y0 + z2;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }

    /// Forward-backward filtering with odd extension at both ends.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Zero-phase low-pass of every state channel; inputs are left alone.
pub fn zero_phase_lowpass(traj: &Trajectory, cutoff_hz: f64) -> Result<Trajectory> {
    let fs = 1.0 / traj.dt;
    let section = butterworth_lowpass(cutoff_hz, fs)?;
    // Three time constants of padding absorbs the start-up transient.
    let pad = ((3.0 * fs / cutoff_hz).ceil() as usize).max(9);
    let mut out = traj.clone();
    for mut col in out.states.column_iter_mut() {
        let filtered = section.filtfilt(col.as_slice(), pad);
        col.copy_from_slice(&filtered);
    }
    out.meta.cutoff_hz = Some(cutoff_hz);
    Ok(out)
}
