//! Short-time Fourier transform with an exact adjoint.
//!
//! Frames are `n_fft` samples long; the analysis window (`win_length` samples)
//! sits centred inside the frame and is zero elsewhere. With `center` the
//! signal is reflect-padded by `n_fft / 2` on both sides so that frame `t`
//! is centred on sample `t · hop`.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    /// Periodic Hann window.
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Clone)]
pub struct StftPlan {
    n_fft: usize,
    hop: usize,
    center: bool,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .field("center", &self.center)
            .finish()
    }
}

/// Index into the reflect-padded signal → index into the original.
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut j = i;
    if j < 0 {
        j = -j;
    }
    if j >= n {
        j = 2 * (n - 1) - j;
    }
    j as usize
}

impl StftPlan {
    /// Panics if `win_length > n_fft` or `hop == 0`.
    pub fn new(n_fft: usize, win_length: usize, hop: usize, window: Window, center: bool) -> Self {
        assert!(win_length <= n_fft && win_length > 0, "window longer than FFT");
        assert!(hop > 0, "hop must be positive");
        let mut full = vec![0.0; n_fft];
        let off = (n_fft - win_length) / 2;
        full[off..off + win_length].copy_from_slice(&window.coefficients(win_length));
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            center,
            window: full,
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        if self.center {
            self.n_fft / 2
        } else {
            0
        }
    }

    /// Shortest signal the plan accepts.
    pub fn min_len(&self) -> usize {
        if self.center {
            // reflection needs at least pad + 1 samples
            self.pad() + 1
        } else {
            self.n_fft
        }
    }

    /// Frame count for a signal of `len` samples, or `None` if too short.
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        if len < self.min_len() {
            return None;
        }
        Some((len + 2 * self.pad() - self.n_fft) / self.hop + 1)
    }

    #[inline]
    fn sample(&self, x: &[f64], padded_index: usize) -> f64 {
        if self.center {
            x[reflect(padded_index as isize - self.pad() as isize, x.len())]
        } else {
            x[padded_index]
        }
    }

    /// Complex spectrum, interleaved `[frames, bins, (re, im)]`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let frames = self
            .n_frames(x.len())
            .unwrap_or_else(|| panic!("signal of {} samples too short for STFT", x.len()));
        let bins = self.n_bins();
        let mut out = vec![0.0; frames * bins * 2];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            let start = f * self.hop;
            for (n, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(self.window[n] * self.sample(x, start + n), 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            let o = &mut out[f * bins * 2..(f + 1) * bins * 2];
            for k in 0..bins {
                o[2 * k] = buf[k].re;
                o[2 * k + 1] = buf[k].im;
            }
        }
        out
    }

    /// Adjoint of [`forward`](Self::forward): maps a gradient on the complex
    /// spectrum back to a gradient on the `len`-sample signal.
    pub fn backward(&self, len: usize, grad: &[f64]) -> Vec<f64> {
        let frames = self.n_frames(len).expect("signal too short for STFT");
        let bins = self.n_bins();
        assert_eq!(grad.len(), frames * bins * 2);
        let padded_len = len + 2 * self.pad();
        let mut dpad = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        for f in 0..frames {
            let g = &grad[f * bins * 2..(f + 1) * bins * 2];
            for (k, b) in buf.iter_mut().enumerate() {
                *b = if k < bins {
                    Complex64::new(g[2 * k], g[2 * k + 1])
                } else {
                    Complex64::new(0.0, 0.0)
                };
            }
            // Re Σ_k G_k e^{+2πikn/N} is d(loss)/d(windowed sample n).
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = f * self.hop;
            for n in 0..self.n_fft {
                dpad[start + n] += self.window[n] * buf[n].re;
            }
        }
        if !self.center {
            dpad.truncate(len);
            return dpad;
        }
        let mut dx = vec![0.0; len];
        let pad = self.pad() as isize;
        for (i, v) in dpad.iter().enumerate() {
            dx[reflect(i as isize - pad, len)] += v;
        }
        dx
    }
}
