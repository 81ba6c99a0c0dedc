//! Log-magnitude mel filterbank with a matching deterministic resynthesis.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokens::WaveformBuffer;

const LOG_FLOOR: f64 = 1e-4;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Frame `t` covers `2·hop` samples centred on `t·hop`, Hann-windowed and
/// zero-padded to a power-of-two FFT. Features are natural-log band energies
/// of triangular mel bands spanning DC to Nyquist.
#[derive(Clone)]
pub struct Filterbank {
    pub sample_rate_hz: u32,
    pub hop: usize,
    pub num_bands: usize,
    win: usize,
    n_fft: usize,
    window: Vec<f64>,
    /// `num_bands × (n_fft/2 + 1)` triangular weights.
    weights: Tensor,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Filterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Filterbank")
            .field("sample_rate_hz", &self.sample_rate_hz)
            .field("hop", &self.hop)
            .field("num_bands", &self.num_bands)
            .field("n_fft", &self.n_fft)
            .finish()
    }
}

impl Filterbank {
    pub fn new(sample_rate_hz: u32, frame_rate_hz: f64, num_bands: usize) -> Result<Self> {
        let hop_f = sample_rate_hz as f64 / frame_rate_hz;
        let hop = hop_f.round() as usize;
        if hop == 0 || (hop_f - hop as f64).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "frame rate {frame_rate_hz} Hz must divide the sample rate {sample_rate_hz} Hz"
            )));
        }
        if num_bands < 2 {
            return Err(Error::InvalidArgument("need at least two bands".into()));
        }
        let win = 2 * hop;
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
            .collect();
        let bins = n_fft / 2 + 1;
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..num_bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (num_bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate_hz as f64 / n_fft as f64;
        let mut weights = Tensor::zeros(num_bands, bins);
        for b in 0..num_bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights.set(b, k, w);
            }
            if weights.row(b).iter().all(|&w| w == 0.0) {
                let nearest = ((mid / bin_hz).round() as usize).min(bins - 1);
                weights.set(b, nearest, 1.0);
            }
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            sample_rate_hz,
            hop,
            num_bands,
            win,
            n_fft,
            window,
            weights,
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        })
    }

    /// Number of frames for `n` samples: `ceil(n / hop)`.
    pub fn num_frames(&self, n: usize) -> usize {
        n.div_ceil(self.hop)
    }

    /// `T × num_bands` log band energies.
    pub fn analyze(&self, wave: &WaveformBuffer) -> Result<Tensor> {
        if wave.sample_rate_hz != self.sample_rate_hz {
            return Err(Error::SampleRateMismatch {
                wave: wave.sample_rate_hz,
                codec: self.sample_rate_hz,
            });
        }
        if wave.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSamples);
        }
        let x = &wave.samples;
        let t_len = self.num_frames(x.len());
        let bins = self.n_fft / 2 + 1;
        let mut out = Tensor::zeros(t_len, self.num_bands);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0; bins];
        for t in 0..t_len {
            let start = (t * self.hop) as isize - (self.hop / 2) as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                let idx = start + i as isize;
                let s = if i < self.win && idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize] * self.window[i]
                } else {
                    0.0
                };
                *b = Complex::new(s, 0.0);
            }
            self.fwd.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (b, o) in out.row_mut(t).iter_mut().enumerate() {
                let e: f64 = self.weights.row(b).iter().zip(&power).map(|(w, p)| w * p).sum();
                *o = (e + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    /// Resynthesizes `T·hop` samples from log band energies. Per-bin power is
    /// interpolated from the band densities; phases advance coherently at
    /// each bin's centre frequency from a fixed pseudo-random offset, so the
    /// output is a deterministic function of the features.
    pub fn synthesize(&self, features: &Tensor) -> Result<WaveformBuffer> {
        if features.cols != self.num_bands {
            return Err(Error::ShapeMismatch(format!(
                "features have {} bands, filterbank has {}",
                features.cols, self.num_bands
            )));
        }
        let t_len = features.rows;
        let bins = self.n_fft / 2 + 1;
        let band_mass: Vec<f64> = (0..self.num_bands).map(|b| self.weights.row(b).iter().sum()).collect();
        let bin_mass: Vec<f64> = (0..bins)
            .map(|k| (0..self.num_bands).map(|b| self.weights.get(b, k)).sum())
            .collect();
        let offsets: Vec<f64> = (0..bins)
            .map(|k| {
                let h = crate::seed::derive_seed(0x5EED, k as u64, 0);
                (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * std::f64::consts::PI
            })
            .collect();
        let n_out = t_len * self.hop;
        let mut out = vec![0.0; n_out];
        let mut norm = vec![0.0; n_out];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        // analysis gain of a Hann window is Σw = win/2
        let gain = self.win as f64 / 2.0;
        for t in 0..t_len {
            let density: Vec<f64> = (0..self.num_bands)
                .map(|b| ((features.get(t, b).exp() - LOG_FLOOR).max(0.0)) / band_mass[b])
                .collect();
            for k in 0..bins {
                let p = if bin_mass[k] > 0.0 {
                    (0..self.num_bands).map(|b| self.weights.get(b, k) * density[b]).sum::<f64>() / bin_mass[k]
                } else {
                    0.0
                };
                let mag = p.sqrt();
                let phase = offsets[k]
                    + 2.0 * std::f64::consts::PI * k as f64 * (t * self.hop) as f64 / self.n_fft as f64;
                buf[k] = Complex::from_polar(mag, phase);
                if k > 0 && k < self.n_fft / 2 {
                    buf[self.n_fft - k] = buf[k].conj();
                }
            }
            self.inv.process(&mut buf);
            let start = (t * self.hop) as isize - (self.hop / 2) as isize;
            for i in 0..self.win {
                let idx = start + i as isize;
                if idx < 0 || idx as usize >= n_out {
                    continue;
                }
                let w = self.window[i];
                // a sinusoid of amplitude a analyses to |X| = a·gain/2 per
                // side, and the unnormalized inverse sums both sides
                out[idx as usize] += w * buf[i].re / gain;
                norm[idx as usize] += w * w;
            }
        }
        let samples = out
            .iter()
            .zip(&norm)
            .map(|(s, n)| if *n > 1e-8 { s / n } else { 0.0 })
            .collect();
        WaveformBuffer::new(samples, self.sample_rate_hz)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64, sr: u32) -> WaveformBuffer {
        let n = (secs * sr as f64) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
            .collect();
        WaveformBuffer::new(s, sr).unwrap()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn frame_count_is_ceiling() {
        let fb = Filterbank::new(16_000, 50.0, 24).unwrap();
        assert_eq!(fb.analyze(&tone(440.0, 1.0, 16_000)).unwrap().rows, 50);
        assert_eq!(fb.num_frames(16_001), 51);
        assert_eq!(fb.num_frames(0), 0);
    }

    #[test]
    fn tone_energy_lands_in_its_band() {
        let fb = Filterbank::new(16_000, 50.0, 24).unwrap();
        let f = fb.analyze(&tone(1000.0, 0.5, 16_000)).unwrap();
        let row = f.row(10);
        let peak = crate::tensor::argmax(row);
        let centre = mel_to_hz(hz_to_mel(8000.0) * (peak + 1) as f64 / 25.0);
        assert!((centre - 1000.0).abs() < 300.0, "peak band centre {centre}");
    }

    #[test]
    fn resynthesis_keeps_length_and_spectrum_shape() {
        let fb = Filterbank::new(16_000, 50.0, 24).unwrap();
        let w = tone(700.0, 0.4, 16_000);
        let f = fb.analyze(&w).unwrap();
        let y = fb.synthesize(&f).unwrap();
        assert_eq!(y.len(), f.rows * fb.hop);
        let g = fb.analyze(&y).unwrap();
        let (a, b) = (crate::tensor::argmax(f.row(8)), crate::tensor::argmax(g.row(8)));
        assert!(a.abs_diff(b) <= 1, "peak band moved from {a} to {b}");
        let corr = pearson(f.row(8), g.row(8));
        assert!(corr > 0.8, "spectral correlation {corr}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let fb = Filterbank::new(16_000, 50.0, 24).unwrap();
        assert!(matches!(fb.analyze(&tone(1.0, 0.1, 8000)), Err(Error::SampleRateMismatch { .. })));
        assert!(Filterbank::new(16_000, 48.0, 24).is_err());
    }
}
