use super::FrameConfig;
use crate::error::{Error, Result};

pub fn hz_to_mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * ((m / 1127.0).exp() - 1.0)
}

/// Dense triangular mel filterbank, `n_mels x n_bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn filter(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        debug_assert_eq!(power.len(), self.n_bins);
        self.weights
            .chunks_exact(self.n_bins)
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Filters are triangles in the mel domain with centres equally spaced
/// between `low_freq_hz` and Nyquist.
pub fn mel_filterbank(cfg: &FrameConfig) -> Result<MelFilterbank> {
    cfg.validate()?;
    let nyquist = cfg.sample_rate as f64 / 2.0;
    if cfg.low_freq_hz < 0.0 || cfg.low_freq_hz >= nyquist {
        return Err(Error::Invalid(format!(
            "low frequency {} Hz outside [0, {nyquist})",
            cfg.low_freq_hz
        )));
    }
    let n_bins = cfg.n_bins();
    let lo = hz_to_mel(cfg.low_freq_hz);
    let hi = hz_to_mel(nyquist);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let bin_mel: Vec<f64> = (0..n_bins)
        .map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64))
        .collect();

    let mut weights = vec![0.0; cfg.n_mels * n_bins];
    for m in 0..cfg.n_mels {
        let left = lo + m as f64 * step;
        let centre = left + step;
        let right = centre + step;
        for (k, &mk) in bin_mel.iter().enumerate() {
            let w = if mk > left && mk <= centre {
                (mk - left) / (centre - left)
            } else if mk > centre && mk < right {
                (right - mk) / (right - centre)
            } else {
                0.0
            };
            weights[m * n_bins + k] = w;
        }
    }
    let bank = MelFilterbank {
        n_mels: cfg.n_mels,
        n_bins,
        weights,
    };
    for m in 0..bank.n_mels {
        if bank.filter(m).iter().sum::<f64>() <= 0.0 {
            return Err(Error::Invalid(format!(
                "mel filter {m} covers no FFT bin; reduce n_mels or raise fft_size"
            )));
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent construction: weight = max(0, min(rise, fall)) over mel
    // edges computed from an explicit edge list.
    fn oracle(cfg: &FrameConfig) -> Vec<Vec<f64>> {
        let lo = 1127.0 * (1.0 + cfg.low_freq_hz / 700.0).ln();
        let hi = 1127.0 * (1.0 + (cfg.sample_rate as f64 / 2.0) / 700.0).ln();
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)
            .collect();
        (0..cfg.n_mels)
            .map(|m| {
                (0..cfg.fft_size / 2 + 1)
                    .map(|k| {
                        let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                        let x = 1127.0 * (1.0 + f / 700.0).ln();
                        let rise = (x - edges[m]) / (edges[m + 1] - edges[m]);
                        let fall = (edges[m + 2] - x) / (edges[m + 2] - edges[m + 1]);
                        rise.min(fall).max(0.0)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn mel_scale_round_trip() {
        for f in [0.0, 20.0, 700.0, 4000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 1127.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_triangle_oracle() {
        let cfg = FrameConfig::default();
        let bank = mel_filterbank(&cfg).unwrap();
        assert_eq!(bank.n_mels(), 40);
        let want = oracle(&cfg);
        for m in 0..40 {
            let row = bank.filter(m);
            assert!(row.iter().sum::<f64>() > 0.0);
            for (a, b) in row.iter().zip(&want[m]) {
                assert!((a - b).abs() < 1e-12);
            }
            // triangular support: nonzero bins are contiguous with a single peak
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
            let peak = nz
                .iter()
                .copied()
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert!(nz.windows(2).all(|w| if w[1] <= peak {
                row[w[1]] >= row[w[0]]
            } else {
                row[w[1]] <= row[w[0]]
            }));
        }
    }

    #[test]
    fn too_many_filters_is_an_error() {
        let cfg = FrameConfig {
            n_mels: 120,
            ..FrameConfig::default()
        };
        assert!(mel_filterbank(&cfg).is_err());
    }
}
