//! Waveform perturbations: volume, speed (resampling, shifts pitch), and
//! tempo (WSOLA time stretch, keeps pitch).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_FACTOR: f64 = 0.5;
pub const MAX_FACTOR: f64 = 2.0;
pub const SOLA_FRAME: usize = 1024;
pub const SOLA_HOP: usize = SOLA_FRAME / 2;
pub const SOLA_SEARCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugKind {
    Volume,
    Speed,
    Tempo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugOp {
    pub kind: AugKind,
    pub factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Fraction of utterances that receive exactly one perturbation.
    pub probability: f64,
    pub ops: Vec<AugOp>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            probability: 0.3,
            ops: vec![
                AugOp {
                    kind: AugKind::Volume,
                    factors: vec![0.9, 1.1],
                },
                AugOp {
                    kind: AugKind::Speed,
                    factors: vec![0.9],
                },
                AugOp {
                    kind: AugKind::Tempo,
                    factors: vec![0.9],
                },
            ],
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augmentation probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.probability > 0.0 && self.ops.is_empty() {
            return Err(Error::Config("augmentation needs at least one op".into()));
        }
        for op in &self.ops {
            if op.factors.is_empty() || op.factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
                return Err(Error::Config(format!("{:?} needs positive factors", op.kind)));
            }
            if op.kind != AugKind::Volume {
                for &f in &op.factors {
                    check_factor(f)?;
                }
            }
        }
        Ok(())
    }
}

fn check_factor(factor: f64) -> Result<()> {
    if (MIN_FACTOR..=MAX_FACTOR).contains(&factor) {
        Ok(())
    } else {
        Err(Error::BadFactor {
            factor,
            min: MIN_FACTOR,
            max: MAX_FACTOR,
        })
    }
}

/// Multiplies by `gain` and clips to [-1, 1].
pub fn apply_volume(wave: &[f64], gain: f64) -> Vec<f64> {
    wave.iter().map(|x| (x * gain).clamp(-1.0, 1.0)).collect()
}

/// Linear-interpolation resampling to `round(len / factor)` samples;
/// changes duration and pitch together.
pub fn apply_speed(wave: &[f64], factor: f64, _sample_rate: u32) -> Result<Vec<f64>> {
    check_factor(factor)?;
    if wave.is_empty() {
        return Ok(Vec::new());
    }
    let out_len = (wave.len() as f64 / factor).round() as usize;
    let last = wave.len() - 1;
    Ok((0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            wave[lo] + (wave[hi] - wave[lo]) * frac
        })
        .collect())
}

fn hann(n: usize) -> Vec<f64> {
    // Periodic window: overlapping copies at hop n/2 sum to one.
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

/// Time stretch by `1 / factor` that keeps pitch: waveform-similarity
/// overlap-add with 1024-sample Hann frames, synthesis hop 512, and a
/// ±256-sample alignment search. Output length is `round(len / factor)`.
/// Waves shorter than one frame are returned unchanged.
pub fn apply_tempo(wave: &[f64], factor: f64, _sample_rate: u32) -> Result<Vec<f64>> {
    check_factor(factor)?;
    let len = wave.len();
    if len < SOLA_FRAME {
        return Ok(wave.to_vec());
    }
    let out_len = (len as f64 / factor).round() as usize;
    let window = hann(SOLA_FRAME);
    let analysis_hop = SOLA_HOP as f64 * factor;
    let max_start = len - SOLA_FRAME;
    let overlap = SOLA_FRAME - SOLA_HOP;

    let n_frames = out_len.div_ceil(SOLA_HOP) + 1;
    let mut out = vec![0.0; n_frames * SOLA_HOP + SOLA_FRAME];
    let mut norm = vec![0.0; out.len()];
    let mut prev: Option<usize> = None;

    for k in 0..n_frames {
        let nominal = ((k as f64 * analysis_hop).round() as usize).min(max_start);
        let start = match prev {
            None => nominal,
            Some(p) => {
                // Natural continuation of the previous frame in the input.
                let natural = (p + SOLA_HOP).min(max_start);
                let target = &wave[natural..natural + overlap];
                let lo = nominal.saturating_sub(SOLA_SEARCH);
                let hi = (nominal + SOLA_SEARCH).min(max_start);
                let mut best = (nominal, f64::NEG_INFINITY);
                for cand in lo..=hi {
                    let c = correlation(&wave[cand..cand + overlap], target);
                    // Ties go to the candidate closest to the nominal position.
                    let closer = cand.abs_diff(nominal) < best.0.abs_diff(nominal);
                    if c > best.1 || (c == best.1 && closer) {
                        best = (cand, c);
                    }
                }
                best.0
            }
        };
        let at = k * SOLA_HOP;
        for i in 0..SOLA_FRAME {
            out[at + i] += wave[start + i] * window[i];
            norm[at + i] += window[i];
        }
        prev = Some(start);
    }

    out.truncate(out_len);
    for (x, w) in out.iter_mut().zip(&norm) {
        if *w > 1e-3 {
            *x /= w;
        }
    }
    Ok(out)
}

pub fn apply_op(wave: &[f64], kind: AugKind, factor: f64, sample_rate: u32) -> Result<Vec<f64>> {
    match kind {
        AugKind::Volume => Ok(apply_volume(wave, factor)),
        AugKind::Speed => apply_speed(wave, factor, sample_rate),
        AugKind::Tempo => apply_tempo(wave, factor, sample_rate),
    }
}

/// With probability `spec.probability`, applies one op chosen uniformly
/// with a factor chosen uniformly from its list; otherwise returns the
/// input. Returns the op that was applied, if any.
pub fn augment<R: Rng + ?Sized>(
    wave: &[f64],
    spec: &AugmentationSpec,
    sample_rate: u32,
    rng: &mut R,
) -> (Vec<f64>, Option<(AugKind, f64)>) {
    let gate: f64 = rng.random();
    if spec.ops.is_empty() || gate >= spec.probability {
        return (wave.to_vec(), None);
    }
    let op = &spec.ops[rng.random_range(0..spec.ops.len())];
    let factor = op.factors[rng.random_range(0..op.factors.len())];
    match apply_op(wave, op.kind, factor, sample_rate) {
        Ok(out) => (out, Some((op.kind, factor))),
        // Factors are range-checked by `validate`; an unchecked spec with a
        // bad factor degrades to identity.
        Err(_) => (wave.to_vec(), None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_pcg::Pcg64;

    #[test]
    fn volume_examples() {
        let out = apply_volume(&[0.5, -0.5], 1.1);
        assert!((out[0] - 0.55).abs() < 1e-15 && (out[1] + 0.55).abs() < 1e-15);
        let w = [0.3, -0.2, 0.9];
        assert_eq!(apply_volume(&w, 1.0), w.to_vec());
        assert_eq!(apply_volume(&[0.95], 1.1), vec![1.0]);
    }

    #[test]
    fn speed_lengths_and_identity() {
        let w: Vec<f64> = (0..16000).map(|i| (i as f64 * 0.01).sin()).collect();
        assert_eq!(apply_speed(&w, 1.0, 16000).unwrap(), w);
        assert_eq!(apply_speed(&w, 0.9, 16000).unwrap().len(), 17778);
        assert!(matches!(apply_speed(&w, 3.0, 16000), Err(Error::BadFactor { .. })));
        assert!(matches!(apply_tempo(&w, 0.4, 16000), Err(Error::BadFactor { .. })));
    }

    #[test]
    fn tempo_short_wave_is_identity() {
        let w = vec![0.1; 500];
        assert_eq!(apply_tempo(&w, 0.9, 16000).unwrap(), w);
    }

    #[test]
    fn tempo_length_bound() {
        let w: Vec<f64> = (0..16000).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
        let out = apply_tempo(&w, 0.9, 16000).unwrap();
        assert!(out.len().abs_diff(17778) <= SOLA_FRAME);
        let out = apply_tempo(&w, 1.25, 16000).unwrap();
        assert!(out.len().abs_diff(12800) <= SOLA_FRAME);
    }

    #[test]
    fn augment_gates() {
        let w = vec![0.5; 10];
        let mut rng = Pcg64::seed_from_u64(1);
        let never = AugmentationSpec {
            probability: 0.0,
            ..Default::default()
        };
        for _ in 0..100 {
            assert_eq!(augment(&w, &never, 16000, &mut rng), (w.clone(), None));
        }
        let always = AugmentationSpec {
            probability: 1.0,
            ops: vec![AugOp {
                kind: AugKind::Volume,
                factors: vec![1.1],
            }],
        };
        for _ in 0..100 {
            let (out, op) = augment(&w, &always, 16000, &mut rng);
            assert_eq!(op, Some((AugKind::Volume, 1.1)));
            assert_eq!(out, apply_volume(&w, 1.1));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentationSpec::default().validate().is_ok());
        let bad = AugmentationSpec {
            probability: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationSpec {
            probability: 0.5,
            ops: vec![AugOp {
                kind: AugKind::Speed,
                factors: vec![4.0],
            }],
        };
        assert!(matches!(bad.validate(), Err(Error::BadFactor { .. })));
    }
}
