//! Desk-scale fixtures: a synthetic tone corpus and a linear classifier over
//! log filterbank energies with hand-written gradients.
//!
//! Class `c` is a 0.5-amplitude sine at `200·(c+1)` Hz plus N(0, 0.01²)
//! noise, so classes are separable in filterbank space.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{self, Waveform};
use crate::batching::hash_words;
use crate::dataset::{Array, FieldValue, Item};
use crate::error::{Error, Result};
use crate::manifest::{self, DataDirectory, Utterance};
use crate::model::{Network, Params, Tensor, TrainableModel};
use crate::stats::Normalizer;

pub const FRAME_LEN: usize = 400;
pub const FRAME_HOP: usize = 160;
pub const FFT_LEN: usize = 512;
pub const NUM_FILTERS: usize = 16;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusSpec {
    pub n_utts: usize,
    pub n_classes: usize,
    pub sample_rate: u32,
    pub duration_range_sec: (f64, f64),
    pub seed: u64,
}

impl ToyCorpusSpec {
    pub fn new(n_utts: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            n_utts,
            n_classes,
            sample_rate: 16000,
            duration_range_sec: (0.2, 1.0),
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_utts == 0 {
            return Err(Error::Config("n_utts must be positive".into()));
        }
        if !(2..=16).contains(&self.n_classes) {
            return Err(Error::Config(format!("n_classes {} outside [2, 16]", self.n_classes)));
        }
        let (lo, hi) = self.duration_range_sec;
        if self.sample_rate == 0 || !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("bad sample rate or duration range".into()));
        }
        Ok(())
    }
}

pub fn class_name(class: usize) -> String {
    format!("class{class}")
}

pub fn class_names(n_classes: usize) -> Vec<String> {
    (0..n_classes).map(class_name).collect()
}

pub fn class_frequency(class: usize) -> f64 {
    200.0 * (class + 1) as f64
}

/// Waveform of utterance `index`; a pure function of the spec.
pub fn toy_waveform(spec: &ToyCorpusSpec, index: usize) -> (usize, Waveform) {
    let mut rng = Pcg64::seed_from_u64(hash_words(&[spec.seed, index as u64]));
    let class = index % spec.n_classes;
    let (lo, hi) = spec.duration_range_sec;
    let dur = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let sr = spec.sample_rate as f64;
    let n = ((dur * sr).round() as usize).max(1);
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, 0.01).expect("valid sigma");
    let freq = class_frequency(class);
    let samples = (0..n)
        .map(|t| 0.5 * (2.0 * PI * freq * t as f64 / sr + phase).sin() + noise.sample(&mut rng))
        .collect();
    (
        class,
        Waveform {
            samples,
            sample_rate: spec.sample_rate,
        },
    )
}

/// Writes the corpus as PCM WAV files under `out_dir/wav/` plus Kaldi
/// manifests in `out_dir`.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, out_dir: impl AsRef<Path>) -> Result<DataDirectory> {
    spec.check()?;
    let out = out_dir.as_ref();
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let wav_dir = std::path::absolute(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let n_speakers = spec.n_utts.div_ceil(10);

    let mut utts = Vec::with_capacity(spec.n_utts);
    for i in 0..spec.n_utts {
        let id = format!("utt{i:05}");
        let (class, wave) = toy_waveform(spec, i);
        let path = wav_dir.join(format!("{id}.wav"));
        audio::write_wav(&path, &wave)?;
        utts.push(Utterance {
            id,
            audio_source: path.to_string_lossy().into_owned(),
            speaker_id: format!("spk{:03}", i % n_speakers),
            transcript: class_name(class),
            segment: None,
        });
    }
    let dd = DataDirectory::from_utterances(&utts)?;
    manifest::write_data_directory(&dd, out)?;
    Ok(dd)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `NUM_FILTERS × (FFT_LEN/2 + 1)` triangular filters, mel-spaced from 0 Hz
/// to Nyquist.
pub fn filterbank(sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = FFT_LEN / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..NUM_FILTERS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (NUM_FILTERS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / FFT_LEN as f64;
    (0..NUM_FILTERS)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn num_frames(len: usize) -> usize {
    if len <= FRAME_LEN {
        1
    } else {
        1 + (len - FRAME_LEN) / FRAME_HOP
    }
}

/// Periodic Hann analysis window of `FRAME_LEN` samples.
pub fn analysis_window() -> Vec<f64> {
    (0..FRAME_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / FRAME_LEN as f64).cos())
        .collect()
}

thread_local! {
    static WINDOW: Arc<Vec<f64>> = Arc::new(analysis_window());
    static FFT: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(FFT_LEN);
    static BANKS: RefCell<HashMap<u32, Arc<Vec<Vec<f64>>>>> = RefCell::new(HashMap::new());
}

fn cached_filterbank(sample_rate: u32) -> Arc<Vec<Vec<f64>>> {
    BANKS.with(|b| {
        b.borrow_mut()
            .entry(sample_rate)
            .or_insert_with(|| Arc::new(filterbank(sample_rate)))
            .clone()
    })
}

/// Log filterbank energies, `frames × 16`: 400-sample Hann-windowed frames
/// with hop 160, zero-padded to a 512-point FFT, power spectrum through the triangular
/// filters, floored at `ln(1e-10)`. Waves shorter than a frame are padded.
pub fn toy_features(wave: &[f64], sample_rate: u32) -> Array {
    let frames = num_frames(wave.len());
    let bank = cached_filterbank(sample_rate);
    let fft = FFT.with(Arc::clone);
    let window = WINDOW.with(Arc::clone);
    let mut out = Vec::with_capacity(frames * NUM_FILTERS);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
    for f in 0..frames {
        let start = f * FRAME_HOP;
        for (i, slot) in buf.iter_mut().enumerate() {
            let x = if i < FRAME_LEN {
                wave.get(start + i).copied().unwrap_or(0.0) * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        for filt in bank.iter() {
            let energy: f64 = filt.iter().zip(&buf).map(|(w, c)| w * c.norm_sqr()).sum();
            out.push(energy.max(LOG_FLOOR).ln());
        }
    }
    Array::matrix(frames, NUM_FILTERS, out).expect("frames ≥ 1")
}

/// Linear softmax classifier over mean-pooled (optionally normalized)
/// `toy_features`. Parameters: `W` (classes × 16) and `b` (classes).
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    pub classes: Vec<String>,
    pub sample_rate: u32,
    /// Applied to the per-frame features before pooling.
    pub normalizer: Option<Normalizer>,
}

impl ToyClassifier {
    pub fn new(n_classes: usize, sample_rate: u32) -> Self {
        Self {
            classes: class_names(n_classes),
            sample_rate,
            normalizer: None,
        }
    }

    pub fn with_normalizer(mut self, normalizer: Normalizer) -> Self {
        self.normalizer = Some(normalizer);
        self
    }

    pub fn init_params(&self) -> Params {
        let k = self.classes.len();
        let mut p = Params::new();
        p.insert("W".into(), Tensor::zeros(&[k, NUM_FILTERS]));
        p.insert("b".into(), Tensor::zeros(&[k]));
        p
    }

    pub fn into_model(self) -> TrainableModel {
        let params = self.init_params();
        TrainableModel::new(Arc::new(self), params)
    }

    /// Mean-pooled feature vector of one item.
    pub fn pooled(&self, item: &Item) -> Result<Vec<f64>> {
        let speech = item
            .get("speech")
            .and_then(FieldValue::as_array)
            .ok_or_else(|| Error::SchemaError("item lacks a `speech` array".into()))?;
        let feats = toy_features(speech.data(), self.sample_rate);
        let mut data = feats.into_data();
        if let Some(norm) = &self.normalizer {
            norm.apply(&mut data);
        }
        let frames = data.len() / NUM_FILTERS;
        let mut x = vec![0.0; NUM_FILTERS];
        for row in data.chunks_exact(NUM_FILTERS) {
            for (acc, v) in x.iter_mut().zip(row) {
                *acc += v;
            }
        }
        x.iter_mut().for_each(|v| *v /= frames as f64);
        Ok(x)
    }

    pub fn label(&self, item: &Item) -> Result<usize> {
        let text = item
            .get("text")
            .and_then(FieldValue::as_tokens)
            .ok_or_else(|| Error::SchemaError("item lacks a `text` token".into()))?;
        self.classes
            .iter()
            .position(|c| c == text.trim())
            .ok_or_else(|| Error::LabelError(text.to_string()))
    }

    fn weights<'a>(&self, params: &'a Params) -> Result<(&'a Tensor, &'a Tensor)> {
        let w = params
            .get("W")
            .ok_or_else(|| Error::SchemaError("missing param W".into()))?;
        let b = params
            .get("b")
            .ok_or_else(|| Error::SchemaError("missing param b".into()))?;
        let k = self.classes.len();
        if w.shape != [k, NUM_FILTERS] || b.shape != [k] {
            return Err(Error::SchemaError(format!(
                "expected W {k}×{NUM_FILTERS} and b {k}, got {:?} and {:?}",
                w.shape, b.shape
            )));
        }
        Ok((w, b))
    }

    pub fn logits(&self, params: &Params, x: &[f64]) -> Result<Vec<f64>> {
        let (w, b) = self.weights(params)?;
        Ok(w.data
            .chunks_exact(NUM_FILTERS)
            .zip(&b.data)
            .map(|(row, bias)| row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + bias)
            .collect())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

impl Network for ToyClassifier {
    fn loss_and_grads(&self, params: &Params, batch: &[Item]) -> Result<(f64, Params)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let k = self.classes.len();
        let mut dw = vec![0.0; k * NUM_FILTERS];
        let mut db = vec![0.0; k];
        let mut loss = 0.0;
        for item in batch {
            let y = self.label(item)?;
            let x = self.pooled(item)?;
            let logits = self.logits(params, &x)?;
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += log_z - logits[y];
            let p = softmax(&logits);
            for c in 0..k {
                let delta = p[c] - if c == y { 1.0 } else { 0.0 };
                db[c] += delta;
                for (g, xi) in dw[c * NUM_FILTERS..(c + 1) * NUM_FILTERS].iter_mut().zip(&x) {
                    *g += delta * xi;
                }
            }
        }
        let n = batch.len() as f64;
        dw.iter_mut().for_each(|g| *g /= n);
        db.iter_mut().for_each(|g| *g /= n);
        let mut grads = Params::new();
        grads.insert("W".into(), Tensor::from_vec(&[k, NUM_FILTERS], dw)?);
        grads.insert("b".into(), Tensor::from_vec(&[k], db)?);
        Ok((loss / n, grads))
    }

    fn predict(&self, params: &Params, item: &Item) -> Result<String> {
        let x = self.pooled(item)?;
        let logits = self.logits(params, &x)?;
        Ok(self.classes[argmax(&logits)].clone())
    }

    fn metrics(&self, params: &Params, batch: &[Item]) -> Result<BTreeMap<String, f64>> {
        let mut correct = 0usize;
        for item in batch {
            let y = self.label(item)?;
            let logits = self.logits(params, &self.pooled(item)?)?;
            if argmax(&logits) == y {
                correct += 1;
            }
        }
        let mut m = BTreeMap::new();
        m.insert("accuracy".into(), correct as f64 / batch.len().max(1) as f64);
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_counts() {
        assert_eq!(toy_features(&vec![0.1; 400], 16000).shape(), &[1, NUM_FILTERS]);
        assert_eq!(toy_features(&vec![0.1; 100], 16000).shape(), &[1, NUM_FILTERS]);
        assert_eq!(toy_features(&vec![0.1; 560], 16000).shape(), &[2, NUM_FILTERS]);
        assert_eq!(num_frames(16000), 98);
    }

    #[test]
    fn silence_hits_the_floor() {
        let f = toy_features(&vec![0.0; 1000], 16000);
        assert!(f.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let clf = ToyClassifier::new(4, 16000);
        let params = clf.init_params();
        let mut item = Item::new();
        item.insert("speech".into(), Array::vector(vec![0.1; 800]).unwrap().into());
        item.insert("text".into(), "class2".into());
        let (loss, _) = clf.loss_and_grads(&params, &[item.clone()]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let (loss2, _) = clf.loss_and_grads(&params, &[item.clone(), item.clone()]).unwrap();
        assert_eq!(loss, loss2);

        item.insert("text".into(), "dog".into());
        assert!(matches!(
            clf.loss_and_grads(&params, &[item]),
            Err(Error::LabelError(_))
        ));
    }

    #[test]
    fn filterbank_is_triangular_and_covers_band() {
        let bank = filterbank(16000);
        assert_eq!(bank.len(), NUM_FILTERS);
        for filt in &bank {
            assert!(filt.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(filt.iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn corpus_waveforms_are_deterministic() {
        let spec = ToyCorpusSpec::new(5, 3, 11);
        assert_eq!(toy_waveform(&spec, 3), toy_waveform(&spec, 3));
        assert_ne!(toy_waveform(&spec, 3).1, toy_waveform(&spec, 4).1);
    }
}
