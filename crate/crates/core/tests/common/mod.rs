#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ez_core::manifest::{invert_speaker_map, DataDirectory, Segment};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

const WORDS: &[&str] = &["hello", "world", "ünïcode", "数据", "a", "the", "x-1", "OK?"];

fn token<R: Rng>(rng: &mut R, prefix: &str) -> String {
    format!("{prefix}{:x}", rng.random::<u32>())
}

/// A valid data directory with random ids, multi-word values, and
/// optionally a `segments` file.
pub fn random_data_dir<R: Rng>(rng: &mut R) -> DataDirectory {
    let n_utts = rng.random_range(1..30);
    let n_spk = rng.random_range(1..=n_utts.min(5));
    let speakers: Vec<String> = (0..n_spk).map(|_| token(rng, "spk")).collect();
    let with_segments = rng.random_bool(0.5);

    let mut dd = DataDirectory::default();
    let mut utt_ids = Vec::new();
    while utt_ids.len() < n_utts {
        let id = token(rng, "utt");
        if !utt_ids.contains(&id) {
            utt_ids.push(id);
        }
    }

    let mut segments = BTreeMap::new();
    if with_segments {
        let n_rec = rng.random_range(1..=3);
        let recs: Vec<String> = (0..n_rec).map(|i| format!("rec{i}")).collect();
        for r in &recs {
            dd.wav.insert(r.clone(), format!("sox /data/{r} file.wav -t wav - |"));
        }
        for id in &utt_ids {
            let start: f64 = rng.random_range(0.0..100.0);
            let end = start + rng.random_range(0.01..10.0);
            segments.insert(
                id.clone(),
                Segment {
                    recording_id: recs[rng.random_range(0..recs.len())].clone(),
                    start_sec: start,
                    end_sec: end,
                },
            );
        }
        dd.segments = Some(segments);
    } else {
        for id in &utt_ids {
            dd.wav
                .insert(id.clone(), format!("/corpus/dir {}/{id}.wav", rng.random::<u8>()));
        }
    }
    for id in &utt_ids {
        let n_words = rng.random_range(1..6);
        let words: Vec<&str> = (0..n_words).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        dd.text.insert(id.clone(), words.join(" "));
        dd.utt2spk
            .insert(id.clone(), speakers[rng.random_range(0..speakers.len())].clone());
    }
    dd.spk2utt = invert_speaker_map(&dd.utt2spk);
    dd
}

pub fn sine(freq: f64, sample_rate: u32, len: usize, amplitude: f64) -> Vec<f64> {
    (0..len)
        .map(|n| amplitude * (2.0 * PI * freq * n as f64 / sample_rate as f64).sin())
        .collect()
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Frequency of the strongest spectral peak, refined by parabolic
/// interpolation of the log magnitude around the peak bin.
pub fn dominant_frequency(x: &[f64], sample_rate: u32) -> f64 {
    let n = x.len();
    // Hann window to keep leakage from biasing the interpolation.
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm().max(1e-300).ln()).collect();
    let k = (1..mag.len() - 1)
        .max_by(|&a, &b| mag[a].total_cmp(&mag[b]))
        .expect("spectrum has interior bins");
    let (a, b, c) = (mag[k - 1], mag[k], mag[k + 1]);
    let delta = 0.5 * (a - c) / (a - 2.0 * b + c);
    (k as f64 + delta) * sample_rate as f64 / n as f64
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}
