use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ez_core::audio::{read_wav, write_wav, Waveform};
use ez_core::dataset::*;
use ez_core::manifest::{invert_speaker_map, load_data_directory, DataDirectory, Segment};
use ez_core::reference::{generate_toy_corpus, ToyCorpusSpec};
use ez_core::{BoxError, Error};
use proptest::prelude::*;

fn squares(n: usize) -> EzDataset<Vec<usize>> {
    let info = DataInfo::new()
        .field("x", |r: &usize| {
            Array::vector(vec![*r as f64; *r + 1]).map_err(BoxError::from)
        })
        .field("label", |r: &usize| Ok::<_, BoxError>(format!("n{}", r * r)));
    let ids = (0..n).map(|i| format!("id{:03}", n - i)).collect();
    build_dataset((0..n).collect::<Vec<_>>(), info, Some(ids)).unwrap()
}

proptest! {
    #[test]
    fn lookup_by_id_agrees_with_index(n in 1usize..40, probe in any::<prop::sample::Index>()) {
        let ds = squares(n);
        let i = probe.index(n);
        let id = ds.id(i).to_string();
        prop_assert_eq!(ds.index_of(&id), Some(i));
        let a = ds.get_item(i).unwrap();
        let b = ds.get_by_id(&id).unwrap();
        prop_assert_eq!(&a, &b);
        // Brute force against the extractor definitions.
        prop_assert_eq!(a["x"].as_array().unwrap().shape(), &[i + 1]);
        let expected_label = format!("n{}", i * i);
        prop_assert_eq!(a["label"].as_tokens(), Some(expected_label.as_str()));
    }
}

#[test]
fn extractors_run_only_on_access() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let info = DataInfo::new().field("v", move |r: &f64| {
        c.fetch_add(1, Ordering::SeqCst);
        Array::vector(vec![*r]).map_err(BoxError::from)
    });
    let ds = build_dataset(vec![1.0, 2.0, 3.0], info, None).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 0);
    ds.get_item(1).unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 1);
}

#[test]
fn errors() {
    let ds = squares(3);
    assert!(matches!(ds.get_item(3), Err(Error::IndexError { index: 3, len: 3 })));
    assert!(matches!(ds.get_by_id("zzz"), Err(Error::UnknownId(_))));

    let info = DataInfo::new().field("v", |r: &f64| Array::vector(vec![*r]).map_err(BoxError::from));
    let dup = build_dataset(vec![1.0, 2.0], info.clone(), Some(vec!["a".into(), "a".into()]));
    assert!(matches!(dup, Err(Error::DuplicateKey { .. })));

    let ds = build_dataset(vec![f64::NAN], info, None).unwrap();
    assert!(matches!(ds.get_item(0), Err(Error::ExtractionError { ref field, .. }) if field == "v"));

    let failing = DataInfo::new().field("v", |_: &f64| Err::<Array, BoxError>("boom".into()));
    let ds = build_dataset(vec![0.0], failing, None).unwrap();
    let err = ds.get_item(0).unwrap_err().to_string();
    assert!(err.contains("boom") && err.contains('v'));
}

#[test]
fn data_directory_round_trip_preserves_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let dd = generate_toy_corpus(&ToyCorpusSpec::new(6, 3, 4), tmp.path().join("src")).unwrap();
    let ds = from_data_directory(&dd, default_audio_loader()).unwrap();
    assert_eq!(ds.len(), 6);
    let mut ids = ds.ids();
    ids.sort();
    assert_eq!(ids, ds.ids());

    let out = tmp.path().join("copy");
    to_data_directory(&ds, &out, 16000).unwrap();
    let reloaded = load_data_directory(&out).unwrap();
    let ds2 = from_data_directory(&reloaded, default_audio_loader()).unwrap();
    assert_eq!(ds2.ids(), ds.ids());
    for i in 0..ds.len() {
        // Samples were 16-bit quantized once already, so the copy is exact.
        assert_eq!(ds.get_item(i).unwrap(), ds2.get_item(i).unwrap());
        let wav = read_wav(&dd.wav[ds.id(i)]).unwrap();
        assert_eq!(
            ds.get_item(i).unwrap()["speech"].as_array().unwrap().data(),
            &wav.samples[..]
        );
    }
}

#[test]
fn segments_are_trimmed_by_the_loader() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec.wav");
    let samples: Vec<f64> = (0..16000).map(|i| (i as f64 / 16000.0) - 0.5).collect();
    write_wav(
        &rec,
        &Waveform {
            samples,
            sample_rate: 16000,
        },
    )
    .unwrap();

    let mut dd = DataDirectory::default();
    dd.wav.insert("rec".into(), rec.to_string_lossy().into_owned());
    let seg = |a, b| Segment {
        recording_id: "rec".into(),
        start_sec: a,
        end_sec: b,
    };
    dd.segments = Some([("u1".to_string(), seg(0.25, 0.5)), ("u2".to_string(), seg(0.5, 2.0))].into());
    for u in ["u1", "u2"] {
        dd.text.insert(u.into(), "x".into());
        dd.utt2spk.insert(u.into(), "s".into());
    }
    dd.spk2utt = invert_speaker_map(&dd.utt2spk);

    let ds = from_data_directory(&dd, default_audio_loader()).unwrap();
    let full = read_wav(&rec).unwrap().samples;
    let u1 = ds.get_by_id("u1").unwrap();
    assert_eq!(u1["speech"].as_array().unwrap().data(), &full[4000..8000]);
    // Segments running past the end are clipped to the recording.
    let u2 = ds.get_by_id("u2").unwrap();
    assert_eq!(u2["speech"].as_array().unwrap().data(), &full[8000..]);
}

#[test]
fn injected_loader_replaces_file_access() {
    let mut dd = DataDirectory::default();
    dd.wav.insert("a".into(), "ignored".into());
    dd.text.insert("a".into(), "hi".into());
    dd.utt2spk.insert("a".into(), "s".into());
    dd.spk2utt = invert_speaker_map(&dd.utt2spk);
    let loader: AudioLoader = Arc::new(|src, _| {
        Ok(Waveform {
            samples: vec![src.len() as f64 / 100.0; 3],
            sample_rate: 16000,
        })
    });
    let ds = from_data_directory(&dd, loader).unwrap();
    assert_eq!(ds.get_item(0).unwrap()["speech"].as_array().unwrap().data(), &[0.07; 3]);
}
