//! Kaldi-style data directories: `wav.scp`, `text`, `utt2spk`, `spk2utt`
//! and the optional `segments` file.
//!
//! Every file is line oriented. The first whitespace-delimited token of a
//! line is its key and the remainder (trimmed) is its value, so pipe
//! commands such as `sox a.flac -t wav - |` survive as `wav.scp` values.
//! Files are written with keys in sorted order, one record per line, a
//! single space separator and a trailing newline.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const WAV_SCP: &str = "wav.scp";
pub const TEXT: &str = "text";
pub const UTT2SPK: &str = "utt2spk";
pub const SPK2UTT: &str = "spk2utt";
pub const SEGMENTS: &str = "segments";

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub recording_id: String,
    pub start_sec: f64,
    pub end_sec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// File path or pipe command, exactly as found in `wav.scp`.
    pub audio_source: String,
    pub speaker_id: String,
    pub transcript: String,
    pub segment: Option<Segment>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataDirectory {
    pub wav: BTreeMap<String, String>,
    pub text: BTreeMap<String, String>,
    pub utt2spk: BTreeMap<String, String>,
    pub spk2utt: BTreeMap<String, Vec<String>>,
    pub segments: Option<BTreeMap<String, Segment>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViolationKind {
    /// Utterance has a transcript or speaker but no audio (or segment).
    MissingAudio,
    MissingText,
    MissingSpeaker,
    /// `spk2utt` is not the exact sorted inverse of `utt2spk`.
    SpeakerMapMismatch,
    BadSegment,
    /// Segment refers to a recording absent from `wav.scp`.
    UnknownRecording,
    /// Empty key or key containing whitespace.
    BadId,
    /// Value that cannot be stored on a single manifest line.
    BadValue,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub kind: ViolationKind,
    pub id: String,
    pub message: String,
}

impl Violation {
    fn new(kind: ViolationKind, id: &str, message: impl Into<String>) -> Self {
        Self {
            kind,
            id: id.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {}: {}", self.kind, self.id, self.message)
    }
}

/// Parses `.scp`-style text into `(key, value)` pairs in file order.
pub fn parse_scp_text(content: &str) -> Result<Vec<(String, String)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.find(char::is_whitespace) {
            Some(pos) => (&line[..pos], line[pos..].trim()),
            None => {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: format!("key `{line}` has no value"),
                })
            }
        };
        if !seen.insert(key.to_string()) {
            return Err(Error::DuplicateKey {
                key: key.to_string(),
                line: line_no,
            });
        }
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

/// Like [`parse_scp_text`] but rejects invalid UTF-8 with the offending
/// line number.
pub fn parse_scp_bytes(bytes: &[u8]) -> Result<Vec<(String, String)>> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_scp_text(text),
        Err(e) => {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            Err(Error::MalformedLine {
                line,
                reason: "invalid UTF-8".into(),
            })
        }
    }
}

pub fn invert_speaker_map(utt2spk: &BTreeMap<String, String>) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (utt, spk) in utt2spk {
        out.entry(spk.clone()).or_default().push(utt.clone());
    }
    // BTreeMap iteration already yields utterances sorted, but keep the
    // post-condition explicit for callers that build the map by hand.
    for ids in out.values_mut() {
        ids.sort();
    }
    out
}

fn read_manifest(dir: &Path, name: &str) -> Result<Option<Vec<(String, String)>>> {
    let path = dir.join(name);
    match fs::read(&path) {
        Ok(bytes) => parse_scp_bytes(&bytes).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn require(dir: &Path, name: &str) -> Result<BTreeMap<String, String>> {
    read_manifest(dir, name)?
        .map(|pairs| pairs.into_iter().collect())
        .ok_or_else(|| Error::MissingManifest(name.to_string()))
}

fn parse_segment_value(line: usize, value: &str) -> Result<Segment> {
    let fields: Vec<&str> = value.split_whitespace().collect();
    let malformed = |reason: &str| Error::MalformedLine {
        line,
        reason: reason.to_string(),
    };
    if fields.len() != 3 {
        return Err(malformed("segments line needs <id> <recording> <start> <end>"));
    }
    let start_sec = fields[1].parse::<f64>().map_err(|_| malformed("bad segment start"))?;
    let end_sec = fields[2].parse::<f64>().map_err(|_| malformed("bad segment end"))?;
    Ok(Segment {
        recording_id: fields[0].to_string(),
        start_sec,
        end_sec,
    })
}

/// Loads and validates the data directory at `path`.
pub fn load_data_directory(path: impl AsRef<Path>) -> Result<DataDirectory> {
    let dir = path.as_ref();
    let wav = require(dir, WAV_SCP)?;
    let text = require(dir, TEXT)?;
    let utt2spk = require(dir, UTT2SPK)?;

    let spk2utt = match read_manifest(dir, SPK2UTT)? {
        Some(pairs) => pairs
            .into_iter()
            .map(|(spk, rest)| (spk, rest.split_whitespace().map(str::to_string).collect()))
            .collect(),
        None => invert_speaker_map(&utt2spk),
    };

    let segments = match read_manifest(dir, SEGMENTS)? {
        Some(pairs) => {
            let mut map = BTreeMap::new();
            for (idx, (key, value)) in pairs.into_iter().enumerate() {
                // Line numbers only count non-empty lines here; close enough
                // for a diagnostic.
                let seg = parse_segment_value(idx + 1, &value)?;
                map.insert(key, seg);
            }
            Some(map)
        }
        None => None,
    };

    let dd = DataDirectory {
        wav,
        text,
        utt2spk,
        spk2utt,
        segments,
    };
    let violations = validate_data_directory(&dd);
    if violations.is_empty() {
        Ok(dd)
    } else {
        Err(Error::ValidationFailure(violations))
    }
}

fn bad_key(key: &str) -> bool {
    key.is_empty() || key.chars().any(char::is_whitespace)
}

fn bad_value(value: &str) -> bool {
    value.is_empty() || value.trim() != value || value.contains(['\n', '\r'])
}

/// Checks every DataDirectory invariant and reports all violations.
pub fn validate_data_directory(dd: &DataDirectory) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();

    let utt_ids: BTreeSet<&String> = match &dd.segments {
        Some(segs) => segs.keys().collect(),
        None => dd.wav.keys().collect(),
    };
    let text_ids: BTreeSet<&String> = dd.text.keys().collect();
    let spk_ids: BTreeSet<&String> = dd.utt2spk.keys().collect();

    for key in dd
        .wav
        .keys()
        .chain(dd.text.keys())
        .chain(dd.utt2spk.keys())
        .chain(dd.spk2utt.keys())
        .chain(dd.segments.iter().flat_map(|s| s.keys()))
        .collect::<BTreeSet<_>>()
    {
        if bad_key(key) {
            out.push(Violation::new(BadId, key, "id is empty or contains whitespace"));
        }
    }

    for (id, v) in &dd.wav {
        if bad_value(v) {
            out.push(Violation::new(
                BadValue,
                id,
                "audio source is empty or not a single trimmed line",
            ));
        }
    }
    for (id, v) in &dd.text {
        if bad_value(v) {
            out.push(Violation::new(
                BadValue,
                id,
                "transcript is empty or not a single trimmed line",
            ));
        }
    }
    for (id, spk) in &dd.utt2spk {
        if bad_key(spk) {
            out.push(Violation::new(
                BadId,
                id,
                format!("speaker id `{spk}` is empty or contains whitespace"),
            ));
        }
    }

    let all: BTreeSet<&String> = utt_ids.iter().chain(&text_ids).chain(&spk_ids).copied().collect();
    for id in all {
        if !utt_ids.contains(id) {
            let what = if dd.segments.is_some() { "segments" } else { WAV_SCP };
            out.push(Violation::new(MissingAudio, id, format!("no entry in {what}")));
        }
        if !text_ids.contains(id) {
            out.push(Violation::new(MissingText, id, "no entry in text"));
        }
        if !spk_ids.contains(id) {
            out.push(Violation::new(MissingSpeaker, id, "no entry in utt2spk"));
        }
    }

    let expected = invert_speaker_map(&dd.utt2spk);
    for spk in expected.keys().chain(dd.spk2utt.keys()).collect::<BTreeSet<_>>() {
        if expected.get(spk) != dd.spk2utt.get(spk) {
            out.push(Violation::new(
                SpeakerMapMismatch,
                spk,
                "spk2utt entry is not the sorted inverse of utt2spk",
            ));
        }
    }

    if let Some(segs) = &dd.segments {
        for (id, seg) in segs {
            let ok = seg.start_sec.is_finite()
                && seg.end_sec.is_finite()
                && seg.start_sec >= 0.0
                && seg.start_sec < seg.end_sec;
            if !ok {
                out.push(Violation::new(
                    BadSegment,
                    id,
                    format!("segment [{}, {}) is empty or negative", seg.start_sec, seg.end_sec),
                ));
            }
            if !dd.wav.contains_key(&seg.recording_id) {
                out.push(Violation::new(
                    UnknownRecording,
                    id,
                    format!("recording `{}` not in {WAV_SCP}", seg.recording_id),
                ));
            }
        }
    }

    out.sort();
    out
}

fn render<'a, I>(records: I) -> String
where
    I: IntoIterator<Item = (&'a String, String)>,
{
    let mut s = String::new();
    for (k, v) in records {
        s.push_str(k);
        s.push(' ');
        s.push_str(&v);
        s.push('\n');
    }
    s
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes the manifests of `dd` under `path`, creating the directory.
pub fn write_data_directory(dd: &DataDirectory, path: impl AsRef<Path>) -> Result<()> {
    let dir = path.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(dir, WAV_SCP, &render(dd.wav.iter().map(|(k, v)| (k, v.clone()))))?;
    write_file(dir, TEXT, &render(dd.text.iter().map(|(k, v)| (k, v.clone()))))?;
    write_file(dir, UTT2SPK, &render(dd.utt2spk.iter().map(|(k, v)| (k, v.clone()))))?;
    write_file(dir, SPK2UTT, &render(dd.spk2utt.iter().map(|(k, v)| (k, v.join(" ")))))?;
    match &dd.segments {
        Some(segs) => write_file(
            dir,
            SEGMENTS,
            &render(
                segs.iter()
                    .map(|(k, s)| (k, format!("{} {} {}", s.recording_id, s.start_sec, s.end_sec))),
            ),
        )?,
        None => {
            let seg_path = dir.join(SEGMENTS);
            if seg_path.exists() {
                fs::remove_file(&seg_path).map_err(|e| Error::io(seg_path, e))?;
            }
        }
    }
    Ok(())
}

/// Expands the directory into one [`Utterance`] per segment, or per
/// `wav.scp` entry when there is no `segments` file. Sorted by id.
pub fn resolve_segments(dd: &DataDirectory) -> Vec<Utterance> {
    let lookup = |id: &str| {
        (
            dd.utt2spk.get(id).cloned().unwrap_or_default(),
            dd.text.get(id).cloned().unwrap_or_default(),
        )
    };
    match &dd.segments {
        Some(segs) => segs
            .iter()
            .map(|(id, seg)| {
                let (speaker_id, transcript) = lookup(id);
                Utterance {
                    id: id.clone(),
                    audio_source: dd.wav.get(&seg.recording_id).cloned().unwrap_or_default(),
                    speaker_id,
                    transcript,
                    segment: Some(seg.clone()),
                }
            })
            .collect(),
        None => dd
            .wav
            .iter()
            .map(|(id, src)| {
                let (speaker_id, transcript) = lookup(id);
                Utterance {
                    id: id.clone(),
                    audio_source: src.clone(),
                    speaker_id,
                    transcript,
                    segment: None,
                }
            })
            .collect(),
    }
}

impl DataDirectory {
    /// Builds a directory from utterances. Either all or none of them must
    /// carry a segment.
    pub fn from_utterances(utts: &[Utterance]) -> Result<Self> {
        let segmented = utts.iter().filter(|u| u.segment.is_some()).count();
        if segmented != 0 && segmented != utts.len() {
            return Err(Error::SchemaError(
                "either every utterance or none must carry a segment".into(),
            ));
        }
        let mut dd = DataDirectory::default();
        let mut segments = BTreeMap::new();
        for (line, u) in utts.iter().enumerate() {
            if dd.text.contains_key(&u.id) {
                return Err(Error::DuplicateKey {
                    key: u.id.clone(),
                    line: line + 1,
                });
            }
            match &u.segment {
                Some(seg) => {
                    dd.wav.insert(seg.recording_id.clone(), u.audio_source.clone());
                    segments.insert(u.id.clone(), seg.clone());
                }
                None => {
                    dd.wav.insert(u.id.clone(), u.audio_source.clone());
                }
            }
            dd.text.insert(u.id.clone(), u.transcript.clone());
            dd.utt2spk.insert(u.id.clone(), u.speaker_id.clone());
        }
        dd.spk2utt = invert_speaker_map(&dd.utt2spk);
        if segmented > 0 {
            dd.segments = Some(segments);
        }
        Ok(dd)
    }

    pub fn num_utterances(&self) -> usize {
        match &self.segments {
            Some(s) => s.len(),
            None => self.wav.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DataDirectory {
        let utts = [("u1", "s1"), ("u2", "s1"), ("u3", "s2")]
            .iter()
            .map(|(u, s)| Utterance {
                id: u.to_string(),
                audio_source: format!("/d/{u}.wav"),
                speaker_id: s.to_string(),
                transcript: format!("hello {u}"),
                segment: None,
            })
            .collect::<Vec<_>>();
        DataDirectory::from_utterances(&utts).unwrap()
    }

    #[test]
    fn scp_single_and_empty() {
        assert_eq!(
            parse_scp_text("utt1 /d/a.wav\n").unwrap(),
            vec![("utt1".to_string(), "/d/a.wav".to_string())]
        );
        assert!(parse_scp_text("").unwrap().is_empty());
    }

    #[test]
    fn scp_pipe_values_keep_spaces() {
        let parsed = parse_scp_text("u1 cat a.flac |\nu2 b.wav\n").unwrap();
        assert_eq!(parsed[0], ("u1".into(), "cat a.flac |".into()));
        assert_eq!(parsed[1], ("u2".into(), "b.wav".into()));
    }

    #[test]
    fn scp_errors() {
        match parse_scp_text("a x\nb y\na z\n") {
            Err(Error::DuplicateKey { key, line }) => {
                assert_eq!(key, "a");
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_scp_text("a x\nlonely\n"),
            Err(Error::MalformedLine { line: 2, .. })
        ));
        assert!(matches!(
            parse_scp_bytes(b"a x\nb \xff\xfe\n"),
            Err(Error::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn invert_small() {
        let m: BTreeMap<_, _> = [("u2", "s1"), ("u1", "s1")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        let inv = invert_speaker_map(&m);
        assert_eq!(inv["s1"], vec!["u1".to_string(), "u2".to_string()]);
        assert!(invert_speaker_map(&BTreeMap::new()).is_empty());
    }

    #[test]
    fn validate_consistent_and_broken() {
        let dd = toy();
        assert!(validate_data_directory(&dd).is_empty());

        let mut missing = dd.clone();
        missing.wav.remove("u2");
        let v = validate_data_directory(&missing);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::MissingAudio);
        assert_eq!(v[0].id, "u2");

        let mut seg = dd.clone();
        let mut segs = BTreeMap::new();
        for id in ["u1", "u2", "u3"] {
            segs.insert(
                id.to_string(),
                Segment {
                    recording_id: "u1".into(),
                    start_sec: 1.0,
                    end_sec: if id == "u2" { 1.0 } else { 2.0 },
                },
            );
        }
        seg.segments = Some(segs);
        let v = validate_data_directory(&seg);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::BadSegment);
        assert_eq!(v[0].id, "u2");
    }

    #[test]
    fn validate_collects_everything() {
        let mut dd = toy();
        dd.text.remove("u1");
        dd.utt2spk.insert("u3".into(), "s1".into());
        dd.wav.insert("bad id".into(), "x".into());
        let kinds: BTreeSet<_> = validate_data_directory(&dd).iter().map(|v| v.kind).collect();
        assert!(kinds.contains(&ViolationKind::MissingText));
        assert!(kinds.contains(&ViolationKind::SpeakerMapMismatch));
        assert!(kinds.contains(&ViolationKind::BadId));
    }

    #[test]
    fn load_write_roundtrip_and_missing_file() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dd = toy();
        dd.wav.insert("u3".into(), "sox x.flac -t wav - |".into());
        write_data_directory(&dd, tmp.path()).unwrap();
        let back = load_data_directory(tmp.path()).unwrap();
        assert_eq!(back, dd);
        assert_eq!(back.wav.len(), 3);
        assert_eq!(back.spk2utt.len(), 2);
        assert_eq!(
            fs::read_to_string(tmp.path().join(WAV_SCP)).unwrap(),
            "u1 /d/u1.wav\nu2 /d/u2.wav\nu3 sox x.flac -t wav - |\n"
        );

        fs::remove_file(tmp.path().join(SPK2UTT)).unwrap();
        assert_eq!(load_data_directory(tmp.path()).unwrap(), dd);

        fs::remove_file(tmp.path().join(TEXT)).unwrap();
        match load_data_directory(tmp.path()) {
            Err(Error::MissingManifest(name)) => assert_eq!(name, "text"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dd_writes_four_empty_files() {
        let tmp = tempfile::tempdir().unwrap();
        write_data_directory(&DataDirectory::default(), tmp.path()).unwrap();
        for name in [WAV_SCP, TEXT, UTT2SPK, SPK2UTT] {
            assert_eq!(fs::read(tmp.path().join(name)).unwrap(), b"");
        }
        assert!(!tmp.path().join(SEGMENTS).exists());
        assert_eq!(load_data_directory(tmp.path()).unwrap(), DataDirectory::default());
    }

    #[test]
    fn resolve_with_and_without_segments() {
        let dd = toy();
        let utts = resolve_segments(&dd);
        assert_eq!(utts.len(), 3);
        assert!(utts.iter().all(|u| u.segment.is_none()));

        let seg_utts = vec![Utterance {
            id: "rec1-000".into(),
            audio_source: "/d/rec1.wav".into(),
            speaker_id: "s1".into(),
            transcript: "hi".into(),
            segment: Some(Segment {
                recording_id: "rec1".into(),
                start_sec: 0.0,
                end_sec: 1.5,
            }),
        }];
        let dd = DataDirectory::from_utterances(&seg_utts).unwrap();
        assert!(validate_data_directory(&dd).is_empty());
        let resolved = resolve_segments(&dd);
        assert_eq!(resolved, seg_utts);
        let seg = resolved[0].segment.as_ref().unwrap();
        assert_eq!((seg.start_sec, seg.end_sec), (0.0, 1.5));
    }
}
