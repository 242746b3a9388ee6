//! Map-style datasets built from named extractor functions.
//!
//! An [`EzDataset`] pairs an indexable [`Source`] with a [`DataInfo`]: an
//! ordered list of `(field name, extractor)` pairs. Nothing is computed at
//! construction time; each [`Dataset::get_item`] call fetches one source
//! record and runs every extractor on that same record.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::audio::{self, Waveform};
use crate::error::{BoxError, Error, Result};
use crate::manifest::{self, DataDirectory, Segment, Utterance};

/// Dense real array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::SchemaError(format!(
                "array shape {shape:?} must have positive dimensions"
            )));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::SchemaError(format!(
                "shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Array(Array),
    Tokens(String),
}

impl FieldValue {
    pub fn as_array(&self) -> Option<&Array> {
        match self {
            FieldValue::Array(a) => Some(a),
            FieldValue::Tokens(_) => None,
        }
    }

    pub fn as_tokens(&self) -> Option<&str> {
        match self {
            FieldValue::Tokens(t) => Some(t),
            FieldValue::Array(_) => None,
        }
    }
}

impl From<Array> for FieldValue {
    fn from(a: Array) -> Self {
        FieldValue::Array(a)
    }
}

impl From<String> for FieldValue {
    fn from(s: String) -> Self {
        FieldValue::Tokens(s)
    }
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        FieldValue::Tokens(s.to_string())
    }
}

/// One materialized example: field name to value.
pub type Item = BTreeMap<String, FieldValue>;

pub type Extractor<R> = Arc<dyn Fn(&R) -> std::result::Result<FieldValue, BoxError> + Send + Sync>;

/// Ordered mapping from field name to extractor.
pub struct DataInfo<R> {
    fields: Vec<(String, Extractor<R>)>,
}

impl<R> Clone for DataInfo<R> {
    fn clone(&self) -> Self {
        Self {
            fields: self.fields.clone(),
        }
    }
}

impl<R> Default for DataInfo<R> {
    fn default() -> Self {
        Self { fields: Vec::new() }
    }
}

impl<R> fmt::Debug for DataInfo<R> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl<R> DataInfo<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn field<F, V>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&R) -> std::result::Result<V, BoxError> + Send + Sync + 'static,
        V: Into<FieldValue>,
    {
        self.fields
            .push((name.to_string(), Arc::new(move |r| f(r).map(Into::into))));
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(n, _)| n.as_str())
    }

    fn check(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::SchemaError("data info needs at least one field".into()));
        }
        let mut seen = HashSet::new();
        for (name, _) in &self.fields {
            if name.is_empty() {
                return Err(Error::SchemaError("field names must be non-empty".into()));
            }
            if !seen.insert(name) {
                return Err(Error::SchemaError(format!("duplicate field `{name}`")));
            }
        }
        Ok(())
    }
}

/// Indexable collection with a known length.
pub trait Source: Send + Sync {
    type Record;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, index: usize) -> std::result::Result<Self::Record, BoxError>;
}

impl<T: Clone + Send + Sync> Source for Vec<T> {
    type Record = T;

    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> std::result::Result<T, BoxError> {
        self.as_slice()
            .get(index)
            .cloned()
            .ok_or_else(|| format!("index {index} out of range").into())
    }
}

/// Object-safe view used by the stats stage, samplers, and the trainer.
pub trait Dataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, index: usize) -> &str;

    fn index_of(&self, id: &str) -> Option<usize>;

    fn field_names(&self) -> Vec<String>;

    fn get_item(&self, index: usize) -> Result<Item>;

    fn get_by_id(&self, id: &str) -> Result<Item> {
        let index = self.index_of(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        self.get_item(index)
    }

    fn ids(&self) -> Vec<String> {
        (0..self.len()).map(|i| self.id(i).to_string()).collect()
    }
}

pub struct EzDataset<S: Source> {
    source: S,
    data_info: DataInfo<S::Record>,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
}

impl<S: Source> fmt::Debug for EzDataset<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EzDataset")
            .field("len", &self.ids.len())
            .field("fields", &self.data_info)
            .finish()
    }
}

/// Wraps `source` without invoking any extractor. Ids default to the
/// stringified indices.
pub fn build_dataset<S: Source>(
    source: S,
    data_info: DataInfo<S::Record>,
    ids: Option<Vec<String>>,
) -> Result<EzDataset<S>> {
    data_info.check()?;
    let len = source.len();
    let ids = match ids {
        Some(ids) => {
            if ids.len() != len {
                return Err(Error::SchemaError(format!(
                    "{} ids given for a source of length {len}",
                    ids.len()
                )));
            }
            ids
        }
        None => (0..len).map(|i| i.to_string()).collect(),
    };
    let mut positions = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if positions.insert(id.clone(), i).is_some() {
            return Err(Error::DuplicateKey {
                key: id.clone(),
                line: i + 1,
            });
        }
    }
    Ok(EzDataset {
        source,
        data_info,
        ids,
        positions,
    })
}

impl<S: Source> EzDataset<S> {
    pub fn source(&self) -> &S {
        &self.source
    }

    pub fn data_info(&self) -> &DataInfo<S::Record> {
        &self.data_info
    }
}

impl<S: Source> Dataset for EzDataset<S> {
    fn len(&self) -> usize {
        self.ids.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    fn field_names(&self) -> Vec<String> {
        self.data_info.names().map(str::to_string).collect()
    }

    fn get_item(&self, index: usize) -> Result<Item> {
        let len = self.len();
        if index >= len {
            return Err(Error::IndexError { index, len });
        }
        let id = &self.ids[index];
        let record = self.source.get(index).map_err(|cause| Error::ExtractionError {
            field: "<source>".into(),
            id: id.clone(),
            cause,
        })?;
        let mut item = Item::new();
        for (name, extract) in &self.data_info.fields {
            let value = extract(&record).map_err(|cause| Error::ExtractionError {
                field: name.clone(),
                id: id.clone(),
                cause,
            })?;
            if let FieldValue::Array(a) = &value {
                if !a.is_finite() {
                    return Err(Error::ExtractionError {
                        field: name.clone(),
                        id: id.clone(),
                        cause: "non-finite value in array".into(),
                    });
                }
            }
            item.insert(name.clone(), value);
        }
        Ok(item)
    }
}

/// Loads the audio for a `wav.scp` value, trimmed to `segment` when given.
pub type AudioLoader = Arc<dyn Fn(&str, Option<&Segment>) -> std::result::Result<Waveform, BoxError> + Send + Sync>;

/// The loader used when none is injected: WAV files and `... |` commands.
pub fn default_audio_loader() -> AudioLoader {
    Arc::new(|src, seg| audio::load_segment(src, seg).map_err(Into::into))
}

pub type UtteranceDataset = EzDataset<Vec<Utterance>>;

/// Exposes a Kaldi data directory as a dataset with `speech` and `text`
/// fields, ids in sorted order.
pub fn from_data_directory(dd: &DataDirectory, audio_loader: AudioLoader) -> Result<UtteranceDataset> {
    let violations = manifest::validate_data_directory(dd);
    if !violations.is_empty() {
        return Err(Error::ValidationFailure(violations));
    }
    let utts = manifest::resolve_segments(dd);
    let ids = utts.iter().map(|u| u.id.clone()).collect();
    let info = DataInfo::new()
        .field("speech", move |u: &Utterance| {
            let wave = audio_loader(&u.audio_source, u.segment.as_ref())?;
            Ok::<_, BoxError>(Array::vector(wave.samples)?)
        })
        .field("text", |u: &Utterance| Ok::<_, BoxError>(u.transcript.clone()));
    build_dataset(utts, info, Some(ids))
}

/// Dumps a dataset with `speech` and `text` fields as a data directory with
/// 16-bit PCM WAV files under `out_path/wav/`.
pub fn to_data_directory(ds: &dyn Dataset, out_path: impl AsRef<Path>, sample_rate_hz: u32) -> Result<DataDirectory> {
    if sample_rate_hz == 0 {
        return Err(Error::SchemaError("sample rate must be positive".into()));
    }
    let names = ds.field_names();
    for required in ["speech", "text"] {
        if !names.iter().any(|n| n == required) {
            return Err(Error::SchemaError(format!("dataset lacks required field `{required}`")));
        }
    }
    let out = out_path.as_ref();
    let wav_dir = out.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut utts = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let id = ds.id(i).to_string();
        let item = ds.get_item(i)?;
        let speech = item["speech"]
            .as_array()
            .filter(|a| a.shape().len() == 1)
            .ok_or_else(|| Error::SchemaError(format!("`speech` of `{id}` is not a waveform")))?;
        let text = item["text"]
            .as_tokens()
            .ok_or_else(|| Error::SchemaError(format!("`text` of `{id}` is not a string")))?;
        let speaker_id = match item.get("speaker").and_then(FieldValue::as_tokens) {
            Some(spk) => spk.to_string(),
            None => id.clone(),
        };
        let path = wav_dir.join(format!("{id}.wav"));
        audio::write_wav(
            &path,
            &Waveform {
                samples: speech.data().to_vec(),
                sample_rate: sample_rate_hz,
            },
        )?;
        utts.push(Utterance {
            id,
            audio_source: path.to_string_lossy().into_owned(),
            speaker_id,
            transcript: text.to_string(),
            segment: None,
        });
    }
    let dd = DataDirectory::from_utterances(&utts)?;
    manifest::write_data_directory(&dd, out)?;
    Ok(dd)
}
