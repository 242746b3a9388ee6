//! Dataset statistics: per-utterance shapes for length-aware batching and
//! mergeable sum/sum-of-squares aggregates for global mean/variance
//! normalization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FieldValue};
use crate::error::{Error, Result};
use crate::manifest::parse_scp_text;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRecord {
    pub id: String,
    pub dims: BTreeMap<String, Vec<usize>>,
}

impl ShapeRecord {
    /// Element count summed over all fields.
    pub fn numel(&self) -> usize {
        self.dims.values().map(|d| d.iter().product::<usize>()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub field_name: String,
    pub count: u64,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl FeatureStats {
    pub fn zeros(field_name: &str, dim: usize) -> Self {
        Self {
            field_name: field_name.to_string(),
            count: 0,
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    /// Accumulates a `frames × dim` row-major block.
    fn accumulate(&mut self, frames: usize, data: &[f64]) {
        let dim = self.dim();
        for row in data.chunks_exact(dim).take(frames) {
            for ((s, q), &x) in self.sum.iter_mut().zip(self.sumsq.iter_mut()).zip(row) {
                *s += x;
                *q += x * x;
            }
        }
        self.count += frames as u64;
    }
}

pub type StatsMap = BTreeMap<String, FeatureStats>;

fn accumulate_range(
    ds: &dyn Dataset,
    fields: &[String],
    range: std::ops::Range<usize>,
) -> Result<(Vec<ShapeRecord>, StatsMap)> {
    let mut shapes = Vec::with_capacity(range.len());
    let mut stats = StatsMap::new();
    for i in range {
        let id = ds.id(i).to_string();
        let item = ds.get_item(i)?;
        let mut dims = BTreeMap::new();
        for field in fields {
            let value = item
                .get(field)
                .ok_or_else(|| Error::SchemaError(format!("item `{id}` has no field `{field}`")))?;
            match value {
                FieldValue::Tokens(t) => {
                    let n = t.split_whitespace().count();
                    if n == 0 {
                        return Err(Error::SchemaError(format!("token field `{field}` of `{id}` is empty")));
                    }
                    dims.insert(field.clone(), vec![n]);
                }
                FieldValue::Array(a) => {
                    let shape = a.shape();
                    let (frames, dim) = match *shape {
                        [n] => (n, 1),
                        [n, d] => (n, d),
                        _ => {
                            return Err(Error::UnsupportedShape {
                                field: field.clone(),
                                shape: shape.to_vec(),
                            })
                        }
                    };
                    let entry = stats
                        .entry(field.clone())
                        .or_insert_with(|| FeatureStats::zeros(field, dim));
                    if entry.dim() != dim {
                        return Err(Error::SchemaError(format!(
                            "field `{field}` of `{id}` has dim {dim}, expected {}",
                            entry.dim()
                        )));
                    }
                    entry.accumulate(frames, a.data());
                    dims.insert(field.clone(), shape.to_vec());
                }
            }
        }
        shapes.push(ShapeRecord { id, dims });
    }
    Ok((shapes, stats))
}

/// Single pass over `ds` recording shapes of `fields` and accumulating
/// frame statistics for numeric fields.
pub fn collect_stats(ds: &dyn Dataset, fields: &[String]) -> Result<(Vec<ShapeRecord>, StatsMap)> {
    accumulate_range(ds, fields, 0..ds.len())
}

/// Splits `ds` into `num_shards` contiguous shards processed in parallel
/// and merged in shard order.
pub fn collect_stats_sharded(
    ds: &dyn Dataset,
    fields: &[String],
    num_shards: usize,
) -> Result<(Vec<ShapeRecord>, StatsMap)> {
    let n = ds.len();
    let num_shards = num_shards.clamp(1, n.max(1));
    let bounds: Vec<_> = (0..num_shards)
        .map(|s| (s * n / num_shards)..((s + 1) * n / num_shards))
        .collect();
    let parts = bounds
        .into_par_iter()
        .map(|r| accumulate_range(ds, fields, r))
        .collect::<Result<Vec<_>>>()?;
    let mut shapes = Vec::with_capacity(n);
    let mut stats = StatsMap::new();
    for (part_shapes, part_stats) in parts {
        shapes.extend(part_shapes);
        merge_into(&mut stats, part_stats)?;
    }
    Ok((shapes, stats))
}

pub fn merge_into(acc: &mut StatsMap, other: StatsMap) -> Result<()> {
    for (field, s) in other {
        let merged = match acc.remove(&field) {
            Some(prev) => merge_stats(&prev, &s)?,
            None => s,
        };
        acc.insert(field, merged);
    }
    Ok(())
}

pub fn merge_stats(a: &FeatureStats, b: &FeatureStats) -> Result<FeatureStats> {
    if a.field_name != b.field_name {
        return Err(Error::SchemaError(format!(
            "cannot merge stats of `{}` with `{}`",
            a.field_name, b.field_name
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::SchemaError(format!(
            "cannot merge stats of dim {} with dim {}",
            a.dim(),
            b.dim()
        )));
    }
    let add = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + q).collect();
    Ok(FeatureStats {
        field_name: a.field_name.clone(),
        count: a.count + b.count,
        sum: add(&a.sum, &b.sum),
        sumsq: add(&a.sumsq, &b.sumsq),
    })
}

/// Global mean/std normalizer for one feature field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Normalizes a `frames × dim` row-major block in place.
    pub fn apply(&self, data: &mut [f64]) {
        let dim = self.mean.len();
        for row in data.chunks_exact_mut(dim) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// mean = sum/count, std = sqrt(max(sumsq/count - mean², eps)).
pub fn finalize_normalizer(s: &FeatureStats, eps: f64) -> Result<Normalizer> {
    if s.count == 0 {
        return Err(Error::EmptyStats);
    }
    let n = s.count as f64;
    let mean: Vec<f64> = s.sum.iter().map(|x| x / n).collect();
    let std = s
        .sumsq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(eps).sqrt())
        .collect();
    Ok(Normalizer { mean, std })
}

/// `(id, dims)` pairs of one field, as stored in a shape file.
pub type ShapeLines = Vec<(String, Vec<usize>)>;

pub fn shapes_for_field(records: &[ShapeRecord], field: &str) -> ShapeLines {
    records
        .iter()
        .filter_map(|r| r.dims.get(field).map(|d| (r.id.clone(), d.clone())))
        .collect()
}

/// Reassembles per-field shape files into records, ordered by id.
pub fn records_from_fields(per_field: &BTreeMap<String, ShapeLines>) -> Vec<ShapeRecord> {
    let mut by_id: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (field, lines) in per_field {
        for (id, dims) in lines {
            by_id.entry(id.clone()).or_default().insert(field.clone(), dims.clone());
        }
    }
    by_id.into_iter().map(|(id, dims)| ShapeRecord { id, dims }).collect()
}

pub fn render_shape_file(records: &[(String, Vec<usize>)]) -> Result<String> {
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (i, (id, dims)) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1].0 == *id {
            return Err(Error::DuplicateKey {
                key: id.clone(),
                line: i + 1,
            });
        }
        let joined = dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        out.push_str(&format!("{id} {joined}\n"));
    }
    Ok(out)
}

pub fn parse_shape_file(content: &str) -> Result<ShapeLines> {
    let pairs = parse_scp_text(content)?;
    let mut out = Vec::with_capacity(pairs.len());
    for (line, (id, value)) in pairs.into_iter().enumerate() {
        let dims = value
            .split(',')
            .map(|d| d.trim().parse::<usize>().ok().filter(|&d| d >= 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::MalformedLine {
                line: line + 1,
                reason: format!("bad dims `{value}`"),
            })?;
        out.push((id, dims));
    }
    Ok(out)
}

pub fn write_shape_file(records: &[(String, Vec<usize>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render_shape_file(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_shape_file(path: impl AsRef<Path>) -> Result<ShapeLines> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_shape_file(&content)
}

pub fn write_stats_file(stats: &StatsMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(stats).map_err(|e| Error::SchemaError(e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_stats_file(path: impl AsRef<Path>) -> Result<StatsMap> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&content).map_err(|e| Error::MalformedLine {
        line: e.line(),
        reason: e.to_string(),
    })
}
