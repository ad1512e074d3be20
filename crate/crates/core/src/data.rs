//! Synthetic two-domain datasets, stratified splitting, and CSV interchange.
//!
//! A domain is described by a [`ShiftSpec`]: a generative family plus an
//! affine transform (rotation and scale on the first two coordinates,
//! translation on all) applied to the noiseless class geometry before noise.
//! A source/target pair uses two specs sharing class count and width; the
//! source spec usually carries the identity transform. Every dataset
//! declares a clamp range derived from the noiseless supports padded by
//! four noise standard deviations, and all samples are clamped into it, so
//! attack budgets always have a valid input box to project into.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, RngSeed};
use crate::tensor::Tensor;

/// Radius of the circle the blob class centers sit on.
const CENTER_RADIUS: f64 = 2.0;
/// Noise tail kept inside the clamp box, in standard deviations.
const RANGE_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFamily {
    /// One isotropic gaussian blob per class, centers evenly spaced on a
    /// circle in the first two coordinates.
    GaussianBlobs,
    /// Two interleaved half-circle arcs; exactly two classes.
    TwoArcs,
}

/// Full description of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub family: DatasetFamily,
    pub classes: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub noise_sigma: f64,
    /// Rotation of the first two coordinates, radians.
    #[serde(default)]
    pub rotation: f64,
    /// Per-coordinate offset; empty means none, otherwise `input_dim` long.
    #[serde(default)]
    pub translation: Vec<f64>,
    /// Multiplier on the first two coordinates.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_input_dim() -> usize {
    2
}

fn default_scale() -> f64 {
    1.0
}

impl ShiftSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.classes < 2 {
            bad.push("dataset.classes must be at least 2".into());
        }
        if self.family == DatasetFamily::TwoArcs && self.classes != 2 {
            bad.push(format!(
                "two_arcs supports exactly 2 classes, got {}",
                self.classes
            ));
        }
        if self.samples_per_class == 0 {
            bad.push("dataset.samples_per_class must be positive".into());
        }
        if self.input_dim < 2 {
            bad.push("dataset.input_dim must be at least 2".into());
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            bad.push(format!(
                "dataset.noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !self.rotation.is_finite() {
            bad.push("dataset.rotation must be finite".into());
        }
        if !self.scale.is_finite() || self.scale <= 0.0 {
            bad.push(format!(
                "dataset.scale must be finite and positive, got {}",
                self.scale
            ));
        }
        if !self.translation.is_empty() && self.translation.len() != self.input_dim {
            bad.push(format!(
                "dataset.translation must be empty or {} long, got {}",
                self.input_dim,
                self.translation.len()
            ));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            bad.push("dataset.translation must be finite".into());
        }
        bad
    }

    fn ensure_valid(&self) -> Result<()> {
        let bad = self.validate();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// A labeled feature matrix plus the clamp range its values live in.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    /// Where the data came from; informational only.
    pub domain_tag: String,
    /// Global `(lo, hi)` over all coordinates; every value satisfies it.
    pub input_range: (f64, f64),
    pub class_count: usize,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }
}

/// Rotate and scale the first two coordinates, then translate everything.
fn apply_shift(spec: &ShiftSpec, p: &mut [f64]) {
    let (sin, cos) = spec.rotation.sin_cos();
    let (x, y) = (p[0], p[1]);
    p[0] = spec.scale * (cos * x - sin * y);
    p[1] = spec.scale * (sin * x + cos * y);
    for (d, v) in p.iter_mut().enumerate() {
        *v += spec.translation.get(d).copied().unwrap_or(0.0);
    }
}

fn blob_centers(spec: &ShiftSpec) -> Vec<Vec<f64>> {
    (0..spec.classes)
        .map(|c| {
            let angle = 2.0 * PI * c as f64 / spec.classes as f64;
            let mut p = vec![0.0; spec.input_dim];
            p[0] = CENTER_RADIUS * angle.cos();
            p[1] = CENTER_RADIUS * angle.sin();
            p
        })
        .collect()
}

/// Point on arc `class` at parameter `t` in `[0, pi)`.
fn arc_point(class: usize, t: f64, dim: usize) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    if class == 0 {
        p[0] = CENTER_RADIUS * t.cos();
        p[1] = CENTER_RADIUS * t.sin();
    } else {
        p[0] = CENTER_RADIUS - CENTER_RADIUS * t.cos();
        p[1] = CENTER_RADIUS / 2.0 - CENTER_RADIUS * t.sin();
    }
    p
}

/// Points whose axis-aligned bounding box covers the noiseless support:
/// the centers themselves for blobs, the corners of the arcs' bounding box
/// for arcs.
fn support_points(spec: &ShiftSpec) -> Vec<Vec<f64>> {
    match spec.family {
        DatasetFamily::GaussianBlobs => blob_centers(spec),
        DatasetFamily::TwoArcs => {
            let r = CENTER_RADIUS;
            [(-r, -r / 2.0), (-r, r), (2.0 * r, -r / 2.0), (2.0 * r, r)]
                .iter()
                .map(|&(x, y)| {
                    let mut p = vec![0.0; spec.input_dim];
                    p[0] = x;
                    p[1] = y;
                    p
                })
                .collect()
        }
    }
}

/// Per-coordinate clamp box: bounding box of the shifted noiseless support,
/// padded by [`RANGE_SIGMAS`] noise deviations.
fn noiseless_box(spec: &ShiftSpec) -> (Vec<f64>, Vec<f64>) {
    let mut pts = support_points(spec);
    for p in &mut pts {
        apply_shift(spec, p);
    }
    let pad = RANGE_SIGMAS * spec.noise_sigma;
    let mut lo = vec![f64::INFINITY; spec.input_dim];
    let mut hi = vec![f64::NEG_INFINITY; spec.input_dim];
    for p in &pts {
        for d in 0..spec.input_dim {
            lo[d] = lo[d].min(p[d] - pad);
            hi[d] = hi[d].max(p[d] + pad);
        }
    }
    (lo, hi)
}

fn generate(spec: &ShiftSpec, tag: &str, rng: &mut ChaCha8Rng) -> Result<DomainDataset> {
    spec.ensure_valid()?;
    let d = spec.input_dim;
    let n = spec.classes * spec.samples_per_class;
    let (lo, hi) = noiseless_box(spec);
    let centers = blob_centers(spec);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for _ in 0..spec.samples_per_class {
            let mut p = match spec.family {
                DatasetFamily::GaussianBlobs => {
                    let mut p = centers[c].clone();
                    apply_shift(spec, &mut p);
                    p
                }
                DatasetFamily::TwoArcs => {
                    let mut p = arc_point(c, rng.gen_range(0.0..PI), d);
                    apply_shift(spec, &mut p);
                    p
                }
            };
            for (dim, v) in p.iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.noise_sigma * z;
                *v = v.min(hi[dim]).max(lo[dim]);
            }
            data.extend_from_slice(&p);
            y.push(c);
        }
    }
    let range_lo = lo.iter().copied().fold(f64::INFINITY, f64::min);
    let range_hi = hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(DomainDataset {
        x: Tensor::new(vec![n, d], data)?,
        y,
        domain_tag: tag.to_string(),
        input_range: (range_lo, range_hi),
        class_count: spec.classes,
    })
}

/// Gaussian blob domain drawn from `spec` on the given stream.
pub fn gaussian_blobs(spec: &ShiftSpec, tag: &str, rng: &mut ChaCha8Rng) -> Result<DomainDataset> {
    if spec.family != DatasetFamily::GaussianBlobs {
        return Err(Error::config("gaussian_blobs called with a different family"));
    }
    generate(spec, tag, rng)
}

/// Two-arc domain drawn from `spec` on the given stream.
pub fn two_arcs(spec: &ShiftSpec, tag: &str, rng: &mut ChaCha8Rng) -> Result<DomainDataset> {
    if spec.family != DatasetFamily::TwoArcs {
        return Err(Error::config("two_arcs called with a different family"));
    }
    generate(spec, tag, rng)
}

/// Source and target domains on separate rng streams. The specs must agree
/// on class count and width. Both returned datasets carry the union of the
/// two clamp ranges so models and attacks see one shared input box.
pub fn make_domain_pair(
    spec_source: &ShiftSpec,
    spec_target: &ShiftSpec,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if spec_source.classes != spec_target.classes {
        return Err(Error::config(format!(
            "domain pair class counts differ: {} vs {}",
            spec_source.classes, spec_target.classes
        )));
    }
    if spec_source.input_dim != spec_target.input_dim {
        return Err(Error::config(format!(
            "domain pair widths differ: {} vs {}",
            spec_source.input_dim, spec_target.input_dim
        )));
    }
    let mut source = generate(
        spec_source,
        "source",
        &mut RngSeed::new(seed, streams::DATA_SOURCE).rng(),
    )?;
    let mut target = generate(
        spec_target,
        "target",
        &mut RngSeed::new(seed, streams::DATA_TARGET).rng(),
    )?;
    let lo = source.input_range.0.min(target.input_range.0);
    let hi = source.input_range.1.max(target.input_range.1);
    source.input_range = (lo, hi);
    target.input_range = (lo, hi);
    Ok((source, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                bad.push(format!("split.{name} must lie in [0, 1], got {v}"));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            bad.push(format!("split fractions must sum to 1, got {sum}"));
        }
        if !(self.train > 0.0) {
            bad.push("split.train must be positive".into());
        }
        bad
    }

    fn ensure_valid(&self) -> Result<()> {
        let bad = self.validate();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: DomainDataset,
    pub val: DomainDataset,
    pub test: DomainDataset,
}

/// Floor that forgives float noise around exact integers.
fn stable_floor(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.floor() as usize
    }
}

/// Exact integer quotas for `n` items under `fractions`: floor each target,
/// then hand the remaining units to the largest fractional parts, ties to
/// the earlier entry.
fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut quotas: Vec<usize> = targets.iter().map(|&t| stable_floor(t)).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = (targets[a] - quotas[a] as f64).max(0.0);
        let fb = (targets[b] - quotas[b] as f64).max(0.0);
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

/// Disjoint, exhaustive train/val/test partition with exact global sizes
/// (largest-remainder quotas) that keeps classes as balanced as floor
/// counts allow. Each class shuffles on its own rng stream, so the draw
/// for one class never depends on the others.
pub fn split(
    data: &DomainDataset,
    fractions: &SplitFractions,
    seed: u64,
) -> Result<DatasetSplits> {
    fractions.ensure_valid()?;
    if data.is_empty() {
        return Err(Error::EmptyData {
            context: "split".into(),
        });
    }
    let n = data.len();
    let quotas = largest_remainder(n, &[fractions.train, fractions.val, fractions.test]);
    let fracs = [fractions.train, fractions.val, fractions.test];
    let mut buckets: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut leftover = Vec::new();
    for c in 0..data.class_count {
        let mut idx: Vec<usize> = (0..n).filter(|&i| data.y[i] == c).collect();
        let nc = idx.len();
        let mut rng = RngSeed::new(seed, streams::SPLIT_BASE + c as u64).rng();
        idx.shuffle(&mut rng);
        let mut cursor = 0;
        for (b, &f) in fracs.iter().enumerate() {
            let take = stable_floor(f * nc as f64);
            buckets[b].extend_from_slice(&idx[cursor..cursor + take]);
            cursor += take;
        }
        leftover.extend_from_slice(&idx[cursor..]);
    }
    let mut cursor = 0;
    for (b, &quota) in quotas.iter().enumerate() {
        let deficit = quota - buckets[b].len();
        buckets[b].extend_from_slice(&leftover[cursor..cursor + deficit]);
        cursor += deficit;
    }
    debug_assert_eq!(cursor, leftover.len());

    let names = ["train", "val", "test"];
    let mut out = Vec::with_capacity(3);
    for (b, bucket) in buckets.iter_mut().enumerate() {
        bucket.sort_unstable();
        if bucket.is_empty() {
            log::warn!("split '{}' is empty (fraction {})", names[b], fracs[b]);
        }
        out.push(DomainDataset {
            x: data.x.gather_rows(bucket),
            y: bucket.iter().map(|&i| data.y[i]).collect(),
            domain_tag: data.domain_tag.clone(),
            input_range: data.input_range,
            class_count: data.class_count,
        });
    }
    let test = out.pop().expect("three buckets");
    let val = out.pop().expect("three buckets");
    let train = out.pop().expect("three buckets");
    Ok(DatasetSplits { train, val, test })
}

/// Keeps only the first `k` classes. Labels are unchanged (they already
/// lie in `[0, k)`) and per-class counts are preserved.
pub fn class_subset(data: &DomainDataset, k: usize) -> Result<DomainDataset> {
    if k == 0 || k > data.class_count {
        return Err(Error::config(format!(
            "class_subset k must lie in [1, {}], got {k}",
            data.class_count
        )));
    }
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] < k).collect();
    if idx.is_empty() {
        return Err(Error::EmptyData {
            context: "class_subset".into(),
        });
    }
    Ok(DomainDataset {
        x: data.x.gather_rows(&idx),
        y: idx.iter().map(|&i| data.y[i]).collect(),
        domain_tag: data.domain_tag.clone(),
        input_range: data.input_range,
        class_count: k,
    })
}

/// Optional overrides applied while loading a CSV dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Pins the class count; `None` infers the largest label plus one.
    pub classes: Option<usize>,
    /// Declares the clamp range; `None` uses the empirical min/max. Data
    /// outside a declared range is rejected.
    pub input_range: Option<(f64, f64)>,
}

fn csv_error(context: &str, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(context, io),
        other => Error::io(
            context,
            std::io::Error::new(std::io::ErrorKind::Other, format!("{other:?}")),
        ),
    }
}

/// Writes `f0,...,f{D-1},label` rows. Floats are printed with 17
/// significant digits, enough for the reload to reproduce identical bits.
pub fn write_csv(path: &Path, data: &DomainDataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    let d = data.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    let ctx = format!("write {}", path.display());
    w.write_record(&header).map_err(|e| csv_error(&ctx, e))?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.x.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        rec.push(data.y[i].to_string());
        w.write_record(&rec).map_err(|e| csv_error(&ctx, e))?;
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}

/// Reads a file written by [`write_csv`] (or hand-authored in the same
/// shape). The domain tag is the file stem.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<DomainDataset> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(format!("open {p}"), e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records = rdr.records();

    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                path: p,
                line: 1,
                msg: "empty file, expected a header row".into(),
            })
        }
        Some(r) => r.map_err(|e| Error::Parse {
            path: p.clone(),
            line: 1,
            msg: e.to_string(),
        })?,
    };
    let cols = header.len();
    if cols < 2 || header.get(cols - 1) != Some("label") {
        return Err(Error::Parse {
            path: p,
            line: 1,
            msg: "header must be f0,...,fN,label".into(),
        });
    }
    let d = cols - 1;
    for i in 0..d {
        if header.get(i) != Some(format!("f{i}").as_str()) {
            return Err(Error::Parse {
                path: p,
                line: 1,
                msg: format!("header column {} must be f{i}", i + 1),
            });
        }
    }

    let mut data = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let parse = |msg: String| Error::Parse {
            path: p.clone(),
            line,
            msg,
        };
        let rec = rec.map_err(|e| parse(e.to_string()))?;
        if rec.len() != cols {
            return Err(parse(format!("expected {cols} fields, got {}", rec.len())));
        }
        for dim in 0..d {
            let field = rec.get(dim).expect("width checked");
            let v: f64 = field
                .parse()
                .map_err(|e| parse(format!("field f{dim}: {e}")))?;
            if !v.is_finite() {
                return Err(parse(format!("field f{dim} is not finite: {field}")));
            }
            data.push(v);
        }
        let label: usize = rec
            .get(d)
            .expect("width checked")
            .parse()
            .map_err(|e| parse(format!("label field: {e}")))?;
        y.push(label);
    }
    if y.is_empty() {
        return Err(Error::EmptyData {
            context: format!("load {p}"),
        });
    }

    let max_label = *y.iter().max().expect("non-empty");
    let class_count = match schema.classes {
        Some(c) => {
            if max_label >= c {
                return Err(Error::LabelRange {
                    label: max_label,
                    classes: c,
                });
            }
            c
        }
        None => max_label + 1,
    };
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let input_range = match schema.input_range {
        Some((slo, shi)) => {
            if !(slo < shi) {
                return Err(Error::config(format!(
                    "schema input_range must satisfy lo < hi, got [{slo}, {shi}]"
                )));
            }
            if lo < slo || hi > shi {
                return Err(Error::config(format!(
                    "data spans [{lo}, {hi}], outside the declared input_range [{slo}, {shi}]"
                )));
            }
            (slo, shi)
        }
        None => (lo, hi),
    };
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.clone());
    Ok(DomainDataset {
        x: Tensor::new(vec![y.len(), d], data)?,
        y,
        domain_tag: tag,
        input_range,
        class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source_spec() -> ShiftSpec {
        ShiftSpec {
            family: DatasetFamily::GaussianBlobs,
            classes: 4,
            samples_per_class: 25,
            input_dim: 2,
            noise_sigma: 0.4,
            rotation: 0.0,
            translation: vec![],
            scale: 1.0,
        }
    }

    fn target_spec() -> ShiftSpec {
        ShiftSpec {
            rotation: 0.5,
            translation: vec![0.4, -0.3],
            ..source_spec()
        }
    }

    #[test]
    fn pair_has_expected_shapes_and_labels() {
        let (src, tgt) = make_domain_pair(&source_spec(), &target_spec(), 7).unwrap();
        for ds in [&src, &tgt] {
            assert_eq!(ds.x.shape(), &[100, 2]);
            assert_eq!(ds.class_count, 4);
            for c in 0..4 {
                assert_eq!(ds.y.iter().filter(|&&l| l == c).count(), 25);
            }
        }
        assert_eq!(src.domain_tag, "source");
        assert_eq!(tgt.domain_tag, "target");
    }

    #[test]
    fn pair_generation_is_deterministic() {
        let a = make_domain_pair(&source_spec(), &target_spec(), 11).unwrap();
        let b = make_domain_pair(&source_spec(), &target_spec(), 11).unwrap();
        assert_eq!(a, b);
        let c = make_domain_pair(&source_spec(), &target_spec(), 12).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn identical_specs_on_one_stream_are_the_same_distribution() {
        let spec = source_spec();
        let mut r1 = RngSeed::new(5, 0).rng();
        let mut r2 = RngSeed::new(5, 0).rng();
        let a = gaussian_blobs(&spec, "a", &mut r1).unwrap();
        let b = gaussian_blobs(&spec, "b", &mut r2).unwrap();
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn pair_rejects_mismatched_class_count_or_width() {
        let bad_c = ShiftSpec {
            classes: 3,
            samples_per_class: 10,
            ..target_spec()
        };
        assert!(make_domain_pair(&source_spec(), &bad_c, 1).is_err());
        let bad_d = ShiftSpec {
            input_dim: 5,
            translation: vec![],
            ..target_spec()
        };
        assert!(make_domain_pair(&source_spec(), &bad_d, 1).is_err());
    }

    #[test]
    fn shift_moves_the_target_away_from_the_source() {
        let (src, tgt) = make_domain_pair(&source_spec(), &target_spec(), 3).unwrap();
        assert_ne!(src.x, tgt.x);
        // Per-class means should differ by roughly the transform, far more
        // than noise jitter.
        let mean0 = |ds: &DomainDataset| {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.y[i] == 0)
                .map(|i| ds.x.row(i))
                .collect();
            let n = rows.len() as f64;
            (
                rows.iter().map(|r| r[0]).sum::<f64>() / n,
                rows.iter().map(|r| r[1]).sum::<f64>() / n,
            )
        };
        let (sx, sy) = mean0(&src);
        let (tx, ty) = mean0(&tgt);
        let gap = ((sx - tx).powi(2) + (sy - ty).powi(2)).sqrt();
        assert!(gap > 0.5, "class-0 means only {gap} apart");
    }

    #[test]
    fn samples_respect_the_shared_range() {
        let (src, tgt) = make_domain_pair(&source_spec(), &target_spec(), 5).unwrap();
        assert_eq!(src.input_range, tgt.input_range);
        let (lo, hi) = src.input_range;
        assert!(lo < hi);
        for ds in [&src, &tgt] {
            for v in ds.x.data() {
                assert!(*v >= lo && *v <= hi);
            }
        }
    }

    #[test]
    fn two_arcs_generates_and_rejects_other_class_counts() {
        let mut spec = ShiftSpec {
            family: DatasetFamily::TwoArcs,
            classes: 2,
            samples_per_class: 30,
            input_dim: 3,
            noise_sigma: 0.1,
            rotation: 0.3,
            translation: vec![],
            scale: 1.0,
        };
        let (src, tgt) = make_domain_pair(&spec, &spec, 2).unwrap();
        assert_eq!(src.x.shape(), &[60, 3]);
        let (lo, hi) = src.input_range;
        for v in tgt.x.data() {
            assert!(*v >= lo && *v <= hi);
        }
        spec.classes = 3;
        match make_domain_pair(&spec, &spec, 2) {
            Err(Error::Config(msgs)) => {
                assert!(msgs.iter().any(|m| m.contains("two_arcs")), "{msgs:?}")
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn generator_rejects_family_mismatch() {
        let spec = source_spec();
        let mut rng = RngSeed::new(1, 0).rng();
        assert!(two_arcs(&spec, "x", &mut rng).is_err());
        assert!(gaussian_blobs(&spec, "x", &mut rng).is_ok());
    }

    #[test]
    fn split_sizes_are_exact_and_near_stratified() {
        let (src, _) = make_domain_pair(&source_spec(), &target_spec(), 9).unwrap();
        let splits = split(&src, &SplitFractions::default(), 9).unwrap();
        assert_eq!(splits.train.len(), 70);
        assert_eq!(splits.val.len(), 10);
        assert_eq!(splits.test.len(), 20);
        // 25 per class: floors are 17/2/5, so train gains at most one extra
        // per class and test is exact.
        for c in 0..4 {
            let count = |ds: &DomainDataset| ds.y.iter().filter(|&&l| l == c).count();
            let t = count(&splits.train);
            assert!((17..=18).contains(&t), "train class {c} has {t}");
            let v = count(&splits.val);
            assert!((2..=3).contains(&v), "val class {c} has {v}");
            assert_eq!(count(&splits.test), 5);
            let total = count(&splits.train) + count(&splits.val) + count(&splits.test);
            assert_eq!(total, 25);
        }
        assert_eq!(splits.train.input_range, src.input_range);
        assert_eq!(splits.train.class_count, 4);
        assert_eq!(splits.train.domain_tag, "source");
    }

    #[test]
    fn split_is_deterministic_in_the_seed() {
        let (src, _) = make_domain_pair(&source_spec(), &target_spec(), 4).unwrap();
        let a = split(&src, &SplitFractions::default(), 21).unwrap();
        let b = split(&src, &SplitFractions::default(), 21).unwrap();
        assert_eq!(a, b);
        let c = split(&src, &SplitFractions::default(), 22).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn degenerate_fractions_put_everything_in_train() {
        let (src, _) = make_domain_pair(&source_spec(), &target_spec(), 4).unwrap();
        let all_train = SplitFractions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        let splits = split(&src, &all_train, 3).unwrap();
        assert_eq!(splits.train.len(), 100);
        assert!(splits.val.is_empty());
        assert!(splits.test.is_empty());
    }

    #[test]
    fn split_commutes_with_class_subset_when_quotas_are_integral() {
        // 10 per class with 0.7/0.1/0.2 gives integral per-class quotas, so
        // no leftover pooling happens and each class depends only on its
        // own stream.
        let spec = ShiftSpec {
            samples_per_class: 10,
            ..source_spec()
        };
        let (src, _) = make_domain_pair(&spec, &spec, 13).unwrap();
        let f = SplitFractions::default();

        let sub_then_split = split(&class_subset(&src, 2).unwrap(), &f, 13).unwrap();
        let full = split(&src, &f, 13).unwrap();
        let split_then_sub = DatasetSplits {
            train: class_subset(&full.train, 2).unwrap(),
            val: class_subset(&full.val, 2).unwrap(),
            test: class_subset(&full.test, 2).unwrap(),
        };
        assert_eq!(sub_then_split.train.x, split_then_sub.train.x);
        assert_eq!(sub_then_split.val.x, split_then_sub.val.x);
        assert_eq!(sub_then_split.test.x, split_then_sub.test.x);
        assert_eq!(sub_then_split.train.y, split_then_sub.train.y);
    }

    #[test]
    fn class_subset_keeps_prefix_classes_unchanged() {
        let (src, _) = make_domain_pair(&source_spec(), &target_spec(), 6).unwrap();
        let sub = class_subset(&src, 2).unwrap();
        assert_eq!(sub.class_count, 2);
        assert_eq!(sub.len(), 50);
        assert!(sub.y.iter().all(|&l| l < 2));
        for c in 0..2 {
            assert_eq!(sub.y.iter().filter(|&&l| l == c).count(), 25);
        }
        // Identity at k = C.
        let full = class_subset(&src, 4).unwrap();
        assert_eq!(full, src);
        assert!(class_subset(&src, 0).is_err());
        assert!(class_subset(&src, 5).is_err());
    }

    #[test]
    fn largest_remainder_is_exact_with_ties_to_earlier_entries() {
        assert_eq!(largest_remainder(100, &[0.7, 0.1, 0.2]), vec![70, 10, 20]);
        assert_eq!(largest_remainder(10, &[0.7, 0.1, 0.2]), vec![7, 1, 2]);
        // 5 * [0.5, 0.25, 0.25] floors to 2/1/1; the leftover unit goes to
        // the larger fraction 0.5.
        assert_eq!(largest_remainder(5, &[0.5, 0.25, 0.25]), vec![3, 1, 1]);
        // Shares 1.5/0.75/0.75: both leftover units land on the larger
        // remainders 0.75.
        assert_eq!(largest_remainder(3, &[0.5, 0.25, 0.25]), vec![1, 1, 1]);
        // Shares 1.0/0.5/0.5 leave one unit and tied remainders; the
        // earlier entry wins.
        assert_eq!(largest_remainder(2, &[0.5, 0.25, 0.25]), vec![1, 1, 0]);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("domain.csv");
        let mut ds = make_domain_pair(&source_spec(), &target_spec(), 8).unwrap().0;
        // Inject values with awkward decimal representations.
        ds.x.data_mut()[0] = 1e-17;
        ds.x.data_mut()[1] = -0.1 + 0.2;
        write_csv(&path, &ds).unwrap();
        let back = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back.x.shape(), ds.x.shape());
        for (a, b) in back.x.data().iter().zip(ds.x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.y, ds.y);
        assert_eq!(back.class_count, 4);
        assert_eq!(back.domain_tag, "domain");
    }

    #[test]
    fn hand_written_file_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        std::fs::write(&path, "f0,f1,label\n0.5,-1.25,0\n2,3.5,1\n-0.75,0.125,2\n").unwrap();
        let ds = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(ds.x, Tensor::from_rows(&[
            vec![0.5, -1.25],
            vec![2.0, 3.5],
            vec![-0.75, 0.125],
        ]).unwrap());
        assert_eq!(ds.y, vec![0, 1, 2]);
        assert_eq!(ds.class_count, 3);
        assert_eq!(ds.input_range, (-1.25, 3.5));
    }

    #[test]
    fn load_reports_line_numbers_for_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let check = |name: &str, body: &str, want_line: usize, want_msg: &str| {
            let path = dir.path().join(name);
            std::fs::write(&path, body).unwrap();
            match load_csv(&path, &CsvSchema::default()) {
                Err(Error::Parse { line, msg, .. }) => {
                    assert_eq!(line, want_line, "{name}: {msg}");
                    assert!(msg.contains(want_msg), "{name}: {msg}");
                }
                other => panic!("{name}: expected parse error, got {other:?}"),
            }
        };
        check("head.csv", "f0,nope\n1.0,0\n", 1, "label");
        check("order.csv", "f1,f0,label\n1.0,2.0,0\n", 1, "must be f0");
        check(
            "width.csv",
            "f0,f1,label\n1.0,2.0,0\n1.0,0\n",
            3,
            "expected 3 fields",
        );
        check("float.csv", "f0,label\nabc,0\n", 2, "field f0");
        check("nonfinite.csv", "f0,label\ninf,0\n", 2, "not finite");
        check("label.csv", "f0,label\n1.0,-2\n", 2, "label field");
        check("empty.csv", "", 1, "empty file");
    }

    #[test]
    fn load_validates_labels_and_declared_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("three.csv");
        std::fs::write(&path, "f0,label\n0.5,0\n0.25,2\n").unwrap();
        let inferred = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(inferred.class_count, 3);
        assert_eq!(inferred.input_range, (0.25, 0.5));
        match load_csv(
            &path,
            &CsvSchema {
                classes: Some(2),
                input_range: None,
            },
        ) {
            Err(Error::LabelRange { label: 2, classes: 2 }) => {}
            other => panic!("expected label range error, got {other:?}"),
        }
        let wide = load_csv(
            &path,
            &CsvSchema {
                classes: None,
                input_range: Some((-1.0, 1.0)),
            },
        )
        .unwrap();
        assert_eq!(wide.input_range, (-1.0, 1.0));
        assert!(load_csv(
            &path,
            &CsvSchema {
                classes: None,
                input_range: Some((0.3, 1.0)),
            },
        )
        .is_err());
    }
}
