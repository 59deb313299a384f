//! On-disk formats: labeled manifests, image decoding, prediction CSVs,
//! metrics JSON and binary checkpoints.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::catalog::ClassCatalog;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, InputSpec, Normalization};
use crate::matrix::{check_rows, Matrix, ProbMatrix, PRINTED_ROW_SUM_TOL};
use crate::metrics::{AggregateMetrics, ClassMetrics, MetricsReport};
use crate::nn::{Arch, ModelParams};

pub const MANIFEST_HEADER: [&str; 2] = ["image_path", "label"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    /// Path relative to the manifest's directory.
    pub image_id: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledManifest {
    records: Vec<ManifestRecord>,
}

impl LabeledManifest {
    pub fn new(records: Vec<ManifestRecord>, classes: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.label >= classes {
                return Err(Error::invalid(format!(
                    "label {} of '{}' is not below {classes}",
                    r.label, r.image_id
                )));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateImage {
                    id: r.image_id.clone(),
                    row: i,
                });
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Reads a `image_path,label` CSV; label names are resolved against `catalog`.
/// Error rows are reported as 1-based file lines (the header is line 1).
pub fn load_manifest(path: &Path, catalog: &ClassCatalog) -> Result<LabeledManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::parse(
            path,
            format!(
                "expected header 'image_path,label', got '{}'",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(path, e))?;
        let (id, name) = (&row[0], &row[1]);
        let label = catalog.index_of(name).ok_or_else(|| Error::UnknownClass {
            name: name.to_string(),
            row: line,
        })?;
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateImage {
                id: id.to_string(),
                row: line,
            });
        }
        records.push(ManifestRecord {
            image_id: id.to_string(),
            label,
        });
    }
    LabeledManifest::new(records, catalog.len())
}

pub fn write_manifest(path: &Path, manifest: &LabeledManifest, catalog: &ClassCatalog) -> Result<()> {
    let mut out = String::from("image_path,label\n");
    for r in manifest.records() {
        let name = catalog
            .name(r.label)
            .ok_or_else(|| Error::invalid(format!("label {} outside catalog", r.label)))?;
        out.push_str(&format!("{},{}\n", r.image_id, name));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Decodes a PNG or JPEG to RGB in `[0, 1]`; grayscale is replicated to all
/// three channels. 8-bit samples map to `v / 255`, 16-bit to `v / 65535`.
pub fn decode_image(path: &Path) -> Result<ImageBuffer> {
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) | Some(image::ImageFormat::Jpeg) => {}
        Some(other) => return Err(decode_err(format!("unsupported format {other:?}"))),
        None => return Err(decode_err("unsupported or unrecognized format".into())),
    }
    let img = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen_bit = matches!(
        img.color(),
        image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16
    );
    let rgb: Vec<f64> = if sixteen_bit {
        img.to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect()
    } else {
        img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect()
    };
    ImageBuffer::from_interleaved(w, h, &rgb)
}

/// Saves an image as 8-bit RGB (PNG or JPEG by extension); normalized images
/// are mapped back to raw intensities first.
pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| Error::shape("image buffer size"))?;
    buf.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn basename(id: &str) -> &str {
    id.rsplit(['/', '\\']).next().unwrap_or(id)
}

/// Writes `image_path,<class names…>` with one row per image, probabilities
/// at 6 decimals and ids reduced to their basename.
pub fn write_predictions_csv(path: &Path, image_ids: &[String], probs: &Matrix, catalog: &ClassCatalog) -> Result<()> {
    if probs.rows() != image_ids.len() {
        return Err(Error::shape(format!(
            "{} probability rows for {} images",
            probs.rows(),
            image_ids.len()
        )));
    }
    if probs.cols() != catalog.len() {
        return Err(Error::shape(format!(
            "{} probability columns for {} classes",
            probs.cols(),
            catalog.len()
        )));
    }
    check_rows(probs, PRINTED_ROW_SUM_TOL)?;
    let mut out = String::from("image_path");
    for name in catalog.names() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (id, row) in image_ids.iter().zip(probs.iter_rows()) {
        out.push_str(basename(id));
        for p in row {
            out.push_str(&format!(",{p:.6}"));
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub catalog: ClassCatalog,
    pub image_ids: Vec<String>,
    pub probs: ProbMatrix,
}

/// Parses a predictions CSV. Rows must sum to 1 within the tolerance that
/// 6-decimal printing allows; values are kept as printed.
pub fn read_predictions_csv(path: &Path) -> Result<Predictions> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("image_path") {
        return Err(Error::parse(path, "first column must be image_path"));
    }
    let catalog = ClassCatalog::new(header.iter().skip(1))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        ids.push(row[0].to_string());
        for field in row.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad probability '{field}'", i + 2)))?;
            data.push(v);
        }
    }
    let m = Matrix::from_vec(ids.len(), catalog.len(), data)?;
    let probs = ProbMatrix::with_tolerance(m, PRINTED_ROW_SUM_TOL)?;
    let mut seen = HashSet::new();
    for (i, id) in ids.iter().enumerate() {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateImage {
                id: id.clone(),
                row: i + 2,
            });
        }
    }
    Ok(Predictions {
        catalog,
        image_ids: ids,
        probs,
    })
}

pub fn metrics_to_json(report: &MetricsReport) -> Result<Value> {
    if report.per_class.is_empty() || report.per_class.len() != report.classes.len() {
        return Err(Error::invalid("report must cover all catalog classes"));
    }
    let mut per_class = Map::new();
    for (name, m) in report.classes.iter().zip(&report.per_class) {
        per_class.insert(
            name.clone(),
            json!({
                "precision": m.precision,
                "recall": m.recall,
                "f1": m.f1,
                "specificity": m.specificity,
                "auc": m.auc,
            }),
        );
    }
    let a = &report.aggregate;
    Ok(json!({
        "per_class": per_class,
        "aggregate": {
            "balanced_accuracy": a.balanced_accuracy,
            "mean_auc": a.mean_auc,
            "combined_score": a.combined_score,
            "macro_precision": a.macro_precision,
            "macro_f1": a.macro_f1,
            "macro_specificity": a.macro_specificity,
        }
    }))
}

pub fn metrics_from_json(value: &Value) -> Result<MetricsReport> {
    let bad = |m: &str| Error::InvalidArgument(format!("metrics JSON: {m}"));
    let per_class = value
        .get("per_class")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("missing per_class object"))?;
    if per_class.is_empty() {
        return Err(Error::invalid("report must cover all catalog classes"));
    }
    let mut classes = Vec::new();
    let mut metrics = Vec::new();
    for (name, v) in per_class {
        classes.push(name.clone());
        let m: ClassMetrics = serde_json::from_value(v.clone()).map_err(|e| bad(&format!("class '{name}': {e}")))?;
        metrics.push(m);
    }
    let aggregate: AggregateMetrics = serde_json::from_value(
        value
            .get("aggregate")
            .cloned()
            .ok_or_else(|| bad("missing aggregate"))?,
    )
    .map_err(|e| bad(&e.to_string()))?;
    Ok(MetricsReport {
        classes,
        per_class: metrics,
        aggregate,
    })
}

pub fn write_metrics_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let value = metrics_to_json(report)?;
    let mut text = serde_json::to_string_pretty(&value).expect("JSON values always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    metrics_from_json(&value)
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";

/// Serialized model state plus the selection bookkeeping that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub arch: Arch,
    pub params: Vec<f64>,
    pub epoch: u64,
    pub best_combined_score: f64,
    pub rng_seed: u64,
    pub catalog: ClassCatalog,
    /// Evaluation transform the parameters expect.
    pub input: InputSpec,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        epoch: u64,
        best_combined_score: f64,
        rng_seed: u64,
        catalog: ClassCatalog,
        input: InputSpec,
    ) -> Result<Self> {
        let ckpt = Self {
            format_version: CHECKPOINT_VERSION,
            arch: params.arch().clone(),
            params: params.to_flat(),
            epoch,
            best_combined_score,
            rng_seed,
            catalog,
            input,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != self.arch.num_params() {
            return Err(Error::CheckpointIntegrity(format!(
                "{} parameters for {}, expected {}",
                self.params.len(),
                self.arch,
                self.arch.num_params()
            )));
        }
        if !(0.0..=1.0).contains(&self.best_combined_score) {
            return Err(Error::CheckpointIntegrity(format!(
                "best combined score {} outside [0, 1]",
                self.best_combined_score
            )));
        }
        if self.catalog.len() != self.arch.output_dim() {
            return Err(Error::CheckpointIntegrity(format!(
                "{} classes but {} outputs",
                self.catalog.len(),
                self.arch.output_dim()
            )));
        }
        if self.input.width == 0 || self.input.height == 0 {
            return Err(Error::CheckpointIntegrity("zero input size".into()));
        }
        Normalization::new(self.input.normalization.mean, self.input.normalization.std)
            .map_err(|e| Error::CheckpointIntegrity(e.to_string()))?;
        Ok(())
    }

    pub fn model(&self) -> Result<ModelParams> {
        ModelParams::from_flat(&self.arch, &self.params)
    }

    /// Little-endian container:
    /// `magic | version u32 | payload length u64 | payload | FNV-1a u64 of payload`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut payload = Vec::with_capacity(64 + 8 * self.params.len());
        payload.extend_from_slice(&self.epoch.to_le_bytes());
        payload.extend_from_slice(&self.best_combined_score.to_le_bytes());
        payload.extend_from_slice(&self.rng_seed.to_le_bytes());
        payload.extend_from_slice(&(self.catalog.len() as u32).to_le_bytes());
        for name in self.catalog.names() {
            put_str(&mut payload, name);
        }
        put_str(&mut payload, &self.arch.to_string());
        payload.extend_from_slice(&(self.input.width as u64).to_le_bytes());
        payload.extend_from_slice(&(self.input.height as u64).to_le_bytes());
        let n = &self.input.normalization;
        for v in n.mean.iter().chain(&n.std) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        payload.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            payload.extend_from_slice(&p.to_le_bytes());
        }

        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.format_version.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: &str| Error::CheckpointIntegrity(m.to_string());
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4).map_err(|_| integrity("file too short"))? != CHECKPOINT_MAGIC {
            return Err(integrity("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u64()? as usize;
        if bytes.len() != 16 + len + 8 {
            return Err(Error::CheckpointIntegrity(format!(
                "payload length {len} does not match file size {}",
                bytes.len()
            )));
        }
        let payload = r.take(len)?;
        let checksum = r.u64()?;
        if checksum != fnv1a(payload) {
            return Err(integrity("checksum mismatch"));
        }

        let mut p = ByteReader { bytes: payload, pos: 0 };
        let epoch = p.u64()?;
        let best = p.f64()?;
        let seed = p.u64()?;
        let k = p.u32()? as usize;
        let names = (0..k).map(|_| p.string()).collect::<Result<Vec<_>>>()?;
        let catalog = ClassCatalog::new(names)?;
        let arch: Arch = p.string()?.parse()?;
        let width = p.u64()? as usize;
        let height = p.u64()? as usize;
        let mut norm = [0.0; 6];
        for v in &mut norm {
            *v = p.f64()?;
        }
        let input = InputSpec {
            width,
            height,
            normalization: Normalization {
                mean: [norm[0], norm[1], norm[2]],
                std: [norm[3], norm[4], norm[5]],
            },
        };
        let n = p.u64()? as usize;
        let raw = p.take(n.checked_mul(8).ok_or_else(|| integrity("parameter count overflow"))?)?;
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if p.pos != payload.len() {
            return Err(integrity("trailing bytes in payload"));
        }
        let ckpt = Self {
            format_version: version,
            arch,
            params,
            epoch,
            best_combined_score: best,
            rng_seed: seed,
            catalog,
            input,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointIntegrity("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CheckpointIntegrity("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn manifest_basic() {
        let dir = tempfile::tempdir().unwrap();
        let cat = ClassCatalog::default();
        let p = write(dir.path(), "m.csv", "image_path,label\na.jpg,Normal\nb.jpg,Ulcer\n");
        let m = load_manifest(&p, &cat).unwrap();
        assert_eq!(
            m.records(),
            &[
                ManifestRecord {
                    image_id: "a.jpg".into(),
                    label: 6
                },
                ManifestRecord {
                    image_id: "b.jpg".into(),
                    label: 8
                },
            ]
        );
        let p = write(dir.path(), "e.csv", "image_path,label\n");
        assert!(load_manifest(&p, &cat).unwrap().is_empty());
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cat = ClassCatalog::default();
        let p = write(dir.path(), "u.csv", "image_path,label\na.jpg,Normal\nc.jpg,Tumour\n");
        let err = load_manifest(&p, &cat).unwrap_err();
        assert_eq!(err.to_string(), "unknown class 'Tumour' at row 3");
        let p = write(dir.path(), "d.csv", "image_path,label\na.jpg,Normal\na.jpg,Ulcer\n");
        assert!(matches!(
            load_manifest(&p, &cat),
            Err(Error::DuplicateImage { row: 3, .. })
        ));
        let p = write(dir.path(), "h.csv", "path,class\na.jpg,Normal\n");
        assert!(matches!(load_manifest(&p, &cat), Err(Error::Parse { .. })));
        let missing = dir.path().join("nope.csv");
        let err = load_manifest(&missing, &cat).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
    }

    #[test]
    fn decode_png_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        image::RgbImage::from_pixel(2, 2, image::Rgb([255, 255, 255]))
            .save(&p)
            .unwrap();
        let img = decode_image(&p).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert!(img.data().iter().all(|&v| v == 1.0));
        assert!(!img.is_normalized());

        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(3, 1, image::Luma([128])).save(&p).unwrap();
        let img = decode_image(&p).unwrap();
        assert_eq!(img.data().len(), 9);
        assert!(img.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn decode_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jpg");
        let mut bytes = Vec::new();
        image::RgbImage::from_pixel(16, 16, image::Rgb([10, 200, 30]))
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Jpeg)
            .unwrap();
        fs::write(&p, &bytes[..bytes.len() / 3]).unwrap();
        let err = decode_image(&p).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }));
        assert!(err.to_string().contains("t.jpg"));

        let p = write(dir.path(), "x.png", "not an image");
        assert!(matches!(decode_image(&p), Err(Error::Decode { .. })));
        assert!(matches!(
            decode_image(&dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn predictions_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let cat = ClassCatalog::default();
        let p = dir.path().join("p.csv");
        let probs = Matrix::from_rows(&[vec![0.1; 10]]).unwrap();
        write_predictions_csv(&p, &["dir/x.jpg".to_string()], &probs, &cat).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "image_path,Angioectasia,Bleeding,Erosion,Erythema,Foreign Body,Lymphangiectasia,Normal,Polyp,Ulcer,Worms"
        );
        assert_eq!(lines.next().unwrap(), format!("x.jpg{}", ",0.100000".repeat(10)));

        let bad = Matrix::from_rows(&[vec![0.098; 10]]).unwrap();
        let err = write_predictions_csv(&p, &["a".to_string()], &bad, &cat).unwrap_err();
        assert_eq!(err.to_string(), "row 0 not a probability vector");
        assert!(write_predictions_csv(&p, &[], &probs, &cat).is_err());
    }

    fn sample_report() -> MetricsReport {
        let m = ClassMetrics {
            precision: 0.87,
            recall: 0.84,
            f1: 0.85,
            specificity: 0.99,
            auc: Some(0.995),
        };
        MetricsReport {
            classes: ClassCatalog::default().names().to_vec(),
            per_class: vec![m; 10],
            aggregate: AggregateMetrics {
                balanced_accuracy: 0.8634,
                mean_auc: 0.9908,
                combined_score: 0.9271,
                macro_precision: 0.87,
                macro_f1: 0.86,
                macro_specificity: 0.99,
            },
        }
    }

    #[test]
    fn metrics_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut report = sample_report();
        report.per_class[3].auc = None;
        write_metrics_json(&p, &report).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"balanced_accuracy\": 0.8634"));
        assert!(text.contains("\"mean_auc\": 0.9908"));
        assert!(text.find("Angioectasia").unwrap() < text.find("Worms").unwrap());
        assert_eq!(read_metrics_json(&p).unwrap(), report);

        let mut empty = sample_report();
        empty.per_class.clear();
        empty.classes.clear();
        let err = write_metrics_json(&p, &empty).unwrap_err();
        assert!(err.to_string().contains("report must cover all catalog classes"));
    }

    fn checkpoint() -> Checkpoint {
        let arch: Arch = "mlp:12x4x3".parse().unwrap();
        let cat = ClassCatalog::new(["a", "b", "c"]).unwrap();
        let input = InputSpec {
            width: 32,
            height: 24,
            normalization: Normalization::default(),
        };
        Checkpoint::new(&init_params(&arch, 5), 4, 0.75, 99, cat, input).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let ckpt = checkpoint();
        save_checkpoint(&p, &ckpt).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, ckpt);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.params), bits(&ckpt.params));
    }

    #[test]
    fn checkpoint_errors() {
        let mut bytes = checkpoint().to_bytes().unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_version),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
        let truncated = &bytes[..bytes.len() - 20];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(Error::CheckpointIntegrity(_))
        ));
        let n = bytes.len();
        bytes[n - 12] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointIntegrity(_))
        ));
        assert!(Checkpoint::from_bytes(b"CC").is_err());

        let mut bad = checkpoint();
        bad.params.pop();
        assert!(bad.to_bytes().is_err());
        let mut bad = checkpoint();
        bad.best_combined_score = 1.5;
        assert!(bad.validate().is_err());
    }
}
