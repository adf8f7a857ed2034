//! Dataset files: a JSON manifest line, one JSON record per sample, and a
//! sidecar `<path>.bin` blob of little-endian f32 feature values.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetSpec, Flavor, SceneFeatures, SceneSample};
use crate::dpatr::{C_GLB, C_IDV, C_SG};
use crate::geometry::{BBox, BoxTrack};
use crate::relation::GroupAssignment;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "spdp-dataset";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    count: usize,
    blob_bytes: usize,
    classes: [usize; 3],
    spec: DatasetSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    index: usize,
    flavor: Flavor,
    shape: Vec<usize>,
    offset: usize,
    crc32: u32,
    frames: usize,
    boxes: Vec<[f64; 4]>,
    groups: Vec<usize>,
    individual_labels: Vec<Vec<usize>>,
    social_labels: Vec<Vec<usize>>,
    global_labels: Vec<usize>,
    distractors: Vec<usize>,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<path>` and `<path>.bin`.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut blob = Vec::new();
    let mut records = Vec::with_capacity(dataset.samples.len());
    for (index, s) in dataset.samples.iter().enumerate() {
        let offset = blob.len();
        let t = s.features.tensor();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        records.push(Record {
            index,
            flavor: s.features.flavor(),
            shape: t.shape().to_vec(),
            offset,
            crc32: crc32fast::hash(&blob[offset..]),
            frames: s.track.frames(),
            boxes: s.track.boxes().iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
            groups: s.groups.labels().to_vec(),
            individual_labels: s.individual_labels.clone(),
            social_labels: s.social_labels.clone(),
            global_labels: s.global_labels.clone(),
            distractors: s.distractors.clone(),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        dtype: "f32le".into(),
        count: records.len(),
        blob_bytes: blob.len(),
        classes: [C_IDV, C_SG, C_GLB],
        spec: dataset.spec.clone(),
    };
    let mut text = serde_json::to_string(&manifest).expect("serializable manifest");
    text.push('\n');
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("serializable record"));
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let bin = blob_path(path);
    fs::write(&bin, &blob).map_err(io_err(&bin))?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let bin = blob_path(path);
    let blob = fs::read(&bin).map_err(io_err(&bin))?;
    let shown = path.display().to_string();
    let parse = |line: usize, detail: String| DataError::Parse {
        path: shown.clone(),
        line,
        detail,
    };

    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| parse(1, "missing manifest line".into()))?
        .map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    if manifest.format != DATASET_FORMAT || manifest.version != 1 || manifest.dtype != "f32le" {
        return Err(parse(
            1,
            format!(
                "unsupported dataset {} v{} ({})",
                manifest.format, manifest.version, manifest.dtype
            ),
        ));
    }
    if manifest.classes != [C_IDV, C_SG, C_GLB] {
        return Err(parse(1, format!("class counts {:?} not supported", manifest.classes)));
    }

    let mut samples = Vec::with_capacity(manifest.count);
    for (k, line) in lines.enumerate() {
        let line_no = k + 2;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| parse(line_no, e.to_string()))?;
        if r.index != samples.len() {
            return Err(parse(
                line_no,
                format!("expected sample {}, found {}", samples.len(), r.index),
            ));
        }
        samples.push(decode(r, &blob).map_err(|e| match e {
            DataError::Sample { .. } => e,
            other => DataError::Sample {
                index: samples.len(),
                detail: other.to_string(),
            },
        })?);
    }
    if samples.len() != manifest.count {
        return Err(parse(
            samples.len() + 2,
            format!("manifest lists {} samples, file has {}", manifest.count, samples.len()),
        ));
    }
    // Truncation shows up above as a located sample error.
    if manifest.blob_bytes != blob.len() {
        return Err(DataError::Parse {
            path: bin.display().to_string(),
            line: 0,
            detail: format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes),
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        samples,
    })
}

fn decode(r: Record, blob: &[u8]) -> Result<SceneSample, DataError> {
    let fail = |detail: String| DataError::Sample { index: r.index, detail };
    let rank = match r.flavor {
        Flavor::Cropped => 5,
        Flavor::Grid => 4,
    };
    if r.shape.len() != rank {
        return Err(fail(format!(
            "{} features need rank {rank}, got {:?}",
            r.flavor, r.shape
        )));
    }
    let count: usize = r.shape.iter().product();
    let end = r.offset + 4 * count;
    if end > blob.len() {
        return Err(fail(format!(
            "features need blob bytes {}..{end}, blob has {}",
            r.offset,
            blob.len()
        )));
    }
    let bytes = &blob[r.offset..end];
    if crc32fast::hash(bytes) != r.crc32 {
        return Err(fail(format!("feature checksum mismatch at blob offset {}", r.offset)));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let tensor = Tensor::new(r.shape.clone(), data)?;
    let features = match r.flavor {
        Flavor::Cropped => SceneFeatures::Cropped(tensor),
        Flavor::Grid => SceneFeatures::Grid(tensor),
    };
    if r.frames == 0 || !r.boxes.len().is_multiple_of(r.frames) {
        return Err(fail(format!("{} boxes over {} frames", r.boxes.len(), r.frames)));
    }
    let boxes = r
        .boxes
        .iter()
        .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
        .collect::<Result<Vec<_>, _>>()?;
    let track = BoxTrack::new(boxes.len() / r.frames, r.frames, boxes)?;
    let groups = GroupAssignment::from_labels(&r.groups);
    if groups.labels() != r.groups.as_slice() {
        return Err(fail("group ids are not dense in first-occurrence order".into()));
    }
    let sample = SceneSample {
        features,
        track,
        groups,
        individual_labels: r.individual_labels,
        social_labels: r.social_labels,
        global_labels: r.global_labels,
        distractors: r.distractors,
    };
    sample.check_labels().map_err(fail)?;
    let n = sample.individuals();
    let feature_n = match &sample.features {
        SceneFeatures::Cropped(t) => t.shape()[0],
        SceneFeatures::Grid(_) => n,
    };
    let feature_t = match &sample.features {
        SceneFeatures::Cropped(t) => t.shape()[1],
        SceneFeatures::Grid(t) => t.shape()[0],
    };
    if feature_n != n || feature_t != sample.track.frames() {
        return Err(fail(format!(
            "features {:?} do not match {n} individuals over {} frames",
            r.shape,
            sample.track.frames()
        )));
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, Split};

    fn small(flavor: Flavor) -> Dataset {
        let spec = DatasetSpec {
            scenes: 3,
            flavor,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec, Split::Train).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for flavor in [Flavor::Cropped, Flavor::Grid] {
            let ds = small(flavor);
            let path = dir.path().join(format!("{flavor}.jsonl"));
            write_dataset(&ds, &path).unwrap();
            assert_eq!(read_dataset(&path).unwrap(), ds);
        }
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            spec: DatasetSpec::default(),
            samples: Vec::new(),
        };
        let path = dir.path().join("empty.jsonl");
        write_dataset(&ds, &path).unwrap();
        assert!(read_dataset(&path).unwrap().samples.is_empty());
    }

    #[test]
    fn corrupted_blob_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(Flavor::Cropped);
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        let bin = blob_path(&path);
        let mut bytes = fs::read(&bin).unwrap();
        let second = 4 * ds.samples[0].features.tensor().numel();
        bytes[second + 5] ^= 0x40;
        fs::write(&bin, &bytes).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, DataError::Sample { index: 1, .. }), "{err}");
    }

    #[test]
    fn truncated_blob_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(Flavor::Cropped);
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        let bin = blob_path(&path);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, DataError::Sample { index: 2, .. }), "{err}");
    }

    #[test]
    fn malformed_record_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(Flavor::Cropped);
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"index\": 1, \"flavor\": ";
        fs::write(&path, lines.join("\n")).unwrap();
        let err = read_dataset(&path).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");
    }
}
