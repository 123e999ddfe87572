//! Dataset persistence: a versioned manifest, one lossless raster per
//! frame, and a label table, all round-tripping bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseLabel, Quaternion, Vec3};
use crate::numerics::Real;
use crate::parallel;
use crate::rng::{self, salt};
use crate::scenegen::model::SatelliteModel;
use crate::scenegen::render::{render_frame, Frame};
use crate::scenegen::trajectory::{expand_trajectory, TrajectorySpec};
use crate::scenegen::Image;

pub const MANIFEST_VERSION: u32 = 1;

/// Which partition a frame belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One frame's bookkeeping entry in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub path: String,
    pub sequence: usize,
    pub frame_index: usize,
    pub split: Split,
    /// Hex digest of the raster file; empty until the dataset is written.
    #[serde(default)]
    pub sha256: String,
}

/// Dataset description persisted as `manifest.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    pub train_fraction: f64,
    pub sequences: Vec<TrajectorySpec>,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Test)
    }

    fn indices_of(&self, split: Split) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// In-memory dataset: manifest plus frames in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<Frame>,
}

/// Render every sequence and assign the seeded train/test split. The split
/// shuffles all frame indices once and marks the first
/// `round(n * train_fraction)` of them as training frames.
pub fn generate_dataset(
    model: &SatelliteModel,
    specs: &[TrajectorySpec],
    k: &CameraIntrinsics,
    light_dir: Vec3,
    height: usize,
    width: usize,
    seed: u64,
    train_fraction: f64,
) -> Result<Dataset> {
    if specs.is_empty() {
        return Err(Error::Empty("trajectory specs"));
    }
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::param(
            "train_fraction",
            format!("{} must lie strictly between 0 and 1", train_fraction),
        ));
    }
    let mut jobs = Vec::new();
    for (seq_idx, spec) in specs.iter().enumerate() {
        let poses = expand_trajectory(spec)?;
        for (frame_idx, pose) in poses.into_iter().enumerate() {
            jobs.push((seq_idx, frame_idx, pose));
        }
    }
    let rendered = parallel::map(&jobs, |&(seq_idx, frame_idx, pose)| {
        render_frame(model, &pose, k, light_dir, height, width).map(|mut f| {
            f.frame_index = frame_idx;
            (seq_idx, f)
        })
    });
    let mut frames = Vec::with_capacity(jobs.len());
    let mut records = Vec::with_capacity(jobs.len());
    for item in rendered {
        let (seq_idx, frame) = item?;
        records.push(FrameRecord {
            path: format!("frames/seq{:02}_frame{:05}.png", seq_idx, frame.frame_index),
            sequence: seq_idx,
            frame_index: frame.frame_index,
            split: Split::Test,
            sha256: String::new(),
        });
        frames.push(frame);
    }

    let n = frames.len();
    let train_count = (n as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, salt::SPLIT, 0);
    fisher_yates(&mut order, &mut rng);
    for &idx in order.iter().take(train_count) {
        records[idx].split = Split::Train;
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            seed,
            image_height: height,
            image_width: width,
            train_fraction,
            sequences: specs.to_vec(),
            frames: records,
        },
        frames,
    })
}

fn fisher_yates(order: &mut [usize], rng: &mut impl rand::Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Write rasters, labels, and the manifest under `root`. Returns the
/// manifest with file checksums filled in; the same manifest is what
/// `load_dataset` reproduces.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<DatasetManifest> {
    if dataset.frames.is_empty() {
        return Err(Error::Empty("dataset frames"));
    }
    if dataset.frames.len() != dataset.manifest.frames.len() {
        return Err(Error::dim(
            "dataset",
            format!(
                "{} frames vs {} manifest records",
                dataset.frames.len(),
                dataset.manifest.frames.len()
            ),
        ));
    }
    let frame_dir = root.join("frames");
    fs::create_dir_all(&frame_dir).map_err(|e| Error::io(frame_dir.display().to_string(), e))?;

    let mut manifest = dataset.manifest.clone();
    for (frame, record) in dataset.frames.iter().zip(manifest.frames.iter_mut()) {
        let png = encode_png(&frame.image)?;
        record.sha256 = hex_digest(&png);
        let path = root.join(&record.path);
        fs::write(&path, &png).map_err(|e| Error::io(path.display().to_string(), e))?;
    }

    let labels_path = root.join("labels.csv");
    let mut writer = csv::Writer::from_path(&labels_path)
        .map_err(|e| Error::Format { what: "labels.csv", detail: e.to_string() })?;
    writer
        .write_record([
            "sequence",
            "frame",
            "x",
            "y",
            "z",
            "w",
            "xi",
            "yj",
            "zk",
            "timestamp",
        ])
        .map_err(|e| Error::Format { what: "labels.csv", detail: e.to_string() })?;
    for (frame, record) in dataset.frames.iter().zip(manifest.frames.iter()) {
        let l = &frame.label;
        let ts = frame.timestamp.map(|t| t.to_string()).unwrap_or_default();
        writer
            .write_record([
                record.sequence.to_string(),
                record.frame_index.to_string(),
                l.position[0].to_string(),
                l.position[1].to_string(),
                l.position[2].to_string(),
                l.attitude.w.to_string(),
                l.attitude.x.to_string(),
                l.attitude.y.to_string(),
                l.attitude.z.to_string(),
                ts,
            ])
            .map_err(|e| Error::Format { what: "labels.csv", detail: e.to_string() })?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let manifest_text = toml::to_string(&manifest)
        .map_err(|e| Error::Format { what: "manifest", detail: e.to_string() })?;
    let manifest_path = root.join("manifest.toml");
    fs::write(&manifest_path, manifest_text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest)
}

/// Load a dataset written by `write_dataset`, verifying the manifest
/// version and every file checksum.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.toml");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest = toml::from_str(&manifest_text)
        .map_err(|e| Error::Format { what: "manifest", detail: e.to_string() })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            what: "manifest",
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }

    let labels_path = root.join("labels.csv");
    let mut reader = csv::Reader::from_path(&labels_path)
        .map_err(|e| Error::Format { what: "labels.csv", detail: e.to_string() })?;
    let mut labels = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format { what: "labels.csv", detail: e.to_string() })?;
        labels.push(parse_label_row(&row)?);
    }
    if labels.len() != manifest.frames.len() {
        return Err(Error::Format {
            what: "labels.csv",
            detail: format!(
                "{} label rows vs {} manifest frames",
                labels.len(),
                manifest.frames.len()
            ),
        });
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (record, (label, timestamp)) in manifest.frames.iter().zip(labels) {
        let path = root.join(&record.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if hex_digest(&bytes) != record.sha256 {
            return Err(Error::Checksum { path: record.path.clone() });
        }
        let image = decode_png(&bytes, manifest.image_height, manifest.image_width)?;
        frames.push(Frame {
            image,
            label,
            frame_index: record.frame_index,
            timestamp,
        });
    }
    Ok(Dataset { manifest, frames })
}

fn parse_label_row(row: &csv::StringRecord) -> Result<(PoseLabel, Option<Real>)> {
    if row.len() != 10 {
        return Err(Error::Format {
            what: "labels.csv",
            detail: format!("expected 10 columns, got {}", row.len()),
        });
    }
    let field = |i: usize| -> Result<Real> {
        row[i].parse::<Real>().map_err(|_| Error::Format {
            what: "labels.csv",
            detail: format!("column {} value {:?} is not a number", i, &row[i]),
        })
    };
    let label = PoseLabel {
        position: [field(2)?, field(3)?, field(4)?],
        attitude: Quaternion::new(field(5)?, field(6)?, field(7)?, field(8)?),
    };
    let timestamp = if row[9].is_empty() { None } else { Some(field(9)?) };
    Ok((label, timestamp))
}

fn encode_png(image: &Image) -> Result<Vec<u8>> {
    use image::codecs::png::PngEncoder;
    use image::ImageEncoder;
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(
            &image.to_bytes(),
            image.width as u32,
            image.height as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Format { what: "png", detail: e.to_string() })?;
    Ok(buf)
}

fn decode_png(bytes: &[u8], height: usize, width: usize) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format { what: "png", detail: e.to_string() })?
        .to_rgb8();
    if decoded.height() as usize != height || decoded.width() as usize != width {
        return Err(Error::dim(
            "png",
            format!(
                "{}x{} file does not match the {}x{} manifest size",
                decoded.width(),
                decoded.height(),
                width,
                height
            ),
        ));
    }
    Image::from_bytes(height, width, decoded.as_raw())
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::trajectory::TrajectorySpec;
    use tempfile::TempDir;

    fn small_dataset(seed: u64) -> Dataset {
        let model = SatelliteModel::mock_satellite();
        let specs = vec![
            TrajectorySpec::straight_approach([0.0, 0.0, 60.0], 6, seed),
            TrajectorySpec::straight_approach([15.0, -10.0, 60.0], 4, seed + 1),
        ];
        generate_dataset(
            &model,
            &specs,
            &CameraIntrinsics::desk_default(),
            [0.0, 0.0, -1.0],
            90,
            120,
            seed,
            0.8,
        )
        .unwrap()
    }

    #[test]
    fn split_counts_follow_the_rounded_fraction() {
        let ds = small_dataset(11);
        assert_eq!(ds.frames.len(), 10);
        assert_eq!(ds.manifest.train_indices().len(), 8);
        assert_eq!(ds.manifest.test_indices().len(), 2);
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let a = small_dataset(11);
        let b = small_dataset(11);
        assert_eq!(a.manifest, b.manifest);
        let c = small_dataset(12);
        let splits_a: Vec<Split> = a.manifest.frames.iter().map(|f| f.split).collect();
        let splits_c: Vec<Split> = c.manifest.frames.iter().map(|f| f.split).collect();
        assert_ne!(splits_a, splits_c);
    }

    #[test]
    fn write_then_load_round_trips_bitwise() {
        let ds = small_dataset(3);
        let dir = TempDir::new().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest, manifest);
        assert_eq!(loaded.frames.len(), ds.frames.len());
        for (orig, back) in ds.frames.iter().zip(loaded.frames.iter()) {
            assert_eq!(orig.image.data, back.image.data);
            assert_eq!(orig.label, back.label);
            assert_eq!(orig.frame_index, back.frame_index);
            assert_eq!(orig.timestamp, back.timestamp);
        }
    }

    #[test]
    fn rewriting_a_loaded_dataset_reproduces_the_manifest_bytes() {
        let ds = small_dataset(5);
        let dir_a = TempDir::new().unwrap();
        write_dataset(&ds, dir_a.path()).unwrap();
        let loaded = load_dataset(dir_a.path()).unwrap();
        let dir_b = TempDir::new().unwrap();
        write_dataset(&loaded, dir_b.path()).unwrap();
        let bytes_a = fs::read(dir_a.path().join("manifest.toml")).unwrap();
        let bytes_b = fs::read(dir_b.path().join("manifest.toml")).unwrap();
        assert_eq!(hex_digest(&bytes_a), hex_digest(&bytes_b));
    }

    #[test]
    fn corrupted_frame_is_reported_by_name() {
        let ds = small_dataset(7);
        let dir = TempDir::new().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        let victim = &manifest.frames[3].path;
        let full = dir.path().join(victim);
        let mut bytes = fs::read(&full).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&full, &bytes).unwrap();
        match load_dataset(dir.path()).unwrap_err() {
            Error::Checksum { path } => assert_eq!(&path, victim),
            other => panic!("expected checksum error, got {:?}", other),
        }
    }

    #[test]
    fn missing_frame_is_an_io_error() {
        let ds = small_dataset(7);
        let dir = TempDir::new().unwrap();
        let manifest = write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join(&manifest.frames[0].path)).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            Error::Io { .. }
        ));
    }

    #[test]
    fn wrong_manifest_version_is_rejected() {
        let ds = small_dataset(7);
        let dir = TempDir::new().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join("manifest.toml");
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("version = 1", "version = 99")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()).unwrap_err(),
            Error::Version { found: 99, .. }
        ));
    }

    #[test]
    fn large_split_example_counts() {
        // 0.8 of 32,500 frames puts exactly 26,000 in the training split.
        let n = 32_500usize;
        let train = (n as f64 * 0.8).round() as usize;
        assert_eq!(train, 26_000);
        assert_eq!(n - train, 6_500);
    }
}
