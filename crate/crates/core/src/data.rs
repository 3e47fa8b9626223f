//! Datasets and checkpoints.
//!
//! MNIST is read from uncompressed IDX files. Synthetic blob and two-moon
//! datasets provide small problems for tests. Checkpoints are JSON documents
//! whose parameters are stored either as shortest round-trip decimals or as
//! base64 of little-endian `f64` bytes; both reproduce every bit.
//!
//! # Checkpoint schema
//!
//! ```json
//! {
//!   "format_version": "advcorr-ckpt-1",
//!   "encoding": "decimal" | "base64_le_f64",
//!   "architecture": { "dims": [784, 32, 10], "activations": ["relu", "identity"] },
//!   "layers": [ { "weights": [..] | "<base64>", "biases": [..] | "<base64>" }, ... ],
//!   "metadata": { "seed": 0, "config": {..}, "dataset_checksum": "<hex>" },
//!   "checksum": "<hex sha256 of the network>"
//! }
//! ```

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Architecture, DenseLayer, LabeledDataset, Network};

pub const CHECKPOINT_VERSION: &str = "advcorr-ckpt-1";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

fn parse_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| parse_error(path, bytes.len(), "file truncated inside the header"))?;
    Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(parse_error(
            path,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        ));
    }
    Ok(())
}

/// Parsed IDX image file: `count` images of `rows × cols` pixels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

/// Parses an IDX3 image file. `path` is only used in error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let payload = &bytes[16..];
    let expected = count * rows * cols;
    if payload.len() < expected {
        return Err(parse_error(
            path,
            bytes.len(),
            format!(
                "file truncated: header promises {expected} pixel bytes, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > expected {
        return Err(parse_error(
            path,
            16 + expected,
            format!(
                "{} trailing bytes after the last image",
                payload.len() - expected
            ),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.iter().map(|&b| f64::from(b) / 255.0).collect(),
    })
}

/// Parses an IDX1 label file. Labels must be below `num_classes`.
pub fn parse_idx_labels(bytes: &[u8], path: &Path, num_classes: usize) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(parse_error(
            path,
            bytes.len(),
            format!(
                "file truncated: header promises {count} labels, found {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > count {
        return Err(parse_error(
            path,
            8 + count,
            format!(
                "{} trailing bytes after the last label",
                payload.len() - count
            ),
        ));
    }
    payload
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let label = usize::from(b);
            if label >= num_classes {
                Err(parse_error(
                    path,
                    8 + i,
                    format!("label {label} out of range"),
                ))
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// Pairs parsed images with parsed labels.
pub fn dataset_from_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
) -> Result<LabeledDataset> {
    let imgs = parse_idx_images(images, images_path)?;
    let labels = parse_idx_labels(labels, labels_path, MNIST_CLASSES)?;
    if labels.len() != imgs.count {
        return Err(parse_error(
            labels_path,
            4,
            format!("{} labels for {} images", labels.len(), imgs.count),
        ));
    }
    LabeledDataset::from_flat(imgs.rows * imgs.cols, MNIST_CLASSES, imgs.pixels, labels)
}

/// Reads an MNIST-style image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    dataset_from_idx(&images, images_path, &labels, labels_path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    GaussianBlobs { num_classes: usize },
    TwoMoons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub n_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    pub input_dim: usize,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(
                "noise_std must be finite and nonnegative".into(),
            ));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        match self.kind {
            SyntheticKind::GaussianBlobs { num_classes } => {
                if num_classes < 2 {
                    return Err(Error::Config("blobs need at least two classes".into()));
                }
                if self.input_dim == 1 && num_classes > 2 {
                    return Err(Error::Config(
                        "more than two blobs need at least two input dimensions".into(),
                    ));
                }
            }
            SyntheticKind::TwoMoons => {
                if self.input_dim < 2 {
                    return Err(Error::Config(
                        "two moons need at least two input dimensions".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            SyntheticKind::GaussianBlobs { num_classes } => num_classes,
            SyntheticKind::TwoMoons => 2,
        }
    }
}

/// Blob centre of class `c` before squashing: points on the unit circle
/// spread over the coordinate pairs.
fn blob_center(c: usize, k: usize, dim: usize) -> Vec<f64> {
    let theta = std::f64::consts::TAU * c as f64 / k as f64;
    (0..dim)
        .map(|j| match j % 4 {
            0 => theta.cos(),
            1 => theta.sin(),
            2 => -theta.cos(),
            _ => -theta.sin(),
        })
        .collect()
}

/// Deterministic synthetic classification data in `[0, 1]^input_dim`.
///
/// Points are generated around centres in raw coordinates and then mapped
/// into the unit cube by one affine map shared by all coordinates, so
/// zero-noise blobs sit exactly on their (mapped) centres. Point `i` has
/// label `i mod num_classes`.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let k = cfg.num_classes();
    let dim = cfg.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let n = cfg.n_per_class * k;
    let mut raw = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    // Raw-coordinate centre of the whole picture.
    let origin: Vec<f64> = match cfg.kind {
        SyntheticKind::GaussianBlobs { .. } => vec![0.0; dim],
        SyntheticKind::TwoMoons => {
            let mut o = vec![0.0; dim];
            o[0] = 0.5;
            o[1] = 0.25;
            o
        }
    };
    for i in 0..n {
        let c = i % k;
        let base: Vec<f64> = match cfg.kind {
            SyntheticKind::GaussianBlobs { .. } => blob_center(c, k, dim),
            SyntheticKind::TwoMoons => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                let mut p = vec![0.0; dim];
                if c == 0 {
                    p[0] = t.cos();
                    p[1] = t.sin();
                } else {
                    p[0] = 1.0 - t.cos();
                    p[1] = 0.5 - t.sin();
                }
                p
            }
        };
        for (j, b) in base.into_iter().enumerate() {
            let noise = if cfg.noise_std > 0.0 {
                cfg.noise_std * normal.sample(&mut rng)
            } else {
                0.0
            };
            raw.push(b + noise - origin[j]);
        }
        labels.push(c);
    }

    let spread = raw.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let features = raw.iter().map(|v| 0.5 + 0.5 * v / spread).collect();
    LabeledDataset::from_flat(dim, k, features, labels)
}

/// SHA-256 over the architecture and the little-endian parameter bytes.
pub fn network_checksum(net: &Network) -> String {
    let mut h = Sha256::new();
    for d in net.architecture().dims() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in net.to_params().values() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 over the dataset shape, features and labels.
pub fn dataset_checksum(data: &LabeledDataset) -> String {
    let mut h = Sha256::new();
    for n in [data.len(), data.input_dim(), data.num_classes()] {
        h.update((n as u64).to_le_bytes());
    }
    for v in data.features() {
        h.update(v.to_le_bytes());
    }
    for &y in data.labels() {
        h.update((y as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FloatEncoding {
    #[default]
    Decimal,
    Base64LeF64,
}

/// Provenance stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub dataset_checksum: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureRecord {
    dims: Vec<usize>,
    activations: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum FloatArray {
    Decimal(Vec<f64>),
    Base64(String),
}

impl FloatArray {
    fn encode(values: &[f64], encoding: FloatEncoding) -> Self {
        match encoding {
            FloatEncoding::Decimal => FloatArray::Decimal(values.to_vec()),
            FloatEncoding::Base64LeF64 => {
                let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                FloatArray::Base64(BASE64.encode(bytes))
            }
        }
    }

    fn decode(self, encoding: FloatEncoding) -> Result<Vec<f64>> {
        match (self, encoding) {
            (FloatArray::Decimal(v), FloatEncoding::Decimal) => Ok(v),
            (FloatArray::Base64(s), FloatEncoding::Base64LeF64) => {
                let bytes = BASE64
                    .decode(s)
                    .map_err(|e| Error::Checkpoint(format!("corrupt base64 payload: {e}")))?;
                if bytes.len() % 8 != 0 {
                    return Err(Error::Checkpoint(format!(
                        "payload of {} bytes is not a whole number of f64 values",
                        bytes.len()
                    )));
                }
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                    .collect())
            }
            _ => Err(Error::Checkpoint(
                "parameter array does not match the declared encoding".into(),
            )),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    weights: FloatArray,
    biases: FloatArray,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: String,
    encoding: FloatEncoding,
    architecture: ArchitectureRecord,
    layers: Vec<LayerRecord>,
    metadata: CheckpointMeta,
    checksum: String,
}

/// A network together with its recorded provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: CheckpointMeta,
    pub checksum: String,
}

fn activation_tags(num_layers: usize) -> Vec<String> {
    (0..num_layers)
        .map(|l| {
            if l + 1 == num_layers {
                "identity"
            } else {
                "relu"
            }
            .to_string()
        })
        .collect()
}

pub fn checkpoint_to_json(
    net: &Network,
    meta: &CheckpointMeta,
    encoding: FloatEncoding,
) -> Result<String> {
    let arch = net.architecture();
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION.to_string(),
        encoding,
        architecture: ArchitectureRecord {
            activations: activation_tags(arch.num_layers()),
            dims: arch.dims().to_vec(),
        },
        layers: net
            .layers()
            .iter()
            .map(|l| LayerRecord {
                weights: FloatArray::encode(l.weights(), encoding),
                biases: FloatArray::encode(l.biases(), encoding),
            })
            .collect(),
        metadata: meta.clone(),
        checksum: network_checksum(net),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(CHECKPOINT_VERSION) => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {other:?}, expected {CHECKPOINT_VERSION:?}"
            )))
        }
        None => return Err(Error::Checkpoint("missing format_version".into())),
    }
    let file: CheckpointFile = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;

    let arch = Architecture::new(file.architecture.dims)?;
    if file.architecture.activations != activation_tags(arch.num_layers()) {
        return Err(Error::Checkpoint(
            "only relu hidden layers with identity output are supported".into(),
        ));
    }
    if file.layers.len() != arch.num_layers() {
        return Err(Error::Checkpoint(format!(
            "{} layer records for {} layers",
            file.layers.len(),
            arch.num_layers()
        )));
    }
    let layers = file
        .layers
        .into_iter()
        .zip(arch.dims().windows(2))
        .map(|(rec, pair)| {
            let weights = rec.weights.decode(file.encoding)?;
            let biases = rec.biases.decode(file.encoding)?;
            if weights.len() != pair[0] * pair[1] || biases.len() != pair[1] {
                return Err(Error::Checkpoint(format!(
                    "layer {}x{} has {} weights and {} biases",
                    pair[1],
                    pair[0],
                    weights.len(),
                    biases.len()
                )));
            }
            DenseLayer::new(pair[0], pair[1], weights, biases)
        })
        .collect::<Result<Vec<_>>>()?;
    let network = Network::new(layers)?;
    let checksum = network_checksum(&network);
    if checksum != file.checksum {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: file records {}, parameters hash to {checksum}",
            file.checksum
        )));
    }
    Ok(Checkpoint {
        network,
        meta: file.metadata,
        checksum,
    })
}

pub fn save_checkpoint(
    net: &Network,
    meta: &CheckpointMeta,
    encoding: FloatEncoding,
    path: &Path,
) -> Result<()> {
    let text = checkpoint_to_json(net, meta, encoding)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend(v.to_be_bytes());
        }
        b.extend(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(IDX_LABELS_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    fn p() -> &'static Path {
        Path::new("fixture")
    }

    #[test]
    fn two_image_fixture_parses_exactly() {
        let images = idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 204]);
        let labels = idx_labels(&[3, 7]);
        let data = dataset_from_idx(&images, p(), &labels, p()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.input(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(data.input(1), &[1.0, 0.0, 0.0, 0.8]);
        assert_eq!(data.labels(), &[3, 7]);
    }

    #[test]
    fn truncated_images_report_offset() {
        let images = idx_images(2, 2, 2, &[0; 7]);
        match parse_idx_images(&images, p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_idx_images(&images[..10], p()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_bad_label() {
        let mut images = idx_images(1, 1, 1, &[0]);
        images[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&images, p()),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[1, 10]), p(), 10),
            Err(Error::Parse { offset: 9, .. })
        ));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let images = idx_images(1, 1, 2, &[1, 2]);
        let labels = idx_labels(&[0, 1]);
        assert!(matches!(
            dataset_from_idx(&images, p(), &labels, p()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn zero_noise_blobs_sit_on_centres() {
        let cfg = SyntheticConfig {
            kind: SyntheticKind::GaussianBlobs { num_classes: 3 },
            n_per_class: 4,
            noise_std: 0.0,
            seed: 9,
            input_dim: 2,
        };
        let data = make_synthetic(&cfg).unwrap();
        assert_eq!(data.len(), 12);
        for (x, y) in data.iter() {
            let c = blob_center(y, 3, 2);
            for (xi, ci) in x.iter().zip(&c) {
                assert_eq!(*xi, 0.5 + 0.5 * ci);
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_in_unit_cube() {
        for kind in [
            SyntheticKind::TwoMoons,
            SyntheticKind::GaussianBlobs { num_classes: 4 },
        ] {
            let cfg = SyntheticConfig {
                kind,
                n_per_class: 50,
                noise_std: 0.3,
                seed: 1,
                input_dim: 5,
            };
            let a = make_synthetic(&cfg).unwrap();
            assert_eq!(a, make_synthetic(&cfg).unwrap());
            assert!(a.features().iter().all(|v| (0.0..=1.0).contains(v)));
            let other = make_synthetic(&SyntheticConfig { seed: 2, ..cfg }).unwrap();
            assert_ne!(a, other);
        }
    }

    #[test]
    fn synthetic_config_errors() {
        let base = SyntheticConfig {
            kind: SyntheticKind::TwoMoons,
            n_per_class: 1,
            noise_std: 0.0,
            seed: 0,
            input_dim: 2,
        };
        assert!(make_synthetic(&SyntheticConfig {
            n_per_class: 0,
            ..base.clone()
        })
        .is_err());
        assert!(make_synthetic(&SyntheticConfig {
            noise_std: -1.0,
            ..base.clone()
        })
        .is_err());
        assert!(make_synthetic(&SyntheticConfig {
            input_dim: 1,
            ..base
        })
        .is_err());
    }

    fn sample_net() -> Network {
        Network::new(vec![
            DenseLayer::new(
                2,
                2,
                vec![0.1, -0.0, f64::MIN_POSITIVE / 8.0, 1e300],
                vec![1.0 / 3.0, -2.5],
            )
            .unwrap(),
            DenseLayer::new(2, 1, vec![std::f64::consts::PI, -1e-310], vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    fn bits(net: &Network) -> Vec<u64> {
        net.to_params()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = sample_net();
        let meta = CheckpointMeta {
            seed: Some(4),
            config: serde_json::json!({"epochs": 2}),
            dataset_checksum: Some("ff".into()),
        };
        for enc in [FloatEncoding::Decimal, FloatEncoding::Base64LeF64] {
            let text = checkpoint_to_json(&net, &meta, enc).unwrap();
            let ck = checkpoint_from_json(&text).unwrap();
            assert_eq!(bits(&ck.network), bits(&net));
            assert_eq!(ck.meta, meta);
            assert_eq!(ck.checksum, network_checksum(&net));
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = checkpoint_to_json(
            &sample_net(),
            &CheckpointMeta::default(),
            FloatEncoding::Decimal,
        )
        .unwrap()
        .replace(CHECKPOINT_VERSION, "advcorr-ckpt-0");
        match checkpoint_from_json(&text) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("advcorr-ckpt-0")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn tampered_parameters_fail_checksum() {
        let text = checkpoint_to_json(
            &sample_net(),
            &CheckpointMeta::default(),
            FloatEncoding::Decimal,
        )
        .unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["layers"][1]["biases"][0] = serde_json::json!(0.5);
        let tampered = serde_json::to_string(&value).unwrap();
        assert!(
            matches!(checkpoint_from_json(&tampered), Err(Error::Checkpoint(m)) if m.contains("checksum"))
        );
    }

    #[test]
    fn checksum_is_parameter_sensitive() {
        let net = sample_net();
        let mut other = net.clone();
        other.layers_mut()[1].biases_mut()[0] = f64::from_bits(1);
        assert_ne!(network_checksum(&net), network_checksum(&other));
    }
}
