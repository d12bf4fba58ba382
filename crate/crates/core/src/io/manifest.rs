//! JSON manifests tying tensor files together: multi-scan response
//! datasets, labeled classification datasets, similarity matrices, and
//! network checkpoints. Loaders shape-check every referenced file before
//! any computation touches it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{atomic_write_json, read_json, read_tensor, write_tensor};
use crate::error::{CoreError, CoreResult};
use crate::rng::Rng;
use crate::similarity::{ResponseDataset, SimilarityKind, SimilarityMatrix};
use crate::tensor::{Layer, NetworkGraph, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanEntry {
    pub id: String,
    /// Tensor [neurons, total_trials]; columns grouped by stimulus in
    /// manifest order.
    pub responses: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthPaths {
    pub sigma_true: String,
    pub eta_true: String,
    /// Noiseless responses [neurons, n_stimuli].
    pub clean: String,
}

/// Generator ground truth loaded back into memory.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub sigma: Vec<f32>,
    pub eta: Vec<f32>,
    pub clean: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseManifest {
    pub schema_version: u32,
    /// Tensor [n_stimuli, h, w].
    pub stimuli: String,
    pub trial_counts: Vec<usize>,
    pub oracle: Vec<bool>,
    pub scans: Vec<ScanEntry>,
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthPaths>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.parent().unwrap_or_else(|| Path::new(".")).join(rel)
}

/// Writes stimuli, per-scan response tensors, optional ground truth, and
/// the manifest JSON under `dir`. All scans must share the stimulus set
/// and trial table.
pub fn save_response_scans(
    dir: &Path,
    scans: &[ResponseDataset],
    ground_truth: Option<&GroundTruth>,
    seed: Option<u64>,
) -> CoreResult<PathBuf> {
    let first = scans
        .first()
        .ok_or_else(|| CoreError::Data("save_response_scans: no scans".into()))?;
    for s in scans.iter().skip(1) {
        if s.trial_counts() != first.trial_counts() || s.n_neurons() != first.n_neurons() {
            return Err(CoreError::Data("scans disagree on trial table or neuron count".into()));
        }
    }
    std::fs::create_dir_all(dir)?;
    write_tensor(&dir.join("stimuli.nrtb"), &first.stimuli)?;

    let mut entries = Vec::new();
    for ds in scans {
        let file = format!("scan-{}.nrtb", ds.scan_id);
        write_tensor(&dir.join(&file), &responses_to_tensor(ds))?;
        entries.push(ScanEntry { id: ds.scan_id.clone(), responses: file });
    }

    let gt_paths = match ground_truth {
        Some(gt) => {
            write_tensor(&dir.join("sigma_true.nrtb"), &Tensor::from_vec(gt.sigma.clone()))?;
            write_tensor(&dir.join("eta_true.nrtb"), &Tensor::from_vec(gt.eta.clone()))?;
            write_tensor(&dir.join("clean.nrtb"), &gt.clean)?;
            Some(GroundTruthPaths {
                sigma_true: "sigma_true.nrtb".into(),
                eta_true: "eta_true.nrtb".into(),
                clean: "clean.nrtb".into(),
            })
        }
        None => None,
    };

    let manifest = ResponseManifest {
        schema_version: SCHEMA_VERSION,
        stimuli: "stimuli.nrtb".into(),
        trial_counts: first.trial_counts().to_vec(),
        oracle: first.oracle_flags().to_vec(),
        scans: entries,
        seed,
        ground_truth: gt_paths,
    };
    let path = dir.join("manifest.json");
    atomic_write_json(&path, &manifest)?;
    Ok(path)
}

fn responses_to_tensor(ds: &ResponseDataset) -> Tensor {
    let n = ds.n_neurons();
    let total: usize = ds.trial_counts().iter().sum();
    let mut data = vec![0.0f32; n * total];
    let mut col = 0;
    for i in 0..ds.n_stimuli() {
        for t in 0..ds.trial_count(i) {
            for (a, &v) in ds.response(i, t).iter().enumerate() {
                data[a * total + col] = v;
            }
            col += 1;
        }
    }
    Tensor::new(vec![n, total], data).expect("response tensor")
}

/// Loads every scan in the manifest, validating tensor shapes against the
/// trial table before constructing datasets.
pub fn load_response_scans(
    manifest_path: &Path,
) -> CoreResult<(Vec<ResponseDataset>, Option<GroundTruth>)> {
    let manifest: ResponseManifest = read_json(manifest_path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Format(format!(
            "manifest schema {} unsupported",
            manifest.schema_version
        )));
    }
    let stimuli = read_tensor(&resolve(manifest_path, &manifest.stimuli))?;
    if stimuli.shape().len() != 3 || stimuli.shape()[0] != manifest.trial_counts.len() {
        return Err(CoreError::Shape(format!(
            "stimuli {:?} vs {} stimuli in trial table",
            stimuli.shape(),
            manifest.trial_counts.len()
        )));
    }
    if manifest.oracle.len() != manifest.trial_counts.len() {
        return Err(CoreError::Data("oracle flag table length mismatch".into()));
    }
    let total: usize = manifest.trial_counts.iter().sum();

    let mut scans = Vec::with_capacity(manifest.scans.len());
    for entry in &manifest.scans {
        let resp = read_tensor(&resolve(manifest_path, &entry.responses))?;
        if resp.shape().len() != 2 || resp.shape()[1] != total {
            return Err(CoreError::Shape(format!(
                "scan {}: responses {:?}, trial table implies {total} columns",
                entry.id,
                resp.shape()
            )));
        }
        let n = resp.shape()[0];
        let mut per_stim = Vec::with_capacity(manifest.trial_counts.len());
        let mut col = 0;
        for &t in &manifest.trial_counts {
            let mut rows = vec![0.0f32; t * n];
            for trial in 0..t {
                for a in 0..n {
                    rows[trial * n + a] = resp.data()[a * total + col + trial];
                }
            }
            per_stim.push(rows);
            col += t;
        }
        scans.push(ResponseDataset::new(
            entry.id.clone(),
            stimuli.clone(),
            per_stim,
            manifest.trial_counts.clone(),
            manifest.oracle.clone(),
            n,
        )?);
    }

    let gt = match &manifest.ground_truth {
        Some(paths) => {
            let sigma = read_tensor(&resolve(manifest_path, &paths.sigma_true))?;
            let eta = read_tensor(&resolve(manifest_path, &paths.eta_true))?;
            let clean = read_tensor(&resolve(manifest_path, &paths.clean))?;
            let n = scans.first().map(|s| s.n_neurons()).unwrap_or(0);
            if sigma.numel() != n || eta.numel() != n {
                return Err(CoreError::Shape("ground truth sigma/eta length mismatch".into()));
            }
            if clean.shape() != [n, manifest.trial_counts.len()] {
                return Err(CoreError::Shape(format!(
                    "ground truth clean {:?} vs [{n}, {}]",
                    clean.shape(),
                    manifest.trial_counts.len()
                )));
            }
            Some(GroundTruth {
                sigma: sigma.data().to_vec(),
                eta: eta.data().to_vec(),
                clean,
            })
        }
        None => None,
    };
    Ok((scans, gt))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassManifest {
    pub schema_version: u32,
    pub classes: usize,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub seed: Option<u64>,
}

/// Labeled grayscale image dataset with a train/test split.
#[derive(Debug, Clone)]
pub struct ClassDataset {
    pub classes: usize,
    pub train_images: Tensor,
    pub train_labels: Vec<usize>,
    pub test_images: Tensor,
    pub test_labels: Vec<usize>,
}

impl ClassDataset {
    pub fn validate(&self) -> CoreResult<()> {
        for (what, imgs, labels) in [
            ("train", &self.train_images, &self.train_labels),
            ("test", &self.test_images, &self.test_labels),
        ] {
            if imgs.shape().len() != 3 || imgs.shape()[0] != labels.len() {
                return Err(CoreError::Shape(format!(
                    "{what}: images {:?} vs {} labels",
                    imgs.shape(),
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
                return Err(CoreError::Data(format!(
                    "{what}: label {bad} out of {} classes",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.train_images.shape();
        (s[1], s[2])
    }
}

fn labels_to_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_vec(labels.iter().map(|&l| l as f32).collect())
}

fn labels_from_tensor(t: &Tensor, classes: usize, what: &str) -> CoreResult<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            let l = v as usize;
            if v.fract() != 0.0 || v < 0.0 || l >= classes {
                Err(CoreError::Data(format!("{what}: label value {v} invalid for {classes} classes")))
            } else {
                Ok(l)
            }
        })
        .collect()
}

pub fn save_class_dataset(dir: &Path, ds: &ClassDataset, seed: Option<u64>) -> CoreResult<PathBuf> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    write_tensor(&dir.join("train_images.nrtb"), &ds.train_images)?;
    write_tensor(&dir.join("train_labels.nrtb"), &labels_to_tensor(&ds.train_labels))?;
    write_tensor(&dir.join("test_images.nrtb"), &ds.test_images)?;
    write_tensor(&dir.join("test_labels.nrtb"), &labels_to_tensor(&ds.test_labels))?;
    let manifest = ClassManifest {
        schema_version: SCHEMA_VERSION,
        classes: ds.classes,
        train_images: "train_images.nrtb".into(),
        train_labels: "train_labels.nrtb".into(),
        test_images: "test_images.nrtb".into(),
        test_labels: "test_labels.nrtb".into(),
        seed,
    };
    let path = dir.join("manifest.json");
    atomic_write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_class_dataset(manifest_path: &Path) -> CoreResult<ClassDataset> {
    let m: ClassManifest = read_json(manifest_path)?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Format(format!("manifest schema {} unsupported", m.schema_version)));
    }
    let train_images = read_tensor(&resolve(manifest_path, &m.train_images))?;
    let train_labels =
        labels_from_tensor(&read_tensor(&resolve(manifest_path, &m.train_labels))?, m.classes, "train")?;
    let test_images = read_tensor(&resolve(manifest_path, &m.test_images))?;
    let test_labels =
        labels_from_tensor(&read_tensor(&resolve(manifest_path, &m.test_labels))?, m.classes, "test")?;
    let ds = ClassDataset { classes: m.classes, train_images, train_labels, test_images, test_labels };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityIndex {
    pub schema_version: u32,
    pub kind: SimilarityKind,
    pub stimuli: Vec<usize>,
    pub matrix: String,
}

/// Writes `<base>.json` (index) and `<base>.nrtb` (matrix values).
pub fn save_similarity(base: &Path, m: &SimilarityMatrix) -> CoreResult<PathBuf> {
    let nrtb = base.with_extension("nrtb");
    write_tensor(&nrtb, &m.to_tensor())?;
    let index = SimilarityIndex {
        schema_version: SCHEMA_VERSION,
        kind: m.kind,
        stimuli: m.stimuli.clone(),
        matrix: nrtb
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let json = base.with_extension("json");
    atomic_write_json(&json, &index)?;
    Ok(json)
}

pub fn load_similarity(index_path: &Path) -> CoreResult<SimilarityMatrix> {
    let idx: SimilarityIndex = read_json(index_path)?;
    if idx.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Format(format!("similarity schema {} unsupported", idx.schema_version)));
    }
    let t = read_tensor(&resolve(index_path, &idx.matrix))?;
    let n = idx.stimuli.len();
    if t.shape() != [n, n] {
        return Err(CoreError::Shape(format!(
            "similarity matrix {:?} vs {n} stimuli",
            t.shape()
        )));
    }
    let m = SimilarityMatrix::from_values(idx.kind, idx.stimuli, t.data().to_vec())?;
    m.validate(false)?;
    Ok(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkIndex {
    schema_version: u32,
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    taps: Vec<usize>,
    params: Vec<ParamFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamFile {
    name: String,
    file: String,
}

/// Checkpoint: architecture JSON plus one tensor file per named parameter
/// (including extras like the gamma logits).
pub fn save_network(dir: &Path, net: &NetworkGraph) -> CoreResult<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for (name, tensor) in net.params().iter() {
        let file = format!("{name}.nrtb");
        write_tensor(&dir.join(&file), tensor)?;
        params.push(ParamFile { name: name.to_string(), file });
    }
    let index = NetworkIndex {
        schema_version: SCHEMA_VERSION,
        input_shape: net.input_shape(),
        layers: net.layers().to_vec(),
        taps: net.taps().to_vec(),
        params,
    };
    let path = dir.join("index.json");
    atomic_write_json(&path, &index)?;
    Ok(path)
}

pub fn load_network(dir: &Path) -> CoreResult<NetworkGraph> {
    let index: NetworkIndex = read_json(&dir.join("index.json"))?;
    if index.schema_version != SCHEMA_VERSION {
        return Err(CoreError::Format(format!(
            "checkpoint schema {} unsupported",
            index.schema_version
        )));
    }
    // Parameter values are overwritten below; the init RNG is irrelevant.
    let mut rng = Rng::new(0);
    let mut net = NetworkGraph::new(index.input_shape, index.layers, index.taps, &mut rng)?;
    for p in &index.params {
        let t = read_tensor(&dir.join(&p.file))?;
        if net.params().get(&p.name).is_some() {
            net.params_mut().set(&p.name, t)?;
        } else {
            net.params_mut().insert(&p.name, t)?;
        }
    }
    Ok(net)
}
