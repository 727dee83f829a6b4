//! Paired PET/CT volumes: the `MMV1` file format, NDJSON manifests,
//! stratified fold planning and the XOR synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const VOLUME_MAGIC: &[u8; 4] = b"MMV1";
const HEADER_LEN: usize = 16;
const VARIANCE_FLOOR: f64 = 1e-12;

/// A 3D scalar field, indexed `(x * Y + y) * Z + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], voxels: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Data(format!("volume dims {dims:?} contain a zero")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::Data(format!(
                "volume dims {dims:?} need {} voxels, got {}",
                dims.iter().product::<usize>(),
                voxels.len()
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("volume contains non-finite voxels".into()));
        }
        Ok(Self { dims, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.voxels.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an `MMV1` image; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let dims = parse_header(bytes, origin)?;
        let n: usize = dims.iter().product();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() < 8 * n {
            return Err(Error::Truncated {
                path: origin.to_path_buf(),
                detail: format!("{dims:?} needs {} payload bytes, found {}", 8 * n, payload.len()),
            });
        }
        if payload.len() > 8 * n {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes after the voxel payload",
                origin.display(),
                payload.len() - 8 * n
            )));
        }
        let voxels = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, voxels).map_err(|e| Error::Data(format!("{}: {e}", origin.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Dims from the header alone, checking the file is long enough.
    pub fn read_dims(path: impl AsRef<Path>) -> Result<[usize; 3]> {
        let path = path.as_ref();
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = Vec::with_capacity(HEADER_LEN);
        file.by_ref()
            .take(HEADER_LEN as u64)
            .read_to_end(&mut header)
            .map_err(|e| Error::io(path, e))?;
        let dims = parse_header(&header, path)?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
        let want = HEADER_LEN + 8 * dims.iter().product::<usize>();
        if len < want {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("{dims:?} needs {want} bytes, file has {len}"),
            });
        }
        Ok(dims)
    }
}

fn parse_header(bytes: &[u8], origin: &Path) -> Result<[usize; 3]> {
    if bytes.len() < 4 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
            expected: "MMV1",
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: origin.to_path_buf(),
            detail: format!("header needs {HEADER_LEN} bytes, found {}", bytes.len()),
        });
    }
    let raw: [u32; 3] = std::array::from_fn(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()));
    if raw.contains(&0) {
        return Err(Error::ZeroDims {
            path: origin.to_path_buf(),
            dims: raw,
        });
    }
    Ok(raw.map(|d| d as usize))
}

/// Zero mean, unit variance; constant volumes become all zeros.
pub fn normalize_volume(vol: &Volume) -> Volume {
    let n = vol.voxels.len() as f64;
    let mean = vol.voxels.iter().sum::<f64>() / n;
    let var = vol.voxels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let voxels = if var < VARIANCE_FLOOR {
        vec![0.0; vol.voxels.len()]
    } else {
        let inv = var.sqrt().recip();
        vol.voxels.iter().map(|v| (v - mean) * inv).collect()
    };
    Volume { dims: vol.dims, voxels }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedStudy {
    pub id: String,
    pub pet: Volume,
    pub ct: Volume,
    pub label: u8,
}

impl PairedStudy {
    pub fn new(id: impl Into<String>, pet: Volume, ct: Volume, label: u8) -> Result<Self> {
        let id = id.into();
        if pet.dims != ct.dims {
            return Err(Error::DimMismatch {
                id,
                pet: pet.dims,
                ct: ct.dims,
            });
        }
        if label > 1 {
            return Err(Error::LabelDomain {
                id,
                label: label.into(),
            });
        }
        Ok(Self { id, pet, ct, label })
    }
}

/// A study ready for the network: both volumes standardized and shaped
/// `[1, 1, X, Y, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub pet: Tensor,
    pub ct: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn from_study(study: &PairedStudy) -> Self {
        let tensor = |v: &Volume| {
            let [x, y, z] = v.dims;
            Tensor::new(vec![1, 1, x, y, z], normalize_volume(v).voxels).expect("volume dims are positive")
        };
        Self {
            id: study.id.clone(),
            pet: tensor(&study.pet),
            ct: tensor(&study.ct),
            label: study.label.into(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.pet.shape();
        [s[2], s[3], s[4]]
    }
}

// ---------------------------------------------------------------- folds

/// Stratified assignment of study ids to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids held out in `fold`, sorted.
    pub fn test_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|&(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Ids used for training when `fold` is held out, sorted.
    pub fn train_ids(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|&(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Deals each class, shuffled by `seed`, round-robin over the folds. The
/// dealing position carries over from one class to the next, which keeps
/// fold sizes within one of each other.
pub fn make_folds(items: &[(String, u8)], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = items.len();
    if k < 2 {
        return Err(Error::Config(format!("k = {k}: cross-validation needs at least 2 folds")));
    }
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds the {n} available studies")));
    }
    let mut by_class: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    let mut seen = BTreeSet::new();
    for (id, label) in items {
        if !seen.insert(id.as_str()) {
            return Err(Error::Data(format!("duplicate study id `{id}`")));
        }
        match label {
            0 | 1 => by_class[*label as usize].push(id),
            _ => {
                return Err(Error::LabelDomain {
                    id: id.clone(),
                    label: (*label).into(),
                })
            }
        }
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::Data("fold planning needs both classes present".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for class in &mut by_class {
        class.sort_unstable();
        class.shuffle(&mut rng);
        for id in class.iter() {
            assignments.insert(id.to_string(), next);
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, seed, assignments })
}

/// Seeded stratified split into two halves; an odd class count puts the
/// extra member in the first half. Returns indices into `labels`.
pub fn stratified_halves(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    for c in classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let cut = idx.len().div_ceil(2);
        first.extend_from_slice(&idx[..cut]);
        second.extend_from_slice(&idx[cut..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

// ------------------------------------------------------------ synthetic

/// Per-study record of what the generator planted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truth {
    pub b_pet: bool,
    pub b_ct: bool,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSet {
    pub studies: Vec<PairedStudy>,
    pub truth: Vec<Truth>,
}

/// Blob center as a fraction of each axis.
pub const PET_BLOB_CENTER: [f64; 3] = [0.375, 0.5, 0.5];
pub const CT_BLOB_CENTER: [f64; 3] = [0.625, 0.5, 0.5];
/// Blob width as a fraction of the shortest axis.
pub const BLOB_SIGMA: f64 = 0.125;
pub const BLOB_AMPLITUDE: f64 = 1.0;

/// Unit-amplitude Gaussian blob centered at `center` (fractions of each axis).
pub fn blob_template(dims: [usize; 3], center: [f64; 3]) -> Vec<f64> {
    let c: [f64; 3] = std::array::from_fn(|i| center[i] * dims[i] as f64);
    let sigma = BLOB_SIGMA * *dims.iter().min().unwrap() as f64;
    let denom = 2.0 * sigma * sigma;
    let mut out = Vec::with_capacity(dims.iter().product());
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                out.push((-d2 / denom).exp());
            }
        }
    }
    out
}

/// `n` studies whose label is `b_pet XOR b_ct`: a blob in either volume
/// alone says nothing about the label. Exactly `n / 2` studies per class.
pub fn synth_generate(n: usize, dims: [usize; 3], noise_sigma: f64, seed: u64) -> Result<SynthSet> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Config(format!("n = {n}: the generator needs a positive even study count")));
    }
    if let Some(d) = dims.iter().find(|&&d| d < 8) {
        return Err(Error::Config(format!("dimension {d} is below the minimum of 8 voxels per axis")));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {noise_sigma} must be finite and non-negative")));
    }
    let pet_blob = blob_template(dims, PET_BLOB_CENTER);
    let ct_blob = blob_template(dims, CT_BLOB_CENTER);
    let noise = Normal::new(0.0, noise_sigma).expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining = [n / 2, n / 2];
    let width = (n - 1).to_string().len().max(4);

    let mut studies = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let (b_pet, b_ct) = loop {
            let (p, c) = (rng.random::<bool>(), rng.random::<bool>());
            if remaining[(p ^ c) as usize] > 0 {
                break (p, c);
            }
        };
        let label = (b_pet ^ b_ct) as u8;
        remaining[label as usize] -= 1;
        let mut volume = |blob: &[f64], present: bool| {
            let voxels = blob
                .iter()
                .map(|&g| if present { BLOB_AMPLITUDE * g } else { 0.0 } + noise.sample(&mut rng))
                .collect();
            Volume { dims, voxels }
        };
        let pet = volume(&pet_blob, b_pet);
        let ct = volume(&ct_blob, b_ct);
        studies.push(PairedStudy::new(format!("study_{i:0width$}"), pet, ct, label)?);
        truth.push(Truth { b_pet, b_ct, label });
    }
    Ok(SynthSet { studies, truth })
}

// ------------------------------------------------------------- manifest

/// One manifest line as stored on disk; paths relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    pet_path: String,
    ct_path: String,
    label: i64,
}

/// A validated manifest entry with resolved paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyRef {
    pub id: String,
    pub pet_path: PathBuf,
    pub ct_path: PathBuf,
    pub label: u8,
    pub dims: [usize; 3],
}

impl StudyRef {
    pub fn load(&self) -> Result<PairedStudy> {
        let pet = Volume::read(&self.pet_path)?;
        let ct = Volume::read(&self.ct_path)?;
        PairedStudy::new(self.id.clone(), pet, ct, self.label)
    }
}

/// Reads an NDJSON manifest and checks every referenced volume header.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<StudyRef>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if !ids.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate study id `{}`", rec.id)));
        }
        if !(0..=1).contains(&rec.label) {
            return Err(Error::LabelDomain {
                id: rec.id,
                label: rec.label,
            });
        }
        let pet_path = base.join(&rec.pet_path);
        let ct_path = base.join(&rec.ct_path);
        let pet = Volume::read_dims(&pet_path)?;
        let ct = Volume::read_dims(&ct_path)?;
        if pet != ct {
            return Err(Error::DimMismatch { id: rec.id, pet, ct });
        }
        out.push(StudyRef {
            id: rec.id,
            pet_path,
            ct_path,
            label: rec.label as u8,
            dims: pet,
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            line: 0,
            reason: "manifest lists no studies".into(),
        });
    }
    Ok(out)
}

/// Loads every study in parallel, preserving manifest order.
pub fn load_studies(refs: &[StudyRef]) -> Result<Vec<PairedStudy>> {
    refs.par_iter().map(StudyRef::load).collect()
}

/// Writes volumes under `dir/volumes/`, `dir/manifest.ndjson` and the
/// `dir/ground_truth.csv` sidecar. Returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, set: &SynthSet) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut manifest = String::new();
    let mut truth = String::from("id,b_pet,b_ct,label\n");
    for (s, t) in set.studies.iter().zip(&set.truth) {
        let pet_rel = format!("volumes/{}_pet.mmv", s.id);
        let ct_rel = format!("volumes/{}_ct.mmv", s.id);
        s.pet.write(dir.join(&pet_rel))?;
        s.ct.write(dir.join(&ct_rel))?;
        let rec = ManifestRecord {
            id: s.id.clone(),
            pet_path: pet_rel,
            ct_path: ct_rel,
            label: s.label.into(),
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
        truth.push_str(&format!("{},{},{},{}\n", s.id, t.b_pet as u8, t.b_ct as u8, t.label));
    }
    let manifest_path = dir.join("manifest.ndjson");
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    let truth_path = dir.join("ground_truth.csv");
    fs::write(&truth_path, truth).map_err(|e| Error::io(&truth_path, e))?;
    Ok(manifest_path)
}
