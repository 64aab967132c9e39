//! Synthetic hazy datasets from clean + depth pairs, the on-disk layout and
//! manifest, and checksum-verified loading.
//!
//! Layout under the output root:
//!
//! ```text
//! clean/<scene>.png          clean image
//! depth/<scene>.fmap         depth raster
//! hazy/<scene>_v<k>.png      hazy image of variation k
//! trans/<scene>_v<k>.fmap    transmission map
//! airlight/<scene>_v<k>.fmap constant airlight map (3 channels)
//! manifest.jsonl             one SampleRecord per line
//! ```

mod fmap;
mod procedural;

pub use fmap::{read_fmap, write_fmap, Raster, FMAP_HEADER_LEN, FMAP_MAGIC, FMAP_VERSION};
pub use procedural::{procedural_scene, MAX_DEPTH};

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imagecore::{load_image, quantize, save_image, Image};
use crate::scalar::Scalar;
use crate::scattering::{recover_scene, synthesize_haze, transmission_from_depth, AtmosphericLight, DepthMap, TransmissionMap, RECOVER_T_MIN};
use crate::training::Sample;

pub const MANIFEST_NAME: &str = "manifest.jsonl";
const IMAGE_EXTS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

/// Scene-level split fractions. Every variation of a scene lands in the
/// same split, so splits never share scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be >= 0 and sum to 1")));
        }
        Ok(())
    }

    /// Scene counts per split: train and val are rounded, test takes the rest.
    pub fn counts(&self, scenes: usize) -> [usize; 3] {
        let train = ((scenes as f64 * self.train).round() as usize).min(scenes);
        let val = ((scenes as f64 * self.val).round() as usize).min(scenes - train);
        [train, val, scenes - train - val]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSpec {
    pub airlight_range: [f64; 2],
    pub beta_range: [f64; 2],
    pub variations: usize,
    pub seed: u64,
    pub splits: SplitSpec,
}

impl Default for SynthesisSpec {
    fn default() -> Self {
        Self {
            airlight_range: [0.5, 1.0],
            beta_range: [1.4, 1.6],
            variations: 4,
            seed: 0,
            splits: SplitSpec::default(),
        }
    }
}

impl SynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.airlight_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("airlight range {:?} must lie in (0, 1]", self.airlight_range)));
        }
        let [b0, b1] = self.beta_range;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::Config(format!("beta range {:?} must lie in (0, inf)", self.beta_range)));
        }
        if self.variations == 0 {
            return Err(Error::Config("variations must be >= 1".into()));
        }
        self.splits.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub hazy: String,
    pub clean: String,
    pub depth: String,
    pub transmission: String,
    pub airlight_map: String,
}

/// One hazy variation of a scene. Paths are relative to the manifest's
/// directory; `airlight` and `beta` are the exact values used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub scene: String,
    pub variation: usize,
    pub split: Split,
    pub airlight: f64,
    pub beta: f64,
    pub hazy: PathBuf,
    pub clean: PathBuf,
    pub depth: PathBuf,
    pub transmission: PathBuf,
    pub airlight_map: PathBuf,
    pub sha256: Checksums,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn write(&self) -> Result<()> {
        write_file(&self.path(), self.to_jsonl().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    if source.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(unwritable)?;
    f.write_all(bytes).map_err(unwritable)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| io_error(path, e))?))
}

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_ext(p))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Depth for `scene`: `<scene>.fmap`, else a grayscale image whose values
/// are taken as depth.
pub fn find_depth(depth_dir: &Path, scene: &str) -> Result<DepthMap<f32>> {
    let fmap = depth_dir.join(format!("{scene}.fmap"));
    if fmap.is_file() {
        return read_fmap(&fmap)?.to_depth();
    }
    for ext in IMAGE_EXTS {
        let p = depth_dir.join(format!("{scene}.{ext}"));
        if p.is_file() {
            let img: Image<f32> = load_image(&p)?;
            return DepthMap::new(img.height(), img.width(), img.to_gray().into_data());
        }
    }
    Err(Error::MissingFile(fmap))
}

/// Writes `count` procedural scenes to `<root>/clean` and `<root>/depth`.
pub fn generate_scenes(root: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let (clean_dir, depth_dir) = (root.join("clean"), root.join("depth"));
    create_dir(&clean_dir)?;
    create_dir(&depth_dir)?;
    (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
        let (img, depth) = procedural_scene(height, width, seed ^ i as u64)?;
        let name = format!("scene_{i:04}");
        save_image(&img, clean_dir.join(format!("{name}.png")))?;
        write_fmap(&Raster::from_depth(&depth), depth_dir.join(format!("{name}.fmap")))
    })?;
    Ok((clean_dir, depth_dir))
}

/// Hazes every clean image `spec.variations` times with independent draws
/// of a gray airlight and β, writes the layout and manifest under `out`,
/// and returns the manifest. Image `i` (in file-name order) draws from a
/// generator seeded with `seed ^ i`, so output bytes do not depend on
/// thread scheduling.
pub fn synthesize_dataset(clean_dir: &Path, depth_dir: &Path, out: &Path, spec: &SynthesisSpec) -> Result<Manifest> {
    spec.validate()?;
    let cleans = list_images(clean_dir)?;
    if !depth_dir.is_dir() {
        return Err(Error::MissingFile(depth_dir.to_path_buf()));
    }
    if cleans.is_empty() {
        return Err(Error::InvalidArgument(format!("no images in {}", clean_dir.display())));
    }
    for sub in ["clean", "depth", "hazy", "trans", "airlight"] {
        create_dir(&out.join(sub))?;
    }

    let mut order: Vec<usize> = (0..cleans.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let [n_train, n_val, _] = spec.splits.counts(cleans.len());
    let mut splits = vec![Split::Test; cleans.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let per_scene: Vec<Vec<SampleRecord>> = cleans
        .par_iter()
        .enumerate()
        .map(|(i, path)| synthesize_scene(path, depth_dir, out, spec, i, splits[i]))
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        root: out.to_path_buf(),
        records: per_scene.into_iter().flatten().collect(),
    };
    manifest.write()?;
    Ok(manifest)
}

fn synthesize_scene(path: &Path, depth_dir: &Path, out: &Path, spec: &SynthesisSpec, index: usize, split: Split) -> Result<Vec<SampleRecord>> {
    let scene = stem(path);
    let clean: Image<f32> = load_image(path)?;
    if clean.channels() != 3 {
        return Err(Error::InvalidImage(format!("{}: clean images need 3 channels", path.display())));
    }
    let depth = find_depth(depth_dir, &scene)?;
    if (depth.height(), depth.width()) != (clean.height(), clean.width()) {
        return Err(Error::ShapeMismatch(format!(
            "depth for {scene} is {}x{}, clean image is {}x{}",
            depth.height(),
            depth.width(),
            clean.height(),
            clean.width()
        )));
    }
    let clean_rel = PathBuf::from("clean").join(format!("{scene}.png"));
    let depth_rel = PathBuf::from("depth").join(format!("{scene}.fmap"));
    save_image(&clean, out.join(&clean_rel))?;
    write_fmap(&Raster::from_depth(&depth), out.join(&depth_rel))?;
    let clean_sum = sha256_file(&out.join(&clean_rel))?;
    let depth_sum = sha256_file(&out.join(&depth_rel))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let (h, w) = (clean.height(), clean.width());
    let mut records = Vec::with_capacity(spec.variations);
    for v in 0..spec.variations {
        let a = rng.random_range(spec.airlight_range[0]..=spec.airlight_range[1]) as f32;
        let beta = rng.random_range(spec.beta_range[0]..=spec.beta_range[1]) as f32;
        let t = transmission_from_depth(&depth, beta)?;
        let hazy = synthesize_haze(&clean, &t, &AtmosphericLight::gray(a)?)?;
        let id = format!("{scene}_v{v}");
        let hazy_rel = PathBuf::from("hazy").join(format!("{id}.png"));
        let trans_rel = PathBuf::from("trans").join(format!("{id}.fmap"));
        let air_rel = PathBuf::from("airlight").join(format!("{id}.fmap"));
        save_image(&hazy, out.join(&hazy_rel))?;
        write_fmap(&Raster::from_transmission(&t), out.join(&trans_rel))?;
        write_fmap(&Raster::new(h, w, 3, vec![a; h * w * 3])?, out.join(&air_rel))?;
        records.push(SampleRecord {
            id,
            scene: scene.clone(),
            variation: v,
            split,
            airlight: a as f64,
            beta: beta as f64,
            sha256: Checksums {
                hazy: sha256_file(&out.join(&hazy_rel))?,
                clean: clean_sum.clone(),
                depth: depth_sum.clone(),
                transmission: sha256_file(&out.join(&trans_rel))?,
                airlight_map: sha256_file(&out.join(&air_rel))?,
            },
            hazy: hazy_rel,
            clean: clean_rel.clone(),
            depth: depth_rel.clone(),
            transmission: trans_rel,
            airlight_map: air_rel,
        });
    }
    Ok(records)
}

/// Decoded files of one record.
#[derive(Debug, Clone)]
pub struct LoadedRecord<T: Scalar> {
    pub record: SampleRecord,
    pub hazy: Image<T>,
    pub clean: Image<T>,
    pub transmission: TransmissionMap<T>,
    pub airlight: Image<T>,
}

impl<T: Scalar> LoadedRecord<T> {
    pub fn to_sample(&self) -> Result<Sample<T>> {
        let t = Image::new(self.transmission.height(), self.transmission.width(), 1, self.transmission.data().to_vec())?;
        Sample::from_images(&self.hazy, &self.clean, Some(&t), Some(&self.airlight))
    }
}

fn verified(root: &Path, rel: &Path, sum: &str) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
    if sha256_hex(&bytes) != sum {
        return Err(Error::Checksum(path));
    }
    Ok(bytes)
}

fn image_from_verified<T: Scalar>(root: &Path, rel: &Path, sum: &str) -> Result<Image<T>> {
    verified(root, rel, sum)?;
    load_image(root.join(rel))
}

fn raster_from_verified(root: &Path, rel: &Path, sum: &str) -> Result<Raster> {
    let bytes = verified(root, rel, sum)?;
    Raster::from_bytes(&bytes, &root.join(rel))
}

/// Records of one split, decoded lazily in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads one record, checking every file against its stored checksum.
    pub fn load<T: Scalar>(&self, record: &SampleRecord) -> Result<LoadedRecord<T>> {
        let s = &record.sha256;
        let t = raster_from_verified(&self.root, &record.transmission, &s.transmission)?.to_transmission()?;
        Ok(LoadedRecord {
            record: record.clone(),
            hazy: image_from_verified(&self.root, &record.hazy, &s.hazy)?,
            clean: image_from_verified(&self.root, &record.clean, &s.clean)?,
            transmission: t,
            airlight: raster_from_verified(&self.root, &record.airlight_map, &s.airlight_map)?.to_image()?,
        })
    }

    pub fn iter<T: Scalar>(&self) -> impl Iterator<Item = Result<LoadedRecord<T>>> + '_ {
        self.records.iter().map(move |r| self.load(r))
    }

    /// Every record as a training sample.
    pub fn samples<T: Scalar>(&self) -> Result<Vec<Sample<T>>> {
        self.iter().map(|r| r?.to_sample()).collect()
    }
}

/// Opens the records of `split` (all records when `None`).
pub fn load_dataset(manifest: impl AsRef<Path>, split: Option<Split>) -> Result<Dataset> {
    let m = Manifest::read(manifest)?;
    Ok(Dataset {
        records: m.records.into_iter().filter(|r| split.is_none_or(|s| r.split == s)).collect(),
        root: m.root,
    })
}

/// Physical checks of one stored record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordCheck {
    /// Every hazy value lies between its clean value and A, within 1/255.
    pub convex: bool,
    /// Depth and the stored draws regenerate the stored t bit-exactly and
    /// the stored hazy PNG byte-exactly.
    pub resynthesis: bool,
    /// Largest `|recover_scene(hazy, t, A) − clean|`.
    pub recover_max_err: f64,
}

impl RecordCheck {
    pub fn passes(&self) -> bool {
        self.convex && self.resynthesis && self.recover_max_err <= 2.0 / 255.0 + 1e-6
    }
}

pub fn verify_record(root: &Path, record: &SampleRecord) -> Result<RecordCheck> {
    let ds = Dataset {
        root: root.to_path_buf(),
        records: Vec::new(),
    };
    let rec: LoadedRecord<f32> = ds.load(record)?;
    let depth = raster_from_verified(root, &record.depth, &record.sha256.depth)?.to_depth::<f32>()?;
    let a = record.airlight as f32;
    let slack = 1.0 / 255.0 + 1e-6;
    let convex = rec
        .hazy
        .data()
        .iter()
        .zip(rec.clean.data())
        .all(|(&i, &j)| i >= j.min(a) - slack && i <= j.max(a) + slack);

    let t = transmission_from_depth(&depth, record.beta as f32)?;
    let same_t = t.data().iter().zip(rec.transmission.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    let hazy = synthesize_haze(&rec.clean, &t, &AtmosphericLight::gray(a)?)?;
    let same_hazy = hazy.data().iter().zip(rec.hazy.data()).all(|(&x, &y)| quantize(x) == quantize(y));

    let light = AtmosphericLight::Map(rec.airlight.clone());
    let j = recover_scene(&rec.hazy, &rec.transmission, &light, RECOVER_T_MIN as f32)?;
    let recover_max_err = j
        .data()
        .iter()
        .zip(rec.clean.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .fold(0.0, f64::max);
    Ok(RecordCheck {
        convex,
        resynthesis: same_t && same_hazy,
        recover_max_err,
    })
}
