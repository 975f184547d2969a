//! On-disk dataset layout shared by the generator, trainer and evaluator.
//!
//! ```text
//! manifest.json
//! images/j{J}_k{K}.png      lit frames
//! canonical/j{J}.png        wall-off frames
//! masks/j{J}.png            foreground masks
//! backgrounds/k{K}.png      wall textures
//! points.csv                optional initial point cloud
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backplate::Backplate;
use crate::camera::{Camera, CameraSpec};
use crate::image::RgbImage;
use crate::scene::ForegroundMask;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub camera: CameraSpec,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRecord {
    pub id: usize,
    pub path: String,
    pub split: Split,
}

/// One frame; `k = None` marks a canonical frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub j: usize,
    pub k: Option<usize>,
    pub image: String,
    pub mask: String,
    pub background: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub cameras: Vec<CameraRecord>,
    pub backgrounds: Vec<BackgroundRecord>,
    pub frames: Vec<FrameRecord>,
    /// Emissive wall geometry, reused as the default backplate.
    #[serde(default)]
    pub wall: Option<Backplate>,
    #[serde(default)]
    pub points: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Exactly one canonical frame per camera, one lit frame per
    /// (camera, background) pair, and no dangling ids.
    pub fn validate(&self) -> Result<()> {
        let nj = self.cameras.len();
        let nk = self.backgrounds.len();
        for (j, c) in self.cameras.iter().enumerate() {
            if c.camera.id != j {
                return Err(Error::Dataset(format!("camera record {j} has id {}", c.camera.id)));
            }
        }
        for (k, b) in self.backgrounds.iter().enumerate() {
            if b.id != k {
                return Err(Error::Dataset(format!("background record {k} has id {}", b.id)));
            }
        }
        let mut seen = HashMap::new();
        let mut masks: HashMap<usize, &str> = HashMap::new();
        for f in &self.frames {
            if f.j >= nj {
                return Err(Error::Dataset(format!("frame {} references camera {}", f.image, f.j)));
            }
            if let Some(k) = f.k {
                if k >= nk {
                    return Err(Error::Dataset(format!("frame {} references background {k}", f.image)));
                }
            }
            if *masks.entry(f.j).or_insert(&f.mask) != f.mask {
                return Err(Error::Dataset(format!("camera {} uses more than one mask", f.j)));
            }
            if seen.insert((f.j, f.k), &f.image).is_some() {
                return Err(Error::Dataset(format!("duplicate frame for camera {} background {:?}", f.j, f.k)));
            }
        }
        if seen.len() != nj * (nk + 1) {
            return Err(Error::Dataset(format!(
                "expected {} frames for {nj} cameras and {nk} backgrounds, found {}",
                nj * (nk + 1),
                seen.len()
            )));
        }
        Ok(())
    }
}

/// Initial point with its canonical color.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    /// The point lies on the emissive wall rather than an object.
    pub on_wall: bool,
}

pub fn save_points(path: &Path, points: &[InitPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::Dataset(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_points(path: &Path) -> Result<Vec<InitPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
        .collect()
}

/// A loaded dataset. Lit frames are read on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub cameras: Vec<Camera>,
    pub masks: Vec<ForegroundMask>,
    pub canonical: Vec<RgbImage>,
    pub backgrounds: Vec<RgbImage>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&root.join(MANIFEST_NAME))?;
        let cameras = manifest
            .cameras
            .iter()
            .map(|c| Camera::try_from(&c.camera))
            .collect::<Result<Vec<_>>>()?;
        let mut masks = Vec::with_capacity(cameras.len());
        let mut canonical = Vec::with_capacity(cameras.len());
        for j in 0..cameras.len() {
            let rec = manifest
                .frames
                .iter()
                .find(|f| f.j == j && f.k.is_none())
                .ok_or_else(|| Error::Dataset(format!("no canonical frame for camera {j}")))?;
            let mask = ForegroundMask::load(&root.join(&rec.mask))?;
            let img = RgbImage::load(&root.join(&rec.image))?;
            let (w, h) = (cameras[j].width, cameras[j].height);
            if mask.width != w || mask.height != h || img.width != w || img.height != h {
                return Err(Error::Dataset(format!("camera {j} frames do not match its {w}x{h} resolution")));
            }
            masks.push(mask);
            canonical.push(img);
        }
        let backgrounds = manifest
            .backgrounds
            .iter()
            .map(|b| RgbImage::load(&root.join(&b.path)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            cameras,
            masks,
            canonical,
            backgrounds,
        })
    }

    fn ids<T>(records: &[T], split: Split, of: impl Fn(&T) -> Split) -> Vec<usize> {
        records.iter().enumerate().filter(|(_, r)| of(r) == split).map(|(i, _)| i).collect()
    }

    pub fn views(&self, split: Split) -> Vec<usize> {
        Self::ids(&self.manifest.cameras, split, |c| c.split)
    }

    pub fn background_ids(&self, split: Split) -> Vec<usize> {
        Self::ids(&self.manifest.backgrounds, split, |b| b.split)
    }

    pub fn frame_path(&self, j: usize, k: Option<usize>) -> Result<PathBuf> {
        self.manifest
            .frames
            .iter()
            .find(|f| f.j == j && f.k == k)
            .map(|f| self.root.join(&f.image))
            .ok_or_else(|| Error::Dataset(format!("no frame for camera {j} background {k:?}")))
    }

    pub fn lit_image(&self, j: usize, k: usize) -> Result<RgbImage> {
        RgbImage::load(&self.frame_path(j, Some(k))?)
    }

    pub fn points(&self) -> Result<Option<Vec<InitPoint>>> {
        match &self.manifest.points {
            Some(p) => load_points(&self.root.join(p)).map(Some),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, Stage, SynthConfig};

    fn tiny() -> SynthConfig {
        SynthConfig {
            width: 24,
            height: 20,
            train_views: 3,
            train_textures: 2,
            test_textures: 1,
            texture_size: 16,
            spp: 2,
            init_points: 60,
            seed: 5,
        }
    }

    #[test]
    fn generate_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&Stage::desk(), &tiny(), dir.path()).unwrap();
        // 4 cameras (3 train + 1 test) × (3 lit + 1 canonical).
        assert_eq!(m.frames.len(), 16);
        assert_eq!(m.frames.iter().filter(|f| f.k.is_none()).count(), 4);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.views(Split::Train), vec![0, 1, 2]);
        assert_eq!(ds.views(Split::Test), vec![3]);
        assert_eq!(ds.background_ids(Split::Test), vec![2]);
        assert_eq!(ds.lit_image(1, 2).unwrap().width, 24);
        let pts = ds.points().unwrap().unwrap();
        assert!(!pts.is_empty() && pts.len() <= 60);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_dataset(&Stage::desk(), &tiny(), a.path()).unwrap();
        generate_dataset(&Stage::desk(), &tiny(), b.path()).unwrap();
        for rel in ["images/j0_k1.png", "canonical/j2.png", "masks/j3.png", "points.csv", MANIFEST_NAME] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn manifest_rejects_missing_frames() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_dataset(&Stage::desk(), &tiny(), dir.path()).unwrap();
        m.frames.pop();
        assert!(matches!(m.validate(), Err(Error::Dataset(_))));
        let mut m2 = m.clone();
        m2.frames.push(FrameRecord { j: 9, k: None, image: "x".into(), mask: "y".into(), background: None });
        assert!(m2.validate().is_err());
    }
}
