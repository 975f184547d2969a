//! Python bindings. Images cross the boundary as flat row-major `float`
//! lists with interleaved channels.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vpgs::backplate::{composite, render_backplate};
use vpgs::camera::Camera as CoreCamera;
use vpgs::dataset::{Dataset as CoreDataset, Split};
use vpgs::image::RgbImage;
use vpgs::math::Vec3;
use vpgs::mip::{MipPyramid, DEFAULT_LEVELS};
use vpgs::raster::{RenderOptions, RenderOutput};
use vpgs::scene::{SceneSidecar, Splat, SplatScene};
use vpgs::service::{Reply, Session, SessionAssets};
use vpgs::synth::{generate_dataset, Stage, SynthConfig};
use vpgs::train::{evaluate, mean_metric, OutputDir, TrainConfig};

fn err(e: vpgs::Error) -> PyErr {
    match e {
        vpgs::Error::Io { .. } | vpgs::Error::Image { .. } => PyIOError::new_err(e.to_string()),
        vpgs::Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {name:?}"))),
    }
}

fn flat_rgb(img: &RgbImage) -> Vec<f64> {
    img.data.iter().flatten().copied().collect()
}

#[pyclass(module = "vpgs_py", skip_from_py_object)]
#[derive(Clone)]
struct Camera {
    inner: CoreCamera,
}

#[pymethods]
impl Camera {
    /// Pinhole camera at `eye` looking at `target`; `fov_y` in radians.
    #[staticmethod]
    #[pyo3(signature = (eye, target, up, fov_y, width, height))]
    fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fov_y: f64, width: usize, height: usize) -> PyResult<Self> {
        let inner = CoreCamera::look_at(0, Vec3::from(eye), Vec3::from(target), Vec3::from(up), fov_y, width, height)
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn center(&self) -> [f64; 3] {
        self.inner.center().into()
    }

    /// Pixel coordinates of a world point, or `None` behind the camera.
    fn project(&self, point: [f64; 3]) -> Option<(f64, f64)> {
        let p = self.inner.world_to_camera(&Vec3::from(point));
        self.inner.project_point(&p).map(|v| (v.x, v.y))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.center();
        format!("Camera({}x{}, center=[{:.3}, {:.3}, {:.3}])", self.inner.width, self.inner.height, c.x, c.y, c.z)
    }
}

#[pyclass(module = "vpgs_py", skip_from_py_object)]
#[derive(Clone)]
struct Texture {
    inner: RgbImage,
}

#[pymethods]
impl Texture {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RgbImage::load(&path).map_err(err)? })
    }

    #[staticmethod]
    fn solid(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self { inner: RgbImage::filled(width, height, rgb) }
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn pixels(&self) -> Vec<f64> {
        flat_rgb(&self.inner)
    }
}

#[pyclass(module = "vpgs_py", skip_from_py_object)]
#[derive(Clone)]
struct Scene {
    inner: SplatScene,
    mip_levels: usize,
}

#[pymethods]
impl Scene {
    #[new]
    fn new() -> Self {
        Self { inner: SplatScene::new(), mip_levels: DEFAULT_LEVELS }
    }

    /// Loads a checkpoint; the sidecar supplies the pyramid depth when present.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = SplatScene::load(&path).map_err(err)?;
        let mip_levels = SceneSidecar::load(&path).map_err(err)?.and_then(|s| s.mip_levels).unwrap_or(DEFAULT_LEVELS);
        Ok(Self { inner, mip_levels })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Appends an isotropic primitive; `intensity` sets the band-0 lighting coefficient.
    #[pyo3(signature = (position, scale, opacity, rgb, intensity = 0.0))]
    fn add_splat(&mut self, position: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3], intensity: f64) {
        let mut s = Splat::isotropic(position, scale, opacity, rgb);
        s.intensity_sh[0] = [intensity];
        self.inner.push(s);
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn positions(&self) -> Vec<[f64; 3]> {
        self.inner.positions.clone()
    }

    #[getter]
    fn mip_levels(&self) -> usize {
        self.mip_levels
    }

    /// Renders from `camera`, relit by `texture` when given.
    #[pyo3(signature = (camera, texture = None, exposure = 1.0))]
    fn render(&self, py: Python<'_>, camera: &Camera, texture: Option<&Texture>, exposure: f64) -> PyResult<Frame> {
        let pyramid = texture
            .map(|t| MipPyramid::build_capped(&t.inner, self.mip_levels))
            .transpose()
            .map_err(err)?;
        let opts = RenderOptions { lambda_scale: exposure, ..Default::default() };
        let out = py
            .detach(|| vpgs::raster::render(&self.inner, &camera.inner, pyramid.as_ref(), &opts))
            .map_err(err)?;
        Ok(Frame { inner: out })
    }
}

/// A render with all AOVs.
#[pyclass(module = "vpgs_py")]
struct Frame {
    inner: RenderOutput,
}

#[pymethods]
impl Frame {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn color(&self) -> Vec<f64> {
        flat_rgb(&self.inner.color)
    }

    fn canonical(&self) -> Vec<f64> {
        flat_rgb(&self.inner.canonical)
    }

    fn residual(&self) -> Vec<f64> {
        flat_rgb(&self.inner.residual_map)
    }

    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.data.clone()
    }

    fn depth(&self) -> Vec<f64> {
        self.inner.depth.data.clone()
    }

    fn lambda_map(&self) -> Vec<f64> {
        self.inner.lambda_map.data.clone()
    }

    /// Foreground over the backplate texture seen through `camera`.
    fn composite(&self, scene_plate: &Dataset, camera: &Camera, texture: &Texture) -> PyResult<Vec<f64>> {
        let plate = scene_plate
            .inner
            .manifest
            .wall
            .as_ref()
            .ok_or_else(|| PyValueError::new_err("dataset has no wall geometry"))?;
        let bg = render_backplate(plate, &camera.inner, &texture.inner).map_err(err)?;
        Ok(flat_rgb(&composite(&self.inner, &bg.color).map_err(err)?))
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.inner.color.save_png(&path).map_err(err)
    }
}

#[pyclass(module = "vpgs_py")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(root: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CoreDataset::load(&root).map_err(err)? })
    }

    #[pyo3(signature = (split = "train"))]
    fn views(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.views(self::split(split)?))
    }

    #[pyo3(signature = (split = "train"))]
    fn backgrounds(&self, split: &str) -> PyResult<Vec<usize>> {
        Ok(self.inner.background_ids(self::split(split)?))
    }

    fn camera(&self, j: usize) -> PyResult<Camera> {
        let inner = self.inner.cameras.get(j).cloned().ok_or_else(|| PyValueError::new_err(format!("no camera {j}")))?;
        Ok(Camera { inner })
    }

    fn texture(&self, k: usize) -> PyResult<Texture> {
        let inner =
            self.inner.backgrounds.get(k).cloned().ok_or_else(|| PyValueError::new_err(format!("no background {k}")))?;
        Ok(Texture { inner })
    }

    fn lit_image(&self, j: usize, k: usize) -> PyResult<Texture> {
        Ok(Texture { inner: self.inner.lit_image(j, k).map_err(err)? })
    }

    fn canonical_image(&self, j: usize) -> PyResult<Texture> {
        let inner = self.inner.canonical.get(j).cloned().ok_or_else(|| PyValueError::new_err(format!("no camera {j}")))?;
        Ok(Texture { inner })
    }
}

/// A render-service session driven directly, without a socket.
#[pyclass(module = "vpgs_py", unsendable)]
struct ServiceSession {
    inner: Session,
}

#[pymethods]
impl ServiceSession {
    #[new]
    #[pyo3(signature = (scene_path, data = None))]
    fn new(scene_path: PathBuf, data: Option<PathBuf>) -> PyResult<Self> {
        let assets = SessionAssets::open(&scene_path, data.as_deref()).map_err(err)?;
        Ok(Self { inner: Session::new(assets).map_err(err)? })
    }

    /// Handles one JSON message. Returns the JSON replies and the binary frame messages.
    fn handle(&mut self, message: &str) -> PyResult<(Vec<String>, Vec<Vec<u8>>)> {
        let mut texts = Vec::new();
        let mut frames = Vec::new();
        for r in self.inner.handle_text(message) {
            match r {
                Reply::Text(t) => texts.push(t.to_json()),
                Reply::Binary(b) => frames.push(b),
            }
        }
        Ok((texts, frames))
    }

    #[getter]
    fn exposure(&self) -> f64 {
        self.inner.exposure()
    }
}

/// Gaussian falloff `exp(-½ dᵀ Σ⁻¹ d)` of a 2D splat at pixel `p`.
#[pyfunction]
fn splat_weight(p: [f64; 2], mean: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    let cov = vpgs::math::Mat2::new(cov[0][0], cov[0][1], cov[1][0], cov[1][1]);
    vpgs::raster::splat_weight(&vpgs::math::Vec2::from(p), &vpgs::math::Vec2::from(mean), &cov)
}

/// Writes the synthetic desk dataset. `config` is TOML text.
#[pyfunction]
#[pyo3(signature = (out, config = None, seed = None))]
fn synthesize(py: Python<'_>, out: PathBuf, config: Option<&str>, seed: Option<u64>) -> PyResult<usize> {
    let mut cfg = match config {
        Some(t) => SynthConfig::from_toml(t).map_err(err)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let m = py.detach(|| generate_dataset(&Stage::desk(), &cfg, &out)).map_err(err)?;
    Ok(m.frames.len())
}

/// Trains on `data`, writing checkpoints into `out`. Returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (data, out, config = None))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, config: Option<&str>) -> PyResult<PathBuf> {
    let cfg = match config {
        Some(t) => TrainConfig::from_toml(t).map_err(err)?,
        None => TrainConfig::default(),
    };
    let ds = CoreDataset::load(&data).map_err(err)?;
    let outcome = py
        .detach(|| vpgs::train::train(&ds, &cfg, Some(&OutputDir { dir: out }), &mut ()))
        .map_err(err)?;
    outcome.checkpoint.ok_or_else(|| PyRuntimeError::new_err("training wrote no checkpoint"))
}

/// Metric rows `(scene, j, k, metric, value)` for a split.
#[pyfunction]
#[pyo3(signature = (scene, data, split = "test"))]
fn evaluate_scene(
    py: Python<'_>,
    scene: &Scene,
    data: &Dataset,
    split: &str,
) -> PyResult<Vec<(String, usize, usize, String, f64)>> {
    let s = self::split(split)?;
    let ds = &data.inner;
    let rows = py
        .detach(|| evaluate(&scene.inner, ds, &ds.views(s), &ds.background_ids(s), scene.mip_levels, "scene"))
        .map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.scene, r.j, r.k, r.metric, r.value)).collect())
}

/// Mean of `metric` over rows returned by `evaluate_scene`.
#[pyfunction]
fn mean_of(rows: Vec<(String, usize, usize, String, f64)>, metric: &str) -> f64 {
    let rows: Vec<_> = rows
        .into_iter()
        .map(|(scene, j, k, metric, value)| vpgs::metrics::MetricRow { scene, j, k, metric, value })
        .collect();
    mean_metric(&rows, metric)
}

/// Masked RGB PSNR between two textures of equal size.
#[pyfunction]
fn psnr(a: &Texture, b: &Texture) -> PyResult<f64> {
    vpgs::metrics::psnr(&a.inner, &b.inner, vpgs::metrics::ChannelMode::Rgb, None).map_err(err)
}

#[pymodule]
fn vpgs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Camera>()?;
    m.add_class::<Texture>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Frame>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<ServiceSession>()?;
    m.add_function(wrap_pyfunction!(splat_weight, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(mean_of, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
