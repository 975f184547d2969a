//! The optimizable primitive set, its `.vpgs` file format, and
//! foreground-mask culling.
//!
//! `.vpgs` layout (all integers little-endian):
//!
//! ```text
//! magic      b"VPGS"
//! version    u32
//! count      u64            number of primitives M
//! fields     u32            number of parameter groups
//! per field: name_len u8, name bytes (UTF-8), stride u32
//! per field: M·stride f64   IEEE-754 little-endian
//! crc32      u32            over every preceding byte
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backplate::Backplate;
use crate::camera::{Camera, CameraSpec};
use crate::math::{logit, Quat, Vec3, IDENTITY_QUAT};
use crate::sh::ShCoeffs;
use crate::{Error, Result};

pub const SCENE_MAGIC: &[u8; 4] = b"VPGS";
pub const SCENE_VERSION: u32 = 1;

/// The eight per-primitive parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    LogScale,
    Rotation,
    Opacity,
    Color,
    Intensity,
    Uv,
    MipDelta,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Position,
        ParamGroup::LogScale,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::Intensity,
        ParamGroup::Uv,
        ParamGroup::MipDelta,
    ];

    pub fn stride(self) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::LogScale => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity | ParamGroup::MipDelta => 1,
            ParamGroup::Color => 48,
            ParamGroup::Intensity => 16,
            ParamGroup::Uv => 32,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::LogScale => "log_scale",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity_logit",
            ParamGroup::Color => "color_sh",
            ParamGroup::Intensity => "intensity_sh",
            ParamGroup::Uv => "uv_sh",
            ParamGroup::MipDelta => "mip_delta_raw",
        }
    }
}

/// Struct-of-arrays scene. The same type doubles as a gradient buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatScene {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub opacity_logits: Vec<f64>,
    pub color_sh: Vec<ShCoeffs<3>>,
    pub intensity_sh: Vec<ShCoeffs<1>>,
    pub uv_sh: Vec<ShCoeffs<2>>,
    pub mip_delta_raw: Vec<f64>,
}

/// One primitive, used for construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub color_sh: ShCoeffs<3>,
    pub intensity_sh: ShCoeffs<1>,
    pub uv_sh: ShCoeffs<2>,
    pub mip_delta_raw: f64,
}

impl Splat {
    /// Isotropic primitive with a view-independent color and no relighting
    /// response.
    pub fn isotropic(position: [f64; 3], scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut color_sh = [[0.0; 3]; 16];
        color_sh[0] = rgb.map(crate::raster::rgb_to_sh_dc);
        let mut uv_sh = [[0.0; 2]; 16];
        uv_sh[0] = [0.5, 0.5];
        Self {
            position,
            log_scale: [scale.ln(); 3],
            rotation: IDENTITY_QUAT,
            opacity_logit: logit(opacity),
            color_sh,
            intensity_sh: [[0.0]; 16],
            uv_sh,
            mip_delta_raw: 0.0,
        }
    }
}

macro_rules! for_each_field {
    ($self:ident, $other:ident, $body:expr) => {{
        $body(&mut $self.positions, &$other.positions);
        $body(&mut $self.log_scales, &$other.log_scales);
        $body(&mut $self.rotations, &$other.rotations);
        $body(&mut $self.opacity_logits, &$other.opacity_logits);
        $body(&mut $self.color_sh, &$other.color_sh);
        $body(&mut $self.intensity_sh, &$other.intensity_sh);
        $body(&mut $self.uv_sh, &$other.uv_sh);
        $body(&mut $self.mip_delta_raw, &$other.mip_delta_raw);
    }};
}

impl SplatScene {
    pub fn new() -> Self {
        Self::default()
    }

    /// `m` primitives with every parameter zero (a gradient buffer).
    pub fn zeros(m: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; m],
            log_scales: vec![[0.0; 3]; m],
            rotations: vec![[0.0; 4]; m],
            opacity_logits: vec![0.0; m],
            color_sh: vec![[[0.0; 3]; 16]; m],
            intensity_sh: vec![[[0.0]; 16]; m],
            uv_sh: vec![[[0.0; 2]; 16]; m],
            mip_delta_raw: vec![0.0; m],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, s: Splat) {
        self.positions.push(s.position);
        self.log_scales.push(s.log_scale);
        self.rotations.push(s.rotation);
        self.opacity_logits.push(s.opacity_logit);
        self.color_sh.push(s.color_sh);
        self.intensity_sh.push(s.intensity_sh);
        self.uv_sh.push(s.uv_sh);
        self.mip_delta_raw.push(s.mip_delta_raw);
    }

    pub fn splat(&self, i: usize) -> Splat {
        Splat {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            opacity_logit: self.opacity_logits[i],
            color_sh: self.color_sh[i],
            intensity_sh: self.intensity_sh[i],
            uv_sh: self.uv_sh[i],
            mip_delta_raw: self.mip_delta_raw[i],
        }
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from(self.positions[i])
    }

    /// Checks that every group holds `len()` entries.
    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        let lens = [
            self.log_scales.len(),
            self.rotations.len(),
            self.opacity_logits.len(),
            self.color_sh.len(),
            self.intensity_sh.len(),
            self.uv_sh.len(),
            self.mip_delta_raw.len(),
        ];
        if lens.iter().any(|&l| l != m) {
            return Err(Error::ShapeMismatch(format!(
                "parameter groups disagree on primitive count: {m} vs {lens:?}"
            )));
        }
        Ok(())
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Position => self.positions.as_flattened(),
            ParamGroup::LogScale => self.log_scales.as_flattened(),
            ParamGroup::Rotation => self.rotations.as_flattened(),
            ParamGroup::Opacity => &self.opacity_logits,
            ParamGroup::Color => self.color_sh.as_flattened().as_flattened(),
            ParamGroup::Intensity => self.intensity_sh.as_flattened().as_flattened(),
            ParamGroup::Uv => self.uv_sh.as_flattened().as_flattened(),
            ParamGroup::MipDelta => &self.mip_delta_raw,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Position => self.positions.as_flattened_mut(),
            ParamGroup::LogScale => self.log_scales.as_flattened_mut(),
            ParamGroup::Rotation => self.rotations.as_flattened_mut(),
            ParamGroup::Opacity => &mut self.opacity_logits,
            ParamGroup::Color => self.color_sh.as_flattened_mut().as_flattened_mut(),
            ParamGroup::Intensity => self.intensity_sh.as_flattened_mut().as_flattened_mut(),
            ParamGroup::Uv => self.uv_sh.as_flattened_mut().as_flattened_mut(),
            ParamGroup::MipDelta => &mut self.mip_delta_raw,
        }
    }

    /// Keeps primitives whose `keep` flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        assert_eq!(keep.len(), self.len());
        filter(&mut self.positions, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.color_sh, keep);
        filter(&mut self.intensity_sh, keep);
        filter(&mut self.uv_sh, keep);
        filter(&mut self.mip_delta_raw, keep);
    }

    /// Appends every primitive of `other`.
    pub fn extend_from(&mut self, other: &SplatScene) {
        let this = self;
        for_each_field!(this, other, |dst: &mut Vec<_>, src: &Vec<_>| dst.extend_from_slice(src));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let m = self.len();
        let payload: usize = ParamGroup::ALL.iter().map(|g| g.stride() * m * 8).sum();
        let mut out = Vec::with_capacity(64 + payload + 4);
        out.extend_from_slice(SCENE_MAGIC);
        out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
        out.extend_from_slice(&(m as u64).to_le_bytes());
        out.extend_from_slice(&(ParamGroup::ALL.len() as u32).to_le_bytes());
        for g in ParamGroup::ALL {
            out.push(g.name().len() as u8);
            out.extend_from_slice(g.name().as_bytes());
            out.extend_from_slice(&(g.stride() as u32).to_le_bytes());
        }
        for g in ParamGroup::ALL {
            for v in self.group(g) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != SCENE_MAGIC {
            return Err(Error::Format("not a .vpgs file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != SCENE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: SCENE_VERSION,
            });
        }
        let m = usize::try_from(r.u64()?).map_err(|_| Error::Format("count overflow".into()))?;
        let nfields = r.u32()? as usize;
        if nfields != ParamGroup::ALL.len() {
            return Err(Error::Format(format!("expected 8 fields, found {nfields}")));
        }
        for g in ParamGroup::ALL {
            let len = r.take(1)?[0] as usize;
            let name = r.take(len)?;
            let stride = r.u32()? as usize;
            if name != g.name().as_bytes() || stride != g.stride() {
                return Err(Error::Format(format!(
                    "unexpected field {:?} (stride {stride}), expected {} (stride {})",
                    String::from_utf8_lossy(name),
                    g.name(),
                    g.stride()
                )));
            }
        }
        let payload: usize = ParamGroup::ALL.iter().map(|g| g.stride() * 8).sum();
        let needed = m
            .checked_mul(payload)
            .and_then(|n| n.checked_add(r.pos + 4))
            .ok_or(Error::Truncated)?;
        if bytes.len() < needed {
            return Err(Error::Truncated);
        }
        let mut scene = SplatScene::zeros(m);
        for g in ParamGroup::ALL {
            for v in scene.group_mut(g) {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checksum".into()));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(scene)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Per-camera binary foreground mask: `true` = foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ForegroundMask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        if self.data[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Reads an 8-bit grayscale PNG; values `>= 128` are foreground.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p.0[0] >= 128).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path).map_err(|e| Error::image(path, e))
    }
}

/// Removes primitives whose center lands on background (`Q = 0`) in any
/// camera that sees it. Views where the center is behind the camera or off
/// the frame do not vote.
pub fn cull_by_mask(
    scene: &SplatScene,
    cameras: &[Camera],
    masks: &[ForegroundMask],
) -> Result<SplatScene> {
    if cameras.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cameras but {} masks",
            cameras.len(),
            masks.len()
        )));
    }
    for (cam, mask) in cameras.iter().zip(masks) {
        if cam.width != mask.width || cam.height != mask.height {
            return Err(Error::ShapeMismatch(format!(
                "camera {} is {}x{} but its mask is {}x{}",
                cam.id, cam.width, cam.height, mask.width, mask.height
            )));
        }
    }
    let keep: Vec<bool> = (0..scene.len())
        .map(|i| {
            let x = scene.position(i);
            cameras.iter().zip(masks).all(|(cam, mask)| {
                let Some(p) = cam.project_point(&cam.world_to_camera(&x)) else {
                    return true;
                };
                if p.x < 0.0 || p.y < 0.0 || p.x >= cam.width as f64 || p.y >= cam.height as f64 {
                    return true;
                }
                mask.get(p.x as usize, p.y as usize)
            })
        })
        .collect();
    let mut out = scene.clone();
    out.retain(&keep);
    if out.is_empty() && !scene.is_empty() {
        log::warn!("mask culling removed all {} primitives", scene.len());
    }
    Ok(out)
}

/// Metadata stored next to a scene file (`<name>.json`).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SceneSidecar {
    #[serde(default)]
    pub cameras: Vec<CameraSpec>,
    #[serde(default)]
    pub backplate: Option<Backplate>,
    #[serde(default)]
    pub mip_levels: Option<usize>,
}

pub fn sidecar_path(scene_path: &Path) -> PathBuf {
    scene_path.with_extension("json")
}

impl SceneSidecar {
    pub fn load(scene_path: &Path) -> Result<Option<Self>> {
        let path = sidecar_path(scene_path);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    pub fn save(&self, scene_path: &Path) -> Result<()> {
        let path = sidecar_path(scene_path);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_scene(m: usize) -> SplatScene {
        let mut s = SplatScene::new();
        for i in 0..m {
            let f = i as f64;
            let mut sp = Splat::isotropic([f, -f * 0.5, 2.0 + f], 0.1 + 0.01 * f, 0.6, [0.2, 0.4, 0.9]);
            sp.intensity_sh[3] = [f * 1e-3];
            sp.uv_sh[7] = [0.1, -0.2];
            sp.mip_delta_raw = f.sin();
            s.push(sp);
        }
        s
    }

    #[test]
    fn round_trip_preserves_bits() {
        let s = sample_scene(7);
        let back = SplatScene::from_bytes(&s.to_bytes().unwrap()).unwrap();
        for g in ParamGroup::ALL {
            let a: Vec<u64> = s.group(g).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.group(g).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{}", g.name());
        }
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = SplatScene::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.vpgs");
        s.save(&path).unwrap();
        assert_eq!(SplatScene::load(&path).unwrap().len(), 0);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample_scene(2).to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(SplatScene::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = sample_scene(2).to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            SplatScene::from_bytes(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample_scene(3).to_bytes().unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(SplatScene::from_bytes(&bytes[..cut]), Err(Error::Truncated)), "cut {cut}");
        }
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample_scene(3).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x40;
        assert!(matches!(SplatScene::from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn retain_and_extend() {
        let mut s = sample_scene(4);
        let extra = s.clone();
        s.retain(&[true, false, true, false]);
        assert_eq!(s.len(), 2);
        assert_eq!(s.positions[1], extra.positions[2]);
        s.extend_from(&extra);
        assert_eq!(s.len(), 6);
        s.validate().unwrap();
    }

    fn facing_camera() -> Camera {
        Camera::look_at(
            0,
            Vec3::new(0.0, 0.0, -5.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            0.9,
            32,
            32,
        )
        .unwrap()
    }

    #[test]
    fn cull_extremes() {
        let s = sample_scene(5).clone();
        let mut s = s;
        for p in &mut s.positions {
            *p = [p[0] * 0.1, p[1] * 0.1, 0.0];
        }
        let cams = [facing_camera()];
        let ones = [ForegroundMask::filled(32, 32, true)];
        let zeros = [ForegroundMask::filled(32, 32, false)];
        assert_eq!(cull_by_mask(&s, &cams, &ones).unwrap(), s);
        assert!(cull_by_mask(&s, &cams, &zeros).unwrap().is_empty());
        assert!(cull_by_mask(&s, &cams, &[ForegroundMask::filled(8, 8, true)]).is_err());
    }

    #[test]
    fn off_frame_views_do_not_vote() {
        let mut s = SplatScene::new();
        s.push(Splat::isotropic([100.0, 0.0, 0.0], 0.1, 0.5, [0.5; 3]));
        let cams = [facing_camera()];
        let zeros = [ForegroundMask::filled(32, 32, false)];
        assert_eq!(cull_by_mask(&s, &cams, &zeros).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn cull_is_idempotent(
            pts in prop::collection::vec(prop::array::uniform3(-1.5f64..1.5), 1..40),
            bits in prop::collection::vec(any::<bool>(), 64),
        ) {
            let mut s = SplatScene::new();
            for p in pts {
                s.push(Splat::isotropic(p, 0.1, 0.5, [0.5; 3]));
            }
            let mask = ForegroundMask {
                width: 32,
                height: 32,
                data: (0..1024).map(|i| bits[(i / 32 / 4) * 8 + (i % 32) / 4]).collect(),
            };
            let cams = [facing_camera(), facing_camera().rolled(0.7)];
            let masks = [mask.clone(), mask];
            let once = cull_by_mask(&s, &cams, &masks).unwrap();
            let twice = cull_by_mask(&once, &cams, &masks).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
