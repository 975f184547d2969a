//! Interactive render session and its websocket transport.
//!
//! Control messages are JSON text frames tagged by `"type"`; an optional
//! integer `"seq"` is echoed in the reply. A `request_frame` is answered by a
//! `frame` text header followed by one binary message per AOV:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VPGF"
//! 4       1     protocol version
//! 5       1     AOV tag (see `Aov::tag`)
//! 6       1     encoding (0 raw, 1 png)
//! 7       1     channel count (1 or 3)
//! 8       4     width   (u32 LE)
//! 12      4     height  (u32 LE)
//! 16      4     payload length (u32 LE)
//! 20      n     payload: row-major interleaved 8-bit samples, or a PNG file
//! ```

use std::io::Cursor;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::backplate::{composite, render_backplate, Backplate, PlatePose};
use crate::camera::{Camera, CameraPose};
use crate::dataset::Dataset;
use crate::image::{quantize, RgbImage};
use crate::mip::{MipPyramid, DEFAULT_LEVELS};
use crate::raster::{render, RenderOptions, RenderOutput};
use crate::scene::{SceneSidecar, SplatScene};
use crate::{Error, Result};

pub const PROTOCOL_VERSION: u8 = 1;
pub const FRAME_MAGIC: [u8; 4] = *b"VPGF";
pub const FRAME_HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    #[default]
    Raw,
    Png,
}

impl Encoding {
    fn tag(self) -> u8 {
        match self {
            Encoding::Raw => 0,
            Encoding::Png => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Encoding::Raw),
            1 => Some(Encoding::Png),
            _ => None,
        }
    }
}

/// Render outputs a client can request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aov {
    /// Relit foreground composited over the backplate.
    Color,
    /// Canonical color without the lighting residual.
    Unlit,
    Alpha,
    /// Depth normalized by the largest depth in the frame.
    Depth,
    Lambda,
    Residual,
}

impl Aov {
    pub const ALL: [Aov; 6] = [Aov::Color, Aov::Unlit, Aov::Alpha, Aov::Depth, Aov::Lambda, Aov::Residual];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn channels(self) -> u8 {
        match self {
            Aov::Color | Aov::Unlit | Aov::Residual => 3,
            Aov::Alpha | Aov::Depth | Aov::Lambda => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aov::Color => "color",
            Aov::Unlit => "unlit",
            Aov::Alpha => "alpha",
            Aov::Depth => "depth",
            Aov::Lambda => "lambda",
            Aov::Residual => "residual",
        }
    }
}

impl std::str::FromStr for Aov {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown AOV {s:?}")))
    }
}

fn default_aovs() -> Vec<Aov> {
    vec![Aov::Color]
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Request {
    Hello {
        #[serde(default)]
        version: Option<u8>,
        #[serde(default)]
        encoding: Option<Encoding>,
    },
    /// Either a dataset camera `id` or a free `pose`; `width`/`height`
    /// rescale the intrinsics.
    SetCamera {
        #[serde(default)]
        id: Option<usize>,
        #[serde(default)]
        pose: Option<CameraPose>,
        #[serde(default)]
        width: Option<usize>,
        #[serde(default)]
        height: Option<usize>,
    },
    /// A dataset background `id`, an inline base64 PNG/JPEG `image`, or
    /// neither to switch the wall off.
    SetBackground {
        #[serde(default)]
        id: Option<usize>,
        #[serde(default)]
        image: Option<String>,
    },
    SetExposure {
        scale: f64,
    },
    SetBackplate {
        pose: PlatePose,
    },
    RequestFrame {
        #[serde(default = "default_aovs")]
        aovs: Vec<Aov>,
    },
    SavePose,
}

impl Request {
    fn op(&self) -> &'static str {
        match self {
            Request::Hello { .. } => "hello",
            Request::SetCamera { .. } => "set_camera",
            Request::SetBackground { .. } => "set_background",
            Request::SetExposure { .. } => "set_exposure",
            Request::SetBackplate { .. } => "set_backplate",
            Request::RequestFrame { .. } => "request_frame",
            Request::SavePose => "save_pose",
        }
    }
}

#[derive(Deserialize)]
struct Envelope {
    #[serde(default)]
    seq: Option<u64>,
    #[serde(flatten)]
    request: Request,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnsupportedVersion,
    InvalidArgument,
    TooLarge,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Hello {
        version: u8,
        encoding: Encoding,
        width: usize,
        height: usize,
        primitives: usize,
        backgrounds: usize,
        cameras: usize,
        max_texture_side: usize,
    },
    Ack {
        seq: Option<u64>,
        op: String,
    },
    /// Precedes `aovs.len()` binary messages in the listed order.
    Frame {
        seq: Option<u64>,
        width: usize,
        height: usize,
        aovs: Vec<Aov>,
    },
    /// A `request_frame` superseded by a newer one before it was rendered.
    Cancelled {
        seq: Option<u64>,
    },
    Error {
        seq: Option<u64>,
        code: ErrorCode,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<u64>,
    },
}

impl Response {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("responses serialize")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Text(Response),
    Binary(Vec<u8>),
}

impl Reply {
    pub fn text(&self) -> Option<&Response> {
        match self {
            Reply::Text(r) => Some(r),
            Reply::Binary(_) => None,
        }
    }
}

/// A decoded binary frame message. `pixels` are always raw samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMessage {
    pub aov: Aov,
    pub encoding: Encoding,
    pub channels: u8,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode_frame(aov: Aov, encoding: Encoding, width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let channels = aov.channels();
    if pixels.len() != width * height * channels as usize {
        return Err(Error::ShapeMismatch(format!(
            "{} samples for a {width}x{height}x{channels} frame",
            pixels.len()
        )));
    }
    let payload = match encoding {
        Encoding::Raw => pixels.to_vec(),
        Encoding::Png => {
            let color = if channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
            let mut buf = Vec::new();
            image::ImageEncoder::write_image(
                image::codecs::png::PngEncoder::new(&mut buf),
                pixels,
                width as u32,
                height as u32,
                color,
            )
            .map_err(|e| Error::Protocol(format!("png encoding failed: {e}")))?;
            buf
        }
    };
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&[PROTOCOL_VERSION, aov.tag(), encoding.tag(), channels]);
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<FrameMessage> {
    if bytes.len() < FRAME_HEADER_LEN || bytes[..4] != FRAME_MAGIC {
        return Err(Error::Protocol("not a frame message".into()));
    }
    if bytes[4] != PROTOCOL_VERSION {
        return Err(Error::Protocol(format!("frame version {}", bytes[4])));
    }
    let aov = Aov::from_tag(bytes[5]).ok_or_else(|| Error::Protocol(format!("AOV tag {}", bytes[5])))?;
    let encoding = Encoding::from_tag(bytes[6]).ok_or_else(|| Error::Protocol(format!("encoding tag {}", bytes[6])))?;
    let channels = bytes[7];
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (width, height, len) = (u32_at(8), u32_at(12), u32_at(16));
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() != len {
        return Err(Error::Protocol(format!("payload is {} bytes, header says {len}", payload.len())));
    }
    let pixels = match encoding {
        Encoding::Raw => payload.to_vec(),
        Encoding::Png => {
            let img = image::load_from_memory_with_format(payload, image::ImageFormat::Png)
                .map_err(|e| Error::Protocol(format!("png payload: {e}")))?;
            if channels == 1 {
                img.to_luma8().into_raw()
            } else {
                img.to_rgb8().into_raw()
            }
        }
    };
    if pixels.len() != width * height * channels as usize {
        return Err(Error::Protocol("payload does not match frame dimensions".into()));
    }
    Ok(FrameMessage {
        aov,
        encoding,
        channels,
        width,
        height,
        pixels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_texture_side: usize,
    /// Encoded size of an inline texture.
    pub max_texture_bytes: usize,
    pub max_frame_side: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_texture_side: 4096,
            max_texture_bytes: 32 << 20,
            max_frame_side: 4096,
        }
    }
}

/// Read-only data shared by all sessions of a server.
#[derive(Clone, Debug)]
pub struct SessionAssets {
    pub scene: Arc<SplatScene>,
    pub cameras: Arc<Vec<Camera>>,
    pub backgrounds: Arc<Vec<RgbImage>>,
    pub backplate: Option<Backplate>,
    pub mip_levels: usize,
    /// Where `save_pose` writes the sidecar. `None` disables it.
    pub scene_path: Option<PathBuf>,
    pub limits: Limits,
}

impl SessionAssets {
    /// Loads a checkpoint with its sidecar, plus the dataset's background
    /// textures when `data` is given.
    pub fn open(scene_path: &Path, data: Option<&Path>) -> Result<Self> {
        let scene = SplatScene::load(scene_path)?;
        let sidecar = SceneSidecar::load(scene_path)?.unwrap_or_default();
        let (mut cameras, mut backgrounds, mut backplate) = (Vec::new(), Vec::new(), sidecar.backplate);
        if let Some(dir) = data {
            let ds = Dataset::load(dir)?;
            cameras = ds.cameras;
            backgrounds = ds.backgrounds;
            backplate = backplate.or(ds.manifest.wall);
        }
        if cameras.is_empty() {
            cameras = sidecar.cameras.iter().map(Camera::try_from).collect::<Result<_>>()?;
        }
        if cameras.is_empty() {
            return Err(Error::Dataset("no cameras in the scene sidecar or dataset".into()));
        }
        Ok(Self {
            scene: Arc::new(scene),
            cameras: Arc::new(cameras),
            backgrounds: Arc::new(backgrounds),
            backplate,
            mip_levels: sidecar.mip_levels.unwrap_or(DEFAULT_LEVELS),
            scene_path: Some(scene_path.to_path_buf()),
            limits: Limits::default(),
        })
    }
}

struct ActiveBackground {
    texture: Arc<RgbImage>,
    pyramid: Arc<MipPyramid>,
}

/// Per-connection state. Each request is applied atomically: a failed
/// request leaves the state unchanged.
pub struct Session {
    assets: SessionAssets,
    camera: Camera,
    background: Option<ActiveBackground>,
    exposure: f64,
    backplate: Option<Backplate>,
    encoding: Encoding,
    options: RenderOptions,
}

/// Everything a frame request can return, before 8-bit encoding.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub foreground: RenderOutput,
    pub color: RgbImage,
}

type Reject = (ErrorCode, String, Option<u64>);

fn invalid(msg: impl Into<String>) -> Reject {
    (ErrorCode::InvalidArgument, msg.into(), None)
}

impl Session {
    pub fn new(assets: SessionAssets) -> Result<Self> {
        let camera = assets
            .cameras
            .first()
            .cloned()
            .ok_or_else(|| Error::InvalidParameter("session needs at least one camera".into()))?;
        Ok(Self {
            backplate: assets.backplate.clone(),
            assets,
            camera,
            background: None,
            exposure: 1.0,
            encoding: Encoding::Raw,
            options: RenderOptions::default(),
        })
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn exposure(&self) -> f64 {
        self.exposure
    }

    pub fn backplate(&self) -> Option<&Backplate> {
        self.backplate.as_ref()
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    /// Handles one text message.
    pub fn handle_text(&mut self, text: &str) -> Vec<Reply> {
        match serde_json::from_str::<Envelope>(text) {
            Ok(env) => self.handle(env.seq, env.request),
            Err(e) => vec![error_reply(None, (ErrorCode::Malformed, e.to_string(), None))],
        }
    }

    /// Handles messages that arrived together. State changes apply in
    /// order; every `request_frame` but the last is answered `cancelled`.
    pub fn handle_batch<S: AsRef<str>>(&mut self, texts: &[S]) -> Vec<Reply> {
        let parsed: Vec<_> = texts.iter().map(|t| serde_json::from_str::<Envelope>(t.as_ref())).collect();
        let last_frame = parsed
            .iter()
            .rposition(|p| matches!(p, Ok(Envelope { request: Request::RequestFrame { .. }, .. })));
        let mut out = Vec::new();
        for (i, p) in parsed.into_iter().enumerate() {
            match p {
                Ok(Envelope { seq, request: Request::RequestFrame { .. } }) if Some(i) != last_frame => {
                    out.push(Reply::Text(Response::Cancelled { seq }));
                }
                Ok(env) => out.extend(self.handle(env.seq, env.request)),
                Err(e) => out.push(error_reply(None, (ErrorCode::Malformed, e.to_string(), None))),
            }
        }
        out
    }

    pub fn handle(&mut self, seq: Option<u64>, request: Request) -> Vec<Reply> {
        let op = request.op();
        match request {
            Request::RequestFrame { aovs } => match self.frame_replies(&aovs) {
                Ok(frames) => {
                    let mut out = vec![Reply::Text(Response::Frame {
                        seq,
                        width: self.camera.width,
                        height: self.camera.height,
                        aovs,
                    })];
                    out.extend(frames.into_iter().map(Reply::Binary));
                    out
                }
                Err(e) => vec![error_reply(seq, (ErrorCode::Failed, e.to_string(), None))],
            },
            Request::Hello { version, encoding } => {
                if let Some(v) = version.filter(|&v| v != PROTOCOL_VERSION) {
                    let msg = format!("protocol version {v} is not supported (server speaks {PROTOCOL_VERSION})");
                    return vec![error_reply(seq, (ErrorCode::UnsupportedVersion, msg, Some(PROTOCOL_VERSION as u64)))];
                }
                if let Some(e) = encoding {
                    self.encoding = e;
                }
                vec![Reply::Text(self.hello())]
            }
            other => match self.apply(other) {
                Ok(()) => vec![Reply::Text(Response::Ack { seq, op: op.into() })],
                Err(r) => vec![error_reply(seq, r)],
            },
        }
    }

    fn hello(&self) -> Response {
        Response::Hello {
            version: PROTOCOL_VERSION,
            encoding: self.encoding,
            width: self.camera.width,
            height: self.camera.height,
            primitives: self.assets.scene.len(),
            backgrounds: self.assets.backgrounds.len(),
            cameras: self.assets.cameras.len(),
            max_texture_side: self.assets.limits.max_texture_side,
        }
    }

    fn apply(&mut self, request: Request) -> std::result::Result<(), Reject> {
        match request {
            Request::SetCamera { id, pose, width, height } => {
                let base = match id {
                    Some(j) => self
                        .assets
                        .cameras
                        .get(j)
                        .cloned()
                        .ok_or_else(|| invalid(format!("camera {j} does not exist")))?,
                    None => self.camera.clone(),
                };
                let mut cam = match &pose {
                    Some(p) => base.with_pose(p).map_err(|e| invalid(e.to_string()))?,
                    None => base,
                };
                if width.is_some() || height.is_some() {
                    let (w, h) = (width.unwrap_or(cam.width), height.unwrap_or(cam.height));
                    let limit = self.assets.limits.max_frame_side;
                    if w > limit || h > limit {
                        return Err((ErrorCode::TooLarge, format!("{w}x{h} frame"), Some(limit as u64)));
                    }
                    cam = resized(&cam, w, h).map_err(|e| invalid(e.to_string()))?;
                }
                self.camera = cam;
            }
            Request::SetBackground { id, image } => {
                let texture = match (id, image) {
                    (Some(_), Some(_)) => return Err(invalid("give either a background id or an image, not both")),
                    (Some(k), None) => Some(Arc::new(
                        self.assets
                            .backgrounds
                            .get(k)
                            .cloned()
                            .ok_or_else(|| invalid(format!("background {k} does not exist")))?,
                    )),
                    (None, Some(data)) => Some(Arc::new(self.decode_texture(&data)?)),
                    (None, None) => None,
                };
                self.background = match texture {
                    Some(texture) => {
                        let pyramid = MipPyramid::build_capped(&texture, self.assets.mip_levels)
                            .map_err(|e| invalid(e.to_string()))?;
                        let pyramid = match id {
                            Some(k) => pyramid.with_background_id(k),
                            None => pyramid,
                        };
                        Some(ActiveBackground {
                            texture,
                            pyramid: Arc::new(pyramid),
                        })
                    }
                    None => None,
                };
            }
            Request::SetExposure { scale } => {
                if !(scale.is_finite() && scale >= 0.0) {
                    return Err(invalid(format!("exposure must be finite and nonnegative, got {scale}")));
                }
                self.exposure = scale;
            }
            Request::SetBackplate { pose } => {
                let plate = self.backplate.as_ref().ok_or_else(|| invalid("scene has no backplate"))?;
                let posed = Backplate { pose, ..plate.clone() };
                posed.posed_corners().map_err(|e| invalid(e.to_string()))?;
                self.backplate = Some(posed);
            }
            Request::SavePose => {
                let path = self.assets.scene_path.as_ref().ok_or_else(|| invalid("session has no scene file"))?;
                let plate = self.backplate.clone().ok_or_else(|| invalid("scene has no backplate"))?;
                let fail = |e: Error| (ErrorCode::Failed, e.to_string(), None);
                let mut sidecar = SceneSidecar::load(path).map_err(fail)?.unwrap_or_default();
                sidecar.backplate = Some(plate);
                sidecar.save(path).map_err(fail)?;
            }
            Request::Hello { .. } | Request::RequestFrame { .. } => unreachable!("handled by Session::handle"),
        }
        Ok(())
    }

    fn decode_texture(&self, data: &str) -> std::result::Result<RgbImage, Reject> {
        let limits = self.assets.limits;
        if data.len() / 4 * 3 > limits.max_texture_bytes {
            return Err((
                ErrorCode::TooLarge,
                "inline texture exceeds the size limit".into(),
                Some(limits.max_texture_bytes as u64),
            ));
        }
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(data)
            .map_err(|e| invalid(format!("inline texture is not base64: {e}")))?;
        let reader = image::ImageReader::new(Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| invalid(e.to_string()))?;
        let (w, h) = reader.into_dimensions().map_err(|e| invalid(format!("inline texture: {e}")))?;
        let side = w.max(h) as usize;
        if side > limits.max_texture_side {
            return Err((
                ErrorCode::TooLarge,
                format!("{w}x{h} texture"),
                Some(limits.max_texture_side as u64),
            ));
        }
        let img = image::load_from_memory(&bytes).map_err(|e| invalid(format!("inline texture: {e}")))?;
        Ok(RgbImage::from_rgb8(&img.to_rgb8()))
    }

    /// Renders the current state at full precision.
    pub fn render(&self) -> Result<RenderedFrame> {
        let opts = RenderOptions {
            lambda_scale: self.exposure,
            ..self.options
        };
        let bg = self.background.as_ref();
        let foreground = render(&self.assets.scene, &self.camera, bg.map(|b| &*b.pyramid), &opts)?;
        let color = match (bg, &self.backplate) {
            (Some(b), Some(plate)) => composite(&foreground, &render_backplate(plate, &self.camera, &b.texture)?.color)?,
            _ => foreground.color.clone(),
        };
        Ok(RenderedFrame { foreground, color })
    }

    fn frame_replies(&self, aovs: &[Aov]) -> Result<Vec<Vec<u8>>> {
        let frame = self.render()?;
        let (w, h) = (frame.color.width, frame.color.height);
        aovs.iter()
            .map(|&aov| encode_frame(aov, self.encoding, w, h, &frame.aov_bytes(aov)))
            .collect()
    }
}

impl RenderedFrame {
    /// 8-bit samples of one AOV, values clamped to `[0, 1]`.
    pub fn aov_bytes(&self, aov: Aov) -> Vec<u8> {
        let rgb = |img: &RgbImage| img.data.iter().flat_map(|p| p.map(quantize)).collect();
        let fg = &self.foreground;
        match aov {
            Aov::Color => rgb(&self.color),
            Aov::Unlit => rgb(&fg.canonical),
            Aov::Residual => rgb(&fg.residual_map),
            Aov::Alpha => fg.alpha.data.iter().map(|&v| quantize(v)).collect(),
            Aov::Lambda => fg.lambda_map.data.iter().map(|&v| quantize(v)).collect(),
            Aov::Depth => {
                let far = fg.depth.data.iter().copied().fold(0.0, f64::max);
                let s = if far > 0.0 { 1.0 / far } else { 0.0 };
                fg.depth.data.iter().map(|&v| quantize(v * s)).collect()
            }
        }
    }
}

fn resized(cam: &Camera, width: usize, height: usize) -> Result<Camera> {
    let (sx, sy) = (width as f64 / cam.width as f64, height as f64 / cam.height as f64);
    Camera::new(
        cam.id,
        cam.rotation,
        cam.translation,
        cam.fx * sx,
        cam.fy * sy,
        cam.cx * sx,
        cam.cy * sy,
        width,
        height,
    )
}

fn error_reply(seq: Option<u64>, (code, message, limit): Reject) -> Reply {
    Reply::Text(Response::Error {
        seq,
        code,
        message,
        limit,
    })
}

/// Accepts connections forever, one thread and one [`Session`] each.
pub fn serve(listener: TcpListener, assets: SessionAssets) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream.map_err(|e| Error::Protocol(format!("accept failed: {e}")))?;
        let assets = assets.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = Session::new(assets).and_then(|s| run_connection(stream, s)) {
                log::warn!("session {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

fn ws_err(e: tungstenite::Error) -> Error {
    Error::Protocol(e.to_string())
}

/// Runs one websocket session until the client disconnects. Messages that
/// are already queued when a batch starts are handled together so stale
/// frame requests can be dropped.
pub fn run_connection(stream: TcpStream, mut session: Session) -> Result<()> {
    use tungstenite::{Error as WsError, Message};

    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Protocol(format!("handshake failed: {e}")))?;
    let io = |e: std::io::Error| Error::Protocol(e.to_string());
    loop {
        let first = match ws.read() {
            Ok(m) => m,
            Err(WsError::ConnectionClosed | WsError::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        };
        let mut batch = vec![first];
        let mut closing = false;
        ws.get_mut().set_nonblocking(true).map_err(io)?;
        loop {
            match ws.read() {
                Ok(m) => batch.push(m),
                Err(WsError::Io(e)) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                Err(_) => {
                    closing = true;
                    break;
                }
            }
        }
        ws.get_mut().set_nonblocking(false).map_err(io)?;

        let mut texts = Vec::new();
        let mut replies = Vec::new();
        for m in batch {
            match m {
                Message::Text(t) => texts.push(t.to_string()),
                Message::Binary(_) => {
                    replies.extend(session.handle_batch(&std::mem::take(&mut texts)));
                    replies.push(error_reply(
                        None,
                        (ErrorCode::Malformed, "clients send text messages only".into(), None),
                    ));
                }
                Message::Close(_) => closing = true,
                _ => {}
            }
        }
        replies.extend(session.handle_batch(&texts));
        for r in replies {
            let msg = match r {
                Reply::Text(resp) => Message::text(resp.to_json()),
                Reply::Binary(b) => Message::binary(b),
            };
            match ws.send(msg) {
                Ok(()) => {}
                Err(WsError::ConnectionClosed | WsError::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(ws_err(e)),
            }
        }
        if closing {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
    }
}
