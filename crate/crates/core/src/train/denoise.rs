//! Denoiser boundary for score distillation: an in-process trait plus a
//! length-prefixed byte protocol for denoisers running in another process.

use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::Image;

/// What the render being denoised depicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenoiseKind {
    Rgb,
    /// Camera-space normals encoded as `(n + 1) / 2`, zero on the background.
    Normal,
}

/// One denoising query: a full step from `timestep` to 0.
#[derive(Debug, Clone)]
pub struct DenoiseRequest<'a> {
    pub kind: DenoiseKind,
    pub render: &'a Image,
    /// Observed training image the novel view is conditioned on.
    pub condition: &'a Image,
    pub prompt: &'a str,
    /// Fraction of the denoiser's timestep range, in (0, 1].
    pub timestep: f64,
    /// Standard normal noise with the render's shape.
    pub noise: &'a Image,
    pub camera: &'a Camera,
    pub frame: usize,
    /// Index of the novel view within the step.
    pub view: usize,
}

pub trait Denoiser {
    fn name(&self) -> &str;
    /// Must return an image with the render's shape.
    fn denoise(&mut self, request: &DenoiseRequest) -> Result<Image>;
}

/// Returns its input; the SDS residual is then exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn name(&self) -> &str {
        "identity"
    }

    fn denoise(&mut self, request: &DenoiseRequest) -> Result<Image> {
        Ok(request.render.clone())
    }
}

/// Answers every request with a caller-supplied target, typically a ground
/// truth render at the requested camera.
pub struct OracleDenoiser<F> {
    target: F,
}

impl<F: FnMut(&DenoiseRequest) -> Result<Image>> OracleDenoiser<F> {
    pub fn new(target: F) -> Self {
        OracleDenoiser { target }
    }
}

impl<F: FnMut(&DenoiseRequest) -> Result<Image>> Denoiser for OracleDenoiser<F> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn denoise(&mut self, request: &DenoiseRequest) -> Result<Image> {
        (self.target)(request)
    }
}

pub(crate) fn check_output(request: &DenoiseRequest, out: &Image, name: &str) -> Result<()> {
    if !out.same_shape(request.render) {
        return Err(Error::Denoiser(format!(
            "{name} returned {}×{}×{} for a {}×{}×{} render",
            out.width, out.height, out.channels, request.render.width, request.render.height, request.render.channels
        )));
    }
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Denoiser(format!("{name} returned non-finite pixels")));
    }
    Ok(())
}

// Wire format. Every message is `u64 length` (little endian) followed by the
// payload. A request payload is `u32 header length`, a JSON header, then the
// render, condition and noise tensors. A response payload is one tensor, or
// a JSON `{"error": ...}` when the first byte is `{`. A tensor is
// `u32 width, u32 height, u32 channels` and `width·height·channels` f32
// values, pixel-major.

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestHeader {
    pub version: u32,
    pub kind: DenoiseKind,
    pub prompt: String,
    pub timestep: f64,
    pub frame: usize,
    pub view: usize,
    pub camera: Camera,
}

fn protocol(msg: impl Into<String>) -> Error {
    Error::Denoiser(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, img: &Image) {
    for d in [img.width, img.height, img.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(protocol("truncated denoiser message"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Image> {
        let (w, h, c) = (self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        let n = w.checked_mul(h).and_then(|p| p.checked_mul(c)).ok_or_else(|| protocol("tensor size overflow"))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| protocol("tensor size overflow"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
        Image::from_data(w, h, c, data)
    }
}

fn write_message(w: &mut impl Write, payload: &[u8]) -> Result<()> {
    let io = |e| protocol(format!("denoiser pipe: {e}"));
    w.write_all(&(payload.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(payload).map_err(io)?;
    w.flush().map_err(io)
}

/// Reads one message; `None` on a clean end of stream.
fn read_message(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 8];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(protocol(format!("denoiser pipe: {e}"))),
    }
    let len = u64::from_le_bytes(len) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| protocol(format!("denoiser pipe: {e}")))?;
    Ok(Some(buf))
}

pub fn encode_request(request: &DenoiseRequest) -> Vec<u8> {
    let header = RequestHeader {
        version: PROTOCOL_VERSION,
        kind: request.kind,
        prompt: request.prompt.to_string(),
        timestep: request.timestep,
        frame: request.frame,
        view: request.view,
        camera: request.camera.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 16 + 12 * request.render.data.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    put_tensor(&mut out, request.render);
    put_tensor(&mut out, request.condition);
    put_tensor(&mut out, request.noise);
    out
}

/// Decoded request owned by a serving process.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedRequest {
    pub header: RequestHeader,
    pub render: Image,
    pub condition: Image,
    pub noise: Image,
}

impl OwnedRequest {
    pub fn as_request(&self) -> DenoiseRequest<'_> {
        DenoiseRequest {
            kind: self.header.kind,
            render: &self.render,
            condition: &self.condition,
            prompt: &self.header.prompt,
            timestep: self.header.timestep,
            noise: &self.noise,
            camera: &self.header.camera,
            frame: self.header.frame,
            view: self.header.view,
        }
    }
}

pub fn decode_request(bytes: &[u8]) -> Result<OwnedRequest> {
    let mut c = Cursor { bytes };
    let n = c.u32()? as usize;
    let header: RequestHeader = serde_json::from_slice(c.take(n)?).map_err(|e| protocol(format!("bad request header: {e}")))?;
    if header.version != PROTOCOL_VERSION {
        return Err(protocol(format!("protocol version {} (expected {PROTOCOL_VERSION})", header.version)));
    }
    let (render, condition, noise) = (c.tensor()?, c.tensor()?, c.tensor()?);
    Ok(OwnedRequest { header, render, condition, noise })
}

fn encode_response(result: &Result<Image>) -> Vec<u8> {
    match result {
        Ok(img) => {
            let mut out = Vec::new();
            put_tensor(&mut out, img);
            out
        }
        Err(e) => serde_json::to_vec(&serde_json::json!({ "error": e.to_string() })).expect("json"),
    }
}

fn decode_response(bytes: &[u8]) -> Result<Image> {
    if bytes.first() == Some(&b'{') {
        let v: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| protocol(format!("bad error response: {e}")))?;
        return Err(protocol(format!("remote denoiser: {}", v["error"].as_str().unwrap_or("unknown error"))));
    }
    Cursor { bytes }.tensor()
}

/// Answer requests from `input` with `denoiser` until the stream ends.
/// Returns the number of requests served.
pub fn serve(input: impl Read, output: impl Write, denoiser: &mut dyn Denoiser) -> Result<usize> {
    let (mut r, mut w) = (BufReader::new(input), BufWriter::new(output));
    let mut served = 0;
    while let Some(msg) = read_message(&mut r)? {
        let result = decode_request(&msg).and_then(|req| {
            let out = denoiser.denoise(&req.as_request())?;
            check_output(&req.as_request(), &out, denoiser.name())?;
            Ok(out)
        });
        write_message(&mut w, &encode_response(&result))?;
        served += 1;
    }
    Ok(served)
}

/// Denoiser running as a child process that speaks the protocol on its
/// stdin and stdout.
pub struct ProcessDenoiser {
    name: String,
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ProcessDenoiser {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| protocol(format!("cannot start denoiser `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessDenoiser { name: program.to_string(), child, stdin: Some(stdin), stdout })
    }
}

impl Denoiser for ProcessDenoiser {
    fn name(&self) -> &str {
        &self.name
    }

    fn denoise(&mut self, request: &DenoiseRequest) -> Result<Image> {
        let stdin = self.stdin.as_mut().ok_or_else(|| protocol("denoiser stdin closed"))?;
        write_message(stdin, &encode_request(request))?;
        let msg = read_message(&mut self.stdout)?.ok_or_else(|| protocol(format!("denoiser `{}` exited", self.name)))?;
        decode_response(&msg)
    }
}

impl Drop for ProcessDenoiser {
    fn drop(&mut self) {
        drop(self.stdin.take());
        let _ = self.child.wait();
    }
}
