//! Length-prefixed binary protocol for out-of-process backends.
//!
//! Every message is a little-endian `u32` byte count followed by the payload.
//!
//! Request payload:
//! `u8 kind | u64 frame_id | u32 width | u32 height | 9 × f64 transform`
//! then, for pose requests only, `u32 index | 5 × f64 detection (x, y, w, h,
//! score or NaN)`, then `width * height * 3` RGB bytes. The transform is
//! `scale, pad_x, pad_y, src_x, src_y, src_w, src_h, dst_w, dst_h`.
//!
//! Response payload: `u8 status`. Status 0 is followed by `u32 count` and
//! `count × 5 × f64` boxes for detection, or a serialized heatmap stack for
//! pose. Any other status is followed by a UTF-8 error message.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use image::RgbImage;

use crate::geometry::{BBox, PatchTransform};
use crate::heatmap::HeatmapStack;

use super::backend::{BackendError, DetectorBackend, DetectorInput, PatchInput, PoseBackend};
use super::DEFAULT_DETECTOR_INPUT;

pub const MSG_DETECT: u8 = 1;
pub const MSG_POSE: u8 = 2;

const STATUS_OK: u8 = 0;
const STATUS_ERR: u8 = 1;
const MAX_MESSAGE: usize = 1 << 30;

pub fn write_message(w: &mut impl Write, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "message too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one message; `None` on a clean end of stream.
pub fn read_message(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("message of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn put_transform(out: &mut Vec<u8>, t: &PatchTransform<f64>) {
    let s = &t.src_box;
    for v in [t.scale, t.pad_x, t.pad_y, s.x, s.y, s.w, s.h, t.dst_w, t.dst_h] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn request_header(kind: u8, frame_id: u64, image: &RgbImage, t: &PatchTransform<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + image.as_raw().len());
    out.push(kind);
    out.extend_from_slice(&frame_id.to_le_bytes());
    out.extend_from_slice(&image.width().to_le_bytes());
    out.extend_from_slice(&image.height().to_le_bytes());
    put_transform(&mut out, t);
    out
}

pub fn encode_detect_request(input: &DetectorInput) -> Vec<u8> {
    let mut out = request_header(MSG_DETECT, input.frame_id, &input.image, &input.transform);
    out.extend_from_slice(input.image.as_raw());
    out
}

pub fn encode_pose_request(patch: &PatchInput) -> Vec<u8> {
    let mut out = request_header(MSG_POSE, patch.frame_id, &patch.image, &patch.transform);
    out.extend_from_slice(&(patch.index as u32).to_le_bytes());
    let d = &patch.detection;
    for v in [d.x, d.y, d.w, d.h, d.score.unwrap_or(f64::NAN)] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(patch.image.as_raw());
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackendError> {
        if self.buf.len() < n {
            return Err(BackendError::Protocol(format!(
                "truncated message: wanted {n} more bytes, have {}",
                self.buf.len()
            )));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, BackendError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BackendError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, BackendError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn transform(&mut self) -> Result<PatchTransform<f64>, BackendError> {
        let mut v = [0.0; 9];
        for x in v.iter_mut() {
            *x = self.f64()?;
        }
        Ok(PatchTransform {
            scale: v[0],
            pad_x: v[1],
            pad_y: v[2],
            src_box: BBox {
                x: v[3],
                y: v[4],
                w: v[5],
                h: v[6],
                score: None,
            },
            dst_w: v[7],
            dst_h: v[8],
        })
    }

    fn image(&mut self, w: u32, h: u32) -> Result<RgbImage, BackendError> {
        let n = w as usize * h as usize * 3;
        let raw = self.take(n)?.to_vec();
        RgbImage::from_raw(w, h, raw)
            .ok_or_else(|| BackendError::Protocol("bad image payload".into()))
    }

    fn finish(&self) -> Result<(), BackendError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(BackendError::Protocol(format!(
                "{} trailing bytes",
                self.buf.len()
            )))
        }
    }
}

/// A decoded request.
pub enum Request {
    Detect(DetectorInput),
    Pose(PatchInput),
}

pub fn decode_request(payload: &[u8]) -> Result<Request, BackendError> {
    let mut c = Cursor { buf: payload };
    let kind = c.u8()?;
    let frame_id = c.u64()?;
    let (w, h) = (c.u32()?, c.u32()?);
    let transform = c.transform()?;
    let req = match kind {
        MSG_DETECT => Request::Detect(DetectorInput {
            frame_id,
            image: c.image(w, h)?,
            transform,
        }),
        MSG_POSE => {
            let index = c.u32()? as usize;
            let (x, y, bw, bh, s) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?, c.f64()?);
            Request::Pose(PatchInput {
                frame_id,
                index,
                detection: BBox {
                    x,
                    y,
                    w: bw,
                    h: bh,
                    score: (!s.is_nan()).then_some(s),
                },
                image: c.image(w, h)?,
                transform,
            })
        }
        other => return Err(BackendError::Protocol(format!("unknown request kind {other}"))),
    };
    c.finish()?;
    Ok(req)
}

fn ok_response(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + body.len());
    out.push(STATUS_OK);
    out.extend_from_slice(body);
    out
}

fn err_response(message: &str) -> Vec<u8> {
    let mut out = vec![STATUS_ERR];
    out.extend_from_slice(message.as_bytes());
    out
}

pub fn encode_boxes(boxes: &[BBox<f64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 40 * boxes.len());
    out.extend_from_slice(&(boxes.len() as u32).to_le_bytes());
    for b in boxes {
        for v in [b.x, b.y, b.w, b.h, b.score.unwrap_or(0.0)] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn response_body(payload: &[u8]) -> Result<&[u8], BackendError> {
    match payload.split_first() {
        Some((&STATUS_OK, body)) => Ok(body),
        Some((_, msg)) => Err(BackendError::Failed(String::from_utf8_lossy(msg).into_owned())),
        None => Err(BackendError::Protocol("empty response".into())),
    }
}

pub fn decode_boxes(body: &[u8]) -> Result<Vec<BBox<f64>>, BackendError> {
    let mut c = Cursor { buf: body };
    let n = c.u32()? as usize;
    let mut boxes = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let v: Vec<f64> = (0..5).map(|_| c.f64()).collect::<Result<_, _>>()?;
        boxes.push(BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
            score: Some(v[4]),
        });
    }
    c.finish()?;
    Ok(boxes)
}

/// Answers requests from `reader` until end of stream. Backend failures are
/// sent back as error responses; only transport errors end the loop.
pub fn serve<R, W, D, P>(reader: &mut R, writer: &mut W, det: &mut D, pose: &mut P) -> io::Result<()>
where
    R: Read,
    W: Write,
    D: DetectorBackend + ?Sized,
    P: PoseBackend + ?Sized,
{
    while let Some(msg) = read_message(reader)? {
        let response = match decode_request(&msg) {
            Ok(Request::Detect(input)) => match det.detect(&input) {
                Ok(boxes) => ok_response(&encode_boxes(&boxes)),
                Err(e) => err_response(&e.to_string()),
            },
            Ok(Request::Pose(patch)) => match pose.estimate(&patch) {
                Ok(stack) => ok_response(&stack.to_bytes()),
                Err(e) => err_response(&e.to_string()),
            },
            Err(e) => err_response(&e.to_string()),
        };
        write_message(writer, &response)?;
    }
    Ok(())
}

/// Client side over any byte stream pair.
pub struct ExternalDetector<R, W> {
    reader: R,
    writer: W,
    input_size: u32,
}

impl<R: Read + Send, W: Write + Send> ExternalDetector<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            input_size: DEFAULT_DETECTOR_INPUT,
        }
    }

    pub fn with_input_size(mut self, side: u32) -> Self {
        self.input_size = side;
        self
    }
}

fn round_trip(r: &mut impl Read, w: &mut impl Write, payload: &[u8]) -> Result<Vec<u8>, BackendError> {
    write_message(w, payload)?;
    read_message(r)?
        .ok_or_else(|| BackendError::Protocol("backend closed the stream".into()))
}

impl<R: Read + Send, W: Write + Send> DetectorBackend for ExternalDetector<R, W> {
    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn detect(&mut self, input: &DetectorInput) -> Result<Vec<BBox<f64>>, BackendError> {
        let resp = round_trip(&mut self.reader, &mut self.writer, &encode_detect_request(input))?;
        decode_boxes(response_body(&resp)?)
    }
}

pub struct ExternalPose<R, W> {
    reader: R,
    writer: W,
}

impl<R: Read + Send, W: Write + Send> ExternalPose<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader, writer }
    }
}

impl<R: Read + Send, W: Write + Send> PoseBackend for ExternalPose<R, W> {
    fn estimate(&mut self, patch: &PatchInput) -> Result<HeatmapStack<f64>, BackendError> {
        let resp = round_trip(&mut self.reader, &mut self.writer, &encode_pose_request(patch))?;
        HeatmapStack::from_bytes(response_body(&resp)?)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

/// A backend child process speaking the protocol on stdin/stdout.
pub struct ProcessBackend {
    child: Child,
    reader: BufReader<ChildStdout>,
    writer: Option<BufWriter<ChildStdin>>,
    input_size: u32,
}

impl ProcessBackend {
    pub fn spawn(mut command: Command) -> io::Result<Self> {
        let mut child = command
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            reader: BufReader::new(stdout),
            writer: Some(BufWriter::new(stdin)),
            input_size: DEFAULT_DETECTOR_INPUT,
        })
    }

    pub fn with_input_size(mut self, side: u32) -> Self {
        self.input_size = side;
        self
    }

    fn call(&mut self, payload: &[u8]) -> Result<Vec<u8>, BackendError> {
        let w = self
            .writer
            .as_mut()
            .ok_or_else(|| BackendError::Protocol("backend already closed".into()))?;
        round_trip(&mut self.reader, w, payload)
    }
}

impl DetectorBackend for ProcessBackend {
    fn input_size(&self) -> u32 {
        self.input_size
    }

    fn detect(&mut self, input: &DetectorInput) -> Result<Vec<BBox<f64>>, BackendError> {
        let resp = self.call(&encode_detect_request(input))?;
        decode_boxes(response_body(&resp)?)
    }
}

impl PoseBackend for ProcessBackend {
    fn estimate(&mut self, patch: &PatchInput) -> Result<HeatmapStack<f64>, BackendError> {
        let resp = self.call(&encode_pose_request(patch))?;
        HeatmapStack::from_bytes(response_body(&resp)?)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        // closing stdin ends the server loop
        self.writer.take();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::letterbox_transform;
    use crate::heatmap::{encode, CodecConfig};
    use crate::keypoints::{Keypoint, KeypointSet, Visibility};
    use crate::pipeline::{MockDetector, MockPose};
    use std::collections::HashMap;

    #[test]
    fn message_framing() {
        let mut buf = Vec::new();
        write_message(&mut buf, b"abc").unwrap();
        write_message(&mut buf, b"").unwrap();
        assert_eq!(&buf[..4], &3u32.to_le_bytes());
        let mut r = &buf[..];
        assert_eq!(read_message(&mut r).unwrap().unwrap(), b"abc");
        assert_eq!(read_message(&mut r).unwrap().unwrap(), b"");
        assert!(read_message(&mut r).unwrap().is_none());
    }

    #[test]
    fn requests_round_trip() {
        let t = letterbox_transform(40.0, 20.0, 64.0).unwrap();
        let input = DetectorInput {
            frame_id: 42,
            image: RgbImage::from_pixel(64, 64, image::Rgb([1, 2, 3])),
            transform: t,
        };
        let Request::Detect(back) = decode_request(&encode_detect_request(&input)).unwrap() else {
            panic!("wrong kind");
        };
        assert_eq!(back.frame_id, 42);
        assert_eq!(back.transform, t);
        assert_eq!(back.image, input.image);

        let patch = PatchInput {
            frame_id: 7,
            index: 3,
            detection: BBox::new(1.0, 2.0, 3.0, 4.0).unwrap().with_score(0.5),
            image: RgbImage::new(192, 256),
            transform: t,
        };
        let Request::Pose(back) = decode_request(&encode_pose_request(&patch)).unwrap() else {
            panic!("wrong kind");
        };
        assert_eq!((back.index, back.detection), (3, patch.detection));
        assert!(decode_request(&[9, 0]).is_err());
    }

    #[test]
    fn serve_answers_and_reports_failures() {
        let b = BBox::new(2.0, 2.0, 10.0, 10.0).unwrap().with_score(0.75);
        let mut det = MockDetector::new(HashMap::from([(1, vec![b])])).failing_on([2]);
        let kps = KeypointSet::new([Keypoint::new(50.0, 60.0, Visibility::Visible); 17]);
        let mut pose = MockPose::fixed(kps.clone());
        let t = letterbox_transform(20.0, 20.0, 40.0).unwrap();
        let req = |id| DetectorInput {
            frame_id: id,
            image: RgbImage::new(40, 40),
            transform: t,
        };
        let patch = PatchInput {
            frame_id: 1,
            index: 0,
            detection: b,
            image: RgbImage::new(192, 256),
            transform: t,
        };
        let mut input = Vec::new();
        for msg in [
            encode_detect_request(&req(1)),
            encode_detect_request(&req(2)),
            encode_pose_request(&patch),
        ] {
            write_message(&mut input, &msg).unwrap();
        }
        let mut output = Vec::new();
        serve(&mut &input[..], &mut output, &mut det, &mut pose).unwrap();

        let mut r = &output[..];
        let boxes = decode_boxes(response_body(&read_message(&mut r).unwrap().unwrap()).unwrap()).unwrap();
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].w, 20.0);
        assert_eq!(boxes[0].score, Some(0.75));
        let failed = read_message(&mut r).unwrap().unwrap();
        assert!(matches!(response_body(&failed), Err(BackendError::Failed(m)) if m.contains("frame 2")));
        let stack = HeatmapStack::<f64>::from_bytes(
            response_body(&read_message(&mut r).unwrap().unwrap()).unwrap(),
        )
        .unwrap();
        let want = encode(&kps, &CodecConfig::default());
        for (a, b) in stack.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
