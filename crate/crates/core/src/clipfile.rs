//! Clip file: a text header and annotation block followed by raw RGB bytes.
//! The byte layout is described in `docs/formats.md`.

use std::fmt::Write as _;
use std::path::Path;

use crate::skeleton::{PersonAnnotation, NUM_JOINTS};
use crate::synth::VideoClip;

pub const CLIP_HEADER: &str = "VEPE-CLIP-1";
/// Upper bound on the decoded payload, to keep hostile inputs cheap.
pub const MAX_PAYLOAD: usize = 1 << 28;

#[derive(Debug, thiserror::Error)]
pub enum ClipError {
    #[error("clip parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("clip io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode_clip(clip: &VideoClip) -> Vec<u8> {
    let mut text = String::new();
    writeln!(text, "{CLIP_HEADER}").unwrap();
    writeln!(text, "clip_id {}", clip.clip_id).unwrap();
    writeln!(text, "seed {}", clip.seed).unwrap();
    writeln!(text, "size {} {}", clip.width, clip.height).unwrap();
    writeln!(text, "frames {}", clip.frames.len()).unwrap();
    for (t, people) in clip.annotations.iter().enumerate() {
        writeln!(text, "frame {t} {}", people.len()).unwrap();
        for p in people {
            write!(text, "person {}", p.track_id).unwrap();
            for j in 0..NUM_JOINTS {
                write!(text, " {} {} {}", p.keypoints[j][0], p.keypoints[j][1], p.visible[j] as u8).unwrap();
            }
            text.push('\n');
        }
    }
    let payload: usize = clip.frames.iter().map(Vec::len).sum();
    writeln!(text, "payload {payload}").unwrap();
    let mut out = text.into_bytes();
    for f in &clip.frames {
        out.extend_from_slice(f);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T, ClipError> {
        Err(ClipError::Parse { offset, reason: reason.into() })
    }

    /// Next text line (without the newline) and its starting offset.
    fn line(&mut self) -> Result<(usize, &'a str), ClipError> {
        let start = self.pos;
        let Some(len) = self.bytes[start..].iter().position(|&b| b == b'\n') else {
            return self.fail(start, "unterminated line");
        };
        let raw = &self.bytes[start..start + len];
        self.pos = start + len + 1;
        match std::str::from_utf8(raw) {
            Ok(s) => Ok((start, s)),
            Err(e) => self.fail(start + e.valid_up_to(), "invalid utf-8"),
        }
    }

    /// Next line, which must be `key` followed by exactly `n` fields.
    fn fields(&mut self, key: &str, n: usize) -> Result<(usize, Vec<&'a str>), ClipError> {
        let (at, line) = self.line()?;
        let mut parts = line.split(' ');
        if parts.next() != Some(key) {
            return self.fail(at, format!("expected `{key}` line"));
        }
        let rest: Vec<&str> = parts.collect();
        if rest.len() != n {
            return self.fail(at, format!("`{key}` line needs {n} fields, found {}", rest.len()));
        }
        Ok((at, rest))
    }
}

fn num<T: std::str::FromStr>(at: usize, s: &str, what: &str) -> Result<T, ClipError> {
    s.parse().map_err(|_| ClipError::Parse { offset: at, reason: format!("bad {what} `{s}`") })
}

pub fn decode_clip(bytes: &[u8]) -> Result<VideoClip, ClipError> {
    let mut c = Cursor { bytes, pos: 0 };
    let header_ok = bytes.len() > CLIP_HEADER.len() && bytes.starts_with(CLIP_HEADER.as_bytes()) && bytes[CLIP_HEADER.len()] == b'\n';
    if !header_ok {
        return c.fail(0, format!("expected header `{CLIP_HEADER}`"));
    }
    c.pos = CLIP_HEADER.len() + 1;
    let (at, f) = c.fields("clip_id", 1)?;
    if f[0].is_empty() {
        return c.fail(at, "empty clip id");
    }
    let clip_id = f[0].to_string();
    let (at, f) = c.fields("seed", 1)?;
    let seed: u64 = num(at, f[0], "seed")?;
    let (at, f) = c.fields("size", 2)?;
    let (width, height): (usize, usize) = (num(at, f[0], "width")?, num(at, f[1], "height")?);
    let frame_bytes = width.checked_mul(height).and_then(|v| v.checked_mul(3)).filter(|v| *v <= MAX_PAYLOAD);
    let Some(frame_bytes) = frame_bytes else {
        return c.fail(at, "frame size too large");
    };
    let (at, f) = c.fields("frames", 1)?;
    let count: usize = num(at, f[0], "frame count")?;
    if count.checked_mul(frame_bytes).is_none_or(|v| v > MAX_PAYLOAD) {
        return c.fail(at, "payload too large");
    }

    let mut annotations = Vec::with_capacity(count.min(1024));
    for t in 0..count {
        let (at, f) = c.fields("frame", 2)?;
        if num::<usize>(at, f[0], "frame index")? != t {
            return c.fail(at, format!("expected frame {t}"));
        }
        let people: usize = num(at, f[1], "person count")?;
        let mut frame = Vec::with_capacity(people.min(1024));
        for _ in 0..people {
            let (at, f) = c.fields("person", 1 + 3 * NUM_JOINTS)?;
            let track_id: u32 = num(at, f[0], "track id")?;
            let mut keypoints = [[0.0; 2]; NUM_JOINTS];
            let mut visible = [false; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                for k in 0..2 {
                    let v: f64 = num(at, f[1 + 3 * j + k], "coordinate")?;
                    if !v.is_finite() {
                        return c.fail(at, "non-finite coordinate");
                    }
                    keypoints[j][k] = v;
                }
                visible[j] = match f[3 + 3 * j] {
                    "0" => false,
                    "1" => true,
                    other => return c.fail(at, format!("bad visibility flag `{other}`")),
                };
            }
            frame.push(PersonAnnotation { track_id, keypoints, visible });
        }
        annotations.push(frame);
    }
    let (at, f) = c.fields("payload", 1)?;
    let payload: usize = num(at, f[0], "payload size")?;
    if payload != count * frame_bytes {
        return c.fail(at, format!("payload {payload} does not match {count} frames of {frame_bytes} bytes"));
    }
    let rest = &bytes[c.pos..];
    if rest.len() != payload {
        return c.fail(c.pos, format!("expected {payload} payload bytes, found {}", rest.len()));
    }
    let frames = (0..count).map(|t| rest[t * frame_bytes..(t + 1) * frame_bytes].to_vec()).collect();
    Ok(VideoClip { clip_id, seed, width, height, frames, annotations })
}

pub fn save_clip(clip: &VideoClip, path: &Path) -> Result<(), ClipError> {
    std::fs::write(path, encode_clip(clip))?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<VideoClip, ClipError> {
    decode_clip(&std::fs::read(path)?)
}
