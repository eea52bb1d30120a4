//! Bespoke little-endian recording format.
//!
//! ```text
//! "DGRC" | u16 version | u16 joint_count | f32 nominal_fps
//! per frame: u64 timestamp_us | 3 × f32 root | joint_count × (f32 x, y, z, w)
//! ```

use std::fs::File;
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::HarnessError;
use crate::model::{PoseFrame, UnitQuat};

pub const MAGIC: [u8; 4] = *b"DGRC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

/// Stored quaternions are f32; anything further than this from unit norm
/// is rejected as corrupt.
const NORM_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordingHeader {
    pub version: u16,
    pub joint_count: u16,
    pub nominal_fps: f32,
}

impl RecordingHeader {
    pub fn new(joint_count: usize, nominal_fps: f32) -> Result<Self, HarnessError> {
        let h = RecordingHeader {
            version: VERSION,
            joint_count: u16::try_from(joint_count)
                .map_err(|_| HarnessError::Format(format!("{joint_count} joints do not fit the header")))?,
            nominal_fps,
        };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.version != VERSION {
            return Err(HarnessError::Format(format!("unsupported version {}", self.version)));
        }
        if self.joint_count == 0 {
            return Err(HarnessError::Format("joint_count is zero".into()));
        }
        if !(self.nominal_fps > 0.0 && self.nominal_fps.is_finite()) {
            return Err(HarnessError::Format(format!("nominal_fps {}", self.nominal_fps)));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        frame_len(self.joint_count as usize)
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..6].copy_from_slice(&self.version.to_le_bytes());
        b[6..8].copy_from_slice(&self.joint_count.to_le_bytes());
        b[8..12].copy_from_slice(&self.nominal_fps.to_le_bytes());
        b
    }

    pub fn parse(b: &[u8]) -> Result<Self, HarnessError> {
        if b.len() < HEADER_LEN {
            return Err(HarnessError::Format(format!("{} bytes is shorter than the header", b.len())));
        }
        if b[0..4] != MAGIC {
            return Err(HarnessError::Format("bad magic".into()));
        }
        let h = RecordingHeader {
            version: u16::from_le_bytes([b[4], b[5]]),
            joint_count: u16::from_le_bytes([b[6], b[7]]),
            nominal_fps: f32::from_le_bytes(b[8..12].try_into().unwrap()),
        };
        h.validate()?;
        Ok(h)
    }
}

pub fn frame_len(joint_count: usize) -> usize {
    8 + 12 + 16 * joint_count
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub header: RecordingHeader,
    pub frames: Vec<PoseFrame>,
}

impl Recording {
    pub fn new(joint_count: usize, nominal_fps: f32, frames: Vec<PoseFrame>) -> Result<Self, HarnessError> {
        let r = Recording {
            header: RecordingHeader::new(joint_count, nominal_fps)?,
            frames,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn joint_count(&self) -> usize {
        self.header.joint_count as usize
    }

    pub fn duration_us(&self) -> u64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp_us - a.timestamp_us,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.header.validate()?;
        let jc = self.joint_count();
        for (i, f) in self.frames.iter().enumerate() {
            if f.joint_count() != jc {
                return Err(HarnessError::Format(format!("frame {i} has {} joints, header says {jc}", f.joint_count())));
            }
            if i > 0 && f.timestamp_us <= self.frames[i - 1].timestamp_us {
                return Err(HarnessError::Format(format!("frame {i}: timestamps not strictly increasing")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.frames.len() * self.header.frame_len());
        out.extend_from_slice(&self.header.to_bytes());
        for f in &self.frames {
            encode_frame_into(f, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HarnessError> {
        let header = RecordingHeader::parse(bytes)?;
        let body = &bytes[HEADER_LEN..];
        let flen = header.frame_len();
        if !body.len().is_multiple_of(flen) {
            return Err(HarnessError::Format(format!(
                "body of {} bytes is not a whole number of {flen}-byte frames",
                body.len()
            )));
        }
        let frames = body
            .chunks_exact(flen)
            .enumerate()
            .map(|(i, c)| decode_frame(c, header.joint_count as usize).map_err(|e| HarnessError::Format(format!("frame {i}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let r = Recording { header, frames };
        r.validate()?;
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let mut bytes = Vec::new();
        File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let mut w = RecordingWriter::create(path, self.header)?;
        for f in &self.frames {
            w.write_frame(f)?;
        }
        w.finish()?;
        Ok(())
    }
}

fn encode_frame_into(f: &PoseFrame, out: &mut Vec<u8>) {
    out.extend_from_slice(&f.timestamp_us.to_le_bytes());
    for v in f.root_translation {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for q in &f.rotations {
        for v in [q.x, q.y, q.z, q.w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

/// Rotations are widened from f32 exactly; only the sign is canonicalized,
/// so writing a loaded frame back reproduces its bytes.
fn decode_frame(c: &[u8], joint_count: usize) -> Result<PoseFrame, String> {
    let f32_at = |at: usize| f32::from_le_bytes(c[at..at + 4].try_into().unwrap());
    let timestamp_us = u64::from_le_bytes(c[0..8].try_into().unwrap());
    let root_translation = [f32_at(8), f32_at(12), f32_at(16)];
    if root_translation.iter().any(|v| !v.is_finite()) {
        return Err("non-finite root translation".into());
    }
    let mut rotations = Vec::with_capacity(joint_count);
    for j in 0..joint_count {
        let at = 20 + 16 * j;
        let q = UnitQuat::new(f32_at(at) as f64, f32_at(at + 4) as f64, f32_at(at + 8) as f64, f32_at(at + 12) as f64);
        let n = q.norm();
        if !((n - 1.0).abs() <= NORM_SLACK) {
            return Err(format!("joint {j} quaternion norm {n}"));
        }
        let neg = q.w < 0.0 || (q.w == 0.0 && [q.x, q.y, q.z].into_iter().find(|v| *v != 0.0).is_some_and(|v| v < 0.0));
        rotations.push(if neg { UnitQuat::new(-q.x, -q.y, -q.z, -q.w) } else { q });
    }
    Ok(PoseFrame {
        timestamp_us,
        root_translation,
        rotations,
    })
}

/// Shrinks the underlying storage; lets a failed write be rolled back to
/// the last whole frame.
pub trait Truncate {
    fn truncate_to(&mut self, len: u64) -> io::Result<()>;
}

impl Truncate for File {
    fn truncate_to(&mut self, len: u64) -> io::Result<()> {
        self.set_len(len)?;
        self.seek(SeekFrom::Start(len))?;
        Ok(())
    }
}

impl Truncate for io::Cursor<Vec<u8>> {
    fn truncate_to(&mut self, len: u64) -> io::Result<()> {
        self.get_mut().truncate(len as usize);
        self.set_position(len);
        Ok(())
    }
}

/// Appends frames one at a time. A failed write truncates the output back
/// to the last complete frame before the error is returned.
pub struct RecordingWriter<W: Write + Truncate> {
    inner: W,
    header: RecordingHeader,
    committed: u64,
    frames: u64,
    last_ts: Option<u64>,
    buf: Vec<u8>,
}

impl RecordingWriter<BufferedFile> {
    pub fn create(path: impl AsRef<Path>, header: RecordingHeader) -> Result<Self, HarnessError> {
        RecordingWriter::new(BufferedFile::create(path)?, header)
    }
}

impl<W: Write + Truncate> RecordingWriter<W> {
    pub fn new(mut inner: W, header: RecordingHeader) -> Result<Self, HarnessError> {
        header.validate()?;
        if let Err(e) = inner.write_all(&header.to_bytes()).and_then(|_| inner.flush()) {
            let _ = inner.truncate_to(0);
            return Err(e.into());
        }
        Ok(RecordingWriter {
            inner,
            header,
            committed: HEADER_LEN as u64,
            frames: 0,
            last_ts: None,
            buf: Vec::with_capacity(header.frame_len()),
        })
    }

    pub fn header(&self) -> RecordingHeader {
        self.header
    }

    pub fn frames_written(&self) -> u64 {
        self.frames
    }

    pub fn write_frame(&mut self, frame: &PoseFrame) -> Result<(), HarnessError> {
        if frame.joint_count() != self.header.joint_count as usize {
            return Err(HarnessError::Format(format!(
                "frame has {} joints, recording has {}",
                frame.joint_count(),
                self.header.joint_count
            )));
        }
        if self.last_ts.is_some_and(|t| frame.timestamp_us <= t) {
            return Err(HarnessError::Format("timestamps must strictly increase".into()));
        }
        self.buf.clear();
        encode_frame_into(frame, &mut self.buf);
        if let Err(e) = self.inner.write_all(&self.buf) {
            self.inner.truncate_to(self.committed)?;
            return Err(e.into());
        }
        self.committed += self.buf.len() as u64;
        self.frames += 1;
        self.last_ts = Some(frame.timestamp_us);
        Ok(())
    }

    /// Flushes; on failure the output is cut back to the last frame known
    /// to be complete.
    pub fn finish(mut self) -> Result<W, HarnessError> {
        if let Err(e) = self.inner.flush() {
            let _ = self.inner.truncate_to(self.committed);
            return Err(e.into());
        }
        Ok(self.inner)
    }
}

/// [`RecordingWriter`] over a buffered file.
pub struct BufferedFile(BufWriter<File>);

impl BufferedFile {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(BufferedFile(BufWriter::new(File::create(path)?)))
    }
}

impl Write for BufferedFile {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()
    }
}

impl Truncate for BufferedFile {
    fn truncate_to(&mut self, len: u64) -> io::Result<()> {
        // Whatever the buffer still holds is past `len` or already failed.
        let _ = self.0.flush();
        self.0.get_mut().truncate_to(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize, jc: usize) -> Vec<PoseFrame> {
        (0..n)
            .map(|i| {
                let mut f = PoseFrame::identity(1_000 + i as u64 * 33_333, jc);
                f.rotations[0] = UnitQuat::rot_y(0.01 * i as f64);
                f.root_translation = [i as f32, 0.5, -1.0];
                f
            })
            .collect()
    }

    #[test]
    fn header_layout() {
        let h = RecordingHeader::new(34, 30.0).unwrap();
        let b = h.to_bytes();
        assert_eq!(&b[0..4], b"DGRC");
        assert_eq!(&b[4..8], &[1, 0, 34, 0]);
        assert_eq!(&b[8..12], &30f32.to_le_bytes());
        assert_eq!(h.frame_len(), 8 + 12 + 34 * 16);
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let r = Recording::new(3, 30.0, frames(20, 3)).unwrap();
        let bytes = r.to_bytes();
        assert_eq!(bytes.len(), HEADER_LEN + 20 * frame_len(3));
        let back = Recording::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.frames.iter().zip(&r.frames) {
            assert_eq!(a.timestamp_us, b.timestamp_us);
            assert!(a.rotations[0].angle_to(&b.rotations[0]) < 1e-6);
        }
    }

    #[test]
    fn header_only_file_is_valid() {
        let r = Recording::new(34, 30.0, vec![]).unwrap();
        let back = Recording::from_bytes(&r.to_bytes()).unwrap();
        assert!(back.frames.is_empty());
    }

    #[test]
    fn malformed_inputs() {
        let good = Recording::new(2, 30.0, frames(3, 2)).unwrap().to_bytes();
        assert!(Recording::from_bytes(&good[..5]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Recording::from_bytes(&bad).is_err());
        assert!(Recording::from_bytes(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(Recording::from_bytes(&bad).is_err());
        // Zero quaternion.
        let mut bad = good.clone();
        for b in &mut bad[HEADER_LEN + 20..HEADER_LEN + 36] {
            *b = 0;
        }
        assert!(Recording::from_bytes(&bad).is_err());
        // Repeated timestamp.
        let mut f = frames(3, 2);
        f[2].timestamp_us = f[1].timestamp_us;
        assert!(Recording::new(2, 30.0, f).is_err());
    }

    /// Accepts `capacity` bytes, then fails like a full disk.
    struct FullDisk {
        data: Vec<u8>,
        capacity: usize,
    }

    impl Write for FullDisk {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            let room = self.capacity - self.data.len();
            if room == 0 {
                return Err(io::Error::other("no space left on device"));
            }
            let n = room.min(buf.len());
            self.data.extend_from_slice(&buf[..n]);
            Ok(n)
        }

        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    impl Truncate for FullDisk {
        fn truncate_to(&mut self, len: u64) -> io::Result<()> {
            self.data.truncate(len as usize);
            Ok(())
        }
    }

    #[test]
    fn disk_full_truncates_to_frame_boundary() {
        let flen = frame_len(2);
        let disk = FullDisk {
            data: Vec::new(),
            capacity: HEADER_LEN + 3 * flen + flen / 2,
        };
        let mut w = RecordingWriter::new(disk, RecordingHeader::new(2, 30.0).unwrap()).unwrap();
        let fs = frames(5, 2);
        for f in &fs[..3] {
            w.write_frame(f).unwrap();
        }
        assert!(w.write_frame(&fs[3]).is_err());
        let disk = w.finish().unwrap();
        assert_eq!(disk.data.len(), HEADER_LEN + 3 * flen);
        let back = Recording::from_bytes(&disk.data).unwrap();
        assert_eq!(back.frames.len(), 3);
    }

    #[test]
    fn file_writer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.dgrc");
        let r = Recording::new(2, 60.0, frames(10, 2)).unwrap();
        r.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), r.to_bytes());
        assert_eq!(Recording::load(&path).unwrap().header.nominal_fps, 60.0);
    }
}
