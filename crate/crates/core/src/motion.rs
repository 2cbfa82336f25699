//! Coefficient sequences: per-frame 70-dim face parameters laid out as
//! `[expression(64) | angle(3) | translation(3)]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const EXP_DIMS: usize = 64;
pub const ANGLE_DIMS: usize = 3;
pub const TRANS_DIMS: usize = 3;
pub const MOTION_DIMS: usize = EXP_DIMS + ANGLE_DIMS + TRANS_DIMS;
pub const DEFAULT_FPS: f32 = 30.0;
pub const DEFAULT_SEGMENT_LEN: usize = 60;

const BINARY_MAGIC: &[u8; 4] = b"CLM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientGroup {
    Expression,
    Angle,
    Translation,
    /// Angle and translation together.
    Pose,
    /// All 70 coefficients.
    All,
}

impl CoefficientGroup {
    pub fn range(self) -> Range<usize> {
        match self {
            CoefficientGroup::Expression => 0..EXP_DIMS,
            CoefficientGroup::Angle => EXP_DIMS..EXP_DIMS + ANGLE_DIMS,
            CoefficientGroup::Translation => EXP_DIMS + ANGLE_DIMS..MOTION_DIMS,
            CoefficientGroup::Pose => EXP_DIMS..MOTION_DIMS,
            CoefficientGroup::All => 0..MOTION_DIMS,
        }
    }

    pub fn dims(self) -> usize {
        self.range().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            CoefficientGroup::Expression => "exp",
            CoefficientGroup::Angle => "angle",
            CoefficientGroup::Translation => "trans",
            CoefficientGroup::Pose => "pose",
            CoefficientGroup::All => "all",
        }
    }
}

/// `T x 70` coefficient matrix with a frame rate. Always non-empty and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    frames: Tensor,
    fps: f32,
}

impl MotionSequence {
    pub fn new(frames: Tensor, fps: f32) -> Result<Self> {
        if frames.cols() != MOTION_DIMS {
            return Err(Error::WidthMismatch {
                line: 0,
                expected: MOTION_DIMS,
                found: frames.cols(),
            });
        }
        if frames.rows() == 0 {
            return Err(Error::EmptySequence);
        }
        if let Some((row, col)) = frames.first_non_finite() {
            return Err(Error::NonFiniteValue { row, col });
        }
        Ok(Self { frames, fps })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            frames: Tensor::zeros(len.max(1), MOTION_DIMS),
            fps: DEFAULT_FPS,
        }
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    /// Always false; kept for API symmetry with collections.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// Copies frames `start..start + len` into a new sequence.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::TooShort {
                needed: start + len,
                found: self.len(),
            });
        }
        Ok(Self {
            frames: self.frames.slice_rows(start, len),
            fps: self.fps,
        })
    }

    /// Columns of one coefficient group, `T x dims`.
    pub fn group(&self, group: CoefficientGroup) -> Tensor {
        let r = group.range();
        self.frames.slice_cols(r.start, r.len())
    }

    pub fn concat(parts: &[MotionSequence]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptySequence)?;
        let frames: Vec<&Tensor> = parts.iter().map(|p| &p.frames).collect();
        Ok(Self {
            frames: Tensor::concat_rows(&frames)?,
            fps: first.fps,
        })
    }
}

/// Borrowed window `[start_frame, start_frame + length)` of a sequence.
#[derive(Clone, Copy, Debug)]
pub struct SegmentView<'a> {
    parent: &'a MotionSequence,
    start_frame: usize,
    length: usize,
}

impl<'a> SegmentView<'a> {
    pub fn new(parent: &'a MotionSequence, start_frame: usize, length: usize) -> Result<Self> {
        if start_frame + length > parent.len() {
            return Err(Error::TooShort {
                needed: start_frame + length,
                found: parent.len(),
            });
        }
        Ok(Self {
            parent,
            start_frame,
            length,
        })
    }

    pub fn start_frame(&self) -> usize {
        self.start_frame
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn frame(&self, t: usize) -> &'a [f64] {
        assert!(t < self.length);
        self.parent.frame(self.start_frame + t)
    }

    pub fn to_sequence(&self) -> MotionSequence {
        MotionSequence {
            frames: self.parent.frames.slice_rows(self.start_frame, self.length),
            fps: self.parent.fps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segmentation<'a> {
    pub segments: Vec<SegmentView<'a>>,
    /// Trailing frames that did not fill a whole segment.
    pub dropped: usize,
}

/// Consecutive non-overlapping windows; a short tail is dropped.
pub fn split_segments(seq: &MotionSequence, segment_len: usize) -> Result<Segmentation<'_>> {
    if segment_len < 2 {
        return Err(Error::InvalidRange(format!(
            "segment length must be at least 2, got {segment_len}"
        )));
    }
    if seq.len() == 0 {
        return Err(Error::EmptySequence);
    }
    let count = seq.len() / segment_len;
    let segments = (0..count)
        .map(|i| SegmentView {
            parent: seq,
            start_frame: i * segment_len,
            length: segment_len,
        })
        .collect();
    Ok(Segmentation {
        segments,
        dropped: seq.len() - count * segment_len,
    })
}

/// `(T-1) x 70` adjacent-frame differences.
pub fn frame_diff(seq: &MotionSequence) -> Result<Tensor> {
    diff_rows(seq.frames())
}

pub(crate) fn diff_rows(frames: &Tensor) -> Result<Tensor> {
    if frames.rows() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            found: frames.rows(),
        });
    }
    Ok(Tensor::from_fn(frames.rows() - 1, frames.cols(), |t, c| {
        frames.get(t + 1, c) - frames.get(t, c)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionFormat {
    Csv,
    Binary,
}

impl MotionFormat {
    /// `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => MotionFormat::Csv,
            _ => MotionFormat::Binary,
        }
    }
}

pub fn csv_header() -> String {
    let mut cols = vec!["frame".to_string()];
    cols.extend((0..EXP_DIMS).map(|i| format!("exp{i}")));
    cols.extend((0..ANGLE_DIMS).map(|i| format!("angle{i}")));
    cols.extend((0..TRANS_DIMS).map(|i| format!("trans{i}")));
    cols.join(",")
}

pub fn load_motion_sequence(path: &Path, format: MotionFormat) -> Result<MotionSequence> {
    let file = File::open(path)?;
    match format {
        MotionFormat::Csv => read_csv(BufReader::new(file)),
        MotionFormat::Binary => read_binary(&mut BufReader::new(file)),
    }
}

pub fn save_motion_sequence(seq: &MotionSequence, path: &Path, format: MotionFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        MotionFormat::Csv => write_csv(seq, &mut w)?,
        MotionFormat::Binary => write_binary(seq, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

/// Writes the header line and one row per frame. A `# fps=<v>` line is
/// prepended only when the frame rate differs from 30.
pub fn write_csv(seq: &MotionSequence, w: &mut impl Write) -> Result<()> {
    if seq.fps != DEFAULT_FPS {
        writeln!(w, "# fps={}", seq.fps)?;
    }
    writeln!(w, "{}", csv_header())?;
    for t in 0..seq.len() {
        write!(w, "{t}")?;
        for v in seq.frame(t) {
            // `Display` for f64 prints the shortest string that parses back exactly.
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads CSV rows of 70 values, optionally preceded by a frame-index column.
/// Lines starting with `#` may carry `fps=<v>`; a non-numeric first line is
/// the column header.
pub fn read_csv(r: impl BufRead) -> Result<MotionSequence> {
    let mut fps = DEFAULT_FPS;
    let mut has_index: Option<bool> = None;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut seen_data = false;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("fps=") {
                fps = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::MalformedHeader(format!("bad fps '{v}'")))?;
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !seen_data && has_index.is_none() && fields[0].parse::<f64>().is_err() {
            has_index = Some(parse_header(&fields)?);
            continue;
        }
        seen_data = true;
        let index = *has_index.get_or_insert(fields.len() == MOTION_DIMS + 1);
        let expected = MOTION_DIMS + usize::from(index);
        if fields.len() != expected {
            return Err(Error::WidthMismatch {
                line: lineno + 1,
                expected: MOTION_DIMS,
                found: fields.len() - usize::from(index && fields.len() > MOTION_DIMS),
            });
        }
        for (col, f) in fields[usize::from(index)..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::NonFiniteValue { row: rows, col })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: rows, col });
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptySequence);
    }
    MotionSequence::new(Tensor::new(rows, MOTION_DIMS, data)?, fps)
}

fn parse_header(fields: &[&str]) -> Result<bool> {
    let expected = csv_header();
    let expected: Vec<&str> = expected.split(',').collect();
    if fields == expected.as_slice() {
        Ok(true)
    } else if fields == &expected[1..] {
        Ok(false)
    } else {
        Err(Error::MalformedHeader(format!(
            "expected '{}...' with {} coefficient columns, found {} columns",
            expected[..3].join(","),
            MOTION_DIMS,
            fields.len()
        )))
    }
}

/// `"CLM1"`, `T: u32`, `dims: u32 = 70`, `fps: f32`, then row-major `f64`, all little-endian.
pub fn write_binary(seq: &MotionSequence, w: &mut impl Write) -> Result<()> {
    write_matrix(&seq.frames, seq.fps, w)
}

pub fn read_binary(r: &mut impl Read) -> Result<MotionSequence> {
    let (frames, fps) = read_matrix(r, MOTION_DIMS)?;
    MotionSequence::new(frames, fps)
}

/// Same container as [`write_binary`] for any column count.
pub fn write_matrix(frames: &Tensor, fps: f32, w: &mut impl Write) -> Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(frames.rows() as u32).to_le_bytes())?;
    w.write_all(&(frames.cols() as u32).to_le_bytes())?;
    w.write_all(&fps.to_le_bytes())?;
    for v in frames.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a matrix written by [`write_matrix`], requiring `dims` columns.
pub fn read_matrix(r: &mut impl Read, dims: usize) -> Result<(Tensor, f32)> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::MalformedHeader("truncated header".into()))?;
    if &head[..4] != BINARY_MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let t = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
    let found = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let fps = f32::from_le_bytes(head[12..16].try_into().unwrap());
    if found != dims {
        return Err(Error::WidthMismatch { line: 0, expected: dims, found });
    }
    if !fps.is_finite() || fps <= 0.0 {
        return Err(Error::MalformedHeader(format!("fps {fps}")));
    }
    let mut bytes = vec![0u8; t * dims * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::MalformedHeader(format!("expected {t} frames of data")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let frames = Tensor::new(t, dims, data)?;
    if let Some((row, col)) = frames.first_non_finite() {
        return Err(Error::NonFiniteValue { row, col });
    }
    Ok((frames, fps))
}

pub fn save_matrix(path: &Path, frames: &Tensor, fps: f32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(frames, fps, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path, dims: usize) -> Result<(Tensor, f32)> {
    read_matrix(&mut BufReader::new(File::open(path)?), dims)
}
