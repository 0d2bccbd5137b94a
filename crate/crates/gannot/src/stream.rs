//! Stream-level domain types: feature streams, ground-truth spans, window
//! plans, and gesture label sequences, plus the JSONL stream file format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One ground-truth gesture occurrence: a class and an inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureSpan {
    #[serde(rename = "class")]
    pub class_id: usize,
    pub start: usize,
    /// Inclusive end frame.
    pub end: usize,
}

impl GestureSpan {
    pub fn new(class_id: usize, start: usize, end: usize) -> Self {
        Self {
            class_id,
            start,
            end,
        }
    }

    /// Number of frames covered by the span (spans are never empty).
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start <= frame && frame <= self.end
    }
}

/// A continuous sequence of fixed-dimension feature frames, optionally
/// carrying ground-truth gesture spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStream {
    pub stream_id: String,
    pub frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<GestureSpan>>,
}

impl FrameStream {
    /// Number of frames.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Feature dimension of the first frame (0 for an empty stream).
    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Ordered gesture class ids of the ground-truth spans.
    pub fn truth_labels(&self) -> LabelSequence {
        let labels = self
            .spans
            .as_deref()
            .unwrap_or(&[])
            .iter()
            .map(|s| s.class_id)
            .collect();
        LabelSequence::new(labels)
    }
}

/// Checks every `FrameStream` invariant and returns the stream unchanged.
///
/// Frames must be non-empty and share one dimension; spans, when present,
/// must be in range, sorted by start, and non-overlapping.
pub fn validate_stream(raw: FrameStream) -> Result<FrameStream> {
    if raw.frames.is_empty() {
        return Err(Error::EmptyStream {
            stream_id: raw.stream_id,
        });
    }
    let dim = raw.frames[0].len();
    if dim == 0 {
        return Err(Error::EmptyFrames {
            stream_id: raw.stream_id,
        });
    }
    for (index, frame) in raw.frames.iter().enumerate() {
        if frame.len() != dim {
            return Err(Error::RaggedFrames {
                index,
                expected: dim,
                got: frame.len(),
            });
        }
    }
    if let Some(spans) = &raw.spans {
        let len = raw.frames.len();
        let mut prev_end: Option<usize> = None;
        for (index, span) in spans.iter().enumerate() {
            if span.start > span.end || span.end >= len {
                return Err(Error::SpanOutOfRange {
                    index,
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            if let Some(prev) = prev_end {
                if span.start <= prev {
                    return Err(Error::OverlappingSpans {
                        index,
                        start: span.start,
                        end: span.end,
                    });
                }
            }
            prev_end = Some(span.end);
        }
    }
    Ok(raw)
}

/// The sliding-window layout over a stream: a fixed window length, a step,
/// and the resulting window start offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_len: usize,
    pub step: usize,
    pub offsets: Vec<usize>,
}

impl WindowPlan {
    /// Iterates `(offset, offset + window_len)` half-open frame ranges.
    pub fn ranges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.iter().map(|&o| (o, o + self.window_len))
    }
}

/// Plans sliding windows of `window_len` frames every `step` frames over a
/// stream of `len` frames.
///
/// Windows tile `[0, len)` exactly. The final window is anchored so that it
/// ends on the last frame, which may overlap its predecessor by more than
/// `window_len - step`; no frame is ever padded. A stream shorter than
/// `window_len` gets a single truncated window.
pub fn plan_windows(len: usize, window_len: usize, step: usize) -> Result<WindowPlan> {
    if step < 1 || step > window_len {
        return Err(Error::InvalidStep { step, window_len });
    }
    if len == 0 {
        return Err(Error::EmptyStream {
            stream_id: String::new(),
        });
    }
    if len <= window_len {
        return Ok(WindowPlan {
            window_len: len,
            step,
            offsets: vec![0],
        });
    }
    let last = len - window_len;
    let mut offsets: Vec<usize> = (0..=last).step_by(step).collect();
    if *offsets.last().expect("offsets start at 0") != last {
        offsets.push(last);
    }
    Ok(WindowPlan {
        window_len,
        step,
        offsets,
    })
}

/// An ordered list of gesture class ids (background excluded).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Number of adjacent equal label pairs; CTC alignments need one extra
    /// blank frame for each.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(labels: Vec<usize>) -> Self {
        Self(labels)
    }
}

impl std::ops::Deref for LabelSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Reads and validates a JSONL stream file (one stream per line).
pub fn read_streams(path: impl AsRef<Path>) -> Result<Vec<FrameStream>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(&display, e))?;
    let reader = BufReader::new(file);
    let mut streams = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: FrameStream = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: display.clone(),
            line: i + 1,
            source: e,
        })?;
        streams.push(validate_stream(raw)?);
    }
    Ok(streams)
}

/// Writes streams as JSONL, one stream per line.
pub fn write_streams(path: impl AsRef<Path>, streams: &[FrameStream]) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut writer = BufWriter::new(file);
    for stream in streams {
        let line = serde_json::to_string(stream).expect("stream serialization cannot fail");
        writeln!(writer, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    writer.flush().map_err(|e| Error::io(&display, e))
}
