//! Observation separation: split raw sensor vectors into an environment
//! stream and a self (proprioceptive) stream.
//!
//! A [`SeparationSchema`] tags every raw index `ENV` or `SELF`; separation
//! either gathers the tagged indices (hard mode) or applies a row-stochastic
//! soft-assignment matrix. The schema has a line-oriented text form
//! (`start..end TAG`) so sensor layouts live next to task configs.

mod mi;

pub use mi::{
    disentanglement_score, mi_estimate, DisentanglementConfig, DisentanglementReport, MiError,
    MiEstimate,
};

use crate::autodiff::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObsError {
    #[error("raw width {got} does not match schema width {want}")]
    WidthMismatch { want: usize, got: usize },
    #[error("index {0} has no stream tag")]
    Untagged(usize),
    #[error("soft assignment shape {shape:?} does not match (env+self={rows}, raw={cols})")]
    SoftShape { shape: Vec<usize>, rows: usize, cols: usize },
    #[error("soft assignment row {row} sums to {sum}, not 1")]
    SoftRowSum { row: usize, sum: f64 },
    #[error("schema line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema ranges must cover 0..{width} contiguously; problem at index {at}")]
    Coverage { width: usize, at: usize },
}

/// Which stream a raw observation index feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Env,
    SelfState,
}

impl Stream {
    pub fn token(self) -> &'static str {
        match self {
            Stream::Env => "ENV",
            Stream::SelfState => "SELF",
        }
    }
}

/// Per-index stream tags plus the derived gather lists.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationSchema {
    labels: Vec<Stream>,
    env_indices: Vec<usize>,
    self_indices: Vec<usize>,
}

impl SeparationSchema {
    pub fn from_labels(labels: Vec<Stream>) -> Self {
        let env_indices = labels
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Stream::Env)
            .map(|(i, _)| i)
            .collect();
        let self_indices = labels
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == Stream::SelfState)
            .map(|(i, _)| i)
            .collect();
        SeparationSchema { labels, env_indices, self_indices }
    }

    /// Rebuild a schema for a changed sensor layout. Every index must carry
    /// a tag; the first untagged index is reported.
    pub fn from_layout(layout: &[Option<Stream>]) -> Result<Self, ObsError> {
        let mut labels = Vec::with_capacity(layout.len());
        for (i, tag) in layout.iter().enumerate() {
            labels.push(tag.ok_or(ObsError::Untagged(i))?);
        }
        Ok(Self::from_labels(labels))
    }

    pub fn raw_width(&self) -> usize {
        self.labels.len()
    }

    pub fn d_env(&self) -> usize {
        self.env_indices.len()
    }

    pub fn d_self(&self) -> usize {
        self.self_indices.len()
    }

    pub fn labels(&self) -> &[Stream] {
        &self.labels
    }

    pub fn env_indices(&self) -> &[usize] {
        &self.env_indices
    }

    pub fn self_indices(&self) -> &[usize] {
        &self.self_indices
    }

    /// Parse the text form: one `start..end TAG` range per line, `#`
    /// comments, ranges together covering the width exactly once.
    pub fn parse(text: &str) -> Result<Self, ObsError> {
        let mut ranges: Vec<(usize, usize, Stream)> = Vec::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| ObsError::Parse { line: lineno + 1, msg: msg.to_string() };
            let mut parts = line.split_whitespace();
            let range = parts.next().ok_or_else(|| err("missing range"))?;
            let tag = parts.next().ok_or_else(|| err("missing stream tag"))?;
            if parts.next().is_some() {
                return Err(err("trailing tokens"));
            }
            let (start, end) = range
                .split_once("..")
                .ok_or_else(|| err("range must look like start..end"))?;
            let start: usize = start.trim().parse().map_err(|_| err("bad range start"))?;
            let end: usize = end.trim().parse().map_err(|_| err("bad range end"))?;
            if end <= start {
                return Err(err("empty range"));
            }
            let stream = match tag {
                "ENV" => Stream::Env,
                "SELF" => Stream::SelfState,
                other => return Err(err(&format!("unknown stream tag {other}"))),
            };
            ranges.push((start, end, stream));
        }
        ranges.sort_by_key(|r| r.0);
        let width = ranges.last().map(|r| r.1).unwrap_or(0);
        let mut layout: Vec<Option<Stream>> = vec![None; width];
        for (start, end, stream) in &ranges {
            for i in *start..*end {
                if layout[i].is_some() {
                    return Err(ObsError::Coverage { width, at: i });
                }
                layout[i] = Some(*stream);
            }
        }
        if let Some(at) = layout.iter().position(|t| t.is_none()) {
            return Err(ObsError::Coverage { width, at });
        }
        Self::from_layout(&layout)
    }

    /// Render the text form with maximal runs merged.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut i = 0;
        while i < self.labels.len() {
            let tag = self.labels[i];
            let start = i;
            while i < self.labels.len() && self.labels[i] == tag {
                i += 1;
            }
            out.push_str(&format!("{}..{} {}\n", start, i, tag.token()));
        }
        out
    }
}

/// The two streams produced by [`separate`]; rows correspond to the rows of
/// the raw input (a window separates frame by frame).
#[derive(Debug, Clone)]
pub struct SeparatedObs {
    pub env: Tensor,
    pub self_state: Tensor,
}

/// Split raw observations `[t, raw_width]` into the two streams.
///
/// Hard mode gathers tagged indices in order of appearance. Soft mode
/// multiplies by a row-stochastic `[(d_env + d_self), raw_width]` matrix
/// whose first `d_env` rows produce the env stream; one-hot rows reproduce
/// hard-mode output exactly.
pub fn separate(
    raw: &Tensor,
    schema: &SeparationSchema,
    soft_assignment: Option<&Tensor>,
) -> Result<SeparatedObs, ObsError> {
    if raw.cols() != schema.raw_width() {
        return Err(ObsError::WidthMismatch { want: schema.raw_width(), got: raw.cols() });
    }
    let rows = raw.rows();
    match soft_assignment {
        None => {
            let gather = |indices: &[usize]| {
                let mut data = Vec::with_capacity(rows * indices.len());
                for r in 0..rows {
                    for &i in indices {
                        data.push(raw.at(r, i));
                    }
                }
                Tensor::new(&[rows, indices.len()], data)
            };
            Ok(SeparatedObs {
                env: gather(schema.env_indices()),
                self_state: gather(schema.self_indices()),
            })
        }
        Some(assign) => {
            let (d_env, d_self, width) = (schema.d_env(), schema.d_self(), schema.raw_width());
            if assign.shape() != [d_env + d_self, width] {
                return Err(ObsError::SoftShape {
                    shape: assign.shape().to_vec(),
                    rows: d_env + d_self,
                    cols: width,
                });
            }
            for r in 0..d_env + d_self {
                let sum: f64 = (0..width).map(|c| assign.at(r, c)).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(ObsError::SoftRowSum { row: r, sum });
                }
            }
            let project = |row_range: std::ops::Range<usize>| {
                let d = row_range.len();
                let mut data = Vec::with_capacity(rows * d);
                for r in 0..rows {
                    for a in row_range.clone() {
                        let mut acc = 0.0;
                        for c in 0..width {
                            acc += assign.at(a, c) * raw.at(r, c);
                        }
                        data.push(acc);
                    }
                }
                Tensor::new(&[rows, d], data)
            };
            Ok(SeparatedObs { env: project(0..d_env), self_state: project(d_env..d_env + d_self) })
        }
    }
}
