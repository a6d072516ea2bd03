//! Event sequences on a bounded observation window, plus file ingestion.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::Domain;

/// Sorted event timestamps on [0, t_max].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EventSequence {
    pub timestamps: Vec<f64>,
    pub t_max: f64,
}

impl EventSequence {
    /// Validates ordering and bounds; timestamps must be strictly increasing.
    pub fn new(timestamps: Vec<f64>, t_max: f64) -> Result<Self> {
        if t_max <= 0.0 || !t_max.is_finite() {
            return Err(Error::Argument(format!("t_max must be positive, got {t_max}")));
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Argument(
                    "timestamps must be strictly increasing".into(),
                ));
            }
        }
        if timestamps.iter().any(|&t| t < 0.0 || t > t_max || !t.is_finite()) {
            return Err(Error::Data("timestamps must lie in [0, t_max]".into()));
        }
        Ok(EventSequence { timestamps, t_max })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn domain(&self) -> Domain {
        Domain::interval(self.t_max).expect("t_max validated at construction")
    }

    /// Empirical rate N/|T|.
    pub fn rate(&self) -> f64 {
        self.len() as f64 / self.t_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// One timestamp per line.
    Csv,
    /// {"t_max": ..., "events": [...]}
    Json,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => EventFormat::Json,
            _ => EventFormat::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonEvents {
    t_max: f64,
    events: Vec<f64>,
}

/// Sorts, optionally rescales the observed span to [0, target), and perturbs
/// duplicate timestamps by +1e-9 increments (the Hawkes likelihood assumes a
/// simple point process).
fn normalize(mut ts: Vec<f64>, t_max: Option<f64>, scale_to: Option<f64>) -> Result<EventSequence> {
    if ts.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("non-finite timestamp".into()));
    }
    if ts.iter().any(|&t| t < 0.0) {
        return Err(Error::Data("negative timestamp".into()));
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if let Some(target) = scale_to {
        if target <= 0.0 {
            return Err(Error::Argument("scale target must be positive".into()));
        }
        if let (Some(&lo), Some(&hi)) = (ts.first(), ts.last()) {
            let span = hi - lo;
            // map [lo, hi] into [0, target)
            let scale = if span > 0.0 { target * (1.0 - 1e-9) / span } else { 0.0 };
            for t in &mut ts {
                *t = (*t - lo) * scale;
            }
        }
    }
    for i in 1..ts.len() {
        if ts[i] <= ts[i - 1] {
            ts[i] = ts[i - 1] + 1e-9;
        }
    }
    let t_max = scale_to
        .or(t_max)
        .or_else(|| ts.last().copied())
        .ok_or_else(|| Error::Data("empty sequence needs an explicit window length".into()))?;
    let t_max = t_max.max(ts.last().copied().unwrap_or(0.0));
    EventSequence::new(ts, t_max)
}

/// Load events from a CSV or JSON file, optionally rescaling to [0, scale_to).
pub fn load_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    scale_to: Option<f64>,
) -> Result<EventSequence> {
    let path = path.as_ref();
    match format {
        EventFormat::Csv => {
            let file = std::fs::File::open(path)?;
            let mut ts = Vec::new();
            for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() || trimmed.starts_with('#') {
                    continue;
                }
                let t: f64 = trimmed.parse().map_err(|_| {
                    Error::Data(format!(
                        "{}:{}: cannot parse '{trimmed}' as a timestamp",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                ts.push(t);
            }
            if ts.is_empty() && scale_to.is_none() {
                // empty file: valid, window degenerate; fit handles it
                return EventSequence::new(Vec::new(), f64::MIN_POSITIVE.max(1.0));
            }
            normalize(ts, None, scale_to)
        }
        EventFormat::Json => {
            let text = std::fs::read_to_string(path)?;
            let parsed: JsonEvents = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            normalize(parsed.events, Some(parsed.t_max), scale_to)
        }
    }
}

/// Write events in the requested format.
pub fn save_events(seq: &EventSequence, path: impl AsRef<Path>, format: EventFormat) -> Result<()> {
    let mut file = std::fs::File::create(path.as_ref())?;
    match format {
        EventFormat::Csv => {
            for t in &seq.timestamps {
                writeln!(file, "{t:.17e}")?;
            }
        }
        EventFormat::Json => {
            let body = JsonEvents { t_max: seq.t_max, events: seq.timestamps.clone() };
            serde_json::to_writer_pretty(&mut file, &body)
                .map_err(|e| Error::Data(e.to_string()))?;
            writeln!(file)?;
        }
    }
    Ok(())
}
