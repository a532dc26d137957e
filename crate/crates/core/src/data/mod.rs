//! Interval-binned city dataset: traffic readings with missingness masks,
//! severity-weighted accident risk, weather, and the chronological split.

pub mod enhance;
pub mod ingest;
pub mod synth;
pub mod temporal;

use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{StaticFeatureTable, UrbanGrid};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Weather condition vocabulary: clear, rain, snow, other.
pub const WEATHER_CODES: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub timestamp: i64,
    pub subregion: usize,
    pub severity: u8,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct WeatherObs {
    pub condition: u8,
    pub temperature_c: f64,
}

/// Dataset manifest (`manifest.json`); file paths are relative to its
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub interval_seconds: i64,
    /// UTC seconds of interval 0; must be interval-aligned.
    pub start_ts: i64,
    pub intervals: usize,
    pub grid: String,
    #[serde(rename = "static")]
    pub static_attrs: String,
    pub events: String,
    pub volumes: String,
    pub speeds: String,
    pub weather: String,
    /// Optional generator diagnostics (ground-truth intensity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.interval_seconds <= 0 || SECONDS_PER_DAY % m.interval_seconds != 0 {
            return Err(Error::data(format!(
                "manifest: interval_seconds {} must divide a day",
                m.interval_seconds
            )));
        }
        if m.start_ts % m.interval_seconds != 0 {
            return Err(Error::data(
                "manifest: start_ts must be aligned to an interval boundary",
            ));
        }
        if m.intervals == 0 {
            return Err(Error::data("manifest: empty interval span"));
        }
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Fully ingested dataset. Per-interval per-subregion arrays are flat,
/// indexed `t * m + cell`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub grid: UrbanGrid,
    pub statics: StaticFeatureTable,
    pub start_ts: i64,
    pub interval_seconds: i64,
    pub n_intervals: usize,
    pub volume: Vec<f64>,
    pub speed: Vec<f64>,
    /// true = observed; false entries hold a 0.0 sentinel that must never be
    /// consumed directly.
    pub volume_mask: Vec<bool>,
    pub speed_mask: Vec<bool>,
    /// Severity-weighted risk per cell-interval.
    pub risk: Vec<f64>,
    /// Unweighted accident count per cell-interval.
    pub counts: Vec<u32>,
    pub weather: Vec<WeatherObs>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.grid.m()
    }

    pub fn q(&self) -> usize {
        self.grid.q()
    }

    /// Intervals per day.
    pub fn day_len(&self) -> usize {
        (SECONDS_PER_DAY / self.interval_seconds) as usize
    }

    pub fn idx(&self, t: usize, cell: usize) -> usize {
        t * self.m() + cell
    }

    pub fn interval_of_day(&self, t: usize) -> usize {
        let offset = (self.start_ts.rem_euclid(SECONDS_PER_DAY) / self.interval_seconds) as usize;
        (offset + t) % self.day_len()
    }

    /// 0 = Monday … 6 = Sunday.
    pub fn day_of_week(&self, t: usize) -> usize {
        let ts = self.start_ts + t as i64 * self.interval_seconds;
        ((ts.div_euclid(SECONDS_PER_DAY) + 3).rem_euclid(7)) as usize
    }

    /// Local hour of day as a fraction, e.g. 7.5 for 07:30.
    pub fn hour_of_day(&self, t: usize) -> f64 {
        self.interval_of_day(t) as f64 * self.interval_seconds as f64 / 3600.0
    }

    pub fn risk_row(&self, t: usize) -> &[f64] {
        &self.risk[t * self.m()..(t + 1) * self.m()]
    }

    pub fn volume_row(&self, t: usize) -> &[f64] {
        &self.volume[t * self.m()..(t + 1) * self.m()]
    }

    pub fn speed_row(&self, t: usize) -> &[f64] {
        &self.speed[t * self.m()..(t + 1) * self.m()]
    }

    /// Accident count per rectangle at interval t.
    pub fn rect_counts(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.q()];
        for cell in 0..self.m() {
            out[self.grid.rect_of(cell)] += self.counts[self.idx(t, cell)] as f64;
        }
        out
    }

    /// Cells with at least one accident at interval t.
    pub fn accident_cells(&self, t: usize) -> Vec<usize> {
        (0..self.m())
            .filter(|&c| self.counts[self.idx(t, c)] > 0)
            .collect()
    }

    /// True when any volume/speed entry in [0, n_intervals) is still masked.
    pub fn has_missing_traffic(&self) -> bool {
        self.volume_mask.iter().any(|&o| !o) || self.speed_mask.iter().any(|&o| !o)
    }
}

/// Chronological 60/30/10 split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub eval: Range<usize>,
    pub validation: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Eval,
    Validation,
}

impl SplitIndices {
    pub fn range(&self, name: SplitName) -> Range<usize> {
        match name {
            SplitName::Train => self.train.clone(),
            SplitName::Eval => self.eval.clone(),
            SplitName::Validation => self.validation.clone(),
        }
    }
}

/// Splits `n` intervals chronologically into 60% train, 30% eval, 10%
/// validation (train and eval floored, the remainder to validation).
pub fn split(n: usize) -> Result<SplitIndices> {
    let train = (n as f64 * 0.6).floor() as usize;
    let eval = (n as f64 * 0.3).floor() as usize;
    let validation = n - train - eval;
    if train == 0 || eval == 0 || validation == 0 {
        return Err(Error::data(format!(
            "split: {n} intervals cannot fill train/eval/validation"
        )));
    }
    Ok(SplitIndices {
        train: 0..train,
        eval: train..train + eval,
        validation: train + eval..n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_100_is_60_30_10() {
        let s = split(100).unwrap();
        assert_eq!(s.train, 0..60);
        assert_eq!(s.eval, 60..90);
        assert_eq!(s.validation, 90..100);
    }

    #[test]
    fn split_10_is_6_3_1() {
        let s = split(10).unwrap();
        assert_eq!(s.train, 0..6);
        assert_eq!(s.eval, 6..9);
        assert_eq!(s.validation, 9..10);
    }

    #[test]
    fn split_covers_everything_without_overlap() {
        for n in 4..400 {
            let s = split(n).unwrap();
            assert_eq!(s.train.end, s.eval.start);
            assert_eq!(s.eval.end, s.validation.start);
            assert_eq!(s.validation.end, n);
        }
    }

    #[test]
    fn split_too_few_intervals_errors() {
        for n in 0..4 {
            assert!(split(n).is_err(), "n={n}");
        }
    }
}
