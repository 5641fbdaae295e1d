use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTORY_CSV: &str = "history.csv";
pub const STEPS_CSV: &str = "steps.csv";

/// Epoch means of the per-step losses, validation dice after the epoch and
/// the learning rate of the epoch's last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg: f64,
    pub mid: f64,
    pub kl: f64,
    pub total: f64,
    pub val_dice: f64,
    pub lr: f64,
}

/// One optimizer step. `teacher_dice` holds the per-teacher batch soft Dice
/// losses the adaptive weights were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub seg: f64,
    pub mid: f64,
    pub kl: f64,
    pub total: f64,
    pub teacher_dice: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// 1-based epoch with the highest validation dice (earliest on ties).
    pub best_epoch: usize,
    pub wall_time: f64,
}

impl RunHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    pub fn history_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        finish(w)
    }

    pub fn steps_csv(&self) -> Result<String> {
        let n = self.steps.first().map_or(0, |s| s.weights.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["step", "epoch", "lr", "seg", "mid", "kl", "total"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=n).map(|j| format!("teacher_dice_{j}")));
        header.extend((1..=n).map(|j| format!("weight_{j}")));
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![
                s.step.to_string(),
                s.epoch.to_string(),
                s.lr.to_string(),
                s.seg.to_string(),
                s.mid.to_string(),
                s.kl.to_string(),
                s.total.to_string(),
            ];
            row.extend(s.teacher_dice.iter().map(f64::to_string));
            row.extend(s.weights.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        finish(w)
    }

    /// Writes `history.csv` and `steps.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [(HISTORY_CSV, self.history_csv()?), (STEPS_CSV, self.steps_csv()?)] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses the per-step table written by [`RunHistory::steps_csv`].
pub fn read_steps_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let n = headers.iter().filter(|h| h.starts_with("weight_")).count();
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::InvalidArgument(format!("bad number {s:?} in steps table")))
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let f: Vec<&str> = row.iter().collect();
        if f.len() != 7 + 2 * n {
            return Err(Error::shape(7 + 2 * n, f.len()));
        }
        out.push(StepRecord {
            step: parse(f[0])? as u64,
            epoch: parse(f[1])? as usize,
            lr: parse(f[2])?,
            seg: parse(f[3])?,
            mid: parse(f[4])?,
            kl: parse(f[5])?,
            total: parse(f[6])?,
            teacher_dice: f[7..7 + n].iter().map(|s| parse(s)).collect::<Result<_>>()?,
            weights: f[7 + n..].iter().map(|s| parse(s)).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
