use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub asl: f64,
    pub mfi: f64,
    /// `asl + alpha · mfi`, evaluated in f64.
    pub total: f64,
}

/// Entanglement of the projected positive prompts after an epoch (epoch 0
/// is the initial state).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mfi_statistic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Chronological training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn initial_mfi_statistic(&self) -> Option<f64> {
        self.epochs().next().map(|e| e.mfi_statistic)
    }

    pub fn final_mfi_statistic(&self) -> Option<f64> {
        self.epochs().last().map(|e| e.mfi_statistic)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let log = TrainLog {
            records: vec![
                LogRecord::Epoch(EpochRecord {
                    epoch: 0,
                    mfi_statistic: 0.7,
                }),
                LogRecord::Step(StepRecord {
                    step: 0,
                    epoch: 1,
                    lr: 0.002,
                    asl: 0.5,
                    mfi: 3.0,
                    total: 0.50021,
                }),
            ],
        };
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with(r#"{"kind":"epoch","epoch":0"#));
        assert_eq!(TrainLog::read_jsonl(&buf[..]).unwrap(), log);
        assert_eq!(log.initial_mfi_statistic(), Some(0.7));
    }
}
