use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Bytes per transmitted parameter (uncompressed 32-bit floats).
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Up => "up",
            Self::Down => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub round: usize,
    pub client: usize,
    pub task: usize,
    pub dir: Direction,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    pub up_params: u64,
    pub down_params: u64,
    pub up_bytes: u64,
    pub down_bytes: u64,
}

/// Append-only record of every parameter transfer in a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    records: Vec<CommRecord>,
    totals: CommTotals,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, round: usize, client: usize, task: usize, dir: Direction, params: u64) {
        let bytes = params * BYTES_PER_PARAM;
        match dir {
            Direction::Up => {
                self.totals.up_params += params;
                self.totals.up_bytes += bytes;
            }
            Direction::Down => {
                self.totals.down_params += params;
                self.totals.down_bytes += bytes;
            }
        }
        self.records.push(CommRecord {
            round,
            client,
            task,
            dir,
            params,
            bytes,
        });
    }

    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    pub fn totals(&self) -> CommTotals {
        self.totals
    }

    /// Total parameters moved in `dir` during `round`.
    pub fn round_params(&self, round: usize, dir: Direction) -> u64 {
        self.records
            .iter()
            .filter(|r| r.round == round && r.dir == dir)
            .map(|r| r.params)
            .sum()
    }

    /// Writes `round,client,task,dir,params,bytes`, one row per transfer.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "client", "task", "dir", "params", "bytes"])
            .map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.round.to_string(),
                r.client.to_string(),
                r.task.to_string(),
                r.dir.as_str().to_string(),
                r.params.to_string(),
                r.bytes.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| crate::Error::Metric(format!("csv flush: {e}")))?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Metric(format!("csv write: {e}"))
}

/// Upload-side communication cost `T·M·P` in parameter transmissions.
pub fn comm_cost(rounds: u64, clients_per_round: u64, params: u64) -> u64 {
    rounds * clients_per_round * params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comm_cost_examples() {
        assert_eq!(comm_cost(150, 5, 58_564), 43_923_000);
        assert_eq!(comm_cost(0, 5, 58_564), 0);
    }

    #[test]
    fn totals_track_records() {
        let mut l = CommLedger::new();
        l.record(0, 0, 0, Direction::Down, 100);
        l.record(1, 0, 0, Direction::Up, 10);
        l.record(1, 1, 1, Direction::Up, 10);
        let t = l.totals();
        assert_eq!((t.up_params, t.down_params, t.up_bytes, t.down_bytes), (20, 100, 80, 400));
        assert!(l.records().iter().all(|r| r.bytes == 4 * r.params));
        assert_eq!(l.round_params(1, Direction::Up), 20);

        let mut buf = Vec::new();
        l.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("round,client,task,dir,params,bytes"));
        assert_eq!(text.lines().nth(1), Some("0,0,0,down,100,400"));
    }
}
