use std::path::Path;

use crate::time::VirtualTime;

/// One row per closed round, plus the genesis row at round 0.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// Rounds completed so far.
    pub round: u64,
    pub virtual_time: VirtualTime,
    pub version: u64,
    pub accuracy: f64,
    pub phi: Vec<f64>,
    /// Messages sent by all nodes up to this point.
    pub msgs_sent: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub n_trainers: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn new(n_trainers: usize) -> Self {
        Self { n_trainers, rows: Vec::new() }
    }

    pub fn push(&mut self, row: MetricsRow) {
        debug_assert_eq!(row.phi.len(), self.n_trainers);
        self.rows.push(row);
    }

    pub fn rounds_completed(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.round)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.accuracy)
    }

    /// Highest accuracy and the first round reaching it.
    pub fn max_accuracy(&self) -> (f64, u64) {
        self.rows.iter().fold((f64::NEG_INFINITY, 0), |best, r| {
            if r.accuracy > best.0 {
                (r.accuracy, r.round)
            } else {
                best
            }
        })
    }

    /// Checks every row's trust shares: each in [0, 1], summing to 1 within `tol`.
    pub fn check_trust(&self, tol: f64) -> Result<(), String> {
        for r in &self.rows {
            if let Some((i, p)) = r.phi.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
                return Err(format!("round {}: phi_{i} = {p} outside [0, 1]", r.round));
            }
            let sum: f64 = r.phi.iter().sum();
            if !r.phi.is_empty() && (sum - 1.0).abs() > tol {
                return Err(format!("round {}: trust shares sum to {sum}", r.round));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["round", "virtual_time", "version", "accuracy"].map(String::from).to_vec();
        h.extend((0..self.n_trainers).map(|i| format!("phi_{i}")));
        h.push("msgs_sent".into());
        h
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header()).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.round.to_string(), r.virtual_time.0.to_string(), r.version.to_string()];
            rec.push(r.accuracy.to_string());
            rec.extend(r.phi.iter().map(f64::to_string));
            rec.push(r.msgs_sent.to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}
