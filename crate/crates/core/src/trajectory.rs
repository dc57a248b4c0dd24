//! Executed-trajectory records and their CSV form.
//!
//! One row per (step, agent): `step,agent_id,x,y,rho,alpha,d0,…`. The action
//! columns hold the command issued from that state and are empty on the
//! final state. Harvested columns repeat the joint data vector on every row
//! of a step.

use std::io::{Read, Write};

use thiserror::Error;

use crate::env::{JointAction, PolarAction, State};
use crate::geom::Vec2;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryLog {
    pub states: Vec<State>,
    pub actions: Vec<JointAction>,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
}

impl TrajectoryLog {
    pub fn new(initial: State) -> Self {
        TrajectoryLog {
            states: vec![initial],
            actions: Vec::new(),
        }
    }

    pub fn push(&mut self, action: JointAction, next: State) {
        self.actions.push(action);
        self.states.push(next);
    }

    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    pub fn last_state(&self) -> Option<&State> {
        self.states.last()
    }

    /// Path of one agent through all recorded states.
    pub fn agent_path(&self, agent: usize) -> Vec<Vec2> {
        self.states.iter().map(|s| s.positions[agent]).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TrajectoryError> {
        let num_targets = self.states.first().map_or(0, |s| s.harvested.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["step", "agent_id", "x", "y", "rho", "alpha"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..num_targets).map(|i| format!("d{i}")));
        w.write_record(&header)?;
        for (n, state) in self.states.iter().enumerate() {
            for (j, p) in state.positions.iter().enumerate() {
                let mut row = vec![n.to_string(), j.to_string(), p.x.to_string(), p.y.to_string()];
                match self.actions.get(n) {
                    Some(a) => {
                        row.push(a.0[j].speed.to_string());
                        row.push(a.0[j].heading.to_string());
                    }
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                }
                row.extend(state.harvested.iter().map(|d| d.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Parses the CSV layout produced by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TrajectoryError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let expected = ["step", "agent_id", "x", "y", "rho", "alpha"];
        if headers.len() < expected.len() || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(TrajectoryError::Malformed {
                row: 0,
                message: format!("expected header starting with {}", expected.join(",")),
            });
        }
        let num_targets = headers.len() - expected.len();
        let mut log = TrajectoryLog::default();
        let mut pending: Vec<Option<PolarAction>> = Vec::new();
        for (idx, record) in r.records().enumerate() {
            let row = idx + 1;
            let record = record?;
            let bad = |message: String| TrajectoryError::Malformed { row, message };
            let num = |k: usize| -> Result<f64, TrajectoryError> {
                record[k]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("column {}: {e}", headers[k].to_string())))
            };
            let step: usize = record[0].parse().map_err(|e| bad(format!("step: {e}")))?;
            let agent: usize = record[1].parse().map_err(|e| bad(format!("agent_id: {e}")))?;
            let pos = Vec2::new(num(2)?, num(3)?);
            let action = if record[4].is_empty() {
                None
            } else {
                Some(PolarAction::new(num(4)?, num(5)?))
            };
            if step == log.states.len() && agent == 0 {
                if !log.states.is_empty() {
                    flush_actions(&mut log, &mut pending).map_err(bad)?;
                }
                let harvested = (0..num_targets).map(|i| num(6 + i)).collect::<Result<_, _>>()?;
                log.states.push(State {
                    positions: Vec::new(),
                    harvested,
                    step_index: step,
                });
            } else if step + 1 != log.states.len() || agent != log.states[step].positions.len() {
                return Err(bad(format!("unexpected (step {step}, agent {agent}) ordering")));
            }
            log.states[step].positions.push(pos);
            pending.push(action);
        }
        if !pending.is_empty() && pending.iter().any(Option::is_some) {
            flush_actions(&mut log, &mut pending).map_err(|m| TrajectoryError::Malformed { row: 0, message: m })?;
        }
        Ok(log)
    }
}

fn flush_actions(log: &mut TrajectoryLog, pending: &mut Vec<Option<PolarAction>>) -> Result<(), String> {
    let actions: Option<Vec<PolarAction>> = pending.drain(..).collect();
    match actions {
        Some(a) => {
            log.actions.push(JointAction(a));
            Ok(())
        }
        None => Err("missing action on a non-final step".to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::HarvestEnv;
    use crate::scenario::builtin_config_1;

    fn sample_log() -> TrajectoryLog {
        let env = HarvestEnv::new(builtin_config_1());
        let mut s = env.initial_state();
        let mut log = TrajectoryLog::new(s.clone());
        for k in 0..3 {
            let a = JointAction(vec![
                PolarAction::new(1.0, 0.1 * k as f64),
                PolarAction::new(0.5, 1.0),
                PolarAction::HOVER,
            ]);
            s = env.step(&s, &a).unwrap().next_state;
            log.push(a, s.clone());
        }
        log
    }

    #[test]
    fn csv_layout() {
        let text = sample_log().to_csv_string();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,agent_id,x,y,rho,alpha,d0,d1,d2,d3");
        assert_eq!(text.lines().count(), 1 + 4 * 3);
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("3,2,0,1,,,"));
    }

    #[test]
    fn csv_round_trip() {
        let log = sample_log();
        let back = TrajectoryLog::read_csv(log.to_csv_string().as_bytes()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn empty_log_has_header_only() {
        let log = TrajectoryLog::default();
        assert_eq!(log.to_csv_string().trim(), "step,agent_id,x,y,rho,alpha");
        let back = TrajectoryLog::read_csv(log.to_csv_string().as_bytes()).unwrap();
        assert!(back.states.is_empty());
    }

    #[test]
    fn malformed_rows_are_errors() {
        let bad = "step,agent_id,x,y,rho,alpha,d0\n0,0,abc,1,,,0\n";
        assert!(TrajectoryLog::read_csv(bad.as_bytes()).is_err());
        let bad_header = "foo,bar\n1,2\n";
        assert!(TrajectoryLog::read_csv(bad_header.as_bytes()).is_err());
    }
}
