//! Accuracy-matrix bookkeeping and the three stream-level summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Seen,
    Unseen,
}

/// `R[j][t]`: accuracy on task `j` after training stage `t`. Seen tasks come
/// first, then unseen ones; there is one column per seen task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub kinds: Vec<RowKind>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(seen: usize, unseen: usize) -> Self {
        let kinds = std::iter::repeat_n(RowKind::Seen, seen)
            .chain(std::iter::repeat_n(RowKind::Unseen, unseen))
            .collect();
        Self {
            kinds,
            cells: vec![vec![None; seen]; seen + unseen],
        }
    }

    pub fn seen(&self) -> usize {
        self.kinds.iter().filter(|k| **k == RowKind::Seen).count()
    }

    pub fn unseen(&self) -> usize {
        self.kinds.len() - self.seen()
    }

    pub fn rows(&self) -> usize {
        self.kinds.len()
    }

    pub fn stages(&self) -> usize {
        self.seen()
    }

    pub fn set(&mut self, row: usize, stage: usize, value: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("accuracy {value} outside [0, 1]")));
        }
        let cell = self
            .cells
            .get_mut(row)
            .and_then(|r| r.get_mut(stage))
            .ok_or_else(|| Error::invalid(format!("cell ({row}, {stage}) out of range")))?;
        *cell = Some(value);
        Ok(())
    }

    pub fn get(&self, row: usize, stage: usize) -> Option<f64> {
        self.cells.get(row).and_then(|r| r.get(stage)).copied().flatten()
    }

    /// Number of leading stages whose column is fully populated.
    pub fn completed_stages(&self) -> usize {
        (0..self.stages())
            .take_while(|&t| self.cells.iter().all(|r| r[t].is_some()))
            .count()
    }

    fn final_entry(&self, row: usize) -> Result<f64> {
        let last = self
            .stages()
            .checked_sub(1)
            .ok_or_else(|| Error::invalid("accuracy matrix has no stages"))?;
        self.get(row, last)
            .ok_or_else(|| Error::invalid(format!("final column incomplete at row {row}")))
    }

    fn rows_of(&self, kind: RowKind) -> impl Iterator<Item = usize> + '_ {
        self.kinds
            .iter()
            .enumerate()
            .filter(move |(_, k)| **k == kind)
            .map(|(i, _)| i)
    }

    /// Serialises as CSV: a header of training stages, one row per task,
    /// each value in the shortest decimal form that parses back to the same
    /// `f64`, empty cells for unmeasured entries.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,kind");
        for t in 0..self.stages() {
            let _ = write!(out, ",after_{}", t + 1);
        }
        out.push('\n');
        let mut seen_i = 0;
        let mut unseen_i = 0;
        for (row, kind) in self.cells.iter().zip(&self.kinds) {
            let (name, label) = match kind {
                RowKind::Seen => {
                    seen_i += 1;
                    (format!("seen_{seen_i}"), "seen")
                }
                RowKind::Unseen => {
                    unseen_i += 1;
                    (format!("unseen_{unseen_i}"), "unseen")
                }
            };
            let _ = write!(out, "{name},{label}");
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty matrix csv".into()))?;
        let stages = header.split(',').count().saturating_sub(2);
        let mut kinds = Vec::new();
        let mut cells = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != stages + 2 {
                return Err(Error::Format(format!("matrix csv row {}: wrong field count", n + 1)));
            }
            kinds.push(match fields[1] {
                "seen" => RowKind::Seen,
                "unseen" => RowKind::Unseen,
                other => return Err(Error::Format(format!("unknown row kind `{other}`"))),
            });
            cells.push(
                fields[2..]
                    .iter()
                    .map(|f| {
                        if f.is_empty() {
                            Ok(None)
                        } else {
                            f.parse::<f64>()
                                .map(Some)
                                .map_err(|e| Error::Format(format!("bad cell `{f}`: {e}")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self { kinds, cells })
    }
}

/// Mean final accuracy over seen tasks.
pub fn average_performance(r: &AccuracyMatrix) -> Result<f64> {
    let rows: Vec<usize> = r.rows_of(RowKind::Seen).collect();
    if rows.is_empty() {
        return Err(Error::invalid("no seen tasks"));
    }
    let mut sum = 0.0;
    for &j in &rows {
        sum += r.final_entry(j)?;
    }
    Ok(sum / rows.len() as f64)
}

/// Mean over seen tasks `j < M` of `R[j][j] − R[j][M]`; 0 when `M < 2`.
/// Negative values mean backward transfer.
pub fn average_forgetting(r: &AccuracyMatrix) -> Result<f64> {
    forgetting_with(r, |row, j, _last| row[j])
}

/// Same as [`average_forgetting`] but measured from the best accuracy
/// observed before the final stage, `max_{j ≤ t < M} R[j][t]`.
pub fn average_forgetting_best(r: &AccuracyMatrix) -> Result<f64> {
    forgetting_with(r, |row, j, last| {
        row[j..last]
            .iter()
            .flatten()
            .copied()
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
    })
}

fn forgetting_with(r: &AccuracyMatrix, reference: impl Fn(&[Option<f64>], usize, usize) -> Option<f64>) -> Result<f64> {
    let m = r.stages();
    if m < 2 {
        return Ok(0.0);
    }
    let seen: Vec<usize> = r.rows_of(RowKind::Seen).collect();
    let mut sum = 0.0;
    for &j in seen.iter().take(m - 1) {
        let fin = r.final_entry(j)?;
        let reference = reference(&r.cells[j], j, m - 1)
            .ok_or_else(|| Error::invalid(format!("task {j} has no post-training accuracy")))?;
        sum += reference - fin;
    }
    Ok(sum / (m - 1) as f64)
}

/// Mean final accuracy over unseen tasks.
pub fn zero_shot_transfer(r: &AccuracyMatrix) -> Result<f64> {
    let rows: Vec<usize> = r.rows_of(RowKind::Unseen).collect();
    if rows.is_empty() {
        return Err(Error::invalid("no unseen tasks"));
    }
    let mut sum = 0.0;
    for &j in &rows {
        sum += r.final_entry(j)?;
    }
    Ok(sum / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ap: f64,
    pub af: f64,
    /// Forgetting measured from the best pre-final accuracy.
    pub af_best: f64,
    pub zst: Option<f64>,
}

pub fn summarize(r: &AccuracyMatrix) -> Result<Summary> {
    Ok(Summary {
        ap: average_performance(r)?,
        af: average_forgetting(r)?,
        af_best: average_forgetting_best(r)?,
        zst: if r.unseen() > 0 {
            Some(zero_shot_transfer(r)?)
        } else {
            None
        },
    })
}
