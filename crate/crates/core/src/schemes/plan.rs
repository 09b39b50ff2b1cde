use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fabric::WorkerId;

/// A `d x m` worker grid: `d` data-parallel replicas of an `m`-column model.
///
/// Worker `(i, j)` (replica `i`, column `j`) has fabric id `i * m + j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPlan {
    pub data_shards: usize,
    pub model_columns: usize,
    pub cross_layers: Vec<usize>,
}

impl ParallelPlan {
    pub fn new(data_shards: usize, model_columns: usize, cross_layers: Vec<usize>) -> Result<Self> {
        if data_shards == 0 || model_columns == 0 {
            return Err(Error::config(format!(
                "plan needs d >= 1 and m >= 1, got d = {data_shards}, m = {model_columns}"
            )));
        }
        let mut cross_layers = cross_layers;
        cross_layers.sort_unstable();
        cross_layers.dedup();
        Ok(Self {
            data_shards,
            model_columns,
            cross_layers,
        })
    }

    /// The single-device plan.
    pub fn single() -> Self {
        Self {
            data_shards: 1,
            model_columns: 1,
            cross_layers: Vec::new(),
        }
    }

    pub fn workers(&self) -> usize {
        self.data_shards * self.model_columns
    }

    pub fn worker(&self, replica: usize, column: usize) -> WorkerId {
        WorkerId(replica * self.model_columns + column)
    }

    /// `(replica, column)` of a worker.
    pub fn coords(&self, w: WorkerId) -> (usize, usize) {
        (w.0 / self.model_columns, w.0 % self.model_columns)
    }

    /// The `m` columns of one replica.
    pub fn replica_group(&self, replica: usize) -> Vec<WorkerId> {
        (0..self.model_columns).map(|j| self.worker(replica, j)).collect()
    }

    /// The `d` copies of one column; the first member is the column root.
    pub fn column_group(&self, column: usize) -> Vec<WorkerId> {
        (0..self.data_shards).map(|i| self.worker(i, column)).collect()
    }

    pub fn is_root(&self, w: WorkerId) -> bool {
        self.coords(w).0 == 0
    }

    /// Per-replica batch, failing unless `batch` splits evenly.
    pub fn shard_size(&self, batch: usize) -> Result<usize> {
        if batch == 0 || batch % self.data_shards != 0 {
            return Err(Error::config(format!(
                "batch {batch} does not split into {} equal shards",
                self.data_shards
            )));
        }
        Ok(batch / self.data_shards)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut d = None;
        let mut m = None;
        let mut cross = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: n + 1,
                message,
            };
            let (key, value) = match line.split_once(char::is_whitespace) {
                Some((k, v)) => (k, v.trim()),
                None => (line, ""),
            };
            let count = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| err(format!("{key} expects a positive integer, got {v:?}")))
            };
            match key {
                "data_shards" => d = Some(count(value)?),
                "model_columns" => m = Some(count(value)?),
                "cross_layers" => {
                    cross = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            s.parse::<usize>()
                                .map_err(|_| err(format!("bad layer index {s:?}")))
                        })
                        .collect::<Result<_>>()?;
                }
                other => return Err(err(format!("unknown plan key {other:?}"))),
            }
        }
        Self::new(d.unwrap_or(1), m.unwrap_or(1), cross)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let cross: Vec<String> = self.cross_layers.iter().map(ToString::to_string).collect();
        format!(
            "data_shards {}\nmodel_columns {}\ncross_layers {}\n",
            self.data_shards,
            self.model_columns,
            cross.join(",")
        )
    }
}

impl fmt::Display for ParallelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.data_shards, self.model_columns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_coordinates() {
        let p = ParallelPlan::new(2, 3, vec![]).unwrap();
        assert_eq!(p.workers(), 6);
        assert_eq!(p.worker(1, 2), WorkerId(5));
        assert_eq!(p.coords(WorkerId(4)), (1, 1));
        assert_eq!(p.column_group(1), vec![WorkerId(1), WorkerId(4)]);
        assert_eq!(p.replica_group(1), vec![WorkerId(3), WorkerId(4), WorkerId(5)]);
    }

    #[test]
    fn text_round_trip() {
        let p = ParallelPlan::new(2, 2, vec![5, 3, 3]).unwrap();
        assert_eq!(p.cross_layers, vec![3, 5]);
        assert_eq!(ParallelPlan::parse(&p.to_text()).unwrap(), p);
        let q = ParallelPlan::parse("# comment\ndata_shards 4\ncross_layers\n").unwrap();
        assert_eq!((q.data_shards, q.model_columns), (4, 1));
        assert!(q.cross_layers.is_empty());
    }

    #[test]
    fn rejects_bad_plans() {
        assert!(ParallelPlan::parse("data_shards 0\n").is_err());
        assert!(ParallelPlan::parse("model_columns two\n").is_err());
        assert!(matches!(ParallelPlan::parse("shards 2\n"), Err(Error::Parse { line: 1, .. })));
        let p = ParallelPlan::new(3, 1, vec![]).unwrap();
        assert!(p.shard_size(16).is_err());
        assert_eq!(p.shard_size(15).unwrap(), 5);
    }
}
