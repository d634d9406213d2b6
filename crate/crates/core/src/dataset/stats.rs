//! Counts and fractions of a record set along each axis and per cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::{bucketize, SampleRecord};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AxisCount {
    pub count: usize,
    pub fraction: f64,
}

/// One task x attribute x size x spatial x split combination.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsCell {
    pub task: String,
    pub attribute: String,
    pub size: String,
    pub spatial: String,
    pub split: String,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionReport {
    pub total: usize,
    /// axis name -> key -> count.
    pub axes: BTreeMap<String, BTreeMap<String, AxisCount>>,
    pub cells: Vec<StatsCell>,
}

pub fn stats(records: &[SampleRecord]) -> DistributionReport {
    let total = records.len();
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    let mut axes: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut cells: BTreeMap<[&'static str; 5], usize> = BTreeMap::new();
    for r in records {
        let (size, spatial) = bucketize(r);
        let key = [r.task.as_str(), r.attribute.as_str(), size.as_str(), spatial.as_str(), r.split.as_str()];
        for (axis, k) in ["task", "attribute", "size", "spatial", "split"].iter().zip(key) {
            *axes.entry(axis.to_string()).or_default().entry(k.to_string()).or_default() += 1;
        }
        *cells.entry(key).or_default() += 1;
    }
    DistributionReport {
        total,
        axes: axes
            .into_iter()
            .map(|(a, m)| (a, m.into_iter().map(|(k, c)| (k, AxisCount { count: c, fraction: frac(c) })).collect()))
            .collect(),
        cells: cells
            .into_iter()
            .map(|([task, attribute, size, spatial, split], count)| StatsCell {
                task: task.into(),
                attribute: attribute.into(),
                size: size.into(),
                spatial: spatial.into(),
                split: split.into(),
                count,
                fraction: frac(count),
            })
            .collect(),
    }
}

impl DistributionReport {
    /// One row per cell, then one per axis value with `*` in the other
    /// columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,attribute,size,spatial,split,count,fraction\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6}",
                c.task, c.attribute, c.size, c.spatial, c.split, c.count, c.fraction
            );
        }
        let cols = ["task", "attribute", "size", "spatial", "split"];
        for (axis, m) in &self.axes {
            for (k, v) in m {
                let row: Vec<&str> = cols.iter().map(|c| if c == axis { k.as_str() } else { "*" }).collect();
                let _ = writeln!(out, "{},{},{:.6}", row.join(","), v.count, v.fraction);
            }
        }
        out
    }
}
