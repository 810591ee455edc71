//! Overlap metrics on binary masks, per-region summaries and their CSV
//! exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::{labels_to_regions, LabelMap, Region};

/// `2|A∩B| / (|A|+|B|)` on 0/1 masks. Two empty masks score 1, exactly one
/// empty mask scores 0.
pub fn dice_score(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice_score",
            format!("{} vs {} voxels", pred.len(), gt.len()),
        ));
    }
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        for v in [p, g] {
            if v > 1 {
                return Err(Error::NonBinaryMask { value: v, index: i });
            }
        }
        a += u64::from(p);
        b += u64::from(g);
        inter += u64::from(p & g);
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    })
}

/// Dice per region for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub dice_wt: f64,
    pub dice_tc: f64,
    pub dice_et: f64,
}

impl CaseDice {
    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::WholeTumor => self.dice_wt,
            Region::TumorCore => self.dice_tc,
            Region::EnhancingTumor => self.dice_et,
        }
    }
}

/// Scores a predicted label map against ground truth on all three regions.
pub fn case_dice(case_id: &str, pred: &LabelMap, gt: &LabelMap) -> Result<CaseDice> {
    if pred.extents() != gt.extents() {
        return Err(Error::shape(
            "case_dice",
            format!("{:?} vs {:?}", pred.extents(), gt.extents()),
        ));
    }
    let (p, g) = (labels_to_regions(pred), labels_to_regions(gt));
    let d = |r| dice_score(p.channel(r), g.channel(r));
    Ok(CaseDice {
        case_id: case_id.to_string(),
        dice_wt: d(Region::WholeTumor)?,
        dice_tc: d(Region::TumorCore)?,
        dice_et: d(Region::EnhancingTumor)?,
    })
}

/// Five-number summary plus mean; enough to draw a boxplot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data (`(n-1)·q` indexing).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl RegionSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize zero values".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite metric value {v}")));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(RegionSummary {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub wt: RegionSummary,
    pub tc: RegionSummary,
    pub et: RegionSummary,
}

impl MetricsSummary {
    pub fn get(&self, region: Region) -> &RegionSummary {
        match region {
            Region::WholeTumor => &self.wt,
            Region::TumorCore => &self.tc,
            Region::EnhancingTumor => &self.et,
        }
    }
}

pub fn summarize_metrics(records: &[CaseDice]) -> Result<MetricsSummary> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no per-case records to summarize".into()));
    }
    let col = |r| RegionSummary::of(&records.iter().map(|c| c.get(r)).collect::<Vec<_>>());
    Ok(MetricsSummary {
        wt: col(Region::WholeTumor)?,
        tc: col(Region::TumorCore)?,
        et: col(Region::EnhancingTumor)?,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// `case_id,dice_wt,dice_tc,dice_et`.
pub fn write_case_csv(path: &Path, records: &[CaseDice]) -> Result<()> {
    let mut w = csv_writer(path)?;
    if records.is_empty() {
        w.write_record(["case_id", "dice_wt", "dice_tc", "dice_et"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_case_csv(path: &Path) -> Result<Vec<CaseDice>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// `region,min,q1,median,q3,max`, one row per region in WT, TC, ET order.
pub fn write_boxplot_csv(path: &Path, summary: &MetricsSummary) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["region", "min", "q1", "median", "q3", "max"])?;
    for region in Region::ALL {
        let s = summary.get(region);
        let mut row = vec![region.short_name().to_string()];
        row.extend([s.min, s.q1, s.median, s.q3, s.max].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Header of the comparison table, in the column order results are reported.
pub const TABLE_HEADER: [&str; 4] = ["Method", "Dice ET", "Dice WT", "Dice TC"];

/// Mean Dice per method: `Method,Dice ET,Dice WT,Dice TC`.
pub fn write_table_csv(path: &Path, rows: &[(String, MetricsSummary)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TABLE_HEADER)?;
    for (method, s) in rows {
        w.write_record([
            method.clone(),
            format!("{:.4}", s.et.mean),
            format!("{:.4}", s.wt.mean),
            format!("{:.4}", s.tc.mean),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
