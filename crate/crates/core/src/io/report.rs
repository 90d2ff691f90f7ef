//! CSV metric reports: one row per (seed, class), a per-seed class-mean row,
//! then mean and standard-deviation rows across seeds.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::metrics::{AggregateReport, MetricsReport};

pub const HEADER: [&str; 5] = ["row", "seed", "class", "dsc", "iou"];

pub fn write_report<W: std::io::Write>(out: W, reports: &[MetricsReport]) -> Result<()> {
    let agg = AggregateReport::from_reports(reports)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER)?;
    for r in reports {
        let seed = r.seed.to_string();
        for (i, c) in r.classes.iter().enumerate() {
            w.write_record([
                "class",
                &seed,
                &c.to_string(),
                &r.per_class_dsc[i].to_string(),
                &r.per_class_iou[i].to_string(),
            ])?;
        }
        w.write_record(["class_mean", &seed, "all", &r.mean_dsc.to_string(), &r.miou.to_string()])?;
    }
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let get = |p: (f64, f64)| if pick == 0 { p.0 } else { p.1 }.to_string();
        for (i, c) in agg.classes.iter().enumerate() {
            w.write_record([
                label,
                "all",
                &c.to_string(),
                &get(agg.per_class_dsc[i]),
                &get(agg.per_class_iou[i]),
            ])?;
        }
        w.write_record([label, "all", "all", &get(agg.mean_dsc), &get(agg.miou)])?;
    }
    w.flush().map_err(|e| Error::io("report", e))?;
    Ok(())
}

pub fn save_report(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(file, reports)
}
