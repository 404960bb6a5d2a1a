use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,variant,seed,target_mAP,target_rank1,mean_local_loss,wall_ms";

/// One line of the per-epoch metrics log. Retrieval scores are percentages.
/// Epoch 0 is the initial model, before any local training, and has a NaN
/// loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub variant: String,
    pub seed: u64,
    pub target_map: f64,
    pub target_rank1: f64,
    pub mean_local_loss: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.variant, r.seed, r.target_map, r.target_rank1, r.mean_local_loss, r.wall_ms
        )
        .expect("writing to a String");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("");
    if header.trim_end_matches(['\r', '\n']) != METRICS_HEADER {
        return Err(Error::parse(0, format!("metrics header must be {METRICS_HEADER:?}")));
    }
    let mut rows = Vec::new();
    let mut offset = header.len();
    for raw in lines {
        let line_no = offset;
        offset += raw.len();
        let line = raw.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::parse(line_no, format!("expected 7 fields, found {}", fields.len())));
        }
        let bad = |name: &str| Error::parse(line_no, format!("bad {name} field"));
        rows.push(MetricsRow {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            variant: fields[1].to_owned(),
            seed: fields[2].parse().map_err(|_| bad("seed"))?,
            target_map: fields[3].parse().map_err(|_| bad("target_mAP"))?,
            target_rank1: fields[4].parse().map_err(|_| bad("target_rank1"))?,
            mean_local_loss: fields[5].parse().map_err(|_| bad("mean_local_loss"))?,
            wall_ms: fields[6].parse().map_err(|_| bad("wall_ms"))?,
        });
    }
    Ok(rows)
}
