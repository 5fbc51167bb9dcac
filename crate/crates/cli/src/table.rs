//! CSV renderings of run contents. Byte-stable for an unchanged run.

use mh_core::metrics::ObjectiveSpec;
use mh_core::search::FrontierEntry;
use mh_core::store::{CandidateRecord, ScoreReport};

fn render(header: Vec<String>, rows: Vec<Vec<String>>) -> anyhow::Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(&header)?;
    for row in rows {
        writer.write_record(&row)?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

fn describe(record: &CandidateRecord) -> Vec<String> {
    vec![
        record.candidate_id.clone(),
        serde_json::to_value(record.origin).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
        record.iteration.to_string(),
    ]
}

fn head(columns: &[&str], extra: impl IntoIterator<Item = String>) -> Vec<String> {
    columns.iter().map(|c| c.to_string()).chain(extra).collect()
}

pub fn frontier(entries: &[FrontierEntry], objectives: &[ObjectiveSpec]) -> anyhow::Result<String> {
    let header = head(&["candidate_id", "origin", "iteration"], objectives.iter().map(|o| o.name.clone()));
    let rows = entries
        .iter()
        .map(|e| {
            let mut row = describe(&e.record);
            row.extend(objectives.iter().map(|o| e.metrics.get(&o.name).map(|v| v.to_string()).unwrap_or_default()));
            row
        })
        .collect();
    render(header, rows)
}

/// Every aggregate metric of each candidate, in the given order.
pub fn scored(items: &[(CandidateRecord, ScoreReport)]) -> anyhow::Result<String> {
    let names: Vec<String> = items
        .first()
        .map(|(_, r)| r.aggregate.iter().map(|(k, _)| k.to_string()).collect())
        .unwrap_or_default();
    let header = head(&["candidate_id", "origin", "iteration"], names.clone());
    let rows = items
        .iter()
        .map(|(rec, report)| {
            let mut row = describe(rec);
            row.extend(names.iter().map(|n| report.aggregate.get(n).map(|v| v.to_string()).unwrap_or_default()));
            row
        })
        .collect();
    render(header, rows)
}

pub fn candidates(records: &[CandidateRecord]) -> anyhow::Result<String> {
    let header = head(&["candidate_id", "origin", "iteration", "status", "parents", "reason"], []);
    let rows = records
        .iter()
        .map(|r| {
            let mut row = describe(r);
            row.push(r.status.to_string());
            row.push(r.parent_ids.join(" "));
            row.push(r.status_reason.clone().unwrap_or_default());
            row
        })
        .collect();
    render(header, rows)
}

/// `iteration` is the candidate's position in evaluation order, from 1.
pub fn best_so_far(ids: &[String], series: &[f64]) -> anyhow::Result<String> {
    let rows = ids
        .iter()
        .zip(series)
        .enumerate()
        .map(|(i, (id, v))| vec![(i + 1).to_string(), id.clone(), v.to_string()])
        .collect();
    render(head(&["iteration", "candidate_id", "best_so_far"], []), rows)
}
