use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KtError, Result};

/// Exact, ordered header of the interaction CSV.
pub const CSV_HEADER: [&str; 5] = ["learner_id", "question_id", "concept_id", "correct", "timestamp_ms"];

/// One answered question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub learner_id: String,
    pub question_id: String,
    pub concept_id: String,
    pub correct: bool,
    pub timestamp_ms: Option<i64>,
}

/// Reads an interaction log. Rows are returned in file order.
pub fn load_csv(path: &Path) -> Result<Vec<InteractionRecord>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| KtError::io(path, e))?;
    read_records(file, &display)
}

pub fn read_records<R: std::io::Read>(reader: R, source: &str) -> Result<Vec<InteractionRecord>> {
    let parse_err = |line: usize, msg: String| KtError::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let found: Vec<&str> = headers.iter().map(str::trim).collect();
    if let Some(unknown) = found.iter().find(|h| !CSV_HEADER.contains(h)) {
        return Err(parse_err(1, format!("unknown column `{unknown}`")));
    }
    if found != CSV_HEADER {
        return Err(parse_err(
            1,
            format!(
                "expected header `{}`, found `{}`",
                CSV_HEADER.join(","),
                found.join(",")
            ),
        ));
    }

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != CSV_HEADER.len() {
            return Err(parse_err(line, format!("expected 5 fields, found {}", row.len())));
        }
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let learner_id = field(0);
        if learner_id.is_empty() {
            return Err(parse_err(line, "empty learner_id".into()));
        }
        let correct = match field(3) {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(line, format!("correct must be 0 or 1, found `{other}`"))),
        };
        let timestamp_ms = match field(4) {
            "" => None,
            ts => Some(
                ts.parse::<i64>()
                    .map_err(|_| parse_err(line, format!("bad timestamp `{ts}`")))?,
            ),
        };
        out.push(InteractionRecord {
            learner_id: learner_id.to_string(),
            question_id: field(1).to_string(),
            concept_id: field(2).to_string(),
            correct,
            timestamp_ms,
        });
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    crate::io::write_csv_rows(
        path,
        &CSV_HEADER,
        records.iter().map(|r| {
            [
                r.learner_id.clone(),
                r.question_id.clone(),
                r.concept_id.clone(),
                if r.correct { "1".to_string() } else { "0".to_string() },
                r.timestamp_ms.map(|t| t.to_string()).unwrap_or_default(),
            ]
        }),
    )
}
