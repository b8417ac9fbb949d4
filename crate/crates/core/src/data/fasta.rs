use std::collections::HashSet;
use std::fmt::Write as _;

use super::ProteinRecord;
use crate::error::{data_err, Result};
use crate::residues::is_valid_letter;

/// Parses FASTA text. The id is the first whitespace-delimited header token;
/// body lines are concatenated and uppercased.
pub fn parse_fasta(text: &str) -> Result<Vec<ProteinRecord>> {
    let mut records: Vec<ProteinRecord> = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header
                .split_whitespace()
                .next()
                .ok_or_else(|| data_err(format!("line {}: empty FASTA header", lineno + 1)))?;
            if !seen.insert(id.to_string()) {
                return Err(data_err(format!("duplicate FASTA id {id}")));
            }
            records.push(ProteinRecord {
                id: id.to_string(),
                sequence: String::new(),
            });
            continue;
        }
        let rec = records
            .last_mut()
            .ok_or_else(|| data_err(format!("line {}: sequence before header", lineno + 1)))?;
        for c in line.chars() {
            let u = c.to_ascii_uppercase();
            if !u.is_ascii() || !is_valid_letter(u as u8) {
                return Err(data_err(format!(
                    "line {}: invalid character {c:?} in sequence {}",
                    lineno + 1,
                    rec.id
                )));
            }
            rec.sequence.push(u);
        }
    }
    if let Some(empty) = records.iter().find(|r| r.sequence.is_empty()) {
        return Err(data_err(format!("record {} has an empty sequence", empty.id)));
    }
    Ok(records)
}

/// Writes records with 60-column body lines.
pub fn write_fasta(records: &[ProteinRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, ">{}", r.id);
        for chunk in r.sequence.as_bytes().chunks(60) {
            out.push_str(std::str::from_utf8(chunk).expect("ascii"));
            out.push('\n');
        }
    }
    out
}
