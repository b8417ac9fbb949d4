use crate::error::{data_err, Result};
use crate::residues::PAD;

/// `len` residues centred on 1-based `pos`, padded with `X` past either end.
pub fn window_peptide(sequence: &str, pos: usize, len: usize) -> Result<String> {
    if len.is_multiple_of(2) {
        return Err(data_err(format!("window length {len} must be odd")));
    }
    let seq = sequence.as_bytes();
    if pos == 0 || pos > seq.len() {
        return Err(data_err(format!(
            "position {pos} outside sequence of length {}",
            seq.len()
        )));
    }
    let half = (len - 1) / 2;
    let out: Vec<u8> = (0..len)
        .map(|k| {
            // 1-based parent coordinate of window slot k
            let p = pos as isize - half as isize + k as isize;
            if p >= 1 && p as usize <= seq.len() {
                seq[p as usize - 1]
            } else {
                PAD
            }
        })
        .collect();
    Ok(String::from_utf8(out).expect("ascii"))
}
