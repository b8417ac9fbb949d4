//! Amino-acid alphabet, physicochemical descriptors and PTM residue
//! eligibility.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// The 20 standard residues in token order; token 20 is the pad letter `X`.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const PAD: u8 = b'X';
pub const PAD_TOKEN: usize = 20;
pub const VOCAB: usize = 21;

pub fn is_valid_letter(b: u8) -> bool {
    b == PAD || AMINO_ACIDS.contains(&b)
}

pub fn token(b: u8) -> Result<usize> {
    if b == PAD {
        return Ok(PAD_TOKEN);
    }
    AMINO_ACIDS
        .iter()
        .position(|&a| a == b)
        .ok_or_else(|| data_err(format!("unknown residue letter {:?}", b as char)))
}

pub fn tokenize(seq: &str) -> Result<Vec<usize>> {
    seq.bytes().map(token).collect()
}

/// Raw descriptors per residue in `AMINO_ACIDS` order: free amino-acid
/// molecular weight (Da), isoelectric point, Kyte-Doolittle hydropathy,
/// Grantham polarity.
pub const PHYSCHEM_RAW: [[f64; 4]; 20] = [
    [89.09, 6.00, 1.8, 8.1],     // A
    [121.16, 5.07, 2.5, 5.5],    // C
    [133.10, 2.77, -3.5, 13.0],  // D
    [147.13, 3.22, -3.5, 12.3],  // E
    [165.19, 5.48, 2.8, 5.2],    // F
    [75.07, 5.97, -0.4, 9.0],    // G
    [155.16, 7.59, -3.2, 10.4],  // H
    [131.17, 6.02, 4.5, 5.2],    // I
    [146.19, 9.74, -3.9, 11.3],  // K
    [131.17, 5.98, 3.8, 4.9],    // L
    [149.21, 5.74, 1.9, 5.7],    // M
    [132.12, 5.41, -3.5, 11.6],  // N
    [115.13, 6.30, -1.6, 8.0],   // P
    [146.15, 5.65, -3.5, 10.5],  // Q
    [174.20, 10.76, -4.5, 10.5], // R
    [105.09, 5.68, -0.8, 9.2],   // S
    [119.12, 5.60, -0.7, 8.6],   // T
    [117.15, 5.96, 4.2, 5.9],    // V
    [204.23, 5.89, -0.9, 5.4],   // W
    [181.19, 5.66, -1.3, 6.2],   // Y
];

/// Descriptor table z-scored per column over the 20 residues (population
/// standard deviation). Row 20 (`X`) is zero.
pub fn physchem_table() -> [[f64; 4]; VOCAB] {
    let mut out = [[0.0; 4]; VOCAB];
    for col in 0..4 {
        let mean = PHYSCHEM_RAW.iter().map(|r| r[col]).sum::<f64>() / 20.0;
        let var = PHYSCHEM_RAW.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / 20.0;
        let sd = var.sqrt();
        for (row, raw) in out.iter_mut().zip(PHYSCHEM_RAW.iter()) {
            row[col] = (raw[col] - mean) / sd;
        }
    }
    out
}

/// Normalized descriptor 4-vector for one letter; `X` maps to zeros.
pub fn embed_physchem(letter: u8) -> Result<[f64; 4]> {
    let t = token(letter)?;
    Ok(physchem_table()[t])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtmType {
    pub name: String,
    /// Residue letters this modification can occur on.
    pub residues: String,
}

/// Ordered PTM classes with their eligible residues.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Eligibility {
    pub types: Vec<PtmType>,
}

#[derive(Deserialize)]
struct EligibilityAsset {
    types: Vec<PtmType>,
    extra: Vec<PtmType>,
}

const ASSET: &str = include_str!("../assets/ptm_types.json");

impl Eligibility {
    /// The eight bundled classes (seven named modifications plus `rare`).
    pub fn bundled() -> Self {
        let asset: EligibilityAsset = serde_json::from_str(ASSET).expect("bundled asset parses");
        Self { types: asset.types }
    }

    /// Every bundled class including extras such as SUMOylation.
    pub fn bundled_all() -> Self {
        let asset: EligibilityAsset = serde_json::from_str(ASSET).expect("bundled asset parses");
        let mut types = asset.types;
        types.extend(asset.extra);
        Self { types }
    }

    /// Picks named classes from the full bundled table, in the given order.
    pub fn select(names: &[&str]) -> Result<Self> {
        let all = Self::bundled_all();
        let types = names
            .iter()
            .map(|n| {
                all.types
                    .iter()
                    .find(|t| t.name == *n)
                    .cloned()
                    .ok_or_else(|| data_err(format!("unknown PTM type {n}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { types })
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn is_eligible(&self, ptm_type: usize, residue: u8) -> bool {
        self.types
            .get(ptm_type)
            .is_some_and(|t| t.residues.as_bytes().contains(&residue))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.types.iter().map(|t| t.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_embeds_to_zero() {
        assert_eq!(embed_physchem(b'X').unwrap(), [0.0; 4]);
    }

    #[test]
    fn glycine_row_matches_independent_zscore() {
        // Oracle: z-score of glycine computed column by column from the raw table.
        let g = 5;
        let got = embed_physchem(b'G').unwrap();
        for col in 0..4 {
            let vals: Vec<f64> = PHYSCHEM_RAW.iter().map(|r| r[col]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            assert!((got[col] - (vals[g] - mean) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_columns_have_zero_mean_unit_variance() {
        let t = physchem_table();
        for col in 0..4 {
            let mean = t[..20].iter().map(|r| r[col]).sum::<f64>() / 20.0;
            let var = t[..20].iter().map(|r| r[col] * r[col]).sum::<f64>() / 20.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_letter_is_error() {
        assert!(embed_physchem(b'B').is_err());
        assert!(token(b'7').is_err());
    }

    #[test]
    fn bundled_eligibility() {
        let e = Eligibility::bundled();
        assert_eq!(e.num_types(), 8);
        let phos = e.index_of("phosphorylation").unwrap();
        assert!(e.is_eligible(phos, b'S') && e.is_eligible(phos, b'Y'));
        assert!(!e.is_eligible(phos, b'K'));
        let meth = e.index_of("methylation").unwrap();
        assert!(e.is_eligible(meth, b'K') && e.is_eligible(meth, b'R'));
        let ng = e.index_of("n_linked_glycosylation").unwrap();
        assert!(e.is_eligible(ng, b'N') && !e.is_eligible(ng, b'S'));
        let sumo = Eligibility::select(&["sumoylation"]).unwrap();
        assert!(sumo.is_eligible(0, b'K'));
    }
}
