//! Latin square, Williams square and extra-period comparison designs for
//! `t = p`.
//!
//! A Latin square design is the set of its rows, each row a subject
//! sequence, so two squares that differ only by row order are the same
//! design. Every design carries equal weights.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gee_variance::ApproxDesign;
use crate::model_core::{CrossoverLayout, TreatmentSequence};

/// Largest number of treatments the catalog enumerates.
pub const MAX_CATALOG_TREATMENTS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CatalogKind {
    Lsd,
    Wsd,
    Epd,
}

impl CatalogKind {
    pub fn name(&self) -> &'static str {
        match self {
            CatalogKind::Lsd => "LSD",
            CatalogKind::Wsd => "WSD",
            CatalogKind::Epd => "EPD",
        }
    }
}

impl fmt::Display for CatalogKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CatalogKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LSD" => Ok(CatalogKind::Lsd),
            "WSD" => Ok(CatalogKind::Wsd),
            "EPD" => Ok(CatalogKind::Epd),
            other => Err(Error::UnsupportedCatalog(format!(
                "unknown catalog {other:?} (expected LSD, WSD or EPD)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedDesign {
    pub name: String,
    pub design: ApproxDesign,
}

/// Every Latin square on `t` symbols as a sorted list of rows, in
/// lexicographic order. Row `i` starts with symbol `i`, which picks one
/// representative per row set.
pub fn latin_squares(t: usize) -> Vec<Vec<Vec<u8>>> {
    fn extend(t: usize, rows: &mut Vec<Vec<u8>>, out: &mut Vec<Vec<Vec<u8>>>) {
        let r = rows.len();
        if r == t {
            out.push(rows.clone());
            return;
        }
        let mut row = vec![r as u8];
        fill(t, rows, &mut row, out);
    }

    fn fill(t: usize, rows: &mut Vec<Vec<u8>>, row: &mut Vec<u8>, out: &mut Vec<Vec<Vec<u8>>>) {
        let c = row.len();
        if c == t {
            rows.push(row.clone());
            extend(t, rows, out);
            rows.pop();
            return;
        }
        for s in 0..t as u8 {
            if row.contains(&s) || rows.iter().any(|prev| prev[c] == s) {
                continue;
            }
            row.push(s);
            fill(t, rows, row, out);
            row.pop();
        }
    }

    let mut out = vec![];
    if t >= 1 {
        let mut rows = vec![];
        extend(t, &mut rows, &mut out);
    }
    for sq in &mut out {
        sq.sort();
    }
    out.sort();
    out
}

/// Every ordered pair of distinct treatments occurs exactly once in
/// consecutive periods.
pub fn is_williams(sequences: &[TreatmentSequence], t: usize) -> bool {
    let mut seen = vec![0usize; t * t];
    for s in sequences {
        for w in s.assignments().windows(2) {
            let (a, b) = (w[0] as usize, w[1] as usize);
            if a == b || a >= t || b >= t {
                return false;
            }
            seen[a * t + b] += 1;
        }
    }
    (0..t).all(|a| (0..t).all(|b| a == b || seen[a * t + b] == 1))
}

/// Each sequence is a permutation and each period holds every treatment.
pub fn is_latin(sequences: &[TreatmentSequence], t: usize) -> bool {
    if sequences.len() != t || sequences.iter().any(|s| s.len() != t) {
        return false;
    }
    let row_ok = sequences.iter().all(|s| {
        let mut a = s.assignments().to_vec();
        a.sort();
        a == (0..t as u8).collect::<Vec<_>>()
    });
    let col_ok = (0..t).all(|c| {
        let mut col: Vec<u8> = sequences.iter().map(|s| s.assignments()[c]).collect();
        col.sort();
        col == (0..t as u8).collect::<Vec<_>>()
    });
    row_ok && col_ok
}

fn to_sequences(rows: &[Vec<u8>]) -> Vec<TreatmentSequence> {
    rows.iter()
        .map(|r| TreatmentSequence::new(r.clone()).expect("catalog rows are non-empty"))
        .collect()
}

/// The extra-period design built on a square: each row keeps its first
/// `p - 1` treatments and repeats the treatment of period `p - 1`.
fn extra_period(rows: &[Vec<u8>]) -> Vec<Vec<u8>> {
    rows.iter()
        .map(|r| {
            let mut e = r[..r.len() - 1].to_vec();
            e.push(r[r.len() - 2]);
            e
        })
        .collect()
}

/// Equal-weight comparison designs of one kind for a `t = p` layout.
pub fn generate_catalog(kind: CatalogKind, layout: &CrossoverLayout) -> Result<Vec<NamedDesign>> {
    let t = layout.treatments();
    if layout.periods() != t {
        return Err(Error::UnsupportedCatalog(format!(
            "{kind} needs as many periods as treatments, got t = {t}, p = {}",
            layout.periods()
        )));
    }
    if t > MAX_CATALOG_TREATMENTS {
        return Err(Error::UnsupportedCatalog(format!(
            "catalog enumeration is limited to t <= {MAX_CATALOG_TREATMENTS}, got {t}"
        )));
    }
    let squares = latin_squares(t);
    let rows: Vec<Vec<Vec<u8>>> = match kind {
        CatalogKind::Lsd => squares,
        CatalogKind::Wsd => squares
            .into_iter()
            .filter(|sq| is_williams(&to_sequences(sq), t))
            .collect(),
        CatalogKind::Epd => squares.iter().map(|sq| extra_period(sq)).collect(),
    };
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            Ok(NamedDesign {
                name: format!("{kind}{}", i + 1),
                design: ApproxDesign::uniform(to_sequences(r))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_core::parse_sequences;

    fn layout(t: usize) -> CrossoverLayout {
        CrossoverLayout::new(t, t, 1).unwrap()
    }

    #[test]
    fn counts_for_four_treatments() {
        assert_eq!(generate_catalog(CatalogKind::Lsd, &layout(4)).unwrap().len(), 24);
        assert_eq!(generate_catalog(CatalogKind::Wsd, &layout(4)).unwrap().len(), 6);
        assert_eq!(generate_catalog(CatalogKind::Epd, &layout(4)).unwrap().len(), 24);
    }

    #[test]
    fn small_and_odd_orders() {
        // the two 2x2 squares share the row set {AB, BA}
        let two = generate_catalog(CatalogKind::Lsd, &layout(2)).unwrap();
        assert_eq!(two.len(), 1);
        assert_eq!(generate_catalog(CatalogKind::Wsd, &layout(2)).unwrap().len(), 1);
        assert_eq!(generate_catalog(CatalogKind::Lsd, &layout(3)).unwrap().len(), 2);
        // no single Williams square exists for odd t
        assert_eq!(generate_catalog(CatalogKind::Wsd, &layout(3)).unwrap().len(), 0);
        assert_eq!(generate_catalog(CatalogKind::Lsd, &layout(5)).unwrap().len(), 1344);
    }

    #[test]
    fn williams_membership() {
        let w = parse_sequences("ABCD BDAC CADB DCBA").unwrap();
        assert!(is_latin(&w, 4));
        assert!(is_williams(&w, 4));
        let plain = parse_sequences("ABCD BADC CDAB DCBA").unwrap();
        assert!(is_latin(&plain, 4));
        assert!(!is_williams(&plain, 4));
    }

    #[test]
    fn lexicographic_order_and_first_entries() {
        let lsd = generate_catalog(CatalogKind::Lsd, &layout(4)).unwrap();
        assert_eq!(lsd[0].name, "LSD1");
        assert_eq!(lsd[0].design.sequences(), &parse_sequences("ABCD BADC CDAB DCBA").unwrap()[..]);
        let wsd = generate_catalog(CatalogKind::Wsd, &layout(4)).unwrap();
        assert_eq!(wsd[0].design.sequences(), &parse_sequences("ABCD BDAC CADB DCBA").unwrap()[..]);
        let keys: Vec<_> = lsd.iter().map(|d| d.design.sequences().to_vec()).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        for d in lsd.iter().chain(&wsd) {
            assert!(is_latin(d.design.sequences(), 4));
            assert!(d.design.weights().iter().all(|&w| w == 0.25));
        }
        assert!(wsd.iter().all(|d| is_williams(d.design.sequences(), 4)));
    }

    #[test]
    fn extra_period_repeats_previous_period() {
        let epd = generate_catalog(CatalogKind::Epd, &layout(4)).unwrap();
        assert_eq!(epd[0].design.sequences(), &parse_sequences("ABCC BADD CDAA DCBB").unwrap()[..]);
        for d in &epd {
            for s in d.design.sequences() {
                assert_eq!(s.treatment(3), s.treatment(2));
            }
        }
    }

    #[test]
    fn unsupported_layouts() {
        assert!(generate_catalog(CatalogKind::Lsd, &CrossoverLayout::new(2, 3, 1).unwrap()).is_err());
        assert!(generate_catalog(CatalogKind::Lsd, &layout(6)).is_err());
        assert!("XYZ".parse::<CatalogKind>().is_err());
        assert_eq!("wsd".parse::<CatalogKind>().unwrap(), CatalogKind::Wsd);
    }
}
