//! Number formatting and plain CSV matrices.

use std::path::Path;

use crate::error::{Error, Result};

/// Scientific notation with 17 significant digits; round-trips every finite `f64`.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// A dense table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&v| num(v)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse("empty csv".into()))?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 2)))?;
            if row.len() != header.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, header has {}",
                    i + 2,
                    row.len(),
                    header.len()
                )));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_roundtrip() {
        let t = Table {
            header: vec!["x1".into(), "y".into()],
            rows: vec![vec![0.1, -2.0], vec![1e-300, 3.0]],
        };
        let back = Table::parse_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.column("y"), Some(vec![-2.0, 3.0]));
        assert!(Table::parse_csv("a,b\n1\n").is_err());
        assert!(Table::parse_csv("").is_err());
    }

    proptest! {
        #[test]
        fn num_roundtrips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }
}
