//! Calibration CSV input.
//!
//! Header required: `dn,dg,e,sigma0[,cells,aberrations]`. An empty or absent
//! `sigma0` falls back to the counting uncertainty, which needs `cells` and
//! `aberrations`.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fitting::DataPoint;

pub const CALIBRATION_SCHEMA: &str = "dn,dg,e,sigma0[,cells,aberrations]";

struct Columns {
    dn: usize,
    dg: usize,
    e: usize,
    sigma0: Option<usize>,
    cells: Option<usize>,
    aberrations: Option<usize>,
}

fn columns(headers: &csv::StringRecord) -> Result<Columns> {
    let find = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let req = |name: &str| {
        find(name).ok_or_else(|| Error::Schema(format!("missing required column `{name}` (expected {CALIBRATION_SCHEMA})")))
    };
    let c = Columns {
        dn: req("dn")?,
        dg: req("dg")?,
        e: req("e")?,
        sigma0: find("sigma0"),
        cells: find("cells"),
        aberrations: find("aberrations"),
    };
    if c.cells.is_some() != c.aberrations.is_some() {
        return Err(Error::Schema("columns `cells` and `aberrations` must appear together".into()));
    }
    if c.sigma0.is_none() && c.cells.is_none() {
        return Err(Error::Schema(
            "no `sigma0` column and no `cells` column: add a sigma0 column, \
             or add cells and aberrations columns to use the counting uncertainty"
                .into(),
        ));
    }
    Ok(c)
}

/// Reads calibration points. Row numbers in errors count the header as row 1.
pub fn read_calibration<R: Read>(input: R) -> Result<Vec<DataPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("cannot read header: {e}")))?
        .clone();
    let cols = columns(&headers)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = rec.as_ref().ok().and_then(|r| r.position()).map_or(i + 2, |p| p.line() as usize);
        let rec = rec.map_err(|e| Error::Csv { row, column: "-".into(), message: e.to_string() })?;
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let name = |idx: usize| headers.get(idx).unwrap_or("?").trim().to_string();
        let num = |idx: usize| -> Result<Option<f64>> {
            let s = field(idx);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| Error::Csv { row, column: name(idx), message: format!("`{s}` is not a finite number") })
        };
        let count = |idx: usize| -> Result<Option<u64>> {
            let s = field(idx);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<u64>()
                .map(Some)
                .map_err(|_| Error::Csv { row, column: name(idx), message: format!("`{s}` is not a non-negative integer") })
        };
        let need = |idx: usize| -> Result<f64> {
            num(idx)?.ok_or_else(|| Error::Csv { row, column: name(idx), message: "value is required".into() })
        };
        let dn = need(cols.dn)?;
        let dg = need(cols.dg)?;
        let e = need(cols.e)?;
        let sigma0 = cols.sigma0.map(num).transpose()?.flatten();
        let cells = cols.cells.map(count).transpose()?.flatten();
        let aberrations = cols.aberrations.map(count).transpose()?.flatten();
        let point = match (cells, aberrations) {
            (Some(w), Some(u)) => {
                if w == 0 {
                    return Err(Error::Csv { row, column: "cells".into(), message: "cell count must be >= 1".into() });
                }
                let p = DataPoint::from_counts(dn, dg, w, u, sigma0)?;
                if (p.e - e).abs() > 1e-12 * p.e.max(1.0) {
                    return Err(Error::Csv {
                        row,
                        column: "e".into(),
                        message: format!("frequency {e} disagrees with aberrations/cells = {}", p.e),
                    });
                }
                DataPoint { e, ..p }
            }
            (None, None) => match sigma0 {
                Some(s) => DataPoint::new(dn, dg, e, s),
                None => {
                    return Err(Error::Csv {
                        row,
                        column: "sigma0".into(),
                        message: "empty sigma0 needs cells and aberrations on the same row".into(),
                    })
                }
            },
            (Some(_), None) => {
                return Err(Error::Csv { row, column: "aberrations".into(), message: "required when cells is given".into() })
            }
            (None, Some(_)) => {
                return Err(Error::Csv { row, column: "cells".into(), message: "required when aberrations is given".into() })
            }
        };
        point.validate(out.len()).map_err(|err| Error::Csv {
            row,
            column: "-".into(),
            message: err.to_string(),
        })?;
        out.push(point);
    }
    if out.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    Ok(out)
}

pub fn read_calibration_path(path: &Path) -> Result<Vec<DataPoint>> {
    read_calibration(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(s: &str) -> Result<Vec<DataPoint>> {
        read_calibration(s.as_bytes())
    }

    #[test]
    fn plain_rows() {
        let d = read("dn,dg,e,sigma0\n0,0,0.001,0.01\n1.5, 0 ,0.75,0.02\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1], DataPoint::new(1.5, 0.0, 0.75, 0.02));
    }

    #[test]
    fn counting_default() {
        let d = read("dn,dg,e,sigma0,cells,aberrations\n1,0,0.04,,100,4\n2,0,0.08,0.5,100,8\n").unwrap();
        assert_eq!(d[0].sigma0, 0.02);
        assert_eq!(d[0].cells, Some(100));
        assert_eq!(d[1].sigma0, 0.5);
        let d = read("dg,dn,cells,aberrations,e\n0,1,100,4,0.04\n").unwrap();
        assert_eq!(d[0].dn, 1.0);
        assert_eq!(d[0].sigma0, 0.02);
    }

    #[test]
    fn schema_error_names_both_remedies() {
        let msg = read("dn,dg,e\n0,0,0.1\n").unwrap_err().to_string();
        assert!(msg.contains("sigma0") && msg.contains("cells and aberrations"), "{msg}");
        assert!(matches!(read("dn,e,sigma0\n0,0,1\n"), Err(Error::Schema(_))));
        assert!(matches!(read("dn,dg,e,sigma0,cells\n0,0,0,1,3\n"), Err(Error::Schema(_))));
        assert!(matches!(read("dn,dg,e,sigma0\n"), Err(Error::Schema(_))));
    }

    #[test]
    fn row_and_column_in_errors() {
        match read("dn,dg,e,sigma0\n0,0,0.1,0.01\n0,x,0.1,0.01\n") {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "dg")),
            other => panic!("{other:?}"),
        }
        match read("dn,dg,e,sigma0\n0,0,0.1,\n") {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "sigma0")),
            other => panic!("{other:?}"),
        }
        match read("dn,dg,e,sigma0,cells,aberrations\n0,0,0.5,,10,4\n") {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "e")),
            other => panic!("{other:?}"),
        }
        match read("dn,dg,e,sigma0,cells,aberrations\n0,0,0.5,0.1,-3,4\n") {
            Err(Error::Csv { column, .. }) => assert_eq!(column, "cells"),
            other => panic!("{other:?}"),
        }
        let msg = read("dn,dg,e,sigma0\n0,0,-1,0.1\n").unwrap_err().to_string();
        assert!(msg.contains("row 2"), "{msg}");
    }

    #[test]
    fn ragged_row_is_reported() {
        assert!(matches!(read("dn,dg,e,sigma0\n0,0,0.1\n"), Err(Error::Csv { row: 2, .. })));
    }
}
