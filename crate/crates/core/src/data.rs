//! Input/output records.
//!
//! CSV layout: one row per sample `t = 1..T` with columns `t, u_1.., y_1..`, where the row holds
//! the input `u_{t-1}` that was applied before `y_t` was measured.

use std::io::{Read, Write};

use crate::error::{invalid, Error, Result};
use crate::linalg::Vector;

#[derive(Clone, Debug, PartialEq)]
pub struct IoData {
    /// `u_0 .. u_{T-1}`.
    pub u: Vec<Vector>,
    /// `y_1 .. y_T`.
    pub y: Vec<Vector>,
}

impl IoData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn nu(&self) -> usize {
        self.u.first().map_or(0, |v| v.len())
    }

    pub fn ny(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }

    pub fn validate(&self, nu: usize, ny: usize) -> Result<()> {
        if self.u.len() != self.y.len() {
            return invalid("input and output records must have equal length");
        }
        if self.is_empty() {
            return invalid("empty data set");
        }
        if self.u.iter().any(|v| v.len() != nu) || self.y.iter().any(|v| v.len() != ny) {
            return invalid(format!("data must have {nu} inputs and {ny} outputs per sample"));
        }
        if self.u.iter().chain(self.y.iter()).any(|v| v.iter().any(|x| !x.is_finite())) {
            return invalid("data contain non-finite values");
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.nu()).map(|i| format!("u_{i}")));
        header.extend((1..=self.ny()).map(|i| format!("y_{i}")));
        wr.write_record(&header)?;
        for (k, (u, y)) in self.u.iter().zip(&self.y).enumerate() {
            let mut rec = vec![(k + 1).to_string()];
            rec.extend(u.iter().chain(y.iter()).map(|v| format!("{v:e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let nu = header.iter().filter(|h| h.starts_with("u_")).count();
        let ny = header.iter().filter(|h| h.starts_with("y_")).count();
        if header.len() != 1 + nu + ny || header.get(0) != Some("t") {
            return invalid("CSV header must be t, u_1.., y_1..");
        }
        let mut data = IoData { u: Vec::new(), y: Vec::new() };
        for rec in rd.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse(format!("bad number in data: {e}")))?;
            data.u.push(Vector::from_column_slice(&vals[..nu]));
            data.y.push(Vector::from_column_slice(&vals[nu..]));
        }
        data.validate(nu, ny)?;
        Ok(data)
    }
}
