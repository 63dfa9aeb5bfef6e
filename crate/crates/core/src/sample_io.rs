//! Sample matrices on disk.
//!
//! CSV holds one point per line. The binary form is an 8-byte header
//! (`b"TG"`, d as u16 LE, n as u32 LE) followed by n·d little-endian f64
//! values in row-major order.

use crate::error::{Error, Result};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};

pub const MAGIC: [u8; 2] = *b"TG";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Csv,
    Bin,
}

/// Row-major n×d matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    pub points: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl SampleMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }
}

fn check_shape(points: &[f64], n: usize, d: usize) -> Result<()> {
    if points.len() != n * d {
        return Err(Error::InvalidArgument(format!(
            "{} values do not form a {n}×{d} matrix",
            points.len()
        )));
    }
    Ok(())
}

pub fn write_samples<W: Write>(
    w: W,
    points: &[f64],
    n: usize,
    d: usize,
    format: SampleFormat,
) -> Result<()> {
    check_shape(points, n, d)?;
    let mut w = BufWriter::new(w);
    match format {
        SampleFormat::Csv => {
            let mut line = String::new();
            for row in points.chunks(d.max(1)).take(n) {
                line.clear();
                for (j, v) in row.iter().enumerate() {
                    if j > 0 {
                        line.push(',');
                    }
                    // Shortest representation that parses back to the same bits.
                    line.push_str(&format!("{v:?}"));
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
        }
        SampleFormat::Bin => {
            let d16 = u16::try_from(d)
                .map_err(|_| Error::InvalidArgument(format!("d = {d} does not fit the header")))?;
            let n32 = u32::try_from(n)
                .map_err(|_| Error::InvalidArgument(format!("n = {n} does not fit the header")))?;
            w.write_all(&MAGIC)?;
            w.write_all(&d16.to_le_bytes())?;
            w.write_all(&n32.to_le_bytes())?;
            for v in points {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads either format, telling them apart by the magic bytes.
pub fn read_samples<R: Read>(r: R) -> Result<SampleMatrix> {
    let mut r = BufReader::new(r);
    let head = r.fill_buf()?;
    if head.len() >= 2 && head[..2] == MAGIC {
        read_bin(r)
    } else {
        read_csv(r)
    }
}

fn read_bin<R: Read>(mut r: R) -> Result<SampleMatrix> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("truncated binary header".into()))?;
    let d = u16::from_le_bytes([header[2], header[3]]) as usize;
    let n = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * d * 8 {
        return Err(Error::Format(format!(
            "header announces {n}×{d} values but the body holds {} bytes",
            bytes.len()
        )));
    }
    let points = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(SampleMatrix { points, n, d })
}

fn read_csv<R: BufRead>(r: R) -> Result<SampleMatrix> {
    let mut points = Vec::new();
    let mut d = None;
    let mut n = 0;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = points.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad number {field:?}", i + 1)))?;
            points.push(v);
        }
        let width = points.len() - before;
        match d {
            None => d = Some(width),
            Some(w) if w != width => {
                return Err(Error::Format(format!(
                    "line {} has {width} columns, expected {w}",
                    i + 1
                )))
            }
            _ => {}
        }
        n += 1;
    }
    Ok(SampleMatrix {
        points,
        n,
        d: d.unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Vec<f64> {
        vec![0.1, -2.5e-300, 3.0, f64::MIN_POSITIVE, 1.0 / 3.0, -0.0]
    }

    #[test]
    fn csv_and_bin_agree_bitwise() {
        for fmt in [SampleFormat::Csv, SampleFormat::Bin] {
            let mut buf = Vec::new();
            write_samples(&mut buf, &data(), 2, 3, fmt).unwrap();
            let m = read_samples(&buf[..]).unwrap();
            assert_eq!((m.n, m.d), (2, 3));
            let bits: Vec<u64> = m.points.iter().map(|v| v.to_bits()).collect();
            let want: Vec<u64> = data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, want);
        }
    }

    #[test]
    fn binary_header_layout() {
        let mut buf = Vec::new();
        write_samples(&mut buf, &data(), 2, 3, SampleFormat::Bin).unwrap();
        assert_eq!(&buf[..8], &[b'T', b'G', 3, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 8 + 48);
    }

    #[test]
    fn malformed_inputs() {
        let mut buf = Vec::new();
        write_samples(&mut buf, &data(), 2, 3, SampleFormat::Bin).unwrap();
        buf.pop();
        assert!(matches!(read_samples(&buf[..]), Err(Error::Format(_))));
        assert!(matches!(
            read_samples(&b"1,2\n3\n"[..]),
            Err(Error::Format(_))
        ));
        assert!(matches!(read_samples(&b"1,x\n"[..]), Err(Error::Format(_))));
        assert!(write_samples(Vec::new(), &data(), 4, 3, SampleFormat::Csv).is_err());
    }
}
