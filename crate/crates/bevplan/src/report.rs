//! Report writers: CSV tables with a header row and binary PGM (P5)
//! grayscale heatmaps.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// Writes a CSV file with one header row. Fields are written verbatim;
/// callers must not pass fields containing commas or newlines.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        assert_eq!(row.len(), header.len(), "row width mismatch");
        writeln!(f, "{}", row.join(","))?;
    }
    f.flush()
}

/// Writes a grayscale heatmap as binary PGM (P5), scaling the value range
/// to 0..=255. A constant image maps to mid-gray.
pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[f64]) -> io::Result<()> {
    assert_eq!(data.len(), h * w, "heatmap size mismatch");
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let pixels: Vec<u8> = data
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                128
            } else {
                ((v - lo) / span * 255.0).round() as u8
            }
        })
        .collect();
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&pixels)?;
    f.flush()
}
