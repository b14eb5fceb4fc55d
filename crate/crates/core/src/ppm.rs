//! Plain PPM image I/O (P3 ASCII and P6 binary), maxval 255.
//!
//! Intensities map linearly between the stored 0..=255 bytes and the in-memory
//! [0, 1] range. Only 1- and 3-channel grids are written; single-channel
//! grids are replicated to gray RGB on write.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid2D;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pixel_bytes(img: &Grid2D, row: usize, col: usize) -> [u8; 3] {
    match img.channels() {
        1 => {
            let g = quantize(img.get(row, col, 0));
            [g, g, g]
        }
        _ => [
            quantize(img.get(row, col, 0)),
            quantize(img.get(row, col, 1)),
            quantize(img.get(row, col, 2)),
        ],
    }
}

/// Writes `img` as binary PPM (P6).
pub fn write_ppm(path: &Path, img: &Grid2D) -> Result<()> {
    if img.channels() != 1 && img.channels() != 3 {
        return Err(Error::format("ppm", "only 1 or 3 channels supported"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.cols(), img.rows())?;
    let mut buf = Vec::with_capacity(img.rows() * img.cols() * 3);
    for row in 0..img.rows() {
        for col in 0..img.cols() {
            buf.extend_from_slice(&pixel_bytes(img, row, col));
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes `img` as ASCII PPM (P3).
pub fn write_ppm_ascii(path: &Path, img: &Grid2D) -> Result<()> {
    if img.channels() != 1 && img.channels() != 3 {
        return Err(Error::format("ppm", "only 1 or 3 channels supported"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "P3\n{} {}\n255", img.cols(), img.rows())?;
    for row in 0..img.rows() {
        let mut line = String::new();
        for col in 0..img.cols() {
            let [r, g, b] = pixel_bytes(img, row, col);
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&format!("{r} {g} {b}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads a P3 or P6 PPM into a 3-channel grid with intensities in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Grid2D> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();

    // Header tokens may be separated by whitespace or '#' comments.
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic)?;
    let binary = match &magic {
        b"P6" => true,
        b"P3" => false,
        _ => return Err(Error::format("ppm", "bad magic (want P3 or P6)")),
    };

    while header.len() < 3 {
        let tok = read_token(&mut reader)?;
        let value: usize = tok
            .parse()
            .map_err(|_| Error::format("ppm", format!("bad header token {tok:?}")))?;
        header.push(value);
    }
    let (cols, rows, maxval) = (header[0], header[1], header[2]);
    if maxval != 255 {
        return Err(Error::format("ppm", format!("unsupported maxval {maxval}")));
    }

    let n = rows * cols * 3;
    let raw = if binary {
        let mut bytes = vec![0u8; n];
        reader.read_exact(&mut bytes)?;
        bytes
    } else {
        let mut bytes = Vec::with_capacity(n);
        while bytes.len() < n {
            let tok = read_token(&mut reader)?;
            let value: u16 = tok
                .parse()
                .map_err(|_| Error::format("ppm", format!("bad sample {tok:?}")))?;
            if value > 255 {
                return Err(Error::format("ppm", format!("sample {value} > maxval")));
            }
            bytes.push(value as u8);
        }
        bytes
    };

    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    Grid2D::from_vec(rows, cols, 3, data)
}

/// Reads one whitespace-delimited token, skipping '#' comments. The P6
/// header terminator (single whitespace byte after maxval) is consumed by
/// the final token read.
fn read_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::format("ppm", "unexpected end of file"));
            }
            return Ok(tok);
        }
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match b {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(b as char),
        }
    }
}
