//! Grayscale image files: binary PGM (P5) and 8-bit grayscale PNG.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::Grid;

fn parse_pgm(bytes: &[u8], origin: &Path) -> Result<Grid<u8>> {
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", origin.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (cols, rows, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + rows * cols).ok_or_else(|| bad("truncated raster"))?;
    Grid::from_vec(rows, cols, raster.to_vec())
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn encode_pgm(img: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn write_pgm(path: &Path, img: &Grid<u8>) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_png_gray(path: &Path) -> Result<Grid<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let bad = |msg: String| Error::Format(format!("{}: {msg}", path.display()));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "only 8-bit grayscale PNG is supported, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    buf.truncate(info.buffer_size());
    Grid::from_vec(info.height as usize, info.width as usize, buf)
}

/// Read a PGM or PNG by extension.
pub fn read_gray_image(path: &Path) -> Result<Grid<u8>> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png_gray(path),
        _ => Err(Error::Format(format!(
            "{}: unsupported image extension",
            path.display()
        ))),
    }
}

/// Masks are stored as PGM with values exactly 0 or 255 (255 = lung).
pub fn read_mask_pgm(path: &Path) -> Result<Grid<bool>> {
    let g = read_pgm(path)?;
    if let Some(v) = g.data().iter().find(|&&v| v != 0 && v != 255) {
        return Err(Error::Format(format!(
            "{}: mask value {v} is neither 0 nor 255",
            path.display()
        )));
    }
    Ok(g.map(|v| v == 255))
}

pub fn write_mask_pgm(path: &Path, mask: &Grid<bool>) -> Result<()> {
    write_pgm(path, &mask.map(|b| if b { 255 } else { 0 }))
}
