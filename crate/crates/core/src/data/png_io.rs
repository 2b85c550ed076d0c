//! Single-channel grayscale PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Pixel values of a grayscale PNG as stored in the file.
#[derive(Debug, Clone, PartialEq)]
pub enum Gray {
    Eight(Raster<u8>),
    Sixteen(Raster<u16>),
}

impl Gray {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Gray::Eight(r) => r.dims(),
            Gray::Sixteen(r) => r.dims(),
        }
    }

    /// Values widened to 16 bits; 8-bit data is scaled by 257 so 255 maps
    /// to 65535.
    pub fn into_u16(self) -> Raster<u16> {
        match self {
            Gray::Eight(r) => r.map(|v| v as u16 * 257),
            Gray::Sixteen(r) => r,
        }
    }
}

pub fn read_gray(path: &Path) -> Result<Gray> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::data(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::data(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::data(path, e.to_string()))?;
    if info.color_type != ColorType::Grayscale {
        return Err(Error::data(path, format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    match info.bit_depth {
        BitDepth::Eight => {
            let data = buf[..w * h].to_vec();
            Ok(Gray::Eight(Raster::from_vec(h, w, data)?))
        }
        BitDepth::Sixteen => {
            let data = buf[..2 * w * h].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
            Ok(Gray::Sixteen(Raster::from_vec(h, w, data)?))
        }
        other => Err(Error::data(path, format!("unsupported bit depth {other:?}"))),
    }
}

fn write(path: &Path, cols: usize, rows: usize, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| Error::data(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::data(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::data(path, e.to_string()))
}

pub fn write_u8(path: &Path, r: &Raster<u8>) -> Result<()> {
    write(path, r.cols(), r.rows(), BitDepth::Eight, r.data())
}

pub fn write_u16(path: &Path, r: &Raster<u16>) -> Result<()> {
    let bytes: Vec<u8> = r.data().iter().flat_map(|v| v.to_be_bytes()).collect();
    write(path, r.cols(), r.rows(), BitDepth::Sixteen, &bytes)
}
