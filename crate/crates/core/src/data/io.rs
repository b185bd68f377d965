//! Binary tensor files (`WDTN`), parameter checkpoints (`WDUR`) and 8-bit PNG.
//!
//! All integers and payload values are little-endian; payloads are `f32`.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::{ParamStore, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"WDTN";
pub const TENSOR_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WDUR";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len(),
                detail: format!(
                    "truncated while reading {what}: expected at least {end} bytes, got {}",
                    self.bytes.len()
                ),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::Format {
                offset: 4,
                detail: format!("unsupported version {v}, expected {version}"),
            });
        }
        Ok(())
    }

    /// `ndim u8`, dims, then the f32 payload.
    fn shaped(&mut self, what: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let ndim = self.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: self.pos,
                detail: format!("dims {dims:?} overflow"),
            })?;
        let need = self.pos + n;
        if need > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len(),
                detail: format!(
                    "truncated {what} payload: expected {need} bytes, got {}",
                    self.bytes.len()
                ),
            });
        }
        let data = self
            .take(n, what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok((dims, data))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn put_shaped(out: &mut Vec<u8>, dims: &[usize], data: &[f32]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Image as `[H, W, C]`.
pub fn encode_tensor(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(21 + 4 * img.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    put_shaped(&mut out, &img.shape(), img.data());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ImageTensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.header(TENSOR_MAGIC, TENSOR_VERSION)?;
    let (dims, data) = cur.shaped("tensor")?;
    cur.finish()?;
    match dims[..] {
        [h, w, c] => ImageTensor::new(h, w, c, data),
        [h, w] => ImageTensor::new(h, w, 1, data),
        _ => Err(Error::Format {
            offset: 8,
            detail: format!("expected a 2-d or 3-d image tensor, got dims {dims:?}"),
        }),
    }
}

pub fn save_tensor(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(img)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn encode_checkpoint(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_shaped(&mut out, &t.shape, &t.data);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut cur = Cursor { bytes, pos: 0 };
    cur.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = cur.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = cur.pos;
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?).map_err(|_| Error::Format {
            offset: at + 2,
            detail: "tensor name is not UTF-8".into(),
        })?;
        let (dims, data) = cur.shaped(name)?;
        store.insert(name, Tensor::new(dims, data)).map_err(|_| Error::Format {
            offset: at,
            detail: format!("duplicate tensor {name:?}"),
        })?;
    }
    cur.finish()?;
    Ok(store)
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copy `loaded` into `target`, which fixes the expected names and shapes.
/// Unknown, missing and mis-shaped tensors are all reported together.
pub fn assign_params(target: &mut ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<()> {
    let mut problems = Vec::new();
    let unknown: Vec<_> = loaded.names().iter().filter(|n| !target.contains(n)).cloned().collect();
    if !unknown.is_empty() {
        problems.push(format!("unknown tensors: {}", unknown.join(", ")));
    }
    let missing: Vec<_> = target.names().iter().filter(|n| !loaded.contains(n)).cloned().collect();
    if !missing.is_empty() {
        problems.push(format!("missing tensors: {}", missing.join(", ")));
    }
    for (name, t) in loaded.iter() {
        if let Ok(want) = target.get(name) {
            if want.shape != t.shape {
                problems.push(format!("{name}: expected shape {:?}, got {:?}", want.shape, t.shape));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    for (name, t) in loaded.iter() {
        *target.get_mut(name)? = t.clone();
    }
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Write a 1-, 3- or 4-channel image as 8-bit PNG.
pub fn save_png(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let colour = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Parameter(format!("cannot write {c}-channel image as PNG"))),
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Read an 8-bit PNG into `[0, 1]`; alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Format {
        offset: 0,
        detail: format!("{}: {e}", path.display()),
    };
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(png_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (stored, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(Error::Format {
                offset: 0,
                detail: "indexed PNG was not expanded".into(),
            })
        }
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = Vec::with_capacity(h * w * keep);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * stored].chunks(stored) {
            data.extend(px[..keep].iter().map(|&b| b as f32 / 255.0));
        }
    }
    ImageTensor::new(h, w, keep, data)
}
