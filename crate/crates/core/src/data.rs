//! Dataset ingestion (IDX, NPZ), class filtering, normalization and PNG grids.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::ZlibEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of every image the engine handles.
pub const IMAGE_SIDE: usize = 28;

/// Pixel gap between tiles in a PNG grid.
pub const GUTTER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Integers 0..=255.
    RawU8,
    /// `[0, 1]`.
    Unit,
    /// `[−1, 1]`.
    Signed,
}

/// `N×C×H×W` pixels with one integer label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub data: Tensor,
    pub labels: Vec<i64>,
    pub normalization: Normalization,
}

impl ImageBatch {
    pub fn new(data: Tensor, labels: Vec<i64>, normalization: Normalization) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 {
            return Err(Error::contract(format!(
                "image batch must be N×C×H×W, got {s:?}"
            )));
        }
        if labels.len() != s[0] {
            return Err(Error::contract(format!(
                "{} labels for {} images",
                labels.len(),
                s[0]
            )));
        }
        if !matches!(s[1], 1 | 3) {
            return Err(Error::contract(format!(
                "images must have 1 or 3 channels, got {}",
                s[1]
            )));
        }
        let (lo, hi) = match normalization {
            Normalization::RawU8 => (0.0, 255.0),
            Normalization::Unit => (0.0, 1.0),
            Normalization::Signed => (-1.0, 1.0),
        };
        if let Some(v) = data.data().iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::contract(format!(
                "pixel value {v} outside [{lo}, {hi}] for {normalization:?} batch"
            )));
        }
        Ok(Self {
            data,
            labels,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.data.data()[i * l..(i + 1) * l]
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let l = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * l);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::contract(format!(
                    "image index {i} out of range ({})",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok(Self {
            data: Tensor::new(&[indices.len(), c, h, w], data)?,
            labels,
            normalization: self.normalization,
        })
    }

    /// Copy mapped to `[0, 1]`.
    pub fn to_unit(&self) -> Self {
        let data = match self.normalization {
            Normalization::Unit => self.data.clone(),
            Normalization::RawU8 => self.data.map(|v| v / 255.0),
            Normalization::Signed => self.data.map(|v| (v + 1.0) / 2.0),
        };
        Self {
            data,
            labels: self.labels.clone(),
            normalization: Normalization::Unit,
        }
    }

    /// 8-bit pixels in `N×C×H×W` order, rounding from whichever range the batch is in.
    pub fn to_u8(&self) -> Vec<u8> {
        self.to_unit()
            .data
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Rescale raw or unit pixels. Each channel gets the same affine map.
pub fn normalize(batch: &ImageBatch, target: Normalization) -> Result<ImageBatch> {
    use Normalization::*;
    let data = match (batch.normalization, target) {
        (RawU8, Unit) => batch.data.map(|v| v / 255.0),
        (RawU8, Signed) => batch.data.map(|v| v / 127.5 - 1.0),
        (Unit, Signed) => batch.data.map(|v| 2.0 * v - 1.0),
        (from, to) => {
            return Err(Error::contract(format!(
                "cannot normalize a {from:?} batch to {to:?}"
            )));
        }
    };
    ImageBatch::new(data, batch.labels.clone(), target)
}

/// Inverse of [`normalize`]: back to integer pixel values.
pub fn denormalize(batch: &ImageBatch) -> Result<ImageBatch> {
    let data = Tensor::new(
        batch.data.shape(),
        batch.to_u8().into_iter().map(f64::from).collect(),
    )?;
    ImageBatch::new(data, batch.labels.clone(), Normalization::RawU8)
}

/// Images whose label equals `label`, in their original order.
pub fn filter_class(batch: &ImageBatch, label: i64) -> ImageBatch {
    let keep: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.labels[i] == label)
        .collect();
    batch
        .select(&keep)
        .expect("indices come from the batch itself")
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| {
                Error::format(
                    path.display().to_string(),
                    None,
                    format!("bad gzip stream: {e}"),
                )
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, context: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(context, Some(offset as u64), "file ends inside the header"))
}

/// Parse an IDX container with magic `0x0000_08{rank}`: returns the dimensions and the payload.
fn parse_idx<'a>(bytes: &'a [u8], rank: usize, context: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let magic = be_u32(bytes, 0, context)?;
    let expect = 0x0800 | rank as u32;
    if magic != expect {
        return Err(Error::format(
            context,
            Some(0),
            format!("magic {magic:#010x}, expected {expect:#010x}"),
        ));
    }
    let dims = (0..rank)
        .map(|k| be_u32(bytes, 4 + 4 * k, context).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != len {
        let at = (header + payload.len().min(len)) as u64;
        return Err(Error::format(
            context,
            Some(at),
            format!("payload has {} bytes, header declares {len}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

/// Load an IDX image file (`0x00000803`) and its label file (`0x00000801`). Gzipped files are
/// decompressed transparently.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<ImageBatch> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (ictx, lctx) = (ip.display().to_string(), lp.display().to_string());
    let ibytes = read_maybe_gz(ip)?;
    let lbytes = read_maybe_gz(lp)?;
    let (idims, pixels) = parse_idx(&ibytes, 3, &ictx)?;
    if idims[1] != IMAGE_SIDE || idims[2] != IMAGE_SIDE {
        return Err(Error::format(
            ictx,
            Some(8),
            format!(
                "images are {}×{}, expected {IMAGE_SIDE}×{IMAGE_SIDE}",
                idims[1], idims[2]
            ),
        ));
    }
    let (ldims, labels) = parse_idx(&lbytes, 1, &lctx)?;
    if ldims[0] != idims[0] {
        return Err(Error::format(
            lctx,
            Some(4),
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let data = Tensor::new(
        &[idims[0], 1, IMAGE_SIDE, IMAGE_SIDE],
        pixels.iter().map(|&p| f64::from(p)).collect(),
    )?;
    ImageBatch::new(
        data,
        labels.iter().map(|&l| i64::from(l)).collect(),
        Normalization::RawU8,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split {other:?}"))),
        }
    }
}

struct Npy<'a> {
    shape: Vec<usize>,
    data: &'a [u8],
}

/// Value of `key` in a NumPy header dict, as raw text.
fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else {
        rest.find([',', '}']).unwrap_or(rest.len())
    };
    Some(rest[..end].trim())
}

fn parse_npy<'a>(bytes: &'a [u8], entry: &str) -> Result<Npy<'a>> {
    let err = |offset: u64, reason: String| Error::format(entry, Some(offset), reason);
    if !bytes.starts_with(b"\x93NUMPY") {
        return Err(err(0, "missing \\x93NUMPY magic".into()));
    }
    if bytes.len() < 10 {
        return Err(err(
            bytes.len() as u64,
            "file ends inside the preamble".into(),
        ));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(err(
            6,
            format!("unsupported NPY version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = bytes
        .get(10..10 + header_len)
        .ok_or_else(|| err(bytes.len() as u64, "file ends inside the header".into()))?;
    let header = std::str::from_utf8(header).map_err(|_| err(10, "header is not ASCII".into()))?;

    let descr =
        header_field(header, "descr").ok_or_else(|| err(10, "header lacks 'descr'".into()))?;
    if !matches!(descr, "'|u1'" | "'<u1'" | "'>u1'" | "'u1'") {
        return Err(err(
            10,
            format!("unsupported dtype {descr}, only u1 is accepted"),
        ));
    }
    match header_field(header, "fortran_order") {
        Some("False") => {}
        Some("True") => return Err(err(10, "Fortran-ordered arrays are not supported".into())),
        _ => return Err(err(10, "header lacks a valid 'fortran_order'".into())),
    }
    let shape_txt =
        header_field(header, "shape").ok_or_else(|| err(10, "header lacks 'shape'".into()))?;
    let shape = shape_txt
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| err(10, format!("malformed shape {shape_txt}")))?;

    let data = &bytes[10 + header_len..];
    let expect: usize = shape.iter().product();
    if data.len() != expect {
        return Err(err(
            (10 + header_len + data.len().min(expect)) as u64,
            format!(
                "payload has {} bytes, shape {shape:?} needs {expect}",
                data.len()
            ),
        ));
    }
    Ok(Npy { shape, data })
}

/// Load `{split}_images.npy` / `{split}_labels.npy` from a MedMNIST-style NPZ archive.
/// RGB images stored `N×H×W×3` are reordered to `N×3×H×W`.
pub fn load_npz(path: impl AsRef<Path>, split: Split) -> Result<ImageBatch> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut archive = zip::ZipArchive::new(file).map_err(|e| {
        Error::format(
            path.display().to_string(),
            None,
            format!("not a ZIP archive: {e}"),
        )
    })?;
    let mut read_entry = |name: &str| -> Result<Vec<u8>> {
        let mut entry = archive
            .by_name(name)
            .map_err(|e| Error::format(name, None, format!("cannot open archive entry: {e}")))?;
        let mut buf = Vec::new();
        entry
            .read_to_end(&mut buf)
            .map_err(|e| Error::format(name, None, format!("cannot read archive entry: {e}")))?;
        Ok(buf)
    };
    let images_name = format!("{}_images.npy", split.prefix());
    let labels_name = format!("{}_labels.npy", split.prefix());
    let ibytes = read_entry(&images_name)?;
    let lbytes = read_entry(&labels_name)?;
    let images = parse_npy(&ibytes, &images_name)?;
    let labels = parse_npy(&lbytes, &labels_name)?;

    let (n, channels) = match images.shape[..] {
        [n, IMAGE_SIDE, IMAGE_SIDE] => (n, 1),
        [n, IMAGE_SIDE, IMAGE_SIDE, 3] => (n, 3),
        _ => {
            return Err(Error::format(
                images_name,
                None,
                format!(
                    "shape {:?} is neither (N,28,28) nor (N,28,28,3)",
                    images.shape
                ),
            ));
        }
    };
    let label_count = match labels.shape[..] {
        [m] | [m, 1] => m,
        _ => {
            return Err(Error::format(
                labels_name,
                None,
                format!("labels must be (N,) or (N,1), got {:?}", labels.shape),
            ));
        }
    };
    if label_count != n {
        return Err(Error::format(
            labels_name,
            None,
            format!("{label_count} labels for {n} images"),
        ));
    }

    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = vec![0.0; n * channels * plane];
    for s in 0..n {
        for p in 0..plane {
            for c in 0..channels {
                data[(s * channels + c) * plane + p] =
                    f64::from(images.data[(s * plane + p) * channels + c]);
            }
        }
    }
    ImageBatch::new(
        Tensor::new(&[n, channels, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels.data.iter().map(|&l| i64::from(l)).collect(),
        Normalization::RawU8,
    )
}

fn png_chunk(out: &mut Vec<u8>, kind: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    let start = out.len();
    out.extend_from_slice(kind);
    out.extend_from_slice(body);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

/// Encode 8-bit pixels (grayscale or interleaved RGB) as a non-interlaced PNG.
fn encode_png(width: usize, height: usize, channels: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = b"\x89PNG\r\n\x1a\n".to_vec();
    let mut ihdr = Vec::with_capacity(13);
    ihdr.extend_from_slice(&(width as u32).to_be_bytes());
    ihdr.extend_from_slice(&(height as u32).to_be_bytes());
    let color_type = if channels == 3 { 2 } else { 0 };
    ihdr.extend_from_slice(&[8, color_type, 0, 0, 0]);
    png_chunk(&mut out, b"IHDR", &ihdr);

    let stride = width * channels;
    let mut z = ZlibEncoder::new(Vec::new(), Compression::default());
    for row in pixels.chunks(stride) {
        z.write_all(&[0])
            .and_then(|_| z.write_all(row))
            .expect("in-memory write");
    }
    png_chunk(&mut out, b"IDAT", &z.finish().expect("in-memory write"));
    png_chunk(&mut out, b"IEND", &[]);
    out
}

/// Canvas size `(width, height)` of a grid of `n` tiles with at most `cols` columns.
pub fn grid_dims(n: usize, cols: usize, tile_h: usize, tile_w: usize) -> (usize, usize) {
    let cols = cols.min(n).max(1);
    let rows = n.div_ceil(cols).max(1);
    (
        cols * tile_w + (cols - 1) * GUTTER,
        rows * tile_h + (rows - 1) * GUTTER,
    )
}

/// Tile the batch row-major into a PNG with `cols` columns and black gutters.
pub fn write_png_grid(batch: &ImageBatch, cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if batch.is_empty() || cols == 0 {
        return Err(Error::contract(
            "PNG grid needs at least one image and one column",
        ));
    }
    if batch.normalization == Normalization::RawU8 {
        return Err(Error::contract(
            "PNG grids are written from unit or signed batches",
        ));
    }
    let [c, h, w] = batch.image_shape();
    let cols = cols.min(batch.len());
    let (width, height) = grid_dims(batch.len(), cols, h, w);
    let mut canvas = vec![0u8; width * height * c];
    let px = batch.to_u8();
    for s in 0..batch.len() {
        let (gy, gx) = (s / cols, s % cols);
        let (oy, ox) = (gy * (h + GUTTER), gx * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    canvas[((oy + y) * width + ox + x) * c + ch] =
                        px[((s * c + ch) * h + y) * w + x];
                }
            }
        }
    }
    let bytes = encode_png(width, height, c, &canvas);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
