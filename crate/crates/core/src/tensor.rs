//! Dense row-major `f64` arrays and spatial patch extraction.
//!
//! Images are stored as `[H, W, D]` with depth fastest. A patch at grid
//! position `(i, j)` is the row-major flattening (height, width, depth) of
//! the window `input[i*s .. i*s+h, j*s .. j*s+w, ..]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SimNetError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(SimNetError::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SimNetError::Shape(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(SimNetError::Index(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0;
        for (axis, (&i, &extent)) in index.iter().zip(&self.shape).enumerate() {
            if i >= extent {
                return Err(SimNetError::Index(format!(
                    "index {i} out of range for axis {axis} with extent {extent}"
                )));
            }
            flat = flat * extent + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Contiguous sub-array along the leading axis.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(SimNetError::Shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Writes `shape: d1 d2 ... dk\n` followed by little-endian `f64` data.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let dims: Vec<String> = self.shape.iter().map(usize::to_string).collect();
        writeln!(w, "shape: {}", dims.join(" "))?;
        write_f64_le(&mut w, &self.data)
    }

    pub fn read_from(r: impl Read) -> std::io::Result<Tensor> {
        let mut r = BufReader::new(r);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let invalid = |msg: String| std::io::Error::new(std::io::ErrorKind::InvalidData, msg);
        let dims = header
            .trim_end_matches('\n')
            .strip_prefix("shape:")
            .ok_or_else(|| invalid(format!("missing `shape:` header, got {header:?}")))?;
        let shape = dims
            .split_whitespace()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| invalid(format!("bad extent in header: {e}")))?;
        let len: usize = shape.iter().product();
        let data = read_f64_le(&mut r, len)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(invalid("trailing bytes after tensor data".into()));
        }
        Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| SimNetError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| SimNetError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| SimNetError::io(path, e))?;
        Tensor::read_from(file).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData | std::io::ErrorKind::UnexpectedEof => {
                SimNetError::format(path, e.to_string())
            }
            _ => SimNetError::io(path, e),
        })
    }
}

pub(crate) fn write_f64_le(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

pub(crate) fn read_f64_le(r: &mut impl Read, len: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Geometry of a patch grid over an `[H, W, D]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub stride: usize,
}

impl PatchGeometry {
    pub fn new(
        input: [usize; 3],
        patch_h: usize,
        patch_w: usize,
        stride: usize,
    ) -> Result<Self> {
        let [height, width, depth] = input;
        if input.contains(&0) || patch_h == 0 || patch_w == 0 {
            return Err(SimNetError::Shape(format!(
                "extents must be positive: input {input:?}, patch {patch_h}x{patch_w}"
            )));
        }
        if patch_h > height || patch_w > width {
            return Err(SimNetError::Shape(format!(
                "patch {patch_h}x{patch_w} does not fit input {height}x{width}"
            )));
        }
        if stride == 0 {
            return Err(SimNetError::Argument("stride must be at least 1".into()));
        }
        Ok(PatchGeometry {
            height,
            width,
            depth,
            patch_h,
            patch_w,
            stride,
        })
    }

    pub fn grid_h(&self) -> usize {
        (self.height - self.patch_h) / self.stride + 1
    }

    pub fn grid_w(&self) -> usize {
        (self.width - self.patch_w) / self.stride + 1
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * self.depth
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.depth]
    }

    /// Copies patch `(i, j)` of a flat `[H, W, D]` image into `out`.
    pub fn copy_patch(&self, image: &[f64], i: usize, j: usize, out: &mut [f64]) {
        let row_len = self.patch_w * self.depth;
        let (r0, c0) = (i * self.stride, j * self.stride);
        for dy in 0..self.patch_h {
            let start = ((r0 + dy) * self.width + c0) * self.depth;
            out[dy * row_len..(dy + 1) * row_len].copy_from_slice(&image[start..start + row_len]);
        }
    }

    /// Adds a patch-shaped gradient back into the flat image gradient.
    pub fn accumulate_patch(&self, grad: &[f64], i: usize, j: usize, image_grad: &mut [f64]) {
        let row_len = self.patch_w * self.depth;
        let (r0, c0) = (i * self.stride, j * self.stride);
        for dy in 0..self.patch_h {
            let start = ((r0 + dy) * self.width + c0) * self.depth;
            for (g, &p) in image_grad[start..start + row_len]
                .iter_mut()
                .zip(&grad[dy * row_len..(dy + 1) * row_len])
            {
                *g += p;
            }
        }
    }
}

/// All patches of one input, stored as `[P_h, P_w, h*w*D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patches: Tensor,
    pub geometry: PatchGeometry,
}

impl PatchGrid {
    pub fn grid_h(&self) -> usize {
        self.geometry.grid_h()
    }

    pub fn grid_w(&self) -> usize {
        self.geometry.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.geometry.patch_dim()
    }

    pub fn num_patches(&self) -> usize {
        self.geometry.num_patches()
    }

    /// Patch by linear index `i * P_w + j`.
    pub fn patch(&self, index: usize) -> &[f64] {
        let d = self.patch_dim();
        &self.patches.data()[index * d..(index + 1) * d]
    }

    pub fn patch_at(&self, i: usize, j: usize) -> &[f64] {
        self.patch(i * self.grid_w() + j)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.patches.data().chunks_exact(self.patch_dim())
    }

    /// Builds a grid directly from already-extracted patch rows.
    pub fn from_patches(patches: Tensor, geometry: PatchGeometry) -> Result<Self> {
        let expected = [geometry.grid_h(), geometry.grid_w(), geometry.patch_dim()];
        if patches.shape() != expected {
            return Err(SimNetError::Shape(format!(
                "patch tensor {:?} does not match geometry grid {expected:?}",
                patches.shape()
            )));
        }
        Ok(PatchGrid { patches, geometry })
    }
}

pub fn extract_patches(input: &Tensor, h: usize, w: usize, stride: usize) -> Result<PatchGrid> {
    let shape = input.shape();
    if shape.len() != 3 {
        return Err(SimNetError::Shape(format!(
            "expected an [H, W, D] input, got shape {shape:?}"
        )));
    }
    let geometry = PatchGeometry::new([shape[0], shape[1], shape[2]], h, w, stride)?;
    extract_with_geometry(input.data(), &geometry)
}

/// Extraction for a flat image whose geometry is already validated.
pub fn extract_with_geometry(image: &[f64], geometry: &PatchGeometry) -> Result<PatchGrid> {
    let expected: usize = geometry.input_shape().iter().product();
    if image.len() != expected {
        return Err(SimNetError::Shape(format!(
            "image has {} values but geometry {:?} needs {expected}",
            image.len(),
            geometry.input_shape()
        )));
    }
    let (gh, gw, d) = (geometry.grid_h(), geometry.grid_w(), geometry.patch_dim());
    let mut data = vec![0.0; gh * gw * d];
    for i in 0..gh {
        for j in 0..gw {
            let at = (i * gw + j) * d;
            geometry.copy_patch(image, i, j, &mut data[at..at + d]);
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![gh, gw, d], data)?,
        geometry: *geometry,
    })
}
