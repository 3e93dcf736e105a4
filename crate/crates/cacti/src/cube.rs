//! Dense space-time containers: datacubes, detector snapshots, and binary masks.
//!
//! Storage is frame-major, then row-major within a frame. That layout is also
//! the rasterization order used by the explicit measurement matrix and the
//! CCV1 file format, so a cube's backing slice can be fed to either directly.

use crate::error::{Error, Result};

/// A rows x cols x frames volume of finite intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Datacube {
    rows: usize,
    cols: usize,
    frames: usize,
    data: Vec<f64>,
}

impl Datacube {
    /// Builds a cube from raw values, validating shape and finiteness.
    pub fn from_vec(rows: usize, cols: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(&[("rows", rows), ("cols", cols), ("frames", frames)])?;
        if data.len() != rows * cols * frames {
            return Err(Error::dims(
                "Datacube::from_vec",
                format!("{} values", rows * cols * frames),
                format!("{}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "data",
                format!("non-finite voxel at linear index {pos}"),
            ));
        }
        Ok(Self {
            rows,
            cols,
            frames,
            data,
        })
    }

    pub fn zeros(rows: usize, cols: usize, frames: usize) -> Result<Self> {
        check_dims(&[("rows", rows), ("cols", cols), ("frames", frames)])?;
        Ok(Self {
            rows,
            cols,
            frames,
            data: vec![0.0; rows * cols * frames],
        })
    }

    pub fn filled(rows: usize, cols: usize, frames: usize, value: f64) -> Result<Self> {
        let mut cube = Self::zeros(rows, cols, frames)?;
        cube.data.fill(value);
        Ok(cube)
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn raw(rows: usize, cols: usize, frames: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols * frames);
        Self {
            rows,
            cols,
            frames,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Pixels per frame.
    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols && k < self.frames);
        k * self.rows * self.cols + i * self.cols + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f64) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.rows * self.cols;
        &self.data[k * n..(k + 1) * n]
    }

    /// Backing slice in rasterization order (frame-major, row-major).
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Reinterprets a single-frame cube as a snapshot.
    pub fn into_snapshot(self) -> Result<Snapshot> {
        if self.frames != 1 {
            return Err(Error::dims(
                "Datacube::into_snapshot",
                "frames = 1",
                format!("frames = {}", self.frames),
            ));
        }
        Ok(Snapshot {
            rows: self.rows,
            cols: self.cols,
            data: self.data,
        })
    }

    /// Keeps only the listed frames, in the given order.
    pub fn select_frames(&self, frames: &[usize]) -> Result<Datacube> {
        if frames.is_empty() {
            return Err(Error::invalid("frames", "empty frame selection"));
        }
        let n = self.pixels();
        let mut data = Vec::with_capacity(n * frames.len());
        for &k in frames {
            if k >= self.frames {
                return Err(Error::invalid(
                    "frames",
                    format!("frame {k} out of range (cube has {})", self.frames),
                ));
            }
            data.extend_from_slice(self.frame(k));
        }
        Ok(Datacube::raw(self.rows, self.cols, frames.len(), data))
    }
}

/// A single detector integration: one rows x cols image.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Snapshot {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(&[("rows", rows), ("cols", cols)])?;
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Snapshot::from_vec",
                format!("{} values", rows * cols),
                format!("{}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "data",
                format!("non-finite pixel at linear index {pos}"),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        check_dims(&[("rows", rows), ("cols", cols)])?;
        Ok(Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        })
    }

    pub(crate) fn raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.rows && j < self.cols);
        i * self.cols + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.index(i, j)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let idx = self.index(i, j);
        self.data[idx] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_cube(self) -> Datacube {
        Datacube::raw(self.rows, self.cols, 1, self.data)
    }
}

/// A binary transmission pattern together with its generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
    seed: u64,
    fill: f64,
}

impl Mask {
    pub(crate) fn from_bits(
        rows: usize,
        cols: usize,
        bits: Vec<u8>,
        seed: u64,
        fill: f64,
    ) -> Result<Self> {
        check_dims(&[("rows", rows), ("cols", cols)])?;
        if bits.len() != rows * cols {
            return Err(Error::dims(
                "Mask::from_bits",
                format!("{} entries", rows * cols),
                format!("{}", bits.len()),
            ));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("bits", "mask entries must be 0 or 1"));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            seed,
            fill,
        })
    }

    /// Rebuilds a mask from a single-frame cube of exact 0/1 values, keeping
    /// the caller's record of the generation parameters.
    pub fn from_cube(cube: &Datacube, seed: u64, fill: f64) -> Result<Self> {
        if cube.frames() != 1 {
            return Err(Error::dims(
                "Mask::from_cube",
                "frames = 1",
                format!("frames = {}", cube.frames()),
            ));
        }
        let bits: Result<Vec<u8>> = cube
            .data()
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(0u8)
                } else if v == 1.0 {
                    Ok(1u8)
                } else {
                    Err(Error::invalid(
                        "cube",
                        format!("value {v} is not a binary mask entry"),
                    ))
                }
            })
            .collect();
        Mask::from_bits(cube.rows(), cube.cols(), bits?, seed, fill)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fill(&self) -> f64 {
        self.fill
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        debug_assert!(i < self.rows && j < self.cols);
        self.bits[i * self.cols + j]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Replicates every element into a `factor` x `factor` block of detector
    /// pixels. Models mask features larger than one pixel; `factor = 1` is a
    /// copy.
    pub fn upsample(&self, factor: usize) -> Result<Mask> {
        if factor == 0 {
            return Err(Error::invalid("factor", "upsampling factor must be >= 1"));
        }
        let rows = self.rows * factor;
        let cols = self.cols * factor;
        let mut bits = vec![0u8; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                bits[i * cols + j] = self.get(i / factor, j / factor);
            }
        }
        Mask::from_bits(rows, cols, bits, self.seed, self.fill)
    }

    /// The mask as a single-frame cube of 0/1 intensities.
    pub fn to_cube(&self) -> Datacube {
        let data = self.bits.iter().map(|&b| b as f64).collect();
        Datacube::raw(self.rows, self.cols, 1, data)
    }
}

fn check_dims(dims: &[(&'static str, usize)]) -> Result<()> {
    for &(name, value) in dims {
        if value == 0 {
            return Err(Error::InvalidParameter {
                name: match name {
                    "rows" => "rows",
                    "cols" => "cols",
                    _ => "frames",
                },
                message: "must be >= 1".to_string(),
            });
        }
    }
    Ok(())
}
