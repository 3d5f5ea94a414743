//! Dense real-valued planes and channel stacks in row-major, channel-first
//! layout. Everything numeric in the crate runs on these two types.

use crate::error::{Error, Result};

/// A single `height × width` plane of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "plane {}x{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Plane { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub(crate) fn check_same_shape(&self, other: &Plane) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// A `channels × height × width` stack of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::InvalidInput(format!(
                "tensor {}x{}x{} needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks equally sized planes along the channel axis.
    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero planes".into()))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            first.check_same_shape(p)?;
            data.extend_from_slice(&p.data);
        }
        Tensor3::from_vec(planes.len(), h, w, data)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn plane(&self, c: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}
