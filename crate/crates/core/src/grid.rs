//! Image and mask grids, and the labeled `Sample` that flows between stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `height × width` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Grayscale intensities in `[0, 255]`.
pub type Image = Grid<f32>;
/// Binary mask, values exactly 0 or 1.
pub type Mask = Grid<u8>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!("{height}x{width}"), data.len()));
        }
        Ok(Grid { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl Mask {
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.coords_where(|v| v != 0)
    }

    pub fn background(&self) -> Vec<(usize, usize)> {
        self.coords_where(|v| v == 0)
    }

    fn coords_where(&self, pred: impl Fn(u8) -> bool) -> Vec<(usize, usize)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| pred(v))
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    /// Number of 8-connected foreground components.
    pub fn component_count(&self) -> usize {
        label_components(self).1
    }
}

/// 8-connected component labelling by flood fill. Returns per-pixel labels
/// (0 = background, components numbered from 1 in row-major discovery order)
/// and the component count.
pub fn label_components(mask: &Mask) -> (Vec<u32>, usize) {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.data[j] != 0 && labels[j] == 0 {
                        labels[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, next as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Synthesized,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Option<Mask>,
    pub domain: DomainTag,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, mask: Option<Mask>, domain: DomainTag) -> Result<Self> {
        if let Some(m) = &mask {
            image.check_dims(m)?;
            if !m.is_binary() {
                return Err(Error::param("mask", "values must be 0 or 1"));
            }
        }
        Ok(Sample {
            id: id.into(),
            image,
            mask,
            domain,
        })
    }

    pub fn require_mask(&self) -> Result<&Mask> {
        self.mask.as_ref().ok_or_else(|| Error::MissingMask(self.id.clone()))
    }
}
