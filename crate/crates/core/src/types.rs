//! Image, mask and parsing containers shared by every stage.

use deocc_tensor::Tensor;

use crate::error::{Error, Result};

/// Three-channel image with values in `[0, 1]`, stored `C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "image {height}×{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!("image value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    let v = f(c, y, x);
                    data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// `1×3×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 3, self.height, self.width], self.data.clone())
    }

    /// Reads sample `n` of an `N×3×H×W` tensor, clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let plane = &t.data()[n * 3 * h * w..(n + 1) * 3 * h * w];
        Ok(Self {
            height: h,
            width: w,
            data: plane
                .iter()
                .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
                .collect(),
        })
    }

    /// Quantises to 8 bits per channel, as stored on disk.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
    }
}

/// Single-channel mask whose values are exactly 0 or 1.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryMask({}×{}, area {})", self.height, self.width, self.area())
    }
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(Error::Validation(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "mask {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &BinaryMask) -> Result<Self> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<Self> {
        self.zip(other, |a, b| a | b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn and_not(&self, other: &BinaryMask) -> Result<Self> {
        self.zip(other, |a, b| a & (1 - b))
    }

    pub fn not(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Whether every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count()
    }

    /// `1×1×H×W` tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }
}

/// Per-pixel body-part labels, exposed as a one-hot `P×H×W` encoding.
///
/// Label 0 is background. Storing labels rather than channels keeps the
/// one-hot invariant true by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsingLogits {
    part_count: usize,
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ParsingLogits {
    pub fn new(part_count: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if part_count < 2 || part_count > 256 {
            return Err(Error::Validation(format!("part count {part_count} outside 2..=256")));
        }
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "parsing {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l as usize >= part_count) {
            return Err(Error::Validation(format!("label {l} ≥ part count {part_count}")));
        }
        Ok(Self {
            part_count,
            height,
            width,
            labels,
        })
    }

    pub fn background(part_count: usize, height: usize, width: usize) -> Self {
        Self {
            part_count,
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn part_count(&self) -> usize {
        self.part_count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// The foreground (non-background) pixels.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.labels.iter().map(|&l| (l > 0) as u8).collect(),
        }
    }

    /// Relabels pixels outside `mask` as background.
    pub fn restrict_to(&self, mask: &BinaryMask) -> Result<Self> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::Shape("parsing and mask differ in size".into()));
        }
        Ok(Self {
            labels: self
                .labels
                .iter()
                .zip(mask.data())
                .map(|(&l, &m)| if m == 1 { l } else { 0 })
                .collect(),
            ..self.clone()
        })
    }

    /// `1×P×H×W` one-hot tensor.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; self.part_count * hw];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * hw + i] = 1.0;
        }
        Tensor::new([1, self.part_count, self.height, self.width], data)
    }

    /// Per-pixel argmax over channels of sample `n` of an `N×P×H×W` score tensor.
    pub fn from_scores(t: &Tensor, n: usize) -> Result<Self> {
        let (_, p, h, w) = t.dims4();
        let hw = h * w;
        let base = n * p * hw;
        let labels = (0..hw)
            .map(|i| {
                let mut best = 0;
                for c in 1..p {
                    if t.data()[base + c * hw + i] > t.data()[base + best * hw + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(p, h, w, labels)
    }
}

/// Stacks per-sample `1×C×H×W` tensors into one `N×C×H×W` batch.
pub fn stack(items: &[Tensor]) -> Tensor {
    let refs: Vec<&Tensor> = items.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Thresholds a soft map: values `≥ threshold` become 1.
pub fn binarize(soft: &Tensor, n: usize, threshold: f64) -> BinaryMask {
    let (_, c, h, w) = soft.dims4();
    debug_assert_eq!(c, 1);
    let plane = &soft.data()[n * h * w..(n + 1) * h * w];
    BinaryMask {
        height: h,
        width: w,
        data: plane.iter().map(|&v| (v >= threshold) as u8).collect(),
    }
}
