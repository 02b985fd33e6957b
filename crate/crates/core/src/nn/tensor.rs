use crate::error::{ensure_shape, Result};
use crate::imaging::{ImageTensor, CHANNELS};

/// Dense `NCHW` tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshaped(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape changes element count");
        self.shape = shape;
        self
    }

    /// Items `start..start + len` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Tensor {
        let per = self.numel() / self.batch().max(1);
        Tensor::from_vec(
            [len, self.shape[1], self.shape[2], self.shape[3]],
            self.data[start * per..(start + len) * per].to_vec(),
        )
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks images into an `N x 3 x H x W` batch.
    pub fn from_images(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images.first().expect("at least one image");
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            ensure_shape!(img.dims() == (h, w), "batch images differ in size");
            let src = img.as_slice();
            for ch in 0..CHANNELS {
                data.extend(src.iter().skip(ch).step_by(CHANNELS));
            }
        }
        Ok(Tensor::from_vec([images.len(), CHANNELS, h, w], data))
    }

    pub fn from_image(img: &ImageTensor) -> Tensor {
        Self::from_images(&[img]).expect("single image batch")
    }

    /// Converts batch item `index` of a 3-channel tensor back to an image,
    /// clamping into `[0, 1]`.
    pub fn to_image(&self, index: usize) -> Result<ImageTensor> {
        ensure_shape!(self.channels() == CHANNELS, "expected 3 channels, got {}", self.channels());
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let base = index * CHANNELS * plane;
        let mut data = Vec::with_capacity(CHANNELS * plane);
        for p in 0..plane {
            for ch in 0..CHANNELS {
                data.push(self.data[base + ch * plane + p]);
            }
        }
        ImageTensor::from_clamped(h, w, data)
    }
}
