use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;

use crate::error::{shape_err, Error, Result};

/// Per-channel statistics of the ImageNet pre-training set.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A preprocessed `3 x H x W` image ready for the networks.
#[derive(Debug, Clone)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, h, w) = t
            .dims3()
            .map_err(|_| shape_err!("image must be 3-D, got {:?}", t.dims()))?;
        if c != 3 || h == 0 || w == 0 {
            return Err(shape_err!(
                "image must be 3 x H x W with H, W > 0, got {:?}",
                t.dims()
            ));
        }
        let sum = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        if !sum.is_finite() {
            return Err(Error::Input("image contains non-finite values".into()));
        }
        Ok(Self(t))
    }

    /// Resize to `size x size`, scale to [0, 1] and standardize with the
    /// backbone's pre-training channel statistics.
    pub fn from_dynamic(img: &image::DynamicImage, size: usize, device: &Device) -> Result<Self> {
        let rgb = img
            .resize_exact(size as u32, size as u32, FilterType::Triangle)
            .to_rgb8();
        let hw = size * size;
        let mut data = vec![0f32; 3 * hw];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * hw + i] = (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        Self::new(Tensor::from_vec(data, (3, size, size), device)?)
    }

    pub fn load(path: &Path, size: usize, device: &Device) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?;
        Self::from_dynamic(&img, size, device)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }
}

/// Stack images into a `(b, 3, H, W)` batch.
pub fn stack_images(images: &[ImageTensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Input("empty image batch".into()));
    }
    let ts: Vec<&Tensor> = images.iter().map(|i| i.tensor()).collect();
    Ok(Tensor::stack(&ts, 0)?)
}
