use candle_core::Tensor;

use crate::error::{shape_err, Result};

/// Spatial extent of an aggregated feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapeInfo {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ShapeInfo {
    pub fn patches(&self) -> usize {
        self.height * self.width
    }
}

/// A single `c* x h* x w*` feature map.
#[derive(Debug, Clone)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()
            .map_err(|_| shape_err!("feature map must be 3-D, got {:?}", t.dims()))?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> ShapeInfo {
        let d = self.0.dims();
        ShapeInfo {
            channels: d[0],
            height: d[1],
            width: d[2],
        }
    }

    pub fn flatten(&self) -> Result<PatchMatrix> {
        Ok(PatchMatrix(flatten(&self.0)?))
    }
}

/// `c* x k*` matrix whose columns are patch features, `k = h * w* + w`
/// (row-major over the spatial grid).
#[derive(Debug, Clone)]
pub struct PatchMatrix(Tensor);

impl PatchMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims2()
            .map_err(|_| shape_err!("patch matrix must be 2-D, got {:?}", t.dims()))?;
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn unflatten(&self, height: usize, width: usize) -> Result<FeatureMap> {
        Ok(FeatureMap(unflatten(&self.0, height, width)?))
    }
}

/// `(.., c, h, w) -> (.., c, h * w)`.
pub fn flatten(u: &Tensor) -> Result<Tensor> {
    let r = u.rank();
    if r < 3 {
        return Err(shape_err!("flatten needs (.., c, h, w), got {:?}", u.dims()));
    }
    Ok(u.flatten(r - 2, r - 1)?)
}

/// `(.., c, k) -> (.., c, h, w)`; requires `k == h * w`.
pub fn unflatten(z: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let r = z.rank();
    if r < 2 {
        return Err(shape_err!("unflatten needs (.., c, k), got {:?}", z.dims()));
    }
    let k = z.dim(r - 1)?;
    if k != height * width {
        return Err(shape_err!("k* = {k} does not equal {height} x {width}"));
    }
    let mut dims = z.dims()[..r - 1].to_vec();
    dims.push(height);
    dims.push(width);
    Ok(z.reshape(dims)?)
}
