//! Axis-aligned spatial transformer: bilinear crop and paste.
//!
//! A box only translates and scales, so bilinear resampling separates into a
//! row operator and a column operator. Entry `(u, j)` of each operator is the
//! tent weight `max(0, 1 - |s(u) - j|)` between the sampling position `s(u)`
//! and source index `j`; out-of-range sources have no column, which is zero
//! padding. Both operators are smooth in the box parameters almost
//! everywhere, so gradients reach the boxes through plain tensor ops.
//!
//! Pixel `j` covers `[j, j + 1)` and has its center at `j + 0.5`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A batch of boxes in pixel units, each field of shape `(N,)`.
#[derive(Debug, Clone)]
pub struct Boxes {
    pub cx: Tensor,
    pub cy: Tensor,
    pub w: Tensor,
    pub h: Tensor,
}

impl Boxes {
    pub fn len(&self) -> usize {
        self.cx.dims1().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds boxes from `(cx, cy, w, h)` tuples.
    pub fn from_cxcywh(boxes: &[[f64; 4]], dtype: DType, device: &Device) -> Result<Self> {
        let col = |k: usize| -> Result<Tensor> {
            let v: Vec<f64> = boxes.iter().map(|b| b[k]).collect();
            Ok(Tensor::from_vec(v, boxes.len(), device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            cx: col(0)?,
            cy: col(1)?,
            w: col(2)?,
            h: col(3)?,
        })
    }

    /// Splits a `(N, 4)` tensor of `(cx, cy, w, h)` rows.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            cx: t.narrow(1, 0, 1)?.squeeze(1)?,
            cy: t.narrow(1, 1, 1)?.squeeze(1)?,
            w: t.narrow(1, 2, 1)?.squeeze(1)?,
            h: t.narrow(1, 3, 1)?.squeeze(1)?,
        })
    }

    pub fn to_rows(&self) -> Result<Vec<[f64; 4]>> {
        let f = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1()?) };
        let (cx, cy, w, h) = (f(&self.cx)?, f(&self.cy)?, f(&self.w)?, f(&self.h)?);
        Ok((0..cx.len()).map(|i| [cx[i], cy[i], w[i], h[i]]).collect())
    }
}

fn index_row(n: usize, offset: f64, dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = (0..n).map(|i| i as f64 + offset).collect();
    Ok(Tensor::from_vec(v, (1, n), device)?.to_dtype(dtype)?)
}

/// Tent weights between sampling positions `(N, P)` and `len` source indices.
fn tent(positions: &Tensor, len: usize) -> Result<Tensor> {
    let grid = index_row(len, 0.0, positions.dtype(), positions.device())?.unsqueeze(0)?;
    let d = positions.unsqueeze(2)?.broadcast_sub(&grid)?;
    Ok(d.abs()?.affine(-1.0, 1.0)?.relu()?)
}

/// Operator `(N, out, len)` sampling `out` evenly spaced points of each box
/// extent `[start, start + extent)` from a signal of `len` pixels.
fn crop_operator(start: &Tensor, extent: &Tensor, out: usize, len: usize) -> Result<Tensor> {
    let centers = index_row(out, 0.5, start.dtype(), start.device())?;
    let step = (extent / out as f64)?.unsqueeze(1)?;
    let pos = centers
        .broadcast_mul(&step)?
        .broadcast_add(&start.unsqueeze(1)?)?
        .affine(1.0, -0.5)?;
    tent(&pos, len)
}

/// Operator `(N, len, size)` placing a `size`-pixel signal into each box on a
/// `len`-pixel canvas.
fn paste_operator(start: &Tensor, extent: &Tensor, size: usize, len: usize) -> Result<Tensor> {
    let centers = index_row(len, 0.5, start.dtype(), start.device())?;
    let scale = (extent.recip()? * size as f64)?.unsqueeze(1)?;
    let pos = centers
        .broadcast_sub(&start.unsqueeze(1)?)?
        .broadcast_mul(&scale)?
        .affine(1.0, -0.5)?;
    tent(&pos, size)
}

fn corners(boxes: &Boxes) -> Result<(Tensor, Tensor)> {
    let x0 = (&boxes.cx - (&boxes.w * 0.5)?)?;
    let y0 = (&boxes.cy - (&boxes.h * 0.5)?)?;
    Ok((x0, y0))
}

/// Crops `G = N / B` boxes from each of `B` images.
///
/// `images` is `(B, C, H, W)`; boxes are ordered image-major, so box `n`
/// reads image `n / G`. Returns `(N, C, out_h, out_w)`.
pub fn crop(images: &Tensor, boxes: &Boxes, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let n = boxes.len();
    if b == 0 || n % b != 0 {
        return Err(Error::Shape(format!(
            "{n} boxes cannot be split evenly over {b} images"
        )));
    }
    let g = n / b;
    let (x0, y0) = corners(boxes)?;
    let ky = crop_operator(&y0, &boxes.h, out_h, h)?; // (N, out_h, H)
    let kx = crop_operator(&x0, &boxes.w, out_w, w)?; // (N, out_w, W)

    let rows = images.permute((0, 2, 1, 3))?.reshape((b, h, c * w))?;
    let ky = ky.reshape((b, g * out_h, h))?;
    let t = ky.matmul(&rows)?; // (B, G*out_h, C*W)
    let t = t
        .reshape((b, g, out_h, c, w))?
        .permute((0, 1, 3, 2, 4))?
        .reshape((n, c * out_h, w))?;
    let out = t.matmul(&kx.transpose(1, 2)?)?; // (N, C*out_h, out_w)
    Ok(out.reshape((n, c, out_h, out_w))?)
}

/// Pastes each glimpse `(N, C, gh, gw)` into its box on a zero canvas of
/// `canvas_h x canvas_w`. Returns `(N, C, canvas_h, canvas_w)`.
pub fn paste(glimpses: &Tensor, boxes: &Boxes, canvas_h: usize, canvas_w: usize) -> Result<Tensor> {
    let (n, c, gh, gw) = glimpses.dims4()?;
    if boxes.len() != n {
        return Err(Error::Shape(format!(
            "{} boxes for {n} glimpses",
            boxes.len()
        )));
    }
    let (x0, y0) = corners(boxes)?;
    let py = paste_operator(&y0, &boxes.h, gh, canvas_h)?; // (N, H, gh)
    let px = paste_operator(&x0, &boxes.w, gw, canvas_w)?; // (N, W, gw)

    let t = glimpses
        .reshape((n, c * gh, gw))?
        .matmul(&px.transpose(1, 2)?)?; // (N, C*gh, W)
    let t = t
        .reshape((n, c, gh, canvas_w))?
        .permute((0, 2, 1, 3))?
        .reshape((n, gh, c * canvas_w))?;
    let out = py.matmul(&t)?; // (N, H, C*W)
    Ok(out
        .reshape((n, canvas_h, c, canvas_w))?
        .permute((0, 2, 1, 3))?
        .contiguous()?)
}
