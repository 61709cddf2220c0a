//! Trainable input transformations. Both kinds lift a smaller target
//! image onto the model's canvas; the padding kind owns the border
//! pixels, the watermark kind adds a masked bounded program on top.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Canvas and center-window geometry shared by both prompt kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGeometry {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
}

impl PromptGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_h < self.image_h || self.canvas_w < self.image_w {
            return Err(Error::Config(
                "canvas must be at least as large as the image window".into(),
            ));
        }
        if (self.canvas_h - self.image_h) % 2 != 0 || (self.canvas_w - self.image_w) % 2 != 0 {
            return Err(Error::Config(
                "center window must sit symmetrically on the canvas".into(),
            ));
        }
        Ok(())
    }

    pub fn canvas_numel(&self) -> usize {
        self.canvas_h * self.canvas_w * self.channels
    }

    pub fn image_numel(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }

    fn offsets(&self) -> (usize, usize) {
        (
            (self.canvas_h - self.image_h) / 2,
            (self.canvas_w - self.image_w) / 2,
        )
    }

    /// True if the flat canvas index lies inside the centered window.
    fn in_window(&self, idx: usize) -> bool {
        let (oh, ow) = self.offsets();
        let per_row = self.canvas_w * self.channels;
        let i = idx / per_row;
        let j = (idx % per_row) / self.channels;
        i >= oh && i < oh + self.image_h && j >= ow && j < ow + self.image_w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Padding,
    Watermark,
}

/// Embed an image at the canvas center over a zero background. With
/// equal dims this is the identity.
pub fn embed_center(image: &Tensor, geom: &PromptGeometry) -> Result<Tensor> {
    geom.validate()?;
    if image.numel() != geom.image_numel() {
        return Err(Error::InvalidInput(format!(
            "embed_center expects {} pixels, got {}",
            geom.image_numel(),
            image.numel()
        )));
    }
    if geom.canvas_h == geom.image_h && geom.canvas_w == geom.image_w {
        return Ok(Tensor::from_vec(image.data().to_vec()));
    }
    let (oh, ow) = geom.offsets();
    let mut out = vec![0.0; geom.canvas_numel()];
    let c = geom.channels;
    for i in 0..geom.image_h {
        for j in 0..geom.image_w {
            for ch in 0..c {
                let src = (i * geom.image_w + j) * c + ch;
                let dst = ((i + oh) * geom.canvas_w + (j + ow)) * c + ch;
                out[dst] = image.data()[src];
            }
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Padding prompt: trainable border pixels around a fixed center window.
/// The center window of the prompted image is bit-identical to the input.
#[derive(Clone, Debug)]
pub struct PaddingPrompt {
    geom: PromptGeometry,
    /// Border values in canvas scan order (window positions skipped).
    border: Tensor,
    /// Flat canvas indices of the border cells, in scan order.
    border_index: Vec<usize>,
}

impl PaddingPrompt {
    pub fn zeroed(geom: PromptGeometry) -> Result<Self> {
        geom.validate()?;
        if geom.canvas_h == geom.image_h && geom.canvas_w == geom.image_w {
            return Err(Error::Config("padding prompt needs a strictly larger canvas".into()));
        }
        let border_index: Vec<usize> = (0..geom.canvas_numel())
            .filter(|&idx| !geom.in_window(idx))
            .collect();
        let border = Tensor::zeros(vec![border_index.len()]);
        Ok(PaddingPrompt {
            geom,
            border,
            border_index,
        })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let mut canvas = embed_center(image, &self.geom)?;
        for (b, &idx) in self.border_index.iter().enumerate() {
            canvas.data_mut()[idx] = self.border.data()[b];
        }
        Ok(canvas)
    }

    /// Pull the canvas gradient back onto the border parameters.
    pub fn backward(&self, d_canvas: &Tensor) -> Result<Tensor> {
        if d_canvas.numel() != self.geom.canvas_numel() {
            return Err(Error::InvalidInput("canvas gradient size mismatch".into()));
        }
        let grad: Vec<f64> = self
            .border_index
            .iter()
            .map(|&idx| d_canvas.data()[idx])
            .collect();
        Ok(Tensor::from_vec(grad))
    }
}

/// Watermark prompt: effective program `tanh(W) * M` added on top of the
/// embedded image, result clamped to [0, 1]. Pixels where the mask is
/// zero are unchanged.
#[derive(Clone, Debug)]
pub struct WatermarkPrompt {
    geom: PromptGeometry,
    /// Trainable pre-squash weights over the full canvas.
    weights: Tensor,
    /// Fixed binary mask over the full canvas.
    mask: Tensor,
}

impl WatermarkPrompt {
    /// Zero weights with a border-frame mask: ones outside the center
    /// window so the embedded target data stays untouched.
    pub fn zeroed_border_mask(geom: PromptGeometry) -> Result<Self> {
        geom.validate()?;
        let mask: Vec<f64> = (0..geom.canvas_numel())
            .map(|idx| if geom.in_window(idx) { 0.0 } else { 1.0 })
            .collect();
        Ok(WatermarkPrompt {
            geom,
            weights: Tensor::zeros(vec![geom.canvas_numel()]),
            mask: Tensor::from_vec(mask),
        })
    }

    pub fn with_mask(geom: PromptGeometry, mask: Tensor) -> Result<Self> {
        geom.validate()?;
        if mask.numel() != geom.canvas_numel() {
            return Err(Error::InvalidInput("mask must cover the canvas".into()));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidInput("mask must be binary".into()));
        }
        Ok(WatermarkPrompt {
            geom,
            weights: Tensor::zeros(vec![geom.canvas_numel()]),
            mask,
        })
    }

    /// Pre-clamp canvas: embed(image) + tanh(W) * M.
    fn pre_clamp(&self, image: &Tensor) -> Result<Tensor> {
        let embedded = if image.numel() == self.geom.canvas_numel() {
            Tensor::from_vec(image.data().to_vec())
        } else {
            embed_center(image, &self.geom)?
        };
        let mut out = embedded.into_data();
        for (i, v) in out.iter_mut().enumerate() {
            *v += self.weights.data()[i].tanh() * self.mask.data()[i];
        }
        Ok(Tensor::from_vec(out))
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let mut pre = self.pre_clamp(image)?;
        for v in pre.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(pre)
    }

    /// Gradient w.r.t. the weights: the clamp passes gradient only where
    /// the pre-clamp value is strictly inside (0, 1).
    pub fn backward(&self, image: &Tensor, d_canvas: &Tensor) -> Result<Tensor> {
        if d_canvas.numel() != self.geom.canvas_numel() {
            return Err(Error::InvalidInput("canvas gradient size mismatch".into()));
        }
        let pre = self.pre_clamp(image)?;
        let grad: Vec<f64> = (0..self.weights.numel())
            .map(|i| {
                let u = pre.data()[i];
                if u > 0.0 && u < 1.0 {
                    let t = self.weights.data()[i].tanh();
                    d_canvas.data()[i] * self.mask.data()[i] * (1.0 - t * t)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Tensor::from_vec(grad))
    }
}

/// Either prompt kind behind one interface. Parameters are exposed flat
/// so both the first-order trainer and the zeroth-order estimators can
/// drive them.
#[derive(Clone, Debug)]
pub enum Prompt {
    Padding(PaddingPrompt),
    Watermark(WatermarkPrompt),
}

impl Prompt {
    pub fn zeroed(kind: PromptKind, geom: PromptGeometry) -> Result<Self> {
        Ok(match kind {
            PromptKind::Padding => Prompt::Padding(PaddingPrompt::zeroed(geom)?),
            PromptKind::Watermark => {
                Prompt::Watermark(WatermarkPrompt::zeroed_border_mask(geom)?)
            }
        })
    }

    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Padding(_) => PromptKind::Padding,
            Prompt::Watermark(_) => PromptKind::Watermark,
        }
    }

    pub fn geometry(&self) -> &PromptGeometry {
        match self {
            Prompt::Padding(p) => &p.geom,
            Prompt::Watermark(p) => &p.geom,
        }
    }

    /// Number of trainable parameters `|P|`.
    pub fn dim(&self) -> usize {
        self.params().numel()
    }

    pub fn params(&self) -> &Tensor {
        match self {
            Prompt::Padding(p) => &p.border,
            Prompt::Watermark(p) => &p.weights,
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let target = match self {
            Prompt::Padding(p) => &mut p.border,
            Prompt::Watermark(p) => &mut p.weights,
        };
        if values.len() != target.numel() {
            return Err(Error::InvalidInput("prompt parameter size mismatch".into()));
        }
        target.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// Transform an image onto the canvas.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match self {
            Prompt::Padding(p) => p.apply(image),
            Prompt::Watermark(p) => p.apply(image),
        }
    }

    /// Chain a canvas gradient back to the prompt parameters.
    pub fn backward(&self, image: &Tensor, d_canvas: &Tensor) -> Result<Tensor> {
        match self {
            Prompt::Padding(p) => p.backward(d_canvas),
            Prompt::Watermark(p) => p.backward(image, d_canvas),
        }
    }
}
