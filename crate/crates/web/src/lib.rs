//! WebAssembly bindings for the static demo page in `www/`.
//!
//! A [`Demo`] holds one synthetic sample. The page can regenerate it with
//! new deformation parameters, warp the garment with a hand-set flow, and
//! score that warp against the ground-truth warp.

use tryon_core::imgproc::{flow_to_image, to_rgb8};
use tryon_core::metrics::ssim;
use tryon_core::synth::{generate_sample, Deformation, SampleParams, TextureFamily, TryonSample, PALETTE};
use tryon_core::tensor::Tensor;
use tryon_core::warp::{backward_warp, FlowField};
use wasm_bindgen::prelude::*;

fn js_err(e: tryon_core::error::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn rgba(t: &Tensor) -> Result<Vec<u8>, JsValue> {
    let (_, _, rgb) = to_rgb8(t).map_err(js_err)?;
    Ok(rgb.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect())
}

fn texture(index: u32) -> TextureFamily {
    TextureFamily::ALL[index as usize % TextureFamily::ALL.len()]
}

#[wasm_bindgen]
pub struct Demo {
    sample: TryonSample,
    manual: Tensor,
}

#[wasm_bindgen]
impl Demo {
    /// A `height` x `width` sample with an affine deformation.
    #[wasm_bindgen(constructor)]
    pub fn new(height: usize, width: usize) -> Result<Demo, JsValue> {
        let sample = generate_sample(&SampleParams::plain(TextureFamily::Stripes, Deformation::IDENTITY), height, width, "web")
            .map_err(js_err)?;
        let manual = sample.garment.clone();
        Ok(Demo { sample, manual })
    }

    pub fn width(&self) -> usize {
        self.sample.width()
    }

    pub fn height(&self) -> usize {
        self.sample.height()
    }

    /// Regenerate the sample. `bend` > 0 switches to a sinusoidal bend of that amplitude.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &mut self,
        texture_index: u32,
        color_index: u32,
        scale: f64,
        rotation_deg: f64,
        tx: f64,
        ty: f64,
        bend: f64,
        arm_bar: bool,
    ) -> Result<(), JsValue> {
        let (h, w) = (self.height(), self.width());
        let deformation = if bend > 0.0 {
            Deformation::Bend {
                ax: bend,
                ay: 0.5 * bend,
                wavelength: 0.6 * h as f64,
                phase: 0.0,
            }
        } else {
            Deformation::Affine {
                scale,
                rotation: rotation_deg.to_radians(),
                tx,
                ty,
            }
        };
        let base = color_index as usize % PALETTE.len();
        let params = SampleParams {
            base_color: PALETTE[base],
            accent_color: PALETTE[(base + 4) % PALETTE.len()],
            arm_bar: arm_bar.then_some((0.5 * w as f64, 0.55 * h as f64, 0.3)),
            ..SampleParams::plain(texture(texture_index), deformation)
        };
        self.sample = generate_sample(&params, h, w, "web").map_err(js_err)?;
        self.manual = self.sample.garment.clone();
        Ok(())
    }

    pub fn caption(&self) -> String {
        self.sample.caption.clone()
    }

    pub fn garment_rgba(&self) -> Result<Vec<u8>, JsValue> {
        rgba(&self.sample.garment)
    }

    pub fn target_rgba(&self) -> Result<Vec<u8>, JsValue> {
        rgba(&self.sample.gt_warp)
    }

    pub fn person_rgba(&self) -> Result<Vec<u8>, JsValue> {
        rgba(&self.sample.person)
    }

    pub fn agnostic_rgba(&self) -> Result<Vec<u8>, JsValue> {
        rgba(&self.sample.agnostic)
    }

    pub fn flow_rgba(&self) -> Result<Vec<u8>, JsValue> {
        rgba(&flow_to_image(self.sample.gt_flow.tensor(), None).map_err(js_err)?)
    }

    /// Warp the garment by a translation plus a scale about the image centre,
    /// returning the result as RGBA.
    pub fn warp_manual(&mut self, dx: f64, dy: f64, scale: f64) -> Result<Vec<u8>, JsValue> {
        let (h, w) = (self.height(), self.width());
        let (cx, cy) = (0.5 * (w as f64 - 1.0), 0.5 * (h as f64 - 1.0));
        let mut flow = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64, y as f64);
                flow.set3(0, y, x, scale * (px - cx) + cx + dx - px);
                flow.set3(1, y, x, scale * (py - cy) + cy + dy - py);
            }
        }
        let flow = FlowField::new(flow).map_err(js_err)?;
        self.manual = backward_warp(&self.sample.garment, &flow).map_err(js_err)?;
        rgba(&self.manual)
    }

    /// SSIM between the last manual warp and the ground-truth warped garment.
    pub fn score_manual(&self) -> Result<f64, JsValue> {
        ssim(&self.manual, &self.sample.gt_warp).map_err(js_err)
    }
}
