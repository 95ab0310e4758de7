//! Procedural try-on samples with known ground-truth warps.
//!
//! Each sample starts from a flat garment in garment space, deforms it with an
//! analytic flow (affine or sinusoidal bend), dresses a stick-figure person in
//! target space, and optionally burns an arm-bar occluder into the supervision.
//! Every field is rounded to `f32` so the on-disk PFM copy is bit-identical to
//! the in-memory sample.
//!
//! Colour convention: the background (and the agnostic fill) is `0`; every
//! drawn colour has at least one channel with magnitude ≥ 0.5, so "content
//! present" is simply `max_c |v| > τ`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgproc::{read_pfm, write_pfm, write_png};
use crate::rng::{sub_seed, Rng};
use crate::tensor::Tensor;
use crate::warp::{backward_warp, read_flow, write_flow, FlowField};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureFamily {
    Stripes,
    Checker,
    Glyphs,
    Solid,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 4] = [Self::Stripes, Self::Checker, Self::Glyphs, Self::Solid];

    pub fn caption_word(self) -> &'static str {
        match self {
            Self::Stripes => "striped",
            Self::Checker => "checkered",
            Self::Glyphs => "patterned",
            Self::Solid => "plain",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeformationFamily {
    Affine,
    SinusoidalBend,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccluderSpec {
    None,
    ArmBar,
    /// Arm bar on roughly half of the samples.
    Mixed,
}

/// Sampling ranges for the dataset generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub textures: Vec<TextureFamily>,
    pub deformations: Vec<DeformationFamily>,
    pub occluder: OccluderSpec,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Maximum |translation| per axis, pixels.
    pub max_translation: f64,
    /// Maximum |rotation|, degrees.
    pub max_rotation_deg: f64,
    /// Maximum |scale − 1|.
    pub max_scale_dev: f64,
    /// Maximum bend amplitude, pixels.
    pub max_bend: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 48,
            textures: TextureFamily::ALL.to_vec(),
            deformations: vec![DeformationFamily::Affine, DeformationFamily::SinusoidalBend],
            occluder: OccluderSpec::Mixed,
            train: 64,
            val: 8,
            test: 16,
            max_translation: 4.0,
            max_rotation_deg: 8.0,
            max_scale_dev: 0.1,
            max_bend: 3.0,
        }
    }
}

impl GeneratorSpec {
    /// Worst-case flow magnitude any sample drawn from this spec can reach.
    pub fn flow_bound(&self) -> f64 {
        let (h, w) = (self.height as f64, self.width as f64);
        let radius = (h / 2.0).hypot(w / 2.0);
        let rot = 2.0 * (self.max_rotation_deg.to_radians() / 2.0).sin();
        // |s·R − I| ≤ |s − 1| + s·|R − I|
        let linear = self.max_scale_dev + (1.0 + self.max_scale_dev) * rot;
        let affine = linear * radius + self.max_translation * 2f64.sqrt();
        let bend = self.max_bend * 2f64.sqrt();
        affine.max(bend)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) || self.height < 32 || self.width < 24 {
            return bad(format!("image size {}x{} must be multiples of 8, at least 32x24", self.height, self.width));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return bad("split sizes must all be positive".into());
        }
        if self.textures.is_empty() || self.deformations.is_empty() {
            return bad("need at least one texture and one deformation family".into());
        }
        for (name, v) in [
            ("max_translation", self.max_translation),
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_scale_dev", self.max_scale_dev),
            ("max_bend", self.max_bend),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.max_scale_dev >= 0.5 {
            return bad("max_scale_dev must stay below 0.5".into());
        }
        let limit = self.height as f64 / 4.0;
        if self.flow_bound() > limit {
            return bad(format!(
                "deformation range allows offsets up to {:.2} px, above the H/4 = {limit} px limit",
                self.flow_bound()
            ));
        }
        let bend_lipschitz = 2.0 * PI * self.max_bend / bend_wavelength_min(self.height);
        if bend_lipschitz >= 0.9 {
            return bad("bend amplitude too large for its wavelength (flow would fold)".into());
        }
        Ok(())
    }
}

fn bend_wavelength_min(h: usize) -> f64 {
    h as f64 * 0.4
}

/// Analytic garment deformation. `offset(p)` is the backward-warp flow at target pixel `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Deformation {
    /// Sample at `s·R(θ)(p − c) + c + t`.
    Affine { scale: f64, rotation: f64, tx: f64, ty: f64 },
    Bend { ax: f64, ay: f64, wavelength: f64, phase: f64 },
}

impl Deformation {
    pub const IDENTITY: Deformation = Deformation::Affine {
        scale: 1.0,
        rotation: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Deformation::Affine {
            scale: 1.0,
            rotation: 0.0,
            tx,
            ty,
        }
    }

    fn offset(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        match *self {
            Deformation::Affine { scale, rotation, tx, ty } => {
                let (s, c) = rotation.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let sx = scale * (c * dx - s * dy) + cx + tx;
                let sy = scale * (s * dx + c * dy) + cy + ty;
                (sx - x, sy - y)
            }
            Deformation::Bend { ax, ay, wavelength, phase } => {
                let k = 2.0 * PI / wavelength;
                (ax * (k * y + phase).sin(), ay * (k * x + phase).sin())
            }
        }
    }

    /// Target position of the garment-space point `s` (inverse of `p ↦ p + offset(p)`).
    fn forward_map(&self, sx: f64, sy: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (mut x, mut y) = (sx, sy);
        for _ in 0..200 {
            let (ox, oy) = self.offset(x, y, cx, cy);
            let (nx, ny) = (sx - ox, sy - oy);
            if (nx - x).abs() < 1e-12 && (ny - y).abs() < 1e-12 {
                break;
            }
            x = nx;
            y = ny;
        }
        (x, y)
    }
}

/// Fully specified sample; `generate_dataset` draws these at random.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleParams {
    pub texture: TextureFamily,
    pub base_color: [f64; 3],
    pub accent_color: [f64; 3],
    pub long_sleeve: bool,
    pub deformation: Deformation,
    /// Arm bar as `(centre_x, centre_y, angle)` in target pixels / radians.
    pub arm_bar: Option<(f64, f64, f64)>,
    /// Texture phase offset (pixels), so equal families still differ.
    pub texture_shift: f64,
}

impl SampleParams {
    pub fn plain(texture: TextureFamily, deformation: Deformation) -> Self {
        Self {
            texture,
            base_color: PALETTE[0],
            accent_color: PALETTE[4],
            long_sleeve: false,
            deformation,
            arm_bar: None,
            texture_shift: 0.0,
        }
    }

    pub fn caption(&self) -> String {
        let sleeve = if self.long_sleeve { "long" } else { "short" };
        format!("{} {sleeve}-sleeve top", self.texture.caption_word())
    }
}

pub const PALETTE: [[f64; 3]; 8] = [
    [0.9, -0.7, -0.7],
    [-0.6, 0.8, -0.5],
    [-0.6, -0.4, 0.9],
    [0.9, 0.8, -0.7],
    [0.6, -0.7, 0.8],
    [-0.7, 0.8, 0.8],
    [0.95, 0.2, -0.8],
    [-0.9, -0.9, -0.9],
];
const SKIN: [f64; 3] = [0.85, 0.45, 0.2];
const PANTS: [f64; 3] = [-0.55, -0.5, 0.6];
/// Arm-bar thickness (full width) and half-length as fractions of the image width.
const BAR_HALF_WIDTH: f64 = 2.25 / 48.0;
const BAR_HALF_LENGTH: f64 = 14.0 / 48.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TryonSample {
    pub id: String,
    pub garment: Tensor,
    pub pose: Tensor,
    pub agnostic: Tensor,
    pub gt_warp: Tensor,
    pub gt_flow: FlowField,
    pub occlusion: Tensor,
    pub person: Tensor,
    pub caption: String,
    pub coarse_body: Tensor,
}

impl TryonSample {
    pub fn height(&self) -> usize {
        self.garment.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.garment.shape()[2]
    }
}

/// Pixel-centre distance from `(px, py)` to the segment `a`–`b`.
fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * vx + (py - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    (px - a.0 - t * vx).hypot(py - a.1 - t * vy)
}

/// Endpoints of an arm bar in target pixels.
pub fn arm_bar_segment(bar: (f64, f64, f64), width: usize) -> ((f64, f64), (f64, f64)) {
    let (cx, cy, angle) = bar;
    let half = BAR_HALF_LENGTH * width as f64;
    let (s, c) = angle.sin_cos();
    ((cx - half * c, cy - half * s), (cx + half * c, cy + half * s))
}

/// Binary map of pixels covered by an arm bar.
pub fn arm_bar_mask(bar: (f64, f64, f64), h: usize, w: usize) -> Tensor {
    let (a, b) = arm_bar_segment(bar, w);
    let half_width = BAR_HALF_WIDTH * w as f64;
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        f64::from(segment_distance(x, y, a, b) < half_width)
    })
}

struct Layout {
    h: f64,
    w: f64,
}

impl Layout {
    fn px(&self, fx: f64, fy: f64) -> (f64, f64) {
        (fx * self.w, fy * self.h)
    }

    fn centre(&self) -> (f64, f64) {
        ((self.w - 1.0) / 2.0, (self.h - 1.0) / 2.0)
    }

    /// Garment silhouette in garment space (fractions of the canvas).
    fn garment_alpha(&self, x: f64, y: f64, long_sleeve: bool) -> bool {
        let (fx, fy) = ((x + 0.5) / self.w, (y + 0.5) / self.h);
        let torso = (15.0 / 48.0..33.0 / 48.0).contains(&fx) && (16.0 / 64.0..50.0 / 64.0).contains(&fy);
        let sleeve_y_end = if long_sleeve { 42.0 / 64.0 } else { 26.0 / 64.0 };
        let sleeve_x = if long_sleeve {
            (10.0 / 48.0..15.0 / 48.0).contains(&fx) || (33.0 / 48.0..38.0 / 48.0).contains(&fx)
        } else {
            (9.0 / 48.0..15.0 / 48.0).contains(&fx) || (33.0 / 48.0..39.0 / 48.0).contains(&fx)
        };
        let sleeve = sleeve_x && (16.0 / 64.0..sleeve_y_end).contains(&fy);
        let (nx, ny) = self.px(0.5, 16.0 / 64.0);
        let neck_cut = (x + 0.5 - nx).hypot((y + 0.5 - ny) * 0.75) < 4.0 * self.w / 48.0;
        (torso || sleeve) && !neck_cut
    }
}

fn texture_color(p: &SampleParams, x: f64, y: f64, w: f64) -> [f64; 3] {
    let unit = w / 48.0;
    let xs = x + p.texture_shift;
    let ys = y + p.texture_shift;
    let accent = match p.texture {
        TextureFamily::Solid => false,
        TextureFamily::Stripes => ((ys / (4.0 * unit)).floor() as i64).rem_euclid(2) == 1,
        TextureFamily::Checker => {
            let cx = (xs / (6.0 * unit)).floor() as i64;
            let cy = (ys / (6.0 * unit)).floor() as i64;
            (cx + cy).rem_euclid(2) == 1
        }
        TextureFamily::Glyphs => {
            // plus-shaped glyphs on a 10-pixel lattice
            let cell = 10.0 * unit;
            let (gx, gy) = ((xs / cell).fract() * cell, (ys / cell).fract() * cell);
            let c = cell / 2.0;
            let arm = 3.0 * unit;
            ((gx - c).abs() < 1.0 * unit && (gy - c).abs() < arm)
                || ((gy - c).abs() < 1.0 * unit && (gx - c).abs() < arm)
        }
    };
    if accent {
        p.accent_color
    } else {
        p.base_color
    }
}

fn paint(t: &mut Tensor, x: usize, y: usize, rgb: [f64; 3]) {
    for (c, v) in rgb.iter().enumerate() {
        t.set3(c, y, x, *v);
    }
}

/// Render one sample from fully specified parameters.
pub fn generate_sample(params: &SampleParams, h: usize, w: usize, id: &str) -> Result<TryonSample> {
    let lay = Layout {
        h: h as f64,
        w: w as f64,
    };
    let (cx, cy) = lay.centre();

    let mut garment = Tensor::zeros(&[3, h, w]);
    let mut alpha = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            if lay.garment_alpha(x as f64, y as f64, params.long_sleeve) {
                paint(&mut garment, x, y, texture_color(params, x as f64, y as f64, lay.w));
                alpha.set3(0, y, x, 1.0);
            }
        }
    }
    let garment = garment.round_f32();

    let mut flow = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (ox, oy) = params.deformation.offset(x as f64, y as f64, cx, cy);
            flow.set3(0, y, x, ox);
            flow.set3(1, y, x, oy);
        }
    }
    let gt_flow = FlowField::new(flow.round_f32())?;
    let warped = backward_warp(&garment, &gt_flow)?;
    let warped_alpha = backward_warp(&alpha, &gt_flow)?;

    let occlusion = match params.arm_bar {
        Some(bar) => arm_bar_mask(bar, h, w).map(|v| 1.0 - v),
        None => Tensor::full(&[1, h, w], 1.0),
    };
    let gt_warp = Tensor::from_fn(&[3, h, w], |i| warped.data()[i] * occlusion.data()[i % (h * w)]).round_f32();

    // garment keypoints carried into target space
    let kp = |fx: f64, fy: f64| {
        let (sx, sy) = lay.px(fx, fy);
        params.deformation.forward_map(sx, sy, cx, cy)
    };
    let sleeve_end_y = if params.long_sleeve { 42.0 } else { 26.0 } / 64.0;
    let neck = kp(0.5, 16.0 / 64.0);
    let l_sh = kp(15.0 / 48.0, 17.0 / 64.0);
    let r_sh = kp(33.0 / 48.0, 17.0 / 64.0);
    let l_hip = kp(15.5 / 48.0, 49.5 / 64.0);
    let r_hip = kp(32.5 / 48.0, 49.5 / 64.0);
    let l_sl = kp(12.0 / 48.0, sleeve_end_y);
    let r_sl = kp(36.0 / 48.0, sleeve_end_y);

    // person: pants, head, garment, then the arm on top
    let mut person = Tensor::zeros(&[3, h, w]);
    let head = (neck.0, neck.1 - 7.0 * lay.h / 64.0);
    let head_r = 5.5 * lay.w / 48.0;
    let pants_top = l_hip.1.min(r_hip.1) - 1.0;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            if fy >= pants_top && fx >= l_hip.0 - 1.0 && fx <= r_hip.0 + 1.0 {
                paint(&mut person, x, y, PANTS);
            }
            if (fx - head.0).hypot(fy - head.1) < head_r {
                paint(&mut person, x, y, SKIN);
            }
            let a = warped_alpha.at3(0, y, x);
            if a > 0.0 {
                for c in 0..3 {
                    let under = person.at3(c, y, x);
                    person.set3(c, y, x, warped.at3(c, y, x) + (1.0 - a) * under);
                }
            }
        }
    }
    let mut agnostic = person.clone();
    for y in 0..h {
        for x in 0..w {
            if warped_alpha.at3(0, y, x) > 0.0 {
                paint(&mut agnostic, x, y, [0.0; 3]);
            }
        }
    }
    if let Some(bar) = params.arm_bar {
        let m = arm_bar_mask(bar, h, w);
        for y in 0..h {
            for x in 0..w {
                if m.at3(0, y, x) > 0.0 {
                    paint(&mut person, x, y, SKIN);
                    paint(&mut agnostic, x, y, SKIN);
                }
            }
        }
    }
    let person = person.map(|v| v.clamp(-1.0, 1.0)).round_f32();
    let agnostic = agnostic.map(|v| v.clamp(-1.0, 1.0)).round_f32();

    // stick-figure pose render, one colour per limb
    let mut limbs = vec![
        (neck, l_sh, [1.0, -1.0, -1.0]),
        (neck, r_sh, [-1.0, 1.0, -1.0]),
        (l_sh, l_hip, [-1.0, -1.0, 1.0]),
        (r_sh, r_hip, [1.0, 1.0, -1.0]),
        (l_hip, r_hip, [1.0, -1.0, 1.0]),
        (l_sh, l_sl, [-1.0, 1.0, 1.0]),
        (r_sh, r_sl, [1.0, 0.0, 0.0]),
        (neck, head, [0.0, 1.0, 0.0]),
    ];
    if let Some(bar) = params.arm_bar {
        let (a, b) = arm_bar_segment(bar, w);
        limbs.push((a, b, [1.0, 1.0, 1.0]));
    }
    let mut pose = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for &(a, b, rgb) in &limbs {
                if segment_distance(x as f64, y as f64, a, b) < 0.9 {
                    paint(&mut pose, x, y, rgb);
                }
            }
        }
    }

    let coarse_body = foreground_mask(&person, 0.05);
    let sample = TryonSample {
        id: id.to_string(),
        garment,
        pose,
        agnostic,
        gt_warp,
        gt_flow,
        occlusion,
        person,
        caption: params.caption(),
        coarse_body,
    };
    Ok(sample)
}

/// `1` where any channel has magnitude above `tau`.
pub fn foreground_mask(img: &Tensor, tau: f64) -> Tensor {
    let (c, h, w) = img.chw().expect("image");
    let n = h * w;
    let d = img.data();
    Tensor::from_fn(&[1, h, w], |i| f64::from((0..c).any(|ch| d[ch * n + i].abs() > tau)))
}

fn draw_params(spec: &GeneratorSpec, rng: &mut Rng) -> SampleParams {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let texture = spec.textures[rng.below(spec.textures.len())];
    let base = rng.below(PALETTE.len());
    let accent = (base + 1 + rng.below(PALETTE.len() - 1)) % PALETTE.len();
    let deformation = match spec.deformations[rng.below(spec.deformations.len())] {
        DeformationFamily::Affine => Deformation::Affine {
            scale: 1.0 + rng.uniform(-spec.max_scale_dev, spec.max_scale_dev),
            rotation: rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg).to_radians(),
            tx: rng.uniform(-spec.max_translation, spec.max_translation),
            ty: rng.uniform(-spec.max_translation, spec.max_translation),
        },
        DeformationFamily::SinusoidalBend => {
            let lo = bend_wavelength_min(spec.height);
            Deformation::Bend {
                ax: rng.uniform(-spec.max_bend, spec.max_bend),
                ay: rng.uniform(-spec.max_bend, spec.max_bend),
                wavelength: rng.uniform(lo, 1.6 * lo),
                phase: rng.uniform(0.0, 2.0 * PI),
            }
        }
    };
    let with_bar = match spec.occluder {
        OccluderSpec::None => false,
        OccluderSpec::ArmBar => true,
        OccluderSpec::Mixed => rng.bernoulli(0.5),
    };
    let arm_bar = with_bar.then(|| {
        (
            w * rng.uniform(0.4, 0.6),
            h * rng.uniform(0.45, 0.65),
            rng.uniform(0.0, PI),
        )
    });
    SampleParams {
        texture,
        base_color: PALETTE[base],
        accent_color: PALETTE[accent],
        long_sleeve: rng.bernoulli(0.5),
        deformation,
        arm_bar,
        texture_shift: rng.uniform(0.0, 8.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train: Vec<TryonSample>,
    pub val: Vec<TryonSample>,
    pub test: Vec<TryonSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[TryonSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<TryonSample> {
        match s {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Deterministic generation; each split draws from its own sub-seed.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut ds = Dataset {
        seed,
        height: spec.height,
        width: spec.width,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let limit = spec.height as f64 / 4.0;
    for split in Split::ALL {
        let count = match split {
            Split::Train => spec.train,
            Split::Val => spec.val,
            Split::Test => spec.test,
        };
        let mut rng = Rng::new(sub_seed(seed, split.name()));
        for i in 0..count {
            let params = draw_params(spec, &mut rng);
            let s = generate_sample(&params, spec.height, spec.width, &format!("{}-{i:04}", split.name()))?;
            debug_assert!(s.gt_flow.max_magnitude() <= limit + 1e-9);
            ds.split_mut(split).push(s);
        }
    }
    Ok(ds)
}

/// Outcome of [`verify_sample`]; `worst` is `(channel, y, x)` of the largest error.
#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    pub ok: bool,
    pub max_error: f64,
    pub worst: (usize, usize, usize),
    pub message: String,
}

/// Re-derive the ground-truth warp from `(garment, flow, mask)` and check invariants.
pub fn verify_sample(s: &TryonSample) -> Verification {
    let fail = |message: String| Verification {
        ok: false,
        max_error: f64::INFINITY,
        worst: (0, 0, 0),
        message,
    };
    let warped = match backward_warp(&s.garment, &s.gt_flow) {
        Ok(w) => w,
        Err(e) => return fail(format!("warp failed: {e}")),
    };
    let (c, h, w) = match s.gt_warp.chw() {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    if warped.shape() != s.gt_warp.shape() || s.occlusion.shape() != [1, h, w] {
        return fail("field shapes disagree".into());
    }
    for (name, t) in [("occlusion", &s.occlusion), ("coarse_body", &s.coarse_body)] {
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return fail(format!("{name} mask is not binary"));
        }
    }
    for (name, t) in [
        ("garment", &s.garment),
        ("pose", &s.pose),
        ("agnostic", &s.agnostic),
        ("person", &s.person),
        ("gt_warp", &s.gt_warp),
    ] {
        if t.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return fail(format!("{name} has values outside [-1, 1]"));
        }
    }
    let mut max_error = 0.0;
    let mut worst = (0, 0, 0);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let want = warped.at3(ch, y, x) * s.occlusion.at3(0, y, x);
                let err = (want - s.gt_warp.at3(ch, y, x)).abs();
                if err > max_error {
                    max_error = err;
                    worst = (ch, y, x);
                }
            }
        }
    }
    let ok = max_error < 1e-6;
    let message = if ok {
        "ok".to_string()
    } else {
        format!(
            "gt warp differs from warp(garment, flow)·mask by {max_error:.3e} at channel {} pixel ({}, {})",
            worst.0, worst.2, worst.1
        )
    };
    Verification {
        ok,
        max_error,
        worst,
        message,
    }
}

const FIELDS: [&str; 7] = ["garment", "pose", "agnostic", "gt_warp", "occlusion", "person", "coarse_body"];

fn field<'a>(s: &'a TryonSample, name: &str) -> &'a Tensor {
    match name {
        "garment" => &s.garment,
        "pose" => &s.pose,
        "agnostic" => &s.agnostic,
        "gt_warp" => &s.gt_warp,
        "occlusion" => &s.occlusion,
        "person" => &s.person,
        "coarse_body" => &s.coarse_body,
        _ => unreachable!("unknown field {name}"),
    }
}

/// Persist a dataset as `manifest.txt` plus one directory per sample.
pub fn save_dataset(ds: &Dataset, dir: &Path, previews: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let _ = writeln!(manifest, "tryon-dataset 1");
    let _ = writeln!(manifest, "seed {}", ds.seed);
    let _ = writeln!(manifest, "size {} {}", ds.height, ds.width);
    for split in Split::ALL {
        for s in ds.split(split) {
            let sdir = dir.join(split.name()).join(&s.id);
            std::fs::create_dir_all(&sdir)?;
            for name in FIELDS {
                write_pfm(field(s, name), &sdir.join(format!("{name}.pfm")))?;
                if previews {
                    write_png(field(s, name), &sdir.join(format!("{name}.png")))?;
                }
            }
            write_flow(&s.gt_flow, &sdir.join("flow.flo"))?;
            let _ = writeln!(manifest, "{}\t{}\t{}", split.name(), s.id, s.caption);
        }
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Read one sample directory (as written by [`save_dataset`]).
pub fn load_sample(sdir: &Path, id: &str, caption: &str) -> Result<TryonSample> {
    let read = |name: &str| read_pfm(&sdir.join(format!("{name}.pfm")));
    Ok(TryonSample {
        id: id.to_string(),
        garment: read("garment")?,
        pose: read("pose")?,
        agnostic: read("agnostic")?,
        gt_warp: read("gt_warp")?,
        occlusion: read("occlusion")?,
        person: read("person")?,
        coarse_body: read("coarse_body")?,
        gt_flow: read_flow(&sdir.join("flow.flo"))?,
        caption: caption.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let bad = |reason: String| Error::Dataset {
        path: dir.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(dir.join("manifest.txt")).map_err(|e| bad(format!("manifest.txt: {e}")))?;
    let mut lines = text.lines();
    if lines.next() != Some("tryon-dataset 1") {
        return Err(bad("unrecognised manifest header".into()));
    }
    let seed = lines
        .next()
        .and_then(|l| l.strip_prefix("seed "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad seed line".into()))?;
    let size: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("size "))
        .map(|v| v.split(' ').filter_map(|p| p.parse().ok()).collect())
        .ok_or_else(|| bad("bad size line".into()))?;
    let [height, width] = size[..] else {
        return Err(bad("bad size line".into()));
    };
    let mut ds = Dataset {
        seed,
        height,
        width,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for line in lines.filter(|l| !l.is_empty()) {
        let mut parts = line.splitn(3, '\t');
        let (Some(split), Some(id), Some(caption)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("bad manifest line `{line}`")));
        };
        let split = Split::parse(split).ok_or_else(|| bad(format!("unknown split `{split}`")))?;
        let sdir: PathBuf = dir.join(split.name()).join(id);
        let s = load_sample(&sdir, id, caption)?;
        if s.height() != height || s.width() != width {
            return Err(bad(format!("sample {id} has the wrong size")));
        }
        ds.split_mut(split).push(s);
    }
    Ok(ds)
}
