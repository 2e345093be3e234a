//! Local-global hybrid perspective sampling.
//!
//! Each image is routed through either a local view (a random crop, resized)
//! or a global view (the whole image, resized). The branch is decided by a
//! draw from `Normal(0.5, 1/6)`: values above the mean select the local view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::losses::ImageTensor;

pub const DECISION_MEAN: f64 = 0.5;
pub const DECISION_VARIANCE: f64 = 1.0 / 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Local,
    Global,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Local => "local",
            Branch::Global => "global",
        }
    }
}

/// A raw normal draw and the branch it selects. The draw is kept unclipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LhpDecision {
    pub sampled_value: f64,
    pub branch: Branch,
}

impl LhpDecision {
    pub fn from_value(sampled_value: f64) -> Self {
        let branch = if sampled_value > DECISION_MEAN {
            Branch::Local
        } else {
            Branch::Global
        };
        Self {
            sampled_value,
            branch,
        }
    }
}

fn decision_distribution() -> Normal<f64> {
    Normal::new(DECISION_MEAN, DECISION_VARIANCE.sqrt()).expect("constant parameters are valid")
}

/// Draws one routing decision.
pub fn sample_decision<R: Rng + ?Sized>(rng: &mut R) -> LhpDecision {
    LhpDecision::from_value(decision_distribution().sample(rng))
}

/// Geometry of the local crop: the kept area fraction is uniform in
/// `[min_scale, max_scale]` and the aspect ratio is log-uniform in
/// `[1 / (1 + aspect_jitter), 1 + aspect_jitter]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    min_scale: f64,
    max_scale: f64,
    aspect_jitter: f64,
}

impl CropSpec {
    pub fn new(min_scale: f64, max_scale: f64, aspect_jitter: f64) -> Result<Self> {
        let in_unit = |s: f64| s > 0.0 && s <= 1.0;
        if !in_unit(min_scale) || !in_unit(max_scale) || min_scale > max_scale {
            return Err(Error::param(format!(
                "crop scales must satisfy 0 < min <= max <= 1, got [{min_scale}, {max_scale}]"
            )));
        }
        if !(aspect_jitter >= 0.0 && aspect_jitter.is_finite()) {
            return Err(Error::param(format!(
                "aspect jitter must be non-negative, got {aspect_jitter}"
            )));
        }
        Ok(Self {
            min_scale,
            max_scale,
            aspect_jitter,
        })
    }

    pub fn min_scale(&self) -> f64 {
        self.min_scale
    }

    pub fn max_scale(&self) -> f64 {
        self.max_scale
    }

    pub fn aspect_jitter(&self) -> f64 {
        self.aspect_jitter
    }
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            min_scale: 0.5,
            max_scale: 0.9,
            aspect_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizeFilter {
    #[default]
    Nearest,
    Bilinear,
}

/// Everything needed to produce a view of an image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub crop: CropSpec,
    pub output_height: usize,
    pub output_width: usize,
    pub filter: ResizeFilter,
}

impl ViewTransform {
    pub fn new(crop: CropSpec, output_height: usize, output_width: usize) -> Result<Self> {
        if output_height == 0 || output_width == 0 {
            return Err(Error::param("output size must be non-zero"));
        }
        Ok(Self {
            crop,
            output_height,
            output_width,
            filter: ResizeFilter::Nearest,
        })
    }

    pub fn with_filter(mut self, filter: ResizeFilter) -> Self {
        self.filter = filter;
        self
    }
}

/// A rectangle in pixel coordinates, half-open on the bottom/right edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageTensor,
    pub region: CropRect,
}

fn image_dims(image: &ImageTensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w, 1)),
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::shape(format!(
            "expected an image of shape [H, W] or [H, W, C], got {s:?}"
        ))),
    }
}

/// Picks the local crop rectangle. Always inside the image.
pub fn sample_crop<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    crop: &CropSpec,
    rng: &mut R,
) -> CropRect {
    let u: f64 = rng.random();
    let scale = crop.min_scale + (crop.max_scale - crop.min_scale) * u;
    let ratio = if crop.aspect_jitter > 0.0 {
        let span = (1.0 + crop.aspect_jitter).ln();
        rng.random_range(-span..=span).exp()
    } else {
        1.0
    };
    // Sides scale with the image's own aspect, so scale 1 with no jitter is
    // the whole image.
    let w = ((width as f64 * (scale * ratio).sqrt()).round() as usize).clamp(1, width);
    let h = ((height as f64 * (scale / ratio).sqrt()).round() as usize).clamp(1, height);
    let top = rng.random_range(0..=height - h);
    let left = rng.random_range(0..=width - w);
    CropRect {
        top,
        left,
        height: h,
        width: w,
    }
}

fn nearest_src(dst: usize, src_len: usize, dst_len: usize) -> usize {
    let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    x.min(src_len - 1)
}

fn bilinear_src(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
        .clamp(0.0, (src_len - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, x - lo as f64)
}

/// Resizes the `region` of `image` to `out_h x out_w`.
pub fn resize_region(
    image: &ImageTensor,
    region: CropRect,
    out_h: usize,
    out_w: usize,
    filter: ResizeFilter,
) -> Result<ImageTensor> {
    let (h, w, c) = image_dims(image)?;
    if region.height == 0
        || region.width == 0
        || region.top + region.height > h
        || region.left + region.width > w
    {
        return Err(Error::shape(format!(
            "region {region:?} does not fit in a {h}x{w} image"
        )));
    }
    let src = image.as_slice();
    let px = |y: usize, x: usize, ch: usize| src[((region.top + y) * w + region.left + x) * c + ch];
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ch in 0..c {
                let v = match filter {
                    ResizeFilter::Nearest => px(
                        nearest_src(oy, region.height, out_h),
                        nearest_src(ox, region.width, out_w),
                        ch,
                    ),
                    ResizeFilter::Bilinear => {
                        let (y0, y1, fy) = bilinear_src(oy, region.height, out_h);
                        let (x0, x1, fx) = bilinear_src(ox, region.width, out_w);
                        let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                        let bottom = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                        top * (1.0 - fy) + bottom * fy
                    }
                };
                out.push(v);
            }
        }
    }
    let shape = if image.shape().len() == 2 {
        vec![out_h, out_w]
    } else {
        vec![out_h, out_w, c]
    };
    Ok(ImageTensor::from_parts_unchecked(shape, out))
}

/// Produces the local or global view selected by `decision`. Both branches
/// return the configured output size.
pub fn apply_transform<R: Rng + ?Sized>(
    image: &ImageTensor,
    decision: &LhpDecision,
    transform: &ViewTransform,
    rng: &mut R,
) -> Result<View> {
    let (h, w, _) = image_dims(image)?;
    let region = match decision.branch {
        Branch::Local => sample_crop(h, w, &transform.crop, rng),
        Branch::Global => CropRect {
            top: 0,
            left: 0,
            height: h,
            width: w,
        },
    };
    let image = resize_region(
        image,
        region,
        transform.output_height,
        transform.output_width,
        transform.filter,
    )?;
    Ok(View { image, region })
}

/// A seeded decision stream.
#[derive(Debug, Clone)]
pub struct LhpSampler {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl LhpSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: decision_distribution(),
        }
    }

    pub fn next_decision(&mut self) -> LhpDecision {
        LhpDecision::from_value(self.normal.sample(&mut self.rng))
    }

    /// Samples a decision and applies it, drawing crop geometry from the
    /// same stream.
    pub fn view(&mut self, image: &ImageTensor, transform: &ViewTransform) -> Result<(LhpDecision, View)> {
        let decision = self.next_decision();
        let view = apply_transform(image, &decision, transform, &mut self.rng)?;
        Ok((decision, view))
    }

    pub fn decisions(&mut self, count: usize) -> Vec<LhpDecision> {
        (0..count).map(|_| self.next_decision()).collect()
    }
}
