//! Boxes, overlap, and coordinate quantization.
//!
//! A [`BBox`] lives in continuous pixel coordinates `[0, image_size]` with
//! the corner convention `(x1, y1)` top-left, `(x2, y2)` bottom-right. The
//! decoder works on [`TokenSequence`]s instead: the four coordinates
//! quantized to integer bins `[x1, y1, x2, y2]`, one bin per pixel.

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, tagged with its image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub image_size: u32,
}

impl BBox {
    /// Builds a box, checking that every coordinate is finite and within
    /// `[0, image_size]`. Corner order is not enforced here; see
    /// [`BBox::canonicalize`].
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, image_size: u32) -> Result<BBox> {
        let b = BBox { x1, y1, x2, y2, image_size };
        let s = f64::from(image_size);
        for (name, v) in [("x1", x1), ("y1", y1), ("x2", x2), ("y2", y2)] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("bbox {name} is not finite")));
            }
            if !(0.0..=s).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "bbox {name}={v} outside [0, {s}]"
                )));
            }
        }
        Ok(b)
    }

    /// Reorders corners so that `x1 <= x2` and `y1 <= y2`.
    ///
    /// Idempotent, and preserves the multiset of corner coordinates per axis.
    pub fn canonicalize(&self) -> BBox {
        BBox {
            x1: self.x1.min(self.x2),
            x2: self.x1.max(self.x2),
            y1: self.y1.min(self.y2),
            y2: self.y1.max(self.y2),
            image_size: self.image_size,
        }
    }

    /// True when corners are already ordered.
    pub fn is_canonical(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    /// Zero-area boxes are representable and flagged here rather than
    /// rejected; training targets and sampler outputs exclude them.
    pub fn is_degenerate(&self) -> bool {
        self.x1 == self.x2 || self.y1 == self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Intersection over union of two canonical boxes on the same image.
///
/// Degenerate boxes have zero intersection with everything, so the result is
/// 0 unless the two boxes are identical (in which case it is 1 even when
/// degenerate, keeping `iou(b, b) == 1` unconditional).
///
/// ```
/// use locgen::geometry::{iou, BBox};
/// let a = BBox::new(0.0, 0.0, 10.0, 10.0, 64).unwrap();
/// let b = BBox::new(5.0, 5.0, 15.0, 15.0, 64).unwrap();
/// assert!((iou(&a, &b).unwrap() - 25.0 / 175.0).abs() < 1e-12);
/// ```
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if a.image_size != b.image_size {
        return Err(Error::InvalidArgument(format!(
            "iou on mismatched image sizes {} vs {}",
            a.image_size, b.image_size
        )));
    }
    if !a.is_canonical() || !b.is_canonical() {
        return Err(Error::InvalidArgument(
            "iou requires canonical boxes".into(),
        ));
    }
    if a == b {
        return Ok(1.0);
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        // Both degenerate and not identical.
        return Ok(0.0);
    }
    Ok(inter / union)
}

/// Four quantized box coordinates `[x1, y1, x2, y2]`, each in `[0, num_bins)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    tokens: [u32; 4],
    num_bins: u32,
}

impl TokenSequence {
    /// Validates range (`token < num_bins`) and corner order
    /// (`tokens[0] <= tokens[2]`, `tokens[1] <= tokens[3]`).
    pub fn new(tokens: [u32; 4], num_bins: u32) -> Result<TokenSequence> {
        if num_bins == 0 {
            return Err(Error::InvalidArgument("num_bins must be positive".into()));
        }
        for (i, &t) in tokens.iter().enumerate() {
            if t >= num_bins {
                return Err(Error::InvalidArgument(format!(
                    "token[{i}]={t} out of range for {num_bins} bins"
                )));
            }
        }
        if tokens[0] > tokens[2] || tokens[1] > tokens[3] {
            return Err(Error::InvalidArgument(format!(
                "tokens {tokens:?} are not in canonical corner order"
            )));
        }
        Ok(TokenSequence { tokens, num_bins })
    }

    pub fn tokens(&self) -> [u32; 4] {
        self.tokens
    }

    pub fn num_bins(&self) -> u32 {
        self.num_bins
    }
}

/// Quantizes a canonical box to one bin per pixel (`num_bins == image_size`).
///
/// Each coordinate maps to `clamp(floor(coord), 0, num_bins - 1)`, so the two
/// degenerate pixels of information lost at the far edge come back one pixel
/// short under [`dequantize`]; everything else round-trips exactly.
pub fn quantize(b: &BBox) -> Result<TokenSequence> {
    quantize_to_bins(b, b.image_size)
}

/// Quantizes a canonical box onto an arbitrary bin grid:
/// `clamp(floor(coord · num_bins / image_size), 0, num_bins - 1)`. With
/// `num_bins == image_size` this is exactly [`quantize`].
pub fn quantize_to_bins(b: &BBox, num_bins: u32) -> Result<TokenSequence> {
    if !b.is_canonical() {
        return Err(Error::InvalidArgument("quantize requires a canonical box".into()));
    }
    if num_bins == 0 || b.image_size == 0 {
        return Err(Error::InvalidArgument("num_bins and image_size must be positive".into()));
    }
    let scale = f64::from(num_bins) / f64::from(b.image_size);
    let q = |v: f64| -> u32 { ((v * scale).floor().max(0.0) as u32).min(num_bins - 1) };
    TokenSequence::new([q(b.x1), q(b.y1), q(b.x2), q(b.y2)], num_bins)
}

/// Maps tokens back to pixel coordinates (bin index = left/top edge of the
/// bin). The result is always canonical; it may be degenerate when a pair of
/// opposite coordinates shares a bin.
pub fn dequantize(t: &TokenSequence) -> BBox {
    let [a, b, c, d] = t.tokens;
    BBox {
        x1: f64::from(a),
        y1: f64::from(b),
        x2: f64::from(c),
        y2: f64::from(d),
        image_size: t.num_bins,
    }
}

/// Maps tokens back to pixel coordinates on an arbitrary image size (bin
/// index → left/top edge of the bin). Inverse of [`quantize_to_bins`] up to
/// the within-bin remainder.
pub fn dequantize_to_image(t: &TokenSequence, image_size: u32) -> Result<BBox> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be positive".into()));
    }
    let scale = f64::from(image_size) / f64::from(t.num_bins);
    let [a, b, c, d] = t.tokens;
    Ok(BBox {
        x1: f64::from(a) * scale,
        y1: f64::from(b) * scale,
        x2: f64::from(c) * scale,
        y2: f64::from(d) * scale,
        image_size,
    })
}
