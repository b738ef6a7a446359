//! Spatial machinery: stencil masks, region labelling of latent cells,
//! overcoat masking of stenciled content, pinning of unstenciled cells, the
//! canvas/latent codec and final compositing onto the canvas.

use image::{GrayImage, Luma, Rgba, RgbaImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{out_of_range, Error, Result};
use crate::rng::SeededStream;
use crate::scheduler::{check_latent_shape, Latent, NoiseSchedule};

/// Maps canvas images to latents and back.
pub trait Codec: Send + Sync {
    /// Canvas pixels per latent cell along each axis.
    fn scale(&self) -> usize;

    fn channels(&self) -> usize;

    /// Encodes RGB; alpha is ignored.
    fn encode(&self, image: &RgbaImage) -> Result<Latent>;

    /// Decodes to an opaque image.
    fn decode(&self, latent: &Latent) -> RgbaImage;
}

/// Average-pool codec: each 8x8 pixel block becomes one latent cell holding
/// RGB scaled to `[-1, 1]`. Decoding is nearest-neighbour upsampling, so
/// images that are constant within each block survive a round trip exactly.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyCodec;

impl ToyCodec {
    pub const SCALE: usize = 8;
}

impl Codec for ToyCodec {
    fn scale(&self) -> usize {
        Self::SCALE
    }

    fn channels(&self) -> usize {
        3
    }

    fn encode(&self, image: &RgbaImage) -> Result<Latent> {
        let f = Self::SCALE;
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w % f != 0 || h % f != 0 || w == 0 || h == 0 {
            return Err(Error::ShapeMismatch {
                expected: vec![h.div_ceil(f).max(1) * f, w.div_ceil(f).max(1) * f],
                found: vec![h, w],
            });
        }
        let (hl, wl) = (h / f, w / f);
        let mut sums = Array3::<f64>::zeros((3, hl, wl));
        for (x, y, px) in image.enumerate_pixels() {
            let (cy, cx) = (y as usize / f, x as usize / f);
            for c in 0..3 {
                sums[(c, cy, cx)] += px.0[c] as f64 / 127.5 - 1.0;
            }
        }
        let n = (f * f) as f64;
        Latent::new(sums.mapv(|s| (s / n) as f32))
    }

    fn decode(&self, latent: &Latent) -> RgbaImage {
        let f = Self::SCALE;
        let (c, hl, wl) = latent.shape();
        let data = latent.data();
        RgbaImage::from_fn((wl * f) as u32, (hl * f) as u32, |x, y| {
            let (cy, cx) = (y as usize / f, x as usize / f);
            let mut px = [0u8, 0, 0, 255];
            for (ch, out) in px.iter_mut().take(3.min(c)).enumerate() {
                let v = (data[(ch, cy, cx)] as f64).clamp(-1.0, 1.0);
                *out = ((v + 1.0) * 127.5).round() as u8;
            }
            Rgba(px)
        })
    }
}

/// Cells are stenciled if any covered canvas pixel is.
fn downsample_any(mask: &Array2<bool>, scale: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h.div_ceil(scale), w.div_ceil(scale)), false);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            out[(y / scale, x / scale)] = true;
        }
    }
    out
}

/// Brushed generation area at canvas resolution plus its latent footprint.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilMask {
    bitmap: Array2<bool>,
    latent_mask: Array2<bool>,
    scale: usize,
}

impl StencilMask {
    pub fn from_bitmap(bitmap: Array2<bool>, scale: usize) -> Result<Self> {
        let (h, w) = bitmap.dim();
        if scale == 0 || h % scale != 0 || w % scale != 0 {
            return Err(out_of_range(
                "stencil size",
                format!("{h}x{w} at scale {scale}"),
            ));
        }
        let latent_mask = downsample_any(&bitmap, scale);
        Ok(Self {
            bitmap,
            latent_mask,
            scale,
        })
    }

    /// Whole canvas stenciled.
    pub fn full(height: usize, width: usize, scale: usize) -> Result<Self> {
        Self::from_bitmap(Array2::from_elem((height, width), true), scale)
    }

    /// Union of axis-aligned `[x, y, w, h]` rectangles, clipped to the canvas.
    pub fn from_rects(
        height: usize,
        width: usize,
        scale: usize,
        rects: &[[usize; 4]],
    ) -> Result<Self> {
        let mut bitmap = Array2::from_elem((height, width), false);
        for &[x, y, w, h] in rects {
            for yy in y..(y + h).min(height) {
                for xx in x..(x + w).min(width) {
                    bitmap[(yy, xx)] = true;
                }
            }
        }
        Self::from_bitmap(bitmap, scale)
    }

    /// Stencil from a mask raster: any nonzero pixel is stenciled.
    pub fn from_luma(mask: &GrayImage, scale: usize) -> Result<Self> {
        let bitmap =
            Array2::from_shape_fn((mask.height() as usize, mask.width() as usize), |(y, x)| {
                mask.get_pixel(x as u32, y as u32).0[0] > 0
            });
        Self::from_bitmap(bitmap, scale)
    }

    /// Mask raster with stenciled pixels at 255.
    pub fn to_luma(&self) -> GrayImage {
        let (h, w) = self.bitmap.dim();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if self.bitmap[(y as usize, x as usize)] {
                255
            } else {
                0
            }])
        })
    }

    pub fn bitmap(&self) -> &Array2<bool> {
        &self.bitmap
    }

    pub fn latent_mask(&self) -> &Array2<bool> {
        &self.latent_mask
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn is_empty(&self) -> bool {
        !self.latent_mask.iter().any(|&v| v)
    }
}

/// Per-cell label: stenciled or not, crossed with empty or filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    /// Stenciled, empty.
    A1,
    /// Stenciled over existing content.
    A2,
    /// Outside the stencil, empty.
    B,
    /// Outside the stencil, filled.
    C,
}

impl Region {
    pub fn classify(stenciled: bool, filled: bool) -> Region {
        match (stenciled, filled) {
            (true, false) => Region::A1,
            (true, true) => Region::A2,
            (false, false) => Region::B,
            (false, true) => Region::C,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    labels: Array2<Region>,
}

impl RegionMap {
    pub fn labels(&self) -> &Array2<Region> {
        &self.labels
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&r| r == region).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// Canvas pixels carrying content (alpha above zero).
pub fn filled_mask(canvas: &RgbaImage) -> Array2<bool> {
    Array2::from_shape_fn(
        (canvas.height() as usize, canvas.width() as usize),
        |(y, x)| canvas.get_pixel(x as u32, y as u32).0[3] > 0,
    )
}

/// Labels every latent cell from the canvas content mask and the stencil.
pub fn classify_regions(canvas_filled: &Array2<bool>, stencil: &StencilMask) -> Result<RegionMap> {
    if canvas_filled.dim() != stencil.bitmap.dim() {
        let (a, b) = (canvas_filled.dim(), stencil.bitmap.dim());
        return Err(Error::ShapeMismatch {
            expected: vec![b.0, b.1],
            found: vec![a.0, a.1],
        });
    }
    let filled = downsample_any(canvas_filled, stencil.scale);
    let labels = Array2::from_shape_fn(filled.dim(), |i| {
        Region::classify(stencil.latent_mask[i], filled[i])
    });
    Ok(RegionMap { labels })
}

/// Source-over stack of equally sized layers, bottom first.
pub fn stack_layers(layers: &[&RgbaImage]) -> Result<RgbaImage> {
    let Some(first) = layers.first() else {
        return Err(out_of_range("layer count", 0));
    };
    let mut out = RgbaImage::new(first.width(), first.height());
    for layer in layers {
        if layer.dimensions() != out.dimensions() {
            return Err(Error::ShapeMismatch {
                expected: vec![out.height() as usize, out.width() as usize],
                found: vec![layer.height() as usize, layer.width() as usize],
            });
        }
        for (dst, src) in out.pixels_mut().zip(layer.pixels()) {
            *dst = over(src.0, dst.0);
        }
    }
    Ok(out)
}

fn over(src: [u8; 4], dst: [u8; 4]) -> Rgba<u8> {
    let sa = src[3] as f64 / 255.0;
    let da = dst[3] as f64 / 255.0;
    let oa = sa + da * (1.0 - sa);
    if oa == 0.0 {
        return Rgba([0, 0, 0, 0]);
    }
    let mut px = [0u8; 4];
    for c in 0..3 {
        let v = (src[c] as f64 * sa + dst[c] as f64 * da * (1.0 - sa)) / oa;
        px[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    px[3] = (oa * 255.0).round() as u8;
    Rgba(px)
}

/// Composites a canvas over white so empty pixels encode as background.
pub fn flatten_on_white(canvas: &RgbaImage) -> RgbaImage {
    let mut out = canvas.clone();
    for px in out.pixels_mut() {
        let a = px.0[3] as u32;
        if a == 255 {
            continue;
        }
        for c in 0..3 {
            let v = (px.0[c] as u32 * a + 255 * (255 - a) + 127) / 255;
            px.0[c] = v as u8;
        }
        px.0[3] = 255;
    }
    out
}

/// Overcoat percentage and the seed of its noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvercoatConfig {
    pub overcoat: f64,
    pub seed: u64,
}

impl OvercoatConfig {
    pub fn new(overcoat: f64, seed: u64) -> Result<Self> {
        if !(0.0..=100.0).contains(&overcoat) {
            return Err(out_of_range("overcoat", overcoat));
        }
        Ok(Self { overcoat, seed })
    }

    /// Whether stenciled content is re-pinned at step `k` of `total`:
    /// `k < (1 - o/100) * K`, compared as `100 k < (100 - o) K`.
    pub fn pins_content(&self, k: usize, total: usize) -> bool {
        (100.0 * k as f64) < (100.0 - self.overcoat) * total as f64
    }
}

fn copy_cells(dst: &mut Array3<f32>, src: &Array3<f32>, y: usize, x: usize) {
    for c in 0..dst.dim().0 {
        dst[(c, y, x)] = src[(c, y, x)];
    }
}

/// Applies the region rules ahead of the denoiser call at step `k`.
///
/// A fresh noise draw for the whole latent is taken from `rng` every call,
/// row-major, whether or not any cell ends up replaced.
#[allow(clippy::too_many_arguments)]
pub fn mask_step(
    latent: &Latent,
    content: &Latent,
    regions: &RegionMap,
    k: usize,
    cfg: &OvercoatConfig,
    schedule: &NoiseSchedule,
    rng: &mut SeededStream,
) -> Result<Latent> {
    check_latent_shape(latent.shape(), content.shape())?;
    let (_, h, w) = latent.shape();
    if regions.dim() != (h, w) {
        let (rh, rw) = regions.dim();
        return Err(Error::ShapeMismatch {
            expected: vec![h, w],
            found: vec![rh, rw],
        });
    }
    if !(0.0..=100.0).contains(&cfg.overcoat) {
        return Err(out_of_range("overcoat", cfg.overcoat));
    }
    let noised = schedule.add_noise(content, k, rng)?;
    let pin_a2 = cfg.pins_content(k, schedule.inference_steps());
    let mut out = latent.clone();
    for ((y, x), region) in regions.labels.indexed_iter() {
        let replace = match region {
            Region::A1 => false,
            Region::A2 => pin_a2,
            Region::B | Region::C => true,
        };
        if replace {
            copy_cells(out.data_mut(), noised.data(), y, x);
        }
    }
    Ok(out)
}

/// Restores cells that were still pinned at the last denoising step to their
/// clean content values: unstenciled cells always, stenciled content only
/// when the overcoat kept it pinned through the final step.
pub fn finalize(
    latent: &Latent,
    content: &Latent,
    regions: &RegionMap,
    cfg: &OvercoatConfig,
    total_steps: usize,
) -> Result<Latent> {
    check_latent_shape(latent.shape(), content.shape())?;
    let pin_a2 = total_steps > 0 && cfg.pins_content(total_steps - 1, total_steps);
    let mut out = latent.clone();
    for ((y, x), region) in regions.labels.indexed_iter() {
        let pinned = match region {
            Region::A1 => false,
            Region::A2 => pin_a2,
            Region::B | Region::C => true,
        };
        if pinned {
            copy_cells(out.data_mut(), content.data(), y, x);
        }
    }
    Ok(out)
}

/// Writes the decoded result into stenciled pixels; every other pixel keeps
/// its prior value.
pub fn composite(
    final_latent: &Latent,
    codec: &dyn Codec,
    stencil: &StencilMask,
    prior: &RgbaImage,
) -> Result<RgbaImage> {
    let decoded = codec.decode(final_latent);
    if decoded.dimensions() != prior.dimensions()
        || stencil.bitmap.dim() != (prior.height() as usize, prior.width() as usize)
    {
        return Err(Error::ShapeMismatch {
            expected: vec![prior.height() as usize, prior.width() as usize],
            found: vec![decoded.height() as usize, decoded.width() as usize],
        });
    }
    let mut out = prior.clone();
    for ((y, x), &on) in stencil.bitmap.indexed_iter() {
        if on {
            out.put_pixel(x as u32, y as u32, *decoded.get_pixel(x as u32, y as u32));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_image(hl: usize, wl: usize) -> RgbaImage {
        RgbaImage::from_fn((wl * 8) as u32, (hl * 8) as u32, |x, y| {
            let (cx, cy) = (x / 8, y / 8);
            Rgba([
                (cx * 37 % 256) as u8,
                (cy * 91 % 256) as u8,
                ((cx + cy) * 13) as u8,
                255,
            ])
        })
    }

    #[test]
    fn codec_round_trip_on_block_constant_images() {
        let img = block_image(4, 3);
        let latent = ToyCodec.encode(&img).unwrap();
        assert_eq!(latent.shape(), (3, 4, 3));
        assert_eq!(ToyCodec.decode(&latent), img);
    }

    #[test]
    fn codec_rejects_unaligned() {
        assert!(ToyCodec.encode(&RgbaImage::new(10, 8)).is_err());
    }

    #[test]
    fn stencil_downsample_dilates() {
        let mut bm = Array2::from_elem((16, 16), false);
        bm[(9, 2)] = true;
        let s = StencilMask::from_bitmap(bm, 8).unwrap();
        assert_eq!(
            s.latent_mask(),
            &ndarray::array![[false, false], [true, false]]
        );
        assert!(!s.is_empty());
        assert!(StencilMask::from_rects(16, 16, 8, &[]).unwrap().is_empty());
    }

    #[test]
    fn region_endpoints() {
        let full = StencilMask::full(16, 16, 8).unwrap();
        let empty = Array2::from_elem((16, 16), false);
        let painted = Array2::from_elem((16, 16), true);
        assert_eq!(
            classify_regions(&empty, &full).unwrap().count(Region::A1),
            4
        );
        let none = StencilMask::from_rects(16, 16, 8, &[]).unwrap();
        assert_eq!(
            classify_regions(&painted, &none).unwrap().count(Region::C),
            4
        );
        assert!(classify_regions(&Array2::from_elem((8, 16), false), &full).is_err());
    }

    #[test]
    fn overcoat_threshold() {
        let k_total = 50;
        let pinned = |o: f64| -> Vec<usize> {
            let cfg = OvercoatConfig::new(o, 0).unwrap();
            (0..k_total)
                .filter(|&k| cfg.pins_content(k, k_total))
                .collect()
        };
        assert!(pinned(100.0).is_empty());
        assert_eq!(pinned(0.0), (0..50).collect::<Vec<_>>());
        assert_eq!(pinned(50.0), (0..25).collect::<Vec<_>>());
        assert_eq!(pinned(25.0).len(), 38);
        assert_eq!(pinned(75.0).len(), 13);
        assert!(OvercoatConfig::new(100.5, 0).is_err());
        assert!(OvercoatConfig::new(-1.0, 0).is_err());
    }

    #[test]
    fn flatten_renders_empty_as_white() {
        let mut img = RgbaImage::new(2, 1);
        img.put_pixel(1, 0, Rgba([10, 20, 30, 255]));
        let flat = flatten_on_white(&img);
        assert_eq!(flat.get_pixel(0, 0).0, [255, 255, 255, 255]);
        assert_eq!(flat.get_pixel(1, 0).0, [10, 20, 30, 255]);
    }

    #[test]
    fn composite_keeps_unstenciled_pixels() {
        let prior = RgbaImage::from_fn(16, 16, |x, y| Rgba([x as u8, y as u8, 7, (x * y) as u8]));
        let stencil = StencilMask::from_rects(16, 16, 8, &[[3, 3, 5, 9]]).unwrap();
        let latent = Latent::new(Array3::from_elem((3, 2, 2), 0.5)).unwrap();
        let out = composite(&latent, &ToyCodec, &stencil, &prior).unwrap();
        for ((y, x), &on) in stencil.bitmap().indexed_iter() {
            let (x, y) = (x as u32, y as u32);
            if on {
                assert_eq!(out.get_pixel(x, y).0, [191, 191, 191, 255]);
            } else {
                assert_eq!(out.get_pixel(x, y), prior.get_pixel(x, y));
            }
        }
        // Empty stencil complement: whole decode written.
        let full = StencilMask::full(16, 16, 8).unwrap();
        assert_eq!(
            composite(&latent, &ToyCodec, &full, &prior).unwrap(),
            ToyCodec.decode(&latent)
        );
    }

    #[test]
    fn mask_step_rejects_bad_inputs() {
        let s = NoiseSchedule::new(10).unwrap();
        let regions = classify_regions(
            &Array2::from_elem((16, 16), false),
            &StencilMask::full(16, 16, 8).unwrap(),
        )
        .unwrap();
        let cfg = OvercoatConfig {
            overcoat: 120.0,
            seed: 0,
        };
        let l = Latent::zeros((3, 2, 2));
        let mut rng = SeededStream::new(1);
        assert!(mask_step(&l, &l, &regions, 0, &cfg, &s, &mut rng).is_err());
        let ok = OvercoatConfig::new(10.0, 0).unwrap();
        assert!(mask_step(
            &l,
            &Latent::zeros((3, 2, 3)),
            &regions,
            0,
            &ok,
            &s,
            &mut rng
        )
        .is_err());
    }
}
