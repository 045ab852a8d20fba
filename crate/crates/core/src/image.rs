//! Images, patch extraction, PGM/PPM IO, and the image encoder branch.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{encoder_stack, AttentionMask, Ctx, EncoderLayerParams, Initializer, ParamId};
use crate::tensor::{Tensor, Var};

/// Fixed per-pixel standardization applied before patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

/// `height x width x channels` pixels in `[0, 1]`, stored row-major with
/// channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::Data(format!(
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// 8-bit samples scaled by `1/255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect()
    }
}

pub fn check_patch_grid(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image of height {height} and width {width} does not tile into patches of size {patch}"
        )));
    }
    Ok(())
}

/// Non-overlapping `patch x patch` tiles in reading order, each flattened
/// row-major (channels innermost): `[num_patches, patch * patch * C]`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    check_patch_grid(img.height, img.width, patch)?;
    let (rows, cols) = (img.height / patch, img.width / patch);
    let dim = patch * patch * img.channels;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for py in 0..rows {
        for px in 0..cols {
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * img.width + px * patch) * img.channels;
                data.extend_from_slice(&img.pixels[start..start + patch * img.channels]);
            }
        }
    }
    Tensor::new(vec![rows * cols, dim], data)
}

/// Standardized patches of a batch of equally sized images:
/// `[B, num_patches, patch * patch * C]`.
pub fn image_patches(images: &[&Image], patch: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Dimension("no images in batch".into()))?;
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for img in images {
        if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
            return Err(Error::Dimension(format!(
                "image {}x{}x{} in a batch of {}x{}x{}",
                img.height, img.width, img.channels, first.height, first.width, first.channels
            )));
        }
        let t = patchify(img, patch)?;
        shape = t.shape().to_vec();
        data.extend(t.data().iter().map(|p| (p - PIXEL_MEAN) / PIXEL_STD));
    }
    shape.insert(0, images.len());
    Tensor::new(shape, data)
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Data("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Data("truncated PNM header".into()));
    }
    Ok((fields, i + 1))
}

/// Decodes binary PGM (`P5`, one channel) or PPM (`P6`, three channels)
/// with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let (fields, offset) = header_fields(bytes, 4)?;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Data(format!("unsupported image magic `{m}`"))),
    };
    let num = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Data(format!("bad PNM header field `{s}`"))) };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Data(format!("maxval {maxval}, expected 255")));
    }
    let n = width * height * channels;
    let raster = bytes
        .get(offset..offset + n)
        .ok_or_else(|| Error::Data(format!("raster shorter than {n} bytes")))?;
    Image::from_u8(height, width, channels, raster)
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::Data(format!("cannot store {} channels as PNM", img.channels)));
    }
    std::fs::write(path, encode_pnm(img)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ImageBranchParams {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub num_patches: usize,
}

impl ImageBranchParams {
    pub fn init(
        init: &mut Initializer<'_>,
        num_patches: usize,
        patch_dim: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
        layers: usize,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("image branch needs at least one layer".into()));
        }
        Ok(Self {
            patch_w: init.xavier("image.patch.w", patch_dim, d)?,
            patch_b: init.zeros("image.patch.b", &[d])?,
            cls: init.normal("image.cls", &[d], 0.1)?,
            pos_emb: init.normal("image.pos_emb", &[num_patches + 1, d], 0.1)?,
            layers: (0..layers)
                .map(|i| EncoderLayerParams::init(init, &format!("image.layer.{i}"), d, heads, d_ff))
                .collect::<Result<_>>()?,
            num_patches,
        })
    }
}

/// `h_I` for a batch of standardized patches `[B, p, patch_dim]`: project,
/// prepend `[CLS]`, add positions, encode with every position visible, and
/// take row 0. Returns `[B, d]`.
pub fn encode_image(ctx: &mut Ctx, params: &ImageBranchParams, patches: &Tensor) -> Result<Var> {
    let &[b, p, _] = patches.shape() else {
        return Err(Error::Dimension(format!("patches must be [B, p, dim], got {:?}", patches.shape())));
    };
    if p != params.num_patches {
        return Err(Error::Dimension(format!("{p} patches, model expects {}", params.num_patches)));
    }
    let x = ctx.tape.constant(patches.clone());
    let tokens = ctx.linear(x, params.patch_w, params.patch_b)?;
    let cls = ctx.p(params.cls);
    let cls = ctx.tape.expand(cls, &[b, 1])?;
    let seq = ctx.tape.concat(&[cls, tokens], 1)?;
    let pos = ctx.p(params.pos_emb);
    let seq = ctx.tape.add_broadcast(seq, pos)?;
    let h = encoder_stack(ctx, seq, &params.layers, &AttentionMask::all_valid(b, p + 1))?;
    ctx.tape.select(h, 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, weighted_sum, Coverage, REL_ERR_TOL};
    use crate::nn::ParamStore;
    use crate::rng::Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_u8(h, w, 1, &(0..h * w).map(|i| i as u8).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn single_patch_is_reading_order() {
        let img = ramp(4, 4);
        let t = patchify(&img, 4).unwrap();
        assert_eq!(t.shape(), &[1, 16]);
        assert_eq!(t.data(), img.pixels());
    }

    #[test]
    fn sixteen_patches_of_sixteen() {
        assert_eq!(patchify(&ramp(16, 16), 4).unwrap().shape(), &[16, 16]);
    }

    #[test]
    fn ramp_patch_index_oracle() {
        let (w, p) = (8, 4);
        let t = patchify(&ramp(8, 8), p).unwrap();
        for (patch_idx, (py, px)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for dy in 0..p {
                for dx in 0..p {
                    let want = ((py * p + dy) * w + px * p + dx) as f64 / 255.0;
                    assert_eq!(t.data()[patch_idx * 16 + dy * p + dx], want);
                }
            }
        }
        assert_eq!(t.row(3)[0], 36.0 / 255.0);
        assert_eq!(t.row(3)[15], 63.0 / 255.0);
    }

    #[test]
    fn multichannel_patches_keep_channels_innermost() {
        let img = Image::from_u8(2, 2, 3, &(0..12).collect::<Vec<u8>>()).unwrap();
        let t = patchify(&img, 1).unwrap();
        assert_eq!(t.shape(), &[4, 3]);
        assert_eq!(t.row(2), &[6.0 / 255.0, 7.0 / 255.0, 8.0 / 255.0]);
    }

    #[test]
    fn non_divisible_grid_names_dimensions() {
        let err = patchify(&ramp(6, 8), 4).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains('6') && msg.contains('8') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn pnm_round_trip() {
        for c in [1, 3] {
            let bytes: Vec<u8> = (0..4 * 6 * c).map(|i| (i * 7 % 256) as u8).collect();
            let img = Image::from_u8(4, 6, c, &bytes).unwrap();
            let back = decode_pnm(&encode_pnm(&img)).unwrap();
            assert_eq!(back, img);
            assert_eq!(back.to_u8(), bytes);
        }
        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pnm(with_comment).unwrap().pixels(), &[0.0, 1.0]);
        assert!(decode_pnm(b"P5\n2 1\n65535\n\x00\x00").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
    }

    struct Fixture {
        store: ParamStore,
        params: ImageBranchParams,
    }

    fn fixture(seed: u64, side: usize, patch: usize) -> Fixture {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = (side / patch).pow(2);
        let params = ImageBranchParams::init(
            &mut Initializer {
                store: &mut store,
                rng: &mut rng,
            },
            p,
            patch * patch,
            8,
            2,
            16,
            1,
        )
        .unwrap();
        Fixture { store, params }
    }

    fn encode(f: &Fixture, patches: &Tensor) -> Vec<f64> {
        let mut ctx = Ctx::eval(&f.store);
        let h = encode_image(&mut ctx, &f.params, patches).unwrap();
        assert_eq!(ctx.tape.shape(h), &[patches.shape()[0], 8]);
        ctx.tape.data(h).to_vec()
    }

    #[test]
    fn identical_images_encode_identically() {
        let f = fixture(2, 8, 4);
        let img = ramp(8, 8);
        let h = encode(&f, &image_patches(&[&img, &img], 4).unwrap());
        assert_eq!(h[..8], h[8..]);
        assert_eq!(h, encode(&f, &image_patches(&[&img, &img], 4).unwrap()));
    }

    #[test]
    fn swapping_patches_changes_output() {
        let f = fixture(3, 8, 4);
        let patches = image_patches(&[&ramp(8, 8)], 4).unwrap();
        let mut swapped = patches.clone();
        let d = swapped.data_mut();
        for j in 0..16 {
            d.swap(j, 16 + j);
        }
        assert_ne!(encode(&f, &patches), encode(&f, &swapped));
    }

    #[test]
    fn patch_projection_gradients_match_finite_differences() {
        let f = fixture(5, 4, 4);
        let mut rng = Rng::new(8);
        let bytes: Vec<u8> = (0..16).map(|_| rng.below(256) as u8).collect();
        let patches = image_patches(&[&Image::from_u8(4, 4, 1, &bytes).unwrap()], 4).unwrap();
        let params = f.params.clone();
        let reports = check_params(
            "image",
            &f.store,
            Some(&[f.params.patch_w, f.params.patch_b]),
            Coverage::All,
            |s| Ctx::new(s, Rng::new(1), true, 0.1),
            |ctx| {
                let h = encode_image(ctx, &params, &patches)?;
                weighted_sum(&mut ctx.tape, h, 4)
            },
        )
        .unwrap();
        for r in reports {
            assert!(r.max_rel_err < REL_ERR_TOL, "{r:?}");
        }
    }
}
