//! Image-level compression and decompression.

use std::path::Path;

use ndarray::Array3;

use crate::entropy::{
    decode_symbols, encode_symbols, factorized_cdf, Bitstream, CdfTable, EntropyError,
    EntropyParams, GaussianTables, DEFAULT_PRECISION, DEFAULT_TAIL_MASS,
};
use crate::image_io::{self, ImageIoError};
use crate::model::{CodecModel, ModelError};
use crate::transforms::IMAGE_MULTIPLE;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid gain {0}: must be finite and positive")]
    InvalidGain(f32),
}

impl CodecError {
    /// Process exit code contract: 3 data errors, 4 model mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            CodecError::Entropy(EntropyError::ModelIdMismatch { .. }) => 4,
            _ => 3,
        }
    }
}

pub struct CompressResult {
    pub stream: Bitstream,
    /// Gained latent as the decoder will reconstruct it.
    pub y_hat_scaled: Array3<f32>,
    /// Entropy parameters of the latent, for diagnostics.
    pub params: EntropyParams,
}

fn z_tables(model: &CodecModel) -> Vec<CdfTable> {
    let density = model.z_density.density(&model.store);
    (0..model.config.transform_config.hyper_channels)
        .map(|ch| factorized_cdf(&density, ch, DEFAULT_PRECISION, DEFAULT_TAIL_MASS))
        .collect()
}

/// Compress a `[3,H,W]` image in [0,1] (true dims; padding happens here).
pub fn compress_to_stream(
    model: &CodecModel,
    img: &Array3<f32>,
    gain: f32,
) -> Result<CompressResult, CodecError> {
    if !(gain.is_finite() && gain > 0.0) {
        return Err(CodecError::InvalidGain(gain));
    }
    let (_, true_h, true_w) = img.dim();
    let padded = image_io::pad_replicate(img, IMAGE_MULTIPLE);
    let y = model.analyze_image(&padded)?;
    let y_s = &y * gain;
    let z = model.hyper_analyze_image(&y_s);
    let z_hat = z.mapv(f32::round);

    // hyper-latent segment: raster order, per-channel tables
    let tables_z = z_tables(model);
    let (n, zh, zw) = z_hat.dim();
    let mut z_symbols = Vec::with_capacity(n * zh * zw);
    let mut z_tbl_idx = Vec::with_capacity(n * zh * zw);
    for c in 0..n {
        for i in 0..zh {
            for j in 0..zw {
                z_symbols.push(z_hat[[c, i, j]] as i32);
                z_tbl_idx.push(c);
            }
        }
    }
    let z_segment = encode_symbols(&z_symbols, z_tbl_idx.iter().map(|c| &tables_z[*c]))?;

    let feat = model.hyper_synthesize_image(&z_hat);
    let gauss = GaussianTables::new(DEFAULT_PRECISION);
    let (segments, y_hat_scaled, params) =
        model.context.encode_latent(&model.store, &gauss, &y_s, &feat, gain)?;

    let mut stream = Bitstream::new(model.model_id(), gain, true_w as u32, true_h as u32);
    stream.segments.push(z_segment);
    stream.segments.extend(segments);
    Ok(CompressResult { stream, y_hat_scaled, params })
}

/// Decode a stream back to a `[3,H,W]` image at the true dims.
pub fn decompress_from_stream(
    model: &CodecModel,
    stream: &Bitstream,
) -> Result<Array3<f32>, CodecError> {
    if stream.header.model_id != model.model_id() {
        return Err(CodecError::Entropy(EntropyError::ModelIdMismatch {
            stream: stream.header.model_id,
            model: model.model_id(),
        }));
    }
    let (true_h, true_w) = (stream.header.height as usize, stream.header.width as usize);
    let ph = true_h.div_ceil(IMAGE_MULTIPLE) * IMAGE_MULTIPLE;
    let pw = true_w.div_ceil(IMAGE_MULTIPLE) * IMAGE_MULTIPLE;
    let (lh, lw) = model.latent_dims(ph, pw);
    let (zh, zw) = model.hyper_dims(ph, pw);
    let n = model.config.transform_config.hyper_channels;

    if stream.segments.len() != model.n_segments() {
        return Err(CodecError::Entropy(EntropyError::MissingSegment {
            unit: stream.segments.len(),
            expected: model.n_segments(),
            found: stream.segments.len(),
        }));
    }

    let tables_z = z_tables(model);
    let z_count = n * zh * zw;
    let z_tbl_idx: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, zh * zw)).collect();
    let z_symbols = decode_symbols(
        &stream.segments[0],
        z_count,
        z_tbl_idx.iter().map(|c| &tables_z[*c]),
    )?;
    let mut z_hat = Array3::<f32>::zeros((n, zh, zw));
    for (flat, s) in z_symbols.iter().enumerate() {
        let c = flat / (zh * zw);
        let r = flat % (zh * zw);
        z_hat[[c, r / zw, r % zw]] = *s as f32;
    }

    let feat = model.hyper_synthesize_image(&z_hat);
    let gauss = GaussianTables::new(DEFAULT_PRECISION);
    let y_hat_scaled =
        model
            .context
            .decode_latent(
                &model.store,
                &gauss,
                &stream.segments[1..],
                &feat,
                stream.header.gain,
                lh,
                lw,
            )?;
    let y_hat = &y_hat_scaled / stream.header.gain;
    let padded = model.synthesize_image(&y_hat)?;
    Ok(image_io::crop(&padded, true_h, true_w))
}

pub struct CompressFileReport {
    pub payload_bytes: usize,
    pub total_bytes: usize,
    pub bpp: f64,
    pub width: u32,
    pub height: u32,
}

/// Atomic write: a temp file in the target directory, renamed on success,
/// so error paths never leave partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CodecError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)
        .map_err(|e| CodecError::Io { path: tmp.display().to_string(), reason: e.to_string() })?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CodecError::Io { path: path.display().to_string(), reason: e.to_string() }
    })
}

pub fn compress_file(
    model: &CodecModel,
    image_path: &Path,
    gain: f32,
    out_path: &Path,
) -> Result<CompressFileReport, CodecError> {
    let img = image_io::load_image(image_path)?;
    let res = compress_to_stream(model, &img, gain)?;
    write_atomic(out_path, &res.stream.to_bytes())?;
    Ok(CompressFileReport {
        payload_bytes: res.stream.payload_bytes(),
        total_bytes: res.stream.total_bytes(),
        bpp: crate::eval::bpp(
            res.stream.payload_bytes(),
            res.stream.header.width,
            res.stream.header.height,
        ),
        width: res.stream.header.width,
        height: res.stream.header.height,
    })
}

pub fn decompress_file(
    model: &CodecModel,
    stream_path: &Path,
    out_path: &Path,
) -> Result<(), CodecError> {
    let bytes = std::fs::read(stream_path)
        .map_err(|e| CodecError::Io { path: stream_path.display().to_string(), reason: e.to_string() })?;
    let stream = Bitstream::from_bytes(&bytes, model.n_segments())?;
    let img = decompress_from_stream(model, &stream)?;
    // encode to PNG in memory, then single atomic write
    let (_, h, w) = img.dim();
    let rgb = image_io::to_rgb8(&img);
    let mut png_bytes = Vec::new();
    {
        let mut cursor = std::io::Cursor::new(&mut png_bytes);
        image::RgbImage::from_raw(w as u32, h as u32, rgb)
            .expect("buffer matches dims")
            .write_to(&mut cursor, image::ImageFormat::Png)
            .map_err(|e| CodecError::Io {
                path: out_path.display().to_string(),
                reason: e.to_string(),
            })?;
    }
    write_atomic(out_path, &png_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::ContextKind;
    use crate::model::ModelConfig;

    fn toy(kind: ContextKind) -> CodecModel {
        CodecModel::new(ModelConfig::toy("baseline_conv", kind, 8, 80, 8).with_seed(11)).unwrap()
    }

    fn test_image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            let v = ((x as f32 * 0.07).sin() + (y as f32 * 0.05).cos() + c as f32 * 0.3) * 0.25
                + 0.5;
            v.clamp(0.0, 1.0)
        })
    }

    #[test]
    fn roundtrip_reconstruction_matches_latent_path() {
        for kind in [ContextKind::Hyperprior, ContextKind::Checkerboard] {
            let model = toy(kind);
            let img = test_image(52, 76); // exercises padding
            let res = compress_to_stream(&model, &img, 1.0).unwrap();
            assert_eq!(res.stream.header.width, 76);
            assert_eq!(res.stream.header.height, 52);
            assert_eq!(res.stream.segments.len(), model.n_segments());
            let out = decompress_from_stream(&model, &res.stream).unwrap();
            assert_eq!(out.dim(), (3, 52, 76));
            // decoding twice is bit-identical
            let out2 = decompress_from_stream(&model, &res.stream).unwrap();
            assert_eq!(out, out2);
        }
    }

    #[test]
    fn serialized_roundtrip_is_bit_exact() {
        let model = toy(ContextKind::Scctx);
        let img = test_image(64, 64);
        let res = compress_to_stream(&model, &img, 2.0).unwrap();
        let bytes = res.stream.to_bytes();
        let parsed = Bitstream::from_bytes(&bytes, model.n_segments()).unwrap();
        let a = decompress_from_stream(&model, &res.stream).unwrap();
        let b = decompress_from_stream(&model, &parsed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_id_mismatch_is_exit_code_4() {
        let model = toy(ContextKind::Hyperprior);
        let other = toy(ContextKind::Charm);
        let img = test_image(64, 64);
        let res = compress_to_stream(&model, &img, 1.0).unwrap();
        match decompress_from_stream(&other, &res.stream) {
            Err(e @ CodecError::Entropy(EntropyError::ModelIdMismatch { .. })) => {
                assert_eq!(e.exit_code(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_gain_rejected() {
        let model = toy(ContextKind::Hyperprior);
        let img = test_image(64, 64);
        assert!(matches!(
            compress_to_stream(&model, &img, 0.0),
            Err(CodecError::InvalidGain(_))
        ));
        assert!(matches!(
            compress_to_stream(&model, &img, f32::NAN),
            Err(CodecError::InvalidGain(_))
        ));
    }

    #[test]
    fn file_roundtrip_and_no_partial_output_on_error() {
        let model = toy(ContextKind::Hyperprior);
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("in.png");
        crate::image_io::save_image_png(&img_path, &test_image(70, 90)).unwrap();
        let bin_path = dir.path().join("out.rdcl");
        let report = compress_file(&model, &img_path, 1.5, &bin_path).unwrap();
        assert!(report.bpp > 0.0);
        assert_eq!((report.width, report.height), (90, 70));
        let out_path = dir.path().join("out.png");
        decompress_file(&model, &bin_path, &out_path).unwrap();
        let round = crate::image_io::load_image(&out_path).unwrap();
        assert_eq!(round.dim(), (3, 70, 90));

        // tamper the magic: decode must fail and leave no output file
        let mut bytes = std::fs::read(&bin_path).unwrap();
        bytes[0] = b'Z';
        let bad_path = dir.path().join("bad.rdcl");
        std::fs::write(&bad_path, &bytes).unwrap();
        let out2 = dir.path().join("out2.png");
        let err = decompress_file(&model, &bad_path, &out2).unwrap_err();
        assert!(matches!(err, CodecError::Entropy(EntropyError::BadMagic)));
        assert!(!out2.exists(), "partial output left behind");
    }
}
