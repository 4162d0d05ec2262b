//! Binary graymap/pixmap images and 16-bit PCM WAV sound, mapped to and
//! from tensors with values in [-1, 1].
//!
//! Images decode to channel-planar `[C, H, W]` (C = 1 for graymaps, 3 for
//! pixmaps); sounds decode to `[1, L]`.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default sampling rate for encoded sound.
pub const DEFAULT_SAMPLE_RATE: u32 = 11025;

/// `v / 127.5 - 1`
pub fn byte_to_unit(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding half away from zero and clamping.
pub fn unit_to_byte(x: f64) -> u8 {
    let v = ((x + 1.0) * 127.5).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

/// `s / 32768`
pub fn pcm_to_unit(s: i16) -> f64 {
    f64::from(s) / 32768.0
}

/// Inverse of [`pcm_to_unit`], rounding half away from zero and clamping.
pub fn unit_to_pcm(x: f64) -> i16 {
    let v = (x * 32768.0).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(-32768.0, 32767.0) as i16
    }
}

struct PnmHeader {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_pnm_header(bytes: &[u8]) -> Result<PnmHeader> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some([b'P', b'1'..=b'4']) | Some(b"P7") => {
            return Err(Error::format(
                "only binary graymaps (P5) and pixmaps (P6) are supported",
            ))
        }
        _ => return Err(Error::format("not a binary graymap or pixmap")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| Error::format("truncated or malformed image header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("malformed image header"));
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!(
            "only 8-bit images are supported, maxval is {maxval}"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("image has zero extent"));
    }
    Ok(PnmHeader {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Raw bytes of a P5/P6 image as `(channels, height, width, interleaved pixels)`.
fn pnm_pixels(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let h = parse_pnm_header(bytes)?;
    let n = h.channels * h.width * h.height;
    let pixels = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| Error::format("image data is truncated"))?;
    Ok((h.channels, h.height, h.width, pixels))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let (c, h, w, pixels) = pnm_pixels(bytes)?;
    let mut data = vec![0.0; c * h * w];
    for (idx, &v) in pixels.iter().enumerate() {
        let (pix, ch) = (idx / c, idx % c);
        data[ch * h * w + pix] = byte_to_unit(v);
    }
    Tensor::new(vec![c, h, w], data)
}

fn image_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c @ (1 | 3), h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(format!(
            "images must be [1, H, W] or [3, H, W], got {s:?}"
        ))),
    }
}

fn write_pnm(c: usize, h: usize, w: usize, interleaved: impl Iterator<Item = u8>) -> Vec<u8> {
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(interleaved);
    out
}

pub fn encode_image(t: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image_dims(t)?;
    let d = t.data();
    Ok(write_pnm(
        c,
        h,
        w,
        (0..h * w).flat_map(move |pix| (0..c).map(move |ch| unit_to_byte(d[ch * h * w + pix]))),
    ))
}

/// Mask graymap: 0 = occluded, 255 = observed. Decodes to a `[1, H, W]`
/// indicator (1 = observed).
pub fn decode_mask(bytes: &[u8]) -> Result<Tensor> {
    let (c, h, w, pixels) = pnm_pixels(bytes)?;
    if c != 1 {
        return Err(Error::format("mask files must be graymaps"));
    }
    let data = pixels
        .iter()
        .map(|&v| match v {
            0 => Ok(0.0),
            255 => Ok(1.0),
            other => Err(Error::format(format!(
                "mask value {other} is neither 0 nor 255"
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![1, h, w], data)
}

/// Encode the first channel of a mask.
pub fn encode_mask(mask: &Tensor) -> Result<Vec<u8>> {
    let (_, h, w) = image_dims(mask)?;
    let plane = &mask.data()[..h * w];
    if plane.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask entries must be 0 or 1"));
    }
    Ok(write_pnm(
        1,
        h,
        w,
        plane.iter().map(|&v| if v == 0.0 { 0 } else { 255 }),
    ))
}

/// Spread a single-plane mask across `channels`.
pub fn broadcast_mask(mask: &Tensor, channels: usize) -> Result<Tensor> {
    let plane = mask.numel() / mask.shape()[0];
    let mut shape = mask.shape().to_vec();
    shape[0] = channels;
    let mut data = Vec::with_capacity(channels * plane);
    for _ in 0..channels {
        data.extend_from_slice(&mask.data()[..plane]);
    }
    Tensor::new(shape, data)
}

pub fn decode_wav(bytes: &[u8]) -> Result<(Tensor, u32)> {
    let reader = hound::WavReader::new(Cursor::new(bytes))
        .map_err(|e| Error::format(format!("bad WAV file: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(format!(
            "only mono sound is supported, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format("only 16-bit PCM sound is supported"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(pcm_to_unit))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(format!("bad WAV data: {e}")))?;
    if samples.is_empty() {
        return Err(Error::format("WAV file has no samples"));
    }
    let n = samples.len();
    Ok((Tensor::new(vec![1, n], samples)?, spec.sample_rate))
}

pub fn encode_wav(t: &Tensor, sample_rate: u32) -> Result<Vec<u8>> {
    if t.shape().len() != 2 || t.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "sound must be [1, L], got {:?}",
            t.shape()
        )));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut writer =
            hound::WavWriter::new(&mut buf, spec).map_err(|e| Error::format(e.to_string()))?;
        for &v in t.data() {
            writer
                .write_sample(unit_to_pcm(v))
                .map_err(|e| Error::format(e.to_string()))?;
        }
        writer
            .finalize()
            .map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(buf.into_inner())
}

/// Zero-pad or truncate a `[1, L]` sound to `len` samples.
pub fn fit_length(t: &Tensor, len: usize) -> Result<Tensor> {
    let mut data = t.data().to_vec();
    data.resize(len, 0.0);
    Tensor::new(vec![1, len], data)
}

/// Whether a path names a sound file (by extension).
pub fn is_sound_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Read an image or sound by file extension.
pub fn read_signal(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
    if is_sound_path(path) {
        Ok(decode_wav(&bytes)?.0)
    } else {
        decode_image(&bytes)
    }
}

/// File extension matching a signal's shape.
pub fn signal_extension(shape: &[usize]) -> Result<&'static str> {
    match shape {
        [1, _] => Ok("wav"),
        [1, _, _] => Ok("pgm"),
        [3, _, _] => Ok("ppm"),
        s => Err(Error::shape(format!(
            "no file format for signals of shape {s:?}"
        ))),
    }
}

pub fn encode_signal(t: &Tensor) -> Result<Vec<u8>> {
    match signal_extension(t.shape())? {
        "wav" => encode_wav(t, DEFAULT_SAMPLE_RATE),
        _ => encode_image(t),
    }
}

pub fn write_signal(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_signal(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
        assert!((byte_to_unit(128) - 0.00392).abs() < 1e-5);
        assert_eq!(unit_to_byte(-3.0), 0);
        assert_eq!(unit_to_byte(3.0), 255);
        assert_eq!(pcm_to_unit(0), 0.0);
        assert_eq!(unit_to_pcm(1.0), 32767);
        assert_eq!(unit_to_pcm(-1.0), -32768);
    }

    #[test]
    fn pixmap_is_channel_planar() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 0, 255, 0, 255]);
        let t = decode_image(&bytes).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[-1.0, 1.0, 1.0, -1.0, -1.0, 1.0]);
        assert_eq!(decode_image(&encode_image(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn unsupported_images_rejected() {
        assert!(decode_image(b"P2\n1 1\n255\n0\n").is_err());
        assert!(decode_image(b"P5\n1 1\n65535\n\0\0").is_err());
        assert!(decode_image(b"P5\n2 2\n255\n\0").is_err());
        assert!(decode_image(b"GIF89a").is_err());
        assert!(decode_mask(b"P5\n1 1\n255\n\x07").is_err());
    }

    #[test]
    fn sound_lengths() {
        let five_seconds = Tensor::zeros(&[1, 5 * DEFAULT_SAMPLE_RATE as usize]);
        let (back, rate) =
            decode_wav(&encode_wav(&five_seconds, DEFAULT_SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(back.shape(), &[1, 55125]);
        assert_eq!(rate, 11025);
        assert_eq!(fit_length(&back, 60000).unwrap().numel(), 60000);
        assert_eq!(fit_length(&back, 100).unwrap().numel(), 100);
    }
}
