//! Small file formats: PPM/PGM images, raw f64 dumps, dataset archives.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::dataset::{LabeledImageSet, Split, CHANNELS, IMAGE_SIZE, PIXELS};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary PPM (P6) from planar `[3, h, w]` bytes.
pub fn encode_ppm(planar: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if planar.len() != 3 * h * w {
        return Err(Error::shape("ppm", format!("{} bytes for 3x{h}x{w}", planar.len())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(planar[c * h * w + i]);
        }
    }
    Ok(out)
}

/// Binary PGM (P5).
pub fn encode_pgm(gray: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if gray.len() != h * w {
        return Err(Error::shape("pgm", format!("{} bytes for {h}x{w}", gray.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    Ok(out)
}

/// Min-max rescale of real pixels to bytes (constant input maps to 0).
pub fn rescale_to_u8(x: &[f64]) -> Vec<u8> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    x.iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect()
}

const F64_MAGIC: &[u8; 8] = b"DFQF64A1";

/// Raw little-endian f64 array with a shape header.
pub fn encode_f64(shape: &[usize], data: &[f64]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::shape("f64 dump", format!("shape {shape:?} for {} values", data.len())));
    }
    let mut out = F64_MAGIC.to_vec();
    out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f64(bytes: &[u8], origin: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bad = |r: &str| Error::Checkpoint { path: origin.to_path_buf(), reason: r.to_string() };
    if bytes.len() < 16 || &bytes[..8] != F64_MAGIC {
        return Err(bad("not a raw f64 array"));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
    let rank = u64_at(8);
    let body = 16 + rank * 8;
    if rank > 8 || bytes.len() < body {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank).map(|i| u64_at(16 + i * 8)).collect();
    let n: usize = shape.iter().product();
    if bytes.len() != body + n * 8 {
        return Err(bad("payload length does not match shape"));
    }
    let data = bytes[body..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((shape, data))
}

const SET_MAGIC: &[u8; 8] = b"DFQSET01";

/// Dataset archive: magic, split byte, seed, count, labels, pixels.
pub fn encode_image_set(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = SET_MAGIC.to_vec();
    out.push(match set.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    out.extend_from_slice(&set.seed.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend(set.labels.iter().map(|&l| l as u8));
    out.extend_from_slice(&set.images);
    out
}

pub fn decode_image_set(bytes: &[u8], origin: &Path) -> Result<LabeledImageSet> {
    let bad = |r: &str| Error::Checkpoint { path: origin.to_path_buf(), reason: r.to_string() };
    if bytes.len() < 25 || &bytes[..8] != SET_MAGIC {
        return Err(bad("not a dataset archive"));
    }
    let split = match bytes[8] {
        0 => Split::Train,
        1 => Split::Test,
        _ => return Err(bad("unknown split")),
    };
    let seed = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let n = u64::from_le_bytes(bytes[17..25].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 25 + n + n * PIXELS {
        return Err(bad("archive length does not match image count"));
    }
    let labels: Vec<usize> = bytes[25..25 + n].iter().map(|&l| l as usize).collect();
    if labels.iter().any(|&l| l >= 10) {
        return Err(bad("label out of range"));
    }
    Ok(LabeledImageSet { images: bytes[25 + n..].to_vec(), labels, split, seed })
}

/// Writes one PPM per image of a dataset-shaped byte buffer.
pub fn write_ppm_dir(dir: &Path, prefix: &str, planar_images: &[Vec<u8>]) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    for (i, img) in planar_images.iter().enumerate() {
        let name = format!("{prefix}{i:03}.ppm");
        fs::File::create(dir.join(&name))?.write_all(&encode_ppm(img, IMAGE_SIZE, IMAGE_SIZE)?)?;
        names.push(name);
    }
    Ok(names)
}

pub const IMAGE_BYTES: usize = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::gen_toy_dataset;

    #[test]
    fn ppm_header_and_interleave() {
        let planar = [1, 2, 10, 20, 100, 200];
        let out = encode_ppm(&planar, 1, 2).unwrap();
        assert_eq!(&out[..11], b"P6\n2 1\n255\n");
        assert_eq!(&out[11..], &[1, 10, 100, 2, 20, 200]);
        assert!(encode_ppm(&planar, 2, 2).is_err());
        assert_eq!(&encode_pgm(&[0, 255], 1, 2).unwrap()[..2], b"P5");
    }

    #[test]
    fn f64_round_trip() {
        let data = vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0e300, 7.0, 8.0];
        let b = encode_f64(&[2, 3], &data).unwrap();
        let (s, d) = decode_f64(&b, Path::new("x")).unwrap();
        assert_eq!(s, vec![2, 3]);
        assert_eq!(d.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(decode_f64(&b[..b.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn image_set_round_trip() {
        let (a, _) = gen_toy_dataset(2, 12, 10).unwrap();
        let b = encode_image_set(&a);
        assert_eq!(decode_image_set(&b, Path::new("x")).unwrap(), a);
        assert!(decode_image_set(&b[..30], Path::new("x")).is_err());
    }

    #[test]
    fn rescale_spans_full_range() {
        assert_eq!(rescale_to_u8(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
        assert_eq!(rescale_to_u8(&[2.0, 2.0]), vec![0, 0]);
        assert_eq!(sha256_hex(b"abc").len(), 64);
    }
}
