//! Video serialization: a raw tensor file plus per-frame portable pixmaps.
//!
//! Raw format (little-endian): header `u32 T, H, W, C`, then 32-bit float
//! values in `(t, c, row, col)` order. The PPM export maps `[-1, 1]` to
//! `[0, 255]` with clamping, replicating single-channel data across RGB.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write a `[T, C, H, W]` video to the raw on-disk format.
pub fn save_video_raw(path: &Path, video: &Tensor<f32>) -> Result<()> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(Error::shape("save_video_raw expects [T, C, H, W]"));
    }
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut f = std::fs::File::create(path)?;
    for dim in [t, h, w, c] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    // [T, C, H, W] memory order is exactly (t, c, row, col).
    let mut buf = Vec::with_capacity(video.numel() * 4);
    for v in video.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_video_raw(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("truncated video file".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let numel = t * c * h * w;
    if bytes.len() != 16 + 4 * numel {
        return Err(Error::Checkpoint(format!(
            "video payload length {} does not match header {t}x{h}x{w}x{c}",
            bytes.len() - 16
        )));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Tensor::new(values, &[t, c, h, w])
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Export each frame of a `[T, C, H, W]` video as `prefix_NNN.ppm` (binary
/// P6). Supports C = 1 (gray replicated to RGB) and C = 3.
pub fn save_ppm_frames(dir: &Path, prefix: &str, video: &Tensor<f32>) -> Result<Vec<std::path::PathBuf>> {
    let shape = video.shape();
    if shape.len() != 4 {
        return Err(Error::shape("save_ppm_frames expects [T, C, H, W]"));
    }
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if c != 1 && c != 3 {
        return Err(Error::InvalidArg(format!("PPM export supports 1 or 3 channels, got {c}")));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(t);
    for frame in 0..t {
        let path = dir.join(format!("{prefix}_{frame:03}.ppm"));
        let mut f = std::fs::File::create(&path)?;
        write!(f, "P6\n{w} {h}\n255\n")?;
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let src_c = if c == 1 { 0 } else { ch };
                    let v = video.data()[((frame * c + src_c) * h + y) * w + x];
                    buf.push(to_byte(v));
                }
            }
        }
        f.write_all(&buf)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_video_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.bin");
        let video = Tensor::new(
            (0..2 * 1 * 3 * 4).map(|i| i as f32 * 0.125 - 1.0).collect(),
            &[2, 1, 3, 4],
        )
        .unwrap();
        save_video_raw(&path, &video).unwrap();
        let back = load_video_raw(&path).unwrap();
        assert_eq!(back.shape(), video.shape());
        assert_eq!(back.data(), video.data());
    }

    #[test]
    fn ppm_frames_have_correct_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let video = Tensor::new(vec![-1.0f32, 0.0, 1.0, 0.5, -0.5, 0.25], &[2, 1, 1, 3]).unwrap();
        let paths = save_ppm_frames(dir.path(), "frame", &video).unwrap();
        assert_eq!(paths.len(), 2);
        let bytes = std::fs::read(&paths[0]).unwrap();
        assert!(bytes.starts_with(b"P6\n3 1\n255\n"));
        assert_eq!(bytes.len(), b"P6\n3 1\n255\n".len() + 3 * 3);
        // -1 -> 0, 0 -> 128, 1 -> 255, replicated over RGB.
        let px = &bytes[b"P6\n3 1\n255\n".len()..];
        assert_eq!(&px[0..3], &[0, 0, 0]);
        assert_eq!(&px[3..6], &[128, 128, 128]);
        assert_eq!(&px[6..9], &[255, 255, 255]);
    }
}
