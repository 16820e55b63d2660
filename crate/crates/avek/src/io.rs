//! On-disk formats: 16-bit PGM for quick viewing, and flat little-endian
//! binary (with a small header carrying dimensions and the disc radius) as
//! the lossless interchange format for images and sinograms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::radon::{GridImage, Sinogram, SinogramBlock};
use crate::{Error, Result};

const IMAGE_MAGIC: &[u8; 8] = b"AVKIMG1\n";
const SINO_MAGIC: &[u8; 8] = b"AVKSIN1\n";

/// Write a grid image as binary: magic, `n_x` (u64 LE), radius (f64 LE),
/// then `(n_x+1)^2` f64 LE samples in row-major `j2` order.
pub fn write_image(path: &Path, img: &GridImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(IMAGE_MAGIC)?;
    w.write_all(&(img.n_x() as u64).to_le_bytes())?;
    w.write_all(&img.radius().to_le_bytes())?;
    for v in img.samples() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<GridImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != IMAGE_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "{} is not a grid image file",
            path.display()
        )));
    }
    let n_x = read_u64(&mut r)? as usize;
    let radius = read_f64(&mut r)?;
    let len = (n_x + 1) * (n_x + 1);
    let mut samples = Vec::with_capacity(len);
    for _ in 0..len {
        samples.push(read_f64(&mut r)?);
    }
    GridImage::from_samples(n_x, radius, samples)
}

/// Write a sinogram as binary: magic, block count (u64), `n_r` (u64),
/// radius (f64), then per block the detector count (u64), the detector
/// indices (u64 each) and the detector-major samples (f64 each).
pub fn write_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SINO_MAGIC)?;
    w.write_all(&(sino.blocks.len() as u64).to_le_bytes())?;
    w.write_all(&(sino.n_r as u64).to_le_bytes())?;
    w.write_all(&sino.radius.to_le_bytes())?;
    for block in &sino.blocks {
        w.write_all(&(block.detectors.len() as u64).to_le_bytes())?;
        for &d in &block.detectors {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &block.samples {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SINO_MAGIC {
        return Err(Error::InvalidArgument(format!(
            "{} is not a sinogram file",
            path.display()
        )));
    }
    let n_blocks = read_u64(&mut r)? as usize;
    let n_r = read_u64(&mut r)? as usize;
    let radius = read_f64(&mut r)?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let n_det = read_u64(&mut r)? as usize;
        let mut detectors = Vec::with_capacity(n_det);
        for _ in 0..n_det {
            detectors.push(read_u64(&mut r)? as usize);
        }
        let len = n_det * (n_r + 1);
        let mut samples = Vec::with_capacity(len);
        for _ in 0..len {
            samples.push(read_f64(&mut r)?);
        }
        blocks.push(SinogramBlock { detectors, samples });
    }
    Ok(Sinogram {
        radius,
        n_r,
        blocks,
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// Write a 16-bit PGM (P5, maxval 65535, big-endian) with the value range
/// linearly mapped to [0, 65535]; the range is recorded in a comment so the
/// mapping is invertible. Rows run from +R down to -R (image top = top of
/// the scene).
pub fn write_image_pgm(path: &Path, img: &GridImage) -> Result<()> {
    let (min, max) = img
        .samples()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if max > min { max - min } else { 1.0 };
    let side = img.n_x() + 1;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n# min={min:e} max={max:e}\n{side} {side}\n65535\n")?;
    for j2 in (0..side).rev() {
        for j1 in 0..side {
            let v = (img.get(j1, j2) - min) / span;
            let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
            w.write_all(&q.to_be_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Render a sinogram block grid (detectors x radii) as 16-bit PGM, radii on
/// the vertical axis.
pub fn write_sinogram_pgm(path: &Path, sino: &Sinogram) -> Result<()> {
    let cols: usize = sino.blocks.iter().map(|b| b.detectors.len()).sum();
    let rows = sino.n_r + 1;
    let (min, max) = sino
        .blocks
        .iter()
        .flat_map(|b| b.samples.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if max > min { max - min } else { 1.0 };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n# min={min:e} max={max:e}\n{cols} {rows}\n65535\n")?;
    for l in (0..rows).rev() {
        for block in &sino.blocks {
            for d in 0..block.detectors.len() {
                let v = (block.samples[d * rows + l] - min) / span;
                let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
                w.write_all(&q.to_be_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radon::{self, DetectorGeometry};

    #[test]
    fn image_roundtrip_is_lossless() {
        let dir = std::env::temp_dir().join("avek-io-test-img");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.bin");
        let img = radon::make_phantom(&radon::head_phantom(), 24, 1.0).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn sinogram_roundtrip_is_lossless() {
        let dir = std::env::temp_dir().join("avek-io-test-sino");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sino.bin");
        let geom =
            radon::partition_boundary(&DetectorGeometry::half_circle(1.0, 8, 12).unwrap(), 2)
                .unwrap();
        let f = radon::make_phantom(&radon::head_phantom(), 24, 1.0).unwrap();
        let sino = radon::forward_all(&f, &geom).unwrap();
        write_sinogram(&path, &sino).unwrap();
        let back = read_sinogram(&path).unwrap();
        assert_eq!(sino, back);
    }

    #[test]
    fn pgm_output_is_deterministic() {
        let dir = std::env::temp_dir().join("avek-io-test-pgm");
        std::fs::create_dir_all(&dir).unwrap();
        let img = radon::make_phantom(&radon::head_phantom(), 16, 1.0).unwrap();
        let p1 = dir.join("a.pgm");
        let p2 = dir.join("b.pgm");
        write_image_pgm(&p1, &img).unwrap();
        write_image_pgm(&p2, &img).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = std::env::temp_dir().join("avek-io-test-magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC plus some other bytes").unwrap();
        assert!(read_image(&path).is_err());
        assert!(read_sinogram(&path).is_err());
    }
}
