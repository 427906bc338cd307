//! Binary Netpbm (`P5` graymap, `P6` pixmap) with 8-bit samples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::LabelMask;
use crate::error::{Error, Result};
use crate::nn::Tensor;

const FORMAT: &str = "netpbm";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for `P5`, 3 for `P6`.
    pub channels: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

fn next_token<R: Read>(r: &mut R) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte).map_err(|e| Error::format(FORMAT, e.to_string()))? == 0 {
            if token.is_empty() {
                return Err(Error::format(FORMAT, "truncated header"));
            }
            return Ok(token);
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                // comment runs to end of line
                loop {
                    if r.read(&mut byte).map_err(|e| Error::format(FORMAT, e.to_string()))? == 0 || byte[0] == b'\n' {
                        break;
                    }
                }
            }
            b' ' | b'\t' | b'\n' | b'\r' => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            b => token.push(b as char),
        }
    }
}

fn header_number<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let t = next_token(r)?;
    t.parse()
        .map_err(|_| Error::format(FORMAT, format!("bad {what} `{t}`")))
}

pub fn read_raster<R: Read>(mut r: R) -> Result<Raster> {
    let channels = match next_token(&mut r)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(FORMAT, format!("unsupported magic `{other}`"))),
    };
    let width = header_number(&mut r, "width")?;
    let height = header_number(&mut r, "height")?;
    let maxval = header_number(&mut r, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(FORMAT, "zero-sized raster"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(Error::format(FORMAT, format!("maxval {maxval} outside 1..=255")));
    }
    let mut data = vec![0u8; width * height * channels];
    r.read_exact(&mut data)
        .map_err(|_| Error::format(FORMAT, "truncated pixel data"))?;
    if data.iter().any(|&v| v as usize > maxval) {
        return Err(Error::format(FORMAT, "sample exceeds maxval"));
    }
    Ok(Raster {
        width,
        height,
        channels,
        maxval: maxval as u8,
        data,
    })
}

pub fn write_raster<W: Write>(mut w: W, raster: &Raster) -> std::io::Result<()> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    write!(w, "{magic}\n{} {}\n{}\n", raster.width, raster.height, raster.maxval)?;
    w.write_all(&raster.data)?;
    w.flush()
}

pub fn read_raster_file(path: &Path) -> Result<Raster> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_raster(BufReader::new(f)).map_err(|e| match e {
        Error::Format { format, reason } => Error::Format {
            format,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}

pub fn write_raster_file(path: &Path, raster: &Raster) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_raster(BufWriter::new(f), raster).map_err(|e| Error::io(path, e))
}

/// 8-bit quantization of an `H x W x 3` image in `[0, 1]`.
pub fn image_to_raster(image: &Tensor) -> Result<Raster> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape("image_to_raster", 3, c));
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: 3,
        maxval: 255,
        data: image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    })
}

/// Image in `[0, 1]`; graymaps are replicated to three channels.
pub fn raster_to_image(raster: &Raster) -> Result<Tensor> {
    let scale = f64::from(raster.maxval);
    let data: Vec<f64> = match raster.channels {
        3 => raster.data.iter().map(|&v| f64::from(v) / scale).collect(),
        1 => raster
            .data
            .iter()
            .flat_map(|&v| [f64::from(v) / scale; 3])
            .collect(),
        c => return Err(Error::format(FORMAT, format!("{c} channels"))),
    };
    Tensor::new(vec![raster.height, raster.width, 3], data)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    raster_to_image(&read_raster_file(path)?)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    write_raster_file(path, &image_to_raster(image)?)
}

/// Masks are `P5` graymaps whose sample value is the class index.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let r = read_raster_file(path)?;
    if r.channels != 1 {
        return Err(Error::format(FORMAT, format!("{}: masks must be P5 graymaps", path.display())));
    }
    LabelMask::new(r.height, r.width, r.data)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_raster_file(
        path,
        &Raster {
            width: mask.width(),
            height: mask.height(),
            channels: 1,
            maxval: 255,
            data: mask.labels().to_vec(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let mut bytes = b"P5 # gray\n# another\n2\t1\n255\n".to_vec();
        bytes.extend([7, 255]);
        let r = read_raster(&bytes[..]).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.data, vec![7, 255]);
    }

    #[test]
    fn rejects_malformed_headers() {
        for bad in [
            &b"P3\n1 1\n255\n\0"[..],
            b"P5\n1\n",
            b"P5\nx 1\n255\n\0",
            b"P5\n1 1\n300\n\0",
            b"P5\n0 1\n255\n",
            b"P6\n2 2\n255\n\0\0",
            b"P5\n1 1\n10\n\x20",
        ] {
            assert!(matches!(read_raster(bad), Err(Error::Format { .. })), "{bad:?}");
        }
    }

    #[test]
    fn graymap_images_replicate_channels() {
        let r = Raster {
            width: 1,
            height: 1,
            channels: 1,
            maxval: 100,
            data: vec![50],
        };
        assert_eq!(raster_to_image(&r).unwrap().data(), &[0.5, 0.5, 0.5]);
    }

    proptest! {
        #[test]
        fn raster_round_trip_is_bit_exact(w in 1usize..6, h in 1usize..6, gray in any::<bool>(), seed in any::<u64>()) {
            let channels = if gray { 1 } else { 3 };
            let data: Vec<u8> = (0..w * h * channels).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
            let r = Raster { width: w, height: h, channels, maxval: 255, data };
            let mut buf = Vec::new();
            write_raster(&mut buf, &r).unwrap();
            prop_assert_eq!(read_raster(&buf[..]).unwrap(), r.clone());
            if !gray {
                let again = image_to_raster(&raster_to_image(&r).unwrap()).unwrap();
                prop_assert_eq!(again, r);
            }
        }
    }
}
