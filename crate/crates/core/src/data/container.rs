//! `AVQD1` dataset container.
//!
//! ```text
//! "AVQD1"                       5 bytes
//! n_samples, image_size, channels (=3), grid     u32 each
//! per sample:
//!   pixels        image_size² · 3 × u8   (level k encodes k/255, row-major HWC)
//!   question_len  u32
//!   tokens        question_len × u32
//!   answer        u32
//!   gt_attention  grid² × f64
//! crc32                         u32 over every preceding byte
//! ```

use std::path::Path;

use super::synth::{Dataset, VqaSample};
use crate::binio::{put_f64, put_u32, Reader};
use crate::error::{Error, Result};
use crate::maps::GridMap;

pub const CONTAINER_MAGIC: &str = "AVQD1";

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC.as_bytes());
    put_u32(&mut out, dataset.samples.len() as u32);
    put_u32(&mut out, dataset.image_size as u32);
    put_u32(&mut out, 3);
    put_u32(&mut out, dataset.grid as u32);
    let pixels = dataset.image_size * dataset.image_size * 3;
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.image.len() != pixels || s.gt_attention.side() != dataset.grid {
            return Err(Error::Format(format!("sample {i} does not match the dataset geometry")));
        }
        for &v in &s.image {
            let level = (v * 255.0).round();
            if !(0.0..=255.0).contains(&level) || level / 255.0 != v {
                return Err(Error::Format(format!(
                    "sample {i}: pixel {v} is not a multiple of 1/255"
                )));
            }
            out.push(level as u8);
        }
        put_u32(&mut out, s.question.len() as u32);
        for &t in &s.question {
            put_u32(&mut out, t as u32);
        }
        put_u32(&mut out, s.answer as u32);
        for &v in s.gt_attention.values() {
            put_f64(&mut out, v);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

fn parse(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(buf);
    r.magic(CONTAINER_MAGIC)?;
    let n = r.u32("sample count")? as usize;
    let image_size = r.u32("image size")? as usize;
    let channels = r.u32("channel count")?;
    let grid = r.u32("grid")? as usize;
    if channels != 3 {
        return Err(Error::Format(format!("expected 3 channels, found {channels}")));
    }
    let pixels = image_size * image_size * 3;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let ctx = |what: &str| format!("sample {i} {what}");
        let image = r
            .bytes(pixels, &ctx("pixels"))?
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        let qlen = r.u32(&ctx("question length"))? as usize;
        if qlen > r.remaining() / 4 {
            return Err(Error::Truncated {
                offset: buf.len() as u64,
                context: ctx("question tokens"),
            });
        }
        let question = (0..qlen)
            .map(|_| r.u32(&ctx("token")).map(|t| t as usize))
            .collect::<Result<Vec<_>>>()?;
        let answer = r.u32(&ctx("answer"))? as usize;
        let gt = (0..grid * grid)
            .map(|_| r.f64(&ctx("attention")))
            .collect::<Result<Vec<_>>>()?;
        samples.push(VqaSample {
            image,
            question,
            answer,
            gt_attention: GridMap::new(grid, gt)?,
        });
    }
    r.u32("checksum")?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Dataset {
        image_size,
        grid,
        samples,
    })
}

pub fn decode(buf: &[u8]) -> Result<Dataset> {
    if buf.len() < CONTAINER_MAGIC.len() + 4 {
        Reader::new(buf).magic(CONTAINER_MAGIC)?;
        return Err(Error::Truncated {
            offset: buf.len() as u64,
            context: "header".into(),
        });
    }
    let (body, trailer) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return match parse(buf) {
            Err(e @ Error::BadMagic { .. }) => Err(e),
            parsed => Err(Error::Checksum {
                stored,
                computed,
                detail: parsed.err().map(|e| e.to_string()),
            }),
        };
    }
    parse(buf)
}

pub fn write_container(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, encode(dataset)?)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};

    fn dataset(n: usize) -> Dataset {
        generate(&DatasetSpec {
            n_samples: n,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_field_exact() {
        let d = dataset(100);
        let bytes = encode(&d).unwrap();
        assert_eq!(&bytes[..5], b"AVQD1");
        assert_eq!(decode(&bytes).unwrap(), d);
    }

    #[test]
    fn header_only_file_has_zero_samples() {
        let empty = Dataset {
            image_size: 28,
            grid: 7,
            samples: vec![],
        };
        let d = decode(&encode(&empty).unwrap()).unwrap();
        assert!(d.is_empty());
        assert_eq!((d.image_size, d.grid), (28, 7));
    }

    #[test]
    fn truncation_fails_the_checksum_and_names_the_offset() {
        let bytes = encode(&dataset(3)).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match decode(cut) {
            Err(Error::Checksum { detail: Some(d), .. }) => {
                assert!(d.contains(&format!("offset {}", cut.len())), "{d}")
            }
            other => panic!("expected a checksum error, got {other:?}"),
        }
        match decode(&bytes[..6]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_the_checksum() {
        let mut bytes = encode(&dataset(3)).unwrap();
        bytes[40] ^= 0x01;
        assert!(matches!(decode(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode(&dataset(1)).unwrap();
        bytes[..5].copy_from_slice(b"NOPE!");
        assert!(matches!(decode(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unquantized_pixels_are_refused() {
        let mut d = dataset(1);
        d.samples[0].image[0] = 0.123456;
        assert!(encode(&d).is_err());
    }
}
