//! `XFS1` sample-stream format: little-endian, length-prefixed fields.
//!
//! Layout: magic `XFS1`, `u32` version, `u64` sample count, then per sample
//! the type code (`u8`), sequence and frame (`u32` each), image height and
//! width (`u64` each), and five optional fields in order (image, keypoints,
//! joints2d, joints3d, vertices3d). An optional field is a presence byte
//! followed, when present, by a `u64` byte length and the payload.

use std::io::{Read, Write};

use super::sample::{DatasetType, PoseSample};
use crate::error::{format_err, Result};
use crate::keypoint::Keypoints2D;
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: &[u8; 4] = b"XFS1";
pub const SAMPLE_VERSION: u32 = 1;

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut b = Vec::with_capacity(4 + 8 * (t.rank() + t.len()));
    b.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        b.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend(v.to_le_bytes());
    }
    b
}

fn keypoint_bytes(k: &Keypoints2D) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 + 17 * k.len());
    b.extend((k.len() as u64).to_le_bytes());
    for (c, &v) in k.coords.iter().zip(&k.visible) {
        b.extend(c[0].to_le_bytes());
        b.extend(c[1].to_le_bytes());
        b.push(v as u8);
    }
    b
}

fn write_field(out: &mut impl Write, payload: Option<Vec<u8>>) -> Result<()> {
    match payload {
        None => out.write_all(&[0])?,
        Some(p) => {
            out.write_all(&[1])?;
            out.write_all(&(p.len() as u64).to_le_bytes())?;
            out.write_all(&p)?;
        }
    }
    Ok(())
}

pub fn write_samples(out: &mut impl Write, samples: &[PoseSample]) -> Result<()> {
    out.write_all(SAMPLE_MAGIC)?;
    out.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    out.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        out.write_all(&[s.dataset_type.code()])?;
        out.write_all(&s.sequence.to_le_bytes())?;
        out.write_all(&s.frame.to_le_bytes())?;
        out.write_all(&(s.image_size[0] as u64).to_le_bytes())?;
        out.write_all(&(s.image_size[1] as u64).to_le_bytes())?;
        write_field(out, s.image.as_ref().map(tensor_bytes))?;
        write_field(out, s.keypoints.as_ref().map(keypoint_bytes))?;
        write_field(out, s.joints2d.as_ref().map(keypoint_bytes))?;
        write_field(out, s.joints3d.as_ref().map(tensor_bytes))?;
        write_field(out, s.vertices3d.as_ref().map(tensor_bytes))?;
    }
    Ok(())
}

/// Cursor over one field's payload.
struct Bytes<'a> {
    buf: &'a [u8],
}

impl<'a> Bytes<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(format_err("XFS1", "truncated field"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(format_err("XFS1", "trailing bytes in field"))
        }
    }
}

fn parse_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut b = Bytes { buf };
    let rank = b.u32()? as usize;
    let shape = (0..rank)
        .map(|_| b.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    if n.checked_mul(8).is_none_or(|bytes| bytes != b.buf.len()) {
        return Err(format_err(
            "XFS1",
            "tensor payload length disagrees with its shape",
        ));
    }
    let data = (0..n).map(|_| b.f64()).collect::<Result<Vec<_>>>()?;
    b.finish()?;
    Ok(Tensor::new(&shape, data)?)
}

fn parse_keypoints(buf: &[u8]) -> Result<Keypoints2D> {
    let mut b = Bytes { buf };
    let n = b.u64()? as usize;
    if n.checked_mul(17).is_none_or(|bytes| bytes != b.buf.len()) {
        return Err(format_err(
            "XFS1",
            "keypoint payload length disagrees with its count",
        ));
    }
    let mut coords = Vec::with_capacity(n);
    let mut visible = Vec::with_capacity(n);
    for _ in 0..n {
        coords.push([b.f64()?, b.f64()?]);
        visible.push(match b.take(1)?[0] {
            0 => false,
            1 => true,
            v => return Err(format_err("XFS1", format!("visibility byte {v}"))),
        });
    }
    Keypoints2D::new(coords, visible)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_field(r: &mut impl Read) -> Result<Option<Vec<u8>>> {
    match read_exact::<1>(r)?[0] {
        0 => Ok(None),
        1 => {
            let len = u64::from_le_bytes(read_exact(r)?) as usize;
            let mut p = Vec::new();
            r.take(len as u64).read_to_end(&mut p)?;
            if p.len() != len {
                return Err(format_err("XFS1", "truncated field"));
            }
            Ok(Some(p))
        }
        v => Err(format_err("XFS1", format!("presence byte {v}"))),
    }
}

pub fn read_samples(r: &mut impl Read) -> Result<Vec<PoseSample>> {
    if &read_exact::<4>(r)? != SAMPLE_MAGIC {
        return Err(format_err("XFS1", "bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != SAMPLE_VERSION {
        return Err(format_err("XFS1", format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(read_exact(r)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let code = read_exact::<1>(r)?[0];
        let dataset_type = DatasetType::from_code(code)
            .ok_or_else(|| format_err("XFS1", format!("dataset type code {code}")))?;
        let sequence = u32::from_le_bytes(read_exact(r)?);
        let frame = u32::from_le_bytes(read_exact(r)?);
        let h = u64::from_le_bytes(read_exact(r)?) as usize;
        let w = u64::from_le_bytes(read_exact(r)?) as usize;
        let image = read_field(r)?.map(|p| parse_tensor(&p)).transpose()?;
        let keypoints = read_field(r)?.map(|p| parse_keypoints(&p)).transpose()?;
        let joints2d = read_field(r)?.map(|p| parse_keypoints(&p)).transpose()?;
        let joints3d = read_field(r)?.map(|p| parse_tensor(&p)).transpose()?;
        let vertices3d = read_field(r)?.map(|p| parse_tensor(&p)).transpose()?;
        let s = PoseSample {
            dataset_type,
            image_size: [h, w],
            image,
            keypoints,
            joints2d,
            joints3d,
            vertices3d,
            sequence,
            frame,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_samples(path: &std::path::Path, samples: &[PoseSample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_samples(&mut w, samples)?;
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &std::path::Path) -> Result<Vec<PoseSample>> {
    read_samples(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}
