//! File formats.
//!
//! * Volumes: `<name>.json` header plus `<name>.raw` with little-endian `f32`
//!   values, x-fastest. Flattened volumes use the same pair with
//!   `dims = [w, h, d]` and an extra `depth_step` key; 2D images stored this
//!   way carry `dims = [w, h, 1]`.
//! * Images: binary 16-bit PGM (`P5`, maxval 65535, big-endian samples) with
//!   `[-1, 1]` mapped linearly onto `[0, 65535]`.
//! * Arch curves: `{degree, coeffs, x_min, x_max}` JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchCurve;
use crate::error::{Error, Result};
use crate::synth::FVolume;
use crate::volume::{Image2, Volume3};

pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub dtype: String,
    pub range: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_step: Option<f64>,
}

/// `(header path, raw path)` for a volume stem; any extension is replaced.
pub fn volume_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref();
    (p.with_extension("json"), p.with_extension("raw"))
}

fn write_pair(path: &Path, header: &VolumeHeader, values: &[f32]) -> Result<()> {
    let (json, raw) = volume_paths(path);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes)?;
    fs::write(&json, serde_json::to_string_pretty(header)? + "\n")?;
    Ok(())
}

fn read_pair(path: &Path) -> Result<(VolumeHeader, Vec<f32>)> {
    let (json, raw) = volume_paths(path);
    let header: VolumeHeader = serde_json::from_slice(&fs::read(&json)?)?;
    if header.dtype != DTYPE {
        return Err(Error::Format(format!("unsupported dtype {:?} in {}", header.dtype, json.display())));
    }
    let bytes = fs::read(&raw)?;
    let n: usize = header.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, header dims {:?} need {}",
            raw.display(),
            bytes.len(),
            header.dims,
            n * 4
        )));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((header, values))
}

fn header(dims: [usize; 3], spacing: f64, depth_step: Option<f64>) -> VolumeHeader {
    VolumeHeader { dims, spacing, dtype: DTYPE.into(), range: [-1.0, 1.0], depth_step }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume3) -> Result<()> {
    write_pair(path.as_ref(), &header(v.dims(), v.spacing(), None), v.data())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let (h, values) = read_pair(path.as_ref())?;
    Volume3::from_vec(h.dims, values)?.with_spacing(h.spacing)
}

pub fn write_fvolume(path: impl AsRef<Path>, f: &FVolume) -> Result<()> {
    write_pair(path.as_ref(), &header(f.dims(), 1.0, Some(f.depth_step())), f.data())
}

pub fn read_fvolume(path: impl AsRef<Path>) -> Result<FVolume> {
    let (h, values) = read_pair(path.as_ref())?;
    let step = h
        .depth_step
        .ok_or_else(|| Error::Format("flattened volume header lacks depth_step".into()))?;
    FVolume::from_vec(h.dims, step, values)
}

pub fn write_image(path: impl AsRef<Path>, img: &Image2) -> Result<()> {
    let [w, h] = img.dims();
    write_pair(path.as_ref(), &header([w, h, 1], 1.0, None), img.data())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image2> {
    let (h, values) = read_pair(path.as_ref())?;
    if h.dims[2] != 1 {
        return Err(Error::Format(format!("image header has depth {}", h.dims[2])));
    }
    Image2::from_vec([h.dims[0], h.dims[1]], values)
}

pub fn encode_pgm16(img: &Image2) -> Vec<u8> {
    let [w, h] = img.dims();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(w * h * 2);
    for &v in img.data() {
        let level = (((v as f64 + 1.0) / 2.0) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<Image2> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5, found {}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 65535 {
        return Err(Error::Format(format!("expected 16-bit PGM, maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 2 {
        return Err(Error::Format(format!("PGM body has {} bytes, expected {}", body.len(), w * h * 2)));
    }
    let data = body
        .chunks_exact(2)
        .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0 * 2.0 - 1.0) as f32)
        .collect();
    Image2::from_vec([w, h], data)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &Image2) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_pgm16(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image2> {
    decode_pgm16(&fs::read(path)?)
}

pub fn write_curve(path: impl AsRef<Path>, curve: &ArchCurve) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(curve)? + "\n")?;
    Ok(())
}

pub fn read_curve(path: impl AsRef<Path>) -> Result<ArchCurve> {
    let curve: ArchCurve = serde_json::from_slice(&fs::read(path)?)?;
    curve.validate()?;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn volume_pair_layout() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3::from_vec([2, 1, 2], vec![-1.0, 0.5, 0.25, 1.0]).unwrap();
        write_volume(dir.path().join("vol"), &v).unwrap();
        let raw = fs::read(dir.path().join("vol.raw")).unwrap();
        assert_eq!(&raw[4..8], &0.5f32.to_le_bytes());
        let header: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("vol.json")).unwrap()).unwrap();
        assert_eq!(header["dims"], serde_json::json!([2, 1, 2]));
        assert_eq!(header["dtype"], "f32le");
        assert_eq!(header["range"], serde_json::json!([-1.0, 1.0]));
        assert_eq!(read_volume(dir.path().join("vol.json")).unwrap(), v);
    }

    #[test]
    fn truncated_raw_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3::filled([3, 3, 3], 0.0).unwrap();
        write_volume(dir.path().join("v"), &v).unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 10]).unwrap();
        assert!(matches!(read_volume(dir.path().join("v")), Err(Error::Format(_))));
    }

    #[test]
    fn flat_volume_and_curve_files() {
        let dir = tempfile::tempdir().unwrap();
        let f = FVolume::from_vec([2, 2, 1], 0.75, vec![0.1, -0.2, 0.3, 1.0]).unwrap();
        write_fvolume(dir.path().join("flat"), &f).unwrap();
        assert_eq!(read_fvolume(dir.path().join("flat")).unwrap(), f);
        assert!(read_volume(dir.path().join("flat")).is_ok());

        let c = ArchCurve::new(vec![1.0, -0.5, 0.01, 1e-4], 3.0, 90.0).unwrap();
        write_curve(dir.path().join("curve.json"), &c).unwrap();
        assert_eq!(read_curve(dir.path().join("curve.json")).unwrap(), c);
    }

    #[test]
    fn pgm_header_and_extremes() {
        let img = Image2::from_vec([2, 1], vec![-1.0, 1.0]).unwrap();
        let bytes = encode_pgm16(&img);
        assert_eq!(&bytes[..13], b"P5\n2 1\n65535\n");
        assert_eq!(&bytes[13..], &[0, 0, 255, 255]);
        assert_eq!(decode_pgm16(&bytes).unwrap(), img);
        assert!(decode_pgm16(b"P2\n1 1\n65535\n\0\0").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn files_round_trip(values in prop::collection::vec(-1.0f32..=1.0, 24)) {
            let dir = tempfile::tempdir().unwrap();
            let v = Volume3::from_vec([2, 3, 4], values.clone()).unwrap();
            write_volume(dir.path().join("a"), &v).unwrap();
            prop_assert_eq!(read_volume(dir.path().join("a")).unwrap(), v);

            let img = Image2::from_vec([6, 4], values).unwrap();
            write_image(dir.path().join("px"), &img).unwrap();
            prop_assert_eq!(&read_image(dir.path().join("px")).unwrap(), &img);
            let back = decode_pgm16(&encode_pgm16(&img)).unwrap();
            for (a, b) in back.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 65535.0 + 1e-7);
            }
        }
    }
}
