//! Dense multi-channel 3D volumes and the small set of voxel-level
//! operations the pipeline needs: min-max normalization, center cropping,
//! mask application, slice extraction, and a simple binary file format.
//!
//! Voxels are stored as `f32` in channel-major order: all of channel 0
//! (z-major, then y, then x), then channel 1, and so on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// File magic for serialized volumes.
const VOLUME_MAGIC: &[u8; 4] = b"RVF1";

/// A dense `channels x depth x height x width` grid of `f32` voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: (usize, usize, usize),
    voxels: Vec<f32>,
}

impl Volume {
    /// Build a volume from raw voxel data in channel-major order.
    /// Dimensions must be positive and `voxels.len()` must equal
    /// `channels * depth * height * width`.
    pub fn new(channels: usize, dims: (usize, usize, usize), voxels: Vec<f32>) -> Result<Self> {
        let (d, h, w) = dims;
        if channels == 0 || d == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!(
                "volume dims must be positive, got {channels} x {d} x {h} x {w}"
            )));
        }
        let expected = channels
            .checked_mul(d)
            .and_then(|n| n.checked_mul(h))
            .and_then(|n| n.checked_mul(w))
            .ok_or_else(|| Error::Dimension("volume dims overflow".into()))?;
        if voxels.len() != expected {
            return Err(Error::Dimension(format!(
                "voxel buffer has {} values, dims imply {expected}",
                voxels.len()
            )));
        }
        Ok(Volume {
            channels,
            dims,
            voxels,
        })
    }

    /// A volume filled with a constant value.
    pub fn filled(channels: usize, dims: (usize, usize, usize), value: f32) -> Result<Self> {
        let n = channels * dims.0 * dims.1 * dims.2;
        Volume::new(channels, dims, vec![value; n])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// Voxels of one channel within a single channel's grid.
    pub fn voxels_per_channel(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        let (_, h, w) = self.dims;
        ((c * self.dims.0 + z) * h + y) * w + x
    }

    #[inline]
    pub fn voxel(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.index(c, z, y, x)]
    }

    /// The voxel data of one channel.
    pub fn channel_data(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.voxels[c * n..(c + 1) * n]
    }

    /// Copy one channel out as a standalone 1-channel volume.
    pub fn channel(&self, c: usize) -> Result<Volume> {
        if c >= self.channels {
            return Err(Error::Dimension(format!(
                "channel {c} out of range (volume has {})",
                self.channels
            )));
        }
        Volume::new(1, self.dims, self.channel_data(c).to_vec())
    }

    /// Min-max normalize each channel independently to [0, 1]. A constant
    /// channel maps to all zeros. Non-constant channels attain both 0 and 1
    /// exactly (at the channel min and max).
    pub fn minmax_normalize(&self) -> Volume {
        let mut out = self.clone();
        let n = self.voxels_per_channel();
        for c in 0..self.channels {
            let chan = &mut out.voxels[c * n..(c + 1) * n];
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in chan.iter() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if lo == hi {
                chan.fill(0.0);
            } else {
                let range = hi - lo;
                for v in chan.iter_mut() {
                    *v = (*v - lo) / range;
                }
            }
        }
        out
    }

    /// Extract a centered sub-volume of the given spatial dimensions. The
    /// offset along each axis is `floor((src - target) / 2)`.
    pub fn center_crop(&self, target: (usize, usize, usize)) -> Result<Volume> {
        let (d, h, w) = self.dims;
        let (td, th, tw) = target;
        if td == 0 || th == 0 || tw == 0 {
            return Err(Error::Dimension(format!(
                "crop target must be positive, got {td} x {th} x {tw}"
            )));
        }
        if td > d || th > h || tw > w {
            return Err(Error::Dimension(format!(
                "crop target {td} x {th} x {tw} exceeds source {d} x {h} x {w}"
            )));
        }
        let (oz, oy, ox) = ((d - td) / 2, (h - th) / 2, (w - tw) / 2);
        let mut voxels = Vec::with_capacity(self.channels * td * th * tw);
        for c in 0..self.channels {
            for z in 0..td {
                for y in 0..th {
                    let start = self.index(c, oz + z, oy + y, ox);
                    voxels.extend_from_slice(&self.voxels[start..start + tw]);
                }
            }
        }
        Volume::new(self.channels, target, voxels)
    }

    /// Elementwise product with a perturbation mask of identical shape.
    pub fn apply_mask(&self, mask: &PerturbationMask) -> Result<Volume> {
        let m = mask.as_volume();
        if m.channels != self.channels || m.dims != self.dims {
            return Err(Error::Dimension(format!(
                "mask shape {} x {:?} does not match volume {} x {:?}",
                m.channels, m.dims, self.channels, self.dims
            )));
        }
        let voxels = self
            .voxels
            .iter()
            .zip(m.voxels.iter())
            .map(|(&v, &f)| v * f)
            .collect();
        Volume::new(self.channels, self.dims, voxels)
    }

    /// Extract a 2D slice from one channel. `axis` is 0 (z), 1 (y) or 2 (x);
    /// `index` selects the plane along that axis.
    pub fn extract_slice(&self, channel: usize, axis: usize, index: usize) -> Result<Slice2d> {
        if channel >= self.channels {
            return Err(Error::Dimension(format!(
                "channel {channel} out of range (volume has {})",
                self.channels
            )));
        }
        let (d, h, w) = self.dims;
        let extent = match axis {
            0 => d,
            1 => h,
            2 => w,
            _ => {
                return Err(Error::Dimension(format!(
                    "slice axis must be 0, 1 or 2, got {axis}"
                )))
            }
        };
        if index >= extent {
            return Err(Error::Dimension(format!(
                "slice index {index} out of range along axis {axis} (extent {extent})"
            )));
        }
        let (rows, cols) = match axis {
            0 => (h, w),
            1 => (d, w),
            _ => (d, h),
        };
        let mut values = Vec::with_capacity(rows * cols);
        match axis {
            0 => {
                for y in 0..h {
                    for x in 0..w {
                        values.push(self.voxel(channel, index, y, x));
                    }
                }
            }
            1 => {
                for z in 0..d {
                    for x in 0..w {
                        values.push(self.voxel(channel, z, index, x));
                    }
                }
            }
            _ => {
                for z in 0..d {
                    for y in 0..h {
                        values.push(self.voxel(channel, z, y, index));
                    }
                }
            }
        }
        Ok(Slice2d { rows, cols, values })
    }

    /// Write the volume to a file. Layout: 4-byte magic, four little-endian
    /// u32 fields (channels, depth, height, width), then the voxel payload as
    /// little-endian f32 in channel-major order.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let wrap = |e| Error::io(path, e);
        out.write_all(VOLUME_MAGIC).map_err(wrap)?;
        for field in [
            self.channels as u32,
            self.dims.0 as u32,
            self.dims.1 as u32,
            self.dims.2 as u32,
        ] {
            out.write_all(&field.to_le_bytes()).map_err(wrap)?;
        }
        for &v in &self.voxels {
            out.write_all(&v.to_le_bytes()).map_err(wrap)?;
        }
        out.flush().map_err(wrap)
    }

    /// Read a volume written by [`Volume::write`]. Malformed headers report
    /// the offending field by name.
    pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut inp = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact_field(&mut inp, &mut magic, path, "magic")?;
        if &magic != VOLUME_MAGIC {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(VOLUME_MAGIC)
            )));
        }

        let mut header = [0u64; 4];
        for (slot, name) in header
            .iter_mut()
            .zip(["channels", "depth", "height", "width"])
        {
            let mut buf = [0u8; 4];
            read_exact_field(&mut inp, &mut buf, path, name)?;
            let v = u32::from_le_bytes(buf);
            if v == 0 {
                return Err(Error::Format(format!(
                    "{}: field {name} is zero",
                    path.display()
                )));
            }
            *slot = v as u64;
        }
        let [channels, d, h, w] = header;
        let count = channels
            .checked_mul(d)
            .and_then(|n| n.checked_mul(h))
            .and_then(|n| n.checked_mul(w))
            .filter(|&n| n <= (usize::MAX as u64) / 4)
            .ok_or_else(|| {
                Error::Format(format!(
                    "{}: dims {channels} x {d} x {h} x {w} overflow",
                    path.display()
                ))
            })? as usize;

        let mut payload = vec![0u8; count * 4];
        inp.read_exact(&mut payload).map_err(|_| {
            Error::Format(format!(
                "{}: truncated voxel payload, expected {count} f32 values",
                path.display()
            ))
        })?;
        let mut trailing = [0u8; 1];
        if inp.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format(format!(
                "{}: trailing data after voxel payload",
                path.display()
            )));
        }
        let voxels = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Volume::new(
            channels as usize,
            (d as usize, h as usize, w as usize),
            voxels,
        )
    }
}

fn read_exact_field(inp: &mut impl Read, buf: &mut [u8], path: &Path, field: &str) -> Result<()> {
    inp.read_exact(buf).map_err(|_| {
        Error::Format(format!(
            "{}: truncated header while reading {field}",
            path.display()
        ))
    })
}

/// A generator-produced multiplicative mask: same shape as the volume it
/// perturbs, every value in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMask(Volume);

impl PerturbationMask {
    /// Validate that every value lies in [0, 1] and wrap. The generator's
    /// sigmoid output satisfies this by construction; masks read back from
    /// disk are checked here.
    pub fn new(volume: Volume) -> Result<Self> {
        if let Some(v) = volume.voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!(
                "perturbation mask value {v} outside [0, 1]"
            )));
        }
        Ok(PerturbationMask(volume))
    }

    pub fn as_volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }
}

/// A voxel-level binary mask (e.g. ground-truth lesion support). Stored on
/// disk as a 1-channel volume whose values are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    dims: (usize, usize, usize),
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: (usize, usize, usize), values: Vec<bool>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Dimension(format!(
                "mask dims must be positive, got {:?}",
                dims
            )));
        }
        if values.len() != n {
            return Err(Error::Dimension(format!(
                "mask buffer has {} values, dims imply {n}",
                values.len()
            )));
        }
        Ok(BinaryMask { dims, values })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Convert to the on-disk representation (1-channel volume of 0.0/1.0).
    pub fn to_volume(&self) -> Volume {
        let voxels = self
            .values
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        Volume::new(1, self.dims, voxels).expect("mask dims validated at construction")
    }

    /// Parse from the on-disk representation. Any value other than exactly
    /// 0.0 or 1.0, or a channel count other than 1, is a format error.
    pub fn from_volume(volume: &Volume) -> Result<Self> {
        if volume.channels() != 1 {
            return Err(Error::Format(format!(
                "binary mask must have 1 channel, got {}",
                volume.channels()
            )));
        }
        let mut values = Vec::with_capacity(volume.voxels().len());
        for &v in volume.voxels() {
            if v == 0.0 {
                values.push(false);
            } else if v == 1.0 {
                values.push(true);
            } else {
                return Err(Error::Format(format!(
                    "binary mask voxel {v} is neither 0.0 nor 1.0"
                )));
            }
        }
        BinaryMask::new(volume.dims(), values)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        BinaryMask::from_volume(&Volume::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_volume().write(path)
    }
}

/// One 2D plane extracted from a volume, in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Slice2d {
    /// Export as an 8-bit binary PGM (P5). Values are scaled linearly from
    /// the slice's [min, max] onto 0..=255; a constant slice maps to black.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|&v| {
                if range == 0.0 {
                    0u8
                } else {
                    let scaled = ((v - lo) / range * 255.0 + 0.5).floor();
                    scaled.clamp(0.0, 255.0) as u8
                }
            })
            .collect();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let wrap = |e| Error::io(path, e);
        write!(out, "P5\n{} {}\n255\n", self.cols, self.rows).map_err(wrap)?;
        out.write_all(&bytes).map_err(wrap)?;
        out.flush().map_err(wrap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        // 2 channels, 2x3x4, voxels 0..48 so every position is distinct.
        let voxels: Vec<f32> = (0..48).map(|i| i as f32).collect();
        Volume::new(2, (2, 3, 4), voxels).unwrap()
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(matches!(
            Volume::new(0, (2, 2, 2), vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Volume::new(1, (2, 0, 2), vec![]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Volume::new(1, (2, 2, 2), vec![0.0; 7]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn indexing_is_channel_major() {
        let v = sample_volume();
        assert_eq!(v.voxel(0, 0, 0, 0), 0.0);
        assert_eq!(v.voxel(0, 0, 0, 3), 3.0);
        assert_eq!(v.voxel(0, 0, 1, 0), 4.0);
        assert_eq!(v.voxel(0, 1, 0, 0), 12.0);
        assert_eq!(v.voxel(1, 0, 0, 0), 24.0);
        assert_eq!(v.channel_data(1)[0], 24.0);
    }

    #[test]
    fn normalize_maps_to_unit_range() {
        let v = Volume::new(1, (1, 1, 3), vec![2.0, 4.0, 6.0]).unwrap();
        let n = v.minmax_normalize();
        assert_eq!(n.voxels(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_constant_channel_is_zero() {
        let v = Volume::new(1, (1, 2, 2), vec![7.5; 4]).unwrap();
        let n = v.minmax_normalize();
        assert_eq!(n.voxels(), &[0.0; 4]);
    }

    #[test]
    fn normalize_is_per_channel_and_idempotent() {
        let mut voxels = vec![3.0, 5.0, 9.0, 3.0];
        voxels.extend_from_slice(&[-1.0, 0.0, 1.0, 3.0]);
        let v = Volume::new(2, (1, 2, 2), voxels).unwrap();
        let n = v.minmax_normalize();
        // Channel 0: range [3, 9]; channel 1: range [-1, 3].
        assert_eq!(n.channel_data(0), &[0.0, 2.0 / 6.0, 1.0, 0.0]);
        assert_eq!(n.channel_data(1), &[0.0, 0.25, 0.5, 1.0]);
        // Every non-constant channel attains both endpoints, so a second
        // pass is the identity.
        let nn = n.minmax_normalize();
        assert_eq!(nn, n);
    }

    #[test]
    fn normalize_stays_in_bounds() {
        let voxels: Vec<f32> = (0..64)
            .map(|i| ((i * 2654435761u64 as usize) % 1000) as f32 - 500.0)
            .collect();
        let v = Volume::new(1, (4, 4, 4), voxels).unwrap();
        let n = v.minmax_normalize();
        assert!(n.voxels().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(n.voxels().contains(&0.0));
        assert!(n.voxels().contains(&1.0));
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let v = sample_volume();
        let c = v.center_crop((2, 1, 2)).unwrap();
        assert_eq!(c.dims(), (2, 1, 2));
        assert_eq!(c.channels(), 2);
        // Offsets: z 0, y (3-1)/2 = 1, x (4-2)/2 = 1.
        assert_eq!(c.voxel(0, 0, 0, 0), v.voxel(0, 0, 1, 1));
        assert_eq!(c.voxel(1, 1, 0, 1), v.voxel(1, 1, 1, 2));
    }

    #[test]
    fn center_crop_identity_and_errors() {
        let v = sample_volume();
        assert_eq!(v.center_crop((2, 3, 4)).unwrap(), v);
        assert!(matches!(
            v.center_crop((3, 3, 4)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(v.center_crop((0, 1, 1)), Err(Error::Dimension(_))));
    }

    #[test]
    fn apply_mask_multiplies_elementwise() {
        let v = Volume::new(1, (1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = PerturbationMask::new(
            Volume::new(1, (1, 2, 2), vec![1.0, 0.5, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let p = v.apply_mask(&m).unwrap();
        assert_eq!(p.voxels(), &[1.0, 1.0, 0.0, 4.0]);
        // All-ones mask is the identity.
        let ones = PerturbationMask::new(Volume::filled(1, (1, 2, 2), 1.0).unwrap()).unwrap();
        assert_eq!(v.apply_mask(&ones).unwrap(), v);
    }

    #[test]
    fn apply_mask_rejects_shape_mismatch() {
        let v = sample_volume();
        let m = PerturbationMask::new(Volume::filled(1, (2, 3, 4), 1.0).unwrap()).unwrap();
        assert!(matches!(v.apply_mask(&m), Err(Error::Dimension(_))));
    }

    #[test]
    fn mask_rejects_out_of_range_values() {
        let v = Volume::new(1, (1, 1, 2), vec![0.5, 1.25]).unwrap();
        assert!(matches!(PerturbationMask::new(v), Err(Error::Format(_))));
        let v = Volume::new(1, (1, 1, 2), vec![-0.1, 0.5]).unwrap();
        assert!(matches!(PerturbationMask::new(v), Err(Error::Format(_))));
    }

    #[test]
    fn roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.rvol");
        let v = sample_volume();
        v.write(&path).unwrap();
        let r = Volume::read(&path).unwrap();
        assert_eq!(r, v);
        // Byte-level check: writing the reread volume produces an identical file.
        let path2 = dir.path().join("vol2.rvol");
        r.write(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn read_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.rvol");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        let err = Volume::read(&path).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("magic"), "message was: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn read_rejects_truncation_and_zero_dims() {
        let dir = tempfile::tempdir().unwrap();

        // Header cut short inside the height field.
        let path = dir.path().join("short.rvol");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVF1");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[0x01, 0x00]);
        std::fs::write(&path, &bytes).unwrap();
        match Volume::read(&path).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("height"), "message was: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        // Zero width.
        let path = dir.path().join("zero.rvol");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVF1");
        for v in [1u32, 1, 1, 0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        match Volume::read(&path).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("width"), "message was: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }

        // Payload shorter than the header promises.
        let path = dir.path().join("trunc.rvol");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RVF1");
        for v in [1u32, 1, 1, 4] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match Volume::read(&path).unwrap_err() {
            Error::Format(msg) => assert!(msg.contains("payload"), "message was: {msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn read_rejects_trailing_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trail.rvol");
        let v = Volume::new(1, (1, 1, 1), vec![1.0]).unwrap();
        v.write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(Volume::read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_missing_input() {
        let err = Volume::read("/nonexistent/path/vol.rvol").unwrap_err();
        assert!(matches!(err, Error::MissingInput(_)));
    }

    #[test]
    fn binary_mask_roundtrip_and_validation() {
        let m = BinaryMask::new((1, 2, 2), vec![true, false, false, true]).unwrap();
        assert_eq!(m.count(), 2);
        let v = m.to_volume();
        assert_eq!(v.voxels(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(BinaryMask::from_volume(&v).unwrap(), m);

        let bad = Volume::new(1, (1, 1, 2), vec![0.0, 0.5]).unwrap();
        assert!(matches!(
            BinaryMask::from_volume(&bad),
            Err(Error::Format(_))
        ));
        let two_chan = Volume::filled(2, (1, 1, 2), 1.0).unwrap();
        assert!(matches!(
            BinaryMask::from_volume(&two_chan),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn extract_slice_all_axes() {
        let v = sample_volume();
        let s = v.extract_slice(0, 0, 1).unwrap();
        assert_eq!((s.rows, s.cols), (3, 4));
        assert_eq!(s.values[0], v.voxel(0, 1, 0, 0));

        let s = v.extract_slice(1, 1, 2).unwrap();
        assert_eq!((s.rows, s.cols), (2, 4));
        assert_eq!(s.values[4], v.voxel(1, 1, 2, 0));

        let s = v.extract_slice(0, 2, 3).unwrap();
        assert_eq!((s.rows, s.cols), (2, 3));
        assert_eq!(s.values[1], v.voxel(0, 0, 1, 3));

        assert!(matches!(
            v.extract_slice(0, 3, 0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            v.extract_slice(0, 0, 2),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            v.extract_slice(2, 0, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn pgm_export_scales_to_full_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slice.pgm");
        let s = Slice2d {
            rows: 1,
            cols: 3,
            values: vec![1.0, 2.0, 3.0],
        };
        s.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"P5\n3 1\n25");
        let header_end = bytes.iter().filter(|&&b| b == b'\n').count();
        assert!(header_end >= 3);
        assert_eq!(&bytes[bytes.len() - 3..], &[0u8, 128, 255]);
    }

    #[test]
    fn pgm_export_constant_slice_is_black() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        let s = Slice2d {
            rows: 2,
            cols: 2,
            values: vec![5.0; 4],
        };
        s.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0u8; 4]);
    }
}
