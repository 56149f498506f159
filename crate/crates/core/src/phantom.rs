//! Synthetic phantom generator. Each case is a multi-channel volume with a
//! smooth random background and one ellipsoidal blob; the binary label is
//! carried by the blob's *internal texture* (a high-frequency checkerboard),
//! not by blob presence — both classes contain a blob, so a classifier must
//! look inside it. The blob support doubles as the ground-truth mask for
//! localization scoring.
//!
//! Everything is driven by per-case ChaCha streams derived from the run
//! seed, so generation is reproducible and order-independent.

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::{self, TAG_CASE, TAG_LABELS, TAG_SPLIT};
use crate::volume::{BinaryMask, Volume};

/// Fraction of the volume the blob must occupy; draws outside this band are
/// rejected and retried.
const BLOB_FRACTION: (f64, f64) = (0.01, 0.30);
/// How many center/radius draws to attempt before giving up.
const MAX_BLOB_ATTEMPTS: usize = 64;
/// Background intensity is `BG_BASE + BG_SPAN * smooth_noise`.
const BG_BASE: f64 = 0.15;
const BG_SPAN: f64 = 0.4;
/// Peak intensity added at the blob center (fades to 0 at the boundary).
const DOME_AMPLITUDE: f64 = 0.35;
/// Coarse noise grid resolution for the smooth background.
const BG_GRID: usize = 4;

/// Parameters controlling phantom synthesis.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub seed: u64,
    pub count: usize,
    pub dims: (usize, usize, usize),
    pub channels: usize,
    /// Fraction of cases labeled 1 (textured blob).
    pub class_ratio: f64,
    /// Blob semi-axis range in voxels, drawn uniformly per axis.
    pub blob_radius_range: (f64, f64),
    /// Checkerboard amplitude inside class-1 blobs. Zero removes the class
    /// signal entirely (useful as a null control).
    pub texture_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            count: 200,
            dims: (32, 32, 32),
            channels: 2,
            class_ratio: 0.6,
            blob_radius_range: (5.0, 8.0),
            texture_contrast: 0.25,
        }
    }
}

/// One synthesized case: the volume, its class label, and the blob support
/// that serves as localization ground truth.
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub index: usize,
    pub volume: Volume,
    pub label: u8,
    pub truth: BinaryMask,
}

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split name {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generate `spec.count` cases. Labels are assigned globally so the class
/// ratio is exact (`round(count * class_ratio)` positives); volumes are
/// synthesized from per-case streams so any case can be regenerated in
/// isolation.
pub fn generate(spec: &PhantomSpec) -> Result<Vec<PhantomCase>> {
    validate_spec(spec)?;
    let labels = assign_labels(spec);
    let mut cases = Vec::with_capacity(spec.count);
    for index in 0..spec.count {
        cases.push(generate_case(spec, index, labels[index])?);
    }
    Ok(cases)
}

fn validate_spec(spec: &PhantomSpec) -> Result<()> {
    if spec.count == 0 {
        return Err(Error::Config("phantom count must be positive".into()));
    }
    if spec.channels == 0 {
        return Err(Error::Config("phantom channels must be positive".into()));
    }
    let (d, h, w) = spec.dims;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "phantom dims must be positive, got {d} x {h} x {w}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.class_ratio) {
        return Err(Error::Config(format!(
            "class ratio must lie in [0, 1], got {}",
            spec.class_ratio
        )));
    }
    let (rmin, rmax) = spec.blob_radius_range;
    if !(rmin > 0.0 && rmax >= rmin) {
        return Err(Error::Config(format!(
            "blob radius range must satisfy 0 < min <= max, got ({rmin}, {rmax})"
        )));
    }
    let margin = rmax.ceil() as usize;
    for (axis, extent) in [(0, d), (1, h), (2, w)] {
        if 2 * margin + 1 > extent {
            return Err(Error::Config(format!(
                "blob radius {rmax} does not fit along axis {axis} (extent {extent})"
            )));
        }
    }
    if spec.texture_contrast < 0.0 {
        return Err(Error::Config(format!(
            "texture contrast must be non-negative, got {}",
            spec.texture_contrast
        )));
    }
    Ok(())
}

/// Exactly `round(count * ratio)` cases get label 1; which ones is decided
/// by a seeded shuffle of the case indices.
fn assign_labels(spec: &PhantomSpec) -> Vec<u8> {
    let positives = (spec.count as f64 * spec.class_ratio).round() as usize;
    let mut order: Vec<usize> = (0..spec.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, TAG_LABELS, 0));
    order.shuffle(&mut rng);
    let mut labels = vec![0u8; spec.count];
    for &i in order.iter().take(positives) {
        labels[i] = 1;
    }
    labels
}

fn generate_case(spec: &PhantomSpec, index: usize, label: u8) -> Result<PhantomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(spec.seed, TAG_CASE, index as u64));
    let (d, h, w) = spec.dims;
    let per_chan = d * h * w;

    // Smooth background: trilinearly upsampled coarse noise, one grid per
    // channel, drawn first so the blob's rejection loop cannot shift it.
    let mut voxels = vec![0f32; spec.channels * per_chan];
    for c in 0..spec.channels {
        let grid: Vec<f64> = (0..BG_GRID * BG_GRID * BG_GRID)
            .map(|_| rng.random::<f64>())
            .collect();
        let chan = &mut voxels[c * per_chan..(c + 1) * per_chan];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let g = trilinear(&grid, BG_GRID, spec.dims, (z, y, x));
                    chan[(z * h + y) * w + x] = (BG_BASE + BG_SPAN * g) as f32;
                }
            }
        }
    }

    // Ellipsoidal blob: redraw center and radii until the support occupies
    // an acceptable fraction of the volume.
    let (center, radii, support) = draw_blob(spec, &mut rng)?;
    let truth = BinaryMask::new(spec.dims, support)?;

    // Dome: every blob voxel gains intensity that fades toward the surface,
    // in every channel. This makes the blob visible in both classes.
    // Class-1 blobs additionally carry a voxel-level checkerboard.
    for c in 0..spec.channels {
        let chan = &mut voxels[c * per_chan..(c + 1) * per_chan];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    if !truth.values()[i] {
                        continue;
                    }
                    let rho2 = rho_squared((z, y, x), center, radii);
                    chan[i] += (DOME_AMPLITUDE * (1.0 - rho2)) as f32;
                    if label == 1 {
                        let sign = if (z + y + x) % 2 == 0 { 1.0 } else { -1.0 };
                        chan[i] += (spec.texture_contrast * sign) as f32;
                    }
                }
            }
        }
    }

    Ok(PhantomCase {
        index,
        volume: Volume::new(spec.channels, spec.dims, voxels)?,
        label,
        truth,
    })
}

/// Normalized squared ellipsoid coordinate; <= 1 inside the blob.
fn rho_squared(p: (usize, usize, usize), center: (f64, f64, f64), radii: (f64, f64, f64)) -> f64 {
    let dz = (p.0 as f64 - center.0) / radii.0;
    let dy = (p.1 as f64 - center.1) / radii.1;
    let dx = (p.2 as f64 - center.2) / radii.2;
    dz * dz + dy * dy + dx * dx
}

type Blob = ((f64, f64, f64), (f64, f64, f64), Vec<bool>);

fn draw_blob(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Blob> {
    let (d, h, w) = spec.dims;
    let (rmin, rmax) = spec.blob_radius_range;
    let total = (d * h * w) as f64;
    for _ in 0..MAX_BLOB_ATTEMPTS {
        let radii = (
            rng.random_range(rmin..=rmax),
            rng.random_range(rmin..=rmax),
            rng.random_range(rmin..=rmax),
        );
        let mut center = (0.0, 0.0, 0.0);
        for (slot, (r, extent)) in [
            (&mut center.0, (radii.0, d)),
            (&mut center.1, (radii.1, h)),
            (&mut center.2, (radii.2, w)),
        ] {
            let margin = r.ceil() as usize;
            *slot = rng.random_range(margin..=extent - 1 - margin) as f64;
        }
        let mut support = vec![false; d * h * w];
        let mut count = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if rho_squared((z, y, x), center, radii) <= 1.0 {
                        support[(z * h + y) * w + x] = true;
                        count += 1;
                    }
                }
            }
        }
        let fraction = count as f64 / total;
        if (BLOB_FRACTION.0..=BLOB_FRACTION.1).contains(&fraction) {
            return Ok((center, radii, support));
        }
    }
    Err(Error::Config(format!(
        "could not place a blob occupying {:.0}%..{:.0}% of a {d} x {h} x {w} volume \
         with radii in [{rmin}, {rmax}] after {MAX_BLOB_ATTEMPTS} attempts",
        BLOB_FRACTION.0 * 100.0,
        BLOB_FRACTION.1 * 100.0,
    )))
}

/// Sample a coarse `gn^3` grid at a fractional position determined by the
/// voxel coordinate, with the grid corners pinned to the volume corners.
fn trilinear(
    grid: &[f64],
    gn: usize,
    dims: (usize, usize, usize),
    p: (usize, usize, usize),
) -> f64 {
    let coord = |v: usize, extent: usize| -> (usize, f64) {
        if extent <= 1 {
            return (0, 0.0);
        }
        let u = v as f64 * (gn - 1) as f64 / (extent - 1) as f64;
        let i = (u.floor() as usize).min(gn - 2);
        (i, u - i as f64)
    };
    let (iz, tz) = coord(p.0, dims.0);
    let (iy, ty) = coord(p.1, dims.1);
    let (ix, tx) = coord(p.2, dims.2);
    let at = |z: usize, y: usize, x: usize| grid[(z * gn + y) * gn + x];
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(iz, iy, ix), at(iz, iy, ix + 1), tx);
    let c01 = lerp(at(iz, iy + 1, ix), at(iz, iy + 1, ix + 1), tx);
    let c10 = lerp(at(iz + 1, iy, ix), at(iz + 1, iy, ix + 1), tx);
    let c11 = lerp(at(iz + 1, iy + 1, ix), at(iz + 1, iy + 1, ix + 1), tx);
    lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz)
}

/// Partition cases into train/val/test. Part sizes come from the fractions
/// by largest-remainder rounding; within each part the class mix tracks the
/// global ratio as closely as integer counts allow (stratification). Which
/// individual case lands where is decided by seeded per-class shuffles.
pub fn split(cases: &[PhantomCase], fractions: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let count = cases.len();
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!(
            "split fractions must be non-negative, got {fr:?}"
        )));
    }
    let sum: f64 = fr.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }

    let sizes = largest_remainder(&fr.map(|f| f * count as f64), count);
    if let Some(part) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!(
            "split part {} ({}) would be empty with fractions {fr:?} over {count} cases",
            part,
            [Split::Train, Split::Val, Split::Test][part]
        )));
    }

    let positives: Vec<usize> = (0..count).filter(|&i| cases[i].label == 1).collect();
    let negatives: Vec<usize> = (0..count).filter(|&i| cases[i].label == 0).collect();
    let pos_ratio = positives.len() as f64 / count as f64;

    // Per-part positive counts by largest remainder; negatives fill the rest.
    let pos_counts = largest_remainder(
        &[
            sizes[0] as f64 * pos_ratio,
            sizes[1] as f64 * pos_ratio,
            sizes[2] as f64 * pos_ratio,
        ],
        positives.len(),
    );

    let mut assignment = vec![Split::Train; count];
    for (class, (members, counts)) in [
        (1u64, (positives, pos_counts)),
        (
            0u64,
            (
                negatives,
                [
                    sizes[0] - pos_counts[0],
                    sizes[1] - pos_counts[1],
                    sizes[2] - pos_counts[2],
                ],
            ),
        ),
    ] {
        let mut order = members;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, TAG_SPLIT, class));
        order.shuffle(&mut rng);
        let mut it = order.into_iter();
        for (part, &n) in counts.iter().enumerate() {
            let split = [Split::Train, Split::Val, Split::Test][part];
            for _ in 0..n {
                let idx = it.next().expect("counts sum to member count");
                assignment[idx] = split;
            }
        }
    }
    Ok(assignment)
}

/// Integer apportionment: floor everything, then hand out the remaining
/// units to the largest fractional parts (ties to the lower index).
fn largest_remainder(ideals: &[f64; 3], total: usize) -> [usize; 3] {
    let mut out = [0usize; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for (i, &ideal) in ideals.iter().enumerate() {
        out[i] = ideal.floor() as usize;
        assigned += out[i];
        fracs[i] = (ideal - ideal.floor(), i);
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..total.saturating_sub(assigned) {
        out[fracs[k % 3].1] += 1;
    }
    out
}

/// One row of `manifest.tsv`.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub index: usize,
    pub label: u8,
    pub split: Split,
    pub volume: PathBuf,
    pub truth: PathBuf,
}

pub fn volume_filename(index: usize) -> String {
    format!("case_{index}.rvol")
}

pub fn truth_filename(index: usize) -> String {
    format!("case_{index}.truth.rvol")
}

/// Write all case volumes, truth masks and the manifest into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, cases: &[PhantomCase], splits: &[Split]) -> Result<()> {
    let dir = dir.as_ref();
    if cases.len() != splits.len() {
        return Err(Error::Usage(format!(
            "case count {} does not match split count {}",
            cases.len(),
            splits.len()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for case in cases {
        case.volume.write(dir.join(volume_filename(case.index)))?;
        case.truth.write(dir.join(truth_filename(case.index)))?;
    }
    let path = dir.join("manifest.tsv");
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let wrap = |e| Error::io(&path, e);
    writeln!(out, "index\tlabel\tsplit\tvolume\ttruth").map_err(wrap)?;
    for (case, split) in cases.iter().zip(splits) {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            case.index,
            case.label,
            split,
            volume_filename(case.index),
            truth_filename(case.index)
        )
        .map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

/// Parse `dir/manifest.tsv`. Paths in the manifest are interpreted relative
/// to `dir`.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("index\tlabel\tsplit\tvolume\ttruth") => {}
        Some(other) => {
            return Err(Error::Format(format!(
                "{}: unexpected manifest header {other:?}",
                path.display()
            )))
        }
        None => {
            return Err(Error::Format(format!(
                "{}: empty manifest",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "{}: line {} has {} fields, expected 5",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let parse_int = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| {
                Error::Format(format!(
                    "{}: line {}: bad {what} {s:?}",
                    path.display(),
                    lineno + 2
                ))
            })
        };
        let label = parse_int(fields[1], "label")?;
        if label > 1 {
            return Err(Error::Format(format!(
                "{}: line {}: label must be 0 or 1, got {label}",
                path.display(),
                lineno + 2
            )));
        }
        rows.push(ManifestRow {
            index: parse_int(fields[0], "index")?,
            label: label as u8,
            split: Split::parse(fields[2])?,
            volume: dir.join(fields[3]),
            truth: dir.join(fields[4]),
        });
    }
    Ok(rows)
}

/// Load every case referenced by a dataset directory's manifest.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<PhantomCase>, Vec<Split>)> {
    let rows = read_manifest(&dir)?;
    let mut cases = Vec::with_capacity(rows.len());
    let mut splits = Vec::with_capacity(rows.len());
    for row in rows {
        cases.push(PhantomCase {
            index: row.index,
            volume: Volume::read(&row.volume)?,
            label: row.label,
            truth: BinaryMask::read(&row.truth)?,
        });
        splits.push(row.split);
    }
    Ok((cases, splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            seed: 11,
            count: 20,
            dims: (16, 16, 16),
            channels: 2,
            class_ratio: 0.6,
            blob_radius_range: (2.5, 4.0),
            texture_contrast: 0.25,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.len(), b.len());
        for (ca, cb) in a.iter().zip(&b) {
            assert_eq!(ca.volume, cb.volume);
            assert_eq!(ca.label, cb.label);
            assert_eq!(ca.truth, cb.truth);
        }
        let mut other = spec.clone();
        other.seed = 12;
        let c = generate(&other).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.volume != y.volume));
    }

    #[test]
    fn label_counts_are_exact() {
        let cases = generate(&small_spec()).unwrap();
        let positives = cases.iter().filter(|c| c.label == 1).count();
        assert_eq!(positives, 12); // round(20 * 0.6)
    }

    #[test]
    fn blob_fraction_within_bounds() {
        for case in generate(&small_spec()).unwrap() {
            let n = 16 * 16 * 16;
            let frac = case.truth.count() as f64 / n as f64;
            assert!(
                (0.01..=0.30).contains(&frac),
                "case {} has blob fraction {frac}",
                case.index
            );
        }
    }

    #[test]
    fn truth_is_one_connected_component() {
        // 6-connected flood fill from any truth voxel must reach all of them.
        for case in generate(&small_spec()).unwrap() {
            let (d, h, w) = case.truth.dims();
            let vals = case.truth.values();
            let start = vals.iter().position(|&v| v).unwrap();
            let mut seen = vec![false; vals.len()];
            let mut stack = vec![start];
            seen[start] = true;
            let mut reached = 0usize;
            while let Some(i) = stack.pop() {
                reached += 1;
                let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
                let mut push = |zz: usize, yy: usize, xx: usize| {
                    let j = (zz * h + yy) * w + xx;
                    if vals[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if z > 0 {
                    push(z - 1, y, x);
                }
                if z + 1 < d {
                    push(z + 1, y, x);
                }
                if y > 0 {
                    push(z, y - 1, x);
                }
                if y + 1 < h {
                    push(z, y + 1, x);
                }
                if x > 0 {
                    push(z, y, x - 1);
                }
                if x + 1 < w {
                    push(z, y, x + 1);
                }
            }
            assert_eq!(reached, case.truth.count(), "case {}", case.index);
        }
    }

    /// Mean squared difference between each truth voxel and its 6-neighbor
    /// average: large for checkerboard texture, small for smooth content.
    fn roughness(case: &PhantomCase) -> f64 {
        let v = &case.volume;
        let (d, h, w) = v.dims();
        let mut acc = 0.0;
        let mut n = 0usize;
        for z in 1..d - 1 {
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    if !case.truth.values()[(z * h + y) * w + x] {
                        continue;
                    }
                    let center = v.voxel(0, z, y, x) as f64;
                    let neigh = (v.voxel(0, z - 1, y, x) as f64
                        + v.voxel(0, z + 1, y, x) as f64
                        + v.voxel(0, z, y - 1, x) as f64
                        + v.voxel(0, z, y + 1, x) as f64
                        + v.voxel(0, z, y, x - 1) as f64
                        + v.voxel(0, z, y, x + 1) as f64)
                        / 6.0;
                    acc += (center - neigh) * (center - neigh);
                    n += 1;
                }
            }
        }
        acc / n as f64
    }

    #[test]
    fn label_is_carried_by_texture_not_blob_presence() {
        let cases = generate(&small_spec()).unwrap();
        // Every case has a blob regardless of label.
        assert!(cases.iter().all(|c| c.truth.count() > 0));
        let mean = |label: u8| {
            let picked: Vec<f64> = cases
                .iter()
                .filter(|c| c.label == label)
                .map(roughness)
                .collect();
            picked.iter().sum::<f64>() / picked.len() as f64
        };
        let (smooth, textured) = (mean(0), mean(1));
        assert!(
            textured > 4.0 * smooth,
            "texture statistic should separate classes: {textured} vs {smooth}"
        );
    }

    #[test]
    fn zero_contrast_removes_class_signal() {
        let mut spec = small_spec();
        spec.texture_contrast = 0.0;
        let cases = generate(&spec).unwrap();
        let rough: Vec<f64> = cases.iter().map(roughness).collect();
        let mean = |label: u8| {
            let vals: Vec<f64> = cases
                .iter()
                .zip(&rough)
                .filter(|(c, _)| c.label == label)
                .map(|(_, &r)| r)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let ratio = mean(1) / mean(0);
        assert!(
            (0.5..2.0).contains(&ratio),
            "classes should be indistinguishable, roughness ratio {ratio}"
        );
    }

    #[test]
    fn rejects_oversized_radii() {
        let mut spec = small_spec();
        spec.blob_radius_range = (7.0, 9.0);
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let cases = generate(&small_spec()).unwrap();
        let assignment = split(&cases, (0.7, 0.1, 0.2), 5).unwrap();
        let count = |s: Split| assignment.iter().filter(|&&a| a == s).count();
        assert_eq!(count(Split::Train), 14);
        assert_eq!(count(Split::Val), 2);
        assert_eq!(count(Split::Test), 4);
    }

    #[test]
    fn split_is_stratified() {
        let mut spec = small_spec();
        spec.count = 50;
        let cases = generate(&spec).unwrap();
        let assignment = split(&cases, (0.6, 0.2, 0.2), 5).unwrap();
        let global = cases.iter().filter(|c| c.label == 1).count() as f64 / 50.0;
        for part in [Split::Train, Split::Val, Split::Test] {
            let members: Vec<&PhantomCase> = cases
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == part)
                .map(|(c, _)| c)
                .collect();
            let pos = members.iter().filter(|c| c.label == 1).count() as f64;
            let ratio = pos / members.len() as f64;
            assert!(
                (ratio - global).abs() <= 1.0 / members.len() as f64 + 1e-12,
                "{part}: ratio {ratio} strays from {global}"
            );
        }
    }

    #[test]
    fn split_is_deterministic_and_validates() {
        let cases = generate(&small_spec()).unwrap();
        assert_eq!(
            split(&cases, (0.7, 0.1, 0.2), 5).unwrap(),
            split(&cases, (0.7, 0.1, 0.2), 5).unwrap()
        );
        assert!(matches!(
            split(&cases, (0.5, 0.2, 0.2), 5),
            Err(Error::Config(_))
        ));
        // A fraction small enough to round to an empty part is rejected.
        assert!(matches!(
            split(&cases, (0.98, 0.01, 0.01), 5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small_spec();
        spec.count = 6;
        spec.class_ratio = 0.5;
        let cases = generate(&spec).unwrap();
        let splits = split(&cases, (0.5, 0.25, 0.25), 3).unwrap();
        write_dataset(dir.path(), &cases, &splits).unwrap();

        let (loaded, loaded_splits) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 6);
        assert_eq!(loaded_splits, splits);
        for (orig, back) in cases.iter().zip(&loaded) {
            assert_eq!(orig.index, back.index);
            assert_eq!(orig.label, back.label);
            assert_eq!(orig.volume, back.volume);
            assert_eq!(orig.truth, back.truth);
        }
    }

    #[test]
    fn manifest_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "wrong\theader\n").unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Format(_))));

        std::fs::write(
            dir.path().join("manifest.tsv"),
            "index\tlabel\tsplit\tvolume\ttruth\n0\t2\ttrain\ta\tb\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Format(_))));

        std::fs::write(
            dir.path().join("manifest.tsv"),
            "index\tlabel\tsplit\tvolume\ttruth\n0\t1\tnowhere\ta\tb\n",
        )
        .unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Format(_))));
    }
}
