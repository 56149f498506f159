//! Ranked relevance regions from perturbation masks.
//!
//! Each channel is segmented into superpixels (on the min–max normalized
//! intensities), every superpixel is painted with the sum of that channel's
//! mask values over the region, the painted channels are summed voxelwise
//! into one combined volume, and the combined scores are split into B
//! equal-width bins. Rank 0 is the most relevant bin. The generator
//! suppresses the regions the classifier relies on, so by default LOW mask
//! values mean HIGH relevance and scores are inverted (max − value) before
//! binning; `low_mask_is_relevant: false` ranks the raw scores directly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::slic::{slic_segment, SlicConfig, SuperpixelMap};
use crate::volume::{BinaryMask, PerturbationMask, Volume};

/// How a superpixel's mask values become its painted score. Summing is
/// the reference behavior; mean-painting removes the size bias large
/// regions pick up from summation and exists for comparison runs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaintMode {
    #[default]
    Sum,
    Mean,
}

impl PaintMode {
    pub fn parse(s: &str) -> Result<PaintMode> {
        match s {
            "sum" => Ok(PaintMode::Sum),
            "mean" => Ok(PaintMode::Mean),
            other => Err(Error::Config(format!(
                "relevance.paint must be \"sum\" or \"mean\", got {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PaintMode::Sum => "sum",
            PaintMode::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelevanceConfig {
    /// Number of rank bins.
    pub bins: usize,
    /// Score orientation: when true, small painted scores rank first.
    pub low_mask_is_relevant: bool,
    /// Region score: sum of mask values (reference) or their mean.
    pub paint: PaintMode,
    /// Superpixel settings, applied per channel.
    pub slic: SlicConfig,
}

impl Default for RelevanceConfig {
    fn default() -> Self {
        RelevanceConfig {
            bins: 10,
            low_mask_is_relevant: true,
            paint: PaintMode::Sum,
            slic: SlicConfig::default(),
        }
    }
}

impl RelevanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "relevance.bins must be at least 2, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Combined relevance scores plus their rank quantization.
#[derive(Debug, Clone)]
pub struct RelevanceMap {
    combined: Volume,
    ranks: Vec<u32>,
    bin_count: usize,
    low_mask_is_relevant: bool,
    per_sequence: Vec<Volume>,
}

impl RelevanceMap {
    /// Voxelwise combined (summed painted) scores, 1-channel.
    pub fn combined(&self) -> &Volume {
        &self.combined
    }

    /// Rank per voxel; 0 is most relevant.
    pub fn ranks(&self) -> &[u32] {
        &self.ranks
    }

    pub fn bin_count(&self) -> usize {
        self.bin_count
    }

    pub fn low_mask_is_relevant(&self) -> bool {
        self.low_mask_is_relevant
    }

    /// Painted per-channel volumes (empty when loaded from disk).
    pub fn per_sequence(&self) -> &[Volume] {
        &self.per_sequence
    }

    pub(crate) fn set_per_sequence(&mut self, painted: Vec<Volume>) {
        self.per_sequence = painted;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.combined.dims()
    }

    /// Voxels whose rank is exactly `r`.
    pub fn top_regions(&self, r: usize) -> Result<BinaryMask> {
        if r >= self.bin_count {
            return Err(Error::Usage(format!(
                "rank {r} out of range: map has {} bins",
                self.bin_count
            )));
        }
        let values = self.ranks.iter().map(|&b| b as usize == r).collect();
        BinaryMask::new(self.dims(), values)
    }

    /// Ranks as a 1-channel volume of exact small integers.
    pub fn ranks_volume(&self) -> Volume {
        let voxels = self.ranks.iter().map(|&r| r as f32).collect();
        Volume::new(1, self.dims(), voxels).expect("ranks match dims")
    }

    /// Writes `<stem>.combined.rvol`, `<stem>.ranks.rvol`, and
    /// `<stem>.manifest.txt` (one line: bin count and score direction).
    pub fn write_dir(&self, dir: &Path, stem: &str) -> Result<()> {
        self.combined.write(&dir.join(format!("{stem}.combined.rvol")))?;
        self.ranks_volume().write(&dir.join(format!("{stem}.ranks.rvol")))?;
        let manifest = dir.join(format!("{stem}.manifest.txt"));
        let line = format!(
            "bins={}\tlow_mask_is_relevant={}\n",
            self.bin_count, self.low_mask_is_relevant
        );
        fs::write(&manifest, line).map_err(|e| Error::io(&manifest, e))
    }

    /// Inverse of [`write_dir`]. Painted per-channel volumes are not
    /// persisted, so `per_sequence` comes back empty.
    pub fn read_dir(dir: &Path, stem: &str) -> Result<RelevanceMap> {
        let combined = Volume::read(&dir.join(format!("{stem}.combined.rvol")))?;
        let ranks_vol = Volume::read(&dir.join(format!("{stem}.ranks.rvol")))?;
        let manifest = dir.join(format!("{stem}.manifest.txt"));
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut bins: Option<usize> = None;
        let mut low: Option<bool> = None;
        for field in text.trim_end().split('\t') {
            match field.split_once('=') {
                Some(("bins", v)) => {
                    bins = Some(v.parse().map_err(|_| {
                        Error::Format(format!("bad bin count {v:?} in relevance manifest"))
                    })?);
                }
                Some(("low_mask_is_relevant", v)) => {
                    low = Some(v.parse().map_err(|_| {
                        Error::Format(format!("bad score direction {v:?} in relevance manifest"))
                    })?);
                }
                _ => {
                    return Err(Error::Format(format!(
                        "unexpected relevance manifest field {field:?}"
                    )));
                }
            }
        }
        let bin_count =
            bins.ok_or_else(|| Error::Format("relevance manifest is missing bins".into()))?;
        let low_mask_is_relevant = low
            .ok_or_else(|| Error::Format("relevance manifest is missing score direction".into()))?;
        if bin_count < 2 {
            return Err(Error::Format(format!("implausible bin count {bin_count}")));
        }
        if ranks_vol.channels() != 1 || ranks_vol.dims() != combined.dims() {
            return Err(Error::Format("rank volume does not match combined volume".into()));
        }
        let mut ranks = Vec::with_capacity(ranks_vol.voxels().len());
        for &v in ranks_vol.voxels() {
            if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && (v as usize) < bin_count) {
                return Err(Error::Format(format!("{v} is not a valid rank")));
            }
            ranks.push(v as u32);
        }
        if !ranks.contains(&0) {
            return Err(Error::Format("rank 0 is empty in stored relevance map".into()));
        }
        Ok(RelevanceMap {
            combined,
            ranks,
            bin_count,
            low_mask_is_relevant,
            per_sequence: Vec::new(),
        })
    }
}

/// Paint every superpixel with the sum of `mask_channel` over its voxels.
pub fn paint_superpixels(mask_channel: &Volume, spmap: &SuperpixelMap) -> Result<Volume> {
    paint_superpixels_mode(mask_channel, spmap, PaintMode::Sum)
}

/// [`paint_superpixels`] with an explicit paint mode.
pub fn paint_superpixels_mode(
    mask_channel: &Volume,
    spmap: &SuperpixelMap,
    mode: PaintMode,
) -> Result<Volume> {
    if mask_channel.channels() != 1 || mask_channel.dims() != spmap.dims() {
        return Err(Error::Dimension(format!(
            "mask channel is {} x {:?}, superpixel map is 1 x {:?}",
            mask_channel.channels(),
            mask_channel.dims(),
            spmap.dims()
        )));
    }
    let mut sums = vec![0.0f64; spmap.count()];
    for (&v, &l) in mask_channel.voxels().iter().zip(spmap.labels()) {
        sums[l as usize] += v as f64;
    }
    if mode == PaintMode::Mean {
        for (s, &n) in sums.iter_mut().zip(&spmap.region_sizes()) {
            *s /= n as f64;
        }
    }
    paint_scores(&sums, spmap)
}

/// Paint every superpixel with an externally computed score.
pub fn paint_scores(scores: &[f64], spmap: &SuperpixelMap) -> Result<Volume> {
    if scores.len() != spmap.count() {
        return Err(Error::Dimension(format!(
            "{} scores for {} superpixels",
            scores.len(),
            spmap.count()
        )));
    }
    let painted = spmap
        .labels()
        .iter()
        .map(|&l| scores[l as usize] as f32)
        .collect();
    Volume::new(1, spmap.dims(), painted)
}

/// Voxelwise sum of painted channels.
pub fn combine_sequences(painted: &[Volume]) -> Result<Volume> {
    let first = painted
        .first()
        .ok_or_else(|| Error::Dimension("no painted volumes to combine".into()))?;
    let dims = first.dims();
    let mut sums = vec![0.0f64; first.voxels().len()];
    for p in painted {
        if p.channels() != 1 || p.dims() != dims {
            return Err(Error::Dimension(format!(
                "cannot combine {} x {:?} with 1 x {dims:?}",
                p.channels(),
                p.dims()
            )));
        }
        for (s, &v) in sums.iter_mut().zip(p.voxels()) {
            *s += v as f64;
        }
    }
    Volume::new(1, dims, sums.into_iter().map(|s| s as f32).collect())
}

/// Quantize combined scores into `cfg.bins` equal-width bins between the
/// min and max of the oriented scores; rank 0 is the highest-value bin.
pub fn bin_ranks(combined: &Volume, cfg: &RelevanceConfig) -> Result<RelevanceMap> {
    cfg.validate()?;
    if combined.channels() != 1 {
        return Err(Error::Dimension(format!(
            "combined volume must be 1-channel, got {}",
            combined.channels()
        )));
    }
    let oriented: Vec<f64> = if cfg.low_mask_is_relevant {
        let top = combined
            .voxels()
            .iter()
            .fold(f64::MIN, |m, &v| m.max(v as f64));
        combined.voxels().iter().map(|&v| top - v as f64).collect()
    } else {
        combined.voxels().iter().map(|&v| v as f64).collect()
    };
    if oriented.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("combined relevance scores".into()));
    }
    let lo = oriented.iter().cloned().fold(f64::MAX, f64::min);
    let hi = oriented.iter().cloned().fold(f64::MIN, f64::max);
    if lo == hi {
        return Err(Error::DegenerateMap(format!(
            "combined relevance is constant ({lo}); ranking is impossible"
        )));
    }
    let b = cfg.bins;
    let ranks = oriented
        .iter()
        .map(|&v| {
            let j = (((v - lo) / (hi - lo)) * b as f64).floor() as usize;
            (b - 1 - j.min(b - 1)) as u32
        })
        .collect();
    Ok(RelevanceMap {
        combined: combined.clone(),
        ranks,
        bin_count: b,
        low_mask_is_relevant: cfg.low_mask_is_relevant,
        per_sequence: Vec::new(),
    })
}

/// Full per-case pipeline: segment each channel (on normalized
/// intensities), paint with that channel's mask slice, combine, bin.
pub fn generate_relevance(
    volume: &Volume,
    mask: &PerturbationMask,
    cfg: &RelevanceConfig,
) -> Result<RelevanceMap> {
    cfg.validate()?;
    let mv = mask.as_volume();
    if mv.channels() != volume.channels() || mv.dims() != volume.dims() {
        return Err(Error::Dimension(format!(
            "mask is {} x {:?}, volume is {} x {:?}",
            mv.channels(),
            mv.dims(),
            volume.channels(),
            volume.dims()
        )));
    }
    let mut painted = Vec::with_capacity(volume.channels());
    for c in 0..volume.channels() {
        let spmap = slic_segment(&volume.channel(c)?.minmax_normalize(), &cfg.slic)?;
        painted.push(paint_superpixels_mode(&mv.channel(c)?, &spmap, cfg.paint)?);
    }
    let combined = combine_sequences(&painted)?;
    let mut rm = bin_ranks(&combined, cfg)?;
    rm.per_sequence = painted;
    Ok(rm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn split_map_4x4x4() -> SuperpixelMap {
        // Two 32-voxel halves along z.
        let mut labels = vec![0u32; 64];
        for l in labels.iter_mut().skip(32) {
            *l = 1;
        }
        SuperpixelMap::new((4, 4, 4), labels).unwrap()
    }

    fn no_inversion(bins: usize) -> RelevanceConfig {
        RelevanceConfig {
            bins,
            low_mask_is_relevant: false,
            ..RelevanceConfig::default()
        }
    }

    #[test]
    fn paint_sums_over_regions() {
        let whole = SuperpixelMap::new((2, 2, 2), vec![0; 8]).unwrap();
        let constant = Volume::filled(1, (2, 2, 2), 0.25).unwrap();
        let painted = paint_superpixels(&constant, &whole).unwrap();
        assert!(painted.voxels().iter().all(|&v| v == 2.0));

        let halves = split_map_4x4x4();
        let mut mask = vec![0.0f32; 64];
        for m in mask.iter_mut().skip(32) {
            *m = 1.0;
        }
        let mask = Volume::new(1, (4, 4, 4), mask).unwrap();
        let painted = paint_superpixels(&mask, &halves).unwrap();
        for (i, &v) in painted.voxels().iter().enumerate() {
            assert_eq!(v, if i < 32 { 0.0 } else { 32.0 });
        }
    }

    #[test]
    fn mean_painting_divides_by_region_size() {
        let halves = split_map_4x4x4();
        let mut mask = vec![0.0f32; 64];
        for m in mask.iter_mut().skip(32) {
            *m = 0.5;
        }
        let mask = Volume::new(1, (4, 4, 4), mask).unwrap();
        let painted = paint_superpixels_mode(&mask, &halves, PaintMode::Mean).unwrap();
        for (i, &v) in painted.voxels().iter().enumerate() {
            assert_eq!(v, if i < 32 { 0.0 } else { 0.5 });
        }
        assert!(PaintMode::parse("banana").is_err());
        assert_eq!(PaintMode::parse("mean").unwrap(), PaintMode::Mean);
    }

    #[test]
    fn paint_is_order_free_within_regions() {
        let halves = split_map_4x4x4();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut permuted = values.clone();
        permuted[..32].reverse();
        permuted[32..].rotate_left(7);
        let a = paint_superpixels(&Volume::new(1, (4, 4, 4), values).unwrap(), &halves).unwrap();
        let b = paint_superpixels(&Volume::new(1, (4, 4, 4), permuted).unwrap(), &halves).unwrap();
        assert_eq!(a.voxels(), b.voxels());
    }

    #[test]
    fn paint_rejects_shape_mismatch() {
        let halves = split_map_4x4x4();
        let wrong = Volume::filled(1, (2, 4, 4), 0.0).unwrap();
        assert!(matches!(
            paint_superpixels(&wrong, &halves),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            paint_scores(&[1.0], &halves),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn combine_is_voxelwise_sum() {
        let a = Volume::new(1, (1, 1, 4), vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        let b = Volume::new(1, (1, 1, 4), vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let one = combine_sequences(std::slice::from_ref(&a)).unwrap();
        assert_eq!(one.voxels(), a.voxels());
        let double = combine_sequences(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(double.voxels(), &[2.0, 4.0, 0.0, 0.0]);
        let union = combine_sequences(&[a.clone(), b]).unwrap();
        assert_eq!(union.voxels(), &[1.0, 2.0, 3.0, 4.0]);

        assert!(matches!(combine_sequences(&[]), Err(Error::Dimension(_))));
        let wrong = Volume::filled(1, (1, 1, 3), 0.0).unwrap();
        assert!(matches!(
            combine_sequences(&[a, wrong]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn decade_fixture_bins_exactly() {
        let values: Vec<f32> = (0..100).map(|v| v as f32).collect();
        let combined = Volume::new(1, (1, 10, 10), values).unwrap();
        let rm = bin_ranks(&combined, &no_inversion(10)).unwrap();
        for v in 0..100u32 {
            let expect = 9 - v / 10; // value decade [90−10r, 100−10r) gets rank r
            assert_eq!(rm.ranks()[v as usize], expect, "value {v}");
        }
        let top = rm.top_regions(0).unwrap();
        let picked: Vec<usize> = (0..100).filter(|&i| top.values()[i]).collect();
        assert_eq!(picked, (90..100).collect::<Vec<_>>());
    }

    #[test]
    fn two_bins_and_orientation() {
        let mut values = vec![0.0f32; 8];
        values[3] = 1.0;
        values[6] = 1.0;
        let combined = Volume::new(1, (2, 2, 2), values).unwrap();

        let raw = bin_ranks(&combined, &no_inversion(2)).unwrap();
        for (i, &r) in raw.ranks().iter().enumerate() {
            assert_eq!(r, (i != 3 && i != 6) as u32);
        }

        // Default orientation inverts: the low-score voxels rank first.
        let inverted = bin_ranks(
            &combined,
            &RelevanceConfig {
                bins: 2,
                ..RelevanceConfig::default()
            },
        )
        .unwrap();
        for (i, &r) in inverted.ranks().iter().enumerate() {
            assert_eq!(r, (i == 3 || i == 6) as u32);
        }
    }

    #[test]
    fn constant_map_is_degenerate() {
        let combined = Volume::filled(1, (2, 2, 2), 0.7).unwrap();
        assert!(matches!(
            bin_ranks(&combined, &no_inversion(10)),
            Err(Error::DegenerateMap(_))
        ));
    }

    #[test]
    fn ranks_partition_and_order_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let values: Vec<f32> = (0..216).map(|_| rng.random_range(0.0..1.0)).collect();
        let combined = Volume::new(1, (6, 6, 6), values).unwrap();
        let cfg = RelevanceConfig::default();
        let rm = bin_ranks(&combined, &cfg).unwrap();

        // top_regions over all ranks is a disjoint cover.
        let mut covered = vec![false; 216];
        for r in 0..rm.bin_count() {
            for (i, &inside) in rm.top_regions(r).unwrap().values().iter().enumerate() {
                assert!(!(inside && covered[i]), "voxel {i} in two ranks");
                covered[i] |= inside;
            }
        }
        assert!(covered.iter().all(|&c| c));
        assert!(!rm.top_regions(0).unwrap().values().iter().all(|&v| !v));
        assert!(matches!(rm.top_regions(10), Err(Error::Usage(_))));

        // Mean oriented score non-increasing with rank (strict where both
        // bins are nonempty, which random data gives us).
        let mut sums = vec![(0.0f64, 0usize); rm.bin_count()];
        for (&v, &r) in combined.voxels().iter().zip(rm.ranks()) {
            let oriented = 1.0 - v as f64; // low_mask_is_relevant default
            sums[r as usize].0 += oriented;
            sums[r as usize].1 += 1;
        }
        let mut last = f64::MAX;
        for (s, n) in sums {
            if n == 0 {
                continue;
            }
            let mean = s / n as f64;
            assert!(mean < last, "rank means not decreasing");
            last = mean;
        }
    }

    #[test]
    fn generate_relevance_is_linear_over_identical_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chan: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask_chan: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask_chan_copy = mask_chan.clone();

        let cfg = RelevanceConfig {
            slic: SlicConfig {
                k: 4,
                ..SlicConfig::default()
            },
            ..RelevanceConfig::default()
        };
        let single = {
            let volume = Volume::new(1, (4, 4, 4), chan.clone()).unwrap();
            let mask =
                PerturbationMask::new(Volume::new(1, (4, 4, 4), mask_chan.clone()).unwrap())
                    .unwrap();
            generate_relevance(&volume, &mask, &cfg).unwrap()
        };
        let double = {
            let volume = Volume::new(2, (4, 4, 4), [chan.clone(), chan.clone()].concat()).unwrap();
            let mask = PerturbationMask::new(
                Volume::new(2, (4, 4, 4), [mask_chan.clone(), mask_chan].concat()).unwrap(),
            )
            .unwrap();
            generate_relevance(&volume, &mask, &cfg).unwrap()
        };
        assert_eq!(double.per_sequence().len(), 2);
        for (d, s) in double.combined().voxels().iter().zip(single.combined().voxels()) {
            assert_eq!(*d, 2.0 * s);
        }
        // Same inputs twice → identical map.
        let volume = Volume::new(1, (4, 4, 4), chan).unwrap();
        let mask =
            PerturbationMask::new(Volume::new(1, (4, 4, 4), mask_chan_copy).unwrap()).unwrap();
        let rerun = generate_relevance(&volume, &mask, &cfg).unwrap();
        assert_eq!(rerun.ranks(), single.ranks());
        assert_eq!(rerun.combined().voxels(), single.combined().voxels());
    }

    #[test]
    fn generate_relevance_rejects_shape_mismatch() {
        let volume = Volume::filled(2, (4, 4, 4), 0.3).unwrap();
        let mask =
            PerturbationMask::new(Volume::filled(1, (4, 4, 4), 0.5).unwrap()).unwrap();
        let cfg = RelevanceConfig {
            slic: SlicConfig {
                k: 4,
                ..SlicConfig::default()
            },
            ..RelevanceConfig::default()
        };
        assert!(matches!(
            generate_relevance(&volume, &mask, &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn map_roundtrips_through_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let combined = Volume::new(1, (4, 4, 4), values).unwrap();
        let rm = bin_ranks(&combined, &RelevanceConfig::default()).unwrap();

        let dir = tempdir().unwrap();
        rm.write_dir(dir.path(), "case_0").unwrap();
        let back = RelevanceMap::read_dir(dir.path(), "case_0").unwrap();
        assert_eq!(back.combined().voxels(), rm.combined().voxels());
        assert_eq!(back.ranks(), rm.ranks());
        assert_eq!(back.bin_count(), 10);
        assert!(back.low_mask_is_relevant());

        let manifest = dir.path().join("case_0.manifest.txt");
        std::fs::write(&manifest, "bins=10\tsideways=yes\n").unwrap();
        assert!(matches!(
            RelevanceMap::read_dir(dir.path(), "case_0"),
            Err(Error::Format(_))
        ));
        std::fs::remove_file(dir.path().join("case_0.ranks.rvol")).unwrap();
        assert!(matches!(
            RelevanceMap::read_dir(dir.path(), "case_0"),
            Err(Error::MissingInput(_))
        ));
    }
}
