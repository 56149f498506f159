//! 3D SLIC superpixels: localized k-means over (intensity, z, y, x).
//!
//! Centers start on a regular grid with spacing `S = cbrt(N/k)`. Each
//! iteration assigns voxels within a 2S box around every center using
//! `d = sqrt(d_intensity² + (m/S)²·d_spatial²)` (compared squared — the
//! square root is monotone), then recomputes centers as feature means,
//! stopping at `max_iters` assignment passes or when no center moves more
//! than 1e-4 in feature space. Voxels outside every window are assigned by
//! full-space distance so the result is always a partition. Ties go to the
//! lowest center index. A final pass merges connected components smaller
//! than `min_size_fraction·(N/k)` into their largest neighbor, so every
//! label ends up a single 6-connected region.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::volume::Volume;

const DRIFT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SlicConfig {
    /// Target superpixel count.
    pub k: usize,
    /// Compactness: weight of spatial against intensity distance.
    pub m: f64,
    /// Maximum assignment passes.
    pub max_iters: u32,
    /// Connected components smaller than this fraction of N/k are merged.
    pub min_size_fraction: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig {
            k: 64,
            m: 1.0,
            max_iters: 10,
            min_size_fraction: 0.25,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self, voxel_count: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("slic.k must be at least 2, got {}", self.k)));
        }
        if self.k > voxel_count {
            return Err(Error::Config(format!(
                "slic.k = {} exceeds the voxel count {voxel_count}",
                self.k
            )));
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(Error::Config(format!("slic.m must be positive, got {}", self.m)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("slic.max_iters must be at least 1".into()));
        }
        if !(self.min_size_fraction.is_finite() && self.min_size_fraction >= 0.0) {
            return Err(Error::Config(format!(
                "slic.min_size_fraction must be non-negative, got {}",
                self.min_size_fraction
            )));
        }
        Ok(())
    }
}

/// A labeling of one channel's voxels into contiguous regions 0..count−1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    dims: (usize, usize, usize),
    labels: Vec<u32>,
    count: usize,
}

impl SuperpixelMap {
    /// Validates the partition invariant: labels are exactly 0..count−1
    /// with every value present.
    pub fn new(dims: (usize, usize, usize), labels: Vec<u32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if n == 0 || labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        let max = *labels.iter().max().expect("nonempty") as usize;
        if max >= n {
            return Err(Error::Format(format!("label {max} out of range for {n} voxels")));
        }
        let count = max + 1;
        let mut seen = vec![false; count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Format(format!(
                "labels are not contiguous: {missing} is unused"
            )));
        }
        Ok(SuperpixelMap { dims, labels, count })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Labels as a 1-channel volume of exact small integers.
    pub fn to_volume(&self) -> Volume {
        let voxels = self.labels.iter().map(|&l| l as f32).collect();
        Volume::new(1, self.dims, voxels).expect("labels match dims")
    }

    /// Inverse of [`to_volume`]: values must be exact non-negative integers
    /// forming a contiguous partition.
    pub fn from_volume(volume: &Volume) -> Result<Self> {
        if volume.channels() != 1 {
            return Err(Error::Dimension(format!(
                "superpixel map must be 1-channel, got {}",
                volume.channels()
            )));
        }
        let n = volume.voxels().len();
        let mut labels = Vec::with_capacity(n);
        for &v in volume.voxels() {
            if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < n as f32) {
                return Err(Error::Format(format!("{v} is not a valid superpixel label")));
            }
            labels.push(v as u32);
        }
        SuperpixelMap::new(volume.dims(), labels)
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    intensity: f64,
    z: f64,
    y: f64,
    x: f64,
}

/// Fractional seed coordinates on a regular grid. Prefers an exact factor
/// triple (n_z, n_y, n_x) of k that fits the volume and makes grid cells as
/// cubic as possible (ties: lexicographically smallest triple). When k has
/// no fitting factorization, a near-S grid is grown one axis at a time and
/// the first k positions in z-major order are used.
fn seed_positions(dims: (usize, usize, usize), k: usize) -> Vec<[f64; 3]> {
    let (d, h, w) = dims;
    let axis = |extent: usize, n: usize, i: usize| -> f64 {
        (i as f64 + 0.5) * (extent as f64 / n as f64) - 0.5
    };
    let grid = |nz: usize, ny: usize, nx: usize| -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(nz * ny * nx);
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    out.push([axis(d, nz, iz), axis(h, ny, iy), axis(w, nx, ix)]);
                }
            }
        }
        out
    };

    let mut best: Option<(f64, [usize; 3])> = None;
    for nz in 1..=k.min(d) {
        if k % nz != 0 {
            continue;
        }
        let rem = k / nz;
        for ny in 1..=rem.min(h) {
            if rem % ny != 0 {
                continue;
            }
            let nx = rem / ny;
            if nx > w {
                continue;
            }
            let spacings = [d as f64 / nz as f64, h as f64 / ny as f64, w as f64 / nx as f64];
            let aspect = spacings.iter().cloned().fold(f64::MIN, f64::max)
                / spacings.iter().cloned().fold(f64::MAX, f64::min);
            // Strict < keeps the first (lexicographically smallest) triple
            // among aspect ties, since enumeration is ascending.
            if best.is_none_or(|(a, _)| aspect < a) {
                best = Some((aspect, [nz, ny, nx]));
            }
        }
    }
    if let Some((_, [nz, ny, nx])) = best {
        return grid(nz, ny, nx);
    }

    // No exact factorization fits: start from the ideal spacing S and add
    // grid lines along the coarsest axis until there are at least k seeds.
    let n = d * h * w;
    let s = (n as f64 / k as f64).cbrt();
    let extents = [d, h, w];
    let mut counts = [0usize; 3];
    for (c, &e) in counts.iter_mut().zip(&extents) {
        *c = ((e as f64 / s).round() as usize).clamp(1, e);
    }
    while counts[0] * counts[1] * counts[2] < k {
        let mut pick = None;
        let mut widest = f64::MIN;
        for a in 0..3 {
            if counts[a] < extents[a] {
                let spacing = extents[a] as f64 / counts[a] as f64;
                if spacing > widest {
                    widest = spacing;
                    pick = Some(a);
                }
            }
        }
        counts[pick.expect("k <= N guarantees room to grow")] += 1;
    }
    let mut seeds = grid(counts[0], counts[1], counts[2]);
    seeds.truncate(k);
    seeds
}

/// Nearest voxel index to a fractional coordinate (round half away from
/// zero, clamped to the grid).
fn nearest(coord: f64, extent: usize) -> usize {
    (coord.round().max(0.0) as usize).min(extent - 1)
}

fn initial_centers(vals: &[f32], dims: (usize, usize, usize), seeds: &[[f64; 3]]) -> Vec<Center> {
    let (d, h, w) = dims;
    seeds
        .iter()
        .map(|&[z, y, x]| {
            let vi = (nearest(z, d) * h + nearest(y, h)) * w + nearest(x, w);
            Center {
                intensity: vals[vi] as f64,
                z,
                y,
                x,
            }
        })
        .collect()
}

/// One assignment pass: windowed nearest-center labeling with a full-space
/// fallback for voxels no window reaches.
fn assign(
    vals: &[f32],
    dims: (usize, usize, usize),
    centers: &[Center],
    spatial_weight: f64,
    window: f64,
) -> Vec<u32> {
    let (d, h, w) = dims;
    let n = vals.len();
    let mut best = vec![f64::INFINITY; n];
    let mut labels = vec![u32::MAX; n];

    let dist2 = |c: &Center, v: usize, z: usize, y: usize, x: usize| -> f64 {
        let di = vals[v] as f64 - c.intensity;
        let dz = z as f64 - c.z;
        let dy = y as f64 - c.y;
        let dx = x as f64 - c.x;
        di * di + spatial_weight * (dz * dz + dy * dy + dx * dx)
    };
    let range = |coord: f64, extent: usize| -> (usize, usize) {
        let lo = (coord - window).ceil().max(0.0) as usize;
        let hi = (coord + window).floor().min(extent as f64 - 1.0).max(0.0) as usize;
        (lo, hi)
    };

    for (ci, c) in centers.iter().enumerate() {
        let (zlo, zhi) = range(c.z, d);
        let (ylo, yhi) = range(c.y, h);
        let (xlo, xhi) = range(c.x, w);
        for z in zlo..=zhi {
            for y in ylo..=yhi {
                let row = (z * h + y) * w;
                for x in xlo..=xhi {
                    let v = row + x;
                    let dd = dist2(c, v, z, y, x);
                    // Strict < means the lowest center index wins ties.
                    if dd < best[v] {
                        best[v] = dd;
                        labels[v] = ci as u32;
                    }
                }
            }
        }
    }
    // Voxels outside every window: nearest center over the whole set.
    for v in 0..n {
        if labels[v] != u32::MAX {
            continue;
        }
        let z = v / (h * w);
        let y = (v / w) % h;
        let x = v % w;
        for (ci, c) in centers.iter().enumerate() {
            let dd = dist2(c, v, z, y, x);
            if dd < best[v] {
                best[v] = dd;
                labels[v] = ci as u32;
            }
        }
    }
    labels
}

/// Recompute centers as feature means of their voxels (empty clusters keep
/// their previous center). Returns the largest center movement.
fn update_centers(
    vals: &[f32],
    dims: (usize, usize, usize),
    labels: &[u32],
    centers: &mut [Center],
) -> f64 {
    let (_, h, w) = dims;
    let k = centers.len();
    let mut sums = vec![[0.0f64; 4]; k];
    let mut counts = vec![0usize; k];
    for (v, &l) in labels.iter().enumerate() {
        let c = l as usize;
        let z = v / (h * w);
        let y = (v / w) % h;
        let x = v % w;
        sums[c][0] += vals[v] as f64;
        sums[c][1] += z as f64;
        sums[c][2] += y as f64;
        sums[c][3] += x as f64;
        counts[c] += 1;
    }
    let mut drift: f64 = 0.0;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let n = counts[c] as f64;
        let next = Center {
            intensity: sums[c][0] / n,
            z: sums[c][1] / n,
            y: sums[c][2] / n,
            x: sums[c][3] / n,
        };
        let old = centers[c];
        let moved = ((next.intensity - old.intensity).powi(2)
            + (next.z - old.z).powi(2)
            + (next.y - old.y).powi(2)
            + (next.x - old.x).powi(2))
        .sqrt();
        drift = drift.max(moved);
        centers[c] = next;
    }
    drift
}

/// Map labels (center indices, possibly with gaps from empty clusters) to
/// a contiguous range, preserving center-index order.
fn compact_labels(labels: Vec<u32>, k: usize) -> Vec<u32> {
    let mut used = vec![false; k];
    for &l in &labels {
        used[l as usize] = true;
    }
    let mut remap = vec![u32::MAX; k];
    let mut next = 0u32;
    for (i, &u) in used.iter().enumerate() {
        if u {
            remap[i] = next;
            next += 1;
        }
    }
    labels.into_iter().map(|l| remap[l as usize]).collect()
}

/// SLIC clustering without the connectivity cleanup — the raw converged
/// assignment, exposed so it can be checked against a brute-force oracle.
pub fn slic_segment_raw(channel: &Volume, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    if channel.channels() != 1 {
        return Err(Error::Dimension(format!(
            "slic operates on a 1-channel volume, got {} channels",
            channel.channels()
        )));
    }
    let dims = channel.dims();
    let vals = channel.voxels();
    let n = vals.len();
    cfg.validate(n)?;

    let s = (n as f64 / cfg.k as f64).cbrt();
    let spatial_weight = (cfg.m / s) * (cfg.m / s);
    let window = 2.0 * s;

    let seeds = seed_positions(dims, cfg.k);
    let mut centers = initial_centers(vals, dims, &seeds);
    let mut labels = assign(vals, dims, &centers, spatial_weight, window);
    for _ in 1..cfg.max_iters {
        let drift = update_centers(vals, dims, &labels, &mut centers);
        labels = assign(vals, dims, &centers, spatial_weight, window);
        if drift < DRIFT_TOLERANCE {
            break;
        }
    }
    SuperpixelMap::new(dims, compact_labels(labels, cfg.k))
}

/// Full segmentation: raw SLIC plus connectivity enforcement.
pub fn slic_segment(channel: &Volume, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    let raw = slic_segment_raw(channel, cfg)?;
    enforce_connectivity(&raw, cfg)
}

/// 6-neighbor offsets as (dz, dy, dx).
const NEIGHBORS: [(isize, isize, isize); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

fn neighbor(
    dims: (usize, usize, usize),
    v: usize,
    step: (isize, isize, isize),
) -> Option<usize> {
    let (d, h, w) = dims;
    let z = (v / (h * w)) as isize + step.0;
    let y = ((v / w) % h) as isize + step.1;
    let x = (v % w) as isize + step.2;
    if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
        None
    } else {
        Some(((z as usize) * h + y as usize) * w + x as usize)
    }
}

/// Merge 6-connected components smaller than `min_size_fraction·(N/k)` into
/// their largest adjacent component, then relabel regions 0..count−1 in
/// scan order of first appearance.
pub fn enforce_connectivity(map: &SuperpixelMap, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    let dims = map.dims();
    let labels = map.labels();
    let n = labels.len();
    cfg.validate(n)?;

    // Discover connected components in scan order.
    const UNSEEN: u32 = u32::MAX;
    let mut comp = vec![UNSEEN; n];
    let mut comp_sizes: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if comp[start] != UNSEEN {
            continue;
        }
        let id = comp_sizes.len() as u32;
        let label = labels[start];
        let mut size = 0usize;
        comp[start] = id;
        stack.push(start);
        while let Some(v) = stack.pop() {
            size += 1;
            for step in NEIGHBORS {
                if let Some(u) = neighbor(dims, v, step) {
                    if comp[u] == UNSEEN && labels[u] == label {
                        comp[u] = id;
                        stack.push(u);
                    }
                }
            }
        }
        comp_sizes.push(size);
    }
    let comp_count = comp_sizes.len();

    // Component adjacency (6-neighborhood, both directions).
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comp_count];
    let (_, h, w) = dims;
    for v in 0..n {
        for step in [(1isize, 0isize, 0isize), (0, 1, 0), (0, 0, 1)] {
            if let Some(u) = neighbor(dims, v, step) {
                let (a, b) = (comp[v] as usize, comp[u] as usize);
                if a != b {
                    adjacency[a].insert(b);
                    adjacency[b].insert(a);
                }
            }
        }
        let _ = (h, w);
    }

    // Union-find; process small components smallest-first (ties by
    // discovery id) and absorb each into its largest adjacent group.
    let threshold = cfg.min_size_fraction * (n as f64 / cfg.k as f64);
    let mut parent: Vec<usize> = (0..comp_count).collect();
    let mut group_size = comp_sizes.clone();
    let mut members: Vec<Vec<usize>> = (0..comp_count).map(|c| vec![c]).collect();
    fn find(parent: &mut [usize], mut c: usize) -> usize {
        while parent[c] != c {
            parent[c] = parent[parent[c]];
            c = parent[c];
        }
        c
    }
    let mut queue: Vec<usize> = (0..comp_count).collect();
    queue.sort_by_key(|&c| (comp_sizes[c], c));
    for c in queue {
        let root = find(&mut parent, c);
        if group_size[root] as f64 >= threshold {
            continue;
        }
        let mut target: Option<usize> = None;
        for &m in &members[root] {
            for &a in &adjacency[m] {
                let ar = find(&mut parent, a);
                if ar == root {
                    continue;
                }
                // Largest adjacent group wins; ties go to the smaller id.
                let better = match target {
                    None => true,
                    Some(t) => {
                        group_size[ar] > group_size[t]
                            || (group_size[ar] == group_size[t] && ar < t)
                    }
                };
                if better {
                    target = Some(ar);
                }
            }
        }
        let Some(target) = target else {
            continue; // the whole volume is one component
        };
        parent[root] = target;
        group_size[target] += group_size[root];
        let moved = std::mem::take(&mut members[root]);
        members[target].extend(moved);
    }

    // Relabel groups by first appearance in scan order.
    let mut new_label = vec![u32::MAX; comp_count];
    let mut next = 0u32;
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let root = find(&mut parent, comp[v] as usize);
        if new_label[root] == u32::MAX {
            new_label[root] = next;
            next += 1;
        }
        out.push(new_label[root]);
    }
    SuperpixelMap::new(dims, out)
}
