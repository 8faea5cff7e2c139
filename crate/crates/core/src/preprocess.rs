//! Grid unification and intensity standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volstore::{Modality, ModalityTable, Study, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub in_plane_mm: f64,
    pub slice_mm: f64,
    /// In-plane crop side in voxels; must be even.
    pub crop: usize,
    /// When false, slices are kept as acquired and any study whose slice
    /// thickness differs from `slice_mm` is rejected.
    pub resample_z: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            in_plane_mm: 0.5,
            slice_mm: 3.0,
            crop: 320,
            resample_z: true,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.in_plane_mm > 0.0 && self.slice_mm > 0.0) {
            return Err(Error::invalid("grid spacing must be positive"));
        }
        if self.crop == 0 || self.crop % 2 != 0 {
            return Err(Error::invalid(format!("crop size {} must be positive and even", self.crop)));
        }
        Ok(())
    }

    fn target_spacing(&self, src: &Volume) -> Result<[f64; 3]> {
        let dz = if self.resample_z {
            self.slice_mm
        } else if (src.spacing[0] - self.slice_mm).abs() <= 1e-6 {
            src.spacing[0]
        } else {
            return Err(Error::invalid(format!(
                "{} slice thickness {} mm differs from {} mm and z resampling is off; exclude the study",
                src.modality, src.spacing[0], self.slice_mm
            )));
        };
        Ok([dz, self.in_plane_mm, self.in_plane_mm])
    }
}

/// Output voxel count when a span of `n` samples at `src` mm is resampled at
/// `dst` mm without extending past the last source sample.
pub fn resampled_len(n: usize, src: f64, dst: f64) -> usize {
    (((n - 1) as f64 * src / dst) + 1e-9).floor() as usize + 1
}

struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w: Vec<f64>,
}

fn taps(n_src: usize, n_dst: usize, ratio: f64) -> AxisTaps {
    let mut t = AxisTaps {
        lo: Vec::with_capacity(n_dst),
        hi: Vec::with_capacity(n_dst),
        w: Vec::with_capacity(n_dst),
    };
    let last = (n_src - 1) as f64;
    for o in 0..n_dst {
        let u = (o as f64 * ratio).clamp(0.0, last);
        let i0 = (u.floor() as usize).min(n_src - 1);
        let i1 = (i0 + 1).min(n_src - 1);
        t.lo.push(i0);
        t.hi.push(i1);
        t.w.push(u - i0 as f64);
    }
    t
}

/// Trilinear resampling onto the target spacing with the origin kept fixed.
/// Positions beyond the source support clamp to the nearest source voxel.
pub fn resample(volume: &Volume, grid: &GridSpec) -> Result<Volume> {
    grid.validate()?;
    volume.validate()?;
    let dst = grid.target_spacing(volume)?;
    let dims: [usize; 3] = std::array::from_fn(|a| resampled_len(volume.dims[a], volume.spacing[a], dst[a]));
    let t: Vec<AxisTaps> = (0..3)
        .map(|a| taps(volume.dims[a], dims[a], dst[a] / volume.spacing[a]))
        .collect();
    let v = |z: usize, y: usize, x: usize| volume.at(z, y, x) as f64;
    let mut out = Vec::with_capacity(dims.iter().product());
    for oz in 0..dims[0] {
        let (z0, z1, wz) = (t[0].lo[oz], t[0].hi[oz], t[0].w[oz]);
        for oy in 0..dims[1] {
            let (y0, y1, wy) = (t[1].lo[oy], t[1].hi[oy], t[1].w[oy]);
            for ox in 0..dims[2] {
                let (x0, x1, wx) = (t[2].lo[ox], t[2].hi[ox], t[2].w[ox]);
                let c00 = v(z0, y0, x0) * (1.0 - wx) + v(z0, y0, x1) * wx;
                let c01 = v(z0, y1, x0) * (1.0 - wx) + v(z0, y1, x1) * wx;
                let c10 = v(z1, y0, x0) * (1.0 - wx) + v(z1, y0, x1) * wx;
                let c11 = v(z1, y1, x0) * (1.0 - wx) + v(z1, y1, x1) * wx;
                let c0 = c00 * (1.0 - wy) + c01 * wy;
                let c1 = c10 * (1.0 - wy) + c11 * wy;
                out.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    Volume::new(volume.modality, dims, dst, volume.origin, out)
}

/// First in-plane index of a centered crop; ties go to the lower index.
pub fn crop_start(n: usize, crop: usize) -> usize {
    (n - crop) / 2
}

/// In-plane center crop; z is untouched and the origin moves to the new corner.
pub fn center_crop(volume: &Volume, grid: &GridSpec) -> Result<Volume> {
    grid.validate()?;
    let [nz, ny, nx] = volume.dims;
    let c = grid.crop;
    if ny < c || nx < c {
        return Err(Error::invalid(format!(
            "{} plane {ny}x{nx} is smaller than the {c}x{c} crop",
            volume.modality
        )));
    }
    let (sy, sx) = (crop_start(ny, c), crop_start(nx, c));
    let mut out = Vec::with_capacity(nz * c * c);
    for z in 0..nz {
        for y in sy..sy + c {
            let row = volume.offset(z, y, sx);
            out.extend_from_slice(&volume.voxels[row..row + c]);
        }
    }
    let origin = [
        volume.origin[0],
        volume.origin[1] + sy as f64 * volume.spacing[1],
        volume.origin[2] + sx as f64 * volume.spacing[2],
    ];
    Volume::new(volume.modality, [nz, c, c], volume.spacing, origin, out)
}

/// Resample and crop every modality of a study onto the common grid.
pub fn unify_study(study: &Study, grid: &GridSpec) -> Result<Study> {
    let mut vols = Vec::with_capacity(4);
    for v in &study.volumes {
        let r = resample(v, grid).map_err(|e| Error::invalid(format!("{}: {e}", study.subject_id)))?;
        vols.push(center_crop(&r, grid).map_err(|e| Error::invalid(format!("{}: {e}", study.subject_id)))?);
    }
    let volumes: [Volume; 4] = vols.try_into().expect("four modalities");
    Study::new(study.subject_id.clone(), volumes, study.findings.clone(), study.cohort)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub modality: Modality,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: u64,
}

/// Floor on the standard deviation used by [`standardize`].
pub const STD_FLOOR: f64 = 1e-8;

/// Streaming mean and sum of squared deviations (Welford), mergeable
/// across volumes with Chan's update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, v: f64) {
        self.count += 1;
        let d = v - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn of(values: &[f32]) -> Self {
        let mut m = Self::default();
        for &v in values {
            m.push(v as f64);
        }
        m
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let d = other.mean - self.mean;
        self.mean += d * other.count as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.count as f64 * other.count as f64) / n as f64;
        self.count = n;
    }

    pub fn stats(&self, modality: Modality) -> ModalityStats {
        ModalityStats {
            modality,
            mean: self.mean,
            std: (self.m2 / self.count as f64).max(0.0).sqrt(),
            count: self.count,
        }
    }
}

/// Mean and population std over every voxel of the given volumes.
pub fn fit_stats<'a>(volumes: impl IntoIterator<Item = &'a Volume>, modality: Modality) -> Result<ModalityStats> {
    let mut acc = Moments::default();
    for v in volumes {
        if v.modality != modality {
            return Err(Error::invalid(format!("fit_stats for {modality} received a {} volume", v.modality)));
        }
        acc.merge(&Moments::of(&v.voxels));
    }
    if acc.count == 0 {
        return Err(Error::invalid(format!("no training volumes to fit {modality} statistics")));
    }
    Ok(acc.stats(modality))
}

/// Statistics of every modality over the training cohort's unified studies.
pub fn fit_cohort_stats(studies: &[Study]) -> Result<ModalityTable<ModalityStats>> {
    let per = Modality::ALL.map(|m| fit_stats(studies.iter().map(|s| s.volume(m)), m));
    let [a, b, c, d] = per;
    Ok(ModalityTable {
        t2w: a?,
        adc: b?,
        dwi: c?,
        ktrans: d?,
    })
}

pub fn standardize(volume: &Volume, stats: &ModalityStats) -> Result<Volume> {
    if volume.modality != stats.modality {
        return Err(Error::invalid(format!(
            "cannot standardize a {} volume with {} statistics",
            volume.modality, stats.modality
        )));
    }
    let (mean, scale) = (stats.mean, 1.0 / stats.std.max(STD_FLOOR));
    let voxels = volume
        .voxels
        .iter()
        .map(|&v| ((v as f64 - mean) * scale) as f32)
        .collect();
    Volume::new(volume.modality, volume.dims, volume.spacing, volume.origin, voxels)
}

pub fn standardize_study(study: &Study, stats: &ModalityTable<ModalityStats>) -> Result<Study> {
    let mut vols = Vec::with_capacity(4);
    for v in &study.volumes {
        vols.push(standardize(v, stats.get(v.modality))?);
    }
    let volumes: [Volume; 4] = vols.try_into().expect("four modalities");
    Study::new(study.subject_id.clone(), volumes, study.findings.clone(), study.cohort)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(dims: [usize; 3], spacing: [f64; 3], c: f32) -> Volume {
        Volume::new(Modality::Adc, dims, spacing, [0.0; 3], vec![c; dims.iter().product()]).unwrap()
    }

    #[test]
    fn crop_windows() {
        assert_eq!(crop_start(640, 320), 160);
        assert_eq!(crop_start(321, 320), 0);
        let g = GridSpec::default();
        assert!(center_crop(&constant([1, 128, 128], [3.0, 0.5, 0.5], 0.0), &g).is_err());
        let v = constant([2, 322, 330], [3.0, 0.5, 0.5], 1.0);
        let c = center_crop(&v, &g).unwrap();
        assert_eq!(c.dims, [2, 320, 320]);
        assert_eq!(c.origin, [0.0, 0.5, 2.5]);
    }

    #[test]
    fn constant_survives_resampling() {
        let v = constant([4, 7, 9], [2.0, 1.5, 1.0], 3.25);
        let g = GridSpec {
            crop: 2,
            ..GridSpec::default()
        };
        let r = resample(&v, &g).unwrap();
        assert_eq!(r.dims, [3, 19, 17]);
        assert!(r.voxels.iter().all(|&x| x == 3.25));
    }

    #[test]
    fn slice_mismatch_without_z_resampling_is_rejected() {
        let v = constant([4, 4, 4], [2.0, 0.5, 0.5], 0.0);
        let g = GridSpec {
            crop: 2,
            resample_z: false,
            ..GridSpec::default()
        };
        assert!(resample(&v, &g).is_err());
    }

    #[test]
    fn stats_of_two_constant_volumes() {
        let a = constant([2, 2, 2], [1.0; 3], 0.0);
        let b = constant([2, 2, 2], [1.0; 3], 2.0);
        let s = fit_stats([&a, &b], Modality::Adc).unwrap();
        assert_eq!((s.mean, s.std, s.count), (1.0, 1.0, 16));
        let c = fit_stats([&constant([1, 1, 3], [1.0; 3], 5.0)], Modality::Adc).unwrap();
        assert_eq!((c.mean, c.std), (5.0, 0.0));
        let z = standardize(&constant([1, 1, 3], [1.0; 3], 5.0), &c).unwrap();
        assert!(z.voxels.iter().all(|&x| x == 0.0));
        assert!(fit_stats(std::iter::empty(), Modality::Adc).is_err());
    }

    #[test]
    fn modality_mismatch_is_rejected() {
        let v = constant([1, 1, 1], [1.0; 3], 0.0);
        let s = ModalityStats {
            modality: Modality::T2w,
            mean: 0.0,
            std: 1.0,
            count: 1,
        };
        assert!(standardize(&v, &s).is_err());
    }
}
