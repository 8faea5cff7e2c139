//! Synthetic multi-modal cohorts with ellipsoidal lesions.
//!
//! Every modality shares one world frame and one voxel-center span, but each
//! is sampled on its own grid, so resampling to a common grid is a real
//! operation. Lesion centers sit on a lattice that is a voxel center on
//! every grid, which makes the noiseless center intensity exact.
//!
//! Intensity of modality `m` at world point `p`:
//!
//! ```text
//! I_m(p) = b_m * (1 + a * S(p)) + sum_l b_m * c_{m,l} * T(r_l(p)) + noise
//! S(p)   = 0.6 cos(kx x + px) cos(ky y + py) + 0.4 cos(kz z + pz)
//! T(r)   = 1 for r <= 1/2, (1 + cos(2 pi (r - 1/2))) / 2 for r < 1, else 0
//! ```
//!
//! with `r_l` the ellipsoidal radius of `p` around lesion `l` and noise
//! Gaussian with standard deviation `noise * b_m`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volstore::{ClinSig, Cohort, Finding, Modality, ModalityTable, Study, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDef {
    /// `(nz, ny, nx)`.
    pub dims: [usize; 3],
    /// `(dz, dy, dx)` mm.
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Training-cohort subjects (labelled).
    pub n_subjects: usize,
    /// Test-cohort subjects; findings carry `unknown` labels.
    pub n_test_subjects: usize,
    /// Inclusive range of lesions per subject.
    pub lesions_per_subject: [usize; 2],
    pub positive_fraction: f64,
    pub grids: ModalityTable<GridDef>,
    /// `(z, y, x)` world mm of voxel `[0, 0, 0]` on every grid.
    pub origin_mm: [f64; 3],
    /// In-plane semi-axis range (mm).
    pub lesion_radius_mm: [f64; 2],
    /// Through-plane semi-axis range (mm).
    pub lesion_depth_mm: [f64; 2],
    /// Lesion centers fall inside a square of this side (mm) around the
    /// in-plane center of the field of view.
    pub placement_window_mm: f64,
    /// Slices kept free of lesion centers at each end of the z axis.
    pub z_margin_slices: usize,
    /// Minimum distance (mm) between lesion centers of one subject.
    pub min_separation_mm: f64,
    pub base_intensity: ModalityTable<f64>,
    /// Lesion contrast of positive findings as a fraction of base intensity.
    pub positive_contrast: ModalityTable<f64>,
    /// Contrast magnitude of negative findings; each gets a random sign.
    pub negative_contrast: ModalityTable<f64>,
    pub structure_amplitude: f64,
    /// Noise standard deviation as a fraction of base intensity.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            n_test_subjects: 0,
            lesions_per_subject: [2, 2],
            positive_fraction: 0.23,
            grids: ModalityTable {
                t2w: GridDef {
                    dims: [10, 241, 241],
                    spacing: [3.0, 0.5, 0.5],
                },
                adc: GridDef {
                    dims: [10, 121, 121],
                    spacing: [3.0, 1.0, 1.0],
                },
                dwi: GridDef {
                    dims: [10, 121, 121],
                    spacing: [3.0, 1.0, 1.0],
                },
                ktrans: GridDef {
                    dims: [10, 81, 81],
                    spacing: [3.0, 1.5, 1.5],
                },
            },
            origin_mm: [0.0, -60.0, -60.0],
            lesion_radius_mm: [2.5, 4.0],
            lesion_depth_mm: [4.5, 7.5],
            placement_window_mm: 60.0,
            z_margin_slices: 2,
            min_separation_mm: 34.0,
            base_intensity: ModalityTable {
                t2w: 350.0,
                adc: 1400.0,
                dwi: 250.0,
                ktrans: 0.25,
            },
            positive_contrast: ModalityTable {
                t2w: -0.30,
                adc: -0.45,
                dwi: 0.60,
                ktrans: 0.80,
            },
            negative_contrast: ModalityTable {
                t2w: 0.25,
                adc: 0.12,
                dwi: 0.12,
                ktrans: 0.15,
            },
            structure_amplitude: 0.08,
            noise: 0.05,
            seed: 20_220_101,
        }
    }
}

/// Smallest patch envelope `(nz, ny, nx)` that must fit around every lesion
/// on the 0.5 mm in-plane target grid.
pub const ENVELOPE: [usize; 3] = [3, 96, 96];
const TARGET_IN_PLANE_MM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub finding_id: u32,
    /// World `(z, y, x)` mm.
    pub center: [f64; 3],
    /// Semi-axes `(z, y, x)` mm.
    pub semi_axes: [f64; 3],
    pub clin_sig: ClinSig,
    /// Fractional contrast per modality, indexed by [`Modality::index`].
    pub contrast: [f64; 4],
}

/// Everything about a subject except the noise draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectLayout {
    pub subject_id: String,
    pub cohort: Cohort,
    /// Angular frequencies `(kz, ky, kx)` in rad/mm.
    pub wave: [f64; 3],
    /// Phases `(pz, py, px)`.
    pub phase: [f64; 3],
    pub lesions: Vec<Lesion>,
}

impl SubjectLayout {
    /// `S(p)` for world `(z, y, x)`.
    pub fn structure(&self, p: [f64; 3]) -> f64 {
        0.6 * (self.wave[2] * p[2] + self.phase[2]).cos() * (self.wave[1] * p[1] + self.phase[1]).cos()
            + 0.4 * (self.wave[0] * p[0] + self.phase[0]).cos()
    }
}

/// Cosine taper used for lesion profiles.
pub fn taper(r: f64) -> f64 {
    if r <= 0.5 {
        1.0
    } else if r < 1.0 {
        0.5 * (1.0 + (2.0 * PI * (r - 0.5)).cos())
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct PhantomCohort {
    /// Training subjects first, then test subjects.
    pub studies: Vec<Study>,
    pub layouts: Vec<SubjectLayout>,
    /// Test-cohort findings with their true labels.
    pub truth: Vec<Finding>,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("phantom spec: {m}")));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1".into());
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} must lie in (0, 1)", self.positive_fraction));
        }
        let [lo, hi] = self.lesions_per_subject;
        if lo > hi {
            return bad(format!("lesions_per_subject range [{lo}, {hi}] is reversed"));
        }
        if self.noise < 0.0 || self.structure_amplitude < 0.0 {
            return bad("noise and structure_amplitude must be non-negative".into());
        }
        for r in [self.lesion_radius_mm, self.lesion_depth_mm] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(format!("lesion semi-axis range {r:?} must be positive and ordered"));
            }
        }
        let t2 = &self.grids.t2w;
        for m in Modality::ALL {
            let g = self.grids.get(m);
            if g.dims.contains(&0) || g.spacing.iter().any(|&s| s <= 0.0) {
                return bad(format!("{m} grid {:?} @ {:?} is degenerate", g.dims, g.spacing));
            }
            for a in 0..3 {
                let span = (g.dims[a] - 1) as f64 * g.spacing[a];
                let ref_span = (t2.dims[a] - 1) as f64 * t2.spacing[a];
                if (span - ref_span).abs() > 1e-9 {
                    return bad(format!(
                        "{m} grid spans {span} mm on axis {a} but T2w spans {ref_span} mm"
                    ));
                }
            }
        }
        let in_plane_px = ((t2.dims[2] - 1) as f64 * t2.spacing[2] / TARGET_IN_PLANE_MM).floor() as usize + 1;
        if t2.dims[0] < ENVELOPE[0] || in_plane_px < ENVELOPE[1] {
            return bad(format!(
                "field of view holds {}x{in_plane_px} voxels per slice at {TARGET_IN_PLANE_MM} mm and {} slices; a {}x{}x{} patch does not fit",
                in_plane_px, t2.dims[0], ENVELOPE[1], ENVELOPE[2], ENVELOPE[0]
            ));
        }
        let half_fov = 0.5 * ((t2.dims[2] - 1) as f64 * t2.spacing[2]);
        let half_patch = 0.5 * ENVELOPE[2] as f64 * TARGET_IN_PLANE_MM;
        if 0.5 * self.placement_window_mm + half_patch > half_fov + 1e-9 {
            return bad(format!(
                "placement window {} mm plus the {} mm patch half-width exceeds the {} mm half field of view",
                self.placement_window_mm, half_patch, half_fov
            ));
        }
        if 2 * self.z_margin_slices >= t2.dims[0] || self.z_margin_slices < ENVELOPE[0] / 2 {
            return bad(format!(
                "z margin {} leaves no admissible slices in {} (needs at least {})",
                self.z_margin_slices,
                t2.dims[0],
                ENVELOPE[0] / 2
            ));
        }
        self.lattice_step()?;
        Ok(())
    }

    /// Per-axis step of positions that are voxel centers on every grid.
    fn lattice_step(&self) -> Result<[f64; 3]> {
        let mut step = [0.0; 3];
        for (a, s) in step.iter_mut().enumerate() {
            let sp: Vec<f64> = Modality::ALL.iter().map(|&m| self.grids.get(m).spacing[a]).collect();
            let base = sp.iter().cloned().fold(0.0, f64::max);
            let found = (1..=64).map(|k| k as f64 * base).find(|cand| {
                sp.iter().all(|&s| {
                    let q = cand / s;
                    (q - q.round()).abs() < 1e-9
                })
            });
            *s = found.ok_or_else(|| {
                Error::invalid(format!("phantom spec: spacings {sp:?} on axis {a} share no common lattice"))
            })?;
        }
        Ok(step)
    }

    fn subject_id(i: usize) -> String {
        format!("S{:04}", i + 1)
    }
}

/// Deterministic cohort. Studies are generated in parallel but each one
/// uses only its own seed stream.
pub fn generate_cohort(spec: &PhantomSpec) -> Result<PhantomCohort> {
    spec.validate()?;
    let n_total = spec.n_subjects + spec.n_test_subjects;
    let counts: Vec<usize> = (0..n_total)
        .map(|i| {
            let mut r = seed::rng(spec.seed, &["phantom".into(), "count".into(), i.into()]);
            r.random_range(spec.lesions_per_subject[0]..=spec.lesions_per_subject[1])
        })
        .collect();
    let labels_for = |range: std::ops::Range<usize>, tag: &str| -> Vec<Vec<ClinSig>> {
        let total: usize = counts[range.clone()].iter().sum();
        let n_pos = (spec.positive_fraction * total as f64).round() as usize;
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut seed::rng(spec.seed, &["phantom".into(), "labels".into(), tag.into()]));
        let mut flat = vec![ClinSig::Negative; total];
        for &k in &order[..n_pos] {
            flat[k] = ClinSig::Positive;
        }
        let mut out = Vec::new();
        let mut it = flat.into_iter();
        for &c in &counts[range] {
            out.push(it.by_ref().take(c).collect());
        }
        out
    };
    let mut labels = labels_for(0..spec.n_subjects, "train");
    labels.extend(labels_for(spec.n_subjects..n_total, "test"));

    let step = spec.lattice_step()?;
    let generated: Vec<Result<(Study, SubjectLayout)>> = (0..n_total)
        .into_par_iter()
        .map(|i| generate_subject(spec, i, &labels[i], step))
        .collect();
    let mut studies = Vec::with_capacity(n_total);
    let mut layouts = Vec::with_capacity(n_total);
    let mut truth = Vec::new();
    for g in generated {
        let (mut study, layout) = g?;
        if study.cohort == Cohort::Test {
            truth.extend(study.findings.iter().cloned());
            for f in &mut study.findings {
                f.clin_sig = ClinSig::Unknown;
            }
        }
        studies.push(study);
        layouts.push(layout);
    }
    Ok(PhantomCohort {
        studies,
        layouts,
        truth,
    })
}

fn uniform(r: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * r.random::<f64>()
}

fn generate_subject(spec: &PhantomSpec, i: usize, labels: &[ClinSig], step: [f64; 3]) -> Result<(Study, SubjectLayout)> {
    let subject_id = PhantomSpec::subject_id(i);
    let cohort = if i < spec.n_subjects { Cohort::Train } else { Cohort::Test };
    let mut r = seed::rng(spec.seed, &["phantom".into(), "subject".into(), i.into()]);

    let wave: [f64; 3] = std::array::from_fn(|_| 2.0 * PI / uniform(&mut r, [40.0, 90.0]));
    let phase: [f64; 3] = std::array::from_fn(|_| 2.0 * PI * r.random::<f64>());

    let t2 = &spec.grids.t2w;
    let center_yx: [f64; 2] = std::array::from_fn(|k| {
        let a = k + 1;
        spec.origin_mm[a] + 0.5 * (t2.dims[a] - 1) as f64 * t2.spacing[a]
    });
    // Candidate lattice positions per axis.
    let axis_points = |a: usize, lo: f64, hi: f64| -> Vec<f64> {
        let o = spec.origin_mm[a];
        let k0 = ((lo - o) / step[a]).ceil() as i64;
        let k1 = ((hi - o) / step[a]).floor() as i64;
        (k0..=k1).map(|k| o + k as f64 * step[a]).collect()
    };
    let half_w = 0.5 * spec.placement_window_mm;
    let ys = axis_points(1, center_yx[0] - half_w, center_yx[0] + half_w);
    let xs = axis_points(2, center_yx[1] - half_w, center_yx[1] + half_w);
    let dz = t2.spacing[0];
    let z_lo = spec.origin_mm[0] + spec.z_margin_slices as f64 * dz;
    let z_hi = spec.origin_mm[0] + (t2.dims[0] - 1 - spec.z_margin_slices) as f64 * dz;
    let zs = axis_points(0, z_lo, z_hi);
    if ys.is_empty() || xs.is_empty() || zs.is_empty() {
        return Err(Error::invalid("phantom spec: placement window contains no lattice point"));
    }

    let mut lesions: Vec<Lesion> = Vec::with_capacity(labels.len());
    for (k, &clin_sig) in labels.iter().enumerate() {
        let ry = uniform(&mut r, spec.lesion_radius_mm);
        let rx = uniform(&mut r, spec.lesion_radius_mm);
        let rz = uniform(&mut r, spec.lesion_depth_mm);
        let signs: [bool; 4] = std::array::from_fn(|_| r.random::<bool>());
        let mut placed = None;
        for _ in 0..10_000 {
            let c = [
                zs[r.random_range(0..zs.len())],
                ys[r.random_range(0..ys.len())],
                xs[r.random_range(0..xs.len())],
            ];
            let clear = lesions.iter().all(|l| {
                let d2: f64 = (0..3).map(|a| (l.center[a] - c[a]).powi(2)).sum();
                d2.sqrt() >= spec.min_separation_mm
            });
            if clear {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::invalid(format!(
                "phantom spec: cannot place {} lesions {} mm apart inside the placement window",
                labels.len(),
                spec.min_separation_mm
            ))
        })?;
        let contrast = std::array::from_fn(|mi| {
            let m = Modality::ALL[mi];
            match clin_sig {
                ClinSig::Positive => *spec.positive_contrast.get(m),
                _ => {
                    let mag = *spec.negative_contrast.get(m);
                    if signs[mi] {
                        mag
                    } else {
                        -mag
                    }
                }
            }
        });
        lesions.push(Lesion {
            finding_id: k as u32 + 1,
            center,
            semi_axes: [rz, ry, rx],
            clin_sig,
            contrast,
        });
    }

    let layout = SubjectLayout {
        subject_id: subject_id.clone(),
        cohort,
        wave,
        phase,
        lesions,
    };

    let mut vols = Vec::with_capacity(4);
    for m in Modality::ALL {
        let g = spec.grids.get(m);
        let base = *spec.base_intensity.get(m);
        let noise = Normal::new(0.0, spec.noise * base)
            .map_err(|e| Error::invalid(format!("phantom noise: {e}")))?;
        vols.push(render(spec, &layout, m, g, base, &noise, &mut r)?);
    }
    let volumes: [Volume; 4] = vols.try_into().expect("four modalities");
    let findings = layout
        .lesions
        .iter()
        .map(|l| Finding {
            subject_id: subject_id.clone(),
            finding_id: l.finding_id,
            world_pos: [l.center[2], l.center[1], l.center[0]],
            clin_sig: l.clin_sig,
        })
        .collect();
    let study = Study::new(subject_id, volumes, findings, cohort)?;
    Ok((study, layout))
}

fn render(
    spec: &PhantomSpec,
    layout: &SubjectLayout,
    m: Modality,
    g: &GridDef,
    base: f64,
    noise: &Normal<f64>,
    r: &mut ChaCha8Rng,
) -> Result<Volume> {
    let [nz, ny, nx] = g.dims;
    let coord = |a: usize, i: usize| spec.origin_mm[a] + i as f64 * g.spacing[a];
    let mut field = vec![0.0f64; nz * ny * nx];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [coord(0, z), coord(1, y), coord(2, x)];
                field[(z * ny + y) * nx + x] = base * (1.0 + spec.structure_amplitude * layout.structure(p));
            }
        }
    }
    for l in &layout.lesions {
        let c = l.contrast[m.index()] * base;
        let range = |a: usize, n: usize| {
            let lo = ((l.center[a] - l.semi_axes[a] - spec.origin_mm[a]) / g.spacing[a]).floor().max(0.0) as usize;
            let hi = (((l.center[a] + l.semi_axes[a] - spec.origin_mm[a]) / g.spacing[a]).ceil() as usize + 1).min(n);
            lo..hi
        };
        for z in range(0, nz) {
            for y in range(1, ny) {
                for x in range(2, nx) {
                    let p = [coord(0, z), coord(1, y), coord(2, x)];
                    let rr: f64 = (0..3)
                        .map(|a| ((p[a] - l.center[a]) / l.semi_axes[a]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    let t = taper(rr);
                    if t > 0.0 {
                        field[(z * ny + y) * nx + x] += c * t;
                    }
                }
            }
        }
    }
    let voxels = field
        .into_iter()
        .map(|v| {
            let n = if spec.noise > 0.0 { noise.sample(r) } else { 0.0 };
            (v + n) as f32
        })
        .collect();
    Volume::new(m, g.dims, g.spacing, spec.origin_mm, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomSpec {
        PhantomSpec {
            n_subjects: 4,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid_and_lattice_is_three_mm() {
        let s = PhantomSpec::default();
        s.validate().unwrap();
        assert_eq!(s.lattice_step().unwrap(), [3.0, 3.0, 3.0]);
    }

    #[test]
    fn too_small_field_of_view_names_the_patch() {
        let mut s = small();
        s.grids.t2w.dims = [10, 73, 73];
        s.grids.adc.dims = [10, 37, 37];
        s.grids.dwi.dims = [10, 37, 37];
        s.grids.ktrans.dims = [10, 25, 25];
        let e = s.validate().unwrap_err().to_string();
        assert!(e.contains("96x96x3"), "{e}");
    }

    #[test]
    fn taper_is_continuous() {
        assert_eq!(taper(0.0), 1.0);
        assert_eq!(taper(0.5), 1.0);
        assert!((taper(0.75) - 0.5).abs() < 1e-12);
        assert!(taper(0.999_999) < 1e-9);
        assert_eq!(taper(1.0), 0.0);
    }

    #[test]
    fn lesions_respect_separation_and_window() {
        let s = small();
        let c = generate_cohort(&s).unwrap();
        for l in &c.layouts {
            for (i, a) in l.lesions.iter().enumerate() {
                assert!(a.center[1].abs() <= 30.0 && a.center[2].abs() <= 30.0);
                for b in &l.lesions[i + 1..] {
                    let d: f64 = (0..3).map(|k| (a.center[k] - b.center[k]).powi(2)).sum::<f64>().sqrt();
                    assert!(d >= s.min_separation_mm);
                }
            }
        }
    }
}
