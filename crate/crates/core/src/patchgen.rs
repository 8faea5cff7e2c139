//! Finding-anchored sampling and co-centered multi-size patch extraction.
//!
//! Every patch set is cut as one envelope of `3 x 96 x 96` voxels over all
//! four modalities; the smaller geometries and the two channel families are
//! centered crops of that envelope. Within a patch of extent `n` along an
//! axis the center is the voxel at `n / 2`.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{read_file, read_json, write_file, write_json, Error, Result};
use crate::volstore::{f32_to_le, le_to_f32, ClinSig, Cohort, Finding, Modality, Study};

/// Patch extent: `h x w` in-plane voxels by `d` slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

pub const GEOMETRIES: [Geometry; 4] = [
    Geometry { h: 42, w: 42, d: 1 },
    Geometry { h: 48, w: 48, d: 3 },
    Geometry { h: 64, w: 64, d: 3 },
    Geometry { h: 96, w: 96, d: 3 },
];

/// The largest geometry; admissibility is defined by it.
pub const ENVELOPE: Geometry = GEOMETRIES[3];

impl Geometry {
    /// `(d, h, w)`, i.e. `(z, y, x)` extents.
    pub fn zyx(self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn volume(self) -> usize {
        self.h * self.w * self.d
    }

    pub fn name(self) -> String {
        format!("{}x{}x{}", self.h, self.w, self.d)
    }

    /// Parses `96`, `96x96x3` or `(96,96,3)` style names.
    pub fn parse(s: &str) -> Option<Self> {
        let t: String = s.chars().filter(|c| !matches!(c, '(' | ')' | ' ')).collect();
        if let Ok(h) = t.parse::<usize>() {
            return GEOMETRIES.iter().copied().find(|g| g.h == h);
        }
        let parts: Vec<usize> = t.split(['x', ',']).map(|p| p.parse().ok()).collect::<Option<_>>()?;
        match parts[..] {
            [h, w, d] => GEOMETRIES.iter().copied().find(|g| (g.h, g.w, g.d) == (h, w, d)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// T2w, ADC and DWI stacked as three channels.
    Composite,
    /// Ktrans alone.
    Solo,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Composite, Family::Solo];

    pub fn modalities(self) -> &'static [Modality] {
        match self {
            Family::Composite => &[Modality::T2w, Modality::Adc, Modality::Dwi],
            Family::Solo => &[Modality::Ktrans],
        }
    }

    pub fn channels(self) -> usize {
        self.modalities().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Composite => "composite",
            Family::Solo => "solo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSpec {
    /// Centers drawn per training study, forced finding centers included.
    pub patches_per_study: usize,
    /// Proposal weight of each finding relative to the uniform proposal.
    pub boost: f64,
    /// A patch is positive when a clinically significant finding lies
    /// within this distance (mm) of its center.
    pub r_pos_mm: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patches_per_study: 100,
            boost: 10.0,
            r_pos_mm: 5.0,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patches_per_study == 0 || !(self.boost >= 0.0) || !(self.r_pos_mm >= 0.0) {
            return Err(Error::invalid(
                "patch spec needs patches_per_study >= 1, boost >= 0 and r_pos_mm >= 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    FindingCentered(u32),
    SemiRandom,
}

/// Which proposal produced a center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Proposal {
    Forced,
    Neighborhood(u32),
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledCenter {
    /// `(z, y, x)` in the unified grid.
    pub index: [usize; 3],
    pub provenance: Provenance,
    pub proposal: Proposal,
}

/// Half-open admissible center range per `(z, y, x)` axis: `[n/2, N - n/2)`
/// for envelope extent `n` and grid extent `N`.
pub fn admissible_range(dims: [usize; 3]) -> Result<[(usize, usize); 3]> {
    let e = ENVELOPE.zyx();
    let mut out = [(0, 0); 3];
    for a in 0..3 {
        let lo = e[a] / 2;
        let hi = dims[a].saturating_sub(e[a] / 2);
        if lo >= hi || dims[a] < e[a] {
            return Err(Error::invalid(format!(
                "grid {:?} cannot hold a {} patch: no admissible centers",
                dims,
                ENVELOPE.name()
            )));
        }
        out[a] = (lo, hi);
    }
    Ok(out)
}

pub fn is_admissible(index: [usize; 3], range: &[(usize, usize); 3]) -> bool {
    (0..3).all(|a| index[a] >= range[a].0 && index[a] < range[a].1)
}

/// Voxel of `finding` in each modality; all four must agree.
pub fn align_modalities(study: &Study, finding: &Finding) -> Result<[usize; 3]> {
    let idx: Vec<[i64; 3]> = study.volumes.iter().map(|v| v.index_of(finding.world_pos)).collect();
    for (v, i) in study.volumes.iter().zip(&idx).skip(1) {
        if *i != idx[0] {
            return Err(Error::invalid(format!(
                "{} finding {}: {} voxel {:?} disagrees with T2w voxel {:?}",
                study.subject_id, finding.finding_id, v.modality, i, idx[0]
            )));
        }
    }
    let v = &study.volumes[0];
    if !v.contains_index(idx[0]) {
        return Err(Error::invalid(format!(
            "{} finding {} maps to voxel {:?} outside the {:?} grid",
            study.subject_id, finding.finding_id, idx[0], v.dims
        )));
    }
    Ok(idx[0].map(|i| i as usize))
}

fn check_grids(study: &Study) -> Result<[usize; 3]> {
    let v0 = &study.volumes[0];
    for v in &study.volumes[1..] {
        if v.dims != v0.dims {
            return Err(Error::invalid(format!(
                "{}: {} grid {:?} differs from T2w grid {:?}; preprocess first",
                study.subject_id, v.modality, v.dims, v0.dims
            )));
        }
    }
    Ok(v0.dims)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampling {
    pub centers: Vec<SampledCenter>,
    /// Findings whose voxel is not an admissible center.
    pub skipped: Vec<u32>,
}

/// Forced finding centers followed by weighted draws until
/// `patches_per_study` centers exist.
///
/// Each draw picks the neighborhood of finding `j` with probability
/// `boost / (boost * k + 1)` and the uniform proposal otherwise.
/// Neighborhood centers are uniform in the `r_pos_mm` ball around the
/// finding, rounded to a voxel and clipped into the admissible box.
pub fn sample_centers(study: &Study, spec: &PatchSpec, seed: u64) -> Result<Sampling> {
    spec.validate()?;
    let dims = check_grids(study)?;
    let range = admissible_range(dims)?;
    let vol = &study.volumes[0];

    let mut findings: Vec<&Finding> = study.findings.iter().collect();
    findings.sort_by_key(|f| f.finding_id);
    let mut centers = Vec::with_capacity(spec.patches_per_study.max(findings.len()));
    let mut anchors = Vec::new();
    let mut skipped = Vec::new();
    for f in findings {
        let idx = align_modalities(study, f)?;
        if is_admissible(idx, &range) {
            centers.push(SampledCenter {
                index: idx,
                provenance: Provenance::FindingCentered(f.finding_id),
                proposal: Proposal::Forced,
            });
            anchors.push(f);
        } else {
            skipped.push(f.finding_id);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.boost * anchors.len() as f64 + 1.0;
    let r = spec.r_pos_mm;
    while centers.len() < spec.patches_per_study {
        let u = rng.random::<f64>() * total;
        let j = (u / spec.boost.max(f64::MIN_POSITIVE)) as usize;
        let c = if !anchors.is_empty() && u < spec.boost * anchors.len() as f64 && j < anchors.len() {
            let f = anchors[j];
            let off = loop {
                let o: [f64; 3] = std::array::from_fn(|_| (rng.random::<f64>() * 2.0 - 1.0) * r);
                if o.iter().map(|v| v * v).sum::<f64>() <= r * r {
                    break o;
                }
            };
            let world = [f.world_pos[0] + off[0], f.world_pos[1] + off[1], f.world_pos[2] + off[2]];
            let raw = vol.index_of(world);
            let index = std::array::from_fn(|a| raw[a].clamp(range[a].0 as i64, range[a].1 as i64 - 1) as usize);
            SampledCenter {
                index,
                provenance: Provenance::SemiRandom,
                proposal: Proposal::Neighborhood(f.finding_id),
            }
        } else {
            SampledCenter {
                index: std::array::from_fn(|a| rng.random_range(range[a].0..range[a].1)),
                provenance: Provenance::SemiRandom,
                proposal: Proposal::Uniform,
            }
        };
        centers.push(c);
    }
    Ok(Sampling { centers, skipped })
}

/// Positive iff a clinically significant finding lies within `r_pos_mm`
/// of the voxel center; test-cohort patches are always unknown.
pub fn label_at(study: &Study, index: [usize; 3], spec: &PatchSpec) -> Result<ClinSig> {
    if study.cohort == Cohort::Test {
        return Ok(ClinSig::Unknown);
    }
    let w = study.volumes[0].world_of(index);
    let mut label = ClinSig::Negative;
    for f in &study.findings {
        match f.clin_sig {
            ClinSig::Unknown => {
                return Err(Error::invalid(format!(
                    "{} finding {} has unknown significance and cannot be used for training",
                    study.subject_id, f.finding_id
                )))
            }
            ClinSig::Positive => {
                let p = [f.world_pos[2], f.world_pos[1], f.world_pos[0]];
                let d2: f64 = (0..3).map(|a| (p[a] - w[a]).powi(2)).sum();
                if d2 <= spec.r_pos_mm * spec.r_pos_mm {
                    label = ClinSig::Positive;
                }
            }
            ClinSig::Negative => {}
        }
    }
    Ok(label)
}

/// All eight patches of one center, stored as the shared envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub subject_id: String,
    pub index: [usize; 3],
    /// World `(x, y, z)` mm of the center voxel.
    pub world_xyz: [f64; 3],
    pub label: ClinSig,
    pub provenance: Provenance,
    pub proposal: Proposal,
    /// `(modality, z, y, x)` over the envelope, modalities in
    /// [`Modality::ALL`] order.
    pub envelope: Vec<f32>,
}

pub const ENVELOPE_LEN: usize = 4 * 3 * 96 * 96;

impl PatchSet {
    /// Patch of `geometry` for `family`, laid out `(channel, z, y, x)`.
    pub fn patch(&self, geometry: Geometry, family: Family) -> Vec<f32> {
        let mut out = Vec::with_capacity(geometry.volume() * family.channels());
        self.patch_into(geometry, family, &mut out);
        out
    }

    pub fn patch_into(&self, geometry: Geometry, family: Family, out: &mut Vec<f32>) {
        let [ez, ey, ex] = ENVELOPE.zyx();
        let [gz, gy, gx] = geometry.zyx();
        let (oz, oy, ox) = (ez / 2 - gz / 2, ey / 2 - gy / 2, ex / 2 - gx / 2);
        for &m in family.modalities() {
            let base = m.index() * ez * ey * ex;
            for z in oz..oz + gz {
                for y in oy..oy + gy {
                    let row = base + (z * ey + y) * ex + ox;
                    out.extend_from_slice(&self.envelope[row..row + gx]);
                }
            }
        }
    }

    pub fn finding_id(&self) -> Option<u32> {
        match self.provenance {
            Provenance::FindingCentered(id) => Some(id),
            Provenance::SemiRandom => None,
        }
    }
}

/// Copies the envelope around `center` from the standardized study.
pub fn extract_patch_set(study: &Study, center: &SampledCenter, spec: &PatchSpec) -> Result<PatchSet> {
    let dims = check_grids(study)?;
    let range = admissible_range(dims)?;
    if !is_admissible(center.index, &range) {
        return Err(Error::invalid(format!(
            "{}: center {:?} is not admissible for a {} patch (range {:?})",
            study.subject_id,
            center.index,
            ENVELOPE.name(),
            range
        )));
    }
    let [ez, ey, ex] = ENVELOPE.zyx();
    let start: [usize; 3] = std::array::from_fn(|a| center.index[a] - ENVELOPE.zyx()[a] / 2);
    let mut envelope = Vec::with_capacity(ENVELOPE_LEN);
    for v in &study.volumes {
        for z in start[0]..start[0] + ez {
            for y in start[1]..start[1] + ey {
                let row = v.offset(z, y, start[2]);
                envelope.extend_from_slice(&v.voxels[row..row + ex]);
            }
        }
    }
    let w = study.volumes[0].world_of(center.index);
    Ok(PatchSet {
        subject_id: study.subject_id.clone(),
        index: center.index,
        world_xyz: [w[2], w[1], w[0]],
        label: label_at(study, center.index, spec)?,
        provenance: center.provenance,
        proposal: center.proposal,
        envelope,
    })
}

/// Patch sets of a study: the sampled mixture for the training cohort, and
/// only the finding centers for the test cohort.
pub fn extract_study(study: &Study, spec: &PatchSpec, seed: u64) -> Result<(Vec<PatchSet>, Vec<u32>)> {
    let sampling = if study.cohort == Cohort::Test {
        let forced = PatchSpec {
            patches_per_study: 1,
            boost: 0.0,
            ..spec.clone()
        };
        let mut s = sample_centers(study, &forced, seed)?;
        s.centers.retain(|c| c.proposal == Proposal::Forced);
        s
    } else {
        sample_centers(study, spec, seed)?
    };
    let sets = sampling
        .centers
        .iter()
        .map(|c| extract_patch_set(study, c, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok((sets, sampling.skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub index: [usize; 3],
    pub world_mm: [f64; 3],
    pub label: ClinSig,
    pub provenance: Provenance,
    pub proposal: Proposal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchiveHeader {
    subject_id: String,
    cohort: Cohort,
    /// `(z, y, x)` extents of each stored block.
    envelope: [usize; 3],
    channels: Vec<Modality>,
    dtype: String,
    order: String,
    patches: Vec<ArchiveEntry>,
}

/// Writes `<path>` (JSON header) and the concatenated envelopes next to it.
pub fn write_archive(path: &Path, subject_id: &str, cohort: Cohort, sets: &[PatchSet]) -> Result<()> {
    let header = ArchiveHeader {
        subject_id: subject_id.to_string(),
        cohort,
        envelope: ENVELOPE.zyx(),
        channels: Modality::ALL.to_vec(),
        dtype: "f32le".into(),
        order: "czyx".into(),
        patches: sets
            .iter()
            .map(|s| ArchiveEntry {
                index: s.index,
                world_mm: s.world_xyz,
                label: s.label,
                provenance: s.provenance,
                proposal: s.proposal,
            })
            .collect(),
    };
    let mut blob = Vec::with_capacity(sets.len() * ENVELOPE_LEN * 4);
    for s in sets {
        blob.extend_from_slice(&f32_to_le(&s.envelope));
    }
    write_json(path, &header)?;
    write_file(&path.with_extension("raw"), &blob)
}

pub fn read_archive(path: &Path) -> Result<(Cohort, Vec<PatchSet>)> {
    let h: ArchiveHeader = read_json(path)?;
    if h.envelope != ENVELOPE.zyx() || h.channels != Modality::ALL || h.dtype != "f32le" || h.order != "czyx" {
        return Err(Error::format(path, "unsupported patch archive layout"));
    }
    let blob_path = path.with_extension("raw");
    let blob = read_file(&blob_path)?;
    let values = le_to_f32(&blob).ok_or_else(|| Error::format(&blob_path, "truncated blob"))?;
    if values.len() != h.patches.len() * ENVELOPE_LEN {
        return Err(Error::format(
            &blob_path,
            format!("expected {} patches, blob holds {} values", h.patches.len(), values.len()),
        ));
    }
    let sets = h
        .patches
        .into_iter()
        .zip(values.chunks_exact(ENVELOPE_LEN))
        .map(|(e, v)| PatchSet {
            subject_id: h.subject_id.clone(),
            index: e.index,
            world_xyz: e.world_mm,
            label: e.label,
            provenance: e.provenance,
            proposal: e.proposal,
            envelope: v.to_vec(),
        })
        .collect();
    Ok((h.cohort, sets))
}

pub const INDEX_HEADER: &str =
    "subject_id,patch,center_z,center_y,center_x,pos_x_mm,pos_y_mm,pos_z_mm,label,provenance,finding_id,proposal\n";

/// One index row per patch set.
pub fn index_rows(sets: &[PatchSet]) -> String {
    let mut s = String::new();
    for (k, p) in sets.iter().enumerate() {
        let (prov, fid) = match p.provenance {
            Provenance::FindingCentered(id) => ("finding", id.to_string()),
            Provenance::SemiRandom => ("semirandom", String::new()),
        };
        let proposal = match p.proposal {
            Proposal::Forced => "forced".to_string(),
            Proposal::Neighborhood(id) => format!("neighborhood:{id}"),
            Proposal::Uniform => "uniform".to_string(),
        };
        s.push_str(&format!(
            "{},{k},{},{},{},{},{},{},{},{prov},{fid},{proposal}\n",
            p.subject_id,
            p.index[0],
            p.index[1],
            p.index[2],
            p.world_xyz[0],
            p.world_xyz[1],
            p.world_xyz[2],
            p.label.as_csv(),
        ));
    }
    s
}
