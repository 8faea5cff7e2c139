//! Volumes, findings, cohort manifests and prediction files.
//!
//! Axis-ordered triples (`dims`, `spacing`, `origin`) are stored `(z, y, x)`
//! to match voxel order. Finding positions keep the `(x, y, z)` order of the
//! findings CSV. The origin is the world position of the center of voxel
//! `[0, 0, 0]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, read_json, write_file, write_json, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T2w,
    #[serde(rename = "ADC")]
    Adc,
    #[serde(rename = "DWI")]
    Dwi,
    Ktrans,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T2w, Modality::Adc, Modality::Dwi, Modality::Ktrans];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lower-case key used in manifests and file names.
    pub fn key(self) -> &'static str {
        match self {
            Modality::T2w => "t2w",
            Modality::Adc => "adc",
            Modality::Dwi => "dwi",
            Modality::Ktrans => "ktrans",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::T2w => "T2w",
            Modality::Adc => "ADC",
            Modality::Dwi => "DWI",
            Modality::Ktrans => "Ktrans",
        })
    }
}

/// One value per modality, serialized with lower-case modality keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityTable<T> {
    pub t2w: T,
    pub adc: T,
    pub dwi: T,
    pub ktrans: T,
}

impl<T> ModalityTable<T> {
    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self {
            t2w: f(Modality::T2w),
            adc: f(Modality::Adc),
            dwi: f(Modality::Dwi),
            ktrans: f(Modality::Ktrans),
        }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::T2w => &self.t2w,
            Modality::Adc => &self.adc,
            Modality::Dwi => &self.dwi,
            Modality::Ktrans => &self.ktrans,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub modality: Modality,
    /// `(nz, ny, nx)`.
    pub dims: [usize; 3],
    /// `(dz, dy, dx)` in mm per voxel.
    pub spacing: [f64; 3],
    /// `(z, y, x)` world mm of voxel `[0, 0, 0]`.
    pub origin: [f64; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(
        modality: Modality,
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        let v = Self {
            modality,
            dims,
            spacing,
            origin,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::invalid(format!("{} volume has empty dims {:?}", self.modality, self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!(
                "{} volume spacing {:?} must be positive",
                self.modality, self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid(format!("{} volume origin is not finite", self.modality)));
        }
        let n = self.len();
        if self.voxels.len() != n {
            return Err(Error::invalid(format!(
                "{} volume {:?} needs {n} voxels, got {}",
                self.modality,
                self.dims,
                self.voxels.len()
            )));
        }
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} voxel {i}", self.modality)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn offset(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.offset(z, y, x)]
    }

    /// World `(z, y, x)` of a voxel center.
    pub fn world_of(&self, index: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + index[a] as f64 * self.spacing[a])
    }

    /// Nearest voxel `(z, y, x)` to a world point given `(x, y, z)`, rounding
    /// half up. May lie outside the volume.
    pub fn index_of(&self, world_xyz: [f64; 3]) -> [i64; 3] {
        let zyx = [world_xyz[2], world_xyz[1], world_xyz[0]];
        std::array::from_fn(|a| round_half_up((zyx[a] - self.origin[a]) / self.spacing[a]))
    }

    pub fn contains_index(&self, idx: [i64; 3]) -> bool {
        idx.iter()
            .zip(&self.dims)
            .all(|(&i, &n)| i >= 0 && (i as usize) < n)
    }

    /// Whether a world `(x, y, z)` point lies in the box spanned by the voxel
    /// cells (centers plus half a voxel on each side).
    pub fn contains_world(&self, world_xyz: [f64; 3]) -> bool {
        let zyx = [world_xyz[2], world_xyz[1], world_xyz[0]];
        (0..3).all(|a| {
            let lo = self.origin[a] - 0.5 * self.spacing[a];
            let hi = self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a];
            zyx[a] >= lo && zyx[a] < hi
        })
    }
}

pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    modality: Modality,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    order: String,
}

/// Raw blob that sits next to a volume header.
pub fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Writes `<path>` (JSON header) and `<path>.raw` with the extension replaced
/// (little-endian `f32`, z-major).
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    if let Some(i) = volume.voxels.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} voxel {i} of {}", volume.modality, path.display())));
    }
    volume.validate()?;
    let header = VolumeHeader {
        modality: volume.modality,
        dims: volume.dims,
        spacing_mm: volume.spacing,
        origin_mm: volume.origin,
        dtype: "f32le".into(),
        order: "zyx".into(),
    };
    write_json(path, &header)?;
    write_file(&blob_path(path), &f32_to_le(&volume.voxels))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let h: VolumeHeader = read_json(path)?;
    if h.dtype != "f32le" || h.order != "zyx" {
        return Err(Error::format(
            path,
            format!("unsupported encoding dtype={} order={}", h.dtype, h.order),
        ));
    }
    let blob = blob_path(path);
    let bytes = read_file(&blob)?;
    let voxels = le_to_f32(&bytes).ok_or_else(|| Error::format(&blob, "length is not a multiple of 4"))?;
    Volume::new(h.modality, h.dims, h.spacing_mm, h.origin_mm, voxels)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_to_f32(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClinSig {
    Positive,
    Negative,
    Unknown,
}

impl ClinSig {
    pub fn as_csv(self) -> &'static str {
        match self {
            ClinSig::Positive => "1",
            ClinSig::Negative => "0",
            ClinSig::Unknown => "unknown",
        }
    }
}

impl FromStr for ClinSig {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "1" => Ok(ClinSig::Positive),
            "0" => Ok(ClinSig::Negative),
            s if s.eq_ignore_ascii_case("unknown") => Ok(ClinSig::Unknown),
            other => Err(format!("clin_sig must be 1, 0 or unknown, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub subject_id: String,
    pub finding_id: u32,
    /// World `(x, y, z)` in mm.
    pub world_pos: [f64; 3],
    pub clin_sig: ClinSig,
}

pub const FINDINGS_HEADER: [&str; 6] = [
    "subject_id",
    "finding_id",
    "pos_x_mm",
    "pos_y_mm",
    "pos_z_mm",
    "clin_sig",
];

pub fn read_findings_csv(path: &Path) -> Result<Vec<Finding>> {
    let bytes = read_file(path)?;
    parse_findings(&bytes, path)
}

/// Parses findings CSV content; `path` is used for error messages only.
pub fn parse_findings(bytes: &[u8], path: &Path) -> Result<Vec<Finding>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    if header.is_empty() && bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(path, "missing header row"));
    }
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != FINDINGS_HEADER {
        return Err(Error::Row {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, got {}", FINDINGS_HEADER.join(","), got.join(",")),
        });
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Row {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let row_err = |message: String| Error::Row {
            path: path.to_path_buf(),
            line,
            message,
        };
        if rec.len() != 6 {
            return Err(row_err(format!("expected 6 fields, got {}", rec.len())));
        }
        let subject_id = rec[0].trim().to_string();
        if subject_id.is_empty() {
            return Err(row_err("empty subject_id".into()));
        }
        let finding_id: u32 = rec[1]
            .trim()
            .parse()
            .map_err(|_| row_err(format!("finding_id {:?} is not a non-negative integer", &rec[1])))?;
        let mut world_pos = [0.0; 3];
        for (a, p) in world_pos.iter_mut().enumerate() {
            let raw = rec[2 + a].trim();
            *p = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| row_err(format!("{} {raw:?} is not a finite number", FINDINGS_HEADER[2 + a])))?;
        }
        let clin_sig = rec[5].parse().map_err(row_err)?;
        if !seen.insert((subject_id.clone(), finding_id)) {
            return Err(row_err(format!("duplicate finding ({subject_id}, {finding_id})")));
        }
        out.push(Finding {
            subject_id,
            finding_id,
            world_pos,
            clin_sig,
        });
    }
    Ok(out)
}

/// Shortest decimal that round-trips the `f64`, so parse-then-write is lossless.
pub fn findings_to_csv(findings: &[Finding]) -> Vec<u8> {
    let mut s = FINDINGS_HEADER.join(",");
    s.push('\n');
    for f in findings {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.subject_id,
            f.finding_id,
            f.world_pos[0],
            f.world_pos[1],
            f.world_pos[2],
            f.clin_sig.as_csv()
        ));
    }
    s.into_bytes()
}

pub fn write_findings_csv(findings: &[Finding], path: &Path) -> Result<()> {
    write_file(path, &findings_to_csv(findings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub finding_id: u32,
    pub probability: f64,
}

pub fn predictions_to_csv(rows: &[Prediction]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&Prediction> = rows.iter().collect();
    for r in &sorted {
        if !(0.0..=1.0).contains(&r.probability) {
            return Err(Error::invalid(format!(
                "probability {} for ({}, {}) is outside [0, 1]",
                r.probability, r.subject_id, r.finding_id
            )));
        }
    }
    sorted.sort_by(|a, b| (&a.subject_id, a.finding_id).cmp(&(&b.subject_id, b.finding_id)));
    let mut s = String::from("subject_id,finding_id,clin_sig_probability\n");
    for r in sorted {
        s.push_str(&format!("{},{},{:.6}\n", r.subject_id, r.finding_id, r.probability));
    }
    Ok(s.into_bytes())
}

pub fn write_predictions_csv(rows: &[Prediction], path: &Path) -> Result<()> {
    let bytes = predictions_to_csv(rows)?;
    write_file(path, &bytes)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let bytes = read_file(path)?;
    let mut rdr = csv::Reader::from_reader(&bytes[..]);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: &str| Error::Row {
            path: path.to_path_buf(),
            line,
            message: m.to_string(),
        };
        if rec.len() != 3 {
            return Err(bad("expected 3 fields"));
        }
        out.push(Prediction {
            subject_id: rec[0].to_string(),
            finding_id: rec[1].parse().map_err(|_| bad("bad finding_id"))?,
            probability: rec[2].parse().map_err(|_| bad("bad probability"))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub subject_id: String,
    /// Indexed by [`Modality::index`].
    pub volumes: [Volume; 4],
    pub findings: Vec<Finding>,
    pub cohort: Cohort,
}

impl Study {
    pub fn new(
        subject_id: impl Into<String>,
        volumes: [Volume; 4],
        findings: Vec<Finding>,
        cohort: Cohort,
    ) -> Result<Self> {
        let s = Self {
            subject_id: subject_id.into(),
            volumes,
            findings,
            cohort,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn volume(&self, m: Modality) -> &Volume {
        &self.volumes[m.index()]
    }

    pub fn validate(&self) -> Result<()> {
        for (m, v) in Modality::ALL.iter().zip(&self.volumes) {
            if v.modality != *m {
                return Err(Error::invalid(format!(
                    "{}: slot {} holds a {} volume",
                    self.subject_id, m, v.modality
                )));
            }
            v.validate()?;
        }
        for f in &self.findings {
            if f.subject_id != self.subject_id {
                return Err(Error::invalid(format!(
                    "{}: finding {} belongs to {}",
                    self.subject_id, f.finding_id, f.subject_id
                )));
            }
            for v in &self.volumes {
                if !v.contains_world(f.world_pos) {
                    return Err(Error::invalid(format!(
                        "{}: finding {} at {:?} lies outside the {} volume",
                        self.subject_id, f.finding_id, f.world_pos, v.modality
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub t2w: String,
    pub adc: String,
    pub dwi: String,
    pub ktrans: String,
    pub findings: String,
    #[serde(default)]
    pub cohort: Cohort,
}

impl StudyEntry {
    pub fn volume(&self, m: Modality) -> &str {
        match m {
            Modality::T2w => &self.t2w,
            Modality::Adc => &self.adc,
            Modality::Dwi => &self.dwi,
            Modality::Ktrans => &self.ktrans,
        }
    }
}

/// `{root, studies: {id: {t2w, adc, dwi, ktrans, findings, cohort}}, exclude}`.
///
/// File references are relative to `root`, which is itself relative to the
/// manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub root: String,
    pub studies: BTreeMap<String, StudyEntry>,
    #[serde(default)]
    pub exclude: Vec<String>,
}

/// A manifest with its resolved root directory.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: CohortManifest,
    pub root: PathBuf,
}

impl LoadedManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: CohortManifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let root = base.join(&manifest.root);
        let loaded = Self { manifest, root };
        for id in loaded.subject_ids() {
            let e = &loaded.manifest.studies[&id];
            for m in Modality::ALL {
                let p = loaded.root.join(e.volume(m));
                if !p.is_file() {
                    return Err(Error::format(path, format!("{id}: {} file {} is missing", m, p.display())));
                }
            }
            let f = loaded.root.join(&e.findings);
            if !f.is_file() {
                return Err(Error::format(path, format!("{id}: findings file {} is missing", f.display())));
            }
        }
        Ok(loaded)
    }

    /// Study ids in sorted order, with exclusions removed.
    pub fn subject_ids(&self) -> Vec<String> {
        let excluded: BTreeSet<&String> = self.manifest.exclude.iter().collect();
        self.manifest
            .studies
            .keys()
            .filter(|id| !excluded.contains(id))
            .cloned()
            .collect()
    }

    pub fn load_study(&self, id: &str) -> Result<Study> {
        let e = self
            .manifest
            .studies
            .get(id)
            .ok_or_else(|| Error::invalid(format!("study {id} is not in the manifest")))?;
        if self.manifest.exclude.iter().any(|x| x == id) {
            return Err(Error::invalid(format!("study {id} is excluded")));
        }
        let volumes = [Modality::T2w, Modality::Adc, Modality::Dwi, Modality::Ktrans]
            .map(|m| read_volume(&self.root.join(e.volume(m))));
        let [t2w, adc, dwi, ktrans] = volumes;
        let volumes = [t2w?, adc?, dwi?, ktrans?];
        let findings = read_findings_csv(&self.root.join(&e.findings))?;
        Study::new(id, volumes, findings, e.cohort)
    }

    pub fn load_all(&self) -> Result<Vec<Study>> {
        self.subject_ids().iter().map(|id| self.load_study(id)).collect()
    }
}

/// Writes every study under `root` as `<id>/<modality>.json` plus
/// `<id>/findings.csv`, and a manifest at `manifest_path` pointing at them.
pub fn write_cohort(studies: &[Study], manifest_path: &Path, exclude: &[String]) -> Result<CohortManifest> {
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let mut entries = BTreeMap::new();
    for s in studies {
        for v in &s.volumes {
            write_volume(v, &base.join(&s.subject_id).join(format!("{}.json", v.modality.key())))?;
        }
        write_findings_csv(&s.findings, &base.join(&s.subject_id).join("findings.csv"))?;
        let rel = |name: &str| format!("{}/{}", s.subject_id, name);
        entries.insert(
            s.subject_id.clone(),
            StudyEntry {
                t2w: rel("t2w.json"),
                adc: rel("adc.json"),
                dwi: rel("dwi.json"),
                ktrans: rel("ktrans.json"),
                findings: rel("findings.csv"),
                cohort: s.cohort,
            },
        );
    }
    let manifest = CohortManifest {
        root: ".".into(),
        studies: entries,
        exclude: exclude.to_vec(),
    };
    write_json(manifest_path, &manifest)?;
    Ok(manifest)
}
