use mpstream_core::patchgen::align_modalities;
use mpstream_core::phantom::{generate_cohort, PhantomSpec};
use mpstream_core::preprocess::{unify_study, GridSpec};
use mpstream_core::volstore::{ClinSig, Cohort, Modality};

fn small(n: usize, test: usize) -> PhantomSpec {
    PhantomSpec {
        n_subjects: n,
        n_test_subjects: test,
        ..Default::default()
    }
}

#[test]
fn same_spec_same_cohort_bitwise() {
    let a = generate_cohort(&small(4, 2)).unwrap();
    let b = generate_cohort(&small(4, 2)).unwrap();
    assert_eq!(a.studies, b.studies);
    assert_eq!(a.truth, b.truth);
    let c = generate_cohort(&PhantomSpec { seed: 1, ..small(4, 2) }).unwrap();
    assert_ne!(a.studies[0].volumes[0].voxels, c.studies[0].volumes[0].voxels);
}

#[test]
fn lesion_centers_sit_on_voxel_centers_of_every_grid() {
    let cohort = generate_cohort(&small(6, 0)).unwrap();
    for s in &cohort.studies {
        for f in &s.findings {
            for v in &s.volumes {
                let idx = v.index_of(f.world_pos);
                assert!(v.contains_index(idx));
                let w = v.world_of(idx.map(|i| i as usize));
                assert_eq!([w[2], w[1], w[0]], f.world_pos, "{} finding {} on {}", s.subject_id, f.finding_id, v.modality);
            }
        }
        let unified = unify_study(s, &GridSpec { crop: 240, ..Default::default() }).unwrap();
        for f in &unified.findings {
            let idx = align_modalities(&unified, f).unwrap();
            let w = unified.volumes[0].world_of(idx);
            assert_eq!([w[2], w[1], w[0]], f.world_pos);
        }
    }
}

#[test]
fn class_ratio_and_cohort_shape() {
    let cohort = generate_cohort(&PhantomSpec { n_subjects: 100, n_test_subjects: 5, ..Default::default() }).unwrap();
    let train: Vec<_> = cohort.studies.iter().filter(|s| s.cohort == Cohort::Train).collect();
    assert_eq!(train.len(), 100);
    let positives = train.iter().flat_map(|s| &s.findings).filter(|f| f.clin_sig == ClinSig::Positive).count();
    assert!((35..=55).contains(&positives), "{positives}");
    let test: Vec<_> = cohort.studies.iter().filter(|s| s.cohort == Cohort::Test).collect();
    assert_eq!(test.len(), 5);
    assert!(test.iter().flat_map(|s| &s.findings).all(|f| f.clin_sig == ClinSig::Unknown));
    assert_eq!(cohort.truth.len(), test.iter().map(|s| s.findings.len()).sum::<usize>());
    assert!(cohort.truth.iter().all(|f| f.clin_sig != ClinSig::Unknown));
}

#[test]
fn positive_lesions_are_separable_by_contrast() {
    // DWI rises at positive lesions and never by as much at negative ones.
    let cohort = generate_cohort(&small(10, 0)).unwrap();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in &cohort.studies {
        let v = s.volume(Modality::Dwi);
        for f in &s.findings {
            let i = v.index_of(f.world_pos).map(|i| i as usize);
            let value = v.at(i[0], i[1], i[2]) as f64;
            if f.clin_sig == ClinSig::Positive {
                pos.push(value);
            } else {
                neg.push(value);
            }
        }
    }
    assert!(!pos.is_empty() && !neg.is_empty());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&pos) > mean(&neg) * 1.2, "{} vs {}", mean(&pos), mean(&neg));
}
