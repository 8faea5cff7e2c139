mod common;

use common::rng;
use mpstream_autodiff::{Graph, Mode, Tensor};
use mpstream_core::densenet::{build_stream, load_checkpoint, parameter_count, plan, save_checkpoint, Architecture, StreamConfig};
use mpstream_core::patchgen::{Family, Geometry, GEOMETRIES};
use rand::Rng;

/// Expected `(name, channels)` sequence from the growth and compression
/// rules alone.
fn expected_channels(c_in: usize, f0: usize, growth: usize, layers: usize, blocks: usize, theta: f64, head: usize) -> Vec<(String, usize)> {
    let mut out = vec![("input".to_string(), c_in), ("init.conv".into(), f0), ("init.pool".into(), f0)];
    let mut start = f0;
    for b in 0..blocks {
        for l in 1..=layers {
            out.push((format!("block{b}.layer{}", l - 1), start + l * growth));
        }
        let end = start + layers * growth;
        if b + 1 < blocks {
            start = (theta * end as f64).floor() as usize;
            out.push((format!("transition{b}"), start));
        } else {
            start = end;
        }
    }
    out.push(("pool".into(), start));
    out.push(("head".into(), head));
    out.push(("logit".into(), 1));
    out
}

fn tiny() -> Architecture {
    Architecture {
        growth: 4,
        layers_per_block: 2,
        init_filters: Some(4),
        bottleneck: Some(8),
        head: 16,
        ..Default::default()
    }
}

#[test]
fn traced_channels_match_growth_arithmetic_everywhere() {
    for arch in [Architecture::default(), tiny()] {
        for g in GEOMETRIES {
            for family in Family::ALL {
                let cfg = StreamConfig {
                    geometry: g,
                    channels: family.channels(),
                    arch: arch.clone(),
                };
                let blocks = if g.h >= 96 { 4 } else { 3 };
                let expect = expected_channels(
                    cfg.channels,
                    cfg.init_filters(),
                    arch.growth,
                    arch.layers_per_block,
                    blocks,
                    arch.compression,
                    arch.head,
                );
                let p = plan(&cfg).unwrap();
                let planned: Vec<(String, usize)> = p.iter().map(|q| (q.name.clone(), q.channels)).collect();
                assert_eq!(planned, expect, "{} {}", g.name(), family.name());

                let mut model = build_stream::<f32>(&cfg, 1).unwrap();
                let gr = Graph::new();
                let x = gr.constant(Tensor::zeros(model.input_shape(2)));
                let mut trace = Vec::new();
                model.forward_traced(&gr, x, Mode::Train, 0, Some(&mut trace)).unwrap();
                assert_eq!(trace.len(), p.len());
                for ((name, shape), q) in trace.iter().zip(&p) {
                    assert_eq!(name, &q.name);
                    assert_eq!(shape[0], 2);
                    assert_eq!(shape[1], q.channels, "{name}");
                    if shape.len() == 5 {
                        assert_eq!(&shape[2..], &q.extent, "{name}");
                    }
                }
                assert_eq!(model.parameter_count(), parameter_count(&cfg).unwrap());
            }
        }
    }
}

#[test]
fn spatial_collapse_fails_the_build() {
    let cfg = StreamConfig {
        geometry: Geometry { h: 4, w: 4, d: 1 },
        channels: 1,
        arch: tiny(),
    };
    assert!(build_stream::<f32>(&cfg, 0).is_err());
    let ok = StreamConfig {
        geometry: Geometry { h: 12, w: 12, d: 1 },
        ..cfg
    };
    assert!(build_stream::<f32>(&ok, 0).is_ok());
}

fn random_inputs(len: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random::<f32>() * 2.0 - 1.0).collect()
}

/// Under He-normal weights the batch-normalized, pooled features of a fresh
/// stream sit near `E[relu(N(0, 1))]` in every channel, so its mean logit
/// is roughly one Gaussian draw per model with variance
/// `2 E[relu(N(0, 0.32))^2] = 0.32`.
#[test]
fn fresh_streams_are_centred_on_one_half() {
    let cfg = StreamConfig {
        geometry: GEOMETRIES[0],
        channels: 3,
        arch: Architecture::default(),
    };
    let seeds = 40;
    let mut means = Vec::new();
    for seed in 0..seeds {
        let mut m = build_stream::<f32>(&cfg, seed).unwrap();
        let data = random_inputs(64 * m.sample_len(), 3);
        let logits = m.logits(&data, Mode::Train, 5).unwrap();
        let mean = logits.iter().sum::<f64>() / 64.0;
        means.push(mean);
    }
    let centre = means.iter().sum::<f64>() / seeds as f64;
    let sd = (means.iter().map(|z| (z - centre).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();
    // Standard error of the centre is about 0.57 / sqrt(40) = 0.09.
    assert!(centre.abs() < 0.3, "mean initial logit {centre}");
    assert!(sd > 0.3 && sd < 0.9, "initial logit sd {sd}");
    let inside = means.iter().filter(|&&z| {
        let p = 1.0 / (1.0 + (-z).exp());
        p > 0.3 && p < 0.7
    });
    assert!(inside.count() * 2 > seeds as usize);
}

#[test]
fn eval_mode_is_deterministic_and_batch_independent() {
    let cfg = StreamConfig {
        geometry: GEOMETRIES[1],
        channels: 1,
        arch: tiny(),
    };
    let mut m = build_stream::<f32>(&cfg, 2).unwrap();
    assert!(m.predict(&random_inputs(m.sample_len(), 1)).is_err(), "eval before any training step");
    let warm = random_inputs(8 * m.sample_len(), 9);
    m.logits(&warm, Mode::Train, 0).unwrap();
    let data = random_inputs(40 * m.sample_len(), 4);
    let all = m.predict(&data).unwrap();
    assert_eq!(all, m.predict(&data).unwrap());
    let n = m.sample_len();
    for i in [0, 17, 39] {
        let one = m.predict(&data[i * n..(i + 1) * n]).unwrap();
        assert!((one[0] - all[i]).abs() < 1e-6, "sample {i}");
    }
}

#[test]
fn checkpoints_restore_bitwise() {
    let cfg = StreamConfig {
        geometry: GEOMETRIES[0],
        channels: 3,
        arch: tiny(),
    };
    let mut m = build_stream::<f32>(&cfg, 4).unwrap();
    let data = random_inputs(6 * m.sample_len(), 2);
    m.logits(&data, Mode::Train, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&m, &path).unwrap();
    let mut back = load_checkpoint(&path).unwrap();
    assert_eq!(back.digest(), m.digest());
    assert_eq!(back.predict(&data).unwrap(), m.predict(&data).unwrap());
}
