use std::f64::consts::PI;

use approx::assert_abs_diff_eq;

use super::*;
use crate::container::{set_encoded_len_bound, HEADER_LEN};
use crate::geonet::TransformDistribution;
use crate::grid::{GridCoord, WindowShape};
use crate::sample::{relax, Relaxation, Sample, DEFAULT_EXTENT};
use crate::sim::{SimConfig, Simulator};

/// Network whose output is exactly one-hot at `index` for every input.
fn pinned_net(input: usize, window: WindowShape, index: usize) -> GeoNetParams {
    let mut p = GeoNetParams::zeros(input, 1, window);
    p.layers[2].bias[index] = 1000.0;
    p
}

fn spec(h: usize, w: usize, c: usize) -> GridSpec {
    GridSpec::new(h, w, 0.5, c).unwrap()
}

fn set_with(spec: GridSpec, relaxation: Relaxation, samples: Vec<Sample>) -> SignificantSet {
    SignificantSet {
        samples,
        source_frame: 0,
        source_pose: Pose2::identity(),
        spec,
        relaxation,
    }
}

#[test]
fn empty_bank_warps_to_zero() {
    let s = spec(8, 8, 2);
    let net = GeoNetParams::zeros(18, 4, WindowShape::square(3));
    let bank = SparseBank::new(set_with(s, Relaxation::default(), vec![]), &net);
    assert_eq!(warp(&bank), WarpedState::zeros(s));
}

#[test]
fn one_hot_scatter_moves_the_feature() {
    let s = spec(10, 10, 2);
    let window = WindowShape::square(7);
    let relaxation = Relaxation::Square(WindowShape::square(1));
    let net = pinned_net(2, window, window.index_of(2, 0).unwrap());
    let mut f = FeatureMap::zeros(s);
    let r = GridCoord::new(4, 5);
    f.at_mut(r).copy_from_slice(&[0.6, -0.8]);
    let sample = Sample {
        location: r,
        score: 1.0,
        patch: relax(r, &relaxation, &f, DEFAULT_EXTENT),
        extent_hint: DEFAULT_EXTENT,
    };
    let out = warp(&SparseBank::new(
        set_with(s, relaxation, vec![sample]),
        &net,
    ));
    let dest = GridCoord::new(6, 5);
    assert_eq!(out.warped_features.at(dest), &[0.6, -0.8]);
    assert_eq!(out.warped_heatmap.at(dest), 1.0);
    assert_eq!(out.warped_heatmap.sum(), 1.0);
    for i in 0..s.cells() {
        let c = s.coord(i);
        if c != dest {
            assert!(out.warped_features.at(c).iter().all(|&v| v == 0.0));
            assert_eq!(out.weight_map[i], 0.0);
        }
    }
}

#[test]
fn features_vanish_where_weight_is_zero() {
    let cfg = SimConfig {
        spec: spec(24, 24, 4),
        object_count: 3,
        frame_count: 1,
        seed: 2,
        ..SimConfig::default()
    };
    let frame = Simulator::new(cfg).unwrap().next().unwrap();
    let sampling = SamplingConfig::default();
    let net = GeoNetParams::init(36, 8, WindowShape::square(5), 1);
    let set = crate::sample::build_significant_set(&frame, &sampling);
    let out = warp(&SparseBank::new(set, &net));
    for (i, w) in out.weight_map.iter().enumerate() {
        assert!(*w >= 0.0);
        if *w == 0.0 {
            assert!(out
                .warped_features
                .at(s_coord(&out, i))
                .iter()
                .all(|&v| v == 0.0));
        }
    }
    assert!(out
        .warped_heatmap
        .data()
        .iter()
        .all(|v| (0.0..=1.0).contains(v)));
}

fn s_coord(w: &WarpedState, i: usize) -> GridCoord {
    w.warped_features.spec().coord(i)
}

fn scattered_bank<'a>(s: GridSpec, net: &'a GeoNetParams, cells: &[(i32, i32)]) -> SparseBank<'a> {
    let f = FeatureMap::zeros(s);
    let samples = cells
        .iter()
        .map(|&(x, y)| {
            let location = GridCoord::new(x, y);
            Sample {
                location,
                score: 0.9,
                patch: relax(location, &Relaxation::default(), &f, DEFAULT_EXTENT),
                extent_hint: DEFAULT_EXTENT,
            }
        })
        .collect();
    SparseBank::new(set_with(s, Relaxation::default(), samples), net)
}

#[test]
fn identical_poses_keep_the_bank() {
    let s = spec(12, 12, 1);
    let net = GeoNetParams::zeros(9, 2, WindowShape::square(3));
    let bank = scattered_bank(s, &net, &[(1, 1), (5, 7), (11, 0)]);
    let pose = Pose2::new([3.0, -1.0], 0.3);
    let (aligned, dropped) = ego_align(&bank, &pose, &pose);
    assert_eq!(dropped, 0);
    assert_eq!(aligned.set.samples, bank.set.samples);
}

#[test]
fn ego_forward_motion_shifts_samples_back() {
    let s = spec(12, 12, 1);
    let net = GeoNetParams::zeros(9, 2, WindowShape::square(3));
    let bank = scattered_bank(s, &net, &[(1, 1), (5, 7), (11, 0)]);
    // World -> ego poses of an ego that moved +2 cells along x.
    let from = Pose2::new([-1.0, 0.0], 0.0);
    let to = Pose2::new([-1.0 - 2.0 * s.cell_size, 0.0], 0.0);
    let (aligned, dropped) = ego_align(&bank, &from, &to);
    assert_eq!(dropped, 1);
    let locs: Vec<_> = aligned.set.samples.iter().map(|s| s.location).collect();
    assert_eq!(locs, vec![GridCoord::new(3, 7), GridCoord::new(9, 0)]);
    assert_eq!(aligned.set.source_pose, to);
    assert_eq!(
        aligned.byte_size,
        crate::container::set_encoded_len(&aligned.set)
    );
}

#[test]
fn ego_rotation_matches_dense_rotation() {
    // Dense route: rotate an indicator map by pulling every destination cell
    // from its exact 90° preimage, then read off the peaks.
    let n = 9;
    let s = spec(n, n, 1);
    let net = GeoNetParams::zeros(9, 2, WindowShape::square(3));
    let peaks = [(1, 2), (4, 4), (7, 1), (0, 8)];
    let bank = scattered_bank(s, &net, &peaks);
    let to = Pose2::new([0.0, 0.0], PI / 2.0);
    let (aligned, dropped) = ego_align(&bank, &Pose2::identity(), &to);
    assert_eq!(dropped, 0);

    let half = (n / 2) as i32;
    let mut dense = vec![false; n * n];
    for y in 0..n as i32 {
        for x in 0..n as i32 {
            // Preimage of (x, y) under (u, v) -> (-v, u) about the center.
            let (u, v) = (x - half, y - half);
            let (px, py) = (v + half, -u + half);
            if peaks.contains(&(px, py)) {
                dense[(y * n as i32 + x) as usize] = true;
            }
        }
    }
    let mut from_dense: Vec<GridCoord> = (0..n * n)
        .filter(|&i| dense[i])
        .map(|i| s.coord(i))
        .collect();
    let mut from_sparse: Vec<GridCoord> = aligned.set.samples.iter().map(|s| s.location).collect();
    from_dense.sort_by_key(|c| c.row_major_key());
    from_sparse.sort_by_key(|c| c.row_major_key());
    assert_eq!(from_sparse, from_dense);
}

fn frame_with(s: GridSpec, heat: f64) -> SimFrame {
    let mut heatmap = Heatmap::zeros(s);
    heatmap.set(GridCoord::new(1, 1), heat);
    let data = (0..s.cells() * s.channels)
        .map(|v| v as f64 * 0.1)
        .collect();
    SimFrame {
        index: 3,
        heatmap,
        features: FeatureMap::from_vec(s, data).unwrap(),
        ego_pose: Pose2::identity(),
        truth: vec![],
        heatmap_sigma: 1.0,
        frame_gap: 0.5,
    }
}

#[test]
fn merge_examples() {
    let s = spec(4, 4, 4);
    let frame = frame_with(s, 0.7);
    let zero = WarpedState::zeros(s);

    let half = merge(&frame, &zero, MergeMode::Blend { beta: 0.5 }).unwrap();
    for (a, b) in half.features.data().iter().zip(frame.features.data()) {
        assert_eq!(*a, 0.5 * b);
    }
    assert_eq!(half.heatmap, frame.heatmap);

    let mut warped = WarpedState::zeros(s);
    warped.warped_features = FeatureMap::from_vec(s, vec![1.0; 64]).unwrap();
    warped.warped_heatmap.set(GridCoord::new(2, 2), 0.4);
    let same = merge(&frame, &warped, MergeMode::Blend { beta: 0.0 }).unwrap();
    assert_eq!(same.features, frame.features);
    assert_eq!(same.heatmap.at(GridCoord::new(2, 2)), 0.4);

    let cat = merge(&frame, &warped, MergeMode::Concat).unwrap();
    assert_eq!(cat.features.channels(), 8);
    let c = GridCoord::new(3, 2);
    assert_eq!(&cat.features.at(c)[..4], frame.features.at(c));
    assert_eq!(&cat.features.at(c)[4..], &[1.0; 4]);
}

#[test]
fn merge_rejects_other_grids() {
    let frame = frame_with(spec(4, 4, 4), 0.7);
    let warped = WarpedState::zeros(spec(4, 5, 4));
    assert!(matches!(
        merge(&frame, &warped, MergeMode::Concat),
        Err(Error::Mismatch(_))
    ));
}

#[test]
fn concat_cannot_drive_induction() {
    let net = GeoNetParams::zeros(9 * 4, 2, WindowShape::square(7));
    let fusion = FusionConfig {
        mode: MergeMode::Concat,
    };
    match run_sequence(
        &[frame_with(spec(4, 4, 4), 0.5)],
        &SamplingConfig::default(),
        &net,
        &fusion,
        3.0,
    ) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "fusion.mode"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn wiring_checks_network_input() {
    let net = GeoNetParams::zeros(10, 2, WindowShape::square(7));
    let r = run_sequence(
        &[frame_with(spec(4, 4, 4), 0.5)],
        &SamplingConfig::default(),
        &net,
        &FusionConfig::default(),
        3.0,
    );
    assert!(matches!(r, Err(Error::Mismatch(_))));
}

#[test]
fn single_frame_passes_through() {
    let frame = frame_with(spec(6, 6, 2), 0.9);
    let net = GeoNetParams::zeros(18, 2, WindowShape::square(7));
    let run = run_sequence(
        std::slice::from_ref(&frame),
        &SamplingConfig::default(),
        &net,
        &FusionConfig::default(),
        3.0,
    )
    .unwrap();
    assert_eq!(run.fused, vec![FusedFrame::passthrough(&frame)]);
    assert_eq!(run.reports[0].bank_bytes, 0);
}

fn static_scene(frames: usize, dropout: f64) -> Vec<SimFrame> {
    let s = spec(32, 32, 4);
    let cfg = SimConfig {
        spec: s,
        frame_count: frames,
        max_speed: 0.0,
        dropout_prob: dropout,
        seed: 21,
        ..SimConfig::default()
    };
    let objects = [[-3.25, -2.25], [4.25, 3.75]]
        .iter()
        .enumerate()
        .map(|(i, &p)| crate::sim::ObjectState {
            id: i as u32,
            position: p,
            velocity: [0.0, 0.0],
            ego_position: p,
            extent: [2, 1],
            signature: vec![],
            observed: true,
        })
        .collect();
    Simulator::with_objects(cfg, objects).unwrap().collect()
}

#[test]
fn stationary_scene_keeps_its_peaks() {
    let frames = static_scene(6, 0.0);
    let window = WindowShape::square(7);
    let net = pinned_net(36, window, window.center_index());
    let run = run_sequence(
        &frames,
        &SamplingConfig::default(),
        &net,
        &FusionConfig::default(),
        3.0,
    )
    .unwrap();
    let peaks = |h: &Heatmap| {
        crate::eval::detect_peaks(h, 0.3, 1)
            .into_iter()
            .map(|d| d.location)
            .collect::<Vec<_>>()
    };
    let first = peaks(&run.fused[0].heatmap);
    assert_eq!(first.len(), 2);
    for f in &run.fused {
        assert_eq!(peaks(&f.heatmap), first);
    }
    assert_eq!(
        run.fused.last().unwrap().provenance,
        (0..6).collect::<Vec<_>>()
    );
}

#[test]
fn zero_motion_warp_is_identity_on_peaks() {
    let frames = static_scene(1, 0.0);
    let window = WindowShape::square(7);
    let net = pinned_net(36, window, window.center_index());
    let set = crate::sample::build_significant_set(&frames[0], &SamplingConfig::default());
    assert_eq!(set.len(), 2);
    let bank = SparseBank::new(set.clone(), &net);
    let (aligned, _) = ego_align(&bank, &frames[0].ego_pose, &frames[0].ego_pose);
    let out = warp(&aligned);
    for s in &set.samples {
        assert_eq!(out.warped_heatmap.at(s.location), s.score);
        for (a, b) in out
            .warped_features
            .at(s.location)
            .iter()
            .zip(frames[0].features.at(s.location))
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}

#[test]
fn dropped_static_object_is_recovered() {
    let mut frames = static_scene(2, 0.0);
    // Drop object 0 from frame 1's observation by hand.
    let s = *frames[1].spec();
    let gone = frames[1].truth[0].center_cell(&s);
    let mut h = frames[1].heatmap.data().to_vec();
    for y in -8..=8 {
        for x in -8..=8 {
            let c = gone.offset(x, y);
            if s.contains(c) && frames[1].truth[1].center_cell(&s).chebyshev(c) > 8 {
                h[s.index(c)] = 0.0;
            }
        }
    }
    frames[1].heatmap = Heatmap::from_vec(s, h).unwrap();
    let window = WindowShape::square(7);
    let net = pinned_net(36, window, window.center_index());
    let run = run_sequence(
        &frames,
        &SamplingConfig::default(),
        &net,
        &FusionConfig::default(),
        3.0,
    )
    .unwrap();
    let observed = frames[0].heatmap.at(gone);
    assert!(run.fused[1].heatmap.at(gone) >= 0.5 * observed);
}

#[test]
fn bank_size_stays_bounded_over_ten_frames() {
    let cfg = SimConfig {
        spec: spec(48, 48, 4),
        object_count: 6,
        frame_count: 10,
        dropout_prob: 0.3,
        seed: 5,
        ..SimConfig::default()
    };
    let frames = crate::sim::simulate(&cfg).unwrap();
    let sampling = SamplingConfig::default();
    let net = GeoNetParams::init(36, 8, WindowShape::square(7), 3);
    let run = run_sequence(&frames, &sampling, &net, &FusionConfig::default(), 3.0).unwrap();
    let bound = set_encoded_len_bound(sampling.top_k, 9, 4);
    assert!(bound > HEADER_LEN + sampling.top_k * 9 * 4 * 8);
    for r in &run.reports[1..] {
        assert!(r.bank_bytes <= bound, "{} > {bound}", r.bank_bytes);
        assert!(r.bank_bytes > 0);
        assert_eq!(r.dense_bytes, 48 * 48 * 4 * 8);
    }
}

#[test]
fn oracle_rejects_large_grids() {
    let s = spec(33, 8, 1);
    let q = vec![TransformDistribution::uniform(1); s.cells()];
    let r = dense_cascade_oracle(
        &Heatmap::zeros(s),
        &FeatureMap::zeros(s),
        &q,
        WindowShape::square(1),
        &Relaxation::default(),
        |_| DEFAULT_EXTENT,
    );
    assert!(matches!(r, Err(Error::OracleTooLarge { .. })));
}

#[test]
fn oracle_trivial_cases() {
    let s = spec(8, 8, 2);
    let window = WindowShape::square(3);
    let relaxation = Relaxation::Square(WindowShape::square(1));
    let uniform = vec![TransformDistribution::uniform(9); s.cells()];
    let zero = dense_cascade_oracle(
        &Heatmap::zeros(s),
        &FeatureMap::zeros(s),
        &uniform,
        window,
        &relaxation,
        |_| DEFAULT_EXTENT,
    )
    .unwrap();
    assert_eq!(zero, WarpedState::zeros(s));

    let mut h = Heatmap::zeros(s);
    let r = GridCoord::new(3, 4);
    h.set(r, 1.0);
    let shift = window.index_of(1, -1).unwrap();
    let q = vec![TransformDistribution::one_hot(9, shift); s.cells()];
    let mut f = FeatureMap::zeros(s);
    f.at_mut(r).copy_from_slice(&[2.0, 3.0]);
    let out = dense_cascade_oracle(&h, &f, &q, window, &relaxation, |_| DEFAULT_EXTENT).unwrap();
    let dest = GridCoord::new(4, 3);
    assert_eq!(out.warped_heatmap.at(dest), 1.0);
    assert_eq!(out.warped_heatmap.sum(), 1.0);
    assert_eq!(out.warped_features.at(dest), &[2.0, 3.0]);
}

#[test]
fn sparse_warp_equals_oracle_on_a_small_grid() {
    use crate::sample::sample_maps;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let s = spec(8, 8, 3);
    for relaxation in [
        Relaxation::default(),
        Relaxation::Circular { radius: 1 },
        Relaxation::Rectangle {
            max: WindowShape::square(3),
        },
    ] {
        let heat: Vec<f64> = (0..64)
            .map(|_| {
                if rng.gen_bool(0.4) {
                    rng.gen_range(0.0..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let h = Heatmap::from_vec(s, heat).unwrap();
        let f = FeatureMap::from_vec(s, (0..64 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let window = WindowShape::square(5);
        let input = relaxation.bounding().cells() * 3;
        let mut net = GeoNetParams::init(input, 6, window, 8);
        net.layers[2]
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-2.0..2.0));
        let cfg = SamplingConfig {
            alpha: 0.0,
            top_k: 64,
            nms_radius: 0,
            relaxation,
        };
        let set = sample_maps(&h, &f, &[], &cfg, 0, Pose2::identity());
        let sparse = warp(&SparseBank::new(set, &net));
        let q: Vec<_> = (0..64)
            .map(|i| {
                forward(
                    &net,
                    &relax(s.coord(i), &relaxation, &f, DEFAULT_EXTENT)
                        .to_dense(relaxation.bounding()),
                )
            })
            .collect();
        let dense =
            dense_cascade_oracle(&h, &f, &q, window, &relaxation, |_| DEFAULT_EXTENT).unwrap();
        for (a, b) in sparse
            .warped_heatmap
            .data()
            .iter()
            .zip(dense.warped_heatmap.data())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in sparse
            .warped_features
            .data()
            .iter()
            .zip(dense.warped_features.data())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
        for (a, b) in sparse.weight_map.iter().zip(&dense.weight_map) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
