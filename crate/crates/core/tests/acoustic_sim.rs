use std::f64::consts::PI;

use icodoa::acoustic_sim::*;
use icodoa::ico_grid::IcoGrid;
use icodoa::srp_phat::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: f64 = 16000.0;
const C: f64 = 343.0;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn static_job(room: RoomSpec, center: [f64; 3], src: [f64; 3], duration: f64, snr_db: f64) -> SimJob {
    SimJob {
        seed: 3,
        room,
        array_center: center,
        trajectory: Trajectory::fixed(src, duration),
        source: SourceSpec::Synth { seed: 3 },
        snr_db,
        fs: FS,
        c: C,
    }
}

#[test]
fn sampled_t60_is_uniform() {
    let ranges = SceneRanges::default();
    let mut t: Vec<f64> = (0..10_000).map(|i| sample_scene(i, &ranges).unwrap().room.t60).collect();
    t.sort_by(f64::total_cmp);
    assert!(t[0] >= 0.2 && t[t.len() - 1] <= 1.3);
    let n = t.len() as f64;
    let ks = t
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = (x - 0.2) / 1.1;
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.02, "KS statistic {ks}");
}

#[test]
fn sampled_scenes_respect_constraints() {
    let ranges = SceneRanges { duration: 8.0, ..SceneRanges::default() };
    for seed in 0..300 {
        let job = sample_scene(seed, &ranges).unwrap();
        let d = job.room.dims;
        for k in 0..3 {
            assert!(d[k] >= ranges.dims_min[k] && d[k] <= ranges.dims_max[k]);
            assert!(job.array_center[k] >= 0.1 * d[k] - 1e-12);
            assert!(job.array_center[k] <= 0.9 * d[k] + 1e-12);
        }
        assert!(job.array_center[2] <= d[2] / 2.0 + 1e-12);
        assert!(job.room.beta > 0.0 && job.room.beta < 1.0);
        assert!(job.trajectory.max_oscillations() <= 2.0 + 1e-12);
        assert!((5.0..=30.0).contains(&job.snr_db));
        for i in 0..=800 {
            let p = job.trajectory.position(i as f64 * 0.01);
            assert!(job.room.contains(p, 0.0), "seed {seed}: {p:?} outside {d:?}");
            assert!(dist(p, job.array_center) >= 0.5 - 1e-9);
        }
    }
}

#[test]
fn sampling_is_deterministic_and_reports_exhaustion() {
    let ranges = SceneRanges::default();
    assert_eq!(sample_scene(42, &ranges).unwrap(), sample_scene(42, &ranges).unwrap());
    assert_ne!(sample_scene(42, &ranges).unwrap(), sample_scene(43, &ranges).unwrap());
    // A source that must stay 100 m from the array cannot fit in any room.
    let impossible = SceneRanges { min_source_distance: 100.0, max_attempts: 10, ..ranges };
    let err = sample_scene(7, &impossible).unwrap_err().to_string();
    assert!(err.contains("seed 7"), "{err}");
    assert!(sample_scene(1, &SceneRanges { t60: (1.0, 0.5), ..ranges }).is_err());
}

#[test]
fn job_toml_round_trip() {
    let job = sample_scene(9, &SceneRanges::default()).unwrap();
    let text = job.to_toml().unwrap();
    assert_eq!(SimJob::from_toml(&text, std::path::Path::new("job.toml")).unwrap(), job);
}

#[test]
fn anechoic_rir_is_a_single_direct_spike() {
    let room = RoomSpec::anechoic([6.0, 5.0, 3.0]).unwrap();
    let (src, mic) = ([4.0, 3.1, 2.2], [1.5, 2.0, 1.0]);
    let h = ism_rir(&room, src, mic, FS, C).unwrap();
    let d = dist(src, mic);
    let mut want = vec![0.0; h.len()];
    deposit(&mut want, d * FS / C, 1.0 / (4.0 * PI * d));
    for (a, b) in h.iter().zip(&want) {
        assert!((a - b).abs() < 1e-15);
    }
    // With an integer delay the spike is a single sample.
    let mic2 = [src[0] - 343.0 * 100.0 / FS, src[1], src[2]];
    let h = ism_rir(&room, src, mic2, FS, C).unwrap();
    let peak = h.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    assert_eq!(peak.0, 100);
    assert!((peak.1 - 1.0 / (4.0 * PI * 343.0 * 100.0 / FS)).abs() < 1e-12);
    assert!(h.iter().enumerate().all(|(i, v)| i == 100 || v.abs() < 1e-12));
}

#[test]
fn image_counts_by_order() {
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.5).unwrap();
    let imgs = image_sources(&room, [1.0, 1.5, 1.2], [3.0, 2.0, 2.0], 60.0);
    let count = |k| imgs.iter().filter(|i| i.reflections == k).count();
    assert_eq!(count(0), 1);
    assert_eq!(count(1), 6);
    assert_eq!(count(2), 18);
    // First-order images are the mirror images in the six walls.
    let first: Vec<[f64; 3]> = imgs.iter().filter(|i| i.reflections == 1).map(|i| i.position).collect();
    for p in [[-1.0, 1.5, 1.2], [9.0, 1.5, 1.2], [1.0, -1.5, 1.2], [1.0, 6.5, 1.2], [1.0, 1.5, -1.2], [1.0, 1.5, 4.8]] {
        assert!(first.iter().any(|q| dist(*q, p) < 1e-12), "{p:?}");
    }
}

#[test]
fn rir_rejects_invalid_geometry() {
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.5).unwrap();
    assert!(ism_rir(&room, [6.0, 1.0, 1.0], [1.0, 1.0, 1.0], FS, C).is_err());
    assert!(ism_rir(&room, [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], FS, C).is_err());
    assert!(RoomSpec::new([3.0, 3.0, 2.5], 0.01).is_err());
}

#[test]
fn energy_decay_matches_requested_t60() {
    let ranges = SceneRanges { t60: (0.2, 0.8), ..SceneRanges::default() };
    for seed in 0..6 {
        let job = sample_scene(100 + seed, &ranges).unwrap();
        let h = ism_rir(&job.room, job.trajectory.position(0.0), job.array_center, FS, C).unwrap();
        let t = measure_t60(&h, FS).unwrap();
        let ratio = t / job.room.t60;
        assert!((ratio - 1.0).abs() < 0.2, "seed {seed}: measured {t} for {}", job.room.t60);
    }
}

#[test]
fn measured_t60_of_an_exponential_decay() {
    let t60: f64 = 0.5;
    let k = 3.0 * 10f64.ln() / t60;
    let h: Vec<f64> = (0..(2.0 * FS) as usize).map(|i| (-k * i as f64 / FS).exp() * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    assert!((measure_t60(&h, FS).unwrap() - t60).abs() < 0.01);
}

#[test]
fn free_field_render_matches_delayed_attenuated_source() {
    let room = RoomSpec::anechoic([6.0, 5.0, 3.0]).unwrap();
    let (center, src) = ([2.0, 2.0, 1.2], [4.1, 3.3, 2.0]);
    let job = static_job(room, center, src, 2.0, f64::INFINITY);
    let array = MicArray::locata_like();
    let freqs = [150.0, 440.0, 1234.5, 2222.2, 3100.0, 3900.0];
    let s = |t: f64| freqs.iter().enumerate().map(|(k, f)| (2.0 * PI * f * t + k as f64).sin()).sum::<f64>();
    let x: Vec<f64> = (0..(2.0 * FS) as usize).map(|i| s(i as f64 / FS)).collect();
    let y = render_trajectory(&job, &array, &x, 3072).unwrap();
    for (m, p) in array.positions.iter().enumerate() {
        let mic = [center[0] + p[0], center[1] + p[1], center[2] + p[2]];
        let d = dist(src, mic);
        let (mut e, mut r) = (0.0, 0.0);
        for i in 2000..30000 {
            let want = s(i as f64 / FS - d / C) / (4.0 * PI * d);
            e += (y[m][i] - want).powi(2);
            r += want * want;
        }
        assert!((e / r).sqrt() < 1e-3, "mic {m}: {}", (e / r).sqrt());
    }
}

#[test]
fn rendered_snr_is_exact() {
    let room = RoomSpec::new([5.0, 4.0, 3.0], 0.3).unwrap();
    let job = static_job(room, [2.0, 2.0, 1.2], [3.5, 3.0, 2.0], 1.5, 30.0);
    let array = MicArray::locata_like();
    let x = source_signal(&job).unwrap();
    let clean = render_clean(&job, &array, &x, 3072).unwrap();
    let noisy = render_trajectory(&job, &array, &x, 3072).unwrap();
    let noise: Vec<Vec<f64>> = noisy.iter().zip(&clean).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u - v).collect()).collect();
    let snr = 10.0 * (mean_power(&clean) / mean_power(&noise)).log10();
    assert!((snr - 30.0).abs() < 0.1, "{snr}");
    assert_eq!(noisy, render_trajectory(&job, &array, &x, 3072).unwrap());
    assert!(render_trajectory(&job, &array, &vec![0.0; x.len()], 3072).is_err());
}

#[test]
fn crossfaded_static_render_equals_full_convolution() {
    let room = RoomSpec::new([4.0, 4.0, 3.0], 0.2).unwrap();
    let job = static_job(room, [2.0, 2.0, 1.0], [3.0, 3.1, 2.0], 0.5, f64::INFINITY);
    let array = MicArray::new(vec![[0.0, 0.0, 0.0], [0.05, 0.0, 0.0], [0.0, 0.05, 0.0], [0.0, 0.0, 0.05]], C, FS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = synth_source(&mut rng, 0.5, FS).unwrap();
    let y = render_clean(&job, &array, &x, 1000).unwrap();
    let h = ism_rir(&room, [3.0, 3.1, 2.0], [2.0, 2.0, 1.0], FS, C).unwrap();
    for i in (0..x.len()).step_by(97) {
        let want: f64 = (0..=i.min(h.len() - 1)).map(|k| h[k] * x[i - k]).sum();
        assert!((y[0][i] - want).abs() < 1e-9, "{i}");
    }
}

/// Nearest cell among those a map computes (vertex cells carry no power).
fn nearest_computed_cell(grid: &IcoGrid, u: [f64; 3]) -> usize {
    (0..grid.n_cells())
        .filter(|&c| !grid.is_vertex(c))
        .max_by(|&a, &b| {
            let (pa, pb) = (grid.coord(a), grid.coord(b));
            let da = pa[0] * u[0] + pa[1] * u[1] + pa[2] * u[2];
            let db = pb[0] * u[0] + pb[1] * u[1] + pb[2] * u[2];
            da.total_cmp(&db)
        })
        .unwrap()
}

fn tracking_rate(array: &MicArray, source: SourceSpec) -> (usize, usize) {
    let room = RoomSpec::anechoic([8.0, 7.0, 4.0]).unwrap();
    let center = [4.0, 3.5, 1.5];
    // A sweep around the array at 2-3 m.
    let traj = Trajectory {
        start: [1.2, 1.0, 2.5],
        end: [6.8, 1.2, 1.0],
        amplitude: [0.3, 0.5, 0.3],
        frequency: [0.1, 0.15, 0.2],
        phase: [0.0, 1.0, 2.0],
        duration: 10.0,
    };
    let job = SimJob { trajectory: traj, source, ..static_job(room, center, [0.0; 3], 10.0, 30.0) };
    let framing = FramingConfig::default();
    let data = simulate(&job, array, &framing).unwrap();
    let grid = IcoGrid::new(2).unwrap();
    let maps = compute_maps(&data.audio, array, &grid, &MapConfig::default()).unwrap();
    let (mut hits, mut total) = (0, 0);
    for t in 0..maps.n_frames() {
        if !maps.active[t] {
            continue;
        }
        total += 1;
        if map_argmax(&maps.maps[t], &grid) == nearest_computed_cell(&grid, data.gt[t]) {
            hits += 1;
        }
    }
    (hits, total)
}

#[test]
fn moving_anechoic_source_is_tracked_by_the_map_argmax() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("noise.wav");
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let noise: Vec<f64> = (0..(10.0 * FS) as usize).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect();
    icodoa::srp_phat::write_wav(&path, &[noise], FS as u32).unwrap();
    // Broadband source and an isotropic array, so neighbouring cells are not near-ties.
    let (hits, total) = tracking_rate(&icosahedral_array(), SourceSpec::Wav { path });
    assert!(total > 40);
    assert!(hits as f64 >= 0.95 * total as f64, "{hits} of {total}");
}

fn icosahedral_array() -> MicArray {
    let pos = icodoa::ico_grid::icosahedron_vertices().iter().map(|v| [0.06 * v[0], 0.06 * v[1], 0.06 * v[2]]).collect();
    MicArray::new(pos, C, FS).unwrap()
}

#[test]
fn synth_source_gaps_activity_and_determinism() {
    let mut active = 0;
    let mut frames = 0;
    let framing = FramingConfig::default();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, gaps) = synth_source_with_gaps(&mut rng, 20.0, FS).unwrap();
        assert_eq!(x.len(), 320_000);
        assert!((x.iter().fold(0.0f64, |m, v| m.max(v.abs())) - 1.0).abs() < 1e-12);
        let covered: f64 = gaps.iter().map(|(a, b)| b - a).sum();
        assert!((1.9..=6.0 + 1e-9).contains(&covered), "{covered}");
        for &(a, b) in &gaps {
            assert!(b - a >= 0.2 - 1e-9 && b - a <= 1.0 + 1e-9);
            let (i, j) = ((a * FS).round() as usize, (b * FS).round() as usize);
            assert!(x[i..j.min(x.len())].iter().all(|&v| v == 0.0));
        }
        let flags = source_activity(&x, &framing, VadConfig::default()).unwrap();
        active += flags.iter().filter(|&&f| f).count();
        frames += flags.len();
    }
    assert!(active as f64 >= 0.7 * frames as f64, "{active} of {frames}");
    let a = synth_source(&mut ChaCha8Rng::seed_from_u64(5), 3.0, FS).unwrap();
    let b = synth_source(&mut ChaCha8Rng::seed_from_u64(5), 3.0, FS).unwrap();
    assert_eq!(a, b);
    assert!(synth_source(&mut ChaCha8Rng::seed_from_u64(5), 0.0, FS).is_err());
}

#[test]
fn synth_source_is_band_limited() {
    let x = synth_source(&mut ChaCha8Rng::seed_from_u64(2), 4.0, FS).unwrap();
    let n = x.len();
    let tone = |f: f64| {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let w = 2.0 * PI * f * i as f64 / FS;
            re += v * w.cos();
            im += v * w.sin();
        }
        (re * re + im * im) / n as f64
    };
    let inband = (1..20).map(|k| tone(200.0 * k as f64)).sum::<f64>();
    let outband = tone(6000.0) + tone(7000.0) + tone(20.0);
    assert!(outband < 1e-3 * inband, "{outband} vs {inband}");
}

#[test]
fn ground_truth_examples() {
    let room = RoomSpec::anechoic([6.0, 6.0, 4.0]).unwrap();
    let framing = FramingConfig::default();
    let above = static_job(room, [3.0, 3.0, 1.0], [3.0, 3.0, 3.0], 5.0, 30.0);
    for u in ground_truth_doa(&above, &framing, 20).unwrap() {
        assert!((u[0]).abs() < 1e-15 && (u[1]).abs() < 1e-15 && (u[2] - 1.0).abs() < 1e-15);
    }
    let coincident = static_job(room, [3.0, 3.0, 1.0], [3.0, 3.0, 1.0], 5.0, 30.0);
    assert!(ground_truth_doa(&coincident, &framing, 3).is_err());

    let job = sample_scene(11, &SceneRanges::default()).unwrap();
    let gt = ground_truth_doa(&job, &framing, 100).unwrap();
    let tr = job.trajectory;
    for (t, u) in gt.iter().enumerate() {
        assert!(((u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() - 1.0).abs() < 1e-12);
        let time = (t * 3072 + 2048) as f64 / FS;
        let p: Vec<f64> = (0..3)
            .map(|k| {
                tr.start[k]
                    + (tr.end[k] - tr.start[k]) * time / tr.duration
                    + tr.amplitude[k] * (2.0 * PI * tr.frequency[k] * time + tr.phase[k]).sin()
                    - job.array_center[k]
            })
            .collect();
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        for k in 0..3 {
            assert!((u[k] - p[k] / r).abs() < 1e-12);
        }
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let info = DatasetInfo {
        seed: 4,
        n_traj: 2,
        ranges: SceneRanges { duration: 1.5, t60: (0.2, 0.3), dims_max: [5.0, 5.0, 3.0], ..SceneRanges::default() },
        k: 4096,
        hop: 3072,
        fft_len: 4096,
    };
    let array = MicArray::locata_like();
    let dirs = generate_dataset(dir.path(), &info, &array).unwrap();
    assert_eq!(list_trajectories(dir.path()).unwrap(), dirs);
    assert_eq!(read_dataset_info(dir.path()).unwrap(), info);
    let back = MicArray::from_csv(&dir.path().join(ARRAY_FILE), C, FS).unwrap();
    assert_eq!(back.positions.len(), 12);
    let t = read_trajectory(&dirs[0]).unwrap();
    assert_eq!(t.job, sample_scene(job_seed(4, 0), &info.ranges).unwrap());
    assert_eq!(t.audio.len(), 12);
    assert_eq!(t.audio[0].len(), 24000);
    assert_eq!(t.gt.len(), info.framing().frame_count(24000).unwrap());
    assert_eq!(t.active.len(), t.gt.len());
    let fresh = simulate(&t.job, &array, &info.framing()).unwrap();
    for (a, b) in fresh.audio.iter().flatten().zip(t.audio.iter().flatten()) {
        assert_eq!(*a as f32 as f64, *b);
    }
    for (a, b) in fresh.gt.iter().zip(&t.gt) {
        assert_eq!(a, b);
    }
}

#[test]
fn malformed_gt_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.csv");
    std::fs::write(&p, "frame,x,y,z,active\n0,1,0,0,2\n").unwrap();
    assert!(read_gt_csv(&p).is_err());
    std::fs::write(&p, "frame,x,y,z,active\n1,1,0,0,1\n").unwrap();
    assert!(read_gt_csv(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gaps_are_disjoint_and_inside(seed in any::<u64>(), duration in 0.5f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gaps = gap_intervals(&mut rng, duration);
        let mut last = 0.0;
        for (a, b) in gaps {
            prop_assert!(a >= last - 1e-12);
            prop_assert!(b <= duration + 1e-9);
            prop_assert!(b - a >= 0.2 - 1e-12 && b - a <= 1.0 + 1e-12);
            last = b;
        }
    }

    #[test]
    fn deposit_preserves_dc_gain(delay in 8.0f64..100.0) {
        let mut b = vec![0.0; 128];
        deposit(&mut b, delay, 1.0);
        let s: f64 = b.iter().sum();
        prop_assert!((s - 1.0).abs() < 2e-3, "{}", s);
    }
}
