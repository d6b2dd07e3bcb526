//! Flow solver checks against scenes with known motion.

use crossgan_core::data::{FlowImage, Frame};
use crossgan_core::flow::{compute_flow, motion_mask, FlowConfig};
use crossgan_core::synthetic::{background, generate_normal_video, SceneSpec};
use crossgan_nn::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn textured(size: usize, shift: f64) -> Frame {
    let spec = SceneSpec {
        resolution: size + 16,
        ..SceneSpec::default()
    };
    let bg = background(&spec);
    let data = (0..3)
        .flat_map(|c| {
            let plane = &bg[c];
            (0..size * size).map(move |i| {
                let (y, x) = (i / size, i % size);
                // Sample at x - shift so content moves right by `shift`.
                let sx = x as f64 + 8.0 - shift;
                let x0 = sx.floor() as usize;
                let f = sx - x0 as f64;
                let row = (y + 8) * (size + 16);
                (plane[row + x0] * (1.0 - f) + plane[row + x0 + 1] * f) as f32
            })
        })
        .collect();
    Frame::new("v", 0, Tensor::from_vec(3, size, size, data).unwrap()).unwrap()
}

fn next(mut f: Frame) -> Frame {
    f.index += 1;
    f
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn identical_frames_have_no_flow() {
    let a = textured(64, 0.0);
    let o = compute_flow(&a, &next(a.clone()), &FlowConfig::default()).unwrap();
    let peak = o.raw_u.iter().chain(&o.raw_v).fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(peak < 0.05, "peak {peak}");
}

#[test]
fn recovers_known_translation() {
    let a = textured(64, 0.0);
    let b = next(textured(64, 2.0));
    let o = compute_flow(&a, &b, &FlowConfig::default()).unwrap();
    let interior = |p: &[f32]| -> Vec<f32> {
        (8..56).flat_map(|y| (8..56).map(move |x| y * 64 + x)).map(|i| p[i]).collect()
    };
    let mu = median(interior(&o.raw_u));
    let mv = median(interior(&o.raw_v));
    eprintln!("median u {mu} v {mv}");
    assert!((1.5..=2.5).contains(&mu), "median u {mu}");
    assert!((-0.5..=0.5).contains(&mv), "median v {mv}");
}

#[test]
fn motion_support_stays_near_moving_square() {
    let size = 64;
    let bg = textured(size, 0.0);
    let paint = |x0: usize, index: usize| {
        let mut f = bg.clone();
        for c in 0..3 {
            for y in 24..36 {
                for x in x0..x0 + 12 {
                    let (dx, dy) = ((x - x0) as f32 - 5.5, y as f32 - 29.5);
            let v = 0.95 - 0.6 * (dx * dx + dy * dy) / 61.0;
                    f.pixels.set(c, y, x, if c == 0 { v } else { 0.1 });
                }
            }
        }
        f.index = index;
        f
    };
    let (a, b) = (paint(20, 0), paint(22, 1));
    let cfg = FlowConfig::default();
    let o = compute_flow(&a, &b, &cfg).unwrap();
    let mask = motion_mask(&o, cfg.motion_epsilon);
    let margin = 4;
    let inside = |i: usize| {
        let (y, x) = (i / size, i % size);
        (24 - margin..36 + margin).contains(&y) && (20 - margin..34 + margin).contains(&x)
    };
    let moving: Vec<usize> = (0..size * size).filter(|&i| mask.data[i]).collect();
    let near = moving.iter().filter(|&&i| inside(i)).count();
    eprintln!("{near} of {} moving pixels near the square", moving.len());
    assert!(!moving.is_empty());
    assert!(near as f64 >= 0.9 * moving.len() as f64);
}

#[test]
fn agent_centres_move_at_normal_speed() {
    let spec = SceneSpec {
        frames_per_video: 12,
        ..SceneSpec::default()
    };
    let v = generate_normal_video(&spec, 0, "v").unwrap();
    let cfg = FlowConfig::default();
    let mut checked = 0;
    for t in 4..10 {
        let o = compute_flow(&v.frames[t], &v.frames[t + 1], &cfg).unwrap();
        let mag = o.magnitude();
        for track in &v.agent_tracks {
            let (x, y) = track[t];
            let (px, py) = (x.floor() as usize, y.floor() as usize);
            let m = mag[py * spec.resolution + px] as f64;
            eprintln!("t{t} agent at ({x:.1},{y:.1}) magnitude {m:.3}");
            checked += 1;
            assert!((m - spec.normal_speed).abs() <= 0.3 * spec.normal_speed, "magnitude {m}");
        }
    }
    assert!(checked > 0);
}

#[test]
fn flow_is_deterministic() {
    let a = textured(32, 0.0);
    let b = next(textured(32, 1.0));
    let cfg = FlowConfig::default();
    assert_eq!(compute_flow(&a, &b, &cfg).unwrap(), compute_flow(&a, &b, &cfg).unwrap());
}

fn random_flow(seed: u64, n: usize) -> FlowImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |_| if rng.random::<f64>() < 0.3 { 0.0 } else { rng.random::<f32>() * 0.6 - 0.3 };
    let u = (0..n * n).map(&mut draw).collect();
    let v = (0..n * n).map(&mut draw).collect();
    FlowImage::from_raw("v", 0, n, n, u, v, 16.0).unwrap()
}

#[test]
fn mask_count_matches_direct_scan() {
    for seed in 0..20 {
        let o = random_flow(seed, 16);
        let direct = o
            .raw_u
            .iter()
            .zip(&o.raw_v)
            .filter(|(u, v)| ((**u as f64).powi(2) + (**v as f64).powi(2)).sqrt() > 0.1)
            .count();
        assert_eq!(motion_mask(&o, 0.1).count(), direct);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_shrinks_as_epsilon_grows(seed in any::<u64>(), e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let o = random_flow(seed, 12);
        let small = motion_mask(&o, hi);
        let large = motion_mask(&o, lo);
        prop_assert!(small.data.iter().zip(&large.data).all(|(s, l)| !s || *l));
    }

    #[test]
    fn self_flow_vanishes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Frame::new("v", 0, Tensor::from_fn(3, 16, 16, |_, _, _| rng.random::<f32>())).unwrap();
        let o = compute_flow(&a, &next(a.clone()), &FlowConfig::default()).unwrap();
        prop_assert!(o.magnitude().iter().all(|&m| m < 0.05));
    }
}

