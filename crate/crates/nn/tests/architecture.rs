//! Full-size shapes and the locality of discriminator cells.
//!
//! Locality is probed on logits, which bounds the change in probability too.

use crossgan_nn::{Archive, PatchConfig, PatchDiscriminator, Tensor, UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, r: usize) -> Tensor<f32> {
    Tensor::from_fn(3, r, r, |_, _, _| rng.random::<f32>())
}

#[test]
fn generator_keeps_full_resolution() {
    let g = UNet::<f32>::new(UNetConfig::for_resolution(256), 1).unwrap();
    let x = random_image(&mut ChaCha8Rng::seed_from_u64(0), 256);
    let r = g.forward(&x, None).unwrap();
    assert_eq!(r.shape(), (3, 256, 256));
    assert!(r.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(g.forward(&x, None).unwrap(), r);
}

#[test]
fn same_seed_gives_identical_archives() {
    let pack = |seed| {
        let mut a = Archive::new(serde_json::Value::Null);
        a.push_params("g", &UNet::<f32>::new(UNetConfig::for_resolution(64).with_base_filters(8), seed).unwrap());
        a.push_params(
            "d",
            &PatchDiscriminator::<f32>::new(PatchConfig::for_resolution(64).with_base_filters(8), seed).unwrap(),
        );
        a.to_bytes()
    };
    assert_eq!(pack(3), pack(3));
    assert_ne!(pack(3), pack(4));
}

#[test]
fn discriminator_emits_thirty_by_thirty() {
    let d = PatchDiscriminator::<f32>::new(PatchConfig::for_resolution(256), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, u) = (random_image(&mut rng, 256), random_image(&mut rng, 256));
    let p = d.probabilities(&x, &u).unwrap();
    assert_eq!(p.shape(), (1, 30, 30));
    assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(d.probabilities(&x, &random_image(&mut rng, 128)).is_err());
}

/// Perturbs single pixels just outside and just inside the 70x70 window of
/// several cells, in both the condition and the candidate image.
#[test]
fn cells_see_only_their_patch() {
    let cfg = PatchConfig::for_resolution(256);
    assert_eq!(cfg.receptive_field(), 70);
    let d = PatchDiscriminator::<f32>::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, u) = (random_image(&mut rng, 256), random_image(&mut rng, 256));
    let base = d.logits(&x, &u).unwrap();
    let cells = [(5usize, 5usize), (10, 14), (20, 7), (29, 29)];
    for (i, j) in cells {
        let top = cfg.window_origin(i);
        let left = cfg.window_origin(j);
        let rf = cfg.receptive_field() as isize;
        let outside = [(top - 1, left + 30), (top + rf, left + 10), (top + 20, left - 1), (top + 40, left + rf)];
        let inside = [(top.max(0), left + 35), (top + 35, (left + rf - 1).min(255))];
        let probe = |(y, x0): (isize, isize), into_candidate: bool| -> Option<f32> {
            if !(0..256).contains(&y) || !(0..256).contains(&x0) {
                return None;
            }
            let (mut a, mut b) = (x.clone(), u.clone());
            let t = if into_candidate { &mut b } else { &mut a };
            let v = t.get(1, y as usize, x0 as usize);
            t.set(1, y as usize, x0 as usize, 1.0 - v);
            let p = d.logits(&a, &b).unwrap();
            Some((p.get(0, i, j) - base.get(0, i, j)).abs())
        };
        for &px in &outside {
            for cand in [false, true] {
                if let Some(delta) = probe(px, cand) {
                    assert!(delta < 1e-7, "cell ({i},{j}) moved by {delta} from pixel {px:?}");
                }
            }
        }
        for &px in &inside {
            let delta = probe(px, true).unwrap();
            assert!(delta > 0.0, "cell ({i},{j}) ignored pixel {px:?} inside its window");
        }
    }
}
