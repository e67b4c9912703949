//! Decision-based noise attacks: salt-and-pepper ramp and blended uniform noise.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{input_rng, AttackError, AttackOutcome, AttackParam, Oracle, QueryCounter};
use crate::tensor::Tensor;

fn unchanged(x: &Tensor, queries: usize) -> AttackOutcome {
    AttackOutcome { x_adv: x.clone(), success: false, queries, param: AttackParam::Identity }
}

/// Flips a growing fraction p ∈ {1/steps, …, 1} of pixel locations to black or
/// white (all channels together). Locations come from one seeded permutation
/// and each location's colour is fixed up front, so the masks are nested: the
/// image at p contains every flip made at smaller p.
pub fn salt_pepper_attack<O: Oracle + ?Sized>(
    model: &O,
    x: &Tensor,
    label: usize,
    steps: usize,
    seed: u64,
) -> Result<AttackOutcome, AttackError> {
    if steps == 0 {
        return Err(AttackError::Param("salt-and-pepper needs steps >= 1".into()));
    }
    let oracle = QueryCounter::new(model);
    if oracle.label(x)? != label {
        return Ok(AttackOutcome {
            x_adv: x.clone(),
            success: true,
            queries: 1,
            param: AttackParam::NoiseFraction { p: 0.0, flipped: 0 },
        });
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let plane = h * w;
    let mut rng = input_rng(seed, 0);
    let mut order: Vec<usize> = (0..plane).collect();
    order.shuffle(&mut rng);
    let salt: Vec<bool> = (0..plane).map(|_| rng.gen_bool(0.5)).collect();

    let mut pixels = x.data().to_vec();
    let mut flipped = 0;
    for k in 1..=steps {
        let p = k as f32 / steps as f32;
        let target = ((k * plane) as f64 / steps as f64).round() as usize;
        for &loc in &order[flipped..target] {
            let v = if salt[loc] { 1.0 } else { 0.0 };
            for ch in 0..c {
                pixels[ch * plane + loc] = v;
            }
        }
        flipped = target;
        let cand = Tensor::new(x.shape().to_vec(), pixels.clone()).expect("same shape");
        if oracle.label(&cand)? != label {
            return Ok(AttackOutcome {
                x_adv: cand,
                success: true,
                queries: oracle.queries(),
                param: AttackParam::NoiseFraction { p, flipped },
            });
        }
    }
    Ok(unchanged(x, oracle.queries()))
}

/// Linear search along `directions` seeded uniform-noise images:
/// candidate = (1−α)·x + α·noise for α = 1/steps, …, 1. Directions are
/// searched in order; the smallest successful α wins, earlier direction on
/// ties. Once a direction succeeds, later directions only try smaller α.
pub fn blended_noise_attack<O: Oracle + ?Sized>(
    model: &O,
    x: &Tensor,
    label: usize,
    directions: usize,
    steps: usize,
    seed: u64,
) -> Result<AttackOutcome, AttackError> {
    if directions == 0 || steps == 0 {
        return Err(AttackError::Param("blended noise needs directions >= 1 and steps >= 1".into()));
    }
    let oracle = QueryCounter::new(model);
    if oracle.label(x)? != label {
        return Ok(AttackOutcome {
            x_adv: x.clone(),
            success: true,
            queries: 1,
            param: AttackParam::Blend { alpha: 0.0, direction: 0, l2: 0.0 },
        });
    }
    let mut rng = input_rng(seed, 0);
    let noises: Vec<Tensor> = (0..directions).map(|_| Tensor::from_fn(x.shape(), |_| rng.gen::<f32>())).collect();

    let mut best: Option<(usize, usize, Tensor)> = None; // (k, direction, candidate)
    for (d, noise) in noises.iter().enumerate() {
        let limit = best.as_ref().map_or(steps, |b| b.0 - 1);
        for k in 1..=limit {
            let alpha = k as f32 / steps as f32;
            let cand = blend(x, noise, alpha);
            if oracle.label(&cand)? != label {
                best = Some((k, d, cand));
                break;
            }
        }
    }
    Ok(match best {
        Some((k, direction, cand)) => {
            let l2 = l2_distance(x, &cand);
            AttackOutcome {
                x_adv: cand,
                success: true,
                queries: oracle.queries(),
                param: AttackParam::Blend { alpha: k as f32 / steps as f32, direction, l2 },
            }
        }
        None => unchanged(x, oracle.queries()),
    })
}

/// The `index`-th noise direction the blended attack draws for `seed`.
pub fn blend_direction(shape: &[usize], seed: u64, index: usize) -> Tensor {
    let mut rng = input_rng(seed, 0);
    let mut out = None;
    for _ in 0..=index {
        out = Some(Tensor::from_fn(shape, |_| rng.gen::<f32>()));
    }
    out.expect("index + 1 draws")
}

pub(crate) fn blend(x: &Tensor, noise: &Tensor, alpha: f32) -> Tensor {
    if alpha == 1.0 {
        return noise.clone();
    }
    x.zip_map(noise, |a, n| ((1.0 - alpha) * a + alpha * n).clamp(0.0, 1.0)).expect("same shape")
}

fn l2_distance(a: &Tensor, b: &Tensor) -> f32 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::super::test_oracles::*;
    use super::*;
    use proptest::prelude::*;

    fn flipped_count(x: &Tensor, adv: &Tensor) -> usize {
        let plane = x.shape()[1] * x.shape()[2];
        (0..plane).filter(|&i| x.data()[i] != adv.data()[i]).count()
    }

    #[test]
    fn misclassified_input_succeeds_at_zero() {
        let sp = salt_pepper_attack(&Brightness(0.5), &gray(0.8), 0, 10, 1).unwrap();
        assert!(sp.success);
        assert_eq!(sp.param, AttackParam::NoiseFraction { p: 0.0, flipped: 0 });
        assert_eq!(sp.x_adv, gray(0.8));
        let bl = blended_noise_attack(&Brightness(0.5), &gray(0.8), 0, 3, 10, 1).unwrap();
        assert!(bl.success && bl.queries == 1);
        assert!(matches!(bl.param, AttackParam::Blend { alpha, .. } if alpha == 0.0));
    }

    #[test]
    fn full_salt_pepper_is_black_and_white() {
        // threshold above any reachable mean: never fooled, ramp runs to p = 1
        let x = gray(0.9);
        let never = Brightness(-1.0);
        let out = salt_pepper_attack(&never, &x, 1, 4, 7).unwrap();
        assert!(!out.success);
        assert_eq!(out.queries, 5);
        assert_eq!(out.x_adv, x);

        // p = 1 on an oracle that flips only on a pure black/white image
        struct BinaryOnly;
        impl Oracle for BinaryOnly {
            fn logits(&self, x: &Tensor) -> Result<Tensor, crate::vit::ModelError> {
                let binary = x.data().iter().all(|&v| v == 0.0 || v == 1.0);
                Ok(Tensor::new(vec![2], vec![binary as u8 as f32, 0.5]).unwrap())
            }
        }
        let out = salt_pepper_attack(&BinaryOnly, &x, 1, 4, 7).unwrap();
        assert!(out.success);
        assert_eq!(out.param, AttackParam::NoiseFraction { p: 1.0, flipped: 64 });
        assert!(out.x_adv.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn salt_pepper_flips_whole_locations() {
        let x = gray(0.5);
        // fooled as soon as mean drops below 0.45 or rises: threshold trick via label 1 for bright
        let out = salt_pepper_attack(&Brightness(0.45), &x, 1, 16, 3).unwrap();
        if let AttackParam::NoiseFraction { flipped, .. } = out.param {
            assert_eq!(flipped_count(&x, &out.x_adv), flipped);
            let plane = 64;
            for loc in 0..plane {
                let v = out.x_adv.data()[loc];
                assert!((0..3).all(|ch| out.x_adv.data()[ch * plane + loc] == v));
            }
        }
        assert_eq!(out.success, out.verify(&Brightness(0.45), 1).unwrap());
    }

    #[test]
    fn blended_alpha_is_minimal_along_its_direction() {
        let x = gray(0.9);
        let o = Brightness(0.7);
        let out = blended_noise_attack(&o, &x, 1, 4, 20, 11).unwrap();
        assert!(out.success);
        let AttackParam::Blend { alpha, direction, l2 } = out.param else { panic!() };
        let noise = blend_direction(x.shape(), 11, direction);
        assert_eq!(blend(&x, &noise, alpha), out.x_adv);
        assert!(o.label(&blend(&x, &noise, alpha - 1.0 / 20.0)).unwrap() == 1);
        // no direction succeeds at a smaller α
        for d in 0..4 {
            let n = blend_direction(x.shape(), 11, d);
            assert_eq!(o.label(&blend(&x, &n, alpha - 1.0 / 20.0)).unwrap(), 1);
        }
        assert!((l2 - l2_distance(&x, &out.x_adv)).abs() < 1e-6);
    }

    #[test]
    fn alpha_one_is_pure_noise() {
        let n = blend_direction(&[3, 8, 8], 2, 0);
        assert_eq!(blend(&gray(0.1), &n, 1.0), n);
        assert_eq!(blend(&gray(0.9), &n, 1.0), n);
    }

    #[test]
    fn attacks_are_deterministic_and_reject_bad_params() {
        let o = Brightness(0.5);
        let a = salt_pepper_attack(&o, &gray(0.55), 1, 20, 4).unwrap();
        assert_eq!(a, salt_pepper_attack(&o, &gray(0.55), 1, 20, 4).unwrap());
        let b = blended_noise_attack(&o, &gray(0.55), 1, 3, 20, 4).unwrap();
        assert_eq!(b, blended_noise_attack(&o, &gray(0.55), 1, 3, 20, 4).unwrap());
        assert!(salt_pepper_attack(&o, &gray(0.5), 1, 0, 4).is_err());
        assert!(blended_noise_attack(&o, &gray(0.5), 1, 0, 3, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn finer_ramp_never_needs_more_noise(base in 0.05f32..0.95, thresh in 0.05f32..0.95, coarse in 1usize..12, seed in 0u64..1000) {
            let x = gray(base);
            let o = Brightness(thresh);
            let label = o.label(&x).unwrap();
            let c = salt_pepper_attack(&o, &x, label, coarse, seed).unwrap();
            let f = salt_pepper_attack(&o, &x, label, 2 * coarse, seed).unwrap();
            if let AttackParam::NoiseFraction { p: pc, .. } = c.param {
                let AttackParam::NoiseFraction { p: pf, .. } = f.param else { panic!("finer ramp failed where coarse succeeded") };
                prop_assert!(pf <= pc + 1e-6);
            }
            for out in [&c, &f] {
                prop_assert!(out.x_adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
                if out.success {
                    prop_assert!(out.verify(&o, label).unwrap());
                }
            }
        }
    }
}
