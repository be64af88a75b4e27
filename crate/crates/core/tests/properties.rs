use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use volsynth::diffusion::{eps_preconditioning, DiffusionSchedule};
use volsynth::rng;
use volsynth::volume::{View, Volume};

fn sched() -> DiffusionSchedule {
    DiffusionSchedule::linear(100, 1e-3, 0.05).unwrap()
}

proptest! {
    #[test]
    fn view_slices_reassemble_the_volume(d in 1usize..6, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let data: Vec<u32> = (0..d * h * w).map(|i| (i as u64 ^ seed) as u32).collect();
        let v = Volume::new([d, h, w], data).unwrap();
        for view in View::ALL {
            let back = Volume::from_slices(view, [d, h, w], &v.slices(view)).unwrap();
            prop_assert_eq!(&back, &v);
        }
    }
}

#[test]
fn preconditioning_matches_empirical_regression_of_noise_on_input() {
    let s = sched();
    let sigma = 0.5;
    let mut r = rng::rng(3);
    for t in [1, 10, 40, 100] {
        let ab = s.alpha_bar(t);
        let (mut exy, mut exx, mut eyy) = (0.0, 0.0, 0.0);
        let n = 200_000;
        for _ in 0..n {
            let x0 = if r.gen::<bool>() { sigma } else { -sigma };
            let e: f64 = StandardNormal.sample(&mut r);
            let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
            exy += xt * e;
            exx += xt * xt;
            eyy += e * e;
        }
        let slope = exy / exx;
        let resid = (eyy - exy * exy / exx) / n as f64;
        let (skip, out) = eps_preconditioning(&s, t, sigma);
        assert!((slope - skip).abs() < 0.01, "t {t}: slope {slope} vs {skip}");
        assert!((resid.sqrt() - out).abs() < 0.01, "t {t}: residual {} vs {out}", resid.sqrt());
    }
}
