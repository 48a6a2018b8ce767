use climdiff::diffusion::{gaussian_like, q_sample, q_step, reverse_step, run_reverse, sample_batch, NoisePredictor};
use climdiff::schedule::NoiseSchedule;
use climdiff::{Field, Result};
use climdiff_autograd::rng::Rng;

fn field2x2(v: [f32; 4]) -> Field {
    Field::new(vec!["x".into()], 2, 2, v.to_vec()).unwrap()
}

/// Returns the noise that produced `x_t` from a known `x0`.
struct Oracle<'a> {
    x0: &'a [Field],
    s: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_noise(&self, _: &[Field], x_t: &[Field], t: &[usize]) -> Result<Vec<Field>> {
        x_t.iter()
            .zip(self.x0)
            .zip(t)
            .map(|((xt, x0), &t)| {
                let ab = self.s.lookup(t)?.alpha_bar;
                xt.with_data(
                    xt.data()
                        .iter()
                        .zip(x0.data())
                        .map(|(&a, &b)| ((a as f64 - ab.sqrt() * b as f64) / (1.0 - ab).sqrt()) as f32)
                        .collect(),
                )
            })
            .collect()
    }
}

#[test]
fn alpha_bar_matches_product_oracle() {
    for t in [1usize, 10, 100] {
        let s = NoiseSchedule::linear(t, 1e-4, 0.02).unwrap();
        let mut prod = 1.0f64;
        for i in 0..t {
            let beta = if t == 1 { 1e-4 } else { 1e-4 + (0.02 - 1e-4) * i as f64 / (t - 1) as f64 };
            prod *= 1.0 - beta;
            let got = s.alpha_bars()[i];
            assert!(((got - prod) / prod).abs() < 1e-12, "T={t} i={i}: {got} vs {prod}");
        }
    }
    let s = NoiseSchedule::default();
    let log_sum: f64 = s.betas().iter().map(|b| (1.0 - b).ln()).sum();
    assert!((s.alpha_bars()[99] - log_sum.exp()).abs() < 1e-12);
}

#[test]
fn q_sample_monte_carlo_moments() {
    let s = NoiseSchedule::default();
    let x0 = field2x2([1.0, -0.5, 2.0, 0.0]);
    let n = 10_000;
    let t = 60;
    let ab = s.lookup(t).unwrap().alpha_bar;
    let mut rng = Rng::stream(11, "test", 0);
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let e = gaussian_like(&x0, &mut rng).unwrap();
        let x = q_sample(&x0, t, &e, &s).unwrap();
        for (k, &v) in x.data().iter().enumerate() {
            sum[k] += v as f64;
            sq[k] += (v as f64).powi(2);
        }
    }
    for k in 0..4 {
        let mean = sum[k] / n as f64;
        let var = sq[k] / n as f64 - mean * mean;
        let want_var = 1.0 - ab;
        let se_mean = (want_var / n as f64).sqrt();
        let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - ab.sqrt() * x0.data()[k] as f64).abs() < 3.0 * se_mean);
        assert!((var - want_var).abs() < 3.0 * se_var);
    }
}

#[test]
fn q_step_vanishing_beta_is_identity() {
    let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
    let x = field2x2([1.0, 2.0, 3.0, 4.0]);
    let y = q_step(&x, 0, &s, &mut Rng::stream(0, "test", 0)).unwrap();
    for (a, b) in x.data().iter().zip(y.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn q_step_is_deterministic_per_seed() {
    let s = NoiseSchedule::default();
    let x = field2x2([1.0, 2.0, 3.0, 4.0]);
    let a = q_step(&x, 5, &s, &mut Rng::stream(3, "test", 0)).unwrap();
    let b = q_step(&x, 5, &s, &mut Rng::stream(3, "test", 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn oracle_sampler_recovers_x0_at_every_start() {
    let s = NoiseSchedule::default();
    let x0 = vec![field2x2([0.3, -1.2, 2.5, 0.0]), field2x2([-3.0, 1.0, 0.5, 0.25])];
    let cond = x0.clone();
    let oracle = Oracle { x0: &x0, s: &s };
    let mut rng = Rng::stream(5, "test", 0);
    for t in [0usize, 1, 37, 99] {
        let xt: Vec<Field> =
            x0.iter().map(|x| q_sample(x, t, &gaussian_like(x, &mut rng).unwrap(), &s).unwrap()).collect();
        let out = run_reverse(&oracle, &s, &cond, xt, t, None).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            for (a, b) in o.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "t={t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn single_step_schedule_inverts() {
    let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
    let x0 = vec![field2x2([1.0, -2.0, 0.5, 4.0])];
    let oracle = Oracle { x0: &x0, s: &s };
    let mut rngs = vec![Rng::stream(1, "sample", 0)];
    let out = sample_batch(&oracle, &s, &x0, &["x".to_string()], &mut rngs).unwrap();
    for (a, b) in out[0].data().iter().zip(x0[0].data()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn final_step_adds_no_noise() {
    let s = NoiseSchedule::default();
    let x = field2x2([1.0, 2.0, 3.0, 4.0]);
    let e = field2x2([0.0; 4]);
    let with = reverse_step(&x, &e, 0, &s, Some(&mut Rng::stream(0, "t", 0))).unwrap();
    let without = reverse_step(&x, &e, 0, &s, None).unwrap();
    assert_eq!(with, without);
    let a = s.lookup(0).unwrap().alpha;
    for (o, i) in without.data().iter().zip(x.data()) {
        assert!((*o as f64 - *i as f64 / a.sqrt()).abs() < 1e-6);
    }
    let noisy = reverse_step(&x, &e, 10, &s, Some(&mut Rng::stream(0, "t", 0))).unwrap();
    assert_ne!(noisy, reverse_step(&x, &e, 10, &s, None).unwrap());
}
