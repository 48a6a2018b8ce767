use climdiff_autograd::gradcheck::{check_gradients, relative_error, GradCheckOptions};
use climdiff_autograd::layers::{Conv2d, GroupNorm, Init, Linear};
use climdiff_autograd::rng::Rng;
use climdiff_autograd::{Graph, ParamStore, Tensor};

fn random(shape: Vec<usize>, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Fixed random projection turning any output into a smooth scalar.
fn project(g: &mut Graph<f64>, y: climdiff_autograd::Var, seed: u64) -> climdiff_autograd::Var {
    let shape = g.value(y).shape().to_vec();
    let mut rng = Rng::stream(seed, "projection", 0);
    let w = g.input(random(shape, &mut rng));
    let prod = g.mul(y, w).unwrap();
    g.sum(prod)
}

fn assert_passes(
    store: &mut ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> climdiff_autograd::Result<climdiff_autograd::Var>,
) {
    let report = check_gradients(store, f, &GradCheckOptions::default()).unwrap();
    for p in &report.params {
        assert!(p.max_rel_error < 1e-6, "{}: {}", p.name, p.max_rel_error);
    }
}

#[test]
fn conv2d_stride_one_and_two() {
    for stride in [1, 2] {
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let x = store.add("x", random(vec![2, 3, 6, 6], &mut rng)).unwrap();
        let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, stride, Init::HeNormal, &mut rng).unwrap();
        let b = store.get(conv.bias).value.len();
        store.get_mut(conv.bias).value = random(vec![b], &mut rng);
        assert_passes(&mut store, |g, s| {
            let xv = g.param(s, x);
            let y = conv.forward(g, s, xv)?;
            Ok(project(g, y, 11))
        });
    }
}

#[test]
fn pointwise_conv() {
    let mut rng = Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let x = store.add("x", random(vec![2, 4, 3, 5], &mut rng)).unwrap();
    let conv = Conv2d::new(&mut store, "skip", 4, 2, 1, 1, Init::HeNormal, &mut rng).unwrap();
    assert_passes(&mut store, |g, s| {
        let xv = g.param(s, x);
        let y = conv.forward(g, s, xv)?;
        Ok(project(g, y, 12))
    });
}

#[test]
fn linear_layer() {
    let mut rng = Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let x = store.add("x", random(vec![3, 5], &mut rng)).unwrap();
    let lin = Linear::new(&mut store, "lin", 5, 4, &mut rng).unwrap();
    assert_passes(&mut store, |g, s| {
        let xv = g.param(s, x);
        let y = lin.forward(g, s, xv)?;
        Ok(project(g, y, 13))
    });
}

#[test]
fn group_norm_layer() {
    let mut rng = Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let x = store.add("x", random(vec![2, 8, 3, 3], &mut rng)).unwrap();
    let gn = GroupNorm::new(&mut store, "gn", 8).unwrap();
    store.get_mut(gn.gamma).value = random(vec![8], &mut rng);
    store.get_mut(gn.beta).value = random(vec![8], &mut rng);
    assert_passes(&mut store, |g, s| {
        let xv = g.param(s, x);
        let y = gn.forward(g, s, xv)?;
        Ok(project(g, y, 14))
    });
}

#[test]
fn elementwise_and_structural_ops() {
    let mut rng = Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let a = store.add("a", random(vec![2, 2, 3, 3], &mut rng)).unwrap();
    let b = store.add("b", random(vec![2, 2, 3, 3], &mut rng)).unwrap();
    let v = store.add("v", random(vec![2, 2], &mut rng)).unwrap();
    assert_passes(&mut store, |g, s| {
        let av = g.param(s, a);
        let bv = g.param(s, b);
        let vv = g.param(s, v);
        let sum = g.add(av, bv)?;
        let prod = g.mul(sum, av)?;
        let act = g.silu(prod);
        let shifted = g.add_channel(act, vv)?;
        let cat = g.concat_channels(shifted, bv)?;
        let up = g.upsample2x(cat)?;
        let scaled = g.scale(up, 0.7);
        Ok(project(g, scaled, 15))
    });
}

#[test]
fn losses_away_from_kink() {
    let mut rng = Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let p = store.add("p", random(vec![4, 5], &mut rng)).unwrap();
    let target = random(vec![4, 5], &mut rng);
    // keep every |p - t| well clear of zero so the L1 kink is not straddled
    for (pv, tv) in store.get_mut(p).value.data_mut().iter_mut().zip(target.data()) {
        if (*pv - tv).abs() < 0.05 {
            *pv += 0.1;
        }
    }
    let t1 = target.clone();
    assert_passes(&mut store, move |g, s| {
        let pv = g.param(s, p);
        let tv = g.input(t1.clone());
        g.l1_loss(pv, tv)
    });
    assert_passes(&mut store, move |g, s| {
        let pv = g.param(s, p);
        let tv = g.input(target.clone());
        g.mse_loss(pv, tv)
    });
}

/// Two conv layers trained in f32, checked against finite differences of the
/// same network evaluated in f64.
#[test]
fn two_layer_conv_net_f32_against_f64_differences() {
    let mut rng = Rng::seed_from_u64(7);
    let mut store32 = ParamStore::<f32>::new();
    let c1 = Conv2d::new(&mut store32, "c1", 2, 4, 3, 1, Init::HeNormal, &mut rng).unwrap();
    let c2 = Conv2d::new(&mut store32, "c2", 4, 1, 3, 1, Init::HeNormal, &mut rng).unwrap();
    let x: Tensor<f64> = random(vec![2, 2, 5, 5], &mut rng);
    let target: Tensor<f64> = random(vec![2, 1, 5, 5], &mut rng);

    fn net<T: climdiff_autograd::Real>(
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c1: &Conv2d,
        c2: &Conv2d,
        x: &Tensor<f64>,
        target: &Tensor<f64>,
    ) -> climdiff_autograd::Var {
        let xv = g.input(x.cast());
        let h = c1.forward(g, s, xv).unwrap();
        let h = g.silu(h);
        let y = c2.forward(g, s, h).unwrap();
        let t = g.input(target.cast());
        g.mse_loss(y, t).unwrap()
    }

    let mut g = Graph::new();
    let loss = net(&mut g, &store32, &c1, &c2, &x, &target);
    g.backward(loss, &mut store32).unwrap();

    let mut store64 = ParamStore::<f64>::new();
    for p in store32.iter() {
        store64.add(p.name.clone(), p.value.cast()).unwrap();
    }
    let mut worst = 0.0f64;
    for pi in 0..store32.len() {
        let id = store64.id(&store32.iter().nth(pi).unwrap().name).unwrap();
        for i in 0..store64.get(id).value.len() {
            let orig = store64.get(id).value.data()[i];
            let h = 1e-6;
            store64.get_mut(id).value.data_mut()[i] = orig + h;
            let mut g = Graph::new();
            let lp = net(&mut g, &store64, &c1, &c2, &x, &target);
            let plus = g.value(lp).data()[0];
            store64.get_mut(id).value.data_mut()[i] = orig - h;
            let mut g = Graph::new();
            let lm = net(&mut g, &store64, &c1, &c2, &x, &target);
            let minus = g.value(lm).data()[0];
            store64.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store32.iter().nth(pi).unwrap().grad.data()[i] as f64;
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    assert!(worst < 1e-3, "max relative error {worst}");
}
