//! Central finite-difference checks of backprop through the attention and fusion blocks at f64.

use candle_core::{DType, Device, Tensor, Var};
use diffueraser::network::blocks::{CrossAttention, FusionProjection, TemporalAttention};
use diffueraser::network::{ParamGroup, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const MAX_REL: f64 = 1e-4;
const COORDS_PER_TENSOR: usize = 12;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Replaces every parameter (including zero-initialized projections) with random values.
fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng) {
    for v in store.vars_in(&ParamGroup::ALL) {
        v.set(&(randn(v.dims(), rng) * 0.5).unwrap()).unwrap();
    }
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn set_coord(v: &Var, k: usize, value: f64) {
    let mut data = values(v.as_tensor());
    data[k] = value;
    v.set(&Tensor::from_vec(data, v.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Checks d loss / d var for every var against central differences; returns the worst relative error.
fn check(vars: &[(String, Var)], loss: &dyn Fn() -> Tensor, rng: &mut ChaCha8Rng) -> f64 {
    let grads = loss().backward().unwrap();
    let mut worst: f64 = 0.0;
    for (name, v) in vars {
        let base = values(v.as_tensor());
        // an absent gradient is identically zero (e.g. key biases under softmax)
        let analytic = grads.get(v.as_tensor()).map(values).unwrap_or_else(|| vec![0.0; base.len()]);
        let n = base.len();
        let coords: Vec<usize> = if n <= COORDS_PER_TENSOR {
            (0..n).collect()
        } else {
            (0..COORDS_PER_TENSOR).map(|_| rng.gen_range(0..n)).collect()
        };
        let (mut num_sq, mut diff_sq, mut ana_sq) = (0.0, 0.0, 0.0);
        for &k in &coords {
            set_coord(v, k, base[k] + H);
            let plus = loss().to_scalar::<f64>().unwrap();
            set_coord(v, k, base[k] - H);
            let minus = loss().to_scalar::<f64>().unwrap();
            set_coord(v, k, base[k]);
            let numeric = (plus - minus) / (2.0 * H);
            num_sq += numeric * numeric;
            ana_sq += analytic[k] * analytic[k];
            diff_sq += (numeric - analytic[k]).powi(2);
        }
        let scale = num_sq.sqrt().max(ana_sq.sqrt());
        if scale < 1e-8 {
            assert!(diff_sq.sqrt() < 1e-8, "{name}: {diff_sq:e}");
            continue;
        }
        let rel = diff_sq.sqrt() / scale;
        assert!(rel <= MAX_REL, "{name}: relative error {rel:e}");
        worst = worst.max(rel);
    }
    worst
}

fn params(store: &ParamStore, group: ParamGroup) -> Vec<(String, Var)> {
    store
        .names()
        .filter(|n| ParamGroup::of(n) == Some(group))
        .map(|n| (n.to_string(), store.get(n).unwrap().clone()))
        .collect()
}

#[test]
fn temporal_attention_gradients() {
    for (seed, (f, c, h, w)) in [(0u64, (3, 4, 2, 3)), (1, (5, 6, 1, 2))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F64, seed);
        let block = TemporalAttention::new(&mut store.builder(&[ParamGroup::Motion]).pp("motion"), c, true).unwrap();
        randomize(&store, &mut rng);
        let x = Var::from_tensor(&randn(&[f, c, h, w], &mut rng)).unwrap();
        let probe = randn(&[f, c, h, w], &mut rng);
        let mut vars = params(&store, ParamGroup::Motion);
        vars.push(("input".into(), x.clone()));
        let loss = || (block.forward(x.as_tensor()).unwrap() * &probe).unwrap().sum_all().unwrap();
        check(&vars, &loss, &mut rng);
    }
}

#[test]
fn cross_attention_gradients() {
    for (seed, (f, c, h, w, l, d)) in [(2u64, (2, 4, 2, 2, 3, 5)), (3, (1, 8, 3, 2, 4, 3))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F64, seed);
        let block =
            CrossAttention::new(&mut store.builder(&[ParamGroup::Spatial]).pp("spatial"), c, d, 2).unwrap();
        randomize(&store, &mut rng);
        let x = Var::from_tensor(&randn(&[f, c, h, w], &mut rng)).unwrap();
        let ctx = Var::from_tensor(&randn(&[1, l, d], &mut rng)).unwrap();
        let probe = randn(&[f, c, h, w], &mut rng);
        let mut vars = params(&store, ParamGroup::Spatial);
        vars.push(("input".into(), x.clone()));
        vars.push(("context".into(), ctx.clone()));
        let loss = || {
            (block.forward(x.as_tensor(), ctx.as_tensor()).unwrap() * &probe)
                .unwrap()
                .sum_all()
                .unwrap()
        };
        check(&vars, &loss, &mut rng);
    }
}

#[test]
fn fusion_projection_gradients() {
    for (seed, (f, c, h, w)) in [(4u64, (2, 3, 2, 2)), (5, (1, 5, 3, 1))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(DType::F64, seed);
        let block = FusionProjection::new(&mut store.builder(&[ParamGroup::Fusion]).pp("fusion"), c).unwrap();
        randomize(&store, &mut rng);
        let hidden = Var::from_tensor(&randn(&[f, c, h, w], &mut rng)).unwrap();
        let branch = Var::from_tensor(&randn(&[f, c, h, w], &mut rng)).unwrap();
        let probe = randn(&[f, c, h, w], &mut rng);
        let mut vars = params(&store, ParamGroup::Fusion);
        vars.push(("hidden".into(), hidden.clone()));
        vars.push(("branch".into(), branch.clone()));
        // squared so the check also exercises the linear path's curvature
        let loss = || {
            let y = block.forward(hidden.as_tensor(), branch.as_tensor()).unwrap();
            (y.sqr().unwrap() * &probe).unwrap().sum_all().unwrap()
        };
        check(&vars, &loss, &mut rng);
    }
}
