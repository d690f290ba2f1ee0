use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const ELEMENTWISE_TOL: f64 = 1e-6;
const COMPOSITE_TOL: f64 = 1e-4;

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

/// Runs `grad_check` of `sum(op(x) * r)` over 100 random inputs, with `r` a
/// fixed random weighting so every output coordinate matters.
fn check_many<F>(name: &str, shape: &[usize], scale: f64, tol: f64, op: F)
where
    F: for<'g> Fn(&'g Graph<f64>, Tensor<'g, f64>) -> Result<Tensor<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n: usize = shape.iter().product();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = randn(&mut rng, n, scale);
        let probe_seed: u64 = rng.random();
        let f = weighted(&op, probe_seed);
        let err = grad_check(f, shape, &x, 1e-5).unwrap();
        worst = worst.max(err);
    }
    assert!(worst < tol, "{name}: max relative error {worst:e} >= {tol:e}");
}

fn weighted<F>(
    op: &F,
    probe_seed: u64,
) -> impl for<'g> Fn(&'g Graph<f64>, Tensor<'g, f64>) -> Result<Tensor<'g, f64>> + '_
where
    F: for<'g> Fn(&'g Graph<f64>, Tensor<'g, f64>) -> Result<Tensor<'g, f64>>,
{
    move |g, t| {
        let y = op(g, t)?;
        let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
        let w = randn(&mut r, y.numel(), 1.0);
        let wt = g.constant(&y.shape(), w)?;
        Ok(y.mul(&wt)?.sum())
    }
}

#[test]
fn elementwise_unary_ops_pass_grad_check() {
    check_many("tanh", &[3, 4], 2.0, ELEMENTWISE_TOL, |_, x| Ok(x.tanh()));
    check_many("sigmoid", &[3, 4], 3.0, ELEMENTWISE_TOL, |_, x| Ok(x.sigmoid()));
    check_many("exp", &[3, 4], 2.0, ELEMENTWISE_TOL, |_, x| Ok(x.exp()));
    check_many("log", &[3, 4], 1.0, ELEMENTWISE_TOL, |_, x| Ok(x.abs().add_scalar(0.5).log()));
    check_many("softplus", &[3, 4], 3.0, ELEMENTWISE_TOL, |_, x| Ok(x.softplus()));
    check_many("square", &[3, 4], 2.0, ELEMENTWISE_TOL, |_, x| Ok(x.square()));
    check_many("sqrt", &[3, 4], 1.0, ELEMENTWISE_TOL, |_, x| Ok(x.square().add_scalar(0.3).sqrt()));
    check_many("sin_cos", &[3, 4], 3.0, ELEMENTWISE_TOL, |_, x| x.sin().add(&x.cos()));
    check_many("neg_affine", &[5], 1.0, ELEMENTWISE_TOL, |_, x| Ok(x.neg().affine(3.0, 1.0)));
    check_many("abs", &[6], 1.0, ELEMENTWISE_TOL, |_, x| Ok(x.abs()));
    check_many("clamp", &[8], 2.0, ELEMENTWISE_TOL, |_, x| Ok(x.clamp(-0.7, 0.9)));
}

#[test]
fn broadcast_binary_ops_pass_grad_check() {
    check_many("add_bcast", &[2, 3, 4], 1.0, ELEMENTWISE_TOL, |g, x| {
        let c = g.constant(&[3, 1], vec![0.5, -1.0, 2.0])?;
        x.add(&c)
    });
    check_many("mul_self_slices", &[2, 6], 1.0, ELEMENTWISE_TOL, |_, x| {
        let a = x.slice(1, 0, 3)?;
        let b = x.slice(1, 3, 3)?.slice(0, 0, 1)?; // [1, 3] broadcast over rows
        a.mul(&b)
    });
    check_many("div", &[2, 3], 1.0, ELEMENTWISE_TOL, |_, x| {
        let den = x.square().add_scalar(1.0);
        x.div(&den.sum())
    });
    check_many("sub_rank_mismatch", &[4, 3], 1.0, ELEMENTWISE_TOL, |_, x| {
        let row = x.sum_axis(0)?; // [3]
        x.sub(&row)
    });
}

#[test]
fn reductions_and_layout_ops_pass_grad_check() {
    check_many("sum_axis", &[2, 3, 4], 1.0, ELEMENTWISE_TOL, |_, x| x.sum_axis(1));
    check_many("max_axis", &[3, 5], 1.0, ELEMENTWISE_TOL, |_, x| x.max_axis(1));
    check_many("logsumexp", &[3, 5], 2.0, ELEMENTWISE_TOL, |_, x| x.logsumexp(1));
    check_many("softmax", &[2, 4, 3], 2.0, ELEMENTWISE_TOL, |_, x| x.softmax(1));
    check_many("log_softmax", &[3, 4], 2.0, ELEMENTWISE_TOL, |_, x| x.log_softmax(1));
    check_many("concat", &[2, 3], 1.0, ELEMENTWISE_TOL, |_, x| {
        Tensor::concat(&[x.tanh(), x.square(), x], 1)
    });
    check_many("transpose", &[2, 3, 4], 1.0, ELEMENTWISE_TOL, |_, x| x.transpose_last2());
    check_many("reshape_mean", &[2, 6], 1.0, ELEMENTWISE_TOL, |_, x| Ok(x.reshape(&[3, 4])?.tanh().mean()));
}

#[test]
fn linear_algebra_ops_pass_grad_check() {
    check_many("matmul", &[3, 4], 1.0, COMPOSITE_TOL, |g, x| {
        let w = g.constant(&[4, 2], vec![0.1, -0.4, 0.3, 0.8, -0.5, 0.2, 0.7, -0.9])?;
        x.matmul(&w)?.matmul(&x.slice(1, 0, 2)?.transpose_last2()?)
    });
    check_many("bmm", &[2, 3, 2], 1.0, COMPOSITE_TOL, |_, x| x.bmm(&x.transpose_last2()?));
    check_many("conv2d_input", &[2, 2, 4, 5], 1.0, COMPOSITE_TOL, |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = g.constant(&[3, 2, 3, 3], randn(&mut rng, 54, 0.5))?;
        let b = g.constant(&[3], vec![0.1, -0.2, 0.3])?;
        Ok(x.conv2d_3x3(&w, &b)?.tanh())
    });
    check_many("conv2d_weight", &[3, 2, 3, 3], 1.0, COMPOSITE_TOL, |g, w| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = g.constant(&[2, 2, 4, 4], randn(&mut rng, 64, 1.0))?;
        let b = g.variable(&[3], vec![0.1, -0.2, 0.3])?;
        x.conv2d_3x3(&w, &b)
    });
}

#[test]
fn spatial_ops_pass_grad_check() {
    // grid coordinates kept off the integer lattice by a random offset
    check_many("bilinear_grid", &[1, 3, 3, 2], 0.9, COMPOSITE_TOL, |g, grid| {
        let img: Vec<f64> = (0..2 * 6 * 7).map(|i| ((i * 37 % 11) as f64 * 0.3).sin()).collect();
        let img = g.constant(&[1, 2, 6, 7], img)?;
        img.bilinear_sample(&grid)
    });
    check_many("bilinear_image", &[1, 1, 5, 5], 1.0, COMPOSITE_TOL, |g, img| {
        let grid: Vec<f64> = (0..16 * 2).map(|i| ((i as f64) * 0.77).sin() * 1.1).collect();
        let grid = g.constant(&[1, 4, 4, 2], grid)?;
        img.bilinear_sample(&grid)
    });
    check_many("bezier", &[2, 5, 2], 1.0, COMPOSITE_TOL, |_, cp| cp.bezier(7));
    check_many("rasterize_points", &[1, 4, 2], 1.0, COMPOSITE_TOL, |g, p| {
        let pts = p.affine(3.0, 5.0);
        let sigma = g.constant(&[1], vec![1.7])?;
        pts.rasterize(&sigma, 9, 11, false)
    });
    check_many("rasterize_sigma", &[2], 0.5, COMPOSITE_TOL, |g, s| {
        let pts = g.constant(&[2, 3, 2], vec![2.2, 3.1, 4.5, 1.9, 6.3, 5.5, 1.0, 1.0, 3.3, 7.7, 2.2, 0.4])?;
        pts.rasterize(&s.add_scalar(1.5), 8, 8, false)
    });
    check_many("rasterize_literal", &[1, 3, 2], 1.0, COMPOSITE_TOL, |g, p| {
        let sigma = g.variable(&[1], vec![1.3])?;
        p.affine(2.0, 3.0).rasterize(&sigma, 6, 6, true)
    });
}

#[test]
fn spec_examples_forward() {
    let g = Graph::<f64>::new();
    assert_eq!(g.scalar(0.0).tanh().item(), 0.0);
    let sm = g.constant(&[3], vec![0.4; 3]).unwrap().softmax(0).unwrap().to_vec();
    for v in sm {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let eye = g.constant(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let m: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
    let mt = g.constant(&[3, 4], m.clone()).unwrap();
    assert_eq!(eye.matmul(&mt).unwrap().to_vec(), m);
}

#[test]
fn backward_of_sum_of_squares() {
    let g = Graph::<f64>::new();
    let x = g.variable(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
}

#[test]
fn backward_accumulates_across_calls() {
    let g = Graph::<f64>::new();
    let x = g.variable(&[2], vec![0.3, -1.2]).unwrap();
    let y = x.tanh().mul(&x).unwrap().sum();
    y.backward().unwrap();
    let once = x.grad().unwrap();
    y.backward().unwrap();
    let twice = x.grad().unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let g = Graph::<f64>::new();
    let x = g.variable(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(x.tanh().backward(), Err(TensorError::NonScalarRoot(_))));
}

#[test]
fn detach_stops_gradient() {
    let g = Graph::<f64>::new();
    let x = g.variable(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let d = x.detach();
    assert_eq!(d.to_vec(), x.to_vec());
    d.square().sum().backward().unwrap();
    assert!(x.grad().map_or(true, |v| v.iter().all(|&a| a == 0.0)));

    // loss = g(x) + f(detach(x)) with g = x^3, f = 5x^2 -> grad = 3x^2
    let g2 = Graph::<f64>::new();
    let x = g2.variable(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let cube = x.square().mul(&x).unwrap().sum();
    let f = x.detach().square().scale(5.0).sum();
    cube.add(&f).unwrap().backward().unwrap();
    let want: Vec<f64> = [0.5f64, -1.0, 2.0].iter().map(|v| 3.0 * v * v).collect();
    assert_eq!(x.grad().unwrap(), want);
}

#[test]
fn shape_errors_name_the_op() {
    let g = Graph::<f64>::new();
    let a = g.zeros(&[2, 3]);
    let b = g.zeros(&[4, 2]);
    match a.matmul(&b) {
        Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(a.add(&g.zeros(&[3, 2])), Err(TensorError::ShapeMismatch { op: "add", .. })));
}

#[test]
fn grad_check_linear_and_tanh() {
    let x = [0.3, -0.7, 1.1, 2.0];
    let lin = grad_check(|_, t| Ok(t.sum()), &[4], &x, 1e-5).unwrap();
    assert!(lin < 1e-9, "{lin}");
    let th = grad_check(|_, t| Ok(t.tanh().sum()), &[4], &x, 1e-5).unwrap();
    assert!(th < 1e-6, "{th}");
    assert!(grad_check(|_, t| Ok(t.log().sum()), &[4], &x, 1e-5).is_err());
}

#[test]
fn composite_random_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = randn(&mut rng, 6, 1.0);
        let err = grad_check(
            |g, t| {
                let w = g.constant(&[3, 2], vec![0.2, -0.5, 0.9, 0.4, -0.3, 0.7])?;
                let h = t.reshape(&[2, 3])?.matmul(&w)?.tanh();
                let s = h.softmax(1)?.mul(&h.exp())?;
                Ok(s.logsumexp(0)?.sum())
            },
            &[6],
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let g = Graph::<f64>::new();
        let x = g.variable(&[1, 1, 6, 6], (0..36).map(|i| (i as f64).sin()).collect()).unwrap();
        let w = g.variable(&[2, 1, 3, 3], (0..18).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let b = g.variable(&[2], vec![0.1, 0.2]).unwrap();
        x.conv2d_3x3(&w, &b).unwrap().tanh().sum().backward().unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn params_load_without_copy_and_collect_grads() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", &[2], vec![1.5, -2.0], ParamGroup::Rest);
    let g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, w);
    assert_eq!(a.id(), b.id());
    a.mul(&b).unwrap().sum().backward().unwrap();
    let grads = g.param_grads(&store);
    assert_eq!(grads.get(w), &[3.0, -4.0]);
}
