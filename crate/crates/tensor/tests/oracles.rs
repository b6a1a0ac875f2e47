use hetfuse_tensor::kernels::adaptive_max_pool_hw;
use hetfuse_tensor::{conv_backward, conv_forward, ConvGeometry, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Cross-correlation straight from the definition, zero outside the input.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: Option<&Tensor<f64>>, geo: ConvGeometry) -> Tensor<f64> {
    let [b, cin, h, wd, d] = x.shape();
    let [cout, _, kh, kw, kd] = w.shape();
    let out = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    let ho = out(h, kh, geo.stride[0], geo.padding[0]);
    let wo = out(wd, kw, geo.stride[1], geo.padding[1]);
    let dout = out(d, kd, geo.stride[2], geo.padding[2]);
    let src = |o: usize, t: usize, a: usize| (o * geo.stride[a] + t).checked_sub(geo.padding[a]);
    Tensor::from_fn([b, cout, ho, wo, dout], |[n, co, i, j, l]| {
        let mut acc = bias.map_or(0.0, |bv| bv.at([0, co, 0, 0, 0]));
        for ci in 0..cin {
            for a in 0..kh {
                for c in 0..kw {
                    for e in 0..kd {
                        let (Some(y), Some(z), Some(q)) = (src(i, a, 0), src(j, c, 1), src(l, e, 2)) else { continue };
                        if y < h && z < wd && q < d {
                            acc += x.at([n, ci, y, z, q]) * w.at([co, ci, a, c, e]);
                        }
                    }
                }
            }
        }
        acc
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn geometry() -> impl Strategy<Value = ConvGeometry> {
    (prop::array::uniform3(1usize..=3), prop::array::uniform3(1usize..=2), prop::array::uniform3(0usize..=2)).prop_map(
        |(kernel, stride, pad)| ConvGeometry { kernel, stride, padding: [0, 1, 2].map(|a| pad[a].min(kernel[a] - 1)) },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_sum(
        geo in geometry(),
        dims in prop::array::uniform3(3usize..=6),
        (b, cin, cout) in (1usize..=2, 1usize..=3, 1usize..=3),
        with_bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([b, cin, dims[0], dims[1], dims[2]], &mut rng);
        let [kh, kw, kd] = geo.kernel;
        let w = random([cout, cin, kh, kw, kd], &mut rng);
        let bias = random([1, cout, 1, 1, 1], &mut rng);
        let bias = with_bias.then_some(&bias);
        let fast = conv_forward(&x, &w, bias, geo);
        let slow = naive_conv(&x, &w, bias, geo);
        prop_assert_eq!(fast.shape(), slow.shape());
        prop_assert!(fast.max_abs_diff(&slow) < 1e-12);
    }

    /// Convolution is bilinear, so its gradients are the adjoints:
    /// <conv(x, w), g> = <x, dx> = <w, dw>, and db sums g per channel.
    #[test]
    fn conv_backward_is_the_adjoint(
        geo in geometry(),
        dims in prop::array::uniform3(3usize..=6),
        (b, cin, cout) in (1usize..=2, 1usize..=3, 1usize..=3),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([b, cin, dims[0], dims[1], dims[2]], &mut rng);
        let [kh, kw, kd] = geo.kernel;
        let w = random([cout, cin, kh, kw, kd], &mut rng);
        let y = naive_conv(&x, &w, None, geo);
        let g = random(y.shape(), &mut rng);
        let (dx, dw, db) = conv_backward(&x, &w, geo, &g, true);
        let dx = dx.expect("dx requested");
        let lhs = dot(&y, &g);
        prop_assert!((lhs - dot(&x, &dx)).abs() < 1e-10 * (1.0 + lhs.abs()));
        prop_assert!((lhs - dot(&w, &dw)).abs() < 1e-10 * (1.0 + lhs.abs()));
        let [_, _, ho, wo, dout] = g.shape();
        for co in 0..cout {
            let mut s = 0.0;
            for n in 0..b { for i in 0..ho { for j in 0..wo { for l in 0..dout { s += g.at([n, co, i, j, l]); } } } }
            prop_assert!((db.at([0, co, 0, 0, 0]) - s).abs() < 1e-12);
        }
        let (none, dw2, _) = conv_backward(&x, &w, geo, &g, false);
        prop_assert!(none.is_none());
        prop_assert_eq!(dw2.data(), dw.data());
    }

    /// Every output is the maximum over the rows and columns whose unit cells
    /// overlap its share `[i·n/m, (i+1)·n/m)` of the axis.
    #[test]
    fn adaptive_pool_takes_the_max_of_overlapping_cells(
        (h, th) in (1usize..=9).prop_flat_map(|h| (Just(h), 1..=h)),
        (w, tw) in (1usize..=9).prop_flat_map(|w| (Just(w), 1..=w)),
        d in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random([2, 2, h, w, d], &mut rng);
        let (y, arg) = adaptive_max_pool_hw(&x, th, tw);
        prop_assert_eq!(y.shape(), [2, 2, th, tw, d]);
        let overlaps = |cell: usize, i: usize, n: usize, m: usize| {
            let (lo, hi) = (i as f64 * n as f64 / m as f64, (i + 1) as f64 * n as f64 / m as f64);
            (cell as f64) < hi && (cell + 1) as f64 > lo
        };
        for b in 0..2 { for c in 0..2 { for i in 0..th { for j in 0..tw { for l in 0..d {
            let mut best = f64::NEG_INFINITY;
            for r in (0..h).filter(|&r| overlaps(r, i, h, th)) {
                for s in (0..w).filter(|&s| overlaps(s, j, w, tw)) {
                    best = best.max(x.at([b, c, r, s, l]));
                }
            }
            let out = y.at([b, c, i, j, l]);
            prop_assert_eq!(out, best);
            prop_assert_eq!(x.data()[arg[y.offset([b, c, i, j, l])]], out);
        } } } } }
    }
}

#[test]
fn pooling_to_the_same_size_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random([1, 3, 5, 4, 2], &mut rng);
    let (y, _) = adaptive_max_pool_hw(&x, 5, 4);
    assert_eq!(y.data(), x.data());
}

#[test]
fn same_padding_keeps_spatial_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random([1, 2, 7, 6, 5], &mut rng);
    for k in [[1, 1, 1], [3, 3, 1], [3, 3, 3], [5, 3, 3]] {
        let w = random([4, 2, k[0], k[1], k[2]], &mut rng);
        assert_eq!(conv_forward(&x, &w, None, ConvGeometry::same(k)).shape(), [1, 4, 7, 6, 5]);
    }
}
