use gaei_core::attention::{agca_forward, channel_aggregate, spatial_aggregate, SpatialAttentionWeights};
use gaei_core::tensor::{RngStream, Tensor4};
use proptest::prelude::*;

fn random(dims: [usize; 4], rng: &mut RngStream) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.uniform_range(-1.0, 1.0))
}

fn random_weights(c: usize, rng: &mut RngStream) -> SpatialAttentionWeights {
    let d = [c, c, 1, 1];
    SpatialAttentionWeights::from_kernels(random(d, rng), random(d, rng), random(d, rng), random(d, rng)).unwrap()
}

/// `W · x_p` for the 1×1 kernel `W` at flattened position `p`.
fn project(w: &Tensor4, x: &Tensor4, p: usize) -> Vec<f64> {
    let c = x.channels();
    (0..c)
        .map(|o| (0..c).map(|i| w.get(o, i, 0, 0) * x.plane_of(0, i)[p]).sum())
        .collect()
}

fn naive_spatial(x: &Tensor4, w: &SpatialAttentionWeights) -> Tensor4 {
    let c = x.channels();
    let np = x.plane();
    let q: Vec<Vec<f64>> = (0..np).map(|p| project(&w.query.value, x, p)).collect();
    let k: Vec<Vec<f64>> = (0..np).map(|p| project(&w.key.value, x, p)).collect();
    let v: Vec<Vec<f64>> = (0..np).map(|p| project(&w.value.value, x, p)).collect();
    let mut out = x.clone();
    for i in 0..np {
        let mut agg = vec![0.0; c];
        for j in 0..np {
            let omega: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / np as f64;
            for ch in 0..c {
                agg[ch] += omega * v[j][ch];
            }
        }
        for o in 0..c {
            let z: f64 = (0..c).map(|ch| w.output.value.get(o, ch, 0, 0) * agg[ch]).sum();
            out.plane_of_mut(0, o)[i] += z;
        }
    }
    out
}

fn naive_channel(x: &Tensor4) -> Tensor4 {
    let c = x.channels();
    let np = x.plane() as f64;
    let mut out = x.clone();
    for i in 0..c {
        for j in 0..c {
            let omega: f64 = x.plane_of(0, i).iter().zip(x.plane_of(0, j)).map(|(a, b)| a * b).sum::<f64>() / np;
            for p in 0..x.plane() {
                out.plane_of_mut(0, i)[p] += omega * x.plane_of(0, j)[p];
            }
        }
    }
    out
}

fn assert_close(a: &Tensor4, b: &Tensor4, tol: f64) {
    assert_eq!(a.dims(), b.dims());
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() <= tol * q.abs().max(1.0), "{p} vs {q}");
    }
}

#[test]
fn spatial_matches_naive_double_loop() {
    let mut rng = RngStream::new(21, 0);
    let x = random([1, 4, 6, 6], &mut rng);
    let w = random_weights(4, &mut rng);
    assert_close(&spatial_aggregate(&x, &w).unwrap(), &naive_spatial(&x, &w), 1e-10);
}

#[test]
fn channel_matches_naive_double_loop() {
    let mut rng = RngStream::new(22, 0);
    let x = random([1, 5, 4, 4], &mut rng);
    assert_close(&channel_aggregate(&x).unwrap(), &naive_channel(&x), 1e-10);
}

#[test]
fn fused_output_recomposes_branch_deltas() {
    let mut rng = RngStream::new(23, 0);
    let x = random([2, 3, 4, 5], &mut rng);
    let w = random_weights(3, &mut rng);
    let ds = spatial_aggregate(&x, &w).unwrap().sub(&x).unwrap();
    let dc = channel_aggregate(&x).unwrap().sub(&x).unwrap();
    let expect = x.add(&ds).unwrap().add(&dc).unwrap();
    assert_close(&agca_forward(&x, &w).unwrap(), &expect, 1e-12);
}

#[test]
fn batch_samples_are_independent() {
    let mut rng = RngStream::new(24, 0);
    let x = random([3, 2, 3, 3], &mut rng);
    let w = random_weights(2, &mut rng);
    let whole = agca_forward(&x, &w).unwrap();
    for n in 0..3 {
        let single = agca_forward(&x.sample_tensor(n), &w).unwrap();
        assert_eq!(single.data(), whole.sample(n));
    }
}

#[test]
fn channel_branch_homogeneity() {
    // z(λx) = λx + λ³·(z(x) − x)
    let mut rng = RngStream::new(25, 0);
    let x = random([1, 3, 4, 4], &mut rng);
    let lambda = 2.0;
    let agg = channel_aggregate(&x).unwrap().sub(&x).unwrap();
    let expect = x.scale(lambda).add(&agg.scale(lambda.powi(3))).unwrap();
    assert_close(&channel_aggregate(&x.scale(lambda)).unwrap(), &expect, 1e-12);
}

fn permute_positions(x: &Tensor4, perm: &[usize]) -> Tensor4 {
    let mut out = x.clone();
    for n in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.plane_of(n, c).to_vec();
            let dst = out.plane_of_mut(n, c);
            for (i, &p) in perm.iter().enumerate() {
                dst[i] = src[p];
            }
        }
    }
    out
}

fn permute_channels(x: &Tensor4, perm: &[usize]) -> Tensor4 {
    Tensor4::from_fn(x.dims(), |n, c, y, w| x.get(n, perm[c], y, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_is_position_permutation_equivariant(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed, 30);
        let x = random([1, 3, 3, 4], &mut rng);
        let w = random_weights(3, &mut rng);
        let mut perm: Vec<usize> = (0..12).collect();
        rng.shuffle(&mut perm);
        let lhs = spatial_aggregate(&permute_positions(&x, &perm), &w).unwrap();
        let rhs = permute_positions(&spatial_aggregate(&x, &w).unwrap(), &perm);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_is_channel_permutation_equivariant(seed in 0u64..10_000) {
        let mut rng = RngStream::new(seed, 31);
        let x = random([1, 4, 3, 3], &mut rng);
        let mut perm: Vec<usize> = (0..4).collect();
        rng.shuffle(&mut perm);
        let lhs = channel_aggregate(&permute_channels(&x, &perm)).unwrap();
        let rhs = permute_channels(&channel_aggregate(&x).unwrap(), &perm);
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_are_preserved(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..100) {
        let mut rng = RngStream::new(seed, 32);
        let x = random([n, c, h, w], &mut rng);
        let wts = random_weights(c, &mut rng);
        prop_assert_eq!(spatial_aggregate(&x, &wts).unwrap().dims(), x.dims());
        prop_assert_eq!(channel_aggregate(&x).unwrap().dims(), x.dims());
        prop_assert_eq!(agca_forward(&x, &wts).unwrap().dims(), x.dims());
    }
}
