use lightnl::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Triple-loop product of row-major `(n, k)` and `(k, m)` buffers.
fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| a[i * k + p] * b[p * m + j]).sum();
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

#[test]
fn bmm_matches_naive_products_in_every_transpose_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (bsz, n, k, m) = (
            rng.random_range(1..4),
            rng.random_range(1..9),
            rng.random_range(1..9),
            rng.random_range(1..9),
        );
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = random(&mut rng, &if ta { [bsz, k, n] } else { [bsz, n, k] });
            let b = random(&mut rng, &if tb { [bsz, m, k] } else { [bsz, k, m] });
            let mut g = Graph::new();
            let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
            let c = g.bmm(na, nb, ta, tb).unwrap();
            assert_eq!(g.shape(c), &[bsz, n, m]);
            for i in 0..bsz {
                let ai = &a.data()[i * n * k..(i + 1) * n * k];
                let bi = &b.data()[i * k * m..(i + 1) * k * m];
                let ai = if ta { transpose(ai, k, n) } else { ai.to_vec() };
                let bi = if tb { transpose(bi, m, k) } else { bi.to_vec() };
                let want = naive_matmul(&ai, &bi, n, k, m);
                let got = &g.value(c).data()[i * n * m..(i + 1) * n * m];
                for (x, y) in got.iter().zip(&want) {
                    approx::assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv1x1_is_a_matmul_over_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, h, w, ci, co) = (2, 3, 4, 5, 6);
    let x = random(&mut rng, &[n, h, w, ci]);
    let wt = random(&mut rng, &[ci, co]);
    let mut g = Graph::new();
    let (nx, nw) = (g.constant(x.clone()), g.constant(wt.clone()));
    let y = g.conv1x1(nx, nw, None).unwrap();
    assert_eq!(g.shape(y), &[n, h, w, co]);
    let want = naive_matmul(x.data(), wt.data(), n * h * w, ci, co);
    for (a, b) in g.value(y).data().iter().zip(&want) {
        approx::assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = g.mul(x, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}
